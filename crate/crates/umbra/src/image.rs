//! Reading and writing images as `[3×H×W]` tensors in `[0, 1]` and masks as
//! [`MaskImage`]. The format follows the file extension: `.png` goes through
//! the png crate, anything else is treated as binary netpbm.

use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;

use umbra_core::{MaskImage, Tensor};

use crate::error::{Error, Result};
use crate::pnm;

/// Channel-interleaved 8-bit or 16-bit raster as read from disk.
struct Raster {
    width: usize,
    height: usize,
    channels: usize,
    maxval: f64,
    samples: Vec<u16>,
}

fn is_png(path: &Path) -> bool {
    path.extension().is_some_and(|e| e.eq_ignore_ascii_case("png"))
}

fn read_raster(path: &Path) -> Result<Raster> {
    if is_png(path) {
        return read_png(path);
    }
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let img = pnm::decode(&bytes).map_err(|e| Error::format(path, e.to_string()))?;
    Ok(Raster {
        width: img.width,
        height: img.height,
        channels: img.channels,
        maxval: img.maxval as f64,
        samples: img.samples,
    })
}

fn read_png(path: &Path) -> Result<Raster> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let fmt = |e: png::DecodingError| Error::format(path, e.to_string());
    let mut decoder = png::Decoder::new(BufReader::new(file));
    decoder.set_transformations(png::Transformations::normalize_to_color8());
    let mut reader = decoder.read_info().map_err(fmt)?;
    let size = reader.output_buffer_size().ok_or_else(|| Error::format(path, "image too large"))?;
    let mut buf = vec![0; size];
    let info = reader.next_frame(&mut buf).map_err(fmt)?;
    let (width, height) = (info.width as usize, info.height as usize);
    let stride = info.color_type.samples();
    // alpha is dropped
    let channels = if stride >= 3 { 3 } else { 1 };
    let mut samples = Vec::with_capacity(width * height * channels);
    for row in buf[..info.buffer_size()].chunks(info.line_size) {
        for px in row[..width * stride].chunks_exact(stride) {
            samples.extend(px[..channels].iter().map(|&b| b as u16));
        }
    }
    Ok(Raster { width, height, channels, maxval: 255.0, samples })
}

/// Loads an RGB image (P6 or colour PNG) as `[3×H×W]`.
pub fn load_rgb(path: &Path) -> Result<Tensor> {
    let r = read_raster(path)?;
    if r.channels != 3 {
        return Err(Error::format(path, "expected a colour image (P6 or RGB PNG)"));
    }
    let n = r.width * r.height;
    let data = (0..3 * n).map(|i| r.samples[(i % n) * 3 + i / n] as f64 / r.maxval).collect();
    Ok(Tensor::new(&[3, r.height, r.width], data)?)
}

/// Loads a single-channel mask (P5 or greyscale PNG) scaled to `[0, 1]`.
pub fn load_mask(path: &Path) -> Result<MaskImage> {
    let r = read_raster(path)?;
    if r.channels != 1 {
        return Err(Error::format(path, "expected a greyscale mask (P5 or grey PNG)"));
    }
    let values = r.samples.iter().map(|&s| s as f64 / r.maxval).collect();
    Ok(MaskImage::new(r.height, r.width, values)?)
}

/// `[0, 1]` to 8 bits, clamping and rounding half away from zero.
pub fn quantize(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Writes interleaved 8-bit samples with 1 or 3 channels.
pub fn save_raster(path: &Path, width: usize, height: usize, channels: usize, samples: &[u8]) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = BufWriter::new(file);
    if is_png(path) {
        let mut enc = png::Encoder::new(&mut out, width as u32, height as u32);
        enc.set_color(if channels == 3 { png::ColorType::Rgb } else { png::ColorType::Grayscale });
        enc.set_depth(png::BitDepth::Eight);
        let fmt = |e: png::EncodingError| Error::format(path, e.to_string());
        let mut w = enc.write_header().map_err(fmt)?;
        w.write_image_data(samples).map_err(fmt)?;
        w.finish().map_err(fmt)?;
    } else {
        pnm::encode(&mut out, width, height, channels, samples).map_err(|e| Error::io(path, e))?;
    }
    out.flush().map_err(|e| Error::io(path, e))
}

/// Saves a `[3×H×W]` tensor as 8-bit RGB.
pub fn save_rgb(path: &Path, img: &Tensor) -> Result<()> {
    let (h, w) = match img.shape() {
        &[3, h, w] => (h, w),
        s => return Err(Error::Usage(format!("cannot save a {s:?} tensor as RGB"))),
    };
    let n = h * w;
    let d = img.data();
    let samples: Vec<u8> = (0..3 * n).map(|i| quantize(d[(i % 3) * n + i / 3])).collect();
    save_raster(path, w, h, 3, &samples)
}

/// Saves a mask as an 8-bit greymap.
pub fn save_mask(path: &Path, mask: &MaskImage) -> Result<()> {
    let samples: Vec<u8> = mask.values().iter().map(|&v| quantize(v)).collect();
    save_raster(path, mask.width(), mask.height(), 1, &samples)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quantize_inverts_scaling() {
        for k in 0..=255u8 {
            assert_eq!(quantize(k as f64 / 255.0), k);
        }
        assert_eq!(quantize(-0.3), 0);
        assert_eq!(quantize(7.0), 255);
    }
}
