//! PSNR and SSIM in RGB, RMSE in CIELAB, restricted to shadow, non-shadow or
//! whole-image pixel sets.

use alloc::format;
use alloc::vec::Vec;

use crate::color::srgb_to_lab;
use crate::kernels::resize_bilinear;
use crate::math;
use crate::{Error, MaskImage, Result, Tensor};

pub const PSNR_CAP: f64 = 100.0;
pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_C1: f64 = 0.01 * 0.01;
pub const SSIM_C2: f64 = 0.03 * 0.03;
pub const EVAL_SIZE: usize = 256;

fn image_dims(pred: &Tensor, gt: &Tensor) -> Result<(usize, usize)> {
    match (pred.shape(), gt.shape()) {
        ([3, h, w], s) if s == pred.shape() => Ok((*h, *w)),
        (a, b) => Err(Error::Dimension(format!("metric inputs {a:?} and {b:?} must both be 3×H×W"))),
    }
}

fn check_region(region: Option<&[bool]>, n: usize) -> Result<usize> {
    match region {
        None => Ok(n),
        Some(r) if r.len() != n => {
            Err(Error::Dimension(format!("region has {} pixels, image has {n}", r.len())))
        }
        Some(r) => match r.iter().filter(|&&b| b).count() {
            0 => Err(Error::UndefinedRegion),
            k => Ok(k),
        },
    }
}

fn selected(region: Option<&[bool]>, p: usize) -> bool {
    region.map_or(true, |r| r[p])
}

/// Mean squared error over the selected pixels and all channels.
pub fn mse(pred: &Tensor, gt: &Tensor, region: Option<&[bool]>) -> Result<f64> {
    let (h, w) = image_dims(pred, gt)?;
    let n = h * w;
    let count = check_region(region, n)?;
    let mut total = 0.0;
    for (i, (a, b)) in pred.data().iter().zip(gt.data()).enumerate() {
        if selected(region, i % n) {
            total += (a - b) * (a - b);
        }
    }
    Ok(total / (3 * count) as f64)
}

/// `10·log10(1/MSE)` with peak 1, capped at [`PSNR_CAP`].
pub fn psnr(pred: &Tensor, gt: &Tensor, region: Option<&[bool]>) -> Result<f64> {
    let e = mse(pred, gt, region)?;
    if e == 0.0 {
        return Ok(PSNR_CAP);
    }
    Ok((10.0 * math::log10(1.0 / e)).min(PSNR_CAP))
}

/// RMSE in CIELAB over selected pixels × channels.
pub fn rmse_lab(pred: &Tensor, gt: &Tensor, region: Option<&[bool]>) -> Result<f64> {
    image_dims(pred, gt)?;
    let (a, _) = srgb_to_lab(pred)?;
    let (b, _) = srgb_to_lab(gt)?;
    Ok(math::sqrt(mse(&a, &b, region)?))
}

fn gaussian_taps() -> [f64; SSIM_WINDOW] {
    let r = (SSIM_WINDOW / 2) as f64;
    let mut g = [0.0; SSIM_WINDOW];
    for (i, v) in g.iter_mut().enumerate() {
        let d = i as f64 - r;
        *v = math::exp(-d * d / (2.0 * SSIM_SIGMA * SSIM_SIGMA));
    }
    g
}

// Separable Gaussian blur whose window is cut at the border and renormalized
// over the taps that remain.
fn blur(x: &[f64], h: usize, w: usize, g: &[f64; SSIM_WINDOW]) -> Vec<f64> {
    let r = SSIM_WINDOW / 2;
    let pass = |src: &[f64], len: usize, at: &dyn Fn(usize, usize) -> usize, outer: usize| {
        let mut out = alloc::vec![0.0; src.len()];
        for o in 0..outer {
            for i in 0..len {
                let lo = i.saturating_sub(r);
                let hi = (i + r).min(len - 1);
                let (mut acc, mut norm) = (0.0, 0.0);
                for j in lo..=hi {
                    let wgt = g[j + r - i];
                    acc += wgt * src[at(o, j)];
                    norm += wgt;
                }
                out[at(o, i)] = acc / norm;
            }
        }
        out
    };
    let rows = pass(x, w, &|y, j| y * w + j, h);
    pass(&rows, h, &|xx, j| j * w + xx, w)
}

/// Per-pixel SSIM of one channel pair.
pub fn ssim_map(a: &[f64], b: &[f64], h: usize, w: usize) -> Vec<f64> {
    let g = gaussian_taps();
    let prod = |u: &[f64], v: &[f64]| u.iter().zip(v).map(|(p, q)| p * q).collect::<Vec<_>>();
    let mu_a = blur(a, h, w, &g);
    let mu_b = blur(b, h, w, &g);
    let aa = blur(&prod(a, a), h, w, &g);
    let bb = blur(&prod(b, b), h, w, &g);
    let ab = blur(&prod(a, b), h, w, &g);
    (0..h * w)
        .map(|p| {
            let (ma, mb) = (mu_a[p], mu_b[p]);
            let va = aa[p] - ma * ma;
            let vb = bb[p] - mb * mb;
            let cov = ab[p] - ma * mb;
            ((2.0 * ma * mb + SSIM_C1) * (2.0 * cov + SSIM_C2))
                / ((ma * ma + mb * mb + SSIM_C1) * (va + vb + SSIM_C2))
        })
        .collect()
}

/// Mean SSIM over channels and selected pixels.
pub fn ssim(pred: &Tensor, gt: &Tensor, region: Option<&[bool]>) -> Result<f64> {
    let (h, w) = image_dims(pred, gt)?;
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(Error::Config(format!("SSIM needs at least {SSIM_WINDOW}×{SSIM_WINDOW}, got {h}×{w}")));
    }
    let n = h * w;
    let count = check_region(region, n)?;
    let mut total = 0.0;
    for c in 0..3 {
        let map = ssim_map(&pred.data()[c * n..(c + 1) * n], &gt.data()[c * n..(c + 1) * n], h, w);
        total += map.iter().enumerate().filter(|(p, _)| selected(region, *p)).map(|(_, v)| v).sum::<f64>();
    }
    Ok(total / (3 * count) as f64)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RegionMetrics {
    pub psnr: f64,
    pub ssim: f64,
    pub rmse_lab: f64,
}

/// Metrics for the shadow (S), non-shadow (NS) and whole-image (ALL)
/// regions. A region without pixels is `None`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MetricsReport {
    pub shadow: Option<RegionMetrics>,
    pub non_shadow: Option<RegionMetrics>,
    pub all: Option<RegionMetrics>,
}

impl MetricsReport {
    pub fn regions(&self) -> [(&'static str, Option<RegionMetrics>); 3] {
        [("S", self.shadow), ("NS", self.non_shadow), ("ALL", self.all)]
    }
}

fn region_metrics(pred: &Tensor, gt: &Tensor, region: Option<&[bool]>) -> Result<Option<RegionMetrics>> {
    let out = (|| {
        Ok(RegionMetrics {
            psnr: psnr(pred, gt, region)?,
            ssim: ssim(pred, gt, region)?,
            rmse_lab: rmse_lab(pred, gt, region)?,
        })
    })();
    match out {
        Ok(m) => Ok(Some(m)),
        Err(Error::UndefinedRegion) => Ok(None),
        Err(e) => Err(e),
    }
}

/// Bilinear resize of a `[c×h×w]` tensor with half-pixel centres.
pub fn resize(img: &Tensor, oh: usize, ow: usize) -> Result<Tensor> {
    let (c, h, w) = img.as_map()?;
    Tensor::new(&[c, oh, ow], resize_bilinear(img.data(), c, h, w, oh, ow))
}

/// Full report. With `resize_to_256`, prediction, target and mask are first
/// resized bilinearly to 256×256; the mask is binarized at 0.5 afterwards.
pub fn evaluate(pred: &Tensor, gt: &Tensor, mask: &MaskImage, resize_to_256: bool) -> Result<MetricsReport> {
    let (pred, gt, mask) = if resize_to_256 {
        let m = resize(&mask.to_tensor(), EVAL_SIZE, EVAL_SIZE)?;
        let values = m.into_data().into_iter().map(|v| v.clamp(0.0, 1.0)).collect();
        (
            resize(pred, EVAL_SIZE, EVAL_SIZE)?,
            resize(gt, EVAL_SIZE, EVAL_SIZE)?,
            MaskImage::new(EVAL_SIZE, EVAL_SIZE, values)?,
        )
    } else {
        (pred.clone(), gt.clone(), mask.clone())
    };
    let (h, w) = image_dims(&pred, &gt)?;
    if (mask.height(), mask.width()) != (h, w) {
        return Err(Error::Dimension(format!(
            "mask {}×{} does not match image {h}×{w}",
            mask.height(),
            mask.width()
        )));
    }
    let s = mask.binarized();
    let ns: Vec<bool> = s.iter().map(|b| !b).collect();
    Ok(MetricsReport {
        shadow: region_metrics(&pred, &gt, Some(&s))?,
        non_shadow: region_metrics(&pred, &gt, Some(&ns))?,
        all: region_metrics(&pred, &gt, None)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(seed: u64, h: usize, w: usize) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn(&[3, h, w], |_| rng.gen_range(0.0..1.0))
    }

    // Direct 2D window sum with explicit border truncation.
    fn naive_ssim_map(a: &[f64], b: &[f64], h: usize, w: usize) -> Vec<f64> {
        let r = 5isize;
        let mut out = vec![0.0; h * w];
        for y in 0..h as isize {
            for x in 0..w as isize {
                let mut s = [0.0; 6];
                for dy in -r..=r {
                    for dx in -r..=r {
                        let (yy, xx) = (y + dy, x + dx);
                        if yy < 0 || xx < 0 || yy >= h as isize || xx >= w as isize {
                            continue;
                        }
                        let wgt = math::exp(-((dy * dy + dx * dx) as f64) / 4.5);
                        let (p, q) = (a[(yy as usize) * w + xx as usize], b[(yy as usize) * w + xx as usize]);
                        for (acc, v) in s.iter_mut().zip([1.0, p, q, p * p, q * q, p * q]) {
                            *acc += wgt * v;
                        }
                    }
                }
                let [n, sa, sb, saa, sbb, sab] = s;
                let (ma, mb) = (sa / n, sb / n);
                let (va, vb, cv) = (saa / n - ma * ma, sbb / n - mb * mb, sab / n - ma * mb);
                out[(y as usize) * w + x as usize] = ((2.0 * ma * mb + SSIM_C1) * (2.0 * cv + SSIM_C2))
                    / ((ma * ma + mb * mb + SSIM_C1) * (va + vb + SSIM_C2));
            }
        }
        out
    }

    #[test]
    fn separable_ssim_matches_direct_window() {
        let (a, b) = (random(1, 13, 17), random(2, 13, 17));
        let n = 13 * 17;
        let fast = ssim_map(&a.data()[..n], &b.data()[..n], 13, 17);
        let slow = naive_ssim_map(&a.data()[..n], &b.data()[..n], 13, 17);
        for (f, s) in fast.iter().zip(&slow) {
            assert!((f - s).abs() < 1e-12);
        }
    }

    #[test]
    fn identical_images_are_perfect() {
        let a = random(3, 16, 16);
        assert_eq!(psnr(&a, &a, None).unwrap(), PSNR_CAP);
        assert!((ssim(&a, &a, None).unwrap() - 1.0).abs() < 1e-12);
        assert_eq!(rmse_lab(&a, &a, None).unwrap(), 0.0);
    }

    #[test]
    fn uniform_offset_psnr() {
        let a = Tensor::full(&[3, 12, 12], 0.3);
        let b = Tensor::full(&[3, 12, 12], 0.4);
        assert!((psnr(&a, &b, None).unwrap() - 20.0).abs() < 1e-6);
    }

    #[test]
    fn half_region_psnr() {
        let a = Tensor::full(&[3, 4, 4], 0.2);
        let mut b = a.clone();
        let region: Vec<bool> = (0..16).map(|p| p < 8).collect();
        for c in 0..3 {
            for p in 0..8 {
                b.data_mut()[c * 16 + p] = 0.7;
            }
        }
        let want = 10.0 * math::log10(4.0);
        assert!((psnr(&a, &b, Some(&region)).unwrap() - want).abs() < 1e-9);
        assert!((want - 6.0206).abs() < 1e-4);
    }

    #[test]
    fn constant_ssim_matches_reference() {
        // scikit-image structural_similarity, gaussian window, σ 1.5, data_range 1
        let a = Tensor::full(&[3, 32, 32], 0.5);
        let b = Tensor::full(&[3, 32, 32], 0.6);
        assert!((ssim(&a, &b, None).unwrap() - 0.9836092443861661).abs() < 1e-6);
    }

    #[test]
    fn inverted_binary_image_has_negative_ssim() {
        let a = Tensor::from_fn(&[3, 16, 16], |i| ((i / 16 + i % 16) % 2) as f64);
        let b = a.map(|v| 1.0 - v);
        assert!(ssim(&a, &b, None).unwrap() < 0.0);
    }

    #[test]
    fn small_image_ssim_is_a_config_error() {
        let a = Tensor::zeros(&[3, 8, 8]);
        assert!(matches!(ssim(&a, &a, None), Err(Error::Config(_))));
    }

    #[test]
    fn black_vs_white_rmse() {
        let a = Tensor::zeros(&[3, 2, 2]);
        let b = Tensor::full(&[3, 2, 2], 1.0);
        let want = math::sqrt(100.0 * 100.0 / 3.0);
        assert!((rmse_lab(&a, &b, None).unwrap() - want).abs() < 1e-3);
    }

    #[test]
    fn empty_region_is_undefined() {
        let a = Tensor::zeros(&[3, 12, 12]);
        let none = vec![false; 144];
        assert!(matches!(psnr(&a, &a, Some(&none)), Err(Error::UndefinedRegion)));
        assert!(matches!(rmse_lab(&a, &a, Some(&none)), Err(Error::UndefinedRegion)));
        let r = evaluate(&a, &a, &MaskImage::zeros(12, 12), false).unwrap();
        assert!(r.shadow.is_none());
        assert_eq!(r.non_shadow.unwrap().psnr, PSNR_CAP);
    }

    #[test]
    fn shadow_only_error_fixture() {
        let gt = random(5, 16, 16);
        let mask = MaskImage::rectangle(16, 16, 4, 10, 3, 12);
        let mut pred = gt.clone();
        for (i, v) in pred.data_mut().iter_mut().enumerate() {
            if mask.values()[i % 256] == 1.0 {
                *v *= 0.5;
            }
        }
        let r = evaluate(&pred, &gt, &mask, false).unwrap();
        assert_eq!(r.non_shadow.unwrap().psnr, PSNR_CAP);
        let s = r.shadow.unwrap().psnr;
        assert!(s.is_finite() && s < PSNR_CAP);
    }

    #[test]
    fn resized_identical_images_stay_perfect() {
        let a = random(6, 20, 24);
        let r = evaluate(&a, &a, &MaskImage::rectangle(20, 24, 5, 15, 5, 15), true).unwrap();
        for (_, m) in r.regions() {
            let m = m.unwrap();
            assert_eq!((m.psnr, m.rmse_lab), (PSNR_CAP, 0.0));
            assert!((m.ssim - 1.0).abs() < 1e-12);
        }
    }

    proptest! {
        #[test]
        fn all_mse_is_weighted_mean_of_parts(seed in 0u64..1000, top in 0usize..6, left in 0usize..6) {
            let (a, b) = (random(seed, 8, 8), random(seed + 1, 8, 8));
            let mask = MaskImage::rectangle(8, 8, top, top + 2, left, left + 3);
            let s = mask.binarized();
            let ns: Vec<bool> = s.iter().map(|v| !v).collect();
            let k = s.iter().filter(|&&v| v).count() as f64;
            let all = mse(&a, &b, None).unwrap();
            let parts = (k * mse(&a, &b, Some(&s)).unwrap() + (64.0 - k) * mse(&a, &b, Some(&ns)).unwrap()) / 64.0;
            prop_assert!((all - parts).abs() <= 1e-12);
            let (rs, rn, ra) = (
                rmse_lab(&a, &b, Some(&s)).unwrap(),
                rmse_lab(&a, &b, Some(&ns)).unwrap(),
                rmse_lab(&a, &b, None).unwrap(),
            );
            prop_assert!(ra >= rs.min(rn) - 1e-12 && ra <= rs.max(rn) + 1e-12);
        }

        #[test]
        fn metrics_are_symmetric(seed in 0u64..1000) {
            let (a, b) = (random(seed, 6, 6), random(seed + 7, 6, 6));
            prop_assert_eq!(psnr(&a, &b, None).unwrap(), psnr(&b, &a, None).unwrap());
            prop_assert!((rmse_lab(&a, &b, None).unwrap() - rmse_lab(&b, &a, None).unwrap()).abs() < 1e-12);
        }

        #[test]
        fn shrinking_the_error_never_hurts(seed in 0u64..1000, t in 0.0f64..1.0) {
            let (a, b) = (random(seed, 6, 6), random(seed + 3, 6, 6));
            let closer = Tensor::from_fn(&[3, 6, 6], |i| a.data()[i] + t * (b.data()[i] - a.data()[i]));
            prop_assert!(psnr(&closer, &a, None).unwrap() >= psnr(&b, &a, None).unwrap());
            prop_assert!(mse(&closer, &a, None).unwrap() <= mse(&b, &a, None).unwrap());
        }

        #[test]
        fn ssim_is_bounded(seed in 0u64..200) {
            let (a, b) = (random(seed, 12, 12), random(seed + 9, 12, 12));
            let v = ssim(&a, &b, None).unwrap();
            prop_assert!((-1.0..=1.0).contains(&v));
        }
    }
}
