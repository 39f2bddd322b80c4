//! sRGB (D65) to CIELAB.

use alloc::format;

use crate::math;
use crate::{Error, Result, Tensor};

/// Linear sRGB to XYZ, D65.
pub const RGB_TO_XYZ: [[f64; 3]; 3] = [
    [0.412453, 0.357580, 0.180423],
    [0.212671, 0.715160, 0.072169],
    [0.019334, 0.119193, 0.950227],
];

const EPSILON: f64 = 216.0 / 24389.0;
const KAPPA: f64 = 24389.0 / 27.0;

/// Inverse sRGB transfer curve.
pub fn srgb_to_linear(c: f64) -> f64 {
    if c <= 0.04045 {
        c / 12.92
    } else {
        math::powf((c + 0.055) / 1.055, 2.4)
    }
}

fn lab_f(t: f64) -> f64 {
    if t > EPSILON {
        math::cbrt(t)
    } else {
        (KAPPA * t + 16.0) / 116.0
    }
}

/// One sRGB triple in `[0, 1]` to `(L*, a*, b*)`. The reference white is the
/// image of `(1, 1, 1)` under [`RGB_TO_XYZ`], so neutral greys map to
/// `a* = b* = 0` exactly.
pub fn rgb_to_lab(rgb: [f64; 3]) -> [f64; 3] {
    let lin = rgb.map(srgb_to_linear);
    let mut xyz = [0.0; 3];
    for (out, row) in xyz.iter_mut().zip(&RGB_TO_XYZ) {
        let white: f64 = row.iter().sum();
        *out = row.iter().zip(&lin).map(|(m, v)| m * v).sum::<f64>() / white;
    }
    let [fx, fy, fz] = xyz.map(lab_f);
    [116.0 * fy - 16.0, 500.0 * (fx - fy), 200.0 * (fy - fz)]
}

/// Converts a `[3×H×W]` image. Values outside `[0, 1]` are clamped first;
/// the flag reports whether that happened.
pub fn srgb_to_lab(img: &Tensor) -> Result<(Tensor, bool)> {
    let n = match img.shape() {
        [3, h, w] => h * w,
        s => return Err(Error::Dimension(format!("expected a 3×H×W image, got {s:?}"))),
    };
    let d = img.data();
    let mut clamped = false;
    let mut out = Tensor::zeros(img.shape());
    for p in 0..n {
        let rgb = [d[p], d[n + p], d[2 * n + p]].map(|v| {
            let c = v.clamp(0.0, 1.0);
            clamped |= c != v;
            c
        });
        let lab = rgb_to_lab(rgb);
        for (ch, v) in lab.into_iter().enumerate() {
            out.data_mut()[ch * n + p] = v;
        }
    }
    Ok((out, clamped))
}
