//! Patch-level shadow classification and the shadow bounding rectangle.

use alloc::format;
use alloc::vec::Vec;

use crate::kernels;
use crate::scan::Coord;
use crate::{Error, Result, Tensor};

/// Default patch classification threshold on the mean mask value.
pub const DEFAULT_THRESHOLD: f64 = 0.5;

/// Pixel shadow mask with values in `[0, 1]`; `1` marks shadow.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskImage {
    height: usize,
    width: usize,
    values: Vec<f64>,
}

impl MaskImage {
    pub fn new(height: usize, width: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != height * width {
            return Err(Error::Dimension(format!(
                "{height}×{width} mask needs {} values, got {}",
                height * width,
                values.len()
            )));
        }
        if let Some(v) = values.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::Validation(format!("mask value {v} outside [0, 1]")));
        }
        Ok(MaskImage { height, width, values })
    }

    /// 8-bit samples scaled by 1/255.
    pub fn from_u8(height: usize, width: usize, samples: &[u8]) -> Result<Self> {
        Self::new(height, width, samples.iter().map(|&s| s as f64 / 255.0).collect())
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        MaskImage { height, width, values: alloc::vec![0.0; height * width] }
    }

    /// Binary mask that is `1` inside the pixel rectangle `[top, bottom) × [left, right)`.
    pub fn rectangle(height: usize, width: usize, top: usize, bottom: usize, left: usize, right: usize) -> Self {
        let values = (0..height * width)
            .map(|i| {
                let (y, x) = (i / width, i % width);
                if (top..bottom).contains(&y) && (left..right).contains(&x) {
                    1.0
                } else {
                    0.0
                }
            })
            .collect();
        MaskImage { height, width, values }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn at(&self, y: usize, x: usize) -> f64 {
        self.values[y * self.width + x]
    }

    /// The mask as a `[1×H×W]` tensor.
    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(&[1, self.height, self.width], self.values.clone()).expect("mask shape")
    }

    /// 2×2 max pooling; a coarse pixel is shadow if any of its sources is.
    pub fn max_pool2(&self) -> Result<Self> {
        if self.height % 2 != 0 || self.width % 2 != 0 {
            return Err(Error::Dimension(format!("cannot halve a {}×{} mask", self.height, self.width)));
        }
        let values = kernels::max_pool2(&self.values, 1, self.height, self.width);
        Ok(MaskImage { height: self.height / 2, width: self.width / 2, values })
    }

    /// Pixels with value `≥ 0.5`.
    pub fn binarized(&self) -> Vec<bool> {
        self.values.iter().map(|&v| v >= 0.5).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PatchLabel {
    Shadow,
    NonShadow,
}

/// Mask partitioned into `rows × cols` patches of `patch_size²` pixels.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchGrid {
    rows: usize,
    cols: usize,
    patch_size: usize,
    mean_mask: Vec<f64>,
    labels: Vec<PatchLabel>,
}

impl PatchGrid {
    /// Grid with explicit labels, bypassing a pixel mask. Mean values are
    /// set to 1 for shadow and 0 otherwise.
    pub fn from_labels(rows: usize, cols: usize, patch_size: usize, shadow: impl Fn(usize, usize) -> bool) -> Self {
        let mut mean_mask = Vec::with_capacity(rows * cols);
        let mut labels = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                let s = shadow(r, c);
                mean_mask.push(if s { 1.0 } else { 0.0 });
                labels.push(if s { PatchLabel::Shadow } else { PatchLabel::NonShadow });
            }
        }
        PatchGrid { rows, cols, patch_size, mean_mask, labels }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn patch_size(&self) -> usize {
        self.patch_size
    }

    pub fn mean_mask(&self, row: usize, col: usize) -> f64 {
        self.mean_mask[row * self.cols + col]
    }

    pub fn label(&self, row: usize, col: usize) -> PatchLabel {
        self.labels[row * self.cols + col]
    }

    pub fn is_shadow(&self, row: usize, col: usize) -> bool {
        self.label(row, col) == PatchLabel::Shadow
    }

    pub fn shadow_count(&self) -> usize {
        self.labels.iter().filter(|&&l| l == PatchLabel::Shadow).count()
    }

    pub fn shadow_cells(&self) -> impl Iterator<Item = Coord> + '_ {
        let cols = self.cols;
        self.labels
            .iter()
            .enumerate()
            .filter(|(_, &l)| l == PatchLabel::Shadow)
            .map(move |(i, _)| Coord::new(i / cols, i % cols))
    }
}

/// Splits `mask` into `patch_size × patch_size` blocks, averages each block and
/// labels it shadow when the mean reaches `threshold`.
pub fn partition_patches(mask: &MaskImage, patch_size: usize, threshold: f64) -> Result<PatchGrid> {
    if !(0.0..=1.0).contains(&threshold) {
        return Err(Error::Config(format!("threshold {threshold} outside [0, 1]")));
    }
    if patch_size == 0 || mask.height % patch_size != 0 || mask.width % patch_size != 0 {
        return Err(Error::Dimension(format!(
            "{}×{} mask is not divisible into {patch_size}×{patch_size} patches",
            mask.height, mask.width
        )));
    }
    let (rows, cols) = (mask.height / patch_size, mask.width / patch_size);
    let area = (patch_size * patch_size) as f64;
    let mut mean_mask = Vec::with_capacity(rows * cols);
    let mut labels = Vec::with_capacity(rows * cols);
    for r in 0..rows {
        for c in 0..cols {
            let mut sum = 0.0;
            for y in r * patch_size..(r + 1) * patch_size {
                sum += mask.values[y * mask.width + c * patch_size..y * mask.width + (c + 1) * patch_size]
                    .iter()
                    .sum::<f64>();
            }
            let mean = sum / area;
            mean_mask.push(mean);
            labels.push(if mean >= threshold { PatchLabel::Shadow } else { PatchLabel::NonShadow });
        }
    }
    Ok(PatchGrid { rows, cols, patch_size, mean_mask, labels })
}

/// Shadow region in patch coordinates (all bounds inclusive).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RegionRect {
    pub top: usize,
    pub bottom: usize,
    pub left: usize,
    pub right: usize,
}

impl RegionRect {
    pub fn new(top: usize, bottom: usize, left: usize, right: usize) -> Self {
        debug_assert!(top <= bottom && left <= right);
        RegionRect { top, bottom, left, right }
    }

    /// Extent in patch rows.
    pub fn sub_r(&self) -> usize {
        self.bottom - self.top + 1
    }

    /// Extent in patch columns.
    pub fn sub_c(&self) -> usize {
        self.right - self.left + 1
    }

    /// Integer midpoint `(row, col)`.
    pub fn center(&self) -> Coord {
        Coord::new((self.top + self.bottom) / 2, (self.left + self.right) / 2)
    }

    pub fn area(&self) -> usize {
        self.sub_r() * self.sub_c()
    }

    pub fn contains(&self, p: Coord) -> bool {
        (self.top..=self.bottom).contains(&p.row) && (self.left..=self.right).contains(&p.col)
    }

    pub fn on_perimeter(&self, p: Coord) -> bool {
        self.contains(p) && (p.row == self.top || p.row == self.bottom || p.col == self.left || p.col == self.right)
    }

    /// Cells in row-major order.
    pub fn cells(&self) -> impl Iterator<Item = Coord> + '_ {
        (self.top..=self.bottom).flat_map(move |r| (self.left..=self.right).map(move |c| Coord::new(r, c)))
    }
}

/// Tight bounding rectangle of all shadow patches.
pub fn shadow_rect(grid: &PatchGrid) -> Result<RegionRect> {
    let mut cells = grid.shadow_cells();
    let first = cells.next().ok_or(Error::NoShadowRegion)?;
    let mut rect = RegionRect::new(first.row, first.row, first.col, first.col);
    for p in cells {
        rect.top = rect.top.min(p.row);
        rect.bottom = rect.bottom.max(p.row);
        rect.left = rect.left.min(p.col);
        rect.right = rect.right.max(p.col);
    }
    Ok(rect)
}
