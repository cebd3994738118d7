//! Histogram-of-oriented-gradients descriptors, used as regression targets
//! for masked patch prediction.
//!
//! Gradients are `[-1, 0, 1]` central differences with replicated borders.
//! Orientation is unsigned (`[0°, 180°)`); bin `b` is centred on
//! `b * 180° / bins` and each pixel's magnitude is split linearly between the
//! two nearest bin centres (wrapping at 180°). Each cell histogram is then
//! L2-normalised on its own: `h / sqrt(|h|² + ε²)`.

use ndarray::{Array2, Array3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HogParams {
    pub cell_size: usize,
    pub bins: usize,
    pub epsilon: f64,
}

impl Default for HogParams {
    fn default() -> Self {
        Self {
            cell_size: 4,
            bins: 9,
            epsilon: 1e-6,
        }
    }
}

impl HogParams {
    pub fn validate(&self) -> Result<()> {
        if self.cell_size < 2 {
            return Err(Error::Config(format!(
                "HOG cell_size must be >= 2, got {}",
                self.cell_size
            )));
        }
        if self.bins < 2 {
            return Err(Error::Config(format!(
                "HOG bins must be >= 2, got {}",
                self.bins
            )));
        }
        if !(self.epsilon > 0.0) {
            return Err(Error::Config(format!(
                "HOG epsilon must be > 0, got {}",
                self.epsilon
            )));
        }
        Ok(())
    }

    /// Descriptor length for one square patch.
    pub fn patch_dim(&self, patch_size: usize) -> usize {
        let cells = patch_size / self.cell_size;
        cells * cells * self.bins
    }
}

/// Cell histograms indexed `[cell_row, cell_col, bin]`.
pub type CellGrid = Array3<f64>;

/// Per-patch descriptors, one row per patch in row-major patch order.
pub type HogTarget = Array2<f64>;

pub fn hog_descriptor(image: &Array2<f64>, params: &HogParams) -> Result<CellGrid> {
    params.validate()?;
    let (h, w) = image.dim();
    let cs = params.cell_size;
    if h == 0 || w == 0 || h % cs != 0 || w % cs != 0 {
        return Err(Error::Validation(format!(
            "image {h}x{w} is not divisible by HOG cell size {cs}"
        )));
    }
    let bins = params.bins;
    let bin_width = 180.0 / bins as f64;
    let mut grid = Array3::<f64>::zeros((h / cs, w / cs, bins));

    for y in 0..h {
        let up = y.saturating_sub(1);
        let down = (y + 1).min(h - 1);
        for x in 0..w {
            let left = x.saturating_sub(1);
            let right = (x + 1).min(w - 1);
            let gx = image[[y, right]] - image[[y, left]];
            let gy = image[[down, x]] - image[[up, x]];
            let mag = gx.hypot(gy);
            if mag == 0.0 {
                continue;
            }
            let mut angle = gy.atan2(gx).to_degrees().rem_euclid(180.0);
            if angle >= 180.0 {
                angle -= 180.0;
            }
            let pos = angle / bin_width;
            let lo = pos.floor();
            let frac = pos - lo;
            let lo = (lo as usize) % bins;
            let hi = (lo + 1) % bins;
            let (cy, cx) = (y / cs, x / cs);
            grid[[cy, cx, lo]] += mag * (1.0 - frac);
            grid[[cy, cx, hi]] += mag * frac;
        }
    }

    let eps2 = params.epsilon * params.epsilon;
    for mut hist in grid.lanes_mut(ndarray::Axis(2)) {
        let norm = (hist.iter().map(|v| v * v).sum::<f64>() + eps2).sqrt();
        hist.mapv_inplace(|v| v / norm);
    }
    Ok(grid)
}

/// Regroups the cell grid so each `patch_size` square owns the concatenation
/// of its cells' histograms (cells row-major inside the patch, patches
/// row-major across the image).
pub fn hog_targets_for_patches(
    image: &Array2<f64>,
    patch_size: usize,
    params: &HogParams,
) -> Result<HogTarget> {
    params.validate()?;
    if patch_size == 0 || patch_size % params.cell_size != 0 {
        return Err(Error::Config(format!(
            "patch size {patch_size} is not divisible by HOG cell size {}",
            params.cell_size
        )));
    }
    let (h, w) = image.dim();
    if h % patch_size != 0 || w % patch_size != 0 {
        return Err(Error::Config(format!(
            "image {h}x{w} is not divisible by patch size {patch_size}"
        )));
    }
    let grid = hog_descriptor(image, params)?;
    Ok(regroup_cells(&grid, patch_size / params.cell_size))
}

pub(crate) fn regroup_cells(grid: &CellGrid, cells_per_patch: usize) -> HogTarget {
    let (gh, gw, bins) = grid.dim();
    let (ph, pw) = (gh / cells_per_patch, gw / cells_per_patch);
    let dim = cells_per_patch * cells_per_patch * bins;
    let mut out = Array2::<f64>::zeros((ph * pw, dim));
    for py in 0..ph {
        for px in 0..pw {
            let mut row = out.row_mut(py * pw + px);
            let mut k = 0;
            for cy in 0..cells_per_patch {
                for cx in 0..cells_per_patch {
                    for b in 0..bins {
                        row[k] = grid[[py * cells_per_patch + cy, px * cells_per_patch + cx, b]];
                        k += 1;
                    }
                }
            }
        }
    }
    out
}

/// Flattens a cell grid to CSV rows `cell_row,cell_col,bin0,...`.
pub fn descriptor_csv(grid: &CellGrid) -> String {
    let (gh, gw, bins) = grid.dim();
    let mut s = String::from("cell_row,cell_col");
    for b in 0..bins {
        s.push_str(&format!(",bin{b}"));
    }
    s.push('\n');
    for cy in 0..gh {
        for cx in 0..gw {
            s.push_str(&format!("{cy},{cx}"));
            for b in 0..bins {
                s.push_str(&format!(",{}", grid[[cy, cx, b]]));
            }
            s.push('\n');
        }
    }
    s
}
