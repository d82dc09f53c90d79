//! Multi-resolution image pyramids.
//!
//! Level 0 is the coarsest image; every level above it doubles both
//! dimensions, so a window at level `t` covers the same physical area as a
//! window with origin and size scaled by `2^n` at level `t + n`.

mod io;
mod raster;

pub use io::{read_pyramid, write_pyramid, PyramidManifest, MANIFEST_FILE};
pub use raster::Raster;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::Scalar;

pub const RGB: usize = 3;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PyramidMeta {
    /// Number of levels, `N + 1`.
    pub levels: usize,
    pub base_width: usize,
    pub base_height: usize,
    pub channels: usize,
    pub color_space: String,
}

/// Stack of rasters where level `t + 1` is exactly twice the size of level `t`.
#[derive(Clone, Debug, PartialEq)]
pub struct PyramidImage<T> {
    levels: Vec<Raster<T>>,
    meta: PyramidMeta,
}

impl<T: Scalar> PyramidImage<T> {
    /// Validates the level-doubling, channel and value-range invariants.
    pub fn new(levels: Vec<Raster<T>>) -> Result<Self> {
        if levels.len() < 3 {
            return Err(Error::Format(format!(
                "pyramid needs at least 3 levels, got {}",
                levels.len()
            )));
        }
        for (t, r) in levels.iter().enumerate() {
            if r.channels() != RGB {
                return Err(Error::Format(format!("level {t} has {} channels", r.channels())));
            }
            if r.width() == 0 || r.height() == 0 {
                return Err(Error::Format(format!("level {t} is empty")));
            }
            if !r.all_unit_interval() {
                return Err(Error::Format(format!("level {t} has values outside [0,1]")));
            }
        }
        for t in 1..levels.len() {
            let (lo, hi) = (&levels[t - 1], &levels[t]);
            if hi.width() != 2 * lo.width() || hi.height() != 2 * lo.height() {
                return Err(Error::Format(format!(
                    "level {t} is {}x{}, expected twice level {} ({}x{})",
                    hi.width(),
                    hi.height(),
                    t - 1,
                    lo.width(),
                    lo.height()
                )));
            }
        }
        let meta = PyramidMeta {
            levels: levels.len(),
            base_width: levels[0].width(),
            base_height: levels[0].height(),
            channels: RGB,
            color_space: "rgb".into(),
        };
        Ok(PyramidImage { levels, meta })
    }

    /// Builds every lower level from `top` by repeated 2x2 averaging.
    pub fn from_top(top: Raster<T>, levels: usize) -> Result<Self> {
        let mut stack = vec![top];
        for _ in 1..levels {
            let next = stack.last().expect("non-empty").avg_pool(2);
            stack.push(next);
        }
        stack.reverse();
        Self::new(stack)
    }

    pub fn meta(&self) -> &PyramidMeta {
        &self.meta
    }

    /// Index of the highest-resolution level (`N`).
    pub fn top_level(&self) -> usize {
        self.levels.len() - 1
    }

    pub fn num_levels(&self) -> usize {
        self.levels.len()
    }

    pub fn level(&self, t: usize) -> Result<&Raster<T>> {
        self.levels.get(t).ok_or(Error::LevelOutOfRange {
            level: t,
            top: self.top_level(),
        })
    }

    pub fn levels(&self) -> &[Raster<T>] {
        &self.levels
    }

    /// Pixels referenced by `p`.
    pub fn extract(&self, p: &PatchRef) -> Result<Raster<T>> {
        let r = self.level(p.level)?;
        if !p.fits(r.width(), r.height()) {
            return Err(Error::OutOfBounds(p.to_string()));
        }
        r.crop(p.row, p.col, p.height, p.width)
    }

    /// Same pyramid with every level snapped to the 8-bit grid.
    pub fn quantized(&self) -> Self {
        PyramidImage {
            levels: self.levels.iter().map(Raster::quantized).collect(),
            meta: self.meta.clone(),
        }
    }

    pub fn cast<U: Scalar>(&self) -> PyramidImage<U> {
        PyramidImage {
            levels: self.levels.iter().map(Raster::cast).collect(),
            meta: self.meta.clone(),
        }
    }
}

/// Level-addressed rectangular window.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct PatchRef {
    pub level: usize,
    pub row: usize,
    pub col: usize,
    pub height: usize,
    pub width: usize,
}

impl std::fmt::Display for PatchRef {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "L{} ({},{}) {}x{}",
            self.level, self.row, self.col, self.height, self.width
        )
    }
}

impl PatchRef {
    pub fn new(level: usize, row: usize, col: usize, height: usize, width: usize) -> Self {
        PatchRef {
            level,
            row,
            col,
            height,
            width,
        }
    }

    pub fn square(level: usize, row: usize, col: usize, size: usize) -> Self {
        Self::new(level, row, col, size, size)
    }

    pub fn fits(&self, level_width: usize, level_height: usize) -> bool {
        self.height > 0
            && self.width > 0
            && self.row + self.height <= level_height
            && self.col + self.width <= level_width
    }

    /// Window at level `level + n` covering the same area; `top` is the
    /// highest level index available.
    pub fn child_region(&self, n: usize, top: usize) -> Result<PatchRef> {
        let level = self.level + n;
        if level > top {
            return Err(Error::LevelOutOfRange { level, top });
        }
        let s = 1usize << n;
        Ok(PatchRef {
            level,
            row: self.row * s,
            col: self.col * s,
            height: self.height * s,
            width: self.width * s,
        })
    }

    /// The `4^n` windows at level `level + n`, each the size of `self`, that
    /// tile [`child_region`](Self::child_region) in row-major order.
    pub fn children_set(&self, n: usize, top: usize) -> Result<Vec<PatchRef>> {
        let region = self.child_region(n, top)?;
        let side = 1usize << n;
        let mut out = Vec::with_capacity(side * side);
        for i in 0..side {
            for j in 0..side {
                out.push(PatchRef {
                    level: region.level,
                    row: region.row + i * self.height,
                    col: region.col + j * self.width,
                    height: self.height,
                    width: self.width,
                });
            }
        }
        Ok(out)
    }

    /// Index of `child` inside `children_set(n)`, if it is a member.
    pub fn child_index(&self, child: &PatchRef, n: usize) -> Option<usize> {
        let side = 1usize << n;
        if child.level != self.level + n || child.height != self.height || child.width != self.width {
            return None;
        }
        let (r0, c0) = (self.row * side, self.col * side);
        if child.row < r0 || child.col < c0 {
            return None;
        }
        let (dr, dc) = (child.row - r0, child.col - c0);
        if dr % self.height != 0 || dc % self.width != 0 {
            return None;
        }
        let (i, j) = (dr / self.height, dc / self.width);
        (i < side && j < side).then_some(i * side + j)
    }
}

/// Background pixel rule: bright and nearly grey.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WhiteRule {
    /// A pixel is background only if every channel exceeds this.
    pub luminance: f64,
    /// ...and its channel spread (max - min) is below this.
    pub saturation: f64,
}

impl Default for WhiteRule {
    fn default() -> Self {
        WhiteRule {
            luminance: 0.85,
            saturation: 0.05,
        }
    }
}

impl WhiteRule {
    pub fn is_background<T: Scalar>(&self, px: &[T]) -> bool {
        let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
        for v in px {
            let v = v.to_f64_lossy();
            lo = lo.min(v);
            hi = hi.max(v);
        }
        lo > self.luminance && hi - lo < self.saturation
    }
}

/// Fraction of background pixels in `patch`.
pub fn whiteness<T: Scalar>(patch: &Raster<T>, rule: &WhiteRule) -> f64 {
    let total = patch.width() * patch.height();
    if total == 0 {
        return 0.0;
    }
    let white = patch.pixels().filter(|px| rule.is_background(px)).count();
    white as f64 / total as f64
}

/// Per-tile tissue flags for one level.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TissueMask {
    pub level: usize,
    pub tile_size: usize,
    pub rows: usize,
    pub cols: usize,
    /// Row-major, `true` where the tile is tissue.
    pub grid: Vec<bool>,
}

impl TissueMask {
    /// Marks each `tile_size` tile (the last row/column may be partial) as
    /// tissue when its whiteness does not exceed `max_white`.
    pub fn compute<T: Scalar>(
        img: &PyramidImage<T>,
        level: usize,
        tile_size: usize,
        rule: &WhiteRule,
        max_white: f64,
    ) -> Result<Self> {
        if tile_size == 0 {
            return Err(Error::Config("tile size must be positive".into()));
        }
        let r = img.level(level)?;
        let rows = r.height().div_ceil(tile_size);
        let cols = r.width().div_ceil(tile_size);
        let mut grid = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                let (y, x) = (i * tile_size, j * tile_size);
                let h = tile_size.min(r.height() - y);
                let w = tile_size.min(r.width() - x);
                let tile = r.crop(y, x, h, w)?;
                grid.push(whiteness(&tile, rule) <= max_white);
            }
        }
        Ok(TissueMask {
            level,
            tile_size,
            rows,
            cols,
            grid,
        })
    }

    pub fn is_tissue(&self, row: usize, col: usize) -> bool {
        self.grid[row * self.cols + col]
    }

    pub fn tissue_fraction(&self) -> f64 {
        self.grid.iter().filter(|&&b| b).count() as f64 / self.grid.len().max(1) as f64
    }
}
