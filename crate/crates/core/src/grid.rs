//! Regular cell-centred 2D grids. A grid with `ny = 1` is a 1D strip.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Grid2 {
    pub x_min: f64,
    pub x_max: f64,
    pub y_min: f64,
    pub y_max: f64,
    pub nx: usize,
    pub ny: usize,
}

impl Grid2 {
    pub fn new(x: (f64, f64), y: (f64, f64), nx: usize, ny: usize) -> Result<Self> {
        let g = Grid2 {
            x_min: x.0,
            x_max: x.1,
            y_min: y.0,
            y_max: y.1,
            nx,
            ny,
        };
        g.validate()?;
        Ok(g)
    }

    /// Square box `[lo, hi]²` with `n × n` cells.
    pub fn square(lo: f64, hi: f64, n: usize) -> Result<Self> {
        Self::new((lo, hi), (lo, hi), n, n)
    }

    /// 1D strip of `n` cells on `[lo, hi]`.
    pub fn strip(lo: f64, hi: f64, n: usize) -> Result<Self> {
        Self::new((lo, hi), (0.0, 1.0), n, 1)
    }

    pub fn validate(&self) -> Result<()> {
        let finite = [self.x_min, self.x_max, self.y_min, self.y_max]
            .iter()
            .all(|v| v.is_finite());
        if !finite || self.x_max <= self.x_min || self.y_max <= self.y_min {
            return Err(Error::Degenerate(format!("grid extents are degenerate: {self:?}")));
        }
        if self.nx == 0 || self.ny == 0 {
            return Err(Error::Degenerate("grid needs at least one cell per axis".into()));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.nx * self.ny
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn hx(&self) -> f64 {
        (self.x_max - self.x_min) / self.nx as f64
    }

    pub fn hy(&self) -> f64 {
        (self.y_max - self.y_min) / self.ny as f64
    }

    /// Linear cell index; `iy` runs fastest.
    #[inline]
    pub fn index(&self, ix: usize, iy: usize) -> usize {
        ix * self.ny + iy
    }

    #[inline]
    pub fn coords(&self, i: usize) -> (usize, usize) {
        (i / self.ny, i % self.ny)
    }

    #[inline]
    pub fn center(&self, i: usize) -> (f64, f64) {
        let (ix, iy) = self.coords(i);
        (
            self.x_min + (ix as f64 + 0.5) * self.hx(),
            self.y_min + (iy as f64 + 0.5) * self.hy(),
        )
    }

    pub fn contains(&self, x: f64, y: f64) -> bool {
        x >= self.x_min && x <= self.x_max && y >= self.y_min && y <= self.y_max
    }

    /// Cell containing `(x, y)`, clamped to the box.
    pub fn cell_of(&self, x: f64, y: f64) -> usize {
        let fx = ((x - self.x_min) / self.hx()).floor();
        let fy = ((y - self.y_min) / self.hy()).floor();
        let ix = (fx.max(0.0) as usize).min(self.nx - 1);
        let iy = (fy.max(0.0) as usize).min(self.ny - 1);
        self.index(ix, iy)
    }

    /// Neighbouring cells along the axes (up to four).
    pub fn neighbors(&self, i: usize) -> impl Iterator<Item = usize> + '_ {
        let (ix, iy) = self.coords(i);
        let cand = [
            (ix > 0).then(|| self.index(ix - 1, iy)),
            (ix + 1 < self.nx).then(|| self.index(ix + 1, iy)),
            (iy > 0).then(|| self.index(ix, iy - 1)),
            (iy + 1 < self.ny).then(|| self.index(ix, iy + 1)),
        ];
        cand.into_iter().flatten()
    }

    /// Central-difference gradient of a cell field; one-sided at the edges.
    pub fn gradient(&self, f: &[f64], i: usize) -> (f64, f64) {
        let (ix, iy) = self.coords(i);
        let diff = |lo: usize, hi: usize, span: f64| (f[hi] - f[lo]) / span;
        let gx = if self.nx == 1 {
            0.0
        } else if ix == 0 {
            diff(i, self.index(1, iy), self.hx())
        } else if ix + 1 == self.nx {
            diff(self.index(ix - 1, iy), i, self.hx())
        } else {
            diff(self.index(ix - 1, iy), self.index(ix + 1, iy), 2.0 * self.hx())
        };
        let gy = if self.ny == 1 {
            0.0
        } else if iy == 0 {
            diff(i, self.index(ix, 1), self.hy())
        } else if iy + 1 == self.ny {
            diff(self.index(ix, iy - 1), i, self.hy())
        } else {
            diff(self.index(ix, iy - 1), self.index(ix, iy + 1), 2.0 * self.hy())
        };
        (gx, gy)
    }
}
