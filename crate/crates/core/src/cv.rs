//! Collective variables `ξ: R^d → R^m` and their Jacobians.
//!
//! Tabulated membership functions are interpolated bilinearly between cell
//! centres. Queries outside the table box are clamped to the box edge and
//! reported through the `clamped` flag rather than failing.

use std::io::{BufRead, Write};
use std::path::Path;
use std::sync::Arc;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::Grid2;

/// Cell-centred scalar table on a 2D grid.
#[derive(Debug, Clone, PartialEq)]
pub struct ChiTable {
    pub grid: Grid2,
    pub values: Vec<f64>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ChiHeader {
    grid: Grid2,
    hx: f64,
    hy: f64,
    columns: Vec<String>,
}

impl ChiTable {
    pub fn new(grid: Grid2, values: Vec<f64>) -> Result<Self> {
        grid.validate()?;
        if values.len() != grid.len() {
            return Err(Error::DimensionMismatch {
                expected: grid.len(),
                actual: values.len(),
            });
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidInput("table contains non-finite values".into()));
        }
        Ok(ChiTable { grid, values })
    }

    /// Bilinear value and gradient at `(x, y)`; the flag is set outside the box.
    pub fn eval_with_gradient(&self, x: f64, y: f64) -> (f64, [f64; 2], bool) {
        let g = &self.grid;
        let clamped = !g.contains(x, y);
        let (i0, tx, dx_active) = axis(x, g.x_min, g.hx(), g.nx);
        let (j0, ty, dy_active) = axis(y, g.y_min, g.hy(), g.ny);
        let i1 = (i0 + 1).min(g.nx - 1);
        let j1 = (j0 + 1).min(g.ny - 1);
        let f00 = self.values[g.index(i0, j0)];
        let f10 = self.values[g.index(i1, j0)];
        let f01 = self.values[g.index(i0, j1)];
        let f11 = self.values[g.index(i1, j1)];
        let value = f00 * (1.0 - tx) * (1.0 - ty) + f10 * tx * (1.0 - ty) + f01 * (1.0 - tx) * ty + f11 * tx * ty;
        let gx = if dx_active {
            ((f10 - f00) * (1.0 - ty) + (f11 - f01) * ty) / g.hx()
        } else {
            0.0
        };
        let gy = if dy_active {
            ((f01 - f00) * (1.0 - tx) + (f11 - f10) * tx) / g.hy()
        } else {
            0.0
        };
        (value, [gx, gy], clamped)
    }

    pub fn eval(&self, x: f64, y: f64) -> (f64, bool) {
        let (v, _, c) = self.eval_with_gradient(x, y);
        (v, c)
    }

    /// Writes `x,y,chi` rows to `csv` and the grid description to `header`.
    pub fn save(&self, csv: &Path, header: &Path) -> Result<()> {
        let file = std::fs::File::create(csv).map_err(|e| Error::io(csv, e))?;
        let mut w = std::io::BufWriter::new(file);
        writeln!(w, "x,y,chi").map_err(|e| Error::io(csv, e))?;
        for i in 0..self.grid.len() {
            let (x, y) = self.grid.center(i);
            writeln!(w, "{x},{y},{}", self.values[i]).map_err(|e| Error::io(csv, e))?;
        }
        w.flush().map_err(|e| Error::io(csv, e))?;
        let h = ChiHeader {
            grid: self.grid,
            hx: self.grid.hx(),
            hy: self.grid.hy(),
            columns: vec!["x".into(), "y".into(), "chi".into()],
        };
        std::fs::write(header, serde_json::to_string_pretty(&h)?).map_err(|e| Error::io(header, e))
    }

    pub fn load(csv: &Path, header: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(header).map_err(|e| Error::io(header, e))?;
        let h: ChiHeader = serde_json::from_str(&text)?;
        let file = std::fs::File::open(csv).map_err(|e| Error::io(csv, e))?;
        let mut values = Vec::with_capacity(h.grid.len());
        for (n, line) in std::io::BufReader::new(file).lines().enumerate() {
            let line = line.map_err(|e| Error::io(csv, e))?;
            if n == 0 || line.trim().is_empty() {
                continue;
            }
            let v = line
                .rsplit(',')
                .next()
                .and_then(|s| s.trim().parse::<f64>().ok())
                .ok_or_else(|| Error::InvalidInput(format!("{}: bad row {}", csv.display(), n + 1)))?;
            values.push(v);
        }
        Self::new(h.grid, values)
    }
}

/// Lower node index, fractional offset, and whether the derivative along this
/// axis is nonzero (false once the query is clamped to the outer centres).
#[inline]
fn axis(x: f64, lo: f64, h: f64, n: usize) -> (usize, f64, bool) {
    if n == 1 {
        return (0, 0.0, false);
    }
    let u = (x - lo) / h - 0.5;
    let top = (n - 1) as f64;
    if u <= 0.0 {
        (0, 0.0, false)
    } else if u >= top {
        (n - 2, 1.0, false)
    } else {
        let i = (u.floor() as usize).min(n - 2);
        (i, u - i as f64, true)
    }
}

#[derive(Debug, Clone)]
pub enum CollectiveVariable {
    /// `ξ(x) = A x + b` with `A` of shape `m × d` (row-major).
    Linear { matrix: Vec<Vec<f64>>, offset: Vec<f64> },
    /// Interpolated table in the first two coordinates.
    GridChi(Arc<ChiTable>),
    /// Table composed with the first two rows of a rotation: `χ(ℛx)`.
    RotatedChi { table: Arc<ChiTable>, rows: [Vec<f64>; 2] },
}

impl CollectiveVariable {
    /// `ξ(x) = x_k`.
    pub fn coordinate(k: usize, d: usize) -> Self {
        let mut row = vec![0.0; d];
        row[k] = 1.0;
        CollectiveVariable::Linear {
            matrix: vec![row],
            offset: vec![0.0],
        }
    }

    pub fn grid_chi(table: ChiTable) -> Self {
        CollectiveVariable::GridChi(Arc::new(table))
    }

    /// `χ(ℛx)` where ℛ holds the first two rows of `rotation` (`d × d`).
    pub fn rotated_chi(table: Arc<ChiTable>, rotation: &DMatrix<f64>) -> Result<Self> {
        if rotation.nrows() < 2 || rotation.nrows() != rotation.ncols() {
            return Err(Error::InvalidInput("rotation must be square with d >= 2".into()));
        }
        let row = |k: usize| rotation.row(k).iter().copied().collect::<Vec<_>>();
        Ok(CollectiveVariable::RotatedChi {
            table,
            rows: [row(0), row(1)],
        })
    }

    pub fn latent_dim(&self) -> usize {
        match self {
            CollectiveVariable::Linear { matrix, .. } => matrix.len(),
            _ => 1,
        }
    }

    /// Input dimension, when fixed by the CV itself.
    pub fn input_dim(&self) -> Option<usize> {
        match self {
            CollectiveVariable::Linear { matrix, .. } => matrix.first().map(|r| r.len()),
            CollectiveVariable::GridChi(_) => None,
            CollectiveVariable::RotatedChi { rows, .. } => Some(rows[0].len()),
        }
    }

    /// `ξ(x)` and the clamping flag.
    pub fn eval(&self, x: &[f64]) -> (Vec<f64>, bool) {
        match self {
            CollectiveVariable::Linear { matrix, offset } => (
                matrix
                    .iter()
                    .zip(offset)
                    .map(|(row, b)| row.iter().zip(x).map(|(a, xi)| a * xi).sum::<f64>() + b)
                    .collect(),
                false,
            ),
            _ => {
                let (z, c) = self.eval1(x);
                (vec![z], c)
            }
        }
    }

    /// Scalar fast path; for multi-output linear CVs returns the first component.
    #[inline]
    pub fn eval1(&self, x: &[f64]) -> (f64, bool) {
        match self {
            CollectiveVariable::Linear { matrix, offset } => {
                (matrix[0].iter().zip(x).map(|(a, xi)| a * xi).sum::<f64>() + offset[0], false)
            }
            CollectiveVariable::GridChi(t) => t.eval(x[0], x[1]),
            CollectiveVariable::RotatedChi { table, rows } => {
                let (y1, y2) = project(rows, x);
                table.eval(y1, y2)
            }
        }
    }

    /// Scalar fast path: writes `∇ξ(x)` into `grad` and returns `(ξ(x), clamped)`.
    #[inline]
    pub fn grad1(&self, x: &[f64], grad: &mut [f64]) -> (f64, bool) {
        match self {
            CollectiveVariable::Linear { matrix, offset } => {
                grad.copy_from_slice(&matrix[0]);
                (matrix[0].iter().zip(x).map(|(a, xi)| a * xi).sum::<f64>() + offset[0], false)
            }
            CollectiveVariable::GridChi(t) => {
                let (v, g, c) = t.eval_with_gradient(x[0], x[1]);
                grad.iter_mut().for_each(|e| *e = 0.0);
                grad[0] = g[0];
                grad[1] = g[1];
                (v, c)
            }
            CollectiveVariable::RotatedChi { table, rows } => {
                let (y1, y2) = project(rows, x);
                let (v, g, c) = table.eval_with_gradient(y1, y2);
                for (k, e) in grad.iter_mut().enumerate() {
                    *e = g[0] * rows[0][k] + g[1] * rows[1][k];
                }
                (v, c)
            }
        }
    }

    /// Jacobian `J_ξ(x)` of shape `m × d`.
    pub fn jacobian(&self, x: &[f64]) -> DMatrix<f64> {
        match self {
            CollectiveVariable::Linear { matrix, .. } => {
                DMatrix::from_fn(matrix.len(), x.len(), |i, j| matrix[i][j])
            }
            _ => {
                let mut g = vec![0.0; x.len()];
                self.grad1(x, &mut g);
                DMatrix::from_row_slice(1, x.len(), &g)
            }
        }
    }
}

#[inline]
fn project(rows: &[Vec<f64>; 2], x: &[f64]) -> (f64, f64) {
    let dot = |r: &Vec<f64>| r.iter().zip(x).map(|(a, b)| a * b).sum::<f64>();
    (dot(&rows[0]), dot(&rows[1]))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::random_rotation;
    use proptest::prelude::*;

    fn smooth_table(n: usize) -> ChiTable {
        let grid = Grid2::square(-2.5, 2.5, n).unwrap();
        let values = (0..grid.len())
            .map(|i| {
                let (x, y) = grid.center(i);
                0.5 * (1.0 + (0.8 * x + 0.6 * y).tanh())
            })
            .collect();
        ChiTable::new(grid, values).unwrap()
    }

    fn fd_grad(cv: &CollectiveVariable, x: &[f64], h: f64) -> Vec<f64> {
        (0..x.len())
            .map(|k| {
                let mut p = x.to_vec();
                let mut m = x.to_vec();
                p[k] += h;
                m[k] -= h;
                (cv.eval1(&p).0 - cv.eval1(&m).0) / (2.0 * h)
            })
            .collect()
    }

    #[test]
    fn linear_cv() {
        let cv = CollectiveVariable::coordinate(0, 2);
        assert_eq!(cv.eval(&[0.3, 7.0]).0, vec![0.3]);
        assert_eq!(cv.jacobian(&[0.3, 7.0]).as_slice(), &[1.0, 0.0]);
    }

    #[test]
    fn table_is_exact_at_nodes() {
        let t = smooth_table(20);
        for i in [0, 7, 133, 399] {
            let (x, y) = t.grid.center(i);
            assert!((t.eval(x, y).0 - t.values[i]).abs() < 1e-14);
        }
    }

    #[test]
    fn outside_queries_are_flagged() {
        let t = smooth_table(20);
        assert!(t.eval(3.0, 0.0).1);
        assert!(!t.eval(2.49, -2.49).1);
        let (v, g, _) = t.eval_with_gradient(10.0, 0.0);
        assert!(v.is_finite() && g[0] == 0.0);
    }

    #[test]
    fn rotated_identity_equals_grid_chi() {
        let t = Arc::new(smooth_table(30));
        let id = DMatrix::<f64>::identity(2, 2);
        let a = CollectiveVariable::GridChi(t.clone());
        let b = CollectiveVariable::rotated_chi(t, &id).unwrap();
        for x in [[0.1, 0.2], [-1.3, 2.0], [2.2, -0.7]] {
            assert_eq!(a.eval1(&x), b.eval1(&x));
        }
    }

    #[test]
    fn rotated_jacobian_matches_fd() {
        let t = Arc::new(smooth_table(60));
        let r = random_rotation(5, 9);
        let r = DMatrix::from_fn(5, 5, |i, j| r[i][j]);
        let cv = CollectiveVariable::rotated_chi(t.clone(), &r).unwrap();
        let x = [0.31, -0.22, 0.4, 0.1, -0.05];
        let j = cv.jacobian(&x);
        let fd = fd_grad(&cv, &x, 1e-6 * t.grid.hx());
        for k in 0..5 {
            assert!((j[(0, k)] - fd[k]).abs() <= 1e-3 * j.norm(), "{k}: {} vs {}", j[(0, k)], fd[k]);
        }
    }

    #[test]
    fn save_load_roundtrip() {
        let t = smooth_table(7);
        let dir = tempfile::tempdir().unwrap();
        let (c, h) = (dir.path().join("chi.csv"), dir.path().join("chi.json"));
        t.save(&c, &h).unwrap();
        assert_eq!(ChiTable::load(&c, &h).unwrap(), t);
    }

    proptest! {
        #[test]
        fn grid_jacobian_matches_fd(x in -2.3f64..2.3, y in -2.3f64..2.3) {
            let t = smooth_table(40);
            let h = t.grid.hx();
            // Stay away from cell edges, where the bilinear gradient jumps.
            let frac = |v: f64| ((v + 2.5) / h - 0.5).rem_euclid(1.0);
            prop_assume!(frac(x) > 1e-3 && frac(x) < 1.0 - 1e-3);
            prop_assume!(frac(y) > 1e-3 && frac(y) < 1.0 - 1e-3);
            let cv = CollectiveVariable::grid_chi(t);
            let j = cv.jacobian(&[x, y]);
            let fd = fd_grad(&cv, &[x, y], 1e-6 * h);
            for k in 0..2 {
                prop_assert!((j[(0, k)] - fd[k]).abs() <= 1e-3 * j.norm().max(1e-12));
            }
        }

        #[test]
        fn interpolant_stays_within_cell_nodes(x in -2.4f64..2.4, y in -2.4f64..2.4) {
            let t = smooth_table(11);
            let g = t.grid;
            let (v, _) = t.eval(x, y);
            let u = ((x - g.x_min) / g.hx() - 0.5).clamp(0.0, (g.nx - 1) as f64);
            let w = ((y - g.y_min) / g.hy() - 0.5).clamp(0.0, (g.ny - 1) as f64);
            let i0 = (u.floor() as usize).min(g.nx - 2);
            let j0 = (w.floor() as usize).min(g.ny - 2);
            let nodes = [
                t.values[g.index(i0, j0)],
                t.values[g.index(i0 + 1, j0)],
                t.values[g.index(i0, j0 + 1)],
                t.values[g.index(i0 + 1, j0 + 1)],
            ];
            let lo = nodes.iter().cloned().fold(f64::INFINITY, f64::min);
            let hi = nodes.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            prop_assert!(v >= lo - 1e-14 && v <= hi + 1e-14);
        }
    }
}
