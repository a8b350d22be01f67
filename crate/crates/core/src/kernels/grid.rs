use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{Kernel, KernelError};

/// Uniform time grid `t_i = i * T / n_steps`, `i = 0..=n_steps`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Grid {
    horizon: f64,
    n_steps: usize,
}

impl Grid {
    pub fn new(horizon: f64, n_steps: usize) -> Result<Self, KernelError> {
        if !(horizon > 0.0 && horizon.is_finite()) {
            return Err(KernelError::InvalidParameter(format!(
                "grid horizon must be positive, got {horizon}"
            )));
        }
        if n_steps < 1 {
            return Err(KernelError::InvalidParameter(
                "grid needs at least one step".into(),
            ));
        }
        Ok(Self { horizon, n_steps })
    }

    pub fn horizon(&self) -> f64 {
        self.horizon
    }

    pub fn n_steps(&self) -> usize {
        self.n_steps
    }

    pub fn dt(&self) -> f64 {
        self.horizon / self.n_steps as f64
    }

    pub fn time(&self, i: usize) -> f64 {
        if i == self.n_steps {
            self.horizon
        } else {
            i as f64 * self.dt()
        }
    }

    pub fn times(&self) -> Vec<f64> {
        (0..=self.n_steps).map(|i| self.time(i)).collect()
    }
}

/// Strictly lower-triangular kernel on a grid: entry `(i, j)`, `j < i`, is
/// the averaged weight `(1/Δ) ∫_{t_j}^{t_{j+1}} K(t_i, s) ds`.
///
/// Row `i` holds `i` entries; rows are packed contiguously.
#[derive(Debug, Clone, PartialEq)]
pub struct GridKernel {
    grid: Grid,
    weights: Vec<f64>,
}

#[inline]
fn row_offset(i: usize) -> usize {
    i * (i.saturating_sub(1)) / 2
}

impl GridKernel {
    pub fn zero(grid: Grid) -> Self {
        let n = grid.n_steps();
        Self {
            grid,
            weights: vec![0.0; row_offset(n + 1)],
        }
    }

    /// Entries from a function of `(i, j)`.
    pub fn from_fn<F>(grid: Grid, f: F) -> Self
    where
        F: Fn(usize, usize) -> f64,
    {
        let mut k = Self::zero(grid);
        for i in 1..=grid.n_steps() {
            for (j, w) in k.row_mut(i).iter_mut().enumerate() {
                *w = f(i, j);
            }
        }
        k
    }

    /// Kernel-averaged weights, computed row-parallel.
    pub fn from_kernel(kernel: &Kernel, grid: Grid) -> Result<Self, KernelError> {
        let n = grid.n_steps();
        let dt = grid.dt();
        let rows: Vec<Result<Vec<f64>, KernelError>> = (1..=n)
            .into_par_iter()
            .map(|i| {
                let t = grid.time(i);
                (0..i)
                    .map(|j| {
                        let a = grid.time(j);
                        let b = if j + 1 == i { t } else { (j + 1) as f64 * dt };
                        kernel.cell_average(t, a, b)
                    })
                    .collect()
            })
            .collect();
        let mut weights = Vec::with_capacity(row_offset(n + 1));
        for row in rows {
            weights.extend(row?);
        }
        if let Some(pos) = weights.iter().position(|w| !w.is_finite()) {
            let i = (1..=n).find(|&i| row_offset(i + 1) > pos).unwrap_or(n);
            return Err(KernelError::Singular {
                t: grid.time(i),
                s: grid.time(pos - row_offset(i)),
            });
        }
        Ok(Self { grid, weights })
    }

    pub fn grid(&self) -> Grid {
        self.grid
    }

    /// Entries `(i, 0..i)`; empty for `i = 0`.
    #[inline]
    pub fn row(&self, i: usize) -> &[f64] {
        let o = row_offset(i);
        &self.weights[o..o + i]
    }

    #[inline]
    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        let o = row_offset(i);
        &mut self.weights[o..o + i]
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        debug_assert!(j < i);
        self.weights[row_offset(i) + j]
    }

    pub fn is_zero(&self) -> bool {
        self.weights.iter().all(|&w| w == 0.0)
    }

    /// `Σ_j K[i][j] Δ ≈ ∫_0^{t_i} K(t_i, s) ds` for each row (row 0 is 0).
    pub fn row_integrals(&self) -> Vec<f64> {
        let dt = self.grid.dt();
        (0..=self.grid.n_steps())
            .map(|i| self.row(i).iter().sum::<f64>() * dt)
            .collect()
    }

    /// `max_i Σ_j |K[i][j]| Δ`.
    pub fn sup_row_mass(&self) -> f64 {
        let dt = self.grid.dt();
        (1..=self.grid.n_steps())
            .map(|i| self.row(i).iter().map(|w| w.abs()).sum::<f64>() * dt)
            .fold(0.0, f64::max)
    }

    pub fn max_abs(&self) -> f64 {
        self.weights.iter().fold(0.0, |m, w| m.max(w.abs()))
    }

    pub fn max_abs_diff(&self, other: &Self) -> Result<f64, KernelError> {
        self.check_grid(other)?;
        Ok(self
            .weights
            .iter()
            .zip(&other.weights)
            .fold(0.0, |m, (a, b)| m.max((a - b).abs())))
    }

    pub fn add_assign(&mut self, other: &Self) -> Result<(), KernelError> {
        self.check_grid(other)?;
        for (a, b) in self.weights.iter_mut().zip(&other.weights) {
            *a += b;
        }
        Ok(())
    }

    pub fn sub(&self, other: &Self) -> Result<Self, KernelError> {
        self.check_grid(other)?;
        let weights = self
            .weights
            .iter()
            .zip(&other.weights)
            .map(|(a, b)| a - b)
            .collect();
        Ok(Self {
            grid: self.grid,
            weights,
        })
    }

    fn check_grid(&self, other: &Self) -> Result<(), KernelError> {
        if self.grid == other.grid {
            Ok(())
        } else {
            Err(KernelError::GridMismatch)
        }
    }

    /// `(K * L)(t_i, t_j) ≈ Σ_{j<k<i} K[i][k] L[k][j] Δ`.
    pub fn convolve(&self, other: &Self) -> Result<Self, KernelError> {
        self.check_grid(other)?;
        let n = self.grid.n_steps();
        let dt = self.grid.dt();
        let rows: Vec<Vec<f64>> = (1..=n)
            .into_par_iter()
            .map(|i| {
                let mut out = vec![0.0; i];
                let krow = self.row(i);
                for (k, &kv) in krow.iter().enumerate().skip(1) {
                    if kv == 0.0 {
                        continue;
                    }
                    let lrow = other.row(k);
                    for (o, &lv) in out[..k].iter_mut().zip(lrow) {
                        *o += kv * lv;
                    }
                }
                out.iter_mut().for_each(|o| *o *= dt);
                out
            })
            .collect();
        Ok(Self {
            grid: self.grid,
            weights: rows.concat(),
        })
    }

    /// `(K f)_i = Σ_{k<i} K[i][k] f_k Δ` for a scalar path `f` on the grid.
    pub fn apply(&self, path: &[f64]) -> Vec<f64> {
        let dt = self.grid.dt();
        (0..=self.grid.n_steps())
            .map(|i| {
                self.row(i)
                    .iter()
                    .zip(path)
                    .map(|(w, f)| w * f)
                    .sum::<f64>()
                    * dt
            })
            .collect()
    }

    /// Rows as `(t_i, t_j, value)` triples, row-major.
    pub fn triples(&self) -> impl Iterator<Item = (f64, f64, f64)> + '_ {
        let g = self.grid;
        (1..=g.n_steps())
            .flat_map(move |i| (0..i).map(move |j| (g.time(i), g.time(j), self.get(i, j))))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn packing() {
        let g = Grid::new(1.0, 4).unwrap();
        let k = GridKernel::from_fn(g, |i, j| (10 * i + j) as f64);
        assert_eq!(k.row(0), &[] as &[f64]);
        assert_eq!(k.row(3), &[30.0, 31.0, 32.0]);
        assert_eq!(k.get(4, 2), 42.0);
        assert_eq!(k.triples().count(), 10);
    }

    #[test]
    fn averaged_weights_power() {
        let g = Grid::new(1.0, 10).unwrap();
        let k = GridKernel::from_kernel(&Kernel::power(0.25).unwrap(), g).unwrap();
        // last cell: (1/Δ) ∫_0^Δ u^{-1/4} du = Δ^{-1/4} / 0.75
        let expect = 0.1f64.powf(-0.25) / 0.75;
        assert!((k.get(10, 9) - expect).abs() < 1e-12);
        assert!(k.max_abs().is_finite());
    }

    #[test]
    fn convolve_zero() {
        let g = Grid::new(1.0, 20).unwrap();
        let z = GridKernel::from_kernel(&Kernel::constant(0.0), g).unwrap();
        assert!(z.convolve(&z).unwrap().is_zero());
    }

    #[test]
    fn convolve_constants() {
        // (c1 * c2)(t, s) = c1 c2 (t - s); the left Riemann sum lags by one cell.
        let g = Grid::new(1.0, 200).unwrap();
        let dt = g.dt();
        for &(c1, c2) in &[(1.0, 1.0), (2.0, 3.0)] {
            let k = GridKernel::from_kernel(&Kernel::constant(c1), g).unwrap();
            let l = GridKernel::from_kernel(&Kernel::constant(c2), g).unwrap();
            let kl = k.convolve(&l).unwrap();
            let oracle = GridKernel::from_fn(g, |i, j| c1 * c2 * (g.time(i) - g.time(j)));
            assert!(kl.max_abs_diff(&oracle).unwrap() <= c1 * c2 * dt * (1.0 + 1e-9));
        }
    }

    #[test]
    fn convolve_grid_mismatch() {
        let a = GridKernel::zero(Grid::new(1.0, 10).unwrap());
        let b = GridKernel::zero(Grid::new(1.0, 11).unwrap());
        assert_eq!(a.convolve(&b), Err(KernelError::GridMismatch));
    }

    #[test]
    fn convolution_is_associative() {
        for n in [20, 40, 80] {
            let g = Grid::new(1.0, n).unwrap();
            let k = GridKernel::from_kernel(&Kernel::power(0.3).unwrap(), g).unwrap();
            let l = GridKernel::from_kernel(&Kernel::constant(2.0), g).unwrap();
            let m = GridKernel::from_kernel(&Kernel::power(0.8).unwrap(), g).unwrap();
            let left = k.convolve(&l).unwrap().convolve(&m).unwrap();
            let right = k.convolve(&l.convolve(&m).unwrap()).unwrap();
            let d = left.max_abs_diff(&right).unwrap();
            // discrete convolution is matrix multiplication: associative to rounding
            assert!(d < 1e-12 * left.max_abs().max(1.0), "n={n}: {d}");
        }
    }
}
