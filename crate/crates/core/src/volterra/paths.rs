use std::fmt::Write as _;

use crate::harness::rng::{Purpose, RngStream};
use crate::kernels::Grid;
use crate::measures::EmpiricalMeasure;

use super::VolterraError;

/// Deterministic path with one `d`-vector per grid node.
#[derive(Debug, Clone, PartialEq)]
pub struct GridPath {
    grid: Grid,
    dim: usize,
    values: Vec<f64>,
}

impl GridPath {
    pub fn new(grid: Grid, dim: usize, values: Vec<f64>) -> Result<Self, VolterraError> {
        if dim == 0 || values.len() != (grid.n_steps() + 1) * dim {
            return Err(VolterraError::GridMismatch(format!(
                "path with {} values does not fit {} nodes of dimension {dim}",
                values.len(),
                grid.n_steps() + 1
            )));
        }
        Ok(Self { grid, dim, values })
    }

    pub fn constant(grid: Grid, x: &[f64]) -> Self {
        let values = x
            .iter()
            .copied()
            .cycle()
            .take(x.len() * (grid.n_steps() + 1))
            .collect();
        Self {
            grid,
            dim: x.len(),
            values,
        }
    }

    /// `f(t_i, out)` at every node.
    pub fn from_fn<F>(grid: Grid, dim: usize, mut f: F) -> Self
    where
        F: FnMut(f64, &mut [f64]),
    {
        let mut values = vec![0.0; (grid.n_steps() + 1) * dim];
        for (i, chunk) in values.chunks_exact_mut(dim).enumerate() {
            f(grid.time(i), chunk);
        }
        Self { grid, dim, values }
    }

    pub fn grid(&self) -> Grid {
        self.grid
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn state(&self, i: usize) -> &[f64] {
        &self.values[i * self.dim..(i + 1) * self.dim]
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn terminal(&self) -> &[f64] {
        self.state(self.grid.n_steps())
    }

    /// `max_i |x_i|`.
    pub fn sup_norm(&self) -> f64 {
        self.values
            .chunks_exact(self.dim)
            .map(|x| x.iter().map(|v| v * v).sum::<f64>().sqrt())
            .fold(0.0, f64::max)
    }

    /// `max_i |x_i - y_i|`.
    pub fn sup_distance(&self, other: &Self) -> Result<f64, VolterraError> {
        if self.grid != other.grid || self.dim != other.dim {
            return Err(VolterraError::GridMismatch(
                "paths on different grids".into(),
            ));
        }
        Ok(self
            .values
            .chunks_exact(self.dim)
            .zip(other.values.chunks_exact(self.dim))
            .map(|(a, b)| {
                a.iter()
                    .zip(b)
                    .map(|(x, y)| (x - y) * (x - y))
                    .sum::<f64>()
                    .sqrt()
            })
            .fold(0.0, f64::max))
    }

    pub fn scaled(&self, c: f64) -> Self {
        Self {
            grid: self.grid,
            dim: self.dim,
            values: self.values.iter().map(|v| c * v).collect(),
        }
    }

    /// CSV with header `t,x1..xd`.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("t");
        for c in 1..=self.dim {
            write!(s, ",x{c}").unwrap();
        }
        s.push('\n');
        for i in 0..=self.grid.n_steps() {
            write!(s, "{:.16e}", self.grid.time(i)).unwrap();
            for v in self.state(i) {
                write!(s, ",{v:.16e}").unwrap();
            }
            s.push('\n');
        }
        s
    }
}

/// Control `v_k` on the cells `[t_k, t_{k+1})`, `k = 0..n_steps`.
#[derive(Debug, Clone, PartialEq)]
pub struct ControlPath {
    grid: Grid,
    dim: usize,
    values: Vec<f64>,
}

impl ControlPath {
    pub fn new(grid: Grid, dim: usize, values: Vec<f64>) -> Result<Self, VolterraError> {
        if dim == 0 || values.len() != grid.n_steps() * dim {
            return Err(VolterraError::GridMismatch(format!(
                "control with {} values does not fit {} cells of dimension {dim}",
                values.len(),
                grid.n_steps()
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(VolterraError::InvalidParameter(
                "control is not finite".into(),
            ));
        }
        Ok(Self { grid, dim, values })
    }

    pub fn zero(grid: Grid, dim: usize) -> Self {
        Self {
            grid,
            dim,
            values: vec![0.0; grid.n_steps() * dim],
        }
    }

    pub fn constant(grid: Grid, v: &[f64]) -> Self {
        let values = v
            .iter()
            .copied()
            .cycle()
            .take(v.len() * grid.n_steps())
            .collect();
        Self {
            grid,
            dim: v.len(),
            values,
        }
    }

    /// `f(t_k, out)` at the left end of every cell.
    pub fn from_fn<F>(grid: Grid, dim: usize, mut f: F) -> Self
    where
        F: FnMut(f64, &mut [f64]),
    {
        let mut values = vec![0.0; grid.n_steps() * dim];
        for (k, chunk) in values.chunks_exact_mut(dim).enumerate() {
            f(grid.time(k), chunk);
        }
        Self { grid, dim, values }
    }

    pub fn grid(&self) -> Grid {
        self.grid
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn value(&self, k: usize) -> &[f64] {
        &self.values[k * self.dim..(k + 1) * self.dim]
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn is_zero(&self) -> bool {
        self.values.iter().all(|v| *v == 0.0)
    }

    /// `½ Σ_k |v_k|² Δ`.
    pub fn energy(&self) -> f64 {
        0.5 * self.values.iter().map(|v| v * v).sum::<f64>() * self.grid.dt()
    }

    pub fn scaled(&self, c: f64) -> Self {
        Self {
            grid: self.grid,
            dim: self.dim,
            values: self.values.iter().map(|v| c * v).collect(),
        }
    }

    /// CSV with header `t,v1..vm`, one row per cell at its left end.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("t");
        for c in 1..=self.dim {
            write!(s, ",v{c}").unwrap();
        }
        s.push('\n');
        for k in 0..self.grid.n_steps() {
            write!(s, "{:.16e}", self.grid.time(k)).unwrap();
            for v in self.value(k) {
                write!(s, ",{v:.16e}").unwrap();
            }
            s.push('\n');
        }
        s
    }
}

/// `N` trajectories on a shared grid, stored particle-major.
///
/// Driver increments are not stored: increment `(p, k, c)` is regenerated
/// from the counter-based stream keyed by `(seed, stream_ids[p], k, c)`, so
/// two ensembles with the same seed and stream ids were driven by the same
/// Brownian increments.
#[derive(Debug, Clone, PartialEq)]
pub struct PathEnsemble {
    pub(crate) grid: Grid,
    pub(crate) dim: usize,
    pub(crate) noise_dim: usize,
    pub(crate) n_particles: usize,
    pub(crate) states: Vec<f64>,
    pub(crate) seed: u64,
    pub(crate) stream_ids: Vec<u64>,
}

impl PathEnsemble {
    pub fn grid(&self) -> Grid {
        self.grid
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn noise_dim(&self) -> usize {
        self.noise_dim
    }

    pub fn n_particles(&self) -> usize {
        self.n_particles
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn stream_ids(&self) -> &[u64] {
        &self.stream_ids
    }

    pub fn states(&self) -> &[f64] {
        &self.states
    }

    fn stride(&self) -> usize {
        (self.grid.n_steps() + 1) * self.dim
    }

    /// Whole trajectory of particle `p`, `(n_steps + 1) × d`.
    pub fn particle(&self, p: usize) -> &[f64] {
        let s = self.stride();
        &self.states[p * s..(p + 1) * s]
    }

    pub fn state(&self, p: usize, i: usize) -> &[f64] {
        let o = p * self.stride() + i * self.dim;
        &self.states[o..o + self.dim]
    }

    /// Component `c` of every particle at step `i`.
    pub fn component_at(&self, i: usize, c: usize) -> Vec<f64> {
        (0..self.n_particles).map(|p| self.state(p, i)[c]).collect()
    }

    /// Empirical law of the particles at step `i`.
    pub fn measure_at(&self, i: usize) -> Result<EmpiricalMeasure, VolterraError> {
        let mut pts = Vec::with_capacity(self.n_particles * self.dim);
        for p in 0..self.n_particles {
            pts.extend_from_slice(self.state(p, i));
        }
        Ok(EmpiricalMeasure::uniform(self.dim, pts)?)
    }

    /// `ΔW` of particle `p` on cell `k`, component `c`.
    pub fn driver_increment(&self, p: usize, k: usize, c: usize) -> f64 {
        let rng = RngStream::new(self.seed, Purpose::Driver);
        self.grid.dt().sqrt() * rng.normal(self.stream_ids[p], k as u64, c as u64)
    }

    /// Whether `other` was driven by the same increments.
    pub fn shares_drivers_with(&self, other: &Self) -> bool {
        self.seed == other.seed
            && self.stream_ids == other.stream_ids
            && self.grid == other.grid
            && self.noise_dim == other.noise_dim
    }

    /// `(X - path) / scale` particle by particle, keeping the driver identity.
    pub fn deviation_from(&self, path: &GridPath, scale: f64) -> Result<Self, VolterraError> {
        if path.grid() != self.grid || path.dim() != self.dim {
            return Err(VolterraError::GridMismatch(
                "reference path does not match the ensemble".into(),
            ));
        }
        let reference = path.values();
        let mut states = self.states.clone();
        for chunk in states.chunks_exact_mut(self.stride()) {
            for (x, r) in chunk.iter_mut().zip(reference) {
                *x = (*x - r) / scale;
            }
        }
        Ok(Self {
            states,
            stream_ids: self.stream_ids.clone(),
            ..*self
        })
    }

    /// `max_i |X_i - Y_i|` per particle, for two ensembles on the same grid.
    pub fn sup_differences(&self, other: &Self) -> Result<Vec<f64>, VolterraError> {
        if self.grid != other.grid || self.dim != other.dim || self.n_particles != other.n_particles
        {
            return Err(VolterraError::GridMismatch(
                "ensembles differ in shape".into(),
            ));
        }
        let d = self.dim;
        Ok((0..self.n_particles)
            .map(|p| {
                self.particle(p)
                    .chunks_exact(d)
                    .zip(other.particle(p).chunks_exact(d))
                    .map(|(a, b)| {
                        a.iter()
                            .zip(b)
                            .map(|(x, y)| (x - y) * (x - y))
                            .sum::<f64>()
                            .sqrt()
                    })
                    .fold(0.0, f64::max)
            })
            .collect())
    }

    /// `max_i |X_i - φ_i|` per particle.
    pub fn sup_distances_to(&self, path: &GridPath) -> Result<Vec<f64>, VolterraError> {
        if path.grid() != self.grid || path.dim() != self.dim {
            return Err(VolterraError::GridMismatch(
                "reference path does not match the ensemble".into(),
            ));
        }
        let d = self.dim;
        Ok((0..self.n_particles)
            .map(|p| {
                self.particle(p)
                    .chunks_exact(d)
                    .zip(path.values().chunks_exact(d))
                    .map(|(a, b)| {
                        a.iter()
                            .zip(b)
                            .map(|(x, y)| (x - y) * (x - y))
                            .sum::<f64>()
                            .sqrt()
                    })
                    .fold(0.0, f64::max)
            })
            .collect())
    }

    pub fn mean_path(&self) -> GridPath {
        let d = self.dim;
        let n = self.grid.n_steps();
        let mut values = vec![0.0; (n + 1) * d];
        for p in 0..self.n_particles {
            for (v, x) in values.iter_mut().zip(self.particle(p)) {
                *v += x;
            }
        }
        let inv = 1.0 / self.n_particles as f64;
        values.iter_mut().for_each(|v| *v *= inv);
        GridPath {
            grid: self.grid,
            dim: d,
            values,
        }
    }

    /// Summary CSV `t,mean_x1..,var_x1..,moment_p..` where `moment_p` is the
    /// sample mean of `|X_t|^p`.
    pub fn summary_csv(&self, p_list: &[f64]) -> String {
        let d = self.dim;
        let mut s = String::from("t");
        for c in 1..=d {
            write!(s, ",mean_x{c}").unwrap();
        }
        for c in 1..=d {
            write!(s, ",var_x{c}").unwrap();
        }
        for p in p_list {
            write!(s, ",moment_p{p}").unwrap();
        }
        s.push('\n');
        for i in 0..=self.grid.n_steps() {
            write!(s, "{:.16e}", self.grid.time(i)).unwrap();
            let cols: Vec<Vec<f64>> = (0..d).map(|c| self.component_at(i, c)).collect();
            for col in &cols {
                write!(s, ",{:.16e}", crate::stats::mean(col)).unwrap();
            }
            for col in &cols {
                let v = if col.len() > 1 {
                    crate::stats::variance(col)
                } else {
                    0.0
                };
                write!(s, ",{v:.16e}").unwrap();
            }
            for &p in p_list {
                let m = (0..self.n_particles)
                    .map(|q| {
                        self.state(q, i)
                            .iter()
                            .map(|v| v * v)
                            .sum::<f64>()
                            .sqrt()
                            .powf(p)
                    })
                    .sum::<f64>()
                    / self.n_particles as f64;
                write!(s, ",{m:.16e}").unwrap();
            }
            s.push('\n');
        }
        s
    }

    /// Full CSV `particle,step,t,x1..xd`.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("particle,step,t");
        for c in 1..=self.dim {
            write!(s, ",x{c}").unwrap();
        }
        s.push('\n');
        for p in 0..self.n_particles {
            for i in 0..=self.grid.n_steps() {
                write!(s, "{p},{i},{:.16e}", self.grid.time(i)).unwrap();
                for v in self.state(p, i) {
                    write!(s, ",{v:.16e}").unwrap();
                }
                s.push('\n');
            }
        }
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn control_energy() {
        let g = Grid::new(2.0, 4).unwrap();
        let v = ControlPath::new(g, 2, vec![1.0, 0.0, 0.0, 2.0, 1.0, 1.0, 0.0, 0.0]).unwrap();
        assert_eq!(v.energy(), 0.5 * 7.0 * 0.5);
        assert_eq!(ControlPath::constant(g, &[3.0]).energy(), 0.5 * 9.0 * 2.0);
        assert!(ControlPath::new(g, 1, vec![0.0; 5]).is_err());
    }

    #[test]
    fn path_csv_and_norms() {
        let g = Grid::new(1.0, 2).unwrap();
        let p = GridPath::from_fn(g, 1, |t, o| o[0] = -t);
        assert_eq!(p.sup_norm(), 1.0);
        assert!(p.to_csv().starts_with("t,x1\n0.0000000000000000e0,"));
        let q = GridPath::constant(g, &[0.0]);
        assert_eq!(p.sup_distance(&q).unwrap(), 1.0);
    }
}
