//! Finite weighted point clouds standing in for laws in `P_2(R^d)`, and the
//! quadratic Wasserstein distance between them.

use std::fmt::Write as _;

use thiserror::Error;

use crate::harness::rng::{Purpose, RngStream};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MeasureError {
    #[error("measure needs at least one atom")]
    Empty,
    #[error("point buffer of length {len} is not a multiple of dimension {dim}")]
    Shape { len: usize, dim: usize },
    #[error("weights must be nonnegative and sum to 1 (sum = {sum})")]
    Weights { sum: f64 },
    #[error("atom {index} is not finite")]
    NonFinite { index: usize },
    #[error("dimension mismatch: {left} vs {right}")]
    DimensionMismatch { left: usize, right: usize },
}

/// Largest support size handled by the exact assignment solver.
pub const ASSIGNMENT_BUDGET: usize = 512;
/// Number of random directions in the sliced approximation.
pub const SLICED_DIRECTIONS: usize = 64;
/// Seed used by [`wasserstein2`] when no seed is supplied.
pub const DEFAULT_SLICED_SEED: u64 = 0x5EED;

/// `Σ w_i δ_{x_i}` with `d`-dimensional atoms stored row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct EmpiricalMeasure {
    dim: usize,
    points: Vec<f64>,
    weights: Vec<f64>,
    uniform: bool,
    mean: Vec<f64>,
    second_moment: f64,
}

impl EmpiricalMeasure {
    /// Uniform weights over the rows of `points`.
    pub fn uniform(dim: usize, points: Vec<f64>) -> Result<Self, MeasureError> {
        if dim == 0 || points.is_empty() {
            return Err(MeasureError::Empty);
        }
        if !points.len().is_multiple_of(dim) {
            return Err(MeasureError::Shape {
                len: points.len(),
                dim,
            });
        }
        let n = points.len() / dim;
        Self::build(dim, points, vec![1.0 / n as f64; n], true)
    }

    pub fn weighted(dim: usize, points: Vec<f64>, weights: Vec<f64>) -> Result<Self, MeasureError> {
        if dim == 0 || points.is_empty() {
            return Err(MeasureError::Empty);
        }
        if points.len() != dim * weights.len() {
            return Err(MeasureError::Shape {
                len: points.len(),
                dim,
            });
        }
        let sum: f64 = weights.iter().sum();
        if weights.iter().any(|w| !(*w >= 0.0)) || (sum - 1.0).abs() > 1e-12 {
            return Err(MeasureError::Weights { sum });
        }
        let uniform = weights.windows(2).all(|w| w[0] == w[1]);
        Self::build(dim, points, weights, uniform)
    }

    pub fn dirac(point: &[f64]) -> Result<Self, MeasureError> {
        Self::uniform(point.len(), point.to_vec())
    }

    fn build(
        dim: usize,
        points: Vec<f64>,
        weights: Vec<f64>,
        uniform: bool,
    ) -> Result<Self, MeasureError> {
        if let Some(pos) = points.iter().position(|x| !x.is_finite()) {
            return Err(MeasureError::NonFinite { index: pos / dim });
        }
        let mut mean = vec![0.0; dim];
        let mut second_moment = 0.0;
        for (x, w) in points.chunks_exact(dim).zip(&weights) {
            for (m, xi) in mean.iter_mut().zip(x) {
                *m += w * xi;
            }
            second_moment += w * x.iter().map(|v| v * v).sum::<f64>();
        }
        Ok(Self {
            dim,
            points,
            weights,
            uniform,
            mean,
            second_moment,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }

    pub fn point(&self, i: usize) -> &[f64] {
        &self.points[i * self.dim..(i + 1) * self.dim]
    }

    pub fn points(&self) -> impl Iterator<Item = &[f64]> {
        self.points.chunks_exact(self.dim)
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn is_uniform(&self) -> bool {
        self.uniform
    }

    pub fn mean(&self) -> &[f64] {
        &self.mean
    }

    /// `∫ |x|² μ(dx)`.
    pub fn second_moment(&self) -> f64 {
        self.second_moment
    }

    /// Image measure under `x ↦ f(x)`, weights unchanged.
    pub fn push_forward<F>(&self, mut f: F) -> Result<Self, MeasureError>
    where
        F: FnMut(&[f64], &mut [f64]),
    {
        let mut out = vec![0.0; self.points.len()];
        for (x, y) in self
            .points
            .chunks_exact(self.dim)
            .zip(out.chunks_exact_mut(self.dim))
        {
            f(x, y);
        }
        Self::build(self.dim, out, self.weights.clone(), self.uniform)
    }

    /// CSV dump with header `index,x1..xd,weight`.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("index");
        for k in 1..=self.dim {
            write!(s, ",x{k}").unwrap();
        }
        s.push_str(",weight\n");
        for (i, (x, w)) in self.points().zip(&self.weights).enumerate() {
            write!(s, "{i}").unwrap();
            for v in x {
                write!(s, ",{v:.16e}").unwrap();
            }
            writeln!(s, ",{w:.16e}").unwrap();
        }
        s
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Wasserstein {
    pub distance: f64,
    /// Set when the sliced approximation was used.
    pub approximate: bool,
}

/// `W_2(μ, ν)` with the default sliced seed.
pub fn wasserstein2(
    mu: &EmpiricalMeasure,
    nu: &EmpiricalMeasure,
) -> Result<Wasserstein, MeasureError> {
    wasserstein2_seeded(mu, nu, DEFAULT_SLICED_SEED)
}

/// `W_2(μ, ν)`.
///
/// * `d = 1`: exact monotone rearrangement of the cumulative weights.
/// * either side a single atom: exact, `Σ w_i |x_i - y|²`.
/// * `d > 1`, both uniform with the same support size `<= 512`: exact
///   minimum-cost assignment.
/// * otherwise: `sqrt(d · mean_θ W_2²(θ#μ, θ#ν))` over 64 seeded random unit
///   directions, flagged approximate. The factor `d` makes the estimate exact
///   for translations.
pub fn wasserstein2_seeded(
    mu: &EmpiricalMeasure,
    nu: &EmpiricalMeasure,
    seed: u64,
) -> Result<Wasserstein, MeasureError> {
    if mu.dim != nu.dim {
        return Err(MeasureError::DimensionMismatch {
            left: mu.dim,
            right: nu.dim,
        });
    }
    let exact = |d2: f64| Wasserstein {
        distance: d2.max(0.0).sqrt(),
        approximate: false,
    };
    if mu.dim == 1 {
        let a: Vec<(f64, f64)> = mu
            .points
            .iter()
            .copied()
            .zip(mu.weights.iter().copied())
            .collect();
        let b: Vec<(f64, f64)> = nu
            .points
            .iter()
            .copied()
            .zip(nu.weights.iter().copied())
            .collect();
        return Ok(exact(monotone_cost(a, b)));
    }
    if nu.len() == 1 || mu.len() == 1 {
        let (cloud, atom) = if nu.len() == 1 {
            (mu, nu.point(0))
        } else {
            (nu, mu.point(0))
        };
        let cost = cloud
            .points()
            .zip(&cloud.weights)
            .map(|(x, w)| w * sq_dist(x, atom))
            .sum();
        return Ok(exact(cost));
    }
    if mu.uniform && nu.uniform && mu.len() == nu.len() && mu.len() <= ASSIGNMENT_BUDGET {
        let n = mu.len();
        let cost: Vec<f64> = (0..n)
            .flat_map(|i| (0..n).map(move |j| (i, j)))
            .map(|(i, j)| sq_dist(mu.point(i), nu.point(j)))
            .collect();
        let assignment = min_cost_assignment(n, &cost);
        let total: f64 = assignment
            .iter()
            .enumerate()
            .map(|(i, &j)| cost[i * n + j])
            .sum();
        return Ok(exact(total / n as f64));
    }
    Ok(Wasserstein {
        distance: sliced(mu, nu, seed),
        approximate: true,
    })
}

/// `W_2(μ, δ_0) = (∫ |x|² μ(dx))^{1/2}`.
pub fn distance_to_dirac0(mu: &EmpiricalMeasure) -> f64 {
    mu.second_moment.sqrt()
}

fn sq_dist(x: &[f64], y: &[f64]) -> f64 {
    x.iter().zip(y).map(|(a, b)| (a - b) * (a - b)).sum()
}

/// Quadratic transport cost between two weighted 1-d clouds via the monotone
/// coupling of their cumulative distribution functions.
fn monotone_cost(mut a: Vec<(f64, f64)>, mut b: Vec<(f64, f64)>) -> f64 {
    a.sort_by(|x, y| x.0.total_cmp(&y.0));
    b.sort_by(|x, y| x.0.total_cmp(&y.0));
    if a.len() == b.len() && a.iter().chain(&b).all(|p| p.1 == a[0].1) {
        let w = a[0].1;
        return a
            .iter()
            .zip(&b)
            .map(|(x, y)| w * (x.0 - y.0) * (x.0 - y.0))
            .sum();
    }
    let (mut i, mut j) = (0, 0);
    let (mut ra, mut rb) = (a[0].1, b[0].1);
    let mut cost = 0.0;
    while i < a.len() && j < b.len() {
        let m = ra.min(rb);
        let d = a[i].0 - b[j].0;
        cost += m * d * d;
        ra -= m;
        rb -= m;
        if ra <= 1e-15 {
            i += 1;
            if i < a.len() {
                ra += a[i].1;
            }
        }
        if rb <= 1e-15 {
            j += 1;
            if j < b.len() {
                rb += b[j].1;
            }
        }
    }
    cost
}

fn sliced(mu: &EmpiricalMeasure, nu: &EmpiricalMeasure, seed: u64) -> f64 {
    let stream = RngStream::new(seed, Purpose::SlicedDirection);
    let d = mu.dim;
    let mut acc = 0.0;
    let mut dir = vec![0.0; d];
    for k in 0..SLICED_DIRECTIONS {
        for (c, v) in dir.iter_mut().enumerate() {
            *v = stream.normal(k as u64, 0, c as u64);
        }
        let norm = dir.iter().map(|v| v * v).sum::<f64>().sqrt();
        dir.iter_mut().for_each(|v| *v /= norm);
        let project = |m: &EmpiricalMeasure| -> Vec<(f64, f64)> {
            m.points()
                .zip(&m.weights)
                .map(|(x, w)| (x.iter().zip(&dir).map(|(a, b)| a * b).sum(), *w))
                .collect()
        };
        acc += monotone_cost(project(mu), project(nu));
    }
    (d as f64 * acc / SLICED_DIRECTIONS as f64).sqrt()
}

/// Minimum-cost perfect assignment on a dense `n × n` cost matrix
/// (shortest augmenting paths with potentials, `O(n³)`). Returns the column
/// assigned to each row.
pub fn min_cost_assignment(n: usize, cost: &[f64]) -> Vec<usize> {
    assert_eq!(cost.len(), n * n);
    // 1-based potentials; column 0 is a sentinel.
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; n + 1];
    let mut row_of = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for i in 1..=n {
        row_of[0] = i;
        let mut j0 = 0usize;
        let mut minv = vec![f64::INFINITY; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = row_of[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0usize;
            for j in 1..=n {
                if used[j] {
                    continue;
                }
                let cur = cost[(i0 - 1) * n + (j - 1)] - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[row_of[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if row_of[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            row_of[j0] = row_of[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut assignment = vec![0usize; n];
    for j in 1..=n {
        if row_of[j] > 0 {
            assignment[row_of[j] - 1] = j - 1;
        }
    }
    assignment
}
