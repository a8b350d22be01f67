use crate::volterra::{
    simulate_controlled, simulate_particles, solve_deterministic_limit, ControlPath, Initializer,
    LawMode, LimitMethod, NoiseForm, Scheme, SimulationOptions,
};

use super::{DeviationError, Halfspace};

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum TailMode {
    /// Event on `X^ε_T`; decay normalized by `ε`.
    Ldp,
    /// Event on `Y^ε_T = (X^ε_T - X⁰_T)/(√ε h)` with `h = ε^{-β}`; decay
    /// normalized by `h²`.
    Mdp { beta: f64 },
}

/// One cell of the tail table.
#[derive(Debug, Clone, PartialEq)]
pub struct TailRow {
    pub eps: f64,
    pub h: Option<f64>,
    pub n_samples: usize,
    pub hits: usize,
    pub p_hat: f64,
    /// `-ε log p̂` or `-log p̂ / h²`; `None` when no sample hit the event.
    pub normalized_decay: Option<f64>,
    /// Rate from the optimizer, echoed for side-by-side reading.
    pub rate: Option<f64>,
    pub censored: bool,
}

/// Crude Monte Carlo estimate of the terminal-event probability per `ε`.
/// Cell `c` uses driver streams `c N .. (c + 1) N` of the same seed, so the
/// cells are independent. Cells without hits are flagged as censored.
#[allow(clippy::too_many_arguments)]
pub fn tail_probability_probe(
    scheme: &Scheme,
    mode: TailMode,
    xi: &Initializer,
    set: &Halfspace,
    eps_list: &[f64],
    n_samples: usize,
    seed: u64,
    reference_rate: Option<f64>,
    opts: &SimulationOptions,
) -> Result<Vec<TailRow>, DeviationError> {
    let (d, m) = scheme.dims();
    if set.normal.len() != d {
        return Err(DeviationError::InvalidParameter(format!(
            "event normal must have dimension {d}"
        )));
    }
    if eps_list.is_empty() || eps_list.iter().any(|e| !(*e > 0.0 && *e <= 1.0)) {
        return Err(DeviationError::InvalidParameter(
            "every eps must lie in (0, 1]".into(),
        ));
    }
    if n_samples == 0 {
        return Err(DeviationError::InvalidParameter(
            "need at least one sample".into(),
        ));
    }
    let x0 = match mode {
        TailMode::Ldp => None,
        TailMode::Mdp { beta } => {
            if !(beta > 0.0 && beta < 0.5) {
                return Err(DeviationError::InvalidParameter(format!(
                    "beta = {beta} must lie in (0, 1/2)"
                )));
            }
            let Initializer::Fixed(x) = xi else {
                return Err(DeviationError::InvalidParameter(
                    "the moderate regime needs a deterministic initial condition".into(),
                ));
            };
            Some(solve_deterministic_limit(scheme, x, LimitMethod::Stepping)?.path)
        }
    };
    let n = scheme.grid().n_steps();
    let mut rows = Vec::with_capacity(eps_list.len());
    for (cell, &eps) in eps_list.iter().enumerate() {
        let base = (cell * n_samples) as u64;
        let cell_opts = SimulationOptions {
            stream_ids: Some((base..base + n_samples as u64).collect()),
            ..opts.clone()
        };
        let (ensemble, h) = match (&mode, &x0) {
            (TailMode::Mdp { beta }, Some(x0)) => {
                let h = eps.powf(-beta);
                let form = NoiseForm::Mdp {
                    h_eps: h,
                    x0: x0.clone(),
                };
                let zero = ControlPath::zero(scheme.grid(), m);
                let ens = simulate_controlled(
                    scheme,
                    xi,
                    eps,
                    &zero,
                    &form,
                    &LawMode::SelfConsistent,
                    n_samples,
                    seed,
                    &cell_opts,
                )?;
                (ens, Some(h))
            }
            _ => (
                simulate_particles(scheme, xi, eps, n_samples, seed, &cell_opts)?,
                None,
            ),
        };
        let hits = (0..n_samples)
            .filter(|&p| set.contains(ensemble.state(p, n)))
            .count();
        let p_hat = hits as f64 / n_samples as f64;
        let normalized_decay = (hits > 0).then(|| match h {
            Some(h) => (p_hat.ln() / (h * h)).abs(),
            None => (eps * p_hat.ln()).abs(),
        });
        rows.push(TailRow {
            eps,
            h,
            n_samples,
            hits,
            p_hat,
            normalized_decay,
            rate: reference_rate,
            censored: hits == 0,
        });
    }
    Ok(rows)
}
