use std::collections::BTreeMap;
use std::sync::Arc;

use crate::coefficients::{Coefficients, CustomCoefficients};

/// Named coefficient sets reachable from a config's `model.key`.
#[derive(Clone, Default)]
pub struct ModelRegistry {
    models: BTreeMap<String, Arc<dyn Coefficients>>,
}

impl std::fmt::Debug for ModelRegistry {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_set().entries(self.models.keys()).finish()
    }
}

impl ModelRegistry {
    pub fn empty() -> Self {
        Self::default()
    }

    /// `double_well`: `b = x - x³ + (mean(μ) - x)`, `σ = 1`.
    /// `tanh_mean`: `b = -x + tanh(mean(μ))`, `σ = 0.5 + 0.25 sin(x)`.
    pub fn builtin() -> Self {
        let mut r = Self::empty();
        let well = CustomCoefficients::new(
            1,
            1,
            |_t, x, mu, out| out[0] = x[0] - x[0].powi(3) + (mu.mean()[0] - x[0]),
            |_t, _x, _mu, out| out[0] = 1.0,
        )
        .with_jacobian(|_t, x, _mu, out| out[0] = -3.0 * x[0] * x[0])
        .with_lions(|_t, _x, _mu, _y, out| out[0] = 1.0);
        r.register("double_well", Arc::new(well));
        let tanh = CustomCoefficients::new(
            1,
            1,
            |_t, x, mu, out| out[0] = -x[0] + mu.mean()[0].tanh(),
            |_t, x, _mu, out| out[0] = 0.5 + 0.25 * x[0].sin(),
        )
        .with_jacobian(|_t, _x, _mu, out| out[0] = -1.0)
        .with_lions(|_t, _x, mu, _y, out| out[0] = 1.0 / mu.mean()[0].cosh().powi(2));
        r.register("tanh_mean", Arc::new(tanh));
        r
    }

    pub fn register(&mut self, key: &str, coeffs: Arc<dyn Coefficients>) {
        self.models.insert(key.to_string(), coeffs);
    }

    pub fn get(&self, key: &str) -> Option<Arc<dyn Coefficients>> {
        self.models.get(key).cloned()
    }

    pub fn keys(&self) -> Vec<String> {
        self.models.keys().cloned().collect()
    }
}
