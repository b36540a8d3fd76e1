use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::LatentGrid;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ScheduleKind {
    #[default]
    Linear,
    /// Linear in `sqrt(beta)`.
    Scaled,
}

/// Variance schedule `beta_1..beta_T` with cumulative products
/// `alpha_bar_t = prod_{i<=t} (1 - beta_i)`, `alpha_bar_0 = 1`.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    betas: Vec<f64>,
    alpha_bars: Vec<f64>,
}

impl NoiseSchedule {
    /// Betas are spaced as `beta_i = start + (i - 1) * (end - start) / T`.
    pub fn build(
        total_steps: usize,
        beta_start: f64,
        beta_end: f64,
        kind: ScheduleKind,
    ) -> Result<Self> {
        if total_steps == 0 {
            return Err(Error::param("schedule needs at least one training step"));
        }
        if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
            return Err(Error::param(format!(
                "beta range must satisfy 0 < start <= end < 1, got [{beta_start}, {beta_end}]"
            )));
        }
        let n = total_steps as f64;
        let betas: Vec<f64> = (0..total_steps)
            .map(|i| {
                let frac = i as f64 / n;
                match kind {
                    ScheduleKind::Linear => beta_start + frac * (beta_end - beta_start),
                    ScheduleKind::Scaled => {
                        let (a, b) = (beta_start.sqrt(), beta_end.sqrt());
                        let r = a + frac * (b - a);
                        r * r
                    }
                }
            })
            .collect();
        let mut alpha_bars = Vec::with_capacity(total_steps + 1);
        alpha_bars.push(1.0);
        let mut acc = 1.0;
        for beta in &betas {
            acc *= 1.0 - beta;
            alpha_bars.push(acc);
        }
        Ok(NoiseSchedule { betas, alpha_bars })
    }

    /// The default linear `1e-4 -> 2e-2` schedule over 1000 steps.
    pub fn default_linear() -> Self {
        NoiseSchedule::build(1000, 1e-4, 2e-2, ScheduleKind::Linear)
            .expect("default schedule parameters are valid")
    }

    pub fn total_steps(&self) -> usize {
        self.betas.len()
    }

    pub fn betas(&self) -> &[f64] {
        &self.betas
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bars
    }

    pub fn alpha_bar(&self, t: usize) -> Result<f64> {
        self.alpha_bars.get(t).copied().ok_or_else(|| {
            Error::Schedule(format!(
                "timestep {t} outside [0, {}]",
                self.total_steps()
            ))
        })
    }
}

/// `sqrt(alpha_bar_t) * x0 + sqrt(1 - alpha_bar_t) * eps`.
pub fn forward_noise(
    x0: &LatentGrid,
    t: usize,
    eps: &LatentGrid,
    schedule: &NoiseSchedule,
) -> Result<LatentGrid> {
    x0.ensure_same_shape(eps)?;
    let ab = schedule.alpha_bar(t)?;
    let (signal, noise) = (ab.sqrt(), (1.0 - ab).sqrt());
    Ok(x0.zip_map(eps, |x, e| signal * x + noise * e))
}
