use serde::{Deserialize, Serialize};

use super::prior::{MixturePrior, NoisePredictor};
use super::schedule::NoiseSchedule;
use crate::error::{Error, Result};
use crate::grid::LatentGrid;
use crate::watermark::embed_structure;

/// Inference grid, guidance and condition for one sampling run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SamplerConfig {
    timesteps: Vec<usize>,
    pub guidance_scale: f64,
    pub condition: Option<String>,
}

impl SamplerConfig {
    /// `t_i = T - (i - 1) * T/N - (T/N - 1)`, e.g. `{951, 901, ..., 1}` for `T=1000, N=20`.
    pub fn uniform(total_steps: usize, inference_steps: usize) -> Result<Self> {
        if inference_steps == 0 || inference_steps > total_steps {
            return Err(Error::Config(format!(
                "inference steps must be in [1, {total_steps}], got {inference_steps}"
            )));
        }
        if total_steps % inference_steps != 0 {
            return Err(Error::Config(format!(
                "{inference_steps} inference steps do not divide {total_steps} training steps"
            )));
        }
        let stride = total_steps / inference_steps;
        let timesteps = (0..inference_steps)
            .map(|i| total_steps - i * stride - (stride - 1))
            .collect();
        SamplerConfig::new(timesteps, total_steps)
    }

    pub fn new(timesteps: Vec<usize>, total_steps: usize) -> Result<Self> {
        if timesteps.is_empty() {
            return Err(Error::Config("empty timestep list".into()));
        }
        if timesteps.windows(2).any(|w| w[1] >= w[0]) {
            return Err(Error::Config(format!(
                "timesteps must be strictly decreasing: {timesteps:?}"
            )));
        }
        if timesteps[timesteps.len() - 1] == 0 || timesteps[0] > total_steps {
            return Err(Error::Config(format!(
                "timesteps must lie in [1, {total_steps}]"
            )));
        }
        Ok(SamplerConfig {
            timesteps,
            guidance_scale: 0.0,
            condition: None,
        })
    }

    pub fn with_guidance(mut self, condition: impl Into<String>, scale: f64) -> Result<Self> {
        if !(scale >= 0.0 && scale.is_finite()) {
            return Err(Error::Config(format!("guidance scale must be >= 0, got {scale}")));
        }
        self.condition = Some(condition.into());
        self.guidance_scale = scale;
        Ok(self)
    }

    pub fn unconditional(mut self) -> Self {
        self.condition = None;
        self.guidance_scale = 0.0;
        self
    }

    pub fn timesteps(&self) -> &[usize] {
        &self.timesteps
    }

    pub fn steps(&self) -> usize {
        self.timesteps.len()
    }

    /// `(t, t_prev)` of step `i`; the last step goes to 0.
    pub fn step(&self, i: usize) -> (usize, usize) {
        let t = self.timesteps[i];
        let prev = self.timesteps.get(i + 1).copied().unwrap_or(0);
        (t, prev)
    }

    pub fn index_of(&self, t: usize) -> Option<usize> {
        self.timesteps.iter().position(|&s| s == t)
    }

    pub fn predictor<'a>(
        &'a self,
        prior: &'a MixturePrior,
        schedule: &'a NoiseSchedule,
    ) -> NoisePredictor<'a> {
        NoisePredictor {
            prior,
            schedule,
            condition: self.condition.as_deref(),
            guidance_scale: self.guidance_scale,
        }
    }
}

/// The DDIM update written as `x_prev = a * x + b * eps + extra`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepCoefficients {
    pub a: f64,
    pub b: f64,
}

impl StepCoefficients {
    pub fn new(t: usize, t_prev: usize, sigma: f64, schedule: &NoiseSchedule) -> Result<Self> {
        if t <= t_prev {
            return Err(Error::Schedule(format!("step must go backward, got {t} -> {t_prev}")));
        }
        if !(sigma >= 0.0) {
            return Err(Error::param(format!("sigma must be nonnegative, got {sigma}")));
        }
        let ab_t = schedule.alpha_bar(t)?;
        let ab_p = schedule.alpha_bar(t_prev)?;
        let radicand = 1.0 - ab_p - sigma * sigma;
        if radicand < 0.0 {
            return Err(Error::Schedule(format!(
                "negative radicand 1 - alpha_bar({t_prev}) - sigma^2 = {radicand}"
            )));
        }
        let a = (ab_p / ab_t).sqrt();
        let b = radicand.sqrt() - (1.0 - ab_t).sqrt() * a;
        Ok(StepCoefficients { a, b })
    }

    /// Raw form, for callers that hold alpha_bar values rather than timesteps.
    pub fn from_alpha_bars(ab_t: f64, ab_prev: f64, sigma: f64) -> Result<Self> {
        let radicand = 1.0 - ab_prev - sigma * sigma;
        if radicand < 0.0 {
            return Err(Error::Schedule(format!("negative radicand {radicand}")));
        }
        let a = (ab_prev / ab_t).sqrt();
        Ok(StepCoefficients {
            a,
            b: radicand.sqrt() - (1.0 - ab_t).sqrt() * a,
        })
    }

    pub(crate) fn apply(&self, x: &LatentGrid, eps: &LatentGrid, extra: Option<&LatentGrid>) -> LatentGrid {
        let mut out = x.zip_map(eps, |xi, ei| self.a * xi + self.b * ei);
        if let Some(extra) = extra {
            for (o, e) in out.values_mut().iter_mut().zip(extra.values()) {
                *o += e;
            }
        }
        out
    }
}

/// One DDIM update. `injected_noise` is required (and scaled by `sigma_t`) when `sigma_t > 0`.
pub fn ddim_step(
    x_t: &LatentGrid,
    eps_hat: &LatentGrid,
    t: usize,
    t_prev: usize,
    sigma_t: f64,
    injected_noise: Option<&LatentGrid>,
    schedule: &NoiseSchedule,
) -> Result<LatentGrid> {
    x_t.ensure_same_shape(eps_hat)?;
    let coeffs = StepCoefficients::new(t, t_prev, sigma_t, schedule)?;
    if sigma_t > 0.0 {
        let noise = injected_noise
            .ok_or_else(|| Error::param("sigma_t > 0 requires injected noise"))?;
        x_t.ensure_same_shape(noise)?;
        Ok(coeffs.apply(x_t, eps_hat, Some(&noise.scaled(sigma_t))))
    } else {
        Ok(coeffs.apply(x_t, eps_hat, None))
    }
}

#[derive(Debug, Clone, Copy)]
pub struct StructureHook<'a> {
    pub t_s: usize,
    pub w_s: &'a LatentGrid,
}

#[derive(Debug, Clone, Copy)]
pub struct DetailHook<'a> {
    pub t_d: usize,
    pub w_d: &'a LatentGrid,
    pub sigma_td: f64,
}

#[derive(Debug, Clone, Copy, Default)]
pub struct Hooks<'a> {
    pub structure: Option<StructureHook<'a>>,
    pub detail: Option<DetailHook<'a>>,
}

impl Hooks<'_> {
    pub fn none() -> Self {
        Hooks::default()
    }

    /// Resolves the detail hook onto a step index, checking both hooks against the grid.
    pub(crate) fn resolve(&self, config: &SamplerConfig) -> Result<Option<usize>> {
        if let Some(s) = self.structure {
            if config.timesteps()[0] != s.t_s {
                return Err(Error::Config(format!(
                    "structure hook at t={} but sampling starts at t={}",
                    s.t_s,
                    config.timesteps()[0]
                )));
            }
        }
        match self.detail {
            None => Ok(None),
            Some(d) => config.index_of(d.t_d).map(Some).ok_or_else(|| {
                Error::Config(format!("detail hook t={} is not on the sampling grid", d.t_d))
            }),
        }
    }
}

/// States entering each step, followed by `(0, x_0)`, plus the noise used at each step.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub states: Vec<(usize, LatentGrid)>,
    pub eps: Vec<LatentGrid>,
    /// `(conditional, unconditional)` predictions when guidance was active.
    pub guidance_parts: Option<Vec<(LatentGrid, LatentGrid)>>,
}

impl Trajectory {
    pub fn final_state(&self) -> &LatentGrid {
        &self.states[self.states.len() - 1].1
    }

    pub fn stored_grids(&self) -> usize {
        self.states.len()
    }
}

/// Runs the sampler from `x_T` to `x_0`.
pub fn sample(
    x_t: &LatentGrid,
    config: &SamplerConfig,
    prior: &MixturePrior,
    schedule: &NoiseSchedule,
    hooks: &Hooks<'_>,
    record: bool,
) -> Result<(LatentGrid, Option<Trajectory>)> {
    if x_t.shape() != prior.shape() {
        return Err(Error::Shape {
            expected: prior.shape().to_string(),
            actual: x_t.shape().to_string(),
        });
    }
    let detail_index = hooks.resolve(config)?;
    let predictor = config.predictor(prior, schedule);
    let mut x = match hooks.structure {
        Some(s) => embed_structure(x_t, s.w_s)?,
        None => x_t.clone(),
    };
    let mut trajectory = record.then(|| Trajectory {
        states: Vec::with_capacity(config.steps() + 1),
        eps: Vec::with_capacity(config.steps()),
        guidance_parts: config.condition.as_ref().map(|_| Vec::with_capacity(config.steps())),
    });
    for i in 0..config.steps() {
        let (t, t_prev) = config.step(i);
        let prediction = predictor.predict(&x, t)?;
        let next = match (detail_index, hooks.detail) {
            (Some(d), Some(hook)) if d == i => {
                StepCoefficients::new(t, t_prev, hook.sigma_td, schedule)?
                    .apply(&x, &prediction.eps, Some(hook.w_d))
            }
            _ => StepCoefficients::new(t, t_prev, 0.0, schedule)?.apply(&x, &prediction.eps, None),
        };
        if let Some(traj) = trajectory.as_mut() {
            let previous = std::mem::replace(&mut x, next);
            traj.states.push((t, previous));
            if let (Some(parts), Some(p)) = (traj.guidance_parts.as_mut(), prediction.parts) {
                parts.push(p);
            }
            traj.eps.push(prediction.eps);
        } else {
            x = next;
        }
    }
    if let Some(traj) = trajectory.as_mut() {
        traj.states.push((0, x.clone()));
    }
    Ok((x, trajectory))
}

/// Mean absolute guidance contribution `|s (eps_c - eps_u)|` per step.
pub fn guidance_profile(trajectory: &Trajectory, scale: f64) -> Result<Vec<(usize, f64)>> {
    let parts = trajectory
        .guidance_parts
        .as_ref()
        .ok_or_else(|| Error::Profile("trajectory was sampled unconditionally".into()))?;
    Ok(parts
        .iter()
        .zip(&trajectory.states)
        .map(|((c, u), (t, _))| {
            let total: f64 = c
                .values()
                .iter()
                .zip(u.values())
                .map(|(ci, ui)| (scale * (ci - ui)).abs())
                .sum();
            (*t, total / c.len() as f64)
        })
        .collect())
}
