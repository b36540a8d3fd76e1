//! Gradient cross-checks and the guidance-magnitude profile.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::config::ExperimentConfig;
use super::run::{derive_seed, initial_latent, initial_watermarks, Setup};
use crate::adjoint::{
    adjoint_gradient, finite_diff_gradient, reference_gradient, AdjointOptions, GradMethod, GradResult, InitialTerm,
    Pipeline,
};
use crate::diffusion::{guidance_profile, sample, Hooks, MixturePrior, NoiseSchedule, SamplerConfig};
use crate::error::{Error, Result};
use crate::grid::{cosine_similarity, relative_l2, LatentGrid};
use crate::losses::{l_init, l_init_grad};
use crate::watermark::WatermarkPair;

/// Smooth probe loss `<g, x_0> + l_init(x_w, x_T)` with a fixed random `g`.
pub struct ProbeLoss<'a> {
    pub pipeline: Pipeline<'a>,
    pub x_t: LatentGrid,
    pub upstream: LatentGrid,
}

impl<'a> ProbeLoss<'a> {
    pub fn new(pipeline: Pipeline<'a>, x_t: LatentGrid, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let upstream = LatentGrid::gaussian(x_t.shape(), 1.0, &mut rng);
        ProbeLoss {
            pipeline,
            x_t,
            upstream,
        }
    }

    pub fn value(&self, wm: &WatermarkPair) -> Result<f64> {
        let (x0, _) = self.pipeline.forward(&self.x_t, wm, false)?;
        let mut v = x0.dot(&self.upstream);
        if self.pipeline.mode.uses_structure() {
            let x_w = crate::watermark::embed_structure(&self.x_t, &wm.w_s)?;
            v += l_init(&x_w, &self.x_t)?;
        }
        Ok(v)
    }

    pub fn gradient(&self, wm: &WatermarkPair, method: GradMethod) -> Result<GradResult> {
        let x_ref = &self.x_t;
        let initial = move |x_w: &LatentGrid| l_init_grad(x_w, x_ref);
        let initial: Option<&InitialTerm<'_>> = self.pipeline.mode.uses_structure().then_some(&initial);
        match method {
            GradMethod::Adjoint => {
                let (x0, _) = self.pipeline.forward(&self.x_t, wm, false)?;
                adjoint_gradient(&self.pipeline, wm, &x0, &self.upstream, initial, AdjointOptions::default(), None)
            }
            GradMethod::Reference => {
                let (_, traj) = self.pipeline.forward(&self.x_t, wm, true)?;
                reference_gradient(&self.pipeline, wm, &self.x_t, traj.as_ref(), &self.upstream, initial, None)
            }
            GradMethod::FiniteDiff => Err(Error::param("use finite_diff for probe differences")),
        }
    }

    pub fn finite_diff(&self, wm: &WatermarkPair, h: f64, count: usize, seed: u64) -> Result<GradResult> {
        finite_diff_gradient(&|w| self.value(w), wm, h, count, seed)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradcheckReport {
    pub steps: usize,
    pub cosine: f64,
    pub relative_l2: f64,
    pub fd_coordinates: usize,
    /// Largest `|ref - fd| / max(|fd|, 1e-8)` over the probed coordinates.
    pub fd_max_relative: f64,
}

/// Adjoint against reference on the full gradient, reference against finite differences on `fd_count` coordinates.
pub fn gradcheck(cfg: &ExperimentConfig, setup: &Setup, fd_count: usize) -> Result<GradcheckReport> {
    let pipeline = setup.pipeline(cfg.watermark.mode);
    let x_t = initial_latent(cfg, setup.shape, 0);
    let probe = ProbeLoss::new(pipeline, x_t, derive_seed(cfg.seed, "gradcheck", 0));
    let wm = initial_watermarks(cfg, setup.shape, 0)?;
    let adj = probe.gradient(&wm, GradMethod::Adjoint)?;
    let reference = probe.gradient(&wm, GradMethod::Reference)?;
    let (a, r) = (adj.flatten(), reference.flatten());
    let mut fd_max_relative = 0.0f64;
    let mut fd_coordinates = 0;
    if fd_count > 0 {
        let fd = probe.finite_diff(&wm, 1e-5, fd_count, derive_seed(cfg.seed, "gradcheck", 1))?;
        let coords = fd.coordinates.clone().unwrap_or_default();
        fd_coordinates = coords.len();
        for c in coords {
            let (f, g) = (fd.get(c), reference.get(c));
            fd_max_relative = fd_max_relative.max((g - f).abs() / f.abs().max(1e-8));
        }
    }
    Ok(GradcheckReport {
        steps: setup.sampler.steps(),
        cosine: cosine_similarity(&a, &r),
        relative_l2: relative_l2(&a, &r),
        fd_coordinates,
        fd_max_relative,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GuidanceReport {
    pub trajectories: usize,
    /// `(t, mean magnitude)` averaged over trajectories, in sampling order.
    pub profile: Vec<(usize, f64)>,
    pub early_mean: f64,
    pub late_mean: f64,
}

/// Mean guidance magnitude per step over `count` guided trajectories.
pub fn guidance_diagnostic(
    prior: &MixturePrior,
    schedule: &NoiseSchedule,
    sampler: &SamplerConfig,
    count: usize,
    seed: u64,
) -> Result<GuidanceReport> {
    if sampler.condition.is_none() {
        return Err(Error::Profile("guidance profile needs a conditional sampler".into()));
    }
    if count == 0 {
        return Err(Error::Profile("need at least one trajectory".into()));
    }
    let n = sampler.steps();
    let mut sums = vec![0.0; n];
    let mut times = Vec::new();
    for i in 0..count {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, "guidance", i as u64));
        let x_t = LatentGrid::gaussian(prior.shape(), 1.0, &mut rng);
        let (_, traj) = sample(&x_t, sampler, prior, schedule, &Hooks::none(), true)?;
        let traj = traj.expect("recorded");
        let p = guidance_profile(&traj, sampler.guidance_scale)?;
        times = p.iter().map(|(t, _)| *t).collect();
        for (s, (_, m)) in sums.iter_mut().zip(&p) {
            *s += m;
        }
    }
    let profile: Vec<(usize, f64)> = times.into_iter().zip(sums.iter().map(|s| s / count as f64)).collect();
    let window = ((0.4 * n as f64).floor() as usize).max(1);
    let mean = |xs: &[(usize, f64)]| xs.iter().map(|(_, m)| m).sum::<f64>() / xs.len() as f64;
    Ok(GuidanceReport {
        trajectories: count,
        early_mean: mean(&profile[..window]),
        late_mean: mean(&profile[n - window..]),
        profile,
    })
}
