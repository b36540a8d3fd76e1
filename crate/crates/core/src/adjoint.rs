//! Gradients of an output loss with respect to the watermarks.
//!
//! The adjoint path walks the sampling grid backwards from `x_0`, rebuilding
//! each predecessor state by inverting the step (cheap initial guess, then
//! Newton corrections through the factored denoiser Jacobian) and pulling the
//! adjoint `a = dL/dx` through `A I + B J` at every step. Only the current
//! state, the adjoint and the gradient accumulators live across steps.
//!
//! The reference path does the same sweep over a stored trajectory.

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::diffusion::{
    sample, DetailHook, Hooks, MixturePrior, NoiseSchedule, SamplerConfig, StepCoefficients,
    StructureHook, Trajectory,
};
use crate::error::{Error, Result};
use crate::grid::{LatentGrid, Shape};
use crate::watermark::{embed_structure_vjp, invert_structure, EmbedConfig, WatermarkPair};

pub const DEFAULT_NEWTON_CORRECTIONS: usize = 2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WatermarkMode {
    #[default]
    Dual,
    StructureOnly,
    DetailOnly,
}

impl WatermarkMode {
    pub fn uses_structure(self) -> bool {
        !matches!(self, WatermarkMode::DetailOnly)
    }

    pub fn uses_detail(self) -> bool {
        !matches!(self, WatermarkMode::StructureOnly)
    }
}

/// Sampler, prior and injection points shared by the forward and backward passes.
#[derive(Debug, Clone, Copy)]
pub struct Pipeline<'a> {
    pub config: &'a SamplerConfig,
    pub prior: &'a MixturePrior,
    pub schedule: &'a NoiseSchedule,
    pub embed: EmbedConfig,
    pub mode: WatermarkMode,
}

impl<'a> Pipeline<'a> {
    pub fn new(
        config: &'a SamplerConfig,
        prior: &'a MixturePrior,
        schedule: &'a NoiseSchedule,
        embed: EmbedConfig,
        mode: WatermarkMode,
    ) -> Result<Self> {
        embed.validate(config)?;
        Ok(Pipeline {
            config,
            prior,
            schedule,
            embed,
            mode,
        })
    }

    pub fn hooks<'w>(&self, wm: &'w WatermarkPair) -> Hooks<'w> {
        Hooks {
            structure: self.mode.uses_structure().then_some(StructureHook {
                t_s: self.embed.t_s,
                w_s: &wm.w_s,
            }),
            detail: self.mode.uses_detail().then_some(DetailHook {
                t_d: self.embed.t_d,
                w_d: &wm.w_d,
                sigma_td: wm.sigma_td,
            }),
        }
    }

    pub fn detail_index(&self) -> Option<usize> {
        if self.mode.uses_detail() {
            self.config.index_of(self.embed.t_d)
        } else {
            None
        }
    }

    pub fn forward(
        &self,
        x_t: &LatentGrid,
        wm: &WatermarkPair,
        record: bool,
    ) -> Result<(LatentGrid, Option<Trajectory>)> {
        sample(x_t, self.config, self.prior, self.schedule, &self.hooks(wm), record)
    }

    /// Coefficients and additive term of step `i`.
    fn step<'w>(&self, i: usize, wm: &'w WatermarkPair) -> Result<(usize, StepCoefficients, Option<&'w LatentGrid>)> {
        let (t, t_prev) = self.config.step(i);
        if self.detail_index() == Some(i) {
            Ok((t, StepCoefficients::new(t, t_prev, wm.sigma_td, self.schedule)?, Some(&wm.w_d)))
        } else {
            Ok((t, StepCoefficients::new(t, t_prev, 0.0, self.schedule)?, None))
        }
    }
}

/// The increment `x_{t_prev} - x_t` of the sampler step taken at `t`.
pub fn residual_f(pipeline: &Pipeline<'_>, wm: &WatermarkPair, x: &LatentGrid, t: usize) -> Result<LatentGrid> {
    let i = pipeline
        .config
        .index_of(t)
        .ok_or_else(|| Error::Config(format!("t={t} is not on the sampling grid")))?;
    let (t, coeffs, extra) = pipeline.step(i, wm)?;
    let eps = pipeline.config.predictor(pipeline.prior, pipeline.schedule).predict(x, t)?.eps;
    let next = coeffs.apply(x, &eps, extra);
    Ok(next.zip_map(x, |n, xi| n - xi))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GradMethod {
    Adjoint,
    Reference,
    FiniteDiff,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Coordinate {
    Structure(usize),
    Detail(usize),
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradResult {
    pub grad_ws: LatentGrid,
    pub grad_wd: LatentGrid,
    pub method: GradMethod,
    /// Coordinates actually evaluated; `None` means every coordinate.
    pub coordinates: Option<Vec<Coordinate>>,
}

impl GradResult {
    pub fn zeros(shape: Shape, method: GradMethod) -> Self {
        GradResult {
            grad_ws: LatentGrid::zeros(shape),
            grad_wd: LatentGrid::zeros(shape),
            method,
            coordinates: None,
        }
    }

    pub fn get(&self, c: Coordinate) -> f64 {
        match c {
            Coordinate::Structure(i) => self.grad_ws.values()[i],
            Coordinate::Detail(i) => self.grad_wd.values()[i],
        }
    }

    /// Both gradients concatenated (`w_s` first).
    pub fn flatten(&self) -> Vec<f64> {
        let mut v = self.grad_ws.values().to_vec();
        v.extend_from_slice(self.grad_wd.values());
        v
    }

    /// Values at the given coordinates, in order.
    pub fn at(&self, coords: &[Coordinate]) -> Vec<f64> {
        coords.iter().map(|&c| self.get(c)).collect()
    }
}

/// Counts grid-sized buffers held across steps of a backward sweep.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct BufferProbe {
    live: usize,
    peak: usize,
}

impl BufferProbe {
    pub fn new() -> Self {
        BufferProbe::default()
    }

    fn acquire(&mut self, n: usize) {
        self.live += n;
        self.peak = self.peak.max(self.live);
    }

    fn release(&mut self, n: usize) {
        self.live -= n;
    }

    pub fn peak(&self) -> usize {
        self.peak
    }

    pub fn live(&self) -> usize {
        self.live
    }
}

/// Extra gradient at the embedded initial latent, e.g. from the initial-mean penalty.
pub type InitialTerm<'f> = dyn Fn(&LatentGrid) -> Result<LatentGrid> + 'f;

fn check_finite(a: &LatentGrid, step: usize) -> Result<()> {
    if a.is_finite() {
        Ok(())
    } else {
        Err(Error::Divergence { step })
    }
}

/// `(A I + B J(x))^T a`, the adjoint pulled back through one step.
fn pull_back(pipeline: &Pipeline<'_>, x: &LatentGrid, t: usize, coeffs: &StepCoefficients, a: &LatentGrid) -> Result<LatentGrid> {
    let predictor = pipeline.config.predictor(pipeline.prior, pipeline.schedule);
    let (_, jac) = predictor.predict_with_jacobian(x, t)?;
    let ja = jac.apply(a.values());
    Ok(LatentGrid::from_vec(
        a.shape(),
        a.values()
            .iter()
            .zip(&ja)
            .map(|(ai, ji)| coeffs.a * ai + coeffs.b * ji)
            .collect(),
    )
    .unwrap_or_else(|_| a.map(|_| f64::NAN)))
}

/// Solves `A x + B eps(x, t) + extra = y` for `x`.
pub fn reconstruct_state(
    pipeline: &Pipeline<'_>,
    y: &LatentGrid,
    t: usize,
    coeffs: &StepCoefficients,
    extra: Option<&LatentGrid>,
    corrections: usize,
) -> Result<LatentGrid> {
    let predictor = pipeline.config.predictor(pipeline.prior, pipeline.schedule);
    let target = match extra {
        Some(e) => y.zip_map(e, |yi, ei| yi - ei),
        None => y.clone(),
    };
    // Initial guess with the noise prediction frozen at the known state.
    let eps_y = predictor.predict(y, t)?.eps;
    let mut x = target.zip_map(&eps_y, |ti, ei| (ti - coeffs.b * ei) / coeffs.a);
    for _ in 0..corrections {
        let (eps, jac) = predictor.predict_with_jacobian(&x, t)?;
        let residual: Vec<f64> = x
            .values()
            .iter()
            .zip(eps.values())
            .zip(target.values())
            .map(|((xi, ei), ti)| coeffs.a * xi + coeffs.b * ei - ti)
            .collect();
        let delta = jac.solve_shifted(coeffs.a, coeffs.b, &residual)?;
        for (xi, di) in x.values_mut().iter_mut().zip(&delta) {
            *xi -= di;
        }
    }
    Ok(x)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AdjointOptions {
    pub newton_corrections: usize,
}

impl Default for AdjointOptions {
    fn default() -> Self {
        AdjointOptions {
            newton_corrections: DEFAULT_NEWTON_CORRECTIONS,
        }
    }
}

/// Constant-memory gradient from the final state alone.
pub fn adjoint_gradient(
    pipeline: &Pipeline<'_>,
    wm: &WatermarkPair,
    x0: &LatentGrid,
    upstream: &LatentGrid,
    initial: Option<&InitialTerm<'_>>,
    options: AdjointOptions,
    mut probe: Option<&mut BufferProbe>,
) -> Result<GradResult> {
    x0.ensure_same_shape(upstream)?;
    let mut track = |n: isize| {
        if let Some(p) = probe.as_deref_mut() {
            if n > 0 {
                p.acquire(n as usize)
            } else {
                p.release((-n) as usize)
            }
        }
    };
    let shape = x0.shape();
    let mut x = x0.clone();
    let mut a = upstream.clone();
    let mut grad_wd = LatentGrid::zeros(shape);
    track(3);
    for i in (0..pipeline.config.steps()).rev() {
        let (t, coeffs, extra) = pipeline.step(i, wm)?;
        if extra.is_some() {
            grad_wd.add_scaled(1.0, &a);
        }
        x = reconstruct_state(pipeline, &x, t, &coeffs, extra, options.newton_corrections)?;
        if !x.is_finite() {
            return Err(Error::Divergence { step: i });
        }
        a = pull_back(pipeline, &x, t, &coeffs, &a)?;
        check_finite(&a, i)?;
    }
    if let Some(term) = initial {
        a.add_scaled(1.0, &term(&x)?);
    }
    let grad_ws = if pipeline.mode.uses_structure() {
        let x_t = invert_structure(&x, &wm.w_s)?;
        track(1);
        drop(x);
        track(-1);
        let g = embed_structure_vjp(&x_t, &wm.w_s, &a)?;
        track(1);
        drop(x_t);
        track(-1);
        g
    } else {
        drop(x);
        track(-1);
        track(1);
        LatentGrid::zeros(shape)
    };
    check_finite(&grad_ws, 0)?;
    track(-3);
    Ok(GradResult {
        grad_ws,
        grad_wd,
        method: GradMethod::Adjoint,
        coordinates: None,
    })
}

/// Reverse-mode sweep over a stored trajectory (memory linear in the step count).
pub fn reference_gradient(
    pipeline: &Pipeline<'_>,
    wm: &WatermarkPair,
    x_t: &LatentGrid,
    trajectory: Option<&Trajectory>,
    upstream: &LatentGrid,
    initial: Option<&InitialTerm<'_>>,
    probe: Option<&mut BufferProbe>,
) -> Result<GradResult> {
    let traj = trajectory.ok_or_else(|| Error::State("reference gradient needs a recorded trajectory".into()))?;
    if traj.states.len() != pipeline.config.steps() + 1 {
        return Err(Error::State(format!(
            "trajectory holds {} states for a {}-step grid",
            traj.states.len(),
            pipeline.config.steps()
        )));
    }
    upstream.ensure_same_shape(x_t)?;
    let shape = x_t.shape();
    let mut a = upstream.clone();
    let mut grad_wd = LatentGrid::zeros(shape);
    if let Some(p) = probe {
        p.acquire(traj.stored_grids() + 3);
        p.release(traj.stored_grids() + 3);
    }
    for i in (0..pipeline.config.steps()).rev() {
        let (t, coeffs, extra) = pipeline.step(i, wm)?;
        if extra.is_some() {
            grad_wd.add_scaled(1.0, &a);
        }
        let (ts, x) = &traj.states[i];
        debug_assert_eq!(*ts, t);
        a = pull_back(pipeline, x, t, &coeffs, &a)?;
        check_finite(&a, i)?;
    }
    if let Some(term) = initial {
        a.add_scaled(1.0, &term(&traj.states[0].1)?);
    }
    let grad_ws = if pipeline.mode.uses_structure() {
        embed_structure_vjp(x_t, &wm.w_s, &a)?
    } else {
        LatentGrid::zeros(shape)
    };
    Ok(GradResult {
        grad_ws,
        grad_wd,
        method: GradMethod::Reference,
        coordinates: None,
    })
}

fn slot(wm: &mut WatermarkPair, c: Coordinate) -> &mut f64 {
    match c {
        Coordinate::Structure(i) => &mut wm.w_s.values_mut()[i],
        Coordinate::Detail(i) => &mut wm.w_d.values_mut()[i],
    }
}

fn slot_grad(g: &mut GradResult, c: Coordinate) -> &mut f64 {
    match c {
        Coordinate::Structure(i) => &mut g.grad_ws.values_mut()[i],
        Coordinate::Detail(i) => &mut g.grad_wd.values_mut()[i],
    }
}

/// Central differences on `count` random coordinates (all when `count` covers both grids).
pub fn finite_diff_gradient(
    loss: &dyn Fn(&WatermarkPair) -> Result<f64>,
    wm: &WatermarkPair,
    h: f64,
    count: usize,
    seed: u64,
) -> Result<GradResult> {
    if !(h > 0.0) {
        return Err(Error::param(format!("probe step must be positive, got {h}")));
    }
    let n = wm.w_s.len();
    let total = 2 * n;
    let chosen: Vec<usize> = if count >= total {
        (0..total).collect()
    } else {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut idx = index::sample(&mut rng, total, count).into_vec();
        idx.sort_unstable();
        idx
    };
    let coords: Vec<Coordinate> = chosen
        .iter()
        .map(|&c| if c < n { Coordinate::Structure(c) } else { Coordinate::Detail(c - n) })
        .collect();
    let mut out = GradResult::zeros(wm.shape(), GradMethod::FiniteDiff);
    let mut probe = wm.clone();
    for &c in &coords {
        let base = *slot(&mut probe, c);
        *slot(&mut probe, c) = base + h;
        let plus = loss(&probe)?;
        *slot(&mut probe, c) = base - h;
        let minus = loss(&probe)?;
        *slot(&mut probe, c) = base;
        *slot_grad(&mut out, c) = (plus - minus) / (2.0 * h);
    }
    out.coordinates = if count >= total { None } else { Some(coords) };
    Ok(out)
}
