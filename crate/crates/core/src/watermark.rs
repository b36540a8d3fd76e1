//! Structure and detail embedding operators.
//!
//! The structure watermark enters the initial latent through a two-step
//! normalization: `y = w_s + gamma x_T` with `gamma = sqrt((V - var(w_s)) / V)`,
//! `V = var(x_T)`, followed by a rescale `y sqrt(V / var(y))` that absorbs the
//! cross-covariance term the first step ignores. The detail watermark takes the
//! place of the stochastic term of one DDIM step.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::diffusion::{NoiseSchedule, SamplerConfig, StepCoefficients};
use crate::error::{Error, Result};
use crate::format::{Reader, Writer};
use crate::grid::{covariance, dot, mean, variance, LatentGrid, Shape};

pub const DEFAULT_INIT_VARIANCE: f64 = 0.01;
pub const DEFAULT_SIGMA_TD: f64 = 0.1;

#[derive(Debug, Clone, PartialEq)]
pub struct WatermarkPair {
    pub w_s: LatentGrid,
    pub w_d: LatentGrid,
    pub init_variance: f64,
    pub sigma_td: f64,
    pub seed: u64,
}

impl WatermarkPair {
    pub fn zeros(shape: Shape) -> Self {
        WatermarkPair {
            w_s: LatentGrid::zeros(shape),
            w_d: LatentGrid::zeros(shape),
            init_variance: DEFAULT_INIT_VARIANCE,
            sigma_td: DEFAULT_SIGMA_TD,
            seed: 0,
        }
    }

    pub fn shape(&self) -> Shape {
        self.w_s.shape()
    }

    const MAGIC: &'static [u8; 4] = b"LMWM";

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = Writer::new(Self::MAGIC, 1);
        w.shape(self.shape());
        w.f64(self.init_variance);
        w.f64(self.sigma_td);
        w.u64(self.seed);
        w.f64s(self.w_s.values());
        w.f64s(self.w_d.values());
        w.write_to(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut r = Reader::open(path, Self::MAGIC, 1)?;
        let shape = r.shape()?;
        let init_variance = r.f64()?;
        let sigma_td = r.f64()?;
        let seed = r.u64()?;
        let w_s = r.f64s(shape.len())?;
        let w_d = r.f64s(shape.len())?;
        r.finish()?;
        let grid = |v| LatentGrid::from_vec(shape, v).map_err(|e| r.fail(e.to_string()));
        Ok(WatermarkPair {
            w_s: grid(w_s)?,
            w_d: grid(w_d)?,
            init_variance,
            sigma_td,
            seed,
        })
    }
}

/// Injection timesteps: `t_s` is the first sampling step, `t_d` a later one.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct EmbedConfig {
    pub t_s: usize,
    pub t_d: usize,
}

impl EmbedConfig {
    /// `t_s` from the grid and `t_d` given by its 0-based step index.
    pub fn on_grid(config: &SamplerConfig, detail_index: usize) -> Result<Self> {
        let t_d = *config.timesteps().get(detail_index).ok_or_else(|| {
            Error::Config(format!(
                "detail step index {detail_index} outside a {}-step grid",
                config.steps()
            ))
        })?;
        let e = EmbedConfig {
            t_s: config.timesteps()[0],
            t_d,
        };
        e.validate(config)?;
        Ok(e)
    }

    pub fn validate(&self, config: &SamplerConfig) -> Result<()> {
        if config.timesteps()[0] != self.t_s {
            return Err(Error::Config(format!("t_s={} is not the first timestep", self.t_s)));
        }
        match config.index_of(self.t_d) {
            Some(i) if i > 0 => Ok(()),
            Some(_) => Err(Error::Config("t_d must come after t_s".into())),
            None => Err(Error::Config(format!("t_d={} is not on the sampling grid", self.t_d))),
        }
    }
}

/// I.i.d. `N(0, variance)` structure and detail watermarks.
pub fn init_watermarks(shape: Shape, variance: f64, seed: u64) -> Result<WatermarkPair> {
    if !(variance > 0.0 && variance.is_finite()) {
        return Err(Error::param(format!("watermark variance must be positive, got {variance}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let std = variance.sqrt();
    let w_s = LatentGrid::gaussian(shape, std, &mut rng);
    let w_d = LatentGrid::gaussian(shape, std, &mut rng);
    Ok(WatermarkPair {
        w_s,
        w_d,
        init_variance: variance,
        sigma_td: DEFAULT_SIGMA_TD,
        seed,
    })
}

struct Structure {
    v: f64,
    gamma: f64,
    y: Vec<f64>,
    var_y: f64,
    k: f64,
}

fn structure_parts(x_t: &LatentGrid, w_s: &LatentGrid) -> Result<Structure> {
    x_t.ensure_same_shape(w_s)?;
    let v = x_t.variance();
    let vw = w_s.variance();
    if vw >= v {
        return Err(Error::Radicand {
            latent_var: v,
            watermark_var: vw,
        });
    }
    let gamma = ((v - vw) / v).sqrt();
    let y: Vec<f64> = w_s
        .values()
        .iter()
        .zip(x_t.values())
        .map(|(w, x)| w + gamma * x)
        .collect();
    let var_y = variance(&y);
    if var_y <= 0.0 {
        return Err(Error::Degenerate("normalized latent has zero variance".into()));
    }
    Ok(Structure {
        v,
        gamma,
        y,
        var_y,
        k: (v / var_y).sqrt(),
    })
}

/// Variance-preserving structure embedding; `embed_structure(x, 0) == x`.
pub fn embed_structure(x_t: &LatentGrid, w_s: &LatentGrid) -> Result<LatentGrid> {
    let s = structure_parts(x_t, w_s)?;
    LatentGrid::from_vec(x_t.shape(), s.y.iter().map(|y| s.k * y).collect())
}

/// `gamma` of the first normalization step.
pub fn structure_gamma(latent_variance: f64, watermark_variance: f64) -> Result<f64> {
    if watermark_variance >= latent_variance {
        return Err(Error::Radicand {
            latent_var: latent_variance,
            watermark_var: watermark_variance,
        });
    }
    Ok(((latent_variance - watermark_variance) / latent_variance).sqrt())
}

/// `(d out / d w_s)^T upstream` for [`embed_structure`], with `x_T` held fixed.
pub fn embed_structure_vjp(
    x_t: &LatentGrid,
    w_s: &LatentGrid,
    upstream: &LatentGrid,
) -> Result<LatentGrid> {
    x_t.ensure_same_shape(upstream)?;
    let s = structure_parts(x_t, w_s)?;
    let n = s.y.len() as f64;
    let g = upstream.values();
    let y_mean = mean(&s.y);
    let gy = dot(g, &s.y);
    // Through the rescale k(y) = sqrt(V / var(y)).
    let h: Vec<f64> = g
        .iter()
        .zip(&s.y)
        .map(|(gi, yi)| s.k * gi - gy * s.k * (yi - y_mean) / (s.var_y * n))
        .collect();
    // Through gamma(w) in y = w + gamma x.
    let xh = dot(x_t.values(), &h);
    let w_mean = w_s.mean();
    let grad: Vec<f64> = h
        .iter()
        .zip(w_s.values())
        .map(|(hi, wi)| hi - xh * (wi - w_mean) / (n * s.gamma * s.v))
        .collect();
    LatentGrid::from_vec(x_t.shape(), grad)
}

/// Recovers `x_T` from `embed_structure(x_T, w_s)` and `w_s`.
pub fn invert_structure(embedded: &LatentGrid, w_s: &LatentGrid) -> Result<LatentGrid> {
    embedded.ensure_same_shape(w_s)?;
    let v = embedded.variance();
    let vw = w_s.variance();
    let gamma = structure_gamma(v, vw)?;
    let c1 = covariance(w_s.values(), embedded.values());
    let disc = c1 * c1 + v * (v - 2.0 * vw);
    if disc < 0.0 {
        return Err(Error::Degenerate("structure inverse has no real root".into()));
    }
    let k = v / (c1 + disc.sqrt());
    LatentGrid::from_vec(
        embedded.shape(),
        embedded
            .values()
            .iter()
            .zip(w_s.values())
            .map(|(z, w)| (z / k - w) / gamma)
            .collect(),
    )
}

/// DDIM step at `t_d` with the stochastic term replaced by `w_d`.
#[allow(clippy::too_many_arguments)]
pub fn embed_detail(
    x_td: &LatentGrid,
    eps_hat: &LatentGrid,
    t_d: usize,
    t_prev: usize,
    w_d: &LatentGrid,
    sigma_td: f64,
    schedule: &NoiseSchedule,
) -> Result<LatentGrid> {
    x_td.ensure_same_shape(eps_hat)?;
    x_td.ensure_same_shape(w_d)?;
    let coeffs = StepCoefficients::new(t_d, t_prev, sigma_td, schedule)?;
    Ok(coeffs.apply(x_td, eps_hat, Some(w_d)))
}
