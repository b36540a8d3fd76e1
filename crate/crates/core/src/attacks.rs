//! Grid-scale image attacks.
//!
//! Pixel-sized parameters are expressed relative to the grid size so their
//! severity carries over to 8-16 pixel grids. Every attack returns a grid of
//! the input shape.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::diffusion::{forward_noise, sample, Hooks, MixturePrior, NoiseSchedule, SamplerConfig};
use crate::error::{Error, Result};
use crate::grid::{LatentGrid, Shape};

/// Blur standard deviation as a fraction of the grid width.
pub const DEFAULT_BLUR_FRACTION: f64 = 11.0 / 512.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum AttackSpec {
    None,
    Hflip,
    Rotate { degrees: f64 },
    Resize { scale: f64 },
    CenterCrop { ratio: f64 },
    GaussianBlur {
        #[serde(default = "default_blur")]
        sigma_fraction: f64,
    },
    Brightness { factor: f64 },
    Contrast { factor: f64 },
    Saturation { factor: f64 },
    Quantize {
        #[serde(default = "default_bits")]
        bits: u32,
    },
    RandomErase {
        fraction: f64,
        #[serde(default)]
        seed: u64,
    },
    AdditiveNoise {
        std: f64,
        #[serde(default)]
        seed: u64,
    },
    Regenerate {
        t_a: usize,
        #[serde(default)]
        seed: u64,
    },
}

fn default_blur() -> f64 {
    DEFAULT_BLUR_FRACTION
}

fn default_bits() -> u32 {
    6
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttackCategory {
    Clean,
    Geometric,
    Valuemetric,
    Editing,
    Regeneration,
}

impl AttackSpec {
    pub fn category(&self) -> AttackCategory {
        use AttackSpec::*;
        match self {
            None => AttackCategory::Clean,
            Hflip | Rotate { .. } | Resize { .. } | CenterCrop { .. } => AttackCategory::Geometric,
            GaussianBlur { .. } | Brightness { .. } | Contrast { .. } | Saturation { .. }
            | Quantize { .. } | AdditiveNoise { .. } => AttackCategory::Valuemetric,
            RandomErase { .. } => AttackCategory::Editing,
            Regenerate { .. } => AttackCategory::Regeneration,
        }
    }

    /// Short name with parameters, e.g. `rotate(40)`.
    pub fn label(&self) -> String {
        use AttackSpec::*;
        match self {
            None => "none".into(),
            Hflip => "hflip".into(),
            Rotate { degrees } => format!("rotate({degrees})"),
            Resize { scale } => format!("resize({scale})"),
            CenterCrop { ratio } => format!("center_crop({ratio})"),
            GaussianBlur { sigma_fraction } => format!("gaussian_blur({sigma_fraction:.6})"),
            Brightness { factor } => format!("brightness({factor})"),
            Contrast { factor } => format!("contrast({factor})"),
            Saturation { factor } => format!("saturation({factor})"),
            Quantize { bits } => format!("quantize({bits})"),
            RandomErase { fraction, .. } => format!("random_erase({fraction})"),
            AdditiveNoise { std, .. } => format!("additive_noise({std})"),
            Regenerate { t_a, .. } => format!("regenerate({t_a})"),
        }
    }

    /// Same attack with its random seed replaced (no-op for deterministic kinds).
    pub fn with_seed(&self, new_seed: u64) -> AttackSpec {
        let mut out = self.clone();
        match &mut out {
            AttackSpec::RandomErase { seed, .. }
            | AttackSpec::AdditiveNoise { seed, .. }
            | AttackSpec::Regenerate { seed, .. } => *seed = new_seed,
            _ => {}
        }
        out
    }

    pub fn validate(&self, shape: Shape) -> Result<()> {
        use AttackSpec::*;
        let unit = |name: &str, v: f64| {
            if v > 0.0 && v <= 1.0 {
                Ok(())
            } else {
                Err(Error::param(format!("{name} must be in (0, 1], got {v}")))
            }
        };
        let positive = |name: &str, v: f64| {
            if v >= 0.0 && v.is_finite() {
                Ok(())
            } else {
                Err(Error::param(format!("{name} must be nonnegative, got {v}")))
            }
        };
        match *self {
            None | Hflip => Ok(()),
            Rotate { degrees } if degrees.is_finite() => Ok(()),
            Rotate { degrees } => Err(Error::param(format!("invalid rotation {degrees}"))),
            Resize { scale } => unit("resize scale", scale),
            CenterCrop { ratio } => unit("crop ratio", ratio),
            GaussianBlur { sigma_fraction } => positive("blur fraction", sigma_fraction),
            Brightness { factor } | Contrast { factor } => positive("factor", factor),
            Saturation { factor } => {
                if shape.channels != 3 {
                    return Err(Error::param("saturation needs a 3-channel grid"));
                }
                positive("saturation factor", factor)
            }
            Quantize { bits } if (1..=16).contains(&bits) => Ok(()),
            Quantize { bits } => Err(Error::param(format!("quantization bits {bits} outside [1, 16]"))),
            RandomErase { fraction, .. } => unit("erase fraction", fraction),
            AdditiveNoise { std, .. } => positive("noise std", std),
            Regenerate { .. } => Ok(()),
        }
    }
}

/// What regeneration needs to re-run the sampler.
#[derive(Debug, Clone, Copy)]
pub struct AttackContext<'a> {
    pub prior: &'a MixturePrior,
    pub schedule: &'a NoiseSchedule,
    pub config: &'a SamplerConfig,
}

pub fn apply_attack(image: &LatentGrid, spec: &AttackSpec, context: Option<&AttackContext<'_>>) -> Result<LatentGrid> {
    let shape = image.shape();
    spec.validate(shape)?;
    let out = match *spec {
        AttackSpec::None => image.clone(),
        AttackSpec::Hflip => hflip(image),
        AttackSpec::Rotate { degrees } => rotate(image, degrees),
        AttackSpec::Resize { scale } => {
            if scale == 1.0 {
                image.clone()
            } else {
                let h = ((shape.height as f64 * scale).round() as usize).max(1);
                let w = ((shape.width as f64 * scale).round() as usize).max(1);
                let small = resample(image, 0.0, 0.0, shape.height as f64, shape.width as f64, h, w);
                resample(&small, 0.0, 0.0, h as f64, w as f64, shape.height, shape.width)
            }
        }
        AttackSpec::CenterCrop { ratio } => {
            if ratio == 1.0 {
                image.clone()
            } else {
                let (ch, cw) = (shape.height as f64 * ratio, shape.width as f64 * ratio);
                let (y0, x0) = ((shape.height as f64 - ch) / 2.0, (shape.width as f64 - cw) / 2.0);
                resample(image, y0, x0, ch, cw, shape.height, shape.width)
            }
        }
        AttackSpec::GaussianBlur { sigma_fraction } => gaussian_blur(image, sigma_fraction * shape.width as f64),
        AttackSpec::Brightness { factor } => image.scaled(factor),
        AttackSpec::Contrast { factor: 1.0 } => image.clone(),
        AttackSpec::Contrast { factor } => {
            let m = image.mean();
            image.map(|v| m + factor * (v - m))
        }
        AttackSpec::Saturation { factor: 1.0 } => image.clone(),
        AttackSpec::Saturation { factor } => saturation(image, factor),
        AttackSpec::Quantize { bits } => quantize(image, bits),
        AttackSpec::RandomErase { fraction, seed } => random_erase(image, fraction, seed),
        AttackSpec::AdditiveNoise { std, seed } => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let noise = LatentGrid::gaussian(shape, std, &mut rng);
            image.zip_map(&noise, |a, b| a + b)
        }
        AttackSpec::Regenerate { t_a, seed } => {
            let ctx = context.ok_or_else(|| Error::param("regeneration needs a prior and sampler"))?;
            regenerate(image, t_a, ctx.prior, ctx.schedule, ctx.config, seed)?
        }
    };
    debug_assert_eq!(out.shape(), shape);
    if !out.is_finite() {
        return Err(Error::Degenerate(format!("{} produced non-finite values", spec.label())));
    }
    Ok(out)
}

fn hflip(image: &LatentGrid) -> LatentGrid {
    let s = image.shape();
    let mut out = LatentGrid::zeros(s);
    for c in 0..s.channels {
        for y in 0..s.height {
            for x in 0..s.width {
                out.set(c, y, x, image.get(c, y, s.width - 1 - x));
            }
        }
    }
    out
}

/// Bilinear sample with edge clamping.
fn bilinear(image: &LatentGrid, c: usize, fy: f64, fx: f64) -> f64 {
    let s = image.shape();
    let fy = fy.clamp(0.0, (s.height - 1) as f64);
    let fx = fx.clamp(0.0, (s.width - 1) as f64);
    let (y0, x0) = (fy.floor() as usize, fx.floor() as usize);
    let (y1, x1) = ((y0 + 1).min(s.height - 1), (x0 + 1).min(s.width - 1));
    let (dy, dx) = (fy - y0 as f64, fx - x0 as f64);
    let top = image.get(c, y0, x0) * (1.0 - dx) + image.get(c, y0, x1) * dx;
    let bottom = image.get(c, y1, x0) * (1.0 - dx) + image.get(c, y1, x1) * dx;
    top * (1.0 - dy) + bottom * dy
}

/// Resamples the window `[y0, y0+h) x [x0, x0+w)` (pixel-area coordinates) onto an `out_h x out_w` grid.
fn resample(image: &LatentGrid, y0: f64, x0: f64, h: f64, w: f64, out_h: usize, out_w: usize) -> LatentGrid {
    let s = image.shape();
    let out_shape = Shape {
        channels: s.channels,
        height: out_h,
        width: out_w,
    };
    let mut out = LatentGrid::zeros(out_shape);
    for c in 0..s.channels {
        for y in 0..out_h {
            let fy = y0 + (y as f64 + 0.5) * h / out_h as f64 - 0.5;
            for x in 0..out_w {
                let fx = x0 + (x as f64 + 0.5) * w / out_w as f64 - 0.5;
                out.set(c, y, x, bilinear(image, c, fy, fx));
            }
        }
    }
    out
}

/// Rotation about the grid center; samples landing outside the frame are zero.
fn rotate(image: &LatentGrid, degrees: f64) -> LatentGrid {
    let s = image.shape();
    let turns = degrees / 90.0;
    if turns == turns.round() && (s.height == s.width || turns.rem_euclid(2.0) == 0.0) {
        let mut out = image.clone();
        for _ in 0..(turns.rem_euclid(4.0) as usize) {
            out = rotate_quarter(&out);
        }
        return out;
    }
    let (sin, cos) = degrees.to_radians().sin_cos();
    let (cy, cx) = ((s.height as f64 - 1.0) / 2.0, (s.width as f64 - 1.0) / 2.0);
    let mut out = LatentGrid::zeros(s);
    for c in 0..s.channels {
        for y in 0..s.height {
            for x in 0..s.width {
                // Inverse map: where does output (y, x) come from.
                let (dy, dx) = (y as f64 - cy, x as f64 - cx);
                let sx = cos * dx + sin * dy + cx;
                let sy = -sin * dx + cos * dy + cy;
                let inside = sy > -0.5 && sy < s.height as f64 - 0.5 && sx > -0.5 && sx < s.width as f64 - 0.5;
                if inside {
                    out.set(c, y, x, bilinear(image, c, sy, sx));
                }
            }
        }
    }
    out
}

/// Counterclockwise quarter turn (square grids, or any grid when applied twice).
fn rotate_quarter(image: &LatentGrid) -> LatentGrid {
    let s = image.shape();
    let out_shape = Shape {
        channels: s.channels,
        height: s.width,
        width: s.height,
    };
    let mut out = LatentGrid::zeros(out_shape);
    for c in 0..s.channels {
        for y in 0..s.height {
            for x in 0..s.width {
                out.set(c, s.width - 1 - x, y, image.get(c, y, x));
            }
        }
    }
    out
}

fn gaussian_blur(image: &LatentGrid, sigma: f64) -> LatentGrid {
    if sigma == 0.0 {
        return image.clone();
    }
    let radius = (3.0 * sigma).ceil().max(1.0) as i64;
    let weights: Vec<f64> = (-radius..=radius)
        .map(|d| (-(d * d) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let total: f64 = weights.iter().sum();
    let weights: Vec<f64> = weights.iter().map(|w| w / total).collect();
    let s = image.shape();
    let pass = |src: &LatentGrid, horizontal: bool| {
        let mut out = LatentGrid::zeros(s);
        for c in 0..s.channels {
            for y in 0..s.height {
                for x in 0..s.width {
                    let mut acc = 0.0;
                    for (k, w) in weights.iter().enumerate() {
                        let d = k as i64 - radius;
                        let (yy, xx) = if horizontal {
                            (y as i64, (x as i64 + d).clamp(0, s.width as i64 - 1))
                        } else {
                            ((y as i64 + d).clamp(0, s.height as i64 - 1), x as i64)
                        };
                        acc += w * src.get(c, yy as usize, xx as usize);
                    }
                    out.set(c, y, x, acc);
                }
            }
        }
        out
    };
    pass(&pass(image, true), false)
}

fn saturation(image: &LatentGrid, factor: f64) -> LatentGrid {
    let s = image.shape();
    let mut out = image.clone();
    for y in 0..s.height {
        for x in 0..s.width {
            let gray = (0..s.channels).map(|c| image.get(c, y, x)).sum::<f64>() / s.channels as f64;
            for c in 0..s.channels {
                out.set(c, y, x, gray + factor * (image.get(c, y, x) - gray));
            }
        }
    }
    out
}

/// Uniform quantization of the grid's dynamic range to `2^bits` levels.
fn quantize(image: &LatentGrid, bits: u32) -> LatentGrid {
    let lo = image.values().iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = image.values().iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if hi <= lo {
        return image.clone();
    }
    let levels = ((1u64 << bits) - 1) as f64;
    let step = (hi - lo) / levels;
    image.map(|v| lo + ((v - lo) / step).round() * step)
}

fn random_erase(image: &LatentGrid, fraction: f64, seed: u64) -> LatentGrid {
    let s = image.shape();
    let side = fraction.sqrt();
    let eh = ((s.height as f64 * side).round() as usize).clamp(1, s.height);
    let ew = ((s.width as f64 * side).round() as usize).clamp(1, s.width);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let y0 = rng.random_range(0..=s.height - eh);
    let x0 = rng.random_range(0..=s.width - ew);
    let mut out = image.clone();
    for c in 0..s.channels {
        for y in y0..y0 + eh {
            for x in x0..x0 + ew {
                out.set(c, y, x, 0.0);
            }
        }
    }
    out
}

/// Re-noises to `t_a` with fresh noise and samples back to `t = 0`, unconditionally.
pub fn regenerate(
    image: &LatentGrid,
    t_a: usize,
    prior: &MixturePrior,
    schedule: &NoiseSchedule,
    config: &SamplerConfig,
    seed: u64,
) -> Result<LatentGrid> {
    let top = config.timesteps()[0];
    if t_a > top {
        return Err(Error::param(format!("regeneration strength {t_a} above grid maximum {top}")));
    }
    if t_a == 0 {
        return Ok(image.clone());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = LatentGrid::gaussian(image.shape(), 1.0, &mut rng);
    let noised = forward_noise(image, t_a, &noise, schedule)?;
    let mut steps = vec![t_a];
    steps.extend(config.timesteps().iter().copied().filter(|&t| t < t_a));
    let sub = SamplerConfig::new(steps, schedule.total_steps())?;
    let (out, _) = sample(&noised, &sub, prior, schedule, &Hooks::none(), false)?;
    Ok(out)
}

/// The desk-scale suite: geometric, valuemetric, editing and regeneration attacks.
pub fn default_suite(shape: Shape) -> Vec<AttackSpec> {
    let mut suite = vec![
        AttackSpec::None,
        AttackSpec::Hflip,
        AttackSpec::Rotate { degrees: 40.0 },
        AttackSpec::Resize { scale: 0.6 },
        AttackSpec::CenterCrop { ratio: 0.6 },
        AttackSpec::GaussianBlur {
            sigma_fraction: DEFAULT_BLUR_FRACTION,
        },
        AttackSpec::Brightness { factor: 0.5 },
        AttackSpec::Contrast { factor: 0.5 },
        AttackSpec::Quantize { bits: 6 },
        AttackSpec::RandomErase { fraction: 0.1, seed: 0 },
        AttackSpec::Regenerate { t_a: 451, seed: 0 },
    ];
    if shape.channels == 3 {
        suite.insert(8, AttackSpec::Saturation { factor: 0.5 });
    }
    suite
}
