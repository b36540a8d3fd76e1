//! Quality regularizers and the weighted objective.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{mean, LatentGrid};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub msg: f64,
    pub init: f64,
    pub low: f64,
    pub high: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            msg: 0.1,
            init: 100.0,
            low: 1000.0,
            high: 100.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("msg", self.msg), ("init", self.init), ("low", self.low), ("high", self.high)] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::param(format!("loss weight {name} must be >= 0, got {v}")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub msg: f64,
    pub init: f64,
    pub low: f64,
    pub high: f64,
    pub total: f64,
}

pub fn total_loss(msg: f64, init: f64, low: f64, high: f64, weights: &LossWeights) -> Result<LossBreakdown> {
    for (name, v) in [("msg", msg), ("init", init), ("low", low), ("high", high)] {
        if !(v >= 0.0) {
            return Err(Error::Contract(format!("loss component {name} is {v}")));
        }
    }
    Ok(LossBreakdown {
        msg,
        init,
        low,
        high,
        total: weights.msg * msg + weights.init * init + weights.low * low + weights.high * high,
    })
}

/// `(mean(x_w) - mean(x))^2`.
pub fn l_init(x_w: &LatentGrid, x: &LatentGrid) -> Result<f64> {
    x_w.ensure_same_shape(x)?;
    let d = x_w.mean() - x.mean();
    Ok(d * d)
}

/// Gradient of [`l_init`] with respect to `x_w`.
pub fn l_init_grad(x_w: &LatentGrid, x: &LatentGrid) -> Result<LatentGrid> {
    x_w.ensure_same_shape(x)?;
    let g = 2.0 * (x_w.mean() - x.mean()) / x_w.len() as f64;
    Ok(LatentGrid::filled(x_w.shape(), g))
}

/// Squared mean and variance drift of one watermark from its initialization.
pub fn low_order_drift(w: &LatentGrid, init: &LatentGrid) -> Result<f64> {
    w.ensure_same_shape(init)?;
    let dm = w.mean() - init.mean();
    let dv = w.variance() - init.variance();
    Ok(dm * dm + dv * dv)
}

pub fn low_order_drift_grad(w: &LatentGrid, init: &LatentGrid) -> Result<LatentGrid> {
    w.ensure_same_shape(init)?;
    let n = w.len() as f64;
    let m = w.mean();
    let dm = m - init.mean();
    let dv = w.variance() - init.variance();
    Ok(w.map(|wi| 2.0 * dm / n + 4.0 * dv * (wi - m) / n))
}

pub fn l_low(w_s: &LatentGrid, w_d: &LatentGrid, w_s_init: &LatentGrid, w_d_init: &LatentGrid) -> Result<f64> {
    Ok(low_order_drift(w_s, w_s_init)? + low_order_drift(w_d, w_d_init)?)
}

struct Standardized {
    z: Vec<f64>,
    std: f64,
}

fn standardize(w: &LatentGrid) -> Result<Standardized> {
    let m = w.mean();
    let std = w.variance().sqrt();
    if !(std > 0.0) {
        return Err(Error::Degenerate("watermark has zero standard deviation".into()));
    }
    Ok(Standardized {
        z: w.values().iter().map(|v| (v - m) / std).collect(),
        std,
    })
}

fn moment(z: &[f64], p: i32) -> f64 {
    mean(&z.iter().map(|v| v.powi(p)).collect::<Vec<_>>())
}

/// `d M_p / d x` for the standardized moment `M_p = mean(z^p)`.
fn moment_grad(s: &Standardized, p: i32) -> Vec<f64> {
    let n = s.z.len() as f64;
    let mp = moment(&s.z, p);
    let mp1 = moment(&s.z, p - 1);
    let scale = f64::from(p) / (n * s.std);
    s.z.iter()
        .map(|zi| scale * (zi.powi(p - 1) - mp1 - zi * mp))
        .collect()
}

/// `(M_4 - 3)^2`, the squared excess kurtosis.
pub fn kurtosis_loss(w: &LatentGrid) -> Result<f64> {
    let s = standardize(w)?;
    let d = moment(&s.z, 4) - 3.0;
    Ok(d * d)
}

/// `M_3^2`, the squared skewness.
pub fn skewness_loss(w: &LatentGrid) -> Result<f64> {
    let s = standardize(w)?;
    let m3 = moment(&s.z, 3);
    Ok(m3 * m3)
}

/// Kurtosis plus skewness loss of one watermark.
pub fn high_order(w: &LatentGrid) -> Result<f64> {
    Ok(kurtosis_loss(w)? + skewness_loss(w)?)
}

pub fn high_order_grad(w: &LatentGrid) -> Result<LatentGrid> {
    let s = standardize(w)?;
    let kur = 2.0 * (moment(&s.z, 4) - 3.0);
    let ske = 2.0 * moment(&s.z, 3);
    let g4 = moment_grad(&s, 4);
    let g3 = moment_grad(&s, 3);
    LatentGrid::from_vec(
        w.shape(),
        g4.iter().zip(&g3).map(|(a, b)| kur * a + ske * b).collect(),
    )
}

pub fn l_high(w_s: &LatentGrid, w_d: &LatentGrid) -> Result<f64> {
    Ok(high_order(w_s)? + high_order(w_d)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::Shape;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn weighted_totals() {
        let w = LossWeights::default();
        assert_eq!(total_loss(0.0, 0.0, 0.0, 0.0, &w).unwrap().total, 0.0);
        assert!((total_loss(1.0, 0.0, 0.0, 0.0, &w).unwrap().total - 0.1).abs() < 1e-15);
        let b = total_loss(0.5, 0.001, 0.0001, 0.01, &w).unwrap();
        assert!((b.total - 1.25).abs() < 1e-12);
        assert!(matches!(total_loss(-1.0, 0.0, 0.0, 0.0, &w), Err(Error::Contract(_))));
    }

    #[test]
    fn init_cases() {
        let s = Shape::new(1, 2, 2).unwrap();
        let a = LatentGrid::filled(s, 0.3);
        let b = LatentGrid::filled(s, 0.1);
        assert!((l_init(&a, &b).unwrap() - 0.04).abs() < 1e-15);
        assert_eq!(l_init(&a, &a).unwrap(), 0.0);
    }

    #[test]
    fn low_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let s = Shape::new(1, 8, 8).unwrap();
        let ws = LatentGrid::gaussian(s, 0.1, &mut rng);
        let wd = LatentGrid::gaussian(s, 0.1, &mut rng);
        assert_eq!(l_low(&ws, &wd, &ws, &wd).unwrap(), 0.0);
        let shifted = ws.map(|v| v + 0.1);
        assert!((l_low(&shifted, &wd, &ws, &wd).unwrap() - 0.01).abs() < 1e-12);
    }

    #[test]
    fn two_point_sample() {
        let s = Shape::new(1, 4, 4).unwrap();
        let w = LatentGrid::from_vec(s, (0..16).map(|i| if i % 2 == 0 { 1.0 } else { -1.0 }).collect()).unwrap();
        assert_eq!(skewness_loss(&w).unwrap(), 0.0);
        assert!((kurtosis_loss(&w).unwrap() - 4.0).abs() < 1e-12);
        assert!(matches!(high_order(&LatentGrid::zeros(s)), Err(Error::Degenerate(_))));
    }
}
