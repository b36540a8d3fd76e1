//! Closed-form noise prediction for a Gaussian-mixture data prior.
//!
//! For components `N(mu_j, s_j^2 I)` with weights `pi_j`, the noised marginal
//! at time `t` is `sum_j pi_j N(sqrt(ab) mu_j, v_j I)` with
//! `v_j = ab s_j^2 + 1 - ab`. The predicted noise is the scaled negative score
//! `eps = sqrt(1 - ab) * sum_j r_j (x - sqrt(ab) mu_j) / v_j` where `r_j` are
//! the posterior responsibilities.
//!
//! The Jacobian of that map is `c (alpha I - sum_j r_j e_j e_j^T)` with
//! `alpha = sum_j r_j / v_j` and `e_j = d_j - sum_k r_k d_k`, which is kept
//! in factored form ([`NoiseJacobian`]) so that products and shifted solves
//! only cost `O(K n)`.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use super::schedule::NoiseSchedule;
use crate::error::{Error, Result};
use crate::grid::{dot, LatentGrid, Shape};

#[derive(Debug, Clone, PartialEq)]
pub struct PriorComponent {
    pub weight: f64,
    pub mean: LatentGrid,
    pub variance: f64,
    pub label: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MixturePrior {
    shape: Shape,
    components: Vec<PriorComponent>,
}

impl MixturePrior {
    pub fn new(components: Vec<PriorComponent>) -> Result<Self> {
        let first = components
            .first()
            .ok_or_else(|| Error::param("mixture prior needs at least one component"))?;
        let shape = first.mean.shape();
        let mut total = 0.0;
        for (j, c) in components.iter().enumerate() {
            if !(c.weight > 0.0 && c.weight <= 1.0) {
                return Err(Error::param(format!(
                    "component {j}: weight {} outside (0, 1]",
                    c.weight
                )));
            }
            if !(c.variance > 0.0 && c.variance.is_finite()) {
                return Err(Error::param(format!(
                    "component {j}: variance must be positive, got {}",
                    c.variance
                )));
            }
            first.mean.ensure_same_shape(&c.mean)?;
            total += c.weight;
        }
        if (total - 1.0).abs() > 1e-9 {
            return Err(Error::param(format!("component weights sum to {total}, not 1")));
        }
        Ok(MixturePrior { shape, components })
    }

    /// One zero-mean-free component, used throughout the tests.
    pub fn single(mean: LatentGrid, variance: f64) -> Result<Self> {
        MixturePrior::new(vec![PriorComponent {
            weight: 1.0,
            mean,
            variance,
            label: String::from("default"),
        }])
    }

    pub fn shape(&self) -> Shape {
        self.shape
    }

    pub fn components(&self) -> &[PriorComponent] {
        &self.components
    }

    /// Component indices and renormalized weights, optionally restricted to a label.
    fn selection(&self, condition: Option<&str>) -> Result<Vec<(usize, f64)>> {
        let picked: Vec<(usize, f64)> = self
            .components
            .iter()
            .enumerate()
            .filter(|(_, c)| condition.is_none_or(|label| c.label == label))
            .map(|(j, c)| (j, c.weight))
            .collect();
        if picked.is_empty() {
            return Err(Error::Condition(format!(
                "no prior component carries label {:?}",
                condition.unwrap_or_default()
            )));
        }
        let total: f64 = picked.iter().map(|(_, w)| w).sum();
        Ok(picked.into_iter().map(|(j, w)| (j, w / total)).collect())
    }

    /// Log-density of the noised marginal at `t` (up to nothing: exact).
    pub fn log_marginal(
        &self,
        x: &LatentGrid,
        t: usize,
        condition: Option<&str>,
        schedule: &NoiseSchedule,
    ) -> Result<f64> {
        self.shape_check(x)?;
        let ab = schedule.alpha_bar(t)?;
        let n = x.len() as f64;
        let logits: Vec<f64> = self
            .selection(condition)?
            .into_iter()
            .map(|(j, w)| {
                let c = &self.components[j];
                let v = ab * c.variance + 1.0 - ab;
                let sq = squared_offset(x, &c.mean, ab.sqrt());
                w.ln() - 0.5 * n * (2.0 * std::f64::consts::PI * v).ln() - sq / (2.0 * v)
            })
            .collect();
        Ok(log_sum_exp(&logits))
    }

    fn shape_check(&self, x: &LatentGrid) -> Result<()> {
        if x.shape() != self.shape {
            return Err(Error::Shape {
                expected: self.shape.to_string(),
                actual: x.shape().to_string(),
            });
        }
        Ok(())
    }

    fn evaluate(
        &self,
        x: &LatentGrid,
        t: usize,
        condition: Option<&str>,
        schedule: &NoiseSchedule,
        want_jacobian: bool,
    ) -> Result<(LatentGrid, Option<NoiseJacobian>)> {
        self.shape_check(x)?;
        if t == 0 || t > schedule.total_steps() {
            return Err(Error::Schedule(format!(
                "noise prediction needs t in [1, {}], got {t}",
                schedule.total_steps()
            )));
        }
        let ab = schedule.alpha_bar(t)?;
        let root_ab = ab.sqrt();
        let c = (1.0 - ab).sqrt();
        let n = x.len() as f64;
        let selection = self.selection(condition)?;

        let mut logits = Vec::with_capacity(selection.len());
        let mut variances = Vec::with_capacity(selection.len());
        for &(j, w) in &selection {
            let comp = &self.components[j];
            let v = ab * comp.variance + 1.0 - ab;
            let sq = squared_offset(x, &comp.mean, root_ab);
            logits.push(w.ln() - 0.5 * n * v.ln() - sq / (2.0 * v));
            variances.push(v);
        }
        let lse = log_sum_exp(&logits);
        let resp: Vec<f64> = logits.iter().map(|l| (l - lse).exp()).collect();

        // Scaled offsets d_j = (x - sqrt(ab) mu_j) / v_j and their weighted mean.
        let offsets: Vec<Vec<f64>> = selection
            .iter()
            .zip(&variances)
            .map(|(&(j, _), &v)| {
                let mu = self.components[j].mean.values();
                x.values()
                    .iter()
                    .zip(mu)
                    .map(|(xi, mi)| (xi - root_ab * mi) / v)
                    .collect()
            })
            .collect();
        let mut mean_offset = vec![0.0; x.len()];
        for (r, d) in resp.iter().zip(&offsets) {
            for (m, di) in mean_offset.iter_mut().zip(d) {
                *m += r * di;
            }
        }
        let eps = LatentGrid::from_vec(x.shape(), mean_offset.iter().map(|m| c * m).collect())
            .map_err(|_| Error::Degenerate(format!("non-finite noise prediction at t={t}")))?;

        if !want_jacobian {
            return Ok((eps, None));
        }
        let diag = c * resp.iter().zip(&variances).map(|(r, v)| r / v).sum::<f64>();
        let terms = resp
            .iter()
            .zip(offsets)
            .filter(|(r, _)| **r > 0.0)
            .map(|(r, d)| {
                let e: Vec<f64> = d.iter().zip(&mean_offset).map(|(di, m)| di - m).collect();
                (-c * r, e)
            })
            .collect();
        Ok((eps, Some(NoiseJacobian { diag, terms })))
    }
}

fn squared_offset(x: &LatentGrid, mean: &LatentGrid, scale: f64) -> f64 {
    x.values()
        .iter()
        .zip(mean.values())
        .map(|(xi, mi)| {
            let d = xi - scale * mi;
            d * d
        })
        .sum()
}

fn log_sum_exp(values: &[f64]) -> f64 {
    let max = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    max + values.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

/// `J = diag * I + sum_k weight_k v_k v_k^T` (symmetric).
#[derive(Debug, Clone)]
pub struct NoiseJacobian {
    diag: f64,
    terms: Vec<(f64, Vec<f64>)>,
}

impl NoiseJacobian {
    pub fn diag(&self) -> f64 {
        self.diag
    }

    pub fn rank(&self) -> usize {
        self.terms.len()
    }

    /// `J u`; equal to `u^T J` since `J` is symmetric.
    pub fn apply(&self, u: &[f64]) -> Vec<f64> {
        let mut out: Vec<f64> = u.iter().map(|x| self.diag * x).collect();
        for (w, v) in &self.terms {
            let coef = w * dot(v, u);
            for (o, vi) in out.iter_mut().zip(v) {
                *o += coef * vi;
            }
        }
        out
    }

    /// `(1 - s) J_u + s J_c`, the Jacobian of the guided prediction.
    pub fn blend(unconditional: NoiseJacobian, conditional: NoiseJacobian, scale: f64) -> Self {
        let mut terms = Vec::with_capacity(unconditional.terms.len() + conditional.terms.len());
        terms.extend(
            unconditional
                .terms
                .into_iter()
                .map(|(w, v)| ((1.0 - scale) * w, v)),
        );
        terms.extend(conditional.terms.into_iter().map(|(w, v)| (scale * w, v)));
        NoiseJacobian {
            diag: (1.0 - scale) * unconditional.diag + scale * conditional.diag,
            terms,
        }
    }

    /// Solves `(a I + b J) y = rhs` through the low-rank structure.
    pub fn solve_shifted(&self, a: f64, b: f64, rhs: &[f64]) -> Result<Vec<f64>> {
        let beta = a + b * self.diag;
        if !beta.is_finite() || beta.abs() < 1e-300 {
            return Err(Error::Degenerate("singular step Jacobian".into()));
        }
        let k = self.terms.len();
        if k == 0 {
            return Ok(rhs.iter().map(|r| r / beta).collect());
        }
        // y = (rhs - V z) / beta with (beta I + D V^T V) z = D V^T rhs.
        let gram = DMatrix::from_fn(k, k, |i, j| {
            let weight = b * self.terms[i].0;
            let g = dot(&self.terms[i].1, &self.terms[j].1);
            weight * g + if i == j { beta } else { 0.0 }
        });
        let proj = DVector::from_fn(k, |i, _| b * self.terms[i].0 * dot(&self.terms[i].1, rhs));
        let z = gram
            .lu()
            .solve(&proj)
            .ok_or_else(|| Error::Degenerate("singular low-rank correction".into()))?;
        let mut y = rhs.to_vec();
        for (zi, (_, v)) in z.iter().zip(&self.terms) {
            for (yi, vi) in y.iter_mut().zip(v) {
                *yi -= zi * vi;
            }
        }
        for yi in &mut y {
            *yi /= beta;
        }
        Ok(y)
    }
}

/// Closed-form noise prediction for the (optionally label-restricted) mixture.
pub fn analytic_epsilon(
    x_t: &LatentGrid,
    t: usize,
    prior: &MixturePrior,
    condition: Option<&str>,
    schedule: &NoiseSchedule,
) -> Result<LatentGrid> {
    prior
        .evaluate(x_t, t, condition, schedule, false)
        .map(|(eps, _)| eps)
}

pub fn analytic_epsilon_with_jacobian(
    x_t: &LatentGrid,
    t: usize,
    prior: &MixturePrior,
    condition: Option<&str>,
    schedule: &NoiseSchedule,
) -> Result<(LatentGrid, NoiseJacobian)> {
    let (eps, jac) = prior.evaluate(x_t, t, condition, schedule, true)?;
    Ok((eps, jac.expect("jacobian requested")))
}

/// `eps_u + s (eps_c - eps_u)`.
pub fn guided_epsilon(
    x_t: &LatentGrid,
    t: usize,
    prior: &MixturePrior,
    condition: &str,
    scale: f64,
    schedule: &NoiseSchedule,
) -> Result<LatentGrid> {
    let eps_c = analytic_epsilon(x_t, t, prior, Some(condition), schedule)?;
    let eps_u = analytic_epsilon(x_t, t, prior, None, schedule)?;
    Ok(eps_u.zip_map(&eps_c, |u, c| u + scale * (c - u)))
}

/// Noise predictor as seen by the sampler: unconditional, or guided toward a label.
#[derive(Debug, Clone, Copy)]
pub struct NoisePredictor<'a> {
    pub prior: &'a MixturePrior,
    pub schedule: &'a NoiseSchedule,
    pub condition: Option<&'a str>,
    pub guidance_scale: f64,
}

#[derive(Debug, Clone)]
pub struct Prediction {
    pub eps: LatentGrid,
    /// `(conditional, unconditional)` when guidance is active.
    pub parts: Option<(LatentGrid, LatentGrid)>,
}

impl NoisePredictor<'_> {
    pub fn predict(&self, x: &LatentGrid, t: usize) -> Result<Prediction> {
        match self.condition {
            None => Ok(Prediction {
                eps: analytic_epsilon(x, t, self.prior, None, self.schedule)?,
                parts: None,
            }),
            Some(label) => {
                let eps_c = analytic_epsilon(x, t, self.prior, Some(label), self.schedule)?;
                let eps_u = analytic_epsilon(x, t, self.prior, None, self.schedule)?;
                let s = self.guidance_scale;
                let eps = eps_u.zip_map(&eps_c, |u, c| u + s * (c - u));
                Ok(Prediction {
                    eps,
                    parts: Some((eps_c, eps_u)),
                })
            }
        }
    }

    pub fn predict_with_jacobian(
        &self,
        x: &LatentGrid,
        t: usize,
    ) -> Result<(LatentGrid, NoiseJacobian)> {
        match self.condition {
            None => analytic_epsilon_with_jacobian(x, t, self.prior, None, self.schedule),
            Some(label) => {
                let (eps_c, jac_c) =
                    analytic_epsilon_with_jacobian(x, t, self.prior, Some(label), self.schedule)?;
                let (eps_u, jac_u) =
                    analytic_epsilon_with_jacobian(x, t, self.prior, None, self.schedule)?;
                let s = self.guidance_scale;
                let eps = eps_u.zip_map(&eps_c, |u, c| u + s * (c - u));
                Ok((eps, NoiseJacobian::blend(jac_u, jac_c, s)))
            }
        }
    }
}

/// Serializable description of a mixture prior.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum PriorSpec {
    /// `components` smooth random mean patterns drawn from `seed`.
    Random {
        components: usize,
        mean_scale: f64,
        variance: f64,
        #[serde(default)]
        labels: Vec<String>,
        seed: u64,
    },
}

impl PriorSpec {
    pub fn build(&self, shape: Shape) -> Result<MixturePrior> {
        match self {
            PriorSpec::Random {
                components,
                mean_scale,
                variance,
                labels,
                seed,
            } => {
                use rand::SeedableRng;
                if *components == 0 {
                    return Err(Error::param("prior needs at least one component"));
                }
                if !labels.is_empty() && labels.len() != *components {
                    return Err(Error::param(format!(
                        "{} labels for {components} components",
                        labels.len()
                    )));
                }
                let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(*seed);
                let weight = 1.0 / *components as f64;
                let comps = (0..*components)
                    .map(|j| PriorComponent {
                        weight,
                        mean: smooth_pattern(shape, *mean_scale, &mut rng),
                        variance: *variance,
                        label: labels
                            .get(j)
                            .cloned()
                            .unwrap_or_else(|| format!("c{j}")),
                    })
                    .collect();
                MixturePrior::new(comps)
            }
        }
    }
}

/// Gaussian field smoothed by one 3x3 box pass and rescaled to unit RMS.
fn smooth_pattern<R: rand::Rng>(shape: Shape, scale: f64, rng: &mut R) -> LatentGrid {
    let raw = LatentGrid::gaussian(shape, 1.0, rng);
    let mut out = LatentGrid::zeros(shape);
    for c in 0..shape.channels {
        for y in 0..shape.height {
            for x in 0..shape.width {
                let mut acc = 0.0;
                let mut count = 0.0;
                for dy in -1i64..=1 {
                    for dx in -1i64..=1 {
                        let (yy, xx) = (y as i64 + dy, x as i64 + dx);
                        if yy >= 0 && xx >= 0 && (yy as usize) < shape.height && (xx as usize) < shape.width {
                            acc += raw.get(c, yy as usize, xx as usize);
                            count += 1.0;
                        }
                    }
                }
                out.set(c, y, x, acc / count);
            }
        }
    }
    let rms = (out.dot(&out) / out.len() as f64).sqrt();
    out.scaled(scale / rms.max(1e-12))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn shape() -> Shape {
        Shape::new(1, 4, 4).unwrap()
    }

    fn two_component(rng: &mut ChaCha8Rng) -> MixturePrior {
        MixturePrior::new(vec![
            PriorComponent {
                weight: 0.3,
                mean: LatentGrid::gaussian(shape(), 1.0, rng),
                variance: 0.2,
                label: "a".into(),
            },
            PriorComponent {
                weight: 0.7,
                mean: LatentGrid::gaussian(shape(), 1.0, rng),
                variance: 0.5,
                label: "b".into(),
            },
        ])
        .unwrap()
    }

    #[test]
    fn standard_normal_prior_scales_input() {
        let s = NoiseSchedule::default_linear();
        let prior = MixturePrior::single(LatentGrid::zeros(shape()), 1.0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = LatentGrid::gaussian(shape(), 1.0, &mut rng);
        for t in [1, 10, 500, 1000] {
            let eps = analytic_epsilon(&x, t, &prior, None, &s).unwrap();
            let c = (1.0 - s.alpha_bar(t).unwrap()).sqrt();
            for (e, xi) in eps.values().iter().zip(x.values()) {
                assert!((e - c * xi).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn point_mass_prior_recovers_noise() {
        let s = NoiseSchedule::default_linear();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mu = LatentGrid::gaussian(shape(), 1.0, &mut rng);
        let prior = MixturePrior::single(mu.clone(), 1e-14).unwrap();
        let x = LatentGrid::gaussian(shape(), 1.0, &mut rng);
        let t = 300;
        let ab = s.alpha_bar(t).unwrap();
        let eps = analytic_epsilon(&x, t, &prior, None, &s).unwrap();
        for i in 0..x.len() {
            let oracle = (x.values()[i] - ab.sqrt() * mu.values()[i]) / (1.0 - ab).sqrt();
            assert!((eps.values()[i] - oracle).abs() < 1e-9);
        }
    }

    #[test]
    fn matches_finite_difference_score() {
        let s = NoiseSchedule::default_linear();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let prior = two_component(&mut rng);
        let h = 1e-5;
        let mut worst = 0.0f64;
        for probe in 0..100 {
            let t = 1 + (probe * 37) % 1000;
            let x = LatentGrid::gaussian(shape(), 1.2, &mut rng);
            let eps = analytic_epsilon(&x, t, &prior, None, &s).unwrap();
            let c = (1.0 - s.alpha_bar(t).unwrap()).sqrt();
            let mut fd = Vec::with_capacity(x.len());
            for i in 0..x.len() {
                let mut plus = x.clone();
                plus.values_mut()[i] += h;
                let mut minus = x.clone();
                minus.values_mut()[i] -= h;
                let grad = (prior.log_marginal(&plus, t, None, &s).unwrap()
                    - prior.log_marginal(&minus, t, None, &s).unwrap())
                    / (2.0 * h);
                fd.push(-c * grad);
            }
            let err = crate::grid::relative_l2(eps.values(), &fd);
            worst = worst.max(err);
        }
        assert!(worst < 1e-6, "worst relative error {worst}");
    }

    #[test]
    fn jacobian_matches_finite_differences() {
        let s = NoiseSchedule::default_linear();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let prior = two_component(&mut rng);
        let predictor = NoisePredictor {
            prior: &prior,
            schedule: &s,
            condition: Some("a"),
            guidance_scale: 3.0,
        };
        let x = LatentGrid::gaussian(shape(), 1.0, &mut rng);
        let u = LatentGrid::gaussian(shape(), 1.0, &mut rng);
        let t = 400;
        let (_, jac) = predictor.predict_with_jacobian(&x, t).unwrap();
        let analytic = jac.apply(u.values());
        let h = 1e-6;
        let mut plus = x.clone();
        plus.add_scaled(h, &u);
        let mut minus = x.clone();
        minus.add_scaled(-h, &u);
        let ep = predictor.predict(&plus, t).unwrap().eps;
        let em = predictor.predict(&minus, t).unwrap().eps;
        let fd: Vec<f64> = ep
            .values()
            .iter()
            .zip(em.values())
            .map(|(a, b)| (a - b) / (2.0 * h))
            .collect();
        assert!(crate::grid::relative_l2(&analytic, &fd) < 1e-6);
    }

    #[test]
    fn shifted_solve_inverts() {
        let s = NoiseSchedule::default_linear();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let prior = two_component(&mut rng);
        let x = LatentGrid::gaussian(shape(), 1.0, &mut rng);
        let (_, jac) = analytic_epsilon_with_jacobian(&x, 200, &prior, None, &s).unwrap();
        let rhs = LatentGrid::gaussian(shape(), 1.0, &mut rng);
        let (a, b) = (1.1, -0.4);
        let y = jac.solve_shifted(a, b, rhs.values()).unwrap();
        let jy = jac.apply(&y);
        for i in 0..y.len() {
            let back = a * y[i] + b * jy[i];
            assert!((back - rhs.values()[i]).abs() < 1e-12);
        }
    }

    #[test]
    fn guidance_formula_collapses() {
        let s = NoiseSchedule::default_linear();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let prior = two_component(&mut rng);
        let x = LatentGrid::gaussian(shape(), 1.0, &mut rng);
        let t = 600;
        let eps_u = analytic_epsilon(&x, t, &prior, None, &s).unwrap();
        let eps_c = analytic_epsilon(&x, t, &prior, Some("a"), &s).unwrap();
        assert_eq!(guided_epsilon(&x, t, &prior, "a", 0.0, &s).unwrap(), eps_u);
        assert!(guided_epsilon(&x, t, &prior, "a", 1.0, &s).unwrap().max_abs_diff(&eps_c) < 1e-15);

        let single = MixturePrior::single(LatentGrid::gaussian(shape(), 1.0, &mut rng), 0.3).unwrap();
        let u = analytic_epsilon(&x, t, &single, None, &s).unwrap();
        let g = guided_epsilon(&x, t, &single, "default", 7.5, &s).unwrap();
        assert!(g.max_abs_diff(&u) < 1e-15);
    }

    #[test]
    fn unknown_condition_is_an_error() {
        let s = NoiseSchedule::default_linear();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let prior = two_component(&mut rng);
        let x = LatentGrid::zeros(shape());
        assert!(matches!(
            analytic_epsilon(&x, 10, &prior, Some("missing"), &s),
            Err(Error::Condition(_))
        ));
    }

    #[test]
    fn validates_components() {
        let mean = LatentGrid::zeros(shape());
        let bad_weight = vec![PriorComponent {
            weight: 0.5,
            mean: mean.clone(),
            variance: 1.0,
            label: "x".into(),
        }];
        assert!(MixturePrior::new(bad_weight).is_err());
        assert!(MixturePrior::single(mean, 0.0).is_err());
    }

    #[test]
    fn random_spec_is_deterministic() {
        let spec = PriorSpec::Random {
            components: 4,
            mean_scale: 1.0,
            variance: 0.1,
            labels: vec![],
            seed: 9,
        };
        let a = spec.build(shape()).unwrap();
        let b = spec.build(shape()).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.components().len(), 4);
    }
}
