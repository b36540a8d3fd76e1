//! The watermark objective and its Adam optimization loop.

use serde::{Deserialize, Serialize};

use crate::adjoint::{
    adjoint_gradient, reference_gradient, AdjointOptions, GradMethod, GradResult, Pipeline,
};
use crate::codec::{bit_accuracy, Decoder, Message};
use crate::error::{Error, Result};
use crate::grid::LatentGrid;
use crate::losses::{
    high_order, high_order_grad, l_init, l_init_grad, low_order_drift, low_order_drift_grad,
    total_loss, LossBreakdown, LossWeights,
};
use crate::watermark::WatermarkPair;

/// Everything the loss depends on besides the watermarks.
#[derive(Debug, Clone, Copy)]
pub struct Objective<'a> {
    pub decoder: Decoder<'a>,
    pub message: &'a Message,
    pub margin: f64,
    pub weights: LossWeights,
    /// The unwatermarked initial latent.
    pub x_t: &'a LatentGrid,
    /// Initialization the low-order penalty pulls back toward.
    pub init: &'a WatermarkPair,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub breakdown: LossBreakdown,
    pub x0: LatentGrid,
    pub decoded: Message,
    pub bit_accuracy: f64,
}

impl Objective<'_> {
    fn regularizers(&self, pipeline: &Pipeline<'_>, wm: &WatermarkPair) -> Result<(f64, f64)> {
        let (mut low, mut high) = (0.0, 0.0);
        if pipeline.mode.uses_structure() {
            low += low_order_drift(&wm.w_s, &self.init.w_s)?;
            high += high_order(&wm.w_s)?;
        }
        if pipeline.mode.uses_detail() {
            low += low_order_drift(&wm.w_d, &self.init.w_d)?;
            high += high_order(&wm.w_d)?;
        }
        Ok((low, high))
    }

    fn initial_latent(&self, pipeline: &Pipeline<'_>, wm: &WatermarkPair) -> Result<LatentGrid> {
        if pipeline.mode.uses_structure() {
            crate::watermark::embed_structure(self.x_t, &wm.w_s)
        } else {
            Ok(self.x_t.clone())
        }
    }

    pub fn evaluate(&self, pipeline: &Pipeline<'_>, wm: &WatermarkPair) -> Result<Evaluation> {
        let (x0, _) = pipeline.forward(self.x_t, wm, false)?;
        self.evaluate_at(pipeline, wm, x0)
    }

    fn evaluate_at(&self, pipeline: &Pipeline<'_>, wm: &WatermarkPair, x0: LatentGrid) -> Result<Evaluation> {
        let projections = self.decoder.projections(&x0)?;
        let (msg, _) = crate::codec::hinge_loss_projections(&projections, self.message, self.margin)?;
        let init = l_init(&self.initial_latent(pipeline, wm)?, self.x_t)?;
        let (low, high) = self.regularizers(pipeline, wm)?;
        let breakdown = total_loss(msg, init, low, high, &self.weights)?;
        let decoded = crate::codec::decode_projections(&projections);
        let accuracy = bit_accuracy(self.message, &decoded)?;
        Ok(Evaluation {
            breakdown,
            x0,
            decoded,
            bit_accuracy: accuracy,
        })
    }

    pub fn total(&self, pipeline: &Pipeline<'_>, wm: &WatermarkPair) -> Result<f64> {
        Ok(self.evaluate(pipeline, wm)?.breakdown.total)
    }

    /// Loss and its full gradient with respect to both watermarks.
    pub fn gradient(
        &self,
        pipeline: &Pipeline<'_>,
        wm: &WatermarkPair,
        method: GradMethod,
    ) -> Result<(Evaluation, GradResult)> {
        let record = method == GradMethod::Reference;
        let (x0, traj) = pipeline.forward(self.x_t, wm, record)?;
        let (_, g_img) = self.decoder.loss_and_grad(&x0, self.message, self.margin)?;
        let upstream = g_img.scaled(self.weights.msg);
        let weight_init = self.weights.init;
        let x_ref = self.x_t;
        let initial = move |x_w: &LatentGrid| Ok(l_init_grad(x_w, x_ref)?.scaled(weight_init));
        let initial: Option<&crate::adjoint::InitialTerm<'_>> =
            if pipeline.mode.uses_structure() && weight_init != 0.0 { Some(&initial) } else { None };
        let mut grad = match method {
            GradMethod::Adjoint => adjoint_gradient(
                pipeline,
                wm,
                &x0,
                &upstream,
                initial,
                AdjointOptions::default(),
                None,
            )?,
            GradMethod::Reference => {
                reference_gradient(pipeline, wm, self.x_t, traj.as_ref(), &upstream, initial, None)?
            }
            GradMethod::FiniteDiff => {
                return Err(Error::param("finite differences are not a training gradient"))
            }
        };
        let w = self.weights;
        if pipeline.mode.uses_structure() {
            grad.grad_ws.add_scaled(w.low, &low_order_drift_grad(&wm.w_s, &self.init.w_s)?);
            grad.grad_ws.add_scaled(w.high, &high_order_grad(&wm.w_s)?);
        }
        if pipeline.mode.uses_detail() {
            grad.grad_wd.add_scaled(w.low, &low_order_drift_grad(&wm.w_d, &self.init.w_d)?);
            grad.grad_wd.add_scaled(w.high, &high_order_grad(&wm.w_d)?);
        }
        Ok((self.evaluate_at(pipeline, wm, x0)?, grad))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 0.002,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First and second moment estimates for one parameter grid.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    config: AdamConfig,
    m: Vec<f64>,
    v: Vec<f64>,
    step: u32,
}

impl Adam {
    pub fn new(config: AdamConfig, len: usize) -> Self {
        Adam {
            config,
            m: vec![0.0; len],
            v: vec![0.0; len],
            step: 0,
        }
    }

    pub fn steps(&self) -> u32 {
        self.step
    }

    pub fn update(&mut self, params: &mut LatentGrid, grad: &LatentGrid) {
        let c = self.config;
        self.step += 1;
        let bc1 = 1.0 - c.beta1.powi(self.step as i32);
        let bc2 = 1.0 - c.beta2.powi(self.step as i32);
        for (((p, g), m), v) in params
            .values_mut()
            .iter_mut()
            .zip(grad.values())
            .zip(&mut self.m)
            .zip(&mut self.v)
        {
            *m = c.beta1 * *m + (1.0 - c.beta1) * g;
            *v = c.beta2 * *v + (1.0 - c.beta2) * g * g;
            *p -= c.lr * (*m / bc1) / ((*v / bc2).sqrt() + c.eps);
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OptimizeConfig {
    pub iterations: usize,
    pub adam: AdamConfig,
    /// Stop once the message loss has been zero this many iterations in a row.
    pub patience: usize,
    pub gradient: GradMethod,
}

impl Default for OptimizeConfig {
    fn default() -> Self {
        OptimizeConfig {
            iterations: 1200,
            adam: AdamConfig::default(),
            patience: 50,
            gradient: GradMethod::Adjoint,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HistoryRow {
    pub iteration: usize,
    pub msg: f64,
    pub init: f64,
    pub low: f64,
    pub high: f64,
    pub total: f64,
    pub bit_accuracy: f64,
}

impl HistoryRow {
    fn new(iteration: usize, e: &Evaluation) -> Self {
        let b = e.breakdown;
        HistoryRow {
            iteration,
            msg: b.msg,
            init: b.init,
            low: b.low,
            high: b.high,
            total: b.total,
            bit_accuracy: e.bit_accuracy,
        }
    }

    pub const CSV_HEADER: &'static str = "iteration,msg,init,low,high,total,bit_accuracy";

    pub fn csv_line(&self) -> String {
        format!(
            "{},{:.9e},{:.9e},{:.9e},{:.9e},{:.9e},{:.6}",
            self.iteration, self.msg, self.init, self.low, self.high, self.total, self.bit_accuracy
        )
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OptimizeOutcome {
    pub watermarks: WatermarkPair,
    pub x0: LatentGrid,
    pub final_eval: Evaluation,
    pub history: Vec<HistoryRow>,
}

/// Adam on the active watermarks, starting from `objective.init`.
pub fn optimize_watermark(
    pipeline: &Pipeline<'_>,
    objective: &Objective<'_>,
    config: &OptimizeConfig,
) -> Result<OptimizeOutcome> {
    objective.weights.validate()?;
    let mut wm = objective.init.clone();
    let n = wm.w_s.len();
    let mut adam_s = Adam::new(config.adam, n);
    let mut adam_d = Adam::new(config.adam, n);
    let mut history = Vec::with_capacity(config.iterations);
    let mut zero_streak = 0usize;
    for iteration in 0..config.iterations {
        let result = objective.gradient(pipeline, &wm, config.gradient);
        let (eval, grad) = match result {
            Ok(r) => r,
            Err(Error::Divergence { .. }) | Err(Error::Radicand { .. }) | Err(Error::Degenerate(_)) => {
                return Err(Error::OptimizationDiverged {
                    iteration,
                    history: Box::new(history),
                })
            }
            Err(e) => return Err(e),
        };
        let row = HistoryRow::new(iteration, &eval);
        history.push(row);
        if !row.total.is_finite() || !grad.grad_ws.is_finite() || !grad.grad_wd.is_finite() {
            return Err(Error::OptimizationDiverged {
                iteration,
                history: Box::new(history),
            });
        }
        zero_streak = if eval.breakdown.msg == 0.0 { zero_streak + 1 } else { 0 };
        if config.patience > 0 && zero_streak >= config.patience {
            log::debug!("message loss zero for {zero_streak} iterations, stopping at {iteration}");
            break;
        }
        if pipeline.mode.uses_structure() {
            adam_s.update(&mut wm.w_s, &grad.grad_ws);
        }
        if pipeline.mode.uses_detail() {
            adam_d.update(&mut wm.w_d, &grad.grad_wd);
        }
    }
    let final_eval = objective.evaluate(pipeline, &wm).map_err(|e| match e {
        Error::Radicand { .. } | Error::Degenerate(_) => Error::OptimizationDiverged {
            iteration: history.len(),
            history: Box::new(history.clone()),
        },
        other => other,
    })?;
    Ok(OptimizeOutcome {
        watermarks: wm,
        x0: final_eval.x0.clone(),
        final_eval,
        history,
    })
}
