//! Acceptance suite. One PASS/FAIL line per criterion, each with its measured
//! runtime against a fixed limit. Exits nonzero if any criterion fails.

mod common;

use std::cell::OnceCell;
use std::time::{Duration, Instant};

use common::{gaussian, rng, shape, two_component_prior, var};
use latentmark::adjoint::{adjoint_gradient, reference_gradient, AdjointOptions, BufferProbe, GradMethod, Pipeline, WatermarkMode};
use latentmark::attacks::{AttackCategory, AttackSpec};
use latentmark::codec::{detection_threshold, matched_bits, Message};
use latentmark::diffusion::{sample, Hooks, NoiseSchedule, SamplerConfig};
use latentmark::harness::run::run_with_setup;
use latentmark::harness::{derive_seed, gradcheck, guidance_diagnostic, ExperimentConfig, ProbeLoss, RobustnessReport, Setup};
use latentmark::losses::{high_order, high_order_grad, l_init, l_init_grad, low_order_drift, low_order_drift_grad, LossWeights};
use latentmark::watermark::{embed_structure, init_watermarks, EmbedConfig};
use latentmark::{LatentGrid, Result};
use num_bigint::BigUint;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Result<Outcome> {
    Ok(Outcome { pass, detail })
}

struct Desk {
    cfg: ExperimentConfig,
    setup: OnceCell<Setup>,
}

impl Desk {
    fn setup(&self) -> Result<&Setup> {
        if let Some(s) = self.setup.get() {
            return Ok(s);
        }
        let s = Setup::build(&self.cfg)?;
        Ok(self.setup.get_or_init(|| s))
    }
}

fn structure_variance(desk: &Desk) -> Result<Outcome> {
    let s = desk.cfg.shape()?;
    let mut r = rng(1);
    let (mut worst, mut identity) = (0.0f64, true);
    for _ in 0..1000 {
        let x = LatentGrid::gaussian(s, 1.0, &mut r);
        let w = LatentGrid::gaussian(s, desk.cfg.watermark.init_variance.sqrt(), &mut r);
        let y = embed_structure(&x, &w)?;
        worst = worst.max((var(y.values()) - var(x.values())).abs());
        identity &= embed_structure(&x, &LatentGrid::zeros(s))? == x;
    }
    outcome(
        worst <= 1e-10 && identity,
        format!("1000 pairs, max |var diff| {worst:.3e} (tol 1e-10), zero watermark bitwise identity {identity}"),
    )
}

fn gradient_equivalence(desk: &Desk) -> Result<Outcome> {
    // Two channels so that the 5x5 grid carries 100 watermark coordinates.
    let s = shape(2, 5, 5);
    let config = SamplerConfig::uniform(1000, 5)?;
    let prior = two_component_prior(s, 0.1, 3);
    let schedule = NoiseSchedule::default_linear();
    let p = Pipeline::new(&config, &prior, &schedule, EmbedConfig::on_grid(&config, 2)?, WatermarkMode::Dual)?;
    let probe = ProbeLoss::new(p, gaussian(s, 1.0, 4), 5);
    let wm = init_watermarks(s, 0.01, 6)?;
    let r = probe.gradient(&wm, GradMethod::Reference)?.flatten();
    let fd = probe.finite_diff(&wm, 1e-5, usize::MAX, 7)?.flatten();
    let scale = fd.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let worst = r
        .iter()
        .zip(&fd)
        .map(|(g, f)| (g - f).abs() / f.abs().max(1e-6 * scale))
        .fold(0.0f64, f64::max);
    let g = gradcheck(&desk.cfg, desk.setup()?, 8)?;
    outcome(
        worst <= 1e-4 && r.len() >= 64 && g.cosine >= 0.999 && g.relative_l2 <= 1e-3,
        format!(
            "2x5x5 N=5: {} coords, max rel err {worst:.3e} (tol 1e-4); 8x8 N={}: cosine {:.9} (min 0.999), rel L2 {:.3e} (max 1e-3)",
            r.len(),
            g.steps,
            g.cosine,
            g.relative_l2
        ),
    )
}

fn buffer_counts(desk: &Desk) -> Result<Outcome> {
    let setup = desk.setup()?;
    let s = setup.shape;
    let mut pass = true;
    let mut parts = Vec::new();
    for (steps, detail) in [(5usize, 2usize), (20, 14), (50, 37)] {
        let config = SamplerConfig::uniform(1000, steps)?;
        let embed = EmbedConfig::on_grid(&config, detail)?;
        let p = Pipeline::new(&config, &setup.prior, &setup.schedule, embed, WatermarkMode::Dual)?;
        let mut wm = init_watermarks(s, 0.01, 1)?;
        wm.sigma_td = desk.cfg.watermark.sigma_td;
        let x_t = gaussian(s, 1.0, 2);
        let up = gaussian(s, 1.0, 3);
        let (x0, traj) = p.forward(&x_t, &wm, true)?;
        let mut a = BufferProbe::new();
        adjoint_gradient(&p, &wm, &x0, &up, None, AdjointOptions::default(), Some(&mut a))?;
        let mut b = BufferProbe::new();
        reference_gradient(&p, &wm, &x_t, traj.as_ref(), &up, None, Some(&mut b))?;
        pass &= a.peak() <= 4 && a.live() == 0 && b.peak() >= steps;
        parts.push(format!("N={steps}: adjoint {} reference {}", a.peak(), b.peak()));
    }
    outcome(pass, format!("{} (adjoint max 4, reference min N)", parts.join(", ")))
}

/// Smallest tau with P(Binomial(k, 1/2) >= tau) <= fpr, compared exactly.
fn brute_threshold(k: usize, fpr: f64) -> usize {
    let mut row = vec![BigUint::from(1u32)];
    for _ in 0..k {
        let mut next = vec![BigUint::from(1u32); row.len() + 1];
        for j in 1..row.len() {
            next[j] = &row[j - 1] + &row[j];
        }
        row = next;
    }
    let (m, e, _) = num_traits::Float::integer_decode(fpr);
    let shift = i64::from(e) + k as i64;
    let fits = |tail: &BigUint| {
        if shift >= 0 {
            *tail <= BigUint::from(m) << (shift as usize)
        } else {
            tail.clone() << ((-shift) as usize) <= BigUint::from(m)
        }
    };
    let mut tail = BigUint::from(0u32);
    let mut best = k + 1;
    for tau in (0..=k).rev() {
        tail += &row[tau];
        if !fits(&tail) {
            break;
        }
        best = tau;
    }
    best
}

fn fpr_calibration(desk: &Desk) -> Result<Outcome> {
    let tau48 = detection_threshold(48, 1e-6)?;
    let brute = brute_threshold(48, 1e-6);
    let k = desk.cfg.codec.bits;
    let tau = detection_threshold(k, 1e-3)?;
    let setup = desk.setup()?;
    let decoder = setup.decoder();
    let n = 10_000;
    let mut hits = 0usize;
    for i in 0..n {
        let mut r = ChaCha8Rng::seed_from_u64(derive_seed(desk.cfg.seed, "heldout", i as u64));
        let x_t = LatentGrid::gaussian(setup.shape, 1.0, &mut r);
        let (x0, _) = sample(&x_t, &setup.sampler, &setup.prior, &setup.schedule, &Hooks::none(), false)?;
        let m = Message::random(k, &mut r)?;
        if matched_bits(&m, &decoder.decode(&x0)?)? >= tau {
            hits += 1;
        }
    }
    let rate = hits as f64 / n as f64;
    outcome(
        tau48 == brute && tau48 == 41 && tau == 15 && rate <= 2e-3,
        format!("tau(48,1e-6)={tau48} brute {brute}; tau({k},1e-3)={tau}; empirical FPR {rate:.4} over {n} (max 2e-3)"),
    )
}

fn end_to_end(desk: &Desk) -> Result<Outcome> {
    let cfg = &desk.cfg;
    let setup = desk.setup()?;
    let conditions = cfg.shape()? == shape(1, 8, 8)
        && setup.prior.components().len() == 4
        && cfg.sampler.steps == 20
        && cfg.codec.bits == 16
        && cfg.codec.features == 256
        && cfg.codec.margin == 1.0
        && cfg.loss == LossWeights::default()
        && cfg.optimizer.lr == 0.002
        && cfg.optimizer.iterations == 600
        && cfg.images == 20;
    let report = run_with_setup(cfg, setup, WatermarkMode::Dual)?.report;
    let k = cfg.codec.bits;
    let perfect = report.images.iter().filter(|r| r.matched.first() == Some(&k)).count();
    let acc = |spec: AttackSpec| report.row(&spec.label()).map(|s| s.mean_bit_accuracy).unwrap_or(f64::NAN);
    let hflip = acc(AttackSpec::Hflip);
    let blur = report
        .summary
        .iter()
        .find(|s| s.label.starts_with("gaussian_blur"))
        .map(|s| s.mean_bit_accuracy)
        .unwrap_or(f64::NAN);
    let bright = acc(AttackSpec::Brightness { factor: 0.5 });
    let regen = acc(AttackSpec::Regenerate { t_a: 451, seed: 0 });
    let pass = conditions && perfect >= 18 && hflip >= 0.9 && blur >= 0.9 && bright >= 0.9 && regen >= 0.75;
    outcome(
        pass,
        format!(
            "desk conditions {conditions}; clean perfect {perfect}/20 (min 18), clean mean {:.4}; hflip {hflip:.4} blur {blur:.4} brightness(0.5) {bright:.4} (min 0.9); regenerate(451) {regen:.4} (min 0.75); failures {}",
            report.clean().mean_bit_accuracy,
            report.failures()
        ),
    )
}

fn category(report: &RobustnessReport, c: AttackCategory) -> f64 {
    report.category_accuracy(c).unwrap_or(f64::NAN)
}

fn ablation(desk: &Desk) -> Result<Outcome> {
    let setup = desk.setup()?;
    let dual = run_with_setup(&desk.cfg, setup, WatermarkMode::Dual)?.report;
    let structure = run_with_setup(&desk.cfg, setup, WatermarkMode::StructureOnly)?.report;
    let detail = run_with_setup(&desk.cfg, setup, WatermarkMode::DetailOnly)?.report;
    let (rs, rd) = (category(&structure, AttackCategory::Regeneration), category(&detail, AttackCategory::Regeneration));
    let (vs, vd) = (category(&structure, AttackCategory::Valuemetric), category(&detail, AttackCategory::Valuemetric));
    let (od, os, ot) = (dual.overall_accuracy(), structure.overall_accuracy(), detail.overall_accuracy());
    outcome(
        rs > rd && vd > vs && od >= os.max(ot),
        format!(
            "regeneration structure {rs:.4} vs detail {rd:.4}; valuemetric detail {vd:.4} vs structure {vs:.4}; overall dual {od:.4} vs structure {os:.4} detail {ot:.4}"
        ),
    )
}

fn guidance() -> Result<Outcome> {
    let s = shape(1, 8, 8);
    let prior = two_component_prior(s, 0.1, 21);
    let schedule = NoiseSchedule::default_linear();
    let sampler = SamplerConfig::uniform(1000, 20)?.with_guidance("a", 7.5)?;
    let g = guidance_diagnostic(&prior, &schedule, &sampler, 20, 22)?;
    outcome(
        g.late_mean < g.early_mean,
        format!("{} trajectories, early mean {:.6}, late mean {:.6}", g.trajectories, g.early_mean, g.late_mean),
    )
}

/// Worst mismatch against Richardson-extrapolated central differences,
/// relative to `max(|fd|, |g|, 1e-4)`.
fn fd_worst(f: impl Fn(&LatentGrid) -> f64, grad: &LatentGrid, at: &LatentGrid) -> f64 {
    let central = |i: usize, h: f64| {
        let mut up = at.clone();
        up.values_mut()[i] += h;
        let mut dn = at.clone();
        dn.values_mut()[i] -= h;
        (f(&up) - f(&dn)) / (2.0 * h)
    };
    let h = 1e-3;
    (0..at.len())
        .map(|i| {
            let fd = (4.0 * central(i, h / 2.0) - central(i, h)) / 3.0;
            let g = grad.values()[i];
            (g - fd).abs() / fd.abs().max(g.abs()).max(1e-4)
        })
        .fold(0.0, f64::max)
}

fn regularizers(desk: &Desk) -> Result<Outcome> {
    let big = gaussian(shape(1, 100, 100), 1.0, 2024);
    let high = high_order(&big)?;
    let s = shape(1, 8, 8);
    let mut worst = 0.0f64;
    for seed in 0..5 {
        let x = gaussian(s, 1.0, 100 + seed);
        let xw = gaussian(s, 1.0, 200 + seed);
        worst = worst.max(fd_worst(|v| l_init(v, &x).unwrap(), &l_init_grad(&xw, &x)?, &xw));
        let init = gaussian(s, 0.1, 300 + seed);
        let w = gaussian(s, 0.3, 400 + seed);
        worst = worst.max(fd_worst(|v| low_order_drift(v, &init).unwrap(), &low_order_drift_grad(&w, &init)?, &w));
        worst = worst.max(fd_worst(|v| high_order(v).unwrap(), &high_order_grad(&w)?, &w));
    }
    // Message hinge through the decoder, at points clear of every kink.
    let setup = desk.setup()?;
    let decoder = setup.decoder();
    let margin = desk.cfg.codec.margin;
    let mut checked = 0;
    for seed in 0..40 {
        if checked == 5 {
            break;
        }
        let img = gaussian(s, 1.0, 500 + seed);
        let m = Message::random(desk.cfg.codec.bits, &mut rng(600 + seed))?;
        let p = decoder.projections(&img)?;
        if p.iter().zip(m.bits()).any(|(p, b)| (margin - p * f64::from(*b)).abs() < 1e-2) {
            continue;
        }
        let (_, g) = decoder.loss_and_grad(&img, &m, margin)?;
        worst = worst.max(fd_worst(|v| decoder.loss_and_grad(v, &m, margin).unwrap().0, &g, &img));
        checked += 1;
    }
    outcome(
        high <= 0.05 && worst <= 1e-6 && checked == 5,
        format!("l_high on 1e4 N(0,1) samples {high:.5} (max 0.05); worst gradient rel err {worst:.3e} (max 1e-6) over init/low/high and {checked} hinge points"),
    )
}

fn main() {
    let desk = Desk { cfg: ExperimentConfig::desk(), setup: OnceCell::new() };
    type Check<'a> = Box<dyn Fn() -> Result<Outcome> + 'a>;
    let criteria: Vec<(u64, Check)> = vec![
        (5, Box::new(|| structure_variance(&desk))),
        (120, Box::new(|| gradient_equivalence(&desk))),
        (60, Box::new(|| buffer_counts(&desk))),
        (120, Box::new(|| fpr_calibration(&desk))),
        (600, Box::new(|| end_to_end(&desk))),
        (1500, Box::new(|| ablation(&desk))),
        (60, Box::new(guidance)),
        (60, Box::new(|| regularizers(&desk))),
    ];
    let mut failed = 0;
    for (i, (limit, check)) in criteria.iter().enumerate() {
        let start = Instant::now();
        let result = check();
        let elapsed = start.elapsed();
        let in_time = elapsed <= Duration::from_secs(*limit);
        let (pass, detail) = match result {
            Ok(o) => (o.pass && in_time, o.detail),
            Err(e) => (false, format!("error: {e}")),
        };
        if !pass {
            failed += 1;
        }
        println!(
            "criterion {} {}: {detail} (runtime {:.2}s, limit {limit}s)",
            i + 1,
            if pass { "PASS" } else { "FAIL" },
            elapsed.as_secs_f64()
        );
    }
    println!("acceptance: {} passed, {failed} failed", criteria.len() - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
