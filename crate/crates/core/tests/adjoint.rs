mod common;

use common::{gaussian, shape, two_component_prior};
use latentmark::adjoint::{
    adjoint_gradient, reference_gradient, AdjointOptions, BufferProbe, GradMethod, Pipeline, WatermarkMode,
};
use latentmark::diffusion::{NoiseSchedule, SamplerConfig};
use latentmark::grid::{cosine_similarity, relative_l2};
use latentmark::harness::ProbeLoss;
use latentmark::watermark::{init_watermarks, EmbedConfig};
use latentmark::Error;
use proptest::prelude::*;

const MODES: [WatermarkMode; 3] = [WatermarkMode::Dual, WatermarkMode::StructureOnly, WatermarkMode::DetailOnly];

struct Case {
    config: SamplerConfig,
    prior: latentmark::diffusion::MixturePrior,
    schedule: NoiseSchedule,
    embed: EmbedConfig,
}

fn case(h: usize, steps: usize, detail_index: usize, guidance: Option<f64>, seed: u64) -> Case {
    let mut config = SamplerConfig::uniform(1000, steps).unwrap();
    if let Some(s) = guidance {
        config = config.with_guidance("a", s).unwrap();
    }
    let embed = EmbedConfig::on_grid(&config, detail_index).unwrap();
    Case {
        config,
        prior: two_component_prior(shape(1, h, h), 0.1, seed),
        schedule: NoiseSchedule::default_linear(),
        embed,
    }
}

impl Case {
    fn pipeline(&self, mode: WatermarkMode) -> Pipeline<'_> {
        Pipeline::new(&self.config, &self.prior, &self.schedule, self.embed, mode).unwrap()
    }
}

#[test]
fn reference_matches_finite_differences_everywhere_on_tiny_grid() {
    let c = case(3, 5, 2, None, 1);
    for mode in MODES {
        let s = shape(1, 3, 3);
        let probe = ProbeLoss::new(c.pipeline(mode), gaussian(s, 1.0, 2), 3);
        let wm = init_watermarks(s, 0.01, 4).unwrap();
        let r = probe.gradient(&wm, GradMethod::Reference).unwrap();
        let fd = probe.finite_diff(&wm, 1e-5, usize::MAX, 5).unwrap();
        assert!(fd.coordinates.is_none());
        for (i, (g, f)) in r.flatten().iter().zip(fd.flatten()).enumerate() {
            assert!((g - f).abs() <= 1e-6 * f.abs().max(1e-2), "{mode:?} coordinate {i}: {g} vs {f}");
        }
        if !mode.uses_structure() {
            assert!(r.grad_ws.values().iter().all(|v| *v == 0.0));
        }
        if !mode.uses_detail() {
            assert!(r.grad_wd.values().iter().all(|v| *v == 0.0));
        }
    }
}

#[test]
fn adjoint_matches_reference_with_guidance() {
    let c = case(4, 20, 14, Some(3.0), 7);
    let s = shape(1, 4, 4);
    let probe = ProbeLoss::new(c.pipeline(WatermarkMode::Dual), gaussian(s, 1.0, 8), 9);
    let wm = init_watermarks(s, 0.01, 10).unwrap();
    let a = probe.gradient(&wm, GradMethod::Adjoint).unwrap().flatten();
    let r = probe.gradient(&wm, GradMethod::Reference).unwrap().flatten();
    assert!(cosine_similarity(&a, &r) >= 0.999999);
    assert!(relative_l2(&a, &r) <= 1e-6);
}

#[test]
fn reference_needs_a_trajectory() {
    let c = case(3, 5, 2, None, 1);
    let s = shape(1, 3, 3);
    let wm = init_watermarks(s, 0.01, 4).unwrap();
    let p = c.pipeline(WatermarkMode::Dual);
    let x = gaussian(s, 1.0, 2);
    assert!(matches!(reference_gradient(&p, &wm, &x, None, &x, None, None), Err(Error::State(_))));
}

#[test]
fn buffer_counts() {
    for steps in [5usize, 20, 50] {
        let detail = steps / 2;
        let c = case(4, steps, detail, None, 11);
        let s = shape(1, 4, 4);
        let p = c.pipeline(WatermarkMode::Dual);
        let wm = init_watermarks(s, 0.01, 1).unwrap();
        let x_t = gaussian(s, 1.0, 2);
        let up = gaussian(s, 1.0, 3);
        let (x0, traj) = p.forward(&x_t, &wm, true).unwrap();
        let mut probe = BufferProbe::new();
        adjoint_gradient(&p, &wm, &x0, &up, None, AdjointOptions::default(), Some(&mut probe)).unwrap();
        assert!(probe.peak() <= 4, "N={steps}: adjoint peak {}", probe.peak());
        assert_eq!(probe.live(), 0);
        let mut probe = BufferProbe::new();
        reference_gradient(&p, &wm, &x_t, traj.as_ref(), &up, None, Some(&mut probe)).unwrap();
        assert!(probe.peak() >= steps, "N={steps}: reference peak {}", probe.peak());
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn adjoint_tracks_reference(seed in 0u64..10_000, mode_idx in 0usize..3, steps in prop::sample::select(vec![5usize, 8, 10, 20, 25, 40, 50])) {
        let detail = steps / 3;
        let c = case(4, steps, detail, None, seed);
        let s = shape(1, 4, 4);
        let probe = ProbeLoss::new(c.pipeline(MODES[mode_idx]), gaussian(s, 1.0, seed + 1), seed + 2);
        let wm = init_watermarks(s, 0.02, seed + 3).unwrap();
        let a = probe.gradient(&wm, GradMethod::Adjoint).unwrap().flatten();
        let r = probe.gradient(&wm, GradMethod::Reference).unwrap().flatten();
        prop_assert!(cosine_similarity(&a, &r) >= 0.9999);
        prop_assert!(relative_l2(&a, &r) <= 1e-4);
    }
}
