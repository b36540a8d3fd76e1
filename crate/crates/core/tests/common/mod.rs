#![allow(dead_code)]

use latentmark::diffusion::{MixturePrior, PriorComponent};
use latentmark::harness::{ExperimentConfig, Setup};
use latentmark::{LatentGrid, Shape};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn shape(c: usize, h: usize, w: usize) -> Shape {
    Shape::new(c, h, w).unwrap()
}

pub fn gaussian(s: Shape, std: f64, seed: u64) -> LatentGrid {
    LatentGrid::gaussian(s, std, &mut rng(seed))
}

/// Desk config with the smallest corpus the whitening accepts.
pub fn quick_config() -> ExperimentConfig {
    let mut cfg = ExperimentConfig::desk();
    cfg.codec.corpus_size = cfg.codec.features;
    cfg
}

pub fn quick_setup() -> (ExperimentConfig, Setup) {
    let cfg = quick_config();
    let setup = Setup::build(&cfg).unwrap();
    (cfg, setup)
}

pub fn two_component_prior(s: Shape, variance: f64, seed: u64) -> MixturePrior {
    MixturePrior::new(vec![
        PriorComponent {
            weight: 0.5,
            mean: gaussian(s, 1.0, seed),
            variance,
            label: "a".into(),
        },
        PriorComponent {
            weight: 0.5,
            mean: gaussian(s, 1.0, seed + 1),
            variance,
            label: "b".into(),
        },
    ])
    .unwrap()
}

/// Population variance by the two-pass formula.
pub fn var(v: &[f64]) -> f64 {
    let n = v.len() as f64;
    let m = v.iter().sum::<f64>() / n;
    v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / n
}

pub fn rel_err(got: f64, want: f64) -> f64 {
    (got - want).abs() / want.abs().max(1e-12)
}

/// Desk config with its full calibration corpus.
pub fn desk_setup() -> (ExperimentConfig, Setup) {
    let cfg = ExperimentConfig::desk();
    let setup = Setup::build(&cfg).unwrap();
    (cfg, setup)
}
