use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::config::ExperimentConfig;
use super::io::write_grid;
use super::report::{ImageResult, RobustnessReport};
use crate::adjoint::{Pipeline, WatermarkMode};
use crate::attacks::{apply_attack, AttackContext, AttackSpec};
use crate::codec::{matched_bits, CarrierSet, Decoder, FeatureExtractor, Message};
use crate::diffusion::{sample, Hooks, MixturePrior, NoiseSchedule, SamplerConfig};
use crate::error::{Error, Result};
use crate::grid::{LatentGrid, Shape};
use crate::optimize::{optimize_watermark, HistoryRow, Objective, OptimizeOutcome};
use crate::watermark::{init_watermarks, EmbedConfig, WatermarkPair};

/// Independent 64-bit seed for `(master, tag, index)`.
pub fn derive_seed(master: u64, tag: &str, index: u64) -> u64 {
    let mut h = Sha256::new();
    h.update(master.to_le_bytes());
    h.update(tag.as_bytes());
    h.update(index.to_le_bytes());
    u64::from_le_bytes(h.finalize()[..8].try_into().unwrap())
}

/// Everything built once from a config: schedule, prior, sampler, decoder.
#[derive(Debug, Clone)]
pub struct Setup {
    pub shape: Shape,
    pub schedule: NoiseSchedule,
    pub prior: MixturePrior,
    pub sampler: SamplerConfig,
    pub unconditional: SamplerConfig,
    pub embed: EmbedConfig,
    pub extractor: FeatureExtractor,
    pub carriers: CarrierSet,
}

impl Setup {
    /// Builds the extractor and fits carriers on a fresh clean corpus.
    pub fn build(cfg: &ExperimentConfig) -> Result<Self> {
        let (shape, schedule, prior, sampler, unconditional, embed, extractor) = Setup::parts(cfg)?;
        let corpus = clean_corpus(cfg, &schedule, &prior, &unconditional, &extractor)?;
        let carriers = CarrierSet::whiten(&corpus, cfg.codec.bits, cfg.codec.carrier_seed)?;
        Ok(Setup {
            shape,
            schedule,
            prior,
            sampler,
            unconditional,
            embed,
            extractor,
            carriers,
        })
    }

    /// Same as [`Setup::build`] but with previously fitted carriers.
    pub fn with_carriers(cfg: &ExperimentConfig, carriers: CarrierSet) -> Result<Self> {
        let (shape, schedule, prior, sampler, unconditional, embed, extractor) = Setup::parts(cfg)?;
        if carriers.k() != cfg.codec.bits || carriers.dim() != extractor.output_dim() {
            return Err(Error::Config(format!(
                "carriers are {}x{}, config wants {}x{}",
                carriers.k(),
                carriers.dim(),
                cfg.codec.bits,
                extractor.output_dim()
            )));
        }
        Ok(Setup {
            shape,
            schedule,
            prior,
            sampler,
            unconditional,
            embed,
            extractor,
            carriers,
        })
    }

    #[allow(clippy::type_complexity)]
    fn parts(
        cfg: &ExperimentConfig,
    ) -> Result<(Shape, NoiseSchedule, MixturePrior, SamplerConfig, SamplerConfig, EmbedConfig, FeatureExtractor)> {
        cfg.validate()?;
        let shape = cfg.shape()?;
        let schedule = cfg.build_schedule()?;
        let prior = cfg.prior.build(shape)?;
        let sampler = cfg.sampler_config()?;
        let unconditional = cfg.unconditional_sampler()?;
        let embed = cfg.embed_config(&sampler)?;
        let extractor = FeatureExtractor::build(
            shape,
            cfg.codec.hidden,
            cfg.codec.features,
            cfg.codec.extractor_seed,
            cfg.extractor_options(),
        )?;
        Ok((shape, schedule, prior, sampler, unconditional, embed, extractor))
    }

    pub fn pipeline(&self, mode: WatermarkMode) -> Pipeline<'_> {
        Pipeline {
            config: &self.sampler,
            prior: &self.prior,
            schedule: &self.schedule,
            embed: self.embed,
            mode,
        }
    }

    pub fn decoder(&self) -> Decoder<'_> {
        Decoder {
            extractor: &self.extractor,
            carriers: &self.carriers,
        }
    }

    pub fn attack_context(&self) -> AttackContext<'_> {
        AttackContext {
            prior: &self.prior,
            schedule: &self.schedule,
            config: &self.unconditional,
        }
    }

    /// Unwatermarked sample from the initial latent drawn for image `index`.
    pub fn clean_sample(&self, cfg: &ExperimentConfig, index: usize) -> Result<(LatentGrid, LatentGrid)> {
        let x_t = initial_latent(cfg, self.shape, index);
        let (x0, _) = sample(&x_t, &self.sampler, &self.prior, &self.schedule, &Hooks::none(), false)?;
        Ok((x_t, x0))
    }
}

pub fn initial_latent(cfg: &ExperimentConfig, shape: Shape, index: usize) -> LatentGrid {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, "latent", index as u64));
    LatentGrid::gaussian(shape, 1.0, &mut rng)
}

pub fn image_message(cfg: &ExperimentConfig, index: usize) -> Result<Message> {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, "message", index as u64));
    Message::random(cfg.codec.bits, &mut rng)
}

pub fn initial_watermarks(cfg: &ExperimentConfig, shape: Shape, index: usize) -> Result<WatermarkPair> {
    let mut wm = init_watermarks(
        shape,
        cfg.watermark.init_variance,
        derive_seed(cfg.seed, "watermark", index as u64),
    )?;
    wm.sigma_td = cfg.watermark.sigma_td;
    Ok(wm)
}

/// Clean embeddings of `corpus_size` unconditional samples, for whitening.
pub fn clean_corpus(
    cfg: &ExperimentConfig,
    schedule: &NoiseSchedule,
    prior: &MixturePrior,
    sampler: &SamplerConfig,
    extractor: &FeatureExtractor,
) -> Result<Vec<Vec<f64>>> {
    let shape = prior.shape();
    (0..cfg.codec.corpus_size)
        .into_par_iter()
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.codec.carrier_seed, "corpus", i as u64));
            let x_t = LatentGrid::gaussian(shape, 1.0, &mut rng);
            let (x0, _) = sample(&x_t, sampler, prior, schedule, &Hooks::none(), false)?;
            extractor.extract(&x0)
        })
        .collect()
}

/// Optimizes the watermarks of image `index`.
pub fn embed_image(cfg: &ExperimentConfig, setup: &Setup, mode: WatermarkMode, index: usize) -> Result<(LatentGrid, Message, OptimizeOutcome)> {
    let x_t = initial_latent(cfg, setup.shape, index);
    let message = image_message(cfg, index)?;
    let init = initial_watermarks(cfg, setup.shape, index)?;
    let objective = Objective {
        decoder: setup.decoder(),
        message: &message,
        margin: cfg.codec.margin,
        weights: cfg.loss,
        x_t: &x_t,
        init: &init,
    };
    let outcome = optimize_watermark(&setup.pipeline(mode), &objective, &cfg.optimize_config())?;
    Ok((x_t, message, outcome))
}

/// Attack list with the clean row first and any explicit `none` folded into it.
pub fn attack_rows(cfg: &ExperimentConfig) -> Result<Vec<AttackSpec>> {
    let mut rows = vec![AttackSpec::None];
    rows.extend(cfg.attack_list()?.into_iter().filter(|a| *a != AttackSpec::None));
    Ok(rows)
}

pub fn attack_seed(cfg: &ExperimentConfig, index: usize, row: usize) -> u64 {
    derive_seed(cfg.seed, &format!("attack{row}"), index as u64)
}

/// Per-image output of a run, kept alongside the report.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageArtifacts {
    pub x_t: LatentGrid,
    pub watermarks: WatermarkPair,
    pub watermarked: LatentGrid,
    pub attacked: Vec<LatentGrid>,
    pub history: Vec<HistoryRow>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunOutput {
    pub report: RobustnessReport,
    /// `None` for failed images.
    pub images: Vec<Option<ImageArtifacts>>,
}

fn process_image(
    cfg: &ExperimentConfig,
    setup: &Setup,
    mode: WatermarkMode,
    rows: &[AttackSpec],
    index: usize,
) -> Result<(ImageResult, ImageArtifacts)> {
    let (x_t, message, outcome) = embed_image(cfg, setup, mode, index)?;
    let decoder = setup.decoder();
    let ctx = setup.attack_context();
    let mut matched = Vec::with_capacity(rows.len());
    let mut attacked = Vec::with_capacity(rows.len());
    for (j, spec) in rows.iter().enumerate() {
        let spec = spec.with_seed(attack_seed(cfg, index, j));
        let image = apply_attack(&outcome.x0, &spec, Some(&ctx))?;
        matched.push(matched_bits(&message, &decoder.decode(&image)?)?);
        attacked.push(image);
    }
    let result = ImageResult {
        index,
        message: Some(message),
        error: None,
        matched,
        iterations: outcome.history.len(),
        final_loss: Some(outcome.final_eval.breakdown),
        loss_history: outcome.history.iter().map(|r| r.total).collect(),
    };
    Ok((
        result,
        ImageArtifacts {
            x_t,
            watermarks: outcome.watermarks,
            watermarked: outcome.x0,
            attacked,
            history: outcome.history,
        },
    ))
}

/// Full protocol for every image; images run in parallel and merge in index order.
pub fn run_with_setup(cfg: &ExperimentConfig, setup: &Setup, mode: WatermarkMode) -> Result<RunOutput> {
    if cfg.images == 0 {
        return Err(Error::Report("experiment has zero images".into()));
    }
    let rows = attack_rows(cfg)?;
    let results: Vec<(ImageResult, Option<ImageArtifacts>)> = (0..cfg.images)
        .into_par_iter()
        .map(|i| match process_image(cfg, setup, mode, &rows, i) {
            Ok((r, a)) => (r, Some(a)),
            Err(e) => {
                log::warn!("image {i} failed: {e}");
                (ImageResult::failed(i, e.to_string()), None)
            }
        })
        .collect();
    let failures = results.iter().filter(|(r, _)| r.error.is_some()).count();
    if 2 * failures >= cfg.images {
        return Err(Error::Report(format!("{failures} of {} images failed", cfg.images)));
    }
    let (images, artifacts): (Vec<_>, Vec<_>) = results.into_iter().unzip();
    let mut run_cfg = cfg.clone();
    run_cfg.watermark.mode = mode;
    let report = RobustnessReport::assemble(&run_cfg, rows, images)?;
    Ok(RunOutput {
        report,
        images: artifacts,
    })
}

pub fn run_experiment(cfg: &ExperimentConfig) -> Result<RobustnessReport> {
    let setup = Setup::build(cfg)?;
    Ok(run_with_setup(cfg, &setup, cfg.watermark.mode)?.report)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PersistedImage {
    pub index: usize,
    pub initial_latent: PathBuf,
    pub watermarks: PathBuf,
    pub watermarked: PathBuf,
    pub attacked: Vec<PathBuf>,
    pub history: PathBuf,
}

/// Writes every per-image artifact under `dir` and returns their paths.
pub fn persist_images(out: &RunOutput, dir: &Path) -> Result<Vec<PersistedImage>> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut persisted = Vec::new();
    for (i, art) in out.images.iter().enumerate() {
        let Some(art) = art else { continue };
        let base = dir.join(format!("image_{i:03}"));
        std::fs::create_dir_all(&base).map_err(|e| Error::io(&base, e))?;
        let initial_latent = base.join("x_T.grid");
        write_grid(&initial_latent, &art.x_t)?;
        let watermarks = base.join("watermarks.bin");
        art.watermarks.save(&watermarks)?;
        let watermarked = base.join("x0_watermarked.grid");
        write_grid(&watermarked, &art.watermarked)?;
        let mut attacked = Vec::new();
        for (j, g) in art.attacked.iter().enumerate() {
            let p = base.join(format!("attack_{j:02}.grid"));
            write_grid(&p, g)?;
            attacked.push(p);
        }
        let history = base.join("history.csv");
        let mut text = String::from(HistoryRow::CSV_HEADER);
        text.push('\n');
        for row in &art.history {
            text.push_str(&row.csv_line());
            text.push('\n');
        }
        std::fs::write(&history, text).map_err(|e| Error::io(&history, e))?;
        persisted.push(PersistedImage {
            index: i,
            initial_latent,
            watermarks,
            watermarked,
            attacked,
            history,
        });
    }
    Ok(persisted)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn seeds_are_distinct_and_stable() {
        assert_eq!(derive_seed(1, "a", 0), derive_seed(1, "a", 0));
        assert_ne!(derive_seed(1, "a", 0), derive_seed(1, "a", 1));
        assert_ne!(derive_seed(1, "a", 0), derive_seed(1, "b", 0));
        assert_ne!(derive_seed(1, "a", 0), derive_seed(2, "a", 0));
    }

    #[test]
    fn zero_images_is_an_error() {
        let mut cfg = ExperimentConfig::desk();
        cfg.images = 0;
        cfg.codec.corpus_size = 256;
        let setup = Setup::build(&cfg).unwrap();
        assert!(matches!(run_with_setup(&cfg, &setup, WatermarkMode::Dual), Err(Error::Report(_))));
    }
}
