use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Context;
use clap::{Parser, Subcommand, ValueEnum};
use serde::Serialize;

use latentmark::adjoint::WatermarkMode;
use latentmark::attacks::{apply_attack, AttackSpec};
use latentmark::codec::{bit_accuracy, CarrierSet, Message};
use latentmark::harness::run::{attack_rows, attack_seed, embed_image, image_message, persist_images};
use latentmark::harness::{
    gradcheck, guidance_diagnostic, read_grid, run_with_setup, write_grid, write_report, ExperimentConfig,
    RunManifest, Setup,
};

#[derive(Parser)]
#[command(name = "latentmark", version, about = "Dual latent watermarks for diffusion samplers")]
struct Cli {
    /// Experiment config (TOML); the built-in desk config when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the master seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory; defaults to the config's `output_dir`.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[arg(long, global = true, value_enum, default_value_t = Format::Text)]
    format: Format,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Format {
    Text,
    Json,
}

#[derive(Subcommand)]
enum Command {
    /// Sample unwatermarked latents.
    Generate {
        #[arg(long)]
        images: Option<usize>,
    },
    /// Build the extractor and fit carriers on a clean corpus.
    Calibrate,
    /// Optimize watermarks and write watermarked latents.
    Embed {
        #[arg(long)]
        carriers: Option<PathBuf>,
        #[arg(long)]
        images: Option<usize>,
        #[arg(long, value_enum)]
        mode: Option<Mode>,
    },
    /// Decode the bits carried by a latent.
    Decode {
        input: PathBuf,
        #[arg(long)]
        carriers: Option<PathBuf>,
        /// Expected message as a string of `+` and `-`.
        #[arg(long)]
        message: Option<String>,
    },
    /// Apply attacks to a latent; the config's list when `--spec` is absent.
    Attack {
        input: PathBuf,
        /// One attack as JSON, e.g. `{"kind":"rotate","degrees":40}`.
        #[arg(long)]
        spec: Option<String>,
    },
    /// Full robustness run with report, plots and manifest.
    Evaluate {
        #[arg(long)]
        carriers: Option<PathBuf>,
        #[arg(long, value_enum)]
        mode: Option<Mode>,
        #[arg(long)]
        images: Option<usize>,
    },
    /// Compare adjoint, reference and finite-difference gradients.
    Gradcheck {
        #[arg(long, default_value_t = 8)]
        fd_coordinates: usize,
    },
    /// Guidance magnitude per sampling step.
    ProfileGuidance {
        #[arg(long, default_value_t = 20)]
        trajectories: usize,
        /// Used when the config has no condition.
        #[arg(long, default_value_t = 7.5)]
        scale: f64,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Mode {
    Dual,
    StructureOnly,
    DetailOnly,
}

impl From<Mode> for WatermarkMode {
    fn from(m: Mode) -> Self {
        match m {
            Mode::Dual => WatermarkMode::Dual,
            Mode::StructureOnly => WatermarkMode::StructureOnly,
            Mode::DetailOnly => WatermarkMode::DetailOnly,
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}

fn emit<T: Serialize>(format: Format, value: &T, text: impl FnOnce() -> String) {
    match format {
        Format::Json => println!("{}", serde_json::to_string_pretty(value).expect("serializable")),
        Format::Text => print!("{}", text()),
    }
}

fn load_config(cli: &Cli) -> anyhow::Result<ExperimentConfig> {
    let mut cfg = match &cli.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::desk(),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if let Some(o) = &cli.out {
        cfg.output_dir = o.clone();
    }
    Ok(cfg)
}

fn setup_for(cfg: &ExperimentConfig, carriers: Option<&Path>) -> anyhow::Result<Setup> {
    Ok(match carriers {
        Some(p) => Setup::with_carriers(cfg, CarrierSet::load(p)?)?,
        None => Setup::build(cfg)?,
    })
}

fn out_dir(cfg: &ExperimentConfig) -> anyhow::Result<PathBuf> {
    std::fs::create_dir_all(&cfg.output_dir).with_context(|| format!("creating {}", cfg.output_dir.display()))?;
    Ok(cfg.output_dir.clone())
}

fn finish_manifest(manifest: &mut RunManifest, dir: &Path) -> anyhow::Result<PathBuf> {
    manifest.finish();
    let path = dir.join("manifest.json");
    manifest.write(&path)?;
    Ok(path)
}

fn run(cli: Cli) -> anyhow::Result<ExitCode> {
    let mut cfg = load_config(&cli)?;
    let format = cli.format;
    match &cli.command {
        Command::Generate { images } => {
            if let Some(n) = images {
                cfg.images = *n;
            }
            let setup = Setup::build(&cfg)?;
            let dir = out_dir(&cfg)?;
            let mut manifest = RunManifest::start("generate", &cfg);
            let mut paths = Vec::new();
            for i in 0..cfg.images {
                let (x_t, x0) = setup.clean_sample(&cfg, i)?;
                let pt = dir.join(format!("clean_{i:03}_x_T.grid"));
                let p0 = dir.join(format!("clean_{i:03}.grid"));
                write_grid(&pt, &x_t)?;
                write_grid(&p0, &x0)?;
                manifest.record("initial_latent", &pt)?;
                manifest.record("clean_latent", &p0)?;
                paths.push(p0);
            }
            let m = finish_manifest(&mut manifest, &dir)?;
            emit(format, &paths, || format!("wrote {} latents, manifest {}\n", paths.len(), m.display()));
        }
        Command::Calibrate => {
            let setup = Setup::build(&cfg)?;
            let dir = out_dir(&cfg)?;
            let path = dir.join("carriers.bin");
            setup.carriers.save(&path)?;
            let mut manifest = RunManifest::start("calibrate", &cfg);
            manifest.record("carriers", &path)?;
            finish_manifest(&mut manifest, &dir)?;
            emit(format, &path, || {
                format!("fitted {} carriers in {} dims: {}\n", setup.carriers.k(), setup.carriers.dim(), path.display())
            });
        }
        Command::Embed { carriers, images, mode } => {
            if let Some(n) = images {
                cfg.images = *n;
            }
            let mode = mode.map(WatermarkMode::from).unwrap_or(cfg.watermark.mode);
            let setup = setup_for(&cfg, carriers.as_deref())?;
            let dir = out_dir(&cfg)?;
            let mut manifest = RunManifest::start("embed", &cfg);
            let carrier_path = dir.join("carriers.bin");
            setup.carriers.save(&carrier_path)?;
            manifest.record("carriers", &carrier_path)?;
            #[derive(Serialize)]
            struct Embedded {
                index: usize,
                message: String,
                bit_accuracy: f64,
                latent: PathBuf,
            }
            let mut rows = Vec::new();
            for i in 0..cfg.images {
                let (x_t, message, outcome) = embed_image(&cfg, &setup, mode, i)?;
                let base = dir.join(format!("embed_{i:03}"));
                let pt = base.with_extension("x_T.grid");
                let pw = base.with_extension("watermarks.bin");
                let p0 = base.with_extension("grid");
                write_grid(&pt, &x_t)?;
                outcome.watermarks.save(&pw)?;
                write_grid(&p0, &outcome.x0)?;
                manifest.record("initial_latent", &pt)?;
                manifest.record("watermarks", &pw)?;
                manifest.record("watermarked_latent", &p0)?;
                rows.push(Embedded {
                    index: i,
                    message: message.to_sign_string(),
                    bit_accuracy: outcome.final_eval.bit_accuracy,
                    latent: p0,
                });
            }
            finish_manifest(&mut manifest, &dir)?;
            emit(format, &rows, || {
                rows.iter()
                    .map(|r| format!("{} {} {:.4} {}\n", r.index, r.message, r.bit_accuracy, r.latent.display()))
                    .collect()
            });
        }
        Command::Decode { input, carriers, message } => {
            let setup = setup_for(&cfg, carriers.as_deref())?;
            let image = read_grid(input)?;
            let decoded = setup.decoder().decode(&image)?;
            let expected = match message {
                Some(m) => Message::parse(m)?,
                None => image_message(&cfg, 0)?,
            };
            let acc = bit_accuracy(&expected, &decoded)?;
            #[derive(Serialize)]
            struct Decoded {
                bits: String,
                expected: String,
                bit_accuracy: f64,
            }
            let d = Decoded {
                bits: decoded.to_sign_string(),
                expected: expected.to_sign_string(),
                bit_accuracy: acc,
            };
            emit(format, &d, || format!("bits {}\nexpected {}\nbit_accuracy {:.4}\n", d.bits, d.expected, acc));
        }
        Command::Attack { input, spec } => {
            let image = read_grid(input)?;
            let setup = Setup::build(&cfg)?;
            let specs: Vec<AttackSpec> = match spec {
                Some(s) => vec![serde_json::from_str(s).context("parsing --spec")?],
                None => attack_rows(&cfg)?,
            };
            let dir = out_dir(&cfg)?;
            let ctx = setup.attack_context();
            let stem = input.file_stem().and_then(|s| s.to_str()).unwrap_or("latent").to_string();
            let mut manifest = RunManifest::start("attack", &cfg);
            let mut written = Vec::new();
            for (j, s) in specs.iter().enumerate() {
                let s = s.with_seed(attack_seed(&cfg, 0, j));
                s.validate(image.shape())?;
                let out = apply_attack(&image, &s, Some(&ctx))?;
                let path = dir.join(format!("{stem}_{}.grid", s.label()));
                write_grid(&path, &out)?;
                manifest.record(s.label(), &path)?;
                written.push(path);
            }
            finish_manifest(&mut manifest, &dir)?;
            emit(format, &written, || written.iter().map(|p| format!("{}\n", p.display())).collect());
        }
        Command::Evaluate { carriers, mode, images } => {
            if let Some(n) = images {
                cfg.images = *n;
            }
            if let Some(m) = mode {
                cfg.watermark.mode = (*m).into();
            }
            let mut manifest = RunManifest::start("evaluate", &cfg);
            let setup = setup_for(&cfg, carriers.as_deref())?;
            let dir = out_dir(&cfg)?;
            let out = run_with_setup(&cfg, &setup, cfg.watermark.mode)?;
            let carrier_path = dir.join("carriers.bin");
            setup.carriers.save(&carrier_path)?;
            manifest.record("carriers", &carrier_path)?;
            for p in persist_images(&out, &dir.join("images"))? {
                manifest.record("initial_latent", &p.initial_latent)?;
                manifest.record("watermarks", &p.watermarks)?;
                manifest.record("watermarked_latent", &p.watermarked)?;
                for a in &p.attacked {
                    manifest.record("attacked_latent", a)?;
                }
                manifest.record("loss_history", &p.history)?;
            }
            let files = write_report(&out.report, &dir)?;
            for (role, p) in ["report_csv", "report_json", "accuracy_plot", "loss_plot"].iter().zip(files.all()) {
                manifest.record(*role, p)?;
            }
            let m = finish_manifest(&mut manifest, &dir)?;
            let report = &out.report;
            emit(format, report, || {
                let mut s = report.to_csv();
                s.push_str(&format!(
                    "threshold {} of {} at fpr {:e}; {} failed images; wall {:.1}s; manifest {}\n",
                    report.threshold,
                    report.k,
                    report.fpr,
                    report.failures(),
                    manifest.wall_seconds,
                    m.display()
                ));
                s
            });
        }
        Command::Gradcheck { fd_coordinates } => {
            let setup = Setup::build(&cfg)?;
            let r = gradcheck(&cfg, &setup, *fd_coordinates)?;
            emit(format, &r, || {
                format!(
                    "steps {}\ncosine {:.9}\nrelative_l2 {:.3e}\nfd_max_relative {:.3e} over {} coordinates\n",
                    r.steps, r.cosine, r.relative_l2, r.fd_max_relative, r.fd_coordinates
                )
            });
            if r.cosine < 0.999 {
                return Ok(ExitCode::from(2));
            }
        }
        Command::ProfileGuidance { trajectories, scale } => {
            let setup = Setup::build(&cfg)?;
            let sampler = match &setup.sampler.condition {
                Some(_) => setup.sampler.clone(),
                None => {
                    let label = setup
                        .prior
                        .components()
                        .iter()
                        .map(|c| c.label.clone())
                        .find(|l| !l.is_empty())
                        .context("prior has no labelled component to condition on")?;
                    setup.sampler.clone().with_guidance(label, *scale)?
                }
            };
            let r = guidance_diagnostic(&setup.prior, &setup.schedule, &sampler, *trajectories, cfg.seed)?;
            emit(format, &r, || {
                let mut s: String = r.profile.iter().map(|(t, m)| format!("{t} {m:.6}\n")).collect();
                s.push_str(&format!("early {:.6}\nlate {:.6}\n", r.early_mean, r.late_mean));
                s
            });
        }
    }
    Ok(ExitCode::SUCCESS)
}
