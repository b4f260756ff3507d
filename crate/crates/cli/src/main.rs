//! Command-line front end for the JPEG-artifact-removal pipeline:
//! degradation, the three training stages, inference, evaluation, and
//! quality-factor prediction.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;

use sodiff_core::config::{Stage, TrainConfig};
use sodiff_core::data::{load_images_dir, write_manifest, ManifestEntry};
use sodiff_core::eval::{evaluate, IdentityRestorer, Restorer};
use sodiff_core::image::ImageTensor;
use sodiff_core::jpeg::{degrade, Subsample};
use sodiff_core::pipeline::RestorationPipeline;
use sodiff_core::text::{load_caption_file, HashTextProvider};
use sodiff_core::train::{run_autoencoder, run_stage1, run_stage2};

#[derive(Parser)]
#[command(name = "sodiff", version, about = "One-step diffusion JPEG artifact removal")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Clone, Copy, ValueEnum)]
enum SubsampleArg {
    #[value(name = "444")]
    S444,
    #[value(name = "420")]
    S420,
}

impl From<SubsampleArg> for Subsample {
    fn from(v: SubsampleArg) -> Self {
        match v {
            SubsampleArg::S444 => Subsample::S444,
            SubsampleArg::S420 => Subsample::S420,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum StageArg {
    Autoencoder,
    Saipe,
    Sodiff,
}

#[derive(Subcommand)]
enum Cmd {
    /// JPEG-compress every PNG in a directory and write a filename,qf manifest.
    Degrade {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Fixed value ("10") or inclusive range ("5-95") sampled per image.
        #[arg(long)]
        qf: String,
        #[arg(long, value_enum, default_value = "420")]
        subsample: SubsampleArg,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Pre-train the latent autoencoder.
    TrainAe {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Override a config field, e.g. --set lr=1e-3 --set saipe.c_f=32.
        #[arg(long = "set", value_name = "KEY=VALUE")]
        sets: Vec<String>,
    },
    /// Stage 1: train the semantic prompt extractor.
    TrainSaipe {
        #[arg(long)]
        data: PathBuf,
        /// Tab-separated image_id<TAB>caption lines.
        #[arg(long)]
        captions: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        resume: Option<PathBuf>,
        #[arg(long = "set", value_name = "KEY=VALUE")]
        sets: Vec<String>,
    },
    /// Stage 2: train adapters, timestep predictor and discriminator.
    TrainSodiff {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        saipe: PathBuf,
        #[arg(long)]
        ae: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        resume: Option<PathBuf>,
        #[arg(long = "set", value_name = "KEY=VALUE")]
        sets: Vec<String>,
    },
    /// Restore every PNG in a directory.
    Infer {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        saipe: PathBuf,
        #[arg(long)]
        ae: PathBuf,
        #[arg(long)]
        sodiff: PathBuf,
    },
    /// Degrade held-out images at the given QFs, restore, report metrics.
    /// With no checkpoints the identity restorer is scored as a baseline.
    Evaluate {
        #[arg(long)]
        data: PathBuf,
        /// Comma-separated quality factors, e.g. 5,10,20.
        #[arg(long, default_value = "5,10,20")]
        qf: String,
        #[arg(long)]
        saipe: Option<PathBuf>,
        #[arg(long)]
        ae: Option<PathBuf>,
        #[arg(long)]
        sodiff: Option<PathBuf>,
        /// Where report.csv and report.md go.
        #[arg(long, default_value = ".")]
        out: PathBuf,
    },
    /// Predict the compression quality factor (and the matching timestep)
    /// of PNGs without restoring them.
    PredictQf {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        saipe: PathBuf,
        #[arg(long)]
        ae: PathBuf,
        #[arg(long)]
        sodiff: PathBuf,
    },
    /// Print a stage's default config as TOML (the full schema).
    PrintConfig {
        #[arg(long, value_enum)]
        stage: StageArg,
    },
}

fn parse_sets(sets: &[String]) -> Result<Vec<(String, String)>> {
    sets.iter()
        .map(|s| {
            s.split_once('=')
                .map(|(k, v)| (k.to_string(), v.to_string()))
                .with_context(|| format!("--set {s:?} is not KEY=VALUE"))
        })
        .collect()
}

fn resolve_config(
    stage: Stage,
    path: Option<&Path>,
    sets: &[String],
) -> Result<TrainConfig> {
    let mut cfg = match path {
        Some(p) => TrainConfig::load(p)
            .with_context(|| format!("loading config {}", p.display()))?,
        None => match stage {
            Stage::Autoencoder => TrainConfig::autoencoder(),
            Stage::Saipe => TrainConfig::stage1(),
            Stage::Sodiff => TrainConfig::stage2(),
        },
    };
    if cfg.stage != stage {
        bail!(
            "config is for stage {:?} but this subcommand trains {:?}",
            cfg.stage,
            stage
        );
    }
    cfg.apply_overrides(&parse_sets(sets)?)?;
    cfg.validate()?;
    Ok(cfg)
}

fn parse_qf_spec(spec: &str) -> Result<(u8, u8)> {
    let parse_one = |s: &str| -> Result<u8> {
        let v: u8 = s.trim().parse().with_context(|| format!("bad QF {s:?}"))?;
        if v == 0 || v > 100 {
            bail!("QF {v} outside [1, 100]");
        }
        Ok(v)
    };
    match spec.split_once('-') {
        Some((lo, hi)) => {
            let (lo, hi) = (parse_one(lo)?, parse_one(hi)?);
            if lo > hi {
                bail!("QF range {lo}-{hi} is inverted");
            }
            Ok((lo, hi))
        }
        None => {
            let v = parse_one(spec)?;
            Ok((v, v))
        }
    }
}

fn parse_qf_list(spec: &str) -> Result<Vec<u8>> {
    spec.split(',')
        .map(|s| {
            let v: u8 = s.trim().parse().with_context(|| format!("bad QF {s:?}"))?;
            Ok(v)
        })
        .collect()
}

fn load_corpus(dir: &Path, min_size: usize) -> Result<Vec<(String, ImageTensor)>> {
    let set = load_images_dir(dir, min_size)?;
    if set.skipped > 0 {
        eprintln!("warning: skipped {} unusable file(s) in {}", set.skipped, dir.display());
    }
    Ok(set.images)
}

fn cmd_degrade(
    input: &Path,
    out: &Path,
    qf_spec: &str,
    subsample: Subsample,
    seed: u64,
) -> Result<()> {
    let (lo, hi) = parse_qf_spec(qf_spec)?;
    let corpus = load_corpus(input, 1)?;
    std::fs::create_dir_all(out)?;
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let mut entries = Vec::with_capacity(corpus.len());
    for (id, img) in &corpus {
        let qf = rng.gen_range(lo..=hi);
        let lq = degrade(img, u32::from(qf), subsample)?;
        let filename = format!("{id}.png");
        lq.save_png(&out.join(&filename))?;
        entries.push(ManifestEntry { filename, qf });
    }
    write_manifest(&out.join("manifest.csv"), &entries)?;
    println!(
        "degraded {} image(s) at QF {} into {}",
        entries.len(),
        if lo == hi { lo.to_string() } else { format!("{lo}-{hi}") },
        out.display()
    );
    Ok(())
}

fn main() -> Result<()> {
    match Cli::parse().cmd {
        Cmd::Degrade { input, out, qf, subsample, seed } => {
            cmd_degrade(&input, &out, &qf, subsample.into(), seed)
        }
        Cmd::TrainAe { data, config, out, resume, sets } => {
            let cfg = resolve_config(Stage::Autoencoder, config.as_deref(), &sets)?;
            let corpus = load_corpus(&data, cfg.crop)?;
            let report = run_autoencoder(&cfg, &corpus, &out, resume.as_deref())?;
            let last = report.rows.last().map(|r| r.total).unwrap_or(f64::NAN);
            println!(
                "autoencoder: {} step(s), final loss {last:.6}, checkpoint {}",
                report.steps_run,
                report.ckpt_path.display()
            );
            Ok(())
        }
        Cmd::TrainSaipe { data, captions, config, out, resume, sets } => {
            let cfg = resolve_config(Stage::Saipe, config.as_deref(), &sets)?;
            let corpus = load_corpus(&data, cfg.crop)?;
            let provider =
                HashTextProvider::new(cfg.saipe.query_count, cfg.saipe.embed_dim, cfg.seed);
            let records = load_caption_file(&captions, &provider)?;
            let report = run_stage1(&cfg, &corpus, &records, &out, resume.as_deref())?;
            let last = report.rows.last().map(|r| r.total).unwrap_or(f64::NAN);
            println!(
                "stage 1: {} step(s), final loss {last:.6}, checkpoint {}",
                report.steps_run,
                report.ckpt_path.display()
            );
            Ok(())
        }
        Cmd::TrainSodiff { data, saipe, ae, config, out, resume, sets } => {
            let cfg = resolve_config(Stage::Sodiff, config.as_deref(), &sets)?;
            let corpus = load_corpus(&data, cfg.crop)?;
            let report = run_stage2(&cfg, &corpus, &saipe, &ae, &out, resume.as_deref())?;
            let last = report.rows.last().map(|r| r.total).unwrap_or(f64::NAN);
            println!(
                "stage 2: {} step(s), final loss {last:.6}, checkpoint {}",
                report.steps_run,
                report.ckpt_path.display()
            );
            Ok(())
        }
        Cmd::Infer { input, out, saipe, ae, sodiff } => {
            let pipe = RestorationPipeline::from_checkpoints(&saipe, &ae, &sodiff)?;
            let corpus = load_corpus(&input, 1)?;
            std::fs::create_dir_all(&out)?;
            for (id, img) in &corpus {
                let restored = pipe.restore_image(img)?;
                restored.save_png(&out.join(format!("{id}.png")))?;
            }
            println!("restored {} image(s) into {}", corpus.len(), out.display());
            Ok(())
        }
        Cmd::Evaluate { data, qf, saipe, ae, sodiff, out } => {
            let qfs = parse_qf_list(&qf)?;
            let corpus = load_corpus(&data, 1)?;
            let given = [&saipe, &ae, &sodiff].iter().filter(|p| p.is_some()).count();
            let report = match given {
                0 => {
                    println!("no checkpoints given; scoring the identity baseline");
                    evaluate(&IdentityRestorer, &corpus, &qfs)?
                }
                3 => {
                    let pipe = RestorationPipeline::from_checkpoints(
                        saipe.as_deref().unwrap(),
                        ae.as_deref().unwrap(),
                        sodiff.as_deref().unwrap(),
                    )?;
                    evaluate(&pipe as &dyn Restorer, &corpus, &qfs)?
                }
                _ => bail!("--saipe, --ae and --sodiff must be given together"),
            };
            std::fs::create_dir_all(&out)?;
            std::fs::write(out.join("report.csv"), report.to_csv())?;
            let md = report.to_markdown();
            std::fs::write(out.join("report.md"), &md)?;
            print!("{md}");
            Ok(())
        }
        Cmd::PredictQf { input, saipe, ae, sodiff } => {
            let pipe = RestorationPipeline::from_checkpoints(&saipe, &ae, &sodiff)?;
            let images = if input.is_dir() {
                load_corpus(&input, 1)?
            } else {
                let id = input
                    .file_stem()
                    .map(|s| s.to_string_lossy().into_owned())
                    .unwrap_or_else(|| "image".into());
                vec![(id, ImageTensor::load_png(&input)?)]
            };
            for (id, img) in &images {
                let (qf, tau) = pipe.predict_qf(img)?;
                println!("{id}\tqf={qf:.2}\ttau={tau:.2}");
            }
            Ok(())
        }
        Cmd::PrintConfig { stage } => {
            let cfg = match stage {
                StageArg::Autoencoder => TrainConfig::autoencoder(),
                StageArg::Saipe => TrainConfig::stage1(),
                StageArg::Sodiff => TrainConfig::stage2(),
            };
            print!("{}", cfg.to_toml()?);
            Ok(())
        }
    }
}
