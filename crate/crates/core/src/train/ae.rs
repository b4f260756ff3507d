//! Autoencoder pre-training: plain reconstruction plus a small KL pull
//! toward a unit Gaussian latent. Runs once, then the weights stay frozen
//! for the rest of the pipeline.

use std::path::{Path, PathBuf};

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use serde_json::json;

use crate::ckpt::{config_hash, load_checkpoint, save_checkpoint};
use crate::config::{Stage, TrainConfig};
use crate::data::CropSampler;
use crate::diffusion::Autoencoder;
use crate::image::{images_to_nchw, ImageTensor};
use crate::nn::{init, ParamStore};
use crate::tensor::Tensor;
use crate::train::{step_rng, Optimizer};
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct AeLogRow {
    pub step: u64,
    pub total: f64,
    pub mse: f64,
    pub kl: f64,
}

impl AeLogRow {
    pub fn to_csv(&self) -> String {
        format!("{},{},{},{}", self.step, self.total, self.mse, self.kl)
    }
}

#[derive(Debug)]
pub struct AeReport {
    pub ckpt_path: PathBuf,
    pub log_path: PathBuf,
    pub steps_run: u64,
    pub rows: Vec<AeLogRow>,
}

pub fn run_autoencoder(
    cfg: &TrainConfig,
    images: &[(String, ImageTensor)],
    out_dir: &Path,
    resume: Option<&Path>,
) -> Result<AeReport> {
    if cfg.stage != Stage::Autoencoder {
        return Err(Error::Domain(format!(
            "autoencoder runner got a {:?} config",
            cfg.stage
        )));
    }
    cfg.validate()?;
    if images.is_empty() {
        return Err(Error::Domain("no training images".into()));
    }
    std::fs::create_dir_all(out_dir)?;

    let mut store = ParamStore::new();
    let mut init_rng = ChaCha20Rng::seed_from_u64(cfg.seed);
    let model = Autoencoder::new(&mut store, &cfg.ae, &mut init_rng)?;
    let mut opt = Optimizer::new(cfg.opt_config())?;

    let mut start_step = 0u64;
    if let Some(path) = resume {
        let ckpt = load_checkpoint(path)?;
        ckpt.expect_kind("ae")?;
        ckpt.expect_config_hash(&config_hash(&cfg.ae)?, "resume")?;
        store.load_state(&ckpt.params)?;
        opt.load_state(&ckpt.extras)?;
        start_step = ckpt
            .meta
            .get("step")
            .and_then(|v| v.as_u64())
            .ok_or_else(|| Error::Checkpoint("checkpoint meta lacks a step count".into()))?;
    }

    let sampler = CropSampler::new(cfg.crop, cfg.flips);
    let trainable = store.trainable();
    let ckpt_path = out_dir.join("ae.ckpt");
    let log_path = out_dir.join("ae_log.csv");

    let mut rows = Vec::new();
    let mut steps_run = 0u64;
    for step in start_step..cfg.iters {
        let mut rng = step_rng(cfg.seed, step, "ae");
        let mut crops = Vec::with_capacity(cfg.batch);
        for _ in 0..cfg.batch {
            let idx = rng.gen_range(0..images.len());
            crops.push(sampler.sample(&images[idx].1, &mut rng)?);
        }
        let x = Tensor::constant(images_to_nchw(&crops));

        store.begin_step();
        let (mu, logvar) = model.encode_moments(&x)?;
        let noise = init::normal(&mut rng, mu.shape(), 1.0);
        let z = Autoencoder::sample_latent(&mu, &logvar, &noise);
        let rec = model.decode(&z)?;
        let mse = rec.mse(&x);
        let kl = Autoencoder::kl(&mu, &logvar);
        let total = mse.add(&kl.scale(cfg.ae.kl_weight));
        let grads = total.backward();
        opt.step(&trainable, &grads);

        rows.push(AeLogRow {
            step,
            total: total.value()[[]],
            mse: mse.value()[[]],
            kl: kl.value()[[]],
        });
        steps_run += 1;

        let last = step + 1 == cfg.iters;
        if last || (step + 1) % cfg.ckpt_every == 0 {
            save_checkpoint(
                &ckpt_path,
                "ae",
                &cfg.ae,
                json!({ "step": step + 1, "seed": cfg.seed }),
                &store.state(),
                &opt.state(),
            )?;
        }
    }

    let mut out = String::from("step,total,mse,kl\n");
    for row in &rows {
        out.push_str(&row.to_csv());
        out.push('\n');
    }
    std::fs::write(&log_path, out)?;

    Ok(AeReport {
        ckpt_path,
        log_path,
        steps_run,
        rows,
    })
}
