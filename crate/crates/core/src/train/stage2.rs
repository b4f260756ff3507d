//! Stage-2 training: low-rank adapters on a frozen noise-prediction UNet
//! plus the timestep predictor, adversarially against a latent
//! discriminator. The prompt extractor, autoencoder and UNet base stay
//! frozen; their checksums are re-verified during the run.

use std::path::{Path, PathBuf};
use std::rc::Rc;

use ndarray::IxDyn;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::ckpt::{config_hash, load_checkpoint, save_checkpoint, Checkpoint};
use crate::config::{ScheduleConfig, Stage, TrainConfig};
use crate::data::{synthetic_caption, CropSampler};
use crate::diffusion::{
    build_schedule, one_step_restore, Autoencoder, LoraConfig, NoiseSchedule, Unet, UnetConfig,
};
use crate::image::{images_to_nchw, ImageTensor};
use crate::jpeg::{degrade, Subsample};
use crate::losses::{
    gan_losses, recon_loss, total_loss, DiscConfig, Discriminator, DistsLite, LossWeights,
    ReconLoss,
};
use crate::nn::attention::LoraSpec;
use crate::nn::{Param, ParamStore};
use crate::saipe::Saipe;
use crate::tensor::{Arr, Tensor};
use crate::text::{HashTextProvider, PromptProvider};
use crate::timestep::{
    bins_to_schedule, gumbel_combine, sample_gumbel, qf_loss, TimePredictor, TimePredictorConfig,
};
use crate::train::{step_rng, Optimizer};
use crate::{Error, Result};

/// Everything needed to rebuild the restoration stack from the archive
/// alone (the frozen prompt extractor and autoencoder live in their own
/// archives, referenced by hash in the metadata).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SodiffCkptConfig {
    pub unet: UnetConfig,
    pub lora: LoraConfig,
    pub predictor: TimePredictorConfig,
    pub disc: DiscConfig,
    pub schedule: ScheduleConfig,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Stage2LogRow {
    pub step: u64,
    pub total: f64,
    pub recon: f64,
    pub adv: f64,
    pub qf: f64,
    pub disc: f64,
}

impl Stage2LogRow {
    pub fn to_csv(&self) -> String {
        format!(
            "{},{},{},{},{},{}",
            self.step, self.total, self.recon, self.adv, self.qf, self.disc
        )
    }
}

#[derive(Debug)]
pub struct Stage2Report {
    pub ckpt_path: PathBuf,
    pub log_path: PathBuf,
    pub steps_run: u64,
    pub rows: Vec<Stage2LogRow>,
    /// (module, checksum) for each frozen store, identical at start and end.
    pub frozen_checksums: Vec<(String, String)>,
}

/// Prepend `prefix/` to every name so several stores can share one archive.
pub fn tag_state(prefix: &str, state: Vec<(String, Arr)>) -> Vec<(String, Arr)> {
    state
        .into_iter()
        .map(|(n, a)| (format!("{prefix}/{n}"), a))
        .collect()
}

/// Take back the entries under `prefix/`, names restored.
pub fn split_tag(state: &[(String, Arr)], prefix: &str) -> Vec<(String, Arr)> {
    let want = format!("{prefix}/");
    state
        .iter()
        .filter_map(|(n, a)| {
            n.strip_prefix(&want)
                .map(|rest| (rest.to_string(), a.clone()))
        })
        .collect()
}

/// Load a frozen-module archive and fail if its config disagrees with the
/// one the training config expects.
pub fn load_frozen_ckpt<T: Serialize>(
    path: &Path,
    kind: &str,
    expected_config: &T,
) -> Result<Checkpoint> {
    let ckpt = load_checkpoint(path)?;
    ckpt.expect_kind(kind)?;
    ckpt.expect_config_hash(
        &config_hash(expected_config)?,
        &format!("{kind} checkpoint {}", path.display()),
    )?;
    Ok(ckpt)
}

struct FrozenGuard {
    name: &'static str,
    checksum: String,
}

impl FrozenGuard {
    fn new(name: &'static str, store: &ParamStore) -> Self {
        Self {
            name,
            checksum: store.checksum(),
        }
    }

    fn verify(&self, store: &ParamStore, step: u64) -> Result<()> {
        let now = store.checksum();
        if now != self.checksum {
            return Err(Error::Domain(format!(
                "frozen module {} drifted by step {step}: checksum {} was {} at start; aborting",
                self.name, now, self.checksum
            )));
        }
        Ok(())
    }
}

struct Batch {
    ids: Vec<String>,
    x_h: Tensor,
    x_l: Tensor,
    /// [B] ground-truth quality factors as f64.
    qf: Tensor,
}

fn sample_batch(
    cfg: &TrainConfig,
    images: &[(String, ImageTensor)],
    sampler: &CropSampler,
    rng: &mut ChaCha20Rng,
) -> Result<Batch> {
    let mut ids = Vec::with_capacity(cfg.batch);
    let mut clean = Vec::with_capacity(cfg.batch);
    let mut degraded = Vec::with_capacity(cfg.batch);
    let mut qf = Arr::zeros(IxDyn(&[cfg.batch]));
    for b in 0..cfg.batch {
        let idx = rng.gen_range(0..images.len());
        let (id, img) = &images[idx];
        let crop = sampler.sample(img, rng)?;
        let q = rng.gen_range(u32::from(cfg.qf_range[0])..=u32::from(cfg.qf_range[1]));
        degraded.push(degrade(&crop, q, Subsample::S420)?);
        clean.push(crop);
        qf[[b]] = f64::from(q);
        ids.push(id.clone());
    }
    Ok(Batch {
        ids,
        x_h: Tensor::constant(images_to_nchw(&clean)),
        x_l: Tensor::constant(images_to_nchw(&degraded)),
        qf: Tensor::constant(qf),
    })
}

/// All six parameter stores plus the models over them. Frozen stores are
/// demoted to constants so graphs never compute their gradients.
struct Stack {
    saipe_store: ParamStore,
    ae_store: ParamStore,
    unet_store: ParamStore,
    lora_store: ParamStore,
    tp_store: ParamStore,
    disc_store: ParamStore,
    saipe: Saipe,
    ae: Autoencoder,
    unet: Unet,
    tp: TimePredictor,
    disc: Discriminator,
    sched: NoiseSchedule,
}

fn build_stack(cfg: &TrainConfig, saipe_ckpt: &Path, ae_ckpt: &Path) -> Result<Stack> {
    let saipe_arch = load_frozen_ckpt(saipe_ckpt, "saipe", &cfg.saipe)?;
    let ae_arch = load_frozen_ckpt(ae_ckpt, "ae", &cfg.ae)?;

    let mut saipe_store = ParamStore::new();
    let mut ae_store = ParamStore::new();
    let mut unet_store = ParamStore::new();
    let mut lora_store = ParamStore::new();
    let mut tp_store = ParamStore::new();
    let mut disc_store = ParamStore::new();

    // Module init draws come from separate streams so adding or removing
    // one module never shifts another's initial weights.
    let mut saipe_rng = ChaCha20Rng::seed_from_u64(cfg.seed);
    let mut ae_rng = ChaCha20Rng::seed_from_u64(cfg.seed);
    let mut unet_rng = ChaCha20Rng::seed_from_u64(cfg.seed ^ 0x756e_6574);
    let mut lora_rng = ChaCha20Rng::seed_from_u64(cfg.seed ^ 0x6c6f_7261);
    let mut tp_rng = ChaCha20Rng::seed_from_u64(cfg.seed ^ 0x7470);
    let mut disc_rng = ChaCha20Rng::seed_from_u64(cfg.seed ^ 0x6469_7363);

    let saipe = Saipe::new(&mut saipe_store, &cfg.saipe, &mut saipe_rng)?;
    let ae = Autoencoder::new(&mut ae_store, &cfg.ae, &mut ae_rng)?;
    let mut lora = LoraSpec {
        store: &mut lora_store,
        rank: cfg.lora.rank,
        scale: cfg.lora.scale,
        rng: &mut lora_rng,
    };
    let unet = Unet::new(&mut unet_store, &cfg.unet, &mut unet_rng, Some(&mut lora))?;
    let tp = TimePredictor::new(&mut tp_store, &cfg.predictor, &mut tp_rng)?;
    let disc = Discriminator::new(&mut disc_store, &cfg.disc, &mut disc_rng)?;

    saipe_store.load_state(&saipe_arch.params)?;
    ae_store.load_state(&ae_arch.params)?;
    saipe_store.set_all_trainable(false);
    ae_store.set_all_trainable(false);
    unet_store.set_all_trainable(false);

    let sched = build_schedule(
        cfg.schedule.t_max,
        cfg.schedule.beta_start,
        cfg.schedule.beta_end,
    )?;
    Ok(Stack {
        saipe_store,
        ae_store,
        unet_store,
        lora_store,
        tp_store,
        disc_store,
        saipe,
        ae,
        unet,
        tp,
        disc,
        sched,
    })
}

fn save_stage2_ckpt(
    path: &Path,
    cfg: &SodiffCkptConfig,
    step: u64,
    saipe_hash: &str,
    ae_hash: &str,
    stack: &Stack,
    opt_g: &Optimizer,
    opt_d: &Optimizer,
) -> Result<()> {
    let mut params = tag_state("unet", stack.unet_store.state());
    params.extend(tag_state("lora", stack.lora_store.state()));
    params.extend(tag_state("tp", stack.tp_store.state()));
    params.extend(tag_state("disc", stack.disc_store.state()));
    let mut extras = tag_state("g", opt_g.state());
    extras.extend(tag_state("d", opt_d.state()));
    save_checkpoint(
        path,
        "sodiff",
        cfg,
        json!({
            "step": step,
            "saipe_config_hash": saipe_hash,
            "ae_config_hash": ae_hash,
        }),
        &params,
        &extras,
    )
}

pub fn run_stage2(
    cfg: &TrainConfig,
    images: &[(String, ImageTensor)],
    saipe_ckpt: &Path,
    ae_ckpt: &Path,
    out_dir: &Path,
    resume: Option<&Path>,
) -> Result<Stage2Report> {
    if cfg.stage != Stage::Sodiff {
        return Err(Error::Domain(format!(
            "stage-2 runner got a {:?} config",
            cfg.stage
        )));
    }
    cfg.validate()?;
    if images.is_empty() {
        return Err(Error::Domain("no training images".into()));
    }
    std::fs::create_dir_all(out_dir)?;

    let stack = build_stack(cfg, saipe_ckpt, ae_ckpt)?;
    let snap_cfg = SodiffCkptConfig {
        unet: cfg.unet.clone(),
        lora: cfg.lora,
        predictor: cfg.predictor.clone(),
        disc: cfg.disc.clone(),
        schedule: cfg.schedule.clone(),
    };
    let saipe_hash = config_hash(&cfg.saipe)?;
    let ae_hash = config_hash(&cfg.ae)?;

    let mut opt_g = Optimizer::new(cfg.opt_config())?;
    let mut opt_d = Optimizer::new(cfg.opt_config())?;

    let mut start_step = 0u64;
    if let Some(path) = resume {
        let ckpt = load_checkpoint(path)?;
        ckpt.expect_kind("sodiff")?;
        ckpt.expect_config_hash(&config_hash(&snap_cfg)?, "resume")?;
        for (meta_key, hash) in [("saipe_config_hash", &saipe_hash), ("ae_config_hash", &ae_hash)]
        {
            let recorded = ckpt.meta.get(meta_key).and_then(|v| v.as_str());
            if recorded != Some(hash.as_str()) {
                return Err(Error::Checkpoint(format!(
                    "resume: {meta_key} {recorded:?} does not match the supplied frozen module"
                )));
            }
        }
        stack.unet_store.load_state(&split_tag(&ckpt.params, "unet"))?;
        stack.lora_store.load_state(&split_tag(&ckpt.params, "lora"))?;
        stack.tp_store.load_state(&split_tag(&ckpt.params, "tp"))?;
        stack.disc_store.load_state(&split_tag(&ckpt.params, "disc"))?;
        opt_g.load_state(&split_tag(&ckpt.extras, "g"))?;
        opt_d.load_state(&split_tag(&ckpt.extras, "d"))?;
        start_step = ckpt
            .meta
            .get("step")
            .and_then(|v| v.as_u64())
            .ok_or_else(|| Error::Checkpoint("checkpoint meta lacks a step count".into()))?;
    }

    let guards = [
        FrozenGuard::new("saipe", &stack.saipe_store),
        FrozenGuard::new("autoencoder", &stack.ae_store),
        FrozenGuard::new("unet-base", &stack.unet_store),
    ];

    let sampler = CropSampler::new(cfg.crop, cfg.flips);
    let extractor = DistsLite::new();
    let text_stub = cfg.ablation.text_only_prompt.then(|| {
        HashTextProvider::new(cfg.saipe.query_count, cfg.saipe.embed_dim, cfg.seed)
    });

    let mut gen_params: Vec<Rc<Param>> = stack.lora_store.trainable();
    gen_params.extend(stack.tp_store.trainable());
    let disc_params: Vec<Rc<Param>> = stack.disc_store.trainable();

    let ckpt_path = out_dir.join("sodiff.ckpt");
    let log_path = out_dir.join("stage2_log.csv");
    let weights = LossWeights {
        alpha: cfg.weights.alpha,
        beta: if cfg.ablation.no_lqf {
            0.0
        } else {
            cfg.weights.beta
        },
    };

    let mut rows = Vec::new();
    let mut steps_run = 0u64;
    for step in start_step..cfg.iters {
        let mut rng = step_rng(cfg.seed, step, "stage2");
        let batch = sample_batch(cfg, images, &sampler, &mut rng)?;
        let b = cfg.batch;

        for store in [
            &stack.saipe_store,
            &stack.ae_store,
            &stack.unet_store,
            &stack.lora_store,
            &stack.tp_store,
            &stack.disc_store,
        ] {
            store.begin_step();
        }

        let e_img = match &text_stub {
            Some(provider) => {
                let (l, d) = provider.shape();
                let mut stacked = Arr::zeros(IxDyn(&[b, l, d]));
                for (i, id) in batch.ids.iter().enumerate() {
                    let emb = provider.embed(id, &synthetic_caption(id, cfg.seed))?;
                    for j in 0..l {
                        for k in 0..d {
                            stacked[[i, j, k]] = emb[[j, k]];
                        }
                    }
                }
                Tensor::constant(stacked)
            }
            None => {
                let f = stack.saipe.encode(&batch.x_l)?;
                stack.saipe.embed_guidance(&f)?
            }
        };

        let (tau, l_qf) = if cfg.ablation.no_tp {
            let mid = (cfg.predictor.t_max / 2) as f64;
            (
                Tensor::constant(Arr::from_elem(IxDyn(&[b]), mid)),
                Tensor::scalar(0.0),
            )
        } else {
            let dist = stack.tp.predict(&batch.x_l)?;
            let gumbel = sample_gumbel(&[b, cfg.predictor.t_bins], rng.gen::<u64>());
            let tau_bins = gumbel_combine(
                &dist.logits,
                cfg.predictor.temperature,
                Some(&gumbel),
            )?;
            let tau = bins_to_schedule(&tau_bins, cfg.predictor.t_bins, cfg.predictor.t_max);
            (tau, qf_loss(&dist.qf_pred, &batch.qf)?)
        };

        let z_l = stack.ae.encode(&batch.x_l)?;
        let eps_hat = stack.unet.predict_noise(&z_l, &e_img, &tau)?;
        let z_hat = one_step_restore(&z_l, &eps_hat, &tau, &stack.sched)?;
        let x_hat = stack.ae.decode(&z_hat)?;

        let recon = if cfg.ablation.no_ea {
            let mse = x_hat.mse(&batch.x_h);
            ReconLoss {
                mse: mse.value()[[]],
                dists_edges: 0.0,
                dists_plain: 0.0,
                total: mse,
            }
        } else {
            recon_loss(&extractor, &x_hat, &batch.x_h)?
        };

        let (l_g, pair) = if cfg.ablation.no_lg {
            (Tensor::scalar(0.0), None)
        } else {
            let z_h = stack.ae.encode(&batch.x_h)?;
            let pair = gan_losses(&z_hat, &z_h, &stack.disc, &e_img, &stack.sched, &mut rng)?;
            (pair.l_g.clone(), Some(pair))
        };

        let loss = total_loss(&recon, &l_g, &l_qf, &weights)?;
        let grads_g = loss.total.backward();
        opt_g.step(&gen_params, &grads_g);

        let mut d_val = 0.0;
        if let Some(pair) = pair {
            // The discriminator's gradients come from the same graph; the
            // generator update above changed parameter values, not the
            // values this graph already captured.
            let grads_d = pair.l_d.backward();
            opt_d.step(&disc_params, &grads_d);
            d_val = pair.l_d.value()[[]];
            for _ in 1..cfg.disc_steps_per_gen {
                stack.disc_store.begin_step();
                let z_h = stack.ae.encode(&batch.x_h)?;
                let extra =
                    gan_losses(&z_hat, &z_h, &stack.disc, &e_img, &stack.sched, &mut rng)?;
                let grads_d = extra.l_d.backward();
                opt_d.step(&disc_params, &grads_d);
                d_val = extra.l_d.value()[[]];
            }
        }

        rows.push(Stage2LogRow {
            step,
            total: loss.total.value()[[]],
            recon: loss.recon,
            adv: loss.adv,
            qf: loss.qf,
            disc: d_val,
        });
        steps_run += 1;

        let done = step + 1 == cfg.iters;
        if done || (step + 1) % cfg.freeze_check_every == 0 {
            for (guard, store) in guards.iter().zip([
                &stack.saipe_store,
                &stack.ae_store,
                &stack.unet_store,
            ]) {
                guard.verify(store, step + 1)?;
            }
        }
        if done || (step + 1) % cfg.ckpt_every == 0 {
            save_stage2_ckpt(
                &ckpt_path,
                &snap_cfg,
                step + 1,
                &saipe_hash,
                &ae_hash,
                &stack,
                &opt_g,
                &opt_d,
            )?;
        }
    }

    let mut out = String::from("step,total,recon,adv,qf,disc\n");
    for row in &rows {
        out.push_str(&row.to_csv());
        out.push('\n');
    }
    std::fs::write(&log_path, out)?;

    Ok(Stage2Report {
        ckpt_path,
        log_path,
        steps_run,
        rows,
        frozen_checksums: guards
            .iter()
            .map(|g| (g.name.to_string(), g.checksum.clone()))
            .collect(),
    })
}
