//! Run configuration: one TOML-serializable struct covering every stage,
//! with stage-specific default recipes and dotted-path overrides.

use std::path::Path;

use crate::diffusion::{AeConfig, LoraConfig, UnetConfig};
use crate::error::{Error, Result};
use crate::losses::{DiscConfig, LossWeights};
use crate::saipe::SaipeConfig;
use crate::timestep::TimePredictorConfig;
use crate::train::{OptConfig, OptKind};

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Saipe,
    Sodiff,
    Autoencoder,
}

/// Component switches for the ablation table. Every flag removes exactly one
/// ingredient and leaves the rest of the recipe untouched.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct AblationFlags {
    /// Drop the text-alignment term from stage-1 training.
    pub no_align: bool,
    /// Replace the image prompt with hashed text-caption embeddings.
    pub text_only_prompt: bool,
    /// Replace the learned timestep with a fixed mid-schedule constant.
    pub no_tp: bool,
    /// Zero the quality-regression weight.
    pub no_lqf: bool,
    /// Reduce reconstruction to plain MSE.
    pub no_ea: bool,
    /// Disable the adversarial pair; the discriminator is never updated.
    pub no_lg: bool,
}

impl AblationFlags {
    pub fn any(&self) -> bool {
        self.no_align || self.text_only_prompt || self.no_tp || self.no_lqf || self.no_ea || self.no_lg
    }
}

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct ScheduleConfig {
    pub t_max: usize,
    pub beta_start: f64,
    pub beta_end: f64,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self { t_max: 1000, beta_start: 0.00085, beta_end: 0.012 }
    }
}

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct TrainConfig {
    pub stage: Stage,
    pub optimizer: OptKind,
    pub lr: f64,
    pub weight_decay: f64,
    pub batch: usize,
    pub iters: u64,
    pub seed: u64,
    pub qf_range: [u8; 2],
    pub crop: usize,
    pub flips: bool,
    pub lambda_align: f64,
    pub weights: LossWeights,
    pub ckpt_every: u64,
    pub freeze_check_every: u64,
    pub disc_steps_per_gen: usize,
    pub log_every: u64,
    pub ablation: AblationFlags,
    pub schedule: ScheduleConfig,
    pub saipe: SaipeConfig,
    pub ae: AeConfig,
    pub unet: UnetConfig,
    pub lora: LoraConfig,
    pub predictor: TimePredictorConfig,
    pub disc: DiscConfig,
}

/// Desk-scale module set shared by the stage recipes: small enough to train
/// on one core, wide enough that the losses have something to optimize.
fn toy_modules() -> (SaipeConfig, AeConfig, UnetConfig, DiscConfig, TimePredictorConfig) {
    let saipe = SaipeConfig::tiny();
    let ae = AeConfig { f: 4, c_z: 4, width: 16, kl_weight: 1e-6 };
    let unet = UnetConfig {
        c_z: ae.c_z,
        channels: vec![16, 32],
        prompt_dim: saipe.embed_dim,
        heads: 4,
        t_emb_dim: 32,
    };
    let disc = DiscConfig {
        c_z: ae.c_z,
        channels: vec![16, 32],
        t_emb_dim: 32,
        prompt_dim: saipe.embed_dim,
    };
    let predictor = TimePredictorConfig { t_bins: 50, t_max: 1000, width: 16, temperature: 1.0 };
    (saipe, ae, unet, disc, predictor)
}

impl TrainConfig {
    /// Stage-1 recipe: joint prompt-extractor training.
    pub fn stage1() -> Self {
        let (saipe, ae, unet, disc, predictor) = toy_modules();
        Self {
            stage: Stage::Saipe,
            optimizer: OptKind::Adam,
            lr: 2e-4,
            weight_decay: 0.0,
            batch: 4,
            iters: 500,
            seed: 0,
            qf_range: [5, 95],
            crop: 64,
            flips: true,
            lambda_align: 0.5,
            weights: LossWeights::default(),
            ckpt_every: 250,
            freeze_check_every: 50,
            disc_steps_per_gen: 1,
            log_every: 1,
            ablation: AblationFlags::default(),
            schedule: ScheduleConfig::default(),
            saipe,
            ae,
            unet,
            lora: LoraConfig::default(),
            predictor,
            disc,
        }
    }

    /// Stage-2 recipe: adapter + predictor + discriminator training against
    /// frozen stage-1 modules.
    pub fn stage2() -> Self {
        Self {
            stage: Stage::Sodiff,
            optimizer: OptKind::AdamW,
            lr: 1e-5,
            weight_decay: 1e-2,
            iters: 1000,
            ..Self::stage1()
        }
    }

    /// Latent autoencoder pretraining recipe.
    pub fn autoencoder() -> Self {
        Self {
            stage: Stage::Autoencoder,
            lr: 1e-3,
            iters: 300,
            ..Self::stage1()
        }
    }

    pub fn for_stage(stage: Stage) -> Self {
        match stage {
            Stage::Saipe => Self::stage1(),
            Stage::Sodiff => Self::stage2(),
            Stage::Autoencoder => Self::autoencoder(),
        }
    }

    pub fn opt_config(&self) -> OptConfig {
        match self.optimizer {
            OptKind::Adam => OptConfig::adam(self.lr),
            OptKind::AdamW => OptConfig::adamw(self.lr, self.weight_decay),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.opt_config().validate()?;
        if self.batch == 0 {
            return Err(Error::Domain("batch must be at least 1".into()));
        }
        if self.crop == 0 {
            return Err(Error::Domain("crop must be positive".into()));
        }
        let [lo, hi] = self.qf_range;
        if lo < 1 || hi > 100 || lo > hi {
            return Err(Error::Domain(format!(
                "qf_range [{lo},{hi}] must sit inside [1,100] with lo <= hi"
            )));
        }
        if self.lambda_align < 0.0 {
            return Err(Error::Domain("lambda_align must be non-negative".into()));
        }
        self.weights.validate()?;
        if self.disc_steps_per_gen == 0 {
            return Err(Error::Domain("disc_steps_per_gen must be at least 1".into()));
        }
        if self.log_every == 0 {
            return Err(Error::Domain("log_every must be at least 1".into()));
        }
        if self.schedule.t_max < 1 {
            return Err(Error::Domain("schedule t_max must be at least 1".into()));
        }
        self.saipe.validate()?;
        self.ae.validate()?;
        self.unet.validate()?;
        self.predictor.validate()?;
        self.disc.validate()?;

        match self.stage {
            Stage::Saipe => {
                if self.crop % self.saipe.spatial_multiple() != 0 {
                    return Err(Error::Domain(format!(
                        "crop {} must be a multiple of {} for the prompt extractor",
                        self.crop,
                        self.saipe.spatial_multiple()
                    )));
                }
            }
            Stage::Autoencoder => {
                if self.crop % self.ae.f != 0 {
                    return Err(Error::Domain(format!(
                        "crop {} must be a multiple of the autoencoder factor {}",
                        self.crop, self.ae.f
                    )));
                }
            }
            Stage::Sodiff => {
                let latent_multiple = self.ae.f * self.unet.spatial_multiple();
                let need = lcm(self.saipe.spatial_multiple(), latent_multiple);
                if self.crop % need != 0 {
                    return Err(Error::Domain(format!(
                        "crop {} must be a multiple of {need} (prompt extractor x latent grid)",
                        self.crop
                    )));
                }
                if self.unet.c_z != self.ae.c_z || self.disc.c_z != self.ae.c_z {
                    return Err(Error::Domain(
                        "denoiser and discriminator latent channels must match the autoencoder".into(),
                    ));
                }
                if self.unet.prompt_dim != self.saipe.embed_dim
                    || self.disc.prompt_dim != self.saipe.embed_dim
                {
                    return Err(Error::Domain(
                        "prompt width must match the extractor's embedding dim".into(),
                    ));
                }
                if self.predictor.t_max != self.schedule.t_max {
                    return Err(Error::Domain(format!(
                        "predictor range {} must match schedule length {}",
                        self.predictor.t_max, self.schedule.t_max
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Domain(format!("config encode: {e}")))
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self =
            toml::from_str(text).map_err(|e| Error::Domain(format!("config parse: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml(&std::fs::read_to_string(path)?)
    }

    /// Apply `key=value` overrides with dotted paths (`lr=1e-3`,
    /// `saipe.c_f=32`, `ablation.no_lg=true`). Values parse as JSON first,
    /// falling back to strings, so numbers, bools, and arrays all work.
    pub fn apply_overrides(&mut self, pairs: &[(String, String)]) -> Result<()> {
        let mut tree = serde_json::to_value(&*self)?;
        for (key, raw) in pairs {
            let mut node = &mut tree;
            let segments: Vec<&str> = key.split('.').collect();
            for (i, seg) in segments.iter().enumerate() {
                let map = node.as_object_mut().ok_or_else(|| {
                    Error::Domain(format!("override {key}: {} is not a table", segments[..i].join(".")))
                })?;
                node = map
                    .get_mut(*seg)
                    .ok_or_else(|| Error::Domain(format!("override {key}: unknown field {seg}")))?;
                if i + 1 == segments.len() {
                    *node = serde_json::from_str(raw)
                        .unwrap_or_else(|_| serde_json::Value::String(raw.clone()));
                }
            }
        }
        let updated: Self = serde_json::from_value(tree)
            .map_err(|e| Error::Domain(format!("override produced an invalid config: {e}")))?;
        updated.validate()?;
        *self = updated;
        Ok(())
    }
}

pub(crate) fn lcm(a: usize, b: usize) -> usize {
    fn gcd(mut a: usize, mut b: usize) -> usize {
        while b != 0 {
            (a, b) = (b, a % b);
        }
        a
    }
    a / gcd(a, b) * b
}
