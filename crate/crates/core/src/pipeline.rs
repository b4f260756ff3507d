//! Inference pipeline: load the three archives (prompt extractor,
//! autoencoder, adapted UNet with timestep predictor), pad the input to
//! the stack's spatial granule, run the one-step restoration, crop back.

use std::path::Path;

use ndarray::{Array3, IxDyn};
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;

use crate::ckpt::load_checkpoint;
use crate::config::lcm;
use crate::diffusion::{
    build_schedule, one_step_restore, AeConfig, Autoencoder, NoiseSchedule, Unet,
};
use crate::eval::Restorer;
use crate::image::{image_to_nchw, ImageTensor};
use crate::nn::attention::LoraSpec;
use crate::nn::ParamStore;
use crate::saipe::{Saipe, SaipeConfig};
use crate::tensor::Tensor;
use crate::text::CaptionRecord;
use crate::timestep::{bins_to_schedule, gumbel_combine, TimePredictor};
use crate::train::stage2::{split_tag, SodiffCkptConfig};
use crate::{Error, Result};

/// Frozen restoration stack. Pure after construction; a shared reference
/// can serve any number of images.
pub struct RestorationPipeline {
    saipe: Saipe,
    ae: Autoencoder,
    unet: Unet,
    tp: TimePredictor,
    sched: NoiseSchedule,
    cfg: SodiffCkptConfig,
    ae_cfg: AeConfig,
    saipe_cfg: SaipeConfig,
    _stores: Vec<ParamStore>,
}

impl RestorationPipeline {
    /// Build from the three training artifacts. The adapted-UNet archive
    /// records which prompt extractor and autoencoder it was trained
    /// against; a hash mismatch is an error, not a warning.
    pub fn from_checkpoints(saipe_ckpt: &Path, ae_ckpt: &Path, sodiff_ckpt: &Path) -> Result<Self> {
        let saipe_arch = load_checkpoint(saipe_ckpt)?;
        saipe_arch.expect_kind("saipe")?;
        let ae_arch = load_checkpoint(ae_ckpt)?;
        ae_arch.expect_kind("ae")?;
        let arch = load_checkpoint(sodiff_ckpt)?;
        arch.expect_kind("sodiff")?;

        for (meta_key, other_hash, what) in [
            ("saipe_config_hash", &saipe_arch.config_hash, "prompt extractor"),
            ("ae_config_hash", &ae_arch.config_hash, "autoencoder"),
        ] {
            let recorded = arch.meta.get(meta_key).and_then(|v| v.as_str());
            if recorded != Some(other_hash.as_str()) {
                return Err(Error::Checkpoint(format!(
                    "restoration archive was trained against a different {what}: \
                     recorded {recorded:?}, supplied {other_hash}"
                )));
            }
        }

        let saipe_cfg: SaipeConfig = saipe_arch.typed_config()?;
        let ae_cfg: AeConfig = ae_arch.typed_config()?;
        let cfg: SodiffCkptConfig = arch.typed_config()?;

        let mut saipe_store = ParamStore::new();
        let mut ae_store = ParamStore::new();
        let mut unet_store = ParamStore::new();
        let mut lora_store = ParamStore::new();
        let mut tp_store = ParamStore::new();
        // Weights come from the archives; the init draws are thrown away.
        let mut rng = ChaCha20Rng::seed_from_u64(0);
        let mut lora_rng = ChaCha20Rng::seed_from_u64(0);

        let saipe = Saipe::new(&mut saipe_store, &saipe_cfg, &mut rng)?;
        let ae = Autoencoder::new(&mut ae_store, &ae_cfg, &mut rng)?;
        let mut lora = LoraSpec {
            store: &mut lora_store,
            rank: cfg.lora.rank,
            scale: cfg.lora.scale,
            rng: &mut lora_rng,
        };
        let unet = Unet::new(&mut unet_store, &cfg.unet, &mut rng, Some(&mut lora))?;
        let tp = TimePredictor::new(&mut tp_store, &cfg.predictor, &mut rng)?;

        saipe_store.load_state(&saipe_arch.params)?;
        ae_store.load_state(&ae_arch.params)?;
        unet_store.load_state(&split_tag(&arch.params, "unet"))?;
        lora_store.load_state(&split_tag(&arch.params, "lora"))?;
        tp_store.load_state(&split_tag(&arch.params, "tp"))?;

        let stores = vec![saipe_store, ae_store, unet_store, lora_store, tp_store];
        for store in &stores {
            store.set_all_trainable(false);
        }

        let sched = build_schedule(
            cfg.schedule.t_max,
            cfg.schedule.beta_start,
            cfg.schedule.beta_end,
        )?;
        Ok(Self {
            saipe,
            ae,
            unet,
            tp,
            sched,
            cfg,
            ae_cfg,
            saipe_cfg,
            _stores: stores,
        })
    }

    /// Both spatial dims of any input are padded up to a multiple of this.
    pub fn spatial_multiple(&self) -> usize {
        lcm(
            self.saipe_cfg.spatial_multiple(),
            self.ae_cfg.f * self.cfg.unet.spatial_multiple(),
        )
    }

    /// Timestep choice for one image: deterministic at inference, no
    /// Gumbel noise. Returns (predicted quality factor, tau in schedule
    /// units).
    pub fn predict_qf(&self, img: &ImageTensor) -> Result<(f64, f64)> {
        let (x, _, _) = self.padded(img)?;
        let dist = self.tp.predict(&x)?;
        let tau_bins = gumbel_combine(&dist.logits, self.cfg.predictor.temperature, None)?;
        let tau = bins_to_schedule(&tau_bins, self.cfg.predictor.t_bins, self.cfg.predictor.t_max);
        Ok((dist.qf_pred.value()[[0]], tau.value()[[0]]))
    }

    fn padded(&self, img: &ImageTensor) -> Result<(Tensor, usize, usize)> {
        if img.channels() != 3 {
            return Err(Error::Shape(format!(
                "expected an RGB image, got {} channel(s)",
                img.channels()
            )));
        }
        let (h, w) = (img.height(), img.width());
        if h == 0 || w == 0 {
            return Err(Error::Shape("empty image".into()));
        }
        let m = self.spatial_multiple();
        let ph = h.div_ceil(m) * m;
        let pw = w.div_ceil(m) * m;
        // Replicate the last row/column so block boundaries see natural
        // content instead of a black border.
        let mut data = Array3::zeros((ph, pw, 3));
        for y in 0..ph {
            for x in 0..pw {
                for c in 0..3 {
                    data[[y, x, c]] = img.data[[y.min(h - 1), x.min(w - 1), c]];
                }
            }
        }
        let padded = ImageTensor::new(data, img.color_space);
        Ok((Tensor::constant(image_to_nchw(&padded)), h, w))
    }

    /// One-step restoration of a degraded RGB image, any size.
    pub fn restore_image(&self, img: &ImageTensor) -> Result<ImageTensor> {
        let (x_l, h, w) = self.padded(img)?;

        let f = self.saipe.encode(&x_l)?;
        let e_img = self.saipe.embed_guidance(&f)?;

        let dist = self.tp.predict(&x_l)?;
        let tau_bins = gumbel_combine(&dist.logits, self.cfg.predictor.temperature, None)?;
        let tau = bins_to_schedule(&tau_bins, self.cfg.predictor.t_bins, self.cfg.predictor.t_max);

        let z_l = self.ae.encode(&x_l)?;
        let eps_hat = self.unet.predict_noise(&z_l, &e_img, &tau)?;
        let z_hat = one_step_restore(&z_l, &eps_hat, &tau, &self.sched)?;
        let x_hat = self.ae.decode(&z_hat)?;

        let v = x_hat.value();
        let s = v.shape();
        debug_assert_eq!(&s[..2], &[1, 3]);
        let mut out = Array3::zeros((h, w, 3));
        for y in 0..h {
            for x in 0..w {
                for c in 0..3 {
                    out[[y, x, c]] = v[IxDyn(&[0, c, y, x])];
                }
            }
        }
        Ok(ImageTensor::new(out, img.color_space).clamp01())
    }

    /// Caption-conditioned variant: replaces the image-derived guidance
    /// with a precomputed text embedding of matching shape.
    pub fn restore_with_prompt(
        &self,
        img: &ImageTensor,
        caption: &CaptionRecord,
    ) -> Result<ImageTensor> {
        let (x_l, h, w) = self.padded(img)?;
        let shape = caption.embedding.shape().to_vec();
        let e = caption
            .embedding
            .clone()
            .into_shape_with_order(IxDyn(&[1, shape[0], shape[1]]))
            .map_err(|e| Error::Shape(e.to_string()))?;
        let e_img = Tensor::constant(e);

        let dist = self.tp.predict(&x_l)?;
        let tau_bins = gumbel_combine(&dist.logits, self.cfg.predictor.temperature, None)?;
        let tau = bins_to_schedule(&tau_bins, self.cfg.predictor.t_bins, self.cfg.predictor.t_max);

        let z_l = self.ae.encode(&x_l)?;
        let eps_hat = self.unet.predict_noise(&z_l, &e_img, &tau)?;
        let z_hat = one_step_restore(&z_l, &eps_hat, &tau, &self.sched)?;
        let x_hat = self.ae.decode(&z_hat)?;

        let v = x_hat.value();
        let mut out = Array3::zeros((h, w, 3));
        for y in 0..h {
            for x in 0..w {
                for c in 0..3 {
                    out[[y, x, c]] = v[IxDyn(&[0, c, y, x])];
                }
            }
        }
        Ok(ImageTensor::new(out, img.color_space).clamp01())
    }
}

impl Restorer for RestorationPipeline {
    fn restore(&self, _id: &str, lq: &ImageTensor, _qf: u8) -> Result<ImageTensor> {
        self.restore_image(lq)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::synthetic_corpus;
    use crate::train::stage2::tests::{frozen_ckpts, tiny_cfg};
    use crate::train::run_stage2;

    fn trained_pipeline(dir: &Path) -> RestorationPipeline {
        let cfg = tiny_cfg(2);
        let corpus = synthetic_corpus(2, 24, 24, 81);
        let (saipe_path, ae_path) = frozen_ckpts(&cfg, dir);
        let report = run_stage2(&cfg, &corpus, &saipe_path, &ae_path, dir, None).unwrap();
        RestorationPipeline::from_checkpoints(&saipe_path, &ae_path, &report.ckpt_path).unwrap()
    }

    #[test]
    fn restores_arbitrary_sizes_and_is_deterministic() {
        let dir = tempfile::tempdir().unwrap();
        let pipe = trained_pipeline(dir.path());
        let m = pipe.spatial_multiple();
        assert_eq!(m, 16);

        let corpus = synthetic_corpus(1, 21, 27, 82);
        let img = &corpus[0].1;
        let out = pipe.restore_image(img).unwrap();
        assert_eq!(out.height(), 21);
        assert_eq!(out.width(), 27);
        for &v in out.data.iter() {
            assert!((0.0..=1.0).contains(&v));
        }
        let again = pipe.restore_image(img).unwrap();
        assert_eq!(out.data, again.data, "inference must be deterministic");
    }

    #[test]
    fn qf_prediction_in_range() {
        let dir = tempfile::tempdir().unwrap();
        let pipe = trained_pipeline(dir.path());
        let corpus = synthetic_corpus(1, 32, 32, 83);
        let (qf, tau) = pipe.predict_qf(&corpus[0].1).unwrap();
        assert!((1.0..=100.0).contains(&qf), "qf {qf}");
        let hi = (pipe.cfg.predictor.t_max - 1) as f64;
        assert!((0.0..=hi).contains(&tau), "tau {tau}");
    }

    #[test]
    fn mismatched_archives_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = tiny_cfg(1);
        let corpus = synthetic_corpus(1, 24, 24, 84);
        let (saipe_path, ae_path) = frozen_ckpts(&cfg, dir.path());
        let report =
            run_stage2(&cfg, &corpus, &saipe_path, &ae_path, dir.path(), None).unwrap();

        // A different prompt extractor: same shape of archive, other hash.
        let mut other = cfg.clone();
        other.saipe.query_count = 8;
        let dir2 = tempfile::tempdir().unwrap();
        let (other_saipe, _) = frozen_ckpts(&other, dir2.path());
        let err = RestorationPipeline::from_checkpoints(&other_saipe, &ae_path, &report.ckpt_path)
            .err()
            .expect("mismatched prompt extractor must be rejected");
        assert!(matches!(err, Error::Checkpoint(_)), "got {err}");
        assert!(err.to_string().contains("prompt extractor"), "{err}");
    }
}
