//! Small convolutional autoencoder that maps images to the latent space the
//! denoiser works in. Pre-trained once with L2 plus a small KL penalty on
//! the posterior moments, then frozen for stage 2.

use rand_chacha::ChaCha20Rng;

use crate::error::{Error, Result};
use crate::nn::params::ParamStore;
use crate::nn::{Conv2dLayer, Init};
use crate::tensor::{Arr, Tensor};

#[derive(Clone, Debug, serde::Serialize, serde::Deserialize)]
pub struct AeConfig {
    /// Spatial downsampling factor, a power of two.
    pub f: usize,
    /// Latent channels.
    pub c_z: usize,
    /// Base conv width.
    pub width: usize,
    /// Weight on the KL term during pre-training.
    pub kl_weight: f64,
}

impl Default for AeConfig {
    fn default() -> Self {
        Self {
            f: 4,
            c_z: 4,
            width: 32,
            kl_weight: 1e-6,
        }
    }
}

impl AeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.f < 2 || !self.f.is_power_of_two() {
            return Err(Error::Domain(format!(
                "downsampling factor {} must be a power of two >= 2",
                self.f
            )));
        }
        if self.c_z == 0 || self.width == 0 {
            return Err(Error::Domain("c_z and width must be positive".into()));
        }
        if self.kl_weight < 0.0 {
            return Err(Error::Domain("kl_weight must be >= 0".into()));
        }
        Ok(())
    }
}

pub struct Autoencoder {
    enc_in: Conv2dLayer,
    enc_down: Vec<Conv2dLayer>,
    mu_head: Conv2dLayer,
    logvar_head: Conv2dLayer,
    dec_in: Conv2dLayer,
    dec_up: Vec<Conv2dLayer>,
    dec_out: Conv2dLayer,
    cfg: AeConfig,
}

impl Autoencoder {
    pub fn new(store: &mut ParamStore, cfg: &AeConfig, rng: &mut ChaCha20Rng) -> Result<Self> {
        cfg.validate()?;
        let init = Init::He;
        let w = cfg.width;
        let n_down = cfg.f.trailing_zeros() as usize;
        let enc_in = Conv2dLayer::new(store, "ae.enc_in", 3, w, 3, 1, 1, init, rng);
        let enc_down = (0..n_down)
            .map(|i| {
                Conv2dLayer::new(store, &format!("ae.enc_down{i}"), w, w, 3, 2, 1, init, rng)
            })
            .collect();
        let mu_head = Conv2dLayer::new(store, "ae.mu", w, cfg.c_z, 3, 1, 1, init, rng);
        let logvar_head = Conv2dLayer::new(store, "ae.logvar", w, cfg.c_z, 3, 1, 1, init, rng);
        let dec_in = Conv2dLayer::new(store, "ae.dec_in", cfg.c_z, w, 3, 1, 1, init, rng);
        let dec_up = (0..n_down)
            .map(|i| Conv2dLayer::new(store, &format!("ae.dec_up{i}"), w, w, 3, 1, 1, init, rng))
            .collect();
        let dec_out = Conv2dLayer::new(store, "ae.dec_out", w, 3, 3, 1, 1, init, rng);
        Ok(Self {
            enc_in,
            enc_down,
            mu_head,
            logvar_head,
            dec_in,
            dec_up,
            dec_out,
            cfg: cfg.clone(),
        })
    }

    pub fn config(&self) -> &AeConfig {
        &self.cfg
    }

    fn check_image(&self, x: &Tensor) -> Result<()> {
        let s = x.shape();
        if s.len() != 4 || s[1] != 3 {
            return Err(Error::Shape(format!("expected [B, 3, H, W], got {s:?}")));
        }
        if s[2] % self.cfg.f != 0 || s[3] % self.cfg.f != 0 {
            return Err(Error::Shape(format!(
                "image {}x{} not divisible by f={}",
                s[2], s[3], self.cfg.f
            )));
        }
        Ok(())
    }

    /// Posterior moments of the latent, each [B, c_z, H/f, W/f].
    pub fn encode_moments(&self, x: &Tensor) -> Result<(Tensor, Tensor)> {
        self.check_image(x)?;
        let mut h = self.enc_in.forward(x).gelu();
        for c in &self.enc_down {
            h = c.forward(&h).gelu();
        }
        Ok((self.mu_head.forward(&h), self.logvar_head.forward(&h)))
    }

    /// Deterministic latent (the posterior mean); the stage-2 path.
    pub fn encode(&self, x: &Tensor) -> Result<Tensor> {
        Ok(self.encode_moments(x)?.0)
    }

    /// mu + exp(logvar/2) * noise, for pre-training. The caller supplies
    /// the noise so sampling stays seeded.
    pub fn sample_latent(mu: &Tensor, logvar: &Tensor, noise: &Arr) -> Tensor {
        let std = logvar.scale(0.5).exp();
        mu.add(&std.mul(&Tensor::constant(noise.clone())))
    }

    /// [B, c_z, h, w] -> [B, 3, f*h, f*w].
    pub fn decode(&self, z: &Tensor) -> Result<Tensor> {
        let s = z.shape();
        if s.len() != 4 || s[1] != self.cfg.c_z {
            return Err(Error::Shape(format!(
                "expected [B, {}, h, w] latent, got {s:?}",
                self.cfg.c_z
            )));
        }
        let mut h = self.dec_in.forward(z).gelu();
        for c in &self.dec_up {
            h = c.forward(&h.upsample_nearest2x()).gelu();
        }
        Ok(self.dec_out.forward(&h))
    }

    /// Mean KL between N(mu, exp(logvar)) and N(0, 1) per latent entry.
    pub fn kl(mu: &Tensor, logvar: &Tensor) -> Tensor {
        let term = mu
            .sqr()
            .add(&logvar.exp())
            .sub(&logvar)
            .add_scalar(-1.0)
            .scale(0.5);
        term.mean()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::IxDyn;
    use rand::{Rng, SeedableRng};

    fn rand_arr(rng: &mut ChaCha20Rng, shape: &[usize]) -> Arr {
        Arr::from_shape_fn(IxDyn(shape), |_| rng.gen_range(-1.0..1.0))
    }

    fn build() -> (ParamStore, Autoencoder) {
        let mut store = ParamStore::new();
        let mut rng = ChaCha20Rng::seed_from_u64(0);
        let ae = Autoencoder::new(&mut store, &AeConfig::default(), &mut rng).unwrap();
        (store, ae)
    }

    #[test]
    fn shape_contract() {
        let (_s, ae) = build();
        let mut rng = ChaCha20Rng::seed_from_u64(1);
        let x = Tensor::constant(rand_arr(&mut rng, &[1, 3, 64, 64]));
        let z = ae.encode(&x).unwrap();
        assert_eq!(z.shape(), &[1, 4, 16, 16]);
        let rec = ae.decode(&z).unwrap();
        assert_eq!(rec.shape(), &[1, 3, 64, 64]);
    }

    #[test]
    fn indivisible_dims_rejected() {
        let (_s, ae) = build();
        let x = Tensor::constant(Arr::zeros(IxDyn(&[1, 3, 30, 32])));
        assert!(ae.encode(&x).is_err());
        let z = Tensor::constant(Arr::zeros(IxDyn(&[1, 5, 8, 8])));
        assert!(ae.decode(&z).is_err());
    }

    #[test]
    fn kl_closed_forms() {
        let zeros = Tensor::constant(Arr::zeros(IxDyn(&[2, 4, 3, 3])));
        assert_eq!(Autoencoder::kl(&zeros, &zeros).item(), 0.0);
        let ones = Tensor::constant(Arr::ones(IxDyn(&[2, 4, 3, 3])));
        let kl = Autoencoder::kl(&ones, &zeros).item();
        assert!((kl - 0.5).abs() < 1e-14);
    }

    #[test]
    fn zero_noise_sampling_is_mean() {
        let mut rng = ChaCha20Rng::seed_from_u64(2);
        let mu = Tensor::constant(rand_arr(&mut rng, &[1, 4, 2, 2]));
        let logvar = Tensor::constant(rand_arr(&mut rng, &[1, 4, 2, 2]));
        let z = Autoencoder::sample_latent(&mu, &logvar, &Arr::zeros(IxDyn(&[1, 4, 2, 2])));
        assert_eq!(z.value(), mu.value());
    }

    #[test]
    fn invalid_config_rejected() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha20Rng::seed_from_u64(3);
        for bad in [
            AeConfig {
                f: 3,
                ..AeConfig::default()
            },
            AeConfig {
                f: 1,
                ..AeConfig::default()
            },
            AeConfig {
                c_z: 0,
                ..AeConfig::default()
            },
        ] {
            assert!(Autoencoder::new(&mut store, &bad, &mut rng).is_err());
        }
    }

    #[test]
    fn training_objective_gradcheck() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha20Rng::seed_from_u64(4);
        let cfg = AeConfig {
            f: 2,
            c_z: 2,
            width: 4,
            kl_weight: 1e-3,
        };
        let ae = Autoencoder::new(&mut store, &cfg, &mut rng).unwrap();
        let x = rand_arr(&mut rng, &[1, 3, 8, 8]);
        let noise = rand_arr(&mut rng, &[1, 2, 4, 4]);

        let eval = |store: &ParamStore| {
            store.begin_step();
            let xt = Tensor::constant(x.clone());
            let (mu, logvar) = ae.encode_moments(&xt).unwrap();
            let z = Autoencoder::sample_latent(&mu, &logvar, &noise);
            let rec = ae.decode(&z).unwrap();
            let loss = rec
                .mse(&xt)
                .add(&Autoencoder::kl(&mu, &logvar).scale(cfg.kl_weight));
            let g = loss.backward();
            (loss.item(), g)
        };

        let params = store.trainable();
        let (_, grads) = eval(&store);
        let sampled: Vec<_> = params
            .iter()
            .step_by((params.len() / 6).max(1))
            .take(6)
            .filter_map(|p| {
                p.grad(&grads)
                    .map(|g| (p.clone(), g.iter().next().copied().unwrap()))
            })
            .collect();
        assert!(sampled.len() >= 4);
        for (p, g) in sampled {
            let h = 1e-5;
            let orig = p.value();
            let mut plus = orig.clone();
            *plus.iter_mut().next().unwrap() += h;
            p.set_value(plus);
            let (fp, _) = eval(&store);
            let mut minus = orig.clone();
            *minus.iter_mut().next().unwrap() -= h;
            p.set_value(minus);
            let (fm, _) = eval(&store);
            p.set_value(orig);
            let fd = (fp - fm) / (2.0 * h);
            if g.abs() < 1e-10 && fd.abs() < 1e-7 {
                continue;
            }
            let e = crate::tensor::gradcheck::rel_err(g, fd);
            assert!(e < 1e-3, "param {} grad {g} vs fd {fd} rel {e}", p.name());
        }
    }
}
