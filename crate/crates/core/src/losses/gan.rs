//! Latent-space adversarial pair. The discriminator is the denoiser's
//! encoder half with a pooled sigmoid head, judging noised latents F(z,t)
//! at a random timestep, conditioned on t and on the pooled image prompt.

use ndarray::IxDyn;
use rand::Rng;
use rand_chacha::ChaCha20Rng;

use crate::diffusion::unet::{groups_for, ResBlock};
use crate::diffusion::NoiseSchedule;
use crate::error::{Error, Result};
use crate::nn::{init, timestep_embedding, Conv2dLayer, GroupNorm, Init, Linear, ParamStore};
use crate::tensor::{Arr, Tensor};

const PROB_EPS: f64 = 1e-6;

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct DiscConfig {
    pub c_z: usize,
    pub channels: Vec<usize>,
    pub t_emb_dim: usize,
    pub prompt_dim: usize,
}

impl Default for DiscConfig {
    fn default() -> Self {
        Self { c_z: 4, channels: vec![32, 64], t_emb_dim: 64, prompt_dim: 64 }
    }
}

impl DiscConfig {
    pub fn tiny() -> Self {
        Self { c_z: 2, channels: vec![4, 8], t_emb_dim: 8, prompt_dim: 8 }
    }

    pub fn validate(&self) -> Result<()> {
        if self.channels.is_empty() {
            return Err(Error::Domain("discriminator needs at least one level".into()));
        }
        if self.c_z == 0 || self.t_emb_dim == 0 || self.prompt_dim == 0 {
            return Err(Error::Domain("discriminator dims must be positive".into()));
        }
        if self.t_emb_dim % 2 != 0 {
            return Err(Error::Domain("t_emb_dim must be even".into()));
        }
        Ok(())
    }
}

/// Conditional latent classifier. The head's final layer is zero-initialized
/// so an untrained discriminator outputs exactly 0.5 everywhere.
pub struct Discriminator {
    cfg: DiscConfig,
    in_conv: Conv2dLayer,
    t_lin1: Linear,
    t_lin2: Linear,
    blocks: Vec<ResBlock>,
    downs: Vec<Conv2dLayer>,
    out_norm: GroupNorm,
    e_proj: Linear,
    head: Linear,
}

impl Discriminator {
    pub fn new(store: &mut ParamStore, cfg: &DiscConfig, rng: &mut ChaCha20Rng) -> Result<Self> {
        cfg.validate()?;
        let init = Init::He;
        let ch = &cfg.channels;
        let td = cfg.t_emb_dim;
        let in_conv = Conv2dLayer::new(store, "disc.in", cfg.c_z, ch[0], 3, 1, 1, init, rng);
        let t_lin1 = Linear::new(store, "disc.t1", td, td, true, init, rng);
        let t_lin2 = Linear::new(store, "disc.t2", td, td, true, init, rng);
        let mut blocks = Vec::new();
        let mut downs = Vec::new();
        for (i, &c) in ch.iter().enumerate() {
            blocks.push(ResBlock::new(store, &format!("disc.res{i}"), c, c, td, rng));
            if i + 1 < ch.len() {
                downs.push(Conv2dLayer::new(
                    store,
                    &format!("disc.down{i}"),
                    c,
                    ch[i + 1],
                    3,
                    2,
                    1,
                    init,
                    rng,
                ));
            }
        }
        let last = *ch.last().unwrap();
        let out_norm = GroupNorm::new(store, "disc.out_norm", groups_for(last), last);
        let e_proj = Linear::new(store, "disc.e_proj", cfg.prompt_dim, last, true, init, rng);
        let head = Linear::new(store, "disc.head", 2 * last, 1, true, Init::Zeros, rng);
        Ok(Self { cfg: cfg.clone(), in_conv, t_lin1, t_lin2, blocks, downs, out_norm, e_proj, head })
    }

    /// `z`: [B,c_z,H,W] noised latent, `t`: [B] timesteps, `e_img`: [B,L,D]
    /// prompt tokens. Returns per-element real probabilities in (0,1).
    pub fn forward(&self, z: &Tensor, t: &Tensor, e_img: &Tensor) -> Result<Tensor> {
        let zs = z.shape();
        if zs.len() != 4 || zs[1] != self.cfg.c_z {
            return Err(Error::Shape(format!(
                "discriminator expects [B,{},H,W], got {zs:?}",
                self.cfg.c_z
            )));
        }
        let b = zs[0];
        if t.shape() != [b] {
            return Err(Error::Shape(format!("t shape {:?}, expected [{b}]", t.shape())));
        }
        let es = e_img.shape();
        if es.len() != 3 || es[0] != b || es[2] != self.cfg.prompt_dim {
            return Err(Error::Shape(format!(
                "prompt shape {es:?}, expected [{b},L,{}]",
                self.cfg.prompt_dim
            )));
        }

        let t_emb = timestep_embedding(t, self.cfg.t_emb_dim);
        let t_emb = self.t_lin2.forward(&self.t_lin1.forward(&t_emb).silu());

        let mut h = self.in_conv.forward(z);
        for (i, block) in self.blocks.iter().enumerate() {
            h = block.forward(&h, &t_emb);
            if i < self.downs.len() {
                h = self.downs[i].forward(&h);
            }
        }
        let h = self.out_norm.forward(&h).silu();
        let sh = h.shape();
        let pooled = h
            .reshape(&[b, sh[1], sh[2] * sh[3]])
            .mean_axis_keep(2)
            .reshape(&[b, sh[1]]);
        let e_pooled = e_img.mean_axis_keep(1).reshape(&[b, self.cfg.prompt_dim]);
        let e_feat = self.e_proj.forward(&e_pooled);
        let joint = Tensor::concat(&[pooled, e_feat], 1);
        Ok(self.head.forward(&joint).sigmoid().reshape(&[b]))
    }
}

/// Forward noising at integer timesteps: sqrt(a_t)·z + sqrt(1−a_t)·ε.
pub fn diffuse(z: &Tensor, t: &[usize], sched: &NoiseSchedule, eps: &Arr) -> Result<Tensor> {
    let zs = z.shape();
    if zs.is_empty() || zs[0] != t.len() {
        return Err(Error::Shape(format!(
            "batch {} timesteps vs latent {zs:?}",
            t.len()
        )));
    }
    if eps.shape() != &zs[..] {
        return Err(Error::Shape(format!(
            "noise shape {:?} vs latent {zs:?}",
            eps.shape()
        )));
    }
    let mut bshape = vec![1usize; zs.len()];
    bshape[0] = zs[0];
    let mut sa = Arr::zeros(IxDyn(&bshape));
    let mut so = Arr::zeros(IxDyn(&bshape));
    for (i, &ti) in t.iter().enumerate() {
        if ti >= sched.t_max {
            return Err(Error::Domain(format!(
                "timestep {ti} outside schedule of length {}",
                sched.t_max
            )));
        }
        let ab = sched.alpha_bar[ti];
        sa.as_slice_mut().unwrap()[i] = ab.sqrt();
        so.as_slice_mut().unwrap()[i] = (1.0 - ab).sqrt();
    }
    Ok(z
        .mul(&Tensor::constant(sa))
        .add(&Tensor::constant(eps.clone()).mul(&Tensor::constant(so))))
}

fn clamped_log(p: &Tensor) -> Tensor {
    p.clamp(PROB_EPS, 1.0 - PROB_EPS).ln()
}

/// Non-saturating generator loss −E[log D(fake)] from fake probabilities.
pub fn nonsat_g(d_fake: &Tensor) -> Tensor {
    clamped_log(d_fake).mean().neg()
}

/// Discriminator loss −E[log(1−D(fake))] − E[log D(real)].
pub fn nonsat_d(d_fake: &Tensor, d_real: &Tensor) -> Tensor {
    let fake_term = clamped_log(&d_fake.neg().add_scalar(1.0)).mean().neg();
    let real_term = clamped_log(d_real).mean().neg();
    fake_term.add(&real_term)
}

pub struct GanPair {
    /// Generator objective; gradients reach the restored latent.
    pub l_g: Tensor,
    /// Discriminator objective; the restored latent enters detached.
    pub l_d: Tensor,
}

/// Evaluate both adversarial objectives. Each discriminator call sees a
/// freshly drawn timestep per batch element and fresh Gaussian noise.
pub fn gan_losses(
    z_fake: &Tensor,
    z_real: &Tensor,
    disc: &Discriminator,
    e_img: &Tensor,
    sched: &NoiseSchedule,
    rng: &mut ChaCha20Rng,
) -> Result<GanPair> {
    if z_fake.shape() != z_real.shape() {
        return Err(Error::Shape(format!(
            "fake latent {:?} vs real latent {:?}",
            z_fake.shape(),
            z_real.shape()
        )));
    }
    let b = z_fake.shape()[0];
    let draw = |rng: &mut ChaCha20Rng| -> (Vec<usize>, Arr, Tensor) {
        let t: Vec<usize> = (0..b).map(|_| rng.gen_range(0..sched.t_max)).collect();
        let eps = init::normal(rng, &z_fake.shape(), 1.0);
        let t_arr = Arr::from_shape_vec(IxDyn(&[b]), t.iter().map(|&v| v as f64).collect()).unwrap();
        (t, eps, Tensor::constant(t_arr))
    };

    let (t_g, eps_g, t_g_tensor) = draw(rng);
    let d_fake_for_g = disc.forward(&diffuse(z_fake, &t_g, sched, &eps_g)?, &t_g_tensor, e_img)?;
    let l_g = nonsat_g(&d_fake_for_g);

    let (t_f, eps_f, t_f_tensor) = draw(rng);
    let z_fake_d = z_fake.detach();
    let d_fake = disc.forward(&diffuse(&z_fake_d, &t_f, sched, &eps_f)?, &t_f_tensor, e_img)?;
    let (t_r, eps_r, t_r_tensor) = draw(rng);
    let d_real = disc.forward(&diffuse(z_real, &t_r, sched, &eps_r)?, &t_r_tensor, e_img)?;
    let l_d = nonsat_d(&d_fake, &d_real);

    Ok(GanPair { l_g, l_d })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffusion::build_schedule;
    use rand::SeedableRng;

    fn scalar_vec(vals: &[f64]) -> Tensor {
        Tensor::constant(Arr::from_shape_vec(IxDyn(&[vals.len()]), vals.to_vec()).unwrap())
    }

    #[test]
    fn half_probabilities_give_log2_losses() {
        let d = scalar_vec(&[0.5, 0.5, 0.5]);
        let ln2 = std::f64::consts::LN_2;
        assert!((nonsat_g(&d).item() - ln2).abs() < 1e-12);
        assert!((nonsat_d(&d, &d).item() - 2.0 * ln2).abs() < 1e-12);
    }

    #[test]
    fn generator_wins_limit() {
        let d = scalar_vec(&[0.999_999]);
        let l = nonsat_g(&d).item();
        assert!(l > 0.0 && l < 1e-5, "L_G near the winning limit: {l}");
    }

    #[test]
    fn discriminator_wins_limit() {
        let fake = scalar_vec(&[1e-9]);
        let real = scalar_vec(&[1.0 - 1e-9]);
        let l = nonsat_d(&fake, &real).item();
        assert!(l > 0.0 && l < 1e-4, "L_D near the winning limit: {l}");
    }

    #[test]
    fn degenerate_probabilities_stay_finite() {
        let zero = scalar_vec(&[0.0]);
        let one = scalar_vec(&[1.0]);
        assert!(nonsat_g(&zero).item().is_finite());
        assert!(nonsat_d(&one, &zero).item().is_finite());
    }

    #[test]
    fn fresh_discriminator_outputs_half_and_losses_match() {
        let mut rng = ChaCha20Rng::seed_from_u64(3);
        let mut store = ParamStore::new();
        let cfg = DiscConfig::tiny();
        let disc = Discriminator::new(&mut store, &cfg, &mut rng).unwrap();
        let sched = build_schedule(50, 0.001, 0.02).unwrap();

        let z_fake = Tensor::constant(init::normal(&mut rng, &[2, 2, 8, 8], 1.0));
        let z_real = Tensor::constant(init::normal(&mut rng, &[2, 2, 8, 8], 1.0));
        let e_img = Tensor::constant(init::normal(&mut rng, &[2, 5, 8], 0.5));

        let t = Tensor::constant(Arr::from_shape_vec(IxDyn(&[2]), vec![3.0, 40.0]).unwrap());
        let probs = disc.forward(&z_fake, &t, &e_img).unwrap();
        for &p in probs.value().iter() {
            assert!((p - 0.5).abs() < 1e-12, "zero-init head must output 0.5, got {p}");
        }

        let pair = gan_losses(&z_fake, &z_real, &disc, &e_img, &sched, &mut rng).unwrap();
        let ln2 = std::f64::consts::LN_2;
        assert!((pair.l_g.item() - ln2).abs() < 1e-9);
        assert!((pair.l_d.item() - 2.0 * ln2).abs() < 1e-9);
    }

    #[test]
    fn diffuse_matches_closed_form_per_element() {
        let sched = build_schedule(10, 0.01, 0.1).unwrap();
        let z = Tensor::constant(Arr::from_shape_vec(IxDyn(&[2, 1, 1, 1]), vec![2.0, -1.0]).unwrap());
        let eps = Arr::from_shape_vec(IxDyn(&[2, 1, 1, 1]), vec![0.5, 1.5]).unwrap();
        let out = diffuse(&z, &[0, 9], &sched, &eps).unwrap();
        let v = out.value();
        for (i, (&zi, &ei)) in [2.0, -1.0].iter().zip(&[0.5, 1.5]).enumerate() {
            let ab = sched.alpha_bar[if i == 0 { 0 } else { 9 }];
            let expect = ab.sqrt() * zi + (1.0 - ab).sqrt() * ei;
            let got = v[[i, 0, 0, 0]];
            assert!((got - expect).abs() < 1e-12, "{got} vs {expect}");
        }
        assert!(diffuse(&z, &[0, 10], &sched, &eps).is_err());
    }

    #[test]
    fn detached_fake_blocks_generator_gradient_in_l_d() {
        let mut rng = ChaCha20Rng::seed_from_u64(9);
        let mut store = ParamStore::new();
        let disc = Discriminator::new(&mut store, &DiscConfig::tiny(), &mut rng).unwrap();
        let sched = build_schedule(20, 0.001, 0.02).unwrap();

        let z_leaf = Tensor::leaf(init::normal(&mut rng, &[1, 2, 4, 4], 1.0));
        let z_real = Tensor::constant(init::normal(&mut rng, &[1, 2, 4, 4], 1.0));
        let e_img = Tensor::constant(init::normal(&mut rng, &[1, 3, 8], 0.5));

        let pair = gan_losses(&z_leaf, &z_real, &disc, &e_img, &sched, &mut rng).unwrap();
        let g_grads = pair.l_g.backward();
        assert!(
            g_grads.get(&z_leaf).is_some(),
            "L_G must reach the fake latent"
        );
        let d_grads = pair.l_d.backward();
        assert!(
            d_grads.get(&z_leaf).is_none(),
            "L_D must not reach the fake latent"
        );
    }

    #[test]
    fn optimizer_scoping_keeps_stores_independent() {
        let mut rng = ChaCha20Rng::seed_from_u64(21);
        let mut gen_store = ParamStore::new();
        let gen_param = gen_store.register("gen.z", init::normal(&mut rng, &[1, 2, 4, 4], 1.0));
        let mut disc_store = ParamStore::new();
        let disc = Discriminator::new(&mut disc_store, &DiscConfig::tiny(), &mut rng).unwrap();
        let sched = build_schedule(20, 0.001, 0.02).unwrap();
        let e_img = Tensor::constant(init::normal(&mut rng, &[1, 3, 8], 0.5));
        let z_real = Tensor::constant(init::normal(&mut rng, &[1, 2, 4, 4], 1.0));

        // Generator step: only gen parameters move.
        let disc_sum_before = disc_store.checksum();
        let pair = gan_losses(&gen_param.tensor(), &z_real, &disc, &e_img, &sched, &mut rng).unwrap();
        let grads = pair.l_g.backward();
        let g = gen_param.grad(&grads).expect("generator gradient").clone();
        gen_param.update(|v| v.scaled_add(-0.1, &g));
        assert_eq!(disc_store.checksum(), disc_sum_before);

        // Discriminator step: only disc parameters move.
        gen_store.begin_step();
        disc_store.begin_step();
        let gen_sum_before = gen_store.checksum();
        let pair = gan_losses(&gen_param.tensor(), &z_real, &disc, &e_img, &sched, &mut rng).unwrap();
        let grads = pair.l_d.backward();
        let mut moved = 0;
        for p in disc_store.trainable() {
            if let Some(g) = p.grad(&grads) {
                let g = g.clone();
                p.update(|v| v.scaled_add(-0.1, &g));
                moved += 1;
            }
        }
        assert!(moved > 0, "discriminator received no gradients");
        assert_eq!(gen_store.checksum(), gen_sum_before);
    }
}
