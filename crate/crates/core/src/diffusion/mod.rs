//! Latent denoising stack: noise schedule, frozen autoencoder, conditional
//! UNet, and the single-step restoration that inverts the forward noising
//! identity in closed form.

pub mod autoencoder;
pub mod schedule;
pub mod unet;

pub use autoencoder::{AeConfig, Autoencoder};
pub use schedule::{build_schedule, NoiseSchedule};
pub use unet::{LoraConfig, Unet, UnetConfig};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Treat the degraded latent as a noised clean latent and undo the noising
/// in one step:
///
///   z_hat = (z_L - sqrt(1 - alpha_bar(tau)) * eps) / sqrt(alpha_bar(tau))
///
/// `tau` is a [B] tensor of fractional timesteps; alpha_bar is interpolated
/// linearly between integer steps, keeping the whole map differentiable in
/// tau, eps, and z_L.
pub fn one_step_restore(
    z_l: &Tensor,
    eps: &Tensor,
    tau: &Tensor,
    sched: &NoiseSchedule,
) -> Result<Tensor> {
    if z_l.shape() != eps.shape() {
        return Err(Error::Shape(format!(
            "latent {:?} vs predicted noise {:?}",
            z_l.shape(),
            eps.shape()
        )));
    }
    let b = z_l.shape()[0];
    if tau.shape() != [b] {
        return Err(Error::Shape(format!(
            "tau shape {:?}, expected [{b}]",
            tau.shape()
        )));
    }
    let hi = (sched.t_max - 1) as f64;
    for &v in tau.value().iter() {
        if !(0.0..=hi).contains(&v) {
            return Err(Error::Domain(format!("tau {v} outside [0, {hi}]")));
        }
    }
    let ab = tau.table_lerp(&sched.alpha_bar);
    if ab.value().iter().any(|&v| v <= 0.0) {
        return Err(Error::Numeric(
            "alpha_bar at tau is not positive; cannot divide".into(),
        ));
    }
    let mut bshape = vec![b];
    bshape.extend(std::iter::repeat(1).take(z_l.shape().len() - 1));
    let ab = ab.reshape(&bshape);
    let sqrt_ab = ab.sqrt();
    let sqrt_om = ab.neg().add_scalar(1.0).sqrt();
    Ok(z_l.sub(&eps.mul(&sqrt_om)).div(&sqrt_ab))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Arr;
    use ndarray::IxDyn;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha20Rng;

    fn rand_arr(rng: &mut ChaCha20Rng, shape: &[usize]) -> Arr {
        Arr::from_shape_fn(IxDyn(shape), |_| rng.gen_range(-1.0..1.0))
    }

    #[test]
    fn inversion_oracle_100_triples() {
        // Noise z_H forward at a known tau, hand the exact noise back as
        // the prediction: restoration must return z_H.
        let sched = NoiseSchedule::default_schedule();
        let mut rng = ChaCha20Rng::seed_from_u64(0);
        for trial in 0..100 {
            let z_h = rand_arr(&mut rng, &[1, 4, 4, 4]);
            let eps = rand_arr(&mut rng, &[1, 4, 4, 4]);
            let tau = rng.gen_range(0.0..=999.0);
            let ab = sched.alpha_bar_at(tau).unwrap();
            let z_l = &z_h * ab.sqrt() + &eps * (1.0 - ab).sqrt();
            let restored = one_step_restore(
                &Tensor::constant(z_l),
                &Tensor::constant(eps),
                &Tensor::constant(Arr::from_elem(IxDyn(&[1]), tau)),
                &sched,
            )
            .unwrap();
            let err = (&restored.value().view() - &z_h.view())
                .iter()
                .map(|v| v.abs())
                .fold(0.0f64, f64::max);
            assert!(err <= 1e-5, "trial {trial}: inversion error {err} at tau {tau}");
        }
    }

    #[test]
    fn noise_free_limit_is_identity() {
        let sched = NoiseSchedule {
            t_max: 1,
            alpha_bar: vec![1.0],
        };
        let mut rng = ChaCha20Rng::seed_from_u64(1);
        let z = rand_arr(&mut rng, &[2, 3, 2, 2]);
        let eps = rand_arr(&mut rng, &[2, 3, 2, 2]);
        let out = one_step_restore(
            &Tensor::constant(z.clone()),
            &Tensor::constant(eps),
            &Tensor::constant(Arr::zeros(IxDyn(&[2]))),
            &sched,
        )
        .unwrap();
        let err = (&out.value().view() - &z.view())
            .iter()
            .map(|v| v.abs())
            .fold(0.0f64, f64::max);
        assert!(err < 1e-12);
    }

    #[test]
    fn quarter_alpha_doubles_input() {
        let sched = NoiseSchedule {
            t_max: 1,
            alpha_bar: vec![0.25],
        };
        let mut rng = ChaCha20Rng::seed_from_u64(2);
        let z = rand_arr(&mut rng, &[1, 2, 2, 2]);
        let out = one_step_restore(
            &Tensor::constant(z.clone()),
            &Tensor::constant(Arr::zeros(IxDyn(&[1, 2, 2, 2]))),
            &Tensor::constant(Arr::zeros(IxDyn(&[1]))),
            &sched,
        )
        .unwrap();
        let err = (&out.value().view() - &(&z * 2.0).view())
            .iter()
            .map(|v| v.abs())
            .fold(0.0f64, f64::max);
        assert!(err < 1e-12);
    }

    #[test]
    fn affine_in_latent_for_fixed_noise() {
        // Three collinear z_L inputs stay collinear after restoration.
        let sched = NoiseSchedule::default_schedule();
        let mut rng = ChaCha20Rng::seed_from_u64(3);
        let a = rand_arr(&mut rng, &[1, 2, 2, 2]);
        let b = rand_arr(&mut rng, &[1, 2, 2, 2]);
        let eps = rand_arr(&mut rng, &[1, 2, 2, 2]);
        let tau = Tensor::constant(Arr::from_elem(IxDyn(&[1]), 321.7));
        let run = |z: &Arr| {
            one_step_restore(
                &Tensor::constant(z.clone()),
                &Tensor::constant(eps.clone()),
                &tau,
                &sched,
            )
            .unwrap()
            .value()
            .clone()
        };
        let mid = (&a + &b) * 0.5;
        let ra = run(&a);
        let rb = run(&b);
        let rm = run(&mid);
        let expect = (&ra + &rb) * 0.5;
        let err = (&rm.view() - &expect.view())
            .iter()
            .map(|v| v.abs())
            .fold(0.0f64, f64::max);
        assert!(err < 1e-10, "restoration not affine in z_L: {err}");
    }

    #[test]
    fn fractional_tau_matches_scalar_interpolation() {
        let sched = NoiseSchedule::default_schedule();
        let tau = 421.35;
        let z = Arr::from_elem(IxDyn(&[1, 1, 1, 1]), 1.0);
        let eps = Arr::from_elem(IxDyn(&[1, 1, 1, 1]), 1.0);
        let out = one_step_restore(
            &Tensor::constant(z),
            &Tensor::constant(eps),
            &Tensor::constant(Arr::from_elem(IxDyn(&[1]), tau)),
            &sched,
        )
        .unwrap()
        .item();
        let ab = sched.alpha_bar_at(tau).unwrap();
        let expect = (1.0 - (1.0 - ab).sqrt()) / ab.sqrt();
        assert!((out - expect).abs() < 1e-12);
    }

    #[test]
    fn out_of_range_tau_rejected() {
        let sched = NoiseSchedule::default_schedule();
        let z = Tensor::constant(Arr::zeros(IxDyn(&[1, 1, 1, 1])));
        for bad in [-0.5, 999.5, f64::NAN] {
            let r = one_step_restore(
                &z,
                &z,
                &Tensor::constant(Arr::from_elem(IxDyn(&[1]), bad)),
                &sched,
            );
            assert!(r.is_err(), "tau {bad} accepted");
        }
    }

    #[test]
    fn nonpositive_alpha_guard() {
        let sched = NoiseSchedule {
            t_max: 2,
            alpha_bar: vec![0.5, 0.0],
        };
        let z = Tensor::constant(Arr::zeros(IxDyn(&[1, 1, 1, 1])));
        let r = one_step_restore(
            &z,
            &z,
            &Tensor::constant(Arr::from_elem(IxDyn(&[1]), 1.0)),
            &sched,
        );
        assert!(matches!(r, Err(Error::Numeric(_))));
    }

    #[test]
    fn restoration_differentiable_in_tau() {
        let sched = NoiseSchedule::default_schedule();
        let mut rng = ChaCha20Rng::seed_from_u64(4);
        let z = rand_arr(&mut rng, &[1, 2, 2, 2]);
        let eps = rand_arr(&mut rng, &[1, 2, 2, 2]);
        let eval = |tv: f64| {
            let tau = Tensor::leaf(Arr::from_elem(IxDyn(&[1]), tv));
            let out = one_step_restore(
                &Tensor::constant(z.clone()),
                &Tensor::constant(eps.clone()),
                &tau,
                &sched,
            )
            .unwrap();
            let loss = out.sqr().mean();
            let g = loss.backward();
            (loss.item(), g.get(&tau).unwrap()[[0]])
        };
        let t0 = 250.3;
        let (_, g) = eval(t0);
        let h = 1e-4;
        let (fp, _) = eval(t0 + h);
        let (fm, _) = eval(t0 - h);
        let fd = (fp - fm) / (2.0 * h);
        let e = crate::tensor::gradcheck::rel_err(g, fd);
        assert!(e < 1e-3, "tau grad {g} vs fd {fd} rel {e}");
    }
}
