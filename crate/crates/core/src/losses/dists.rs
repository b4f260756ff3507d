//! DISTS-lite: the texture/structure statistic machinery of DISTS over a
//! fixed, seeded convolutional feature pyramid instead of a pretrained
//! classifier. Weights are constants, so gradients flow only to the inputs.

use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;

use crate::error::{Error, Result};
use crate::image::{image_to_nchw, ImageTensor};
use crate::nn::init;
use crate::tensor::Tensor;

const FEATURE_SEED: u64 = 0xd157;
const STAGE_CHANNELS: [usize; 3] = [16, 32, 64];
const STABILIZER: f64 = 1e-6;

/// Frozen random feature pyramid: three stride-2 3x3 convs with GELU, plus
/// the raw input as stage zero.
pub struct DistsLite {
    weights: Vec<Tensor>,
}

impl Default for DistsLite {
    fn default() -> Self {
        Self::new()
    }
}

impl DistsLite {
    pub fn new() -> Self {
        let mut rng = ChaCha20Rng::seed_from_u64(FEATURE_SEED);
        let mut weights = Vec::new();
        let mut c_in = 3;
        for &c_out in &STAGE_CHANNELS {
            let fan_in = c_in * 9;
            let w = init::he_normal(&mut rng, &[c_out, c_in, 3, 3], fan_in);
            weights.push(Tensor::constant(w));
            c_in = c_out;
        }
        Self { weights }
    }

    fn stages(&self, x: &Tensor) -> Vec<Tensor> {
        let mut feats = vec![x.clone()];
        let mut cur = x.clone();
        for w in &self.weights {
            cur = cur.conv2d(w, None, 2, 1).gelu();
            feats.push(cur.clone());
        }
        feats
    }

    /// Perceptual distance between two NCHW batches. Zero iff the per-stage
    /// channel statistics agree; symmetric in its arguments.
    pub fn forward(&self, x: &Tensor, y: &Tensor) -> Result<Tensor> {
        let (sx, sy) = (x.shape(), y.shape());
        if sx != sy {
            return Err(Error::Shape(format!("dists inputs differ: {sx:?} vs {sy:?}")));
        }
        if sx.len() != 4 || sx[1] != 3 {
            return Err(Error::Shape(format!(
                "dists expects [B,3,H,W] batches, got {sx:?}"
            )));
        }
        let fx = self.stages(x);
        let fy = self.stages(y);
        let mut sim_sum: Option<Tensor> = None;
        for (a, b) in fx.iter().zip(&fy) {
            let s = stage_similarity(a, b);
            sim_sum = Some(match sim_sum {
                Some(acc) => acc.add(&s),
                None => s,
            });
        }
        let mean_sim = sim_sum.unwrap().scale(1.0 / (fx.len() as f64));
        Ok(mean_sim.neg().add_scalar(1.0))
    }
}

/// Mean over batch and channels of 0.5·texture + 0.5·structure for one stage.
fn stage_similarity(x: &Tensor, y: &Tensor) -> Tensor {
    let sh = x.shape();
    let (b, c, h, w) = (sh[0], sh[1], sh[2], sh[3]);
    let fx = x.reshape(&[b, c, h * w]);
    let fy = y.reshape(&[b, c, h * w]);
    let mx = fx.mean_axis_keep(2);
    let my = fy.mean_axis_keep(2);
    let cx = fx.sub(&mx);
    let cy = fy.sub(&my);
    let vx = cx.sqr().mean_axis_keep(2);
    let vy = cy.sqr().mean_axis_keep(2);
    let cov = cx.mul(&cy).mean_axis_keep(2);

    let texture = mx
        .mul(&my)
        .scale(2.0)
        .add_scalar(STABILIZER)
        .div(&mx.sqr().add(&my.sqr()).add_scalar(STABILIZER));
    let structure = cov
        .scale(2.0)
        .add_scalar(STABILIZER)
        .div(&vx.add(&vy).add_scalar(STABILIZER));
    texture.add(&structure).scale(0.5).mean()
}

/// Distance between two images through a freshly seeded extractor. Training
/// code holds one [`DistsLite`] instead of rebuilding it per call.
pub fn dists(x: &ImageTensor, y: &ImageTensor) -> Result<f64> {
    let d = DistsLite::new();
    let out = d.forward(
        &Tensor::constant(image_to_nchw(x)),
        &Tensor::constant(image_to_nchw(y)),
    )?;
    Ok(out.item())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::synthetic_natural;
    use crate::jpeg::{degrade, Subsample};

    #[test]
    fn self_distance_is_zero() {
        let img = synthetic_natural(32, 32, 0.8);
        let d = dists(&img, &img).unwrap();
        assert!(d.abs() <= 1e-6, "self distance {d}");
    }

    #[test]
    fn symmetric_in_arguments() {
        let a = synthetic_natural(32, 32, 0.1);
        let b = synthetic_natural(32, 32, 1.7);
        let dab = dists(&a, &b).unwrap();
        let dba = dists(&b, &a).unwrap();
        assert!(dab > 1e-4, "distinct images scored {dab}");
        assert!((dab - dba).abs() <= 1e-6, "{dab} vs {dba}");
    }

    #[test]
    fn heavier_compression_scores_farther() {
        let img = synthetic_natural(64, 64, 0.5);
        let bad = degrade(&img, 5, Subsample::S444).unwrap();
        let good = degrade(&img, 50, Subsample::S444).unwrap();
        let d_bad = dists(&img, &bad).unwrap();
        let d_good = dists(&img, &good).unwrap();
        assert!(
            d_bad > d_good,
            "qf=5 ({d_bad}) should be farther than qf=50 ({d_good})"
        );
    }

    #[test]
    fn shape_mismatch_rejected() {
        let a = synthetic_natural(32, 32, 0.0);
        let b = synthetic_natural(16, 32, 0.0);
        assert!(dists(&a, &b).is_err());
    }
}
