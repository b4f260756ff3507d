//! Restoration objectives: edge-aware perceptual reconstruction, the
//! latent adversarial pair, and their weighted combination.
//!
//! Every composite loss reports its components so training logs can be
//! audited; the reported pieces always recombine to the reported total.

pub mod dists;
pub mod gan;
pub mod sobel;

pub use dists::{dists, DistsLite};
pub use gan::{diffuse, gan_losses, DiscConfig, Discriminator, GanPair};
pub use sobel::{sobel, sobel_image};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Weights on the adversarial and quality-regression terms.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct LossWeights {
    pub alpha: f64,
    pub beta: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { alpha: 1e-2, beta: 1e-3 }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha >= 0.0) || !(self.beta >= 0.0) {
            return Err(Error::Domain(format!(
                "loss weights must be non-negative, got alpha={} beta={}",
                self.alpha, self.beta
            )));
        }
        Ok(())
    }
}

/// Reconstruction objective with its breakdown. `total` carries the graph;
/// the scalar fields are the logged components.
pub struct ReconLoss {
    pub total: Tensor,
    pub mse: f64,
    pub dists_edges: f64,
    pub dists_plain: f64,
}

/// MSE plus the edge-aware perceptual pair: the perceptual distance between
/// Sobel magnitude maps and between the raw images.
pub fn recon_loss(extractor: &DistsLite, pred: &Tensor, target: &Tensor) -> Result<ReconLoss> {
    if pred.shape() != target.shape() {
        return Err(Error::Shape(format!(
            "prediction {:?} vs target {:?}",
            pred.shape(),
            target.shape()
        )));
    }
    let mse = pred.mse(target);
    let edges_pred = sobel(pred)?;
    let edges_target = sobel(target)?;
    let dists_edges = extractor.forward(&edges_pred, &edges_target)?;
    let dists_plain = extractor.forward(pred, target)?;
    let total = mse.add(&dists_edges).add(&dists_plain);
    Ok(ReconLoss {
        mse: mse.item(),
        dists_edges: dists_edges.item(),
        dists_plain: dists_plain.item(),
        total,
    })
}

/// Full objective with its breakdown for the step log.
pub struct TotalLoss {
    pub total: Tensor,
    pub recon: f64,
    pub adv: f64,
    pub qf: f64,
}

/// recon + alpha·L_G + beta·L_qf. The adversarial and quality terms come in
/// as graphs so one backward pass reaches every trainable input.
pub fn total_loss(
    recon: &ReconLoss,
    l_g: &Tensor,
    l_qf: &Tensor,
    weights: &LossWeights,
) -> Result<TotalLoss> {
    weights.validate()?;
    for (name, t) in [("adversarial", l_g), ("qf", l_qf)] {
        if t.len() != 1 {
            return Err(Error::Shape(format!(
                "{name} loss must be scalar, got shape {:?}",
                t.shape()
            )));
        }
    }
    let total = recon
        .total
        .add(&l_g.scale(weights.alpha))
        .add(&l_qf.scale(weights.beta));
    Ok(TotalLoss {
        total,
        recon: recon.total.item(),
        adv: l_g.item(),
        qf: l_qf.item(),
    })
}
