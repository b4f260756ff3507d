//! Degradation-aware timestep and quality-factor predictor. A shared conv
//! trunk pools the degraded image into one feature vector; one linear head
//! regresses the quality factor, the other produces logits over T_bins
//! coarse timesteps that a Gumbel-Softmax combination turns into a single
//! differentiable fractional timestep.

use ndarray::IxDyn;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;

use crate::error::{Error, Result};
use crate::nn::params::ParamStore;
use crate::nn::{Conv2dLayer, GroupNorm, Init, Linear};
use crate::tensor::{Arr, Tensor};

#[derive(Clone, Debug, serde::Serialize, serde::Deserialize)]
pub struct TimePredictorConfig {
    /// Coarse timestep bins the head selects among.
    pub t_bins: usize,
    /// Schedule length the bins map onto.
    pub t_max: usize,
    /// Trunk channel width.
    pub width: usize,
    /// Gumbel-Softmax temperature.
    pub temperature: f64,
}

impl Default for TimePredictorConfig {
    fn default() -> Self {
        Self {
            t_bins: 50,
            t_max: 1000,
            width: 32,
            temperature: 1.0,
        }
    }
}

impl TimePredictorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.t_bins < 2 {
            return Err(Error::Domain("t_bins must be at least 2".into()));
        }
        if self.t_max < 1 {
            return Err(Error::Domain("t_max must be at least 1".into()));
        }
        if self.width == 0 {
            return Err(Error::Domain("width must be positive".into()));
        }
        if !(self.temperature > 0.0) {
            return Err(Error::Domain(format!(
                "temperature must be positive, got {}",
                self.temperature
            )));
        }
        Ok(())
    }
}

fn groups_for(c: usize) -> usize {
    [8usize, 4, 2, 1].into_iter().find(|g| c % g == 0).unwrap()
}

struct TrunkBlock {
    norm1: GroupNorm,
    conv1: Conv2dLayer,
    norm2: GroupNorm,
    conv2: Conv2dLayer,
    skip: Option<Conv2dLayer>,
}

impl TrunkBlock {
    fn new(
        store: &mut ParamStore,
        prefix: &str,
        c_in: usize,
        c_out: usize,
        stride: usize,
        rng: &mut ChaCha20Rng,
    ) -> Self {
        let init = Init::He;
        let norm1 = GroupNorm::new(store, &format!("{prefix}.norm1"), groups_for(c_in), c_in);
        let conv1 = Conv2dLayer::new(
            store,
            &format!("{prefix}.conv1"),
            c_in,
            c_out,
            3,
            stride,
            1,
            init,
            rng,
        );
        let norm2 = GroupNorm::new(store, &format!("{prefix}.norm2"), groups_for(c_out), c_out);
        let conv2 = Conv2dLayer::new(
            store,
            &format!("{prefix}.conv2"),
            c_out,
            c_out,
            3,
            1,
            1,
            init,
            rng,
        );
        let skip = (stride != 1 || c_in != c_out).then(|| {
            Conv2dLayer::new(
                store,
                &format!("{prefix}.skip"),
                c_in,
                c_out,
                1,
                stride,
                0,
                init,
                rng,
            )
        });
        Self {
            norm1,
            conv1,
            norm2,
            conv2,
            skip,
        }
    }

    fn forward(&self, x: &Tensor) -> Tensor {
        let h = self.conv1.forward(&self.norm1.forward(x).silu());
        let h = self.conv2.forward(&self.norm2.forward(&h).silu());
        let sk = match &self.skip {
            Some(c) => c.forward(x),
            None => x.clone(),
        };
        sk.add(&h)
    }
}

pub struct TimePredictor {
    in_conv: Conv2dLayer,
    blocks: Vec<TrunkBlock>,
    qf_head: Linear,
    logits_head: Linear,
    cfg: TimePredictorConfig,
}

/// Raw predictor outputs before timestep selection.
pub struct TimestepDistribution {
    /// [B] in [1, 100].
    pub qf_pred: Tensor,
    /// [B, t_bins].
    pub logits: Tensor,
}

impl TimePredictor {
    pub fn new(
        store: &mut ParamStore,
        cfg: &TimePredictorConfig,
        rng: &mut ChaCha20Rng,
    ) -> Result<Self> {
        cfg.validate()?;
        let init = Init::He;
        let w = cfg.width;
        let in_conv = Conv2dLayer::new(store, "tp.in", 3, w, 3, 1, 1, init, rng);
        let blocks = (0..4)
            .map(|i| {
                let stride = if i == 0 { 1 } else { 2 };
                TrunkBlock::new(store, &format!("tp.block{i}"), w, w, stride, rng)
            })
            .collect();
        let qf_head = Linear::new(store, "tp.qf", w, 1, true, init, rng);
        let logits_head = Linear::new(store, "tp.logits", w, cfg.t_bins, true, init, rng);
        Ok(Self {
            in_conv,
            blocks,
            qf_head,
            logits_head,
            cfg: cfg.clone(),
        })
    }

    pub fn config(&self) -> &TimePredictorConfig {
        &self.cfg
    }

    /// [B, 3, H, W] -> per-image QF prediction and timestep logits.
    pub fn predict(&self, x: &Tensor) -> Result<TimestepDistribution> {
        let s = x.shape();
        if s.len() != 4 || s[1] != 3 {
            return Err(Error::Shape(format!("expected [B, 3, H, W], got {s:?}")));
        }
        let b = s[0];
        let mut h = self.in_conv.forward(x);
        for blk in &self.blocks {
            h = blk.forward(&h);
        }
        // Global average pool: [B, w, h', w'] -> [B, w].
        let hs = h.shape().to_vec();
        let pooled = h
            .reshape(&[b, hs[1], hs[2] * hs[3]])
            .mean_axis_keep(2)
            .reshape(&[b, hs[1]]);
        let qf_raw = self.qf_head.forward(&pooled).reshape(&[b]);
        let qf_pred = qf_raw.sigmoid().scale(99.0).add_scalar(1.0);
        let logits = self.logits_head.forward(&pooled);
        Ok(TimestepDistribution { qf_pred, logits })
    }
}

/// Standard Gumbel(0, 1) draws, deterministic per seed.
pub fn sample_gumbel(shape: &[usize], seed: u64) -> Arr {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    Arr::from_shape_fn(IxDyn(shape), |_| {
        // u in (0, 1): nudge away from 0 so the double log stays finite.
        let u: f64 = rng.gen_range(f64::EPSILON..1.0);
        -(-u.ln()).ln()
    })
}

/// softmax((logits + g) / temperature) per row; g defaults to zero (the
/// deterministic inference path).
pub fn gumbel_weights(logits: &Tensor, temperature: f64, gumbel: Option<&Arr>) -> Result<Tensor> {
    if !(temperature > 0.0) {
        return Err(Error::Domain(format!(
            "temperature must be positive, got {temperature}"
        )));
    }
    let shifted = match gumbel {
        Some(g) => {
            if g.shape() != logits.shape() {
                return Err(Error::Shape(format!(
                    "gumbel noise shape {:?} vs logits {:?}",
                    g.shape(),
                    logits.shape()
                )));
            }
            logits.add(&Tensor::constant(g.clone()))
        }
        None => logits.clone(),
    };
    Ok(shifted.scale(1.0 / temperature).softmax_last())
}

/// Soft timestep selection: expected bin index under the Gumbel-Softmax
/// weights, in [0, t_bins - 1]. Differentiable in the logits.
pub fn gumbel_combine(logits: &Tensor, temperature: f64, gumbel: Option<&Arr>) -> Result<Tensor> {
    let w = gumbel_weights(logits, temperature, gumbel)?;
    let t_bins = *logits.shape().last().unwrap();
    let idx = Arr::from_shape_fn(IxDyn(&[t_bins]), |i| i[0] as f64);
    let weighted = w.mul(&Tensor::constant(idx));
    let rank = logits.shape().len();
    let b = logits.shape()[0];
    let tau = weighted.sum_axis_keep(rank - 1);
    Ok(tau.reshape(&[b]))
}

/// Affine map from bin units [0, t_bins-1] to schedule units [0, t_max-1].
pub fn bins_to_schedule(tau_bins: &Tensor, t_bins: usize, t_max: usize) -> Tensor {
    let scale = (t_max - 1) as f64 / (t_bins - 1) as f64;
    tau_bins.scale(scale)
}

/// Mean absolute error between predicted and ground-truth quality factors.
pub fn qf_loss(qf_pred: &Tensor, qf_gt: &Tensor) -> Result<Tensor> {
    if qf_pred.shape() != qf_gt.shape() {
        return Err(Error::Shape(format!(
            "qf_pred {:?} vs qf_gt {:?}",
            qf_pred.shape(),
            qf_gt.shape()
        )));
    }
    Ok(qf_pred.l1(qf_gt))
}
