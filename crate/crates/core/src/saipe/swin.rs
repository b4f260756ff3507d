//! Windowed-attention transformer blocks for the prompt extractor.
//! Features travel as [B, H, W, C]; window attention runs on ws*ws token
//! groups, every second block shifting the grid by ws/2 so information
//! crosses window borders.

use ndarray::IxDyn;
use rand::Rng;

use crate::nn::attention::{
    roll2d, shift_attn_mask, window_partition, window_reverse, MultiHeadAttention,
    RelativePositionBias,
};
use crate::nn::params::ParamStore;
use crate::nn::{Conv2dLayer, Init, LayerNorm, Mlp};
use crate::tensor::{Arr, Tensor};

pub struct SwinBlock {
    norm1: LayerNorm,
    attn: MultiHeadAttention,
    rel_pos: Option<RelativePositionBias>,
    norm2: LayerNorm,
    mlp: Mlp,
    window: usize,
    shift: usize,
}

impl SwinBlock {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        prefix: &str,
        dim: usize,
        heads: usize,
        window: usize,
        shift: usize,
        mlp_ratio: f64,
        pos_enc: bool,
        rng: &mut impl Rng,
    ) -> Self {
        let init = Init::TruncNormal(0.02);
        let norm1 = LayerNorm::new(store, &format!("{prefix}.norm1"), dim);
        let attn = MultiHeadAttention::new(
            store,
            &format!("{prefix}.attn"),
            dim,
            dim,
            heads,
            init,
            rng,
            None,
        );
        let rel_pos = pos_enc.then(|| {
            RelativePositionBias::new(store, &format!("{prefix}.attn"), window, heads, rng)
        });
        let norm2 = LayerNorm::new(store, &format!("{prefix}.norm2"), dim);
        let hidden = ((dim as f64) * mlp_ratio).round() as usize;
        let mlp = Mlp::new(store, &format!("{prefix}.mlp"), dim, hidden, init, rng);
        Self {
            norm1,
            attn,
            rel_pos,
            norm2,
            mlp,
            window,
            shift,
        }
    }

    /// x: [B, H, W, C] with H and W multiples of the window size.
    pub fn forward(&self, x: &Tensor) -> Tensor {
        let (b, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
        let ws = self.window;
        assert!(
            h % ws == 0 && w % ws == 0,
            "feature dims {h}x{w} not divisible by window {ws}"
        );
        // Shifting a grid that is a single window tall or wide only permutes
        // tokens inside that window, so skip it.
        let shift = if h > ws && w > ws { self.shift } else { 0 };

        let mut y = self.norm1.forward(x);
        if shift > 0 {
            y = roll2d(&y, -(shift as isize), -(shift as isize));
        }
        let windows = window_partition(&y, ws);
        let bias = self.attn_bias(b, h, w, shift);
        let attended = self.attn.forward(&windows, &windows, bias.as_ref());
        let mut y = window_reverse(&attended, ws, b, h, w);
        if shift > 0 {
            y = roll2d(&y, shift as isize, shift as isize);
        }
        let x = x.add(&y);
        x.add(&self.mlp.forward(&self.norm2.forward(&x)))
    }

    fn attn_bias(&self, b: usize, h: usize, w: usize, shift: usize) -> Option<Tensor> {
        let rel = self.rel_pos.as_ref().map(|r| r.bias());
        let mask = (shift > 0).then(|| {
            let m = shift_attn_mask(h, w, self.window, shift);
            let (nw, l) = (m.shape()[0], m.shape()[1]);
            // Windows are batch-major, so window i of the partition uses
            // mask row i % nW.
            let tiled = Arr::from_shape_fn(IxDyn(&[b * nw, 1, l, l]), |ix| {
                m[[ix[0] % nw, ix[2], ix[3]]]
            });
            Tensor::constant(tiled)
        });
        match (rel, mask) {
            (Some(r), Some(m)) => Some(m.add(&r)),
            (Some(r), None) => Some(r),
            (None, Some(m)) => Some(m),
            (None, None) => None,
        }
    }
}

/// Residual group: a run of transformer blocks plus a 3x3 conv, with a skip
/// connection around the whole group.
pub struct Rstb {
    blocks: Vec<SwinBlock>,
    conv: Conv2dLayer,
}

impl Rstb {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        prefix: &str,
        dim: usize,
        heads: usize,
        window: usize,
        n_blocks: usize,
        mlp_ratio: f64,
        pos_enc: bool,
        rng: &mut impl Rng,
    ) -> Self {
        let blocks = (0..n_blocks)
            .map(|i| {
                let shift = if i % 2 == 1 { window / 2 } else { 0 };
                SwinBlock::new(
                    store,
                    &format!("{prefix}.block{i}"),
                    dim,
                    heads,
                    window,
                    shift,
                    mlp_ratio,
                    pos_enc,
                    rng,
                )
            })
            .collect();
        let conv = Conv2dLayer::new(
            store,
            &format!("{prefix}.conv"),
            dim,
            dim,
            3,
            1,
            1,
            Init::TruncNormal(0.02),
            rng,
        );
        Self { blocks, conv }
    }

    /// x: [B, C, H, W] -> same shape.
    pub fn forward(&self, x: &Tensor) -> Tensor {
        let mut t = x.permute(&[0, 2, 3, 1]);
        for blk in &self.blocks {
            t = blk.forward(&t);
        }
        let t = t.permute(&[0, 3, 1, 2]);
        x.add(&self.conv.forward(&t))
    }
}
