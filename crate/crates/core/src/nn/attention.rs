//! Attention blocks: generic multi-head attention (optionally low-rank
//! adapted), windowing helpers for shifted-window attention, and a
//! kernelized linear-attention layer.

use std::rc::Rc;

use ndarray::IxDyn;
use rand::Rng;
use rand_chacha::ChaCha20Rng;

use super::{init, Init, LoraLinear, Param, ParamStore};
use crate::tensor::{Arr, Tensor};

/// Adapter request threaded through attention constructors: every
/// projection the spec'd adapter set targets (q, k, v, out) gets a delta.
pub struct LoraSpec<'a> {
    pub store: &'a mut ParamStore,
    pub rank: usize,
    pub scale: f64,
    pub rng: &'a mut ChaCha20Rng,
}

pub struct MultiHeadAttention {
    pub q: LoraLinear,
    pub k: LoraLinear,
    pub v: LoraLinear,
    pub out: LoraLinear,
    heads: usize,
    head_dim: usize,
}

impl MultiHeadAttention {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        prefix: &str,
        dim: usize,
        kv_dim: usize,
        heads: usize,
        init: Init,
        rng: &mut impl Rng,
        mut lora: Option<&mut LoraSpec>,
    ) -> Self {
        assert_eq!(dim % heads, 0, "attention dim divisible by heads");
        let mut mk = |store: &mut ParamStore,
                      name: &str,
                      d_in: usize,
                      d_out: usize,
                      lora: &mut Option<&mut LoraSpec>| {
            let adapter = lora
                .as_mut()
                .map(|l| (&mut *l.store, l.rank, l.scale, &mut *l.rng));
            LoraLinear::new(
                store,
                &format!("{prefix}.{name}"),
                d_in,
                d_out,
                true,
                init,
                rng,
                adapter,
            )
        };
        let q = mk(store, "q", dim, dim, &mut lora);
        let k = mk(store, "k", kv_dim, dim, &mut lora);
        let v = mk(store, "v", kv_dim, dim, &mut lora);
        let out = mk(store, "out", dim, dim, &mut lora);
        Self {
            q,
            k,
            v,
            out,
            heads,
            head_dim: dim / heads,
        }
    }

    fn split_heads(&self, x: &Tensor) -> Tensor {
        let s = x.shape().to_vec();
        let (b, l) = (s[0], s[1]);
        x.reshape(&[b, l, self.heads, self.head_dim])
            .permute(&[0, 2, 1, 3])
            .reshape(&[b * self.heads, l, self.head_dim])
    }

    /// `q_in`: [B, Lq, D], `kv`: [B, Lkv, Dkv]. `attn_bias` is added to the
    /// pre-softmax scores and must broadcast against [B, h, Lq, Lkv].
    pub fn forward(&self, q_in: &Tensor, kv: &Tensor, attn_bias: Option<&Tensor>) -> Tensor {
        let (b, lq) = (q_in.shape()[0], q_in.shape()[1]);
        let lkv = kv.shape()[1];
        let h = self.heads;
        let q = self.split_heads(&self.q.forward(q_in));
        let k = self.split_heads(&self.k.forward(kv));
        let v = self.split_heads(&self.v.forward(kv));
        let scale = 1.0 / (self.head_dim as f64).sqrt();
        let mut scores = q
            .bmm(&k.permute(&[0, 2, 1]))
            .scale(scale)
            .reshape(&[b, h, lq, lkv]);
        if let Some(bias) = attn_bias {
            scores = scores.add(bias);
        }
        let attn = scores.softmax_last().reshape(&[b * h, lq, lkv]);
        let ctx = attn
            .bmm(&v)
            .reshape(&[b, h, lq, self.head_dim])
            .permute(&[0, 2, 1, 3])
            .reshape(&[b, lq, h * self.head_dim]);
        self.out.forward(&ctx)
    }
}

/// Learnable relative position bias over a square window, one table shared
/// by all windows, indexed by pairwise offset.
pub struct RelativePositionBias {
    pub table: Rc<Param>,
    index: Vec<usize>,
    window: usize,
    heads: usize,
}

impl RelativePositionBias {
    pub fn new(
        store: &mut ParamStore,
        prefix: &str,
        window: usize,
        heads: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let side = 2 * window - 1;
        let table = store.register(
            &format!("{prefix}.rel_pos_table"),
            init::trunc_normal(rng, &[side * side, heads], 0.02),
        );
        let l = window * window;
        let mut index = Vec::with_capacity(l * l);
        for a in 0..l {
            let (ai, aj) = (a / window, a % window);
            for b in 0..l {
                let (bi, bj) = (b / window, b % window);
                let di = ai as isize - bi as isize + window as isize - 1;
                let dj = aj as isize - bj as isize + window as isize - 1;
                index.push(di as usize * side + dj as usize);
            }
        }
        Self {
            table,
            index,
            window,
            heads,
        }
    }

    /// Bias tensor [heads, L, L], L = window^2.
    pub fn bias(&self) -> Tensor {
        let l = self.window * self.window;
        self.table
            .tensor()
            .index_select(0, &self.index)
            .reshape(&[l, l, self.heads])
            .permute(&[2, 0, 1])
    }
}

/// [B, H, W, C] -> [B*nW, ws*ws, C], windows in row-major order per image.
pub fn window_partition(x: &Tensor, ws: usize) -> Tensor {
    let s = x.shape().to_vec();
    let (b, h, w, c) = (s[0], s[1], s[2], s[3]);
    assert!(h % ws == 0 && w % ws == 0, "window size must divide spatial dims");
    x.reshape(&[b, h / ws, ws, w / ws, ws, c])
        .permute(&[0, 1, 3, 2, 4, 5])
        .reshape(&[b * (h / ws) * (w / ws), ws * ws, c])
}

/// Inverse of [`window_partition`].
pub fn window_reverse(win: &Tensor, ws: usize, b: usize, h: usize, w: usize) -> Tensor {
    let c = win.shape()[2];
    win.reshape(&[b, h / ws, w / ws, ws, ws, c])
        .permute(&[0, 1, 3, 2, 4, 5])
        .reshape(&[b, h, w, c])
}

/// Cyclic shift of the two spatial axes of [B, H, W, C].
pub fn roll2d(x: &Tensor, shift_h: isize, shift_w: isize) -> Tensor {
    let s = x.shape().to_vec();
    let rot = |n: usize, shift: isize| -> Vec<usize> {
        let n_i = n as isize;
        (0..n_i)
            .map(|i| (((i - shift) % n_i + n_i) % n_i) as usize)
            .collect()
    };
    let mut out = x.clone();
    if shift_h != 0 {
        out = out.index_select(1, &rot(s[1], shift_h));
    }
    if shift_w != 0 {
        out = out.index_select(2, &rot(s[2], shift_w));
    }
    out
}

/// Additive attention mask for shifted windows: [nW, L, L] with 0 inside a
/// contiguous region and -1e9 across region boundaries.
pub fn shift_attn_mask(h: usize, w: usize, ws: usize, shift: usize) -> Arr {
    let l = ws * ws;
    let nw = (h / ws) * (w / ws);
    let mut region = ndarray::Array2::<f64>::zeros((h, w));
    let mut id = 0.0;
    let cuts = |n: usize| vec![0..n - ws, n - ws..n - shift, n - shift..n];
    for hr in cuts(h) {
        for wr in cuts(w) {
            for i in hr.clone() {
                for j in wr.clone() {
                    region[[i, j]] = id;
                }
            }
            id += 1.0;
        }
    }
    // The region layout above lives in the rolled feature frame (features
    // are shifted by -shift before partitioning), so windows index it directly.
    let mut mask = Arr::zeros(IxDyn(&[nw, l, l]));
    let mut widx = 0;
    for wi in 0..h / ws {
        for wj in 0..w / ws {
            let mut ids = Vec::with_capacity(l);
            for di in 0..ws {
                for dj in 0..ws {
                    ids.push(region[[wi * ws + di, wj * ws + dj]]);
                }
            }
            for a in 0..l {
                for b in 0..l {
                    if ids[a] != ids[b] {
                        mask[[widx, a, b]] = -1e9;
                    }
                }
            }
            widx += 1;
        }
    }
    mask
}

/// Kernelized linear attention with positive random features. The feature
/// map is a fixed seeded projection, so the layer is deterministic. Falls
/// back to exact softmax attention when `exact` is set.
pub struct LinearAttention {
    pub q: LoraLinear,
    pub k: LoraLinear,
    pub v: LoraLinear,
    pub out: LoraLinear,
    features: Arr,
    dim: usize,
    exact: bool,
}

impl LinearAttention {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        prefix: &str,
        dim: usize,
        n_features: usize,
        feature_seed: u64,
        init: Init,
        rng: &mut ChaCha20Rng,
        exact: bool,
    ) -> Self {
        use rand::SeedableRng;
        let mut frng = ChaCha20Rng::seed_from_u64(feature_seed);
        let features = init::normal(&mut frng, &[dim, n_features], 1.0);
        let mk = |store: &mut ParamStore, name: &str, rng: &mut ChaCha20Rng| {
            LoraLinear::new(
                store,
                &format!("{prefix}.{name}"),
                dim,
                dim,
                true,
                init,
                rng,
                None,
            )
        };
        Self {
            q: mk(store, "q", rng),
            k: mk(store, "k", rng),
            v: mk(store, "v", rng),
            out: mk(store, "out", rng),
            features,
            dim,
            exact,
        }
    }

    /// phi(x) = exp(x W - |x|^2/2) / sqrt(m), elementwise positive.
    fn feature_map(&self, x: &Tensor) -> Tensor {
        let s = x.shape().to_vec();
        let (b, l) = (s[0], s[1]);
        let m = self.features.shape()[1];
        let w = Tensor::constant(self.features.clone());
        let proj = x.reshape(&[b * l, self.dim]).matmul(&w);
        let sq = x
            .reshape(&[b * l, self.dim])
            .sqr()
            .sum_axis_keep(1)
            .scale(0.5);
        proj.sub(&sq).exp().scale(1.0 / (m as f64).sqrt()).reshape(&[b, l, m])
    }

    /// Self-attention over [B, L, D] in O(L m D) instead of O(L^2 D).
    pub fn forward(&self, x: &Tensor) -> Tensor {
        let q = self.q.forward(x);
        let k = self.k.forward(x);
        let v = self.v.forward(x);
        let ctx = if self.exact {
            let (b, l) = (x.shape()[0], x.shape()[1]);
            let scale = 1.0 / (self.dim as f64).sqrt();
            let scores = q.bmm(&k.permute(&[0, 2, 1])).scale(scale);
            scores
                .softmax_last()
                .bmm(&v)
                .reshape(&[b, l, self.dim])
        } else {
            let qf = self.feature_map(&q.scale(1.0 / (self.dim as f64).sqrt().sqrt()));
            let kf = self.feature_map(&k.scale(1.0 / (self.dim as f64).sqrt().sqrt()));
            // out_i = qf_i (kf^T v) / (qf_i sum_j kf_j)
            let kv = kf.permute(&[0, 2, 1]).bmm(&v); // [B, m, D]
            let num = qf.bmm(&kv); // [B, L, D]
            let ksum = kf.sum_axis_keep(1); // [B, 1, m]
            let den = qf.bmm(&ksum.permute(&[0, 2, 1])).add_scalar(1e-9); // [B, L, 1]
            num.div(&den)
        };
        self.out.forward(&ctx)
    }
}
