//! Semantic prompt extractor. One shared encoder maps a degraded image to a
//! quarter-resolution feature map; a decoder branch reconstructs the clean
//! image from it (training signal only), and a guidance branch pools the
//! features into a fixed-length embedding aligned with text embeddings, which
//! later conditions the denoiser.

pub mod swin;

use ndarray::IxDyn;
use rand_chacha::ChaCha20Rng;

use crate::error::{Error, Result};
use crate::nn::attention::{LinearAttention, MultiHeadAttention};
use crate::nn::params::{Param, ParamStore};
use crate::nn::{init, Conv2dLayer, Init, LayerNorm, Linear, Mlp};
use crate::tensor::{Arr, Tensor};
use std::rc::Rc;
use swin::Rstb;

#[derive(Clone, Debug, serde::Serialize, serde::Deserialize)]
pub struct SaipeConfig {
    /// Encoder channel width after the stem.
    pub c_f: usize,
    /// Residual transformer groups in the encoder.
    pub rstb_count: usize,
    /// Transformer blocks per encoder group. The decoder uses half, at
    /// least one.
    pub stl_per_rstb: usize,
    /// Learnable query count L of the guidance embedding.
    pub query_count: usize,
    /// Guidance embedding width D, shared with text embeddings.
    pub embed_dim: usize,
    /// Weight on the embedding-alignment term of the loss.
    pub lambda_align: f64,
    /// Attention window side at feature resolution.
    pub window: usize,
    /// Heads in windowed attention (divides c_f).
    pub heads: usize,
    /// Heads in the guidance pooling attention (divides embed_dim).
    pub embed_heads: usize,
    /// Hidden width multiplier of transformer MLPs.
    pub mlp_ratio: f64,
    /// Position information (relative bias in windows, sinusoidal in the
    /// guidance branch). Off makes the guidance branch permutation
    /// invariant, which tests exploit.
    pub pos_enc: bool,
    /// Replace the guidance branch's multi-scale 3x3 convs with a single
    /// 1x1 conv. Test configs use this together with pos_enc=false.
    pub pointwise_embedder: bool,
    /// Exact softmax instead of kernelized attention in the guidance
    /// encoder.
    pub exact_attention: bool,
    /// Random feature count of the kernelized attention.
    pub linear_features: usize,
}

impl Default for SaipeConfig {
    fn default() -> Self {
        Self {
            c_f: 180,
            rstb_count: 2,
            stl_per_rstb: 2,
            query_count: 77,
            embed_dim: 64,
            lambda_align: 0.5,
            window: 8,
            heads: 6,
            embed_heads: 4,
            mlp_ratio: 2.0,
            pos_enc: true,
            pointwise_embedder: false,
            exact_attention: false,
            linear_features: 64,
        }
    }
}

impl SaipeConfig {
    /// Small config for tests and toy runs.
    pub fn tiny() -> Self {
        Self {
            c_f: 16,
            rstb_count: 2,
            stl_per_rstb: 2,
            query_count: 8,
            embed_dim: 16,
            window: 4,
            heads: 2,
            embed_heads: 2,
            linear_features: 16,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("c_f", self.c_f),
            ("rstb_count", self.rstb_count),
            ("stl_per_rstb", self.stl_per_rstb),
            ("query_count", self.query_count),
            ("embed_dim", self.embed_dim),
            ("window", self.window),
            ("heads", self.heads),
            ("embed_heads", self.embed_heads),
            ("linear_features", self.linear_features),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Domain(format!("{name} must be positive")));
            }
        }
        if self.lambda_align < 0.0 {
            return Err(Error::Domain("lambda_align must be >= 0".into()));
        }
        if self.mlp_ratio <= 0.0 {
            return Err(Error::Domain("mlp_ratio must be positive".into()));
        }
        if self.c_f % self.heads != 0 {
            return Err(Error::Domain(format!(
                "c_f {} not divisible by heads {}",
                self.c_f, self.heads
            )));
        }
        if self.embed_dim % self.embed_heads != 0 {
            return Err(Error::Domain(format!(
                "embed_dim {} not divisible by embed_heads {}",
                self.embed_dim, self.embed_heads
            )));
        }
        if self.c_f < 4 {
            return Err(Error::Domain("c_f must be at least 4".into()));
        }
        Ok(())
    }

    /// Input spatial dims must be multiples of this (stem downsamples by 4,
    /// then windows tile the feature grid).
    pub fn spatial_multiple(&self) -> usize {
        4 * self.window
    }
}

pub struct SaipeEncoder {
    stem1: Conv2dLayer,
    stem2: Conv2dLayer,
    rstbs: Vec<Rstb>,
    window: usize,
}

impl SaipeEncoder {
    fn new(store: &mut ParamStore, cfg: &SaipeConfig, rng: &mut ChaCha20Rng) -> Self {
        let init = Init::TruncNormal(0.02);
        let mid = (cfg.c_f / 2).max(1);
        let stem1 = Conv2dLayer::new(store, "enc.stem1", 3, mid, 3, 2, 1, init, rng);
        let stem2 = Conv2dLayer::new(store, "enc.stem2", mid, cfg.c_f, 3, 2, 1, init, rng);
        let rstbs = (0..cfg.rstb_count)
            .map(|i| {
                Rstb::new(
                    store,
                    &format!("enc.rstb{i}"),
                    cfg.c_f,
                    cfg.heads,
                    cfg.window,
                    cfg.stl_per_rstb,
                    cfg.mlp_ratio,
                    cfg.pos_enc,
                    rng,
                )
            })
            .collect();
        Self {
            stem1,
            stem2,
            rstbs,
            window: cfg.window,
        }
    }

    /// [B, 3, H, W] -> [B, c_f, H/4, W/4].
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let s = x.shape();
        if s.len() != 4 || s[1] != 3 {
            return Err(Error::Shape(format!("expected [B, 3, H, W], got {s:?}")));
        }
        let (h, w) = (s[2], s[3]);
        let m = 4 * self.window;
        if h % m != 0 || w % m != 0 {
            return Err(Error::Shape(format!(
                "input {h}x{w} not a multiple of {m} (pad first)"
            )));
        }
        let f = self.stem1.forward(x).gelu();
        let mut f = self.stem2.forward(&f).gelu();
        for r in &self.rstbs {
            f = r.forward(&f);
        }
        Ok(f)
    }
}

pub struct SaipeDecoder {
    rstbs: Vec<Rstb>,
    norm: LayerNorm,
    up1: Conv2dLayer,
    up2: Conv2dLayer,
    out: Conv2dLayer,
    c_f: usize,
}

impl SaipeDecoder {
    fn new(store: &mut ParamStore, cfg: &SaipeConfig, rng: &mut ChaCha20Rng) -> Self {
        let init = Init::TruncNormal(0.02);
        let stl = (cfg.stl_per_rstb / 2).max(1);
        let rstbs = (0..cfg.rstb_count)
            .map(|i| {
                Rstb::new(
                    store,
                    &format!("dec.rstb{i}"),
                    cfg.c_f,
                    cfg.heads,
                    cfg.window,
                    stl,
                    cfg.mlp_ratio,
                    cfg.pos_enc,
                    rng,
                )
            })
            .collect();
        let norm = LayerNorm::new(store, "dec.norm", cfg.c_f);
        let c2 = (cfg.c_f / 2).max(1);
        let c4 = (cfg.c_f / 4).max(1);
        let up1 = Conv2dLayer::new(store, "dec.up1", cfg.c_f, c2, 3, 1, 1, init, rng);
        let up2 = Conv2dLayer::new(store, "dec.up2", c2, c4, 3, 1, 1, init, rng);
        let out = Conv2dLayer::new(store, "dec.out", c4, 3, 3, 1, 1, init, rng);
        Self {
            rstbs,
            norm,
            up1,
            up2,
            out,
            c_f: cfg.c_f,
        }
    }

    /// [B, c_f, h, w] -> [B, 3, 4h, 4w].
    pub fn forward(&self, f: &Tensor) -> Result<Tensor> {
        let s = f.shape();
        if s.len() != 4 || s[1] != self.c_f {
            return Err(Error::Shape(format!(
                "expected [B, {}, h, w] feature map, got {s:?}",
                self.c_f
            )));
        }
        if f.has_nan() {
            return Err(Error::Numeric("feature map contains NaN".into()));
        }
        let mut t = f.clone();
        for r in &self.rstbs {
            t = r.forward(&t);
        }
        let t = self
            .norm
            .forward(&t.permute(&[0, 2, 3, 1]))
            .permute(&[0, 3, 1, 2]);
        let t = self.up1.forward(&t.upsample_nearest2x()).gelu();
        let t = self.up2.forward(&t.upsample_nearest2x()).gelu();
        Ok(self.out.forward(&t))
    }
}

/// Pools a feature map into L guidance tokens: per-position projection,
/// one efficient-attention mixing block, key/value extraction convs, then
/// cross-attention against learnable queries.
pub struct GuidanceEmbedder {
    in_proj: Linear,
    in_mlp: Mlp,
    enc_norm1: LayerNorm,
    enc_attn: LinearAttention,
    enc_norm2: LayerNorm,
    enc_mlp: Mlp,
    scale_convs: Vec<Conv2dLayer>,
    queries: Rc<Param>,
    pool: MultiHeadAttention,
    query_count: usize,
    embed_dim: usize,
    pos_enc: bool,
    pointwise: bool,
    c_f: usize,
}

impl GuidanceEmbedder {
    fn new(store: &mut ParamStore, cfg: &SaipeConfig, rng: &mut ChaCha20Rng) -> Self {
        let init = Init::TruncNormal(0.02);
        let d = cfg.embed_dim;
        let hidden = ((d as f64) * cfg.mlp_ratio).round() as usize;
        let in_proj = Linear::new(store, "emb.in_proj", cfg.c_f, d, true, init, rng);
        let in_mlp = Mlp::new(store, "emb.in_mlp", d, hidden, init, rng);
        let enc_norm1 = LayerNorm::new(store, "emb.enc_norm1", d);
        let enc_attn = LinearAttention::new(
            store,
            "emb.enc_attn",
            d,
            cfg.linear_features,
            0x5a1fe,
            init,
            rng,
            cfg.exact_attention,
        );
        let enc_norm2 = LayerNorm::new(store, "emb.enc_norm2", d);
        let enc_mlp = Mlp::new(store, "emb.enc_mlp", d, hidden, init, rng);
        let scale_convs = if cfg.pointwise_embedder {
            vec![Conv2dLayer::new(
                store, "emb.scale0", d, d, 1, 1, 0, init, rng,
            )]
        } else {
            // Strides 1, 2, 2: full, half, quarter resolution key/values
            // with independent weights.
            (0..3)
                .map(|i| {
                    let stride = if i == 0 { 1 } else { 2 };
                    Conv2dLayer::new(
                        store,
                        &format!("emb.scale{i}"),
                        d,
                        d,
                        3,
                        stride,
                        1,
                        init,
                        rng,
                    )
                })
                .collect()
        };
        let queries = store.register(
            "emb.queries",
            init::trunc_normal(rng, &[cfg.query_count, d], 0.02),
        );
        let pool = MultiHeadAttention::new(
            store,
            "emb.pool",
            d,
            d,
            cfg.embed_heads,
            init,
            rng,
            None,
        );
        Self {
            in_proj,
            in_mlp,
            enc_norm1,
            enc_attn,
            enc_norm2,
            enc_mlp,
            scale_convs,
            queries,
            pool,
            query_count: cfg.query_count,
            embed_dim: cfg.embed_dim,
            pos_enc: cfg.pos_enc,
            pointwise: cfg.pointwise_embedder,
            c_f: cfg.c_f,
        }
    }

    /// [B, c_f, h, w] -> [B, L, D].
    pub fn forward(&self, f: &Tensor) -> Result<Tensor> {
        let s = f.shape();
        if s.len() != 4 || s[1] != self.c_f {
            return Err(Error::Shape(format!(
                "expected [B, {}, h, w] feature map, got {s:?}",
                self.c_f
            )));
        }
        let (b, h, w) = (s[0], s[2], s[3]);
        let tokens = f.permute(&[0, 2, 3, 1]).reshape(&[b, h * w, self.c_f]);
        let mut x = self.in_proj.forward(&tokens);
        if self.pos_enc {
            x = x.add(&Tensor::constant(sincos_pos2d(h, w, self.embed_dim)));
        }
        x = x.add(&self.in_mlp.forward(&x));
        x = x.add(&self.enc_attn.forward(&self.enc_norm1.forward(&x)));
        x = x.add(&self.enc_mlp.forward(&self.enc_norm2.forward(&x)));

        let grid = x.reshape(&[b, h, w, self.embed_dim]).permute(&[0, 3, 1, 2]);
        let mut kv_parts = Vec::new();
        if self.pointwise {
            kv_parts.push(to_tokens(&self.scale_convs[0].forward(&grid).gelu()));
        } else {
            let s1 = self.scale_convs[0].forward(&grid).gelu();
            let s2 = self.scale_convs[1].forward(&s1).gelu();
            let s4 = self.scale_convs[2].forward(&s2).gelu();
            kv_parts.push(to_tokens(&s1));
            kv_parts.push(to_tokens(&s2));
            kv_parts.push(to_tokens(&s4));
        }
        let kv = Tensor::concat(&kv_parts, 1);

        let q = self
            .queries
            .tensor()
            .reshape(&[1, self.query_count, self.embed_dim])
            .broadcast_to(&[b, self.query_count, self.embed_dim]);
        Ok(self.pool.forward(&q, &kv, None))
    }
}

/// [B, C, h, w] -> [B, h*w, C].
fn to_tokens(x: &Tensor) -> Tensor {
    let s = x.shape();
    x.permute(&[0, 2, 3, 1]).reshape(&[s[0], s[2] * s[3], s[1]])
}

/// Fixed sinusoidal 2D position table, [h*w, d]. Rows use the first half of
/// the channels, columns the rest.
fn sincos_pos2d(h: usize, w: usize, d: usize) -> Arr {
    let dh = d / 2;
    let dw = d - dh;
    let mut out = Arr::zeros(IxDyn(&[h * w, d]));
    let fill = |out: &mut Arr, p: usize, base: usize, n: usize, pos: f64| {
        for k in 0..n {
            let freq = (10000f64).powf(-((k / 2 * 2) as f64) / n as f64);
            let v = pos * freq;
            out[[p, base + k]] = if k % 2 == 0 { v.sin() } else { v.cos() };
        }
    };
    for i in 0..h {
        for j in 0..w {
            let p = i * w + j;
            fill(&mut out, p, 0, dh, i as f64);
            fill(&mut out, p, dh, dw, j as f64);
        }
    }
    out
}

/// The full extractor: shared encoder, reconstruction decoder, guidance
/// embedder.
pub struct Saipe {
    pub cfg: SaipeConfig,
    pub encoder: SaipeEncoder,
    pub decoder: SaipeDecoder,
    pub embedder: GuidanceEmbedder,
}

impl Saipe {
    pub fn new(store: &mut ParamStore, cfg: &SaipeConfig, rng: &mut ChaCha20Rng) -> Result<Self> {
        cfg.validate()?;
        Ok(Self {
            cfg: cfg.clone(),
            encoder: SaipeEncoder::new(store, cfg, rng),
            decoder: SaipeDecoder::new(store, cfg, rng),
            embedder: GuidanceEmbedder::new(store, cfg, rng),
        })
    }

    /// [B, 3, H, W] image -> [B, c_f, H/4, W/4] features.
    pub fn encode(&self, x: &Tensor) -> Result<Tensor> {
        self.encoder.forward(x)
    }

    /// Features -> [B, 3, H, W] reconstruction.
    pub fn decode(&self, f: &Tensor) -> Result<Tensor> {
        self.decoder.forward(f)
    }

    /// Features -> [B, L, D] guidance embedding.
    pub fn embed_guidance(&self, f: &Tensor) -> Result<Tensor> {
        self.embedder.forward(f)
    }
}

pub struct SaipeLossParts {
    pub total: Tensor,
    pub rec: Tensor,
    pub align: Tensor,
}

/// total = L1(rec, target) + lambda * MSE(e_img, e_text).
pub fn saipe_loss(
    rec: &Tensor,
    target: &Tensor,
    e_img: &Tensor,
    e_text: &Tensor,
    lambda_align: f64,
) -> Result<SaipeLossParts> {
    if rec.shape() != target.shape() {
        return Err(Error::Shape(format!(
            "reconstruction {:?} vs target {:?}",
            rec.shape(),
            target.shape()
        )));
    }
    if e_img.shape() != e_text.shape() {
        return Err(Error::Shape(format!(
            "image embedding {:?} vs text embedding {:?}",
            e_img.shape(),
            e_text.shape()
        )));
    }
    let rec_l = rec.l1(target);
    let align = e_img.mse(e_text);
    let total = rec_l.add(&align.scale(lambda_align));
    Ok(SaipeLossParts {
        total,
        rec: rec_l,
        align,
    })
}
