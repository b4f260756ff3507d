//! Noise-prediction UNet. Conditioning enters two ways: the (possibly
//! fractional) timestep through a sinusoidal embedding and MLP added inside
//! every residual block, and the prompt embedding through cross-attention at
//! every resolution level. Attention projections optionally carry low-rank
//! adapters so stage 2 can train deltas while the base stays frozen.

use rand_chacha::ChaCha20Rng;

use crate::error::{Error, Result};
use crate::nn::attention::{LoraSpec, MultiHeadAttention};
use crate::nn::params::ParamStore;
use crate::nn::{timestep_embedding, Conv2dLayer, GroupNorm, Init, LayerNorm, Linear, Mlp};
use crate::tensor::Tensor;

#[derive(Clone, Debug, serde::Serialize, serde::Deserialize)]
pub struct UnetConfig {
    /// Latent channels in and out.
    pub c_z: usize,
    /// Width per resolution level, shallow to deep.
    pub channels: Vec<usize>,
    /// Cross-attention key/value width (the prompt embedding width D).
    pub prompt_dim: usize,
    /// Attention heads; divides every level width.
    pub heads: usize,
    /// Timestep embedding width, even.
    pub t_emb_dim: usize,
}

impl Default for UnetConfig {
    fn default() -> Self {
        Self {
            c_z: 4,
            channels: vec![64, 128, 256],
            prompt_dim: 64,
            heads: 4,
            t_emb_dim: 256,
        }
    }
}

impl UnetConfig {
    /// Small config for tests and toy runs.
    pub fn tiny() -> Self {
        Self {
            c_z: 2,
            channels: vec![4, 8],
            prompt_dim: 8,
            heads: 2,
            t_emb_dim: 8,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.channels.is_empty() {
            return Err(Error::Domain("channels must be non-empty".into()));
        }
        if self.c_z == 0 || self.prompt_dim == 0 || self.heads == 0 {
            return Err(Error::Domain("c_z, prompt_dim, heads must be positive".into()));
        }
        if self.t_emb_dim == 0 || self.t_emb_dim % 2 != 0 {
            return Err(Error::Domain("t_emb_dim must be positive and even".into()));
        }
        for &c in &self.channels {
            if c == 0 || c % self.heads != 0 {
                return Err(Error::Domain(format!(
                    "level width {c} must be positive and divisible by heads {}",
                    self.heads
                )));
            }
        }
        Ok(())
    }

    /// Latent dims must be multiples of this for the down/up path to close.
    pub fn spatial_multiple(&self) -> usize {
        1 << (self.channels.len() - 1)
    }
}

#[derive(Clone, Copy, Debug, serde::Serialize, serde::Deserialize)]
pub struct LoraConfig {
    pub rank: usize,
    pub scale: f64,
}

impl Default for LoraConfig {
    fn default() -> Self {
        Self {
            rank: 16,
            scale: 1.0,
        }
    }
}

pub(crate) fn groups_for(c: usize) -> usize {
    [8usize, 4, 2, 1].into_iter().find(|g| c % g == 0).unwrap()
}

pub(crate) struct ResBlock {
    norm1: GroupNorm,
    conv1: Conv2dLayer,
    t_proj: Linear,
    norm2: GroupNorm,
    conv2: Conv2dLayer,
    skip: Option<Conv2dLayer>,
    c_out: usize,
}

impl ResBlock {
    pub(crate) fn new(
        store: &mut ParamStore,
        prefix: &str,
        c_in: usize,
        c_out: usize,
        t_dim: usize,
        rng: &mut ChaCha20Rng,
    ) -> Self {
        let init = Init::He;
        let norm1 = GroupNorm::new(store, &format!("{prefix}.norm1"), groups_for(c_in), c_in);
        let conv1 = Conv2dLayer::new(store, &format!("{prefix}.conv1"), c_in, c_out, 3, 1, 1, init, rng);
        let t_proj = Linear::new(store, &format!("{prefix}.t_proj"), t_dim, c_out, true, init, rng);
        let norm2 = GroupNorm::new(store, &format!("{prefix}.norm2"), groups_for(c_out), c_out);
        let conv2 = Conv2dLayer::new(store, &format!("{prefix}.conv2"), c_out, c_out, 3, 1, 1, init, rng);
        let skip = (c_in != c_out).then(|| {
            Conv2dLayer::new(store, &format!("{prefix}.skip"), c_in, c_out, 1, 1, 0, init, rng)
        });
        Self {
            norm1,
            conv1,
            t_proj,
            norm2,
            conv2,
            skip,
            c_out,
        }
    }

    pub(crate) fn forward(&self, x: &Tensor, t_emb: &Tensor) -> Tensor {
        let b = x.shape()[0];
        let h = self.conv1.forward(&self.norm1.forward(x).silu());
        let tb = self.t_proj.forward(t_emb).reshape(&[b, self.c_out, 1, 1]);
        // The shift goes in after the norm: a per-channel constant added
        // before normalization would be cancelled by mean subtraction.
        let h = self.norm2.forward(&h).add(&tb);
        let h = self.conv2.forward(&h.silu());
        let sk = match &self.skip {
            Some(c) => c.forward(x),
            None => x.clone(),
        };
        sk.add(&h)
    }
}

struct CrossBlock {
    norm1: LayerNorm,
    attn: MultiHeadAttention,
    norm2: LayerNorm,
    mlp: Mlp,
}

impl CrossBlock {
    fn new(
        store: &mut ParamStore,
        prefix: &str,
        dim: usize,
        prompt_dim: usize,
        heads: usize,
        rng: &mut ChaCha20Rng,
        lora: Option<&mut LoraSpec>,
    ) -> Self {
        let init = Init::TruncNormal(0.02);
        let norm1 = LayerNorm::new(store, &format!("{prefix}.norm1"), dim);
        let attn = MultiHeadAttention::new(
            store,
            &format!("{prefix}.attn"),
            dim,
            prompt_dim,
            heads,
            init,
            rng,
            lora,
        );
        let norm2 = LayerNorm::new(store, &format!("{prefix}.norm2"), dim);
        let mlp = Mlp::new(store, &format!("{prefix}.mlp"), dim, dim * 2, init, rng);
        Self {
            norm1,
            attn,
            norm2,
            mlp,
        }
    }

    fn forward(&self, x: &Tensor, prompt: &Tensor) -> Tensor {
        let s = x.shape().to_vec();
        let (b, c, h, w) = (s[0], s[1], s[2], s[3]);
        let tokens = x.permute(&[0, 2, 3, 1]).reshape(&[b, h * w, c]);
        let t = tokens.add(&self.attn.forward(&self.norm1.forward(&tokens), prompt, None));
        let t = t.add(&self.mlp.forward(&self.norm2.forward(&t)));
        t.reshape(&[b, h, w, c]).permute(&[0, 3, 1, 2])
    }
}

struct DownLevel {
    res: ResBlock,
    attn: CrossBlock,
    down: Option<Conv2dLayer>,
}

struct UpLevel {
    up_conv: Conv2dLayer,
    res: ResBlock,
    attn: CrossBlock,
}

pub struct Unet {
    cfg: UnetConfig,
    t_lin1: Linear,
    t_lin2: Linear,
    in_conv: Conv2dLayer,
    down: Vec<DownLevel>,
    mid_res1: ResBlock,
    mid_attn: CrossBlock,
    mid_res2: ResBlock,
    up: Vec<UpLevel>,
    out_norm: GroupNorm,
    out_conv: Conv2dLayer,
}

impl Unet {
    pub fn new(
        store: &mut ParamStore,
        cfg: &UnetConfig,
        rng: &mut ChaCha20Rng,
        mut lora: Option<&mut LoraSpec>,
    ) -> Result<Self> {
        cfg.validate()?;
        let init = Init::He;
        let td = cfg.t_emb_dim;
        let t_lin1 = Linear::new(store, "unet.t1", td, td, true, init, rng);
        let t_lin2 = Linear::new(store, "unet.t2", td, td, true, init, rng);
        let ch = &cfg.channels;
        let n = ch.len();
        let in_conv = Conv2dLayer::new(store, "unet.in", cfg.c_z, ch[0], 3, 1, 1, init, rng);

        let mut down = Vec::new();
        for i in 0..n {
            let c_in = if i == 0 { ch[0] } else { ch[i - 1] };
            let res = ResBlock::new(store, &format!("unet.down{i}.res"), c_in, ch[i], td, rng);
            let attn = CrossBlock::new(
                store,
                &format!("unet.down{i}.attn"),
                ch[i],
                cfg.prompt_dim,
                cfg.heads,
                rng,
                lora.as_mut().map(|l| &mut **l),
            );
            let down_conv = (i + 1 < n).then(|| {
                Conv2dLayer::new(
                    store,
                    &format!("unet.down{i}.down"),
                    ch[i],
                    ch[i],
                    3,
                    2,
                    1,
                    init,
                    rng,
                )
            });
            down.push(DownLevel {
                res,
                attn,
                down: down_conv,
            });
        }

        let deep = *ch.last().unwrap();
        let mid_res1 = ResBlock::new(store, "unet.mid.res1", deep, deep, td, rng);
        let mid_attn = CrossBlock::new(
            store,
            "unet.mid.attn",
            deep,
            cfg.prompt_dim,
            cfg.heads,
            rng,
            lora.as_mut().map(|l| &mut **l),
        );
        let mid_res2 = ResBlock::new(store, "unet.mid.res2", deep, deep, td, rng);

        let mut up = Vec::new();
        for i in (0..n.saturating_sub(1)).rev() {
            let up_conv = Conv2dLayer::new(
                store,
                &format!("unet.up{i}.conv"),
                ch[i + 1],
                ch[i],
                3,
                1,
                1,
                init,
                rng,
            );
            let res = ResBlock::new(store, &format!("unet.up{i}.res"), 2 * ch[i], ch[i], td, rng);
            let attn = CrossBlock::new(
                store,
                &format!("unet.up{i}.attn"),
                ch[i],
                cfg.prompt_dim,
                cfg.heads,
                rng,
                lora.as_mut().map(|l| &mut **l),
            );
            up.push(UpLevel { up_conv, res, attn });
        }

        let out_norm = GroupNorm::new(store, "unet.out_norm", groups_for(ch[0]), ch[0]);
        let out_conv = Conv2dLayer::new(store, "unet.out", ch[0], cfg.c_z, 3, 1, 1, init, rng);
        Ok(Self {
            cfg: cfg.clone(),
            t_lin1,
            t_lin2,
            in_conv,
            down,
            mid_res1,
            mid_attn,
            mid_res2,
            up,
            out_norm,
            out_conv,
        })
    }

    pub fn config(&self) -> &UnetConfig {
        &self.cfg
    }

    /// z: [B, c_z, H, W]; prompt: [B, L, prompt_dim]; t: [B] fractional
    /// timesteps (differentiable). Returns the predicted noise, same shape
    /// as z.
    pub fn predict_noise(&self, z: &Tensor, prompt: &Tensor, t: &Tensor) -> Result<Tensor> {
        let s = z.shape();
        if s.len() != 4 || s[1] != self.cfg.c_z {
            return Err(Error::Shape(format!(
                "expected [B, {}, H, W] latent, got {s:?}",
                self.cfg.c_z
            )));
        }
        let ps = prompt.shape();
        if ps.len() != 3 || ps[2] != self.cfg.prompt_dim {
            return Err(Error::Shape(format!(
                "prompt width mismatch: expected [B, L, {}], got {ps:?}",
                self.cfg.prompt_dim
            )));
        }
        if ps[0] != s[0] {
            return Err(Error::Shape(format!(
                "prompt batch {} vs latent batch {}",
                ps[0], s[0]
            )));
        }
        if t.shape() != [s[0]] {
            return Err(Error::Shape(format!(
                "timestep shape {:?}, expected [{}]",
                t.shape(),
                s[0]
            )));
        }
        let m = self.cfg.spatial_multiple();
        if s[2] % m != 0 || s[3] % m != 0 {
            return Err(Error::Shape(format!(
                "latent {}x{} not a multiple of {m}",
                s[2], s[3]
            )));
        }

        let t_emb = timestep_embedding(t, self.cfg.t_emb_dim);
        let t_emb = self.t_lin2.forward(&self.t_lin1.forward(&t_emb).silu());

        let mut h = self.in_conv.forward(z);
        let mut skips = Vec::new();
        for level in &self.down {
            h = level.res.forward(&h, &t_emb);
            h = level.attn.forward(&h, prompt);
            if let Some(dc) = &level.down {
                skips.push(h.clone());
                h = dc.forward(&h);
            }
        }

        h = self.mid_res1.forward(&h, &t_emb);
        h = self.mid_attn.forward(&h, prompt);
        h = self.mid_res2.forward(&h, &t_emb);

        for level in &self.up {
            h = level.up_conv.forward(&h.upsample_nearest2x());
            let skip = skips.pop().expect("skip per up level");
            h = Tensor::concat(&[h, skip], 1);
            h = level.res.forward(&h, &t_emb);
            h = level.attn.forward(&h, prompt);
        }

        Ok(self.out_conv.forward(&self.out_norm.forward(&h).silu()))
    }
}
