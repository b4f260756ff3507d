//! Neural-net building blocks on top of the tensor engine: named
//! parameters, common layers, and attention.

pub mod attention;
pub mod init;
pub mod params;

pub use params::{hex, Param, ParamStore};

use std::rc::Rc;

use rand::Rng;

use crate::tensor::Tensor;

/// Initialization family for a layer's weight.
#[derive(Clone, Copy, Debug)]
pub enum Init {
    /// Truncated normal with the given sigma.
    TruncNormal(f64),
    /// He normal, scaled by fan-in.
    He,
    Zeros,
}

fn init_weight(rng: &mut impl Rng, shape: &[usize], fan_in: usize, init: Init) -> crate::Arr {
    match init {
        Init::TruncNormal(s) => init::trunc_normal(rng, shape, s),
        Init::He => init::he_normal(rng, shape, fan_in),
        Init::Zeros => init::zeros(shape),
    }
}

/// Dense layer over the last axis: `[.., in] -> [.., out]`.
pub struct Linear {
    pub w: Rc<Param>,
    pub b: Option<Rc<Param>>,
    d_in: usize,
    d_out: usize,
}

impl Linear {
    pub fn new(
        store: &mut ParamStore,
        prefix: &str,
        d_in: usize,
        d_out: usize,
        bias: bool,
        init: Init,
        rng: &mut impl Rng,
    ) -> Self {
        let w = store.register(
            &format!("{prefix}.weight"),
            init_weight(rng, &[d_in, d_out], d_in, init),
        );
        let b = bias.then(|| store.register(&format!("{prefix}.bias"), init::zeros(&[d_out])));
        Self { w, b, d_in, d_out }
    }

    pub fn forward(&self, x: &Tensor) -> Tensor {
        let shape = x.shape().to_vec();
        let last = *shape.last().expect("linear input rank >= 1");
        assert_eq!(last, self.d_in, "linear expects {} features, got {last}", self.d_in);
        let n: usize = shape[..shape.len() - 1].iter().product();
        let flat = x.reshape(&[n, self.d_in]);
        let mut y = flat.matmul(&self.w.tensor());
        if let Some(b) = &self.b {
            y = y.add(&b.tensor());
        }
        let mut out_shape = shape;
        *out_shape.last_mut().unwrap() = self.d_out;
        y.reshape(&out_shape)
    }
}

/// Convolution layer (NCHW). `replicate` switches the padding fill from
/// zeros to edge replication.
pub struct Conv2dLayer {
    pub w: Rc<Param>,
    pub b: Option<Rc<Param>>,
    stride: usize,
    pad: usize,
    replicate: bool,
}

impl Conv2dLayer {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        prefix: &str,
        c_in: usize,
        c_out: usize,
        k: usize,
        stride: usize,
        pad: usize,
        init: Init,
        rng: &mut impl Rng,
    ) -> Self {
        let w = store.register(
            &format!("{prefix}.weight"),
            init_weight(rng, &[c_out, c_in, k, k], c_in * k * k, init),
        );
        let b = store.register(&format!("{prefix}.bias"), init::zeros(&[c_out]));
        Self {
            w,
            b: Some(b),
            stride,
            pad,
            replicate: false,
        }
    }

    pub fn replicate_pad(mut self) -> Self {
        self.replicate = true;
        self
    }

    pub fn forward(&self, x: &Tensor) -> Tensor {
        let (x, pad) = if self.replicate && self.pad > 0 {
            (x.pad_replicate2d(self.pad), 0)
        } else {
            (x.clone(), self.pad)
        };
        x.conv2d(&self.w.tensor(), self.b.as_ref().map(|b| b.tensor()).as_ref(), self.stride, pad)
    }
}

/// LayerNorm over the last axis.
pub struct LayerNorm {
    pub gamma: Rc<Param>,
    pub beta: Rc<Param>,
    eps: f64,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, prefix: &str, dim: usize) -> Self {
        Self {
            gamma: store.register(&format!("{prefix}.gamma"), init::ones(&[dim])),
            beta: store.register(&format!("{prefix}.beta"), init::zeros(&[dim])),
            eps: 1e-5,
        }
    }

    pub fn forward(&self, x: &Tensor) -> Tensor {
        let last = x.shape().len() - 1;
        let mu = x.mean_axis_keep(last);
        let xc = x.sub(&mu);
        let var = xc.sqr().mean_axis_keep(last);
        let xhat = xc.div(&var.add_scalar(self.eps).sqrt());
        xhat.mul(&self.gamma.tensor()).add(&self.beta.tensor())
    }
}

/// GroupNorm over NCHW input.
pub struct GroupNorm {
    pub gamma: Rc<Param>,
    pub beta: Rc<Param>,
    groups: usize,
    channels: usize,
    eps: f64,
}

impl GroupNorm {
    pub fn new(store: &mut ParamStore, prefix: &str, groups: usize, channels: usize) -> Self {
        assert_eq!(channels % groups, 0, "groupnorm channels divisible by groups");
        Self {
            gamma: store.register(&format!("{prefix}.gamma"), init::ones(&[channels])),
            beta: store.register(&format!("{prefix}.beta"), init::zeros(&[channels])),
            groups,
            channels,
            eps: 1e-5,
        }
    }

    pub fn forward(&self, x: &Tensor) -> Tensor {
        let s = x.shape().to_vec();
        assert_eq!(s.len(), 4, "groupnorm expects NCHW");
        assert_eq!(s[1], self.channels, "groupnorm channel mismatch");
        let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
        let g = self.groups;
        let grouped = x.reshape(&[n, g, c / g * h * w]);
        let mu = grouped.mean_axis_keep(2);
        let xc = grouped.sub(&mu);
        let var = xc.sqr().mean_axis_keep(2);
        let xhat = xc.div(&var.add_scalar(self.eps).sqrt()).reshape(&[n, c, h, w]);
        let gamma = self.gamma.tensor().reshape(&[1, c, 1, 1]);
        let beta = self.beta.tensor().reshape(&[1, c, 1, 1]);
        xhat.mul(&gamma).add(&beta)
    }
}

/// Two-layer MLP with GELU, the transformer feed-forward shape.
pub struct Mlp {
    pub fc1: Linear,
    pub fc2: Linear,
}

impl Mlp {
    pub fn new(
        store: &mut ParamStore,
        prefix: &str,
        dim: usize,
        hidden: usize,
        init: Init,
        rng: &mut impl Rng,
    ) -> Self {
        Self {
            fc1: Linear::new(store, &format!("{prefix}.fc1"), dim, hidden, true, init, rng),
            fc2: Linear::new(store, &format!("{prefix}.fc2"), hidden, dim, true, init, rng),
        }
    }

    pub fn forward(&self, x: &Tensor) -> Tensor {
        self.fc2.forward(&self.fc1.forward(x).gelu())
    }
}

/// Sinusoidal embedding of a (possibly fractional) timestep, `[B] -> [B, dim]`.
/// Differentiable in `t`, which the soft timestep selection relies on.
pub fn timestep_embedding(t: &Tensor, dim: usize) -> Tensor {
    assert!(dim % 2 == 0, "timestep embedding dim must be even");
    let half = dim / 2;
    let b = t.shape()[0];
    let freqs: Vec<f64> = (0..half)
        .map(|i| (-(10000.0f64.ln()) * i as f64 / half as f64).exp())
        .collect();
    let f = Tensor::constant(
        crate::Arr::from_shape_vec(ndarray::IxDyn(&[1, half]), freqs).unwrap(),
    );
    let arg = t.reshape(&[b, 1]).mul(&f);
    Tensor::concat(&[arg.sin(), arg.cos()], 1)
}

/// Low-rank adapter on top of a dense layer. The delta `scale * x A B` is
/// additive; with B zero-initialized the layer reproduces its base exactly.
pub struct LoraLinear {
    pub base: Linear,
    pub lora: Option<LoraDelta>,
}

pub struct LoraDelta {
    pub a: Rc<Param>,
    pub b: Rc<Param>,
    pub scale: f64,
}

impl LoraLinear {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        prefix: &str,
        d_in: usize,
        d_out: usize,
        bias: bool,
        init: Init,
        rng: &mut impl Rng,
        adapter: Option<(&mut ParamStore, usize, f64, &mut rand_chacha::ChaCha20Rng)>,
    ) -> Self {
        let base = Linear::new(store, prefix, d_in, d_out, bias, init, rng);
        let lora = adapter.map(|(lstore, rank, scale, lrng)| LoraDelta {
            a: lstore.register(
                &format!("{prefix}.lora_a"),
                init::normal(lrng, &[d_in, rank], 0.02),
            ),
            b: lstore.register(&format!("{prefix}.lora_b"), init::zeros(&[rank, d_out])),
            scale,
        });
        Self { base, lora }
    }

    pub fn forward(&self, x: &Tensor) -> Tensor {
        let y = self.base.forward(x);
        match &self.lora {
            None => y,
            Some(d) => {
                let shape = x.shape().to_vec();
                let n: usize = shape[..shape.len() - 1].iter().product();
                let flat = x.reshape(&[n, *shape.last().unwrap()]);
                let delta = flat.matmul(&d.a.tensor()).matmul(&d.b.tensor()).scale(d.scale);
                let mut out_shape = shape;
                *out_shape.last_mut().unwrap() = d.b.shape()[1];
                y.add(&delta.reshape(&out_shape))
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::gradcheck::check_grad;
    use crate::Arr;
    use ndarray::IxDyn;
    use rand::SeedableRng;
    use rand_chacha::ChaCha20Rng;

    fn randn(shape: &[usize], seed: u64) -> Arr {
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        Arr::from_shape_fn(IxDyn(shape), |_| rand::Rng::gen_range(&mut rng, -1.0..1.0))
    }

    #[test]
    fn linear_shapes_and_grads() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha20Rng::seed_from_u64(0);
        let lin = Linear::new(&mut store, "l", 4, 3, true, Init::TruncNormal(0.2), &mut rng);
        let y = lin.forward(&Tensor::constant(randn(&[2, 5, 4], 1)));
        assert_eq!(y.shape(), vec![2, 5, 3]);

        store.begin_step();
        let x = Tensor::constant(randn(&[2, 4], 2));
        let loss = lin.forward(&x).sqr().sum();
        let g = loss.backward();
        assert!(lin.w.grad(&g).is_some());
        assert!(lin.b.as_ref().unwrap().grad(&g).is_some());
    }

    #[test]
    fn layernorm_normalizes_last_axis() {
        let mut store = ParamStore::new();
        let ln = LayerNorm::new(&mut store, "ln", 8);
        let y = ln.forward(&Tensor::constant(randn(&[3, 8], 3).mapv(|v| v * 5.0 + 2.0)));
        for row in y.value().rows() {
            let mean: f64 = row.mean().unwrap();
            let var: f64 = row.mapv(|v| (v - mean) * (v - mean)).mean().unwrap();
            assert!(mean.abs() < 1e-9);
            assert!((var - 1.0).abs() < 1e-3);
        }
    }

    #[test]
    fn layernorm_grad() {
        let mut store = ParamStore::new();
        let ln = LayerNorm::new(&mut store, "ln", 6);
        let err = check_grad(&randn(&[2, 6], 4), |t| ln.forward(t).sqr().sum());
        assert!(err < 1e-6, "layernorm grad err {err}");
    }

    #[test]
    fn groupnorm_grad_and_stats() {
        let mut store = ParamStore::new();
        let gn = GroupNorm::new(&mut store, "gn", 2, 4);
        let err = check_grad(&randn(&[1, 4, 3, 3], 5), |t| gn.forward(t).sqr().sum());
        assert!(err < 5e-6, "groupnorm grad err {err}");
    }

    #[test]
    fn timestep_embedding_differentiable() {
        let t = randn(&[2], 6).mapv(|v| v.abs() * 100.0);
        let err = check_grad(&t, |tt| timestep_embedding(tt, 16).sqr().sum());
        assert!(err < 1e-5, "temb grad err {err}");
    }

    #[test]
    fn lora_zero_init_matches_base() {
        let mut base_store = ParamStore::new();
        let mut lora_store = ParamStore::new();
        let mut rng = ChaCha20Rng::seed_from_u64(7);
        let mut lrng = ChaCha20Rng::seed_from_u64(8);
        let plain = Linear::new(
            &mut base_store,
            "p",
            6,
            5,
            true,
            Init::TruncNormal(0.2),
            &mut rng,
        );
        let mut rng2 = ChaCha20Rng::seed_from_u64(7);
        let mut base_store2 = ParamStore::new();
        let adapted = LoraLinear::new(
            &mut base_store2,
            "p",
            6,
            5,
            true,
            Init::TruncNormal(0.2),
            &mut rng2,
            Some((&mut lora_store, 3, 1.0, &mut lrng)),
        );
        let x = Tensor::constant(randn(&[4, 6], 9));
        let a = plain.forward(&x);
        let b = adapted.forward(&x);
        assert!(a.value().abs_diff_eq(b.value(), 0.0), "zero-init delta must vanish");
    }

    #[test]
    fn lora_delta_changes_output_once_b_nonzero() {
        let mut base_store = ParamStore::new();
        let mut lora_store = ParamStore::new();
        let mut rng = ChaCha20Rng::seed_from_u64(1);
        let mut lrng = ChaCha20Rng::seed_from_u64(2);
        let layer = LoraLinear::new(
            &mut base_store,
            "p",
            4,
            4,
            false,
            Init::TruncNormal(0.2),
            &mut rng,
            Some((&mut lora_store, 2, 1.0, &mut lrng)),
        );
        let x = Tensor::constant(randn(&[2, 4], 3));
        let before = layer.forward(&x).value().clone();
        layer.lora.as_ref().unwrap().b.update(|v| v.fill(0.1));
        let after = layer.forward(&x).value().clone();
        assert!(!before.abs_diff_eq(&after, 1e-12));
    }
}
