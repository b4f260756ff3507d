//! Elementwise and reduction operations.

use ndarray::{Axis, IxDyn};

use super::{broadcast_shape, reduce_to_shape, Arr, Tensor};

fn bcast(value: &Arr, shape: &[usize]) -> Arr {
    value
        .broadcast(IxDyn(shape))
        .expect("broadcast checked by broadcast_shape")
        .to_owned()
}

impl Tensor {
    fn binary(
        &self,
        rhs: &Tensor,
        f: impl Fn(&Arr, &Arr) -> Arr,
        back: impl Fn(&Arr, &Arr, &Arr) -> (Arr, Arr) + 'static,
    ) -> Tensor {
        let shape = broadcast_shape(self.shape(), rhs.shape());
        let a = bcast(self.value(), &shape);
        let b = bcast(rhs.value(), &shape);
        let out = f(&a, &b);
        let (lhs_c, rhs_c) = (self.clone(), rhs.clone());
        Tensor::from_op(out, vec![self.clone(), rhs.clone()], move |g, sink| {
            let shape = broadcast_shape(lhs_c.shape(), rhs_c.shape());
            let a = bcast(lhs_c.value(), &shape);
            let b = bcast(rhs_c.value(), &shape);
            let (da, db) = back(g, &a, &b);
            sink.accumulate(&lhs_c, reduce_to_shape(&da, lhs_c.shape()));
            sink.accumulate(&rhs_c, reduce_to_shape(&db, rhs_c.shape()));
        })
    }

    pub fn add(&self, rhs: &Tensor) -> Tensor {
        self.binary(rhs, |a, b| a + b, |g, _, _| (g.clone(), g.clone()))
    }

    pub fn sub(&self, rhs: &Tensor) -> Tensor {
        self.binary(rhs, |a, b| a - b, |g, _, _| (g.clone(), -g))
    }

    pub fn mul(&self, rhs: &Tensor) -> Tensor {
        self.binary(rhs, |a, b| a * b, |g, a, b| (g * b, g * a))
    }

    pub fn div(&self, rhs: &Tensor) -> Tensor {
        self.binary(
            rhs,
            |a, b| a / b,
            |g, a, b| (g / b, -(g * a) / (b * b)),
        )
    }

    fn unary(
        &self,
        f: impl Fn(&Arr) -> Arr,
        back: impl Fn(&Arr, &Arr) -> Arr + 'static,
    ) -> Tensor {
        let out = f(self.value());
        let input = self.clone();
        Tensor::from_op(out, vec![self.clone()], move |g, sink| {
            sink.accumulate(&input, back(g, input.value()));
        })
    }

    pub fn neg(&self) -> Tensor {
        self.unary(|a| -a, |g, _| -g)
    }

    pub fn scale(&self, c: f64) -> Tensor {
        self.unary(move |a| a * c, move |g, _| g * c)
    }

    pub fn add_scalar(&self, c: f64) -> Tensor {
        self.unary(move |a| a + c, |g, _| g.clone())
    }

    pub fn sqr(&self) -> Tensor {
        self.unary(|a| a * a, |g, a| 2.0 * (g * a))
    }

    /// Square root with a guarded backward: gradient is zero where the input
    /// is zero, so exact zeros (e.g. flat Sobel responses) stay finite.
    pub fn sqrt(&self) -> Tensor {
        self.unary(
            |a| a.mapv(f64::sqrt),
            |g, a| {
                let mut out = g.clone();
                ndarray::Zip::from(&mut out).and(a).for_each(|o, &x| {
                    *o = if x > 1e-300 { *o * 0.5 / x.sqrt() } else { 0.0 };
                });
                out
            },
        )
    }

    pub fn exp(&self) -> Tensor {
        let out = self.value().mapv(f64::exp);
        let saved = out.clone();
        let input = self.clone();
        Tensor::from_op(out, vec![self.clone()], move |g, sink| {
            sink.accumulate(&input, g * &saved);
        })
    }

    pub fn ln(&self) -> Tensor {
        self.unary(|a| a.mapv(f64::ln), |g, a| g / a)
    }

    pub fn abs(&self) -> Tensor {
        self.unary(
            |a| a.mapv(f64::abs),
            |g, a| g * &a.mapv(f64::signum),
        )
    }

    pub fn relu(&self) -> Tensor {
        self.unary(
            |a| a.mapv(|x| x.max(0.0)),
            |g, a| g * &a.mapv(|x| if x > 0.0 { 1.0 } else { 0.0 }),
        )
    }

    pub fn sigmoid(&self) -> Tensor {
        let out = self.value().mapv(|x| 1.0 / (1.0 + (-x).exp()));
        let saved = out.clone();
        let input = self.clone();
        Tensor::from_op(out, vec![self.clone()], move |g, sink| {
            sink.accumulate(&input, g * &saved.mapv(|s| s * (1.0 - s)));
        })
    }

    pub fn tanh(&self) -> Tensor {
        let out = self.value().mapv(f64::tanh);
        let saved = out.clone();
        let input = self.clone();
        Tensor::from_op(out, vec![self.clone()], move |g, sink| {
            sink.accumulate(&input, g * &saved.mapv(|t| 1.0 - t * t));
        })
    }

    pub fn silu(&self) -> Tensor {
        self.unary(
            |a| a.mapv(|x| x / (1.0 + (-x).exp())),
            |g, a| {
                g * &a.mapv(|x| {
                    let s = 1.0 / (1.0 + (-x).exp());
                    s * (1.0 + x * (1.0 - s))
                })
            },
        )
    }

    /// GELU, tanh approximation. Forward and backward use the same
    /// approximation so finite differences agree with autodiff.
    pub fn gelu(&self) -> Tensor {
        const C: f64 = 0.7978845608028654; // sqrt(2/pi)
        self.unary(
            |a| a.mapv(|x| 0.5 * x * (1.0 + (C * (x + 0.044715 * x * x * x)).tanh())),
            |g, a| {
                g * &a.mapv(|x| {
                    let u = C * (x + 0.044715 * x * x * x);
                    let t = u.tanh();
                    let du = C * (1.0 + 3.0 * 0.044715 * x * x);
                    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
                })
            },
        )
    }

    pub fn sin(&self) -> Tensor {
        self.unary(|a| a.mapv(f64::sin), |g, a| g * &a.mapv(f64::cos))
    }

    pub fn cos(&self) -> Tensor {
        self.unary(|a| a.mapv(f64::cos), |g, a| -(g * &a.mapv(f64::sin)))
    }

    /// Clamp values into `[lo, hi]`; gradient passes only inside the range.
    pub fn clamp(&self, lo: f64, hi: f64) -> Tensor {
        self.unary(
            move |a| a.mapv(|x| x.clamp(lo, hi)),
            move |g, a| g * &a.mapv(|x| if x > lo && x < hi { 1.0 } else { 0.0 }),
        )
    }

    pub fn sum(&self) -> Tensor {
        let out = Arr::from_elem(IxDyn(&[]), self.value().sum());
        let input = self.clone();
        Tensor::from_op(out, vec![self.clone()], move |g, sink| {
            let gv = g[[]];
            sink.accumulate(&input, Arr::from_elem(input.value().raw_dim(), gv));
        })
    }

    pub fn mean(&self) -> Tensor {
        let n = self.len() as f64;
        self.sum().scale(1.0 / n)
    }

    /// Sum over one axis, keeping it as a length-1 dimension.
    pub fn sum_axis_keep(&self, axis: usize) -> Tensor {
        let out = self
            .value()
            .sum_axis(Axis(axis))
            .insert_axis(Axis(axis));
        let input = self.clone();
        Tensor::from_op(out, vec![self.clone()], move |g, sink| {
            let shape = input.shape().to_vec();
            let expanded = g
                .broadcast(IxDyn(&shape))
                .expect("keepdim grad broadcast")
                .to_owned();
            sink.accumulate(&input, expanded);
        })
    }

    pub fn mean_axis_keep(&self, axis: usize) -> Tensor {
        let n = self.shape()[axis] as f64;
        self.sum_axis_keep(axis).scale(1.0 / n)
    }

    /// Mean squared error against `target`, reduced to a scalar.
    pub fn mse(&self, target: &Tensor) -> Tensor {
        self.sub(target).sqr().mean()
    }

    /// Mean absolute error against `target`, reduced to a scalar.
    pub fn l1(&self, target: &Tensor) -> Tensor {
        self.sub(target).abs().mean()
    }
}

#[cfg(test)]
mod tests {
    use super::super::gradcheck::{check_grad, rel_err};
    use super::*;
    use ndarray::IxDyn;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha20Rng;

    fn randn(shape: &[usize], seed: u64) -> Arr {
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        Arr::from_shape_fn(IxDyn(shape), |_| rng.gen_range(-1.0..1.0))
    }

    #[test]
    fn broadcast_add_reduces_gradient() {
        let a = Tensor::leaf(randn(&[2, 3], 1));
        let b = Tensor::leaf(randn(&[3], 2));
        let y = a.add(&b).sum();
        let grads = y.backward();
        assert_eq!(grads.get(&b).unwrap().shape(), &[3]);
        assert!(grads.get(&b).unwrap().iter().all(|&g| g == 2.0));
    }

    #[test]
    fn elementwise_gradients_match_finite_differences() {
        let x = randn(&[2, 5], 3).mapv(|v| v * 0.8 + 1.5); // keep positive for ln/sqrt
        for (name, f) in [
            ("mul_self", (|t: &Tensor| t.mul(t).sum()) as fn(&Tensor) -> Tensor),
            ("sigmoid", |t| t.sigmoid().sum()),
            ("tanh", |t| t.tanh().sum()),
            ("silu", |t| t.silu().sum()),
            ("gelu", |t| t.gelu().sum()),
            ("exp", |t| t.exp().sum()),
            ("ln", |t| t.ln().sum()),
            ("sqrt", |t| t.sqrt().sum()),
            ("sin", |t| t.sin().sum()),
            ("cos", |t| t.cos().sum()),
            ("sqr", |t| t.sqr().sum()),
        ] {
            let err = check_grad(&x, f);
            assert!(err < 1e-7, "{name}: rel err {err}");
        }
    }

    #[test]
    fn division_gradient() {
        let a = Tensor::leaf(randn(&[4], 5).mapv(|v| v + 3.0));
        let b = Tensor::leaf(randn(&[4], 6).mapv(|v| v + 3.0));
        let y = a.div(&b).sum();
        let grads = y.backward();
        let da = grads.get(&a).unwrap();
        let db = grads.get(&b).unwrap();
        for i in 0..4 {
            let (av, bv) = (a.value()[[i]], b.value()[[i]]);
            assert!(rel_err(da[[i]], 1.0 / bv) < 1e-12);
            assert!(rel_err(db[[i]], -av / (bv * bv)) < 1e-12);
        }
    }

    #[test]
    fn reductions_and_axis_ops() {
        let x = Tensor::leaf(randn(&[2, 3, 4], 7));
        let y = x.mean_axis_keep(1);
        assert_eq!(y.shape(), &[2, 1, 4]);
        let grads = y.sum().backward();
        let g = grads.get(&x).unwrap();
        assert!(g.iter().all(|&v| (v - 1.0 / 3.0).abs() < 1e-12));
    }

    #[test]
    fn mixed_rng_smoke() {
        let mut rng = ChaCha20Rng::seed_from_u64(0);
        let _: f64 = rng.gen();
    }
}
