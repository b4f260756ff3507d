//! Numerically careful ops that do not decompose nicely into primitives:
//! stable softmax and differentiable table interpolation.

use ndarray::{Axis, IxDyn};

use super::{Arr, Tensor};

impl Tensor {
    /// Softmax over the last axis, computed with a per-row max shift so
    /// large logits never overflow.
    pub fn softmax_last(&self) -> Tensor {
        let x = self.value();
        let last = x.ndim() - 1;
        let mut out = x.to_owned();
        for mut row in out.lanes_mut(Axis(last)) {
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            row.mapv_inplace(|v| (v - m).exp());
            let s: f64 = row.sum();
            row.mapv_inplace(|v| v / s);
        }
        let src = self.clone();
        let out_c = out.clone();
        Tensor::from_op(out, vec![self.clone()], move |g, sink| {
            // ds_i = s_i * (g_i - sum_j g_j s_j) per row.
            let mut dx = g.to_owned();
            let dx_lanes = dx.lanes_mut(Axis(last));
            let s_lanes = out_c.lanes(Axis(last));
            for (mut gl, sl) in dx_lanes.into_iter().zip(s_lanes) {
                let dot: f64 = gl.iter().zip(sl.iter()).map(|(a, b)| a * b).sum();
                for (gv, sv) in gl.iter_mut().zip(sl.iter()) {
                    *gv = sv * (*gv - dot);
                }
            }
            sink.accumulate(&src, dx);
        })
    }

    /// Linear interpolation into a fixed lookup `table` at fractional
    /// positions given by `self` (clamped to [0, len-1]). The derivative
    /// w.r.t. the position is the slope of the active cell, zero outside
    /// the table range.
    pub fn table_lerp(&self, table: &[f64]) -> Tensor {
        assert!(!table.is_empty(), "table_lerp needs at least 1 entry");
        if table.len() == 1 {
            // Degenerate table: a constant function with zero slope.
            let v = table[0];
            let out = self.value().mapv(|_| v);
            let src = self.clone();
            return Tensor::from_op(out, vec![self.clone()], move |g, sink| {
                sink.accumulate(&src, g.mapv(|_| 0.0));
            });
        }
        let t = table.to_vec();
        let n = t.len();
        let hi = (n - 1) as f64;
        let x = self.value();
        let out = x.mapv(|v| {
            let vc = v.clamp(0.0, hi);
            let i = (vc.floor() as usize).min(n - 2);
            let f = vc - i as f64;
            t[i] + f * (t[i + 1] - t[i])
        });
        let src = self.clone();
        let t2 = table.to_vec();
        Tensor::from_op(out, vec![self.clone()], move |g, sink| {
            let x = src.value();
            let mut dx = Arr::zeros(IxDyn(&x.shape().to_vec()));
            for (idx, v) in x.indexed_iter() {
                if *v >= 0.0 && *v <= hi {
                    let i = (v.floor() as usize).min(n - 2);
                    dx[&idx] = g[&idx] * (t2[i + 1] - t2[i]);
                }
            }
            sink.accumulate(&src, dx);
        })
    }
}

#[cfg(test)]
mod tests {
    use super::super::gradcheck::check_grad;
    use super::*;
    use ndarray::IxDyn;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha20Rng;

    fn randn(shape: &[usize], seed: u64) -> Arr {
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        Arr::from_shape_fn(IxDyn(shape), |_| rng.gen_range(-1.0..1.0))
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let y = Tensor::constant(randn(&[3, 7], 1)).softmax_last();
        for row in y.value().rows() {
            let s: f64 = row.sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn softmax_stable_for_huge_logits() {
        let x = Arr::from_shape_vec(IxDyn(&[1, 3]), vec![1e9, 1e9, 1e9]).unwrap();
        let y = Tensor::constant(x).softmax_last();
        for v in y.value().iter() {
            assert!((v - 1.0 / 3.0).abs() < 1e-12);
        }
    }

    #[test]
    fn softmax_shift_invariance() {
        let x = randn(&[2, 5], 2);
        let a = Tensor::constant(x.clone()).softmax_last();
        let b = Tensor::constant(x.mapv(|v| v + 123.456)).softmax_last();
        assert!(a.value().abs_diff_eq(b.value(), 1e-12));
    }

    #[test]
    fn softmax_grad() {
        let w = Tensor::constant(randn(&[2, 5], 3));
        let err = check_grad(&randn(&[2, 5], 4), |t| t.softmax_last().mul(&w).sum());
        assert!(err < 1e-7, "softmax grad err {err}");
    }

    #[test]
    fn table_lerp_values() {
        let table = [1.0, 3.0, 2.0, 5.0];
        let x = Arr::from_shape_vec(IxDyn(&[4]), vec![0.0, 0.5, 2.5, 3.0]).unwrap();
        let y = Tensor::constant(x).table_lerp(&table);
        let v = y.value();
        assert_eq!(v[[0]], 1.0);
        assert_eq!(v[[1]], 2.0);
        assert_eq!(v[[2]], 3.5);
        assert_eq!(v[[3]], 5.0);
    }

    #[test]
    fn table_lerp_clamps_out_of_range() {
        let table = [1.0, 3.0, 2.0];
        let x = Arr::from_shape_vec(IxDyn(&[2]), vec![-4.0, 9.0]).unwrap();
        let t = Tensor::leaf(x);
        let y = t.table_lerp(&table);
        assert_eq!(y.value()[[0]], 1.0);
        assert_eq!(y.value()[[1]], 2.0);
        let g = y.sum().backward();
        let gx = g.get(&t).unwrap();
        assert_eq!(gx[[0]], 0.0);
        assert_eq!(gx[[1]], 0.0);
    }

    #[test]
    fn table_lerp_grad_is_cell_slope() {
        let table = [0.0, 10.0, 12.0];
        // Interior, non-integer points so the slope is well defined.
        let x = Arr::from_shape_vec(IxDyn(&[2]), vec![0.25, 1.75]).unwrap();
        let err = check_grad(&x, |t| t.table_lerp(&table).sum());
        assert!(err < 1e-7, "lerp grad err {err}");
    }
}
