//! 2-d convolution (NCHW) via im2col + GEMM, plus padding and nearest
//! upsampling. Forward/backward pairs keep the usual adjoint structure:
//! dW = dOut . col^T, dIn = col2im(W^T . dOut).

use ndarray::{Array2, Array4, ArrayView4, Axis, Ix4};

use super::{Arr, Tensor};

fn as4(a: &Arr) -> ArrayView4<'_, f64> {
    a.view().into_dimensionality::<Ix4>().expect("NCHW tensor")
}

fn pad_zero(x: &ArrayView4<'_, f64>, p: usize) -> Array4<f64> {
    if p == 0 {
        return x.to_owned();
    }
    let (n, c, h, w) = x.dim();
    let mut out = Array4::<f64>::zeros((n, c, h + 2 * p, w + 2 * p));
    out.slice_mut(ndarray::s![.., .., p..p + h, p..p + w]).assign(x);
    out
}

/// One batch item: [C,Hp,Wp] -> [C*kh*kw, Ho*Wo].
fn im2col(
    x: &ndarray::ArrayView3<'_, f64>,
    kh: usize,
    kw: usize,
    stride: usize,
    ho: usize,
    wo: usize,
) -> Array2<f64> {
    let c = x.shape()[0];
    let mut col = Array2::<f64>::zeros((c * kh * kw, ho * wo));
    for ci in 0..c {
        for ki in 0..kh {
            for kj in 0..kw {
                let row = (ci * kh + ki) * kw + kj;
                for oi in 0..ho {
                    let src_i = oi * stride + ki;
                    for oj in 0..wo {
                        col[[row, oi * wo + oj]] = x[[ci, src_i, oj * stride + kj]];
                    }
                }
            }
        }
    }
    col
}

/// Adjoint of `im2col`: scatter-add columns back into [C,Hp,Wp].
fn col2im(
    col: &Array2<f64>,
    c: usize,
    hp: usize,
    wp: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    ho: usize,
    wo: usize,
) -> ndarray::Array3<f64> {
    let mut out = ndarray::Array3::<f64>::zeros((c, hp, wp));
    for ci in 0..c {
        for ki in 0..kh {
            for kj in 0..kw {
                let row = (ci * kh + ki) * kw + kj;
                for oi in 0..ho {
                    let dst_i = oi * stride + ki;
                    for oj in 0..wo {
                        out[[ci, dst_i, oj * stride + kj]] += col[[row, oi * wo + oj]];
                    }
                }
            }
        }
    }
    out
}

fn conv2d_forward(
    x: &ArrayView4<'_, f64>,
    w: &ArrayView4<'_, f64>,
    stride: usize,
    pad: usize,
) -> (Array4<f64>, usize, usize) {
    let (n, c_in, h, wd) = x.dim();
    let (c_out, c_in2, kh, kw) = w.dim();
    assert_eq!(c_in, c_in2, "conv2d channel mismatch");
    assert!(h + 2 * pad >= kh && wd + 2 * pad >= kw, "conv2d kernel larger than input");
    let ho = (h + 2 * pad - kh) / stride + 1;
    let wo = (wd + 2 * pad - kw) / stride + 1;
    let xp = pad_zero(x, pad);
    let w_mat = w
        .to_owned()
        .into_shape_with_order((c_out, c_in * kh * kw))
        .unwrap();
    let mut out = Array4::<f64>::zeros((n, c_out, ho, wo));
    for b in 0..n {
        let col = im2col(&xp.index_axis(Axis(0), b), kh, kw, stride, ho, wo);
        let prod = w_mat.dot(&col); // [c_out, ho*wo]
        out.index_axis_mut(Axis(0), b).assign(
            &prod
                .into_shape_with_order((c_out, ho, wo))
                .unwrap(),
        );
    }
    (out, ho, wo)
}

impl Tensor {
    /// `self`: [N,C_in,H,W], `weight`: [C_out,C_in,kh,kw], optional `bias`: [C_out].
    /// Zero padding of `pad` on each spatial side.
    pub fn conv2d(&self, weight: &Tensor, bias: Option<&Tensor>, stride: usize, pad: usize) -> Tensor {
        assert!(stride >= 1, "conv2d stride");
        let x = as4(self.value());
        let w = as4(weight.value());
        let (out, ho, wo) = conv2d_forward(&x, &w, stride, pad);
        let (n, _, h, wd) = x.dim();
        let (c_out, c_in, kh, kw) = w.dim();

        let mut out = out.into_dyn();
        if let Some(b) = bias {
            assert_eq!(b.shape(), vec![c_out], "conv2d bias shape");
            let bv = b.value().view().into_shape_with_order((1, c_out, 1, 1)).unwrap();
            out += &bv;
        }

        let mut parents = vec![self.clone(), weight.clone()];
        if let Some(b) = bias {
            parents.push(b.clone());
        }
        let (x_c, w_c) = (self.clone(), weight.clone());
        let b_c = bias.cloned();
        Tensor::from_op(out, parents, move |g, sink| {
            let g4 = as4(g);
            let x = as4(x_c.value());
            let w = as4(w_c.value());
            let xp = pad_zero(&x, pad);
            let (hp, wp) = (h + 2 * pad, wd + 2 * pad);
            let w_mat = w
                .to_owned()
                .into_shape_with_order((c_out, c_in * kh * kw))
                .unwrap();
            let mut dw_mat = Array2::<f64>::zeros((c_out, c_in * kh * kw));
            let mut dx = Array4::<f64>::zeros((n, c_in, h, wd));
            for bidx in 0..n {
                let gb = g4
                    .index_axis(Axis(0), bidx)
                    .to_owned()
                    .into_shape_with_order((c_out, ho * wo))
                    .unwrap();
                let col = im2col(&xp.index_axis(Axis(0), bidx), kh, kw, stride, ho, wo);
                dw_mat += &gb.dot(&col.t());
                let dcol = w_mat.t().dot(&gb);
                let dxp = col2im(&dcol, c_in, hp, wp, kh, kw, stride, ho, wo);
                dx.index_axis_mut(Axis(0), bidx)
                    .assign(&dxp.slice(ndarray::s![.., pad..pad + h, pad..pad + wd]));
            }
            sink.accumulate(&x_c, dx.into_dyn());
            sink.accumulate(
                &w_c,
                dw_mat
                    .into_shape_with_order((c_out, c_in, kh, kw))
                    .unwrap()
                    .into_dyn(),
            );
            if let Some(b) = &b_c {
                let db = g4.sum_axis(Axis(0)).sum_axis(Axis(1)).sum_axis(Axis(1));
                sink.accumulate(b, db.into_dyn());
            }
        })
    }

    /// Replicate (edge) padding on the two spatial axes of an NCHW tensor.
    /// Backward folds gradient from replicated cells onto the source edge.
    pub fn pad_replicate2d(&self, p: usize) -> Tensor {
        if p == 0 {
            return self.clone();
        }
        let x = as4(self.value());
        let (n, c, h, w) = x.dim();
        let mut out = Array4::<f64>::zeros((n, c, h + 2 * p, w + 2 * p));
        for bi in 0..n {
            for ci in 0..c {
                for i in 0..h + 2 * p {
                    let si = i.saturating_sub(p).min(h - 1);
                    for j in 0..w + 2 * p {
                        let sj = j.saturating_sub(p).min(w - 1);
                        out[[bi, ci, i, j]] = x[[bi, ci, si, sj]];
                    }
                }
            }
        }
        let src = self.clone();
        Tensor::from_op(out.into_dyn(), vec![self.clone()], move |g, sink| {
            let g4 = as4(g);
            let mut dx = Array4::<f64>::zeros((n, c, h, w));
            for bi in 0..n {
                for ci in 0..c {
                    for i in 0..h + 2 * p {
                        let si = i.saturating_sub(p).min(h - 1);
                        for j in 0..w + 2 * p {
                            let sj = j.saturating_sub(p).min(w - 1);
                            dx[[bi, ci, si, sj]] += g4[[bi, ci, i, j]];
                        }
                    }
                }
            }
            sink.accumulate(&src, dx.into_dyn());
        })
    }

    /// Nearest-neighbour 2x spatial upsample. Backward sums each 2x2 cell.
    pub fn upsample_nearest2x(&self) -> Tensor {
        let x = as4(self.value());
        let (n, c, h, w) = x.dim();
        let mut out = Array4::<f64>::zeros((n, c, 2 * h, 2 * w));
        for bi in 0..n {
            for ci in 0..c {
                for i in 0..2 * h {
                    for j in 0..2 * w {
                        out[[bi, ci, i, j]] = x[[bi, ci, i / 2, j / 2]];
                    }
                }
            }
        }
        let src = self.clone();
        Tensor::from_op(out.into_dyn(), vec![self.clone()], move |g, sink| {
            let g4 = as4(g);
            let mut dx = Array4::<f64>::zeros((n, c, h, w));
            for bi in 0..n {
                for ci in 0..c {
                    for i in 0..2 * h {
                        for j in 0..2 * w {
                            dx[[bi, ci, i / 2, j / 2]] += g4[[bi, ci, i, j]];
                        }
                    }
                }
            }
            sink.accumulate(&src, dx.into_dyn());
        })
    }

    /// Average pooling with square kernel = stride (non-overlapping).
    pub fn avg_pool2d(&self, k: usize) -> Tensor {
        let x = as4(self.value());
        let (n, c, h, w) = x.dim();
        assert!(h % k == 0 && w % k == 0, "avg_pool2d needs divisible spatial dims");
        let (ho, wo) = (h / k, w / k);
        let inv = 1.0 / (k * k) as f64;
        let mut out = Array4::<f64>::zeros((n, c, ho, wo));
        for bi in 0..n {
            for ci in 0..c {
                for oi in 0..ho {
                    for oj in 0..wo {
                        let mut s = 0.0;
                        for di in 0..k {
                            for dj in 0..k {
                                s += x[[bi, ci, oi * k + di, oj * k + dj]];
                            }
                        }
                        out[[bi, ci, oi, oj]] = s * inv;
                    }
                }
            }
        }
        let src = self.clone();
        Tensor::from_op(out.into_dyn(), vec![self.clone()], move |g, sink| {
            let g4 = as4(g);
            let mut dx = Array4::<f64>::zeros((n, c, h, w));
            for bi in 0..n {
                for ci in 0..c {
                    for oi in 0..ho {
                        for oj in 0..wo {
                            let gv = g4[[bi, ci, oi, oj]] * inv;
                            for di in 0..k {
                                for dj in 0..k {
                                    dx[[bi, ci, oi * k + di, oj * k + dj]] += gv;
                                }
                            }
                        }
                    }
                }
            }
            sink.accumulate(&src, dx.into_dyn());
        })
    }
}

#[cfg(test)]
mod tests {
    use super::super::gradcheck::{check_grad, finite_diff, rel_err_arr};
    use super::*;
    use ndarray::IxDyn;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha20Rng;

    fn randn(shape: &[usize], seed: u64) -> Arr {
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        Arr::from_shape_fn(IxDyn(shape), |_| rng.gen_range(-1.0..1.0))
    }

    /// Direct O(everything) convolution as the oracle.
    fn conv_naive(x: &Arr, w: &Arr, stride: usize, pad: usize) -> Arr {
        let x = as4(x);
        let w = as4(w);
        let (n, c_in, h, wd) = x.dim();
        let (c_out, _, kh, kw) = w.dim();
        let ho = (h + 2 * pad - kh) / stride + 1;
        let wo = (wd + 2 * pad - kw) / stride + 1;
        let mut out = Array4::<f64>::zeros((n, c_out, ho, wo));
        for b in 0..n {
            for co in 0..c_out {
                for oi in 0..ho {
                    for oj in 0..wo {
                        let mut acc = 0.0;
                        for ci in 0..c_in {
                            for ki in 0..kh {
                                for kj in 0..kw {
                                    let ii = (oi * stride + ki) as isize - pad as isize;
                                    let jj = (oj * stride + kj) as isize - pad as isize;
                                    if ii >= 0 && jj >= 0 && (ii as usize) < h && (jj as usize) < wd
                                    {
                                        acc += x[[b, ci, ii as usize, jj as usize]]
                                            * w[[co, ci, ki, kj]];
                                    }
                                }
                            }
                        }
                        out[[b, co, oi, oj]] = acc;
                    }
                }
            }
        }
        out.into_dyn()
    }

    #[test]
    fn conv2d_matches_naive() {
        for &(stride, pad) in &[(1, 0), (1, 1), (2, 1)] {
            let x = randn(&[2, 3, 6, 5], 1);
            let w = randn(&[4, 3, 3, 3], 2);
            let got = Tensor::constant(x.clone())
                .conv2d(&Tensor::constant(w.clone()), None, stride, pad);
            let expect = conv_naive(&x, &w, stride, pad);
            assert!(
                got.value().abs_diff_eq(&expect, 1e-12),
                "stride={stride} pad={pad}"
            );
        }
    }

    #[test]
    fn conv2d_input_grad() {
        let w = randn(&[2, 3, 3, 3], 4);
        let err = check_grad(&randn(&[1, 3, 5, 5], 3), |t| {
            t.conv2d(&Tensor::constant(w.clone()), None, 1, 1).sqr().sum()
        });
        assert!(err < 1e-6, "input grad err {err}");
    }

    #[test]
    fn conv2d_weight_and_bias_grad() {
        let x = randn(&[2, 3, 5, 5], 5);
        let b0 = randn(&[2], 7);
        let err = check_grad(&randn(&[2, 3, 3, 3], 6), |t| {
            Tensor::constant(x.clone())
                .conv2d(t, Some(&Tensor::constant(b0.clone())), 2, 1)
                .sqr()
                .sum()
        });
        assert!(err < 1e-6, "weight grad err {err}");

        let w0 = randn(&[2, 3, 3, 3], 8);
        let x2 = randn(&[2, 3, 5, 5], 9);
        let err = check_grad(&b0, |t| {
            Tensor::constant(x2.clone())
                .conv2d(&Tensor::constant(w0.clone()), Some(t), 1, 0)
                .sqr()
                .sum()
        });
        assert!(err < 1e-7, "bias grad err {err}");
    }

    #[test]
    fn replicate_pad_values_and_grad() {
        let x = randn(&[1, 1, 2, 2], 10);
        let y = Tensor::constant(x.clone()).pad_replicate2d(2);
        assert_eq!(y.shape(), vec![1, 1, 6, 6]);
        assert_eq!(y.value()[[0, 0, 0, 0]], x[[0, 0, 0, 0]]);
        assert_eq!(y.value()[[0, 0, 5, 5]], x[[0, 0, 1, 1]]);
        assert_eq!(y.value()[[0, 0, 0, 3]], x[[0, 0, 0, 1]]);

        let err = check_grad(&randn(&[1, 2, 3, 3], 11), |t| {
            t.pad_replicate2d(1).sqr().sum()
        });
        assert!(err < 1e-7);
    }

    #[test]
    fn upsample_grad_sums_cells() {
        let x = Tensor::leaf(randn(&[1, 1, 2, 2], 12));
        let y = x.upsample_nearest2x();
        assert_eq!(y.shape(), vec![1, 1, 4, 4]);
        let g = y.sum().backward();
        let gx = g.get(&x).unwrap();
        for v in gx.iter() {
            assert_eq!(*v, 4.0);
        }
    }

    #[test]
    fn avg_pool_grad() {
        let err = check_grad(&randn(&[1, 2, 4, 4], 13), |t| t.avg_pool2d(2).sqr().sum());
        assert!(err < 1e-7);
    }

    #[test]
    fn conv2d_weight_grad_matches_fd_directly() {
        let x = randn(&[1, 2, 4, 4], 14);
        let w = randn(&[3, 2, 2, 2], 15);
        let wt = Tensor::leaf(w.clone());
        let loss = Tensor::constant(x.clone()).conv2d(&wt, None, 1, 0).sqr().sum();
        let g = loss.backward();
        let analytic = g.get(&wt).unwrap().clone();
        let fd = finite_diff(&w, 1e-5, |wv| {
            Tensor::constant(x.clone())
                .conv2d(&Tensor::constant(wv.clone()), None, 1, 0)
                .sqr()
                .sum()
                .item()
        });
        assert!(rel_err_arr(&analytic, &fd) < 1e-6);
    }
}
