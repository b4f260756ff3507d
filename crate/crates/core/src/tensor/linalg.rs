//! Matrix products.

use ndarray::{ArrayView2, Ix2, Ix3};

use super::{Arr, Tensor};

fn as2(a: &Arr) -> ArrayView2<'_, f64> {
    a.view().into_dimensionality::<Ix2>().expect("2-d tensor")
}

impl Tensor {
    /// `[m,k] x [k,n] -> [m,n]`.
    pub fn matmul(&self, rhs: &Tensor) -> Tensor {
        let a = as2(self.value());
        let b = as2(rhs.value());
        assert_eq!(
            a.shape()[1],
            b.shape()[0],
            "matmul inner dims: {:?} x {:?}",
            a.shape(),
            b.shape()
        );
        let out = a.dot(&b).into_dyn();
        let (lhs_c, rhs_c) = (self.clone(), rhs.clone());
        Tensor::from_op(out, vec![self.clone(), rhs.clone()], move |g, sink| {
            let g2 = as2(g);
            let a = as2(lhs_c.value());
            let b = as2(rhs_c.value());
            sink.accumulate(&lhs_c, g2.dot(&b.t()).into_dyn());
            sink.accumulate(&rhs_c, a.t().dot(&g2).into_dyn());
        })
    }

    /// Batched matmul: `[B,m,k] x [B,k,n] -> [B,m,n]`.
    pub fn bmm(&self, rhs: &Tensor) -> Tensor {
        let a = self
            .value()
            .view()
            .into_dimensionality::<Ix3>()
            .expect("bmm lhs 3-d");
        let b = rhs
            .value()
            .view()
            .into_dimensionality::<Ix3>()
            .expect("bmm rhs 3-d");
        let (bs, m, k) = (a.shape()[0], a.shape()[1], a.shape()[2]);
        let (bs2, k2, n) = (b.shape()[0], b.shape()[1], b.shape()[2]);
        assert_eq!(bs, bs2, "bmm batch dims");
        assert_eq!(k, k2, "bmm inner dims");
        let mut out = ndarray::Array3::<f64>::zeros((bs, m, n));
        for i in 0..bs {
            let prod = a.index_axis(ndarray::Axis(0), i).dot(&b.index_axis(ndarray::Axis(0), i));
            out.index_axis_mut(ndarray::Axis(0), i).assign(&prod);
        }
        let (lhs_c, rhs_c) = (self.clone(), rhs.clone());
        Tensor::from_op(out.into_dyn(), vec![self.clone(), rhs.clone()], move |g, sink| {
            let g3 = g.view().into_dimensionality::<Ix3>().unwrap();
            let a = lhs_c.value().view().into_dimensionality::<Ix3>().unwrap();
            let b = rhs_c.value().view().into_dimensionality::<Ix3>().unwrap();
            let mut da = ndarray::Array3::<f64>::zeros(a.raw_dim());
            let mut db = ndarray::Array3::<f64>::zeros(b.raw_dim());
            for i in 0..g3.shape()[0] {
                let gi = g3.index_axis(ndarray::Axis(0), i);
                let ai = a.index_axis(ndarray::Axis(0), i);
                let bi = b.index_axis(ndarray::Axis(0), i);
                da.index_axis_mut(ndarray::Axis(0), i).assign(&gi.dot(&bi.t()));
                db.index_axis_mut(ndarray::Axis(0), i).assign(&ai.t().dot(&gi));
            }
            sink.accumulate(&lhs_c, da.into_dyn());
            sink.accumulate(&rhs_c, db.into_dyn());
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
    fn matmul_gradients() {
        let b = randn(&[4, 5], 11);
        let err = check_grad(&randn(&[3, 4], 10), |t| {
            t.matmul(&Tensor::constant(b.clone())).sqr().sum()
        });
        assert!(err < 1e-7, "lhs grad err {err}");
        let a = randn(&[3, 4], 12);
        let err = check_grad(&randn(&[4, 5], 13), |t| {
            Tensor::constant(a.clone()).matmul(t).sqr().sum()
        });
        assert!(err < 1e-7, "rhs grad err {err}");
    }

    #[test]
    fn bmm_matches_per_batch_matmul() {
        let a = randn(&[2, 3, 4], 20);
        let b = randn(&[2, 4, 5], 21);
        let out = Tensor::constant(a.clone()).bmm(&Tensor::constant(b.clone()));
        for i in 0..2 {
            let ai = a
                .view()
                .into_dimensionality::<Ix3>()
                .unwrap()
                .index_axis(ndarray::Axis(0), i)
                .to_owned();
            let bi = b
                .view()
                .into_dimensionality::<Ix3>()
                .unwrap()
                .index_axis(ndarray::Axis(0), i)
                .to_owned();
            let expect = ai.dot(&bi);
            let got = out
                .value()
                .view()
                .into_dimensionality::<Ix3>()
                .unwrap()
                .index_axis(ndarray::Axis(0), i)
                .to_owned();
            assert!(expect.abs_diff_eq(&got, 1e-12));
        }
    }

    #[test]
    fn bmm_gradients() {
        let b = randn(&[2, 4, 5], 31);
        let err = check_grad(&randn(&[2, 3, 4], 30), |t| {
            t.bmm(&Tensor::constant(b.clone())).sqr().sum()
        });
        assert!(err < 1e-7, "bmm grad err {err}");
    }
}
