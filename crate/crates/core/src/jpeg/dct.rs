//! Orthonormal 8x8 2-d DCT-II pair. The transform matrix C satisfies
//! C C^T = I, so the inverse is the transpose and round trips are exact to
//! floating-point precision.

use ndarray::Array2;
use std::f64::consts::PI;

#[derive(Clone, Debug)]
pub struct DctBlock {
    pub coeffs: Array2<f64>,
}

fn dct_matrix() -> Array2<f64> {
    let mut c = Array2::<f64>::zeros((8, 8));
    for k in 0..8 {
        let alpha = if k == 0 {
            (1.0f64 / 8.0).sqrt()
        } else {
            (2.0f64 / 8.0).sqrt()
        };
        for n in 0..8 {
            c[[k, n]] = alpha * ((PI * (2.0 * n as f64 + 1.0) * k as f64) / 16.0).cos();
        }
    }
    c
}

thread_local! {
    static DCT_M: Array2<f64> = dct_matrix();
}

/// Forward transform: X = C x C^T.
pub fn dct2(block: &Array2<f64>) -> DctBlock {
    assert_eq!(block.shape(), &[8, 8], "dct2 expects an 8x8 block");
    let coeffs = DCT_M.with(|c| c.dot(block).dot(&c.t()));
    DctBlock { coeffs }
}

/// Inverse transform: x = C^T X C.
pub fn idct2(block: &DctBlock) -> Array2<f64> {
    assert_eq!(block.coeffs.shape(), &[8, 8], "idct2 expects an 8x8 block");
    DCT_M.with(|c| c.t().dot(&block.coeffs).dot(c))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha20Rng;

    /// Direct O(N^4) DCT-II summation, the independent oracle.
    fn dct2_naive(x: &Array2<f64>) -> Array2<f64> {
        let mut out = Array2::<f64>::zeros((8, 8));
        for u in 0..8 {
            for v in 0..8 {
                let au = if u == 0 { (1.0f64 / 8.0).sqrt() } else { (2.0f64 / 8.0).sqrt() };
                let av = if v == 0 { (1.0f64 / 8.0).sqrt() } else { (2.0f64 / 8.0).sqrt() };
                let mut s = 0.0;
                for i in 0..8 {
                    for j in 0..8 {
                        s += x[[i, j]]
                            * ((PI * (2.0 * i as f64 + 1.0) * u as f64) / 16.0).cos()
                            * ((PI * (2.0 * j as f64 + 1.0) * v as f64) / 16.0).cos();
                    }
                }
                out[[u, v]] = au * av * s;
            }
        }
        out
    }

    fn random_block(rng: &mut ChaCha20Rng) -> Array2<f64> {
        Array2::from_shape_fn((8, 8), |_| rng.gen_range(-128.0..128.0))
    }

    #[test]
    fn constant_block_has_dc_only() {
        let c = 3.25;
        let block = Array2::from_elem((8, 8), c);
        let d = dct2(&block);
        assert!((d.coeffs[[0, 0]] - 8.0 * c).abs() < 1e-12);
        for u in 0..8 {
            for v in 0..8 {
                if (u, v) != (0, 0) {
                    assert!(d.coeffs[[u, v]].abs() < 1e-12, "AC({u},{v}) nonzero");
                }
            }
        }
    }

    #[test]
    fn zero_block_maps_to_zero() {
        let d = dct2(&Array2::zeros((8, 8)));
        assert!(d.coeffs.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn matches_direct_summation() {
        let mut rng = ChaCha20Rng::seed_from_u64(17);
        for _ in 0..50 {
            let x = random_block(&mut rng);
            let fast = dct2(&x);
            let slow = dct2_naive(&x);
            let max_err = (&fast.coeffs - &slow)
                .iter()
                .fold(0.0f64, |m, v| m.max(v.abs()));
            assert!(max_err < 1e-10, "DCT disagrees with direct summation: {max_err}");
        }
    }

    #[test]
    fn roundtrip_thousand_random_blocks() {
        let mut rng = ChaCha20Rng::seed_from_u64(23);
        for _ in 0..1000 {
            let x = random_block(&mut rng);
            let back = idct2(&dct2(&x));
            let max_err = (&back - &x).iter().fold(0.0f64, |m, v| m.max(v.abs()));
            assert!(max_err < 1e-10, "roundtrip error {max_err}");
        }
    }

    #[test]
    fn orthonormality() {
        let c = dct_matrix();
        let eye = c.dot(&c.t());
        for i in 0..8 {
            for j in 0..8 {
                let want = if i == j { 1.0 } else { 0.0 };
                assert!((eye[[i, j]] - want).abs() < 1e-12);
            }
        }
    }
}
