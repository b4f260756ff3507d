//! JPEG-style degradation codec. Quantization of block DCT coefficients is
//! the only lossy step: entropy coding changes no pixel, so it is omitted
//! and the codec works directly on pixel arrays.

pub mod color;
pub mod dct;
pub mod tables;

pub use dct::{dct2, idct2, DctBlock};
pub use tables::{quant_tables, QuantTableSet};

use ndarray::Array2;

use crate::error::{Error, Result};
use crate::image::{ColorSpace, ImageTensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Subsample {
    /// Full-resolution chroma.
    S444,
    /// 2x2 box-averaged chroma.
    S420,
}

impl std::str::FromStr for Subsample {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "444" => Ok(Subsample::S444),
            "420" => Ok(Subsample::S420),
            other => Err(Error::Domain(format!(
                "unknown subsample mode {other:?}, expected 444 or 420"
            ))),
        }
    }
}

/// Replicate-pad a plane so both dims are multiples of `m`.
fn pad_to_multiple(plane: &Array2<f64>, m: usize) -> Array2<f64> {
    let (h, w) = plane.dim();
    let (hp, wp) = (h.div_ceil(m) * m, w.div_ceil(m) * m);
    if (hp, wp) == (h, w) {
        return plane.clone();
    }
    Array2::from_shape_fn((hp, wp), |(i, j)| plane[[i.min(h - 1), j.min(w - 1)]])
}

/// Quantize every 8x8 block of a plane holding values in [0,1]:
/// scale to the 8-bit range, level shift, DCT, divide-round-multiply by
/// the table, inverse DCT, shift and scale back.
fn quantize_plane(plane: &Array2<f64>, table: &[[u16; 8]; 8]) -> Array2<f64> {
    let (h, w) = plane.dim();
    assert!(h % 8 == 0 && w % 8 == 0, "plane must be 8-aligned");
    let mut out = Array2::<f64>::zeros((h, w));
    let mut block = Array2::<f64>::zeros((8, 8));
    for bi in (0..h).step_by(8) {
        for bj in (0..w).step_by(8) {
            for i in 0..8 {
                for j in 0..8 {
                    block[[i, j]] = plane[[bi + i, bj + j]] * 255.0 - 128.0;
                }
            }
            let mut d = dct2(&block);
            for u in 0..8 {
                for v in 0..8 {
                    let q = table[u][v] as f64;
                    d.coeffs[[u, v]] = (d.coeffs[[u, v]] / q).round() * q;
                }
            }
            let rec = idct2(&d);
            for i in 0..8 {
                for j in 0..8 {
                    out[[bi + i, bj + j]] = (rec[[i, j]] + 128.0) / 255.0;
                }
            }
        }
    }
    out
}

fn split_planes(img: &ImageTensor) -> [Array2<f64>; 3] {
    let (h, w) = (img.height(), img.width());
    let mut planes = [
        Array2::<f64>::zeros((h, w)),
        Array2::<f64>::zeros((h, w)),
        Array2::<f64>::zeros((h, w)),
    ];
    for c in 0..3 {
        for i in 0..h {
            for j in 0..w {
                planes[c][[i, j]] = img.data[[i, j, c]];
            }
        }
    }
    planes
}

fn join_planes(planes: &[Array2<f64>; 3]) -> ImageTensor {
    let (h, w) = planes[0].dim();
    let mut data = ndarray::Array3::<f64>::zeros((h, w, 3));
    for c in 0..3 {
        for i in 0..h {
            for j in 0..w {
                data[[i, j, c]] = planes[c][[i, j]];
            }
        }
    }
    ImageTensor::new(data, ColorSpace::YCbCr)
}

/// Encode-decode an RGB image at the given quality factor. Output has the
/// input's dimensions, clamped to [0,1].
pub fn degrade(image: &ImageTensor, qf: u32, subsample: Subsample) -> Result<ImageTensor> {
    if image.color_space != ColorSpace::Rgb {
        return Err(Error::Domain("degrade expects an RGB image".into()));
    }
    if image.channels() != 3 {
        return Err(Error::Domain(format!(
            "degrade expects 3 channels, got {}",
            image.channels()
        )));
    }
    let tables = quant_tables(qf)?;
    let (h, w) = (image.height(), image.width());
    let ycc = color::rgb_to_ycbcr(image);
    let [y, cb, cr] = split_planes(&ycc);

    let align = match subsample {
        Subsample::S444 => 8,
        Subsample::S420 => 16,
    };
    let yp = pad_to_multiple(&y, align);
    let cbp = pad_to_multiple(&cb, align);
    let crp = pad_to_multiple(&cr, align);

    let y_out = quantize_plane(&yp, &tables.luma);
    let (cb_out, cr_out) = match subsample {
        Subsample::S444 => (
            quantize_plane(&cbp, &tables.chroma),
            quantize_plane(&crp, &tables.chroma),
        ),
        Subsample::S420 => (
            color::upsample2x(&quantize_plane(&color::downsample2x(&cbp), &tables.chroma)),
            color::upsample2x(&quantize_plane(&color::downsample2x(&crp), &tables.chroma)),
        ),
    };

    let crop = |p: &Array2<f64>| p.slice(ndarray::s![0..h, 0..w]).to_owned();
    let out_ycc = join_planes(&[crop(&y_out), crop(&cb_out), crop(&cr_out)]);
    Ok(color::ycbcr_to_rgb(&out_ycc).clamp01())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::synthetic_natural;

    #[test]
    fn gray_survives_qf100_exactly() {
        let mut img = ImageTensor::zeros(16, 16, 3);
        img.data.fill(0.5);
        let out = degrade(&img, 100, Subsample::S444).unwrap();
        let max_err = (&out.data - &img.data)
            .iter()
            .fold(0.0f64, |m, v| m.max(v.abs()));
        assert!(max_err < 1e-9, "qf=100 error on quantization-exact input: {max_err}");
    }

    #[test]
    fn constant_color_stays_constant_at_any_qf() {
        for &qf in &[5u32, 20, 77] {
            let mut img = ImageTensor::zeros(24, 24, 3);
            img.data
                .indexed_iter_mut()
                .for_each(|((_, _, c), v)| *v = [0.31, 0.62, 0.18][c]);
            let out = degrade(&img, qf, Subsample::S444).unwrap();
            for c in 0..3 {
                let ch = out.data.index_axis(ndarray::Axis(2), c);
                let mn = ch.iter().cloned().fold(f64::INFINITY, f64::min);
                let mx = ch.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                assert!(
                    mx - mn <= 1.0 / 255.0,
                    "qf={qf} channel {c} spread {}",
                    mx - mn
                );
            }
        }
    }

    #[test]
    fn distortion_orders_with_quality() {
        let img = synthetic_natural(64, 64, 0.3);
        let e5 = degrade(&img, 5, Subsample::S444).unwrap().mse(&img);
        let e20 = degrade(&img, 20, Subsample::S444).unwrap().mse(&img);
        let e50 = degrade(&img, 50, Subsample::S444).unwrap().mse(&img);
        assert!(e5 > e20 && e20 > e50, "MSE ordering violated: {e5} {e20} {e50}");
    }

    #[test]
    fn near_idempotent_at_fixed_qf() {
        let img = synthetic_natural(64, 64, 1.1);
        for &qf in &[10u32, 30] {
            let once = degrade(&img, qf, Subsample::S444).unwrap();
            let twice = degrade(&once, qf, Subsample::S444).unwrap();
            assert!(
                twice.mse(&once) < once.mse(&img),
                "second pass should move less than the first (qf={qf})"
            );
        }
    }

    #[test]
    fn odd_dimensions_preserved() {
        for &mode in &[Subsample::S444, Subsample::S420] {
            let img = synthetic_natural(21, 13, 0.0);
            let out = degrade(&img, 30, mode).unwrap();
            assert_eq!((out.height(), out.width()), (21, 13));
        }
    }

    #[test]
    fn subsampled_chroma_hurts_color_detail_more() {
        let img = synthetic_natural(32, 32, 2.2);
        let full = degrade(&img, 50, Subsample::S444).unwrap();
        let sub = degrade(&img, 50, Subsample::S420).unwrap();
        assert!(sub.mse(&img) >= full.mse(&img), "4:2:0 cannot beat 4:4:4");
    }

    #[test]
    fn rejects_bad_qf() {
        let img = ImageTensor::zeros(8, 8, 3);
        assert!(degrade(&img, 0, Subsample::S444).is_err());
        assert!(degrade(&img, 101, Subsample::S444).is_err());
    }

    #[test]
    fn output_in_unit_range() {
        let img = synthetic_natural(40, 40, 0.7);
        let out = degrade(&img, 5, Subsample::S420).unwrap();
        assert!(out.data.iter().all(|v| (0.0..=1.0).contains(v)));
    }
}
