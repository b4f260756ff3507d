//! BT.601 full-range RGB <-> YCbCr on [0,1] data, plus chroma subsampling.
//! Chroma planes carry a +0.5 offset so every channel stays in [0,1].

use ndarray::{Array2, Array3};

use crate::image::{ColorSpace, ImageTensor};

pub fn rgb_to_ycbcr(img: &ImageTensor) -> ImageTensor {
    assert_eq!(img.color_space, ColorSpace::Rgb, "input must be RGB");
    assert_eq!(img.channels(), 3);
    let (h, w) = (img.height(), img.width());
    // Chroma defined from the luma primaries directly (Cb tracks B-Y, Cr
    // tracks R-Y) rather than the four-decimal JFIF roundings, so the
    // inverse below cancels it exactly.
    let (kr, kg, kb) = (0.299, 0.587, 0.114);
    let mut out = Array3::<f64>::zeros((h, w, 3));
    for i in 0..h {
        for j in 0..w {
            let (r, g, b) = (
                img.data[[i, j, 0]],
                img.data[[i, j, 1]],
                img.data[[i, j, 2]],
            );
            let y = kr * r + kg * g + kb * b;
            out[[i, j, 0]] = y;
            out[[i, j, 1]] = 0.5 + (b - y) / (2.0 - 2.0 * kb);
            out[[i, j, 2]] = 0.5 + (r - y) / (2.0 - 2.0 * kr);
        }
    }
    ImageTensor::new(out, ColorSpace::YCbCr)
}

pub fn ycbcr_to_rgb(img: &ImageTensor) -> ImageTensor {
    assert_eq!(img.color_space, ColorSpace::YCbCr, "input must be YCbCr");
    let (h, w) = (img.height(), img.width());
    let (kr, kg, kb) = (0.299, 0.587, 0.114);
    let g_cb = kb * (2.0 - 2.0 * kb) / kg;
    let g_cr = kr * (2.0 - 2.0 * kr) / kg;
    let mut out = Array3::<f64>::zeros((h, w, 3));
    for i in 0..h {
        for j in 0..w {
            let y = img.data[[i, j, 0]];
            let cb = img.data[[i, j, 1]] - 0.5;
            let cr = img.data[[i, j, 2]] - 0.5;
            out[[i, j, 0]] = y + (2.0 - 2.0 * kr) * cr;
            out[[i, j, 1]] = y - g_cb * cb - g_cr * cr;
            out[[i, j, 2]] = y + (2.0 - 2.0 * kb) * cb;
        }
    }
    ImageTensor::new(out, ColorSpace::Rgb)
}

/// 2x2 box average; input dims must be even (caller pads first).
pub fn downsample2x(plane: &Array2<f64>) -> Array2<f64> {
    let (h, w) = plane.dim();
    assert!(h % 2 == 0 && w % 2 == 0, "downsample needs even dims");
    Array2::from_shape_fn((h / 2, w / 2), |(i, j)| {
        0.25 * (plane[[2 * i, 2 * j]]
            + plane[[2 * i + 1, 2 * j]]
            + plane[[2 * i, 2 * j + 1]]
            + plane[[2 * i + 1, 2 * j + 1]])
    })
}

/// Nearest-neighbour 2x upsample, the inverse layout of [`downsample2x`].
pub fn upsample2x(plane: &Array2<f64>) -> Array2<f64> {
    let (h, w) = plane.dim();
    Array2::from_shape_fn((h * 2, w * 2), |(i, j)| plane[[i / 2, j / 2]])
}
