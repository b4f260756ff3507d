//! Image container: H×W×C arrays of f64 in [0,1] plus PNG I/O and
//! conversions to and from the NCHW tensors the networks consume.

use std::path::Path;

use ndarray::{Array3, Array4, Ix4};

use crate::error::{Error, Result};
use crate::tensor::Arr;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ColorSpace {
    Rgb,
    YCbCr,
}

#[derive(Clone, Debug)]
pub struct ImageTensor {
    pub data: Array3<f64>,
    pub color_space: ColorSpace,
}

impl ImageTensor {
    pub fn new(data: Array3<f64>, color_space: ColorSpace) -> Self {
        Self { data, color_space }
    }

    pub fn zeros(h: usize, w: usize, c: usize) -> Self {
        Self::new(Array3::zeros((h, w, c)), ColorSpace::Rgb)
    }

    pub fn height(&self) -> usize {
        self.data.shape()[0]
    }

    pub fn width(&self) -> usize {
        self.data.shape()[1]
    }

    pub fn channels(&self) -> usize {
        self.data.shape()[2]
    }

    pub fn clamp01(mut self) -> Self {
        self.data.mapv_inplace(|v| v.clamp(0.0, 1.0));
        self
    }

    pub fn from_u8(bytes: &[u8], h: usize, w: usize, c: usize) -> Result<Self> {
        if bytes.len() != h * w * c {
            return Err(Error::Shape(format!(
                "byte buffer {} vs {h}x{w}x{c}",
                bytes.len()
            )));
        }
        let data = Array3::from_shape_vec(
            (h, w, c),
            bytes.iter().map(|&b| b as f64 / 255.0).collect(),
        )
        .map_err(|e| Error::Shape(e.to_string()))?;
        Ok(Self::new(data, ColorSpace::Rgb))
    }

    pub fn to_u8(&self) -> Vec<u8> {
        self.data
            .iter()
            .map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
            .collect()
    }

    pub fn load_png(path: &Path) -> Result<Self> {
        let img = image::open(path)?.to_rgb8();
        let (w, h) = img.dimensions();
        Self::from_u8(img.as_raw(), h as usize, w as usize, 3)
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        if self.channels() != 3 {
            return Err(Error::Domain(format!(
                "png save expects 3 channels, got {}",
                self.channels()
            )));
        }
        let buf = self.to_u8();
        let img = image::RgbImage::from_raw(self.width() as u32, self.height() as u32, buf)
            .ok_or_else(|| Error::Shape("buffer/dimension mismatch".into()))?;
        img.save(path)?;
        Ok(())
    }

    /// Mean squared error against another image of the same shape.
    pub fn mse(&self, other: &ImageTensor) -> f64 {
        assert_eq!(self.data.shape(), other.data.shape(), "mse shape mismatch");
        let diff = &self.data - &other.data;
        diff.mapv(|v| v * v).mean().unwrap()
    }
}

/// Stack images into an NCHW batch array.
pub fn images_to_nchw(images: &[ImageTensor]) -> Arr {
    assert!(!images.is_empty(), "empty batch");
    let (h, w, c) = (images[0].height(), images[0].width(), images[0].channels());
    let mut out = Array4::<f64>::zeros((images.len(), c, h, w));
    for (b, img) in images.iter().enumerate() {
        assert_eq!(
            img.data.shape(),
            [h, w, c],
            "batch images must share a shape"
        );
        for ci in 0..c {
            for i in 0..h {
                for j in 0..w {
                    out[[b, ci, i, j]] = img.data[[i, j, ci]];
                }
            }
        }
    }
    out.into_dyn()
}

/// Split an NCHW array back into images (RGB color space assumed).
pub fn nchw_to_images(arr: &Arr) -> Vec<ImageTensor> {
    let a = arr.view().into_dimensionality::<Ix4>().expect("NCHW array");
    let (n, c, h, w) = a.dim();
    (0..n)
        .map(|b| {
            let mut data = Array3::<f64>::zeros((h, w, c));
            for ci in 0..c {
                for i in 0..h {
                    for j in 0..w {
                        data[[i, j, ci]] = a[[b, ci, i, j]];
                    }
                }
            }
            ImageTensor::new(data, ColorSpace::Rgb)
        })
        .collect()
}

/// Single image to a batch-of-one NCHW array.
pub fn image_to_nchw(img: &ImageTensor) -> Arr {
    images_to_nchw(std::slice::from_ref(img))
}

pub fn nchw_to_image(arr: &Arr) -> ImageTensor {
    let mut v = nchw_to_images(arr);
    assert_eq!(v.len(), 1, "expected batch of one");
    v.pop().unwrap()
}

/// PSNR in dB for values in [0,1]; infinite for identical inputs.
pub fn psnr(a: &ImageTensor, b: &ImageTensor) -> f64 {
    let mse = a.mse(b);
    if mse == 0.0 {
        f64::INFINITY
    } else {
        -10.0 * mse.log10()
    }
}

pub fn assert_batch_shape(arr: &Arr) -> (usize, usize, usize, usize) {
    let s = arr.shape();
    assert_eq!(s.len(), 4, "expected NCHW, got {s:?}");
    (s[0], s[1], s[2], s[3])
}
