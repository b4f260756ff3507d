//! Differentiable Sobel gradient magnitude, applied per channel.

use ndarray::IxDyn;

use crate::error::{Error, Result};
use crate::image::{image_to_nchw, nchw_to_image, ImageTensor};
use crate::tensor::{Arr, Tensor};

fn kernel(rows: [[f64; 3]; 3]) -> Tensor {
    let mut k = Arr::zeros(IxDyn(&[1, 1, 3, 3]));
    for (i, row) in rows.iter().enumerate() {
        for (j, v) in row.iter().enumerate() {
            k[[0, 0, i, j]] = *v;
        }
    }
    Tensor::constant(k)
}

/// Per-channel Sobel gradient magnitude of an NCHW batch. Output shape
/// equals input shape; borders use replicate padding so a constant image
/// maps to exact zeros.
pub fn sobel(x: &Tensor) -> Result<Tensor> {
    let shape = x.shape();
    if shape.len() != 4 {
        return Err(Error::Shape(format!("sobel expects NCHW, got {shape:?}")));
    }
    let (b, c, h, w) = (shape[0], shape[1], shape[2], shape[3]);
    if h < 3 || w < 3 {
        return Err(Error::Shape(format!(
            "sobel needs at least a 3x3 image, got {h}x{w}"
        )));
    }
    let gx = kernel([[-1.0, 0.0, 1.0], [-2.0, 0.0, 2.0], [-1.0, 0.0, 1.0]]);
    let gy = kernel([[-1.0, -2.0, -1.0], [0.0, 0.0, 0.0], [1.0, 2.0, 1.0]]);

    // One shared single-channel filter applied depthwise: fold channels into
    // the batch axis, pad once, convolve with each kernel unpadded.
    let flat = x.reshape(&[b * c, 1, h, w]).pad_replicate2d(1);
    let dx = flat.conv2d(&gx, None, 1, 0);
    let dy = flat.conv2d(&gy, None, 1, 0);
    // sqrt's backward is zero-guarded at 0, so flat regions are safe.
    let mag = dx.sqr().add(&dy.sqr()).sqrt();
    Ok(mag.reshape(&[b, c, h, w]))
}

/// [`sobel`] on a single image, preserving the HWC layout.
pub fn sobel_image(img: &ImageTensor) -> Result<ImageTensor> {
    let x = Tensor::constant(image_to_nchw(img));
    let out = sobel(&x)?;
    Ok(nchw_to_image(out.value()))
}
