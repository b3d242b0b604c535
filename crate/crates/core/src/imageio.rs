//! 8-bit PNG input and output. Decode and encode quantization is the only
//! lossy step; everything else works on floats in `[0, 1]`.

use std::path::Path;

use image::{ImageBuffer, Rgb, RgbImage};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Read any image the decoder understands as a `(1, 3, H, W)` tensor.
pub fn read_image(path: &Path) -> Result<Tensor<f32>> {
    let img = image::open(path)
        .map_err(|e| Error::Image { path: path.to_path_buf(), message: e.to_string() })?
        .to_rgb8();
    Ok(from_rgb8(&img))
}

pub fn from_rgb8(img: &RgbImage) -> Tensor<f32> {
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut t = Tensor::zeros([1, 3, h, w]);
    for (x, y, px) in img.enumerate_pixels() {
        for c in 0..3 {
            t.plane_mut(0, c)[y as usize * w + x as usize] = px[c] as f32 / 255.0;
        }
    }
    t
}

/// Quantize batch element `n` of an image tensor to 8 bits per channel.
pub fn to_rgb8(t: &Tensor<f32>, n: usize) -> Result<RgbImage> {
    let (b, c, h, w) = t.dims4()?;
    if c != 3 || n >= b {
        return Err(Error::shape(format!("cannot take RGB image {n} from {:?}", t.shape())));
    }
    let planes = [t.plane(n, 0), t.plane(n, 1), t.plane(n, 2)];
    Ok(ImageBuffer::from_fn(w as u32, h as u32, |x, y| {
        let i = y as usize * w + x as usize;
        Rgb(planes.map(|p| quantize(p[i])))
    }))
}

pub fn quantize(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

pub fn write_png(path: &Path, t: &Tensor<f32>) -> Result<()> {
    let img = to_rgb8(t, 0)?;
    img.save_with_format(path, image::ImageFormat::Png)
        .map_err(|e| Error::Image { path: path.to_path_buf(), message: e.to_string() })
}
