//! PNG encoding of `[-1, 1]` tensors. Values are clamped only here.

use std::io::Cursor;
use std::path::Path;

use image::{ImageFormat, RgbImage};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

fn to_u8(v: f32) -> u8 {
    (((v.clamp(-1.0, 1.0) + 1.0) * 0.5) * 255.0).round() as u8
}

/// `[3, H, W]` or `[1, 3, H, W]` to an 8-bit RGB image.
pub fn to_rgb(t: &Tensor) -> Result<RgbImage> {
    let (c, h, w) = match *t.shape() {
        [c, h, w] => (c, h, w),
        [1, c, h, w] => (c, h, w),
        _ => return Err(Error::Shape(format!("cannot encode {:?} as an image", t.shape()))),
    };
    if c != 3 {
        return Err(Error::Shape(format!("expected 3 channels, got {c}")));
    }
    let plane = h * w;
    let d = t.data();
    Ok(RgbImage::from_fn(w as u32, h as u32, |x, y| {
        let i = y as usize * w + x as usize;
        image::Rgb([to_u8(d[i]), to_u8(d[plane + i]), to_u8(d[2 * plane + i])])
    }))
}

/// `[1, 3, H, W]` in `[-1, 1]`.
pub fn from_rgb(img: &RgbImage) -> Tensor {
    let (w, h) = (img.width() as usize, img.height() as usize);
    let plane = w * h;
    let mut data = vec![0.0f32; 3 * plane];
    for (x, y, p) in img.enumerate_pixels() {
        let i = y as usize * w + x as usize;
        for c in 0..3 {
            data[c * plane + i] = p.0[c] as f32 / 255.0 * 2.0 - 1.0;
        }
    }
    Tensor::new(vec![1, 3, h, w], data).expect("rgb shape")
}

pub fn encode_png(img: &RgbImage) -> Result<Vec<u8>> {
    let mut buf = Cursor::new(Vec::new());
    img.write_to(&mut buf, ImageFormat::Png)?;
    Ok(buf.into_inner())
}

pub fn tensor_png(t: &Tensor) -> Result<Vec<u8>> {
    encode_png(&to_rgb(t)?)
}

pub fn save_png(t: &Tensor, path: &Path) -> Result<()> {
    std::fs::write(path, tensor_png(t)?)?;
    Ok(())
}

pub fn load_png(path: &Path) -> Result<Tensor> {
    Ok(from_rgb(&image::open(path)?.to_rgb8()))
}

pub fn decode_png(bytes: &[u8]) -> Result<Tensor> {
    Ok(from_rgb(&image::load_from_memory(bytes)?.to_rgb8()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn png_round_trip_is_exact_on_the_8bit_lattice() {
        let data: Vec<f32> = (0..3 * 4 * 5).map(|i| (i * 37 % 256) as f32 / 255.0 * 2.0 - 1.0).collect();
        let t = Tensor::new(vec![1, 3, 4, 5], data).unwrap();
        let back = decode_png(&tensor_png(&t).unwrap()).unwrap();
        assert!(back.max_abs_diff(&t) < 1e-6);
    }

    #[test]
    fn out_of_range_values_are_clamped() {
        let t = Tensor::new(vec![3, 1, 1], vec![-3.0, 0.0, 7.0]).unwrap();
        let img = to_rgb(&t).unwrap();
        assert_eq!(img.get_pixel(0, 0).0, [0, 128, 255]);
    }
}
