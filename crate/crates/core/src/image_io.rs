//! PNG in/out for `[3, H, W]` images with values in `[0, 1]`.

use std::path::Path;

use image::{GrayImage, RgbImage};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub fn from_rgb8(img: &RgbImage) -> Result<Tensor> {
    let (w, h) = (img.width() as usize, img.height() as usize);
    if w == 0 || h == 0 {
        return Err(Error::EmptyImage);
    }
    let hw = w * h;
    let mut data = vec![0.0; 3 * hw];
    for (p, px) in img.pixels().enumerate() {
        for c in 0..3 {
            data[c * hw + p] = px[c] as f64 / 255.0;
        }
    }
    Tensor::new(&[3, h, w], data)
}

pub fn to_rgb8(img: &Tensor) -> RgbImage {
    let (_, h, w) = img.chw();
    let hw = w * h;
    let d = img.data();
    RgbImage::from_fn(w as u32, h as u32, |x, y| {
        let p = y as usize * w + x as usize;
        image::Rgb([0, 1, 2].map(|c| quantize(d[c * hw + p])))
    })
}

pub fn quantize(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

pub fn load_rgb(path: &Path) -> Result<Tensor> {
    let img = image::open(path)?.to_rgb8();
    from_rgb8(&img)
}

pub fn save_rgb(path: &Path, img: &Tensor) -> Result<()> {
    to_rgb8(img).save(path)?;
    Ok(())
}

/// Single-channel plane in `[0, 1]` as 8-bit grayscale.
pub fn save_gray(path: &Path, plane: &[f64], width: usize, height: usize) -> Result<()> {
    let img = GrayImage::from_fn(width as u32, height as u32, |x, y| {
        image::Luma([quantize(plane[y as usize * width + x as usize])])
    });
    img.save(path)?;
    Ok(())
}

/// Solid-colour image, handy for flat references.
pub fn solid(color: [f64; 3], width: usize, height: usize) -> Tensor {
    let mut data = Vec::with_capacity(3 * width * height);
    for c in color {
        data.extend(std::iter::repeat_n(c, width * height));
    }
    Tensor::new(&[3, height, width], data).unwrap()
}

/// Tile same-sized images into a `cols`-wide grid with `pad` white pixels
/// between cells.
pub fn grid(images: &[Tensor], cols: usize, pad: usize) -> Result<Tensor> {
    let first = images.first().ok_or(Error::EmptyImage)?;
    let (_, h, w) = first.chw();
    if images.iter().any(|i| i.shape() != first.shape()) {
        return Err(Error::Shape("grid images must share one shape".into()));
    }
    let cols = cols.clamp(1, images.len());
    let rows = images.len().div_ceil(cols);
    let (gw, gh) = (cols * w + (cols - 1) * pad, rows * h + (rows - 1) * pad);
    let mut out = Tensor::full(&[3, gh, gw], 1.0);
    let d = out.data_mut();
    for (k, img) in images.iter().enumerate() {
        let (x0, y0) = ((k % cols) * (w + pad), (k / cols) * (h + pad));
        for c in 0..3 {
            let src = img.plane(c);
            for y in 0..h {
                let dst = c * gh * gw + (y0 + y) * gw + x0;
                d[dst..dst + w].copy_from_slice(&src[y * w..(y + 1) * w]);
            }
        }
    }
    Ok(out)
}
