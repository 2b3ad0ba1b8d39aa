use image::RgbImage;

use crate::error::{ensure, Result};
use crate::geometry::{Landmarks, Point};
use crate::tensor::Tensor;

/// Pixels at or below this luminance count as background.
pub const BACKGROUND_LUMINANCE: f64 = 10.0 / 255.0;

/// Axis-aligned crop in source pixels, half-open.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct CropBox {
    pub x0: usize,
    pub y0: usize,
    pub x1: usize,
    pub y1: usize,
}

impl CropBox {
    pub fn width(&self) -> usize {
        self.x1 - self.x0
    }

    pub fn height(&self) -> usize {
        self.y1 - self.y0
    }
}

/// Result of cropping and resizing one image.
#[derive(Clone, Debug)]
pub struct Preprocessed {
    /// `[3,S,S]` in `[0,1]`.
    pub tensor: Tensor,
    pub crop: CropBox,
    pub source_size: (usize, usize),
}

impl Preprocessed {
    /// Map source-image landmarks into the output frame.
    pub fn map_landmarks(&self, lm: &Landmarks) -> Result<Landmarks> {
        let s = self.tensor.shape()[1];
        let map = |p: Point| {
            Point::new(
                (p.x - self.crop.x0 as f64) * s as f64 / self.crop.width() as f64,
                (p.y - self.crop.y0 as f64) * s as f64 / self.crop.height() as f64,
            )
        };
        Landmarks::new(map(lm.optic_disc), map(lm.fovea), s, s)
    }
}

pub fn rgb_to_tensor(img: &RgbImage) -> Tensor {
    let (w, h) = (img.width() as usize, img.height() as usize);
    let raw = img.as_raw();
    Tensor::from_fn(vec![3, h, w], |i| {
        let c = i / (w * h);
        let p = i % (w * h);
        raw[p * 3 + c] as f64 / 255.0
    })
}

pub fn tensor_to_rgb(t: &Tensor) -> Result<RgbImage> {
    let (c, h, w) = dims3(t)?;
    ensure!(c == 3, "expected 3 channels, got {c}");
    let d = t.data();
    Ok(RgbImage::from_fn(w as u32, h as u32, |x, y| {
        let p = y as usize * w + x as usize;
        image::Rgb(std::array::from_fn(|ch| {
            (d[ch * w * h + p].clamp(0.0, 1.0) * 255.0).round() as u8
        }))
    }))
}

pub(crate) fn dims3(t: &Tensor) -> Result<(usize, usize, usize)> {
    match *t.shape() {
        [c, h, w] => Ok((c, h, w)),
        ref s => Err(crate::Error::contract(format!("expected [C,H,W], got {s:?}"))),
    }
}

/// Crop to the bounding box of pixels brighter than the background
/// threshold, then resize bilinearly to `size x size`.
pub fn preprocess(img: &RgbImage, size: usize) -> Result<Preprocessed> {
    preprocess_tensor(&rgb_to_tensor(img), size)
}

/// Same as [`preprocess`] on a `[3,H,W]` tensor already scaled to `[0,1]`.
pub fn preprocess_tensor(t: &Tensor, size: usize) -> Result<Preprocessed> {
    ensure!(size > 0, "output size must be positive");
    let (c, h, w) = dims3(t)?;
    ensure!(c == 3, "expected 3 channels, got {c}");
    let crop = foreground_box(t)?;
    let d = t.data();
    let mut cropped = Vec::with_capacity(3 * crop.width() * crop.height());
    for ch in 0..3 {
        for y in crop.y0..crop.y1 {
            let row = ch * h * w + y * w;
            cropped.extend_from_slice(&d[row + crop.x0..row + crop.x1]);
        }
    }
    let cropped = Tensor::new(vec![3, crop.height(), crop.width()], cropped)?;
    Ok(Preprocessed {
        tensor: resize_bilinear(&cropped, size, size)?,
        crop,
        source_size: (w, h),
    })
}

fn luminance(r: f64, g: f64, b: f64) -> f64 {
    0.299 * r + 0.587 * g + 0.114 * b
}

pub fn foreground_box(t: &Tensor) -> Result<CropBox> {
    let (_, h, w) = dims3(t)?;
    let d = t.data();
    let plane = w * h;
    let (mut x0, mut y0, mut x1, mut y1) = (usize::MAX, usize::MAX, 0, 0);
    for y in 0..h {
        for x in 0..w {
            let p = y * w + x;
            if luminance(d[p], d[plane + p], d[2 * plane + p]) > BACKGROUND_LUMINANCE {
                x0 = x0.min(x);
                y0 = y0.min(y);
                x1 = x1.max(x + 1);
                y1 = y1.max(y + 1);
            }
        }
    }
    ensure!(x0 != usize::MAX, "image is entirely background (no pixel above luminance 10/255)");
    Ok(CropBox { x0, y0, x1, y1 })
}

/// Bilinear resize of a `[C,H,W]` tensor, sampling at pixel centres with
/// edge clamping. Equal sizes reproduce the input exactly.
pub fn resize_bilinear(t: &Tensor, out_h: usize, out_w: usize) -> Result<Tensor> {
    let (c, h, w) = dims3(t)?;
    ensure!(out_h > 0 && out_w > 0 && h > 0 && w > 0, "empty resize");
    let xs = axis_weights(w, out_w);
    let ys = axis_weights(h, out_h);
    let d = t.data();
    let mut out = vec![0.0; c * out_h * out_w];
    for ch in 0..c {
        let src = &d[ch * h * w..(ch + 1) * h * w];
        let dst = &mut out[ch * out_h * out_w..(ch + 1) * out_h * out_w];
        for (oy, &(y0, y1, fy)) in ys.iter().enumerate() {
            for (ox, &(x0, x1, fx)) in xs.iter().enumerate() {
                let top = src[y0 * w + x0] * (1.0 - fx) + src[y0 * w + x1] * fx;
                let bot = src[y1 * w + x0] * (1.0 - fx) + src[y1 * w + x1] * fx;
                dst[oy * out_w + ox] = top * (1.0 - fy) + bot * fy;
            }
        }
    }
    Tensor::new(vec![c, out_h, out_w], out)
}

fn axis_weights(n_in: usize, n_out: usize) -> Vec<(usize, usize, f64)> {
    let ratio = n_in as f64 / n_out as f64;
    (0..n_out)
        .map(|o| {
            let x = ((o as f64 + 0.5) * ratio - 0.5).clamp(0.0, (n_in - 1) as f64);
            let x0 = x.floor() as usize;
            let x1 = (x0 + 1).min(n_in - 1);
            (x0, x1, x - x0 as f64)
        })
        .collect()
}
