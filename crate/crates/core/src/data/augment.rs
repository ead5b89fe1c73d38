//! Random resized crop and horizontal flip.

use super::ImageRecord;
use crate::rng::Rng;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CropParams {
    pub scale: (f64, f64),
    pub ratio: (f64, f64),
    pub out_size: usize,
}

impl CropParams {
    pub fn new(out_size: usize) -> Self {
        Self {
            scale: (0.5, 1.0),
            ratio: (3.0 / 4.0, 4.0 / 3.0),
            out_size,
        }
    }
}

/// Crop a random region (area fraction in `scale`, aspect in `ratio`) and
/// resize it bilinearly to `out_size`. After 10 rejected draws it falls back
/// to a centre crop.
pub fn random_resized_crop(img: &ImageRecord, rng: &mut Rng, params: CropParams) -> ImageRecord {
    let (h, w) = (img.height(), img.width());
    let area = (h * w) as f64;
    let (lr0, lr1) = (params.ratio.0.ln(), params.ratio.1.ln());
    let mut region = None;
    for _ in 0..10 {
        let target = area * rng.uniform_range(params.scale.0, params.scale.1);
        let aspect = rng.uniform_range(lr0, lr1).exp();
        let cw = (target * aspect).sqrt().round() as usize;
        let ch = (target / aspect).sqrt().round() as usize;
        if cw > 0 && ch > 0 && cw <= w && ch <= h {
            let top = rng.int_inclusive(0, h - ch);
            let left = rng.int_inclusive(0, w - cw);
            region = Some((top, left, ch, cw));
            break;
        }
    }
    let (top, left, ch, cw) = region.unwrap_or_else(|| center_crop(h, w, params.ratio));
    let pixels = resize_region(&img.pixels, top, left, ch, cw, params.out_size);
    let mask = img
        .mask
        .as_ref()
        .map(|m| resize_mask(m, w, top, left, ch, cw, params.out_size));
    ImageRecord {
        pixels,
        label: img.label,
        id: img.id,
        mask,
    }
}

fn center_crop(h: usize, w: usize, ratio: (f64, f64)) -> (usize, usize, usize, usize) {
    let in_ratio = w as f64 / h as f64;
    let (cw, ch) = if in_ratio < ratio.0 {
        (w, ((w as f64 / ratio.0).round() as usize).min(h))
    } else if in_ratio > ratio.1 {
        (((h as f64 * ratio.1).round() as usize).min(w), h)
    } else {
        (w, h)
    };
    ((h - ch) / 2, (w - cw) / 2, ch, cw)
}

/// Half-pixel-centre source coordinate, clamped into the region.
fn source_coord(dst: usize, scale: f64, len: usize) -> (usize, usize, f64) {
    let s = ((dst as f64 + 0.5) * scale - 0.5).clamp(0.0, (len - 1) as f64);
    let lo = s.floor() as usize;
    let hi = (lo + 1).min(len - 1);
    (lo, hi, s - lo as f64)
}

fn resize_region(src: &Tensor<f32>, top: usize, left: usize, ch: usize, cw: usize, out: usize) -> Tensor<f32> {
    let (h, w) = (src.shape()[1], src.shape()[2]);
    let (sy, sx) = (ch as f64 / out as f64, cw as f64 / out as f64);
    let mut data = vec![0.0f32; 3 * out * out];
    for c in 0..3 {
        let plane = &src.data()[c * h * w..(c + 1) * h * w];
        for y in 0..out {
            let (y0, y1, fy) = source_coord(y, sy, ch);
            for x in 0..out {
                let (x0, x1, fx) = source_coord(x, sx, cw);
                let p = |yy: usize, xx: usize| plane[(top + yy) * w + left + xx] as f64;
                let v = (1.0 - fy) * ((1.0 - fx) * p(y0, x0) + fx * p(y0, x1))
                    + fy * ((1.0 - fx) * p(y1, x0) + fx * p(y1, x1));
                data[(c * out + y) * out + x] = v as f32;
            }
        }
    }
    Tensor::new(vec![3, out, out], data).expect("3xSxS")
}

/// Nearest-neighbour resampling of an occupancy mask.
fn resize_mask(mask: &[bool], w: usize, top: usize, left: usize, ch: usize, cw: usize, out: usize) -> Vec<bool> {
    let mut res = vec![false; out * out];
    for y in 0..out {
        let sy = (((y as f64 + 0.5) * ch as f64 / out as f64) as usize).min(ch - 1);
        for x in 0..out {
            let sx = (((x as f64 + 0.5) * cw as f64 / out as f64) as usize).min(cw - 1);
            res[y * out + x] = mask[(top + sy) * w + left + sx];
        }
    }
    res
}

/// Mirror left-right with probability `p`.
pub fn hflip(img: &ImageRecord, rng: &mut Rng, p: f64) -> ImageRecord {
    if rng.bernoulli(p) {
        hflip_forced(img)
    } else {
        img.clone()
    }
}

pub fn hflip_forced(img: &ImageRecord) -> ImageRecord {
    let (h, w) = (img.height(), img.width());
    let mut data = img.pixels.data().to_vec();
    for row in data.chunks_mut(w) {
        row.reverse();
    }
    let mask = img.mask.as_ref().map(|m| {
        let mut m = m.clone();
        for row in m.chunks_mut(w) {
            row.reverse();
        }
        m
    });
    ImageRecord {
        pixels: Tensor::new(vec![3, h, w], data).expect("same shape"),
        label: img.label,
        id: img.id,
        mask,
    }
}
