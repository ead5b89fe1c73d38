//! Synthetic circles / squares / triangles on a dark noisy background.

use super::{split_validation, DatasetSplits, ImageRecord};
use crate::rng::Rng;
use crate::tensor::Tensor;

pub const SHAPE_CLASSES: usize = 3;

const MIN_SIZE: usize = 12;
const MAX_SIZE: usize = 28;
const NOISE: f64 = 0.1;
const MIN_CHANNEL: f64 = 0.6;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ShapeKind {
    Circle,
    Square,
    Triangle,
}

impl ShapeKind {
    pub fn from_label(label: usize) -> Self {
        match label % SHAPE_CLASSES {
            0 => ShapeKind::Circle,
            1 => ShapeKind::Square,
            _ => ShapeKind::Triangle,
        }
    }

    /// Pixel-centre containment test for a shape of `size` centred at `(cx, cy)`.
    fn contains(self, x: f64, y: f64, cx: f64, cy: f64, size: f64) -> bool {
        let half = size / 2.0;
        match self {
            ShapeKind::Circle => (x - cx).powi(2) + (y - cy).powi(2) <= half * half,
            ShapeKind::Square => (x - cx).abs() <= half && (y - cy).abs() <= half,
            ShapeKind::Triangle => {
                // apex up, base at the bottom edge
                let top = cy - half;
                y >= top && y <= cy + half && (x - cx).abs() <= (y - top) / 2.0
            }
        }
    }
}

/// `n` deterministic shape images. Classes cycle with the id so the
/// histogram is uniform; everything else is drawn from `seed`.
pub fn gen_shapes(n: usize, seed: u64, image_size: usize) -> Vec<ImageRecord> {
    let mut rng = Rng::new(seed);
    (0..n).map(|i| render(&mut rng, i as u32, image_size)).collect()
}

fn render(rng: &mut Rng, id: u32, image_size: usize) -> ImageRecord {
    let label = id as usize % SHAPE_CLASSES;
    let kind = ShapeKind::from_label(label);
    let size = rng.int_inclusive(MIN_SIZE, MAX_SIZE.min(image_size)) as f64;
    let half = size / 2.0;
    let cx = rng.uniform_range(half, image_size as f64 - half);
    let cy = rng.uniform_range(half, image_size as f64 - half);
    let color: [f64; 3] = std::array::from_fn(|_| rng.uniform_range(MIN_CHANNEL, 1.0));
    let plane = image_size * image_size;
    let mut pixels = vec![0.0f32; 3 * plane];
    let mut mask = vec![false; plane];
    for y in 0..image_size {
        for x in 0..image_size {
            let inside = kind.contains(x as f64 + 0.5, y as f64 + 0.5, cx, cy, size);
            mask[y * image_size + x] = inside;
            for (c, &shade) in color.iter().enumerate() {
                let noise = NOISE * rng.uniform();
                let v = if inside { shade } else { noise };
                pixels[c * plane + y * image_size + x] = v.clamp(0.0, 1.0) as f32;
            }
        }
    }
    ImageRecord {
        pixels: Tensor::new(vec![3, image_size, image_size], pixels).expect("3xHxW"),
        label,
        id,
        mask: Some(mask),
    }
}

/// Train (with every tenth id held out for validation) and test sets.
/// Test ids continue after the training ids so all ids are unique.
pub fn shapes_splits(n_train: usize, n_test: usize, seed: u64, image_size: usize) -> DatasetSplits {
    let train = gen_shapes(n_train, seed, image_size);
    let mut rng = Rng::new(seed ^ 0x5445_5354);
    let test = (0..n_test)
        .map(|i| {
            let mut r = render(&mut rng, i as u32, image_size);
            r.id = (n_train + i) as u32;
            r
        })
        .collect();
    let (train, validation) = split_validation(train);
    DatasetSplits {
        train,
        validation,
        test,
        num_classes: SHAPE_CLASSES,
        image_size,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_is_bit_identical() {
        let a = gen_shapes(20, 9, 64);
        let b = gen_shapes(20, 9, 64);
        assert_eq!(a, b);
        assert_ne!(a, gen_shapes(20, 10, 64));
    }

    #[test]
    fn class_histogram_is_uniform() {
        let recs = gen_shapes(3000, 1, 32);
        let mut hist = [0usize; 3];
        for r in &recs {
            hist[r.label] += 1;
        }
        for h in hist {
            assert!((h as f64 - 1000.0).abs() <= 50.0, "{hist:?}");
        }
    }

    #[test]
    fn masks_are_nonempty_and_bright() {
        for r in gen_shapes(60, 4, 64) {
            let mask = r.mask.as_ref().unwrap();
            assert!(mask.iter().any(|&m| m));
            let plane = 64 * 64;
            for (p, &m) in mask.iter().enumerate() {
                let px: Vec<f32> = (0..3).map(|c| r.pixels.data()[c * plane + p]).collect();
                if m {
                    assert!(px.iter().all(|&v| v >= 0.6));
                } else {
                    assert!(px.iter().all(|&v| v <= 0.1));
                }
            }
        }
    }

    #[test]
    fn splits_have_unique_ids() {
        let s = shapes_splits(50, 20, 3, 32);
        let mut ids: Vec<u32> = s.all().map(|r| r.id).collect();
        let n = ids.len();
        ids.sort();
        ids.dedup();
        assert_eq!(ids.len(), n);
        assert_eq!(s.validation.len(), 5);
        assert!(s.validation.iter().all(|r| r.id % 10 == 0));
    }
}
