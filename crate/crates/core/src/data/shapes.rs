//! Eight-class procedural shapes task used to pretrain teacher backbones.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::quantize;
use crate::nn::Tensor;

pub const SHAPE_CLASSES: [&str; 8] = [
    "disk",
    "square",
    "triangle",
    "ring",
    "plus",
    "horizontal_bars",
    "vertical_bars",
    "cross",
];

/// Whether the point `(u, v)`, relative to the shape center in units of its
/// radius, belongs to shape `class`.
fn inside(class: usize, u: f32, v: f32) -> bool {
    let r = (u * u + v * v).sqrt();
    match class {
        0 => r <= 1.0,
        1 => u.abs() <= 0.85 && v.abs() <= 0.85,
        2 => v <= 0.8 && v >= 2.0 * u.abs() - 1.0,
        3 => (0.55..=1.0).contains(&r),
        4 => (u.abs() <= 0.3 && v.abs() <= 1.0) || (v.abs() <= 0.3 && u.abs() <= 1.0),
        5 => u.abs() <= 1.0 && v.abs() <= 1.0 && ((v + 1.0) * 2.5).floor() as i32 % 2 == 0,
        6 => u.abs() <= 1.0 && v.abs() <= 1.0 && ((u + 1.0) * 2.5).floor() as i32 % 2 == 0,
        _ => u.abs() <= 1.0 && v.abs() <= 1.0 && ((u - v).abs() <= 0.35 || (u + v).abs() <= 0.35),
    }
}

/// `n_per_class` labeled `3 × hw × hw` images per class, with random
/// position, size, colors and background noise.
pub fn shapes_dataset(n_per_class: usize, hw: usize, seed: u64) -> Vec<(Tensor, usize)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(n_per_class * SHAPE_CLASSES.len());
    for _ in 0..n_per_class {
        for class in 0..SHAPE_CLASSES.len() {
            let radius = rng.gen_range(0.28..0.42) * hw as f32;
            let cy = rng.gen_range(radius..hw as f32 - radius);
            let cx = rng.gen_range(radius..hw as f32 - radius);
            let bg: [f32; 3] = std::array::from_fn(|_| rng.gen_range(0.0..0.45));
            let fg: [f32; 3] = std::array::from_fn(|_| rng.gen_range(0.55..1.0));
            let (fg, bg) = if rng.gen_bool(0.5) { (fg, bg) } else { (bg, fg) };
            let n = hw * hw;
            let mut data = vec![0.0f32; 3 * n];
            for y in 0..hw {
                for x in 0..hw {
                    let u = (x as f32 + 0.5 - cx) / radius;
                    let v = (y as f32 + 0.5 - cy) / radius;
                    let col = if inside(class, u, v) { fg } else { bg };
                    for c in 0..3 {
                        data[c * n + y * hw + x] = quantize(col[c] + rng.gen_range(-0.05..0.05));
                    }
                }
            }
            out.push((Tensor::new(vec![3, hw, hw], data).expect("image shape"), class));
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn balanced_and_deterministic() {
        let a = shapes_dataset(3, 16, 5);
        let b = shapes_dataset(3, 16, 5);
        assert_eq!(a.len(), 24);
        for k in 0..8 {
            assert_eq!(a.iter().filter(|(_, c)| *c == k).count(), 3);
        }
        assert!(a.iter().zip(&b).all(|(x, y)| x.0 == y.0 && x.1 == y.1));
        assert!(a.iter().all(|(t, _)| t.data().iter().all(|v| (0.0..=1.0).contains(v))));
    }

    #[test]
    fn shape_masks_differ_between_classes() {
        let grid: Vec<Vec<bool>> = (0..8)
            .map(|k| {
                (0..400)
                    .map(|p| inside(k, (p % 20) as f32 / 10.0 - 0.95, (p / 20) as f32 / 10.0 - 0.95))
                    .collect()
            })
            .collect();
        for a in 0..8 {
            assert!(grid[a].iter().any(|&b| b));
            for b in a + 1..8 {
                assert_ne!(grid[a], grid[b], "classes {a} and {b}");
            }
        }
    }
}
