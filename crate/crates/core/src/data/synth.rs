//! Procedural textures and exact-area anomaly injection.

use std::f32::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{quantize, AnomalyKind, AnomalySpec, CategoryData, CategorySpec, Label, Mask, Sample, Texture};
use crate::error::Result;
use crate::nn::Tensor;

const TRAIN_STREAM: u64 = 0;
const GOOD_STREAM: u64 = 1 << 32;
const BAD_STREAM: u64 = 2 << 32;

fn image_rng(seed: u64, stream: u64, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream + index as u64);
    rng
}

/// Texture intensity in `[0, 1]` per pixel; every call draws a fresh phase.
pub fn render_texture(texture: &Texture, (h, w): (usize, usize), rng: &mut impl Rng) -> Vec<f32> {
    let mut out = vec![0.0f32; h * w];
    match *texture {
        Texture::Stripes { period, angle_deg } => {
            let phase = rng.gen_range(0.0..2.0 * PI);
            let angle = (angle_deg + rng.gen_range(-4.0f32..4.0)).to_radians();
            let (s, c) = angle.sin_cos();
            for y in 0..h {
                for x in 0..w {
                    let t = (x as f32 * c + y as f32 * s) / period;
                    out[y * w + x] = 0.5 + 0.5 * (2.0 * PI * t + phase).sin();
                }
            }
        }
        Texture::Checker { cell } => {
            let ox = rng.gen_range(0.0..2.0 * cell);
            let oy = rng.gen_range(0.0..2.0 * cell);
            for y in 0..h {
                for x in 0..w {
                    let p = ((x as f32 + ox) / cell).floor() as i64 + ((y as f32 + oy) / cell).floor() as i64;
                    out[y * w + x] = if p.rem_euclid(2) == 0 { 0.2 } else { 0.8 };
                }
            }
        }
        Texture::ValueNoise { cell } => {
            let gh = (h as f32 / cell).ceil() as usize + 2;
            let gw = (w as f32 / cell).ceil() as usize + 2;
            let lattice: Vec<f32> = (0..gh * gw).map(|_| rng.gen::<f32>()).collect();
            let ox = rng.gen_range(0.0..cell);
            let oy = rng.gen_range(0.0..cell);
            let smooth = |t: f32| t * t * (3.0 - 2.0 * t);
            for y in 0..h {
                let fy = (y as f32 + oy) / cell;
                let (iy, ty) = (fy.floor() as usize, smooth(fy.fract()));
                for x in 0..w {
                    let fx = (x as f32 + ox) / cell;
                    let (ix, tx) = (fx.floor() as usize, smooth(fx.fract()));
                    let at = |yy: usize, xx: usize| lattice[yy * gw + xx];
                    let top = at(iy, ix) * (1.0 - tx) + at(iy, ix + 1) * tx;
                    let bottom = at(iy + 1, ix) * (1.0 - tx) + at(iy + 1, ix + 1) * tx;
                    out[y * w + x] = top * (1.0 - ty) + bottom * ty;
                }
            }
        }
        Texture::Blobs { count, radius } => {
            let centers: Vec<(f32, f32)> = (0..count)
                .map(|_| (rng.gen_range(0.0..h as f32), rng.gen_range(0.0..w as f32)))
                .collect();
            let inv = 1.0 / (2.0 * radius * radius);
            for y in 0..h {
                for x in 0..w {
                    let v: f32 = centers
                        .iter()
                        .map(|&(cy, cx)| (-((y as f32 - cy).powi(2) + (x as f32 - cx).powi(2)) * inv).exp())
                        .sum();
                    out[y * w + x] = v.min(1.0);
                }
            }
        }
    }
    out
}

fn colorize(pattern: &[f32], colors: &[[f32; 3]; 2], rng: &mut impl Rng) -> Vec<f32> {
    let n = pattern.len();
    let mut img = vec![0.0f32; 3 * n];
    for (p, &f) in pattern.iter().enumerate() {
        for c in 0..3 {
            img[c * n + p] = colors[0][c] * (1.0 - f) + colors[1][c] * f + rng.gen_range(-0.02..0.02);
        }
    }
    img
}

fn normal_image(spec: &CategorySpec, rng: &mut impl Rng) -> Vec<f32> {
    let pattern = render_texture(&spec.texture, spec.image_hw, rng);
    colorize(&pattern, &spec.colors, rng)
}

/// Exactly `round(size_fraction·H·W)` pixels (at least one) nearest to a few
/// random centers under a kind-specific anisotropic, jittered distance.
pub fn anomaly_mask(anomaly: &AnomalySpec, (h, w): (usize, usize), rng: &mut impl Rng) -> Mask {
    let target = ((anomaly.size_fraction * (h * w) as f64).round() as usize).clamp(1, h * w);
    let regions = rng.gen_range(anomaly.count.0..=anomaly.count.1);
    let shapes: Vec<(f32, f32, f32, f32)> = (0..regions)
        .map(|_| {
            let cy = rng.gen_range(0.2..0.8) * h as f32;
            let cx = rng.gen_range(0.2..0.8) * w as f32;
            let aspect = match anomaly.kind {
                AnomalyKind::Scratch => 3.0,
                AnomalyKind::ContrastBlob => rng.gen_range(0.7..1.4),
                AnomalyKind::TextureSwap => rng.gen_range(0.8..1.25),
            };
            (cy, cx, aspect, rng.gen_range(0.0..PI))
        })
        .collect();
    let mut dist: Vec<(f32, usize)> = (0..h * w)
        .map(|p| {
            let (y, x) = ((p / w) as f32, (p % w) as f32);
            let d = shapes
                .iter()
                .map(|&(cy, cx, a, theta)| {
                    let (s, c) = theta.sin_cos();
                    let (dy, dx) = (y - cy, x - cx);
                    let u = dx * c + dy * s;
                    let v = -dx * s + dy * c;
                    ((u / a).powi(2) + (v * a).powi(2)).sqrt()
                })
                .fold(f32::INFINITY, f32::min);
            (d + rng.gen_range(0.0..0.6), p)
        })
        .collect();
    dist.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    let mut mask = Mask::empty(h, w);
    for &(_, p) in &dist[..target] {
        mask.data[p] = true;
    }
    mask
}

fn apply_anomaly(spec: &CategorySpec, img: &mut [f32], mask: &Mask, rng: &mut impl Rng) {
    let n = mask.data.len();
    match spec.anomaly.kind {
        AnomalyKind::ContrastBlob => {
            // A saturated color away from the palette's mean.
            let mean: Vec<f32> = (0..3).map(|c| 0.5 * (spec.colors[0][c] + spec.colors[1][c])).collect();
            let color: Vec<f32> = mean.iter().map(|&m| if m < 0.5 { rng.gen_range(0.85..1.0) } else { rng.gen_range(0.0..0.15) }).collect();
            for p in (0..n).filter(|&p| mask.data[p]) {
                for c in 0..3 {
                    img[c * n + p] = 0.2 * img[c * n + p] + 0.8 * color[c];
                }
            }
        }
        AnomalyKind::Scratch => {
            for p in (0..n).filter(|&p| mask.data[p]) {
                for c in 0..3 {
                    img[c * n + p] *= 0.15;
                }
            }
        }
        AnomalyKind::TextureSwap => {
            let other = Texture::Stripes {
                period: 3.0,
                angle_deg: rng.gen_range(0.0..180.0),
            };
            let pattern = render_texture(&other, spec.image_hw, rng);
            let swapped = colorize(&pattern, &[spec.colors[1], spec.colors[0]], rng);
            for p in (0..n).filter(|&p| mask.data[p]) {
                for c in 0..3 {
                    img[c * n + p] = swapped[c * n + p];
                }
            }
        }
    }
}

fn finish(spec: &CategorySpec, name: String, img: Vec<f32>, label: Label, mask: Mask) -> Sample {
    let (h, w) = spec.image_hw;
    let data = img.into_iter().map(quantize).collect();
    Sample {
        name,
        image: Tensor::new(vec![3, h, w], data).expect("image shape"),
        label,
        defect: (label == Label::Anomalous).then(|| spec.anomaly.kind.as_str().to_string()),
        mask,
    }
}

/// Generates a category in memory; pixel values are already 8-bit quantized.
pub fn synthesize_category(spec: &CategorySpec) -> Result<CategoryData> {
    spec.validate()?;
    let (h, w) = spec.image_hw;
    let good = |stream: u64, i: usize| {
        let mut rng = image_rng(spec.seed, stream, i);
        let img = normal_image(spec, &mut rng);
        finish(spec, format!("{i:03}"), img, Label::Good, Mask::empty(h, w))
    };
    let train = (0..spec.n_train).map(|i| good(TRAIN_STREAM, i)).collect();
    let test_good = (0..spec.n_test_good).map(|i| good(GOOD_STREAM, i)).collect();
    let test_bad = (0..spec.n_test_bad)
        .map(|i| {
            let mut rng = image_rng(spec.seed, BAD_STREAM, i);
            let mut img = normal_image(spec, &mut rng);
            let mask = anomaly_mask(&spec.anomaly, spec.image_hw, &mut rng);
            apply_anomaly(spec, &mut img, &mask, &mut rng);
            finish(spec, format!("{i:03}"), img, Label::Anomalous, mask)
        })
        .collect();
    Ok(CategoryData {
        name: spec.name.clone(),
        train,
        test_good,
        test_bad,
    })
}

/// Size fractions of the default five-category suite, smallest first.
pub const SUITE_SIZE_FRACTIONS: [f64; 5] = [0.001, 0.005, 0.01, 0.02, 0.05];
const SUITE_NAMES: [&str; 5] = ["speck", "dot", "spot", "patch", "blotch"];

/// Five 64×64 categories sharing one texture family and differing in anomaly size.
pub fn default_suite(seed: u64) -> Vec<CategorySpec> {
    SUITE_NAMES
        .iter()
        .zip(SUITE_SIZE_FRACTIONS)
        .enumerate()
        .map(|(i, (name, fraction))| CategorySpec {
            name: name.to_string(),
            image_hw: (64, 64),
            texture: Texture::ValueNoise { cell: 8.0 },
            colors: [[0.25, 0.3, 0.35], [0.65, 0.6, 0.5]],
            anomaly: AnomalySpec {
                kind: AnomalyKind::ContrastBlob,
                size_fraction: fraction,
                count: (1, 1),
            },
            n_train: 40,
            n_test_good: 10,
            n_test_bad: 20,
            seed: seed.wrapping_mul(1000).wrapping_add(i as u64),
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn small_spec(fraction: f64) -> CategorySpec {
        let mut s = default_suite(3).remove(0);
        s.anomaly.size_fraction = fraction;
        s.n_train = 3;
        s.n_test_good = 2;
        s.n_test_bad = 4;
        s
    }

    #[test]
    fn zero_fraction_is_rejected() {
        assert!(synthesize_category(&small_spec(0.0)).is_err());
        assert!(synthesize_category(&small_spec(1.5)).is_err());
    }

    #[test]
    fn generation_is_deterministic() {
        let a = synthesize_category(&small_spec(0.02)).unwrap();
        let b = synthesize_category(&small_spec(0.02)).unwrap();
        for (x, y) in a.train.iter().chain(&a.test_bad).zip(b.train.iter().chain(&b.test_bad)) {
            assert_eq!(x.image, y.image);
            assert_eq!(x.mask, y.mask);
        }
    }

    #[test]
    fn masks_have_target_area_and_good_images_none() {
        let d = synthesize_category(&small_spec(0.02)).unwrap();
        let target = (0.02f64 * 4096.0).round() as usize;
        for s in &d.test_bad {
            assert_eq!(s.mask.area(), target);
            assert_eq!(s.defect.as_deref(), Some("contrast_blob"));
        }
        assert!(d.train.iter().chain(&d.test_good).all(|s| s.mask.area() == 0 && !s.is_anomalous()));
    }

    #[test]
    fn suite_area_ratio_spans_fifty() {
        let suite = default_suite(0);
        let area = |s: &CategorySpec| (s.anomaly.size_fraction * 4096.0).round();
        let ratio = area(&suite[4]) / area(&suite[0]);
        assert!((ratio - 51.25).abs() < 1e-9, "{ratio}");
    }

    #[test]
    fn anomalies_change_masked_pixels_only() {
        let spec = small_spec(0.05);
        let d = synthesize_category(&spec).unwrap();
        let s = &d.test_bad[0];
        let mut rng = image_rng(spec.seed, BAD_STREAM, 0);
        let clean: Vec<f32> = normal_image(&spec, &mut rng).into_iter().map(quantize).collect();
        let n = 64 * 64;
        for p in 0..n {
            let changed = (0..3).any(|c| (s.image.data()[c * n + p] - clean[c * n + p]).abs() > 0.0);
            if !s.mask.data[p] {
                assert!(!changed);
            }
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]

        #[test]
        fn mask_area_is_exact(fraction in 0.0005f64..0.5, regions in 1usize..4, seed in 0u64..1000, kind in 0usize..3) {
            let kind = [AnomalyKind::ContrastBlob, AnomalyKind::Scratch, AnomalyKind::TextureSwap][kind];
            let spec = AnomalySpec { kind, size_fraction: fraction, count: (regions, regions) };
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let m = anomaly_mask(&spec, (32, 48), &mut rng);
            let target = ((fraction * 1536.0).round() as usize).max(1);
            prop_assert_eq!(m.area(), target);
        }

        #[test]
        fn textures_stay_in_unit_range(seed in 0u64..500, which in 0usize..4) {
            let tex = [
                Texture::Stripes { period: 5.0, angle_deg: 30.0 },
                Texture::Checker { cell: 4.0 },
                Texture::ValueNoise { cell: 6.0 },
                Texture::Blobs { count: 5, radius: 4.0 },
            ][which].clone();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let t = render_texture(&tex, (20, 24), &mut rng);
            prop_assert!(t.iter().all(|v| (0.0..=1.0).contains(v)));
        }
    }
}
