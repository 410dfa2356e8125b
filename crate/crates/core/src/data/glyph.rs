//! Procedural ten-class glyph corpus rendered as anti-aliased strokes.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::DomainDataset;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const NUM_CLASSES: usize = 10;
pub const MIN_PER_CLASS: usize = 20;

type Stroke = Vec<(f64, f64)>;

fn ellipse(cx: f64, cy: f64, rx: f64, ry: f64, steps: usize) -> Stroke {
    (0..=steps)
        .map(|k| {
            let t = 2.0 * PI * k as f64 / steps as f64;
            (cx + rx * t.cos(), cy + ry * t.sin())
        })
        .collect()
}

/// Digit-like skeletons in the unit square (x right, y down).
fn base_skeleton(class: usize) -> Vec<Stroke> {
    match class {
        0 => vec![ellipse(0.5, 0.5, 0.2, 0.32, 16)],
        1 => vec![vec![(0.36, 0.3), (0.52, 0.15), (0.52, 0.85)]],
        2 => vec![vec![
            (0.3, 0.3),
            (0.4, 0.18),
            (0.6, 0.18),
            (0.7, 0.3),
            (0.65, 0.45),
            (0.3, 0.85),
            (0.72, 0.85),
        ]],
        3 => vec![vec![
            (0.3, 0.2),
            (0.68, 0.2),
            (0.48, 0.47),
            (0.7, 0.6),
            (0.62, 0.82),
            (0.3, 0.82),
        ]],
        4 => vec![vec![(0.62, 0.85), (0.62, 0.15), (0.28, 0.62), (0.76, 0.62)]],
        5 => vec![vec![
            (0.7, 0.18),
            (0.35, 0.18),
            (0.32, 0.48),
            (0.6, 0.45),
            (0.7, 0.62),
            (0.6, 0.82),
            (0.3, 0.82),
        ]],
        6 => vec![vec![
            (0.65, 0.18),
            (0.4, 0.35),
            (0.32, 0.62),
            (0.45, 0.82),
            (0.62, 0.78),
            (0.68, 0.62),
            (0.55, 0.5),
            (0.35, 0.58),
        ]],
        7 => vec![vec![(0.28, 0.18), (0.72, 0.18), (0.45, 0.85)]],
        8 => vec![ellipse(0.5, 0.32, 0.15, 0.14, 12), ellipse(0.5, 0.66, 0.18, 0.18, 12)],
        9 => vec![ellipse(0.48, 0.35, 0.16, 0.16, 12), vec![(0.64, 0.35), (0.6, 0.85)]],
        _ => unreachable!("ten classes"),
    }
}

fn segment_distance(p: (f64, f64), a: (f64, f64), b: (f64, f64)) -> f64 {
    let (dx, dy) = (b.0 - a.0, b.1 - a.1);
    let len2 = dx * dx + dy * dy;
    let t = if len2 == 0.0 {
        0.0
    } else {
        (((p.0 - a.0) * dx + (p.1 - a.1) * dy) / len2).clamp(0.0, 1.0)
    };
    let (qx, qy) = (a.0 + t * dx, a.1 + t * dy);
    ((p.0 - qx).powi(2) + (p.1 - qy).powi(2)).sqrt()
}

/// Rasterizes strokes (already in pixel coordinates) into `[0, 1]` coverage.
fn render(strokes: &[Stroke], size: usize, half_width: f64) -> Vec<f64> {
    let mut img = vec![0.0; size * size];
    for y in 0..size {
        for x in 0..size {
            let p = (x as f64 + 0.5, y as f64 + 0.5);
            let mut d = f64::INFINITY;
            for s in strokes {
                for w in s.windows(2) {
                    d = d.min(segment_distance(p, w[0], w[1]));
                }
            }
            img[y * size + x] = (half_width + 0.5 - d).clamp(0.0, 1.0);
        }
    }
    img
}

#[derive(Clone, Debug, PartialEq)]
pub struct GlyphSpec {
    pub n_per_class: usize,
    pub image_size: usize,
    pub seed: u64,
}

/// Renders `n_per_class` jittered samples per class, grayscale replicated to
/// three channels, pixels in `[-1, 1]` (background `-1`). Labels are grouped
/// by class in ascending order.
pub fn generate_glyph_dataset(spec: &GlyphSpec) -> Result<DomainDataset> {
    if spec.n_per_class < MIN_PER_CLASS {
        return Err(Error::InvalidArgument(format!(
            "n_per_class {} < {MIN_PER_CLASS}",
            spec.n_per_class
        )));
    }
    if spec.image_size < 8 {
        return Err(Error::InvalidArgument(format!("image size {}", spec.image_size)));
    }
    let size = spec.image_size as f64;
    let scale_px = size / 32.0;
    let mut geo_rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let skeletons: Vec<Vec<Stroke>> = (0..NUM_CLASSES)
        .map(|c| {
            base_skeleton(c)
                .into_iter()
                .map(|s| {
                    s.into_iter()
                        .map(|(x, y)| {
                            (
                                x + geo_rng.random_range(-0.03..0.03),
                                y + geo_rng.random_range(-0.03..0.03),
                            )
                        })
                        .collect()
                })
                .collect()
        })
        .collect();

    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed ^ 0x9e37_79b9_7f4a_7c15);
    let plane = spec.image_size * spec.image_size;
    let n = NUM_CLASSES * spec.n_per_class;
    let mut data = Vec::with_capacity(n * 3 * plane);
    let mut labels = Vec::with_capacity(n);
    for (class, skel) in skeletons.iter().enumerate() {
        for _ in 0..spec.n_per_class {
            let angle = rng.random_range(-15.0f64..15.0).to_radians();
            let (tx, ty) = (
                rng.random_range(-3.0..3.0) * scale_px,
                rng.random_range(-3.0..3.0) * scale_px,
            );
            let zoom = rng.random_range(0.85..1.05) * size;
            let half_width = rng.random_range(0.9..1.5) * scale_px;
            let (sn, cs) = angle.sin_cos();
            let placed: Vec<Stroke> = skel
                .iter()
                .map(|s| {
                    s.iter()
                        .map(|&(x, y)| {
                            let (u, v) = ((x - 0.5) * zoom, (y - 0.5) * zoom);
                            (size / 2.0 + cs * u - sn * v + tx, size / 2.0 + sn * u + cs * v + ty)
                        })
                        .collect()
                })
                .collect();
            let cover = render(&placed, spec.image_size, half_width);
            for _ in 0..3 {
                data.extend(cover.iter().map(|c| 2.0 * c - 1.0));
            }
            labels.push(class);
        }
    }
    let images = Tensor::new(&[n, 3, spec.image_size, spec.image_size], data)?;
    DomainDataset::new(
        0,
        images,
        labels,
        format!(
            "glyphs(n_per_class={}, size={}, seed={})",
            spec.n_per_class, spec.image_size, spec.seed
        ),
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn counts_and_determinism() {
        let spec = GlyphSpec {
            n_per_class: 20,
            image_size: 16,
            seed: 4,
        };
        let a = generate_glyph_dataset(&spec).unwrap();
        let b = generate_glyph_dataset(&spec).unwrap();
        assert_eq!(a.len(), 200);
        assert!(a.images().bit_eq(b.images()));
        for c in 0..10 {
            assert_eq!(a.labels().iter().filter(|&&l| l == c).count(), 20);
        }
        assert!(a.images().data().iter().all(|v| (-1.0..=1.0).contains(v)));
        assert!(generate_glyph_dataset(&GlyphSpec {
            n_per_class: 19,
            ..spec
        })
        .is_err());
    }
}
