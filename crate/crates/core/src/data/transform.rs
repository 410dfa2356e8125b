use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::DomainDataset;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Background {
    Flat,
    LinearGradient,
    Checker,
    GaussianNoise,
}

impl Background {
    pub fn name(self) -> &'static str {
        match self {
            Background::Flat => "flat",
            Background::LinearGradient => "linear-gradient",
            Background::Checker => "checker",
            Background::GaussianNoise => "gaussian-noise",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Ok(match s {
            "flat" => Background::Flat,
            "linear-gradient" | "gradient" => Background::LinearGradient,
            "checker" => Background::Checker,
            "gaussian-noise" | "noise" => Background::GaussianNoise,
            _ => return Err(Error::Config(format!("unknown background `{s}`"))),
        })
    }
}

/// Pixelwise restyling of a glyph dataset.
///
/// Stages, each skipped when its parameters are neutral: contrast exponent on
/// stroke coverage, per-channel affine tint, additive background pattern
/// weighted by `1 - coverage`, polarity flip, then a clamp to `[-1, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct DomainTransform {
    pub gain: [f64; 3],
    pub bias: [f64; 3],
    pub background: Background,
    pub amplitude: f64,
    pub gamma: f64,
    pub invert: bool,
    pub seed: u64,
}

impl Default for DomainTransform {
    fn default() -> Self {
        Self {
            gain: [1.0; 3],
            bias: [0.0; 3],
            background: Background::Flat,
            amplitude: 0.0,
            gamma: 1.0,
            invert: false,
            seed: 0,
        }
    }
}

impl fmt::Display for DomainTransform {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "gain={:?} bias={:?} background={} amplitude={} gamma={} invert={} seed={}",
            self.gain,
            self.bias,
            self.background.name(),
            self.amplitude,
            self.gamma,
            self.invert,
            self.seed
        )
    }
}

impl DomainTransform {
    pub fn validate(&self) -> Result<()> {
        let finite = self.gain.iter().chain(&self.bias).all(|v| v.is_finite()) && self.amplitude.is_finite();
        if !finite || !(self.gamma.is_finite() && self.gamma > 0.0) || self.amplitude < 0.0 {
            return Err(Error::InvalidArgument(format!("invalid domain transform: {self}")));
        }
        Ok(())
    }

    fn pattern(&self, size: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
        let plane = size * size;
        match self.background {
            Background::Flat => vec![1.0; plane],
            Background::LinearGradient => {
                let angle = (self.seed % 360) as f64 * std::f64::consts::PI / 180.0;
                let (s, c) = angle.sin_cos();
                let half = (size as f64 - 1.0) / 2.0;
                let norm = half * (s.abs() + c.abs());
                (0..plane)
                    .map(|p| {
                        let (y, x) = ((p / size) as f64 - half, (p % size) as f64 - half);
                        (x * c + y * s) / norm.max(1.0)
                    })
                    .collect()
            }
            Background::Checker => {
                let cell = (size / 8).max(1) + (self.seed % 2) as usize;
                (0..plane)
                    .map(|p| {
                        if ((p / size) / cell + (p % size) / cell).is_multiple_of(2) {
                            1.0
                        } else {
                            -1.0
                        }
                    })
                    .collect()
            }
            Background::GaussianNoise => (0..plane).map(|_| rng.sample::<f64, _>(StandardNormal)).collect(),
        }
    }
}

/// Restyles every image of `base`; labels are untouched.
pub fn apply_domain_transform(base: &DomainDataset, t: &DomainTransform, domain: usize) -> Result<DomainDataset> {
    t.validate()?;
    let size = base.image_size();
    let plane = size * size;
    let src = base.images();
    let mut data = src.data().to_vec();
    let contrast = t.gamma != 1.0;
    let tint = t.gain != [1.0; 3] || t.bias != [0.0; 3];
    let backdrop = t.amplitude != 0.0;
    let mut rng = ChaCha8Rng::seed_from_u64(t.seed);
    for img in data.chunks_mut(3 * plane) {
        let pattern = if backdrop {
            t.pattern(size, &mut rng)
        } else {
            Vec::new()
        };
        for (ch, chan) in img.chunks_mut(plane).enumerate() {
            for (p, v) in chan.iter_mut().enumerate() {
                let cover = ((*v + 1.0) / 2.0).clamp(0.0, 1.0);
                let mut cov = cover;
                if contrast {
                    cov = cover.powf(t.gamma);
                    *v = 2.0 * cov - 1.0;
                }
                if tint {
                    *v = t.gain[ch] * *v + t.bias[ch];
                }
                if backdrop {
                    *v += t.amplitude * pattern[p] * (1.0 - cov);
                }
                if t.invert {
                    *v = -*v;
                }
                *v = v.clamp(-1.0, 1.0);
            }
        }
    }
    let images = Tensor::new(src.shape(), data)?;
    DomainDataset::new(
        domain,
        images,
        base.labels().to_vec(),
        format!("{} | transform({t})", base.provenance()),
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_glyph_dataset, GlyphSpec};

    fn base() -> DomainDataset {
        generate_glyph_dataset(&GlyphSpec {
            n_per_class: 20,
            image_size: 16,
            seed: 3,
        })
        .unwrap()
    }

    #[test]
    fn identity_is_bit_exact() {
        let b = base();
        let out = apply_domain_transform(&b, &DomainTransform::default(), 0).unwrap();
        assert!(out.images().bit_eq(b.images()));
        assert_eq!(out.labels(), b.labels());
    }

    #[test]
    fn polarity_negates() {
        let b = base();
        let t = DomainTransform {
            invert: true,
            ..Default::default()
        };
        let out = apply_domain_transform(&b, &t, 1).unwrap();
        for (x, y) in b.images().data().iter().zip(out.images().data()) {
            assert_eq!(*y, -x);
        }
    }

    #[test]
    fn every_background_stays_in_range_and_is_deterministic() {
        let b = base();
        for bg in [
            Background::Flat,
            Background::LinearGradient,
            Background::Checker,
            Background::GaussianNoise,
        ] {
            let t = DomainTransform {
                gain: [0.8, 0.5, 1.2],
                bias: [0.1, -0.2, 0.3],
                background: bg,
                amplitude: 0.6,
                gamma: 0.7,
                invert: false,
                seed: 11,
            };
            let a = apply_domain_transform(&b, &t, 1).unwrap();
            let c = apply_domain_transform(&b, &t, 1).unwrap();
            assert!(a.images().bit_eq(c.images()));
            assert!(a.images().data().iter().all(|v| (-1.0..=1.0).contains(v)));
            assert!(!a.images().bit_eq(b.images()), "{}", bg.name());
        }
    }

    #[test]
    fn rejects_bad_parameters() {
        let t = DomainTransform {
            gamma: 0.0,
            ..Default::default()
        };
        assert!(t.validate().is_err());
    }
}
