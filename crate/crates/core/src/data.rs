//! Synthetic "organ" images: soft-edged ellipses on a noisy background.
//!
//! Every sample is a pure function of `(spec, index)`. Whether index `i`
//! holds an organ is decided without randomness, spreading the organ
//! images evenly so that exactly `floor(count · organ_fraction)` of them
//! carry a shape.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Steepness of the ellipse rim in the image (not the mask).
const EDGE_SHARPNESS: f64 = 12.0;
const BACKGROUND: f64 = 0.2;

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticSpec {
    pub image_size: usize,
    pub count: usize,
    pub organ_fraction: f64,
    pub noise_sigma: f64,
    pub channels: usize,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec { image_size: 64, count: 32, organ_fraction: 1.0, noise_sigma: 0.05, channels: 3, seed: 1 }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Ellipse {
    pub cx: f64,
    pub cy: f64,
    pub rx: f64,
    pub ry: f64,
    pub angle: f64,
    pub intensity: f64,
}

impl Ellipse {
    /// `(x'/rx)² + (y'/ry)²` in the ellipse's rotated frame; `≤ 1` inside.
    pub fn level(&self, x: f64, y: f64) -> f64 {
        let (s, c) = self.angle.sin_cos();
        let (dx, dy) = (x - self.cx, y - self.cy);
        let u = (c * dx + s * dy) / self.rx;
        let v = (-s * dx + c * dy) / self.ry;
        u * u + v * v
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    /// `[C, H, W]`, the same plane in every channel.
    pub image: Tensor,
    /// `[1, H, W]` in `{0, 1}`.
    pub mask: Tensor,
    pub has_organ: bool,
    pub ellipses: Vec<Ellipse>,
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if self.image_size == 0 || self.count == 0 || self.channels == 0 {
            return Err(Error::Config("image_size, count and channels must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.organ_fraction) {
            return Err(Error::Config(format!("organ_fraction {} outside [0, 1]", self.organ_fraction)));
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return Err(Error::Config(format!("noise_sigma {} must be finite and >= 0", self.noise_sigma)));
        }
        Ok(())
    }

    pub fn has_organ(&self, index: usize) -> bool {
        let f = self.organ_fraction;
        ((index + 1) as f64 * f).floor() > (index as f64 * f).floor()
    }

    pub fn generate(&self, index: usize) -> Result<Sample> {
        self.validate()?;
        if index >= self.count {
            return Err(Error::Contract(format!("sample index {index} out of range (count {})", self.count)));
        }
        let n = self.image_size;
        let size = n as f64;
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(index as u64);

        let has_organ = self.has_organ(index);
        let ellipses: Vec<Ellipse> = if has_organ {
            (0..rng.random_range(1..=3))
                .map(|_| Ellipse {
                    cx: rng.random_range(0.25..0.75) * size,
                    cy: rng.random_range(0.25..0.75) * size,
                    rx: rng.random_range(0.1..0.25) * size,
                    ry: rng.random_range(0.1..0.25) * size,
                    angle: rng.random_range(0.0..std::f64::consts::PI),
                    intensity: rng.random_range(0.5..0.8),
                })
                .collect()
        } else {
            Vec::new()
        };

        let noise = Normal::new(0.0, self.noise_sigma).map_err(|e| Error::Config(e.to_string()))?;
        let mut plane = vec![0.0; n * n];
        let mut mask = vec![0.0; n * n];
        for y in 0..n {
            for x in 0..n {
                let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
                let mut v = BACKGROUND;
                for e in &ellipses {
                    let q = e.level(px, py);
                    if q <= 1.0 {
                        mask[y * n + x] = 1.0;
                    }
                    let rim = 1.0 / (1.0 + (-(1.0 - q.sqrt()) * EDGE_SHARPNESS).exp());
                    v = v.max(BACKGROUND + e.intensity * rim);
                }
                plane[y * n + x] = v + noise.sample(&mut rng);
            }
        }
        let image: Vec<f64> = (0..self.channels).flat_map(|_| plane.iter().copied()).collect();
        Ok(Sample {
            image: Tensor::new(&[self.channels, n, n], image)?,
            mask: Tensor::new(&[1, n, n], mask)?,
            has_organ,
            ellipses,
        })
    }
}

/// A fully materialized synthetic set.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub spec: SyntheticSpec,
    pub samples: Vec<Sample>,
}

impl Dataset {
    pub fn generate(spec: &SyntheticSpec) -> Result<Dataset> {
        let samples = (0..spec.count).map(|i| spec.generate(i)).collect::<Result<_>>()?;
        Ok(Dataset { spec: spec.clone(), samples })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Stacks the selected samples into `[B, C, H, W]` images,
    /// `[B, 1, H, W]` masks and the organ flags.
    pub fn batch(&self, indices: &[usize]) -> Result<(Tensor, Tensor, Vec<bool>)> {
        let pick = |f: fn(&Sample) -> &Tensor| -> Result<Tensor> {
            let items: Vec<Tensor> = indices.iter().map(|&i| f(&self.samples[i]).clone()).collect();
            Tensor::stack(&items)
        };
        Ok((pick(|s| &s.image)?, pick(|s| &s.mask)?, indices.iter().map(|&i| self.samples[i].has_organ).collect()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn organ_fraction_is_exact() {
        for (count, f, want) in [(32, 0.5, 16), (10, 0.3, 3), (7, 0.0, 0), (7, 1.0, 7)] {
            let spec = SyntheticSpec { count, organ_fraction: f, ..SyntheticSpec::default() };
            assert_eq!((0..count).filter(|&i| spec.has_organ(i)).count(), want);
        }
    }

    #[test]
    fn no_organ_means_empty_mask() {
        let spec = SyntheticSpec { organ_fraction: 0.0, count: 4, image_size: 16, ..SyntheticSpec::default() };
        for i in 0..4 {
            let s = spec.generate(i).unwrap();
            assert!(!s.has_organ);
            assert_eq!(s.mask.sum(), 0.0);
        }
    }

    #[test]
    fn mask_follows_ellipse_equation() {
        let spec = SyntheticSpec { image_size: 32, count: 3, ..SyntheticSpec::default() };
        for i in 0..3 {
            let s = spec.generate(i).unwrap();
            assert!((1..=3).contains(&s.ellipses.len()));
            for y in 0..32 {
                for x in 0..32 {
                    let inside = s.ellipses.iter().any(|e| e.level(x as f64 + 0.5, y as f64 + 0.5) <= 1.0);
                    assert_eq!(s.mask.data()[y * 32 + x], if inside { 1.0 } else { 0.0 });
                }
            }
        }
    }

    #[test]
    fn channels_replicate_one_plane() {
        let s = SyntheticSpec { image_size: 8, ..SyntheticSpec::default() }.generate(0).unwrap();
        let d = s.image.data();
        assert_eq!(&d[..64], &d[64..128]);
        assert_eq!(&d[..64], &d[128..]);
    }

    #[test]
    fn index_out_of_range() {
        let spec = SyntheticSpec { count: 2, ..SyntheticSpec::default() };
        assert!(matches!(spec.generate(2), Err(Error::Contract(_))));
    }
}
