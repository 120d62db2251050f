//! Synthetic pseudo-radiographs.
//!
//! A fixed template (two dark elliptical lung fields with faint rib
//! striping, a bright central spine band, a mid-gray background) is sampled
//! through a smooth per-image warp, jittered in intensity, noised and
//! quantized to 8 bits. Lesions are blobs or textured patches clipped to the
//! interior of one lung.

use std::f64::consts::PI;

use rand::Rng as _;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::io::quantize;
use crate::error::{Error, Result};
use crate::rng::{self, streams, Rng};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthConfig {
    pub image_size: usize,
    pub background: [f64; 2],
    pub lung_intensity: [f64; 2],
    pub spine_intensity: [f64; 2],
    /// Largest warp displacement as a fraction of the image side.
    pub max_displacement: f64,
    pub warp_components: usize,
    pub noise_std: f64,
    pub lesion_area: [f64; 2],
    /// Magnitude range of the lesion intensity shift; the sign is random.
    pub lesion_delta: [f64; 2],
}

impl SynthConfig {
    pub fn with_size(image_size: usize) -> Self {
        Self {
            image_size,
            background: [0.48, 0.56],
            lung_intensity: [0.22, 0.30],
            spine_intensity: [0.80, 0.90],
            max_displacement: 0.05,
            warp_components: 3,
            noise_std: 0.02,
            lesion_area: [0.04, 0.12],
            lesion_delta: [0.15, 0.4],
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ranges = [
            ("background", self.background),
            ("lung_intensity", self.lung_intensity),
            ("spine_intensity", self.spine_intensity),
            ("lesion_area", self.lesion_area),
            ("lesion_delta", self.lesion_delta),
        ];
        for (name, [lo, hi]) in ranges {
            if !(lo.is_finite() && hi.is_finite() && lo <= hi && lo >= 0.0) {
                return Err(Error::Config(format!("synth.{name} must be a non-empty range, got [{lo}, {hi}]")));
            }
        }
        if self.lesion_area[1] > LUNG_INTERIOR_AREA || self.lesion_area[0] <= 0.0 {
            return Err(Error::Config(format!(
                "synth.lesion_area {:?} must lie in (0, {LUNG_INTERIOR_AREA:.3}] to fit inside one lung",
                self.lesion_area
            )));
        }
        if !(0.0..=0.1).contains(&self.max_displacement) {
            return Err(Error::Config(format!("synth.max_displacement {} must be in [0, 0.1]", self.max_displacement)));
        }
        if self.image_size < 16 || self.noise_std < 0.0 || self.warp_components == 0 {
            return Err(Error::Config(format!("synth sizes invalid: {self:?}")));
        }
        Ok(())
    }
}

/// A generated image with its label and defect mask.
#[derive(Clone, Debug, PartialEq)]
pub struct LabeledSample {
    pub size: usize,
    pub image: Vec<f64>,
    pub label: u8,
    pub mask: Vec<bool>,
}

impl LabeledSample {
    pub fn mask_area(&self) -> f64 {
        self.mask.iter().filter(|&&m| m).count() as f64 / self.mask.len() as f64
    }
}

const LUNG_CENTERS: [(f64, f64); 2] = [(0.29, 0.5), (0.71, 0.5)];
const LUNG_AXES: (f64, f64) = (0.16, 0.36);
const SPINE_HALF_WIDTH: f64 = 0.045;
/// Normalized ellipse radius bounding the lung interior used for lesions.
const LUNG_INTERIOR: f64 = 0.9;
/// Area fraction of one lung interior.
const LUNG_INTERIOR_AREA: f64 = PI * LUNG_AXES.0 * LUNG_AXES.1 * LUNG_INTERIOR * LUNG_INTERIOR;

#[derive(Clone, Debug)]
struct Layout {
    background: f64,
    lung: f64,
    spine: f64,
    /// `(amplitude, freq_u, freq_v, phase)` per component, per axis.
    warp: [Vec<(f64, f64, f64, f64)>; 2],
}

impl Layout {
    fn sample(cfg: &SynthConfig, rng: &mut Rng) -> Self {
        let mut range = |[lo, hi]: [f64; 2]| if hi > lo { rng.random_range(lo..hi) } else { lo };
        let background = range(cfg.background);
        let lung = range(cfg.lung_intensity);
        let spine = range(cfg.spine_intensity);
        let warp = std::array::from_fn(|_| {
            let total = cfg.max_displacement * rng.random_range(0.3..1.0);
            let raw: Vec<f64> = (0..cfg.warp_components).map(|_| rng.random_range(0.1..1.0)).collect();
            let norm: f64 = raw.iter().sum();
            raw.iter()
                .map(|a| {
                    (a / norm * total, rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(0.0..2.0 * PI))
                })
                .collect()
        });
        Self { background, lung, spine, warp }
    }

    /// Template coordinates seen by output pixel `(u, v)`.
    fn warped(&self, u: f64, v: f64) -> (f64, f64) {
        let d = |axis: &Vec<(f64, f64, f64, f64)>| {
            axis.iter().map(|&(a, fu, fv, ph)| a * (2.0 * PI * (fu * u + fv * v) + ph).sin()).sum::<f64>()
        };
        (u + d(&self.warp[0]), v + d(&self.warp[1]))
    }

    fn template(&self, u: f64, v: f64) -> f64 {
        let mut val = self.background;
        let s = smoothstep(SPINE_HALF_WIDTH + 0.01, SPINE_HALF_WIDTH - 0.01, (u - 0.5).abs());
        val += (self.spine - val) * s;
        for &(cu, cv) in &LUNG_CENTERS {
            let r = lung_radius(u, v, cu, cv);
            let t = smoothstep(1.0, 0.92, r);
            if t > 0.0 {
                let ribs = self.lung + 0.03 * (2.0 * PI * v / 0.1).sin();
                val += (ribs - val) * t;
            }
        }
        val
    }
}

fn lung_radius(u: f64, v: f64, cu: f64, cv: f64) -> f64 {
    (((u - cu) / LUNG_AXES.0).powi(2) + ((v - cv) / LUNG_AXES.1).powi(2)).sqrt()
}

/// 0 at `e0`, 1 at `e1`, cubic in between (either orientation).
fn smoothstep(e0: f64, e1: f64, x: f64) -> f64 {
    let t = ((x - e0) / (e1 - e0)).clamp(0.0, 1.0);
    t * t * (3.0 - 2.0 * t)
}

fn pixel_uv(size: usize, idx: usize) -> (f64, f64) {
    let s = size as f64;
    (((idx % size) as f64 + 0.5) / s, ((idx / size) as f64 + 0.5) / s)
}

/// Normal sample `index`; fully determined by `(seed, index)`.
pub fn generate_normal(cfg: &SynthConfig, seed: u64, index: u64) -> LabeledSample {
    let mut rng = rng::indexed(seed, streams::SYNTH_NORMAL, index);
    let layout = Layout::sample(cfg, &mut rng);
    let noise = Normal::new(0.0, cfg.noise_std.max(0.0)).expect("finite std");
    let n = cfg.image_size * cfg.image_size;
    let image = (0..n)
        .map(|i| {
            let (u, v) = pixel_uv(cfg.image_size, i);
            let (tu, tv) = layout.warped(u, v);
            let x = layout.template(tu, tv) + noise.sample(&mut rng);
            quantize(x) as f64 / 255.0
        })
        .collect();
    LabeledSample { size: cfg.image_size, image, label: 0, mask: vec![false; n] }
}

/// Per-lung interior membership of each pixel of sample `index`.
fn lung_interiors(cfg: &SynthConfig, seed: u64, index: u64) -> [Vec<bool>; 2] {
    let mut rng = rng::indexed(seed, streams::SYNTH_NORMAL, index);
    let layout = Layout::sample(cfg, &mut rng);
    let n = cfg.image_size * cfg.image_size;
    std::array::from_fn(|l| {
        let (cu, cv) = LUNG_CENTERS[l];
        (0..n)
            .map(|i| {
                let (u, v) = pixel_uv(cfg.image_size, i);
                let (tu, tv) = layout.warped(u, v);
                lung_radius(tu, tv, cu, cv) <= LUNG_INTERIOR
            })
            .collect()
    })
}

/// Adds one lesion to the normal sample generated with the same `(seed, index)`.
pub fn inject_anomaly(sample: &LabeledSample, cfg: &SynthConfig, seed: u64, index: u64) -> Result<LabeledSample> {
    if sample.label != 0 || sample.size != cfg.image_size {
        return Err(Error::InvalidArgument("lesions are injected into normal samples of the configured size".into()));
    }
    let size = cfg.image_size;
    let s = size as f64;
    let interiors = lung_interiors(cfg, seed, index);
    let mut rng = rng::indexed(seed, streams::SYNTH_LESION, index);
    for _ in 0..1000 {
        let lung = &interiors[rng.random_range(0..2)];
        let inside: Vec<usize> = (0..lung.len()).filter(|&i| lung[i]).collect();
        let center = inside[rng.random_range(0..inside.len())];
        let (cx, cy) = ((center % size) as f64 + 0.5, (center / size) as f64 + 0.5);
        let target = rng.random_range(cfg.lesion_area[0]..=cfg.lesion_area[1]);
        let aspect = rng.random_range(0.6..1.0);
        let a = (target * s * s / (PI * aspect)).sqrt();
        let b = aspect * a;
        let theta = rng.random_range(0.0..PI);
        let textured = rng.random_bool(0.5);
        let magnitude = rng.random_range(cfg.lesion_delta[0]..=cfg.lesion_delta[1]);
        let delta = if rng.random_bool(0.5) { magnitude } else { -magnitude };
        let period = rng.random_range(3.0..6.0);
        let (ct, st) = (theta.cos(), theta.sin());

        let mut image = sample.image.clone();
        let mut mask = vec![false; image.len()];
        for i in inside {
            let (x, y) = ((i % size) as f64 + 0.5 - cx, (i / size) as f64 + 0.5 - cy);
            let (ru, rv) = (x * ct + y * st, -x * st + y * ct);
            let hit = if textured {
                ru.abs() <= a * 0.886 && rv.abs() <= b * 0.886
            } else {
                (ru / a).powi(2) + (rv / b).powi(2) <= 1.0
            };
            if !hit {
                continue;
            }
            let shift = if textured {
                delta * (0.55 + 0.45 * (2.0 * PI * ru / period).sin() * (2.0 * PI * rv / period).sin())
            } else {
                delta
            };
            let new = quantize(image[i] + shift) as f64 / 255.0;
            if new != image[i] {
                image[i] = new;
                mask[i] = true;
            }
        }
        let out = LabeledSample { size, image, label: 1, mask };
        let area = out.mask_area();
        if area >= cfg.lesion_area[0] && area <= cfg.lesion_area[1] {
            return Ok(out);
        }
    }
    Err(Error::InvalidArgument(format!("could not place a lesion of area {:?} in sample {index}", cfg.lesion_area)))
}

/// Pearson correlation of two equal-length images.
pub fn pearson(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let (ma, mb) = (a.iter().sum::<f64>() / n, b.iter().sum::<f64>() / n);
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        sab += (x - ma) * (y - mb);
        saa += (x - ma).powi(2);
        sbb += (y - mb).powi(2);
    }
    sab / (saa * sbb).sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg() -> SynthConfig {
        SynthConfig::with_size(64)
    }

    #[test]
    fn normal_is_deterministic_and_bounded() {
        let a = generate_normal(&cfg(), 3, 5);
        assert_eq!(a, generate_normal(&cfg(), 3, 5));
        assert_ne!(a.image, generate_normal(&cfg(), 3, 6).image);
        assert!(a.image.iter().all(|v| (0.0..=1.0).contains(v)));
        assert!(a.mask.iter().all(|m| !m));
        assert_eq!(a.label, 0);
    }

    #[test]
    fn normals_are_structurally_consistent() {
        let imgs: Vec<_> = (0..20).map(|i| generate_normal(&cfg(), 11, i).image).collect();
        let mut acc = 0.0;
        let mut n = 0;
        for i in 0..20 {
            for j in i + 1..20 {
                acc += pearson(&imgs[i], &imgs[j]);
                n += 1;
            }
        }
        assert!(acc / n as f64 >= 0.7, "mean correlation {}", acc / n as f64);
    }

    #[test]
    fn lesions_respect_contract() {
        let c = cfg();
        for idx in 0..30 {
            let n = generate_normal(&c, 2, idx);
            let a = inject_anomaly(&n, &c, 2, idx).unwrap();
            assert_eq!(a, inject_anomaly(&n, &c, 2, idx).unwrap());
            assert_eq!(a.label, 1);
            let area = a.mask_area();
            assert!((0.04..=0.12).contains(&area), "area {area}");
            let interiors = lung_interiors(&c, 2, idx);
            let masked: Vec<usize> = (0..a.mask.len()).filter(|&i| a.mask[i]).collect();
            assert!(interiors.iter().any(|l| masked.iter().all(|&i| l[i])));
            for i in 0..a.mask.len() {
                if a.mask[i] {
                    assert_ne!(a.image[i], n.image[i]);
                } else {
                    assert_eq!(a.image[i].to_bits(), n.image[i].to_bits());
                }
            }
        }
    }

    #[test]
    fn inject_requires_normal_input() {
        let c = cfg();
        let n = generate_normal(&c, 0, 0);
        let a = inject_anomaly(&n, &c, 0, 0).unwrap();
        assert!(inject_anomaly(&a, &c, 0, 0).is_err());
    }

    #[test]
    fn config_validation() {
        let mut c = cfg();
        c.lesion_area = [0.2, 0.1];
        assert!(c.validate().is_err());
        let mut c = cfg();
        c.lesion_area = [0.04, 0.5];
        assert!(c.validate().is_err());
        assert!(cfg().validate().is_ok());
    }
}
