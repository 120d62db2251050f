//! Anomaly maps and the four-part image score.
//!
//! Scoring runs in `f64` regardless of the model precision.

use std::io::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::backbone::FeaturePyramid;
use crate::error::{Error, Result};
use crate::prototype::DistanceMap;
use crate::real::Real;
use crate::tensor::kernels;
pub use crate::tensor::kernels::reflect;

/// Width of the Gaussian applied to the summed reconstruction map.
pub const SMOOTHING_SIGMA: f64 = 4.0;

const SPAM_MAGIC: &[u8; 4] = b"SPAM";

/// Non-negative `H x W` anomaly evidence with its cached maximum.
#[derive(Clone, Debug, PartialEq)]
pub struct AnomalyMap {
    h: usize,
    w: usize,
    values: Vec<f64>,
    max: f64,
    /// `(row, col)` of the first maximum in row-major order.
    argmax: (usize, usize),
}

impl AnomalyMap {
    pub fn new(h: usize, w: usize, values: Vec<f64>) -> Result<Self> {
        if h == 0 || w == 0 {
            return Err(Error::InvalidArgument("anomaly map must be non-empty".into()));
        }
        if values.len() != h * w {
            return Err(Error::shape("anomaly-map", format!("{} values for {h}x{w}", values.len())));
        }
        if let Some(v) = values.iter().find(|v| !v.is_finite() || **v < 0.0) {
            return Err(Error::NonFinite(format!("anomaly map entry {v} is negative or non-finite")));
        }
        let mut best = 0;
        for (i, &v) in values.iter().enumerate() {
            if v > values[best] {
                best = i;
            }
        }
        Ok(Self { h, w, max: values[best], argmax: (best / w, best % w), values })
    }

    pub fn height(&self) -> usize {
        self.h
    }

    pub fn width(&self) -> usize {
        self.w
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.values[r * self.w + c]
    }

    pub fn max(&self) -> f64 {
        self.max
    }

    pub fn argmax(&self) -> (usize, usize) {
        self.argmax
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ContrastParams {
    pub sigma: f64,
    pub k_sigma: f64,
    /// Kernel radius; `None` means `ceil(3 * k_sigma)`.
    #[serde(default)]
    pub radius: Option<usize>,
}

impl Default for ContrastParams {
    fn default() -> Self {
        Self { sigma: 0.6, k_sigma: 1.2, radius: None }
    }
}

impl ContrastParams {
    pub fn min_radius(&self) -> usize {
        (3.0 * self.k_sigma).ceil() as usize
    }

    pub fn radius(&self) -> usize {
        self.radius.unwrap_or_else(|| self.min_radius())
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.sigma > 0.0 && self.k_sigma > self.sigma && self.k_sigma.is_finite()) {
            return Err(Error::Config(format!(
                "contrast widths need 0 < sigma < k*sigma, got {} and {}",
                self.sigma, self.k_sigma
            )));
        }
        if self.radius() < self.min_radius() {
            return Err(Error::Config(format!(
                "DoG radius {} is below ceil(3 k*sigma) = {}",
                self.radius(),
                self.min_radius()
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoreWeights {
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
}

impl Default for ScoreWeights {
    fn default() -> Self {
        Self { alpha: 1.0, beta: -0.025, gamma: 400.0 }
    }
}

impl ScoreWeights {
    pub const ORG_ONLY: Self = Self { alpha: 0.0, beta: 0.0, gamma: 0.0 };

    pub fn validate(&self) -> Result<()> {
        if [self.alpha, self.beta, self.gamma].iter().all(|v| v.is_finite()) {
            Ok(())
        } else {
            Err(Error::Config(format!("score weights must be finite: {self:?}")))
        }
    }

    pub fn combine(&self, s_org: f64, s_pdist: f64, s_concen: f64, s_contra: f64) -> f64 {
        s_org + self.alpha * s_pdist + self.beta * s_concen + self.gamma * s_contra
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoreBreakdown {
    pub s_org: f64,
    pub s_pdist: f64,
    pub s_concen: f64,
    pub s_contra: f64,
    pub s_total: f64,
}

impl ScoreBreakdown {
    /// Same components under different weights.
    pub fn reweighted(&self, w: &ScoreWeights) -> Self {
        Self { s_total: w.combine(self.s_org, self.s_pdist, self.s_concen, self.s_contra), ..*self }
    }
}

/// Gaussian density `G(x, y, s)`.
pub fn gaussian(x: f64, y: f64, s: f64) -> f64 {
    (-(x * x + y * y) / (2.0 * s * s)).exp() / (2.0 * std::f64::consts::PI * s * s)
}

/// Unshifted `G(k sigma) - G(sigma)` on the integer grid of the given radius.
pub fn raw_dog_kernel(p: &ContrastParams) -> Vec<f64> {
    let r = p.radius() as isize;
    let mut k = Vec::with_capacity(((2 * r + 1) * (2 * r + 1)) as usize);
    for y in -r..=r {
        for x in -r..=r {
            let (x, y) = (x as f64, y as f64);
            k.push(gaussian(x, y, p.k_sigma) - gaussian(x, y, p.sigma));
        }
    }
    k
}

/// DoG kernel `(2r+1) x (2r+1)`, shifted to zero sum.
pub fn dog_kernel(p: &ContrastParams) -> Result<Vec<f64>> {
    p.validate()?;
    let mut k = raw_dog_kernel(p);
    let mean = k.iter().sum::<f64>() / k.len() as f64;
    k.iter_mut().for_each(|v| *v -= mean);
    Ok(k)
}

/// 2D filtering with reflect padding (the kernel is symmetric, so
/// correlation and convolution agree).
pub fn filter_reflect(x: &[f64], h: usize, w: usize, kernel: &[f64], radius: usize) -> Vec<f64> {
    let side = 2 * radius + 1;
    let r = radius as isize;
    let mut out = vec![0.0; h * w];
    for i in 0..h {
        for j in 0..w {
            let mut acc = 0.0;
            for dy in -r..=r {
                let row = reflect(i as isize + dy, h) * w;
                let krow = (dy + r) as usize * side;
                for dx in -r..=r {
                    acc += kernel[krow + (dx + r) as usize] * x[row + reflect(j as isize + dx, w)];
                }
            }
            out[i * w + j] = acc;
        }
    }
    out
}

/// Separable normalized Gaussian blur with reflect padding, radius `ceil(3 sigma)`.
pub fn gaussian_smooth(x: &[f64], h: usize, w: usize, sigma: f64) -> Vec<f64> {
    if sigma <= 0.0 {
        return x.to_vec();
    }
    let r = (3.0 * sigma).ceil() as isize;
    let mut k: Vec<f64> = (-r..=r).map(|t| (-(t * t) as f64 / (2.0 * sigma * sigma)).exp()).collect();
    let total: f64 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= total);
    let mut tmp = vec![0.0; h * w];
    for i in 0..h {
        for j in 0..w {
            tmp[i * w + j] = (-r..=r).map(|t| k[(t + r) as usize] * x[i * w + reflect(j as isize + t, w)]).sum();
        }
    }
    let mut out = vec![0.0; h * w];
    for i in 0..h {
        for j in 0..w {
            out[i * w + j] = (-r..=r).map(|t| k[(t + r) as usize] * tmp[reflect(i as isize + t, h) * w + j]).sum();
        }
    }
    out
}

/// Summed, upsampled per-level cosine distance before smoothing.
pub fn raw_recon_map<T: Real>(org: &FeaturePyramid<T>, rec: &FeaturePyramid<T>, h: usize, w: usize) -> Result<Vec<f64>> {
    let mut acc = vec![0.0; h * w];
    for (l, (a, b)) in org.levels.iter().zip(&rec.levels).enumerate() {
        if a.shape() != b.shape() {
            return Err(Error::shape(
                "recon-anomaly-map",
                format!("level {} original {:?} vs reconstruction {:?}", l + 1, a.shape(), b.shape()),
            ));
        }
        let (c, gh, gw) = match *a.shape() {
            [c, gh, gw] => (c, gh, gw),
            ref s => return Err(Error::shape("recon-anomaly-map", format!("level {} shape {s:?}", l + 1))),
        };
        let a = kernels::transpose(a.data(), c, gh * gw);
        let b = kernels::transpose(b.data(), c, gh * gw);
        let dist: Vec<f64> = (0..gh * gw)
            .map(|g| 1.0 - kernels::cosine(&a[g * c..(g + 1) * c], &b[g * c..(g + 1) * c]).f64())
            .collect();
        for (o, v) in acc.iter_mut().zip(kernels::bilinear(&dist, 1, gh, gw, h, w)) {
            *o += v;
        }
    }
    Ok(acc)
}

/// Multi-scale reconstruction-error map at `h x w`, smoothed and clamped.
pub fn recon_anomaly_map<T: Real>(
    org: &FeaturePyramid<T>,
    rec: &FeaturePyramid<T>,
    h: usize,
    w: usize,
    smoothing_sigma: f64,
) -> Result<AnomalyMap> {
    let raw = raw_recon_map(org, rec, h, w)?;
    let smooth = gaussian_smooth(&raw, h, w, smoothing_sigma);
    AnomalyMap::new(h, w, smooth.into_iter().map(|v| v.max(0.0)).collect())
}

/// Concentration score: mean of `(e - e*)^2` weighted by pixel distance to the maximum.
pub fn s_concen(map: &AnomalyMap) -> f64 {
    let (ry, rx) = map.argmax;
    let (ry, rx) = (ry as f64, rx as f64);
    let mut acc = 0.0;
    for i in 0..map.h {
        for j in 0..map.w {
            let c = (map.get(i, j) - map.max).powi(2);
            acc += c * ((i as f64 - ry).powi(2) + (j as f64 - rx).powi(2)).sqrt();
        }
    }
    acc / (map.h * map.w) as f64
}

/// Contrast score: mean absolute DoG response.
pub fn s_contra(map: &AnomalyMap, p: &ContrastParams) -> Result<f64> {
    let k = dog_kernel(p)?;
    let resp = filter_reflect(&map.values, map.h, map.w, &k, p.radius());
    Ok(resp.iter().map(|v| v.abs()).sum::<f64>() / resp.len() as f64)
}

pub fn image_scores<T: Real>(
    map: &AnomalyMap,
    d_up: &DistanceMap<T>,
    weights: &ScoreWeights,
    contrast: &ContrastParams,
) -> Result<ScoreBreakdown> {
    if (d_up.h, d_up.w) != (map.h, map.w) {
        return Err(Error::shape(
            "image-scores",
            format!("map {}x{} vs distance {}x{}", map.h, map.w, d_up.h, d_up.w),
        ));
    }
    let s_org = map.max;
    let s_pdist = d_up.values.iter().map(|v| v.f64()).sum::<f64>() / d_up.values.len() as f64;
    let s_concen = s_concen(map);
    let s_contra = s_contra(map, contrast)?;
    Ok(ScoreBreakdown { s_org, s_pdist, s_concen, s_contra, s_total: weights.combine(s_org, s_pdist, s_concen, s_contra) })
}

/// Raw sidecar: `"SPAM"`, `u32` H, `u32` W, then `f32` little-endian values row-major.
pub fn encode_spam(map: &AnomalyMap) -> Vec<u8> {
    let mut out = Vec::with_capacity(12 + 4 * map.values.len());
    out.extend_from_slice(SPAM_MAGIC);
    out.extend_from_slice(&(map.h as u32).to_le_bytes());
    out.extend_from_slice(&(map.w as u32).to_le_bytes());
    for &v in &map.values {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
    out
}

pub fn decode_spam(bytes: &[u8]) -> Result<(usize, usize, Vec<f32>)> {
    if bytes.len() < 12 || &bytes[..4] != SPAM_MAGIC {
        return Err(Error::Format("not a SPAM sidecar (bad magic)".into()));
    }
    let h = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
    let w = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    let body = &bytes[12..];
    if body.len() != 4 * h * w {
        return Err(Error::Format(format!("SPAM sidecar declares {h}x{w} but holds {} bytes", body.len())));
    }
    let vals = body.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
    Ok((h, w, vals))
}

/// Min-max scale used for a heatmap PNG.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct HeatmapScale {
    pub min: f64,
    pub max: f64,
}

/// Writes the 8-bit min-max normalized PNG and the raw sidecar.
pub fn write_heatmap(map: &AnomalyMap, png: &Path, sidecar: &Path) -> Result<HeatmapScale> {
    let min = map.values.iter().copied().fold(f64::INFINITY, f64::min);
    let max = map.max;
    let span = max - min;
    let norm: Vec<f64> = map.values.iter().map(|v| if span > 0.0 { (v - min) / span } else { 0.0 }).collect();
    crate::data::io::write_gray(png, map.h, map.w, &norm)?;
    let mut f = std::fs::File::create(sidecar).map_err(|e| Error::io(sidecar, e))?;
    f.write_all(&encode_spam(map)).map_err(|e| Error::io(sidecar, e))?;
    Ok(HeatmapScale { min, max })
}
