//! Window-sliding prototype matching.
//!
//! Each of `K` prototypes is a grid of patch vectors aligned with the fused
//! feature grid. A prototype patch is compared with every feature patch in
//! the `p x p` window centred on its own position (clipped at the borders);
//! the distance map keeps `1 - max cosine` of the best prototype.

use rand::seq::index::sample;

use crate::error::{Error, Result};
use crate::real::Real;
use crate::rng::{self, streams};
use crate::tensor::{kernels, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct WindowConfig {
    pub p: usize,
}

impl WindowConfig {
    pub fn validate(&self, gh: usize, gw: usize) -> Result<()> {
        if self.p.is_multiple_of(2) {
            return Err(Error::InvalidArgument(format!("window side p={} must be odd", self.p)));
        }
        if self.p > gh.min(gw) {
            return Err(Error::InvalidArgument(format!(
                "window side p={} exceeds patch grid {gh}x{gw}",
                self.p
            )));
        }
        Ok(())
    }
}

/// Row and column ranges of the clipped window centred on `(r, c)`.
pub fn window_bounds(gh: usize, gw: usize, p: usize, r: usize, c: usize) -> (std::ops::Range<usize>, std::ops::Range<usize>) {
    let half = p / 2;
    (r.saturating_sub(half)..(r + half + 1).min(gh), c.saturating_sub(half)..(c + half + 1).min(gw))
}

/// Number of feature patches inside the window at `(r, c)`.
pub fn window_cardinality(gh: usize, gw: usize, p: usize, r: usize, c: usize) -> usize {
    let (rows, cols) = window_bounds(gh, gw, p, r, c);
    rows.len() * cols.len()
}

/// `(prototype, feature patch)` chosen for one position.
pub type Pick = (usize, usize);

/// Core of the distance computation on flat buffers: `bank: [K,G,C]`,
/// `feat: [G,C]`. Returns the map and, per position, the selected
/// `(prototype, feature patch)` pair. Ties go to the lowest prototype index,
/// then to the first window patch in row-major order.
pub fn window_distance_raw<T: Real>(
    bank: &[T],
    feat: &[T],
    k: usize,
    gh: usize,
    gw: usize,
    c: usize,
    p: usize,
) -> Result<(Vec<T>, Vec<Pick>)> {
    WindowConfig { p }.validate(gh, gw)?;
    let g = gh * gw;
    let mut dist = Vec::with_capacity(g);
    let mut picks = Vec::with_capacity(g);
    for r in 0..gh {
        for cc in 0..gw {
            let pos = r * gw + cc;
            let (rows, cols) = window_bounds(gh, gw, p, r, cc);
            let mut best = T::neg_infinity();
            let mut pick = (0, 0);
            for kk in 0..k {
                let proto = &bank[(kk * g + pos) * c..(kk * g + pos + 1) * c];
                for wr in rows.clone() {
                    for wc in cols.clone() {
                        let w = wr * gw + wc;
                        let s = kernels::cosine(proto, &feat[w * c..(w + 1) * c]);
                        if s > best {
                            best = s;
                            pick = (kk, w);
                        }
                    }
                }
            }
            dist.push((T::one() - best).max(T::zero()).min(T::c(2.0)));
            picks.push(pick);
        }
    }
    Ok((dist, picks))
}

/// `K` prototype grids stored as `[K, G, C]` with `G = gh * gw`.
#[derive(Clone, Debug, PartialEq)]
pub struct PrototypeBank<T> {
    pub grid_h: usize,
    pub grid_w: usize,
    pub tensor: Tensor<T>,
}

impl<T: Real> PrototypeBank<T> {
    pub fn new(grid_h: usize, grid_w: usize, tensor: Tensor<T>) -> Result<Self> {
        match *tensor.shape() {
            [k, g, _] if k >= 1 && g == grid_h * grid_w => Ok(Self { grid_h, grid_w, tensor }),
            ref s => Err(Error::shape("prototype-bank", format!("{s:?} for grid {grid_h}x{grid_w}"))),
        }
    }

    pub fn k(&self) -> usize {
        self.tensor.shape()[0]
    }

    pub fn channels(&self) -> usize {
        self.tensor.shape()[2]
    }

    /// Patch vector of prototype `k` at grid position `pos`.
    pub fn patch(&self, k: usize, pos: usize) -> &[T] {
        let (g, c) = (self.grid_h * self.grid_w, self.channels());
        &self.tensor.data()[(k * g + pos) * c..(k * g + pos + 1) * c]
    }
}

/// `[C, gh, gw]` grid to position-major patches `[G, C]`.
pub fn grid_to_patches<T: Real>(grid: &Tensor<T>) -> Result<Tensor<T>> {
    let (c, h, w) = match *grid.shape() {
        [c, h, w] => (c, h, w),
        ref s => return Err(Error::shape("grid-to-patches", format!("{s:?}"))),
    };
    Tensor::new([h * w, c], kernels::transpose(grid.data(), c, h * w))
}

/// Distance map `[0,2]^{gh x gw}`.
#[derive(Clone, Debug, PartialEq)]
pub struct DistanceMap<T> {
    pub h: usize,
    pub w: usize,
    pub values: Vec<T>,
}

impl<T: Real> DistanceMap<T> {
    pub fn mean(&self) -> T {
        self.values.iter().copied().sum::<T>() / T::c(self.values.len() as f64)
    }

    pub fn get(&self, r: usize, c: usize) -> T {
        self.values[r * self.w + c]
    }
}

fn check_feature<T: Real>(bank: &PrototypeBank<T>, feature: &Tensor<T>) -> Result<Tensor<T>> {
    let patches = grid_to_patches(feature)?;
    let expect = [bank.grid_h * bank.grid_w, bank.channels()];
    if patches.shape() != expect || feature.shape()[1] != bank.grid_h {
        return Err(Error::shape(
            "window-distance",
            format!("feature {:?} vs bank {:?}", feature.shape(), bank.tensor.shape()),
        ));
    }
    Ok(patches)
}

/// Distance between a fused feature grid `[C, gh, gw]` and the bank.
pub fn window_distance<T: Real>(bank: &PrototypeBank<T>, feature: &Tensor<T>, cfg: WindowConfig) -> Result<DistanceMap<T>> {
    let patches = check_feature(bank, feature)?;
    let (values, _) = window_distance_raw(
        bank.tensor.data(),
        patches.data(),
        bank.k(),
        bank.grid_h,
        bank.grid_w,
        bank.channels(),
        cfg.p,
    )?;
    Ok(DistanceMap { h: bank.grid_h, w: bank.grid_w, values })
}

/// Per position, the bank patch with the highest windowed similarity to the
/// features. Returned as patches `[G, C]`.
pub fn assemble_final_prototype<T: Real>(bank: &PrototypeBank<T>, feature: &Tensor<T>, cfg: WindowConfig) -> Result<Tensor<T>> {
    let patches = check_feature(bank, feature)?;
    let (_, picks) = window_distance_raw(
        bank.tensor.data(),
        patches.data(),
        bank.k(),
        bank.grid_h,
        bank.grid_w,
        bank.channels(),
        cfg.p,
    )?;
    let c = bank.channels();
    let mut data = Vec::with_capacity(picks.len() * c);
    for (pos, &(k, _)) in picks.iter().enumerate() {
        data.extend_from_slice(bank.patch(k, pos));
    }
    Tensor::new([picks.len(), c], data)
}

/// Bilinear upsampling to `h x w`; target must be an integer multiple of the grid.
pub fn upsample_distance<T: Real>(d: &DistanceMap<T>, h: usize, w: usize) -> Result<DistanceMap<T>> {
    if h == 0 || w == 0 || !h.is_multiple_of(d.h) || !w.is_multiple_of(d.w) {
        return Err(Error::InvalidArgument(format!(
            "target {h}x{w} is not a multiple of distance grid {}x{}",
            d.h, d.w
        )));
    }
    Ok(DistanceMap { h, w, values: kernels::bilinear(&d.values, 1, d.h, d.w, h, w) })
}

/// Picks `k` of the sample grids `[C, gh, gw]` without replacement.
pub fn init_prototypes<T: Real>(samples: &[Tensor<T>], k: usize, seed: u64) -> Result<PrototypeBank<T>> {
    if k == 0 || samples.len() < k {
        return Err(Error::InvalidArgument(format!(
            "need at least K={k} feature samples to initialize prototypes, got {}",
            samples.len()
        )));
    }
    let (gh, gw) = match *samples[0].shape() {
        [_, h, w] => (h, w),
        ref s => return Err(Error::shape("init-prototypes", format!("{s:?}"))),
    };
    let mut rng = rng::stream(seed, streams::PROTOTYPE_INIT);
    let picks = sample(&mut rng, samples.len(), k);
    let mut data = Vec::new();
    for i in picks.iter() {
        if samples[i].shape() != samples[0].shape() {
            return Err(Error::shape("init-prototypes", "samples differ in shape"));
        }
        data.extend(grid_to_patches(&samples[i])?.into_data());
    }
    let c = samples[0].shape()[0];
    PrototypeBank::new(gh, gw, Tensor::new([k, gh * gw, c], data)?)
}
