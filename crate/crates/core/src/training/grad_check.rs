//! Finite-difference check of the full training loss.

use std::collections::BTreeSet;

use rand::seq::index::sample;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use super::trainer::image_loss;
use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::model::Model;
use crate::nn::{BindMode, ParamStore};
use crate::rng::{self, streams};
use crate::tensor::{Tape, Tensor};

/// Smallest geometry that exercises every layer: two directions, two prototypes.
pub fn micro_config() -> ModelConfig {
    ModelConfig {
        image_size: 64,
        stem_channels: 2,
        level_channels: [2, 3, 4],
        fused_channels: 4,
        stage_channels: [4, 4, 3, 3],
        depths: [1, 1, 1, 1],
        expansion: 1,
        conv_kernel: 2,
        state_dim: 2,
        dt_rank: 1,
        directions: vec![0, 5],
        prototypes: 2,
        window: 3,
        encoder_trainable: true,
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradCheckConfig {
    pub samples: usize,
    pub step: f64,
    pub tolerance: f64,
    /// Denominator floor of the relative error, for near-zero gradients.
    pub floor: f64,
    pub seed: u64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self { samples: 200, step: 1e-5, tolerance: 1e-3, floor: 1e-6, seed: 0 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradCheckEntry {
    pub param: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradCheckReport {
    pub checked: usize,
    pub max_rel_error: f64,
    pub tolerance: f64,
    pub passed: bool,
    /// Largest errors first.
    pub worst: Vec<GradCheckEntry>,
    pub entries: Vec<GradCheckEntry>,
}

fn batch_loss(model: &Model, store: &ParamStore<f64>, images: &[Tensor<f64>], epsilon: f64) -> Result<f64> {
    let mut acc = 0.0;
    for img in images {
        acc += image_loss(model, store, img, epsilon)?[0];
    }
    Ok(acc / images.len() as f64)
}

/// Compares backward gradients of the mean batch loss against central
/// differences. Every parameter tensor contributes at least one coordinate.
pub fn grad_check(
    model: &Model,
    store: &ParamStore<f64>,
    images: &[Tensor<f64>],
    epsilon: f64,
    cfg: &GradCheckConfig,
) -> Result<GradCheckReport> {
    if images.is_empty() {
        return Err(Error::InvalidArgument("gradient check needs at least one image".into()));
    }
    // analytic
    let mut analytic: Vec<Vec<f64>> = store.params().iter().map(|p| vec![0.0; p.tensor.numel()]).collect();
    for img in images {
        let mut tape = Tape::new();
        let p = store.bind(&mut tape, BindMode::All);
        let x = tape.constant(img.clone());
        let fw = model.forward(&mut tape, &p, x)?;
        let l = model.loss(&mut tape, &fw, epsilon)?;
        let mut g = tape.backward(l.total)?;
        for (acc, &v) in analytic.iter_mut().zip(p.vars()) {
            let gv = g.take(v).ok_or(Error::Tape("parameter gradient missing"))?;
            acc.iter_mut().zip(gv).for_each(|(a, b)| *a += b / images.len() as f64);
        }
    }

    // coordinates: one per tensor, the rest uniform over all scalars
    let mut rng = rng::stream(cfg.seed, streams::GRAD_CHECK);
    let sizes: Vec<usize> = store.params().iter().map(|p| p.tensor.numel()).collect();
    let mut coords: BTreeSet<(usize, usize)> = sizes.iter().enumerate().map(|(i, &n)| (i, rng.random_range(0..n))).collect();
    let total: usize = sizes.iter().sum();
    let mut offsets = Vec::with_capacity(sizes.len());
    let mut off = 0;
    for &n in &sizes {
        offsets.push(off);
        off += n;
    }
    let target = cfg.samples.max(coords.len()).min(total);
    while coords.len() < target {
        for flat in sample(&mut rng, total, target - coords.len()).iter() {
            let t = offsets.partition_point(|&o| o <= flat) - 1;
            coords.insert((t, flat - offsets[t]));
        }
    }

    let mut work = store.clone();
    let mut entries = Vec::with_capacity(coords.len());
    for (t, i) in coords {
        let orig = work.params()[t].tensor.data()[i];
        work.params_mut()[t].tensor.data_mut()[i] = orig + cfg.step;
        let up = batch_loss(model, &work, images, epsilon)?;
        work.params_mut()[t].tensor.data_mut()[i] = orig - cfg.step;
        let down = batch_loss(model, &work, images, epsilon)?;
        work.params_mut()[t].tensor.data_mut()[i] = orig;
        let numeric = (up - down) / (2.0 * cfg.step);
        let a = analytic[t][i];
        let rel_error = (a - numeric).abs() / a.abs().max(numeric.abs()).max(cfg.floor);
        entries.push(GradCheckEntry { param: store.params()[t].name.clone(), index: i, analytic: a, numeric, rel_error });
    }
    let max_rel_error = entries.iter().map(|e| e.rel_error).fold(0.0, f64::max);
    let mut worst = entries.clone();
    worst.sort_by(|a, b| b.rel_error.total_cmp(&a.rel_error));
    worst.truncate(5);
    Ok(GradCheckReport {
        checked: entries.len(),
        max_rel_error,
        tolerance: cfg.tolerance,
        passed: max_rel_error <= cfg.tolerance,
        worst,
        entries,
    })
}
