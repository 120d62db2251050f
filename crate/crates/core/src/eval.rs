//! Scoring of a labelled split and the evaluation report.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::{Config, ScoreConfig};
use crate::data::LoadedSample;
use crate::error::{Error, Result};
use crate::metrics::{auroc, average_precision, f1_acc_at_best_threshold, pixel_metrics, PixelMetrics};
use crate::model::Model;
use crate::nn::ParamStore;
use crate::prototype::upsample_distance;
use crate::real::Real;
use crate::scoring::{image_scores, recon_anomaly_map, AnomalyMap, ScoreBreakdown, ScoreWeights};
use crate::training::image_tensor;

pub const THRESHOLD_PROTOCOL: &str = "best-F1 sweep over attained scores of the evaluated split; positive iff score >= threshold";

/// One scored image; the map is shared by pixel and image metrics.
#[derive(Clone, Debug)]
pub struct ScoredImage {
    pub path: String,
    pub label: u8,
    pub map: AnomalyMap,
    pub mask: Vec<bool>,
    pub breakdown: ScoreBreakdown,
}

pub fn score_image<T: Real>(model: &Model, store: &ParamStore<T>, pixels: &[f64], score: &ScoreConfig) -> Result<(AnomalyMap, ScoreBreakdown)> {
    let s = model.config().image_size;
    let out = model.infer(store, &image_tensor::<T>(pixels, s)?)?;
    let map = recon_anomaly_map(&out.org, &out.rec, s, s, score.smoothing_sigma)?;
    let d_up = upsample_distance(&out.distance, s, s)?;
    let b = image_scores(&map, &d_up, &score.weights, &score.contrast)?;
    Ok((map, b))
}

pub fn score_split<T: Real>(
    model: &Model,
    store: &ParamStore<T>,
    samples: &[LoadedSample],
    score: &ScoreConfig,
) -> Result<Vec<ScoredImage>> {
    samples
        .par_iter()
        .map(|s| {
            let (map, breakdown) = score_image(model, store, &s.image, score)?;
            let mask = s.mask.clone().unwrap_or_else(|| vec![false; s.image.len()]);
            Ok(ScoredImage { path: s.entry.path.clone(), label: s.entry.label, map, mask, breakdown })
        })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImageMetrics {
    pub auroc: f64,
    pub ap: f64,
    pub f1: f64,
    pub accuracy: f64,
    pub threshold: f64,
}

pub fn image_metrics(scores: &[f64], labels: &[bool]) -> Result<ImageMetrics> {
    let t = f1_acc_at_best_threshold(scores, labels)?;
    Ok(ImageMetrics {
        auroc: auroc(scores, labels)?,
        ap: average_precision(scores, labels)?,
        f1: t.f1,
        accuracy: t.accuracy,
        threshold: t.threshold,
    })
}

/// Image AUROC of each score component alone and of the combined scores.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ComponentAuroc {
    pub s_org: f64,
    pub s_pdist: f64,
    /// Sign follows the configured weight, so higher always means more anomalous.
    pub s_concen: f64,
    pub s_contra: f64,
    pub total_default: f64,
    pub total_tuned: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PerImage {
    pub path: String,
    pub label: u8,
    #[serde(flatten)]
    pub scores: ScoreBreakdown,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub config_hash: String,
    pub weights: ScoreWeights,
    pub threshold_protocol: String,
    pub image: ImageMetrics,
    pub pixel: PixelMetrics,
    /// Weights selected on the validation split, with test metrics under them.
    pub tuned_weights: Option<ScoreWeights>,
    pub tuned_image: Option<ImageMetrics>,
    pub org_only_image: ImageMetrics,
    pub components: ComponentAuroc,
    pub per_image: Vec<PerImage>,
}

fn labels(scored: &[ScoredImage]) -> Vec<bool> {
    scored.iter().map(|s| s.label == 1).collect()
}

fn totals(scored: &[ScoredImage], w: &ScoreWeights) -> Vec<f64> {
    scored.iter().map(|s| s.breakdown.reweighted(w).s_total).collect()
}

/// Multipliers applied to the default weights during tuning; every
/// candidate keeps the default signs and all three terms active.
pub const TUNE_ALPHA: [f64; 5] = [0.01, 0.1, 0.3, 1.0, 3.0];
pub const TUNE_BETA: [f64; 4] = [0.01, 0.1, 1.0, 10.0];
pub const TUNE_GAMMA: [f64; 4] = [0.001, 0.01, 0.1, 1.0];

/// Grid search maximizing AUROC on `val`; first best in grid order wins.
pub fn tune_weights(val: &[ScoredImage], base: &ScoreWeights) -> Result<(ScoreWeights, f64)> {
    let l = labels(val);
    let mut best: Option<(ScoreWeights, f64)> = None;
    for a in TUNE_ALPHA {
        for b in TUNE_BETA {
            for g in TUNE_GAMMA {
                let w = ScoreWeights { alpha: base.alpha * a, beta: base.beta * b, gamma: base.gamma * g };
                let v = auroc(&totals(val, &w), &l)?;
                if best.is_none_or(|(_, bv)| v > bv) {
                    best = Some((w, v));
                }
            }
        }
    }
    Ok(best.expect("non-empty grid"))
}

pub fn build_report(cfg: &Config, test: &[ScoredImage], val: Option<&[ScoredImage]>) -> Result<EvalReport> {
    if test.is_empty() {
        return Err(Error::InvalidArgument("evaluation split is empty".into()));
    }
    let l = labels(test);
    let w = cfg.score.weights;
    let image = image_metrics(&totals(test, &w), &l)?;
    let org_only_image = image_metrics(&totals(test, &ScoreWeights::ORG_ONLY), &l)?;
    let maps: Vec<&[f64]> = test.iter().map(|s| s.map.values()).collect();
    let masks: Vec<&[bool]> = test.iter().map(|s| s.mask.as_slice()).collect();
    let pixel = pixel_metrics(&maps, &masks)?;
    let (tuned_weights, tuned_image) = match val {
        Some(v) if !v.is_empty() => {
            let (tw, _) = tune_weights(v, &w)?;
            (Some(tw), Some(image_metrics(&totals(test, &tw), &l)?))
        }
        _ => (None, None),
    };
    let comp = |f: &dyn Fn(&ScoreBreakdown) -> f64| auroc(&test.iter().map(|s| f(&s.breakdown)).collect::<Vec<_>>(), &l);
    let components = ComponentAuroc {
        s_org: comp(&|b| b.s_org)?,
        s_pdist: comp(&|b| w.alpha.signum() * b.s_pdist)?,
        s_concen: comp(&|b| w.beta.signum() * b.s_concen)?,
        s_contra: comp(&|b| w.gamma.signum() * b.s_contra)?,
        total_default: image.auroc,
        total_tuned: tuned_image.map(|m| m.auroc),
    };
    Ok(EvalReport {
        config_hash: cfg.hash(),
        weights: w,
        threshold_protocol: THRESHOLD_PROTOCOL.into(),
        image,
        pixel,
        tuned_weights,
        tuned_image,
        org_only_image,
        components,
        per_image: test
            .iter()
            .map(|s| PerImage { path: s.path.clone(), label: s.label, scores: s.breakdown.reweighted(&w) })
            .collect(),
    })
}

impl EvalReport {
    /// Human-readable summary with the per-component breakdown.
    pub fn summary(&self) -> String {
        let mut s = String::new();
        let im = &self.image;
        s += &format!(
            "image  AUROC {:.4}  AP {:.4}  F1 {:.4}  Acc {:.4}  threshold {:.6}\n",
            im.auroc, im.ap, im.f1, im.accuracy, im.threshold
        );
        s += &format!("pixel  AUROC {:.4}  AP {:.4}  F1 {:.4}\n", self.pixel.auroc, self.pixel.ap, self.pixel.f1);
        let c = &self.components;
        s += &format!(
            "components AUROC  S_org {:.4}  S_p-dist {:.4}  S_concen {:.4}  S_contra {:.4}  total(default) {:.4}",
            c.s_org, c.s_pdist, c.s_concen, c.s_contra, c.total_default
        );
        if let (Some(w), Some(t)) = (&self.tuned_weights, &self.tuned_image) {
            s += &format!(
                "\ntuned weights alpha {} beta {} gamma {}  total(tuned) AUROC {:.4}",
                w.alpha, w.beta, w.gamma, t.auroc
            );
        }
        s += &format!("\nS_org only AUROC {:.4}\n", self.org_only_image.auroc);
        s
    }
}
