//! Threshold-free ranking metrics and best-F1 thresholding.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

fn counts(scores: &[f64], labels: &[bool]) -> Result<(usize, usize)> {
    if scores.len() != labels.len() {
        return Err(Error::shape("metrics", format!("{} scores vs {} labels", scores.len(), labels.len())));
    }
    if let Some(s) = scores.iter().find(|s| !s.is_finite()) {
        return Err(Error::NonFinite(format!("score {s}")));
    }
    let pos = labels.iter().filter(|&&l| l).count();
    Ok((pos, labels.len() - pos))
}

/// Indices sorted by descending score (stable).
fn descending(scores: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    idx
}

/// Mann-Whitney AUROC; tied pairs count one half.
pub fn auroc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    let (pos, neg) = counts(scores, labels)?;
    if pos == 0 || neg == 0 {
        return Err(Error::InvalidArgument("AUROC needs both positive and negative labels".into()));
    }
    // walk groups of equal score from the bottom up
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let (mut neg_below, mut wins) = (0.0f64, 0.0f64);
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        let (mut gp, mut gn) = (0.0, 0.0);
        while j < idx.len() && scores[idx[j]] == scores[idx[i]] {
            if labels[idx[j]] {
                gp += 1.0;
            } else {
                gn += 1.0;
            }
            j += 1;
        }
        wins += gp * (neg_below + 0.5 * gn);
        neg_below += gn;
        i = j;
    }
    Ok(wins / (pos as f64 * neg as f64))
}

/// Step-interpolated average precision over a descending sweep with tied
/// scores grouped into one threshold.
pub fn average_precision(scores: &[f64], labels: &[bool]) -> Result<f64> {
    let (pos, _) = counts(scores, labels)?;
    if pos == 0 {
        return Err(Error::InvalidArgument("average precision needs at least one positive".into()));
    }
    let idx = descending(scores);
    let (mut tp, mut seen, mut ap, mut prev_recall) = (0usize, 0usize, 0.0, 0.0);
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j < idx.len() && scores[idx[j]] == scores[idx[i]] {
            tp += labels[idx[j]] as usize;
            seen += 1;
            j += 1;
        }
        let recall = tp as f64 / pos as f64;
        ap += (recall - prev_recall) * tp as f64 / seen as f64;
        prev_recall = recall;
        i = j;
    }
    Ok(ap)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ThresholdMetrics {
    pub f1: f64,
    pub accuracy: f64,
    /// Predict positive when `score >= threshold`.
    pub threshold: f64,
}

/// Sweeps every attained score as a threshold and keeps the best F1
/// (lowest threshold on ties).
pub fn f1_acc_at_best_threshold(scores: &[f64], labels: &[bool]) -> Result<ThresholdMetrics> {
    let (pos, neg) = counts(scores, labels)?;
    if pos == 0 || neg == 0 {
        return Err(Error::InvalidArgument("F1 threshold sweep needs both positive and negative labels".into()));
    }
    let idx = descending(scores);
    let n = scores.len() as f64;
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut best: Option<ThresholdMetrics> = None;
    let mut i = 0;
    while i < idx.len() {
        let t = scores[idx[i]];
        while i < idx.len() && scores[idx[i]] == t {
            if labels[idx[i]] {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        let f1 = 2.0 * tp as f64 / (tp + fp + pos) as f64;
        let tn = neg - fp;
        let m = ThresholdMetrics { f1, accuracy: (tp + tn) as f64 / n, threshold: t };
        // thresholds descend, so >= favours the lower one
        if best.is_none_or(|b| f1 >= b.f1) {
            best = Some(m);
        }
    }
    Ok(best.expect("non-empty input"))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PixelMetrics {
    pub auroc: f64,
    pub ap: f64,
    pub f1: f64,
}

/// Metrics over the pooled pixels of all maps.
pub fn pixel_metrics(maps: &[&[f64]], masks: &[&[bool]]) -> Result<PixelMetrics> {
    if maps.len() != masks.len() {
        return Err(Error::shape("pixel-metrics", format!("{} maps vs {} masks", maps.len(), masks.len())));
    }
    let mut scores = Vec::new();
    let mut labels = Vec::new();
    for (i, (m, k)) in maps.iter().zip(masks).enumerate() {
        if m.len() != k.len() {
            return Err(Error::shape("pixel-metrics", format!("image {i}: {} map values vs {} mask pixels", m.len(), k.len())));
        }
        scores.extend_from_slice(m);
        labels.extend_from_slice(k);
    }
    if !labels.iter().any(|&l| l) {
        return Err(Error::InvalidArgument("pixel metrics need at least one anomalous pixel".into()));
    }
    Ok(PixelMetrics {
        auroc: auroc(&scores, &labels)?,
        ap: average_precision(&scores, &labels)?,
        f1: f1_acc_at_best_threshold(&scores, &labels)?.f1,
    })
}
