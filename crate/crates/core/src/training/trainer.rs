//! Training loop.

use std::io::{BufRead, BufReader, Write as _};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::adamw::{adamw_step, AdamWConfig, AdamWState};
use super::checkpoint::Checkpoint;
use crate::config::Config;
use crate::error::{Error, Result};
use crate::model::Model;
use crate::nn::{BindMode, ParamStore};
use crate::prototype::init_prototypes;
use crate::real::Real;
use crate::rng::{self, streams};
use crate::tensor::{Tape, Tensor};

pub const CHECKPOINT_FILE: &str = "checkpoint.spck";
pub const METRICS_FILE: &str = "metrics.jsonl";

/// One line of the metrics log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum LogRecord {
    Step { epoch: usize, step: u64, loss: f64, mse: f64, distance: f64 },
    Epoch { epoch: usize, steps: u64, loss: f64, mse: f64, distance: f64 },
}

impl LogRecord {
    pub fn epoch(&self) -> usize {
        match self {
            LogRecord::Step { epoch, .. } | LogRecord::Epoch { epoch, .. } => *epoch,
        }
    }
}

#[derive(Clone, Debug, Default)]
pub struct TrainOptions {
    /// Checkpoint and metrics destination; nothing is written when `None`.
    pub run_dir: Option<PathBuf>,
    /// Continue from this checkpoint.
    pub resume: Option<PathBuf>,
    /// Stop once this many epochs are complete (simulates an interruption).
    pub stop_after: Option<usize>,
}

pub struct TrainOutcome<T> {
    pub model: Model,
    pub checkpoint: Checkpoint<T>,
    pub log: Vec<LogRecord>,
}

/// Loss terms of one image: total, MSE sum, mean upsampled distance.
pub type LossTerms = [f64; 3];

/// Forward and backward for one `[1,S,S]` image.
pub fn image_gradients<T: Real>(
    model: &Model,
    store: &ParamStore<T>,
    image: &Tensor<T>,
    epsilon: f64,
) -> Result<(LossTerms, Vec<Option<Vec<T>>>)> {
    let mut tape = Tape::new();
    let p = store.bind(&mut tape, BindMode::Train);
    let x = tape.constant(image.clone());
    let fw = model.forward(&mut tape, &p, x)?;
    let l = model.loss(&mut tape, &fw, epsilon)?;
    let terms = [tape.data(l.total)[0].f64(), tape.data(l.mse)[0].f64(), tape.data(l.distance_mean)[0].f64()];
    let mut grads = tape.backward(l.total)?;
    let out = store
        .params()
        .iter()
        .zip(p.vars())
        .map(|(param, &v)| if param.trainable { grads.take(v) } else { None })
        .collect();
    Ok((terms, out))
}

/// Loss of one image without gradients.
pub fn image_loss<T: Real>(model: &Model, store: &ParamStore<T>, image: &Tensor<T>, epsilon: f64) -> Result<LossTerms> {
    let mut tape = Tape::new();
    let p = store.bind(&mut tape, BindMode::Inference);
    let x = tape.constant(image.clone());
    let fw = model.forward(&mut tape, &p, x)?;
    let l = model.loss(&mut tape, &fw, epsilon)?;
    Ok([tape.data(l.total)[0].f64(), tape.data(l.mse)[0].f64(), tape.data(l.distance_mean)[0].f64()])
}

pub fn image_tensor<T: Real>(pixels: &[f64], size: usize) -> Result<Tensor<T>> {
    Tensor::from_f64([1, size, size], pixels)
}

/// Mean-reduced batch gradient, combined in batch order.
fn batch_gradients<T: Real>(
    model: &Model,
    store: &ParamStore<T>,
    batch: &[&Tensor<T>],
    epsilon: f64,
) -> Result<(LossTerms, Vec<Option<Vec<T>>>)> {
    let per: Vec<_> = batch.par_iter().map(|img| image_gradients(model, store, img, epsilon)).collect();
    let mut terms = [0.0; 3];
    let mut acc: Vec<Option<Vec<T>>> = vec![None; store.len()];
    for r in per {
        let (t, g) = r?;
        for k in 0..3 {
            terms[k] += t[k];
        }
        for (a, g) in acc.iter_mut().zip(g) {
            if let Some(g) = g {
                match a {
                    None => *a = Some(g),
                    Some(a) => a.iter_mut().zip(&g).for_each(|(x, y)| *x = *x + *y),
                }
            }
        }
    }
    let n = batch.len() as f64;
    let inv = T::c(1.0 / n);
    for g in acc.iter_mut().flatten() {
        g.iter_mut().for_each(|x| *x = *x * inv);
    }
    Ok((terms.map(|t| t / n), acc))
}

/// Fused grids of the given images under the current parameters.
fn fused_grids<T: Real>(model: &Model, store: &ParamStore<T>, images: &[&Tensor<T>]) -> Result<Vec<Tensor<T>>> {
    images
        .par_iter()
        .map(|img| {
            let mut tape = Tape::new();
            let p = store.bind(&mut tape, BindMode::Inference);
            let x = tape.constant((*img).clone());
            let (_, fused) = model.encode(&mut tape, &p, x)?;
            Ok(tape.value(fused).clone())
        })
        .collect()
}

fn read_log(path: &Path) -> Result<Vec<LogRecord>> {
    let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    BufReader::new(f)
        .lines()
        .map(|l| {
            let l = l.map_err(|e| Error::io(path, e))?;
            serde_json::from_str(&l).map_err(|e| Error::Format(format!("{}: {e}", path.display())))
        })
        .collect()
}

fn write_log(path: &Path, log: &[LogRecord]) -> Result<()> {
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    for r in log {
        writeln!(f, "{}", serde_json::to_string(r).expect("record serializes")).map_err(|e| Error::io(path, e))?;
    }
    Ok(())
}

fn append_log(path: &Path, recs: &[LogRecord]) -> Result<()> {
    let mut f = std::fs::OpenOptions::new().append(true).create(true).open(path).map_err(|e| Error::io(path, e))?;
    for r in recs {
        writeln!(f, "{}", serde_json::to_string(r).expect("record serializes")).map_err(|e| Error::io(path, e))?;
    }
    Ok(())
}

/// Trains on normal images (row-major pixels in `[0,1]`, already sized).
pub fn train<T: Real>(cfg: &Config, images: &[Vec<f64>], opts: &TrainOptions) -> Result<TrainOutcome<T>> {
    cfg.validate()?;
    if images.is_empty() {
        return Err(Error::InvalidArgument("training set is empty".into()));
    }
    let size = cfg.model.image_size;
    let tensors: Vec<Tensor<T>> = images.iter().map(|px| image_tensor(px, size)).collect::<Result<_>>()?;
    let (model, mut store) = Model::new::<T>(cfg.model.clone(), cfg.seed)?;
    let ck_path = opts.run_dir.as_ref().map(|d| d.join(CHECKPOINT_FILE));
    let log_path = opts.run_dir.as_ref().map(|d| d.join(METRICS_FILE));
    if let Some(d) = &opts.run_dir {
        std::fs::create_dir_all(d).map_err(|e| Error::io(d, e))?;
    }

    let (mut rng, mut opt, start, mut log) = match &opts.resume {
        Some(path) => {
            let ck = Checkpoint::<T>::load(path)?;
            if ck.config.model != cfg.model || ck.config.seed != cfg.seed || ck.config.train.batch_size != cfg.train.batch_size {
                return Err(Error::Config(format!("{} was written by a different model/seed/batch config", path.display())));
            }
            ck.restore_into(&mut store)?;
            let prior = match &log_path {
                Some(p) if p.exists() => read_log(p)?.into_iter().filter(|r| r.epoch() < ck.epoch).collect(),
                _ => Vec::new(),
            };
            (ck.rng, ck.opt, ck.epoch, prior)
        }
        None => {
            let rng = rng::stream(cfg.seed, streams::SHUFFLE);
            let mut peek = rng.clone();
            let mut order: Vec<usize> = (0..tensors.len()).collect();
            order.shuffle(&mut peek);
            let k = cfg.model.prototypes;
            let n = cfg.train.prototype_init_samples.max(k).min(tensors.len());
            let picked: Vec<&Tensor<T>> = order[..n].iter().map(|&i| &tensors[i]).collect();
            let grids = fused_grids(&model, &store, &picked)?;
            model.set_bank(&mut store, init_prototypes(&grids, k, cfg.seed)?)?;
            (rng, AdamWState::new(&store), 0, Vec::new())
        }
    };
    if let Some(p) = &log_path {
        write_log(p, &log)?;
    }

    let adam = AdamWConfig::new(cfg.train.lr, cfg.train.weight_decay);
    let end = opts.stop_after.map_or(cfg.train.epochs, |s| s.min(cfg.train.epochs));
    let mut completed = start;
    for epoch in start..end {
        let mut order: Vec<usize> = (0..tensors.len()).collect();
        order.shuffle(&mut rng);
        let mut sums = [0.0; 3];
        let mut fresh = Vec::new();
        let mut steps = 0u64;
        for chunk in order.chunks(cfg.train.batch_size) {
            let batch: Vec<&Tensor<T>> = chunk.iter().map(|&i| &tensors[i]).collect();
            let (terms, grads) = batch_gradients(&model, &store, &batch, cfg.train.epsilon)?;
            if terms.iter().any(|t| !t.is_finite()) {
                let last = ck_path.as_ref().filter(|p| p.exists()).map_or("none".to_string(), |p| p.display().to_string());
                return Err(Error::NonFinite(format!(
                    "loss {} at epoch {epoch} step {}; last good checkpoint: {last}",
                    terms[0],
                    opt.step + 1
                )));
            }
            adamw_step(&mut store, &grads, &mut opt, &adam)?;
            steps += 1;
            for k in 0..3 {
                sums[k] += terms[k];
            }
            fresh.push(LogRecord::Step { epoch, step: opt.step, loss: terms[0], mse: terms[1], distance: terms[2] });
        }
        let n = steps as f64;
        fresh.push(LogRecord::Epoch { epoch, steps, loss: sums[0] / n, mse: sums[1] / n, distance: sums[2] / n });
        if let Some(p) = &log_path {
            append_log(p, &fresh)?;
        }
        log.extend(fresh);
        completed = epoch + 1;
        if let Some(p) = &ck_path {
            Checkpoint { config: cfg.clone(), epoch: completed, rng: rng.clone(), params: store.clone(), opt: opt.clone() }
                .save(p)?;
        }
    }
    let checkpoint = Checkpoint { config: cfg.clone(), epoch: completed, rng, params: store, opt };
    Ok(TrainOutcome { model, checkpoint, log })
}

/// Rebuilds the model described by a checkpoint and loads its parameters.
pub fn load_model<T: Real>(ck: &Checkpoint<T>) -> Result<(Model, ParamStore<T>)> {
    let (model, mut store) = Model::new::<T>(ck.config.model.clone(), ck.config.seed)?;
    ck.restore_into(&mut store)?;
    Ok((model, store))
}


#[cfg(test)]
mod tests {
    use super::*;
    use crate::training::grad_check::micro_config;
    use proptest::prelude::*;
    use rand::Rng as _;

    fn micro_run() -> (Config, Vec<Vec<f64>>) {
        let mut cfg = Config::preset(crate::config::Preset::Toy);
        cfg.model = micro_config();
        cfg.seed = 3;
        cfg.train.epochs = 3;
        cfg.train.batch_size = 2;
        let mut r = rng::stream(5, streams::TESTS);
        let images = (0..4).map(|_| (0..64 * 64).map(|_| r.random_range(0.0..1.0)).collect()).collect();
        (cfg, images)
    }

    #[test]
    fn resumed_run_matches_uninterrupted() {
        let (cfg, images) = micro_run();
        let tmp = tempfile::tempdir().unwrap();
        let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
        train::<f32>(&cfg, &images, &TrainOptions { run_dir: Some(a.clone()), ..Default::default() }).unwrap();
        train::<f32>(&cfg, &images, &TrainOptions { run_dir: Some(b.clone()), resume: None, stop_after: Some(1) }).unwrap();
        let resume = Some(b.join(CHECKPOINT_FILE));
        train::<f32>(&cfg, &images, &TrainOptions { run_dir: Some(b.clone()), resume, stop_after: None }).unwrap();
        for f in [METRICS_FILE, CHECKPOINT_FILE] {
            assert_eq!(std::fs::read(a.join(f)).unwrap(), std::fs::read(b.join(f)).unwrap(), "{f}");
        }
    }

    proptest! {
        #[test]
        fn log_lines_round_trip(loss in any::<f64>(), mse in 0.0f64..1e6, distance in 0.0f64..2.0) {
            prop_assume!(loss.is_finite());
            let tmp = tempfile::tempdir().unwrap();
            let p = tmp.path().join(METRICS_FILE);
            let log = vec![LogRecord::Step { epoch: 0, step: 1, loss, mse, distance }];
            write_log(&p, &log).unwrap();
            let first = std::fs::read(&p).unwrap();
            prop_assert_eq!(&read_log(&p).unwrap(), &log);
            write_log(&p, &read_log(&p).unwrap()).unwrap();
            prop_assert_eq!(std::fs::read(&p).unwrap(), first);
        }
    }
}
