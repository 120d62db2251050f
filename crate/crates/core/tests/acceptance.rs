//! Acceptance run: one line per criterion, nonzero exit if any fails.

mod common;

use std::path::Path;
use std::time::Instant;

use common::criteria::{self, Outcome};
use protoscan_core::config::{Config, Preset};
use protoscan_core::data::{build_dataset, Dataset, Split, SplitCounts};
use protoscan_core::eval::{build_report, score_split, EvalReport};
use protoscan_core::training::trainer::{CHECKPOINT_FILE, METRICS_FILE};
use protoscan_core::training::{load_model, train, TrainOptions};

const SEED: u64 = 7;
const MAX_PARAMS: usize = 1_000_000;

struct Run {
    report: EvalReport,
    log: Vec<u8>,
    checkpoint: Vec<u8>,
    params: usize,
}

fn train_and_eval(cfg: &Config, data: &Path, run_dir: &Path, stop_after: Option<usize>) -> protoscan_core::Result<Run> {
    let ds = Dataset::open(data)?;
    let images: Vec<Vec<f64>> = ds.load(Split::Train, cfg.model.image_size)?.into_iter().map(|s| s.image).collect();
    let ck_path = run_dir.join(CHECKPOINT_FILE);
    let mut out = train::<f32>(cfg, &images, &TrainOptions { run_dir: Some(run_dir.into()), resume: None, stop_after })?;
    if stop_after.is_some() {
        out = train::<f32>(cfg, &images, &TrainOptions { run_dir: Some(run_dir.into()), resume: Some(ck_path.clone()), stop_after: None })?;
    }
    let (model, store) = load_model(&out.checkpoint)?;
    let test = score_split(&model, &store, &ds.load(Split::Test, cfg.model.image_size)?, &cfg.score)?;
    let val = score_split(&model, &store, &ds.load(Split::Val, cfg.model.image_size)?, &cfg.score)?;
    Ok(Run {
        report: build_report(cfg, &test, Some(&val))?,
        log: std::fs::read(run_dir.join(METRICS_FILE)).map_err(|e| protoscan_core::Error::io(run_dir, e))?,
        checkpoint: std::fs::read(&ck_path).map_err(|e| protoscan_core::Error::io(&ck_path, e))?,
        params: store.count(),
    })
}

fn end_to_end() -> [Outcome; 3] {
    let fail = |e: &dyn std::fmt::Display| [Err(format!("pipeline error: {e}")), Err("not run".into()), Err("not run".into())];
    let tmp = match tempfile::tempdir() {
        Ok(t) => t,
        Err(e) => return fail(&e),
    };
    let cfg = {
        let mut c = Config::preset(Preset::Toy);
        c.seed = SEED;
        c
    };
    let data = tmp.path().join("data");
    let start = Instant::now();
    let counts = SplitCounts::new(200, 50, 50).with_val(20, 20);
    if let Err(e) = build_dataset(&data, &cfg.synth, &counts, SEED) {
        return fail(&e);
    }
    let a = match train_and_eval(&cfg, &data, &tmp.path().join("a"), None) {
        Ok(r) => r,
        Err(e) => return fail(&e),
    };
    let minutes = start.elapsed().as_secs_f64() / 60.0;
    print!("{}", a.report.summary());

    let r = &a.report;
    let c8 = if r.image.auroc >= 0.85 && r.pixel.auroc >= 0.80 && a.params <= MAX_PARAMS && minutes <= 30.0 {
        Ok(format!(
            "image AUROC {:.4}, pixel AUROC {:.4}, {} params, {minutes:.1} min",
            r.image.auroc, r.pixel.auroc, a.params
        ))
    } else {
        Err(format!(
            "image AUROC {:.4} (>= 0.85), pixel AUROC {:.4} (>= 0.80), {} params (<= 1M), {minutes:.1} min (<= 30)",
            r.image.auroc, r.pixel.auroc, a.params
        ))
    };

    let c9 = match (r.tuned_image, r.tuned_weights) {
        (Some(t), Some(w)) => {
            let line = format!(
                "tuned full AUROC {:.4} vs S_org-only {:.4} (alpha {}, beta {}, gamma {}); default full {:.4}",
                t.auroc, r.org_only_image.auroc, w.alpha, w.beta, w.gamma, r.image.auroc
            );
            if t.auroc >= r.org_only_image.auroc - 0.02 && r.summary().contains("components AUROC") {
                Ok(line)
            } else {
                Err(line)
            }
        }
        _ => Err("no tuned weights in the report".into()),
    };

    let c10 = match train_and_eval(&cfg, &data, &tmp.path().join("b"), Some(cfg.train.epochs / 2)) {
        Err(e) => Err(format!("repeat run: {e}")),
        Ok(b) => {
            let same_log = a.log == b.log;
            let same_ck = a.checkpoint == b.checkpoint;
            let same_report = a.report == b.report;
            let line = format!(
                "repeat run stopped after epoch {} and resumed: metrics log {}, checkpoint {}, report {}",
                cfg.train.epochs / 2,
                if same_log { "identical" } else { "differs" },
                if same_ck { "identical" } else { "differs" },
                if same_report { "identical" } else { "differs" },
            );
            if same_log && same_ck && same_report {
                Ok(line)
            } else {
                Err(line)
            }
        }
    };
    [c8, c9, c10]
}

fn main() {
    let mut results: Vec<(usize, &str, Outcome)> = vec![
        (1, "scan suite", criteria::scan_suite()),
        (2, "scan equivalence", criteria::scan_equivalence(100)),
        (3, "linear scan runtime", criteria::linearity(15)),
        (4, "gradient suite", criteria::gradient_suite(200)),
        (5, "windowed prototype distance", criteria::window_suite(100)),
        (6, "concentration and contrast", criteria::scoring_suite(100)),
        (7, "default scoring wiring", criteria::config_wiring()),
    ];
    let [c8, c9, c10] = end_to_end();
    results.push((8, "synthetic end-to-end", c8));
    results.push((9, "full scorer vs S_org only", c9));
    results.push((10, "reproducibility and resume", c10));

    let mut failed = 0;
    for (n, name, r) in &results {
        match r {
            Ok(detail) => println!("criterion {n:>2} PASS {name}: {detail}"),
            Err(why) => {
                failed += 1;
                println!("criterion {n:>2} FAIL {name}: {why}");
            }
        }
    }
    if failed > 0 {
        println!("{failed} of {} criteria failed", results.len());
        std::process::exit(1);
    }
    println!("all {} criteria passed", results.len());
}
