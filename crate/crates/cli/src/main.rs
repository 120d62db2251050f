use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use serde_json::{json, Value};

use protoscan_core::config::{Config, Precision, Preset};
use protoscan_core::data::{build_dataset, Dataset, Split, SplitCounts};
use protoscan_core::eval::{build_report, score_split, ScoredImage};
use protoscan_core::nn::ParamStore;
use protoscan_core::scan_orders::{render_visit_matrix, ScanDirection};
use protoscan_core::scoring::write_heatmap;
use protoscan_core::ssm::{bench, scan_runtime_benchmark};
use protoscan_core::training::{
    checkpoint_dtype, grad_check, load_model, micro_config, train, Checkpoint, GradCheckConfig, TrainOptions,
};
use protoscan_core::{model::Model, Real};

#[derive(Parser, Debug)]
#[command(name = "protoscan", version, about = "State-space anomaly detection on structured grayscale images")]
struct Cli {
    /// Root seed (overrides the config file).
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Geometry preset used as the config base.
    #[arg(long, global = true, value_parser = ["paper-shape", "toy"])]
    preset: Option<String>,
    /// Floating-point width of the model.
    #[arg(long, global = true, value_parser = ["32", "64"])]
    precision: Option<String>,
    /// TOML config merged over the preset.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Directory receiving the run manifest and outputs.
    #[arg(long, global = true)]
    run_dir: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic dataset with manifest.
    Synth(SynthArgs),
    /// Train on the normal images of a dataset.
    Train(TrainArgs),
    /// Write per-image score breakdowns.
    Score(ScoreArgs),
    /// Compute image- and pixel-level metrics.
    Eval(ScoreArgs),
    /// Write anomaly heatmaps (PNG plus raw sidecar).
    EmitMaps(MapsArgs),
    /// Print the visit matrix of a scan direction.
    ScanDump(ScanArgs),
    /// Time the parallel selective scan over sequence lengths.
    BenchScan(BenchArgs),
    /// Finite-difference check of the training loss on a micro model.
    GradCheck(GradArgs),
}

#[derive(Args, Debug)]
struct SynthArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 200)]
    train: usize,
    #[arg(long, default_value_t = 50)]
    test_normal: usize,
    #[arg(long, default_value_t = 50)]
    test_abnormal: usize,
    #[arg(long, default_value_t = 0)]
    val_normal: usize,
    #[arg(long, default_value_t = 0)]
    val_abnormal: usize,
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    epochs: Option<usize>,
    /// Continue from a checkpoint written by an earlier run.
    #[arg(long)]
    resume: Option<PathBuf>,
    /// Stop after this many completed epochs.
    #[arg(long)]
    stop_after: Option<usize>,
}

#[derive(Args, Debug)]
struct ScoreArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value = "test", value_parser = ["train", "val", "test"])]
    split: String,
}

#[derive(Args, Debug)]
struct MapsArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value = "test", value_parser = ["train", "val", "test"])]
    split: String,
    /// Emit at most this many maps.
    #[arg(long)]
    limit: Option<usize>,
}

#[derive(Args, Debug)]
struct ScanArgs {
    #[arg(long)]
    h: usize,
    #[arg(long)]
    w: usize,
    /// Direction index 0..7.
    #[arg(long)]
    direction: usize,
}

#[derive(Args, Debug)]
struct BenchArgs {
    #[arg(long, value_delimiter = ',', default_value = "1024,2048,4096")]
    lengths: Vec<usize>,
    #[arg(long, default_value_t = 15)]
    reps: usize,
}

#[derive(Args, Debug)]
struct GradArgs {
    #[arg(long, default_value_t = 200)]
    samples: usize,
    #[arg(long, default_value_t = 2)]
    images: usize,
}

fn resolve_config(cli: &Cli) -> Result<Config> {
    let flag_preset: Option<Preset> = cli.preset.as_deref().map(str::parse).transpose()?;
    let mut cfg = match &cli.config {
        Some(path) => {
            let c = Config::load(path, flag_preset.unwrap_or(Preset::PaperShape))?;
            if let Some(p) = flag_preset {
                if p != c.preset {
                    bail!("--preset {p} conflicts with preset {} in {}", c.preset, path.display());
                }
            }
            c
        }
        None => Config::preset(flag_preset.unwrap_or(Preset::PaperShape)),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if let Some(p) = &cli.precision {
        cfg.precision = if p == "64" { Precision::F64 } else { Precision::F32 };
    }
    cfg.validate()?;
    Ok(cfg)
}

fn split_of(name: &str) -> Split {
    match name {
        "train" => Split::Train,
        "val" => Split::Val,
        _ => Split::Test,
    }
}

fn write_json(path: &Path, v: &impl serde::Serialize) -> Result<()> {
    let text = serde_json::to_string_pretty(v)?;
    std::fs::write(path, text + "\n").with_context(|| format!("writing {}", path.display()))
}

struct Run {
    dir: PathBuf,
    command: &'static str,
}

impl Run {
    fn new(cli: &Cli, command: &'static str) -> Result<Self> {
        let dir = cli.run_dir.clone().unwrap_or_else(|| PathBuf::from("runs").join(command));
        std::fs::create_dir_all(&dir).with_context(|| format!("creating run directory {}", dir.display()))?;
        Ok(Self { dir, command })
    }

    fn finish(&self, cfg: &Config, outputs: Value) -> Result<()> {
        let manifest = json!({
            "command": self.command,
            "argv": std::env::args().collect::<Vec<_>>(),
            "seed": cfg.seed,
            "precision": u32::from(cfg.precision),
            "preset": cfg.preset.to_string(),
            "config_hash": cfg.hash(),
            "config": cfg,
            "versions": { "protoscan": env!("CARGO_PKG_VERSION") },
            "outputs": outputs,
        });
        write_json(&self.dir.join("run.json"), &manifest)
    }
}

/// Loads a checkpoint of either precision and runs `f` on it.
macro_rules! with_checkpoint {
    ($path:expr, |$ck:ident| $body:expr) => {{
        let path: &Path = $path;
        if !path.exists() {
            bail!("checkpoint not found: {}", path.display());
        }
        match checkpoint_dtype(path)?.as_str() {
            "f64" => {
                let $ck = Checkpoint::<f64>::load(path)?;
                $body
            }
            _ => {
                let $ck = Checkpoint::<f32>::load(path)?;
                $body
            }
        }
    }};
}

/// Checkpoint config, with the scoring section taken from `--config` if one was given.
fn eval_config<T: Real>(cli: &Cli, ck: &Checkpoint<T>) -> Result<Config> {
    let mut cfg = ck.config.clone();
    if cli.config.is_some() {
        cfg.score = resolve_config(cli)?.score;
    }
    Ok(cfg)
}

fn score_with<T: Real>(model: &Model, store: &ParamStore<T>, cfg: &Config, ds: &Dataset, split: Split) -> Result<Vec<ScoredImage>> {
    let samples = ds.load(split, cfg.model.image_size)?;
    if samples.is_empty() {
        bail!("split {split:?} of {} is empty", ds.root.display());
    }
    Ok(score_split(model, store, &samples, &cfg.score)?)
}

fn cmd_synth(cli: &Cli, a: &SynthArgs) -> Result<()> {
    let cfg = resolve_config(cli)?;
    let run = Run::new(cli, "synth")?;
    let counts = SplitCounts::new(a.train, a.test_normal, a.test_abnormal).with_val(a.val_normal, a.val_abnormal);
    let entries = build_dataset(&a.out, &cfg.synth, &counts, cfg.seed)?;
    println!("wrote {} images to {}", entries.len(), a.out.display());
    run.finish(&cfg, json!({ "dataset": a.out, "counts": counts, "images": entries.len() }))
}

fn train_typed<T: Real>(cfg: &Config, run: &Run, a: &TrainArgs) -> Result<Value> {
    let ds = Dataset::open(&a.data)?;
    let images: Vec<Vec<f64>> = ds.load(Split::Train, cfg.model.image_size)?.into_iter().map(|s| s.image).collect();
    let opts = TrainOptions { run_dir: Some(run.dir.clone()), resume: a.resume.clone(), stop_after: a.stop_after };
    let out = train::<T>(cfg, &images, &opts)?;
    let last = out.log.iter().rev().find(|r| matches!(r, protoscan_core::training::LogRecord::Epoch { .. }));
    Ok(json!({
        "checkpoint": run.dir.join(protoscan_core::training::trainer::CHECKPOINT_FILE),
        "metrics": run.dir.join(protoscan_core::training::trainer::METRICS_FILE),
        "epochs_completed": out.checkpoint.epoch,
        "parameters": out.checkpoint.params.count(),
        "last_epoch": last,
    }))
}

fn cmd_train(cli: &Cli, a: &TrainArgs) -> Result<()> {
    let mut cfg = resolve_config(cli)?;
    if let Some(e) = a.epochs {
        cfg.train.epochs = e;
    }
    let run = Run::new(cli, "train")?;
    let outputs = match cfg.precision {
        Precision::F32 => train_typed::<f32>(&cfg, &run, a)?,
        Precision::F64 => train_typed::<f64>(&cfg, &run, a)?,
    };
    println!("{}", serde_json::to_string(&outputs["last_epoch"])?);
    run.finish(&cfg, outputs)
}

fn cmd_score(cli: &Cli, a: &ScoreArgs) -> Result<()> {
    let run = Run::new(cli, "score")?;
    with_checkpoint!(&a.checkpoint, |ck| {
        let ds = Dataset::open(&a.data)?;
        let cfg = eval_config(cli, &ck)?;
        let (model, store) = load_model(&ck)?;
        let scored = score_with(&model, &store, &cfg, &ds, split_of(&a.split))?;
        let path = run.dir.join("scores.jsonl");
        let mut lines = String::new();
        for s in &scored {
            lines += &serde_json::to_string(&json!({ "path": s.path, "label": s.label, "scores": s.breakdown }))?;
            lines.push('\n');
        }
        std::fs::write(&path, lines).with_context(|| format!("writing {}", path.display()))?;
        println!("scored {} images -> {}", scored.len(), path.display());
        run.finish(&cfg, json!({ "scores": path, "images": scored.len() }))
    })
}

fn cmd_eval(cli: &Cli, a: &ScoreArgs) -> Result<()> {
    let run = Run::new(cli, "eval")?;
    with_checkpoint!(&a.checkpoint, |ck| {
        let ds = Dataset::open(&a.data)?;
        let cfg = eval_config(cli, &ck)?;
        let (model, store) = load_model(&ck)?;
        let test = score_with(&model, &store, &cfg, &ds, split_of(&a.split))?;
        let val = if ds.split(Split::Val).is_empty() { None } else { Some(score_with(&model, &store, &cfg, &ds, Split::Val)?) };
        let report = build_report(&cfg, &test, val.as_deref())?;
        let path = run.dir.join("report.json");
        write_json(&path, &report)?;
        print!("{}", report.summary());
        run.finish(&cfg, json!({ "report": path, "image": report.image, "pixel": report.pixel, "components": report.components }))
    })
}

fn cmd_emit_maps(cli: &Cli, a: &MapsArgs) -> Result<()> {
    let run = Run::new(cli, "emit-maps")?;
    with_checkpoint!(&a.checkpoint, |ck| {
        let ds = Dataset::open(&a.data)?;
        let cfg = eval_config(cli, &ck)?;
        let (model, store) = load_model(&ck)?;
        let mut scored = score_with(&model, &store, &cfg, &ds, split_of(&a.split))?;
        if let Some(n) = a.limit {
            scored.truncate(n);
        }
        let maps_dir = run.dir.join("maps");
        std::fs::create_dir_all(&maps_dir).with_context(|| format!("creating {}", maps_dir.display()))?;
        let mut scales = Vec::new();
        for s in &scored {
            let stem = Path::new(&s.path).file_stem().and_then(|x| x.to_str()).unwrap_or("map").to_string();
            let png = maps_dir.join(format!("{stem}.png"));
            let raw = maps_dir.join(format!("{stem}.spam"));
            let scale = write_heatmap(&s.map, &png, &raw)?;
            scales.push(json!({ "image": s.path, "png": png, "raw": raw, "min": scale.min, "max": scale.max }));
        }
        println!("wrote {} maps to {}", scales.len(), maps_dir.display());
        run.finish(&cfg, json!({ "maps": scales }))
    })
}

fn cmd_scan_dump(cli: &Cli, a: &ScanArgs) -> Result<()> {
    let cfg = resolve_config(cli)?;
    let run = Run::new(cli, "scan-dump")?;
    let dir = ScanDirection::from_index(a.direction).with_context(|| format!("direction {} is not in 0..8", a.direction))?;
    let text = render_visit_matrix(a.h, a.w, dir)?;
    print!("{text}");
    run.finish(&cfg, json!({ "h": a.h, "w": a.w, "direction": dir.to_string() }))
}

fn cmd_bench(cli: &Cli, a: &BenchArgs) -> Result<()> {
    let cfg = resolve_config(cli)?;
    let run = Run::new(cli, "bench-scan")?;
    let rows = scan_runtime_benchmark(&a.lengths, a.reps)?;
    let csv = bench::to_csv(&rows);
    print!("{csv}");
    let path = run.dir.join("bench.csv");
    std::fs::write(&path, &csv).with_context(|| format!("writing {}", path.display()))?;
    let ratios: Vec<f64> = rows.windows(2).map(|w| w[1].median_ns as f64 / w[0].median_ns.max(1) as f64).collect();
    run.finish(&cfg, json!({ "csv": path, "ratios": ratios }))
}

fn cmd_grad_check(cli: &Cli, a: &GradArgs) -> Result<()> {
    let cfg = resolve_config(cli)?;
    let run = Run::new(cli, "grad-check")?;
    let (model, store) = Model::new::<f64>(micro_config(), cfg.seed)?;
    let synth = protoscan_core::data::SynthConfig::with_size(64);
    let images = (0..a.images as u64)
        .map(|i| protoscan_core::training::image_tensor(&protoscan_core::data::generate_normal(&synth, cfg.seed, i).image, 64))
        .collect::<protoscan_core::Result<Vec<_>>>()?;
    let gc = GradCheckConfig { samples: a.samples, seed: cfg.seed, ..Default::default() };
    let report = grad_check(&model, &store, &images, cfg.train.epsilon, &gc)?;
    println!("checked {} coordinates, max relative error {:.3e} (tolerance {:.0e})", report.checked, report.max_rel_error, report.tolerance);
    for w in &report.worst {
        println!("  {}[{}]: analytic {:.6e} numeric {:.6e} rel {:.3e}", w.param, w.index, w.analytic, w.numeric, w.rel_error);
    }
    let path = run.dir.join("grad_check.json");
    write_json(&path, &report)?;
    run.finish(&cfg, json!({ "report": path, "passed": report.passed, "max_rel_error": report.max_rel_error }))?;
    if !report.passed {
        bail!("gradient check failed: max relative error {:.3e}", report.max_rel_error);
    }
    Ok(())
}

fn main() -> Result<()> {
    let cli = Cli::parse();
    match &cli.command {
        Command::Synth(a) => cmd_synth(&cli, a),
        Command::Train(a) => cmd_train(&cli, a),
        Command::Score(a) => cmd_score(&cli, a),
        Command::Eval(a) => cmd_eval(&cli, a),
        Command::EmitMaps(a) => cmd_emit_maps(&cli, a),
        Command::ScanDump(a) => cmd_scan_dump(&cli, a),
        Command::BenchScan(a) => cmd_bench(&cli, a),
        Command::GradCheck(a) => cmd_grad_check(&cli, a),
    }
}
