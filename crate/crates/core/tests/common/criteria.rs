//! Property criteria 1-7. Each returns a one-line detail on success and a
//! description of the first violation on failure.

use std::collections::HashSet;
use std::time::Instant;

use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};
use protoscan_core::config::{Config, Preset};
use protoscan_core::model::Model;
use protoscan_core::prototype::{window_cardinality, window_distance_raw};
use protoscan_core::rng::{self, streams, Rng};
use protoscan_core::scan_orders::{hilbert_matrix, scan_order, ScanDirection};
use protoscan_core::scoring::{gaussian, image_scores, s_concen, s_contra, AnomalyMap, ContrastParams, ScoreWeights};
use protoscan_core::prototype::DistanceMap;
use protoscan_core::ssm::{discretize, scan_runtime_benchmark, selective_scan_parallel, selective_scan_sequential};
use protoscan_core::training::{grad_check, image_tensor, micro_config, GradCheckConfig};
use protoscan_core::Real;

use super::oracles::{s_concen_loops, s_contra_loops, window_distance_brute};
use super::{check_case, primitive_cases};

pub type Outcome = Result<String, String>;

macro_rules! ensure {
    ($cond:expr, $($msg:tt)+) => {
        if $cond {
        } else {
            return Err(format!($($msg)+));
        }
    };
}

fn adjacent(a: (usize, usize), b: (usize, usize)) -> bool {
    a.0.abs_diff(b.0) + a.1.abs_diff(b.1) == 1
}

pub fn scan_suite() -> Outcome {
    let start = Instant::now();
    for side in [4, 8] {
        for dir in ScanDirection::all() {
            let o = scan_order(side, side, dir).map_err(|e| e.to_string())?;
            let mut seen = vec![false; side * side];
            for &cell in o.order().iter() {
                ensure!(cell < seen.len() && !seen[cell], "{side}x{side} {dir}: not a permutation");
                seen[cell] = true;
            }
            ensure!(seen.iter().all(|&s| s), "{side}x{side} {dir}: cells missing");
            for (i, &cell) in o.order().iter().enumerate() {
                ensure!(o.inverse()[cell] == i, "{side}x{side} {dir}: inverse mismatch at step {i}");
            }
            let seq: Vec<usize> = (0..side * side).collect();
            ensure!(o.scatter(&o.gather(&seq)) == seq, "{side}x{side} {dir}: gather/scatter round trip");
        }
    }
    for n in 1..=4 {
        let path = hilbert_matrix(n).map_err(|e| e.to_string())?.path();
        ensure!(path.len() == 1 << (2 * n), "hilbert order {n}: wrong length");
        for w in path.windows(2) {
            ensure!(adjacent(w[0], w[1]), "hilbert order {n}: {:?} -> {:?} not 4-adjacent", w[0], w[1]);
        }
    }
    let distinct: HashSet<Vec<usize>> =
        ScanDirection::all().iter().map(|&d| scan_order(8, 8, d).unwrap().order().to_vec()).collect();
    ensure!(distinct.len() == 8, "only {} distinct orders on 8x8", distinct.len());
    let secs = start.elapsed().as_secs_f64();
    ensure!(secs < 1.0, "scan suite took {secs:.3}s");
    Ok(format!("8 directions bijective on 4x4/8x8, hilbert orders 1-4 adjacent, 8 distinct, {:.1} ms", secs * 1e3))
}

fn scan_instance<T: Real>(rng: &mut Rng, len: usize) -> (Vec<T>, Vec<T>, Vec<T>) {
    let (dim, state) = (rng.random_range(1..=4), rng.random_range(1..=8));
    // model-like regime: A = -(1..N), log-uniform steps
    let a: Vec<T> = (0..dim * state).map(|i| T::c(-((i % state) as f64 + 1.0))).collect();
    let b: Vec<T> = (0..len * state).map(|_| T::c(StandardNormal.sample(rng))).collect();
    let delta: Vec<T> = (0..len * dim).map(|_| T::c(rng.random_range(1e-3f64.ln()..0.0).exp())).collect();
    let c: Vec<T> = (0..len * state).map(|_| T::c(StandardNormal.sample(rng))).collect();
    let x: Vec<T> = (0..len * dim).map(|_| T::c(StandardNormal.sample(rng))).collect();
    let d: Vec<T> = (0..dim).map(|_| T::c(StandardNormal.sample(rng))).collect();
    let disc = discretize(&a, &b, &delta, len, dim, state).unwrap();
    let seq = selective_scan_sequential(&disc, &c, &x, &d).unwrap();
    let par = selective_scan_parallel(&disc, &c, &x, &d).unwrap();
    (seq, par, x)
}

fn max_abs<T: Real>(a: &[T], b: &[T]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x.f64() - y.f64()).abs()).fold(0.0, f64::max)
}

pub fn scan_equivalence(instances: usize) -> Outcome {
    let mut rng = rng::indexed(2, streams::TESTS, 0);
    let (mut worst32, mut worst64) = (0.0f64, 0.0f64);
    for i in 0..instances {
        let len = if i < 2 { [16, 4096][i] } else { rng.random_range(16..=4096) };
        let mut r32 = rng.clone();
        let (s, p, _) = scan_instance::<f64>(&mut rng, len);
        worst64 = worst64.max(max_abs(&s, &p));
        let (s, p, _) = scan_instance::<f32>(&mut r32, len);
        worst32 = worst32.max(max_abs(&s, &p));
    }
    ensure!(worst32 <= 1e-5, "32-bit max abs diff {worst32:.3e} > 1e-5");
    ensure!(worst64 <= 1e-10, "64-bit max abs diff {worst64:.3e} > 1e-10");
    Ok(format!("{instances} instances, max abs diff {worst32:.2e} (f32), {worst64:.2e} (f64)"))
}

pub fn linearity(reps: usize) -> Outcome {
    let rows = scan_runtime_benchmark(&[1024, 2048, 4096], reps).map_err(|e| e.to_string())?;
    let ratios: Vec<f64> = rows.windows(2).map(|w| w[1].median_ns as f64 / w[0].median_ns.max(1) as f64).collect();
    let text = rows.iter().map(|r| format!("L={} {:.0}us", r.len, r.median_ns as f64 / 1e3)).collect::<Vec<_>>().join(", ");
    ensure!(ratios.iter().all(|&r| r <= 2.5), "T(2L)/T(L) = {ratios:.2?} exceeds 2.5 ({text})");
    Ok(format!("{text}; ratios {ratios:.2?}"))
}

pub fn gradient_suite(samples: usize) -> Outcome {
    let mut worst = 0.0f64;
    for case in primitive_cases() {
        let e = check_case(&case, 20, 5, 1e-6, 1e-3);
        ensure!(e <= 1e-3, "primitive {}: relative error {e:.3e}", case.name);
        worst = worst.max(e);
    }
    let cfg = Config::preset(Preset::Toy);
    let (model, store) = Model::new::<f64>(micro_config(), 3).map_err(|e| e.to_string())?;
    let synth = protoscan_core::data::SynthConfig::with_size(64);
    let images: Vec<_> =
        (0..2).map(|i| image_tensor(&protoscan_core::data::generate_normal(&synth, 3, i).image, 64).unwrap()).collect();
    let gc = GradCheckConfig { samples, seed: 3, ..Default::default() };
    let report = grad_check(&model, &store, &images, cfg.train.epsilon, &gc).map_err(|e| e.to_string())?;
    ensure!(report.checked >= samples, "only {} coordinates checked", report.checked);
    ensure!(report.passed, "end-to-end loss: max relative error {:.3e} at {:?}", report.max_rel_error, report.worst.first());
    Ok(format!(
        "{} primitives max rel {worst:.2e}; end-to-end loss {} coords max rel {:.2e}",
        primitive_cases().len(),
        report.checked,
        report.max_rel_error
    ))
}

fn random_window_instance<T: Real>(rng: &mut Rng) -> (Vec<T>, Vec<T>, usize, usize, usize, usize, usize) {
    let (gh, gw) = (rng.random_range(1..=7), rng.random_range(1..=7));
    let odd: Vec<usize> = (1..=gh.min(gw)).filter(|p| p % 2 == 1).collect();
    let p = odd[rng.random_range(0..odd.len())];
    let (k, c) = (rng.random_range(1..=4), rng.random_range(1..=6));
    let bank = (0..k * gh * gw * c).map(|_| T::c(StandardNormal.sample(rng))).collect();
    let feat = (0..gh * gw * c).map(|_| T::c(StandardNormal.sample(rng))).collect();
    (bank, feat, k, gh, gw, c, p)
}

pub fn window_suite(instances: usize) -> Outcome {
    let mut rng = rng::indexed(5, streams::TESTS, 0);
    for i in 0..instances {
        let (bank, feat, k, gh, gw, c, p) = random_window_instance::<f64>(&mut rng);
        let (got, _) = window_distance_raw(&bank, &feat, k, gh, gw, c, p).map_err(|e| e.to_string())?;
        ensure!(got == window_distance_brute(&bank, &feat, k, gh, gw, c, p), "f64 instance {i} ({gh}x{gw}, p={p}) differs");
        let (bank, feat, k, gh, gw, c, p) = random_window_instance::<f32>(&mut rng);
        let (got, _) = window_distance_raw(&bank, &feat, k, gh, gw, c, p).map_err(|e| e.to_string())?;
        ensure!(got == window_distance_brute(&bank, &feat, k, gh, gw, c, p), "f32 instance {i} ({gh}x{gw}, p={p}) differs");
    }
    let cards = [window_cardinality(8, 8, 3, 0, 0), window_cardinality(8, 8, 3, 0, 4), window_cardinality(8, 8, 3, 4, 4)];
    ensure!(cards == [4, 6, 9], "corner/edge/center cardinalities {cards:?}");
    Ok(format!("{instances} random instances equal brute force exactly (f32 and f64); cardinalities 4/6/9"))
}

pub fn scoring_suite(instances: usize) -> Outcome {
    let mut rng = rng::indexed(6, streams::TESTS, 0);
    let p = ContrastParams::default();
    let mut worst = 0.0f64;
    for _ in 0..instances {
        let (h, w) = (rng.random_range(1..=24), rng.random_range(1..=24));
        let v: Vec<f64> = (0..h * w).map(|_| rng.random_range(0.0..3.0)).collect();
        let m = AnomalyMap::new(h, w, v.clone()).map_err(|e| e.to_string())?;
        let dc = (s_concen(&m) - s_concen_loops(&v, h, w)).abs();
        let dt = (s_contra(&m, &p).map_err(|e| e.to_string())? - s_contra_loops(&v, h, w, p.sigma, p.k_sigma)).abs();
        ensure!(dc <= 1e-9 && dt <= 1e-9, "{h}x{w} map: concentration diff {dc:.2e}, contrast diff {dt:.2e}");
        worst = worst.max(dc).max(dt);
    }
    let impulse = AnomalyMap::new(2, 2, vec![1.0, 0.0, 0.0, 0.0]).unwrap();
    let golden = (2.0 + 2f64.sqrt()) / 4.0;
    ensure!((s_concen(&impulse) - golden).abs() <= 1e-6, "impulse concentration {}", s_concen(&impulse));
    let g = gaussian(0.0, 0.0, 0.6);
    ensure!((g - 0.442097).abs() <= 1e-6, "G(0,0,0.6) = {g}");
    Ok(format!("{instances} maps match loop oracles (max diff {worst:.1e}); impulse {golden:.6}, G(0,0,0.6) {g:.6}"))
}

pub fn config_wiring() -> Outcome {
    let cfg = Config::default();
    let w = cfg.score.weights;
    let c = cfg.score.contrast;
    let got = [w.alpha, w.beta, w.gamma, c.sigma, c.k_sigma, cfg.train.epsilon, cfg.train.lr, cfg.train.weight_decay];
    let want = [1.0, -0.025, 400.0, 0.6, 1.2, 25.0, 0.005, 1e-4];
    ensure!(got == want, "defaults {got:?}, expected {want:?}");
    ensure!(cfg.model.prototypes == 10 && cfg.model.window == 3, "K={} p={}", cfg.model.prototypes, cfg.model.window);
    ensure!(cfg.train.batch_size == 16, "batch {}", cfg.train.batch_size);
    let text = "[score.weights]\nalpha = 1.0\nbeta = -0.025\ngamma = 400.0\n";
    let loaded = Config::from_toml_str(text, Preset::PaperShape).map_err(|e| e.to_string())?;
    ensure!(loaded.score.weights == ScoreWeights::default(), "TOML-loaded weights {:?}", loaded.score.weights);

    let mut rng = rng::indexed(7, streams::TESTS, 0);
    for _ in 0..50 {
        let v: Vec<f64> = (0..64).map(|_| rng.random_range(0.0..1.0)).collect();
        let d: Vec<f64> = (0..64).map(|_| rng.random_range(0.0..2.0)).collect();
        let map = AnomalyMap::new(8, 8, v).unwrap();
        let dm = DistanceMap { h: 8, w: 8, values: d };
        let b = image_scores(&map, &dm, &w, &c).map_err(|e| e.to_string())?;
        let expect = b.s_org + w.alpha * b.s_pdist + w.beta * b.s_concen + w.gamma * b.s_contra;
        ensure!(b.s_total == expect, "S_total {} != {}", b.s_total, expect);
        ensure!(b.s_org == map.max(), "S_org is not the map maximum");
    }
    Ok("defaults alpha 1, beta -0.025, gamma 400, sigma 0.6, k*sigma 1.2, K 10, p 3, eps 25, lr 0.005, decay 1e-4, batch 16; recombination exact".into())
}
