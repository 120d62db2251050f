use std::time::Instant;

use rand::Rng as _;

use super::kernels::{selective_scan_parallel, Discretized};
use crate::error::{Error, Result};
use crate::rng::{self, streams};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BenchRow {
    pub len: usize,
    pub median_ns: u128,
}

/// Channel width and state size of the timed scan.
pub const BENCH_DIM: usize = 16;
pub const BENCH_STATE: usize = 16;

/// Median wall-clock time of [`selective_scan_parallel`] per sequence length.
pub fn scan_runtime_benchmark(lengths: &[usize], repetitions: usize) -> Result<Vec<BenchRow>> {
    if lengths.windows(2).any(|w| w[0] > w[1]) {
        return Err(Error::InvalidArgument(format!("lengths must be ascending: {lengths:?}")));
    }
    let reps = repetitions.max(10);
    let (dim, state) = (BENCH_DIM, BENCH_STATE);
    let mut rng = rng::stream(0, streams::TESTS);
    let mut rows = Vec::with_capacity(lengths.len());
    for &len in lengths {
        let n = len * dim * state;
        let a_bar: Vec<f32> = (0..n).map(|_| rng.random_range(0.5..1.0)).collect();
        let b_bar: Vec<f32> = (0..n).map(|_| rng.random_range(-0.1..0.1)).collect();
        let c: Vec<f32> = (0..len * state).map(|_| rng.random_range(-1.0..1.0)).collect();
        let x: Vec<f32> = (0..len * dim).map(|_| rng.random_range(-1.0..1.0)).collect();
        let d_skip = vec![1.0f32; dim];
        let disc = Discretized::new(a_bar, b_bar, len, dim, state)?;
        // warm-up
        std::hint::black_box(selective_scan_parallel(&disc, &c, &x, &d_skip)?);
        let mut times: Vec<u128> = (0..reps)
            .map(|_| {
                let t0 = Instant::now();
                let y = selective_scan_parallel(&disc, &c, &x, &d_skip);
                std::hint::black_box(y.ok());
                t0.elapsed().as_nanos()
            })
            .collect();
        times.sort_unstable();
        rows.push(BenchRow { len, median_ns: times[times.len() / 2] });
    }
    Ok(rows)
}

/// `L,median_ns` CSV with header.
pub fn to_csv(rows: &[BenchRow]) -> String {
    let mut s = String::from("L,median_ns\n");
    for r in rows {
        s.push_str(&format!("{},{}\n", r.len, r.median_ns));
    }
    s
}
