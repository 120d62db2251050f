use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{grid_to_seq, seq_to_grid, Bound, Conv2d, Init, Linear, ParamId, ParamStore};
use crate::real::Real;
use crate::rng::Rng;
use crate::scan_orders::{scan_order, ScanDirection};
use crate::tensor::{Tape, Tensor, Var};
use rand::Rng as _;

/// Hyper-parameters of one SPSS block.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpssBlockConfig {
    pub channels: usize,
    pub expansion: usize,
    pub conv_kernel: usize,
    pub state_dim: usize,
    pub dt_rank: usize,
    /// Indices into [`ScanDirection::all`].
    pub directions: Vec<usize>,
}

impl SpssBlockConfig {
    pub fn inner(&self) -> usize {
        self.channels * self.expansion
    }

    pub fn validate(&self) -> Result<()> {
        if self.directions.is_empty() {
            return Err(Error::Config("SPSS direction set must be non-empty".into()));
        }
        if self.directions.iter().any(|&d| d >= 8) {
            return Err(Error::Config(format!("direction index out of range: {:?}", self.directions)));
        }
        if self.channels == 0 || self.expansion == 0 || self.conv_kernel == 0 || self.state_dim == 0 || self.dt_rank == 0 {
            return Err(Error::Config(format!("SPSS sizes must be positive: {self:?}")));
        }
        Ok(())
    }
}

/// Per-direction selective-scan parameters.
#[derive(Clone, Debug)]
struct DirectionBranch {
    direction: ScanDirection,
    conv_w: ParamId,
    conv_b: ParamId,
    x_dt: Linear,
    x_b: Linear,
    x_c: Linear,
    dt: Linear,
    a_log: ParamId,
    d_skip: ParamId,
}

/// Spatial-perception state-space block: a scan branch over the
/// Circular-Hilbert orders plus a local convolution branch, merged with the
/// residual and layer-normalized.
///
/// Input and output projections and the gate are position-wise, so they are
/// shared by all directions and applied once before the gather / after the
/// scatter; the depthwise conv, the `x -> (dt, B, C)` projections and the
/// SSM parameters are per direction.
#[derive(Clone, Debug)]
pub struct SpssBlock {
    cfg: SpssBlockConfig,
    in_x: Linear,
    in_z: Linear,
    branches: Vec<DirectionBranch>,
    out: Linear,
    conv1: Conv2d,
    conv2: Conv2d,
    ln_gamma: ParamId,
    ln_beta: ParamId,
}

pub const LAYER_NORM_EPS: f64 = 1e-5;

impl SpssBlock {
    pub fn new<T: Real>(store: &mut ParamStore<T>, name: &str, cfg: SpssBlockConfig, rng: &mut Rng) -> Result<Self> {
        cfg.validate()?;
        let (c, di, n, r) = (cfg.channels, cfg.inner(), cfg.state_dim, cfg.dt_rank);
        let in_x = Linear::new(store, &format!("{name}.in_x"), c, di, false, rng);
        let in_z = Linear::new(store, &format!("{name}.in_z"), c, di, false, rng);
        let mut branches = Vec::with_capacity(cfg.directions.len());
        for &di_idx in &cfg.directions {
            let direction = ScanDirection::from_index(di_idx).expect("validated");
            let p = format!("{name}.dir{di_idx}");
            let conv_w = store.add(
                format!("{p}.conv.weight"),
                Init::Uniform { fan_in: cfg.conv_kernel }.tensor(&[di, cfg.conv_kernel], rng),
                true,
            );
            let conv_b = store.add(format!("{p}.conv.bias"), Tensor::zeros([di]), true);
            let x_dt = Linear::new(store, &format!("{p}.x_dt"), di, r, false, rng);
            let x_b = Linear::new(store, &format!("{p}.x_b"), di, n, false, rng);
            let x_c = Linear::new(store, &format!("{p}.x_c"), di, n, false, rng);
            let dt = Linear::new(store, &format!("{p}.dt"), r, di, true, rng);
            // dt bias: inverse softplus of a log-uniform step in [1e-3, 1e-1]
            let bias: Vec<f64> = (0..di)
                .map(|_| {
                    let step = (rng.random_range(0.001f64.ln()..0.1f64.ln())).exp();
                    step + (-(-step).exp_m1()).ln()
                })
                .collect();
            *store.get_mut(dt.b.unwrap()) = Tensor::from_f64([di], &bias)?;
            let a: Vec<f64> = (0..di * n).map(|i| ((i % n) as f64 + 1.0).ln()).collect();
            let a_log = store.add(format!("{p}.a_log"), Tensor::from_f64([di, n], &a)?, true);
            let d_skip = store.add(format!("{p}.d_skip"), Tensor::full([di], T::one()), true);
            branches.push(DirectionBranch { direction, conv_w, conv_b, x_dt, x_b, x_c, dt, a_log, d_skip });
        }
        let out = Linear::new(store, &format!("{name}.out"), di, c, false, rng);
        let conv1 = Conv2d::new(store, &format!("{name}.local1"), c, c, 3, 1, 1, true, false, rng);
        let conv2 = Conv2d::new(store, &format!("{name}.local2"), c, c, 3, 1, 1, true, false, rng);
        let ln_gamma = store.add(format!("{name}.ln.gamma"), Tensor::full([c], T::one()), true);
        let ln_beta = store.add(format!("{name}.ln.beta"), Tensor::zeros([c]), true);
        Ok(Self { cfg, in_x, in_z, branches, out, conv1, conv2, ln_gamma, ln_beta })
    }

    pub fn config(&self) -> &SpssBlockConfig {
        &self.cfg
    }

    /// Names of every projection weight (scan and local branch), used by tests
    /// that silence both branches.
    pub fn projection_params(&self) -> Vec<ParamId> {
        let mut v = vec![self.in_x.w, self.in_z.w, self.out.w, self.conv1.w, self.conv2.w];
        v.extend(self.conv1.b);
        v.extend(self.conv2.b);
        v
    }

    /// `[C,h,w] -> [C,h,w]`.
    pub fn forward<T: Real>(&self, tape: &mut Tape<T>, p: &Bound, x: Var) -> Result<Var> {
        let (c, h, w) = match *tape.shape(x) {
            [c, h, w] => (c, h, w),
            ref s => return Err(Error::shape("spss-block", format!("{s:?}"))),
        };
        if c != self.cfg.channels {
            return Err(Error::shape("spss-block", format!("{c} channels, block expects {}", self.cfg.channels)));
        }
        let seq = grid_to_seq(tape, x)?;
        let xin = self.in_x.forward(tape, p, seq)?;
        let z = self.in_z.forward(tape, p, seq)?;

        let mut merged: Option<Var> = None;
        for br in &self.branches {
            let order = scan_order(h, w, br.direction)?;
            let xs = tape.gather_rows(xin, order.order().clone())?;
            let xc = tape.dwconv1d(xs, p.var(br.conv_w), p.var(br.conv_b))?;
            let xc = tape.silu(xc);
            let dt_low = br.x_dt.forward(tape, p, xc)?;
            let bm = br.x_b.forward(tape, p, xc)?;
            let cm = br.x_c.forward(tape, p, xc)?;
            let dt = br.dt.forward(tape, p, dt_low)?;
            let delta = tape.softplus(dt);
            let a_mag = tape.exp(p.var(br.a_log));
            let a = tape.scale(a_mag, -T::one());
            let y = tape.selective_scan(xc, delta, a, bm, cm, p.var(br.d_skip))?;
            let y = tape.scatter_rows(y, order.order().clone())?;
            merged = Some(match merged {
                None => y,
                Some(m) => tape.add(m, y)?,
            });
        }
        let y = tape.scale(merged.expect("non-empty direction set"), T::c(1.0 / self.branches.len() as f64));
        let gate = tape.silu(z);
        let gated = tape.mul(y, gate)?;
        let scan_out = self.out.forward(tape, p, gated)?;

        let l1 = self.conv1.forward(tape, p, x)?;
        let l1 = tape.silu(l1);
        let l2 = self.conv2.forward(tape, p, l1)?;
        let local = grid_to_seq(tape, l2)?;

        let sum = tape.add(seq, scan_out)?;
        let sum = tape.add(sum, local)?;
        let normed = tape.layer_norm(sum, p.var(self.ln_gamma), p.var(self.ln_beta), LAYER_NORM_EPS)?;
        seq_to_grid(tape, normed, h, w)
    }
}
