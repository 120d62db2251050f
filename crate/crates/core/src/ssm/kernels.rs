//! Selective-scan kernels.
//!
//! Layouts: `x: [L,D]`, `c: [L,N]`, discretized `a_bar, b_bar: [L,D,N]`,
//! `d_skip: [D]`. The recurrence is
//! `h_t = a_bar_t * h_{t-1} + b_bar_t * x_t`, `y_t = c_t . h_t + d_skip * x_t`
//! with `h_0 = 0`, applied independently per `(d, n)` state channel.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::real::Real;

/// Zero-order-hold decay with Euler input matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct Discretized<T> {
    pub a_bar: Vec<T>,
    pub b_bar: Vec<T>,
    pub len: usize,
    pub dim: usize,
    pub state: usize,
}

impl<T: Real> Discretized<T> {
    pub fn new(a_bar: Vec<T>, b_bar: Vec<T>, len: usize, dim: usize, state: usize) -> Result<Self> {
        let n = len * dim * state;
        if a_bar.len() != n || b_bar.len() != n {
            return Err(Error::shape(
                "discretize",
                format!("expected {n} = {len}x{dim}x{state}, got {} and {}", a_bar.len(), b_bar.len()),
            ));
        }
        Ok(Self { a_bar, b_bar, len, dim, state })
    }
}

/// `a_bar = exp(delta * a)`, `b_bar = delta * b` for `a: [D,N]`,
/// `b: [L,N]`, `delta: [L,D]`.
pub fn discretize<T: Real>(a: &[T], b: &[T], delta: &[T], len: usize, dim: usize, state: usize) -> Result<Discretized<T>> {
    if a.len() != dim * state || b.len() != len * state || delta.len() != len * dim {
        return Err(Error::shape(
            "discretize",
            format!("a {} b {} delta {} for L={len} D={dim} N={state}", a.len(), b.len(), delta.len()),
        ));
    }
    if !a.iter().chain(b).chain(delta).all(|v| v.is_finite()) {
        return Err(Error::NonFinite("discretize inputs".into()));
    }
    let mut a_bar = Vec::with_capacity(len * dim * state);
    let mut b_bar = Vec::with_capacity(len * dim * state);
    for t in 0..len {
        for d in 0..dim {
            let dt = delta[t * dim + d];
            for n in 0..state {
                a_bar.push((dt * a[d * state + n]).exp());
                b_bar.push(dt * b[t * state + n]);
            }
        }
    }
    Discretized::new(a_bar, b_bar, len, dim, state)
}

fn check_scan<T: Real>(disc: &Discretized<T>, c: &[T], x: &[T], d_skip: &[T]) -> Result<()> {
    let (l, d, n) = (disc.len, disc.dim, disc.state);
    if c.len() != l * n || x.len() != l * d || d_skip.len() != d {
        return Err(Error::shape(
            "selective-scan",
            format!("C {} x {} D_skip {} for L={l} D={d} N={n}", c.len(), x.len(), d_skip.len()),
        ));
    }
    Ok(())
}

/// Reference recurrence, one step at a time.
pub fn selective_scan_sequential<T: Real>(disc: &Discretized<T>, c: &[T], x: &[T], d_skip: &[T]) -> Result<Vec<T>> {
    check_scan(disc, c, x, d_skip)?;
    let (l, dim, n) = (disc.len, disc.dim, disc.state);
    let mut h = vec![T::zero(); dim * n];
    let mut y = vec![T::zero(); l * dim];
    for t in 0..l {
        for d in 0..dim {
            let xv = x[t * dim + d];
            let mut acc = d_skip[d] * xv;
            for s in 0..n {
                let i = (t * dim + d) * n + s;
                let hs = &mut h[d * n + s];
                *hs = disc.a_bar[i] * *hs + disc.b_bar[i] * xv;
                acc = acc + c[t * n + s] * *hs;
            }
            y[t * dim + d] = acc;
        }
    }
    Ok(y)
}

/// `(a1,b1) . (a2,b2) = (a1 a2, a2 b1 + b2)`: apply the first step, then the second.
#[inline]
fn combine<T: Real>(first: (T, T), second: (T, T)) -> (T, T) {
    (first.0 * second.0, second.0 * first.1 + second.1)
}

/// In-place inclusive Brent-Kung scan: `2 log2(L)` levels, `O(L)` combines.
pub fn associative_scan<T: Real>(e: &mut [(T, T)]) {
    associative_scan_lanes(e, 1);
}

/// [`associative_scan`] over rows of `lanes` independent channels stored
/// contiguously, so every level streams whole rows.
pub fn associative_scan_lanes<T: Real>(e: &mut [(T, T)], lanes: usize) {
    let n = e.len() / lanes.max(1);
    if n < 2 {
        return;
    }
    let step = |e: &mut [(T, T)], i: usize, stride: usize| {
        let (head, tail) = e.split_at_mut(i * lanes);
        let src = &head[(i - stride) * lanes..(i - stride + 1) * lanes];
        for (dst, &first) in tail[..lanes].iter_mut().zip(src) {
            *dst = combine(first, *dst);
        }
    };
    let mut stride = 1;
    while stride < n {
        let mut i = 2 * stride - 1;
        while i < n {
            step(e, i, stride);
            i += 2 * stride;
        }
        stride *= 2;
    }
    stride /= 2;
    while stride >= 1 {
        let mut i = 3 * stride - 1;
        while i < n {
            step(e, i, stride);
            i += 2 * stride;
        }
        stride /= 2;
    }
}

/// Same result as [`selective_scan_sequential`] via an associative prefix
/// scan over time; channel groups run in parallel.
pub fn selective_scan_parallel<T: Real>(disc: &Discretized<T>, c: &[T], x: &[T], d_skip: &[T]) -> Result<Vec<T>> {
    check_scan(disc, c, x, d_skip)?;
    let (l, dim, n) = (disc.len, disc.dim, disc.state);
    // per channel d: prefix states h_t as [L, N]
    let states: Vec<Vec<T>> = (0..dim)
        .into_par_iter()
        .map(|d| {
            let mut e: Vec<(T, T)> = Vec::with_capacity(l * n);
            for t in 0..l {
                let row = (t * dim + d) * n;
                let xv = x[t * dim + d];
                e.extend((row..row + n).map(|i| (disc.a_bar[i], disc.b_bar[i] * xv)));
            }
            associative_scan_lanes(&mut e, n);
            e.into_iter().map(|(_, h)| h).collect()
        })
        .collect();
    let mut y = vec![T::zero(); l * dim];
    for t in 0..l {
        for d in 0..dim {
            let h = &states[d][t * n..(t + 1) * n];
            let mut acc = d_skip[d] * x[t * dim + d];
            for s in 0..n {
                acc = acc + c[t * n + s] * h[s];
            }
            y[t * dim + d] = acc;
        }
    }
    Ok(y)
}

/// Forward pass of the fused, differentiable scan. Returns `y: [L,D]` and
/// all states `[L,D,N]` for the backward pass.
#[allow(clippy::too_many_arguments)]
pub fn fused_scan_forward<T: Real>(
    u: &[T],
    delta: &[T],
    a: &[T],
    b: &[T],
    c: &[T],
    d_skip: &[T],
    l: usize,
    dim: usize,
    n: usize,
) -> (Vec<T>, Vec<T>) {
    let mut states = vec![T::zero(); l * dim * n];
    let mut y = vec![T::zero(); l * dim];
    for t in 0..l {
        for d in 0..dim {
            let uv = u[t * dim + d];
            let dt = delta[t * dim + d];
            let mut acc = d_skip[d] * uv;
            for s in 0..n {
                let prev = if t == 0 { T::zero() } else { states[((t - 1) * dim + d) * n + s] };
                let h = (dt * a[d * n + s]).exp() * prev + dt * b[t * n + s] * uv;
                states[(t * dim + d) * n + s] = h;
                acc = acc + c[t * n + s] * h;
            }
            y[t * dim + d] = acc;
        }
    }
    (y, states)
}

pub struct ScanGrads<T> {
    pub du: Vec<T>,
    pub ddelta: Vec<T>,
    pub da: Vec<T>,
    pub db: Vec<T>,
    pub dc: Vec<T>,
    pub dd: Vec<T>,
}

#[allow(clippy::too_many_arguments)]
pub fn fused_scan_backward<T: Real>(
    u: &[T],
    delta: &[T],
    a: &[T],
    b: &[T],
    c: &[T],
    d_skip: &[T],
    states: &[T],
    dy: &[T],
    l: usize,
    dim: usize,
    n: usize,
) -> ScanGrads<T> {
    let mut g = ScanGrads {
        du: vec![T::zero(); l * dim],
        ddelta: vec![T::zero(); l * dim],
        da: vec![T::zero(); dim * n],
        db: vec![T::zero(); l * n],
        dc: vec![T::zero(); l * n],
        dd: vec![T::zero(); dim],
    };
    // dh carried from step t+1: a_bar_{t+1} * dh_{t+1}
    let mut carry = vec![T::zero(); dim * n];
    for t in (0..l).rev() {
        for d in 0..dim {
            let i = t * dim + d;
            let (uv, dt, gy) = (u[i], delta[i], dy[i]);
            g.du[i] = g.du[i] + gy * d_skip[d];
            g.dd[d] = g.dd[d] + gy * uv;
            for s in 0..n {
                let si = i * n + s;
                let h = states[si];
                let prev = if t == 0 { T::zero() } else { states[si - dim * n] };
                let av = a[d * n + s];
                let abar = (dt * av).exp();
                let bv = b[t * n + s];
                g.dc[t * n + s] = g.dc[t * n + s] + gy * h;
                let dh = gy * c[t * n + s] + carry[d * n + s];
                let dabar = dh * prev;
                g.ddelta[i] = g.ddelta[i] + dabar * abar * av + dh * bv * uv;
                g.da[d * n + s] = g.da[d * n + s] + dabar * abar * dt;
                g.db[t * n + s] = g.db[t * n + s] + dh * dt * uv;
                g.du[i] = g.du[i] + dh * dt * bv;
                carry[d * n + s] = dh * abar;
            }
        }
    }
    g
}
