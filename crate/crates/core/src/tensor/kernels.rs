//! Slice-level numeric kernels shared by the tape primitives and the
//! gradient-free scoring path.

use crate::real::Real;

pub fn sigmoid<T: Real>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

pub fn silu<T: Real>(x: T) -> T {
    x * sigmoid(x)
}

pub fn silu_grad<T: Real>(x: T) -> T {
    let s = sigmoid(x);
    s * (T::one() + x * (T::one() - s))
}

pub fn softplus<T: Real>(x: T) -> T {
    if x > T::c(20.0) {
        x
    } else {
        x.exp().ln_1p()
    }
}

/// `[m,k] x [k,n] -> [m,n]`.
pub fn matmul<T: Real>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    let mut out = vec![T::zero(); m * n];
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == T::zero() {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o = *o + av * bv;
            }
        }
    }
    out
}

/// `out = a^T b` for `a: [m,k]`, `b: [m,n]` giving `[k,n]`.
pub fn matmul_tn<T: Real>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    let mut out = vec![T::zero(); k * n];
    for i in 0..m {
        let brow = &b[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == T::zero() {
                continue;
            }
            let row = &mut out[p * n..(p + 1) * n];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o = *o + av * bv;
            }
        }
    }
    out
}

/// `out = a b^T` for `a: [m,n]`, `b: [k,n]` giving `[m,k]`.
pub fn matmul_nt<T: Real>(a: &[T], b: &[T], m: usize, n: usize, k: usize) -> Vec<T> {
    let mut out = vec![T::zero(); m * k];
    for i in 0..m {
        let arow = &a[i * n..(i + 1) * n];
        for p in 0..k {
            let brow = &b[p * n..(p + 1) * n];
            out[i * k + p] = arow.iter().zip(brow).map(|(&x, &y)| x * y).sum();
        }
    }
    out
}

pub fn transpose<T: Real>(x: &[T], rows: usize, cols: usize) -> Vec<T> {
    let mut out = vec![T::zero(); x.len()];
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = x[r * cols + c];
        }
    }
    out
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Conv2dGeom {
    pub c_in: usize,
    pub h: usize,
    pub w: usize,
    pub c_out: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
}

impl Conv2dGeom {
    pub fn out_h(&self) -> usize {
        (self.h + 2 * self.pad - self.k) / self.stride + 1
    }

    pub fn out_w(&self) -> usize {
        (self.w + 2 * self.pad - self.k) / self.stride + 1
    }

    /// Output indices `o` in `[lo, hi)` with `o*stride + tap - pad` inside `[0, len)`.
    fn valid(&self, tap: usize, len: usize, out_len: usize) -> (usize, usize) {
        let s = self.stride as isize;
        let off = tap as isize - self.pad as isize;
        // o*s + off >= 0  and  o*s + off <= len-1
        let lo = if off >= 0 { 0 } else { ((-off) + s - 1) / s };
        let hi = ((len as isize - 1 - off).div_euclid(s) + 1).clamp(0, out_len as isize);
        (lo as usize, (hi as usize).max(lo as usize))
    }
}

#[allow(clippy::needless_range_loop)]
pub fn conv2d<T: Real>(x: &[T], w: &[T], b: Option<&[T]>, g: &Conv2dGeom) -> Vec<T> {
    let (oh, ow) = (g.out_h(), g.out_w());
    let mut out = vec![T::zero(); g.c_out * oh * ow];
    for co in 0..g.c_out {
        let plane = &mut out[co * oh * ow..(co + 1) * oh * ow];
        if let Some(b) = b {
            plane.iter_mut().for_each(|v| *v = b[co]);
        }
        for ci in 0..g.c_in {
            let xin = &x[ci * g.h * g.w..(ci + 1) * g.h * g.w];
            for ky in 0..g.k {
                let (oy0, oy1) = g.valid(ky, g.h, oh);
                for kx in 0..g.k {
                    let wv = w[((co * g.c_in + ci) * g.k + ky) * g.k + kx];
                    if wv == T::zero() {
                        continue;
                    }
                    let (ox0, ox1) = g.valid(kx, g.w, ow);
                    for oy in oy0..oy1 {
                        let iy = oy * g.stride + ky - g.pad;
                        let xrow = &xin[iy * g.w..(iy + 1) * g.w];
                        let orow = &mut plane[oy * ow..(oy + 1) * ow];
                        for ox in ox0..ox1 {
                            let ix = ox * g.stride + kx - g.pad;
                            orow[ox] = orow[ox] + wv * xrow[ix];
                        }
                    }
                }
            }
        }
    }
    out
}

/// Returns `(dx, dw, db)` given upstream `dy`.
#[allow(clippy::needless_range_loop)]
pub fn conv2d_backward<T: Real>(
    x: &[T],
    w: &[T],
    dy: &[T],
    g: &Conv2dGeom,
    want_dx: bool,
    want_dw: bool,
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let (oh, ow) = (g.out_h(), g.out_w());
    let mut dx = if want_dx { vec![T::zero(); x.len()] } else { Vec::new() };
    let mut dw = if want_dw { vec![T::zero(); w.len()] } else { Vec::new() };
    let mut db = vec![T::zero(); g.c_out];
    for co in 0..g.c_out {
        let gplane = &dy[co * oh * ow..(co + 1) * oh * ow];
        db[co] = gplane.iter().copied().sum();
        for ci in 0..g.c_in {
            let xin = &x[ci * g.h * g.w..(ci + 1) * g.h * g.w];
            for ky in 0..g.k {
                let (oy0, oy1) = g.valid(ky, g.h, oh);
                for kx in 0..g.k {
                    let widx = ((co * g.c_in + ci) * g.k + ky) * g.k + kx;
                    let wv = w[widx];
                    let (ox0, ox1) = g.valid(kx, g.w, ow);
                    let mut acc = T::zero();
                    for oy in oy0..oy1 {
                        let iy = oy * g.stride + ky - g.pad;
                        let grow = &gplane[oy * ow..(oy + 1) * ow];
                        for ox in ox0..ox1 {
                            let ix = ox * g.stride + kx - g.pad;
                            let gv = grow[ox];
                            if want_dw {
                                acc = acc + gv * xin[iy * g.w + ix];
                            }
                            if want_dx {
                                let i = ci * g.h * g.w + iy * g.w + ix;
                                dx[i] = dx[i] + gv * wv;
                            }
                        }
                    }
                    if want_dw {
                        dw[widx] = acc;
                    }
                }
            }
        }
    }
    (dx, dw, db)
}

/// Causal depthwise conv over time: `x: [L,D]`, `w: [D,k]`, `b: [D]`.
pub fn dwconv1d<T: Real>(x: &[T], w: &[T], b: &[T], len: usize, d: usize, k: usize) -> Vec<T> {
    let mut out = vec![T::zero(); len * d];
    for t in 0..len {
        for c in 0..d {
            let mut acc = b[c];
            for j in 0..k {
                let src = t as isize - (k - 1 - j) as isize;
                if src >= 0 {
                    acc = acc + w[c * k + j] * x[src as usize * d + c];
                }
            }
            out[t * d + c] = acc;
        }
    }
    out
}

pub fn dwconv1d_backward<T: Real>(
    x: &[T],
    w: &[T],
    dy: &[T],
    len: usize,
    d: usize,
    k: usize,
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let mut dx = vec![T::zero(); x.len()];
    let mut dw = vec![T::zero(); w.len()];
    let mut db = vec![T::zero(); d];
    for t in 0..len {
        for c in 0..d {
            let g = dy[t * d + c];
            db[c] = db[c] + g;
            for j in 0..k {
                let src = t as isize - (k - 1 - j) as isize;
                if src >= 0 {
                    let s = src as usize * d + c;
                    dw[c * k + j] = dw[c * k + j] + g * x[s];
                    dx[s] = dx[s] + g * w[c * k + j];
                }
            }
        }
    }
    (dx, dw, db)
}

/// Cosine similarity with the zero-vector convention `cos(0, v) = 0`.
pub fn cosine<T: Real>(a: &[T], b: &[T]) -> T {
    let (dot, na, nb) = dot_norms(a, b);
    if na == T::zero() || nb == T::zero() {
        T::zero()
    } else {
        dot / (na * nb)
    }
}

fn dot_norms<T: Real>(a: &[T], b: &[T]) -> (T, T, T) {
    let mut dot = T::zero();
    let mut aa = T::zero();
    let mut bb = T::zero();
    for (&x, &y) in a.iter().zip(b) {
        dot = dot + x * y;
        aa = aa + x * x;
        bb = bb + y * y;
    }
    (dot, aa.sqrt(), bb.sqrt())
}

/// Accumulates `scale * d cos(a,b)/da` into `da` and `scale * d cos/db` into `db`.
pub fn cosine_backward<T: Real>(a: &[T], b: &[T], scale: T, da: Option<&mut [T]>, db: Option<&mut [T]>) {
    let (dot, na, nb) = dot_norms(a, b);
    if na == T::zero() || nb == T::zero() {
        return;
    }
    let inv = T::one() / (na * nb);
    let cos = dot * inv;
    if let Some(da) = da {
        let ca = cos / (na * na);
        for i in 0..a.len() {
            da[i] = da[i] + scale * (b[i] * inv - ca * a[i]);
        }
    }
    if let Some(db) = db {
        let cb = cos / (nb * nb);
        for i in 0..b.len() {
            db[i] = db[i] + scale * (a[i] * inv - cb * b[i]);
        }
    }
}

/// Source taps for half-pixel bilinear resampling of one axis:
/// `(i0, i1, weight_of_i1)` per output index, edges clamped.
pub fn bilinear_taps(in_len: usize, out_len: usize) -> Vec<(usize, usize, f64)> {
    let scale = in_len as f64 / out_len as f64;
    (0..out_len)
        .map(|o| {
            let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(in_len - 1);
            let i1 = (i0 + 1).min(in_len - 1);
            let t = if i1 == i0 { 0.0 } else { src - i0 as f64 };
            (i0, i1, t)
        })
        .collect()
}

/// Bilinear resize of `[c,h,w]` planes to `[c,oh,ow]`.
pub fn bilinear<T: Real>(x: &[T], c: usize, h: usize, w: usize, oh: usize, ow: usize) -> Vec<T> {
    let ry = bilinear_taps(h, oh);
    let rx = bilinear_taps(w, ow);
    let mut out = vec![T::zero(); c * oh * ow];
    for ch in 0..c {
        let src = &x[ch * h * w..(ch + 1) * h * w];
        for (oy, &(y0, y1, ty)) in ry.iter().enumerate() {
            let ty = T::c(ty);
            for (ox, &(x0, x1, tx)) in rx.iter().enumerate() {
                let tx = T::c(tx);
                let top = src[y0 * w + x0] * (T::one() - tx) + src[y0 * w + x1] * tx;
                let bot = src[y1 * w + x0] * (T::one() - tx) + src[y1 * w + x1] * tx;
                out[(ch * oh + oy) * ow + ox] = top * (T::one() - ty) + bot * ty;
            }
        }
    }
    out
}

pub fn bilinear_backward<T: Real>(dy: &[T], c: usize, h: usize, w: usize, oh: usize, ow: usize) -> Vec<T> {
    let ry = bilinear_taps(h, oh);
    let rx = bilinear_taps(w, ow);
    let mut dx = vec![T::zero(); c * h * w];
    for ch in 0..c {
        let base = ch * h * w;
        for (oy, &(y0, y1, ty)) in ry.iter().enumerate() {
            let ty = T::c(ty);
            for (ox, &(x0, x1, tx)) in rx.iter().enumerate() {
                let tx = T::c(tx);
                let g = dy[(ch * oh + oy) * ow + ox];
                let gt = g * (T::one() - ty);
                let gb = g * ty;
                dx[base + y0 * w + x0] = dx[base + y0 * w + x0] + gt * (T::one() - tx);
                dx[base + y0 * w + x1] = dx[base + y0 * w + x1] + gt * tx;
                dx[base + y1 * w + x0] = dx[base + y1 * w + x0] + gb * (T::one() - tx);
                dx[base + y1 * w + x1] = dx[base + y1 * w + x1] + gb * tx;
            }
        }
    }
    dx
}

/// Mirror index as in numpy's `reflect` mode (edge sample not repeated).
pub fn reflect(i: isize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n as isize - 1);
    let m = i.rem_euclid(period);
    (if m < n as isize { m } else { period - m }) as usize
}
