//! Independent reference implementations used by the integration tests.

/// Exhaustive windowed distance: every prototype patch against every feature
/// patch with Chebyshev offset at most `p / 2`.
pub fn window_distance_brute<T: protoscan_core::Real>(bank: &[T], feat: &[T], k: usize, gh: usize, gw: usize, c: usize, p: usize) -> Vec<T> {
    let half = (p / 2) as isize;
    let g = gh * gw;
    let cos = |a: &[T], b: &[T]| {
        let (mut d, mut na, mut nb) = (T::zero(), T::zero(), T::zero());
        for i in 0..a.len() {
            d = d + a[i] * b[i];
            na = na + a[i] * a[i];
            nb = nb + b[i] * b[i];
        }
        let (na, nb) = (na.sqrt(), nb.sqrt());
        if na == T::zero() || nb == T::zero() {
            T::zero()
        } else {
            d / (na * nb)
        }
    };
    let mut out = Vec::with_capacity(g);
    for r in 0..gh as isize {
        for cc in 0..gw as isize {
            let pos = (r * gw as isize + cc) as usize;
            let mut best = T::neg_infinity();
            for i in 0..gh as isize {
                for j in 0..gw as isize {
                    if (i - r).abs() > half || (j - cc).abs() > half {
                        continue;
                    }
                    let w = (i * gw as isize + j) as usize;
                    for kk in 0..k {
                        let s = cos(&bank[(kk * g + pos) * c..(kk * g + pos + 1) * c], &feat[w * c..(w + 1) * c]);
                        if s > best {
                            best = s;
                        }
                    }
                }
            }
            let d = T::one() - best;
            out.push(if d < T::zero() { T::zero() } else if d > T::c(2.0) { T::c(2.0) } else { d });
        }
    }
    out
}

/// Concentration score by direct definition, finding the first maximum itself.
pub fn s_concen_loops(e: &[f64], h: usize, w: usize) -> f64 {
    let mut best = (0, 0);
    for i in 0..h {
        for j in 0..w {
            if e[i * w + j] > e[best.0 * w + best.1] {
                best = (i, j);
            }
        }
    }
    let m = e[best.0 * w + best.1];
    let mut acc = 0.0;
    for i in 0..h {
        for j in 0..w {
            let dy = i as f64 - best.0 as f64;
            let dx = j as f64 - best.1 as f64;
            acc += (e[i * w + j] - m) * (e[i * w + j] - m) * (dy * dy + dx * dx).sqrt();
        }
    }
    acc / (h * w) as f64
}

fn mirror(mut i: isize, n: usize) -> usize {
    let n = n as isize;
    if n == 1 {
        return 0;
    }
    loop {
        if i < 0 {
            i = -i;
        } else if i >= n {
            i = 2 * (n - 1) - i;
        } else {
            return i as usize;
        }
    }
}

fn g2(x: f64, y: f64, s: f64) -> f64 {
    1.0 / (2.0 * std::f64::consts::PI * s * s) * (-(x * x + y * y) / (2.0 * s * s)).exp()
}

/// Mean absolute response of the zero-sum DoG with mirrored borders.
pub fn s_contra_loops(e: &[f64], h: usize, w: usize, sigma: f64, k_sigma: f64) -> f64 {
    let r = (3.0 * k_sigma).ceil() as isize;
    let side = (2 * r + 1) as usize;
    let mut kern = vec![0.0; side * side];
    for dy in -r..=r {
        for dx in -r..=r {
            kern[((dy + r) as usize) * side + (dx + r) as usize] = g2(dx as f64, dy as f64, k_sigma) - g2(dx as f64, dy as f64, sigma);
        }
    }
    let shift = kern.iter().sum::<f64>() / kern.len() as f64;
    let mut total = 0.0;
    for i in 0..h as isize {
        for j in 0..w as isize {
            let mut acc = 0.0;
            for dy in -r..=r {
                for dx in -r..=r {
                    let kv = kern[((dy + r) as usize) * side + (dx + r) as usize] - shift;
                    acc += kv * e[mirror(i + dy, h) * w + mirror(j + dx, w)];
                }
            }
            total += acc.abs();
        }
    }
    total / (h * w) as f64
}
