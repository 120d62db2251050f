//! Circular-Hilbert visit orders over square patch grids.
//!
//! A grid of side `s` is split into the centred `s/2 x s/2` block, visited
//! along a Hilbert curve, and the surrounding frame, visited ring by ring.
//! Eight direction variants come from the start corner, the ring rotation
//! and whether the scan runs outside-in or inside-out.

use std::collections::HashMap;
use std::fmt;
use std::sync::{Arc, Mutex, OnceLock};

use crate::error::{Error, Result};

/// Square grid whose half side is a power of two (side 4, 8, 16, ...).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ScanGrid {
    side: usize,
}

impl ScanGrid {
    pub fn new(h: usize, w: usize) -> Result<Self> {
        if h != w {
            return Err(Error::Grid { h, w, reason: "grid must be square (h' = w')" });
        }
        if h < 4 || !h.is_multiple_of(2) {
            return Err(Error::Grid { h, w, reason: "side must be an even integer >= 4" });
        }
        if !(h / 2).is_power_of_two() {
            return Err(Error::Grid { h, w, reason: "h'/2 must be a power of two" });
        }
        Ok(Self { side: h })
    }

    pub fn side(&self) -> usize {
        self.side
    }

    pub fn cells(&self) -> usize {
        self.side * self.side
    }

    /// Offset and side of the centred Hilbert block.
    pub fn center(&self) -> (usize, usize) {
        (self.side / 4, self.side / 2)
    }

    fn in_center(&self, r: usize, c: usize) -> bool {
        let (off, len) = self.center();
        (off..off + len).contains(&r) && (off..off + len).contains(&c)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum StartCorner {
    UpperLeft,
    UpperRight,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Rotation {
    Clockwise,
    CounterClockwise,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Progression {
    OuterToCenter,
    CenterToOuter,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ScanDirection {
    pub corner: StartCorner,
    pub rotation: Rotation,
    pub progression: Progression,
}

impl ScanDirection {
    /// All eight directions, indexed `0..8` by
    /// `corner * 4 + rotation * 2 + progression`.
    pub fn all() -> [ScanDirection; 8] {
        std::array::from_fn(|i| ScanDirection::from_index(i).unwrap())
    }

    pub fn from_index(i: usize) -> Option<Self> {
        if i >= 8 {
            return None;
        }
        Some(Self {
            corner: if i & 4 == 0 { StartCorner::UpperLeft } else { StartCorner::UpperRight },
            rotation: if i & 2 == 0 { Rotation::Clockwise } else { Rotation::CounterClockwise },
            progression: if i & 1 == 0 { Progression::OuterToCenter } else { Progression::CenterToOuter },
        })
    }

    pub fn index(&self) -> usize {
        let c = matches!(self.corner, StartCorner::UpperRight) as usize;
        let r = matches!(self.rotation, Rotation::CounterClockwise) as usize;
        let p = matches!(self.progression, Progression::CenterToOuter) as usize;
        c * 4 + r * 2 + p
    }

    /// Same corner and rotation, opposite progression.
    pub fn reversed(&self) -> Self {
        let progression = match self.progression {
            Progression::OuterToCenter => Progression::CenterToOuter,
            Progression::CenterToOuter => Progression::OuterToCenter,
        };
        Self { progression, ..*self }
    }
}

impl fmt::Display for ScanDirection {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let c = match self.corner {
            StartCorner::UpperLeft => "upper-left",
            StartCorner::UpperRight => "upper-right",
        };
        let r = match self.rotation {
            Rotation::Clockwise => "cw",
            Rotation::CounterClockwise => "ccw",
        };
        let p = match self.progression {
            Progression::OuterToCenter => "outer-to-center",
            Progression::CenterToOuter => "center-to-outer",
        };
        write!(f, "{c}/{r}/{p}")
    }
}

/// Square matrix of Hilbert visit indices `1..=4^n`, row-major.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct HilbertMatrix {
    side: usize,
    data: Vec<u64>,
}

impl HilbertMatrix {
    pub fn side(&self) -> usize {
        self.side
    }

    pub fn get(&self, r: usize, c: usize) -> u64 {
        self.data[r * self.side + c]
    }

    pub fn data(&self) -> &[u64] {
        &self.data
    }

    fn map(&self, f: impl Fn(usize, usize) -> u64) -> Self {
        let s = self.side;
        let data = (0..s * s).map(|i| f(i / s, i % s)).collect();
        Self { side: s, data }
    }

    fn transposed(&self) -> Self {
        self.map(|r, c| self.get(c, r))
    }

    fn flip_ud(&self) -> Self {
        self.map(|r, c| self.get(self.side - 1 - r, c))
    }

    fn flip_lr(&self) -> Self {
        self.map(|r, c| self.get(r, self.side - 1 - c))
    }

    /// Cell positions `(row, col)` in visit order.
    pub fn path(&self) -> Vec<(usize, usize)> {
        let mut path = vec![(0, 0); self.data.len()];
        for (i, &v) in self.data.iter().enumerate() {
            path[(v - 1) as usize] = (i / self.side, i % self.side);
        }
        path
    }
}

/// `n`-order Hilbert matrix built by quadrant recursion from
/// `H_1 = [[1,2],[4,3]]`.
///
/// With `q = 4^n` and `E` the all-ones block:
/// - `n` even: `[[H, qE + H^T], [(4q+1)E - H^ud, (3q+1)E - (H^lr)^T]]`
/// - `n` odd:  `[[H, (4q+1)E - H^lr], [qE + H^T, (3q+1)E - (H^T)^lr]]`
pub fn hilbert_matrix(n: u32) -> Result<HilbertMatrix> {
    if n < 1 {
        return Err(Error::InvalidArgument("Hilbert order must be >= 1".into()));
    }
    if n > 31 {
        return Err(Error::InvalidArgument(format!("Hilbert order {n} overflows index range")));
    }
    let mut h = HilbertMatrix { side: 2, data: vec![1, 2, 4, 3] };
    for k in 1..n {
        h = hilbert_step(&h, k);
    }
    Ok(h)
}

/// One recursion step from `H_k` to `H_{k+1}`.
fn hilbert_step(h: &HilbertMatrix, k: u32) -> HilbertMatrix {
    let q = 4u64.pow(k);
    let s = h.side;
    let t = h.transposed();
    let (tr, bl, br): (HilbertMatrix, HilbertMatrix, HilbertMatrix) = if k.is_multiple_of(2) {
        let ud = h.flip_ud();
        let lr_t = h.flip_lr().transposed();
        (t.map(|r, c| q + t.get(r, c)), ud.map(|r, c| 4 * q + 1 - ud.get(r, c)), lr_t.map(|r, c| 3 * q + 1 - lr_t.get(r, c)))
    } else {
        let lr = h.flip_lr();
        let t_lr = t.flip_lr();
        (lr.map(|r, c| 4 * q + 1 - lr.get(r, c)), t.map(|r, c| q + t.get(r, c)), t_lr.map(|r, c| 3 * q + 1 - t_lr.get(r, c)))
    };
    let side = 2 * s;
    let mut data = vec![0; side * side];
    for r in 0..s {
        for c in 0..s {
            data[r * side + c] = h.get(r, c);
            data[r * side + c + s] = tr.get(r, c);
            data[(r + s) * side + c] = bl.get(r, c);
            data[(r + s) * side + c + s] = br.get(r, c);
        }
    }
    HilbertMatrix { side, data }
}

/// One ring's cells (row-major ids), starting at the ring's corner on the
/// start-corner side and running in the given rotation.
fn ring(grid: &ScanGrid, r: usize, corner: StartCorner, rotation: Rotation) -> Vec<usize> {
    let s = grid.side;
    let (lo, hi) = (r, s - 1 - r);
    // clockwise from the upper-left corner of the ring
    let mut cw = Vec::with_capacity(4 * (hi - lo));
    for c in lo..hi {
        cw.push((lo, c));
    }
    for rr in lo..hi {
        cw.push((rr, hi));
    }
    for c in (lo + 1..=hi).rev() {
        cw.push((hi, c));
    }
    for rr in (lo + 1..=hi).rev() {
        cw.push((rr, lo));
    }
    let start = match corner {
        StartCorner::UpperLeft => 0,
        StartCorner::UpperRight => hi - lo,
    };
    cw.rotate_left(start);
    if rotation == Rotation::CounterClockwise {
        cw[1..].reverse();
    }
    cw.into_iter().map(|(rr, c)| rr * s + c).collect()
}

/// Cells outside the centred block, ring by ring.
pub fn circular_ring_order(grid: &ScanGrid, direction: ScanDirection) -> Vec<usize> {
    let (rings, _) = grid.center();
    let mut order: Vec<usize> = Vec::with_capacity(grid.cells() - grid.cells() / 4);
    let idx: Vec<usize> = match direction.progression {
        Progression::OuterToCenter => (0..rings).collect(),
        Progression::CenterToOuter => (0..rings).rev().collect(),
    };
    for r in idx {
        order.extend(ring(grid, r, direction.corner, direction.rotation));
    }
    order
}

/// Centre block cells (row-major ids) in Hilbert order, mirrored left-right
/// for upper-right starts.
pub fn central_hilbert_order(grid: &ScanGrid, corner: StartCorner) -> Vec<usize> {
    let (off, len) = grid.center();
    let n = len.trailing_zeros();
    let h = hilbert_matrix(n).expect("grid guarantees order >= 1");
    h.path()
        .into_iter()
        .map(|(r, c)| {
            let c = match corner {
                StartCorner::UpperLeft => c,
                StartCorner::UpperRight => len - 1 - c,
            };
            (r + off) * grid.side + c + off
        })
        .collect()
}

/// A bijective visit order over grid cells with its inverse.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ScanOrder {
    order: Arc<[usize]>,
    inverse: Arc<[usize]>,
}

impl ScanOrder {
    pub fn from_order(order: Vec<usize>) -> Result<Self> {
        let n = order.len();
        let mut inverse = vec![usize::MAX; n];
        for (pos, &cell) in order.iter().enumerate() {
            if cell >= n || inverse[cell] != usize::MAX {
                return Err(Error::InvalidArgument(format!("order is not a permutation (cell {cell})")));
            }
            inverse[cell] = pos;
        }
        Ok(Self { order: order.into(), inverse: inverse.into() })
    }

    /// `order[i]` = cell visited at step `i`.
    pub fn order(&self) -> &Arc<[usize]> {
        &self.order
    }

    /// `inverse[cell]` = step at which `cell` is visited.
    pub fn inverse(&self) -> &Arc<[usize]> {
        &self.inverse
    }

    pub fn len(&self) -> usize {
        self.order.len()
    }

    pub fn is_empty(&self) -> bool {
        self.order.is_empty()
    }

    /// Reorders a row-major sequence into visit order.
    pub fn gather<T: Clone>(&self, seq: &[T]) -> Vec<T> {
        self.order.iter().map(|&i| seq[i].clone()).collect()
    }

    /// Puts a visit-ordered sequence back into row-major order.
    pub fn scatter<T: Clone>(&self, seq: &[T]) -> Vec<T> {
        self.inverse.iter().map(|&i| seq[i].clone()).collect()
    }
}

pub fn circular_hilbert_order(grid: &ScanGrid, direction: ScanDirection) -> Result<ScanOrder> {
    let rings = circular_ring_order(grid, direction);
    let center = central_hilbert_order(grid, direction.corner);
    debug_assert!(rings.iter().all(|&i| !grid.in_center(i / grid.side, i % grid.side)));
    let order = match direction.progression {
        Progression::OuterToCenter => [rings, center].concat(),
        Progression::CenterToOuter => [center, rings].concat(),
    };
    ScanOrder::from_order(order)
}

/// Validates `h x w` and returns the (cached) order.
pub fn scan_order(h: usize, w: usize, direction: ScanDirection) -> Result<ScanOrder> {
    static CACHE: OnceLock<Mutex<HashMap<(usize, usize), ScanOrder>>> = OnceLock::new();
    let grid = ScanGrid::new(h, w)?;
    let key = (grid.side, direction.index());
    let cache = CACHE.get_or_init(Default::default);
    if let Some(o) = cache.lock().unwrap().get(&key) {
        return Ok(o.clone());
    }
    let o = circular_hilbert_order(&grid, direction)?;
    cache.lock().unwrap().insert(key, o.clone());
    Ok(o)
}

/// Visit-step matrix (`step[cell]`) rendered as text, one grid row per line.
pub fn render_visit_matrix(h: usize, w: usize, direction: ScanDirection) -> Result<String> {
    let order = scan_order(h, w, direction)?;
    let width = (order.len() - 1).to_string().len();
    let mut out = format!("# {h}x{w} direction {} ({direction})\n", direction.index());
    for r in 0..h {
        let row: Vec<String> = (0..w).map(|c| format!("{:>width$}", order.inverse()[r * w + c])).collect();
        out.push_str(&row.join(" "));
        out.push('\n');
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use std::collections::HashSet;

    fn adjacent(a: (usize, usize), b: (usize, usize)) -> bool {
        a.0.abs_diff(b.0) + a.1.abs_diff(b.1) == 1
    }

    #[test]
    fn hilbert_first_orders() {
        assert_eq!(hilbert_matrix(1).unwrap().data(), &[1, 2, 4, 3]);
        assert_eq!(
            hilbert_matrix(2).unwrap().data(),
            &[1, 2, 15, 16, 4, 3, 14, 13, 5, 8, 9, 12, 6, 7, 10, 11]
        );
        assert!(hilbert_matrix(0).is_err());
    }

    #[test]
    fn hilbert_is_permutation_and_adjacent() {
        for n in 1..=6 {
            let h = hilbert_matrix(n).unwrap();
            let mut v = h.data().to_vec();
            v.sort_unstable();
            assert_eq!(v, (1..=4u64.pow(n)).collect::<Vec<_>>());
            let path = h.path();
            assert!(path.windows(2).all(|p| adjacent(p[0], p[1])), "order {n}");
        }
    }

    #[test]
    fn grid_validation() {
        assert!(ScanGrid::new(8, 8).is_ok());
        assert!(ScanGrid::new(4, 4).is_ok());
        for (h, w) in [(8, 4), (6, 6), (2, 2), (12, 12), (0, 0)] {
            let e = ScanGrid::new(h, w).unwrap_err().to_string();
            assert!(e.contains("grid"), "{e}");
        }
        let e = ScanGrid::new(12, 12).unwrap_err().to_string();
        assert!(e.contains("power of two"), "{e}");
    }

    #[test]
    fn rings_4x4_and_8x8() {
        let g4 = ScanGrid::new(4, 4).unwrap();
        let d = ScanDirection::from_index(0).unwrap();
        let r = circular_ring_order(&g4, d);
        assert_eq!(r, vec![0, 1, 2, 3, 7, 11, 15, 14, 13, 12, 8, 4]);
        let g8 = ScanGrid::new(8, 8).unwrap();
        let r = circular_ring_order(&g8, d);
        assert_eq!(r.len(), 48);
        assert_eq!(r[0], 0);
        assert_eq!(r[28], 9);
        let outer: HashSet<usize> = r[..28].iter().copied().collect();
        assert!(outer.iter().all(|&c| c / 8 == 0 || c / 8 == 7 || c % 8 == 0 || c % 8 == 7));
    }

    #[test]
    fn rotations_are_reverses() {
        let g = ScanGrid::new(8, 8).unwrap();
        for corner in [StartCorner::UpperLeft, StartCorner::UpperRight] {
            for r in 0..2 {
                let cw = ring(&g, r, corner, Rotation::Clockwise);
                let ccw = ring(&g, r, corner, Rotation::CounterClockwise);
                assert_eq!(cw[0], ccw[0]);
                let mut rev = cw[1..].to_vec();
                rev.reverse();
                assert_eq!(&ccw[1..], &rev[..]);
            }
        }
        // upper-right start sits at the ring's top-right corner
        assert_eq!(ring(&g, 1, StartCorner::UpperRight, Rotation::Clockwise)[0], 6 + 8);
    }

    #[test]
    fn center_block_position() {
        let g = ScanGrid::new(4, 4).unwrap();
        for d in ScanDirection::all() {
            let o = circular_hilbert_order(&g, d).unwrap();
            let center: Vec<usize> = match d.progression {
                Progression::OuterToCenter => o.order()[12..].to_vec(),
                Progression::CenterToOuter => o.order()[..4].to_vec(),
            };
            let expect = match d.corner {
                StartCorner::UpperLeft => vec![5, 6, 10, 9],
                StartCorner::UpperRight => vec![6, 5, 9, 10],
            };
            assert_eq!(center, expect, "{d}");
        }
    }

    #[test]
    fn direction_indexing_round_trips() {
        let all = ScanDirection::all();
        let set: HashSet<_> = all.iter().copied().collect();
        assert_eq!(set.len(), 8);
        for (i, d) in all.iter().enumerate() {
            assert_eq!(d.index(), i);
            assert_ne!(d.reversed(), *d);
        }
        assert!(ScanDirection::from_index(8).is_none());
    }

    #[test]
    fn render_is_the_inverse_permutation() {
        let text = render_visit_matrix(4, 4, ScanDirection::from_index(0).unwrap()).unwrap();
        let lines: Vec<&str> = text.lines().skip(1).collect();
        assert_eq!(lines[0].split_whitespace().collect::<Vec<_>>(), ["0", "1", "2", "3"]);
        assert_eq!(lines[1].split_whitespace().collect::<Vec<_>>(), ["11", "12", "13", "4"]);
    }

    proptest! {
        #[test]
        fn every_order_is_a_bijection(k in 2u32..=6, d in 0usize..8) {
            let side = 1usize << k;
            let o = scan_order(side, side, ScanDirection::from_index(d).unwrap()).unwrap();
            let mut v = o.order().to_vec();
            v.sort_unstable();
            prop_assert_eq!(v, (0..side * side).collect::<Vec<_>>());
            let seq: Vec<usize> = (0..side * side).map(|i| i * 3 + 1).collect();
            prop_assert_eq!(o.scatter(&o.gather(&seq)), seq);
        }

        #[test]
        fn ring_steps_are_adjacent(k in 2u32..=6, d in 0usize..8) {
            let side = 1usize << k;
            let g = ScanGrid::new(side, side).unwrap();
            let d = ScanDirection::from_index(d).unwrap();
            let cell = |i: usize| (i / side, i % side);
            for q in 0..side / 4 {
                let r = ring(&g, q, d.corner, d.rotation);
                prop_assert_eq!(r.len(), 4 * (side - 2 * q - 1));
                prop_assert!(r.windows(2).all(|p| adjacent(cell(p[0]), cell(p[1]))), "ring {}", q);
            }
        }
    }
}
