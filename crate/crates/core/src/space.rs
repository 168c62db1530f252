//! Finite metric measure spaces with exact distance codes.
//!
//! A [`Space`] is a finite point set with positive integer weights and a
//! metric whose realized distances are stored as orderable `u64` codes. Each
//! backend declares how a code converts to an exact [`Radius`] value; every
//! ball query first *lowers* an exact radius to the largest realized code not
//! exceeding it, after which membership is a single integer comparison. This
//! keeps all measure-theoretic quantities (ball masses, regularity ratios,
//! operator values) in exact arithmetic.
//!
//! Backends:
//!
//! * `Torus` — the cycle `Z_n` with unit edge lengths,
//! * `Star` — a weighted hub with `(K-1)^2` unit-weight spokes,
//! * `EuclideanStar` — `{0, e_1, ..., e_n}` in Euclidean space (codes are
//!   squared lengths, radii live in `Q[sqrt(2)]`),
//! * `Generic` — an explicit distance-code matrix (validated),
//! * `Doubling` — a two-block product group with dyadic-scale metric (built
//!   in [`crate::construct`]),
//! * `Ad` — a product group carrying a fractional-power-of-three metric
//!   (built in [`crate::construct`]),
//! * `Tree` — the depth-truncated rooted `k`-ary tree with graph metric.

use std::cmp::Ordering;
use std::collections::HashMap;
use std::sync::{Arc, Mutex};

use num_traits::Zero;
use once_cell::sync::OnceCell;
use rand::Rng;
use serde::Serialize;

use crate::err::{Error, Result};
use crate::exact::{rat, Rat, Radius};

/// Largest number of points any constructor will materialize by default.
pub const DEFAULT_POINT_BUDGET: u64 = 20_000_000;

/// Default cap on elementary operations for dense computations.
pub const DEFAULT_WORK_BUDGET: u64 = 4_000_000_000;

// ---------------------------------------------------------------------------
// Geometry backends
// ---------------------------------------------------------------------------

#[derive(Debug)]
pub(crate) struct GenericGeom {
    pub n: usize,
    /// Row-major `n x n` distance codes (linear in the unit length).
    pub codes: Vec<u64>,
}

#[derive(Debug)]
pub(crate) struct DoublingGeom {
    pub q: u64,
    pub m: u32,
    pub t: u32,
    pub qm: u64,
    pub qt: u64,
    /// Subtraction table for the first block: `u_sub[a*qm + b] = a - b`.
    pub u_sub: Vec<u16>,
    /// Base-`q` digits of every second-block index, flattened (`t` per point).
    pub v_digits: Vec<u8>,
    /// `lj[j][du]`: largest level `l` in `0..=m` such that `du` lies in the
    /// `l`-fold coordinate fattening of the `j`-th quadric slice (`du != 0`).
    pub lj: Vec<Vec<u8>>,
}

impl DoublingGeom {
    /// Scale of the distance codes: code = distance * 2^m.
    #[inline]
    pub fn scale_log2(&self) -> u32 {
        self.m
    }

    /// First block-index difference, second block top-level difference.
    #[inline]
    fn split(&self, i: usize) -> (u64, u64) {
        let i = i as u64;
        (i % self.qm, i / self.qm)
    }

    /// Smallest `j >= 1` such that the base-`q` digits of `va` and `vb`
    /// agree at position `j` and above; `0` when `va == vb`.
    #[inline]
    fn jv(&self, va: u64, vb: u64) -> u32 {
        if va == vb {
            return 0;
        }
        let t = self.t as usize;
        let da = &self.v_digits[va as usize * t..va as usize * t + t];
        let db = &self.v_digits[vb as usize * t..vb as usize * t + t];
        for j in (0..t).rev() {
            if da[j] != db[j] {
                return j as u32 + 1;
            }
        }
        unreachable!("identical digit strings for distinct indices")
    }
}

#[derive(Debug)]
pub(crate) struct AdGeom {
    pub q: u64,
    pub k: u32,
    pub m: u32,
    pub t: u32,
    /// Exponent denominator of the metric: distances are powers `3^(j/n)`.
    pub n_exp: u32,
    pub qm: u64,
    /// `M = m * k`, the number of ternary coordinates of the first block.
    pub big_m: u32,
    pub p3t: u64,
    pub u_sub: Vec<u32>,
    /// 1-based index of the quadric level of `du` (every `du` has one).
    pub lu: Vec<u16>,
    /// Highest nonzero ternary coordinate of `du` (`du != 0`).
    pub hi3: Vec<u8>,
    /// Lazily built table of the triangle comparison
    /// `3^(js/n) <= 3^(ja/n) + 3^(jb/n)` over code triples.
    pub tri_cube: OnceCell<Vec<bool>>,
}

impl AdGeom {
    #[inline]
    fn split(&self, i: usize) -> (u64, u64) {
        let i = i as u64;
        (i % self.qm, i / self.qm)
    }

    /// Smallest `j >= 1` with the ternary digits of `va`, `vb` equal at
    /// positions `>= j`; `0` when equal.
    #[inline]
    fn jv(&self, mut va: u64, mut vb: u64) -> u32 {
        let mut j = 0u32;
        let mut level = 0u32;
        while va != vb {
            if va % 3 != vb % 3 {
                j = level + 1;
            }
            va /= 3;
            vb /= 3;
            level += 1;
        }
        j
    }

    /// Exponent code of a nonzero difference `(du, jv)`:
    /// `code = j + M + 1` where the distance is `3^(j/n)`.
    #[inline]
    fn code_of(&self, du: u64, jv: u32) -> u64 {
        let m_big = self.big_m as i64;
        if jv == 0 {
            // Same second block: exponent determined by the coordinate flag.
            debug_assert!(du != 0);
            return self.hi3[du as usize] as u64 + 2;
        }
        let jv = jv as i64;
        let lu = self.lu[du as usize] as i64; // 1-based level of the quadric value
        let mut j = jv;
        if lu >= jv && lu <= self.t as i64 {
            let via_level = (lu - self.k as i64).max(1);
            j = j.min(via_level);
        }
        (j + m_big + 1) as u64
    }
}

#[derive(Debug)]
pub(crate) struct TreeGeom {
    pub k: u32,
    pub depth: u32,
    pub parent: Vec<u32>,
    pub node_depth: Vec<u8>,
    pub child_start: Vec<u32>,
    pub children: Vec<u32>,
}

impl TreeGeom {
    #[inline]
    pub fn dist(&self, mut x: usize, mut y: usize) -> u64 {
        let mut steps = 0u64;
        let (mut dx, mut dy) = (self.node_depth[x], self.node_depth[y]);
        while dx > dy {
            x = self.parent[x] as usize;
            dx -= 1;
            steps += 1;
        }
        while dy > dx {
            y = self.parent[y] as usize;
            dy -= 1;
            steps += 1;
        }
        while x != y {
            x = self.parent[x] as usize;
            y = self.parent[y] as usize;
            steps += 2;
        }
        steps
    }

    /// `h`-fold parent, or `None` when the walk leaves the root.
    #[inline]
    pub fn ancestor(&self, mut x: usize, h: u32) -> Option<usize> {
        for _ in 0..h {
            if x == 0 {
                return None;
            }
            x = self.parent[x] as usize;
        }
        Some(x)
    }
}

/// Flag ultrametric on `F_q^m`: `d(x, y) = 2^(p+1-m)` where `p` is the
/// highest base-`q` digit position at which `x` and `y` differ. Codes are
/// fixed-point with scale `2^m`, so the realized codes are
/// `{0, 2, 4, ..., 2^m}` and the ball of code `2^(p+1)` around any point is
/// its coset of the subspace spanned by the first `p + 1` coordinates.
#[derive(Debug)]
pub(crate) struct FlagGeom {
    pub q: u64,
    pub m: u32,
    /// Digit addition table `a*q + b -> a + b` in the base field (polynomial
    /// addition for extension fields — digit indices are NOT added mod `q`).
    pub digit_add: Vec<u16>,
    /// Digit negation table.
    pub digit_neg: Vec<u16>,
}

impl FlagGeom {
    #[inline]
    fn dist(&self, x: usize, y: usize) -> u64 {
        // Digits differ exactly where the field difference is nonzero, so the
        // metric needs no arithmetic table.
        let (mut a, mut b) = (x as u64, y as u64);
        let mut code = 0u64;
        for pos in 0..self.m {
            if a % self.q != b % self.q {
                code = 1u64 << (pos + 1);
            }
            a /= self.q;
            b /= self.q;
        }
        code
    }
}

#[derive(Debug)]
pub(crate) enum Geom {
    Torus { n: u64 },
    Star,
    EuclideanStar,
    Generic(GenericGeom),
    Doubling(DoublingGeom),
    Ad(AdGeom),
    Tree(TreeGeom),
    Flag(FlagGeom),
}

// ---------------------------------------------------------------------------
// Space
// ---------------------------------------------------------------------------

/// A finite metric measure space with exact distance codes.
pub struct Space {
    pub name: String,
    /// Machine-readable construction parameters, embedded in reports.
    pub descriptor: serde_json::Value,
    weights: Vec<u64>,
    total: u128,
    cum_weights: Vec<u128>,
    uniform_weight: Option<u64>,
    pub(crate) geom: Geom,
    invariant: bool,
    codes_sorted: Vec<u64>,
    inv_ball_mass: OnceCell<Vec<u128>>,
    norm_ball_cache: Mutex<HashMap<u64, Arc<Vec<u32>>>>,
    minkowski_cache: Mutex<HashMap<(u64, u64), Arc<Vec<u32>>>>,
}

impl std::fmt::Debug for Space {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Space")
            .field("name", &self.name)
            .field("points", &self.weights.len())
            .field("total_mass", &self.total)
            .finish()
    }
}

impl Space {
    pub(crate) fn from_parts(
        name: impl Into<String>,
        descriptor: serde_json::Value,
        weights: Vec<u64>,
        geom: Geom,
    ) -> Space {
        assert!(!weights.is_empty(), "a space must have at least one point");
        assert!(
            weights.iter().all(|&w| w > 0),
            "weights must be strictly positive"
        );
        let mut cum = Vec::with_capacity(weights.len() + 1);
        let mut acc = 0u128;
        cum.push(0);
        for &w in &weights {
            acc += w as u128;
            cum.push(acc);
        }
        let uniform_weight = if weights.iter().all(|&w| w == weights[0]) {
            Some(weights[0])
        } else {
            None
        };
        let invariant = matches!(
            geom,
            Geom::Torus { .. } | Geom::Doubling(_) | Geom::Ad(_) | Geom::Flag(_)
        );

        let mut sp = Space {
            name: name.into(),
            descriptor,
            total: acc,
            weights,
            cum_weights: cum,
            uniform_weight,
            geom,
            invariant,
            codes_sorted: Vec::new(),
            inv_ball_mass: OnceCell::new(),
            norm_ball_cache: Mutex::new(HashMap::new()),
            minkowski_cache: Mutex::new(HashMap::new()),
        };
        sp.codes_sorted = sp.compute_realized_codes();
        sp
    }

    fn compute_realized_codes(&self) -> Vec<u64> {
        let n = self.len();
        let mut codes: Vec<u64> = match &self.geom {
            Geom::Torus { n } => (0..=n / 2).collect(),
            Geom::Star | Geom::EuclideanStar => vec![0, 1, 2],
            Geom::Tree(tg) => (0..=2 * tg.depth as u64).collect(),
            Geom::Generic(g) => {
                let mut set: Vec<u64> = g.codes.clone();
                set.sort_unstable();
                set.dedup();
                set
            }
            // Translation-invariant: the realized codes are the norms.
            Geom::Doubling(_) | Geom::Ad(_) | Geom::Flag(_) => {
                let mut set: Vec<u64> = (0..n).map(|y| self.dist_code(0, y)).collect();
                set.sort_unstable();
                set.dedup();
                set
            }
        };
        codes.sort_unstable();
        codes.dedup();
        codes
    }

    // -- basic accessors ----------------------------------------------------

    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    #[inline]
    pub fn weight(&self, i: usize) -> u64 {
        self.weights[i]
    }

    pub fn weights(&self) -> &[u64] {
        &self.weights
    }

    pub fn total_mass(&self) -> u128 {
        self.total
    }

    /// `true` when the metric is translation-invariant for the backend's
    /// group structure and the weights are uniform.
    pub fn is_invariant(&self) -> bool {
        self.invariant
    }

    /// All realized distance codes, ascending, starting with `0`.
    pub fn realized_codes(&self) -> &[u64] {
        &self.codes_sorted
    }

    pub fn diam_code(&self) -> u64 {
        *self.codes_sorted.last().unwrap()
    }

    /// Smallest positive realized code.
    pub fn min_positive_code(&self) -> u64 {
        self.codes_sorted[1]
    }

    pub(crate) fn tree_geom(&self) -> Option<&TreeGeom> {
        match &self.geom {
            Geom::Tree(tg) => Some(tg),
            _ => None,
        }
    }

    pub(crate) fn doubling_geom(&self) -> Option<&DoublingGeom> {
        match &self.geom {
            Geom::Doubling(dg) => Some(dg),
            _ => None,
        }
    }

    pub(crate) fn ad_geom(&self) -> Option<&AdGeom> {
        match &self.geom {
            Geom::Ad(ag) => Some(ag),
            _ => None,
        }
    }

    // -- distances ----------------------------------------------------------

    /// Distance code between two points.
    #[inline]
    pub fn dist_code(&self, x: usize, y: usize) -> u64 {
        match &self.geom {
            Geom::Torus { n } => {
                let d = (x as u64).abs_diff(y as u64);
                d.min(n - d)
            }
            Geom::Star | Geom::EuclideanStar => {
                if x == y {
                    0
                } else if x == 0 || y == 0 {
                    1
                } else {
                    2
                }
            }
            Geom::Generic(g) => g.codes[x * g.n + y],
            Geom::Doubling(dg) => {
                let (ux, vx) = dg.split(x);
                let (uy, vy) = dg.split(y);
                let du = dg.u_sub[(ux * dg.qm + uy) as usize] as u64;
                let jv = dg.jv(vx, vy);
                if jv == 0 {
                    if du == 0 {
                        0
                    } else {
                        1u64 << (dg.m - dg.lj[0][du as usize] as u32)
                    }
                } else {
                    let base = 1u64 << (2 * jv + dg.m);
                    if du == 0 {
                        base
                    } else {
                        base + (1u64 << (dg.m - dg.lj[jv as usize][du as usize] as u32))
                    }
                }
            }
            Geom::Ad(ag) => {
                let (ux, vx) = ag.split(x);
                let (uy, vy) = ag.split(y);
                let du = ag.u_sub[(ux * ag.qm + uy) as usize] as u64;
                let jv = ag.jv(vx, vy);
                if jv == 0 && du == 0 {
                    0
                } else {
                    ag.code_of(du, jv)
                }
            }
            Geom::Tree(tg) => tg.dist(x, y),
            Geom::Flag(fg) => fg.dist(x, y),
        }
    }

    /// Exact value of a distance code as a [`Radius`].
    pub fn code_radius(&self, code: u64) -> Radius {
        match &self.geom {
            Geom::Torus { .. } | Geom::Star | Geom::Generic(_) | Geom::Tree(_) => {
                Radius::lin(code as i128, 1)
            }
            Geom::EuclideanStar => match code {
                0 => Radius::Quad(rat(0, 1), rat(0, 1)),
                1 => Radius::Quad(rat(1, 1), rat(0, 1)),
                2 => Radius::Quad(rat(0, 1), rat(1, 1)),
                _ => unreachable!("euclidean star has codes 0, 1, 2"),
            },
            Geom::Doubling(dg) => Radius::Lin(rat(code as i128, 1i128 << dg.scale_log2())),
            Geom::Flag(fg) => Radius::Lin(rat(code as i128, 1i128 << fg.m)),
            Geom::Ad(ag) => {
                if code == 0 {
                    Radius::Pow3(crate::exact::Pow3::constant(ag.n_exp, rat(0, 1)))
                } else {
                    let j = code as i64 - ag.big_m as i64 - 1;
                    Radius::Pow3(crate::exact::Pow3::term(ag.n_exp, j))
                }
            }
        }
    }

    /// Name of the scalar domain the space's radii live in.
    pub fn radius_domain(&self) -> &'static str {
        match &self.geom {
            Geom::EuclideanStar => "quadratic",
            Geom::Ad(_) => "pow3",
            _ => "linear",
        }
    }

    /// Largest realized code whose exact value is `<= r`; `0` when `r` is
    /// below the smallest positive distance (the ball is then the center
    /// alone).
    pub fn lower_radius(&self, r: &Radius) -> u64 {
        let codes = &self.codes_sorted;
        // Binary search over realized codes by exact comparison.
        let mut lo = 0usize; // code 0 has value 0 <= r for r >= 0
        let mut hi = codes.len();
        while hi - lo > 1 {
            let mid = (lo + hi) / 2;
            if self.code_radius(codes[mid]).cmp_exact(r) != Ordering::Greater {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        codes[lo]
    }

    /// Exact test `value(code) == r` for a realized code.
    pub fn code_matches_radius(&self, code: u64, r: &Radius) -> bool {
        self.code_radius(code).eq_exact(r)
    }

    // -- balls ---------------------------------------------------------------

    /// Closed ball as a point list (codes `<= thr`).
    pub fn ball(&self, x: usize, thr: u64) -> Vec<u32> {
        (0..self.len())
            .filter(|&y| self.dist_code(x, y) <= thr)
            .map(|y| y as u32)
            .collect()
    }

    /// Sphere `{y : d(x, y) = code}` as a point list.
    pub fn sphere(&self, x: usize, code: u64) -> Vec<u32> {
        (0..self.len())
            .filter(|&y| self.dist_code(x, y) == code)
            .map(|y| y as u32)
            .collect()
    }

    /// Mass of the closed ball `B(x, thr)`.
    pub fn ball_mass(&self, x: usize, thr: u64) -> u128 {
        if self.invariant {
            let table = self.inv_ball_mass.get_or_init(|| {
                // Cumulative mass by realized code around any center.
                let mut per_code = vec![0u128; self.codes_sorted.len()];
                for y in 0..self.len() {
                    let c = self.dist_code(0, y);
                    let idx = self.codes_sorted.partition_point(|&k| k < c);
                    per_code[idx] += self.weights[y] as u128;
                }
                let mut acc = 0u128;
                for v in per_code.iter_mut() {
                    acc += *v;
                    *v = acc;
                }
                per_code
            });
            let idx = self.codes_sorted.partition_point(|&k| k <= thr);
            return table[idx - 1];
        }
        (0..self.len())
            .filter(|&y| self.dist_code(x, y) <= thr)
            .map(|y| self.weights[y] as u128)
            .sum()
    }

    /// Enlarged ball `union over y in B(x, ta) of B(y, tb)`, as a point list.
    pub fn enlarged_ball(&self, x: usize, ta: u64, tb: u64) -> Vec<u32> {
        if self.invariant {
            let offs = self.minkowski_offsets(ta, tb);
            return offs
                .iter()
                .map(|&g| self.pt_add(x, g as usize).unwrap() as u32)
                .collect();
        }
        let mut mark = vec![false; self.len()];
        for y in self.ball(x, ta) {
            for z in 0..self.len() {
                if !mark[z] && self.dist_code(y as usize, z) <= tb {
                    mark[z] = true;
                }
            }
        }
        (0..self.len())
            .filter(|&z| mark[z])
            .map(|z| z as u32)
            .collect()
    }

    /// Mass of the enlarged ball.
    pub fn enlarged_mass(&self, x: usize, ta: u64, tb: u64) -> u128 {
        if self.invariant {
            let offs = self.minkowski_offsets(ta, tb);
            let w = self.uniform_weight.expect("invariant spaces are uniform") as u128;
            return offs.len() as u128 * w;
        }
        let mut mark = vec![false; self.len()];
        let mut mass = 0u128;
        for y in self.ball(x, ta) {
            for z in 0..self.len() {
                if !mark[z] && self.dist_code(y as usize, z) <= tb {
                    mark[z] = true;
                    mass += self.weights[z] as u128;
                }
            }
        }
        mass
    }

    // -- group structure (invariant backends) --------------------------------

    /// Group addition of point indices, when the backend is a group.
    pub fn pt_add(&self, a: usize, b: usize) -> Option<usize> {
        match &self.geom {
            Geom::Torus { n } => Some(((a as u64 + b as u64) % n) as usize),
            Geom::Doubling(dg) => {
                let (ua, va) = dg.split(a);
                let (ub, vb) = dg.split(b);
                let u = add_base(ua, ub, dg.q, dg.m);
                let v = add_base(va, vb, dg.q, dg.t);
                Some((v * dg.qm + u) as usize)
            }
            Geom::Flag(fg) => {
                let q = fg.q;
                let (mut x, mut y) = (a as u64, b as u64);
                let (mut out, mut scale) = (0u64, 1u64);
                for _ in 0..fg.m {
                    out += fg.digit_add[(x % q * q + y % q) as usize] as u64 * scale;
                    x /= q;
                    y /= q;
                    scale *= q;
                }
                Some(out as usize)
            }
            Geom::Ad(ag) => {
                let (ua, va) = ag.split(a);
                let (ub, vb) = ag.split(b);
                // First block: ternary coordinatewise addition (the additive
                // group of the field is elementary abelian of exponent 3).
                let u = add_base3(ua, ub, ag.big_m);
                let v = add_base3(va, vb, ag.t);
                Some((v * ag.qm + u) as usize)
            }
            _ => None,
        }
    }

    /// Group negation of a point index.
    pub fn pt_neg(&self, a: usize) -> Option<usize> {
        match &self.geom {
            Geom::Torus { n } => Some(((n - a as u64) % n) as usize),
            Geom::Doubling(dg) => {
                let (ua, va) = dg.split(a);
                let u = neg_base(ua, dg.q, dg.m);
                let v = neg_base(va, dg.q, dg.t);
                Some((v * dg.qm + u) as usize)
            }
            Geom::Flag(fg) => {
                let q = fg.q;
                let mut x = a as u64;
                let (mut out, mut scale) = (0u64, 1u64);
                for _ in 0..fg.m {
                    out += fg.digit_neg[(x % q) as usize] as u64 * scale;
                    x /= q;
                    scale *= q;
                }
                Some(out as usize)
            }
            Geom::Ad(ag) => {
                let (ua, va) = ag.split(a);
                let u = neg_base(ua, 3, ag.big_m);
                let v = neg_base(va, 3, ag.t);
                Some((v * ag.qm + u) as usize)
            }
            _ => None,
        }
    }

    /// Offsets `g` with `|g| <= thr` (invariant backends only), cached.
    pub fn norm_ball_offsets(&self, thr: u64) -> Arc<Vec<u32>> {
        assert!(self.invariant, "norm balls need an invariant backend");
        let mut cache = self.norm_ball_cache.lock().unwrap();
        if let Some(v) = cache.get(&thr) {
            return v.clone();
        }
        let v: Arc<Vec<u32>> = Arc::new(
            (0..self.len())
                .filter(|&g| self.dist_code(0, g) <= thr)
                .map(|g| g as u32)
                .collect(),
        );
        cache.insert(thr, v.clone());
        v
    }

    /// Offsets of the Minkowski sum `N_ta + N_tb` of two norm balls
    /// (invariant backends only), cached. This equals the enlarged ball
    /// `B(0, ta, tb)` as an offset set.
    pub fn minkowski_offsets(&self, ta: u64, tb: u64) -> Arc<Vec<u32>> {
        assert!(self.invariant, "minkowski sums need an invariant backend");
        let cache = self.minkowski_cache.lock().unwrap();
        if let Some(v) = cache.get(&(ta, tb)) {
            return v.clone();
        }
        drop(cache);
        let na = self.norm_ball_offsets(ta);
        let nb = self.norm_ball_offsets(tb);
        let mut mark = vec![false; self.len()];
        for &a in na.iter() {
            for &b in nb.iter() {
                mark[self.pt_add(a as usize, b as usize).unwrap()] = true;
            }
        }
        let v: Arc<Vec<u32>> = Arc::new(
            (0..self.len())
                .filter(|&g| mark[g])
                .map(|g| g as u32)
                .collect(),
        );
        self.minkowski_cache
            .lock()
            .unwrap()
            .insert((ta, tb), v.clone());
        v
    }

    // -- sampling -------------------------------------------------------------

    /// Draw a point with probability proportional to its weight.
    pub fn sample_point<R: Rng>(&self, rng: &mut R) -> usize {
        if self.uniform_weight.is_some() {
            return rng.gen_range(0..self.len());
        }
        let u = rng.gen_range(0..self.total);
        // cum_weights[i] <= u < cum_weights[i+1]  =>  point i
        match self.cum_weights.binary_search(&u) {
            Ok(i) => i,
            Err(i) => i - 1,
        }
    }

    // -- metric validation -----------------------------------------------------

    /// Exact test `value(cs) <= value(ca) + value(cb)` on distance codes.
    pub fn le_sum_codes(&self, cs: u64, ca: u64, cb: u64) -> bool {
        match &self.geom {
            // Linear domains: codes are proportional to lengths.
            Geom::Torus { .. } | Geom::Star | Geom::Generic(_) | Geom::Doubling(_)
            | Geom::Tree(_) | Geom::Flag(_) => cs <= ca + cb,
            // Squared lengths: sqrt(cs) <= sqrt(ca) + sqrt(cb).
            Geom::EuclideanStar => {
                if cs <= ca + cb {
                    true
                } else {
                    let d = (cs - ca - cb) as u128;
                    d * d <= 4 * ca as u128 * cb as u128
                }
            }
            Geom::Ad(ag) => {
                if cs == 0 {
                    return true;
                }
                if ca == 0 {
                    return cs <= cb;
                }
                if cb == 0 {
                    return cs <= ca;
                }
                let side = (ag.big_m + ag.t + 2) as usize;
                let cube = ag.tri_cube.get_or_init(|| {
                    let mut cube = vec![false; side * side * side];
                    for s in 1..side {
                        for a in 1..side {
                            for b in 1..side {
                                let js = s as i64 - ag.big_m as i64 - 1;
                                let ja = a as i64 - ag.big_m as i64 - 1;
                                let jb = b as i64 - ag.big_m as i64 - 1;
                                let n = ag.n_exp;
                                let lhs = crate::exact::Pow3::term(n, js);
                                let rhs = crate::exact::Pow3::term(n, ja)
                                    .add(&crate::exact::Pow3::term(n, jb));
                                let diff = rhs.add(&lhs.scale(rat(-1, 1)));
                                cube[(s * side + a) * side + b] =
                                    diff.sign() != Ordering::Less;
                            }
                        }
                    }
                    cube
                });
                cube[(cs as usize * side + ca as usize) * side + cb as usize]
            }
        }
    }

    /// Verify the triangle inequality. Exhaustive when `n <= exhaustive_cap`,
    /// otherwise on `samples` random ordered triples.
    pub fn check_triangle(&self, seed: u64, samples: u64) -> Result<TriangleReport> {
        let n = self.len();
        const EXHAUSTIVE_CAP: usize = 500;
        if n <= EXHAUSTIVE_CAP {
            let mut checked = 0u64;
            for x in 0..n {
                for y in 0..n {
                    let dxy = self.dist_code(x, y);
                    for z in 0..n {
                        let dxz = self.dist_code(x, z);
                        let dyz = self.dist_code(y, z);
                        checked += 1;
                        if !self.le_sum_codes(dxz, dxy, dyz) {
                            return Err(Error::Triangle { x, y, z });
                        }
                    }
                }
            }
            return Ok(TriangleReport {
                mode: "exhaustive".into(),
                triples: checked,
            });
        }
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        for _ in 0..samples {
            let x = rng.gen_range(0..n);
            let y = rng.gen_range(0..n);
            let z = rng.gen_range(0..n);
            let dxz = self.dist_code(x, z);
            let dxy = self.dist_code(x, y);
            let dyz = self.dist_code(y, z);
            if !self.le_sum_codes(dxz, dxy, dyz) {
                return Err(Error::Triangle { x, y, z });
            }
        }
        Ok(TriangleReport {
            mode: format!("sampled(seed={seed})"),
            triples: samples,
        })
    }

    /// Default radii grid for regularity sweeps: half the minimum positive
    /// distance, every realized distance, and the midpoints between
    /// consecutive realized distances.
    pub fn default_grid(&self) -> Vec<Radius> {
        let mut grid = Vec::with_capacity(2 * self.codes_sorted.len());
        let positive: Vec<Radius> = self.codes_sorted[1..]
            .iter()
            .map(|&c| self.code_radius(c))
            .collect();
        grid.push(positive[0].mul_frac(1, 2));
        for (i, r) in positive.iter().enumerate() {
            grid.push(r.clone());
            if i + 1 < positive.len() {
                grid.push(r.midpoint(&positive[i + 1]));
            }
        }
        grid
    }

    /// Spot-check translation invariance of ball masses: compares a sample of
    /// centers against center `0` on the given thresholds. Exact equality is
    /// required. Returns the number of (center, threshold) pairs checked.
    fn verify_invariance(&self, thrs: &[u64], seed: u64) -> Result<u64> {
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed ^ 0x1517_a77e);
        let mut checked = 0u64;
        let centers: Vec<usize> = (0..8.min(self.len()))
            .map(|_| rng.gen_range(0..self.len()))
            .collect();
        for &thr in thrs {
            let base = self.ball_mass(0, thr);
            for &c in &centers {
                let got: u128 = (0..self.len())
                    .filter(|&y| self.dist_code(c, y) <= thr)
                    .map(|y| self.weights[y] as u128)
                    .sum();
                if got != base {
                    return Err(Error::InvalidParam(format!(
                        "invariance spot check failed at center {c}, threshold {thr}: \
                         mass {got} != {base}"
                    )));
                }
                checked += 1;
            }
        }
        Ok(checked)
    }
}

/// Digit-wise modular addition of two base-`q` indices with `digits` digits.
#[inline]
fn add_base(a: u64, b: u64, q: u64, digits: u32) -> u64 {
    let (mut a, mut b) = (a, b);
    let mut out = 0u64;
    let mut mult = 1u64;
    for _ in 0..digits {
        out += ((a % q + b % q) % q) * mult;
        a /= q;
        b /= q;
        mult *= q;
    }
    out
}

#[inline]
fn add_base3(a: u64, b: u64, digits: u32) -> u64 {
    add_base(a, b, 3, digits)
}

/// Digit-wise modular negation.
#[inline]
fn neg_base(a: u64, q: u64, digits: u32) -> u64 {
    let mut a = a;
    let mut out = 0u64;
    let mut mult = 1u64;
    for _ in 0..digits {
        out += ((q - a % q) % q) * mult;
        a /= q;
        mult *= q;
    }
    out
}

/// Outcome of a triangle-inequality verification.
#[derive(Debug, Clone, Serialize)]
pub struct TriangleReport {
    pub mode: String,
    pub triples: u64,
}

// ---------------------------------------------------------------------------
// Regularity checks
// ---------------------------------------------------------------------------

/// Which volume-regularity condition to verify.
#[derive(Debug, Clone)]
pub enum RegCheck {
    /// `mu(B(x, 2r)) <= bound * mu(B(x, r))` for all centers and grid radii.
    Doubling { bound: Rat },
    /// `mu(B(x, (1 + 1/n) r)) <= bound * mu(B(x, r))`.
    Micro { n: u32, bound: Rat },
    /// `mu(B(x, (1 + 1/n) r)) <= bound * mu(B(y, r))` for all `y` in `B(x, r)`.
    StrongMicro { n: u32, bound: Rat },
    /// `lo * r^n <= mu(B(x, r)) / normalizer <= hi * r^n`, for radii whose
    /// exact `n`-th power is rational (pure power-of-three radii qualify).
    AhlforsDavid {
        n_dim: u32,
        lo: Rat,
        hi: Rat,
        normalizer: u128,
    },
}

/// Witness row for the worst ratio found by a regularity sweep.
#[derive(Debug, Clone, Serialize)]
pub struct RegWitness {
    pub center: usize,
    pub inner_center: Option<usize>,
    pub radius: String,
    pub lhs: String,
    pub rhs: String,
}

/// Outcome of a regularity sweep.
#[derive(Debug, Clone, Serialize)]
pub struct RegReport {
    pub kind: String,
    pub pass: bool,
    /// Worst ratio `lhs/rhs` encountered (1.0 means tight).
    pub worst_ratio: f64,
    pub worst_ratio_exact: String,
    pub witness: Option<RegWitness>,
    pub centers_mode: String,
    pub grid_size: usize,
}

/// Sweep a regularity condition over a radii grid.
///
/// Centers: invariant spaces are verified by a sampled exact invariance check
/// and then swept at a single center; small spaces are swept at every center;
/// large non-invariant spaces fall back to 64 sampled centers.
pub fn regularity_check(
    sp: &Space,
    check: &RegCheck,
    grid: &[Radius],
    seed: u64,
) -> Result<RegReport> {
    let (centers, centers_mode): (Vec<usize>, String) = if sp.is_invariant() {
        let thrs: Vec<u64> = grid.iter().take(16).map(|r| sp.lower_radius(r)).collect();
        let pairs = sp.verify_invariance(&thrs, seed)?;
        (
            vec![0],
            format!("single center (invariance spot-checked on {pairs} pairs)"),
        )
    } else if sp.len() <= 2048 {
        ((0..sp.len()).collect(), "all centers".into())
    } else {
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        (
            (0..64).map(|_| rng.gen_range(0..sp.len())).collect(),
            "64 sampled centers".into(),
        )
    };

    let kind_name = match check {
        RegCheck::Doubling { .. } => "doubling",
        RegCheck::Micro { .. } => "microdoubling",
        RegCheck::StrongMicro { .. } => "strong-microdoubling",
        RegCheck::AhlforsDavid { .. } => "ahlfors-david",
    };

    let mut worst: Option<(Rat, RegWitness)> = None;
    let mut pass = true;

    let mut consider = |ratio: Rat, wit: RegWitness, bound: &Rat, worst: &mut Option<(Rat, RegWitness)>| {
        if ratio > *bound {
            pass = false;
        }
        if worst.as_ref().map_or(true, |(w, _)| ratio > *w) {
            *worst = Some((ratio, wit));
        }
    };

    for r in grid {
        if r.is_zero() {
            continue;
        }
        let thr = sp.lower_radius(r);
        match check {
            RegCheck::Doubling { bound } | RegCheck::Micro { bound, .. } => {
                let outer = match check {
                    RegCheck::Doubling { .. } => r.double(),
                    RegCheck::Micro { n, .. } => r.mul_frac(*n as i128 + 1, *n as i128),
                    _ => unreachable!(),
                };
                let thr_out = sp.lower_radius(&outer);
                for &x in &centers {
                    let inner = sp.ball_mass(x, thr);
                    let outerm = sp.ball_mass(x, thr_out);
                    let ratio = rat(outerm as i128, inner as i128);
                    consider(
                        ratio,
                        RegWitness {
                            center: x,
                            inner_center: None,
                            radius: r.display(),
                            lhs: outerm.to_string(),
                            rhs: inner.to_string(),
                        },
                        bound,
                        &mut worst,
                    );
                }
            }
            RegCheck::StrongMicro { n, bound } => {
                let outer = r.mul_frac(*n as i128 + 1, *n as i128);
                let thr_out = sp.lower_radius(&outer);
                for &x in &centers {
                    let outerm = sp.ball_mass(x, thr_out);
                    if sp.is_invariant() {
                        // All inner balls have equal mass by invariance.
                        let inner = sp.ball_mass(x, thr);
                        let ratio = rat(outerm as i128, inner as i128);
                        consider(
                            ratio,
                            RegWitness {
                                center: x,
                                inner_center: Some(x),
                                radius: r.display(),
                                lhs: outerm.to_string(),
                                rhs: inner.to_string(),
                            },
                            bound,
                            &mut worst,
                        );
                    } else {
                        for y in sp.ball(x, thr) {
                            let inner = sp.ball_mass(y as usize, thr);
                            let ratio = rat(outerm as i128, inner as i128);
                            consider(
                                ratio,
                                RegWitness {
                                    center: x,
                                    inner_center: Some(y as usize),
                                    radius: r.display(),
                                    lhs: outerm.to_string(),
                                    rhs: inner.to_string(),
                                },
                                bound,
                                &mut worst,
                            );
                        }
                    }
                }
            }
            RegCheck::AhlforsDavid {
                n_dim,
                lo,
                hi,
                normalizer,
            } => {
                // r^n must be exactly rational: accept pure power-of-three
                // radii (3^(j/n) with the space's exponent denominator).
                let rn = exact_power(sp, r, *n_dim)?;
                for &x in &centers {
                    let mass = rat(sp.ball_mass(x, thr) as i128, *normalizer as i128);
                    let low = lo * rn;
                    let high = hi * rn;
                    // Worst margin max(mass/high, low/mass): > 1 iff the mass
                    // leaves the window, so the unit bound drives pass/fail.
                    let margin = std::cmp::max(mass / high, low / mass);
                    consider(
                        margin,
                        RegWitness {
                            center: x,
                            inner_center: None,
                            radius: r.display(),
                            lhs: crate::exact::fmt_rat(&mass),
                            rhs: format!(
                                "[{}, {}]",
                                crate::exact::fmt_rat(&low),
                                crate::exact::fmt_rat(&high)
                            ),
                        },
                        &Rat::from_integer(1),
                        &mut worst,
                    );
                }
            }
        }
    }

    let (worst_ratio, witness) = match worst {
        Some((w, wit)) => (w, Some(wit)),
        None => (Rat::from_integer(0), None),
    };
    Ok(RegReport {
        kind: kind_name.into(),
        pass,
        worst_ratio: num_traits::ToPrimitive::to_f64(&worst_ratio).unwrap_or(f64::NAN),
        worst_ratio_exact: crate::exact::fmt_rat(&worst_ratio),
        witness,
        centers_mode,
        grid_size: grid.len(),
    })
}

/// Exact rational value of `r^n`, when representable.
fn exact_power(sp: &Space, r: &Radius, n_dim: u32) -> Result<Rat> {
    match r {
        Radius::Lin(a) => {
            let mut acc = Rat::from_integer(1);
            for _ in 0..n_dim {
                acc *= a;
            }
            Ok(acc)
        }
        Radius::Pow3(p) => {
            if p.terms.len() != 1 || !p.terms[0].0.is_integer() {
                return Err(Error::InvalidParam(
                    "Ahlfors-David sweep needs pure power-of-three radii".into(),
                ));
            }
            let (c, e) = p.terms[0].clone();
            let total = e * n_dim as i64;
            let n = match sp.ad_geom() {
                Some(ag) => ag.n_exp as i64,
                None => p.n as i64,
            };
            if total % n != 0 {
                return Err(Error::InvalidParam(format!(
                    "radius^{n_dim} is irrational: exponent {total}/{n}"
                )));
            }
            let j = total / n;
            let mut acc = c.pow(n_dim as i32);
            if j >= 0 {
                acc *= Rat::from_integer(3i128.pow(j as u32));
            } else {
                acc /= Rat::from_integer(3i128.pow((-j) as u32));
            }
            Ok(acc)
        }
        Radius::Quad(a, b) => {
            if b.is_zero() {
                let mut acc = Rat::from_integer(1);
                for _ in 0..n_dim {
                    acc *= a;
                }
                Ok(acc)
            } else if a.is_zero() && n_dim % 2 == 0 {
                let mut acc = Rat::from_integer(1);
                for _ in 0..n_dim / 2 {
                    acc *= b * b * rat(2, 1);
                }
                Ok(acc)
            } else {
                Err(Error::InvalidParam(
                    "quadratic radius has irrational power".into(),
                ))
            }
        }
    }
}

// ---------------------------------------------------------------------------
// Temperedness
// ---------------------------------------------------------------------------

/// Per-radius row of a temperedness check.
#[derive(Debug, Clone, Serialize)]
pub struct TemperedRow {
    pub index: usize,
    pub radius: String,
    /// Exact worst ratio `mu(U_j(x)) / min_y mu(B(y, r_j))` over centers.
    pub ratio: String,
    pub ratio_f64: f64,
}

/// Outcome of a temperedness check on an increasing radii sequence.
#[derive(Debug, Clone, Serialize)]
pub struct TemperedReport {
    pub pass: bool,
    pub bound: String,
    pub rows: Vec<TemperedRow>,
    pub witness: Option<(usize, usize, usize)>,
    pub centers_mode: String,
}

/// Check the temperedness condition for an increasing radii sequence: for
/// every `j` and center `x`, the union of `B(x, r_j)` with all enlarged balls
/// `B(x, r_j, r_i)`, `i < j`, must have mass at most `bound` times the mass
/// of the smallest ball `B(y, r_j)` over `y` in `B(x, r_j)`.
pub fn tempered_check(sp: &Space, radii: &[Radius], bound: &Rat, seed: u64) -> Result<TemperedReport> {
    for w in radii.windows(2) {
        if w[0].cmp_exact(&w[1]) != Ordering::Less {
            return Err(Error::InvalidParam(
                "tempered check needs strictly increasing radii".into(),
            ));
        }
    }
    let thrs: Vec<u64> = radii.iter().map(|r| sp.lower_radius(r)).collect();

    let (centers, centers_mode): (Vec<usize>, String) = if sp.is_invariant() {
        let pairs = sp.verify_invariance(&thrs, seed)?;
        (
            vec![0],
            format!("single center (invariance spot-checked on {pairs} pairs)"),
        )
    } else {
        ((0..sp.len()).collect(), "all centers".into())
    };

    let mut rows = Vec::new();
    let mut pass = true;
    let mut witness = None;

    for (j, rj) in radii.iter().enumerate() {
        let tj = thrs[j];
        let mut worst = Rat::from_integer(0);
        for &x in &centers {
            // U_j(x) = B(x, r_j) union of B(x, r_j, r_i) for i < j.
            let mut mark = vec![false; sp.len()];
            let mut umass = 0u128;
            let add_points = |pts: &[u32], mark: &mut Vec<bool>, umass: &mut u128| {
                for &p in pts {
                    if !mark[p as usize] {
                        mark[p as usize] = true;
                        *umass += sp.weight(p as usize) as u128;
                    }
                }
            };
            add_points(&sp.ball(x, tj), &mut mark, &mut umass);
            for ti in thrs.iter().take(j) {
                add_points(&sp.enlarged_ball(x, tj, *ti), &mut mark, &mut umass);
            }
            // Smallest same-radius ball centered inside B(x, r_j).
            let (mut min_mass, mut min_y) = (u128::MAX, x);
            if sp.is_invariant() {
                min_mass = sp.ball_mass(x, tj);
            } else {
                for y in sp.ball(x, tj) {
                    let m = sp.ball_mass(y as usize, tj);
                    if m < min_mass {
                        min_mass = m;
                        min_y = y as usize;
                    }
                }
            }
            let ratio = rat(umass as i128, min_mass as i128);
            if ratio > worst {
                worst = ratio;
            }
            if ratio > *bound {
                pass = false;
                if witness.is_none() {
                    witness = Some((j, x, min_y));
                }
            }
        }
        rows.push(TemperedRow {
            index: j,
            radius: rj.display(),
            ratio: crate::exact::fmt_rat(&worst),
            ratio_f64: num_traits::ToPrimitive::to_f64(&worst).unwrap_or(f64::NAN),
        });
    }

    Ok(TemperedReport {
        pass,
        bound: crate::exact::fmt_rat(bound),
        rows,
        witness,
        centers_mode,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::construct;

    #[test]
    fn torus_basic_geometry() {
        let sp = construct::torus(16).unwrap();
        assert_eq!(sp.len(), 16);
        assert_eq!(sp.dist_code(1, 15), 2);
        assert_eq!(sp.dist_code(0, 8), 8);
        assert_eq!(sp.diam_code(), 8);
        assert_eq!(sp.ball_mass(3, 2), 5);
        assert!(sp.is_invariant());
        sp.check_triangle(7, 0).unwrap();
    }

    #[test]
    fn lower_radius_is_exact_on_torus() {
        let sp = construct::torus(10).unwrap();
        assert_eq!(sp.lower_radius(&Radius::lin(1, 2)), 0);
        assert_eq!(sp.lower_radius(&Radius::lin(1, 1)), 1);
        assert_eq!(sp.lower_radius(&Radius::lin(7, 2)), 3);
        assert_eq!(sp.lower_radius(&Radius::lin(100, 1)), 5);
    }

    #[test]
    fn star_weights_and_distances() {
        let sp = construct::star(5).unwrap();
        // Hub weight K-1 = 4, (K-1)^2 = 16 unit spokes.
        assert_eq!(sp.len(), 17);
        assert_eq!(sp.total_mass(), 20);
        assert_eq!(sp.weight(0), 4);
        assert_eq!(sp.dist_code(0, 3), 1);
        assert_eq!(sp.dist_code(2, 3), 2);
        sp.check_triangle(7, 0).unwrap();
    }

    #[test]
    fn euclidean_star_radius_domain() {
        let sp = construct::euclidean_star(4).unwrap();
        assert_eq!(sp.radius_domain(), "quadratic");
        // Ball of radius 1 around a basis point holds it and the origin.
        let thr = sp.lower_radius(&Radius::Quad(rat(1, 1), rat(0, 1)));
        assert_eq!(sp.ball_mass(1, thr), 2);
        // Radius 1.4 < sqrt(2) still excludes other basis points.
        let thr = sp.lower_radius(&Radius::Quad(rat(7, 5), rat(0, 1)));
        assert_eq!(sp.ball_mass(1, thr), 2);
        // Radius sqrt(2) picks up everything.
        let thr = sp.lower_radius(&Radius::Quad(rat(0, 1), rat(1, 1)));
        assert_eq!(sp.ball_mass(1, thr), 5);
        sp.check_triangle(7, 0).unwrap();
    }

    #[test]
    fn generic_space_rejects_triangle_violation() {
        // d(0,2) = 5 > d(0,1) + d(1,2) = 2.
        let codes = vec![0, 1, 5, 1, 0, 1, 5, 1, 0];
        let err = construct::generic(vec![1, 1, 1], codes).unwrap_err();
        assert!(matches!(err, Error::Triangle { .. }));
    }

    #[test]
    fn doubling_check_on_torus() {
        let sp = construct::torus(64).unwrap();
        let grid = sp.default_grid();
        let rep = regularity_check(&sp, &RegCheck::Doubling { bound: rat(3, 1) }, &grid, 5).unwrap();
        assert!(rep.pass, "torus is 3-doubling: {rep:?}");
        // The bound 3 is attained below the minimal distance: mu(B(x,1)) = 3
        // while mu(B(x,1/2)) = 1. (On integer radii the worst ratio is 5/3.)
        assert_eq!(rep.worst_ratio_exact, "3");
    }

    #[test]
    fn tempered_check_accepts_torus_and_rejects_heavy_tail() {
        let sp = construct::torus(64).unwrap();
        let radii = vec![Radius::lin(1, 1), Radius::lin(2, 1), Radius::lin(4, 1)];
        let rep = tempered_check(&sp, &radii, &rat(2, 1), 3).unwrap();
        assert!(rep.pass);

        // Path with a heavy far endpoint: the enlarged ball grabs the heavy
        // point while every same-radius ball near the center stays light.
        let n = 8usize;
        let mut codes = vec![0u64; n * n];
        for i in 0..n {
            for j in 0..n {
                codes[i * n + j] = (i as i64 - j as i64).unsigned_abs();
            }
        }
        let mut weights = vec![1u64; n];
        weights[3] = 100;
        let sp = construct::generic(weights, codes).unwrap();
        let radii = vec![Radius::lin(1, 1), Radius::lin(2, 1)];
        let rep = tempered_check(&sp, &radii, &rat(2, 1), 3).unwrap();
        assert!(!rep.pass);
        assert!(rep.witness.is_some());
    }
}
