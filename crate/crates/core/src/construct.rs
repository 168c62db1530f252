//! Builders for the concrete spaces: stars, tori, explicit matrices,
//! truncated k-ary trees, and the two group constructions (the dyadic-scale
//! doubling product and the Ahlfors–David regular product).
//!
//! All builders are deterministic. The group constructions return, alongside
//! the space, a fully verified ball-structure table: for every radius band
//! the predicted ball form and measure are computed from closed formulas and
//! compared exactly against the generic ball oracle — the comparison *is*
//! the correctness test of the metric backend.

use serde::Serialize;

use crate::err::{Error, Result};
use crate::exact::{rat, Pow3};
use crate::field::{Field, QuadraticLevels};
use crate::space::{
    AdGeom, DoublingGeom, FlagGeom, Geom, GenericGeom, Space, TreeGeom, DEFAULT_POINT_BUDGET,
};

// ---------------------------------------------------------------------------
// Elementary spaces
// ---------------------------------------------------------------------------

/// Weighted star: one hub of weight `K-1` joined to `(K-1)^2` spokes of unit
/// weight; `d(hub, spoke) = 1`, `d(spoke, spoke') = 2`. Total mass `K(K-1)`.
pub fn star(big_k: u64) -> Result<Space> {
    if big_k < 2 {
        return Err(Error::InvalidParam(format!("star needs K >= 2, got {big_k}")));
    }
    let spokes = (big_k - 1) * (big_k - 1);
    check_budget(1 + spokes as u128, DEFAULT_POINT_BUDGET)?;
    let mut weights = vec![1u64; 1 + spokes as usize];
    weights[0] = big_k - 1;
    Ok(Space::from_parts(
        format!("star(K={big_k})"),
        serde_json::json!({"kind": "star", "K": big_k}),
        weights,
        Geom::Star,
    ))
}

/// The origin and the `n` standard basis vectors with Euclidean distances
/// (`1` and `sqrt(2)`, stored exactly as squared-distance codes) and
/// counting measure.
pub fn euclidean_star(n: u64) -> Result<Space> {
    if n < 1 {
        return Err(Error::InvalidParam(format!(
            "euclidean star needs n >= 1, got {n}"
        )));
    }
    check_budget(n as u128 + 1, DEFAULT_POINT_BUDGET)?;
    Ok(Space::from_parts(
        format!("euclidean_star(n={n})"),
        serde_json::json!({"kind": "euclidean_star", "n": n}),
        vec![1; n as usize + 1],
        Geom::EuclideanStar,
    ))
}

/// The cycle `Z_n` with unit edge lengths and counting measure.
pub fn torus(n: u64) -> Result<Space> {
    if n < 1 {
        return Err(Error::InvalidParam(format!("torus needs n >= 1, got {n}")));
    }
    check_budget(n as u128, DEFAULT_POINT_BUDGET)?;
    Ok(Space::from_parts(
        format!("torus(n={n})"),
        serde_json::json!({"kind": "torus", "n": n}),
        vec![1; n as usize],
        Geom::Torus { n },
    ))
}

/// A space from an explicit row-major distance-code matrix. Validates the
/// matrix shape, zero diagonal, symmetry, positivity off the diagonal, and
/// the triangle inequality (exhaustive up to 500 points, one million random
/// triples above).
pub fn generic(weights: Vec<u64>, codes: Vec<u64>) -> Result<Space> {
    let n = weights.len();
    if codes.len() != n * n {
        return Err(Error::InvalidParam(format!(
            "distance matrix must be {n}x{n}, got {} entries",
            codes.len()
        )));
    }
    check_budget(n as u128, DEFAULT_POINT_BUDGET)?;
    for i in 0..n {
        if codes[i * n + i] != 0 {
            return Err(Error::InvalidParam(format!("nonzero diagonal at {i}")));
        }
        for j in 0..n {
            if codes[i * n + j] != codes[j * n + i] {
                return Err(Error::InvalidParam(format!("asymmetric at ({i}, {j})")));
            }
            if i != j && codes[i * n + j] == 0 {
                return Err(Error::InvalidParam(format!(
                    "zero distance between distinct points ({i}, {j})"
                )));
            }
        }
    }
    let sp = Space::from_parts(
        format!("generic(n={n})"),
        serde_json::json!({"kind": "generic", "points": n}),
        weights,
        Geom::Generic(GenericGeom { n, codes }),
    );
    sp.check_triangle(0x7a1a_b1e5, 1_000_000)?;
    Ok(sp)
}

/// Rooted `k`-ary tree truncated at depth `D`, graph metric, counting
/// measure. Vertices are in breadth-first order (root = 0).
pub fn kary_tree(k: u64, depth: u32, budget: u64) -> Result<Space> {
    if k < 2 {
        return Err(Error::InvalidParam(format!("tree needs k >= 2, got {k}")));
    }
    // (k^(D+1) - 1) / (k - 1) vertices.
    let mut total: u128 = 0;
    let mut level: u128 = 1;
    for _ in 0..=depth {
        total += level;
        level = level.saturating_mul(k as u128);
        if total > budget as u128 {
            return Err(Error::PointBudget {
                needed: total,
                budget,
            });
        }
    }
    check_budget(total, budget)?;
    let n = total as usize;
    let mut parent = vec![0u32; n];
    let mut node_depth = vec![0u8; n];
    let mut child_start = vec![0u32; n + 1];
    let mut children = Vec::with_capacity(n - 1);
    // BFS order: children of node i are contiguous after all earlier nodes'.
    let mut next_child = 1usize;
    for v in 0..n {
        child_start[v] = children.len() as u32;
        if node_depth[v] < depth as u8 {
            for _ in 0..k {
                parent[next_child] = v as u32;
                node_depth[next_child] = node_depth[v] + 1;
                children.push(next_child as u32);
                next_child += 1;
            }
        }
    }
    child_start[n] = children.len() as u32;
    debug_assert_eq!(next_child, n);
    Ok(Space::from_parts(
        format!("kary_tree(k={k}, depth={depth})"),
        serde_json::json!({"kind": "kary_tree", "k": k, "depth": depth}),
        vec![1; n],
        Geom::Tree(TreeGeom {
            k: k as u32,
            depth,
            parent,
            node_depth,
            child_start,
            children,
        }),
    ))
}

fn check_budget(needed: u128, budget: u64) -> Result<()> {
    if needed > budget as u128 {
        return Err(Error::PointBudget { needed, budget });
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Ball structure tables
// ---------------------------------------------------------------------------

/// One verified radius band: on `[lo_code, hi_code)` the ball around the
/// origin has the stated form and measure; `observed_*` are the generic
/// oracle's measures at both ends of the band.
#[derive(Debug, Clone, Serialize)]
pub struct BandRow {
    pub lo_code: u64,
    pub hi_code: u64,
    pub form: String,
    pub predicted: u128,
    pub observed_lo: u128,
    pub observed_hi: u128,
    pub pass: bool,
}

#[derive(Debug, Clone, Serialize)]
pub struct BallStructureTable {
    pub rows: Vec<BandRow>,
    pub pass: bool,
}

impl BallStructureTable {
    fn from_rows(rows: Vec<BandRow>) -> BallStructureTable {
        let pass = rows.iter().all(|r| r.pass);
        BallStructureTable { rows, pass }
    }
}

// ---------------------------------------------------------------------------
// Doubling product space
// ---------------------------------------------------------------------------

/// The doubling product construction together with its verified structure.
pub struct DoublingBuild {
    pub space: Space,
    pub table: BallStructureTable,
    /// The quadratic-level machinery over the first block (kept for the
    /// level-set maximal operator and the dilated radii comparisons).
    pub levels: QuadraticLevels,
}

/// Build the two-block product `X = X_q x F_q^t` where `X_q = F_q^m`
/// (`m = floor(sqrt(q)) = 2` for the supported `q in {5, 7}`) and the metric
/// is `4^j(dv) + 2^(-l_j(du))`, with `j(v)` the minimal flag level containing
/// `v` and `l_j(u)` the deepest quadric fattening containing `u`. Distance
/// codes are fixed-point with scale `2^m`.
///
/// `t <= q` truncates the flag block (the full-depth space is `t = q`).
/// Returns the space plus the exactly verified per-band ball table.
pub fn doubling_product(q: u64, t: u32, budget: u64) -> Result<DoublingBuild> {
    if q != 5 && q != 7 {
        return Err(Error::InvalidParam(format!(
            "doubling product supports q in {{5, 7}}, got {q}"
        )));
    }
    let m = 2u32; // floor(sqrt(5)) = floor(sqrt(7)) = 2
    if t == 0 || t as u64 > q {
        return Err(Error::InvalidParam(format!(
            "flag depth must satisfy 1 <= t <= q, got t={t}"
        )));
    }
    let qm = q.pow(m);
    let qt = q.pow(t);
    check_budget(qm as u128 * qt as u128, budget)?;

    let levels = QuadraticLevels::new(Field::new(q, 1)?, m)?;

    // l_j(u) tables: for j = 0 (E_0 = {0}) and each quadric level j = 1..t
    // (level value z_j = j - 1), the deepest l in 0..=m with
    // u in E_j + W_{-l}, where W_{-l} spans the first m - l coordinates.
    // Built by iterated Minkowski sums with coordinate lines.
    let mut lj: Vec<Vec<u8>> = Vec::with_capacity(t as usize + 1);
    for j in 0..=t {
        let seed: Vec<u64> = if j == 0 {
            vec![0]
        } else {
            levels.level_points(j as u64 - 1)
        };
        lj.push(fattening_depths(&seed, q, m, qm));
    }

    // Subtraction table for the first block: digit-wise mod q.
    let mut u_sub = vec![0u16; (qm * qm) as usize];
    for a in 0..qm {
        for b in 0..qm {
            u_sub[(a * qm + b) as usize] = vec_sub(a, b, q, m) as u16;
        }
    }

    // Base-q digits of the flag block, flattened.
    let mut v_digits = vec![0u8; (qt as usize) * t as usize];
    for v in 0..qt {
        let mut rest = v;
        for d in 0..t as usize {
            v_digits[v as usize * t as usize + d] = (rest % q) as u8;
            rest /= q;
        }
    }

    let space = Space::from_parts(
        format!("doubling_product(q={q}, t={t})"),
        serde_json::json!({"kind": "doubling_product", "q": q, "m": m, "t": t}),
        vec![1; (qm * qt) as usize],
        Geom::Doubling(DoublingGeom {
            q,
            m,
            t,
            qm,
            qt,
            u_sub,
            v_digits,
            lj,
        }),
    );

    let table = doubling_band_table(&space, &levels, q, m, t)?;
    if !table.pass {
        return Err(Error::InvalidParam(
            "doubling product ball table mismatch (metric backend bug)".into(),
        ));
    }
    Ok(DoublingBuild {
        space,
        table,
        levels,
    })
}

/// For each nonzero `u`, the deepest `l` in `0..=m` with `u` in
/// `seed + W_{-l}`; entry 0 is unused. Computed by growing the seed set one
/// coordinate line at a time (`W_{-(l-1)} = W_{-l} + span(e_{m-l+1})`).
fn fattening_depths(seed: &[u64], q: u64, m: u32, qm: u64) -> Vec<u8> {
    let mut depth = vec![0u8; qm as usize];
    let mut in_set = vec![false; qm as usize];
    for &s in seed {
        in_set[s as usize] = true;
        depth[s as usize] = m as u8;
    }
    let mut frontier: Vec<u64> = seed.to_vec();
    for l in (0..m).rev() {
        // Grow by the coordinate line at digit position m - l - 1.
        let pos = m - l - 1;
        let mut new_frontier = Vec::new();
        for &u in &frontier {
            for c in 1..q {
                let v = vec_add_line(u, pos, c, q);
                if !in_set[v as usize] {
                    in_set[v as usize] = true;
                    depth[v as usize] = l as u8;
                    new_frontier.push(v);
                }
            }
        }
        frontier.extend(new_frontier);
    }
    debug_assert!(in_set.iter().all(|&b| b), "W_0 fattening must cover X_q");
    depth
}

/// Add `c * e_(pos+1)` to the digit string `u` (mod q in that digit).
#[inline]
fn vec_add_line(u: u64, pos: u32, c: u64, q: u64) -> u64 {
    let scale = q.pow(pos);
    let digit = (u / scale) % q;
    u + ((digit + c) % q) * scale - digit * scale
}

/// Digit-wise subtraction of base-q strings of length `m`.
fn vec_sub(a: u64, b: u64, q: u64, m: u32) -> u64 {
    let (mut a, mut b) = (a, b);
    let mut out = 0u64;
    let mut mult = 1u64;
    for _ in 0..m {
        out += ((a % q + q - b % q) % q) * mult;
        a /= q;
        b /= q;
        mult *= q;
    }
    out
}

/// Predict every radius band of the doubling metric and verify it against
/// the ball oracle. Code scale: distance `r` has code `r * 2^m`.
fn doubling_band_table(
    space: &Space,
    levels: &QuadraticLevels,
    q: u64,
    m: u32,
    t: u32,
) -> Result<BallStructureTable> {
    let qm = q.pow(m) as u128;
    let scale = 1u64 << m;
    let mut rows: Vec<BandRow> = Vec::new();
    let mut push = |lo: u64, hi: u64, form: String, predicted: u128| {
        let observed_lo = space.ball_mass(0, lo);
        let observed_hi = space.ball_mass(0, hi - 1);
        rows.push(BandRow {
            lo_code: lo,
            hi_code: hi,
            form,
            predicted,
            observed_lo,
            observed_hi,
            pass: observed_lo == predicted && observed_hi == predicted,
        });
    };

    // r < 2^-m: the origin alone.
    push(0, 1, "{0}".into(), 1);
    // 2^-l <= r < 2^-l+1 for l = m..1: the subspace slab W_{-l} x {0}.
    for l in (1..=m).rev() {
        let lo = 1u64 << (m - l);
        push(
            lo,
            lo * 2,
            format!("W_(-{l}) x {{0}}"),
            (q as u128).pow(m - l),
        );
    }
    // 1 <= r < 4: the full first block.
    push(scale, 4 * scale, "X_q x {0}".into(), qm);
    // Flag bands j = 1..t.
    for j in 1..=t {
        let base = scale << (2 * j); // 4^j * 2^m
        let vj_lo = (q as u128).pow(j - 1); // |V_(j-1)|
        let vj = (q as u128).pow(j); // |V_j|
        let prev = qm * vj_lo;
        // r = 4^j exactly: X_q x V_(j-1) plus the new flag cylinder over {0}.
        push(
            base,
            base + 1,
            format!("X_q x V_{} + {{0}} x V_{j}", j - 1),
            prev + (vj - vj_lo),
        );
        // 4^j + 2^-l <= r < 4^j + 2^-l+1: quadric fattening E_j + W_{-l}.
        let fattened = fattened_sizes(levels, j as u64 - 1, q, m);
        for l in (1..=m).rev() {
            let lo = base + (1u64 << (m - l));
            let hi = base + (1u64 << (m - l + 1));
            // The set growing over V_j \ V_(j-1) is (E_j + W_{-l}) u {0}.
            let s = fattened[l as usize] as u128 + u128::from(!fattened_contains_zero(levels, j as u64 - 1, q, m, l));
            push(
                lo,
                hi,
                format!("X_q x V_{} + ((E_{j}+W_(-{l})) u {{0}}) x V_{j}", j - 1),
                prev + s * (vj - vj_lo),
            );
        }
        // 4^j + 1 <= r < 4^(j+1): the full slab X_q x V_j.
        let hi = if j == t {
            space.diam_code() + 1
        } else {
            scale << (2 * (j + 1))
        };
        push(base + scale, hi, format!("X_q x V_{j}"), qm * vj);
    }

    // Every realized code must open some band, and every band that grows the
    // measure must be realized.
    let lo_codes: std::collections::BTreeSet<u64> = rows.iter().map(|r| r.lo_code).collect();
    for &c in space.realized_codes() {
        if !lo_codes.contains(&c) {
            return Err(Error::InvalidParam(format!(
                "realized code {c} is not a predicted band start"
            )));
        }
    }
    let realized: std::collections::BTreeSet<u64> =
        space.realized_codes().iter().copied().collect();
    for w in rows.windows(2) {
        if w[1].predicted > w[0].predicted && !realized.contains(&w[1].lo_code) {
            return Err(Error::InvalidParam(format!(
                "band at code {} grows the ball but is not realized",
                w[1].lo_code
            )));
        }
    }

    Ok(BallStructureTable::from_rows(rows))
}

/// `|E_z + W_{-l}|` for `l = 0..=m` (index `l`), by direct marking.
fn fattened_sizes(levels: &QuadraticLevels, z: u64, q: u64, m: u32) -> Vec<u64> {
    let qm = q.pow(m);
    let mut out = vec![0u64; m as usize + 1];
    for l in 0..=m {
        let mut mark = vec![false; qm as usize];
        for x in levels.level_points(z) {
            mark_coset(&mut mark, x, q, m - l);
        }
        out[l as usize] = mark.iter().filter(|&&b| b).count() as u64;
    }
    out
}

/// Does `E_z + W_{-l}` contain the origin? (Equivalently, does `E_z` meet
/// `W_{-l}` after negation — the subspace is symmetric.)
fn fattened_contains_zero(levels: &QuadraticLevels, z: u64, q: u64, m: u32, l: u32) -> bool {
    // 0 in E_z + W_{-l}  iff  some point of E_z lies in W_{-l} (span of the
    // first m-l digits): all digits at positions >= m-l vanish.
    let cut = q.pow(m - l);
    levels.level_points(z).iter().any(|&x| x < cut)
}

/// Mark every point obtained from `x` by freely varying its first `free`
/// base-`q` digits (the coset of `x` modulo the span of those coordinates).
fn mark_coset(mark: &mut [bool], x: u64, q: u64, free: u32) {
    let span = q.pow(free);
    let base = x - x % span;
    for off in 0..span {
        mark[(base + off) as usize] = true;
    }
}

/// Distance codes of the dilated lacunary radius set for the two-block
/// product: each v-scale radius `4^j` is shifted to `4^j + 2^-m` (one code
/// unit, capturing the quadric slab `E_j x V_j` that sits exactly there),
/// while every other dyadic radius is left alone. A single relative dilation
/// cannot do this — capturing the slab at scale `j` needs
/// `2^-m < eps*4^j < 2^-m+1`, and those windows are disjoint across `j` — so
/// the shift is per-scale. The result is an honest radius set: maximal
/// averages over it lower-bound the full maximal operator.
pub fn dilated_dyadic_codes(m: u32, t: u32) -> Vec<u64> {
    (0..=(2 * t + m))
        .map(|s| {
            let code = 1u64 << s;
            if s >= m + 2 && (s - m) % 2 == 0 {
                code + 1
            } else {
                code
            }
        })
        .collect()
}

// ---------------------------------------------------------------------------
// Quadratic level base space
// ---------------------------------------------------------------------------

/// The flag-ultrametric base space plus its quadric level machinery.
pub struct LevelSpaceBuild {
    pub space: Space,
    pub levels: QuadraticLevels,
}

/// The base space `X_q = F_q^m` with the flag ultrametric
/// `d(u, u') = 2^(-l(u - u'))`, `l(w)` the deepest coordinate subspace
/// `W_(-l) = span(e_1, ..., e_(m-l))` containing `w`. This is the `v = 0`
/// slice of the two-block doubling product and the natural domain of the
/// level-set averaging operator. Codes are fixed-point with scale `2^m`;
/// balls are cosets of the `W` subspaces, with measure `q^(p+1)` at code
/// `2^(p+1)`. `q` must be a prime `<= 4096` or one of the supported
/// extensions `9`, `27`.
pub fn quadratic_level_space(q: u64, m: u32, budget: u64) -> Result<LevelSpaceBuild> {
    let (p, e) = match q {
        9 => (3, 2),
        27 => (3, 3),
        _ => (q, 1),
    };
    let field = Field::new(p, e)?;
    let levels = QuadraticLevels::new(field, m)?;
    check_budget(levels.qm as u128, budget)?;

    let digit_add: Vec<u16> = (0..q)
        .flat_map(|a| (0..q).map(move |b| (a, b)))
        .map(|(a, b)| levels.field.add(a, b) as u16)
        .collect();
    let digit_neg: Vec<u16> = (0..q).map(|a| levels.field.sub(0, a) as u16).collect();

    let space = Space::from_parts(
        format!("quadratic_level_space(q={q}, m={m})"),
        serde_json::json!({"kind": "quadratic_level_space", "q": q, "m": m}),
        vec![1; levels.qm as usize],
        Geom::Flag(FlagGeom {
            q,
            m,
            digit_add,
            digit_neg,
        }),
    );

    // The ball structure is fully determined: realized codes are exactly
    // {0, 2, 4, ..., 2^m} and the ball of code 2^(p+1) is a subspace coset of
    // measure q^(p+1). Verify both against the generic oracle.
    let expected: Vec<u64> = std::iter::once(0)
        .chain((0..m).map(|p| 1u64 << (p + 1)))
        .collect();
    if space.realized_codes() != expected {
        return Err(Error::InvalidParam(
            "flag metric realized codes mismatch (backend bug)".into(),
        ));
    }
    for pos in 0..m {
        let code = 1u64 << (pos + 1);
        let predicted = (q as u128).pow(pos + 1);
        for x in [0, levels.qm / 2, levels.qm - 1] {
            // Enumerate directly (not through the invariant mass cache, which
            // would reduce every center to center 0).
            let got = space.ball(x as usize, code).len() as u128;
            if got != predicted {
                return Err(Error::InvalidParam(format!(
                    "flag ball mass mismatch at x={x}, code={code}: \
                     predicted {predicted}, got {got}"
                )));
            }
        }
    }
    space.check_triangle(0x51ab_3a11, 1_000_000)?;

    Ok(LevelSpaceBuild { space, levels })
}

// ---------------------------------------------------------------------------
// Ahlfors-David regular product space
// ---------------------------------------------------------------------------

/// The AD-regular product construction together with its verified structure.
pub struct AdBuild {
    pub space: Space,
    pub table: BallStructureTable,
    pub levels: QuadraticLevels,
    /// Exact margin check of the structural triangle condition
    /// `3^((M+t)/n) <= 1 + 3^((M+t-k)/n)`.
    pub structural_ok: bool,
    /// Ball-measure window rows (claim window at each breakpoint).
    pub window: Vec<AdWindowRow>,
}

/// Window check row at breakpoint exponent `j`: is
/// `3^j / 3 <= mu(B_j)/mu(X_q) <= 4 * 3^j` exactly?
#[derive(Debug, Clone, Serialize)]
pub struct AdWindowRow {
    pub j: i64,
    pub measure_ratio: String,
    pub lo: String,
    pub hi: String,
    pub pass: bool,
}

/// Build `X = X_q x F_3^t` with `q = 3^k`, `X_q = F_q^m`, `M = m k` ternary
/// coordinates in the first block, and the metric
/// `d(x, y) = min{3^(j/n) : x - y in B_j}` where
///
/// * `B_j = W_j x {0}` for `-M <= j <= 0` (subspace of the first `M+j`
///   ternary coordinates), and
/// * `B_j = (X_q x V_j) u union of E_l x V_l, l <= min(j+k, t)` for
///   `1 <= j <= t`.
///
/// Distances are stored as exponent codes `j + M + 1`. The builder verifies
/// the nesting `B_(-M) = {0} c ... c B_t = X` exhaustively, the ball-measure
/// table exactly, and the triangle inequality: structurally when the margin
/// condition `3^((M+t)/n) <= 1 + 3^((M+t-k)/n)` holds (then a sampled spot
/// check), exhaustively otherwise — aborting with a witness on violation.
pub fn ad_regular(k: u32, m: u32, t: u32, n_exp: u32, budget: u64) -> Result<AdBuild> {
    if !(1..=3).contains(&k) {
        return Err(Error::InvalidParam(format!("need k in 1..=3, got {k}")));
    }
    if m == 0 || t == 0 || n_exp == 0 {
        return Err(Error::InvalidParam("m, t, n must be positive".into()));
    }
    let q = 3u64.pow(k);
    if t as u64 > q {
        return Err(Error::InvalidParam(format!(
            "flag depth must satisfy t <= q = {q}, got t={t}"
        )));
    }
    let qm = q.pow(m);
    let big_m = m * k;
    let p3t = 3u64.pow(t);
    check_budget(qm as u128 * p3t as u128, budget)?;
    if qm > u16::MAX as u64 {
        return Err(Error::InvalidParam(format!(
            "first block too large for the subtraction table: q^m = {qm}"
        )));
    }

    let levels = QuadraticLevels::new(Field::new(3, k)?, m)?;

    // Subtraction table (the additive group is (F_3)^M: ternary digit-wise).
    let mut u_sub = vec![0u32; (qm * qm) as usize];
    for a in 0..qm {
        for b in 0..qm {
            u_sub[(a * qm + b) as usize] = ternary_sub(a, b, big_m) as u32;
        }
    }
    // Quadric level index (1-based: level l has value z_l = l - 1, so
    // l = Q(u) + 1) and highest nonzero ternary coordinate.
    let mut lu = vec![0u16; qm as usize];
    let mut hi3 = vec![0u8; qm as usize];
    for u in 0..qm {
        lu[u as usize] = (levels.q_of(u) + 1) as u16;
        let mut h = 0u32;
        let mut rest = u;
        let mut pos = 0u32;
        while rest > 0 {
            if rest % 3 != 0 {
                h = pos;
            }
            rest /= 3;
            pos += 1;
        }
        hi3[u as usize] = h as u8;
    }

    let space = Space::from_parts(
        format!("ad_regular(k={k}, m={m}, t={t}, n={n_exp})"),
        serde_json::json!({
            "kind": "ad_regular", "k": k, "q": q, "m": m, "t": t, "n": n_exp
        }),
        vec![1; (qm * p3t) as usize],
        Geom::Ad(AdGeom {
            q,
            k,
            m,
            t,
            n_exp,
            qm,
            big_m,
            p3t,
            u_sub,
            lu,
            hi3,
            tri_cube: once_cell::sync::OnceCell::new(),
        }),
    );

    // Structural triangle margin: the only non-trivial triangle case is a
    // subspace shift landing a quadric point outside its level, which costs
    // at most a k-step exponent bump; the worst instance needs
    // 3^((M+t)/n) <= 3^(-M/n) + 3^((t-k)/n), i.e. (after scaling by 3^(M/n))
    // 3^((M+t)/n) <= 1 + 3^((M+t-k)/n).
    let s_hi = (big_m + t) as i64;
    let margin = Pow3::constant(n_exp, rat(1, 1))
        .add(&Pow3::term(n_exp, s_hi - k as i64))
        .add(&Pow3::term(n_exp, s_hi).scale(rat(-1, 1)));
    let structural_ok = margin.sign() != std::cmp::Ordering::Less;

    if structural_ok {
        // Margin holds: spot-check the triangle on a random sample.
        space.check_triangle(0xad5eed, 200_000)?;
    } else {
        // No structural guarantee: verify outright (exhaustive when small),
        // aborting with the violating triple if the metric is invalid.
        let samples = 2_000_000;
        space.check_triangle(0xad5eed, samples)?;
    }

    // Exhaustive nesting check: membership in B_j must be monotone in j and
    // the distance code must be exactly the first containing index.
    verify_ad_nesting(&space, &levels)?;

    // Ball table at every breakpoint code.
    let (table, window) = ad_band_table(&space, &levels, q, m, k, t, big_m);
    if !table.pass {
        return Err(Error::InvalidParam(
            "AD ball table mismatch (metric backend bug)".into(),
        ));
    }

    Ok(AdBuild {
        space,
        table,
        levels,
        structural_ok,
        window,
    })
}

fn ternary_sub(a: u64, b: u64, digits: u32) -> u64 {
    let (mut a, mut b) = (a, b);
    let mut out = 0u64;
    let mut mult = 1u64;
    for _ in 0..digits {
        out += ((a % 3 + 3 - b % 3) % 3) * mult;
        a /= 3;
        b /= 3;
        mult *= 3;
    }
    out
}

/// Structural membership `delta in B_j` straight from the definition.
pub fn ad_in_bj(space: &Space, delta: usize, j: i64) -> bool {
    let ag = space.ad_geom().expect("ad_in_bj needs the AD backend");
    let qm = ag.qm;
    let du = (delta as u64) % qm;
    let dv = (delta as u64) / qm;
    let big_m = ag.big_m as i64;
    if j <= 0 {
        if dv != 0 {
            return false;
        }
        if du == 0 {
            return true;
        }
        // W_j spans the first M + j ternary coordinates.
        let keep = big_m + j;
        let mut rest = du;
        let mut pos = 0i64;
        while rest > 0 {
            if rest % 3 != 0 && pos >= keep {
                return false;
            }
            rest /= 3;
            pos += 1;
        }
        true
    } else {
        // jv(dv): minimal flag level containing dv (0 when dv = 0).
        let mut jv = 0i64;
        let mut rest = dv;
        let mut pos = 0i64;
        while rest > 0 {
            if rest % 3 != 0 {
                jv = pos + 1;
            }
            rest /= 3;
            pos += 1;
        }
        if jv <= j {
            return true;
        }
        // E_l x V_l for l <= min(j + k, t): the level of du must contain dv's
        // flag level.
        let l = ag.lu[du as usize] as i64;
        l <= (j + ag.k as i64).min(ag.t as i64) && jv <= l
    }
}

fn verify_ad_nesting(space: &Space, _levels: &QuadraticLevels) -> Result<()> {
    let ag = space.ad_geom().unwrap();
    let big_m = ag.big_m as i64;
    let t = ag.t as i64;
    for delta in 0..space.len() {
        let mut first: Option<i64> = None;
        let mut seen = false;
        for j in -big_m..=t {
            let inb = ad_in_bj(space, delta, j);
            if inb && first.is_none() {
                first = Some(j);
            }
            if seen && !inb {
                return Err(Error::InvalidParam(format!(
                    "nesting violated: delta {delta} leaves B_{j} after entering"
                )));
            }
            seen = seen || inb;
        }
        let code = space.dist_code(0, delta);
        let expect = match first {
            Some(j) => (j + big_m + 1) as u64,
            None => {
                return Err(Error::InvalidParam(format!(
                    "delta {delta} is in no B_j (B_t should be everything)"
                )))
            }
        };
        let expect = if delta == 0 { 0 } else { expect };
        if code != expect {
            return Err(Error::InvalidParam(format!(
                "distance code mismatch at delta {delta}: code {code}, structural {expect}"
            )));
        }
    }
    Ok(())
}

fn ad_band_table(
    space: &Space,
    levels: &QuadraticLevels,
    q: u64,
    _m: u32,
    k: u32,
    t: u32,
    big_m: u32,
) -> (BallStructureTable, Vec<AdWindowRow>) {
    let mut rows = Vec::new();
    let mut window = Vec::new();
    let qm_mass = space.ball_mass(0, (big_m + 1) as u64); // mu(X_q x {0}) = 3^M
    debug_assert_eq!(qm_mass, (q as u128).pow(space.ad_geom().unwrap().m));
    for j in -(big_m as i64)..=(t as i64) {
        let code = (j + big_m as i64 + 1) as u64;
        let predicted: u128 = if j <= 0 {
            // W_j x {0}: 3^(M + j) points.
            (3u128).pow((big_m as i64 + j) as u32)
        } else {
            // X_q x V_j plus the out-of-slab quadric cylinders.
            let mut mass = (3u128).pow(big_m) * (3u128).pow(j as u32);
            let top = (j + k as i64).min(t as i64);
            for l in (j + 1)..=top {
                let ez = levels.level_size(l as u64 - 1) as u128;
                mass += ez * ((3u128).pow(l as u32) - (3u128).pow(j as u32));
            }
            mass
        };
        let observed = space.ball_mass(0, code);
        let hi_end = if j < t as i64 {
            code // bands are single codes here; both ends coincide
        } else {
            space.diam_code()
        };
        let observed_hi = space.ball_mass(0, hi_end);
        rows.push(BandRow {
            lo_code: code,
            hi_code: code + 1,
            form: format!("B_{j}"),
            predicted,
            observed_lo: observed,
            observed_hi,
            pass: observed == predicted && observed_hi == predicted,
        });
        // Claim window at the breakpoint radius r = 3^(j/n): r^n = 3^j, so
        // (1/3) 3^j <= mu(B_j)/mu(X_q) <= 4 * 3^j, checked exactly.
        let ratio = rat(observed as i128, qm_mass as i128);
        let (lo, hi) = if j >= 0 {
            let p = 3i128.pow(j as u32);
            (rat(p, 3), rat(4 * p, 1))
        } else {
            let p = 3i128.pow((-j) as u32);
            (rat(1, 3 * p), rat(4, p))
        };
        window.push(AdWindowRow {
            j,
            measure_ratio: crate::exact::fmt_rat(&ratio),
            lo: crate::exact::fmt_rat(&lo),
            hi: crate::exact::fmt_rat(&hi),
            pass: lo <= ratio && ratio <= hi,
        });
    }
    (BallStructureTable::from_rows(rows), window)
}
