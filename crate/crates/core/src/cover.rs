//! Poisson-process ball coverings: extended balls, exact intensity
//! functions, two-stage Poisson sampling over a finite space, exact
//! first/second-moment diagnostics, the randomized-Vitali weak (1,1) gate,
//! and subexponential radii selection.
//!
//! All set and intensity computations are exact (integer masses, rational
//! intensities); randomness enters only through the sampling trials, which
//! use splittable per-trial seeds so reports are bit-identical for a fixed
//! master seed.

use num_traits::{One, Signed, Zero};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::err::{Error, Result};
use crate::exact::{big, big_to_f64, fmt_rat, rat, Radius, Rat};
use crate::maximal::{maximal_profile, Func, RadiiSet, Variant};
use crate::partition::mix_seed;
use crate::space::{tempered_check, Space, TemperedReport};

/// Certified rational lower bound of `2e/(e-1) = 3.16395...`; asserting the
/// covering inequality against this smaller constant is strictly harder, so
/// an exact-rational pass implies the true bound.
pub const VITALI_CONSTANT_LB: (i128, i128) = (3163, 1000);

// ---------------------------------------------------------------------------
// Extended balls and intensities
// ---------------------------------------------------------------------------

/// Exact extended ball `B*(x) = B(x, r_k) ∪ ⋃_i B(x, r_k, r_i)` where
/// `B(x, r, r') = { z : d(x,y) <= r and d(y,z) <= r' for some y }`.
/// Radii are given as distance codes; the lower codes must sit strictly
/// below `r_k`. Always contains `B(x, r_k)`.
pub fn extended_ball(
    space: &Space,
    x: usize,
    rk_code: u64,
    lower_codes: &[u64],
) -> Result<Vec<u32>> {
    if lower_codes.iter().any(|&c| c >= rk_code) {
        return Err(Error::InvalidParam(
            "extended ball needs all lower radii strictly below r_k".into(),
        ));
    }
    let mut mark = vec![false; space.len()];
    for y in space.ball(x, rk_code) {
        mark[y as usize] = true;
    }
    for &c in lower_codes {
        for z in space.enlarged_ball(x, rk_code, c) {
            mark[z as usize] = true;
        }
    }
    Ok((0..space.len())
        .filter(|&z| mark[z])
        .map(|z| z as u32)
        .collect())
}

/// Mass of the extended ball around `y`.
fn extended_ball_mass(space: &Space, y: usize, rk_code: u64, lower_codes: &[u64]) -> Result<u128> {
    Ok(extended_ball(space, y, rk_code, lower_codes)?
        .into_iter()
        .map(|z| space.weight(z as usize) as u128)
        .sum())
}

/// Exact intensity table over a level set `E_k`:
/// `p(x) = inf_{y in B(x, r_k)} 1 / mu(B*(y))`, one rational per point.
#[derive(Debug, Clone)]
pub struct IntensityTable {
    /// The points of `E_k`, in the order the table was built.
    pub points: Vec<u32>,
    /// `p(x)` per point of `E_k`.
    pub p: Vec<Rat>,
    pub rk_code: u64,
    pub lower_codes: Vec<u64>,
    /// `P = sum_{x in E_k} p(x) mu(x)` — the Poisson process total mass.
    pub total: Rat,
}

/// Build the intensity table for `E_k` with top radius `r_k` and the earlier
/// radii `lower_codes` (all strictly below `r_k`). An empty `E_k` yields an
/// empty table with total 0. The infimum is a minimum over the finite ball,
/// computed exactly; on invariant spaces `mu(B*(y))` is center-free, so the
/// table is constant.
pub fn intensity(
    space: &Space,
    e_k: &[u32],
    rk_code: u64,
    lower_codes: &[u64],
) -> Result<IntensityTable> {
    let lower: Vec<u64> = lower_codes.to_vec();
    let mut p = Vec::with_capacity(e_k.len());
    let mut total = Rat::zero();
    if space.is_invariant() {
        if !e_k.is_empty() {
            let mass = extended_ball_mass(space, 0, rk_code, &lower)?;
            let px = rat(1, mass as i128);
            for &x in e_k {
                p.push(px);
                total += px * rat(space.weight(x as usize) as i128, 1);
            }
        }
    } else {
        let mut memo: Vec<Option<u128>> = vec![None; space.len()];
        for &x in e_k {
            let mut worst = 0u128;
            for y in space.ball(x as usize, rk_code) {
                let m = match memo[y as usize] {
                    Some(m) => m,
                    None => {
                        let m = extended_ball_mass(space, y as usize, rk_code, &lower)?;
                        memo[y as usize] = Some(m);
                        m
                    }
                };
                worst = worst.max(m);
            }
            let px = rat(1, worst as i128);
            p.push(px);
            total += px * rat(space.weight(x as usize) as i128, 1);
        }
    }
    Ok(IntensityTable {
        points: e_k.to_vec(),
        p,
        rk_code,
        lower_codes: lower,
        total,
    })
}

/// Exact `alpha(y) = sum_{x in E_k ∩ B(y, r_k)} p(x) mu(x)` — the expected
/// number of process points covering `y`.
pub fn alpha_y(space: &Space, table: &IntensityTable, y: usize) -> Rat {
    let mut acc = Rat::zero();
    for (&x, px) in table.points.iter().zip(&table.p) {
        if space.dist_code(y, x as usize) <= table.rk_code {
            acc += *px * rat(space.weight(x as usize) as i128, 1);
        }
    }
    acc
}

/// Maximum of `alpha(y)` over the whole space, with a witness point. The
/// construction guarantees `alpha(y) <= 1` exactly; a larger value is a bug.
pub fn alpha_max(space: &Space, table: &IntensityTable) -> (usize, Rat) {
    let mut best = (0usize, Rat::zero());
    for y in 0..space.len() {
        let a = alpha_y(space, table, y);
        if a > best.1 {
            best = (y, a);
        }
    }
    best
}

/// Exact first moment `alpha_w = sum_{x in E_k} w(x) p(x) mu(x)` of the
/// process sum `sum_{x in Sigma} w(x)`; `w` is aligned with `table.points`.
pub fn alpha_w(space: &Space, table: &IntensityTable, w: &[Rat]) -> Rat {
    let mut acc = Rat::zero();
    for ((&x, px), wx) in table.points.iter().zip(&table.p).zip(w) {
        acc += *wx * *px * rat(space.weight(x as usize) as i128, 1);
    }
    acc
}

/// Smallest index with `p(x) < 1/(bound * mu(B(x, r_k)))` — the lower bound
/// on the intensity that temperedness guarantees. `None` means the bound
/// holds everywhere (exactly).
pub fn intensity_lower_bound_violation(
    space: &Space,
    table: &IntensityTable,
    bound: &Rat,
) -> Option<usize> {
    for (i, (&x, px)) in table.points.iter().zip(&table.p).enumerate() {
        let ball = rat(space.ball_mass(x as usize, table.rk_code) as i128, 1);
        if *px * *bound * ball < Rat::one() {
            return Some(i);
        }
    }
    None
}

// ---------------------------------------------------------------------------
// Poisson sampling
// ---------------------------------------------------------------------------

/// One sampled Poisson cover: the selected multiset `Sigma ⊆ E_k`, the union
/// of extended balls `E'`, and the union of top-radius balls `F ⊆ E'`.
#[derive(Debug, Clone)]
pub struct PoissonCoverSample {
    /// Index of the top radius in its radii sequence.
    pub level: usize,
    /// `(point, multiplicity)` pairs, sorted by point (atoms can repeat).
    pub sigma: Vec<(u32, u32)>,
    /// Total number of draws `N ~ Poisson(P)`.
    pub n_drawn: u64,
    /// `E' = ∪_{x in Sigma} B*(x)` as an indicator.
    pub e_prime: Vec<bool>,
    /// `F = ∪_{x in Sigma} B(x, r_k)` as an indicator.
    pub f_set: Vec<bool>,
    /// The intensity table the sample was drawn from.
    pub table: IntensityTable,
    pub seed: u64,
}

/// Draw `N ~ Poisson(lambda)` by Knuth's product-of-uniforms method, chunked
/// so `e^-lambda` never underflows (Poisson additivity keeps it exact in
/// distribution).
fn poisson_count<R: Rng>(rng: &mut R, lambda: f64) -> u64 {
    let mut remaining = lambda;
    let mut n = 0u64;
    while remaining > 0.0 {
        let chunk = remaining.min(256.0);
        remaining -= chunk;
        let limit = (-chunk).exp();
        let mut prod = 1.0f64;
        loop {
            prod *= rng.gen::<f64>();
            if prod < limit {
                break;
            }
            n += 1;
        }
    }
    n
}

/// Draw the multiset `Sigma`: `N ~ Poisson(P)` followed by `N` iid draws
/// from `p * mu / P` on `E_k`. Returns `(point, multiplicity)` pairs sorted
/// by point index.
fn draw_sigma(space: &Space, table: &IntensityTable, seed: u64) -> (Vec<(u32, u32)>, u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let lambda = big_to_f64(&big(&table.total));
    if lambda <= 0.0 || table.points.is_empty() {
        return (Vec::new(), 0);
    }
    let n = poisson_count(&mut rng, lambda);
    // Categorical draws over q_x = p(x) mu(x); the cumulative table is f64
    // (sampling noise dominates the rounding by many orders of magnitude).
    let mut cum = Vec::with_capacity(table.points.len());
    let mut acc = 0.0f64;
    for (&x, px) in table.points.iter().zip(&table.p) {
        acc += big_to_f64(&big(px)) * space.weight(x as usize) as f64;
        cum.push(acc);
    }
    let mut mult = std::collections::BTreeMap::<u32, u32>::new();
    for _ in 0..n {
        let u = rng.gen::<f64>() * acc;
        let idx = cum.partition_point(|&c| c <= u).min(table.points.len() - 1);
        *mult.entry(table.points[idx]).or_insert(0) += 1;
    }
    (mult.into_iter().collect(), n)
}

/// Two-stage Poisson sample of a cover at the given level: draw `Sigma`,
/// then materialize `F = ∪ B(x, r_k)` and `E' = ∪ B*(x) ⊇ F`.
pub fn sample_poisson(
    space: &Space,
    table: &IntensityTable,
    level: usize,
    seed: u64,
) -> Result<PoissonCoverSample> {
    let (sigma, n_drawn) = draw_sigma(space, table, seed);
    let mut e_prime = vec![false; space.len()];
    let mut f_set = vec![false; space.len()];
    for &(x, _) in &sigma {
        for y in space.ball(x as usize, table.rk_code) {
            f_set[y as usize] = true;
        }
        for z in extended_ball(space, x as usize, table.rk_code, &table.lower_codes)? {
            e_prime[z as usize] = true;
        }
    }
    Ok(PoissonCoverSample {
        level,
        sigma,
        n_drawn,
        e_prime,
        f_set,
        table: table.clone(),
        seed,
    })
}

/// Exhaustive per-sample consistency: `E' ⊇ F`, and the indicator logic
/// `1_F(y) = 1 iff |Sigma ∩ B(y, r_k)| >= 1` point by point.
pub fn check_sample(space: &Space, sample: &PoissonCoverSample) -> Result<()> {
    for y in 0..space.len() {
        if sample.f_set[y] && !sample.e_prime[y] {
            return Err(Error::InvalidParam(format!(
                "cover sample inconsistency: F not inside E' at point {y}"
            )));
        }
        let covered = sample
            .sigma
            .iter()
            .any(|&(x, _)| space.dist_code(y, x as usize) <= sample.table.rk_code);
        if covered != sample.f_set[y] {
            return Err(Error::InvalidParam(format!(
                "cover sample inconsistency: F indicator mismatch at point {y}"
            )));
        }
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Monte Carlo moment diagnostics
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize)]
pub struct MomentRow {
    pub w_desc: String,
    /// Exact expectation `alpha_w`.
    pub alpha_w: String,
    pub alpha_w_f64: f64,
    pub empirical_mean: f64,
    /// `3 sqrt(alpha_{w^2} / trials)` — three standard errors of the mean
    /// (the process sum has variance `alpha_{w^2}` exactly).
    pub three_sigma: f64,
    pub pass: bool,
}

#[derive(Debug, Clone, Serialize)]
pub struct MomentsReport {
    pub trials: u64,
    pub seed: u64,
    pub rows: Vec<MomentRow>,
    pub pass: bool,
}

/// Empirical check that `E[sum_{x in Sigma} w(x)] = alpha_w` for each given
/// weight, within three exact-variance standard errors of the Monte Carlo
/// mean. Trials run in parallel under splittable seeds.
pub fn poisson_moment_check(
    space: &Space,
    table: &IntensityTable,
    weights: &[(String, Vec<Rat>)],
    trials: u64,
    seed: u64,
) -> Result<MomentsReport> {
    if trials == 0 {
        return Err(Error::InvalidParam("moment check needs at least one trial".into()));
    }
    for (desc, w) in weights {
        if w.len() != table.points.len() {
            return Err(Error::InvalidParam(format!(
                "weight '{desc}' has {} entries for {} process points",
                w.len(),
                table.points.len()
            )));
        }
    }
    let w_f64: Vec<Vec<f64>> = weights
        .iter()
        .map(|(_, w)| w.iter().map(|v| big_to_f64(&big(v))).collect())
        .collect();
    let index_of: std::collections::HashMap<u32, usize> = table
        .points
        .iter()
        .enumerate()
        .map(|(i, &x)| (x, i))
        .collect();
    let sums: Vec<f64> = (0..trials)
        .into_par_iter()
        .map(|t| {
            let (sigma, _) = draw_sigma(space, table, mix_seed(seed, t));
            let mut acc = vec![0.0f64; weights.len()];
            for &(x, m) in &sigma {
                let i = index_of[&x];
                for (a, wf) in acc.iter_mut().zip(&w_f64) {
                    *a += wf[i] * m as f64;
                }
            }
            acc
        })
        .reduce(
            || vec![0.0f64; weights.len()],
            |mut a, b| {
                for (ai, bi) in a.iter_mut().zip(b) {
                    *ai += bi;
                }
                a
            },
        );
    let mut rows = Vec::with_capacity(weights.len());
    let mut pass = true;
    for (i, (desc, w)) in weights.iter().enumerate() {
        let aw = alpha_w(space, table, w);
        let w2: Vec<Rat> = w.iter().map(|v| v * v).collect();
        let var = alpha_w(space, table, &w2);
        let mean = sums[i] / trials as f64;
        let three_sigma = 3.0 * (big_to_f64(&big(&var)) / trials as f64).sqrt();
        let aw_f = big_to_f64(&big(&aw));
        let row_pass = (mean - aw_f).abs() <= three_sigma;
        pass &= row_pass;
        rows.push(MomentRow {
            w_desc: desc.clone(),
            alpha_w: fmt_rat(&aw),
            alpha_w_f64: aw_f,
            empirical_mean: mean,
            three_sigma,
            pass: row_pass,
        });
    }
    Ok(MomentsReport {
        trials,
        seed,
        rows,
        pass,
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct CoverageReport {
    pub y: usize,
    pub alpha_y: String,
    /// `1 - e^-alpha(y)` — the exact coverage probability of `y` by `F`.
    pub expected: f64,
    pub empirical: f64,
    pub three_sigma: f64,
    pub trials: u64,
    pub pass: bool,
}

/// Empirical check of `Pr[y in F] = 1 - e^-alpha(y)` for one point, within
/// three binomial standard errors.
pub fn coverage_probability_check(
    space: &Space,
    table: &IntensityTable,
    y: usize,
    trials: u64,
    seed: u64,
) -> Result<CoverageReport> {
    if trials == 0 {
        return Err(Error::InvalidParam("coverage check needs at least one trial".into()));
    }
    let hits: u64 = (0..trials)
        .into_par_iter()
        .map(|t| {
            let (sigma, _) = draw_sigma(space, table, mix_seed(seed, t));
            sigma
                .iter()
                .any(|&(x, _)| space.dist_code(y, x as usize) <= table.rk_code)
                as u64
        })
        .sum();
    let a = alpha_y(space, table, y);
    let expected = 1.0 - (-big_to_f64(&big(&a))).exp();
    let empirical = hits as f64 / trials as f64;
    let three_sigma = 3.0 * (expected * (1.0 - expected) / trials as f64).sqrt();
    Ok(CoverageReport {
        y,
        alpha_y: fmt_rat(&a),
        expected,
        empirical,
        three_sigma,
        trials,
        pass: (empirical - expected).abs() <= three_sigma,
    })
}

// ---------------------------------------------------------------------------
// The randomized-Vitali weak (1,1) gate
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize)]
pub struct CoverGateRow {
    pub f_desc: String,
    pub lambda: String,
    /// Exact mass of the strict super-level set `{ max_j A_{r_j}|f| > lambda }`.
    pub level_mass: String,
    /// `lambda * mass`, the quantity the theorem bounds.
    pub quantity: String,
    /// `(3163/1000) * K * |f|_1` — the certified-rational form of the bound.
    pub bound: String,
    pub margin_f64: f64,
    pub pass: bool,
}

#[derive(Debug, Clone, Serialize)]
pub struct CoverGateReport {
    pub space: String,
    pub k_bound: String,
    pub constant: String,
    pub tempered: TemperedReport,
    pub rows: Vec<CoverGateRow>,
    pub worst_margin_f64: f64,
    pub pass: bool,
}

/// Positive radius values realizing the given codes: code 0 becomes half the
/// minimum positive distance (same closed balls, strictly positive value).
fn radii_values_for_codes(space: &Space, codes: &[u64]) -> Vec<Radius> {
    codes
        .iter()
        .map(|&c| {
            if c == 0 {
                space.code_radius(space.min_positive_code()).mul_frac(1, 2)
            } else {
                space.code_radius(c)
            }
        })
        .collect()
}

/// The tempered-radii weak (1,1) gate: verifies the radii are tempered with
/// constant `K` (rejecting with the tempered-check witness otherwise), then
/// for every `f` in the family and every `lambda` in the grid checks the
/// exact inequality
/// `lambda * mu(max_j A_{r_j}|f| > lambda) <= (3163/1000) K |f|_1`,
/// where `3163/1000` is a certified lower bound of the theorem constant
/// `2e/(e-1)` (so a pass here implies the true bound). A violation on
/// tempered input indicates a bug, not a tight instance.
pub fn lindenstrauss_experiment(
    space: &Space,
    radii: &RadiiSet,
    k_const: &Rat,
    f_family: &[Func],
    lambda_grid: &[Rat],
    seed: u64,
) -> Result<CoverGateReport> {
    if lambda_grid.iter().any(|l| !l.is_positive()) {
        return Err(Error::InvalidParam("lambda grid must be positive".into()));
    }
    if f_family.is_empty() {
        return Err(Error::InvalidParam("cover gate needs a nonempty f family".into()));
    }
    let values = radii_values_for_codes(space, radii.codes());
    let tempered = tempered_check(space, &values, k_const, seed)?;
    if !tempered.pass {
        let (j, x, y) = tempered.witness.unwrap_or((0, 0, 0));
        return Err(Error::InvalidParam(format!(
            "radii not tempered with K = {}: witness radius index {j}, center {x}, min-ball center {y}",
            fmt_rat(k_const)
        )));
    }
    let c_lb = rat(VITALI_CONSTANT_LB.0, VITALI_CONSTANT_LB.1);
    let mut rows = Vec::with_capacity(f_family.len() * lambda_grid.len());
    let mut worst = 0.0f64;
    let mut pass = true;
    for f in f_family {
        let profile = maximal_profile(space, f, radii, Variant::Standard)?;
        let l1 = &profile.l1_norm;
        let bound = c_lb * *k_const * *l1;
        for lambda in lambda_grid {
            let mass: u128 = (0..space.len())
                .filter(|&x| profile.values[x] > *lambda)
                .map(|x| space.weight(x) as u128)
                .sum();
            let quantity = *lambda * rat(mass as i128, 1);
            let row_pass = quantity <= bound;
            pass &= row_pass;
            let margin = if bound.is_zero() {
                0.0
            } else {
                big_to_f64(&big(&(quantity / bound)))
            };
            worst = worst.max(margin);
            rows.push(CoverGateRow {
                f_desc: f.desc.clone(),
                lambda: fmt_rat(lambda),
                level_mass: mass.to_string(),
                quantity: fmt_rat(&quantity),
                bound: fmt_rat(&bound),
                margin_f64: margin,
                pass: row_pass,
            });
        }
    }
    Ok(CoverGateReport {
        space: space.name.clone(),
        k_bound: fmt_rat(k_const),
        constant: format!("{}/{}", VITALI_CONSTANT_LB.0, VITALI_CONSTANT_LB.1),
        tempered,
        rows,
        worst_margin_f64: worst,
        pass,
    })
}

// ---------------------------------------------------------------------------
// Subexponential radii selection
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize)]
pub struct SubexpReport {
    /// Selected radii as distance codes, increasing.
    pub codes: Vec<u64>,
    pub radii: Vec<String>,
    /// True when the diameter was reached before `count` radii were found.
    pub truncated: bool,
    /// The exact rational growth factor used in place of `e^tolerance`
    /// (a lower bound, so acceptance is conservative).
    pub factor: String,
    pub tolerance: f64,
    #[serde(skip)]
    pub factor_rat: Rat,
    #[serde(skip)]
    pub radius_values: Vec<Radius>,
}

impl SubexpReport {
    /// The selected radii as a `RadiiSet` (fails if selection was empty).
    pub fn radii_set(&self) -> Result<RadiiSet> {
        RadiiSet::from_codes(self.codes.clone(), "subexponential greedy radii")
    }
}

/// Greedy subexponential radii selection on the realized-distance grid:
/// `r_1` is the smallest positive realized distance, and `r_{j+1}` is the
/// smallest realized radius above `max(r_j, j * r_1)` with
/// `mu(B(x, r_{j+1} + r_j)) <= factor * mu(B(x, r_{j+1}))` at every
/// representative center, where `factor = 1 + tolerance` (rounded to a
/// rational on a 1e-9 grid) is a certified lower bound of `e^tolerance` —
/// the growth condition with logarithms on both sides. Stops with a
/// truncation flag when the grid is exhausted. On a space with
/// center-independent ball masses the selected sequence is tempered with the
/// returned factor as the exact constant.
pub fn subexp_radii(space: &Space, count: usize, tolerance: f64) -> Result<SubexpReport> {
    if !(1e-6..=1.0).contains(&tolerance) {
        return Err(Error::InvalidParam(format!(
            "subexp tolerance must lie in [1e-6, 1], got {tolerance}"
        )));
    }
    if count == 0 {
        return Err(Error::InvalidParam("subexp selection needs count >= 1".into()));
    }
    let num = (tolerance * 1e9).round() as i128;
    let factor = Rat::one() + rat(num, 1_000_000_000);
    let positive: Vec<u64> = space
        .realized_codes()
        .iter()
        .copied()
        .filter(|&c| c > 0)
        .collect();
    let reps: Vec<usize> = if space.is_invariant() {
        vec![0]
    } else {
        (0..space.len()).collect()
    };
    let mut codes: Vec<u64> = Vec::new();
    let mut values: Vec<Radius> = Vec::new();
    let mut truncated = false;
    if let Some(&first) = positive.first() {
        codes.push(first);
        values.push(space.code_radius(first));
    } else {
        truncated = true;
    }
    let unit = values.first().cloned();
    while !truncated && codes.len() < count {
        let j = codes.len();
        let last = values.last().unwrap().clone();
        let floor = {
            // r_{j+1} > max(r_j, j * r_1), strictly.
            let grown = unit.as_ref().unwrap().mul_frac(j as i128, 1);
            if grown.cmp_exact(&last) == std::cmp::Ordering::Greater {
                grown
            } else {
                last.clone()
            }
        };
        let mut chosen = None;
        for &c in &positive {
            let r = space.code_radius(c);
            if r.cmp_exact(&floor) != std::cmp::Ordering::Greater {
                continue;
            }
            let sum_thr = space.lower_radius(&r.add(&last));
            let ok = reps.iter().all(|&x| {
                let grown_mass = rat(space.ball_mass(x, sum_thr) as i128, 1);
                let base_mass = rat(space.ball_mass(x, c) as i128, 1);
                grown_mass <= factor * base_mass
            });
            if ok {
                chosen = Some((c, r));
                break;
            }
        }
        match chosen {
            Some((c, r)) => {
                codes.push(c);
                values.push(r);
            }
            None => truncated = true,
        }
    }
    Ok(SubexpReport {
        codes,
        radii: values.iter().map(|r| r.display()).collect(),
        truncated,
        factor: fmt_rat(&factor),
        tolerance,
        factor_rat: factor,
        radius_values: values,
    })
}

// ---------------------------------------------------------------------------
// Tests
// ---------------------------------------------------------------------------

#[cfg(test)]
mod tests {
    use super::*;
    use crate::construct;

    #[test]
    fn extended_ball_with_no_lower_radii_is_the_ball() {
        let sp = construct::torus(64).unwrap();
        assert_eq!(extended_ball(&sp, 5, 8, &[]).unwrap(), sp.ball(5, 8));
    }

    #[test]
    fn extended_ball_on_a_length_space_adds_radii() {
        // Z_64 is a length space: B(x, 8, 2) = B(x, 10), so the extended
        // ball with lower radius 2 is exactly B(x, 10).
        let sp = construct::torus(64).unwrap();
        for x in [0usize, 17, 40] {
            assert_eq!(extended_ball(&sp, x, 8, &[2]).unwrap(), sp.ball(x, 10));
        }
        // And the lower radii must sit strictly below the top.
        assert!(extended_ball(&sp, 0, 8, &[8]).is_err());
    }

    #[test]
    fn extended_ball_from_the_star_hub_is_everything() {
        let sp = construct::star(5).unwrap();
        let b = extended_ball(&sp, 0, 2, &[1]).unwrap();
        assert_eq!(b.len(), sp.len(), "hub extended ball must cover the space");
    }

    #[test]
    fn intensity_is_constant_on_an_invariant_space() {
        let sp = construct::torus(64).unwrap();
        let e_k: Vec<u32> = (0..22).collect();
        let table = intensity(&sp, &e_k, 5, &[]).unwrap();
        // mu(B*(y)) = mu(B(y,5)) = 11 everywhere, so p = 1/11 and
        // P = 22/11 = 2 exactly.
        assert!(table.p.iter().all(|p| *p == rat(1, 11)));
        assert_eq!(table.total, rat(2, 1));
    }

    #[test]
    fn star_intensity_table_matches_hand_values() {
        // Spokes E_k with r_k = 1: every spoke sees the hub in its ball, the
        // hub's extended ball is the whole space (mass 20), so p = 1/20.
        let sp = construct::star(5).unwrap();
        let e_k: Vec<u32> = (1..=16).collect();
        let table = intensity(&sp, &e_k, 1, &[]).unwrap();
        assert!(table.p.iter().all(|p| *p == rat(1, 20)));
        assert_eq!(table.total, rat(16, 20));
        // alpha at the hub counts all 16 spokes: 16/20 <= 1.
        assert_eq!(alpha_y(&sp, &table, 0), rat(4, 5));
        let (witness, max_a) = alpha_max(&sp, &table);
        assert_eq!(witness, 0);
        assert!(max_a <= Rat::one());
        // Temperedness constant of {1} on the star is 4, and the intensity
        // lower bound 1/(K mu(B(x,1))) = 1/20 is attained exactly.
        assert!(intensity_lower_bound_violation(&sp, &table, &rat(4, 1)).is_none());
    }

    #[test]
    fn alpha_is_at_most_one_across_spaces_and_levels() {
        for sp in [
            construct::torus(64).unwrap(),
            construct::star(5).unwrap(),
            construct::euclidean_star(6).unwrap(),
        ] {
            let codes = sp.realized_codes().to_vec();
            for (i, &rk) in codes.iter().enumerate().skip(1) {
                let e_k: Vec<u32> = (0..sp.len() as u32).collect();
                let table = intensity(&sp, &e_k, rk, &codes[1..i]).unwrap();
                let (_, max_a) = alpha_max(&sp, &table);
                assert!(
                    max_a <= Rat::one(),
                    "alpha exceeded 1 on {} at rk={rk}: {}",
                    sp.name,
                    fmt_rat(&max_a)
                );
            }
        }
    }

    #[test]
    fn empty_level_set_samples_an_empty_process() {
        let sp = construct::torus(16).unwrap();
        let table = intensity(&sp, &[], 3, &[]).unwrap();
        assert!(table.total.is_zero());
        let sample = sample_poisson(&sp, &table, 0, 42).unwrap();
        assert!(sample.sigma.is_empty());
        assert!(!sample.f_set.iter().any(|&b| b));
        check_sample(&sp, &sample).unwrap();
    }

    #[test]
    fn samples_are_internally_consistent_across_seeds() {
        let sp = construct::torus(64).unwrap();
        let e_k: Vec<u32> = (0..22).collect();
        let table = intensity(&sp, &e_k, 5, &[2]).unwrap();
        for seed in 0..50 {
            let sample = sample_poisson(&sp, &table, 1, seed).unwrap();
            check_sample(&sp, &sample).unwrap();
        }
        // Determinism: the same seed reproduces the sample.
        let a = sample_poisson(&sp, &table, 1, 7).unwrap();
        let b = sample_poisson(&sp, &table, 1, 7).unwrap();
        assert_eq!(a.sigma, b.sigma);
    }

    #[test]
    fn process_moments_match_exact_expectations() {
        let sp = construct::torus(64).unwrap();
        let e_k: Vec<u32> = (0..22).collect();
        let table = intensity(&sp, &e_k, 5, &[]).unwrap();
        assert_eq!(table.total, rat(2, 1)); // P = 2 exactly
        let ones = vec![Rat::one(); 22];
        let ramp: Vec<Rat> = (0..22).map(|i| rat(i, 1)).collect();
        let ball_ind: Vec<Rat> = (0..22u32)
            .map(|i| {
                if sp.dist_code(0, i as usize) <= 5 {
                    Rat::one()
                } else {
                    Rat::zero()
                }
            })
            .collect();
        let report = poisson_moment_check(
            &sp,
            &table,
            &[
                ("w = 1 (|Sigma|)".into(), ones),
                ("w = index ramp".into(), ramp),
                ("w = 1_B(0, r_k)".into(), ball_ind),
            ],
            100_000,
            0xA11CE,
        )
        .unwrap();
        assert!(report.pass, "moment rows: {:?}", report.rows);
        // The |Sigma| row also meets the coarse +-0.05 sanity window.
        assert_eq!(report.rows[0].alpha_w, "2");
        assert!((report.rows[0].empirical_mean - 2.0).abs() < 0.05);
    }

    #[test]
    fn coverage_probability_matches_one_minus_exp() {
        let sp = construct::torus(64).unwrap();
        let e_k: Vec<u32> = (0..22).collect();
        let table = intensity(&sp, &e_k, 5, &[]).unwrap();
        // alpha(0) = |{x in E_k : d(0,x) <= 5}| / 11 = 6/11.
        assert_eq!(alpha_y(&sp, &table, 0), rat(6, 11));
        let report = coverage_probability_check(&sp, &table, 0, 20_000, 0xBEEF).unwrap();
        assert!(
            report.pass,
            "coverage {} vs expected {} (3s = {})",
            report.empirical, report.expected, report.three_sigma
        );
    }

    #[test]
    fn cover_gate_reproduces_the_star_profile() {
        // Star with K = 5: hub mass 4, 16 spokes of mass 1; f = hub
        // indicator has |f|_1 = 4. With radii realizing codes {0, 1, 2}
        // the maximal function is 1 at the hub and 4/5 on every spoke, so
        // mu(Mf >= 4/5) = 20 — the whole space.
        let sp = construct::star(5).unwrap();
        let radii = RadiiSet::from_codes(vec![0, 1, 2], "star grid").unwrap();
        let f = Func::indicator(&sp, &[0], "hub indicator");
        let profile = maximal_profile(&sp, &f, &radii, Variant::Standard).unwrap();
        assert_eq!(profile.values[0], rat(1, 1));
        assert!(profile.values[1..].iter().all(|v| *v == rat(4, 5)));
        let mass_at_45: u128 = (0..sp.len())
            .filter(|&x| profile.values[x] >= rat(4, 5))
            .map(|x| sp.weight(x) as u128)
            .sum();
        assert_eq!(mass_at_45, 20);

        let report = lindenstrauss_experiment(
            &sp,
            &radii,
            &rat(4, 1),
            &[f],
            &[rat(1, 5), rat(1, 2), rat(4, 5)],
            0,
        )
        .unwrap();
        assert!(report.pass);
        // lambda = 1/2: strict level set is still everything (mass 20),
        // quantity 10 against bound (3163/1000) * 4 * 4.
        let row = &report.rows[1];
        assert_eq!(row.level_mass, "20");
        assert_eq!(row.quantity, "10");
        assert!(report.worst_margin_f64 < 1.0);
    }

    #[test]
    fn cover_gate_holds_for_point_masses_on_a_torus() {
        let sp = construct::torus(256).unwrap();
        let all = RadiiSet::lacunary(&sp);
        // Ratio-4 subsequence of the lacunary codes.
        let codes: Vec<u64> = all.codes().iter().copied().step_by(2).collect();
        let radii = RadiiSet::from_codes(codes, "lacunary ratio 4").unwrap();
        let f = Func::delta(&sp, 0);
        let grid: Vec<Rat> = vec![rat(1, 100), rat(1, 10), rat(1, 2), rat(1, 1)];
        let report =
            lindenstrauss_experiment(&sp, &radii, &rat(2, 1), &[f], &grid, 0).unwrap();
        assert!(report.pass);
        assert!(report.worst_margin_f64 < 1.0);
        // f = 0 rows are all trivially zero.
        let zero = Func::from_rats(&vec![Rat::zero(); sp.len()], "zero");
        let zr = lindenstrauss_experiment(&sp, &radii, &rat(2, 1), &[zero], &grid, 0).unwrap();
        assert!(zr.pass);
        assert!(zr.rows.iter().all(|r| r.quantity == "0"));
    }

    #[test]
    fn cover_gate_rejects_non_tempered_radii() {
        // The star with K = 1 claimed as tempered constant: radius 1 at the
        // hub has union mass 20 against min ball mass 5, ratio 4 > 1.
        let sp = construct::star(5).unwrap();
        let radii = RadiiSet::from_codes(vec![1, 2], "star radii").unwrap();
        let f = Func::delta(&sp, 0);
        let err =
            lindenstrauss_experiment(&sp, &radii, &Rat::one(), &[f], &[Rat::one()], 0).unwrap_err();
        match err {
            Error::InvalidParam(msg) => assert!(msg.contains("not tempered"), "{msg}"),
            other => panic!("expected InvalidParam, got {other:?}"),
        }
    }

    #[test]
    fn subexp_selection_on_a_large_torus_matches_hand_arithmetic() {
        // Z_4096, tolerance 0.001 (factor exactly 1001/1000). Ball masses
        // are 2c+1 up to the diameter cap 4096. The greedy condition
        // 1000 * mu(B(c + c')) <= 1001 * mu(B(c)) forces, from c' = 1,
        // the next code c >= 1000; then from c' = 1000 the mass caps at
        // 4096, giving 4096000 <= 1001 (2c+1) i.e. c >= 2046; after which
        // 2047 and 2048 both pass, and the grid is exhausted.
        let sp = construct::torus(4096).unwrap();
        let report = subexp_radii(&sp, 8, 0.001).unwrap();
        assert_eq!(report.factor, "1001/1000");
        assert_eq!(report.codes, vec![1, 1000, 2046, 2047, 2048]);
        assert!(report.truncated);
        // The selected sequence is tempered with the factor as exact bound.
        let tr = tempered_check(&sp, &report.radius_values, &report.factor_rat, 0).unwrap();
        assert!(tr.pass, "tempered rows: {:?}", tr.rows);
        // And the gate accepts it with margin below 1.
        let radii = report.radii_set().unwrap();
        let gate = lindenstrauss_experiment(
            &sp,
            &radii,
            &report.factor_rat,
            &[Func::delta(&sp, 0)],
            &[rat(1, 4096), rat(1, 2)],
            0,
        )
        .unwrap();
        assert!(gate.pass);
    }

    #[test]
    fn subexp_selection_handles_degenerate_spaces() {
        // Single point: no positive realized distance at all.
        let sp = construct::torus(1).unwrap();
        let report = subexp_radii(&sp, 3, 0.001).unwrap();
        assert!(report.codes.is_empty());
        assert!(report.truncated);
        assert!(report.radii_set().is_err());
        // count = 1 returns the smallest realized distance untruncated.
        let sp = construct::torus(64).unwrap();
        let report = subexp_radii(&sp, 1, 0.001).unwrap();
        assert_eq!(report.codes, vec![1]);
        assert!(!report.truncated);
    }
}
