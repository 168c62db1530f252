//! Finite fields, additive characters, Gauss sums, and quadratic level sets.
//!
//! Supports prime fields `F_p` with direct modular arithmetic and the two
//! ternary extensions `F_9 = F_3[x]/(x^2+1)` and `F_27 = F_3[x]/(x^3+2x+1)`.
//! Field elements are indexed `0..q` by their base-`p` coefficient strings
//! (digit `i` is the coefficient of `x^i`), so the additive group is plain
//! digit-wise arithmetic and only multiplication consults a table.
//!
//! On top of a field, [`QuadraticLevels`] enumerates `X = F_q^m` and the
//! level sets `E_z = {x : x_1^2 + ... + x_m^2 = z}`, which drive the group
//! constructions in [`crate::construct`]. Everything measure-like is exact;
//! only character sums use floating complex arithmetic.

use num_complex::Complex64;
use num_traits::Zero;

use crate::err::{Error, Result};
use crate::exact::Rat;

/// Cap on the field size for table-backed extension arithmetic.
const FIELD_TABLE_CAP: u64 = 4096;

/// A finite field `F_q`, `q = p^e`.
pub struct Field {
    pub p: u64,
    pub e: u32,
    pub q: u64,
    /// Low-degree coefficients of the monic modulus (empty for `e = 1`).
    pub modulus_low: Vec<u64>,
    mul_tab: Option<Vec<u16>>,
    trace_tab: Vec<u8>,
    /// `exp(2 pi i t / p)` for `t` in `0..p`.
    unit_roots: Vec<Complex64>,
}

impl Field {
    /// Construct `F_{p^e}`. Prime fields take any prime `p <= 4096`;
    /// extensions are limited to `F_9` and `F_27`, whose moduli are fixed
    /// and re-verified irreducible at construction.
    pub fn new(p: u64, e: u32) -> Result<Field> {
        if !is_prime(p) {
            return Err(Error::InvalidParam(format!("{p} is not prime")));
        }
        if p > FIELD_TABLE_CAP {
            return Err(Error::InvalidParam(format!(
                "field characteristic {p} exceeds the table cap {FIELD_TABLE_CAP}"
            )));
        }
        let modulus_low: Vec<u64> = match (p, e) {
            (_, 1) => vec![],
            (3, 2) => vec![1, 0],    // x^2 + 1
            (3, 3) => vec![1, 2, 0], // x^3 + 2x + 1
            _ => {
                return Err(Error::InvalidParam(format!(
                    "extension field F_{{{p}^{e}}} is not supported \
                     (only F_9 and F_27 have fixed moduli)"
                )))
            }
        };
        let q = p.pow(e);

        // A monic polynomial of degree <= 3 is irreducible over F_p iff it
        // has no root there; re-verify the hardcoded moduli.
        if e >= 2 {
            debug_assert!(e <= 3);
            for r in 0..p {
                let mut v = 1u64; // leading coefficient
                for &c in modulus_low.iter().rev() {
                    v = (v * r + c) % p;
                }
                if v == 0 {
                    return Err(Error::InvalidParam(format!(
                        "modulus for F_{{{p}^{e}}} has root {r}; not irreducible"
                    )));
                }
            }
        }

        let mul_tab = if e >= 2 {
            let mut tab = vec![0u16; (q * q) as usize];
            for a in 0..q {
                for b in 0..q {
                    tab[(a * q + b) as usize] = poly_mul(a, b, p, e, &modulus_low) as u16;
                }
            }
            Some(tab)
        } else {
            None
        };

        let mut field = Field {
            p,
            e,
            q,
            modulus_low,
            mul_tab,
            trace_tab: Vec::new(),
            unit_roots: (0..p)
                .map(|t| {
                    Complex64::from_polar(1.0, 2.0 * std::f64::consts::PI * t as f64 / p as f64)
                })
                .collect(),
        };

        // Trace to F_p: Tr(a) = a + a^p + ... + a^(p^(e-1)).
        let mut trace_tab = Vec::with_capacity(q as usize);
        for a in 0..q {
            let mut acc = a;
            let mut x = a;
            for _ in 1..e {
                x = field.frobenius(x);
                acc = field.add(acc, x);
            }
            // The trace lands in the prime subfield: constant digit only.
            for i in 1..e {
                debug_assert_eq!((acc / p.pow(i)) % p, 0, "trace left the prime subfield");
            }
            trace_tab.push((acc % p) as u8);
        }
        field.trace_tab = trace_tab;
        Ok(field)
    }

    pub fn elements(&self) -> std::ops::Range<u64> {
        0..self.q
    }

    #[inline]
    pub fn add(&self, a: u64, b: u64) -> u64 {
        if self.e == 1 {
            (a + b) % self.p
        } else {
            digitwise(a, b, self.p, self.e, |x, y, p| (x + y) % p)
        }
    }

    #[inline]
    pub fn neg(&self, a: u64) -> u64 {
        if self.e == 1 {
            (self.p - a) % self.p
        } else {
            digitwise(a, 0, self.p, self.e, |x, _, p| (p - x) % p)
        }
    }

    #[inline]
    pub fn sub(&self, a: u64, b: u64) -> u64 {
        self.add(a, self.neg(b))
    }

    #[inline]
    pub fn mul(&self, a: u64, b: u64) -> u64 {
        match &self.mul_tab {
            Some(tab) => tab[(a * self.q + b) as usize] as u64,
            None => (a * b) % self.p,
        }
    }

    #[inline]
    pub fn sq(&self, a: u64) -> u64 {
        self.mul(a, a)
    }

    fn frobenius(&self, a: u64) -> u64 {
        let mut acc = a;
        for _ in 1..self.p {
            acc = self.mul(acc, a);
        }
        acc
    }

    /// Trace to the prime subfield, as an integer in `0..p`.
    #[inline]
    pub fn trace(&self, a: u64) -> u64 {
        self.trace_tab[a as usize] as u64
    }

    /// Additive character `chi(a) = exp(2 pi i Tr(a) / p)`.
    #[inline]
    pub fn chi(&self, a: u64) -> Complex64 {
        self.unit_roots[self.trace(a) as usize]
    }

    /// Gauss-type sum `sum over x of chi(y x^2)`.
    pub fn gauss_sum(&self, y: u64) -> Complex64 {
        let mut s = Complex64::new(0.0, 0.0);
        for x in 0..self.q {
            s += self.chi(self.mul(y, self.sq(x)));
        }
        s
    }

    pub fn descriptor(&self) -> serde_json::Value {
        serde_json::json!({
            "p": self.p,
            "e": self.e,
            "q": self.q,
            "modulus_low_coeffs": self.modulus_low,
        })
    }
}

#[inline]
fn digitwise(a: u64, b: u64, p: u64, e: u32, op: impl Fn(u64, u64, u64) -> u64) -> u64 {
    let (mut a, mut b) = (a, b);
    let mut out = 0u64;
    let mut mult = 1u64;
    for _ in 0..e {
        out += op(a % p, b % p, p) * mult;
        a /= p;
        b /= p;
        mult *= p;
    }
    out
}

/// Polynomial multiplication of coefficient strings mod the monic modulus.
fn poly_mul(a: u64, b: u64, p: u64, e: u32, modulus_low: &[u64]) -> u64 {
    let e = e as usize;
    let dig = |v: u64| -> Vec<u64> { (0..e).map(|i| (v / p.pow(i as u32)) % p).collect() };
    let da = dig(a);
    let db = dig(b);
    let mut conv = vec![0u64; 2 * e - 1];
    for (i, &x) in da.iter().enumerate() {
        for (j, &y) in db.iter().enumerate() {
            conv[i + j] = (conv[i + j] + x * y) % p;
        }
    }
    // Reduce top coefficients: x^e = -(modulus_low).
    for k in (e..2 * e - 1).rev() {
        let c = conv[k];
        if c != 0 {
            conv[k] = 0;
            for (i, &mc) in modulus_low.iter().enumerate() {
                let sub = (c * mc) % p;
                conv[k - e + i] = (conv[k - e + i] + p - sub) % p;
            }
        }
    }
    conv[..e]
        .iter()
        .enumerate()
        .map(|(i, &c)| c * p.pow(i as u32))
        .sum()
}

fn is_prime(n: u64) -> bool {
    if n < 2 {
        return false;
    }
    let mut d = 2u64;
    while d * d <= n {
        if n % d == 0 {
            return false;
        }
        d += 1;
    }
    true
}

// ---------------------------------------------------------------------------
// Quadratic level sets over F_q^m
// ---------------------------------------------------------------------------

/// Per-level report row: size and measure-window flag.
#[derive(Debug, Clone, serde::Serialize)]
pub struct LevelRow {
    pub z: u64,
    pub size: u64,
    pub window_pass: bool,
}

/// The space `X = F_q^m` with the quadratic form `Q(x) = sum x_i^2` and its
/// level sets `E_z`. Point indices are base-`q` digit strings.
pub struct QuadraticLevels {
    pub field: Field,
    pub m: u32,
    pub qm: u64,
    /// `Q(x)` for every point, as a field-element index.
    qval: Vec<u16>,
    level_sizes: Vec<u64>,
}

impl QuadraticLevels {
    pub fn new(field: Field, m: u32) -> Result<QuadraticLevels> {
        let q = field.q;
        let qm = q
            .checked_pow(m)
            .filter(|&v| v <= 1 << 24)
            .ok_or_else(|| Error::InvalidParam(format!("q^m too large: q={q}, m={m}")))?;
        if m == 0 {
            return Err(Error::InvalidParam("m must be positive".into()));
        }
        let mut qval = vec![0u16; qm as usize];
        let mut level_sizes = vec![0u64; q as usize];
        // Odometer over digit strings, maintaining Q incrementally would be
        // possible but the direct per-point digit scan is already cheap.
        for idx in 0..qm {
            let mut s = 0u64;
            let mut rest = idx;
            for _ in 0..m {
                let d = rest % q;
                rest /= q;
                s = field.add(s, field.sq(d));
            }
            qval[idx as usize] = s as u16;
            level_sizes[s as usize] += 1;
        }
        Ok(QuadraticLevels {
            field,
            m,
            qm,
            qval,
            level_sizes,
        })
    }

    /// `Q(x)` as a field-element index.
    #[inline]
    pub fn q_of(&self, x: u64) -> u64 {
        self.qval[x as usize] as u64
    }

    pub fn level_size(&self, z: u64) -> u64 {
        self.level_sizes[z as usize]
    }

    pub fn level_points(&self, z: u64) -> Vec<u64> {
        (0..self.qm).filter(|&x| self.q_of(x) == z).collect()
    }

    /// Strict measure window `mu(X)/(2q) < mu(E_z) < 2 mu(X)/q`, evaluated
    /// as the exact integer inequalities `q^m < 2 q s` and `q s < 2 q^m`.
    pub fn window_pass(&self, z: u64) -> bool {
        let s = self.level_size(z) as u128;
        let qm = self.qm as u128;
        let q = self.field.q as u128;
        qm < 2 * q * s && q * s < 2 * qm
    }

    pub fn window_report(&self) -> Vec<LevelRow> {
        (0..self.field.q)
            .map(|z| LevelRow {
                z,
                size: self.level_size(z),
                window_pass: self.window_pass(z),
            })
            .collect()
    }

    /// Field dot product `sum x_i eta_i` of two point indices.
    #[inline]
    pub fn dot(&self, x: u64, eta: u64) -> u64 {
        let q = self.field.q;
        let (mut x, mut eta) = (x, eta);
        let mut acc = 0u64;
        for _ in 0..self.m {
            acc = self.field.add(acc, self.field.mul(x % q, eta % q));
            x /= q;
            eta /= q;
        }
        acc
    }

    /// Largest nontrivial Fourier coefficient of the level indicator:
    /// `max over eta != 0 of |q^-m sum over x in E_z of chi(x . eta)|`,
    /// together with the reference bound `q^(-m/2)`.
    pub fn fourier_max(&self, z: u64) -> (f64, f64) {
        let points = self.level_points(z);
        let mut best = 0.0f64;
        for eta in 1..self.qm {
            let mut s = Complex64::new(0.0, 0.0);
            for &x in &points {
                s += self.field.chi(self.dot(x, eta));
            }
            best = best.max(s.norm() / self.qm as f64);
        }
        let bound = (self.field.q as f64).powf(-(self.m as f64) / 2.0);
        (best, bound)
    }

    /// Exact size of the Minkowski sum of `E_z` with the first-coordinate
    /// line `span(e_1)`, plus the quarter-measure flag `4 |E_z + line| >= q^m`.
    pub fn minkowski_line(&self, z: u64) -> (u64, bool) {
        let q = self.field.q;
        let mut mark = vec![false; self.qm as usize];
        for x in 0..self.qm {
            if self.q_of(x) == z {
                let base = x - x % q;
                for c in 0..q {
                    mark[(base + c) as usize] = true;
                }
            }
        }
        let count = mark.iter().filter(|&&b| b).count() as u64;
        (count, 4 * count >= self.qm)
    }

    pub fn descriptor(&self) -> serde_json::Value {
        let mut d = self.field.descriptor();
        d["m"] = serde_json::json!(self.m);
        d
    }

    /// Digitwise sum of two points of `F_q^m` (indices in base `q`).
    pub fn pt_add(&self, x: u64, y: u64) -> u64 {
        let q = self.field.q;
        let (mut out, mut scale) = (0u64, 1u64);
        let (mut a, mut b) = (x, y);
        for _ in 0..self.m {
            out += self.field.add(a % q, b % q) * scale;
            a /= q;
            b /= q;
            scale *= q;
        }
        out
    }

    /// Digitwise difference `x - y` in `F_q^m`.
    pub fn pt_sub(&self, x: u64, y: u64) -> u64 {
        let q = self.field.q;
        let (mut out, mut scale) = (0u64, 1u64);
        let (mut a, mut b) = (x, y);
        for _ in 0..self.m {
            out += self.field.sub(a % q, b % q) * scale;
            a /= q;
            b /= q;
            scale *= q;
        }
        out
    }
}

/// The level-set averaging maximal operator on `X_q = F_q^m`:
/// `M_q f(x) = max over nonempty E_z of |E_z|^{-1} Σ_{y∈E_z} |f(x+y)|`,
/// computed exactly. Empty levels are skipped; at least one level is always
/// nonempty (`E_{Q(0)}` contains the origin).
pub fn mq_operator(levels: &QuadraticLevels, f: &[Rat]) -> Vec<Rat> {
    assert_eq!(
        f.len() as u64,
        levels.qm,
        "function must be defined on all of X_q"
    );
    let level_pts: Vec<Vec<u64>> = (0..levels.field.q)
        .map(|z| levels.level_points(z))
        .collect();
    (0..levels.qm)
        .map(|x| {
            let mut best = Rat::zero();
            for pts in level_pts.iter().filter(|p| !p.is_empty()) {
                let sum: Rat = pts
                    .iter()
                    .map(|&y| abs_rat(&f[levels.pt_add(x, y) as usize]))
                    .sum();
                let avg = sum / Rat::from_integer(pts.len() as i128);
                if avg > best {
                    best = avg;
                }
            }
            best
        })
        .collect()
}

fn abs_rat(r: &Rat) -> Rat {
    if r < &Rat::zero() {
        -r
    } else {
        *r
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn levels(q: u64, m: u32) -> QuadraticLevels {
        let (p, e) = match q {
            9 => (3, 2),
            27 => (3, 3),
            _ => (q, 1),
        };
        QuadraticLevels::new(Field::new(p, e).unwrap(), m).unwrap()
    }

    #[test]
    fn extension_field_arithmetic() {
        let f9 = Field::new(3, 2).unwrap();
        // x * x = -1 = 2 under x^2 + 1: index of x is 3, of 2 is 2.
        assert_eq!(f9.mul(3, 3), 2);
        // (1 + x)(1 - x) = 1 - x^2 = 2: 1+x is 4, 1-x = 1+2x is 7.
        assert_eq!(f9.mul(4, 7), 2);
        // Every nonzero element has multiplicative order dividing 8.
        for a in 1..9 {
            let mut acc = 1u64;
            for _ in 0..8 {
                acc = f9.mul(acc, a);
            }
            assert_eq!(acc, 1, "a^8 != 1 for a = {a}");
        }

        let f27 = Field::new(3, 3).unwrap();
        for a in 1..27 {
            let mut acc = 1u64;
            for _ in 0..26 {
                acc = f27.mul(acc, a);
            }
            assert_eq!(acc, 1, "a^26 != 1 for a = {a}");
        }
    }

    #[test]
    fn trace_is_additive_and_onto() {
        for (p, e) in [(3u64, 2u32), (3, 3), (7, 1)] {
            let f = Field::new(p, e).unwrap();
            for a in f.elements() {
                for b in f.elements() {
                    assert_eq!(
                        f.trace(f.add(a, b)),
                        (f.trace(a) + f.trace(b)) % p,
                        "trace not additive at ({a}, {b}) in F_{{{p}^{e}}}"
                    );
                }
            }
            // The trace is onto F_p: each fiber has size q/p.
            let mut fiber = vec![0u64; p as usize];
            for a in f.elements() {
                fiber[f.trace(a) as usize] += 1;
            }
            assert!(fiber.iter().all(|&c| c == f.q / p));
        }
    }

    #[test]
    fn gauss_sums_have_magnitude_sqrt_q() {
        for q in [3u64, 5, 7, 9, 11, 13] {
            let (p, e) = if q == 9 { (3, 2) } else { (q, 1) };
            let f = Field::new(p, e).unwrap();
            for y in 1..q {
                let mag = f.gauss_sum(y).norm();
                let rel = (mag / (q as f64).sqrt() - 1.0).abs();
                assert!(rel <= 1e-9, "|gauss(q={q}, y={y})| = {mag}, rel dev {rel}");
            }
        }
    }

    #[test]
    fn gauss_sum_q3_matches_closed_form() {
        // q = 3, y = 1: 1 + 2 exp(2 pi i / 3), magnitude sqrt(3).
        let f = Field::new(3, 1).unwrap();
        let s = f.gauss_sum(1);
        let expect = Complex64::new(1.0, 0.0)
            + Complex64::from_polar(2.0, 2.0 * std::f64::consts::PI / 3.0);
        assert!((s - expect).norm() < 1e-12);
        assert!((s.norm() - 3f64.sqrt()).abs() < 1e-12);
    }

    #[test]
    fn level_sizes_match_enumeration_oracle() {
        // Frozen from an independent brute-force enumeration.
        assert_eq!(levels(5, 2).level_sizes, vec![9, 4, 4, 4, 4]);
        assert_eq!(levels(7, 2).level_sizes, vec![1, 8, 8, 8, 8, 8, 8]);
        assert_eq!(levels(7, 3).level_sizes, vec![49, 42, 42, 56, 42, 56, 56]);
        assert_eq!(
            levels(9, 3).level_sizes,
            vec![81, 90, 90, 90, 72, 72, 90, 72, 72]
        );
        let l11 = levels(11, 2);
        assert_eq!(l11.level_sizes[0], 1);
        assert!(l11.level_sizes[1..].iter().all(|&s| s == 12));
        let l13 = levels(13, 2);
        assert_eq!(l13.level_sizes[0], 25);
        assert!(l13.level_sizes[1..].iter().all(|&s| s == 12));
    }

    #[test]
    fn window_flags_match_enumeration_oracle() {
        // All levels pass at these parameters...
        for (q, m) in [(7u64, 3u32), (9, 3), (13, 2), (5, 2)] {
            let lv = levels(q, m);
            assert!(
                (0..q).all(|z| lv.window_pass(z)),
                "window should pass everywhere at (q={q}, m={m})"
            );
        }
        // ...but the zero level is a single point when -1 is a non-square
        // (q = 3 mod 4, m = 2), far below the window.
        for q in [7u64, 11] {
            let lv = levels(q, 2);
            assert!(!lv.window_pass(0), "zero level cannot pass at (q={q}, m=2)");
            assert!((1..q).all(|z| lv.window_pass(z)));
        }
    }

    #[test]
    fn fourier_coefficients_respect_sqrt_bound() {
        for (q, m) in [(5u64, 2u32), (7, 2)] {
            let lv = levels(q, m);
            for z in 0..q {
                let (max, bound) = lv.fourier_max(z);
                assert!(
                    max <= bound + 1e-9,
                    "(q={q}, m={m}, z={z}): {max} > {bound}"
                );
            }
        }
        // Spot value frozen from the oracle: the zero level at (5,2) has
        // 9 points and peak coefficient exactly 4/25.
        let (max, _) = levels(5, 2).fourier_max(0);
        assert!((max - 0.16).abs() < 1e-12);
    }

    #[test]
    fn minkowski_line_counts_match_enumeration_oracle() {
        let lv = levels(5, 2);
        let counts: Vec<u64> = (0..5).map(|z| lv.minkowski_line(z).0).collect();
        assert_eq!(counts, vec![25, 15, 10, 10, 15]);
        assert!((0..5).all(|z| lv.minkowski_line(z).1));

        let lv = levels(7, 2);
        let counts: Vec<u64> = (0..7).map(|z| lv.minkowski_line(z).0).collect();
        assert_eq!(counts, vec![7, 35, 35, 28, 35, 28, 28]);
        // 7 < 49/4: the quarter-measure flag fails exactly at z = 0.
        assert!(!lv.minkowski_line(0).1);
        assert!((1..7).all(|z| lv.minkowski_line(z).1));

        let lv = levels(7, 3);
        let counts: Vec<u64> = (0..7).map(|z| lv.minkowski_line(z).0).collect();
        assert_eq!(counts, vec![175, 175, 175, 224, 175, 224, 224]);
        assert!((0..7).all(|z| lv.minkowski_line(z).1));

        let lv = levels(9, 3);
        let counts: Vec<u64> = (0..9).map(|z| lv.minkowski_line(z).0).collect();
        assert_eq!(
            counts,
            vec![441, 441, 441, 441, 360, 360, 441, 360, 360]
        );
        assert!((0..9).all(|z| lv.minkowski_line(z).1));
    }

    #[test]
    fn mq_operator_point_mass_hits_own_level() {
        use crate::exact::rat;
        // f = indicator of {0}: the only translate of E_z hitting 0 is the
        // level of x itself (E_z is symmetric), so M_q f(x) = 1/|E_{Q(x)}|.
        let lv = levels(5, 2);
        let mut f = vec![Rat::zero(); 25];
        f[0] = Rat::from_integer(1);
        let vals = mq_operator(&lv, &f);
        for x in 0..25u64 {
            let z = lv.q_of(x);
            assert_eq!(vals[x as usize], rat(1, lv.level_size(z) as i128));
        }

        // Constant functions are fixed points.
        let ones = vec![Rat::from_integer(1); 25];
        assert!(mq_operator(&lv, &ones)
            .iter()
            .all(|v| *v == Rat::from_integer(1)));
    }

    #[test]
    fn mq_operator_matches_naive_double_loop() {
        use rand::{Rng, SeedableRng};
        let lv = levels(7, 2);
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0x9e37);
        let f: Vec<Rat> = (0..49)
            .map(|_| Rat::from_integer(rng.gen_range(0..2)))
            .collect();
        let vals = mq_operator(&lv, &f);
        for x in 0..49u64 {
            let mut best = Rat::zero();
            for z in 0..7u64 {
                let pts = lv.level_points(z);
                if pts.is_empty() {
                    continue;
                }
                let mut s = Rat::zero();
                for &y in &pts {
                    s += f[lv.pt_add(x, y) as usize];
                }
                let avg = s / Rat::from_integer(pts.len() as i128);
                if avg > best {
                    best = avg;
                }
            }
            assert_eq!(vals[x as usize], best);
        }
    }

    #[test]
    fn mq_operator_is_sublinear() {
        use rand::{Rng, SeedableRng};
        use crate::exact::rat;
        let lv = levels(5, 2);
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0xab5e);
        for _ in 0..16 {
            let f: Vec<Rat> = (0..25).map(|_| rat(rng.gen_range(-6..7), 2)).collect();
            let g: Vec<Rat> = (0..25).map(|_| rat(rng.gen_range(-6..7), 3)).collect();
            let sum: Vec<Rat> = f.iter().zip(&g).map(|(a, b)| a + b).collect();
            let scaled: Vec<Rat> = f.iter().map(|a| a * rat(-3, 2)).collect();
            let mf = mq_operator(&lv, &f);
            let mg = mq_operator(&lv, &g);
            let msum = mq_operator(&lv, &sum);
            let mscaled = mq_operator(&lv, &scaled);
            for x in 0..25 {
                assert!(msum[x] <= mf[x] + mg[x]);
                assert_eq!(mscaled[x], mf[x] * rat(3, 2));
            }
        }
    }
}
