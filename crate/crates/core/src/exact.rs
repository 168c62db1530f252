//! Exact scalar arithmetic for radii and measure ratios.
//!
//! Every metric realized by this crate stores distances as orderable integer
//! codes, but radii handed to operators live in one of three exact scalar
//! domains:
//!
//! * [`Radius::Lin`] — rational multiples of the space's length unit,
//! * [`Radius::Quad`] — elements `a + b*sqrt(2)` of the quadratic field
//!   `Q[sqrt(2)]` (used by the two-distance Euclidean star whose codes are
//!   squared lengths),
//! * [`Radius::Pow3`] — finite sums `sum_i c_i * 3^(e_i/n)` with rational
//!   `c_i` and integer `e_i` (used by spaces whose distances are fractional
//!   powers of three).
//!
//! All three domains support exact comparison, addition, doubling, rational
//! scaling and midpoints, so ball membership and regularity ratios never go
//! through floating point. Comparisons in the `Pow3` domain reduce to the
//! sign of a polynomial with rational coefficients evaluated at `3^(1/n)`;
//! since `y^n - 3` is irreducible over `Q` (Eisenstein at 3), a nonzero
//! reduced polynomial has nonzero value, so interval bisection on a rational
//! bracket of `3^(1/n)` always terminates with a certified sign.

use std::cmp::Ordering;
use std::collections::HashMap;
use std::sync::Mutex;

use num_bigint::BigInt;
use num_rational::Ratio;
use num_traits::{One, Signed, ToPrimitive, Zero};
use once_cell::sync::Lazy;

/// Exact rational with machine-word-sized components. Large intermediate
/// computations (high powers, long sums) should switch to [`BigRat`].
pub type Rat = Ratio<i128>;

/// Arbitrary-precision rational.
pub type BigRat = Ratio<BigInt>;

/// Shorthand constructor for a [`Rat`]. Panics if `den == 0`.
pub fn rat(num: i128, den: i128) -> Rat {
    Ratio::new(num, den)
}

/// Widen a [`Rat`] to a [`BigRat`].
pub fn big(r: &Rat) -> BigRat {
    Ratio::new(BigInt::from(*r.numer()), BigInt::from(*r.denom()))
}

/// Format a rational as `p/q` (or just `p` when the denominator is one).
pub fn fmt_rat(r: &Rat) -> String {
    if r.denom().is_one() {
        r.numer().to_string()
    } else {
        format!("{}/{}", r.numer(), r.denom())
    }
}

/// Format a big rational as `p/q`.
pub fn fmt_big(r: &BigRat) -> String {
    if r.denom().is_one() {
        r.numer().to_string()
    } else {
        format!("{}/{}", r.numer(), r.denom())
    }
}

/// Convert a big rational to `f64` (for report columns only).
pub fn big_to_f64(r: &BigRat) -> f64 {
    r.to_f64().unwrap_or(f64::NAN)
}

// ---------------------------------------------------------------------------
// Sums of rational powers of three
// ---------------------------------------------------------------------------

/// A finite sum `sum_i coeff_i * 3^(exp_i / n)` with rational coefficients.
///
/// The representation is canonical: terms are sorted by exponent, exponents
/// are distinct, and zero coefficients are dropped.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Pow3 {
    /// Common exponent denominator (`n >= 1`).
    pub n: u32,
    /// `(coefficient, exponent numerator)` pairs, sorted by exponent.
    pub terms: Vec<(Rat, i64)>,
}

impl Pow3 {
    /// The single term `3^(e/n)`.
    pub fn term(n: u32, e: i64) -> Self {
        assert!(n >= 1, "exponent denominator must be positive");
        Pow3 {
            n,
            terms: vec![(Rat::one(), e)],
        }
    }

    /// The rational constant `c` viewed in exponent base `n`.
    pub fn constant(n: u32, c: Rat) -> Self {
        let mut p = Pow3 { n, terms: vec![] };
        if !c.is_zero() {
            p.terms.push((c, 0));
        }
        p
    }

    fn normalize(mut terms: Vec<(Rat, i64)>, n: u32) -> Self {
        terms.sort_by_key(|&(_, e)| e);
        let mut out: Vec<(Rat, i64)> = Vec::with_capacity(terms.len());
        for (c, e) in terms {
            if let Some(last) = out.last_mut() {
                if last.1 == e {
                    last.0 += c;
                    continue;
                }
            }
            out.push((c, e));
        }
        out.retain(|(c, _)| !c.is_zero());
        Pow3 { n, terms: out }
    }

    /// Sum of two values over the same exponent denominator.
    pub fn add(&self, other: &Pow3) -> Self {
        assert_eq!(self.n, other.n, "mismatched exponent denominators");
        let mut t = self.terms.clone();
        t.extend(other.terms.iter().cloned());
        Pow3::normalize(t, self.n)
    }

    /// Multiply every coefficient by the rational `factor`.
    pub fn scale(&self, factor: Rat) -> Self {
        let t = self.terms.iter().map(|&(c, e)| (c * factor, e)).collect();
        Pow3::normalize(t, self.n)
    }

    /// `true` when the sum is identically zero.
    pub fn is_zero(&self) -> bool {
        self.terms.is_empty()
    }

    /// Floating approximation (for reports and sampling only).
    pub fn to_f64(&self) -> f64 {
        self.terms
            .iter()
            .map(|(c, e)| c.to_f64().unwrap_or(f64::NAN) * 3f64.powf(*e as f64 / self.n as f64))
            .sum()
    }

    /// Exact sign of the value.
    pub fn sign(&self) -> Ordering {
        pow3_sign(self)
    }

    /// Human-readable form such as `3^(4/16) + 1/2*3^(-1/16)`.
    pub fn display(&self) -> String {
        if self.terms.is_empty() {
            return "0".to_string();
        }
        let mut parts = Vec::new();
        for (c, e) in &self.terms {
            let base = if *e == 0 {
                "1".to_string()
            } else {
                format!("3^({}/{})", e, self.n)
            };
            let part = if c.is_one() {
                base
            } else if *e == 0 {
                fmt_rat(c)
            } else {
                format!("{}*{}", fmt_rat(c), base)
            };
            parts.push(part);
        }
        parts.join(" + ")
    }
}

/// Cache of resolved polynomial signs, keyed by exponent denominator and the
/// reduced coefficient vector. Sign resolution is deterministic, so a global
/// cache is safe; it exists because regularity and triangle sweeps ask for
/// the same handful of comparisons millions of times.
static POW3_SIGN_CACHE: Lazy<Mutex<HashMap<(u32, Vec<(i128, i128, u32)>), Ordering>>> =
    Lazy::new(|| Mutex::new(HashMap::new()));

/// Exact sign of `sum_i c_i * 3^(e_i/n)`.
///
/// The sum is rewritten as `P(x)` with `x = 3^(1/n)` and integer powers
/// `0..n`; the sign of `P` at `x` is then certified by interval arithmetic
/// over a shrinking rational bracket of `x`.
fn pow3_sign(v: &Pow3) -> Ordering {
    if v.terms.is_empty() {
        return Ordering::Equal;
    }
    let n = v.n as i64;

    // Reduce exponents modulo n: 3^(e/n) = 3^q * x^r with e = q*n + r.
    let mut coeffs: Vec<BigRat> = vec![BigRat::zero(); v.n as usize];
    for (c, e) in &v.terms {
        let q = e.div_euclid(n);
        let r = e.rem_euclid(n) as usize;
        let mut factor = big(c);
        if q >= 0 {
            factor *= BigRat::from(BigInt::from(3).pow(q as u32));
        } else {
            factor /= BigRat::from(BigInt::from(3).pow((-q) as u32));
        }
        coeffs[r] += factor;
    }
    if coeffs.iter().all(|c| c.is_zero()) {
        return Ordering::Equal;
    }
    if v.n == 1 {
        // x = 3 exactly.
        return coeffs[0].cmp(&BigRat::zero());
    }

    // Cache lookup (only when every coefficient fits in i128 components).
    let key: Option<Vec<(i128, i128, u32)>> = coeffs
        .iter()
        .enumerate()
        .filter(|(_, c)| !c.is_zero())
        .map(|(r, c)| {
            let num = c.numer().to_i128()?;
            let den = c.denom().to_i128()?;
            Some((num, den, r as u32))
        })
        .collect();
    if let Some(ref k) = key {
        if let Some(&sign) = POW3_SIGN_CACHE
            .lock()
            .expect("pow3 cache poisoned")
            .get(&(v.n, k.clone()))
        {
            return sign;
        }
    }

    let sign = pow3_sign_bisect(&coeffs, v.n);

    if let Some(k) = key {
        POW3_SIGN_CACHE
            .lock()
            .expect("pow3 cache poisoned")
            .insert((v.n, k), sign);
    }
    sign
}

/// Certified sign of `P(x) = sum_r coeffs[r] x^r` at `x = 3^(1/n)`, via
/// bisection on a rational bracket `lo < x < hi`. `P(x) != 0` is guaranteed
/// by the irreducibility of `y^n - 3`, so the loop terminates.
fn pow3_sign_bisect(coeffs: &[BigRat], n: u32) -> Ordering {
    let three = BigRat::from(BigInt::from(3));
    let mut lo = BigRat::one(); // 1 < 3^(1/n) for n >= 1
    let mut hi = BigRat::from(BigInt::from(2)); // 3^(1/n) <= 3^(1/2) < 2 for n >= 2

    for _ in 0..512 {
        // Interval evaluation: powers of lo and hi, then per-term bounds.
        let mut lo_pow = BigRat::one();
        let mut hi_pow = BigRat::one();
        let mut min = BigRat::zero();
        let mut max = BigRat::zero();
        for c in coeffs {
            if c.is_positive() {
                min += c * &lo_pow;
                max += c * &hi_pow;
            } else if c.is_negative() {
                min += c * &hi_pow;
                max += c * &lo_pow;
            }
            lo_pow *= &lo;
            hi_pow *= &hi;
        }
        if min.is_positive() {
            return Ordering::Greater;
        }
        if max.is_negative() {
            return Ordering::Less;
        }

        // Narrow the bracket: compare mid^n with 3.
        let mid = (&lo + &hi) / BigRat::from(BigInt::from(2));
        let mut mid_pow = BigRat::one();
        for _ in 0..n {
            mid_pow *= &mid;
        }
        if mid_pow < three {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    unreachable!("pow3 sign bisection failed to separate a nonzero value");
}

// ---------------------------------------------------------------------------
// Radii
// ---------------------------------------------------------------------------

/// An exact radius in one of the three scalar domains used by the crate.
///
/// Arithmetic is only defined within a single domain; each space declares the
/// domain its distances live in, and all radii fed to its operators must stay
/// in that domain. Mixing domains is a programming error and panics.
#[derive(Clone, Debug)]
pub enum Radius {
    /// Rational multiple of the space's length unit.
    Lin(Rat),
    /// `a + b*sqrt(2)`.
    Quad(Rat, Rat),
    /// Finite sum of rational powers of three.
    Pow3(Pow3),
}

impl Radius {
    /// Rational radius `num/den` in the linear domain.
    pub fn lin(num: i128, den: i128) -> Self {
        Radius::Lin(rat(num, den))
    }

    /// Exact comparison. Panics on mixed domains.
    pub fn cmp_exact(&self, other: &Radius) -> Ordering {
        match (self, other) {
            (Radius::Lin(a), Radius::Lin(b)) => a.cmp(b),
            (Radius::Quad(a1, b1), Radius::Quad(a2, b2)) => quad_sign(&(a1 - a2), &(b1 - b2)),
            (Radius::Pow3(a), Radius::Pow3(b)) => a.add(&b.scale(-Rat::one())).sign(),
            _ => panic!("radius domains mixed: {self:?} vs {other:?}"),
        }
    }

    /// Exact equality.
    pub fn eq_exact(&self, other: &Radius) -> bool {
        self.cmp_exact(other) == Ordering::Equal
    }

    /// `self + other` (same domain).
    pub fn add(&self, other: &Radius) -> Radius {
        match (self, other) {
            (Radius::Lin(a), Radius::Lin(b)) => Radius::Lin(a + b),
            (Radius::Quad(a1, b1), Radius::Quad(a2, b2)) => Radius::Quad(a1 + a2, b1 + b2),
            (Radius::Pow3(a), Radius::Pow3(b)) => Radius::Pow3(a.add(b)),
            _ => panic!("radius domains mixed: {self:?} vs {other:?}"),
        }
    }

    /// `self * num/den` with a nonnegative rational factor.
    pub fn mul_frac(&self, num: i128, den: i128) -> Radius {
        let f = rat(num, den);
        match self {
            Radius::Lin(a) => Radius::Lin(a * f),
            Radius::Quad(a, b) => Radius::Quad(a * f, b * f),
            Radius::Pow3(p) => Radius::Pow3(p.scale(f)),
        }
    }

    /// `2 * self`.
    pub fn double(&self) -> Radius {
        self.mul_frac(2, 1)
    }

    /// Exact midpoint `(self + other) / 2`.
    pub fn midpoint(&self, other: &Radius) -> Radius {
        self.add(other).mul_frac(1, 2)
    }

    /// `true` when the radius is exactly zero.
    pub fn is_zero(&self) -> bool {
        match self {
            Radius::Lin(a) => a.is_zero(),
            Radius::Quad(a, b) => a.is_zero() && b.is_zero(),
            Radius::Pow3(p) => p.is_zero(),
        }
    }

    /// Floating approximation (reports and random sampling only).
    pub fn to_f64(&self) -> f64 {
        match self {
            Radius::Lin(a) => a.to_f64().unwrap_or(f64::NAN),
            Radius::Quad(a, b) => {
                a.to_f64().unwrap_or(f64::NAN)
                    + b.to_f64().unwrap_or(f64::NAN) * std::f64::consts::SQRT_2
            }
            Radius::Pow3(p) => p.to_f64(),
        }
    }

    /// Human-readable exact form for report columns.
    pub fn display(&self) -> String {
        match self {
            Radius::Lin(a) => fmt_rat(a),
            Radius::Quad(a, b) => {
                if b.is_zero() {
                    fmt_rat(a)
                } else if a.is_zero() {
                    format!("{}*sqrt(2)", fmt_rat(b))
                } else {
                    format!("{} + {}*sqrt(2)", fmt_rat(a), fmt_rat(b))
                }
            }
            Radius::Pow3(p) => p.display(),
        }
    }

    /// Exact sign of `(self / base)^m - rhs` for positive radii in the same
    /// domain. This is the band-membership test `self ⋚ base * rhs^(1/m)`
    /// without ever forming an m-th root.
    pub fn ratio_pow_cmp(&self, base: &Radius, m: u32, rhs: &BigRat) -> Ordering {
        assert!(m >= 1, "power must be positive");
        match (self, base) {
            (Radius::Lin(a), Radius::Lin(b)) => {
                assert!(a.is_positive() && b.is_positive(), "radii must be positive");
                let ratio = big(a) / big(b);
                pow_big(&ratio, m).cmp(rhs)
            }
            (Radius::Quad(a1, b1), Radius::Quad(a2, b2)) => {
                // (a1 + b1 √2)/(a2 + b2 √2) = (x + y √2) with rational x, y.
                let den = big(a2) * big(a2) - BigRat::from(BigInt::from(2)) * big(b2) * big(b2);
                assert!(!den.is_zero(), "degenerate quadratic base radius");
                let x = (big(a1) * big(a2) - BigRat::from(BigInt::from(2)) * big(b1) * big(b2))
                    / den.clone();
                let y = (big(b1) * big(a2) - big(a1) * big(b2)) / den;
                // Power by repeated multiplication in Z[√2] ⊗ Q.
                let (mut px, mut py) = (BigRat::one(), BigRat::zero());
                for _ in 0..m {
                    let nx = px.clone() * x.clone()
                        + BigRat::from(BigInt::from(2)) * py.clone() * y.clone();
                    let ny = px * y.clone() + py * x.clone();
                    px = nx;
                    py = ny;
                }
                quad_sign_big(&(px - rhs.clone()), &py)
            }
            (Radius::Pow3(p), Radius::Pow3(q)) => {
                let (c1, e1) = single_pow3_term(p);
                let (c2, e2) = single_pow3_term(q);
                assert_eq!(p.n, q.n, "mismatched exponent denominators");
                // (c1/c2)^m * 3^((e1-e2) m / n)  ⋚  rhs
                // ⇔ (c1/c2)^(m n) * 3^((e1-e2) m) ⋚ rhs^n   (both sides > 0)
                let n = p.n;
                let lhs_rat = pow_big(&(big(&c1) / big(&c2)), m * n);
                let e = (e1 - e2) * m as i64;
                let three = BigRat::from(BigInt::from(3));
                let lhs = if e >= 0 {
                    lhs_rat * pow_big(&three, e as u32)
                } else {
                    lhs_rat / pow_big(&three, (-e) as u32)
                };
                lhs.cmp(&pow_big(rhs, n))
            }
            _ => panic!("radius domains mixed: {self:?} vs {base:?}"),
        }
    }
}

fn pow_big(x: &BigRat, m: u32) -> BigRat {
    let mut out = BigRat::one();
    for _ in 0..m {
        out *= x.clone();
    }
    out
}

fn single_pow3_term(p: &Pow3) -> (Rat, i64) {
    assert_eq!(
        p.terms.len(),
        1,
        "ratio_pow_cmp needs single-term power-of-three radii, got {}",
        p.display()
    );
    let (c, e) = p.terms[0].clone();
    assert!(c.is_positive(), "radii must be positive");
    (c, e)
}

/// Exact sign of `a + b*sqrt(2)` with big-rational coefficients.
fn quad_sign_big(a: &BigRat, b: &BigRat) -> Ordering {
    use Ordering::*;
    match (a.cmp(&BigRat::zero()), b.cmp(&BigRat::zero())) {
        (Equal, s) | (s, Equal) => s,
        (Greater, Greater) => Greater,
        (Less, Less) => Less,
        (Greater, Less) | (Less, Greater) => {
            let a2 = a.clone() * a.clone();
            let b2 = b.clone() * b.clone() * BigRat::from(BigInt::from(2));
            match a2.cmp(&b2) {
                Equal => Equal,
                ord => {
                    if a.is_positive() {
                        ord
                    } else {
                        ord.reverse()
                    }
                }
            }
        }
    }
}

/// Exact sign of `a + b*sqrt(2)`.
fn quad_sign(a: &Rat, b: &Rat) -> Ordering {
    use Ordering::*;
    match (a.cmp(&Rat::zero()), b.cmp(&Rat::zero())) {
        (Equal, s) | (s, Equal) => s,
        (Greater, Greater) => Greater,
        (Less, Less) => Less,
        (Greater, Less) | (Less, Greater) => {
            // Compare a^2 with 2 b^2 in big arithmetic to avoid overflow.
            let a2 = big(a) * big(a);
            let b2 = big(b) * big(b) * BigRat::from(BigInt::from(2));
            match a2.cmp(&b2) {
                Equal => Equal, // impossible for rational a, b != 0, kept for totality
                ord => {
                    if a.is_positive() {
                        ord
                    } else {
                        ord.reverse()
                    }
                }
            }
        }
    }
}

/// Sorts radii ascending and removes exact duplicates.
pub fn sort_dedup_radii(mut radii: Vec<Radius>) -> Vec<Radius> {
    radii.sort_by(|a, b| a.cmp_exact(b));
    radii.dedup_by(|a, b| a.eq_exact(b));
    radii
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rational_radius_ordering_and_ops() {
        let r = Radius::lin(3, 2);
        assert_eq!(r.double().cmp_exact(&Radius::lin(3, 1)), Ordering::Equal);
        assert_eq!(
            r.midpoint(&Radius::lin(5, 2)).cmp_exact(&Radius::lin(2, 1)),
            Ordering::Equal
        );
        assert!(Radius::lin(1, 3).cmp_exact(&Radius::lin(1, 2)) == Ordering::Less);
    }

    #[test]
    fn quad_sign_matches_floats() {
        // 3 - 2*sqrt(2) > 0, 1 - sqrt(2) < 0, 2 - sqrt(2)*sqrt(2) = 0 handled via b=0 cases.
        assert_eq!(quad_sign(&rat(3, 1), &rat(-2, 1)), Ordering::Greater);
        assert_eq!(quad_sign(&rat(1, 1), &rat(-1, 1)), Ordering::Less);
        assert_eq!(quad_sign(&rat(-1, 1), &rat(1, 1)), Ordering::Greater);
        assert_eq!(quad_sign(&rat(0, 1), &rat(0, 1)), Ordering::Equal);
    }

    #[test]
    fn pow3_sign_certifies_known_inequalities() {
        // 3^(1/2) < 2: sign of 3^(1/2) - 2 is negative.
        let v = Pow3::term(2, 1).add(&Pow3::constant(2, rat(-2, 1)));
        assert_eq!(v.sign(), Ordering::Less);
        // 3^(5/16) > 3^(4/16).
        let w = Pow3::term(16, 5).add(&Pow3::term(16, 4).scale(rat(-1, 1)));
        assert_eq!(w.sign(), Ordering::Greater);
        // 3^(2/4) - 3^(1/2) = 0 after exponent reduction... different n, so
        // instead check a genuine cancellation with equal n:
        let z = Pow3::term(4, 2).add(&Pow3::term(4, 2).scale(rat(-1, 1)));
        assert_eq!(z.sign(), Ordering::Equal);
    }

    #[test]
    fn pow3_structural_margin_example() {
        // 3^(s/n) + 1 >= 3^((k+s)/n) for s = 8, k = 1, n = 8:
        // LHS ~ 3 + 1 = 4, RHS = 3^(9/8) ~ 3.44.
        let lhs = Pow3::term(8, 8).add(&Pow3::constant(8, Rat::one()));
        let rhs = Pow3::term(8, 9);
        assert_eq!(lhs.add(&rhs.scale(rat(-1, 1))).sign(), Ordering::Greater);
    }

    #[test]
    fn pow3_tiny_differences_are_resolved() {
        // 3^(1/64) vs 3^(2/128): equal exponent after reduction is not
        // representable with the same n; compare two close but distinct
        // values instead: 3^(1/64) < 3^(2/64).
        let a = Pow3::term(64, 1);
        let b = Pow3::term(64, 2);
        assert_eq!(a.add(&b.scale(rat(-1, 1))).sign(), Ordering::Less);
        // A nontrivial mixed sum: 2*3^(-1/8) - 3^(1/8) is positive
        // (2 > 3^(2/8) = 3^(1/4) ~ 1.316).
        let c = Pow3::term(8, -1).scale(rat(2, 1)).add(&Pow3::term(8, 1).scale(rat(-1, 1)));
        assert_eq!(c.sign(), Ordering::Greater);
    }
}
