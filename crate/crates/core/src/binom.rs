//! Binomial pmf and tail kernel.
//!
//! The floating pmf uses Loader's saddle-point expansion (the algorithm
//! behind R's `dbinom`), which keeps the relative error near machine
//! precision even for `n` in the hundreds of thousands. Tails are summed
//! outward from the largest term of the requested range.
//!
//! An exact mode over arbitrary-precision rationals backs the floating
//! kernel in tests and in boundary arbitration (see [`crate::ic`]).

use num_bigint::{BigInt, BigUint};
use num_rational::BigRational;
use num_traits::{One, ToPrimitive, Zero};

use crate::error::{check_odd, Error, Result};

/// Largest batch size accepted by [`exact_tail_rational`].
pub const EXACT_K_CAP: usize = 99;

/// Largest `K` accepted by [`combinatorial_identity_check`].
pub const IDENTITY_K_CAP: u64 = 60;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BinomialSpec {
    n: u64,
    p: f64,
}

impl BinomialSpec {
    pub fn new(n: u64, p: f64) -> Result<Self> {
        if !(p > 0.0 && p < 1.0) {
            return Err(Error::domain(format!(
                "success probability must be in (0,1), got {p}"
            )));
        }
        Ok(BinomialSpec { n, p })
    }

    pub fn n(&self) -> u64 {
        self.n
    }

    pub fn p(&self) -> f64 {
        self.p
    }
}

const LN_2PI: f64 = 1.837_877_066_409_345_5;

// stirlerr(n) = ln(n!) - ln(sqrt(2 pi n) (n/e)^n) at n = 0..=15.
const SFERR: [f64; 16] = [
    0.0,
    0.081_061_466_795_327_26,
    0.041_340_695_955_409_3,
    0.027_677_925_684_998_34,
    0.020_790_672_103_765_093,
    0.016_644_691_189_821_193,
    0.013_876_128_823_070_748,
    0.011_896_709_945_891_77,
    0.010_411_265_261_972_096,
    0.009_255_462_182_712_733,
    0.008_330_563_433_362_87,
    0.007_573_675_487_951_841,
    0.006_942_840_107_209_53,
    0.006_408_994_188_004_207,
    0.005_951_370_112_758_847_5,
    0.005_554_733_551_962_801,
];

const S0: f64 = 1.0 / 12.0;
const S1: f64 = 1.0 / 360.0;
const S2: f64 = 1.0 / 1260.0;
const S3: f64 = 1.0 / 1680.0;
const S4: f64 = 1.0 / 1188.0;

/// Stirling-series remainder, integer arguments only.
fn stirlerr(n: u64) -> f64 {
    if n <= 15 {
        return SFERR[n as usize];
    }
    let n = n as f64;
    let nn = n * n;
    if n > 500.0 {
        (S0 - S1 / nn) / n
    } else if n > 80.0 {
        (S0 - (S1 - S2 / nn) / nn) / n
    } else if n > 35.0 {
        (S0 - (S1 - (S2 - S3 / nn) / nn) / nn) / n
    } else {
        (S0 - (S1 - (S2 - (S3 - S4 / nn) / nn) / nn) / nn) / n
    }
}

/// Deviance term `x ln(x/np) + np - x`, evaluated by series when `x ~ np`.
fn bd0(x: f64, np: f64) -> f64 {
    if (x - np).abs() < 0.1 * (x + np) {
        let mut v = (x - np) / (x + np);
        let mut s = (x - np) * v;
        let mut ej = 2.0 * x * v;
        v *= v;
        let mut j = 1.0;
        loop {
            ej *= v;
            let s1 = s + ej / (2.0 * j + 1.0);
            if s1 == s {
                return s1;
            }
            s = s1;
            j += 1.0;
        }
    }
    x * (x / np).ln() + np - x
}

fn dbinom_raw(x: u64, n: u64, p: f64, q: f64) -> f64 {
    if x == 0 {
        if n == 0 {
            return 1.0;
        }
        let nf = n as f64;
        let lc = if p < 0.1 {
            -bd0(nf, nf * q) - nf * p
        } else {
            nf * q.ln()
        };
        return lc.exp();
    }
    if x == n {
        let nf = n as f64;
        let lc = if q < 0.1 {
            -bd0(nf, nf * p) - nf * q
        } else {
            nf * p.ln()
        };
        return lc.exp();
    }
    let (xf, nf) = (x as f64, n as f64);
    let lc = stirlerr(n) - stirlerr(x) - stirlerr(n - x) - bd0(xf, nf * p) - bd0(nf - xf, nf * q);
    let lf = LN_2PI + xf.ln() + (-xf / nf).ln_1p();
    (lc - 0.5 * lf).exp()
}

/// `C(n,y) p^y (1-p)^(n-y)`.
pub fn pmf(spec: BinomialSpec, y: u64) -> Result<f64> {
    if y > spec.n {
        return Err(Error::domain(format!("y = {y} outside support 0..={}", spec.n)));
    }
    Ok(dbinom_raw(y, spec.n, spec.p, 1.0 - spec.p))
}

/// Unchecked pmf for callers that already hold a valid `(n, p, y)`.
pub(crate) fn pmf_raw(n: u64, p: f64, y: u64) -> f64 {
    debug_assert!(y <= n && p > 0.0 && p < 1.0);
    dbinom_raw(y, n, p, 1.0 - p)
}

/// `P(lo <= X <= hi)`, summed outward from the largest term in the range.
fn sum_range(n: u64, p: f64, lo: u64, hi: u64) -> f64 {
    if lo > hi {
        return 0.0;
    }
    let mode = (((n + 1) as f64) * p).floor() as u64;
    let start = mode.clamp(lo, hi.min(n));
    let first = pmf_raw(n, p, start);
    if first == 0.0 {
        return 0.0;
    }
    let odds = p / (1.0 - p);
    let mut acc = Neumaier::new(first);

    let mut term = first;
    for y in start..hi {
        term *= (n - y) as f64 / (y + 1) as f64 * odds;
        if term == 0.0 || term < acc.value() * 1e-18 {
            break;
        }
        acc.add(term);
    }
    let mut term = first;
    for y in (lo + 1..=start).rev() {
        term *= y as f64 / (n - y + 1) as f64 / odds;
        if term == 0.0 || term < acc.value() * 1e-18 {
            break;
        }
        acc.add(term);
    }
    acc.value()
}

struct Neumaier {
    sum: f64,
    comp: f64,
}

impl Neumaier {
    fn new(first: f64) -> Self {
        Neumaier {
            sum: first,
            comp: 0.0,
        }
    }

    fn add(&mut self, x: f64) {
        let t = self.sum + x;
        if self.sum.abs() >= x.abs() {
            self.comp += (self.sum - t) + x;
        } else {
            self.comp += (x - t) + self.sum;
        }
        self.sum = t;
    }

    fn value(&self) -> f64 {
        self.sum + self.comp
    }
}

/// `P(X >= t)` for integer `t`.
pub(crate) fn upper_tail(n: u64, p: f64, t: u64) -> f64 {
    if t == 0 {
        1.0
    } else if t > n {
        0.0
    } else {
        sum_range(n, p, t, n)
    }
}

/// `P(X < t)` for integer `t`, summed directly rather than as `1 - upper`.
pub(crate) fn lower_tail(n: u64, p: f64, t: u64) -> f64 {
    if t == 0 {
        0.0
    } else if t > n {
        1.0
    } else {
        sum_range(n, p, 0, t - 1)
    }
}

/// `P(X_K >= (K+1)/2)` for `X_K ~ Binomial(K, q)`.
pub fn majority_tail(k: usize, q: f64) -> Result<f64> {
    Ok(majority_tails(k, q)?.0)
}

/// `P(X_K <= (K-1)/2)`, the complement of [`majority_tail`], computed
/// without cancellation.
pub fn minority_tail(k: usize, q: f64) -> Result<f64> {
    Ok(majority_tails(k, q)?.1)
}

/// Both sides of the majority split as `(upper, lower)`.
pub fn majority_tails(k: usize, q: f64) -> Result<(f64, f64)> {
    check_odd(k)?;
    BinomialSpec::new(k as u64, q)?;
    let m = (k as u64).div_ceil(2);
    // For q > 1/2 the minority side is below 1/2, so `1 - lower` is exact to
    // an ulp and inherits the strict monotonicity of the lower tail.
    let lower = lower_tail(k as u64, q, m);
    Ok((1.0 - lower, lower))
}

/// `P(X >= ceil(threshold))`.
pub fn tail(spec: BinomialSpec, threshold: f64) -> f64 {
    if threshold.is_nan() {
        return f64::NAN;
    }
    if threshold <= 0.0 {
        return 1.0;
    }
    if threshold > spec.n as f64 {
        return 0.0;
    }
    upper_tail(spec.n, spec.p, threshold.ceil() as u64)
}

/// `P(X < ceil(threshold))`, the complement of [`tail`].
pub fn tail_complement(spec: BinomialSpec, threshold: f64) -> f64 {
    if threshold.is_nan() {
        return f64::NAN;
    }
    if threshold <= 0.0 {
        return 0.0;
    }
    if threshold > spec.n as f64 {
        return 1.0;
    }
    lower_tail(spec.n, spec.p, threshold.ceil() as u64)
}

// ---------------------------------------------------------------------------
// Exact mode

/// Exact value of an `f64` as a rational (every finite double is dyadic).
pub fn rational_from_f64(x: f64) -> BigRational {
    BigRational::from_float(x).expect("finite float")
}

pub fn rational_to_f64(x: &BigRational) -> f64 {
    x.to_f64().unwrap_or(f64::NAN)
}

/// `sum_{y = lo}^{hi} C(n,y) p^y (1-p)^(n-y)` in exact arithmetic.
pub fn exact_range(n: u64, p: &BigRational, lo: u64, hi: u64) -> BigRational {
    let hi = hi.min(n);
    if lo > hi {
        return BigRational::zero();
    }
    let a = p.numer().clone();
    let b = p.denom().clone();
    let c = &b - &a;
    // term_y = C(n,y) a^y c^(n-y); each step divides exactly.
    let mut term = BigInt::from(binomial_big(n, lo))
        * num_traits::pow(a.clone(), lo as usize)
        * num_traits::pow(c.clone(), (n - lo) as usize);
    let mut numer = BigInt::zero();
    for y in lo..=hi {
        numer += &term;
        if y < hi {
            term = term * BigInt::from(n - y) * &a / (BigInt::from(y + 1) * &c);
        }
    }
    BigRational::new(numer, num_traits::pow(b, n as usize))
}

/// Exact `P(X >= t)` for `X ~ Binomial(n, p)`.
pub fn exact_upper_tail(n: u64, p: &BigRational, t: u64) -> BigRational {
    exact_range(n, p, t, n)
}

/// Exact `P(X < t)`.
pub fn exact_lower_tail(n: u64, p: &BigRational, t: u64) -> BigRational {
    if t == 0 {
        BigRational::zero()
    } else {
        exact_range(n, p, 0, t - 1)
    }
}

/// Exact `P(X_K >= threshold)` with `q = q_num / q_den`, for odd `K <= 99`.
pub fn exact_tail_rational(k: usize, q_num: u64, q_den: u64, threshold: u64) -> Result<BigRational> {
    check_odd(k)?;
    if k > EXACT_K_CAP {
        return Err(Error::domain(format!(
            "exact mode is capped at K <= {EXACT_K_CAP}, got {k}"
        )));
    }
    if q_den == 0 || q_num == 0 || q_num >= q_den {
        return Err(Error::domain(format!("q = {q_num}/{q_den} must lie in (0,1)")));
    }
    let q = BigRational::new(BigInt::from(q_num), BigInt::from(q_den));
    Ok(exact_upper_tail(k as u64, &q, threshold))
}

fn binomial_big(n: u64, k: u64) -> BigUint {
    let mut c = BigUint::one();
    for i in 0..k {
        c = c * BigUint::from(n - i) / BigUint::from(i + 1);
    }
    c
}

/// `(1/y) C(K-1, y-1) = (1/K) C(K, y)`, checked as `K C(K-1,y-1) = y C(K,y)`.
pub fn combinatorial_identity_check(k: u64, y: u64) -> Result<bool> {
    if !(1 <= y && y <= k && k <= IDENTITY_K_CAP) {
        return Err(Error::domain(format!(
            "identity check needs 1 <= y <= K <= {IDENTITY_K_CAP}, got K = {k}, y = {y}"
        )));
    }
    let lhs = BigUint::from(k) * binomial_big(k - 1, y - 1);
    let rhs = BigUint::from(y) * binomial_big(k, y);
    Ok(lhs == rhs)
}
