//! Incentive compatibility of a single majority-vote batch.
//!
//! An opt-in agent in a batch of `K` receives the object with probability
//! `G_K` when the object is good and `B_K` when it is bad. Truthful voting
//! is a best response exactly when the prior lies in the open interval
//! `I_K = (lower_K, upper_K)`:
//!
//! ```text
//! lower_K = P(X_K <= (K-1)/2)
//! upper_K = q^2 lower_K / (q^2 lower_K + (1-q)^2 (1 - lower_K))
//! ```
//!
//! with `X_K ~ Binomial(K, q)`. Both endpoints strictly decrease in `K` and
//! consecutive intervals overlap, so the IC batch sizes for a prior form a
//! contiguous odd range `[K_min(mu), K_bar(mu)]`.
//!
//! Boundary decisions compare floats strictly; when the prior sits within a
//! relative `1e-12` of an endpoint and `K` is small enough, the comparison
//! is redone in exact rational arithmetic on the exact binary values of
//! `mu` and `q`.

use num_rational::BigRational;
use num_traits::One;
use serde::{Deserialize, Serialize};

use crate::binom::{self, EXACT_K_CAP};
use crate::error::{check_odd, Error, Result};
use crate::model::{Action, ModelParams, Signal};

/// Default cap on the batch-size scan.
pub const DEFAULT_K_MAX: usize = 20_001;

/// Environment variable overriding [`DEFAULT_K_MAX`].
pub const KMAX_ENV: &str = "BATCHVOTE_KMAX";

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AllocProbs {
    /// P(opt-in agent receives the object | Good)
    pub good: f64,
    /// P(opt-in agent receives the object | Bad)
    pub bad: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IcInterval {
    pub lower: f64,
    pub upper: f64,
}

impl IcInterval {
    /// Plain strict float test, without exact arbitration.
    pub fn contains(&self, mu: f64) -> bool {
        self.lower < mu && mu < self.upper
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BatchBounds {
    pub min_k: usize,
    pub max_k: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct UtilityPair {
    pub opt_in: f64,
    pub opt_out: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SearchConfig {
    pub k_max: usize,
}

impl Default for SearchConfig {
    fn default() -> Self {
        SearchConfig { k_max: DEFAULT_K_MAX }
    }
}

impl SearchConfig {
    /// Reads `BATCHVOTE_KMAX`, falling back to the default when unset.
    pub fn from_env() -> Result<Self> {
        match std::env::var(KMAX_ENV) {
            Ok(raw) => {
                let k_max = raw.trim().parse::<usize>().map_err(|_| {
                    Error::domain(format!("{KMAX_ENV} must be a positive integer, got {raw:?}"))
                })?;
                if k_max == 0 {
                    return Err(Error::domain(format!("{KMAX_ENV} must be positive")));
                }
                Ok(SearchConfig { k_max })
            }
            Err(_) => Ok(SearchConfig::default()),
        }
    }
}

/// `G_K` and `B_K` by their defining sums over the number of yes votes.
pub fn alloc_probs(k: usize, q: f64) -> Result<AllocProbs> {
    check_odd(k)?;
    binom::BinomialSpec::new(k as u64, q)?;
    let n = k as u64 - 1;
    let m = (k as u64).div_ceil(2);
    let mut good = 0.0;
    let mut bad = 0.0;
    for y in m..=k as u64 {
        // the other K-1 agents cast y-1 yes votes
        let w = 1.0 / y as f64;
        good += w * binom::pmf_raw(n, q, y - 1);
        bad += w * binom::pmf_raw(n, 1.0 - q, y - 1);
    }
    Ok(AllocProbs { good, bad })
}

/// `G_K = P(X_K >= m) / (qK)` and `B_K = P(X_K < m) / ((1-q)K)`.
pub fn alloc_probs_via_tails(k: usize, q: f64) -> Result<AllocProbs> {
    let (upper, lower) = binom::majority_tails(k, q)?;
    let kf = k as f64;
    Ok(AllocProbs {
        good: upper / (q * kf),
        bad: lower / ((1.0 - q) * kf),
    })
}

pub fn ic_interval(k: usize, q: f64) -> Result<IcInterval> {
    let (upper_tail, lower_tail) = binom::majority_tails(k, q)?;
    Ok(interval_from_tails(upper_tail, lower_tail, q))
}

fn interval_from_tails(upper_tail: f64, lower_tail: f64, q: f64) -> IcInterval {
    let a = q * q * lower_tail;
    let b = (1.0 - q) * (1.0 - q) * upper_tail;
    IcInterval {
        lower: lower_tail,
        upper: a / (a + b),
    }
}

/// Where a prior sits relative to `I_K`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) enum Placement {
    /// `mu <= lower`: positive signals are not enough to opt in.
    Below,
    Inside,
    /// `mu >= upper`: negative-signal agents would opt in too.
    Above,
}

fn near(a: f64, b: f64) -> bool {
    (a - b).abs() <= 1e-12 * a.abs().max(b.abs())
}

pub(crate) fn place(k: usize, mu: f64, q: f64, iv: &IcInterval) -> Placement {
    if k <= EXACT_K_CAP && (near(mu, iv.lower) || near(mu, iv.upper)) {
        return place_exact(k, mu, q);
    }
    if mu <= iv.lower {
        Placement::Below
    } else if mu >= iv.upper {
        Placement::Above
    } else {
        Placement::Inside
    }
}

/// Exact placement of the binary values of `mu` and `q`.
pub(crate) fn place_exact(k: usize, mu: f64, q: f64) -> Placement {
    let mu = binom::rational_from_f64(mu);
    let q = binom::rational_from_f64(q);
    let one = BigRational::one();
    let m = (k as u64).div_ceil(2);
    let upper_tail = binom::exact_upper_tail(k as u64, &q, m);
    let lower_tail = &one - &upper_tail;
    if mu <= lower_tail {
        return Placement::Below;
    }
    // mu < a / (a + b)  <=>  mu b < (1 - mu) a
    let a = &q * &q * &lower_tail;
    let nq = &one - &q;
    let b = &nq * &nq * &upper_tail;
    if &mu * b < (&one - &mu) * a {
        Placement::Inside
    } else {
        Placement::Above
    }
}

/// Unnormalized expected utility of `action` for an agent holding `signal`
/// in a batch of `K`. The positive factor `1 / P(signal)` is dropped, so
/// only the sign is meaningful. Opting out is always worth 0.
pub fn expected_utility(action: Action, signal: Signal, k: usize, params: &ModelParams) -> Result<f64> {
    check_odd(k)?;
    if action == Action::OptOut {
        return Ok(0.0);
    }
    let ab = alloc_probs(k, params.q())?;
    Ok(opt_in_utility(signal, params.mu(), params.q(), &ab))
}

fn opt_in_utility(signal: Signal, mu: f64, q: f64, ab: &AllocProbs) -> f64 {
    match signal {
        Signal::G => mu * q * ab.good - (1.0 - mu) * (1.0 - q) * ab.bad,
        Signal::B => mu * (1.0 - q) * ab.good - (1.0 - mu) * q * ab.bad,
    }
}

pub fn utility_pair(signal: Signal, k: usize, params: &ModelParams) -> Result<UtilityPair> {
    Ok(UtilityPair {
        opt_in: expected_utility(Action::OptIn, signal, k, params)?,
        opt_out: 0.0,
    })
}

/// Truthful voting is strictly optimal for both signals.
pub fn utility_conditions_hold(k: usize, params: &ModelParams) -> Result<bool> {
    let g = expected_utility(Action::OptIn, Signal::G, k, params)?;
    let b = expected_utility(Action::OptIn, Signal::B, k, params)?;
    Ok(g > 0.0 && b < 0.0)
}

/// `mu` lies strictly inside `I_K`.
pub fn is_ic(k: usize, params: &ModelParams) -> Result<bool> {
    is_ic_at(k, params.mu(), params.q())
}

pub(crate) fn is_ic_at(k: usize, mu: f64, q: f64) -> Result<bool> {
    let iv = ic_interval(k, q)?;
    Ok(place(k, mu, q, &iv) == Placement::Inside)
}

/// `[K_min(mu), K_bar(mu)]`, or `None` when `mu >= q` and no batch size is
/// incentive-compatible.
pub fn batch_bounds(params: &ModelParams) -> Result<Option<BatchBounds>> {
    batch_bounds_with(params, &SearchConfig::default())
}

pub fn batch_bounds_with(params: &ModelParams, cfg: &SearchConfig) -> Result<Option<BatchBounds>> {
    match scan(params.mu(), params.q(), usize::MAX, cfg)? {
        Scan::Impossible => Ok(None),
        Scan::Found(b) => Ok(Some(b)),
        Scan::BeyondCap => unreachable!("uncapped scan"),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) enum Scan {
    /// `mu >= q`
    Impossible,
    Found(BatchBounds),
    /// `K_bar(mu)` exceeds the caller's cap.
    BeyondCap,
}

/// Scans odd `K` upward until `mu >= upper_K`. Stops early with
/// [`Scan::BeyondCap`] once `K` passes `cap` with the scan still open.
pub(crate) fn scan(mu: f64, q: f64, cap: usize, cfg: &SearchConfig) -> Result<Scan> {
    scan_by(mu, q, cap, cfg, |k| ic_interval(k, q))
}

/// [`scan`] with a caller-supplied interval table.
pub(crate) fn scan_by(
    mu: f64,
    q: f64,
    cap: usize,
    cfg: &SearchConfig,
    mut interval: impl FnMut(usize) -> Result<IcInterval>,
) -> Result<Scan> {
    if mu >= q {
        return Ok(Scan::Impossible);
    }
    let mut min_k = None;
    let mut max_k = None;
    let mut k = 1;
    loop {
        if k > cap {
            return Ok(Scan::BeyondCap);
        }
        if k > cfg.k_max {
            return Err(Error::SearchExhausted { k_max: cfg.k_max });
        }
        let iv = interval(k)?;
        match place(k, mu, q, &iv) {
            Placement::Above => break,
            Placement::Inside => {
                min_k.get_or_insert(k);
                max_k = Some(k);
            }
            Placement::Below => {}
        }
        k += 2;
    }
    match (min_k, max_k) {
        (Some(min_k), Some(max_k)) => Ok(Scan::Found(BatchBounds { min_k, max_k })),
        _ => Err(Error::domain(format!(
            "no incentive-compatible batch found for mu = {mu}, q = {q}"
        ))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn params(mu: f64, q: f64) -> ModelParams {
        ModelParams::new(mu, q, 345).unwrap()
    }

    const Q3: [f64; 3] = [0.6, 0.7, 0.8];

    #[test]
    fn single_voter_always_receives() {
        for q in [0.55, 0.6, 0.9] {
            let ab = alloc_probs(1, q).unwrap();
            assert_eq!(ab.good, 1.0);
            assert_eq!(ab.bad, 1.0);
        }
        assert!(alloc_probs(4, 0.6).is_err());
    }

    #[test]
    fn two_routes_for_alloc_probs_agree() {
        for q in [0.51, 0.55, 0.6, 0.7, 0.8, 0.9, 0.95] {
            for k in (1..=99).step_by(2) {
                let a = alloc_probs(k, q).unwrap();
                let b = alloc_probs_via_tails(k, q).unwrap();
                assert!((a.good - b.good).abs() < 1e-12, "K={k} q={q}");
                assert!((a.bad - b.bad).abs() < 1e-12, "K={k} q={q}");
                if k > 1 {
                    assert!(0.0 < a.bad && a.bad < a.good && a.good < 1.0);
                }
            }
        }
    }

    #[test]
    fn utility_examples() {
        let p = params(0.5, 0.7);
        for s in [Signal::G, Signal::B] {
            assert_eq!(expected_utility(Action::OptOut, s, 1, &p).unwrap(), 0.0);
        }
        let g = expected_utility(Action::OptIn, Signal::G, 1, &p).unwrap();
        let b = expected_utility(Action::OptIn, Signal::B, 1, &p).unwrap();
        assert!((g - (0.5 * 0.7 - 0.5 * 0.3)).abs() < 1e-15 && g > 0.0);
        assert!(b < 0.0);
        assert!(expected_utility(Action::OptIn, Signal::G, 2, &p).is_err());
        let pair = utility_pair(Signal::G, 3, &p).unwrap();
        assert_eq!(pair.opt_out, 0.0);
    }

    #[test]
    fn interval_closed_forms() {
        for q in Q3 {
            let i1 = ic_interval(1, q).unwrap();
            assert!((i1.lower - (1.0 - q)).abs() < 1e-12);
            assert!((i1.upper - q).abs() < 1e-12);
            let i3 = ic_interval(3, q).unwrap();
            assert!((i3.lower - (1.0 - q).powi(2) * (2.0 * q + 1.0)).abs() < 1e-12);
            assert!((i3.upper - (q / 2.0 + 0.25)).abs() < 1e-12);
        }
        let i3 = ic_interval(3, 0.6).unwrap();
        assert!((i3.lower - 0.352).abs() < 1e-12);
        assert!((i3.upper - 0.55).abs() < 1e-12);
        assert!(ic_interval(2, 0.6).is_err());
    }

    #[test]
    fn is_ic_examples() {
        assert!(is_ic(1, &params(0.5, 0.7)).unwrap());
        assert!(!is_ic(3, &params(0.55, 0.6)).unwrap());
        for q in [0.55, 0.6, 0.65, 0.7, 0.75, 0.8, 0.85, 0.9, 0.95] {
            for k in (1..=31).step_by(2) {
                assert!(!is_ic(k, &params(q, q)).unwrap(), "K={k} q={q}");
            }
            // mu = 1 - q is the closed lower end of I_1
            assert!(!is_ic(1, &params(1.0 - q, q)).unwrap());
        }
    }

    #[test]
    fn exact_boundaries_on_decimal_grid() {
        // q/2 + 1/4 lands on the grid for these q; the open interval excludes it.
        assert_eq!(place_exact(3, 0.55, 0.6), Placement::Above);
        assert_eq!(place_exact(3, 0.6, 0.7), Placement::Above);
        assert_eq!(place_exact(1, 0.7, 0.7), Placement::Above);
        assert_eq!(place_exact(1, 0.3, 0.7), Placement::Below);
        assert_eq!(place_exact(3, 0.5, 0.6), Placement::Inside);
    }

    #[test]
    fn batch_bounds_examples() {
        assert_eq!(
            batch_bounds(&params(0.55, 0.6)).unwrap(),
            Some(BatchBounds { min_k: 1, max_k: 1 })
        );
        assert_eq!(batch_bounds(&params(0.7, 0.6)).unwrap(), None);
        assert_eq!(batch_bounds(&params(0.6, 0.6)).unwrap(), None);

        let p = params(0.45, 0.6);
        let ic: Vec<usize> = (1..=999).step_by(2).filter(|&k| is_ic(k, &p).unwrap()).collect();
        let b = batch_bounds(&p).unwrap().unwrap();
        assert_eq!(b.min_k, ic[0]);
        assert_eq!(b.max_k, *ic.last().unwrap());
    }

    #[test]
    fn search_cap_is_enforced() {
        let cfg = SearchConfig { k_max: 5 };
        let err = batch_bounds_with(&params(0.001, 0.6), &cfg).unwrap_err();
        assert_eq!(err, Error::SearchExhausted { k_max: 5 });
    }

    #[test]
    fn intervals_decrease_and_overlap() {
        for q in Q3 {
            let ivs: Vec<IcInterval> = (1..=201).step_by(2).map(|k| ic_interval(k, q).unwrap()).collect();
            for w in ivs.windows(2) {
                let (prev, cur) = (w[0], w[1]);
                assert!(cur.lower < prev.lower && cur.upper < prev.upper, "q={q}");
                assert!(cur.lower < prev.lower && prev.lower < cur.upper && cur.upper < prev.upper);
                assert!(cur.lower > 0.0 && cur.lower < cur.upper && cur.upper <= q);
            }
        }
    }

    #[test]
    fn endpoints_solve_indifference_conditions() {
        for q in Q3 {
            for k in (1..=99).step_by(2) {
                let ab = alloc_probs(k, q).unwrap();
                let iv = ic_interval(k, q).unwrap();
                let ratio = ab.bad / ab.good;
                let lo = iv.lower / (1.0 - iv.lower);
                let hi = iv.upper / (1.0 - iv.upper);
                assert!(((lo - (1.0 - q) / q * ratio) / lo).abs() < 1e-10, "K={k} q={q}");
                assert!(((hi - q / (1.0 - q) * ratio) / hi).abs() < 1e-10, "K={k} q={q}");
                let (up, low) = binom::majority_tails(k, q).unwrap();
                let tail_form = q / (1.0 - q) * low / up;
                assert!(((ratio - tail_form) / ratio).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn optimal_batch_weakly_decreases_in_mu() {
        for q in Q3 {
            let mut prev = usize::MAX;
            let mut i = 1;
            loop {
                let mu = i as f64 / 1000.0;
                if mu >= q {
                    break;
                }
                let b = batch_bounds(&params(mu, q)).unwrap().expect("exists below q");
                assert!(b.max_k <= prev, "mu={mu} q={q}");
                assert!(b.min_k <= b.max_k && b.min_k % 2 == 1 && b.max_k % 2 == 1);
                prev = b.max_k;
                i += 1;
            }
        }
    }

    #[test]
    fn ic_sizes_are_contiguous() {
        for q in Q3 {
            for i in 1..100 {
                let mu = i as f64 / 100.0;
                let p = params(mu, q);
                let ic: Vec<usize> = (1..=199).step_by(2).filter(|&k| is_ic(k, &p).unwrap()).collect();
                if let (Some(&a), Some(&b)) = (ic.first(), ic.last()) {
                    assert_eq!(ic.len(), (b - a) / 2 + 1, "mu={mu} q={q}");
                }
                assert_eq!(
                    ic.is_empty(),
                    mu >= q || batch_bounds(&p).unwrap().unwrap().min_k > 199
                );
            }
        }
    }

    #[test]
    fn three_way_equivalence_off_boundary() {
        for q in [0.55, 0.6, 0.7, 0.8, 0.9] {
            for i in 0..100 {
                let mu = 0.0037 + i as f64 * 0.0099;
                let p = params(mu, q);
                for k in (1..=25).step_by(2) {
                    let iv = ic_interval(k, q).unwrap();
                    let by_interval = iv.contains(mu);
                    assert_eq!(is_ic(k, &p).unwrap(), by_interval, "K={k} mu={mu} q={q}");
                    assert_eq!(
                        utility_conditions_hold(k, &p).unwrap(),
                        by_interval,
                        "K={k} mu={mu} q={q}"
                    );
                }
            }
        }
    }
}
