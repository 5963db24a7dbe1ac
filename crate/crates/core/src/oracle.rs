//! Independent checks: exhaustive enumeration over signal profiles for
//! small instances, and seeded Monte Carlo for large ones.
//!
//! Enumeration never calls the closed forms it is meant to check. Monte
//! Carlo trials draw from per-trial generators seeded by a hash of
//! `(seed, trial)` and are reduced as integer success counts, so an
//! estimate depends only on `(seed, trials)` and not on thread scheduling.

use num_bigint::BigInt;
use num_rational::BigRational;
use num_traits::{One, Zero};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::binom::rational_from_f64;
use crate::error::{check_odd, Error, Result};
use crate::greedy::{run_mechanism_with, Planner};
use crate::ic::AllocProbs;
use crate::model::{CorrectnessReport, MechanismSpec, Method, ModelParams, Quality, RunTrace, Signal};
use crate::seqmech;

/// Largest batch or population enumerated exhaustively.
pub const ENUMERATION_CAP: usize = 15;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct McConfig {
    pub trials: u64,
    pub seed: u64,
    pub confidence_z: f64,
}

impl McConfig {
    pub fn new(trials: u64, seed: u64) -> Result<Self> {
        if trials == 0 {
            return Err(Error::domain("trials must be at least 1"));
        }
        Ok(McConfig {
            trials,
            seed,
            confidence_z: 3.0,
        })
    }

    /// `|estimate - exact| <= z * std_error`.
    pub fn covers(&self, report: &CorrectnessReport, exact: f64) -> bool {
        (report.value - exact).abs() <= self.confidence_z * report.std_error
    }
}

fn guard(n: usize, what: &'static str) -> Result<()> {
    if n > ENUMERATION_CAP {
        Err(Error::CostGuard {
            what,
            limit: ENUMERATION_CAP,
        })
    } else {
        Ok(())
    }
}

/// Yes-vote counts of the `K - 1` other voters, tallied by walking every
/// profile. `counts[y]` profiles have exactly `y` positive signals.
fn profile_counts(others: usize) -> Vec<u64> {
    let mut counts = vec![0u64; others + 1];
    for mask in 0u32..(1u32 << others) {
        counts[mask.count_ones() as usize] += 1;
    }
    counts
}

/// `G_K` and `B_K` by enumerating the other voters' signals with agent 1
/// holding `g` and voting yes. Recipient choice is integrated out: agent 1
/// receives the object with probability `1 / Y` once a majority forms.
pub fn brute_force_alloc_probs(k: usize, q: f64) -> Result<AllocProbs> {
    check_odd(k)?;
    guard(k, "batch size")?;
    crate::binom::BinomialSpec::new(k as u64, q)?;
    let m = k.div_ceil(2);
    let mut good = 0.0;
    let mut bad = 0.0;
    for mask in 0u32..(1u32 << (k - 1)) {
        let others_yes = mask.count_ones() as usize;
        let others_no = k - 1 - others_yes;
        let yes = others_yes + 1;
        if yes < m {
            continue;
        }
        let share = 1.0 / yes as f64;
        good += share * q.powi(others_yes as i32) * (1.0 - q).powi(others_no as i32);
        bad += share * (1.0 - q).powi(others_yes as i32) * q.powi(others_no as i32);
    }
    Ok(AllocProbs { good, bad })
}

/// Exact rational `(G_K, B_K)` at the binary value of `q`.
pub fn brute_force_alloc_probs_exact(k: usize, q: f64) -> Result<(BigRational, BigRational)> {
    check_odd(k)?;
    guard(k, "batch size")?;
    crate::binom::BinomialSpec::new(k as u64, q)?;
    let q = rational_from_f64(q);
    let nq = BigRational::one() - &q;
    let m = k.div_ceil(2);
    let mut good = BigRational::zero();
    let mut bad = BigRational::zero();
    for (others_yes, &count) in profile_counts(k - 1).iter().enumerate() {
        let yes = others_yes + 1;
        if yes < m || count == 0 {
            continue;
        }
        let others_no = (k - 1 - others_yes) as i32;
        let share = BigRational::new(BigInt::from(count), BigInt::from(yes));
        good += &share * q.pow(others_yes as i32) * nq.pow(others_no);
        bad += &share * nq.pow(others_yes as i32) * q.pow(others_no);
    }
    Ok((good, bad))
}

/// Both truthful-voting conditions, evaluated exactly from enumerated
/// allocation probabilities:
/// `mu q G > (1-mu)(1-q) B` and `mu (1-q) G < (1-mu) q B`.
pub fn ic_empirical_check(k: usize, params: &ModelParams) -> Result<bool> {
    let (g, b) = brute_force_alloc_probs_exact(k, params.q())?;
    let mu = rational_from_f64(params.mu());
    let q = rational_from_f64(params.q());
    let one = BigRational::one();
    let (nmu, nq) = (&one - &mu, &one - &q);
    let good_signal = &mu * &q * &g > &nmu * &nq * &b;
    let bad_signal = &mu * &nq * &g < &nmu * &q * &b;
    Ok(good_signal && bad_signal)
}

/// Correctness by running the mechanism on every signal profile and
/// weighting each outcome by its probability under both qualities.
pub fn brute_force_correctness(spec: MechanismSpec, params: &ModelParams) -> Result<CorrectnessReport> {
    spec.validate()?;
    let n = match spec {
        MechanismSpec::Sequential => params.population().min(2),
        _ => params.population(),
    };
    guard(n, "population")?;
    let planner = Planner::new(params)?;
    let q = params.q();
    let mut good = 0.0;
    let mut bad = 0.0;
    let mut signals = vec![Signal::B; n];
    for mask in 0u32..(1u32 << n) {
        for (i, s) in signals.iter_mut().enumerate() {
            *s = if mask >> i & 1 == 1 { Signal::G } else { Signal::B };
        }
        let yes = mask.count_ones() as i32;
        let no = n as i32 - yes;
        let decision = match spec {
            MechanismSpec::Sequential => seqmech::seq_outcome(params, &signals)?,
            _ => run_mechanism_with(&planner, spec, Quality::Good, &signals, 0)?.decision,
        };
        if decision.is_correct(Quality::Good) {
            good += q.powi(yes) * (1.0 - q).powi(no);
        }
        if decision.is_correct(Quality::Bad) {
            bad += (1.0 - q).powi(yes) * q.powi(no);
        }
    }
    let value = params.mu() * good + (1.0 - params.mu()) * bad;
    Ok(CorrectnessReport::exact(value, Method::BruteForce))
}

/// SplitMix64 finalizer.
fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Seed of trial `trial` under run seed `seed`.
pub fn trial_seed(seed: u64, trial: u64) -> u64 {
    mix(seed ^ mix(trial))
}

/// Replays trial `trial` of a simulation run under `seed`.
pub fn mc_trial(spec: MechanismSpec, params: &ModelParams, seed: u64, trial: u64) -> Result<RunTrace> {
    let planner = Planner::new(params)?;
    let mut signals = vec![Signal::B; params.population()];
    trial_into(&planner, spec, seed, trial, &mut signals)
}

/// Draws the quality and every signal from the trial's own generator.
fn trial_into(
    planner: &Planner,
    spec: MechanismSpec,
    seed: u64,
    trial: u64,
    signals: &mut [Signal],
) -> Result<RunTrace> {
    let params = planner.params();
    let s = trial_seed(seed, trial);
    let mut rng = ChaCha8Rng::seed_from_u64(s);
    let quality = if rng.gen::<f64>() < params.mu() {
        Quality::Good
    } else {
        Quality::Bad
    };
    for sig in signals.iter_mut() {
        *sig = Signal::sample(quality, params.q(), &mut rng);
    }
    run_mechanism_with(planner, spec, quality, signals, s)
}

/// Plain Monte Carlo estimate of correctness.
pub fn mc_correctness(
    spec: MechanismSpec,
    params: &ModelParams,
    cfg: &McConfig,
) -> Result<CorrectnessReport> {
    spec.validate()?;
    if cfg.trials == 0 {
        return Err(Error::domain("trials must be at least 1"));
    }
    let planner = Planner::new(params)?;
    let successes = (0..cfg.trials)
        .into_par_iter()
        .map_init(
            || vec![Signal::B; params.population()],
            |signals, t| -> Result<u64> {
                let trace = trial_into(&planner, spec, cfg.seed, t, signals)?;
                Ok(trace.decision.is_correct(trace.true_quality) as u64)
            },
        )
        .try_reduce(|| 0, |a, b| Ok(a + b))?;
    Ok(CorrectnessReport::monte_carlo(successes, cfg.trials))
}
