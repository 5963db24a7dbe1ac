//! The multi-batch voting engine.
//!
//! Each batch is the largest incentive-compatible size `K_bar` for the
//! current public belief. A batch that reaches a majority allocates the
//! object to one of its yes-voters; otherwise the belief is updated from the
//! vote count and the next batch is drawn from the remaining queue.
//!
//! Beliefs are indexed by the running net vote count `sum(2Y - K)`, which
//! is an exact integer: the belief after any history is
//! `logistic(logit(mu) + net * ln(q / (1 - q)))`. The engine, the dynamic
//! program and the oracles all resolve batch sizes through one [`Planner`],
//! so they agree on every boundary decision.

use std::collections::{BTreeMap, HashMap};
use std::sync::{Arc, Mutex, OnceLock};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::binom::{self, BinomialSpec};
use crate::error::{check_odd, Error, Result};
use crate::ic::{self, IcInterval, Scan, SearchConfig};
use crate::model::{
    BatchRecord, CorrectnessReport, Decision, MechanismSpec, Method, ModelParams, Quality, RunTrace, Signal,
};
use crate::seqmech;

/// Snapshot of an in-progress greedy run.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GreedyState {
    pub belief: f64,
    pub batches_run: usize,
    pub agents_used: usize,
    pub horizon_left: Option<usize>,
}

/// Minimal count of positive signals at which a planner who sees every
/// signal allocates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoIncentivesThreshold {
    pub ybar: f64,
}

fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

fn logistic(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Bayes update of `P(Good)` after `y` of `k` truthful votes were yes.
pub fn posterior_update(prev: f64, k: usize, y: usize, q: f64) -> Result<f64> {
    if !(prev > 0.0 && prev < 1.0) {
        return Err(Error::OutOfRange {
            field: "prior",
            value: prev,
        });
    }
    check_odd(k)?;
    if y > k {
        return Err(Error::domain(format!("yes votes {y} exceed batch size {k}")));
    }
    BinomialSpec::new(k as u64, q)?;
    let net = 2.0 * y as f64 - k as f64;
    Ok(logistic(logit(prev) + net * logit(q)))
}

/// What the greedy rule does at a given belief.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BatchChoice {
    /// `belief >= q`: nobody can be made to vote truthfully and everyone
    /// opts in.
    AllOptIn,
    Offer(usize),
    /// `K_bar` exceeds the whole population.
    Oversized,
}

/// Batch-size oracle for one `(mu, q, population)`, memoized by net vote
/// count. Safe to share across threads.
#[derive(Debug)]
pub struct Planner {
    params: ModelParams,
    cfg: SearchConfig,
    logit_mu: f64,
    step: f64,
    cache: Mutex<HashMap<i64, BatchChoice>>,
    rows: Mutex<HashMap<usize, Arc<VoteRows>>>,
    /// `I_1, I_3, ...` in order, grown on demand.
    intervals: Mutex<Vec<IcInterval>>,
    profile: OnceLock<Result<Arc<HorizonProfile>>>,
}

/// Vote-count probabilities of one batch size, minority side only.
#[derive(Debug)]
struct VoteRows {
    /// `P(Y = y | Good)` for `y < (K+1)/2`
    good: Vec<f64>,
    /// `P(Y = y | Bad)` for `y < (K+1)/2`
    bad: Vec<f64>,
    /// `P(Y >= (K+1)/2 | Good)`
    majority: f64,
    /// `P(Y < (K+1)/2 | Good)`
    minority: f64,
}

impl Planner {
    pub fn new(params: &ModelParams) -> Result<Self> {
        Self::with_config(params, SearchConfig::from_env()?)
    }

    pub fn with_config(params: &ModelParams, cfg: SearchConfig) -> Result<Self> {
        Ok(Planner {
            params: *params,
            cfg,
            logit_mu: logit(params.mu()),
            step: logit(params.q()),
            cache: Mutex::new(HashMap::new()),
            rows: Mutex::new(HashMap::new()),
            intervals: Mutex::new(Vec::new()),
            profile: OnceLock::new(),
        })
    }

    pub fn params(&self) -> &ModelParams {
        &self.params
    }

    /// Public belief after a history with net vote count `net`.
    pub fn belief(&self, net: i64) -> f64 {
        if net == 0 {
            self.params.mu()
        } else {
            logistic(self.logit_mu + net as f64 * self.step)
        }
    }

    pub fn choice(&self, net: i64) -> Result<BatchChoice> {
        if let Some(&c) = self.cache.lock().unwrap().get(&net) {
            return Ok(c);
        }
        let q = self.params.q();
        let interval = |k: usize| -> Result<IcInterval> {
            let mut table = self.intervals.lock().unwrap();
            while table.len() <= k / 2 {
                let next = 2 * table.len() + 1;
                table.push(ic::ic_interval(next, q)?);
            }
            Ok(table[k / 2])
        };
        let found = match ic::scan_by(self.belief(net), q, self.params.population(), &self.cfg, interval)? {
            Scan::Impossible => BatchChoice::AllOptIn,
            Scan::Found(b) => BatchChoice::Offer(b.max_k),
            Scan::BeyondCap => BatchChoice::Oversized,
        };
        self.cache.lock().unwrap().insert(net, found);
        Ok(found)
    }

    fn rows(&self, k: usize) -> Arc<VoteRows> {
        if let Some(r) = self.rows.lock().unwrap().get(&k) {
            return Arc::clone(r);
        }
        let q = self.params.q();
        let m = k.div_ceil(2);
        let n = k as u64;
        let (majority, minority) = binom::majority_tails(k, q).expect("odd k and valid q");
        let r = Arc::new(VoteRows {
            good: (0..m as u64).map(|y| binom::pmf_raw(n, q, y)).collect(),
            bad: (0..m as u64).map(|y| binom::pmf_raw(n, 1.0 - q, y)).collect(),
            majority,
            minority,
        });
        self.rows.lock().unwrap().insert(k, Arc::clone(&r));
        r
    }
}

/// Single batch of `k` with truthful voting: `P(X_K >= (K+1)/2)`. Flagged
/// when `k` is not incentive-compatible at `params.mu()`.
pub fn single_batch_correctness(k: usize, params: &ModelParams) -> Result<CorrectnessReport> {
    let value = binom::majority_tail(k, params.q())?;
    let flagged = !ic::is_ic(k, params)?;
    Ok(CorrectnessReport::exact(value, Method::ClosedForm).flagged(flagged))
}

/// Exact correctness plus how far the mechanism can get.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ExactEvaluation {
    pub report: CorrectnessReport,
    /// `P(correct | Good)`
    pub given_good: f64,
    /// `P(correct | Bad)`
    pub given_bad: f64,
    /// Largest batch index offered on some history of positive probability.
    pub deepest_batch: usize,
}

pub fn exact_correctness(spec: MechanismSpec, params: &ModelParams) -> Result<CorrectnessReport> {
    Ok(exact_evaluation(spec, params)?.report)
}

pub fn exact_evaluation(spec: MechanismSpec, params: &ModelParams) -> Result<ExactEvaluation> {
    let planner = Planner::new(params)?;
    exact_evaluation_with(&planner, spec)
}

pub fn exact_evaluation_with(planner: &Planner, spec: MechanismSpec) -> Result<ExactEvaluation> {
    spec.validate()?;
    let params = planner.params();
    let (mu, q) = (params.mu(), params.q());
    let done = |good: f64, bad: f64, depth: usize, report: CorrectnessReport| ExactEvaluation {
        report,
        given_good: good,
        given_bad: bad,
        deepest_batch: depth,
    };
    match spec {
        MechanismSpec::Sequential => {
            let report = seqmech::seq_correctness(params);
            let (good, bad) = seq_conditionals(params)?;
            let depth = if params.population() >= 2 && seqmech::seq_strategy(1, params)?.reads_signal() {
                2
            } else {
                1
            };
            Ok(done(good, bad, depth, report))
        }
        MechanismSpec::SingleBatch(k) => {
            if k > params.population() {
                return Err(Error::InsufficientSignals {
                    needed: k,
                    got: params.population(),
                });
            }
            if mu >= q {
                return Ok(done(1.0, 0.0, 1, CorrectnessReport::exact(mu, Method::ExactDP)));
            }
            // a majority of yes votes under Good and of no votes under Bad
            // have the same probability
            let upper = binom::majority_tail(k, q)?;
            let flagged = !ic::is_ic(k, params)?;
            let report = CorrectnessReport::exact(upper, Method::ExactDP).flagged(flagged);
            Ok(done(upper, upper, 1, report))
        }
        MechanismSpec::GreedyHorizon(_) | MechanismSpec::GreedyUnbounded => {
            let horizon = match spec {
                MechanismSpec::GreedyHorizon(j) => Some(j),
                _ => None,
            };
            let profile = planner.profile()?;
            let (good, bad) = profile.conditionals(horizon);
            let value = profile.correctness(horizon);
            Ok(done(
                good,
                bad,
                profile.deepest_batch().min(horizon.unwrap_or(usize::MAX)),
                CorrectnessReport::exact(value, Method::ExactDP),
            ))
        }
    }
}

fn seq_conditionals(params: &ModelParams) -> Result<(f64, f64)> {
    let q = params.q();
    let mut good = 0.0;
    let mut bad = 0.0;
    for s1 in [Signal::G, Signal::B] {
        for s2 in [Signal::G, Signal::B] {
            let d = seqmech::seq_outcome(params, &[s1, s2])?;
            let lik = |s: Signal, g: bool| if s.is_good() == g { q } else { 1.0 - q };
            if d.is_correct(Quality::Good) {
                good += lik(s1, true) * lik(s2, true);
            }
            if d.is_correct(Quality::Bad) {
                bad += lik(s1, false) * lik(s2, false);
            }
        }
    }
    Ok((good, bad))
}

/// Every horizon of the greedy mechanism from one forward pass over
/// failure histories.
///
/// Layer `d` holds the states reached after `d` failed batches, keyed by
/// `(net vote count, agents used)`, with the probability of reaching each
/// given Good and given Bad. `Greedy^J` discards everything still alive in
/// layer `J`, so all horizons share one pass.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HorizonProfile {
    mu: f64,
    /// `P(correct | Good)` of `Greedy^J` at index `J - 1`.
    good: Vec<f64>,
    /// `P(correct | Bad)` of `Greedy^J` at index `J - 1`.
    bad: Vec<f64>,
    /// [`next_batch_gain`] for `J` at index `J - 1`.
    gains: Vec<f64>,
    /// `c(Greedy^J)` at index `J - 1`, built as `c(Greedy^1)` plus the
    /// running sum of gains so that it never decreases in `J`.
    correctness: Vec<f64>,
    deepest_batch: usize,
}

impl HorizonProfile {
    fn index(&self, horizon: Option<usize>) -> usize {
        horizon.map_or(self.good.len(), |j| j.min(self.good.len())) - 1
    }

    /// Conditional correctness `(given Good, given Bad)`; `None` is the
    /// unbounded mechanism.
    pub fn conditionals(&self, horizon: Option<usize>) -> (f64, f64) {
        let i = self.index(horizon);
        (self.good[i], self.bad[i])
    }

    pub fn correctness(&self, horizon: Option<usize>) -> f64 {
        self.correctness[self.index(horizon)]
    }

    pub fn gain(&self, j: usize) -> f64 {
        self.gains.get(j.wrapping_sub(1)).copied().unwrap_or(0.0)
    }

    /// Largest batch index offered on some history of positive probability.
    pub fn deepest_batch(&self) -> usize {
        self.deepest_batch
    }
}

impl Planner {
    pub fn profile(&self) -> Result<Arc<HorizonProfile>> {
        self.profile.get_or_init(|| self.forward().map(Arc::new)).clone()
    }

    fn forward(&self) -> Result<HorizonProfile> {
        let mu = self.params.mu();
        let population = self.params.population();
        let mut profile = HorizonProfile {
            mu,
            good: Vec::new(),
            bad: Vec::new(),
            gains: Vec::new(),
            correctness: Vec::new(),
            deepest_batch: 0,
        };
        // allocations and queue-exhaustion discards of the layers processed
        // so far; these count toward every longer horizon
        let mut settled_good = 0.0;
        let mut settled_bad = 0.0;
        let mut layer: BTreeMap<(i64, usize), (f64, f64)> = BTreeMap::from([((0, 0), (1.0, 1.0))]);
        for depth in 0.. {
            if depth > 0 {
                // `Greedy^depth` discards whatever is still alive here
                let alive_bad: f64 = layer.values().map(|m| m.1).sum();
                profile.good.push(settled_good);
                profile.bad.push(settled_bad + alive_bad);
            }
            if layer.is_empty() {
                break;
            }
            let mut next: BTreeMap<(i64, usize), (f64, f64)> = BTreeMap::new();
            let mut gain = 0.0;
            let mut discarded = 0.0;
            for (&(net, used), &(rg, rb)) in &layer {
                let belief = self.belief(net);
                let reach = mu * rg + (1.0 - mu) * rb;
                let offered = match self.choice(net)? {
                    BatchChoice::AllOptIn => {
                        settled_good += rg;
                        gain += reach * (2.0 * belief - 1.0);
                        true
                    }
                    BatchChoice::Offer(k) if used + k <= population => {
                        let rows = self.rows(k);
                        settled_good += rg * rows.majority;
                        gain += reach * (belief - rows.minority);
                        for y in 0..rows.good.len() {
                            let slot = next
                                .entry((net + 2 * y as i64 - k as i64, used + k))
                                .or_insert((0.0, 0.0));
                            slot.0 += rg * rows.good[y];
                            slot.1 += rb * rows.bad[y];
                        }
                        true
                    }
                    _ => {
                        discarded += rb;
                        false
                    }
                };
                if offered && reach > 0.0 {
                    profile.deepest_batch = profile.deepest_batch.max(depth + 1);
                }
            }
            // summed per layer so that a layer discarded in full adds exactly
            // the mass the shorter horizon already counted
            settled_bad += discarded;
            if depth > 0 {
                profile.gains.push(gain);
            }
            layer = next;
        }
        let first = mu * profile.good[0] + (1.0 - mu) * profile.bad[0];
        profile.correctness = std::iter::once(0.0)
            .chain(profile.gains.iter().copied())
            .scan(first, |c, g| {
                *c += g;
                Some(*c)
            })
            .take(profile.good.len())
            .collect();
        Ok(profile)
    }
}

/// `c(Greedy^{J+1}) - c(Greedy^J)`, accumulated as a sum of nonnegative
/// terms instead of a difference of two correctness values.
///
/// Each history that survives `J` failed batches and can still fit batch
/// `J + 1` contributes `P(history) * (belief - lower_K)`: replacing the
/// discard by one more majority vote raises correctness by exactly that
/// much, and the term is positive because the belief lies inside `I_K`.
pub fn next_batch_gain(j: usize, params: &ModelParams) -> Result<f64> {
    Ok(Planner::new(params)?.profile()?.gain(j))
}

/// Executes a mechanism on a fixed signal profile.
pub fn run_mechanism(
    spec: MechanismSpec,
    params: &ModelParams,
    true_quality: Quality,
    signals: &[Signal],
    seed: u64,
) -> Result<RunTrace> {
    let planner = Planner::new(params)?;
    run_mechanism_with(&planner, spec, true_quality, signals, seed)
}

pub fn run_mechanism_with(
    planner: &Planner,
    spec: MechanismSpec,
    true_quality: Quality,
    signals: &[Signal],
    seed: u64,
) -> Result<RunTrace> {
    spec.validate()?;
    let params = *planner.params();
    let mut trace = RunTrace {
        params,
        spec,
        true_quality,
        signals: signals.to_vec(),
        batches: Vec::new(),
        decision: Decision::discard(),
        seed,
    };
    if spec == MechanismSpec::Sequential {
        run_sequential(&mut trace)?;
        return Ok(trace);
    }
    if signals.len() < params.population() {
        return Err(Error::InsufficientSignals {
            needed: params.population(),
            got: signals.len(),
        });
    }
    let signals = &signals[..params.population()];
    let (mu, q) = (params.mu(), params.q());

    if let MechanismSpec::SingleBatch(k) = spec {
        if k > signals.len() {
            return Err(Error::InsufficientSignals {
                needed: k,
                got: signals.len(),
            });
        }
        let yes = if mu >= q {
            k
        } else {
            signals[..k].iter().filter(|s| s.is_good()).count()
        };
        let posterior = if mu >= q {
            mu
        } else {
            posterior_update(mu, k, yes, q)?
        };
        close_batch(&mut trace, 0, k, yes, posterior, seed, |i| {
            mu >= q || signals[i].is_good()
        });
        return Ok(trace);
    }

    let mut state = GreedyState {
        belief: mu,
        batches_run: 0,
        agents_used: 0,
        horizon_left: match spec {
            MechanismSpec::GreedyHorizon(j) => Some(j),
            _ => None,
        },
    };
    let mut net = 0i64;
    while state.horizon_left != Some(0) {
        let k = match planner.choice(net)? {
            BatchChoice::AllOptIn => {
                close_batch(&mut trace, 0, 1, 1, state.belief, seed, |_| true);
                break;
            }
            BatchChoice::Oversized => break,
            BatchChoice::Offer(k) if state.agents_used + k > signals.len() => break,
            BatchChoice::Offer(k) => k,
        };
        let start = state.agents_used;
        let yes = signals[start..start + k].iter().filter(|s| s.is_good()).count();
        net += 2 * yes as i64 - k as i64;
        let posterior = planner.belief(net);
        if close_batch(&mut trace, start, k, yes, posterior, seed, |i| {
            signals[i].is_good()
        }) {
            break;
        }
        state = GreedyState {
            belief: posterior,
            batches_run: state.batches_run + 1,
            agents_used: start + k,
            horizon_left: state.horizon_left.map(|h| h - 1),
        };
    }
    Ok(trace)
}

/// Records a batch over queue slots `start..start + k`. On a majority,
/// allocates to a uniformly drawn yes-voter and returns `true`.
fn close_batch(
    trace: &mut RunTrace,
    start: usize,
    k: usize,
    yes: usize,
    posterior: f64,
    seed: u64,
    votes_yes: impl Fn(usize) -> bool,
) -> bool {
    let index = trace.batches.len() + 1;
    let record = BatchRecord {
        index,
        size: k,
        yes_votes: yes,
        posterior,
    };
    trace.batches.push(record);
    if !record.majority_reached() {
        return false;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64);
    let pick = rng.gen_range(0..yes);
    let slot = (start..start + k)
        .filter(|&i| votes_yes(i))
        .nth(pick)
        .expect("pick < yes");
    trace.decision = Decision::allocate(slot + 1);
    true
}

fn run_sequential(trace: &mut RunTrace) -> Result<()> {
    let params = trace.params;
    trace.decision = seqmech::seq_outcome(&params, &trace.signals)?;
    let last = trace.decision.recipient().unwrap_or(2).min(params.population());
    let mut belief = params.mu();
    for position in 1..=last {
        let strategy = seqmech::seq_strategy(position, &params)?;
        let accepted = trace.decision.recipient() == Some(position);
        if strategy.reads_signal() {
            belief = posterior_update(belief, 1, accepted as usize, params.q())?;
        }
        trace.batches.push(BatchRecord {
            index: position,
            size: 1,
            yes_votes: accepted as usize,
            posterior: belief,
        });
    }
    Ok(())
}

pub fn no_incentives_threshold(params: &ModelParams) -> NoIncentivesThreshold {
    let (mu, q) = (params.mu(), params.q());
    NoIncentivesThreshold {
        ybar: 0.5 * ((1.0 - mu) / mu).ln() / logit(q) + 0.5 * params.population() as f64,
    }
}

/// `P(X_I >= ybar)` with `X_I ~ Binomial(I, q)`.
pub fn upper_bound_correctness(params: &ModelParams) -> Result<CorrectnessReport> {
    let ybar = no_incentives_threshold(params).ybar;
    let spec = BinomialSpec::new(params.population() as u64, params.q())?;
    Ok(CorrectnessReport::exact(
        binom::tail(spec, ybar),
        Method::ClosedForm,
    ))
}

/// The full-information planner's correctness, conditioning the vote count
/// on the true quality: `mu P(X >= ybar | q) + (1 - mu) P(X < ybar | 1 - q)`.
pub fn upper_bound_correctness_mixed(params: &ModelParams) -> Result<CorrectnessReport> {
    let ybar = no_incentives_threshold(params).ybar;
    let n = params.population() as u64;
    let mu = params.mu();
    let good = binom::tail(BinomialSpec::new(n, params.q())?, ybar);
    let bad = binom::tail_complement(BinomialSpec::new(n, 1.0 - params.q())?, ybar);
    Ok(CorrectnessReport::exact(
        mu * good + (1.0 - mu) * bad,
        Method::ClosedForm,
    ))
}
