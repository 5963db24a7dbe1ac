//! Domain types shared by every mechanism: the world parameters, the
//! primitive signal/action enums, and the records produced by a run.

use serde::{Deserialize, Serialize};

use crate::error::{check_odd, Error, Result};

/// Queue length used when the caller does not specify one.
pub const DEFAULT_POPULATION: usize = 345;

/// The world: common prior `mu = P(Good)`, signal precision `q`, and the
/// number of agents waiting in the queue.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    mu: f64,
    q: f64,
    population: usize,
}

impl ModelParams {
    pub fn new(mu: f64, q: f64, population: usize) -> Result<Self> {
        validate_params(mu, q, population)
    }

    pub fn with_default_population(mu: f64, q: f64) -> Result<Self> {
        validate_params(mu, q, DEFAULT_POPULATION)
    }

    pub fn mu(&self) -> f64 {
        self.mu
    }

    pub fn q(&self) -> f64 {
        self.q
    }

    pub fn population(&self) -> usize {
        self.population
    }

    /// Same world with a different prior. Used when a mechanism re-enters
    /// the single-batch problem at an updated belief.
    pub fn with_mu(&self, mu: f64) -> Result<Self> {
        validate_params(mu, self.q, self.population)
    }

    pub fn with_population(&self, population: usize) -> Result<Self> {
        validate_params(self.mu, self.q, population)
    }
}

/// Checks `0 < mu < 1`, `0.5 < q < 1` and `population >= 1`.
pub fn validate_params(mu: f64, q: f64, population: usize) -> Result<ModelParams> {
    // NaN fails both comparisons and is rejected with the field name.
    if !(mu > 0.0 && mu < 1.0) {
        return Err(Error::OutOfRange {
            field: "mu",
            value: mu,
        });
    }
    if !(q > 0.5 && q < 1.0) {
        return Err(Error::OutOfRange { field: "q", value: q });
    }
    if population == 0 {
        return Err(Error::OutOfRange {
            field: "population",
            value: 0.0,
        });
    }
    Ok(ModelParams { mu, q, population })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Quality {
    Good,
    Bad,
}

/// Private binary signal. `P(G | Good) = P(B | Bad) = q`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Signal {
    #[serde(rename = "g")]
    G,
    #[serde(rename = "b")]
    B,
}

impl Signal {
    pub fn is_good(self) -> bool {
        matches!(self, Signal::G)
    }

    /// Draws a signal for the given true quality.
    pub fn sample<R: rand::Rng + ?Sized>(quality: Quality, q: f64, rng: &mut R) -> Signal {
        let aligned = rng.gen::<f64>() < q;
        match (quality, aligned) {
            (Quality::Good, true) | (Quality::Bad, false) => Signal::G,
            _ => Signal::B,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Action {
    OptIn,
    OptOut,
}

impl Action {
    pub fn truthful(signal: Signal) -> Action {
        if signal.is_good() {
            Action::OptIn
        } else {
            Action::OptOut
        }
    }
}

/// Which mechanism to evaluate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum MechanismSpec {
    /// Offer to one agent at a time.
    Sequential,
    /// Offer once to the first `K` agents (K odd).
    SingleBatch(usize),
    /// Greedy batches of size `K̄(belief)`, at most `J` of them.
    GreedyHorizon(usize),
    /// Greedy batches until allocation or queue exhaustion.
    GreedyUnbounded,
}

impl MechanismSpec {
    pub fn single_batch(k: usize) -> Result<Self> {
        check_odd(k)?;
        Ok(MechanismSpec::SingleBatch(k))
    }

    pub fn greedy_horizon(j: usize) -> Result<Self> {
        if j == 0 {
            return Err(Error::domain("greedy horizon must be at least 1"));
        }
        Ok(MechanismSpec::GreedyHorizon(j))
    }

    pub fn validate(&self) -> Result<()> {
        match *self {
            MechanismSpec::SingleBatch(k) => check_odd(k),
            MechanismSpec::GreedyHorizon(0) => Err(Error::domain("greedy horizon must be at least 1")),
            _ => Ok(()),
        }
    }

    pub fn is_voting(&self) -> bool {
        !matches!(self, MechanismSpec::Sequential)
    }

    pub fn label(&self) -> String {
        match self {
            MechanismSpec::Sequential => "seq".to_string(),
            MechanismSpec::SingleBatch(k) => format!("single{k}"),
            MechanismSpec::GreedyHorizon(j) => format!("greedy{j}"),
            MechanismSpec::GreedyUnbounded => "greedy".to_string(),
        }
    }
}

/// The planner's decision `Z`. Recipients are 1-based queue positions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Decision {
    recipient: Option<usize>,
}

impl Decision {
    pub fn allocate(position: usize) -> Self {
        debug_assert!(position >= 1);
        Decision {
            recipient: Some(position),
        }
    }

    pub fn discard() -> Self {
        Decision { recipient: None }
    }

    pub fn allocated(&self) -> bool {
        self.recipient.is_some()
    }

    pub fn recipient(&self) -> Option<usize> {
        self.recipient
    }

    /// `true` for a good object allocated or a bad object withheld.
    pub fn is_correct(&self, quality: Quality) -> bool {
        self.allocated() == (quality == Quality::Good)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BatchRecord {
    /// 1-based batch number.
    pub index: usize,
    pub size: usize,
    pub yes_votes: usize,
    /// Belief after observing this batch's votes.
    pub posterior: f64,
}

impl BatchRecord {
    pub fn majority_reached(&self) -> bool {
        self.yes_votes >= self.size.div_ceil(2)
    }
}

/// One realized execution of a mechanism.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunTrace {
    pub params: ModelParams,
    pub spec: MechanismSpec,
    pub true_quality: Quality,
    pub signals: Vec<Signal>,
    pub batches: Vec<BatchRecord>,
    pub decision: Decision,
    pub seed: u64,
}

impl RunTrace {
    pub fn agents_used(&self) -> usize {
        self.batches.iter().map(|b| b.size).sum()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Method {
    ClosedForm,
    ExactDP,
    BruteForce,
    MonteCarlo,
}

impl Method {
    pub fn is_exact(self) -> bool {
        !matches!(self, Method::MonteCarlo)
    }
}

/// Correctness `c(V)`, exact or estimated.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CorrectnessReport {
    pub value: f64,
    pub method: Method,
    pub std_error: f64,
    pub trials: u64,
    /// Set when the evaluated batch size is not incentive-compatible at the
    /// caller's prior; the value then assumes truthful voting anyway.
    pub ic_warning: bool,
}

impl CorrectnessReport {
    pub fn exact(value: f64, method: Method) -> Self {
        debug_assert!(method.is_exact());
        CorrectnessReport {
            value,
            method,
            std_error: 0.0,
            trials: 0,
            ic_warning: false,
        }
    }

    pub fn monte_carlo(successes: u64, trials: u64) -> Self {
        let p = successes as f64 / trials as f64;
        CorrectnessReport {
            value: p,
            method: Method::MonteCarlo,
            std_error: (p * (1.0 - p) / trials as f64).sqrt(),
            trials,
            ic_warning: false,
        }
    }

    pub fn flagged(mut self, ic_warning: bool) -> Self {
        self.ic_warning = ic_warning;
        self
    }
}
