//! Sequential offering: the object is offered to one agent at a time, and
//! each agent sees only that everyone before them declined.
//!
//! Equilibrium play herds quickly. Agent 1 follows their signal only when
//! it is more informative than the prior, agent 2 follows theirs only for
//! priors above one half, and every later agent declines regardless.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Action, CorrectnessReport, Decision, Method, ModelParams, Signal};

/// Piecewise regime of the closed-form correctness.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SeqRegime {
    /// `mu > q`
    HighPrior,
    /// `1/2 < mu <= q`
    Upper,
    /// `1 - q <= mu <= 1/2`
    Lower,
    /// `mu < 1 - q`
    LowPrior,
}

impl SeqRegime {
    pub fn classify(params: &ModelParams) -> SeqRegime {
        let (mu, q) = (params.mu(), params.q());
        if mu > q {
            SeqRegime::HighPrior
        } else if mu > 0.5 {
            SeqRegime::Upper
        } else if mu >= 1.0 - q {
            SeqRegime::Lower
        } else {
            SeqRegime::LowPrior
        }
    }
}

/// An agent's equilibrium map from private signal to action.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SeqStrategy {
    AlwaysIn,
    FollowSignal,
    AlwaysOut,
}

impl SeqStrategy {
    pub fn act(self, signal: Signal) -> Action {
        match self {
            SeqStrategy::AlwaysIn => Action::OptIn,
            SeqStrategy::FollowSignal => Action::truthful(signal),
            SeqStrategy::AlwaysOut => Action::OptOut,
        }
    }

    pub fn reads_signal(self) -> bool {
        self == SeqStrategy::FollowSignal
    }
}

/// Equilibrium strategy of the agent at 1-based `position`.
pub fn seq_strategy(position: usize, params: &ModelParams) -> Result<SeqStrategy> {
    let (mu, q) = (params.mu(), params.q());
    Ok(match position {
        0 => return Err(Error::domain("queue positions start at 1")),
        1 if mu > q => SeqStrategy::AlwaysIn,
        1 if mu > 1.0 - q => SeqStrategy::FollowSignal,
        1 => SeqStrategy::AlwaysOut,
        2 if mu > 0.5 && mu <= q => SeqStrategy::FollowSignal,
        _ => SeqStrategy::AlwaysOut,
    })
}

/// Runs the offers in queue order. Only agents 1 and 2 can ever accept.
pub fn seq_outcome(params: &ModelParams, signals: &[Signal]) -> Result<Decision> {
    if signals.is_empty() {
        return Err(Error::InsufficientSignals { needed: 1, got: 0 });
    }
    for position in 1..=params.population().min(2) {
        let strategy = seq_strategy(position, params)?;
        let signal = match (strategy.reads_signal(), signals.get(position - 1)) {
            (false, _) => Signal::B,
            (true, Some(&s)) => s,
            (true, None) => {
                return Err(Error::InsufficientSignals {
                    needed: position,
                    got: signals.len(),
                })
            }
        };
        if strategy.act(signal) == Action::OptIn {
            return Ok(Decision::allocate(position));
        }
    }
    Ok(Decision::discard())
}

/// Closed-form correctness of sequential offering.
pub fn seq_correctness(params: &ModelParams) -> CorrectnessReport {
    let (mu, q) = (params.mu(), params.q());
    let value = match SeqRegime::classify(params) {
        SeqRegime::HighPrior => mu,
        // a lone agent has nobody to pass a declined offer to
        SeqRegime::Upper if params.population() == 1 => q,
        SeqRegime::Upper => 2.0 * mu * q * (1.0 - q) + q * q,
        SeqRegime::Lower => q,
        SeqRegime::LowPrior => 1.0 - mu,
    };
    CorrectnessReport::exact(value, Method::ClosedForm)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::binom::rational_from_f64;
    use crate::model::Quality;
    use num_rational::BigRational;
    use num_traits::{One, Zero};
    use proptest::prelude::*;

    fn p(mu: f64, q: f64) -> ModelParams {
        ModelParams::new(mu, q, 345).unwrap()
    }

    fn grid() -> Vec<(f64, f64)> {
        let qs: Vec<f64> = (51..=99).step_by(4).map(|i| i as f64 / 100.0).collect();
        let mut pts = Vec::new();
        for &q in &qs {
            for i in 1..100 {
                pts.push((i as f64 / 100.0, q));
            }
            for mu in [q, 1.0 - q, 0.5] {
                pts.push((mu, q));
            }
        }
        pts
    }

    #[test]
    fn strategy_examples() {
        let s = seq_strategy(1, &p(0.8, 0.7)).unwrap();
        assert_eq!(s.act(Signal::B), Action::OptIn);
        assert_eq!(s.act(Signal::G), Action::OptIn);
        let s = seq_strategy(2, &p(0.5, 0.7)).unwrap();
        assert_eq!(s, SeqStrategy::AlwaysOut);
        for &(mu, q) in &grid() {
            assert_eq!(seq_strategy(7, &p(mu, q)).unwrap(), SeqStrategy::AlwaysOut);
        }
        assert!(seq_strategy(0, &p(0.5, 0.7)).is_err());
    }

    #[test]
    fn outcome_examples() {
        use Signal::{B, G};
        let d = seq_outcome(&p(0.55, 0.6), &[B, G, B]).unwrap();
        assert_eq!(d.recipient(), Some(2));
        let d = seq_outcome(&p(0.3, 0.6), &[G, G]).unwrap();
        assert!(!d.allocated());
        let d = seq_outcome(&p(0.45, 0.6), &[G]).unwrap();
        assert_eq!(d.recipient(), Some(1));
        let d = seq_outcome(&p(0.45, 0.6), &[B, G]).unwrap();
        assert!(!d.allocated());
        assert!(matches!(
            seq_outcome(&p(0.55, 0.6), &[B]),
            Err(Error::InsufficientSignals { needed: 2, got: 1 })
        ));
        assert!(seq_outcome(&p(0.55, 0.6), &[]).is_err());
        assert!(seq_outcome(&p(0.9, 0.6), &[B]).unwrap().allocated());
    }

    #[test]
    fn correctness_examples() {
        assert!((seq_correctness(&p(0.55, 0.6)).value - 0.624).abs() < 1e-12);
        assert!((seq_correctness(&p(0.3, 0.6)).value - 0.7).abs() < 1e-12);
        assert!((seq_correctness(&p(0.45, 0.6)).value - 0.6).abs() < 1e-12);
        assert_eq!(seq_correctness(&p(0.45, 0.6)).method, Method::ClosedForm);
    }

    #[test]
    fn lone_agent_follows_signal() {
        let params = ModelParams::new(0.55, 0.6, 1).unwrap();
        assert!(!seq_outcome(&params, &[Signal::B]).unwrap().allocated());
        assert!((seq_correctness(&params).value - enumerate(&params)).abs() < 1e-15);
    }

    #[test]
    fn half_prior_uses_lower_branch_and_both_formulas_agree() {
        for q in [0.6, 0.7, 0.8] {
            let params = p(0.5, q);
            assert_eq!(SeqRegime::classify(&params), SeqRegime::Lower);
            let upper_formula = 2.0 * 0.5 * q * (1.0 - q) + q * q;
            assert!((seq_correctness(&params).value - upper_formula).abs() < 1e-15);
        }
    }

    fn enumerate(params: &ModelParams) -> f64 {
        let (mu, q) = (params.mu(), params.q());
        let mut total = 0.0;
        for (quality, prior) in [(Quality::Good, mu), (Quality::Bad, 1.0 - mu)] {
            for s1 in [Signal::G, Signal::B] {
                for s2 in [Signal::G, Signal::B] {
                    let lik = |s: Signal| {
                        if s.is_good() == (quality == Quality::Good) {
                            q
                        } else {
                            1.0 - q
                        }
                    };
                    let seen = &[s1, s2][..params.population().min(2)];
                    let d = seq_outcome(params, seen).unwrap();
                    if d.is_correct(quality) {
                        // a lone agent's profile is counted once per s2
                        let w = if seen.len() == 1 { 0.5 } else { lik(s2) };
                        total += prior * lik(s1) * w;
                    }
                }
            }
        }
        total
    }

    #[test]
    fn closed_form_matches_two_signal_enumeration() {
        for &(mu, q) in &grid() {
            let params = p(mu, q);
            let closed = seq_correctness(&params).value;
            let brute = enumerate(&params);
            assert!(
                (closed - brute).abs() < 1e-12,
                "mu={mu} q={q}: {closed} vs {brute}"
            );
        }
    }

    /// `P(agent opts out | quality)` under `strategy`.
    fn out_prob(strategy: SeqStrategy, good: bool, q: &BigRational) -> BigRational {
        let one = BigRational::one();
        let p_g = if good { q.clone() } else { &one - q };
        let mut acc = BigRational::zero();
        for s in [Signal::G, Signal::B] {
            if strategy.act(s) == Action::OptOut {
                acc += if s.is_good() { p_g.clone() } else { &one - &p_g };
            }
        }
        acc
    }

    #[test]
    fn strategies_are_best_responses() {
        // Exact Bayes over the declared strategies of earlier agents. Opting
        // in pays P(G | info) - P(B | info); ties decline.
        let one = BigRational::one();
        for &(mu, q) in &grid() {
            let params = p(mu, q);
            let (mur, qr) = (rational_from_f64(mu), rational_from_f64(q));
            let mut reach_g = mur.clone();
            let mut reach_b = &one - &mur;
            for position in 1..=5 {
                if reach_g.is_zero() && reach_b.is_zero() {
                    break;
                }
                let strategy = seq_strategy(position, &params).unwrap();
                for s in [Signal::G, Signal::B] {
                    let (lg, lb) = if s.is_good() {
                        (qr.clone(), &one - &qr)
                    } else {
                        (&one - &qr, qr.clone())
                    };
                    let best = if &reach_g * lg > &reach_b * lb {
                        Action::OptIn
                    } else {
                        Action::OptOut
                    };
                    assert_eq!(
                        strategy.act(s),
                        best,
                        "position {position}, signal {s:?}, mu={mu} q={q}"
                    );
                }
                reach_g *= out_prob(strategy, true, &qr);
                reach_b *= out_prob(strategy, false, &qr);
            }
        }
    }

    fn signal_strategy() -> impl Strategy<Value = Signal> {
        prop_oneof![Just(Signal::G), Just(Signal::B)]
    }

    proptest! {
        #[test]
        fn later_signals_never_matter(
            mu in 0.01f64..0.99,
            q in 0.51f64..0.99,
            mut signals in prop::collection::vec(signal_strategy(), 2..12),
            seed in any::<u64>(),
        ) {
            let params = p(mu, q);
            let before = seq_outcome(&params, &signals).unwrap();
            let tail = &mut signals[2..];
            tail.reverse();
            if !tail.is_empty() {
                let r = (seed as usize) % tail.len();
                tail.rotate_left(r);
                tail[0] = if tail[0].is_good() { Signal::B } else { Signal::G };
            }
            prop_assert_eq!(seq_outcome(&params, &signals).unwrap(), before);
        }

        #[test]
        fn regimes_partition_the_unit_interval(mu in 1e-9f64..1.0, q in 0.500001f64..0.999999) {
            let params = p(mu, q);
            let r = SeqRegime::classify(&params);
            let expected = [mu > q, mu > 0.5 && mu <= q, mu >= 1.0 - q && mu <= 0.5, mu < 1.0 - q];
            prop_assert_eq!(expected.iter().filter(|&&b| b).count(), 1);
            let idx = match r {
                SeqRegime::HighPrior => 0,
                SeqRegime::Upper => 1,
                SeqRegime::Lower => 2,
                SeqRegime::LowPrior => 3,
            };
            prop_assert!(expected[idx]);
        }
    }
}
