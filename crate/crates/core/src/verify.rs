//! Runtime invariant suite behind `batchvote verify`.
//!
//! Each check re-derives a property of the model from an independent route
//! and reports pass or fail with a short reason. The fast level trims grids
//! and trial counts; the full level runs every scan at figure resolution.

use std::sync::{Arc, OnceLock};
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::binom::{exact_upper_tail, majority_tails, rational_from_f64};
use crate::error::{Error, Result};
use crate::greedy::{
    exact_correctness, exact_evaluation_with, run_mechanism_with, upper_bound_correctness, HorizonProfile,
    Planner,
};
use crate::ic::{alloc_probs, batch_bounds, ic_interval, is_ic};
use crate::model::{MechanismSpec, ModelParams, Quality, Signal, DEFAULT_POPULATION};
use crate::oracle::{
    brute_force_alloc_probs, brute_force_correctness, ic_empirical_check, mc_correctness, McConfig,
};
use crate::seqmech::seq_correctness;
use crate::sweep::{sweep, Figure, MuGrid, SweepConfig, Table};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Level {
    Fast,
    Full,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckResult {
    pub name: String,
    pub passed: bool,
    pub detail: String,
    pub seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VerifyReport {
    pub level: Level,
    pub results: Vec<CheckResult>,
}

impl VerifyReport {
    pub fn passed(&self) -> bool {
        self.results.iter().all(|r| r.passed)
    }

    pub fn failures(&self) -> impl Iterator<Item = &CheckResult> {
        self.results.iter().filter(|r| !r.passed)
    }
}

type Outcome = std::result::Result<String, String>;

type GridCache = OnceLock<std::result::Result<Arc<Vec<Point>>, String>>;

struct Ctx<'a> {
    level: Level,
    /// Inverts every comparison made through [`Ctx::holds`].
    flip: bool,
    theorem: &'a GridCache,
}

impl Ctx<'_> {
    fn full(&self) -> bool {
        self.level == Level::Full
    }

    fn holds(&self, cond: bool) -> bool {
        cond != self.flip
    }

    fn ensure(&self, cond: bool, msg: impl FnOnce() -> String) -> std::result::Result<(), String> {
        if self.holds(cond) {
            Ok(())
        } else {
            Err(msg())
        }
    }

    fn theorem_grid(&self) -> std::result::Result<Arc<Vec<Point>>, String> {
        self.theorem
            .get_or_init(|| theorem_points().map(Arc::new).map_err(|e| e.to_string()))
            .clone()
    }
}

type CheckFn = fn(&Ctx) -> Outcome;

const CHECKS: &[(&str, CheckFn)] = &[
    ("interval-closed-forms", interval_closed_forms),
    ("alloc-oracle", alloc_oracle),
    ("ic-oracle", ic_oracle),
    ("dp-oracle", dp_oracle),
    ("seq-closed-form", seq_closed_form),
    ("tail-increase", tail_increase),
    ("interval-chain", interval_chain),
    ("kbar-monotone", kbar_monotone),
    ("greedy-beats-seq", greedy_beats_seq),
    ("equal-correctness-above-q", equal_correctness_above_q),
    ("horizon-dominance", horizon_dominance),
    ("trace-structure", trace_structure),
    ("price-of-anarchy", price_of_anarchy),
    ("upper-bound", upper_bound),
    ("mc-consistency", mc_consistency),
    ("csv-round-trip", csv_round_trip),
];

pub fn check_names() -> Vec<&'static str> {
    CHECKS.iter().map(|(n, _)| *n).collect()
}

/// Runs every check. `fault` names a check whose comparisons are inverted,
/// which exercises the failure path end to end.
pub fn run_verify(level: Level, fault: Option<&str>) -> Result<VerifyReport> {
    run_verify_with(level, fault, |_| {})
}

/// [`run_verify`] with a callback invoked after each check completes.
pub fn run_verify_with(
    level: Level,
    fault: Option<&str>,
    mut on_result: impl FnMut(&CheckResult),
) -> Result<VerifyReport> {
    if let Some(f) = fault {
        if !CHECKS.iter().any(|(n, _)| *n == f) {
            return Err(Error::domain(format!(
                "unknown check {f:?}; expected one of {}",
                check_names().join(", ")
            )));
        }
    }
    let theorem: GridCache = OnceLock::new();
    let mut results = Vec::with_capacity(CHECKS.len());
    for (name, check) in CHECKS {
        let ctx = Ctx {
            level,
            flip: fault == Some(*name),
            theorem: &theorem,
        };
        let start = Instant::now();
        let outcome = check(&ctx);
        let (passed, detail) = match outcome {
            Ok(d) => (true, d),
            Err(d) => (false, d),
        };
        let result = CheckResult {
            name: name.to_string(),
            passed,
            detail,
            seconds: start.elapsed().as_secs_f64(),
        };
        on_result(&result);
        results.push(result);
    }
    Ok(VerifyReport { level, results })
}

fn err(e: Error) -> String {
    e.to_string()
}

fn params(mu: f64, q: f64, population: usize) -> std::result::Result<ModelParams, String> {
    ModelParams::new(mu, q, population).map_err(err)
}

const FIGURE_Q: [f64; 3] = [0.6, 0.7, 0.8];

fn oracle_q() -> Vec<f64> {
    (11..=19).map(|i| i as f64 / 20.0).collect()
}

/// `i / den` for `i = 1 .. den - 1`.
fn unit_grid(den: usize) -> Vec<f64> {
    (1..den).map(|i| i as f64 / den as f64).collect()
}

fn close(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol
}

fn interval_closed_forms(ctx: &Ctx) -> Outcome {
    for q in FIGURE_Q {
        let i1 = ic_interval(1, q).map_err(err)?;
        let i3 = ic_interval(3, q).map_err(err)?;
        let want3 = ((1.0 - q) * (1.0 - q) * (2.0 * q + 1.0), q / 2.0 + 0.25);
        ctx.ensure(
            close(i1.lower, 1.0 - q, 1e-12) && close(i1.upper, q, 1e-12),
            || format!("I_1 at q={q} is ({}, {})", i1.lower, i1.upper),
        )?;
        ctx.ensure(
            close(i3.lower, want3.0, 1e-12) && close(i3.upper, want3.1, 1e-12),
            || format!("I_3 at q={q} is ({}, {}), want {want3:?}", i3.lower, i3.upper),
        )?;
    }
    Ok("K = 1, 3 at q = 0.6, 0.7, 0.8".into())
}

fn alloc_oracle(ctx: &Ctx) -> Outcome {
    let k_max = if ctx.full() { 15 } else { 11 };
    let mut n = 0;
    for q in oracle_q() {
        for k in (1..=k_max).step_by(2) {
            let a = alloc_probs(k, q).map_err(err)?;
            let b = brute_force_alloc_probs(k, q).map_err(err)?;
            ctx.ensure(close(a.good, b.good, 1e-12) && close(a.bad, b.bad, 1e-12), || {
                format!("K={k} q={q}: {a:?} vs enumerated {b:?}")
            })?;
            n += 1;
        }
    }
    Ok(format!("{n} (K, q) pairs within 1e-12"))
}

fn ic_oracle(ctx: &Ctx) -> Outcome {
    let (k_max, den) = if ctx.full() { (15, 100) } else { (7, 20) };
    let qs = oracle_q();
    let mismatches: Vec<String> = qs
        .par_iter()
        .flat_map_iter(|&q| {
            let mut bad = Vec::new();
            for mu in unit_grid(den) {
                for k in (1..=k_max).step_by(2) {
                    let outcome = params(mu, q, DEFAULT_POPULATION).and_then(|p| {
                        let a = is_ic(k, &p).map_err(err)?;
                        let b = ic_empirical_check(k, &p).map_err(err)?;
                        Ok(a == b)
                    });
                    match outcome {
                        Ok(same) if ctx.holds(same) => {}
                        Ok(_) => bad.push(format!("K={k} mu={mu} q={q}")),
                        Err(e) => bad.push(e),
                    }
                }
            }
            bad
        })
        .collect();
    match mismatches.first() {
        None => Ok(format!("odd K <= {k_max}, mu step 1/{den}")),
        Some(first) => Err(format!("{} mismatches, first at {first}", mismatches.len())),
    }
}

/// Specs and populations compared against exhaustive enumeration.
fn dp_cases(pop_max: usize) -> Vec<(MechanismSpec, usize)> {
    let mut cases = vec![(MechanismSpec::Sequential, 2)];
    cases.extend(
        (1..=pop_max)
            .step_by(2)
            .map(|k| (MechanismSpec::SingleBatch(k), k)),
    );
    for pop in 1..=pop_max {
        for spec in [
            MechanismSpec::GreedyHorizon(1),
            MechanismSpec::GreedyHorizon(2),
            MechanismSpec::GreedyUnbounded,
        ] {
            cases.push((spec, pop));
        }
    }
    cases
}

fn dp_oracle(ctx: &Ctx) -> Outcome {
    let (pop_max, den, qs) = if ctx.full() {
        (15, 100, oracle_q())
    } else {
        (11, 20, vec![0.55, 0.7, 0.85, 0.95])
    };
    let cases = dp_cases(pop_max);
    let points: Vec<(f64, f64)> = qs
        .iter()
        .flat_map(|&q| unit_grid(den).into_iter().map(move |mu| (mu, q)))
        .collect();
    let worst = points
        .par_iter()
        .map(|&(mu, q)| -> std::result::Result<(f64, String), String> {
            let mut worst = (0.0f64, String::new());
            for &(spec, pop) in &cases {
                let p = params(mu, q, pop)?;
                let exact = exact_correctness(spec, &p).map_err(err)?.value;
                let brute = brute_force_correctness(spec, &p).map_err(err)?.value;
                let gap = (exact - brute).abs();
                if !ctx.holds(gap <= 1e-10) {
                    return Err(format!(
                        "{} I={pop} mu={mu} q={q}: {exact} vs {brute}",
                        spec.label()
                    ));
                }
                if gap >= worst.0 {
                    worst = (gap, spec.label());
                }
            }
            Ok(worst)
        })
        .try_reduce(|| (0.0, String::new()), |a, b| Ok(if b.0 > a.0 { b } else { a }))?;
    Ok(format!(
        "{} points x {} cases, largest gap {:.1e}",
        points.len(),
        cases.len(),
        worst.0
    ))
}

/// The four-branch closed form, written out independently of the module.
fn seq_formula(mu: f64, q: f64) -> f64 {
    if mu > q {
        mu
    } else if mu >= 0.5 {
        2.0 * mu * q * (1.0 - q) + q * q
    } else if mu >= 1.0 - q {
        q
    } else {
        1.0 - mu
    }
}

fn seq_closed_form(ctx: &Ctx) -> Outcome {
    let mut n = 0;
    for q in oracle_q() {
        let mut mus = unit_grid(100);
        mus.extend([q, 1.0 - q, 0.5]);
        for mu in mus {
            let p = params(mu, q, DEFAULT_POPULATION)?;
            let got = seq_correctness(&p).value;
            let brute = brute_force_correctness(MechanismSpec::Sequential, &p)
                .map_err(err)?
                .value;
            let want = seq_formula(mu, q);
            ctx.ensure(close(got, want, 1e-12) && close(got, brute, 1e-12), || {
                format!("mu={mu} q={q}: {got}, formula {want}, enumeration {brute}")
            })?;
            n += 1;
        }
    }
    let spot = seq_correctness(&params(0.55, 0.6, DEFAULT_POPULATION)?).value;
    ctx.ensure(close(spot, 0.624, 1e-12), || format!("(0.55, 0.6) gives {spot}"))?;
    Ok(format!("{n} points within 1e-12"))
}

fn tail_increase(ctx: &Ctx) -> Outcome {
    let (k_max, exact_max) = if ctx.full() { (199, 199) } else { (99, 49) };
    for q in FIGURE_Q {
        let mut prev = majority_tails(1, q).map_err(err)?;
        for k in (3..=k_max).step_by(2) {
            let cur = majority_tails(k, q).map_err(err)?;
            // the complement stays representable after the tail rounds to 1
            ctx.ensure(cur.1 < prev.1 && cur.0 >= prev.0, || {
                format!("K={k} q={q}: tail {} after {}", cur.0, prev.0)
            })?;
            prev = cur;
        }
        let qr = rational_from_f64(q);
        let mut prev = exact_upper_tail(1, &qr, 1);
        for k in (3..=exact_max as u64).step_by(2) {
            let cur = exact_upper_tail(k, &qr, k.div_ceil(2));
            ctx.ensure(cur > prev, || format!("exact tail not increasing at K={k} q={q}"))?;
            prev = cur;
        }
    }
    Ok(format!("odd K <= {k_max}, exactly for K <= {exact_max}"))
}

fn interval_chain(ctx: &Ctx) -> Outcome {
    let k_max = if ctx.full() { 199 } else { 99 };
    for q in FIGURE_Q {
        let mut prev = ic_interval(1, q).map_err(err)?;
        for k in (3..=k_max).step_by(2) {
            let cur = ic_interval(k, q).map_err(err)?;
            let chain = cur.lower < prev.lower && prev.lower < cur.upper && cur.upper < prev.upper;
            ctx.ensure(chain, || format!("K={k} q={q}: {cur:?} after {prev:?}"))?;
            prev = cur;
        }
    }
    Ok(format!("odd K in [3, {k_max}]"))
}

fn kbar_monotone(ctx: &Ctx) -> Outcome {
    let den = if ctx.full() { 1000 } else { 100 };
    for q in FIGURE_Q {
        let mut prev = usize::MAX;
        for mu in unit_grid(den).into_iter().filter(|&mu| mu < q) {
            let b = batch_bounds(&params(mu, q, DEFAULT_POPULATION)?)
                .map_err(err)?
                .ok_or_else(|| format!("no IC batch at mu={mu} q={q}"))?;
            ctx.ensure(b.max_k <= prev, || {
                format!("K_bar rises to {} at mu={mu} q={q}", b.max_k)
            })?;
            prev = b.max_k;
        }
    }
    Ok(format!("mu step 1/{den}"))
}

/// Exact correctness of every compared mechanism at one grid point.
struct Point {
    mu: f64,
    q: f64,
    seq: f64,
    profile: Arc<HorizonProfile>,
    /// `(label, value)` of each voting mechanism.
    voting: Vec<(String, f64)>,
    upper_bound: f64,
}

impl Point {
    fn greedy(&self, j: usize) -> f64 {
        self.profile.correctness(Some(j))
    }
}

fn theorem_points() -> Result<Vec<Point>> {
    let pts: Vec<(f64, f64)> = FIGURE_Q
        .iter()
        .flat_map(|&q| MuGrid::default().points().into_iter().map(move |mu| (mu, q)))
        .collect();
    pts.par_iter()
        .map(|&(mu, q)| {
            let p = ModelParams::new(mu, q, DEFAULT_POPULATION)?;
            let planner = Planner::new(&p)?;
            let profile = planner.profile()?;
            let mut specs = vec![MechanismSpec::GreedyUnbounded];
            specs.extend((1..=3).map(MechanismSpec::GreedyHorizon));
            specs.extend([1, 3, 5].map(MechanismSpec::SingleBatch));
            let voting = specs
                .into_iter()
                .map(|s| Ok((s.label(), exact_evaluation_with(&planner, s)?.report.value)))
                .collect::<Result<Vec<_>>>()?;
            Ok(Point {
                mu,
                q,
                seq: seq_correctness(&p).value,
                profile,
                voting,
                upper_bound: upper_bound_correctness(&p)?.value,
            })
        })
        .collect()
}

fn greedy_beats_seq(ctx: &Ctx) -> Outcome {
    let grid = ctx.theorem_grid()?;
    for pt in grid.iter() {
        let (mu, q) = (pt.mu, pt.q);
        let g1_wins = pt.greedy(1) > pt.seq;
        let expected = mu < q / 2.0 + 0.25;
        ctx.ensure(g1_wins == expected, || {
            format!("mu={mu} q={q}: c(greedy1)={} vs c(seq)={}", pt.greedy(1), pt.seq)
        })?;
        if mu < q {
            ctx.ensure(pt.greedy(2) > pt.seq, || {
                format!("mu={mu} q={q}: c(greedy2)={} vs c(seq)={}", pt.greedy(2), pt.seq)
            })?;
        }
    }
    Ok(format!("{} grid points", grid.len()))
}

fn equal_correctness_above_q(ctx: &Ctx) -> Outcome {
    let grid = ctx.theorem_grid()?;
    let mut failures = Vec::new();
    let mut n = 0;
    for pt in grid.iter().filter(|pt| pt.mu >= pt.q) {
        n += 1;
        let all_equal = pt.voting.iter().all(|(_, v)| *v == pt.mu) && pt.seq == pt.mu;
        if !ctx.holds(all_equal) {
            let off: Vec<String> = std::iter::once(("seq".to_string(), pt.seq))
                .chain(pt.voting.iter().cloned())
                .filter(|(_, v)| *v != pt.mu)
                .map(|(l, v)| format!("{l}={v}"))
                .collect();
            failures.push(format!("mu={} q={}: {}", pt.mu, pt.q, off.join(" ")));
        }
    }
    if failures.is_empty() {
        Ok(format!("{n} grid points with mu >= q"))
    } else {
        Err(format!(
            "{} of {n} points differ from mu: {}",
            failures.len(),
            failures.join("; ")
        ))
    }
}

fn horizon_dominance(ctx: &Ctx) -> Outcome {
    let grid = ctx.theorem_grid()?;
    let mut pairs = 0;
    for pt in grid.iter() {
        let prof = &pt.profile;
        let depth = prof.deepest_batch();
        for j in 1..depth {
            let gain = prof.gain(j);
            let diff = pt.greedy(j + 1) - pt.greedy(j);
            ctx.ensure(gain > 0.0 && diff >= 0.0 && close(diff, gain, 1e-12), || {
                format!("mu={} q={} J={j}: gain {gain}, difference {diff}", pt.mu, pt.q)
            })?;
            pairs += 1;
        }
        ctx.ensure(
            prof.gain(depth) == 0.0 && pt.greedy(depth + 1) == pt.greedy(depth),
            || {
                format!(
                    "mu={} q={}: horizon {} beyond the last batch changes c",
                    pt.mu,
                    pt.q,
                    depth + 1
                )
            },
        )?;
    }
    Ok(format!("{pairs} (point, J) pairs with a next batch"))
}

fn trace_structure(ctx: &Ctx) -> Outcome {
    let runs = if ctx.full() { 2000 } else { 300 };
    let mut rng = ChaCha8Rng::seed_from_u64(0x5eed);
    for _ in 0..runs {
        let q = rng.gen_range(0.55..0.9);
        let mu = rng.gen_range(0.02..q);
        let p = params(mu, q, DEFAULT_POPULATION)?;
        let planner = Planner::new(&p).map_err(err)?;
        let quality = if rng.gen::<f64>() < mu {
            Quality::Good
        } else {
            Quality::Bad
        };
        let signals: Vec<Signal> = (0..p.population())
            .map(|_| Signal::sample(quality, q, &mut rng))
            .collect();
        let trace = run_mechanism_with(
            &planner,
            MechanismSpec::GreedyUnbounded,
            quality,
            &signals,
            rng.gen(),
        )
        .map_err(err)?;
        let mut belief = mu;
        let mut prev_size = 0;
        for b in &trace.batches {
            ctx.ensure(b.size >= prev_size, || {
                format!("batch sizes fall at mu={mu} q={q}")
            })?;
            let ic = is_ic(b.size, &p.with_mu(belief).map_err(err)?).map_err(err)?;
            ctx.ensure(ic, || {
                format!("batch {} of size {} not IC at belief {belief}", b.index, b.size)
            })?;
            prev_size = b.size;
            belief = b.posterior;
        }
        ctx.ensure(trace.agents_used() <= p.population(), || {
            "population exceeded".into()
        })?;
    }
    Ok(format!("{runs} sampled greedy runs"))
}

fn price_of_anarchy(ctx: &Ctx) -> Outcome {
    let grid = ctx.theorem_grid()?;
    let mut out = Vec::new();
    for q in FIGURE_Q {
        let row: Vec<&Point> = grid.iter().filter(|pt| pt.q == q).collect();
        let ratio = |pt: &Point| pt.upper_bound / pt.greedy(1);
        let max = row.iter().map(|pt| ratio(pt)).fold(f64::MIN, f64::max);
        let nearest = row
            .iter()
            .min_by(|a, b| (a.mu - q).abs().total_cmp(&(b.mu - q).abs()))
            .ok_or("empty grid")?;
        let at_q = ratio(nearest);
        ctx.ensure(close(at_q, max, 1e-12 * max), || {
            format!("q={q}: ratio {at_q} at mu={} below the maximum {max}", nearest.mu)
        })?;
        ctx.ensure(close(max, 1.0 / q, 0.02), || {
            format!("q={q}: maximum ratio {max}, 1/q = {}", 1.0 / q)
        })?;
        out.push(format!("q={q}: {max:.6}"));
    }
    Ok(out.join(", "))
}

fn upper_bound(ctx: &Ctx) -> Outcome {
    let ub = upper_bound_correctness(&params(0.5, 0.6, DEFAULT_POPULATION)?)
        .map_err(err)?
        .value;
    ctx.ensure(ub > 0.999, || format!("bound at (0.5, 0.6) is {ub}"))?;
    let grid = ctx.theorem_grid()?;
    for pt in grid.iter() {
        let best = pt.voting.iter().map(|(_, v)| *v).fold(pt.seq, f64::max);
        ctx.ensure(pt.upper_bound >= best, || {
            format!("mu={} q={}: bound {} below {best}", pt.mu, pt.q, pt.upper_bound)
        })?;
    }
    Ok(format!("bound {ub:.9} at (0.5, 0.6)"))
}

fn mc_consistency(ctx: &Ctx) -> Outcome {
    let (points, trials) = if ctx.full() { (20, 100_000) } else { (6, 20_000) };
    let mut rng = ChaCha8Rng::seed_from_u64(0x00c0_ffee);
    let mut covered = 0;
    let mut misses = Vec::new();
    for i in 0..points {
        let spec = match rng.gen_range(0..5) {
            0 => MechanismSpec::Sequential,
            1 => MechanismSpec::SingleBatch(2 * rng.gen_range(0..4) + 1),
            2 => MechanismSpec::GreedyHorizon(1),
            3 => MechanismSpec::GreedyHorizon(2),
            _ => MechanismSpec::GreedyUnbounded,
        };
        let mu = rng.gen_range(0.05..0.95);
        let q = rng.gen_range(0.55..0.9);
        let p = params(mu, q, DEFAULT_POPULATION)?;
        let exact = exact_correctness(spec, &p).map_err(err)?.value;
        let cfg = McConfig::new(trials, i as u64 + 1).map_err(err)?;
        let mc = mc_correctness(spec, &p, &cfg).map_err(err)?;
        if ctx.holds(cfg.covers(&mc, exact)) {
            covered += 1;
        } else {
            misses.push(format!("{} mu={mu:.3} q={q:.3}", spec.label()));
        }
    }
    let needed = points - points / 20;
    if covered >= needed {
        Ok(format!(
            "{covered}/{points} within 3 standard errors at {trials} trials"
        ))
    } else {
        Err(format!(
            "{covered}/{points} covered, need {needed}; missed {}",
            misses.join(", ")
        ))
    }
}

fn csv_round_trip(ctx: &Ctx) -> Outcome {
    let cfg = SweepConfig {
        mu_grid: MuGrid::new(0.05, 0.95, 0.05).map_err(err)?,
        ..SweepConfig::default()
    };
    for fig in [Figure::Intervals, Figure::OptimalBatch, Figure::Comparison] {
        let table = sweep(fig, &cfg).map_err(err)?;
        let mut buf = Vec::new();
        table.write_csv(&mut buf).map_err(|e| e.to_string())?;
        let back = Table::read_csv(&buf[..]).map_err(err)?;
        let same = back.columns == table.columns
            && back.rows.len() == table.rows.len()
            && back.rows.iter().zip(&table.rows).all(|(a, b)| {
                a.iter()
                    .map(|c| c.map(f64::to_bits))
                    .eq(b.iter().map(|c| c.map(f64::to_bits)))
            });
        ctx.ensure(same, || format!("{fig:?} table changed after a CSV round trip"))?;
    }
    Ok("three figures".into())
}
