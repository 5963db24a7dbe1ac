//! Parameter sweeps that regenerate the figure data as plain tables.

use std::io::{Read, Write};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::greedy::{exact_evaluation_with, upper_bound_correctness, Planner};
use crate::ic::{batch_bounds_with, ic_interval, SearchConfig};
use crate::model::{MechanismSpec, ModelParams, DEFAULT_POPULATION};
use crate::seqmech::seq_correctness;

/// Significant digits of every emitted number.
pub const SIGNIFICANT_DIGITS: usize = 12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Figure {
    /// `(q, K, lower_K, upper_K)` for odd `K` up to a cap.
    Intervals,
    /// `(mu, q, K_bar)`.
    OptimalBatch,
    /// `(mu, q, c_seq, c_greedy1, c_greedy2, c_upper_bound)`.
    Comparison,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MuGrid {
    pub start: f64,
    pub stop: f64,
    pub step: f64,
}

impl MuGrid {
    pub fn new(start: f64, stop: f64, step: f64) -> Result<Self> {
        if !(start > 0.0 && start < stop && stop < 1.0) {
            return Err(Error::domain(format!(
                "mu grid needs 0 < start < stop < 1, got start={start} stop={stop}"
            )));
        }
        if step.is_nan() || step <= 0.0 {
            return Err(Error::OutOfRange {
                field: "step",
                value: step,
            });
        }
        Ok(MuGrid { start, stop, step })
    }

    /// Grid points, each snapped to the double nearest its 12-decimal
    /// value so that `0.005 * 119` lands on the same `0.595` a user types.
    pub fn points(&self) -> Vec<f64> {
        let n = ((self.stop - self.start) / self.step + 1e-9).floor() as usize;
        (0..=n)
            .map(|i| {
                let v = self.start + i as f64 * self.step;
                format!("{v:.12}").parse::<f64>().expect("formatted float")
            })
            .collect()
    }
}

impl Default for MuGrid {
    fn default() -> Self {
        MuGrid {
            start: 0.005,
            stop: 0.995,
            step: 0.005,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepConfig {
    pub q_values: Vec<f64>,
    pub mu_grid: MuGrid,
    pub population: usize,
    /// Largest `K` in the intervals figure.
    pub interval_k_max: usize,
}

impl Default for SweepConfig {
    fn default() -> Self {
        SweepConfig {
            q_values: vec![0.6, 0.7, 0.8],
            mu_grid: MuGrid::default(),
            population: DEFAULT_POPULATION,
            interval_k_max: 99,
        }
    }
}

impl SweepConfig {
    pub fn validate(&self) -> Result<()> {
        MuGrid::new(self.mu_grid.start, self.mu_grid.stop, self.mu_grid.step)?;
        if self.q_values.is_empty() {
            return Err(Error::domain("at least one q value is required"));
        }
        for &q in &self.q_values {
            ModelParams::new(0.5, q, self.population)?;
        }
        if self.interval_k_max == 0 {
            return Err(Error::domain("interval K cap must be at least 1"));
        }
        Ok(())
    }
}

/// Rounds to [`SIGNIFICANT_DIGITS`] and back, so a stored cell prints and
/// parses to itself.
pub fn round_sig(v: f64) -> f64 {
    format_sig(v).parse().expect("formatted float")
}

/// Shortest plain-decimal rendering of `v` at 12 significant digits,
/// falling back to scientific notation for very large or small values.
pub fn format_sig(v: f64) -> String {
    if v == 0.0 || !v.is_finite() {
        return format!("{v}");
    }
    let sci = format!("{:.*e}", SIGNIFICANT_DIGITS - 1, v);
    let (mantissa, exp) = sci.split_once('e').expect("scientific format");
    let exp: i32 = exp.parse().expect("exponent");
    let (sign, mantissa) = match mantissa.strip_prefix('-') {
        Some(m) => ("-", m),
        None => ("", mantissa),
    };
    let digits: String = mantissa.chars().filter(|c| c.is_ascii_digit()).collect();
    let digits = digits.trim_end_matches('0');
    let digits = if digits.is_empty() { "0" } else { digits };
    if !(-7..=15).contains(&exp) {
        let (head, tail) = digits.split_at(1);
        return if tail.is_empty() {
            format!("{sign}{head}e{exp}")
        } else {
            format!("{sign}{head}.{tail}e{exp}")
        };
    }
    let point = exp + 1;
    let body = if point <= 0 {
        format!("0.{}{}", "0".repeat((-point) as usize), digits)
    } else if point as usize >= digits.len() {
        format!("{}{}", digits, "0".repeat(point as usize - digits.len()))
    } else {
        let (a, b) = digits.split_at(point as usize);
        format!("{a}.{b}")
    };
    format!("{sign}{body}")
}

/// Rectangular numeric table with named columns. Missing cells are `None`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Table {
    pub columns: Vec<String>,
    pub rows: Vec<Vec<Option<f64>>>,
}

impl Table {
    pub fn new(columns: &[&str]) -> Self {
        Table {
            columns: columns.iter().map(|c| c.to_string()).collect(),
            rows: Vec::new(),
        }
    }

    pub fn push(&mut self, row: Vec<Option<f64>>) {
        assert_eq!(row.len(), self.columns.len(), "row width");
        self.rows
            .push(row.into_iter().map(|c| c.map(round_sig)).collect());
    }

    pub fn column(&self, name: &str) -> Option<usize> {
        self.columns.iter().position(|c| c == name)
    }

    pub fn write_csv<W: Write>(&self, out: W) -> std::io::Result<()> {
        let mut w = csv::WriterBuilder::new()
            .terminator(csv::Terminator::Any(b'\n'))
            .from_writer(out);
        w.write_record(&self.columns)?;
        for row in &self.rows {
            w.write_record(row.iter().map(|c| c.map(format_sig).unwrap_or_default()))?;
        }
        w.flush()
    }

    pub fn read_csv<R: Read>(input: R) -> Result<Table> {
        let mut r = csv::Reader::from_reader(input);
        let bad = |e: csv::Error| Error::domain(format!("malformed CSV: {e}"));
        let columns: Vec<String> = r.headers().map_err(bad)?.iter().map(String::from).collect();
        let mut rows = Vec::new();
        for record in r.records() {
            let record = record.map_err(bad)?;
            let row = record
                .iter()
                .map(|cell| {
                    if cell.is_empty() {
                        Ok(None)
                    } else {
                        cell.parse::<f64>()
                            .map(Some)
                            .map_err(|_| Error::domain(format!("not a number: {cell:?}")))
                    }
                })
                .collect::<Result<Vec<_>>>()?;
            rows.push(row);
        }
        Ok(Table { columns, rows })
    }

    /// Array of row objects keyed by column name; missing cells are null.
    pub fn to_json(&self) -> serde_json::Value {
        let rows = self
            .rows
            .iter()
            .map(|row| {
                let obj = self
                    .columns
                    .iter()
                    .zip(row)
                    .map(|(c, v)| {
                        let v = v
                            .and_then(serde_json::Number::from_f64)
                            .map_or(serde_json::Value::Null, serde_json::Value::Number);
                        (c.clone(), v)
                    })
                    .collect();
                serde_json::Value::Object(obj)
            })
            .collect();
        serde_json::Value::Array(rows)
    }
}

/// Computes one figure's table. Rows are ordered by `(q, mu)` or `(q, K)`.
pub fn sweep(figure: Figure, cfg: &SweepConfig) -> Result<Table> {
    cfg.validate()?;
    let search = SearchConfig::from_env()?;
    match figure {
        Figure::Intervals => {
            let mut t = Table::new(&["q", "K", "lower", "upper"]);
            for &q in &cfg.q_values {
                for k in (1..=cfg.interval_k_max).step_by(2) {
                    let iv = ic_interval(k, q)?;
                    t.push(vec![Some(q), Some(k as f64), Some(iv.lower), Some(iv.upper)]);
                }
            }
            Ok(t)
        }
        Figure::OptimalBatch => {
            let rows = grid_rows(cfg, |params| {
                let kbar = batch_bounds_with(params, &search)?.map(|b| b.max_k as f64);
                Ok(vec![Some(params.mu()), Some(params.q()), kbar])
            })?;
            let mut t = Table::new(&["mu", "q", "kbar"]);
            rows.into_iter().for_each(|r| t.push(r));
            Ok(t)
        }
        Figure::Comparison => {
            let rows = grid_rows(cfg, |params| {
                let planner = Planner::with_config(params, search)?;
                let g1 = exact_evaluation_with(&planner, MechanismSpec::GreedyHorizon(1))?
                    .report
                    .value;
                let g2 = exact_evaluation_with(&planner, MechanismSpec::GreedyHorizon(2))?
                    .report
                    .value;
                Ok(vec![
                    Some(params.mu()),
                    Some(params.q()),
                    Some(seq_correctness(params).value),
                    Some(g1),
                    Some(g2),
                    Some(upper_bound_correctness(params)?.value),
                ])
            })?;
            let mut t = Table::new(&["mu", "q", "c_seq", "c_greedy1", "c_greedy2", "c_upper_bound"]);
            rows.into_iter().for_each(|r| t.push(r));
            Ok(t)
        }
    }
}

fn grid_rows(
    cfg: &SweepConfig,
    row: impl Fn(&ModelParams) -> Result<Vec<Option<f64>>> + Sync,
) -> Result<Vec<Vec<Option<f64>>>> {
    let points: Vec<(f64, f64)> = cfg
        .q_values
        .iter()
        .flat_map(|&q| cfg.mu_grid.points().into_iter().map(move |mu| (q, mu)))
        .collect();
    points
        .par_iter()
        .map(|&(q, mu)| row(&ModelParams::new(mu, q, cfg.population)?))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn formatting_examples() {
        assert_eq!(format_sig(0.648), "0.648");
        assert_eq!(format_sig(7.0), "7");
        assert_eq!(format_sig(345.0), "345");
        assert_eq!(format_sig(-0.25), "-0.25");
        assert_eq!(format_sig(1.0 / 3.0), "0.333333333333");
        assert_eq!(format_sig(0.6 * 0.6 * 0.4 + 0.6f64.powi(3)), "0.36");
        assert_eq!(format_sig(1.5e-9), "1.5e-9");
        assert_eq!(format_sig(0.0), "0");
    }

    #[test]
    fn grid_points_are_canonical() {
        let pts = MuGrid::default().points();
        assert_eq!(pts.len(), 199);
        assert_eq!(pts[0], 0.005);
        assert_eq!(pts[118], 0.595);
        assert_eq!(pts[119], 0.6);
        assert_eq!(*pts.last().unwrap(), 0.995);
        assert!(MuGrid::new(0.5, 0.4, 0.1).is_err());
        assert!(MuGrid::new(0.1, 0.4, 0.0).is_err());
    }

    #[test]
    fn csv_round_trip_is_bit_exact() {
        let cfg = SweepConfig {
            mu_grid: MuGrid::new(0.05, 0.95, 0.05).unwrap(),
            ..SweepConfig::default()
        };
        for fig in [Figure::Intervals, Figure::OptimalBatch, Figure::Comparison] {
            let t = sweep(fig, &cfg).unwrap();
            let mut buf = Vec::new();
            t.write_csv(&mut buf).unwrap();
            let text = String::from_utf8(buf.clone()).unwrap();
            assert!(!text.contains('\r'));
            let back = Table::read_csv(&buf[..]).unwrap();
            assert_eq!(back.columns, t.columns);
            for (a, b) in back.rows.iter().zip(&t.rows) {
                for (x, y) in a.iter().zip(b) {
                    assert_eq!(x.map(f64::to_bits), y.map(f64::to_bits));
                }
            }
        }
    }

    #[test]
    fn missing_cells() {
        let cfg = SweepConfig {
            q_values: vec![0.6],
            mu_grid: MuGrid::new(0.55, 0.65, 0.05).unwrap(),
            ..SweepConfig::default()
        };
        let t = sweep(Figure::OptimalBatch, &cfg).unwrap();
        assert_eq!(t.rows.len(), 3);
        assert_eq!(t.rows[0][2], Some(1.0));
        assert_eq!(t.rows[1][2], None);
        let json = t.to_json();
        assert!(json[1]["kbar"].is_null());
        assert_eq!(json[0]["mu"], 0.55);
        let mut buf = Vec::new();
        t.write_csv(&mut buf).unwrap();
        assert_eq!(
            String::from_utf8(buf).unwrap(),
            "mu,q,kbar\n0.55,0.6,1\n0.6,0.6,\n0.65,0.6,\n"
        );
    }

    proptest! {
        #[test]
        fn rounding_is_idempotent(v in -1e6f64..1e6) {
            let r = round_sig(v);
            prop_assert_eq!(round_sig(r).to_bits(), r.to_bits());
            prop_assert_eq!(format_sig(r).parse::<f64>().unwrap().to_bits(), r.to_bits());
            prop_assert!((r - v).abs() <= v.abs() * 1e-11);
        }
    }
}
