use std::process::{Command, Output};

use batchvote::ic::is_ic;
use batchvote::sweep::{sweep, Figure, SweepConfig, Table};
use batchvote::verify::{run_verify, Level};
use batchvote::ModelParams;

fn batchvote(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_batchvote"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn stdout(out: &Output) -> String {
    String::from_utf8(out.stdout.clone()).unwrap()
}

fn stderr(out: &Output) -> String {
    String::from_utf8(out.stderr.clone()).unwrap()
}

/// `key=value` field of a whitespace-separated line.
fn field(line: &str, key: &str) -> f64 {
    line.split_whitespace()
        .find_map(|kv| kv.strip_prefix(&format!("{key}=")))
        .unwrap_or_else(|| panic!("no {key} in {line:?}"))
        .parse()
        .unwrap()
}

#[test]
fn ic_interval_command() {
    let out = batchvote(&["ic-interval", "--k", "1", "--q", "0.6"]);
    assert!(out.status.success());
    assert_eq!(stdout(&out), "lower=0.4 upper=0.6\n");
    let out = batchvote(&["ic-interval", "--k", "3", "--q", "0.6"]);
    assert_eq!(stdout(&out), "lower=0.352 upper=0.55\n");
    let out = batchvote(&["ic-interval", "--k", "2", "--q", "0.6"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("batch size must be odd"));
    let out = batchvote(&["ic-interval", "--k", "3", "--q", "0.4"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn batch_bounds_command() {
    assert_eq!(
        stdout(&batchvote(&["batch-bounds", "--mu", "0.7", "--q", "0.6"])),
        "none (mu >= q)\n"
    );
    assert_eq!(
        stdout(&batchvote(&["batch-bounds", "--mu", "0.55", "--q", "0.6"])),
        "min_k=1 max_k=1\n"
    );
    let line = stdout(&batchvote(&["batch-bounds", "--mu", "0.05", "--q", "0.6"]));
    let params = ModelParams::with_default_population(0.05, 0.6).unwrap();
    let ic: Vec<usize> = (1..=2001)
        .step_by(2)
        .filter(|&k| is_ic(k, &params).unwrap())
        .collect();
    assert_eq!(field(&line, "min_k") as usize, ic[0]);
    assert_eq!(field(&line, "max_k") as usize, *ic.last().unwrap());
}

#[test]
fn correctness_command() {
    let line = stdout(&batchvote(&[
        "correctness",
        "--mechanism",
        "seq",
        "--mu",
        "0.3",
        "--q",
        "0.6",
    ]));
    assert_eq!(field(&line, "correctness"), 0.7);
    // K_bar(0.45) = 7 at q = 0.6, so one batch decides with the 7-vote tail
    let line = stdout(&batchvote(&[
        "correctness",
        "--mechanism",
        "greedy",
        "--j",
        "1",
        "--mu",
        "0.45",
        "--q",
        "0.6",
    ]));
    assert_eq!(field(&line, "correctness"), 0.710208);
    let line = stdout(&batchvote(&[
        "correctness",
        "--mechanism",
        "single",
        "--k",
        "3",
        "--mu",
        "0.45",
        "--q",
        "0.6",
    ]));
    assert_eq!(field(&line, "correctness"), 0.648);
    let all = stdout(&batchvote(&[
        "correctness",
        "--mechanism",
        "all",
        "--mu",
        "0.75",
        "--q",
        "0.7",
    ]));
    assert_eq!(all.lines().count(), 5);
    for line in all.lines() {
        assert_eq!(field(line, "correctness"), 0.75, "{line}");
    }
    let out = batchvote(&[
        "correctness",
        "--mechanism",
        "greedy",
        "--j",
        "0",
        "--mu",
        "0.3",
        "--q",
        "0.6",
    ]);
    assert_eq!(out.status.code(), Some(2));
}

fn column(table: &Table, name: &str) -> Vec<Option<f64>> {
    let i = table.column(name).unwrap();
    table.rows.iter().map(|r| r[i]).collect()
}

#[test]
fn comparison_sweep() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("comparison.csv");
    let out = batchvote(&[
        "sweep",
        "--figure",
        "comparison",
        "--q",
        "0.6",
        "--output",
        path.to_str().unwrap(),
    ]);
    assert!(out.status.success(), "{}", stderr(&out));
    let text = std::fs::read_to_string(&path).unwrap();
    assert!(text.starts_with("mu,q,c_seq,c_greedy1,c_greedy2,c_upper_bound\n"));
    assert!(!text.contains('\r'));
    let table = Table::read_csv(text.as_bytes()).unwrap();

    let cfg = SweepConfig {
        q_values: vec![0.6],
        ..SweepConfig::default()
    };
    let expected = sweep(Figure::Comparison, &cfg).unwrap();
    assert_eq!(table.columns, expected.columns);
    for (a, b) in table.rows.iter().zip(&expected.rows) {
        assert!(a
            .iter()
            .map(|c| c.map(f64::to_bits))
            .eq(b.iter().map(|c| c.map(f64::to_bits))));
    }

    let mu = column(&table, "mu");
    let seq = column(&table, "c_seq");
    let g1 = column(&table, "c_greedy1");
    let g2 = column(&table, "c_greedy2");
    let row = mu.iter().position(|&m| m == Some(0.595)).unwrap();
    assert!(g2[row] > seq[row]);
    for i in 0..mu.len() {
        if mu[i].unwrap() >= 0.6 {
            assert_eq!(g1[i], mu[i]);
            assert_eq!(g2[i], mu[i]);
        }
    }
}

#[test]
fn optimal_batch_sweep_is_column_monotone() {
    let out = batchvote(&["sweep", "--figure", "optimal-batch"]);
    assert!(out.status.success());
    let table = Table::read_csv(&out.stdout[..]).unwrap();
    let (mu, q, kbar) = (column(&table, "mu"), column(&table, "q"), column(&table, "kbar"));
    assert_eq!(table.rows.len(), 3 * 199);
    for i in 1..table.rows.len() {
        if q[i] != q[i - 1] {
            continue;
        }
        assert!(mu[i] > mu[i - 1]);
        match (kbar[i - 1], kbar[i]) {
            (Some(a), Some(b)) => assert!(b <= a),
            (_, None) => assert!(mu[i] >= q[i]),
            (None, Some(_)) => panic!("K_bar reappears at mu={:?}", mu[i]),
        }
    }
}

#[test]
fn intervals_sweep_as_json() {
    let out = batchvote(&[
        "sweep",
        "--figure",
        "intervals",
        "--format",
        "json",
        "--q",
        "0.6",
        "--k-max",
        "5",
    ]);
    assert!(out.status.success());
    let rows: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    let rows = rows.as_array().unwrap();
    assert_eq!(rows.len(), 3);
    assert_eq!(rows[1]["K"], 3.0);
    assert_eq!(rows[1]["lower"], 0.352);
    assert_eq!(rows[1]["upper"], 0.55);
}

#[test]
fn sweep_errors() {
    let out = batchvote(&[
        "sweep",
        "--figure",
        "comparison",
        "--output",
        "/nonexistent-dir/out.csv",
    ]);
    assert_eq!(out.status.code(), Some(3));
    let out = batchvote(&[
        "sweep",
        "--figure",
        "comparison",
        "--mu-start",
        "0.9",
        "--mu-stop",
        "0.1",
    ]);
    assert_eq!(out.status.code(), Some(2));
    let out = batchvote(&["sweep", "--figure", "nonsense"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn simulate_command() {
    let args = [
        "simulate",
        "--mechanism",
        "greedy",
        "--mu",
        "0.45",
        "--q",
        "0.6",
        "--trials",
        "100000",
        "--seed",
        "1",
    ];
    let first = batchvote(&args);
    assert!(first.status.success());
    let line = stdout(&first);
    let (est, se, exact) = (
        field(&line, "correctness"),
        field(&line, "std_error"),
        field(&line, "exact"),
    );
    assert!((est - exact).abs() <= 3.0 * se, "{line}");
    let second = batchvote(&args);
    assert_eq!(first.stdout, second.stdout);

    let out = batchvote(&[
        "simulate",
        "--mechanism",
        "seq",
        "--mu",
        "0.45",
        "--q",
        "0.6",
        "--trials",
        "0",
    ]);
    assert_eq!(out.status.code(), Some(2));

    let out = batchvote(&[
        "simulate",
        "--mechanism",
        "greedy",
        "--mu",
        "0.2",
        "--q",
        "0.7",
        "--trials",
        "10",
        "--seed",
        "3",
        "--trace",
    ]);
    let text = stdout(&out);
    let trace: serde_json::Value = serde_json::from_str(text.lines().nth(1).unwrap()).unwrap();
    assert!(trace["seed"].as_u64().is_some());
    assert!(trace["batches"].as_array().is_some_and(|b| !b.is_empty()));
}

#[test]
fn verify_command_reports_library_results() {
    let out = batchvote(&["verify", "--level", "fast"]);
    let report = run_verify(Level::Fast, None).unwrap();
    let text = stdout(&out);
    for r in &report.results {
        let status = if r.passed { "PASS" } else { "FAIL" };
        assert!(
            text.lines()
                .any(|l| l.starts_with(&format!("{status} {} ", r.name))),
            "{}",
            r.name
        );
    }
    let expected = if report.passed() { 0 } else { 4 };
    assert_eq!(out.status.code(), Some(expected));
    for r in report.failures() {
        assert!(stderr(&out).contains(&r.name));
    }
}

#[cfg(debug_assertions)]
#[test]
fn injected_fault_names_the_check() {
    let out = batchvote(&["verify", "--level", "fast", "--inject-fault", "kbar-monotone"]);
    assert_eq!(out.status.code(), Some(4));
    assert!(stdout(&out).contains("FAIL kbar-monotone"));
    assert!(stderr(&out).contains("kbar-monotone"));
    let out = batchvote(&["verify", "--inject-fault", "no-such-check"]);
    assert_eq!(out.status.code(), Some(2));
}
