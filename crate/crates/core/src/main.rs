use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use batchvote::greedy::exact_correctness;
use batchvote::ic::{batch_bounds_with, ic_interval, SearchConfig};
use batchvote::oracle::{mc_correctness, mc_trial, McConfig};
use batchvote::sweep::{format_sig, sweep, Figure, MuGrid, SweepConfig, Table};
use batchvote::verify::{run_verify_with, Level};
use batchvote::{CorrectnessReport, MechanismSpec, Method, ModelParams, DEFAULT_POPULATION};

#[derive(Parser)]
#[command(
    name = "batchvote",
    version,
    about = "Incentive-compatible batch voting for allocating one object"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Interval of priors at which a batch of K votes truthfully.
    IcInterval {
        #[arg(long)]
        k: usize,
        #[arg(long)]
        q: f64,
    },
    /// Smallest and largest incentive-compatible batch size at a prior.
    BatchBounds {
        #[arg(long)]
        mu: f64,
        #[arg(long)]
        q: f64,
    },
    /// Exact correctness of one mechanism or all of them.
    Correctness {
        #[command(flatten)]
        point: Point,
    },
    /// Regenerates the data behind a figure.
    Sweep {
        #[arg(long, value_enum)]
        figure: FigureArg,
        #[arg(long, value_enum, default_value = "csv")]
        format: Format,
        /// Output file; standard output when omitted.
        #[arg(long)]
        output: Option<PathBuf>,
        #[arg(long, value_delimiter = ',', default_values_t = [0.6, 0.7, 0.8])]
        q: Vec<f64>,
        #[arg(long, default_value_t = 0.005)]
        mu_start: f64,
        #[arg(long, default_value_t = 0.995)]
        mu_stop: f64,
        #[arg(long, default_value_t = 0.005)]
        mu_step: f64,
        #[arg(long, default_value_t = DEFAULT_POPULATION)]
        population: usize,
        /// Largest batch size in the intervals figure.
        #[arg(long, default_value_t = 99)]
        k_max: usize,
    },
    /// Monte Carlo estimate of correctness.
    Simulate {
        #[command(flatten)]
        point: Point,
        #[arg(long, default_value_t = 100_000)]
        trials: u64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Also print the run trace of the first trial as JSON.
        #[arg(long)]
        trace: bool,
    },
    /// Runs the invariant suite.
    Verify {
        #[arg(long, value_enum, default_value = "fast")]
        level: LevelArg,
        /// Inverts the comparisons of the named check.
        #[cfg(debug_assertions)]
        #[arg(long, value_name = "CHECK")]
        inject_fault: Option<String>,
    },
}

#[derive(clap::Args)]
struct Point {
    #[arg(long, value_enum)]
    mechanism: MechanismArg,
    #[arg(long)]
    mu: f64,
    #[arg(long)]
    q: f64,
    #[arg(long, default_value_t = DEFAULT_POPULATION)]
    population: usize,
    /// Horizon of the greedy mechanism; unbounded when omitted.
    #[arg(long)]
    j: Option<usize>,
    /// Batch size of the single-batch mechanism; the largest
    /// incentive-compatible size when omitted.
    #[arg(long)]
    k: Option<usize>,
}

#[derive(Clone, Copy, ValueEnum)]
enum MechanismArg {
    Seq,
    Single,
    Greedy,
    GreedyUnbounded,
    All,
}

#[derive(Clone, Copy, ValueEnum)]
enum FigureArg {
    Intervals,
    OptimalBatch,
    Comparison,
}

#[derive(Clone, Copy, ValueEnum)]
enum Format {
    Csv,
    Json,
}

#[derive(Clone, Copy, ValueEnum)]
enum LevelArg {
    Fast,
    Full,
}

enum Failure {
    Usage(String),
    Io(String),
    Verification,
}

impl From<batchvote::Error> for Failure {
    fn from(e: batchvote::Error) -> Self {
        Failure::Usage(e.to_string())
    }
}

impl From<io::Error> for Failure {
    fn from(e: io::Error) -> Self {
        Failure::Io(e.to_string())
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
        Err(Failure::Io(msg)) => {
            eprintln!("I/O error: {msg}");
            ExitCode::from(3)
        }
        Err(Failure::Verification) => ExitCode::from(4),
    }
}

fn run(command: Command) -> Result<(), Failure> {
    let mut out = io::stdout().lock();
    match command {
        Command::IcInterval { k, q } => {
            if !(q > 0.5 && q < 1.0) {
                return Err(Failure::Usage(format!("q must lie in (0.5, 1), got {q}")));
            }
            let iv = ic_interval(k, q)?;
            writeln!(
                out,
                "lower={} upper={}",
                format_sig(iv.lower),
                format_sig(iv.upper)
            )?;
        }
        Command::BatchBounds { mu, q } => {
            let params = ModelParams::with_default_population(mu, q)?;
            match batch_bounds_with(&params, &SearchConfig::from_env()?)? {
                Some(b) => writeln!(out, "min_k={} max_k={}", b.min_k, b.max_k)?,
                None => writeln!(out, "none (mu >= q)")?,
            }
        }
        Command::Correctness { point } => {
            let params = ModelParams::new(point.mu, point.q, point.population)?;
            for spec in specs(&point, &params)? {
                let report = exact_correctness(spec, &params)?;
                writeln!(out, "{}", describe(spec, &report))?;
            }
        }
        Command::Sweep {
            figure,
            format,
            output,
            q,
            mu_start,
            mu_stop,
            mu_step,
            population,
            k_max,
        } => {
            let cfg = SweepConfig {
                q_values: q,
                mu_grid: MuGrid::new(mu_start, mu_stop, mu_step)?,
                population,
                interval_k_max: k_max,
            };
            let figure = match figure {
                FigureArg::Intervals => Figure::Intervals,
                FigureArg::OptimalBatch => Figure::OptimalBatch,
                FigureArg::Comparison => Figure::Comparison,
            };
            let table = sweep(figure, &cfg)?;
            match output {
                Some(path) => {
                    let file =
                        File::create(&path).map_err(|e| Failure::Io(format!("{}: {e}", path.display())))?;
                    let mut w = BufWriter::new(file);
                    emit(&table, format, &mut w)?;
                    w.flush()?;
                }
                None => emit(&table, format, &mut out)?,
            }
        }
        Command::Simulate {
            point,
            trials,
            seed,
            trace,
        } => {
            let params = ModelParams::new(point.mu, point.q, point.population)?;
            let cfg = McConfig::new(trials, seed)?;
            for spec in specs(&point, &params)? {
                let report = mc_correctness(spec, &params, &cfg)?;
                let exact = exact_correctness(spec, &params)?;
                writeln!(
                    out,
                    "{} exact={} seed={seed}",
                    describe(spec, &report),
                    format_sig(exact.value)
                )?;
                if trace {
                    let sample = mc_trial(spec, &params, seed, 0)?;
                    writeln!(
                        out,
                        "{}",
                        serde_json::to_string(&sample).map_err(|e| Failure::Io(e.to_string()))?
                    )?;
                }
            }
        }
        Command::Verify {
            level,
            #[cfg(debug_assertions)]
            inject_fault,
        } => {
            #[cfg(not(debug_assertions))]
            let inject_fault: Option<String> = None;
            let level = match level {
                LevelArg::Fast => Level::Fast,
                LevelArg::Full => Level::Full,
            };
            let report = run_verify_with(level, inject_fault.as_deref(), |r| {
                let status = if r.passed { "PASS" } else { "FAIL" };
                println!("{status} {} ({:.2} s): {}", r.name, r.seconds, r.detail);
            })?;
            let failed: Vec<&str> = report.failures().map(|r| r.name.as_str()).collect();
            if failed.is_empty() {
                writeln!(out, "all {} checks passed", report.results.len())?;
            } else {
                writeln!(
                    out,
                    "{} of {} checks failed: {}",
                    failed.len(),
                    report.results.len(),
                    failed.join(", ")
                )?;
                eprintln!("verification failed: {}", failed.join(", "));
                return Err(Failure::Verification);
            }
        }
    }
    Ok(())
}

fn specs(point: &Point, params: &ModelParams) -> Result<Vec<MechanismSpec>, Failure> {
    let single = || -> Result<MechanismSpec, Failure> {
        let k = match point.k {
            Some(k) => k,
            None => batch_bounds_with(params, &SearchConfig::from_env()?)?.map_or(1, |b| b.max_k),
        };
        Ok(MechanismSpec::single_batch(k)?)
    };
    let greedy = || -> Result<MechanismSpec, Failure> {
        Ok(match point.j {
            Some(j) => MechanismSpec::greedy_horizon(j)?,
            None => MechanismSpec::GreedyUnbounded,
        })
    };
    Ok(match point.mechanism {
        MechanismArg::Seq => vec![MechanismSpec::Sequential],
        MechanismArg::Single => vec![single()?],
        MechanismArg::Greedy => vec![greedy()?],
        MechanismArg::GreedyUnbounded => vec![MechanismSpec::GreedyUnbounded],
        MechanismArg::All => vec![
            MechanismSpec::Sequential,
            single()?,
            MechanismSpec::GreedyHorizon(1),
            MechanismSpec::GreedyHorizon(2),
            MechanismSpec::GreedyUnbounded,
        ],
    })
}

fn describe(spec: MechanismSpec, report: &CorrectnessReport) -> String {
    let method = match report.method {
        Method::ClosedForm => "closed-form",
        Method::ExactDP => "exact-dp",
        Method::BruteForce => "brute-force",
        Method::MonteCarlo => "monte-carlo",
    };
    let mut line = format!(
        "mechanism={} correctness={} method={method}",
        spec.label(),
        format_sig(report.value)
    );
    if report.method == Method::MonteCarlo {
        line += &format!(
            " std_error={} trials={}",
            format_sig(report.std_error),
            report.trials
        );
    }
    if report.ic_warning {
        line += " warning=not-incentive-compatible";
    }
    line
}

fn emit(table: &Table, format: Format, w: &mut impl Write) -> io::Result<()> {
    match format {
        Format::Csv => table.write_csv(w),
        Format::Json => {
            serde_json::to_writer_pretty(&mut *w, &table.to_json())?;
            writeln!(w)
        }
    }
}
