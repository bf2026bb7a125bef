use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use shampoo::linalg::random;
use shampoo::partition::verify_lemma;
use shampoo::root::{bench_csv, bench_root, BenchConfig, RootMethod};
use shampoo::scheduler::events_csv;
use shampoo_harness::suites::{run_suite, SuiteKind};
use shampoo_harness::trace::{condition_csv, trace_condition};
use shampoo_harness::train::{train, RunConfig};
use shampoo_harness::HarnessError;

#[derive(Parser)]
#[command(name = "shampoo", version, about = "Shampoo optimizer experiments")]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Global {
    /// Run configuration (JSON).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the seed of the configuration.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
}

#[derive(Subcommand)]
enum Command {
    /// Train one configuration; writes metrics.csv, summary.json, events.csv.
    Train,
    /// Run a named experiment suite, or `all`.
    Suite { kind: String },
    /// Time the root solvers on random PSD matrices.
    BenchRoot {
        #[arg(long, value_delimiter = ',', default_value = "16,64,128,256,512")]
        sizes: Vec<usize>,
        #[arg(long, value_delimiter = ',', default_value = "coupled_newton,eig_oracle")]
        methods: Vec<String>,
        #[arg(long, default_value_t = 1e4)]
        cond: f64,
    },
    /// Check the Kronecker bound on random gradient streams.
    VerifyLemma {
        #[arg(long, default_value_t = 4)]
        m: usize,
        #[arg(long, default_value_t = 3)]
        n: usize,
        /// Number of gradients per instance.
        #[arg(long, default_value_t = 20)]
        t: usize,
        #[arg(long, default_value_t = 2.0)]
        p: f64,
        /// Use `inf` for infinity.
        #[arg(long, default_value_t = 2.0)]
        q: f64,
        #[arg(long, default_value_t = 1e-3)]
        eps: f64,
        #[arg(long, default_value_t = 10)]
        trials: usize,
    },
    /// Record condition numbers of the statistics along a Shampoo run.
    TraceCondition {
        #[arg(long, default_value_t = 10)]
        every: u64,
    },
}

fn main() -> ExitCode {
    env_logger::init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

fn load_config(global: &Global) -> Result<RunConfig, HarnessError> {
    let path = global
        .config
        .as_ref()
        .ok_or_else(|| HarnessError::Config("--config is required for this command".into()))?;
    let text = fs::read_to_string(path).map_err(|e| HarnessError::Config(format!("{}: {e}", path.display())))?;
    let mut cfg = RunConfig::from_json(&text)?;
    if let Some(seed) = global.seed {
        cfg.seed = seed;
    }
    Ok(cfg)
}

fn write(dir: &Path, name: &str, contents: &str) -> Result<(), HarnessError> {
    fs::create_dir_all(dir)?;
    fs::write(dir.join(name), contents)?;
    Ok(())
}

fn run(cli: Cli) -> Result<(), HarnessError> {
    let g = &cli.global;
    match cli.command {
        Command::Train => {
            let cfg = load_config(g)?;
            let out = train(&cfg)?;
            write(&g.out, "metrics.csv", &out.metrics_csv())?;
            let summary = serde_json::to_string_pretty(&out.summary).expect("summary serializes");
            write(&g.out, "summary.json", &summary)?;
            write(&g.out, "events.csv", &events_csv(&out.events))?;
            println!("{summary}");
            if let Some(step) = out.summary.diverged_at {
                return Err(HarnessError::Diverged(step));
            }
        }
        Command::Suite { kind } => {
            let kinds: Vec<SuiteKind> = if kind == "all" {
                SuiteKind::ALL.to_vec()
            } else {
                vec![kind.parse()?]
            };
            for k in kinds {
                let report = run_suite(k, g.seed.unwrap_or(0))?;
                write(&g.out, &format!("{}.csv", k.name()), &report.to_csv())?;
                let md = report.to_markdown();
                write(&g.out, &format!("{}.md", k.name()), &md)?;
                println!("{md}");
            }
        }
        Command::BenchRoot { sizes, methods, cond } => {
            let methods = methods
                .iter()
                .map(|m| m.parse::<RootMethod>().map_err(HarnessError::Config))
                .collect::<Result<Vec<_>, _>>()?;
            if sizes.iter().any(|&n| n < 2) {
                return Err(HarnessError::Config("sizes must be >= 2".into()));
            }
            let cfg = BenchConfig {
                seed: g.seed.unwrap_or(0),
                cond,
                ..BenchConfig::default()
            };
            let rows = bench_root(&sizes, &methods, &cfg).map_err(|e| HarnessError::Numerical(e.to_string()))?;
            let csv = bench_csv(&rows);
            write(&g.out, "bench_root.csv", &csv)?;
            print!("{csv}");
        }
        Command::VerifyLemma {
            m,
            n,
            t,
            p,
            q,
            eps,
            trials,
        } => {
            let mut rng = ChaCha8Rng::seed_from_u64(g.seed.unwrap_or(0));
            let mut all_hold = true;
            let mut reports = Vec::new();
            for _ in 0..trials {
                let grads: Vec<_> = (0..t).map(|_| random::gaussian(m, n, &mut rng)).collect();
                let report = verify_lemma(&grads, p, q, eps, 1e-8).map_err(|e| HarnessError::Config(e.to_string()))?;
                all_hold &= report.holds;
                reports.push(report);
            }
            let json = serde_json::to_string_pretty(&reports).expect("reports serialize");
            write(&g.out, "lemma.json", &json)?;
            println!("{json}");
            if !all_hold {
                return Err(HarnessError::Numerical("bound violated".into()));
            }
        }
        Command::TraceCondition { every } => {
            let cfg = load_config(g)?;
            let rows = trace_condition(&cfg, every)?;
            let csv = condition_csv(&rows);
            write(&g.out, "condition.csv", &csv)?;
            print!("{csv}");
        }
    }
    Ok(())
}
