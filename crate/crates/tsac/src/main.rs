//! `tsac` command line: train agents, evaluate the closed-form analysis,
//! verify it against oracles, and plot learning curves.
//!
//! Exit codes: 0 success, 2 configuration error, 3 divergence guard,
//! 4 verification failure, 1 other failures.

use clap::{Args, Parser, Subcommand};
use std::path::PathBuf;
use std::process::ExitCode;

use tsac::analysis::{
    bootstrap_ratio, coverage_probability, effective_sample_size, expected_reuse, geometric_sums,
    kappa_star, mean_reuse, reward_ratio, sparse_amplification, triangular_weights, VarianceModel,
    WindowModel,
};
use tsac::analysis_verify::run_verification;
use tsac::config::RunConfig;
use tsac::learner::TrainError;
use tsac::metrics::read_metrics;
use tsac::plot::{render_chart, Metric, RunGroup};
use tsac::run::{train_run, RunError};

#[derive(Parser)]
#[command(
    name = "tsac",
    version,
    about = "Sequence-conditioned soft actor-critic laboratory"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train one agent from a config file.
    Train(TrainArgs),
    /// Print closed-form analysis values on a parameter grid.
    Analyze(AnalyzeArgs),
    /// Check every closed form against its oracle; nonzero exit on failure.
    Verify(VerifyArgs),
    /// Render learning-curve SVGs from metrics files.
    Plot(PlotArgs),
}

#[derive(Args)]
struct TrainArgs {
    /// Run configuration file (key = value lines).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override one key, e.g. `--set seed=3`; repeatable.
    #[arg(long = "set")]
    set: Vec<String>,
    /// Output directory (defaults to $TSAC_OUT_ROOT/<env>-<mode>-seed<N>).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct AnalyzeArgs {
    /// Horizon / segment lengths to tabulate.
    #[arg(long = "N", required = true, num_args = 1..)]
    n: Vec<usize>,
    #[arg(long, default_values_t = [0.99], num_args = 1..)]
    gamma: Vec<f64>,
    #[arg(long, default_value_t = 0.0)]
    rho: f64,
    #[arg(long, default_value_t = 0.0)]
    kappa: f64,
    /// Window bounds; enables the reuse/coverage/amplification block.
    #[arg(long)]
    lmin: Option<usize>,
    #[arg(long)]
    lmax: Option<usize>,
    /// Output format: text or csv.
    #[arg(long, default_value = "text")]
    format: String,
}

#[derive(Args)]
struct VerifyArgs {
    /// Monte-Carlo trials per grid setting.
    #[arg(long, default_value_t = 100_000)]
    trials: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct PlotArgs {
    /// Metrics CSV files or run directories (containing metrics.csv);
    /// the file stem / directory name becomes the legend label.
    #[arg(required = true)]
    inputs: Vec<PathBuf>,
    /// Output directory for the SVG files.
    #[arg(long, default_value = "plots")]
    out: PathBuf,
}

fn main() -> ExitCode {
    match Cli::parse().command {
        Command::Train(args) => cmd_train(args),
        Command::Analyze(args) => cmd_analyze(args),
        Command::Verify(args) => cmd_verify(args),
        Command::Plot(args) => cmd_plot(args),
    }
}

fn cmd_train(args: TrainArgs) -> ExitCode {
    let cfg = match &args.config {
        Some(path) => RunConfig::load(path, &args.set),
        None => RunConfig::from_text("", &args.set),
    };
    let cfg = match cfg {
        Ok(cfg) => cfg,
        Err(err) => {
            eprintln!("configuration error: {err}");
            return ExitCode::from(2);
        }
    };
    let out = args.out.unwrap_or_else(|| {
        let root = std::env::var("TSAC_OUT_ROOT").unwrap_or_else(|_| "runs".to_string());
        PathBuf::from(root).join(format!("{}-{}-seed{}", cfg.env, cfg.target_mode, cfg.seed))
    });
    match train_run(&cfg, &out) {
        Ok(summary) => {
            println!(
                "done: {} steps, final IQM return {:.4}, final IQM success {:.3}",
                summary.steps, summary.final_iqm_return, summary.final_iqm_success
            );
            println!("metrics: {}", summary.metrics_path.display());
            ExitCode::SUCCESS
        }
        Err(RunError::Config(err)) => {
            eprintln!("configuration error: {err}");
            ExitCode::from(2)
        }
        Err(RunError::Train(TrainError::Diverged { update, loss })) => {
            eprintln!("divergence guard tripped at critic update {update}: loss = {loss}");
            eprintln!("parameters checkpointed under {}", out.display());
            ExitCode::from(3)
        }
        Err(err) => {
            eprintln!("run failed: {err}");
            ExitCode::FAILURE
        }
    }
}

struct Table {
    header: Vec<String>,
    rows: Vec<Vec<String>>,
}

impl Table {
    fn print(&self, csv: bool) {
        if csv {
            println!("{}", self.header.join(","));
            for row in &self.rows {
                println!("{}", row.join(","));
            }
            return;
        }
        let mut widths: Vec<usize> = self.header.iter().map(|h| h.len()).collect();
        for row in &self.rows {
            for (w, cell) in widths.iter_mut().zip(row) {
                *w = (*w).max(cell.len());
            }
        }
        let line = |cells: &[String]| {
            cells
                .iter()
                .zip(&widths)
                .map(|(c, w)| format!("{c:>w$}"))
                .collect::<Vec<_>>()
                .join("  ")
        };
        println!("{}", line(&self.header));
        for row in &self.rows {
            println!("{}", line(row));
        }
    }
}

fn cmd_analyze(args: AnalyzeArgs) -> ExitCode {
    let csv = match args.format.as_str() {
        "csv" => true,
        "text" => false,
        other => {
            eprintln!("unknown --format `{other}` (text or csv)");
            return ExitCode::from(2);
        }
    };
    let mut table = Table {
        header: [
            "N", "gamma", "S0", "T0", "S1", "C", "A_gamma", "B_gamma", "R_gamma", "R_B",
            "kappa_star", "n_eff",
        ]
        .iter()
        .map(|s| s.to_string())
        .collect(),
        rows: Vec::new(),
    };
    for &n in &args.n {
        for &gamma in &args.gamma {
            let model = match VarianceModel::new(n, gamma, args.rho, args.kappa, 1.0, 1.0) {
                Ok(m) => m,
                Err(err) => {
                    eprintln!("invalid grid point: {err}");
                    return ExitCode::from(2);
                }
            };
            let sums = geometric_sums(n, gamma);
            let (_, a, b) = triangular_weights(n, gamma);
            let ks = kappa_star(n, gamma)
                .map(|v| format!("{v:.6}"))
                .unwrap_or_else(|_| "undefined".to_string());
            table.rows.push(vec![
                n.to_string(),
                format!("{gamma}"),
                format!("{:.6}", sums.s0),
                format!("{:.6}", sums.t0),
                format!("{:.6}", sums.s1),
                format!("{:.6}", sums.c),
                format!("{a:.6}"),
                format!("{b:.6}"),
                format!("{:.6}", reward_ratio(&model)),
                format!("{:.6}", bootstrap_ratio(&model)),
                ks,
                format!("{:.6}", effective_sample_size(n, args.rho)),
            ]);
        }
    }
    table.print(csv);

    if let (Some(lmin), Some(lmax)) = (args.lmin, args.lmax) {
        let mut wtable = Table {
            header: [
                "N",
                "l_min",
                "l_max",
                "reuse_plateau",
                "reuse_last",
                "mean_reuse",
                "coverage_last",
                "amplification",
            ]
            .iter()
            .map(|s| s.to_string())
            .collect(),
            rows: Vec::new(),
        };
        for &n in &args.n {
            let wm = match WindowModel::new(n, lmin, lmax) {
                Ok(w) => w,
                Err(err) => {
                    eprintln!("invalid window grid point: {err}");
                    return ExitCode::from(2);
                }
            };
            let plateau = if n >= 2 {
                expected_reuse(n - 1, &wm).expect("in range")
            } else {
                0.0
            };
            let amp = sparse_amplification(&wm);
            wtable.rows.push(vec![
                n.to_string(),
                lmin.to_string(),
                lmax.to_string(),
                format!("{plateau:.6}"),
                format!("{:.6}", amp.expected_count),
                format!("{:.6}", mean_reuse(&wm)),
                format!("{:.6}", coverage_probability(n, &wm).expect("in range")),
                format!("{:.6}", amp.amplification),
            ]);
        }
        if !csv {
            println!();
        }
        wtable.print(csv);
    }
    ExitCode::SUCCESS
}

fn cmd_verify(args: VerifyArgs) -> ExitCode {
    if args.trials < 1000 {
        eprintln!("--trials must be >= 1000");
        return ExitCode::from(2);
    }
    let report = run_verification(args.trials, args.seed);
    let mut table = Table {
        header: ["check", "params", "closed_form", "oracle", "stderr", "status"]
            .iter()
            .map(|s| s.to_string())
            .collect(),
        rows: Vec::new(),
    };
    for row in &report.rows {
        table.rows.push(vec![
            row.name.clone(),
            row.params.clone(),
            format!("{:.8}", row.closed_form),
            format!("{:.8}", row.oracle),
            format!("{:.2e}", row.stderr),
            if row.pass { "ok".into() } else { "FAIL".into() },
        ]);
    }
    table.print(false);
    println!(
        "{} checks over {} grid settings, max discrepancy {:.3} gate units, {} failures",
        report.rows.len(),
        report.settings,
        report.max_severity(),
        report.failures()
    );
    if report.all_pass() {
        ExitCode::SUCCESS
    } else {
        ExitCode::from(4)
    }
}

fn cmd_plot(args: PlotArgs) -> ExitCode {
    let mut groups = Vec::new();
    for input in &args.inputs {
        let (path, label) = if input.is_dir() {
            (
                input.join("metrics.csv"),
                input
                    .file_name()
                    .map(|s| s.to_string_lossy().into_owned())
                    .unwrap_or_else(|| "run".to_string()),
            )
        } else {
            (
                input.clone(),
                input
                    .file_stem()
                    .map(|s| s.to_string_lossy().into_owned())
                    .unwrap_or_else(|| "run".to_string()),
            )
        };
        let file = match std::fs::File::open(&path) {
            Ok(f) => f,
            Err(err) => {
                eprintln!("cannot open {}: {err}", path.display());
                return ExitCode::from(2);
            }
        };
        let rows = match read_metrics(std::io::BufReader::new(file)) {
            Ok(rows) => rows,
            Err(err) => {
                eprintln!("{}: {err}", path.display());
                return ExitCode::from(2);
            }
        };
        groups.push(RunGroup { label, rows });
    }
    if let Err(err) = std::fs::create_dir_all(&args.out) {
        eprintln!("cannot create {}: {err}", args.out.display());
        return ExitCode::FAILURE;
    }
    for (metric, file) in [
        (Metric::IqmReturn, "return.svg"),
        (Metric::IqmSuccess, "success.svg"),
    ] {
        match render_chart(&groups, metric) {
            Ok(svg) => {
                let path = args.out.join(file);
                if let Err(err) = std::fs::write(&path, svg) {
                    eprintln!("cannot write {}: {err}", path.display());
                    return ExitCode::FAILURE;
                }
                println!("wrote {}", path.display());
            }
            Err(err) => {
                eprintln!("plot error: {err}");
                return ExitCode::from(2);
            }
        }
    }
    ExitCode::SUCCESS
}
