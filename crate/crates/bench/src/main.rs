use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use kan_bench::config::{parse_schedule, ExperimentConfig, Problem};
use kan_bench::data::gen_dataset;
use kan_bench::error::{BenchError, Result};
use kan_bench::experiment::{run_on, ExperimentResult};
use kan_bench::report::{emit_history, emit_report, emit_spectra};
use kan_bench::tables::table_variants;
use kan_bench::verify;
use kan_core::spectra::{conditioning_sweep, toeplitz_sweep, SpectraReport};
use kan_core::spline::BasisKind;

#[global_allocator]
static GLOBAL: mimalloc::MiMalloc = mimalloc::MiMalloc;

#[derive(Parser, Debug)]
#[command(name = "kan-bench", version, about = "KAN regression benchmarks and diagnostics")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    #[command(flatten)]
    opts: Opts,
}

#[derive(Args, Debug)]
struct Opts {
    /// JSON experiment configuration.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Use a single model seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    /// Multiplies dataset size and epoch counts.
    #[arg(long, global = true, default_value_t = 1.0)]
    scale: f64,
    /// `nonsmooth` or `xor`.
    #[arg(long, global = true)]
    problem: Option<String>,
    /// `spline` or `relu`.
    #[arg(long, global = true)]
    basis: Option<String>,
    #[arg(long, global = true)]
    free_knots: bool,
    /// Epochs per level, e.g. `32,16,8,4`.
    #[arg(long, global = true)]
    schedule: Option<String>,
    /// Spline order r.
    #[arg(long, global = true)]
    order: Option<usize>,
    /// Initial number of grid intervals.
    #[arg(long, global = true)]
    grid: Option<usize>,
    /// Report zero seconds so repeated runs produce identical files.
    #[arg(long, global = true)]
    no_timing: bool,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train one configuration.
    Train,
    /// Reproduce the regression tables.
    Bench,
    /// Conditioning and change-of-basis spectra sweeps.
    Analyze,
    /// Run the numerical property checks.
    Verify,
}

fn problem(opts: &Opts) -> Result<Option<Problem>> {
    opts.problem.as_deref().map(str::parse).transpose()
}

fn train_config(opts: &Opts) -> Result<ExperimentConfig> {
    let mut cfg = match &opts.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::for_problem(problem(opts)?.unwrap_or(Problem::Nonsmooth)),
    };
    if opts.config.is_some() {
        if let Some(p) = problem(opts)? {
            cfg.problem = p;
        }
    }
    let a = &mut cfg.architecture;
    if let Some(b) = &opts.basis {
        a.basis = b.parse::<BasisKind>().map_err(|e| BenchError::Config(e.to_string()))?;
    }
    a.free_knots |= opts.free_knots;
    if let Some(r) = opts.order {
        a.order = r;
    }
    if let Some(n) = opts.grid {
        a.intervals = n;
    }
    if let Some(s) = &opts.schedule {
        cfg.schedule = parse_schedule(s)?;
    }
    if let Some(s) = opts.seed {
        cfg.model_seeds = vec![s];
    }
    let cfg = cfg.scaled(opts.scale)?;
    cfg.validate()?;
    Ok(cfg)
}

fn write_sidecar(results: &[ExperimentResult], path: &Path) -> Result<()> {
    std::fs::create_dir_all(path.parent().unwrap_or(Path::new(".")))?;
    std::fs::write(path, serde_json::to_string_pretty(results)?)?;
    Ok(())
}

fn print_result(res: &ExperimentResult) {
    let r = &res.row;
    println!(
        "{:<60} params {:>5}  mse {:.3e} ({:.2e})  failed {}  {:.1}s",
        res.config.to_string(),
        r.params,
        r.mse_mean,
        r.mse_std,
        res.failed_seeds,
        r.seconds
    );
}

fn cmd_train(opts: &Opts) -> Result<()> {
    let cfg = train_config(opts)?;
    let data = gen_dataset(&cfg)?;
    let res = run_on(&cfg, &data, !opts.no_timing)?;
    print_result(&res);
    emit_report(std::slice::from_ref(&res.row), &opts.out.join("results.csv"))?;
    for s in &res.seeds {
        emit_history(&s.history, &opts.out.join(format!("history_seed{}.csv", s.seed)))?;
    }
    write_sidecar(std::slice::from_ref(&res), &opts.out.join("results.json"))
}

fn cmd_bench(opts: &Opts) -> Result<()> {
    let problems = match problem(opts)? {
        Some(p) => vec![p],
        None => vec![Problem::Nonsmooth, Problem::Xor],
    };
    let mut results = Vec::new();
    for p in problems {
        let mut variants = table_variants(p);
        if let Some(s) = opts.seed {
            variants.iter_mut().for_each(|(_, c)| c.model_seeds = vec![s]);
        }
        let data = gen_dataset(&variants[0].1.scaled(opts.scale)?)?;
        for (_, cfg) in variants {
            let cfg = cfg.scaled(opts.scale)?;
            let res = run_on(&cfg, &data, !opts.no_timing)?;
            print_result(&res);
            results.push(res);
        }
    }
    let rows: Vec<_> = results.iter().map(|r| r.row.clone()).collect();
    emit_report(&rows, &opts.out.join("results.csv"))?;
    write_sidecar(&results, &opts.out.join("results.json"))
}

fn cmd_analyze(opts: &Opts) -> Result<()> {
    let mut rep = SpectraReport::default();
    for r in [2, 3] {
        let sweep = conditioning_sweep(r, &[8, 16, 32, 64, 128])?;
        for row in sweep.rows {
            rep.push(&format!("{}_r{r}", row.quantity), row.size, row.value);
        }
    }
    for r in 1..=4 {
        rep.rows.extend(toeplitz_sweep(r, &[2, 4, 8, 16, 32, 64, 128, 256])?.rows);
    }
    for row in &rep.rows {
        println!("{:<28} {:>4} {:.6e}", row.quantity, row.size, row.value);
    }
    emit_spectra(&rep, &opts.out.join("spectra.csv"))
}

fn cmd_verify() -> Result<()> {
    let checks = verify::run_all()?;
    for c in &checks {
        println!("{}", c.line());
    }
    match checks.iter().filter(|c| !c.passed).count() {
        0 => Ok(()),
        n => Err(BenchError::Verification(n)),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let res = match cli.command {
        Command::Train => cmd_train(&cli.opts),
        Command::Bench => cmd_bench(&cli.opts),
        Command::Analyze => cmd_analyze(&cli.opts),
        Command::Verify => cmd_verify(),
    };
    match res {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
