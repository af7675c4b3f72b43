//! `scpanel`: simulate factor-model panels, fit constrained weights,
//! estimate treatment effects, and run Monte Carlo studies.
//!
//! Exit codes: 0 on success, 1 on usage errors, 2 on domain errors
//! (invalid inputs, infeasible designs, failed computations). Primary
//! payloads go to stdout or `--out`; diagnostics go to stderr.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use scpanel::dgp::{self, DgpSpec};
use scpanel::error::{Error, Result};
use scpanel::estimators::{self, TauEstimate};
use scpanel::inference;
use scpanel::mc::{self, ExperimentSpec};
use scpanel::panel::{load_panel, save_panel, Direction, Panel, TreatmentPattern, WeightSet};
use scpanel::solver::{self, SolverConfig};

const NOTATION: &str = "\
Panel convention:
  A panel is a dense units x periods matrix. The first n0-1 rows are
  control units, the remaining n1 rows are treated units; the first
  t0-1 columns are pre-treatment periods, the remaining t1 columns are
  post-treatment periods. Only the treated block (last n1 rows x last
  t1 columns) receives treatment.

Notation in design files and reports:
  n0, t0, n1, t1   treatment pattern (see above); n0, t0 >= 2
  lambda           deterministic factor path, one r-vector per period
  gamma            deterministic loadings, one r-vector per unit
  sigma_lambda     covariance of the exogenous factor draws (r x r)
  sigma_gamma      covariance of the exogenous loading draws (r x r)
  iota_unit/time   additive unit and period effects
  sigma_eps        noise standard deviation
  tau              additive treatment effect on treated cells
  w, v             fitted weights: pre/post periods (horizontal) or
                   control/treated units (vertical), each on a capped
                   simplex
  beta             intercept subtracted from the weighted contrast";

#[derive(Parser)]
#[command(
    name = "scpanel",
    version,
    about = "Synthetic-control estimation and inference for panel data",
    after_long_help = NOTATION
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate a panel from a design spec and write it as CSV.
    Simulate(SimulateArgs),
    /// Fit horizontal and/or vertical weights on a panel.
    Weights(WeightsArgs),
    /// Point estimate of the treatment effect.
    Estimate(EstimateArgs),
    /// Point estimate with a confidence interval.
    Infer(InferArgs),
    /// Placebo randomization test over a pool of control units.
    Placebo(PlaceboArgs),
    /// Monte Carlo study over a design grid.
    Mc(McArgs),
}

#[derive(Args)]
struct PatternArgs {
    /// Control-block units (controls = n0 - 1).
    #[arg(long)]
    n0: usize,
    /// Control-block periods (pre periods = t0 - 1).
    #[arg(long)]
    t0: usize,
    /// Treated units.
    #[arg(long)]
    n1: usize,
    /// Post periods.
    #[arg(long)]
    t1: usize,
}

impl PatternArgs {
    fn pattern(&self) -> Result<TreatmentPattern> {
        TreatmentPattern::new(self.n0, self.t0, self.n1, self.t1)
    }
}

#[derive(Args)]
struct SolverArgs {
    /// JSON file with solver settings; the flags below override fields.
    #[arg(long)]
    solver_config: Option<PathBuf>,
    /// Ridge penalty on the weights (scaled by the block size).
    #[arg(long)]
    penalty: Option<f64>,
    /// Multiplier on the default per-coordinate weight caps.
    #[arg(long)]
    cap_scale: Option<f64>,
    /// Stationarity tolerance.
    #[arg(long)]
    tol: Option<f64>,
    /// Iteration budget.
    #[arg(long)]
    max_iters: Option<usize>,
}

impl SolverArgs {
    fn resolve(&self) -> Result<SolverConfig> {
        let mut cfg = match &self.solver_config {
            Some(path) => read_json::<SolverConfig>(path)?,
            None => SolverConfig::default(),
        };
        if let Some(p) = self.penalty {
            cfg.penalty = p;
        }
        if let Some(c) = self.cap_scale {
            cfg.cap_scale = c;
        }
        if let Some(t) = self.tol {
            cfg.tol = t;
        }
        if let Some(m) = self.max_iters {
            cfg.max_iters = m;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Args)]
struct SimulateArgs {
    /// Design spec (JSON, same schema the library serializes).
    #[arg(long)]
    spec: PathBuf,
    /// Output panel CSV.
    #[arg(long)]
    out: PathBuf,
    /// Override the spec's seed.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Copy, Clone, PartialEq, Eq, ValueEnum)]
enum DirectionArg {
    Horizontal,
    Vertical,
    Both,
}

#[derive(Args)]
struct WeightsArgs {
    /// Panel CSV.
    #[arg(long)]
    panel: PathBuf,
    #[command(flatten)]
    pattern: PatternArgs,
    #[arg(long, value_enum, default_value = "both")]
    direction: DirectionArg,
    #[command(flatten)]
    solver: SolverArgs,
    /// Write the weight JSON here instead of stdout.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Copy, Clone, PartialEq, Eq, ValueEnum)]
enum MethodArg {
    Horizontal,
    Vertical,
    Sdid,
    Pca,
}

#[derive(Args)]
struct EstimateArgs {
    /// Panel CSV.
    #[arg(long)]
    panel: PathBuf,
    #[command(flatten)]
    pattern: PatternArgs,
    #[arg(long, value_enum)]
    method: MethodArg,
    /// Weight JSON: a single weight set or {"horizontal","vertical"}.
    #[arg(long, conflicts_with = "fit_weights")]
    weights: Option<PathBuf>,
    /// Fit the required weights on the panel instead of loading them.
    #[arg(long)]
    fit_weights: bool,
    /// Factor cap for the PCA baseline.
    #[arg(long, default_value_t = 8)]
    max_factors: usize,
    #[command(flatten)]
    solver: SolverArgs,
    /// Write the estimate JSON here instead of stdout.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct InferArgs {
    /// Panel CSV.
    #[arg(long)]
    panel: PathBuf,
    #[command(flatten)]
    pattern: PatternArgs,
    /// Interval-bearing method (the PCA baseline has no interval).
    #[arg(long, value_enum)]
    method: MethodArg,
    /// Weight JSON: a single weight set or {"horizontal","vertical"}.
    #[arg(long, conflicts_with = "fit_weights")]
    weights: Option<PathBuf>,
    /// Fit the required weights on the panel instead of loading them.
    #[arg(long)]
    fit_weights: bool,
    /// Confidence level.
    #[arg(long, default_value_t = 0.95)]
    level: f64,
    #[command(flatten)]
    solver: SolverArgs,
    /// Write the report JSON here instead of stdout.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct PlaceboArgs {
    /// Panel CSV with exactly one treated unit.
    #[arg(long)]
    panel: PathBuf,
    #[command(flatten)]
    pattern: PatternArgs,
    /// Number of control units in the placebo pool. The pool is the
    /// treated unit plus the last n control units; the remaining
    /// controls act as donors for everyone.
    #[arg(long)]
    n_placebo: usize,
    #[command(flatten)]
    solver: SolverArgs,
    /// Write the distribution CSV here instead of stdout.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct McArgs {
    /// Experiment spec (JSON).
    #[arg(long)]
    spec: PathBuf,
    /// Output directory for report.csv, report.json, spec-echo.json.
    #[arg(long)]
    out: PathBuf,
    /// Worker threads (defaults to the rayon default).
    #[arg(long)]
    workers: Option<usize>,
    /// Override the experiment's base seed.
    #[arg(long)]
    seed: Option<u64>,
    #[command(flatten)]
    solver: SolverArgs,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // Help and version requests are not usage errors.
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Simulate(args) => cmd_simulate(args),
        Command::Weights(args) => cmd_weights(args),
        Command::Estimate(args) => cmd_estimate(args),
        Command::Infer(args) => cmd_infer(args),
        Command::Placebo(args) => cmd_placebo(args),
        Command::Mc(args) => cmd_mc(args),
    }
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path)
        .map_err(|e| Error::parse(format!("{}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| Error::parse(format!("{}: {e}", path.display())))
}

fn emit_json<T: Serialize>(value: &T, out: Option<&Path>) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    match out {
        Some(path) => fs::write(path, text)
            .map_err(|e| Error::parse(format!("{}: {e}", path.display()))),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn cmd_simulate(args: SimulateArgs) -> Result<()> {
    let mut spec: DgpSpec = read_json(&args.spec)?;
    if let Some(seed) = args.seed {
        spec = spec.with_seed(seed);
    }
    let (panel, _draw) = dgp::simulate(&spec)?;
    save_panel(&panel, &args.out)?;
    eprintln!(
        "simulated {}x{} panel (seed {}) -> {}",
        panel.pattern().n_units(),
        panel.pattern().n_periods(),
        spec.seed,
        args.out.display()
    );
    Ok(())
}

/// Weight file payload: one weight set, or both directions keyed by name.
#[derive(Serialize, Deserialize)]
#[serde(untagged)]
enum WeightsFile {
    Pair { horizontal: WeightSet, vertical: WeightSet },
    Single(WeightSet),
}

fn cmd_weights(args: WeightsArgs) -> Result<()> {
    let pattern = args.pattern.pattern()?;
    let panel = load_panel(&args.panel, pattern)?;
    let cfg = args.solver.resolve()?;
    let payload = match args.direction {
        DirectionArg::Horizontal => WeightsFile::Single(solver::solve_horizontal(&panel, &cfg)?),
        DirectionArg::Vertical => WeightsFile::Single(solver::solve_vertical(&panel, &cfg)?),
        DirectionArg::Both => WeightsFile::Pair {
            horizontal: solver::solve_horizontal(&panel, &cfg)?,
            vertical: solver::solve_vertical(&panel, &cfg)?,
        },
    };
    emit_json(&payload, args.out.as_deref())
}

/// Pulls the weight set for one direction out of a weight file payload.
fn pick_direction(file: &WeightsFile, want: Direction) -> Result<WeightSet> {
    match file {
        WeightsFile::Pair { horizontal, vertical } => Ok(match want {
            Direction::Horizontal => horizontal.clone(),
            Direction::Vertical => vertical.clone(),
        }),
        WeightsFile::Single(ws) if ws.direction == want => Ok(ws.clone()),
        WeightsFile::Single(ws) => Err(Error::invalid(format!(
            "weight file holds {} weights but {want} weights are required",
            ws.direction
        ))),
    }
}

struct ResolvedWeights {
    horizontal: Option<WeightSet>,
    vertical: Option<WeightSet>,
}

fn resolve_weights(
    panel: &Panel,
    method: MethodArg,
    weights: Option<&Path>,
    fit_weights: bool,
    cfg: &SolverConfig,
) -> Result<ResolvedWeights> {
    let (need_h, need_v) = match method {
        MethodArg::Horizontal => (true, false),
        MethodArg::Vertical => (false, true),
        MethodArg::Sdid => (true, true),
        MethodArg::Pca => (false, false),
    };
    if !need_h && !need_v {
        if weights.is_some() || fit_weights {
            return Err(Error::invalid("the PCA baseline does not use weights"));
        }
        return Ok(ResolvedWeights { horizontal: None, vertical: None });
    }
    if fit_weights {
        return Ok(ResolvedWeights {
            horizontal: need_h.then(|| solver::solve_horizontal(panel, cfg)).transpose()?,
            vertical: need_v.then(|| solver::solve_vertical(panel, cfg)).transpose()?,
        });
    }
    let path = weights.ok_or_else(|| {
        Error::invalid("this method needs weights: pass --weights <file> or --fit-weights")
    })?;
    let file: WeightsFile = read_json(path)?;
    Ok(ResolvedWeights {
        horizontal: need_h
            .then(|| pick_direction(&file, Direction::Horizontal))
            .transpose()?,
        vertical: need_v.then(|| pick_direction(&file, Direction::Vertical)).transpose()?,
    })
}

fn cmd_estimate(args: EstimateArgs) -> Result<()> {
    let pattern = args.pattern.pattern()?;
    let panel = load_panel(&args.panel, pattern)?;
    let cfg = args.solver.resolve()?;
    let rw = resolve_weights(&panel, args.method, args.weights.as_deref(), args.fit_weights, &cfg)?;
    let estimate: TauEstimate = match args.method {
        MethodArg::Horizontal => {
            estimators::estimate_horizontal(&panel, &rw.horizontal.expect("resolved"), None)?
        }
        MethodArg::Vertical => {
            estimators::estimate_vertical(&panel, &rw.vertical.expect("resolved"), None)?
        }
        MethodArg::Sdid => estimators::estimate_dr(
            &panel,
            &rw.horizontal.expect("resolved"),
            &rw.vertical.expect("resolved"),
        )?,
        MethodArg::Pca => estimators::estimate_pca_baseline(&panel, args.max_factors)?,
    };
    emit_json(&estimate, args.out.as_deref())
}

fn cmd_infer(args: InferArgs) -> Result<()> {
    let pattern = args.pattern.pattern()?;
    let panel = load_panel(&args.panel, pattern)?;
    let cfg = args.solver.resolve()?;
    let rw = resolve_weights(&panel, args.method, args.weights.as_deref(), args.fit_weights, &cfg)?;
    let report = match args.method {
        MethodArg::Horizontal => {
            inference::ci_regression(&panel, &rw.horizontal.expect("resolved"), None, args.level)?
        }
        MethodArg::Vertical => {
            inference::ci_regression(&panel, &rw.vertical.expect("resolved"), None, args.level)?
        }
        MethodArg::Sdid => inference::ci_dr(
            &panel,
            &rw.horizontal.expect("resolved"),
            &rw.vertical.expect("resolved"),
            args.level,
        )?,
        MethodArg::Pca => {
            return Err(Error::invalid(
                "the PCA baseline has no interval; use estimate --method pca",
            ))
        }
    };
    emit_json(&report, args.out.as_deref())
}

fn cmd_placebo(args: PlaceboArgs) -> Result<()> {
    let pattern = args.pattern.pattern()?;
    if pattern.n_treated() != 1 {
        return Err(Error::invalid(format!(
            "the placebo test needs exactly one treated unit, got {}",
            pattern.n_treated()
        )));
    }
    if args.n_placebo == 0 {
        return Err(Error::invalid("--n-placebo must be at least 1"));
    }
    if args.n_placebo >= pattern.n_controls() {
        return Err(Error::invalid(format!(
            "--n-placebo {} leaves no donors among {} controls",
            args.n_placebo,
            pattern.n_controls()
        )));
    }
    let panel = load_panel(&args.panel, pattern)?;
    let cfg = args.solver.resolve()?;

    // Pool: the treated unit first, then the last n_placebo controls.
    let treated = pattern.n_controls();
    let mut pool = vec![treated];
    pool.extend((pattern.n_controls() - args.n_placebo)..pattern.n_controls());

    let per_unit = solver::fit_placebo_weights(&panel, &pool, &cfg)?;

    // Horizontal weights come from the donor subpanel so pool units never
    // influence their own comparison.
    let donors: Vec<usize> = (0..pattern.n_controls()).filter(|i| !pool.contains(i)).collect();
    let sub_pattern = TreatmentPattern::new(donors.len() + 1, pattern.t0(), 1, pattern.t1())?;
    let mut rows = donors.clone();
    rows.push(treated);
    let sub = nalgebra_matrix_from_rows(&panel, &rows);
    let sub_panel = Panel::from_matrix(sub, sub_pattern)?;
    let ws_h = solver::solve_horizontal(&sub_panel, &cfg)?;

    let estimates = estimators::estimate_placebo_set(&panel, &pool, &ws_h, &per_unit)?;
    let p_value = inference::placebo_test(&estimates, 0)?;

    let mut wtr = csv::Writer::from_writer(Vec::new());
    wtr.write_record(["unit", "unit_id", "tau_hat", "is_treated", "p_value"])
        .map_err(|e| Error::parse(e.to_string()))?;
    for (k, &j) in pool.iter().enumerate() {
        wtr.write_record([
            j.to_string(),
            panel.unit_ids()[j].clone(),
            format!("{:.16e}", estimates[k].tau_hat),
            (j == treated).to_string(),
            format!("{p_value:.16e}"),
        ])
        .map_err(|e| Error::parse(e.to_string()))?;
    }
    let bytes = wtr.into_inner().map_err(|e| Error::parse(e.to_string()))?;
    let text = String::from_utf8(bytes).map_err(|e| Error::parse(e.to_string()))?;
    match &args.out {
        Some(path) => fs::write(path, text)
            .map_err(|e| Error::parse(format!("{}: {e}", path.display())))?,
        None => print!("{text}"),
    }
    eprintln!("placebo p-value {p_value:.6} over a pool of {}", pool.len());
    Ok(())
}

fn nalgebra_matrix_from_rows(panel: &Panel, rows: &[usize]) -> nalgebra::DMatrix<f64> {
    nalgebra::DMatrix::from_fn(rows.len(), panel.pattern().n_periods(), |i, t| {
        panel.outcomes()[(rows[i], t)]
    })
}

/// Echo of the effective configuration, written next to the reports.
#[derive(Serialize)]
struct SpecEcho<'a> {
    experiment: &'a ExperimentSpec,
    solver: &'a SolverConfig,
}

fn cmd_mc(args: McArgs) -> Result<()> {
    let mut spec: ExperimentSpec = read_json(&args.spec)?;
    if let Some(seed) = args.seed {
        spec.seed = seed;
    }
    let cfg = args.solver.resolve()?;
    if let Some(workers) = args.workers {
        if workers == 0 {
            return Err(Error::invalid("--workers must be at least 1"));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(workers)
            .build_global()
            .map_err(|e| Error::computation(format!("thread pool setup failed: {e}")))?;
    }

    fs::create_dir_all(&args.out)
        .map_err(|e| Error::parse(format!("{}: {e}", args.out.display())))?;
    let report = mc::run_experiment(&spec, &cfg)?;

    let json_path = args.out.join("report.json");
    let mut json = serde_json::to_string_pretty(&report)?;
    json.push('\n');
    fs::write(&json_path, json)
        .map_err(|e| Error::parse(format!("{}: {e}", json_path.display())))?;

    let csv_path = args.out.join("report.csv");
    let mut table = Vec::new();
    mc::emit_table(&report, &spec.methods, &mut table)?;
    fs::write(&csv_path, table)
        .map_err(|e| Error::parse(format!("{}: {e}", csv_path.display())))?;

    let echo_path = args.out.join("spec-echo.json");
    let mut echo = serde_json::to_string_pretty(&SpecEcho { experiment: &spec, solver: &cfg })?;
    echo.push('\n');
    fs::write(&echo_path, echo)
        .map_err(|e| Error::parse(format!("{}: {e}", echo_path.display())))?;

    eprintln!(
        "wrote {} cell-method reports to {}",
        report.cells.len(),
        args.out.display()
    );
    Ok(())
}
