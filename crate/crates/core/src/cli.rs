//! Command-line front end. Exit codes: 0 success, 1 runtime or solver
//! failure, 2 configuration or validation error.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::cells::{aggregate_units, measurements, write_cell_csv, write_unit_csv, MeasurementMode};
use crate::error::{Error, Result};
use crate::operators::{build_design, build_penalty};
use crate::path::Criterion;
use crate::report::{
    heatmap_axis, heatmap_pgm, load_run, render_from_report, run_pipeline, write_heatmap_csv, FitInput, Heatmap,
    InputKind, RunConfig,
};
use crate::schema::{enumerate_terms, CovariateSchema};
use crate::screening::ScreenConfig;
use crate::simulate::{gen_example1, gen_example3, gen_example4, gen_null, example1_schema};
use crate::weights::estimate_weights;

#[derive(Parser, Debug)]
#[command(name = "tv-hte", version, about = "Total-variation regression summaries of heterogeneous treatment effects")]
pub struct Cli {
    /// Log level (error, warn, info, debug).
    #[arg(long, global = true, default_value = "warn")]
    pub log: String,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Write a synthetic dataset: schema.json, units.csv and truth.json.
    Simulate(SimulateArgs),
    /// Aggregate a unit-level CSV into a cell-level CSV.
    Aggregate(AggregateArgs),
    /// Tune between-graph weights by Monte Carlo and write them as JSON.
    Weights(WeightsArgs),
    /// Fit the model and write report.json, path.json, heatmap.csv, heatmap.pgm and effects.csv.
    Fit(FitArgs),
    /// `fit` in multiplicative mode, for pre/post metric-change diagnosis.
    Diagnose(FitArgs),
    /// Re-render the heatmap of a report.
    Render(RenderArgs),
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq)]
pub enum Example {
    #[value(name = "1")]
    One,
    #[value(name = "1weak")]
    OneWeak,
    #[value(name = "4")]
    Four,
    #[value(name = "null")]
    Null,
    /// Pre/post share and revenue-per-visit data (control = pre, treatment = post).
    #[value(name = "3")]
    Three,
}

#[derive(Args, Debug)]
pub struct SimulateArgs {
    #[arg(long, value_enum)]
    pub example: Example,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
    /// Units per arm for the null design.
    #[arg(long, default_value_t = 10_000)]
    pub n_per_arm: usize,
    /// Noise standard deviation for the null design.
    #[arg(long, default_value_t = 0.1)]
    pub noise_sd: f64,
    /// Time slots per period for example 3.
    #[arg(long, default_value_t = 28)]
    pub slots: usize,
    /// Multiplicative share shift of the first OS level for example 3.
    #[arg(long, default_value_t = 1.4)]
    pub share_shift: f64,
}

#[derive(Args, Debug)]
pub struct AggregateArgs {
    #[arg(long)]
    pub schema: PathBuf,
    #[arg(long)]
    pub input: PathBuf,
    /// Output cell CSV.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq)]
pub enum KindArg {
    Unit,
    Cell,
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq)]
pub enum ModeArg {
    Additive,
    Multiplicative,
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq)]
pub enum CriterionArg {
    Bic,
    Aic,
}

/// Flags shared by `weights`, `fit` and `diagnose`; each overrides the config file.
#[derive(Args, Debug, Default)]
pub struct CommonArgs {
    /// JSON run configuration; flags override its fields.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub schema: Option<PathBuf>,
    #[arg(long)]
    pub input: Option<PathBuf>,
    /// Input kind [default: unit].
    #[arg(long, value_enum)]
    pub input_kind: Option<KindArg>,
    /// Measurement mode [default: additive].
    #[arg(long, value_enum)]
    pub mode: Option<ModeArg>,
    /// Lasso share of the penalty [default: 0.5].
    #[arg(long)]
    pub alpha: Option<f64>,
    /// Maximum interaction order, 1 or 2 [default: 2].
    #[arg(long)]
    pub order: Option<usize>,
    /// Monte Carlo samples for weight tuning [default: 10000].
    #[arg(long)]
    pub mc_samples: Option<usize>,
    /// Master seed for weight tuning [default: 0].
    #[arg(long)]
    pub seed: Option<u64>,
    /// Minimum units per arm for a usable cell [default: 2].
    #[arg(long)]
    pub min_count: Option<u64>,
}

#[derive(Args, Debug)]
pub struct WeightsArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    /// Output JSON file.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug, Default)]
pub struct FitArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    /// Output directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Weights JSON from the `weights` subcommand; tuned automatically otherwise.
    #[arg(long)]
    pub weights: Option<PathBuf>,
    /// Per-cell variance overrides CSV.
    #[arg(long)]
    pub variance_overrides: Option<PathBuf>,
    /// Number of λ values [default: 50].
    #[arg(long)]
    pub grid_count: Option<usize>,
    /// Smallest λ as a fraction of λ_max [default: 0.01].
    #[arg(long)]
    pub grid_min_ratio: Option<f64>,
    /// Model selection criterion [default: bic].
    #[arg(long, value_enum)]
    pub criterion: Option<CriterionArg>,
    /// Screen covariates with a group lasso, keeping at most this many.
    #[arg(long)]
    pub screen: Option<usize>,
    /// Fusion threshold [default: max(1e-8, 1e-3·max|u|)].
    #[arg(long)]
    pub delta_fuse: Option<f64>,
    /// Zero threshold [default: max(1e-8, 1e-3·max|u|)].
    #[arg(long)]
    pub delta_zero: Option<f64>,
    /// Skip the elastic-net reprocess.
    #[arg(long)]
    pub no_reprocess: bool,
    /// ADMM penalty parameter [default: 10].
    #[arg(long)]
    pub rho: Option<f64>,
    /// ADMM iteration cap [default: 5000].
    #[arg(long)]
    pub max_iter: Option<usize>,
    /// Write B, b and D as triplet files under <out>/operators.
    #[arg(long)]
    pub dump_operators: bool,
}

#[derive(Args, Debug)]
pub struct RenderArgs {
    #[arg(long)]
    pub schema: PathBuf,
    /// A report.json written by `fit`.
    #[arg(long)]
    pub report: PathBuf,
    /// Output directory for heatmap.csv and heatmap.pgm.
    #[arg(long)]
    pub out: PathBuf,
}

fn read_config(path: &Option<PathBuf>) -> Result<RunConfig> {
    match path {
        Some(p) => RunConfig::from_json_str(
            &fs::read_to_string(p).map_err(|e| Error::Config(format!("cannot read {}: {}", p.display(), e)))?,
        ),
        None => Ok(RunConfig::default()),
    }
}

fn apply_common(cfg: &mut RunConfig, a: &CommonArgs) {
    if a.schema.is_some() {
        cfg.schema = a.schema.clone();
    }
    if a.input.is_some() {
        cfg.input = a.input.clone();
    }
    if let Some(k) = a.input_kind {
        cfg.input_kind = match k {
            KindArg::Unit => InputKind::Unit,
            KindArg::Cell => InputKind::Cell,
        };
    }
    if let Some(m) = a.mode {
        cfg.fit.mode = match m {
            ModeArg::Additive => MeasurementMode::Additive,
            ModeArg::Multiplicative => MeasurementMode::Multiplicative,
        };
    }
    let f = &mut cfg.fit;
    f.alpha = a.alpha.unwrap_or(f.alpha);
    f.order = a.order.unwrap_or(f.order);
    f.mc_samples = a.mc_samples.unwrap_or(f.mc_samples);
    f.seed = a.seed.unwrap_or(f.seed);
    f.measurement.min_count = a.min_count.unwrap_or(f.measurement.min_count);
}

/// Merge a config file with flag overrides.
pub fn fit_config(args: &FitArgs, multiplicative: bool) -> Result<RunConfig> {
    let mut cfg = read_config(&args.common.config)?;
    apply_common(&mut cfg, &args.common);
    if multiplicative {
        cfg.fit.mode = MeasurementMode::Multiplicative;
    }
    if args.out.is_some() {
        cfg.output = args.out.clone();
    }
    if args.weights.is_some() {
        cfg.weights_file = args.weights.clone();
    }
    if args.variance_overrides.is_some() {
        cfg.variance_overrides = args.variance_overrides.clone();
    }
    let f = &mut cfg.fit;
    f.grid_count = args.grid_count.unwrap_or(f.grid_count);
    f.grid_min_ratio = args.grid_min_ratio.unwrap_or(f.grid_min_ratio);
    if let Some(c) = args.criterion {
        f.criterion = match c {
            CriterionArg::Bic => Criterion::Bic,
            CriterionArg::Aic => Criterion::Aic,
        };
    }
    if let Some(k) = args.screen {
        f.screen = Some(ScreenConfig {
            keep_max: k,
            ..f.screen.unwrap_or_default()
        });
    }
    if args.delta_fuse.is_some() {
        f.delta_fuse = args.delta_fuse;
    }
    if args.delta_zero.is_some() {
        f.delta_zero = args.delta_zero;
    }
    if args.no_reprocess {
        f.reprocess = false;
    }
    f.admm.rho = args.rho.unwrap_or(f.admm.rho);
    f.admm.max_iter = args.max_iter.unwrap_or(f.admm.max_iter);
    cfg.dump_operators |= args.dump_operators;
    Ok(cfg)
}

fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    fs::write(path, contents)?;
    Ok(())
}

fn simulate(a: &SimulateArgs) -> Result<()> {
    let dir = &a.out;
    if a.example == Example::Three {
        let d = gen_example3(a.seed, a.slots, a.share_shift);
        fs::create_dir_all(dir)?;
        fs::write(dir.join("schema.json"), d.schema.to_json_string() + "\n")?;
        write_unit_csv(&d.schema, &d.share_rows, fs::File::create(dir.join("share.csv"))?)?;
        write_unit_csv(&d.schema, &d.rpv_rows, fs::File::create(dir.join("rpv.csv"))?)?;
        return Ok(());
    }
    let (schema, rows, truth) = match a.example {
        Example::One => {
            let d = gen_example1(a.seed, 1.0);
            (d.schema, d.rows, Some(d.truth))
        }
        Example::OneWeak => {
            let d = gen_example1(a.seed, 0.5);
            (d.schema, d.rows, Some(d.truth))
        }
        Example::Four => {
            let d = gen_example4(a.seed);
            (d.schema, d.rows, Some(d.truth))
        }
        Example::Null => {
            let s = example1_schema();
            let rows = gen_null(&s, a.n_per_arm, a.noise_sd, a.seed)?;
            (s, rows, None)
        }
        Example::Three => unreachable!(),
    };
    fs::create_dir_all(dir)?;
    fs::write(dir.join("schema.json"), schema.to_json_string() + "\n")?;
    write_unit_csv(&schema, &rows, fs::File::create(dir.join("units.csv"))?)?;
    let truth = truth.unwrap_or(crate::simulate::GroundTruth {
        global: 0.0,
        effects: vec![],
    });
    fs::write(dir.join("truth.json"), truth.to_json_string() + "\n")?;
    Ok(())
}

fn aggregate(a: &AggregateArgs) -> Result<()> {
    let schema = CovariateSchema::from_json_file(&a.schema)?;
    let file = fs::File::open(&a.input).map_err(|e| Error::Input(format!("cannot open {}: {}", a.input.display(), e)))?;
    let (rows, rej) = crate::cells::read_unit_csv(&schema, file)?;
    for r in rej.iter().take(5) {
        log::warn!("row {} rejected: {}", r.row, r.reason);
    }
    if !rej.is_empty() {
        log::warn!("{} rows rejected in total", rej.len());
    }
    let (table, _) = aggregate_units(&schema, &rows);
    let mut buf = Vec::new();
    write_cell_csv(&table, &mut buf)?;
    write_file(&a.out, buf)
}

fn weights(a: &WeightsArgs) -> Result<()> {
    let mut cfg = read_config(&a.common.config)?;
    apply_common(&mut cfg, &a.common);
    cfg.output = Some(PathBuf::from("."));
    let run = load_run(&cfg)?;
    let table = match run.input {
        FitInput::Units(rows) => aggregate_units(&run.schema, &rows).0,
        FitInput::Cells(t) => t,
    };
    let meas = measurements(table.cells(), cfg.fit.mode, &cfg.fit.measurement)?;
    let terms = enumerate_terms(&run.schema, cfg.fit.order)?;
    let design = build_design(&run.schema, &terms)?;
    let penalty = build_penalty(&terms, cfg.fit.alpha, &vec![1.0; terms.len()])?;
    let est = estimate_weights(&design, &penalty, &meas.weights, cfg.fit.mc_samples, cfg.fit.seed)?
        .labelled(&run.schema, &terms);
    write_file(&a.out, est.to_json_string() + "\n")
}

fn fit(a: &FitArgs, multiplicative: bool) -> Result<()> {
    let cfg = fit_config(a, multiplicative)?;
    let report = run_pipeline(&cfg)?;
    println!(
        "selected lambda {:.6e} ({} of {}), {} effects",
        report.selected_lambda,
        report.selected_index + 1,
        report.path.len(),
        report.n_effects()
    );
    println!("  global {:+.5}", report.intercept.estimate);
    for e in &report.effects {
        match e.percent_change {
            Some(pc) => println!("  {:40} {:+.5} ({:+.2}%)", e.label, e.estimate, 100.0 * pc),
            None => println!("  {:40} {:+.5}", e.label, e.estimate),
        }
    }
    Ok(())
}

fn render(a: &RenderArgs) -> Result<()> {
    let schema = CovariateSchema::from_json_file(&a.schema)?;
    let text = fs::read_to_string(&a.report)
        .map_err(|e| Error::Input(format!("cannot read {}: {}", a.report.display(), e)))?;
    let values = render_from_report(&schema, &text)?;
    fs::create_dir_all(&a.out)?;
    let h = Heatmap {
        axis: heatmap_axis(&schema),
        values,
        min: 0.0,
        max: 0.0,
        pgm_scale: String::new(),
    };
    write_heatmap_csv(&h, fs::File::create(a.out.join("heatmap.csv"))?)?;
    fs::write(a.out.join("heatmap.pgm"), heatmap_pgm(&h.values))?;
    Ok(())
}

pub fn run(cli: Cli) -> Result<()> {
    match &cli.command {
        Command::Simulate(a) => simulate(a),
        Command::Aggregate(a) => aggregate(a),
        Command::Weights(a) => weights(a),
        Command::Fit(a) => fit(a, false),
        Command::Diagnose(a) => fit(a, true),
        Command::Render(a) => render(a),
    }
}

pub fn main() -> ExitCode {
    let cli = Cli::parse();
    env_logger::Builder::new().parse_filters(&cli.log).init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e);
            ExitCode::from(if e.is_validation() { 2 } else { 1 })
        }
    }
}
