use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use funcbreak::breaks::{break_report, cluster_breaks, default_k_bar, default_rho};
use funcbreak::cusum::{pe_cusum_test, threshold, CXi, PeConfig, PeVariant};
use funcbreak::io::{
    cidr_panel, load_panel, load_toml, save_panel, to_json_string, write_atomic, write_json,
    Layout, LabeledPanel, PanelSource, RunConfig,
};
use funcbreak::nulldist::{fit_null_spec, LrcSource, NullControls, NullDistribution, NullSpec};
use funcbreak::simulate::experiment::{run_experiment, summarize, write_csv, ExperimentConfig};
use funcbreak::{BreakReport, ClusterModel};

const REPORT_SCHEMA_VERSION: u32 = 1;

#[derive(Parser)]
#[command(name = "funcbreak", version, about = "Break detection in panels of functional time series")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Monte-Carlo experiment: per-replication CSV and a JSON summary.
    Simulate(SimulateArgs),
    /// PE-CUSUM test for a common break.
    Test(DataArgs),
    /// Subjects with a break and their estimated break times.
    Breaks(DataArgs),
    /// Groups of break times chosen by the information criterion.
    Cluster(DataArgs),
    /// Cumulative intraday returns from a price panel.
    Cidr(CidrArgs),
    /// Fitted limit law and its quantiles.
    Null(DataArgs),
}

#[derive(Args)]
struct SimulateArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    reps: Option<usize>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct DataArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value = "wide")]
    layout: Layout,
    /// TOML run configuration; flags below override it.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    variant: Option<PeVariant>,
    /// Fixed c_ξ instead of the root of the leading eigenvalue.
    #[arg(long)]
    c_xi: Option<f64>,
    /// Significance level; repeat for several.
    #[arg(long)]
    alpha: Vec<f64>,
    #[arg(long)]
    draws: Option<usize>,
    #[arg(long)]
    bridge_grid: Option<usize>,
    #[arg(long)]
    rho: Option<f64>,
    #[arg(long)]
    kbar: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Also write the JSON report here.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct CidrArgs {
    #[arg(long)]
    prices: PathBuf,
    #[arg(long, default_value = "wide")]
    layout: Layout,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    out_layout: Option<Layout>,
    /// Remove the identically-zero first grid point.
    #[arg(long)]
    drop_first: bool,
}

impl DataArgs {
    fn run_config(&self) -> Result<RunConfig> {
        let mut cfg: RunConfig = match &self.config {
            Some(p) => load_toml(p)?,
            None => RunConfig::default(),
        };
        if let Some(v) = self.variant {
            cfg.variant = v;
        }
        if let Some(c) = self.c_xi {
            cfg.c_xi = CXi::Fixed(c);
        }
        if !self.alpha.is_empty() {
            cfg.alphas = self.alpha.clone();
        }
        if let Some(d) = self.draws {
            cfg.null.n_draws = d;
        }
        if let Some(m) = self.bridge_grid {
            cfg.null.bridge_grid = m;
        }
        if let Some(s) = self.seed {
            cfg.null.seed = s;
        }
        if self.rho.is_some() {
            cfg.rho = self.rho;
        }
        if self.kbar.is_some() {
            cfg.k_bar = self.kbar;
        }
        if self.out.is_some() {
            cfg.output_dir = self.out.as_ref().and_then(|p| p.parent().map(Path::to_path_buf));
        }
        cfg.validate()?;
        Ok(cfg)
    }

    fn load(&self) -> Result<LabeledPanel> {
        Ok(load_panel(&PanelSource::new(&self.data, self.layout))?)
    }
}

#[derive(Serialize)]
struct Dims {
    n: usize,
    t: usize,
    g: usize,
}

impl Dims {
    fn of(lp: &LabeledPanel) -> Self {
        Self {
            n: lp.panel.n_subjects(),
            t: lp.panel.n_times(),
            g: lp.panel.grid_len(),
        }
    }
}

#[derive(Serialize)]
struct Labels<'a> {
    subjects: &'a [String],
    times: &'a [String],
}

#[derive(Serialize)]
struct Level {
    alpha: f64,
    critical_value: f64,
    reject: bool,
    cusum_reject: bool,
}

#[derive(Serialize)]
struct TestReport<'a> {
    schema_version: u32,
    command: &'static str,
    data: Dims,
    config: &'a RunConfig,
    variant: PeVariant,
    z_nt: f64,
    z_pe: f64,
    z_hat: f64,
    exceedances: usize,
    threshold: f64,
    c_xi: f64,
    lambda1: f64,
    n_bridges: usize,
    p_value: Option<f64>,
    cusum_p_value: Option<f64>,
    levels: Vec<Level>,
    subject_sups: &'a [f64],
    labels: Labels<'a>,
}

#[derive(Serialize)]
struct Resolved {
    variant: PeVariant,
    c_xi: f64,
    lambda1: f64,
    threshold: f64,
}

#[derive(Serialize)]
struct BreaksReport<'a> {
    schema_version: u32,
    command: &'static str,
    data: Dims,
    config: &'a RunConfig,
    resolved: Resolved,
    report: &'a BreakReport,
    labels: Labels<'a>,
}

#[derive(Serialize)]
struct ClusterReport<'a> {
    schema_version: u32,
    command: &'static str,
    data: Dims,
    config: &'a RunConfig,
    resolved: Resolved,
    k_bar: usize,
    rho: f64,
    report: &'a BreakReport,
    model: &'a ClusterModel,
    labels: Labels<'a>,
}

#[derive(Serialize)]
struct Quantile {
    alpha: f64,
    critical_value: f64,
}

#[derive(Serialize)]
struct NullReport<'a> {
    schema_version: u32,
    command: &'static str,
    data: Dims,
    config: &'a RunConfig,
    spec: &'a NullSpec,
    lambda1: f64,
    quantiles: Vec<Quantile>,
}

#[derive(Serialize)]
struct CidrReport<'a> {
    schema_version: u32,
    command: &'static str,
    out: &'a Path,
    layout: Layout,
    drop_first: bool,
    data: Dims,
}

fn emit<T: Serialize>(value: &T, out: Option<&Path>) -> Result<()> {
    let text = to_json_string(value)?;
    if let Some(p) = out {
        write_atomic(p, text.as_bytes())?;
    }
    print!("{text}");
    Ok(())
}

fn resolve_with(lp: &LabeledPanel, cfg: &RunConfig, spec: NullSpec) -> Result<(NullSpec, Resolved)> {
    let lambda1 = spec.leading_eigenvalue()?;
    let c_xi = PeConfig {
        c_xi: cfg.c_xi,
        variant: cfg.variant,
    }
    .resolve_c_xi(Some(lambda1))?;
    let xi = threshold(cfg.variant, c_xi, lp.panel.n_subjects(), lp.panel.n_times())?;
    Ok((
        spec,
        Resolved {
            variant: cfg.variant,
            c_xi,
            lambda1,
            threshold: xi,
        },
    ))
}

/// Fitted null. Step residuals need a break report first, which is taken
/// from a preliminary fit on the cross-sectional mean.
fn fit_spec(lp: &LabeledPanel, cfg: &RunConfig) -> Result<NullSpec> {
    if cfg.null.source == LrcSource::CrossSectionalMean {
        return Ok(fit_null_spec(&lp.panel, &cfg.null, None)?);
    }
    let first = NullControls {
        source: LrcSource::CrossSectionalMean,
        ..cfg.null
    };
    let (_, pre) = resolve_with(lp, cfg, fit_null_spec(&lp.panel, &first, None)?)?;
    let report = break_report(&lp.panel, pre.threshold)?;
    Ok(fit_null_spec(&lp.panel, &cfg.null, Some(&report))?)
}

fn resolve(lp: &LabeledPanel, cfg: &RunConfig) -> Result<(NullSpec, Resolved)> {
    resolve_with(lp, cfg, fit_spec(lp, cfg)?)
}

fn cmd_test(args: &DataArgs) -> Result<()> {
    let cfg = args.run_config()?;
    let lp = args.load()?;
    let (spec, resolved) = resolve(&lp, &cfg)?;
    let lambda1 = resolved.lambda1;
    let n_bridges = spec.n_bridges;
    let null = NullDistribution::simulate(spec)?;
    let pe = PeConfig {
        c_xi: cfg.c_xi,
        variant: cfg.variant,
    };
    let res = pe_cusum_test(&lp.panel, &pe, Some(&null))?;
    let levels = cfg
        .alphas
        .iter()
        .map(|&alpha| {
            let cv = null.critical_value(alpha)?;
            Ok(Level {
                alpha,
                critical_value: cv,
                reject: res.rejects(cv),
                cusum_reject: res.z_nt > cv,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    emit(
        &TestReport {
            schema_version: REPORT_SCHEMA_VERSION,
            command: "test",
            data: Dims::of(&lp),
            config: &cfg,
            variant: res.variant,
            z_nt: res.z_nt,
            z_pe: res.z_pe,
            z_hat: res.z_hat,
            exceedances: res.exceedances,
            threshold: res.threshold,
            c_xi: res.c_xi,
            lambda1,
            n_bridges,
            p_value: res.p_value,
            cusum_p_value: res.cusum_p_value,
            levels,
            subject_sups: &res.subject_sups,
            labels: Labels {
                subjects: &lp.subjects,
                times: &lp.times,
            },
        },
        args.out.as_deref(),
    )
}

fn cmd_breaks(args: &DataArgs) -> Result<()> {
    let cfg = args.run_config()?;
    let lp = args.load()?;
    let (_, resolved) = resolve(&lp, &cfg)?;
    let report = break_report(&lp.panel, resolved.threshold)?;
    emit(
        &BreaksReport {
            schema_version: REPORT_SCHEMA_VERSION,
            command: "breaks",
            data: Dims::of(&lp),
            config: &cfg,
            resolved,
            report: &report,
            labels: Labels {
                subjects: &lp.subjects,
                times: &lp.times,
            },
        },
        args.out.as_deref(),
    )
}

fn cmd_cluster(args: &DataArgs) -> Result<()> {
    let cfg = args.run_config()?;
    let lp = args.load()?;
    let (_, resolved) = resolve(&lp, &cfg)?;
    let report = break_report(&lp.panel, resolved.threshold)?;
    let k_bar = cfg.k_bar.unwrap_or_else(|| default_k_bar(report.with_breaks.len()));
    let rho = cfg
        .rho
        .unwrap_or_else(|| default_rho(lp.panel.n_subjects(), lp.panel.n_times()));
    let model = cluster_breaks(&lp.panel, &report, Some(k_bar), Some(rho))?;
    emit(
        &ClusterReport {
            schema_version: REPORT_SCHEMA_VERSION,
            command: "cluster",
            data: Dims::of(&lp),
            config: &cfg,
            resolved,
            k_bar,
            rho,
            report: &report,
            model: &model,
            labels: Labels {
                subjects: &lp.subjects,
                times: &lp.times,
            },
        },
        args.out.as_deref(),
    )
}

fn cmd_null(args: &DataArgs) -> Result<()> {
    let cfg = args.run_config()?;
    let lp = args.load()?;
    let spec = fit_spec(&lp, &cfg)?;
    let lambda1 = spec.leading_eigenvalue()?;
    let null = NullDistribution::simulate(spec)?;
    let quantiles = cfg
        .alphas
        .iter()
        .map(|&alpha| {
            Ok(Quantile {
                alpha,
                critical_value: null.critical_value(alpha)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    emit(
        &NullReport {
            schema_version: REPORT_SCHEMA_VERSION,
            command: "null",
            data: Dims::of(&lp),
            config: &cfg,
            spec: null.spec(),
            lambda1,
            quantiles,
        },
        args.out.as_deref(),
    )
}

fn cmd_cidr(args: &CidrArgs) -> Result<()> {
    let prices = load_panel(&PanelSource::new(&args.prices, args.layout))?;
    let out = cidr_panel(&prices, args.drop_first)?;
    let layout = args.out_layout.unwrap_or(args.layout);
    save_panel(&out, &args.out, layout)?;
    emit(
        &CidrReport {
            schema_version: REPORT_SCHEMA_VERSION,
            command: "cidr",
            out: &args.out,
            layout,
            drop_first: args.drop_first,
            data: Dims::of(&out),
        },
        None,
    )
}

fn cmd_simulate(args: &SimulateArgs) -> Result<()> {
    let mut cfg: ExperimentConfig = match &args.config {
        Some(p) => load_toml(p)?,
        None => ExperimentConfig::default(),
    };
    if let Some(r) = args.reps {
        cfg.replications = r;
    }
    if let Some(s) = args.seed {
        cfg.dgp.seed = s;
    }
    cfg.validate()?;
    fs::create_dir_all(&args.out).with_context(|| format!("creating {}", args.out.display()))?;
    let records = run_experiment(&cfg)?;
    let mut csv = Vec::new();
    write_csv(&cfg, &records, &mut csv)?;
    write_atomic(&args.out.join("replications.csv"), &csv)?;
    let summary = summarize(&cfg, &records);
    write_json(&summary, &args.out.join("summary.json"))?;
    emit(&summary, None)
}

#[derive(Serialize)]
struct ErrorBody {
    kind: String,
    message: String,
    chain: Vec<String>,
}

#[derive(Serialize)]
struct ErrorReport {
    schema_version: u32,
    error: ErrorBody,
}

fn report_error(err: &anyhow::Error) {
    let kind = err
        .chain()
        .find_map(|e| e.downcast_ref::<funcbreak::Error>())
        .map_or("other", |e| e.kind());
    let body = ErrorReport {
        schema_version: REPORT_SCHEMA_VERSION,
        error: ErrorBody {
            kind: kind.to_string(),
            message: err.to_string(),
            chain: err.chain().skip(1).map(|e| e.to_string()).collect(),
        },
    };
    match serde_json::to_string(&body) {
        Ok(text) => eprintln!("{text}"),
        Err(_) => eprintln!("{err:#}"),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let outcome = match &cli.command {
        Command::Simulate(a) => cmd_simulate(a),
        Command::Test(a) => cmd_test(a),
        Command::Breaks(a) => cmd_breaks(a),
        Command::Cluster(a) => cmd_cluster(a),
        Command::Cidr(a) => cmd_cidr(a),
        Command::Null(a) => cmd_null(a),
    };
    match outcome {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            report_error(&e);
            ExitCode::FAILURE
        }
    }
}
