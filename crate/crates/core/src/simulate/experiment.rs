//! Replication loop: simulate, test, classify, cluster, score.

use std::collections::BTreeSet;
use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::breaks::{cluster_breaks, report_from_objectives};
use crate::cusum::{
    cusum_statistic, exceedances, pe_component, pooled_cusum, subject_objectives, threshold, CXi,
    PeConfig, PeVariant,
};
use crate::error::{invalid, Result};
use crate::io::fmt_f64;
use crate::nulldist::{fit_null_spec, LrcSource, NullControls, NullDistribution, NullSpec};
use crate::rng::mix_seed;
use crate::simulate::dgp::{simulate_panel, DgpConfig, GroundTruth};
use crate::simulate::metrics::{
    metric_msd, metrics_clustering, metrics_tp_f1, subject_msd, Classification,
};

pub const RESULTS_SCHEMA_VERSION: u32 = 1;

const VARIANTS: [PeVariant; 2] = [PeVariant::Xi1, PeVariant::Xi2];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub dgp: DgpConfig,
    pub replications: usize,
    pub alphas: Vec<f64>,
    pub null: NullControls,
    /// Simulate the limit law and record rejections; otherwise only its eigenvalues are fitted.
    pub simulate_null: bool,
    /// Fit the null once, on the first replication's panel, and reuse it.
    pub share_null: bool,
    pub c_xi: CXi,
    pub cluster: bool,
    pub cluster_variant: PeVariant,
    pub k_bar: Option<usize>,
    pub rho: Option<f64>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            dgp: DgpConfig::default(),
            replications: 200,
            alphas: vec![0.01, 0.05, 0.10],
            null: NullControls::default(),
            simulate_null: true,
            share_null: false,
            c_xi: CXi::LeadingEigenRoot,
            cluster: false,
            cluster_variant: PeVariant::Xi2,
            k_bar: None,
            rho: None,
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        self.dgp.validate()?;
        if self.replications == 0 {
            return Err(invalid("need at least one replication"));
        }
        if self.alphas.iter().any(|a| !(*a > 0.0 && *a < 1.0)) {
            return Err(invalid("alphas must lie in (0, 1)"));
        }
        if self.null.source != LrcSource::CrossSectionalMean {
            return Err(invalid(
                "experiments fit the null from the cross-sectional mean",
            ));
        }
        Ok(())
    }

    /// Seed of replication `rep`.
    pub fn replication_seed(&self, rep: usize) -> u64 {
        mix_seed(self.dgp.seed, rep as u64)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VariantOutcome {
    pub variant: PeVariant,
    pub threshold: f64,
    pub exceedances: usize,
    pub z_pe: f64,
    pub z_hat: f64,
    pub p_value: Option<f64>,
    /// One entry per configured alpha; empty without a simulated null.
    pub reject: Vec<bool>,
    pub classification: Classification,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterOutcome {
    pub k_hat: usize,
    pub k_true: usize,
    pub purity: Option<f64>,
    pub nmi: Option<f64>,
    /// Subject-level break estimates against the truth.
    pub msd_pre: Option<f64>,
    /// Pooled group estimates against the true group times, when `k_hat = k_true`.
    pub msd_post: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Outcome {
    pub n_true_breaks: usize,
    pub lambda1: f64,
    pub n_bridges: usize,
    pub c_xi: f64,
    pub z_nt: f64,
    pub cusum_p_value: Option<f64>,
    pub cusum_reject: Vec<bool>,
    pub variants: Vec<VariantOutcome>,
    pub cluster: Option<ClusterOutcome>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplicationRecord {
    pub rep: usize,
    pub seed: u64,
    pub outcome: Option<Outcome>,
    pub error: Option<String>,
}

impl ReplicationRecord {
    pub fn variant(&self, v: PeVariant) -> Option<&VariantOutcome> {
        self.outcome
            .as_ref()
            .and_then(|o| o.variants.iter().find(|x| x.variant == v))
    }
}

fn null_controls(cfg: &ExperimentConfig, seed: u64) -> NullControls {
    NullControls {
        seed: mix_seed(seed, u64::MAX),
        ..cfg.null
    }
}

struct FittedNull {
    spec: NullSpec,
    dist: Option<NullDistribution>,
}

fn fit_null(cfg: &ExperimentConfig, seed: u64) -> Result<FittedNull> {
    let dgp = DgpConfig {
        seed,
        ..cfg.dgp.clone()
    };
    let sim = simulate_panel(&dgp)?;
    let spec = fit_null_spec(&sim.panel, &null_controls(cfg, seed), None)?;
    fitted(cfg, spec)
}

fn fitted(cfg: &ExperimentConfig, spec: NullSpec) -> Result<FittedNull> {
    let dist = if cfg.simulate_null {
        Some(NullDistribution::simulate(spec.clone())?)
    } else {
        None
    };
    Ok(FittedNull { spec, dist })
}

fn run_one(cfg: &ExperimentConfig, seed: u64, shared: Option<&FittedNull>) -> Result<Outcome> {
    let dgp = DgpConfig {
        seed,
        ..cfg.dgp.clone()
    };
    let sim = simulate_panel(&dgp)?;
    let panel = &sim.panel;
    let truth = &sim.truth;
    let owned;
    let null = match shared {
        Some(s) => s,
        None => {
            let spec = fit_null_spec(panel, &null_controls(cfg, seed), None)?;
            owned = fitted(cfg, spec)?;
            &owned
        }
    };
    let lambda1 = null.spec.leading_eigenvalue()?;
    let pe = PeConfig {
        c_xi: cfg.c_xi,
        variant: PeVariant::Xi2,
    };
    let c_xi = pe.resolve_c_xi(Some(lambda1))?;
    let (n, t) = (panel.n_subjects(), panel.n_times());

    let z_nt = cusum_statistic(&pooled_cusum(panel)?);
    let objectives = subject_objectives(panel)?;
    let sups: Vec<f64> = objectives
        .iter()
        .map(|o| o.iter().copied().fold(0.0, f64::max))
        .collect();

    let critical: Vec<f64> = match &null.dist {
        Some(d) => cfg
            .alphas
            .iter()
            .map(|&a| d.critical_value(a))
            .collect::<Result<_>>()?,
        None => Vec::new(),
    };

    let mut variants = Vec::with_capacity(VARIANTS.len());
    for v in VARIANTS {
        let xi = threshold(v, c_xi, n, t)?;
        let z_pe = pe_component(&sups, xi, n, t);
        let z_hat = z_nt + z_pe;
        let estimated: BTreeSet<usize> = (0..n).filter(|&i| sups[i] >= xi).collect();
        variants.push(VariantOutcome {
            variant: v,
            threshold: xi,
            exceedances: exceedances(&sups, xi),
            z_pe,
            z_hat,
            p_value: null.dist.as_ref().map(|d| d.p_value(z_hat)),
            reject: critical.iter().map(|&c| z_hat > c).collect(),
            classification: metrics_tp_f1(&estimated, &truth.break_set, n)?,
        });
    }

    let cluster = if cfg.cluster {
        let xi = threshold(cfg.cluster_variant, c_xi, n, t)?;
        let report = report_from_objectives(&objectives, xi)?;
        Some(cluster_outcome(cfg, panel, &report, truth)?)
    } else {
        None
    };

    Ok(Outcome {
        n_true_breaks: truth.break_set.len(),
        lambda1,
        n_bridges: null.spec.n_bridges,
        c_xi,
        z_nt,
        cusum_p_value: null.dist.as_ref().map(|d| d.p_value(z_nt)),
        cusum_reject: critical.iter().map(|&c| z_nt > c).collect(),
        variants,
        cluster,
    })
}

fn cluster_outcome(
    cfg: &ExperimentConfig,
    panel: &crate::panel::FunctionalPanel,
    report: &crate::breaks::BreakReport,
    truth: &GroundTruth,
) -> Result<ClusterOutcome> {
    let true_groups = truth.partition();
    let k_true = true_groups.len();
    if report.with_breaks.is_empty() {
        return Ok(ClusterOutcome {
            k_hat: 0,
            k_true,
            purity: None,
            nmi: None,
            msd_pre: None,
            msd_post: None,
        });
    }
    let model = cluster_breaks(panel, report, cfg.k_bar, cfg.rho)?;
    let true_members: Vec<Vec<usize>> = true_groups.iter().map(|(_, m)| m.clone()).collect();
    let scores = metrics_clustering(&model.members, &true_members).ok();
    let true_b: Vec<usize> = true_groups.iter().map(|(b, _)| *b).collect();
    Ok(ClusterOutcome {
        k_hat: model.k,
        k_true,
        purity: scores.map(|s| s.purity),
        nmi: scores.map(|s| s.nmi),
        msd_pre: subject_msd(&report.tau_hat, &truth.tau).ok(),
        msd_post: metric_msd(&model.pooled_b, &true_b).ok(),
    })
}

/// Runs every replication; failures are recorded, not dropped.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<Vec<ReplicationRecord>> {
    cfg.validate()?;
    let shared = if cfg.share_null {
        Some(fit_null(cfg, cfg.replication_seed(0))?)
    } else {
        None
    };
    Ok((0..cfg.replications)
        .into_par_iter()
        .map(|rep| {
            let seed = cfg.replication_seed(rep);
            match run_one(cfg, seed, shared.as_ref()) {
                Ok(o) => ReplicationRecord {
                    rep,
                    seed,
                    outcome: Some(o),
                    error: None,
                },
                Err(e) => ReplicationRecord {
                    rep,
                    seed,
                    outcome: None,
                    error: Some(e.to_string()),
                },
            }
        })
        .collect())
}

fn opt_f64(x: Option<f64>) -> String {
    x.map(fmt_f64).unwrap_or_default()
}

fn flag(b: bool) -> String {
    u8::from(b).to_string()
}

fn alpha_label(a: f64) -> String {
    format!("{a}")
}

pub fn csv_header(cfg: &ExperimentConfig) -> Vec<String> {
    let mut h: Vec<String> = [
        "rep", "seed", "error", "n_true_breaks", "lambda1", "n_bridges", "c_xi", "z_nt",
        "cusum_p_value",
    ]
    .iter()
    .map(|s| s.to_string())
    .collect();
    for a in &cfg.alphas {
        h.push(format!("reject_cusum_{}", alpha_label(*a)));
    }
    for v in VARIANTS {
        let p = v.name();
        for col in [
            "threshold", "exceedances", "z_pe", "z_hat", "p_value", "tp", "fp", "fn", "tn",
            "tp_rate", "f1",
        ] {
            h.push(format!("{p}_{col}"));
        }
        for a in &cfg.alphas {
            h.push(format!("reject_{p}_{}", alpha_label(*a)));
        }
    }
    for col in ["k_hat", "k_true", "purity", "nmi", "msd_pre", "msd_post"] {
        h.push(col.to_string());
    }
    h
}

pub fn csv_row(cfg: &ExperimentConfig, r: &ReplicationRecord) -> Vec<String> {
    let width = csv_header(cfg).len();
    let mut row = vec![
        r.rep.to_string(),
        r.seed.to_string(),
        r.error.clone().unwrap_or_default(),
    ];
    let Some(o) = &r.outcome else {
        row.resize(width, String::new());
        return row;
    };
    row.extend([
        o.n_true_breaks.to_string(),
        fmt_f64(o.lambda1),
        o.n_bridges.to_string(),
        fmt_f64(o.c_xi),
        fmt_f64(o.z_nt),
        opt_f64(o.cusum_p_value),
    ]);
    for ix in 0..cfg.alphas.len() {
        row.push(o.cusum_reject.get(ix).map(|&b| flag(b)).unwrap_or_default());
    }
    for v in &o.variants {
        let c = &v.classification;
        row.extend([
            fmt_f64(v.threshold),
            v.exceedances.to_string(),
            fmt_f64(v.z_pe),
            fmt_f64(v.z_hat),
            opt_f64(v.p_value),
            c.tp.to_string(),
            c.fp.to_string(),
            c.fn_.to_string(),
            c.tn.to_string(),
            fmt_f64(c.tp_rate),
            fmt_f64(c.f1),
        ]);
        for ix in 0..cfg.alphas.len() {
            row.push(v.reject.get(ix).map(|&b| flag(b)).unwrap_or_default());
        }
    }
    match &o.cluster {
        Some(c) => row.extend([
            c.k_hat.to_string(),
            c.k_true.to_string(),
            opt_f64(c.purity),
            opt_f64(c.nmi),
            opt_f64(c.msd_pre),
            opt_f64(c.msd_post),
        ]),
        None => row.resize(width, String::new()),
    }
    row
}

/// One row per replication, header first.
pub fn write_csv<W: Write>(cfg: &ExperimentConfig, records: &[ReplicationRecord], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(csv_header(cfg))?;
    for r in records {
        w.write_record(csv_row(cfg, r))?;
    }
    w.flush().map_err(|e| crate::error::Error::Io {
        path: "<csv>".into(),
        source: e,
    })?;
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RejectionRow {
    /// `cusum`, `xi1` or `xi2`.
    pub test: String,
    pub alpha: f64,
    pub rate: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassificationRow {
    pub variant: PeVariant,
    pub mean_tp_rate: f64,
    pub mean_f1: f64,
    pub mean_exceedances: f64,
    /// Share of replications with a nonzero power-enhancement component.
    pub nonzero_pe_rate: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterSummary {
    pub variant: PeVariant,
    /// Share of replications with `K̂` equal to the true group count.
    pub p_correct_k: f64,
    pub n_correct_k: usize,
    pub mean_purity: Option<f64>,
    pub mean_nmi: Option<f64>,
    /// Means over replications with the correct `K̂`.
    pub msd_pre_given_k: Option<f64>,
    pub msd_post_given_k: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentSummary {
    pub schema_version: u32,
    pub snr: f64,
    pub sdr: f64,
    pub n: usize,
    pub t: usize,
    pub replications: usize,
    pub failed: usize,
    pub rejection: Vec<RejectionRow>,
    pub classification: Vec<ClassificationRow>,
    pub clustering: Option<ClusterSummary>,
    pub config: ExperimentConfig,
}

fn mean(xs: impl Iterator<Item = f64>) -> Option<f64> {
    let (mut s, mut k) = (0.0, 0usize);
    for x in xs {
        s += x;
        k += 1;
    }
    (k > 0).then(|| s / k as f64)
}

pub fn summarize(cfg: &ExperimentConfig, records: &[ReplicationRecord]) -> ExperimentSummary {
    let ok: Vec<&Outcome> = records.iter().filter_map(|r| r.outcome.as_ref()).collect();
    let n_ok = ok.len().max(1) as f64;
    let mut rejection = Vec::new();
    if cfg.simulate_null {
        for (ix, &alpha) in cfg.alphas.iter().enumerate() {
            let rate = |f: &dyn Fn(&Outcome) -> bool| ok.iter().filter(|o| f(o)).count() as f64 / n_ok;
            rejection.push(RejectionRow {
                test: "cusum".into(),
                alpha,
                rate: rate(&|o| o.cusum_reject[ix]),
            });
            for (vx, v) in VARIANTS.iter().enumerate() {
                rejection.push(RejectionRow {
                    test: v.name().into(),
                    alpha,
                    rate: rate(&|o| o.variants[vx].reject[ix]),
                });
            }
        }
    }
    let classification = VARIANTS
        .iter()
        .enumerate()
        .map(|(vx, &variant)| ClassificationRow {
            variant,
            mean_tp_rate: mean(ok.iter().map(|o| o.variants[vx].classification.tp_rate)).unwrap_or(f64::NAN),
            mean_f1: mean(ok.iter().map(|o| o.variants[vx].classification.f1)).unwrap_or(f64::NAN),
            mean_exceedances: mean(ok.iter().map(|o| o.variants[vx].exceedances as f64)).unwrap_or(f64::NAN),
            nonzero_pe_rate: ok.iter().filter(|o| o.variants[vx].z_pe > 0.0).count() as f64 / n_ok,
        })
        .collect();
    let clustering = cfg.cluster.then(|| {
        let cl: Vec<&ClusterOutcome> = ok.iter().filter_map(|o| o.cluster.as_ref()).collect();
        let correct: Vec<&&ClusterOutcome> = cl.iter().filter(|c| c.k_hat == c.k_true).collect();
        ClusterSummary {
            variant: cfg.cluster_variant,
            p_correct_k: correct.len() as f64 / n_ok,
            n_correct_k: correct.len(),
            mean_purity: mean(cl.iter().filter_map(|c| c.purity)),
            mean_nmi: mean(cl.iter().filter_map(|c| c.nmi)),
            msd_pre_given_k: mean(correct.iter().filter_map(|c| c.msd_pre)),
            msd_post_given_k: mean(correct.iter().filter_map(|c| c.msd_post)),
        }
    });
    ExperimentSummary {
        schema_version: RESULTS_SCHEMA_VERSION,
        snr: cfg.dgp.snr,
        sdr: cfg.dgp.sdr,
        n: cfg.dgp.n,
        t: cfg.dgp.t,
        replications: records.len(),
        failed: records.len() - ok.len(),
        rejection,
        classification,
        clustering,
        config: cfg.clone(),
    }
}
