//! Experiment orchestration: seeded Monte Carlo over scenario draws and
//! coherence blocks, estimator comparison, and CSV emission.
//!
//! Scenarios run in parallel; every random draw comes from a stream derived
//! from (seed, context, scenario, block), and per-scenario results are
//! merged in scenario order, so the output bytes are identical for any
//! thread count.
//!
//! Spectral efficiency is reported three ways for the model-aided
//! estimator: the per-block switching rule as written (`model_aided_literal`),
//! and under `model_aided` the larger of the always-blind and always-fallback
//! evaluations, which is how the switching point is chosen when the goal is
//! rate rather than estimation error.

use crate::downlink::{simulate_block, SymbolModel};
use crate::estimators::{
    long_term_constants, model_aided_estimate, neural_estimate, oracle_estimate, Branch,
    EstimatorError,
};
use crate::metrics::{
    se_equalized, CdfSummary, MetricsError, MomentAccumulator, PerfectCsiAccumulator,
};
use crate::mlp::{load_model, MlpModel};
use crate::precoding::{
    effective_gains, mr_instant_precoders, mr_precoders, zf_precoders, Scheme,
};
use crate::rng::{derive_rng, stream};
use crate::scenario::{build_scenario, NetworkConfig, NetworkConfigSpec, ScenarioError};
use crate::uplink::{precompute_statistics, run_uplink_training};
use rayon::prelude::*;
use serde::Deserialize;
use std::fmt;
use std::path::{Path, PathBuf};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error("invalid experiment spec: {0}")]
    SpecInvalid(String),
    #[error("neural estimator requested but no model is loaded: {0}")]
    ModelNotLoaded(String),
    #[error(transparent)]
    Scenario(#[from] ScenarioError),
    #[error(transparent)]
    Estimator(#[from] EstimatorError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("result file is malformed: {0}")]
    MalformedResults(String),
    #[error("{failed} of {total} scenarios failed (first error: {message}); partial results kept")]
    Partial {
        failed: usize,
        total: usize,
        message: String,
        records: Vec<UserRecord>,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EstimatorKind {
    Hardening,
    ModelAided,
    Oracle,
    Neural,
}

impl fmt::Display for EstimatorKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            EstimatorKind::Hardening => write!(f, "hardening"),
            EstimatorKind::ModelAided => write!(f, "model_aided"),
            EstimatorKind::Oracle => write!(f, "oracle"),
            EstimatorKind::Neural => write!(f, "neural"),
        }
    }
}

/// A fully resolved experiment description.
#[derive(Debug, Clone)]
pub struct ExperimentSpec {
    pub network: NetworkConfig,
    pub scheme: Scheme,
    pub estimators: Vec<EstimatorKind>,
    pub n_scenarios: usize,
    pub n_blocks: usize,
    pub seed: u64,
    /// switching threshold = theta_factor * interference constant (>= 1).
    pub theta_factor: f64,
    pub model_path: Option<PathBuf>,
}

impl ExperimentSpec {
    pub fn validate(&self) -> Result<(), ExperimentError> {
        self.network.validate()?;
        if self.n_scenarios == 0 || self.n_blocks == 0 {
            return Err(ExperimentError::SpecInvalid(
                "scenario and block counts must be at least 1".into(),
            ));
        }
        if self.theta_factor < 1.0 {
            return Err(ExperimentError::SpecInvalid(format!(
                "theta_factor must be >= 1, got {}",
                self.theta_factor
            )));
        }
        if self.estimators.is_empty() {
            return Err(ExperimentError::SpecInvalid(
                "at least one estimator must be requested".into(),
            ));
        }
        if self.estimators.contains(&EstimatorKind::Neural) && self.model_path.is_none() {
            return Err(ExperimentError::ModelNotLoaded(
                "set model_path in the experiment spec".into(),
            ));
        }
        Ok(())
    }
}

fn default_scheme() -> Scheme {
    Scheme::Mr
}
fn default_estimators() -> Vec<EstimatorKind> {
    vec![
        EstimatorKind::Hardening,
        EstimatorKind::ModelAided,
        EstimatorKind::Oracle,
    ]
}
fn default_n_scenarios() -> usize {
    50
}
fn default_n_blocks() -> usize {
    200
}
fn default_theta_factor() -> f64 {
    1.0
}

/// TOML form of an experiment: a `[network]` table plus an `[experiment]`
/// table.
#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentSpecFile {
    #[serde(default)]
    pub network: NetworkConfigSpec,
    #[serde(default)]
    pub experiment: ExperimentTable,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentTable {
    #[serde(default = "default_scheme")]
    pub scheme: Scheme,
    #[serde(default = "default_estimators")]
    pub estimators: Vec<EstimatorKind>,
    #[serde(default = "default_n_scenarios")]
    pub n_scenarios: usize,
    #[serde(default = "default_n_blocks")]
    pub n_blocks: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_theta_factor")]
    pub theta_factor: f64,
    #[serde(default)]
    pub model_path: Option<PathBuf>,
}

impl Default for ExperimentTable {
    fn default() -> Self {
        ExperimentTable {
            scheme: default_scheme(),
            estimators: default_estimators(),
            n_scenarios: default_n_scenarios(),
            n_blocks: default_n_blocks(),
            seed: 0,
            theta_factor: default_theta_factor(),
            model_path: None,
        }
    }
}

impl ExperimentSpecFile {
    pub fn parse(text: &str) -> Result<Self, ExperimentError> {
        toml::from_str(text).map_err(|e| ExperimentError::SpecInvalid(e.to_string()))
    }

    pub fn resolve(&self) -> Result<ExperimentSpec, ExperimentError> {
        let spec = ExperimentSpec {
            network: self.network.resolve()?,
            scheme: self.experiment.scheme,
            estimators: self.experiment.estimators.clone(),
            n_scenarios: self.experiment.n_scenarios,
            n_blocks: self.experiment.n_blocks,
            seed: self.experiment.seed,
            theta_factor: self.experiment.theta_factor,
            model_path: self.experiment.model_path.clone(),
        };
        spec.validate()?;
        Ok(spec)
    }
}

/// One output row: a (scenario, user, estimator) triple with its metrics.
#[derive(Debug, Clone, PartialEq)]
pub struct UserRecord {
    pub scenario_id: usize,
    pub cell: usize,
    pub user: usize,
    pub estimator: String,
    pub nmse: f64,
    pub se_bits: f64,
    /// fraction of blocks on the blind/data-driven branch (0 for pure
    /// statistics, 1 for always-on estimators).
    pub branch_fraction_blind: f64,
}

#[derive(Debug)]
pub struct ExperimentResult {
    pub records: Vec<UserRecord>,
    pub seed: u64,
    pub n_scenarios: usize,
    pub n_blocks: usize,
    pub runtime_secs: f64,
}

impl ExperimentResult {
    /// CDF of one metric for one estimator across (scenario, user) records.
    pub fn cdf(&self, estimator: &str, metric: Metric) -> Result<CdfSummary, MetricsError> {
        cdf_of(&self.records, estimator, metric)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Metric {
    Nmse,
    SeBits,
}

pub fn cdf_of(
    records: &[UserRecord],
    estimator: &str,
    metric: Metric,
) -> Result<CdfSummary, MetricsError> {
    let samples: Vec<f64> = records
        .iter()
        .filter(|r| r.estimator == estimator)
        .map(|r| match metric {
            Metric::Nmse => r.nmse,
            Metric::SeBits => r.se_bits,
        })
        .collect();
    CdfSummary::from_samples(samples)
}

/// Estimator names present in a record set, in first-seen order.
pub fn estimator_names(records: &[UserRecord]) -> Vec<String> {
    let mut names: Vec<String> = Vec::new();
    for r in records {
        if !names.contains(&r.estimator) {
            names.push(r.estimator.clone());
        }
    }
    names
}

/// Run the full experiment: for every scenario draw, precompute long-term
/// constants, simulate blocks, run every requested estimator, and emit one
/// record per (scenario, user, estimator).
pub fn run_experiment(spec: &ExperimentSpec) -> Result<ExperimentResult, ExperimentError> {
    spec.validate()?;
    let start = std::time::Instant::now();
    let model = match (&spec.model_path, spec.estimators.contains(&EstimatorKind::Neural)) {
        (Some(path), true) => Some(
            load_model(path).map_err(|e| ExperimentError::ModelNotLoaded(e.to_string()))?,
        ),
        _ => None,
    };

    let outcomes: Vec<Result<Vec<UserRecord>, String>> = (0..spec.n_scenarios)
        .into_par_iter()
        .map(|sidx| scenario_worker(spec, model.as_ref(), sidx).map_err(|e| e.to_string()))
        .collect();

    let total = outcomes.len();
    let mut records = Vec::new();
    let mut failed = 0usize;
    let mut first_error = None;
    for outcome in outcomes {
        match outcome {
            Ok(mut r) => records.append(&mut r),
            Err(e) => {
                failed += 1;
                first_error.get_or_insert(e);
            }
        }
    }
    if failed > 0 {
        return Err(ExperimentError::Partial {
            failed,
            total,
            message: first_error.unwrap_or_default(),
            records,
        });
    }
    Ok(ExperimentResult {
        records,
        seed: spec.seed,
        n_scenarios: spec.n_scenarios,
        n_blocks: spec.n_blocks,
        runtime_secs: start.elapsed().as_secs_f64(),
    })
}

/// Near-zero equalizer guard for the inverse-power moment.
fn equalizer_guard(rho_dl: f64, beta_serving: f64) -> f64 {
    1e-12 * (rho_dl * beta_serving).sqrt()
}

fn scenario_worker(
    spec: &ExperimentSpec,
    model: Option<&MlpModel>,
    sidx: usize,
) -> Result<Vec<UserRecord>, ExperimentError> {
    let cfg = &spec.network;
    let seed = spec.seed;
    let mut srng = derive_rng(seed, &[stream::SCENARIO, sidx as u64]);
    let s = build_scenario(cfg, &mut srng)?;
    let stats = precompute_statistics(&s).map_err(EstimatorError::from)?;
    let consts = long_term_constants(&s, &stats, spec.scheme, seed, sidx as u64)?;
    let n_pairs = s.num_pairs();
    let etas = s.etas().to_vec();
    let sigma_dl = cfg.noise_power_dl_w;
    let rho = cfg.downlink_max_power_w;
    let tau_d = cfg.tau_d();

    let theta: Vec<f64> = consts.t.t.iter().map(|t| t * spec.theta_factor).collect();
    let guards: Vec<f64> = (0..n_pairs)
        .map(|p| {
            let (cell, user) = (p / cfg.users_per_cell, p % cfg.users_per_cell);
            equalizer_guard(rho, s.beta(cell, cell, user))
        })
        .collect();

    let want_neural = spec.estimators.contains(&EstimatorKind::Neural);
    let want_oracle = spec.estimators.contains(&EstimatorKind::Oracle);

    // per-user accumulators
    let mut denom = vec![0.0f64; n_pairs];
    let mut nmse_hardening = vec![0.0f64; n_pairs];
    let mut nmse_model = vec![0.0f64; n_pairs];
    let mut nmse_oracle = vec![0.0f64; n_pairs];
    let mut nmse_neural = vec![0.0f64; n_pairs];
    let mut blind_blocks = vec![0u64; n_pairs];
    let mut oracle_blind_blocks = vec![0u64; n_pairs];
    let mut mom_hardening: Vec<MomentAccumulator> = (0..n_pairs)
        .map(|p| MomentAccumulator::new(n_pairs, p, guards[p]))
        .collect();
    let mut mom_blind = mom_hardening.clone();
    let mut mom_literal = mom_hardening.clone();
    let mut mom_oracle = mom_hardening.clone();
    let mut mom_neural = mom_hardening.clone();
    let mut perfect: Vec<PerfectCsiAccumulator> =
        (0..n_pairs).map(|_| PerfectCsiAccumulator::new()).collect();

    for b in 0..spec.n_blocks {
        let mut brng = derive_rng(seed, &[stream::BLOCK, sidx as u64, b as u64]);
        let est = run_uplink_training(&s, &stats, &mut brng).map_err(EstimatorError::from)?;
        let w = match spec.scheme {
            Scheme::Mr => mr_precoders(&est, &stats, &s),
            Scheme::MrInstant => mr_instant_precoders(&est, &s),
            Scheme::Zf => zf_precoders(&est, &s, consts.zf_norms.as_ref().unwrap()),
        }
        .map_err(EstimatorError::from)?;
        let gains = effective_gains(&est, &w, &s, rho);
        let obs = simulate_block(&gains, &etas, sigma_dl, tau_d, SymbolModel::Gaussian, &mut brng);

        for pair in 0..n_pairs {
            let (cell, user) = (pair / cfg.users_per_cell, pair % cfg.users_per_cell);
            let row = gains.row_by_pair(pair);
            let alpha_self = row[pair];
            denom[pair] += alpha_self.norm_sqr();
            let mean = consts.hardening_mean[pair];

            // hardening: the long-term mean as both estimate and equalizer
            nmse_hardening[pair] += err_sq(mean, alpha_self);
            mom_hardening[pair].add(row, mean);

            // model-aided, as written: switch on the full-block average
            let est_m =
                model_aided_estimate(obs.xi[pair], consts.t.t[pair], etas[pair], theta[pair], mean);
            nmse_model[pair] += err_sq(est_m.value, alpha_self);
            if est_m.branch == Branch::Blind {
                blind_blocks[pair] += 1;
            }
            // equalizers are built from the leave-one-out average
            let est_loo = model_aided_estimate(
                obs.xi_loo[pair],
                consts.t.t[pair],
                etas[pair],
                theta[pair],
                mean,
            );
            mom_literal[pair].add(row, est_loo.value);
            let blind_rad = (obs.xi_loo[pair] - consts.t.t[pair]) / etas[pair];
            mom_blind[pair].add(row, blind_rad.max(0.0).sqrt());

            if want_oracle {
                let est_o = oracle_estimate(
                    &gains,
                    &etas,
                    sigma_dl,
                    consts.t.t[pair],
                    theta[pair],
                    mean,
                    pair,
                );
                nmse_oracle[pair] += err_sq(est_o.value, alpha_self);
                if est_o.branch == Branch::Oracle {
                    oracle_blind_blocks[pair] += 1;
                }
                mom_oracle[pair].add(row, est_o.value);
            }

            if want_neural {
                let features = [
                    obs.xi_loo[pair],
                    consts.t.t[pair],
                    etas[pair] * rho * s.beta(cell, cell, user),
                ];
                let est_n = neural_estimate(model.expect("validated"), &features, etas[pair])
                    .map_err(EstimatorError::from)?;
                nmse_neural[pair] += err_sq(est_n.value, alpha_self);
                mom_neural[pair].add(row, est_n.value);
            }

            perfect[pair].add(row, &etas, pair, sigma_dl);
        }
    }

    let tau_p = cfg.tau_p();
    let tau_c = cfg.coherence_length;
    let se_of = |acc: &MomentAccumulator, pair: usize| -> Result<f64, MetricsError> {
        se_equalized(&acc.finalize()?, &etas, pair, sigma_dl, tau_p, tau_c)
    };

    let mut records = Vec::new();
    for pair in 0..n_pairs {
        let (cell, user) = (pair / cfg.users_per_cell, pair % cfg.users_per_cell);
        let nb = spec.n_blocks as f64;
        let mk = |estimator: &str, nmse: f64, se: f64, frac: f64| UserRecord {
            scenario_id: sidx,
            cell,
            user,
            estimator: estimator.to_string(),
            nmse,
            se_bits: se,
            branch_fraction_blind: frac,
        };
        let se_hardening = se_of(&mom_hardening[pair], pair)
            .map_err(|e| ExperimentError::SpecInvalid(e.to_string()))?;
        for kind in &spec.estimators {
            match kind {
                EstimatorKind::Hardening => {
                    records.push(mk("hardening", nmse_hardening[pair] / denom[pair], se_hardening, 0.0));
                }
                EstimatorKind::ModelAided => {
                    // rate-maximizing branch choice: the better of always-blind
                    // and always-fallback; the literal switching rule is
                    // reported alongside
                    let se_blind = se_of(&mom_blind[pair], pair).ok();
                    let se_selected = se_blind.map_or(se_hardening, |b| b.max(se_hardening));
                    let frac = blind_blocks[pair] as f64 / nb;
                    let nmse = nmse_model[pair] / denom[pair];
                    records.push(mk("model_aided", nmse, se_selected, frac));
                    let se_lit = se_of(&mom_literal[pair], pair)
                        .map_err(|e| ExperimentError::SpecInvalid(e.to_string()))?;
                    records.push(mk("model_aided_literal", nmse, se_lit, frac));
                }
                EstimatorKind::Oracle => {
                    let se = se_of(&mom_oracle[pair], pair)
                        .map_err(|e| ExperimentError::SpecInvalid(e.to_string()))?;
                    records.push(mk(
                        "oracle",
                        nmse_oracle[pair] / denom[pair],
                        se,
                        oracle_blind_blocks[pair] as f64 / nb,
                    ));
                }
                EstimatorKind::Neural => {
                    let se = se_of(&mom_neural[pair], pair)
                        .map_err(|e| ExperimentError::SpecInvalid(e.to_string()))?;
                    records.push(mk("neural", nmse_neural[pair] / denom[pair], se, 1.0));
                }
            }
        }
        let se_csi = perfect[pair]
            .finalize(tau_p, tau_c)
            .map_err(|e| ExperimentError::SpecInvalid(e.to_string()))?;
        records.push(mk("perfect_csi", 0.0, se_csi, 1.0));
    }
    Ok(records)
}

#[inline]
fn err_sq(estimate: f64, alpha: num_complex::Complex64) -> f64 {
    (num_complex::Complex64::new(estimate, 0.0) - alpha).norm_sqr()
}

pub const CSV_SCHEMA: &str = "# mimosim results v1";
pub const CSV_HEADER: &str = "scenario_id,cell,user,estimator,nmse,se_bits,branch_fraction_blind";

/// Write records as CSV (the schema comment line, the header row, then one
/// row per record with fixed-precision floats for byte-stable output).
pub fn write_csv(records: &[UserRecord], path: &Path) -> Result<(), ExperimentError> {
    let mut out = String::with_capacity(records.len() * 64 + 64);
    out.push_str(CSV_SCHEMA);
    out.push('\n');
    out.push_str(CSV_HEADER);
    out.push('\n');
    for r in records {
        out.push_str(&format!(
            "{},{},{},{},{:.10e},{:.10e},{:.6}\n",
            r.scenario_id, r.cell, r.user, r.estimator, r.nmse, r.se_bits, r.branch_fraction_blind
        ));
    }
    std::fs::write(path, out)?;
    Ok(())
}

/// Append a failure marker to a (partial) result file.
pub fn append_failure_marker(path: &Path, message: &str) -> Result<(), ExperimentError> {
    use std::io::Write;
    let mut f = std::fs::OpenOptions::new().append(true).open(path)?;
    writeln!(f, "# FAILED: {}", message.replace('\n', " "))?;
    Ok(())
}

/// Read a CSV written by [`write_csv`].
pub fn read_csv(path: &Path) -> Result<Vec<UserRecord>, ExperimentError> {
    let text = std::fs::read_to_string(path)?;
    let mut lines = text.lines();
    match lines.next() {
        Some(l) if l == CSV_SCHEMA => {}
        other => {
            return Err(ExperimentError::MalformedResults(format!(
                "unexpected schema line: {other:?}"
            )))
        }
    }
    match lines.next() {
        Some(l) if l == CSV_HEADER => {}
        other => {
            return Err(ExperimentError::MalformedResults(format!(
                "unexpected header line: {other:?}"
            )))
        }
    }
    let mut records = Vec::new();
    for (lineno, line) in lines.enumerate() {
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let cols: Vec<&str> = line.split(',').collect();
        if cols.len() != 7 {
            return Err(ExperimentError::MalformedResults(format!(
                "line {}: expected 7 columns",
                lineno + 3
            )));
        }
        let bad = |what: &str| ExperimentError::MalformedResults(format!("line {}: {what}", lineno + 3));
        records.push(UserRecord {
            scenario_id: cols[0].parse().map_err(|_| bad("scenario_id"))?,
            cell: cols[1].parse().map_err(|_| bad("cell"))?,
            user: cols[2].parse().map_err(|_| bad("user"))?,
            estimator: cols[3].to_string(),
            nmse: cols[4].parse().map_err(|_| bad("nmse"))?,
            se_bits: cols[5].parse().map_err(|_| bad("se_bits"))?,
            branch_fraction_blind: cols[6].parse().map_err(|_| bad("branch_fraction"))?,
        });
    }
    Ok(records)
}

/// Percentile table (5/25/50/75/95) per estimator for one metric.
pub fn percentile_table(
    records: &[UserRecord],
    metric: Metric,
) -> Vec<(String, [f64; 5])> {
    const PS: [f64; 5] = [0.05, 0.25, 0.5, 0.75, 0.95];
    let mut table = Vec::new();
    for name in estimator_names(records) {
        if let Ok(cdf) = cdf_of(records, &name, metric) {
            let mut row = [0.0; 5];
            for (i, p) in PS.iter().enumerate() {
                row[i] = cdf.percentile(*p);
            }
            table.push((name, row));
        }
    }
    table
}
