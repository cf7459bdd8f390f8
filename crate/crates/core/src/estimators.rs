//! Estimators of the effective downlink channel gain.
//!
//! Four families: the hardening mean (long-term average used as-is), the
//! model-aided blind estimator (inverts the received-power average after
//! subtracting a closed-form or Monte Carlo interference constant, with a
//! switching threshold and the mean as fallback), the asymptotic oracle
//! (same inversion applied to the infinite-block limit of the power
//! average), and a trained network (inference here, training in [`crate::mlp`]).
//!
//! The closed-form interference constants are exact expectations of the
//! interfering gain powers. The coherent pilot-contamination trace term is
//! evaluated with the interfering cell's despread covariance; cross-checks
//! against the Monte Carlo estimate confirm that using the serving cell's
//! covariance there is biased.

use crate::linalg::{hermitian_solve, trace_product, LinalgError};
use crate::mlp::{MlpError, MlpModel};
use crate::precoding::{
    effective_gains, mr_instant_precoders, mr_precoders, zf_norm_constants, zf_precoders,
    PrecodingError, Scheme, ZfNormMode, ZfNorms,
};
use crate::rng::{derive_rng, parallel_batches, stream};
use crate::scenario::{build_scenario, FadingMode, NetworkConfig, Scenario, ScenarioError};
use crate::uplink::{precompute_statistics, run_uplink_training, UplinkError, UplinkStatistics};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum EstimatorError {
    #[error("this constant requires {expected} fading statistics")]
    WrongMode { expected: FadingMode },
    #[error("zero-forcing needs strictly more antennas ({m}) than users ({k})")]
    InsufficientAntennas { m: usize, k: usize },
    #[error("no closed form for scheme {0}; use the Monte Carlo constant")]
    NoClosedForm(Scheme),
    #[error(transparent)]
    Uplink(#[from] UplinkError),
    #[error(transparent)]
    Precoding(#[from] PrecodingError),
    #[error(transparent)]
    Linalg(#[from] LinalgError),
    #[error(transparent)]
    Scenario(#[from] ScenarioError),
    #[error(transparent)]
    Mlp(#[from] MlpError),
}

/// How an interference constant was obtained.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TMethod {
    MrCorrelated,
    MrIid,
    ZfIid,
    MonteCarlo,
}

/// Expected interference-plus-noise power per user: the constant subtracted
/// from the received-power average by the blind estimator.
#[derive(Debug, Clone)]
pub struct InterferenceConstant {
    /// per user pair (cell-major).
    pub t: Vec<f64>,
    pub method: TMethod,
    /// standard errors when Monte Carlo estimated.
    pub std_err: Option<Vec<f64>>,
}

/// Which branch produced a gain estimate.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Branch {
    Blind,
    FallbackMean,
    Oracle,
    Neural,
}

#[derive(Debug, Clone, Copy)]
pub struct GainEstimate {
    pub value: f64,
    pub branch: Branch,
}

/// Long-term mean of the desired effective gain. For MR this is
/// sqrt(rho tr Phi); for ZF, sqrt(rho / E||z||^2) with the cached norm
/// constant. The instantaneous-norm MR variant has no closed form.
pub fn hardening_mean(
    scheme: Scheme,
    s: &Scenario,
    stats: &UplinkStatistics,
    zf_norms: Option<&ZfNorms>,
    cell: usize,
    user: usize,
) -> Result<f64, EstimatorError> {
    let rho = s.cfg.downlink_max_power_w;
    match scheme {
        Scheme::Mr => Ok((rho * stats.phi_trace(cell, user)).sqrt()),
        Scheme::Zf => {
            let norms = zf_norms.ok_or(EstimatorError::NoClosedForm(Scheme::Zf))?;
            Ok((rho / norms.e_norm_sq(cell, user)).sqrt())
        }
        Scheme::MrInstant => Err(EstimatorError::NoClosedForm(Scheme::MrInstant)),
    }
}

/// Monte Carlo estimate of the mean desired gain over independent estimate
/// draws (error components average out; only the estimate matters).
pub fn mc_hardening_mean(
    s: &Scenario,
    stats: &UplinkStatistics,
    scheme: Scheme,
    zf_norms: Option<&ZfNorms>,
    n_draws: usize,
    seed: u64,
    tag: u64,
) -> Result<Vec<f64>, EstimatorError> {
    let n_pairs = s.num_pairs();
    let batches = parallel_batches(n_draws, 256, |range| -> Result<Vec<f64>, String> {
        let mut acc = vec![0.0; n_pairs];
        for d in range {
            let mut rng = derive_rng(seed, &[stream::MEAN_MC, tag, d as u64]);
            let est = run_uplink_training(s, stats, &mut rng).map_err(|e| e.to_string())?;
            let w = match scheme {
                Scheme::Mr => mr_precoders(&est, stats, s),
                Scheme::MrInstant => mr_instant_precoders(&est, s),
                Scheme::Zf => zf_precoders(&est, s, zf_norms.expect("ZF needs norm constants")),
            }
            .map_err(|e| e.to_string())?;
            for cell in 0..s.cfg.num_cells {
                for user in 0..s.cfg.users_per_cell {
                    let dot = crate::linalg::inner_product(est.g_hat(cell, user), w.w(cell, user));
                    acc[s.pair_index(cell, user)] += dot.re;
                }
            }
        }
        Ok(acc)
    });
    let mut total = vec![0.0; n_pairs];
    for b in batches {
        let b = b.map_err(|e| EstimatorError::Mlp(MlpError::Simulation(e)))?;
        for (t, v) in total.iter_mut().zip(b) {
            *t += v;
        }
    }
    let sqrt_rho = s.cfg.downlink_max_power_w.sqrt();
    Ok(total
        .into_iter()
        .map(|v| sqrt_rho * v / n_draws as f64)
        .collect())
}

/// Closed-form interference constant under MR precoding with arbitrary
/// spatial correlation: non-coherent trace ratios for every interferer plus
/// the coherent pilot-contamination term over the user's pilot partners.
pub fn t_mr_correlated(
    s: &Scenario,
    stats: &UplinkStatistics,
) -> Result<InterferenceConstant, EstimatorError> {
    if stats.mode() != FadingMode::Correlated {
        return Err(EstimatorError::WrongMode {
            expected: FadingMode::Correlated,
        });
    }
    let l_cells = s.cfg.num_cells;
    let k_users = s.cfg.users_per_cell;
    let rho = s.cfg.downlink_max_power_w;
    let tau_p = s.cfg.tau_p() as f64;
    let mut t = Vec::with_capacity(l_cells * k_users);
    for cell in 0..l_cells {
        for user in 0..k_users {
            let mut acc = s.cfg.noise_power_dl_w;
            for src_cell in 0..l_cells {
                for src_user in 0..k_users {
                    if (src_cell, src_user) == (cell, user) {
                        continue;
                    }
                    // E |g^H w|^2 for an interferer with independent
                    // estimate: tr(Phi R) / tr(Phi)
                    let phi = stats.est_cov(src_cell, src_user);
                    let r_cross = s.r(src_cell, cell, user).unwrap();
                    let num = trace_product(phi.matrix(), r_cross.matrix()).re;
                    acc += rho * s.eta(src_cell, src_user) * num
                        / stats.phi_trace(src_cell, src_user);
                }
            }
            // coherent term: pilot partners' estimates are correlated with
            // this user's channel through the shared despread observation
            for &lp in s.pilot_partners(cell) {
                if lp == cell {
                    continue;
                }
                let psi = stats.psi(lp, user);
                let r_cross = s.r(lp, cell, user).unwrap();
                let x = hermitian_solve(psi, r_cross.matrix())?;
                let tr = trace_product(s.r(lp, lp, user).unwrap().matrix(), &x);
                let p_user = s.pilot_power(cell, user);
                let p_partner = s.pilot_power(lp, user);
                acc += rho * s.eta(lp, user) * tau_p * tau_p * p_user * p_partner
                    * tr.norm_sqr()
                    / stats.phi_trace(lp, user);
            }
            t.push(acc);
        }
    }
    Ok(InterferenceConstant {
        t,
        method: TMethod::MrCorrelated,
        std_err: None,
    })
}

/// Closed-form interference constant under MR precoding and i.i.d. fading.
pub fn t_mr_iid(
    s: &Scenario,
    stats: &UplinkStatistics,
) -> Result<InterferenceConstant, EstimatorError> {
    if stats.mode() != FadingMode::Uncorrelated {
        return Err(EstimatorError::WrongMode {
            expected: FadingMode::Uncorrelated,
        });
    }
    let l_cells = s.cfg.num_cells;
    let k_users = s.cfg.users_per_cell;
    let m = s.cfg.num_antennas as f64;
    let rho = s.cfg.downlink_max_power_w;
    let mut t = Vec::with_capacity(l_cells * k_users);
    for cell in 0..l_cells {
        for user in 0..k_users {
            let mut acc = s.cfg.noise_power_dl_w;
            // non-coherent intra-cell
            let beta_own = s.beta(cell, cell, user);
            for k2 in 0..k_users {
                if k2 != user {
                    acc += rho * s.eta(cell, k2) * beta_own;
                }
            }
            // non-coherent inter-cell
            for l2 in 0..l_cells {
                if l2 == cell {
                    continue;
                }
                let beta_cross = s.beta(l2, cell, user);
                for k2 in 0..k_users {
                    acc += rho * s.eta(l2, k2) * beta_cross;
                }
            }
            // coherent pilot contamination
            for &lp in s.pilot_partners(cell) {
                if lp != cell {
                    acc += m * rho * s.eta(lp, user) * stats.gamma(lp, cell, user);
                }
            }
            t.push(acc);
        }
    }
    Ok(InterferenceConstant {
        t,
        method: TMethod::MrIid,
        std_err: None,
    })
}

/// Closed-form interference constant under ZF precoding and i.i.d. fading.
/// Interferers that the serving or partner arrays can estimate are nulled
/// down to the estimation-error power beta - gamma; out-of-group cells leak
/// their full beta; pilot partners add the (M - K)-scaled coherent term.
pub fn t_zf_iid(
    s: &Scenario,
    stats: &UplinkStatistics,
) -> Result<InterferenceConstant, EstimatorError> {
    if stats.mode() != FadingMode::Uncorrelated {
        return Err(EstimatorError::WrongMode {
            expected: FadingMode::Uncorrelated,
        });
    }
    let l_cells = s.cfg.num_cells;
    let k_users = s.cfg.users_per_cell;
    let m = s.cfg.num_antennas;
    if m <= k_users {
        return Err(EstimatorError::InsufficientAntennas { m, k: k_users });
    }
    let rho = s.cfg.downlink_max_power_w;
    let mut t = Vec::with_capacity(l_cells * k_users);
    for cell in 0..l_cells {
        for user in 0..k_users {
            let mut acc = s.cfg.noise_power_dl_w;
            // intra-cell: own array nulls everything but its estimation error
            let err_own = s.beta(cell, cell, user) - stats.gamma(cell, cell, user);
            for k2 in 0..k_users {
                if k2 != user {
                    acc += rho * s.eta(cell, k2) * err_own;
                }
            }
            for l2 in 0..l_cells {
                if l2 == cell {
                    continue;
                }
                if s.pilot_partners(cell).contains(&l2) {
                    // partner array estimates this user's channel too and
                    // nulls it down to the error power for every stream
                    let err_cross = s.beta(l2, cell, user) - stats.gamma(l2, cell, user);
                    for k2 in 0..k_users {
                        acc += rho * s.eta(l2, k2) * err_cross;
                    }
                    acc += (m - k_users) as f64
                        * rho
                        * s.eta(l2, user)
                        * stats.gamma(l2, cell, user);
                } else {
                    let beta_cross = s.beta(l2, cell, user);
                    for k2 in 0..k_users {
                        acc += rho * s.eta(l2, k2) * beta_cross;
                    }
                }
            }
            t.push(acc);
        }
    }
    Ok(InterferenceConstant {
        t,
        method: TMethod::ZfIid,
        std_err: None,
    })
}

/// Monte Carlo interference constant: sample average, over independently
/// generated blocks, of the realized interference-plus-noise power. Works
/// for any scheme and fading model; reports standard errors.
pub fn t_monte_carlo(
    s: &Scenario,
    stats: &UplinkStatistics,
    scheme: Scheme,
    zf_norms: Option<&ZfNorms>,
    n_blocks: usize,
    seed: u64,
    tag: u64,
) -> Result<InterferenceConstant, EstimatorError> {
    assert!(n_blocks >= 1_000, "Monte Carlo constant needs >= 1000 blocks");
    let n_pairs = s.num_pairs();
    let rho = s.cfg.downlink_max_power_w;
    type BatchOut = Result<(Vec<f64>, Vec<f64>), String>;
    let batches: Vec<BatchOut> = parallel_batches(n_blocks, 256, |range| {
        let mut sum = vec![0.0; n_pairs];
        let mut sum_sq = vec![0.0; n_pairs];
        for b in range {
            let mut rng = derive_rng(seed, &[stream::T_CONST, tag, b as u64]);
            let est = run_uplink_training(s, stats, &mut rng).map_err(|e| e.to_string())?;
            let w = match scheme {
                Scheme::Mr => mr_precoders(&est, stats, s),
                Scheme::MrInstant => mr_instant_precoders(&est, s),
                Scheme::Zf => zf_precoders(&est, s, zf_norms.expect("ZF needs norm constants")),
            }
            .map_err(|e| e.to_string())?;
            let gains = effective_gains(&est, &w, s, rho);
            for pair in 0..n_pairs {
                let row = gains.row_by_pair(pair);
                let mut x = 0.0;
                for (j, a) in row.iter().enumerate() {
                    if j != pair {
                        x += s.etas()[j] * a.norm_sqr();
                    }
                }
                sum[pair] += x;
                sum_sq[pair] += x * x;
            }
        }
        Ok((sum, sum_sq))
    });
    let mut sum = vec![0.0; n_pairs];
    let mut sum_sq = vec![0.0; n_pairs];
    for b in batches {
        let (bs, bq) = b.map_err(|e| EstimatorError::Mlp(MlpError::Simulation(e)))?;
        for i in 0..n_pairs {
            sum[i] += bs[i];
            sum_sq[i] += bq[i];
        }
    }
    let n = n_blocks as f64;
    let sigma = s.cfg.noise_power_dl_w;
    let mut t = Vec::with_capacity(n_pairs);
    let mut se = Vec::with_capacity(n_pairs);
    for i in 0..n_pairs {
        let mean = sum[i] / n;
        let var = (sum_sq[i] / n - mean * mean).max(0.0);
        t.push(mean + sigma);
        se.push((var / n).sqrt());
    }
    Ok(InterferenceConstant {
        t,
        method: TMethod::MonteCarlo,
        std_err: Some(se),
    })
}

/// Blind estimate of the desired gain from the received-power average `xi`:
/// sqrt((xi - t) / eta) when `xi` clears the switching threshold, otherwise
/// the hardening-mean fallback. Requires theta >= t so the square root is
/// always real on the blind branch.
pub fn model_aided_estimate(
    xi: f64,
    t: f64,
    eta: f64,
    theta: f64,
    fallback: f64,
) -> GainEstimate {
    assert!(
        theta >= t,
        "switching threshold must not be below the interference constant"
    );
    assert!(eta > 0.0);
    if xi > theta {
        GainEstimate {
            value: ((xi - t) / eta).sqrt(),
            branch: Branch::Blind,
        }
    } else {
        GainEstimate {
            value: fallback,
            branch: Branch::FallbackMean,
        }
    }
}

/// The blind estimator fed with the infinite-block limit of the power
/// average instead of a finite sample mean: the benchmark where only the
/// interference realizations, not the symbol noise, perturb the estimate.
pub fn oracle_estimate(
    gains: &crate::precoding::EffectiveGains,
    eta: &[f64],
    sigma_dl: f64,
    t: f64,
    theta: f64,
    fallback: f64,
    pair: usize,
) -> GainEstimate {
    let xi_inf = crate::downlink::asymptotic_xi(gains, eta, sigma_dl, pair);
    let est = model_aided_estimate(xi_inf, t, eta[pair], theta, fallback);
    GainEstimate {
        value: est.value,
        branch: match est.branch {
            Branch::Blind => Branch::Oracle,
            other => other,
        },
    }
}

/// Network inference on (leave-one-out power, interference constant,
/// allocated desired power) plus the user's known power fraction; the
/// output is clamped at zero since the target is a magnitude.
pub fn neural_estimate(
    model: &MlpModel,
    features: &[f64],
    eta: f64,
) -> Result<GainEstimate, MlpError> {
    let raw = model.forward_scaled(features, eta)?;
    Ok(GainEstimate {
        value: raw.max(0.0),
        branch: Branch::Neural,
    })
}

/// All long-term constants an experiment needs for one scenario and scheme:
/// the interference constant (closed form where one exists, Monte Carlo
/// otherwise), the hardening means, and ZF norm constants when applicable.
#[derive(Debug, Clone)]
pub struct LongTermConstants {
    pub t: InterferenceConstant,
    pub hardening_mean: Vec<f64>,
    pub zf_norms: Option<ZfNorms>,
}

/// Number of estimate draws for Monte Carlo ZF norm constants.
pub const ZF_NORM_MC_DRAWS: usize = 10_000;

/// Number of blocks for Monte Carlo interference constants when no closed
/// form applies.
pub const T_MC_BLOCKS: usize = 4_000;

pub fn long_term_constants(
    s: &Scenario,
    stats: &UplinkStatistics,
    scheme: Scheme,
    seed: u64,
    tag: u64,
) -> Result<LongTermConstants, EstimatorError> {
    let zf_norms = match scheme {
        Scheme::Zf => Some(match stats.mode() {
            FadingMode::Uncorrelated => {
                let mut rng = derive_rng(seed, &[stream::ZF_NORM, tag]);
                zf_norm_constants(s, stats, ZfNormMode::AnalyticIid, &mut rng)?
            }
            FadingMode::Correlated => {
                let mut rng = derive_rng(seed, &[stream::ZF_NORM, tag]);
                zf_norm_constants(
                    s,
                    stats,
                    ZfNormMode::MonteCarlo {
                        n_draws: ZF_NORM_MC_DRAWS,
                    },
                    &mut rng,
                )?
            }
        }),
        _ => None,
    };
    let t = match (scheme, stats.mode()) {
        (Scheme::Mr, FadingMode::Correlated) => t_mr_correlated(s, stats)?,
        (Scheme::Mr, FadingMode::Uncorrelated) => t_mr_iid(s, stats)?,
        (Scheme::Zf, FadingMode::Uncorrelated) => t_zf_iid(s, stats)?,
        (Scheme::Zf, FadingMode::Correlated) | (Scheme::MrInstant, _) => t_monte_carlo(
            s,
            stats,
            scheme,
            zf_norms.as_ref(),
            T_MC_BLOCKS,
            seed,
            tag,
        )?,
    };
    let hardening_mean = match scheme {
        Scheme::MrInstant => mc_hardening_mean(s, stats, scheme, None, 10_000, seed, tag)?,
        _ => {
            let mut means = Vec::with_capacity(s.num_pairs());
            for cell in 0..s.cfg.num_cells {
                for user in 0..s.cfg.users_per_cell {
                    means.push(hardening_mean(
                        scheme,
                        s,
                        stats,
                        zf_norms.as_ref(),
                        cell,
                        user,
                    )?);
                }
            }
            means
        }
    };
    Ok(LongTermConstants {
        t,
        hardening_mean,
        zf_norms,
    })
}

/// Pooled spread of the oracle estimate around the realized gain, as the
/// antenna count grows. With pilot contamination the interference tracking
/// error is dominated by the coherent term; without it, by the non-coherent
/// terms which vanish faster relative to the desired power.
#[derive(Debug, Clone)]
pub struct ContaminationReport {
    /// (antenna count, pooled std of alpha_hat / alpha - 1).
    pub per_m: Vec<(usize, f64)>,
    /// least-squares slope of ln(std) against ln(M).
    pub slope: f64,
}

pub fn contamination_std_curve(
    base: &NetworkConfig,
    m_values: &[usize],
    n_blocks: usize,
    seed: u64,
) -> Result<ContaminationReport, EstimatorError> {
    assert_eq!(base.fading_mode, FadingMode::Uncorrelated);
    let mut per_m = Vec::with_capacity(m_values.len());
    for &m in m_values {
        let cfg = NetworkConfig {
            num_antennas: m,
            ..base.clone()
        };
        cfg.validate()?;
        // geometry and shadowing draws do not depend on M, so the same
        // stream reproduces the same user drop for every antenna count
        let mut srng = derive_rng(seed, &[stream::SCENARIO, 0]);
        let s = build_scenario(&cfg, &mut srng)?;
        let stats = precompute_statistics(&s)?;
        let t = t_mr_iid(&s, &stats)?;
        let means: Vec<f64> = (0..s.num_pairs())
            .map(|p| {
                let (cell, user) = (p / cfg.users_per_cell, p % cfg.users_per_cell);
                hardening_mean(Scheme::Mr, &s, &stats, None, cell, user)
            })
            .collect::<Result<_, _>>()?;
        let n_pairs = s.num_pairs();
        type Acc = Result<(num_complex::Complex64, f64, u64), String>;
        let batches: Vec<Acc> = parallel_batches(n_blocks, 128, |range| {
            let mut sum = num_complex::Complex64::default();
            let mut sum_sq = 0.0;
            let mut count = 0u64;
            for b in range {
                let mut rng = derive_rng(seed, &[stream::BLOCK, m as u64, b as u64]);
                let est = run_uplink_training(&s, &stats, &mut rng).map_err(|e| e.to_string())?;
                let w = mr_precoders(&est, &stats, &s).map_err(|e| e.to_string())?;
                let gains = effective_gains(&est, &w, &s, cfg.downlink_max_power_w);
                for pair in 0..n_pairs {
                    let alpha = gains.row_by_pair(pair)[pair];
                    let est_val = oracle_estimate(
                        &gains,
                        s.etas(),
                        cfg.noise_power_dl_w,
                        t.t[pair],
                        t.t[pair],
                        means[pair],
                        pair,
                    );
                    let ratio = num_complex::Complex64::new(est_val.value, 0.0) / alpha
                        - num_complex::Complex64::new(1.0, 0.0);
                    sum += ratio;
                    sum_sq += ratio.norm_sqr();
                    count += 1;
                }
            }
            Ok((sum, sum_sq, count))
        });
        let mut sum = num_complex::Complex64::default();
        let mut sum_sq = 0.0;
        let mut count = 0u64;
        for b in batches {
            let (bs, bq, bc) = b.map_err(|e| EstimatorError::Mlp(MlpError::Simulation(e)))?;
            sum += bs;
            sum_sq += bq;
            count += bc;
        }
        let mean = sum / count as f64;
        let std = (sum_sq / count as f64 - mean.norm_sqr()).max(0.0).sqrt();
        per_m.push((m, std));
    }
    let points: Vec<(f64, f64)> = per_m
        .iter()
        .map(|&(m, s)| ((m as f64).ln(), s.ln()))
        .collect();
    Ok(ContaminationReport {
        slope: crate::metrics::regression_slope(&points),
        per_m,
    })
}
