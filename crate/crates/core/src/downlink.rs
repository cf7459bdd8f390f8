//! Downlink data transmission over one coherence block.
//!
//! The received samples are synthesized directly from the effective gains
//! (algebraically identical to forming them from the antenna-domain vectors,
//! at a fraction of the cost). Each block produces the sample mean power of
//! the received signal and its leave-one-out variant at one designated
//! symbol index; expectations are index-independent because the symbols are
//! i.i.d.

use crate::precoding::EffectiveGains;
use crate::rng::standard_complex;
use crate::scenario::{build_scenario, FadingMode, NetworkConfig, ScenarioError};
use crate::uplink::{precompute_statistics, run_uplink_training, UplinkError};
use crate::{precoding, rng::derive_rng, rng::stream};
use num_complex::Complex64;
use rand::Rng;
use std::f64::consts::TAU;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum DownlinkError {
    #[error(transparent)]
    Scenario(#[from] ScenarioError),
    #[error(transparent)]
    Uplink(#[from] UplinkError),
    #[error(transparent)]
    Precoding(#[from] precoding::PrecodingError),
}

/// Data symbol model: zero mean, unit power either way.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SymbolModel {
    /// Circularly-symmetric complex Gaussian symbols.
    Gaussian,
    /// Unit-modulus symbols with uniform random phase (|s| = 1 exactly).
    UnitModulus,
}

/// Received-power statistics of one coherence block for every user.
#[derive(Debug, Clone)]
pub struct BlockObservation {
    /// sample mean power over all tau_d data symbols, per user pair.
    pub xi: Vec<f64>,
    /// leave-one-out sample mean power (designated symbol removed).
    pub xi_loo: Vec<f64>,
    /// received sample at the designated symbol index, per user pair.
    pub y_probe: Vec<Complex64>,
    pub tau_d: usize,
    /// the gains the block was generated from, for metric computation.
    pub alpha: EffectiveGains,
}

fn draw_symbol<R: Rng + ?Sized>(model: SymbolModel, rng: &mut R) -> Complex64 {
    match model {
        SymbolModel::Gaussian => standard_complex(rng),
        SymbolModel::UnitModulus => Complex64::from_polar(1.0, TAU * rng.random::<f64>()),
    }
}

/// Simulate one downlink data block: i.i.d. unit-power symbols for every
/// transmitted stream, independent receiver noise, received power averages.
///
/// Draw order per symbol index: all stream symbols (source-pair order), then
/// one noise sample per receiving user.
pub fn simulate_block<R: Rng + ?Sized>(
    gains: &EffectiveGains,
    eta: &[f64],
    sigma_dl: f64,
    tau_d: usize,
    model: SymbolModel,
    rng: &mut R,
) -> BlockObservation {
    assert!(tau_d >= 2, "need at least two data symbols");
    let n = gains.num_pairs();
    assert_eq!(eta.len(), n);

    // per-receiver coefficients c_{u,j} = sqrt(eta_j) alpha_{u,j}
    let sqrt_eta: Vec<f64> = eta.iter().map(|e| e.sqrt()).collect();
    let noise_scale = sigma_dl.sqrt();

    let mut power_sum = vec![0.0f64; n];
    let mut y_probe = vec![Complex64::default(); n];
    let mut symbols = vec![Complex64::default(); n];
    for t in 0..tau_d {
        for s in symbols.iter_mut() {
            *s = draw_symbol(model, rng);
        }
        for u in 0..n {
            let mut y = Complex64::default();
            for ((a, s), se) in gains.row_by_pair(u).iter().zip(&symbols).zip(&sqrt_eta) {
                y += a * s * *se;
            }
            y += standard_complex(rng) * noise_scale;
            power_sum[u] += y.norm_sqr();
            if t == 0 {
                y_probe[u] = y;
            }
        }
    }

    let xi: Vec<f64> = power_sum.iter().map(|p| p / tau_d as f64).collect();
    let xi_loo: Vec<f64> = power_sum
        .iter()
        .zip(&y_probe)
        .map(|(p, y0)| (p - y0.norm_sqr()) / (tau_d as f64 - 1.0))
        .collect();

    BlockObservation {
        xi,
        xi_loo,
        y_probe,
        tau_d,
        alpha: gains.clone(),
    }
}

/// The in-probability limit of the sample mean power as the block length
/// grows: desired power, realized interference powers, and noise.
pub fn asymptotic_xi(gains: &EffectiveGains, eta: &[f64], sigma_dl: f64, pair: usize) -> f64 {
    let row = gains.row_by_pair(pair);
    row.iter()
        .zip(eta)
        .map(|(a, e)| e * a.norm_sqr())
        .sum::<f64>()
        + sigma_dl
}

/// Realized-minus-expected interference for one user, scaled by 1/K: the
/// quantity that the law of large numbers over users drives to zero.
pub fn lln_gap(
    gains: &EffectiveGains,
    expected_interference: f64,
    eta: &[f64],
    pair: usize,
) -> f64 {
    let row = gains.row_by_pair(pair);
    let realized: f64 = row
        .iter()
        .zip(eta)
        .enumerate()
        .filter(|(j, _)| *j != pair)
        .map(|(_, (a, e))| e * a.norm_sqr())
        .sum();
    let k = eta.len() as f64 / gains.num_cells() as f64;
    (realized - expected_interference) / k
}

/// Convergence report of the interference-averaging effect as the number of
/// users per cell grows.
#[derive(Debug, Clone)]
pub struct LlnReport {
    /// (users per cell, RMS of the 1/K-scaled realized-minus-expected
    /// interference over drops).
    pub rms_gap: Vec<(usize, f64)>,
}

/// For each K, drop `n_drops` random uncorrelated scenarios, simulate one
/// training block with MR precoding, and measure the 1/K-scaled gap between
/// realized interference and its closed-form expectation for user (0, 0).
pub fn check_lln_over_users(
    base: &NetworkConfig,
    k_values: &[usize],
    n_drops: usize,
    seed: u64,
) -> Result<LlnReport, DownlinkError> {
    assert_eq!(
        base.fading_mode,
        FadingMode::Uncorrelated,
        "the user-averaging check runs in uncorrelated mode"
    );
    let mut rms_gap = Vec::with_capacity(k_values.len());
    for (ki, &k) in k_values.iter().enumerate() {
        let cfg = NetworkConfig {
            users_per_cell: k,
            ..base.clone()
        };
        cfg.validate()?;
        let mut sq_sum = 0.0;
        for drop in 0..n_drops {
            let mut rng = derive_rng(seed, &[stream::SCENARIO, ki as u64, drop as u64]);
            let s = build_scenario(&cfg, &mut rng)?;
            let stats = precompute_statistics(&s)?;
            let mut brng = derive_rng(seed, &[stream::BLOCK, ki as u64, drop as u64]);
            let est = run_uplink_training(&s, &stats, &mut brng)?;
            let w = precoding::mr_precoders(&est, &stats, &s)?;
            let gains = precoding::effective_gains(&est, &w, &s, cfg.downlink_max_power_w);
            let t = crate::estimators::t_mr_iid(&s, &stats)
                .expect("uncorrelated mode was checked above");
            let expected = t.t[0] - cfg.noise_power_dl_w;
            let gap = lln_gap(&gains, expected, s.etas(), 0);
            sq_sum += gap * gap;
        }
        rms_gap.push((k, (sq_sum / n_drops as f64).sqrt()));
    }
    Ok(LlnReport { rms_gap })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::precoding::EffectiveGains;
    use crate::rng::{derive_rng, stream};
    use approx::assert_relative_eq;

    fn single_gain(alpha: f64) -> EffectiveGains {
        EffectiveGains::from_rows(1, 1, vec![Complex64::new(alpha, 0.0)])
    }

    #[test]
    fn unit_modulus_single_user_noiseless_power_is_exact() {
        let gains = single_gain(3.0);
        let mut rng = derive_rng(1, &[stream::BLOCK, 0, 0]);
        let obs = simulate_block(&gains, &[0.5], 0.0, 64, SymbolModel::UnitModulus, &mut rng);
        assert_relative_eq!(obs.xi[0], 0.5 * 9.0, max_relative = 1e-12);
        assert_relative_eq!(obs.xi_loo[0], 0.5 * 9.0, max_relative = 1e-12);
    }

    #[test]
    fn noise_only_power_matches_noise_variance() {
        let gains = single_gain(0.0);
        let sigma = 0.37;
        let n_blocks = 10_000;
        let tau_d = 16;
        let mut acc = 0.0;
        for b in 0..n_blocks {
            let mut rng = derive_rng(2, &[stream::BLOCK, 0, b]);
            let obs = simulate_block(&gains, &[1.0], sigma, tau_d, SymbolModel::Gaussian, &mut rng);
            acc += obs.xi[0];
        }
        let mean = acc / n_blocks as f64;
        // var(|y|^2) = sigma^2 per symbol, so the standard error of the mean
        // over n_blocks * tau_d samples is sigma / sqrt(n tau_d)
        let se = sigma / ((n_blocks * tau_d as u64) as f64).sqrt();
        assert!(
            (mean - sigma).abs() < 3.0 * se,
            "noise-only mean {mean:.5} vs {sigma}"
        );
    }

    #[test]
    fn long_block_converges_to_asymptotic_power() {
        // fixed gains, tau_d = 1e5: relative gap below 5%
        let mut rng = derive_rng(3, &[stream::GENERIC]);
        let n = 4;
        let alphas: Vec<Complex64> = (0..n * n)
            .map(|_| crate::rng::standard_complex(&mut rng) * 2.0)
            .collect();
        let gains = EffectiveGains::from_rows(2, 2, alphas);
        let eta = vec![0.5, 0.5, 0.5, 0.5];
        let sigma = 0.1;
        let limit = asymptotic_xi(&gains, &eta, sigma, 0);
        let obs = simulate_block(&gains, &eta, sigma, 100_000, SymbolModel::Gaussian, &mut rng);
        let rel = (obs.xi[0] - limit).abs() / limit;
        assert!(rel < 0.05, "relative gap {rel:.4}");
    }

    #[test]
    fn asymptotic_xi_trivial_cases() {
        let gains = single_gain(0.0);
        assert_relative_eq!(asymptotic_xi(&gains, &[1.0], 0.25, 0), 0.25);
        let gains = single_gain(2.0);
        assert_relative_eq!(asymptotic_xi(&gains, &[0.3], 0.0, 0), 0.3 * 4.0);
    }

    #[test]
    fn asymptotic_xi_matches_expanded_second_moment() {
        // independent recomputation: expand E|y|^2 term by term
        let mut rng = derive_rng(4, &[stream::GENERIC]);
        let alphas: Vec<Complex64> = (0..9)
            .map(|_| crate::rng::standard_complex(&mut rng))
            .collect();
        let gains = EffectiveGains::from_rows(3, 1, alphas.clone());
        let eta = vec![0.9, 0.4, 0.7];
        let sigma = 0.05;
        for pair in 0..3 {
            let mut expect = sigma;
            for j in 0..3 {
                expect += eta[j] * alphas[pair * 3 + j].norm_sqr();
            }
            assert_relative_eq!(
                asymptotic_xi(&gains, &eta, sigma, pair),
                expect,
                max_relative = 1e-12
            );
        }
    }

    #[test]
    fn leave_one_out_identity() {
        let mut rng = derive_rng(5, &[stream::GENERIC]);
        let alphas: Vec<Complex64> = (0..4)
            .map(|_| crate::rng::standard_complex(&mut rng))
            .collect();
        let gains = EffectiveGains::from_rows(2, 1, alphas);
        let eta = vec![0.5, 0.5];
        let obs = simulate_block(&gains, &eta, 0.2, 50, SymbolModel::Gaussian, &mut rng);
        for u in 0..2 {
            let direct =
                (obs.tau_d as f64 * obs.xi[u] - obs.y_probe[u].norm_sqr()) / (obs.tau_d as f64 - 1.0);
            assert_relative_eq!(obs.xi_loo[u], direct, max_relative = 1e-12);
        }
    }

    #[test]
    fn fixed_seed_is_bit_reproducible() {
        let gains = single_gain(1.5);
        let run = || {
            let mut rng = derive_rng(6, &[stream::BLOCK, 3, 9]);
            simulate_block(&gains, &[1.0], 0.1, 128, SymbolModel::Gaussian, &mut rng)
        };
        let a = run();
        let b = run();
        assert_eq!(a.xi, b.xi);
        assert_eq!(a.xi_loo, b.xi_loo);
        assert_eq!(a.y_probe, b.y_probe);
    }

    #[test]
    fn convergence_rate_is_square_root_in_block_length() {
        // average absolute gap over repetitions, then regress log-log
        let mut rng = derive_rng(7, &[stream::GENERIC]);
        let alphas: Vec<Complex64> = (0..4)
            .map(|_| crate::rng::standard_complex(&mut rng) + Complex64::new(1.0, 0.0))
            .collect();
        let gains = EffectiveGains::from_rows(2, 1, alphas);
        let eta = vec![0.5, 0.5];
        let sigma = 0.05;
        let limit0 = asymptotic_xi(&gains, &eta, sigma, 0);
        let taus = [100usize, 1_000, 10_000, 100_000];
        let reps = 48;
        let mut points = Vec::new();
        for (i, &tau) in taus.iter().enumerate() {
            let mut err = 0.0;
            for r in 0..reps {
                let mut brng = derive_rng(8, &[stream::BLOCK, i as u64, r]);
                let obs = simulate_block(&gains, &eta, sigma, tau, SymbolModel::Gaussian, &mut brng);
                err += (obs.xi[0] - limit0).abs() / limit0;
            }
            points.push(((tau as f64).ln(), (err / reps as f64).ln()));
        }
        let slope = regression_slope(&points);
        assert!(
            (-0.65..=-0.35).contains(&slope),
            "convergence slope {slope:.3}"
        );
    }

    pub(crate) fn regression_slope(points: &[(f64, f64)]) -> f64 {
        let n = points.len() as f64;
        let mx = points.iter().map(|p| p.0).sum::<f64>() / n;
        let my = points.iter().map(|p| p.1).sum::<f64>() / n;
        let num: f64 = points.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
        let den: f64 = points.iter().map(|p| (p.0 - mx).powi(2)).sum();
        num / den
    }

    #[test]
    fn lln_gap_zero_for_deterministic_means() {
        // gains equal to their "expectations": the gap vanishes
        let alphas = vec![
            Complex64::new(2.0, 0.0),
            Complex64::new(1.0, 0.0),
            Complex64::new(1.0, 0.0),
            Complex64::new(2.0, 0.0),
        ];
        let gains = EffectiveGains::from_rows(2, 1, alphas);
        let eta = vec![0.5, 0.5];
        let expected = 0.5 * 1.0;
        assert_relative_eq!(lln_gap(&gains, expected, &eta, 0), 0.0);
    }

    #[test]
    fn lln_gap_matches_direct_difference() {
        let mut rng = derive_rng(9, &[stream::GENERIC]);
        let alphas: Vec<Complex64> = (0..4)
            .map(|_| crate::rng::standard_complex(&mut rng))
            .collect();
        let gains = EffectiveGains::from_rows(2, 1, alphas.clone());
        let eta = vec![0.4, 0.6];
        let expected = 0.123;
        let realized = 0.6 * alphas[1].norm_sqr();
        assert_relative_eq!(
            lln_gap(&gains, expected, &eta, 0),
            realized - expected,
            max_relative = 1e-12
        );
    }
}
