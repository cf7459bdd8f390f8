//! Uplink pilot training and MMSE channel estimation.
//!
//! The statistics half is computed once per scenario: despreading-noise
//! covariances, MMSE estimator matrices, estimate and error covariances, and
//! their scalar specializations for i.i.d. fading. The per-block half draws
//! all true channels, forms the despread pilot observations directly (the
//! full pilot-block observation is never materialized; despreading it is
//! statistically identical), and applies the MMSE filter.

use crate::linalg::{hermitian_solve, CMatrix, HermitianPsd, LinalgError};
use crate::rng::standard_complex_vector;
use crate::scenario::{FadingMode, Scenario};
use num_complex::Complex64;
use rand::Rng;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum UplinkError {
    #[error(transparent)]
    Linalg(#[from] LinalgError),
}

/// Long-term estimation statistics for one scenario.
///
/// In correlated mode the per-user matrices are populated; in uncorrelated
/// mode everything reduces to scalars (estimate variance `gamma`, despread
/// covariance `psi_scalar`) and the matrix fields stay empty.
#[derive(Debug, Clone)]
pub struct UplinkStatistics {
    mode: FadingMode,
    l_cells: usize,
    k_users: usize,
    /// despread observation covariance / tau_p, per serving pair (l, k).
    psi: Vec<HermitianPsd>,
    /// estimate covariance Phi, per serving pair.
    est_cov: Vec<HermitianPsd>,
    /// error covariance C = R - Phi, per serving pair.
    err_cov: Vec<HermitianPsd>,
    /// MMSE filter B with g_hat = B y_tilde, per serving pair.
    estimator: Vec<CMatrix>,
    /// scalar psi at BS `bs` for pilot slot `k` (i.i.d. mode).
    psi_scalar: Vec<f64>,
    /// estimate variance gamma^{bs}_{cell,user}; zero for cells outside the
    /// pilot group of `bs` (i.i.d. mode).
    gamma: Vec<f64>,
    /// tr Phi per serving pair (both modes).
    phi_trace: Vec<f64>,
}

impl UplinkStatistics {
    #[inline]
    fn pair(&self, cell: usize, user: usize) -> usize {
        cell * self.k_users + user
    }

    #[inline]
    fn link(&self, bs: usize, cell: usize, user: usize) -> usize {
        (bs * self.l_cells + cell) * self.k_users + user
    }

    pub fn mode(&self) -> FadingMode {
        self.mode
    }

    pub fn psi(&self, cell: usize, user: usize) -> &HermitianPsd {
        &self.psi[self.pair(cell, user)]
    }

    pub fn est_cov(&self, cell: usize, user: usize) -> &HermitianPsd {
        &self.est_cov[self.pair(cell, user)]
    }

    pub fn err_cov(&self, cell: usize, user: usize) -> &HermitianPsd {
        &self.err_cov[self.pair(cell, user)]
    }

    pub fn estimator_matrix(&self, cell: usize, user: usize) -> &CMatrix {
        &self.estimator[self.pair(cell, user)]
    }

    /// Scalar despread covariance at BS `bs` for pilot slot `user`
    /// (i.i.d. mode only).
    pub fn psi_scalar(&self, bs: usize, user: usize) -> f64 {
        self.psi_scalar[bs * self.k_users + user]
    }

    /// Estimate variance of the channel from user (`cell`, `user`) as seen
    /// by BS `bs`; zero when `bs` is not in the user's pilot group
    /// (i.i.d. mode only).
    pub fn gamma(&self, bs: usize, cell: usize, user: usize) -> f64 {
        self.gamma[self.link(bs, cell, user)]
    }

    #[inline]
    pub fn phi_trace(&self, cell: usize, user: usize) -> f64 {
        self.phi_trace[self.pair(cell, user)]
    }
}

/// Precompute the MMSE estimation statistics for a scenario.
pub fn precompute_statistics(s: &Scenario) -> Result<UplinkStatistics, UplinkError> {
    let l_cells = s.cfg.num_cells;
    let k_users = s.cfg.users_per_cell;
    let m = s.cfg.num_antennas;
    let tau_p = s.cfg.tau_p() as f64;
    let sigma_ul = s.cfg.noise_power_ul_w;

    let mut stats = UplinkStatistics {
        mode: s.cfg.fading_mode,
        l_cells,
        k_users,
        psi: Vec::new(),
        est_cov: Vec::new(),
        err_cov: Vec::new(),
        estimator: Vec::new(),
        psi_scalar: Vec::new(),
        gamma: Vec::new(),
        phi_trace: Vec::new(),
    };

    match s.cfg.fading_mode {
        FadingMode::Correlated => {
            for cell in 0..l_cells {
                for user in 0..k_users {
                    let r = s.r(cell, cell, user).expect("correlated scenario has R");
                    let mut psi_mat = CMatrix::identity(m).scaled(sigma_ul);
                    for &lp in s.pilot_partners(cell) {
                        let rp = s.r(cell, lp, user).unwrap();
                        psi_mat =
                            psi_mat.add(&rp.matrix().scaled(tau_p * s.pilot_power(lp, user)));
                    }
                    let psi = HermitianPsd::new_unchecked(psi_mat);
                    // X = Psi^{-1} R, so B = sqrt(p) X^H = sqrt(p) R Psi^{-1}
                    let x = hermitian_solve(&psi, r.matrix())?;
                    let p_hat = s.pilot_power(cell, user);
                    let b = x.conj_transpose().scaled(p_hat.sqrt());
                    let phi_mat = b.mul(r.matrix()).scaled(tau_p * p_hat.sqrt());
                    let phi = HermitianPsd::new_unchecked(phi_mat);
                    let err = HermitianPsd::new_unchecked(r.matrix().sub(phi.matrix()));
                    stats.phi_trace.push(phi.trace_re());
                    stats.psi.push(psi);
                    stats.est_cov.push(phi);
                    stats.err_cov.push(err);
                    stats.estimator.push(b);
                }
            }
            // warm the Cholesky factors used by the per-block channel sampler
            for bs in 0..l_cells {
                for cell in 0..l_cells {
                    for user in 0..k_users {
                        s.r(bs, cell, user).unwrap().cholesky()?;
                    }
                }
            }
        }
        FadingMode::Uncorrelated => {
            for bs in 0..l_cells {
                for user in 0..k_users {
                    let mut psi = sigma_ul;
                    for &lp in s.pilot_partners(bs) {
                        psi += tau_p * s.pilot_power(lp, user) * s.beta(bs, lp, user);
                    }
                    stats.psi_scalar.push(psi);
                }
            }
            for bs in 0..l_cells {
                for cell in 0..l_cells {
                    for user in 0..k_users {
                        let same_group = s.pilot_partners(bs).contains(&cell);
                        let g = if same_group {
                            let beta = s.beta(bs, cell, user);
                            tau_p * s.pilot_power(cell, user) * beta * beta
                                / stats.psi_scalar[bs * k_users + user]
                        } else {
                            0.0
                        };
                        stats.gamma.push(g);
                    }
                }
            }
            for cell in 0..l_cells {
                for user in 0..k_users {
                    stats
                        .phi_trace
                        .push(m as f64 * stats.gamma[(cell * l_cells + cell) * k_users + user]);
                }
            }
        }
    }
    Ok(stats)
}

/// One coherence block's channels and serving-link estimates.
#[derive(Debug, Clone)]
pub struct ChannelEstimates {
    l_cells: usize,
    k_users: usize,
    m_antennas: usize,
    /// true channels, indexed [bs][cell][user], M entries per link.
    g: Vec<Complex64>,
    /// serving-link MMSE estimates, indexed [cell][user].
    g_hat: Vec<Complex64>,
    /// despread pilot observations, indexed [cell][user] (slot = user).
    y_tilde: Vec<Complex64>,
}

impl ChannelEstimates {
    #[inline]
    pub fn g(&self, bs: usize, cell: usize, user: usize) -> &[Complex64] {
        let i = ((bs * self.l_cells + cell) * self.k_users + user) * self.m_antennas;
        &self.g[i..i + self.m_antennas]
    }

    #[inline]
    pub fn g_hat(&self, cell: usize, user: usize) -> &[Complex64] {
        let i = (cell * self.k_users + user) * self.m_antennas;
        &self.g_hat[i..i + self.m_antennas]
    }

    /// Despread observation at BS `cell` for pilot slot `user`.
    pub fn y_tilde(&self, cell: usize, user: usize) -> &[Complex64] {
        let i = (cell * self.k_users + user) * self.m_antennas;
        &self.y_tilde[i..i + self.m_antennas]
    }

    /// Estimation error g - g_hat of the serving link.
    pub fn error(&self, cell: usize, user: usize) -> Vec<Complex64> {
        self.g(cell, cell, user)
            .iter()
            .zip(self.g_hat(cell, user))
            .map(|(a, b)| a - b)
            .collect()
    }

    pub fn num_antennas(&self) -> usize {
        self.m_antennas
    }
}

/// Draw one coherence block: all true channels, the despread pilot
/// observations, and the serving-link MMSE estimates.
pub fn run_uplink_training<R: Rng + ?Sized>(
    s: &Scenario,
    stats: &UplinkStatistics,
    rng: &mut R,
) -> Result<ChannelEstimates, UplinkError> {
    let l_cells = s.cfg.num_cells;
    let k_users = s.cfg.users_per_cell;
    let m = s.cfg.num_antennas;
    let tau_p = s.cfg.tau_p() as f64;
    let sigma_ul = s.cfg.noise_power_ul_w;

    let mut g = Vec::with_capacity(l_cells * l_cells * k_users * m);
    for bs in 0..l_cells {
        for cell in 0..l_cells {
            for user in 0..k_users {
                let v = standard_complex_vector(m, rng);
                match s.cfg.fading_mode {
                    FadingMode::Correlated => {
                        let l = s.r(bs, cell, user).unwrap().cholesky()?;
                        g.extend(l.lower_tri_mul_vec(&v));
                    }
                    FadingMode::Uncorrelated => {
                        let scale = s.beta(bs, cell, user).sqrt();
                        g.extend(v.into_iter().map(|z| z * scale));
                    }
                }
            }
        }
    }

    let mut y_tilde = Vec::with_capacity(l_cells * k_users * m);
    let mut g_hat = Vec::with_capacity(l_cells * k_users * m);
    for cell in 0..l_cells {
        for user in 0..k_users {
            let noise_scale = (tau_p * sigma_ul).sqrt();
            let mut y: Vec<Complex64> = standard_complex_vector(m, rng)
                .into_iter()
                .map(|z| z * noise_scale)
                .collect();
            for &lp in s.pilot_partners(cell) {
                let coef = tau_p * s.pilot_power(lp, user).sqrt();
                let start = ((cell * l_cells + lp) * k_users + user) * m;
                for (yi, gi) in y.iter_mut().zip(&g[start..start + m]) {
                    *yi += gi * coef;
                }
            }
            match s.cfg.fading_mode {
                FadingMode::Correlated => {
                    g_hat.extend(stats.estimator_matrix(cell, user).mul_vec(&y));
                }
                FadingMode::Uncorrelated => {
                    let c = s.pilot_power(cell, user).sqrt() * s.beta(cell, cell, user)
                        / stats.psi_scalar(cell, user);
                    g_hat.extend(y.iter().map(|z| z * c));
                }
            }
            y_tilde.extend(y);
        }
    }

    Ok(ChannelEstimates {
        l_cells,
        k_users,
        m_antennas: m,
        g,
        g_hat,
        y_tilde,
    })
}

/// MMSE estimate, at BS `bs`, of the channel from user (`src_cell`, `user`)
/// sharing pilot slot `user`. Only needed for cross-link diagnostics; the
/// simulator itself uses serving-link estimates only.
pub fn cross_estimate(
    s: &Scenario,
    stats: &UplinkStatistics,
    est: &ChannelEstimates,
    bs: usize,
    src_cell: usize,
    user: usize,
) -> Result<Vec<Complex64>, UplinkError> {
    let y = est.y_tilde(bs, user);
    match s.cfg.fading_mode {
        FadingMode::Correlated => {
            let m = s.cfg.num_antennas;
            let ycol = CMatrix::from_fn(m, 1, |r, _| y[r]);
            let x = hermitian_solve(stats.psi(bs, user), &ycol)?;
            let r = s.r(bs, src_cell, user).unwrap();
            let p = s.pilot_power(src_cell, user).sqrt();
            Ok(r
                .matrix()
                .mul_vec(&(0..m).map(|i| x.at(i, 0) * p).collect::<Vec<_>>()))
        }
        FadingMode::Uncorrelated => {
            let c = s.pilot_power(src_cell, user).sqrt() * s.beta(bs, src_cell, user)
                / stats.psi_scalar(bs, user);
            Ok(y.iter().map(|z| z * c).collect())
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::{inner_product, norm_sq, trace_product};
    use crate::rng::{derive_rng, stream};
    use crate::scenario::{build_scenario, synthetic_scenario, NetworkConfig, NetworkConfigSpec};
    use approx::assert_relative_eq;

    fn small_cfg(mode: FadingMode, l: usize, m: usize, k: usize) -> NetworkConfig {
        NetworkConfigSpec {
            num_cells: l,
            num_antennas: m,
            users_per_cell: k,
            fading_mode: mode,
            ..Default::default()
        }
        .resolve()
        .unwrap()
    }

    #[test]
    fn gamma_matches_single_cell_formula() {
        let cfg = small_cfg(FadingMode::Uncorrelated, 1, 8, 2);
        let mut rng = derive_rng(1, &[stream::SCENARIO, 0]);
        let s = build_scenario(&cfg, &mut rng).unwrap();
        let stats = precompute_statistics(&s).unwrap();
        let tau_p = cfg.tau_p() as f64;
        let p = cfg.uplink_power_w;
        for user in 0..2 {
            let beta = s.beta(0, 0, user);
            let expect = tau_p * p * beta * beta / (tau_p * p * beta + cfg.noise_power_ul_w);
            assert_relative_eq!(stats.gamma(0, 0, user), expect, max_relative = 1e-12);
        }
    }

    #[test]
    fn matrix_path_matches_scalar_path_on_scaled_identity() {
        // the general estimator on R = beta I must reduce to the i.i.d. form
        let cfg = small_cfg(FadingMode::Uncorrelated, 4, 8, 2);
        let mut rng = derive_rng(2, &[stream::SCENARIO, 0]);
        let s = build_scenario(&cfg, &mut rng).unwrap();
        let iid = precompute_statistics(&s).unwrap();
        let mat = s.materialize_correlation();
        let full = precompute_statistics(&mat).unwrap();
        for cell in 0..4 {
            for user in 0..2 {
                let gamma = iid.gamma(cell, cell, user);
                let beta = s.beta(cell, cell, user);
                let phi = full.est_cov(cell, user).matrix();
                let err = full.err_cov(cell, user).matrix();
                for i in 0..8 {
                    assert_relative_eq!(phi.at(i, i).re, gamma, max_relative = 1e-10);
                    assert_relative_eq!(err.at(i, i).re, beta - gamma, max_relative = 1e-10);
                    for j in 0..8 {
                        if i != j {
                            assert!(phi.at(i, j).norm() < 1e-10 * gamma);
                        }
                    }
                }
                assert_relative_eq!(
                    iid.phi_trace(cell, user),
                    full.phi_trace(cell, user),
                    max_relative = 1e-10
                );
            }
        }
    }

    #[test]
    fn covariances_decompose_r() {
        let cfg = small_cfg(FadingMode::Correlated, 4, 8, 2);
        let mut rng = derive_rng(3, &[stream::SCENARIO, 1]);
        let s = build_scenario(&cfg, &mut rng).unwrap();
        let stats = precompute_statistics(&s).unwrap();
        for cell in 0..4 {
            for user in 0..2 {
                let r = s.r(cell, cell, user).unwrap().matrix();
                let sum = stats
                    .est_cov(cell, user)
                    .matrix()
                    .add(stats.err_cov(cell, user).matrix());
                let rel = sum.sub(r).frobenius_norm() / r.frobenius_norm();
                assert!(rel < 1e-8);
            }
        }
    }

    #[test]
    fn noiseless_single_cell_estimate_recovers_channel() {
        // sigma_UL = 0 with invertible R: the MMSE filter is the identity
        let mut cfg = small_cfg(FadingMode::Uncorrelated, 1, 6, 1);
        cfg.noise_power_ul_w = 0.0;
        let beta = 2.5e-11;
        let s = synthetic_scenario(&cfg, vec![beta], None).unwrap();
        let s = s.materialize_correlation();
        let stats = precompute_statistics(&s).unwrap();
        let mut rng = derive_rng(4, &[stream::BLOCK, 0, 0]);
        let est = run_uplink_training(&s, &stats, &mut rng).unwrap();
        let g = est.g(0, 0, 0);
        let ghat = est.g_hat(0, 0);
        let err: f64 = g
            .iter()
            .zip(ghat)
            .map(|(a, b)| (a - b).norm_sqr())
            .sum::<f64>()
            .sqrt();
        assert!(err / norm_sq(g).sqrt() < 1e-8);
    }

    #[test]
    fn near_zero_noise_shrinks_error_covariance() {
        let mut cfg = small_cfg(FadingMode::Uncorrelated, 1, 6, 1);
        let beta = 1e-10;
        cfg.noise_power_ul_w = 1e-12 * cfg.tau_p() as f64 * cfg.uplink_power_w * beta;
        let s = synthetic_scenario(&cfg, vec![beta], None)
            .unwrap()
            .materialize_correlation();
        let stats = precompute_statistics(&s).unwrap();
        let c = stats.err_cov(0, 0).matrix();
        let r = s.r(0, 0, 0).unwrap().matrix();
        assert!(c.frobenius_norm() / r.frobenius_norm() < 1e-6);
    }

    #[test]
    fn estimate_covariance_matches_monte_carlo() {
        let cfg = small_cfg(FadingMode::Correlated, 1, 6, 2);
        let mut rng = derive_rng(5, &[stream::SCENARIO, 2]);
        let s = build_scenario(&cfg, &mut rng).unwrap();
        let stats = precompute_statistics(&s).unwrap();
        let m = 6;
        let n_blocks = 10_000;
        let mut cov = CMatrix::zeros(m, m);
        let mut dot_sum = Complex64::default();
        for b in 0..n_blocks {
            let mut brng = derive_rng(6, &[stream::BLOCK, 0, b as u64]);
            let est = run_uplink_training(&s, &stats, &mut brng).unwrap();
            let ghat = est.g_hat(0, 0);
            let e = est.error(0, 0);
            dot_sum += inner_product(ghat, &e);
            for r in 0..m {
                for c in 0..m {
                    let upd = cov.at(r, c) + ghat[r] * ghat[c].conj();
                    cov.set(r, c, upd);
                }
            }
        }
        let cov = cov.scaled(1.0 / n_blocks as f64);
        let phi = stats.est_cov(0, 0);
        let rel = cov.sub(phi.matrix()).frobenius_norm() / phi.matrix().frobenius_norm();
        assert!(rel < 0.05, "estimate covariance off by {rel:.3}");

        // orthogonality of estimate and error: the sample mean of g_hat^H e
        // stays within 4 analytic standard deviations of zero
        let var = trace_product(stats.err_cov(0, 0).matrix(), phi.matrix()).re;
        let bound = 4.0 * (var / n_blocks as f64).sqrt();
        assert!(
            (dot_sum / n_blocks as f64).norm() < bound,
            "orthogonality violated: {:.3e} vs {:.3e}",
            (dot_sum / n_blocks as f64).norm(),
            bound
        );
    }

    #[test]
    fn pilot_sharing_estimates_are_scaled_copies() {
        // i.i.d. fading: cross-cell estimates are exact scalar multiples
        let cfg = small_cfg(FadingMode::Uncorrelated, 4, 8, 2);
        let mut rng = derive_rng(7, &[stream::SCENARIO, 3]);
        let s = build_scenario(&cfg, &mut rng).unwrap();
        let stats = precompute_statistics(&s).unwrap();
        let mut brng = derive_rng(7, &[stream::BLOCK, 0, 0]);
        let est = run_uplink_training(&s, &stats, &mut brng).unwrap();
        for bs in 0..4 {
            for src in 0..4 {
                if src == bs {
                    continue;
                }
                for user in 0..2 {
                    let cross = cross_estimate(&s, &stats, &est, bs, src, user).unwrap();
                    let own = est.g_hat(bs, user);
                    let p_src = s.pilot_power(src, user).sqrt();
                    let p_own = s.pilot_power(bs, user).sqrt();
                    let scale = p_src * s.beta(bs, src, user) / (p_own * s.beta(bs, bs, user));
                    for (c, o) in cross.iter().zip(own) {
                        assert!(
                            (c - o * scale).norm() <= 1e-12 * o.norm().max(1e-300),
                            "cross estimate deviates from scaled copy"
                        );
                    }
                }
            }
        }
    }
}
