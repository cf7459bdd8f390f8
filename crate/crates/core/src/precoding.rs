//! Linear precoding and the effective downlink channel gains.
//!
//! Both supported precoders use average-norm normalization, w = v / sqrt(E
//! ||v||^2), so the unit power constraint holds in expectation. For maximum
//! ratio the normalizer tr(Phi) is analytic under any fading; for zero
//! forcing it is analytic under i.i.d. fading and estimated by Monte Carlo
//! once per scenario otherwise. An instantaneous-norm MR variant is exposed
//! behind the same interface.

use crate::linalg::{gram_pseudoinverse_columns, norm_sq, CMatrix, LinalgError};
use crate::rng::standard_complex_vector;
use crate::scenario::{FadingMode, Scenario};
use crate::uplink::{ChannelEstimates, UplinkStatistics};
use num_complex::Complex64;
use rand::Rng;
use serde::Deserialize;
use std::fmt;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum PrecodingError {
    #[error("channel estimate is degenerate (zero norm or nonpositive power)")]
    DegenerateChannel,
    #[error("zero-forcing needs strictly more antennas ({m}) than users ({k})")]
    InsufficientAntennas { m: usize, k: usize },
    #[error(transparent)]
    Linalg(#[from] LinalgError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Scheme {
    /// Maximum ratio with average-norm normalization.
    Mr,
    /// Maximum ratio normalized by the instantaneous estimate norm.
    MrInstant,
    /// Zero forcing with average-norm normalization.
    Zf,
}

impl fmt::Display for Scheme {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Scheme::Mr => write!(f, "mr"),
            Scheme::MrInstant => write!(f, "mr-inst"),
            Scheme::Zf => write!(f, "zf"),
        }
    }
}

/// How the zero-forcing normalizer E ||z||^2 is obtained.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ZfNormMode {
    /// 1 / ((M - K) gamma), exact under i.i.d. fading.
    AnalyticIid,
    /// Sample average over independent estimate draws.
    MonteCarlo { n_draws: usize },
}

/// Cached E ||z||^2 per (cell, user), a long-term constant of the scenario.
#[derive(Debug, Clone)]
pub struct ZfNorms {
    k_users: usize,
    e_norm_sq: Vec<f64>,
}

impl ZfNorms {
    #[inline]
    pub fn e_norm_sq(&self, cell: usize, user: usize) -> f64 {
        self.e_norm_sq[cell * self.k_users + user]
    }
}

/// Compute the zero-forcing norm constants for a scenario.
pub fn zf_norm_constants<R: Rng + ?Sized>(
    s: &Scenario,
    stats: &UplinkStatistics,
    mode: ZfNormMode,
    rng: &mut R,
) -> Result<ZfNorms, PrecodingError> {
    let l_cells = s.cfg.num_cells;
    let k_users = s.cfg.users_per_cell;
    let m = s.cfg.num_antennas;
    if m <= k_users {
        return Err(PrecodingError::InsufficientAntennas { m, k: k_users });
    }
    let mut e_norm_sq = vec![0.0; l_cells * k_users];
    match mode {
        ZfNormMode::AnalyticIid => {
            assert_eq!(
                stats.mode(),
                FadingMode::Uncorrelated,
                "analytic ZF normalizer requires i.i.d. fading statistics"
            );
            for cell in 0..l_cells {
                for user in 0..k_users {
                    let gamma = stats.gamma(cell, cell, user);
                    if gamma <= 0.0 {
                        return Err(PrecodingError::DegenerateChannel);
                    }
                    e_norm_sq[cell * k_users + user] = 1.0 / ((m - k_users) as f64 * gamma);
                }
            }
        }
        ZfNormMode::MonteCarlo { n_draws } => {
            for cell in 0..l_cells {
                let mut acc = vec![0.0; k_users];
                for _ in 0..n_draws {
                    let mut ghat = CMatrix::zeros(m, k_users);
                    for user in 0..k_users {
                        let col = draw_estimate(s, stats, cell, user, rng)?;
                        for (row, v) in col.into_iter().enumerate() {
                            ghat.set(row, user, v);
                        }
                    }
                    let z = gram_pseudoinverse_columns(&ghat)?;
                    for (user, a) in acc.iter_mut().enumerate() {
                        *a += (0..m).map(|r| z.at(r, user).norm_sqr()).sum::<f64>();
                    }
                }
                for (user, a) in acc.into_iter().enumerate() {
                    e_norm_sq[cell * k_users + user] = a / n_draws as f64;
                }
            }
        }
    }
    Ok(ZfNorms { k_users, e_norm_sq })
}

/// Draw an estimate vector from its long-term distribution (used by Monte
/// Carlo normalizers; estimates of different users are independent).
fn draw_estimate<R: Rng + ?Sized>(
    s: &Scenario,
    stats: &UplinkStatistics,
    cell: usize,
    user: usize,
    rng: &mut R,
) -> Result<Vec<Complex64>, PrecodingError> {
    let m = s.cfg.num_antennas;
    match stats.mode() {
        FadingMode::Correlated => {
            let l = stats.est_cov(cell, user).cholesky()?;
            Ok(l.lower_tri_mul_vec(&standard_complex_vector(m, rng)))
        }
        FadingMode::Uncorrelated => {
            let scale = stats.gamma(cell, cell, user).sqrt();
            Ok(standard_complex_vector(m, rng)
                .into_iter()
                .map(|z| z * scale)
                .collect())
        }
    }
}

/// Precoding vectors for every (cell, user) of one coherence block.
#[derive(Debug, Clone)]
pub struct PrecoderSet {
    pub scheme: Scheme,
    k_users: usize,
    m_antennas: usize,
    w: Vec<Complex64>,
    norm_constants: Vec<f64>,
}

impl PrecoderSet {
    #[inline]
    pub fn w(&self, cell: usize, user: usize) -> &[Complex64] {
        let i = (cell * self.k_users + user) * self.m_antennas;
        &self.w[i..i + self.m_antennas]
    }

    /// The E ||.||^2 normalizer used for this user's precoder.
    pub fn norm_constant(&self, cell: usize, user: usize) -> f64 {
        self.norm_constants[cell * self.k_users + user]
    }
}

/// Maximum-ratio precoders w = g_hat / sqrt(tr Phi).
pub fn mr_precoders(
    est: &ChannelEstimates,
    stats: &UplinkStatistics,
    s: &Scenario,
) -> Result<PrecoderSet, PrecodingError> {
    let l_cells = s.cfg.num_cells;
    let k_users = s.cfg.users_per_cell;
    let m = s.cfg.num_antennas;
    let mut w = Vec::with_capacity(l_cells * k_users * m);
    let mut norm_constants = Vec::with_capacity(l_cells * k_users);
    for cell in 0..l_cells {
        for user in 0..k_users {
            let phi_tr = stats.phi_trace(cell, user);
            let ghat = est.g_hat(cell, user);
            if phi_tr <= 0.0 || norm_sq(ghat) <= 0.0 {
                return Err(PrecodingError::DegenerateChannel);
            }
            let inv = 1.0 / phi_tr.sqrt();
            w.extend(ghat.iter().map(|z| z * inv));
            norm_constants.push(phi_tr);
        }
    }
    Ok(PrecoderSet {
        scheme: Scheme::Mr,
        k_users,
        m_antennas: m,
        w,
        norm_constants,
    })
}

/// Maximum-ratio precoders normalized by the realized estimate norm,
/// w = g_hat / ||g_hat||.
pub fn mr_instant_precoders(
    est: &ChannelEstimates,
    s: &Scenario,
) -> Result<PrecoderSet, PrecodingError> {
    let l_cells = s.cfg.num_cells;
    let k_users = s.cfg.users_per_cell;
    let m = s.cfg.num_antennas;
    let mut w = Vec::with_capacity(l_cells * k_users * m);
    let mut norm_constants = Vec::with_capacity(l_cells * k_users);
    for cell in 0..l_cells {
        for user in 0..k_users {
            let ghat = est.g_hat(cell, user);
            let nsq = norm_sq(ghat);
            if nsq <= 0.0 {
                return Err(PrecodingError::DegenerateChannel);
            }
            let inv = 1.0 / nsq.sqrt();
            w.extend(ghat.iter().map(|z| z * inv));
            norm_constants.push(nsq);
        }
    }
    Ok(PrecoderSet {
        scheme: Scheme::MrInstant,
        k_users,
        m_antennas: m,
        w,
        norm_constants,
    })
}

/// Zero-forcing precoders: z_k is the k-th column of G (G^H G)^{-1} built
/// from the cell's estimates, scaled by the cached 1 / sqrt(E ||z||^2).
pub fn zf_precoders(
    est: &ChannelEstimates,
    s: &Scenario,
    norms: &ZfNorms,
) -> Result<PrecoderSet, PrecodingError> {
    let l_cells = s.cfg.num_cells;
    let k_users = s.cfg.users_per_cell;
    let m = s.cfg.num_antennas;
    if m <= k_users {
        return Err(PrecodingError::InsufficientAntennas { m, k: k_users });
    }
    let mut w = Vec::with_capacity(l_cells * k_users * m);
    let mut norm_constants = Vec::with_capacity(l_cells * k_users);
    for cell in 0..l_cells {
        let mut ghat = CMatrix::zeros(m, k_users);
        for user in 0..k_users {
            for (row, v) in est.g_hat(cell, user).iter().enumerate() {
                ghat.set(row, user, *v);
            }
        }
        let z = gram_pseudoinverse_columns(&ghat)?;
        for user in 0..k_users {
            let nc = norms.e_norm_sq(cell, user);
            if nc <= 0.0 {
                return Err(PrecodingError::DegenerateChannel);
            }
            let inv = 1.0 / nc.sqrt();
            w.extend((0..m).map(|r| z.at(r, user) * inv));
            norm_constants.push(nc);
        }
    }
    Ok(PrecoderSet {
        scheme: Scheme::Zf,
        k_users,
        m_antennas: m,
        w,
        norm_constants,
    })
}

/// Effective downlink channel gains for every (receiver, source) user pair
/// in one block.
#[derive(Debug, Clone)]
pub struct EffectiveGains {
    l_cells: usize,
    k_users: usize,
    /// row-major: [receiver pair][source pair].
    alpha: Vec<Complex64>,
}

impl EffectiveGains {
    #[inline]
    pub fn num_pairs(&self) -> usize {
        self.l_cells * self.k_users
    }

    #[inline]
    pub fn pair(&self, cell: usize, user: usize) -> usize {
        cell * self.k_users + user
    }

    /// Gain between the signal precoded for (`src_cell`, `src_user`) and the
    /// receiver (`cell`, `user`).
    #[inline]
    pub fn alpha(&self, cell: usize, user: usize, src_cell: usize, src_user: usize) -> Complex64 {
        self.alpha[self.pair(cell, user) * self.num_pairs() + self.pair(src_cell, src_user)]
    }

    /// All source gains seen by one receiver, indexed by source pair.
    #[inline]
    pub fn row(&self, cell: usize, user: usize) -> &[Complex64] {
        self.row_by_pair(self.pair(cell, user))
    }

    /// Like [`EffectiveGains::row`], addressed by flat receiver pair index.
    #[inline]
    pub fn row_by_pair(&self, pair: usize) -> &[Complex64] {
        let n = self.num_pairs();
        &self.alpha[pair * n..(pair + 1) * n]
    }

    #[inline]
    pub fn num_cells(&self) -> usize {
        self.l_cells
    }

    #[inline]
    pub fn users_per_cell(&self) -> usize {
        self.k_users
    }

    /// Build directly from a row-major gain table (synthetic inputs).
    pub fn from_rows(l_cells: usize, k_users: usize, alpha: Vec<Complex64>) -> Self {
        assert_eq!(alpha.len(), (l_cells * k_users).pow(2));
        EffectiveGains {
            l_cells,
            k_users,
            alpha,
        }
    }
}

/// alpha = sqrt(rho_dl) g^H w for all receiver/source pairs.
pub fn effective_gains(
    est: &ChannelEstimates,
    precoders: &PrecoderSet,
    s: &Scenario,
    rho_dl: f64,
) -> EffectiveGains {
    let l_cells = s.cfg.num_cells;
    let k_users = s.cfg.users_per_cell;
    let n = l_cells * k_users;
    let sqrt_rho = rho_dl.sqrt();
    let mut alpha = Vec::with_capacity(n * n);
    for cell in 0..l_cells {
        for user in 0..k_users {
            for src_cell in 0..l_cells {
                // channel from receiver (cell, user) to the transmitting BS
                let g = est.g(src_cell, cell, user);
                for src_user in 0..k_users {
                    let w = precoders.w(src_cell, src_user);
                    alpha.push(crate::linalg::inner_product(g, w) * sqrt_rho);
                }
            }
        }
    }
    EffectiveGains {
        l_cells,
        k_users,
        alpha,
    }
}
