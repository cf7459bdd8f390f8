//! Static network construction.
//!
//! A scenario is one draw of the long-term state of a multi-cell network:
//! a square grid of base stations with wrap-around distances, uniform user
//! drops with a minimum serving distance, log-normal shadow fading redrawn
//! until every user is served by its strongest base station, distance-based
//! pathloss, spatial correlation matrices from a Gaussian local scattering
//! model (or scaled identities in uncorrelated mode), orthogonal pilot
//! assignment with a configurable reuse factor, and equal downlink power
//! allocation. Everything downstream treats the scenario as immutable.

use crate::linalg::{CMatrix, HermitianPsd};
use crate::rng::{derive_rng, stream};
use num_complex::Complex64;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::Deserialize;
use std::f64::consts::PI;
use std::fmt;
use thiserror::Error;

/// Log-normal shadow fading standard deviation in dB.
pub const SHADOW_STD_DB: f64 = 7.0;

/// Maximum shadow-fading redraws per user before giving up.
const MAX_SHADOW_REDRAWS: usize = 1000;

/// Draws used by the median cell-edge SNR calibration of the downlink power.
const CALIBRATION_DRAWS: usize = 10_000;

#[derive(Debug, Error)]
pub enum ScenarioError {
    #[error("invalid configuration: {0}")]
    ConfigInvalid(String),
    #[error("distance {distance:.2} m is below the minimum {min:.2} m")]
    BelowMinDistance { distance: f64, min: f64 },
    #[error("shadow fading did not make the serving base station strongest after {0} redraws")]
    NonConvergentShadowing(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FadingMode {
    Correlated,
    Uncorrelated,
}

impl fmt::Display for FadingMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            FadingMode::Correlated => write!(f, "correlated"),
            FadingMode::Uncorrelated => write!(f, "uncorrelated"),
        }
    }
}

/// Resolved network parameters (all linear units, angles in radians).
#[derive(Debug, Clone)]
pub struct NetworkConfig {
    pub num_cells: usize,
    pub area_side_m: f64,
    pub num_antennas: usize,
    pub users_per_cell: usize,
    pub coherence_length: usize,
    pub pilot_reuse: usize,
    pub uplink_power_w: f64,
    pub downlink_max_power_w: f64,
    pub noise_power_ul_w: f64,
    pub noise_power_dl_w: f64,
    pub asd_rad: f64,
    pub min_distance_m: f64,
    pub fading_mode: FadingMode,
}

impl NetworkConfig {
    pub fn tau_p(&self) -> usize {
        self.pilot_reuse * self.users_per_cell
    }

    pub fn tau_d(&self) -> usize {
        self.coherence_length - self.tau_p()
    }

    pub fn validate(&self) -> Result<(), ScenarioError> {
        let fail = |msg: String| Err(ScenarioError::ConfigInvalid(msg));
        if self.num_cells == 0 || self.users_per_cell == 0 || self.num_antennas == 0 {
            return fail("cells, users and antennas must all be at least 1".into());
        }
        let side = (self.num_cells as f64).sqrt().round() as usize;
        if side * side != self.num_cells {
            return fail(format!(
                "num_cells = {} does not form a square grid",
                self.num_cells
            ));
        }
        if self.num_antennas < self.users_per_cell {
            return fail(format!(
                "num_antennas = {} is below users_per_cell = {}",
                self.num_antennas, self.users_per_cell
            ));
        }
        if self.pilot_reuse == 0 || self.num_cells % self.pilot_reuse != 0 {
            return fail(format!(
                "pilot_reuse = {} must divide num_cells = {}",
                self.pilot_reuse, self.num_cells
            ));
        }
        if self.tau_p() + 2 > self.coherence_length {
            return fail(format!(
                "coherence_length = {} leaves fewer than 2 data symbols after {} pilots",
                self.coherence_length,
                self.tau_p()
            ));
        }
        for (name, v) in [
            ("area_side_m", self.area_side_m),
            ("uplink_power_w", self.uplink_power_w),
            ("downlink_max_power_w", self.downlink_max_power_w),
            ("noise_power_ul_w", self.noise_power_ul_w),
            ("noise_power_dl_w", self.noise_power_dl_w),
            ("min_distance_m", self.min_distance_m),
        ] {
            if !(v > 0.0) {
                return fail(format!("{name} must be positive, got {v}"));
            }
        }
        if self.asd_rad < 0.0 {
            return fail("asd must be nonnegative".into());
        }
        Ok(())
    }
}

fn default_num_cells() -> usize {
    4
}
fn default_area_side() -> f64 {
    500.0
}
fn default_num_antennas() -> usize {
    64
}
fn default_users_per_cell() -> usize {
    3
}
fn default_coherence_length() -> usize {
    500
}
fn default_pilot_reuse() -> usize {
    1
}
fn default_uplink_power() -> f64 {
    0.1
}
fn default_noise_dbm() -> f64 {
    -94.0
}
fn default_asd_degrees() -> f64 {
    7.0
}
fn default_min_distance() -> f64 {
    35.0
}
fn default_fading_mode() -> FadingMode {
    FadingMode::Correlated
}

/// Config-file form of [`NetworkConfig`]: dB/degree units, and the downlink
/// power either given directly (`rho_dl_w`) or calibrated so the median
/// cell-edge downlink SNR equals `snr_edge_db` (default 10 dB).
#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetworkConfigSpec {
    #[serde(default = "default_num_cells")]
    pub num_cells: usize,
    #[serde(default = "default_area_side")]
    pub area_side_m: f64,
    #[serde(default = "default_num_antennas")]
    pub num_antennas: usize,
    #[serde(default = "default_users_per_cell")]
    pub users_per_cell: usize,
    #[serde(default = "default_coherence_length")]
    pub coherence_length: usize,
    #[serde(default = "default_pilot_reuse")]
    pub pilot_reuse: usize,
    #[serde(default = "default_uplink_power")]
    pub uplink_power_w: f64,
    #[serde(default = "default_noise_dbm")]
    pub noise_power_dbm: f64,
    #[serde(default = "default_asd_degrees")]
    pub asd_degrees: f64,
    #[serde(default = "default_min_distance")]
    pub min_distance_m: f64,
    #[serde(default = "default_fading_mode")]
    pub fading_mode: FadingMode,
    #[serde(default)]
    pub snr_edge_db: Option<f64>,
    #[serde(default)]
    pub rho_dl_w: Option<f64>,
}

impl Default for NetworkConfigSpec {
    fn default() -> Self {
        NetworkConfigSpec {
            num_cells: default_num_cells(),
            area_side_m: default_area_side(),
            num_antennas: default_num_antennas(),
            users_per_cell: default_users_per_cell(),
            coherence_length: default_coherence_length(),
            pilot_reuse: default_pilot_reuse(),
            uplink_power_w: default_uplink_power(),
            noise_power_dbm: default_noise_dbm(),
            asd_degrees: default_asd_degrees(),
            min_distance_m: default_min_distance(),
            fading_mode: default_fading_mode(),
            snr_edge_db: None,
            rho_dl_w: None,
        }
    }
}

impl NetworkConfigSpec {
    pub fn resolve(&self) -> Result<NetworkConfig, ScenarioError> {
        let noise_w = 10f64.powf((self.noise_power_dbm - 30.0) / 10.0);
        let rho_dl = match self.rho_dl_w {
            Some(r) => r,
            None => {
                let snr_db = self.snr_edge_db.unwrap_or(10.0);
                calibrate_rho_dl(
                    snr_db,
                    self.area_side_m,
                    self.num_cells,
                    noise_w,
                    self.min_distance_m,
                )?
            }
        };
        let cfg = NetworkConfig {
            num_cells: self.num_cells,
            area_side_m: self.area_side_m,
            num_antennas: self.num_antennas,
            users_per_cell: self.users_per_cell,
            coherence_length: self.coherence_length,
            pilot_reuse: self.pilot_reuse,
            uplink_power_w: self.uplink_power_w,
            downlink_max_power_w: rho_dl,
            noise_power_ul_w: noise_w,
            noise_power_dl_w: noise_w,
            asd_rad: self.asd_degrees.to_radians(),
            min_distance_m: self.min_distance_m,
            fading_mode: self.fading_mode,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Set the downlink power budget so that the median (over shadow fading) of
/// rho_dl * beta(cell-edge) / noise equals the target SNR, with the cell edge
/// at half the cell diagonal. Uses a fixed internal stream so the result is a
/// pure function of the configuration.
pub fn calibrate_rho_dl(
    target_snr_db: f64,
    area_side_m: f64,
    num_cells: usize,
    noise_dl_w: f64,
    min_distance_m: f64,
) -> Result<f64, ScenarioError> {
    let cell_side = area_side_m / (num_cells as f64).sqrt();
    let d_edge = cell_side * std::f64::consts::SQRT_2 / 2.0;
    let base_db = pathloss_db(d_edge, 0.0, min_distance_m)?;
    let mut rng = derive_rng(0, &[stream::CALIBRATION]);
    let mut gains: Vec<f64> = (0..CALIBRATION_DRAWS)
        .map(|_| {
            let f: f64 = rng.sample::<f64, _>(StandardNormal) * SHADOW_STD_DB;
            10f64.powf((base_db + f) / 10.0)
        })
        .collect();
    gains.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let median = 0.5 * (gains[CALIBRATION_DRAWS / 2 - 1] + gains[CALIBRATION_DRAWS / 2]);
    Ok(10f64.powf(target_snr_db / 10.0) * noise_dl_w / median)
}

/// Minimum distance between `a` and `b` over the nine wrap-around copies of
/// `b` in a square area of the given side.
pub fn wrap_distance(a: (f64, f64), b: (f64, f64), area_side: f64) -> f64 {
    let (dx, dy) = wrap_displacement(a, b, area_side);
    (dx * dx + dy * dy).sqrt()
}

/// Displacement (b - a) for the wrap-around copy of `b` closest to `a`.
pub fn wrap_displacement(a: (f64, f64), b: (f64, f64), area_side: f64) -> (f64, f64) {
    let mut best = (f64::INFINITY, (0.0, 0.0));
    for sx in [-1.0, 0.0, 1.0] {
        for sy in [-1.0, 0.0, 1.0] {
            let dx = b.0 + sx * area_side - a.0;
            let dy = b.1 + sy * area_side - a.1;
            let d2 = dx * dx + dy * dy;
            if d2 < best.0 {
                best = (d2, (dx, dy));
            }
        }
    }
    best.1
}

/// Large-scale gain in dB at distance `d_m`: -35 - 36.7 log10(d / 1 m) plus
/// the shadow-fading realization.
pub fn pathloss_db(d_m: f64, shadow_db: f64, min_distance_m: f64) -> Result<f64, ScenarioError> {
    if d_m < min_distance_m {
        return Err(ScenarioError::BelowMinDistance {
            distance: d_m,
            min: min_distance_m,
        });
    }
    Ok(-35.0 - 36.7 * d_m.log10() + shadow_db)
}

/// Gaussian local scattering correlation matrix for a half-wavelength-spaced
/// uniform linear array: entry (m, n) is
/// beta * exp(j pi (m-n) sin(aoa)) * exp(-asd^2/2 * (pi (m-n) cos(aoa))^2).
pub fn local_scattering_r(
    beta: f64,
    nominal_aoa_rad: f64,
    asd_rad: f64,
    m_antennas: usize,
) -> HermitianPsd {
    assert!(m_antennas >= 1);
    let sin_a = nominal_aoa_rad.sin();
    let cos_a = nominal_aoa_rad.cos();
    // Toeplitz: depends only on the antenna index difference
    let col: Vec<Complex64> = (0..m_antennas)
        .map(|d| {
            let delta = PI * d as f64;
            let phase = delta * sin_a;
            let damp = (-0.5 * (asd_rad * delta * cos_a).powi(2)).exp();
            Complex64::from_polar(beta * damp, phase)
        })
        .collect();
    let mat = CMatrix::from_fn(m_antennas, m_antennas, |r, c| {
        if r >= c {
            col[r - c]
        } else {
            col[c - r].conj()
        }
    });
    HermitianPsd::new_unchecked(mat)
}

/// Orthogonal pilot sequences (scaled DFT columns) and the cell-group /
/// user-to-column assignment.
#[derive(Debug, Clone)]
pub struct PilotBook {
    pub tau_p: usize,
    sequences: CMatrix,
    group_of_cell: Vec<usize>,
    users_per_cell: usize,
}

impl PilotBook {
    /// Pilot sequence assigned to user `k` of cell `l` (column of the DFT
    /// matrix; squared norm tau_p).
    pub fn sequence(&self, cell: usize, user: usize) -> Vec<Complex64> {
        let col = self.column_of(cell, user);
        (0..self.tau_p).map(|t| self.sequences.at(t, col)).collect()
    }

    /// Column index: cells in the same group reuse the same block of
    /// columns with identical user numbering.
    pub fn column_of(&self, cell: usize, user: usize) -> usize {
        self.group_of_cell[cell] * self.users_per_cell + user
    }

    pub fn group_of_cell(&self, cell: usize) -> usize {
        self.group_of_cell[cell]
    }
}

/// Pilot book for the given configuration: tau_p = f K sequences from a
/// tau_p x tau_p DFT matrix, cells grouped round-robin by index.
pub fn assign_pilots(cfg: &NetworkConfig) -> Result<PilotBook, ScenarioError> {
    cfg.validate()?;
    Ok(assign_pilots_unvalidated(cfg))
}

/// One static network draw. Immutable once built; freely shared across
/// threads.
#[derive(Debug, Clone)]
pub struct Scenario {
    pub cfg: NetworkConfig,
    pub bs_positions: Vec<(f64, f64)>,
    pub user_positions: Vec<(f64, f64)>,
    /// beta[bs][cell][user], flattened; linear large-scale gains.
    beta: Vec<f64>,
    /// shadow fading in dB, same layout as beta.
    shadow_db: Vec<f64>,
    /// spatial correlation matrices, same layout; None in uncorrelated mode.
    r: Option<Vec<HermitianPsd>>,
    pub pilot_book: PilotBook,
    /// cells sharing pilots with cell l (including l itself).
    partners: Vec<Vec<usize>>,
    /// downlink power fractions per (cell, user).
    eta: Vec<f64>,
}

impl Scenario {
    #[inline]
    fn link_idx(&self, bs: usize, cell: usize, user: usize) -> usize {
        (bs * self.cfg.num_cells + cell) * self.cfg.users_per_cell + user
    }

    #[inline]
    pub fn beta(&self, bs: usize, cell: usize, user: usize) -> f64 {
        self.beta[self.link_idx(bs, cell, user)]
    }

    pub fn shadow_db(&self, bs: usize, cell: usize, user: usize) -> f64 {
        self.shadow_db[self.link_idx(bs, cell, user)]
    }

    /// Correlation matrix of the channel between BS `bs` and user
    /// (`cell`, `user`); None in uncorrelated mode (use `beta` instead).
    pub fn r(&self, bs: usize, cell: usize, user: usize) -> Option<&HermitianPsd> {
        self.r.as_ref().map(|v| &v[self.link_idx(bs, cell, user)])
    }

    /// Cells sharing cell `l`'s pilot subset, including `l` itself.
    pub fn pilot_partners(&self, cell: usize) -> &[usize] {
        &self.partners[cell]
    }

    #[inline]
    pub fn eta(&self, cell: usize, user: usize) -> f64 {
        self.eta[cell * self.cfg.users_per_cell + user]
    }

    pub fn etas(&self) -> &[f64] {
        &self.eta
    }

    /// Pilot power of user (`cell`, `user`); uniform across users.
    #[inline]
    pub fn pilot_power(&self, _cell: usize, _user: usize) -> f64 {
        self.cfg.uplink_power_w
    }

    pub fn num_pairs(&self) -> usize {
        self.cfg.num_cells * self.cfg.users_per_cell
    }

    #[inline]
    pub fn pair_index(&self, cell: usize, user: usize) -> usize {
        cell * self.cfg.users_per_cell + user
    }

    /// Copy of this scenario with explicit correlation matrices beta I and
    /// the mode switched to correlated. Lets the general matrix-based
    /// estimation path run on an uncorrelated draw for cross-checks.
    pub fn materialize_correlation(&self) -> Scenario {
        let mut out = self.clone();
        if out.r.is_none() {
            let m = out.cfg.num_antennas;
            let mats = out
                .beta
                .iter()
                .map(|&b| HermitianPsd::new_unchecked(CMatrix::identity(m).scaled(b)))
                .collect();
            out.r = Some(mats);
        }
        out.cfg.fading_mode = FadingMode::Correlated;
        out
    }
}

/// Scenario with hand-picked large-scale gains (and optionally correlation
/// matrices), bypassing geometry and shadowing. Intended for controlled
/// cross-checks; positions are placed on the usual grid but the gains are
/// taken as given. `beta` is indexed [bs][cell][user], flattened; `r`, when
/// given, uses the same layout and must have trace beta * M per link.
pub fn synthetic_scenario(
    cfg: &NetworkConfig,
    beta: Vec<f64>,
    r: Option<Vec<HermitianPsd>>,
) -> Result<Scenario, ScenarioError> {
    let l_cells = cfg.num_cells;
    let k_users = cfg.users_per_cell;
    let n_links = l_cells * l_cells * k_users;
    if beta.len() != n_links {
        return Err(ScenarioError::ConfigInvalid(format!(
            "expected {} gains, got {}",
            n_links,
            beta.len()
        )));
    }
    if let Some(mats) = &r {
        if mats.len() != n_links {
            return Err(ScenarioError::ConfigInvalid(format!(
                "expected {} correlation matrices, got {}",
                n_links,
                mats.len()
            )));
        }
    }
    match (cfg.fading_mode, r.is_some()) {
        (FadingMode::Correlated, false) => {
            return Err(ScenarioError::ConfigInvalid(
                "correlated mode needs correlation matrices".into(),
            ))
        }
        (FadingMode::Uncorrelated, true) => {
            return Err(ScenarioError::ConfigInvalid(
                "uncorrelated mode must not carry correlation matrices".into(),
            ))
        }
        _ => {}
    }
    let side_cells = (l_cells as f64).sqrt().round() as usize;
    let cell_side = cfg.area_side_m / side_cells as f64;
    let bs_positions: Vec<(f64, f64)> = (0..l_cells)
        .map(|l| {
            let cx = l % side_cells;
            let cy = l / side_cells;
            ((cx as f64 + 0.5) * cell_side, (cy as f64 + 0.5) * cell_side)
        })
        .collect();
    let pilot_book = assign_pilots_unvalidated(cfg);
    let partners: Vec<Vec<usize>> = (0..l_cells)
        .map(|l| {
            (0..l_cells)
                .filter(|&l2| pilot_book.group_of_cell(l2) == pilot_book.group_of_cell(l))
                .collect()
        })
        .collect();
    Ok(Scenario {
        cfg: cfg.clone(),
        user_positions: bs_positions.iter().cycle().take(l_cells * k_users).copied().collect(),
        bs_positions,
        beta,
        shadow_db: vec![0.0; n_links],
        r,
        pilot_book,
        partners,
        eta: vec![1.0 / k_users as f64; l_cells * k_users],
    })
}

fn assign_pilots_unvalidated(cfg: &NetworkConfig) -> PilotBook {
    let tau_p = cfg.tau_p();
    let sequences = CMatrix::from_fn(tau_p, tau_p, |t, c| {
        Complex64::from_polar(1.0, -2.0 * PI * (t * c) as f64 / tau_p as f64)
    });
    PilotBook {
        tau_p,
        sequences,
        group_of_cell: (0..cfg.num_cells).map(|l| l % cfg.pilot_reuse).collect(),
        users_per_cell: cfg.users_per_cell,
    }
}

/// Build one scenario draw: grid of base stations, uniform user drops with a
/// minimum serving distance, shadow fading redrawn until the serving base
/// station has the largest gain, correlation matrices per fading mode, pilot
/// assignment, and equal power fractions 1/K.
pub fn build_scenario<R: Rng + ?Sized>(
    cfg: &NetworkConfig,
    rng: &mut R,
) -> Result<Scenario, ScenarioError> {
    cfg.validate()?;
    let l_cells = cfg.num_cells;
    let k_users = cfg.users_per_cell;
    let side_cells = (l_cells as f64).sqrt().round() as usize;
    let cell_side = cfg.area_side_m / side_cells as f64;

    let bs_positions: Vec<(f64, f64)> = (0..l_cells)
        .map(|l| {
            let cx = l % side_cells;
            let cy = l / side_cells;
            (
                (cx as f64 + 0.5) * cell_side,
                (cy as f64 + 0.5) * cell_side,
            )
        })
        .collect();

    let n_links = l_cells * l_cells * k_users;
    let mut user_positions = vec![(0.0, 0.0); l_cells * k_users];
    let mut beta = vec![0.0; n_links];
    let mut shadow_db = vec![0.0; n_links];

    for cell in 0..l_cells {
        let origin = bs_positions[cell];
        let corner = (origin.0 - cell_side / 2.0, origin.1 - cell_side / 2.0);
        for user in 0..k_users {
            // uniform position in the serving cell, at least min_distance out
            let pos = loop {
                let p = (
                    corner.0 + rng.random::<f64>() * cell_side,
                    corner.1 + rng.random::<f64>() * cell_side,
                );
                if wrap_distance(p, origin, cfg.area_side_m) >= cfg.min_distance_m {
                    break p;
                }
            };
            user_positions[cell * k_users + user] = pos;

            let distances: Vec<f64> = (0..l_cells)
                .map(|bs| wrap_distance(pos, bs_positions[bs], cfg.area_side_m))
                .collect();

            // redraw shadow fading (all links of this user) until the
            // serving gain is the largest
            let mut accepted = None;
            for _ in 0..MAX_SHADOW_REDRAWS {
                let shadows: Vec<f64> = (0..l_cells)
                    .map(|_| rng.sample::<f64, _>(StandardNormal) * SHADOW_STD_DB)
                    .collect();
                let gains_db: Vec<f64> = (0..l_cells)
                    .map(|bs| pathloss_db(distances[bs], shadows[bs], cfg.min_distance_m))
                    .collect::<Result<_, _>>()?;
                let serving = gains_db[cell];
                if gains_db
                    .iter()
                    .enumerate()
                    .all(|(bs, &g)| bs == cell || g < serving)
                {
                    accepted = Some((shadows, gains_db));
                    break;
                }
            }
            let (shadows, gains_db) =
                accepted.ok_or(ScenarioError::NonConvergentShadowing(MAX_SHADOW_REDRAWS))?;
            for bs in 0..l_cells {
                let idx = (bs * l_cells + cell) * k_users + user;
                shadow_db[idx] = shadows[bs];
                beta[idx] = 10f64.powf(gains_db[bs] / 10.0);
            }
        }
    }

    let r = match cfg.fading_mode {
        FadingMode::Uncorrelated => None,
        FadingMode::Correlated => {
            let mut mats = Vec::with_capacity(n_links);
            for bs in 0..l_cells {
                for cell in 0..l_cells {
                    for user in 0..k_users {
                        let idx = (bs * l_cells + cell) * k_users + user;
                        let (dx, dy) = wrap_displacement(
                            bs_positions[bs],
                            user_positions[cell * k_users + user],
                            cfg.area_side_m,
                        );
                        let aoa = dy.atan2(dx);
                        mats.push(local_scattering_r(
                            beta[idx],
                            aoa,
                            cfg.asd_rad,
                            cfg.num_antennas,
                        ));
                    }
                }
            }
            Some(mats)
        }
    };

    let pilot_book = assign_pilots(cfg)?;
    let partners: Vec<Vec<usize>> = (0..l_cells)
        .map(|l| {
            (0..l_cells)
                .filter(|&l2| pilot_book.group_of_cell(l2) == pilot_book.group_of_cell(l))
                .collect()
        })
        .collect();

    Ok(Scenario {
        cfg: cfg.clone(),
        bs_positions,
        user_positions,
        beta,
        shadow_db,
        r,
        pilot_book,
        partners,
        eta: vec![1.0 / k_users as f64; l_cells * k_users],
    })
}
