//! Snapshot data: generation, ingestion, perturbation.
//!
//! A [`SnapshotSet`] holds `M` pairs `(x, y = F(x))` together with quadrature
//! weights. Pairs come from time integration (pendulum, Lorenz), from exact
//! maps (circle and torus rotations), or from files.

use ndarray::{Array2, ArrayView2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Paired states `(x^(m), y^(m))` with quadrature weights, stored row-wise.
#[derive(Debug, Clone, PartialEq)]
pub struct SnapshotSet {
    x: Array2<f64>,
    y: Array2<f64>,
    weights: Vec<f64>,
}

impl SnapshotSet {
    /// Builds a snapshot set, validating shapes and weight positivity.
    pub fn new(x: Array2<f64>, y: Array2<f64>, weights: Vec<f64>) -> Result<Self> {
        if x.dim() != y.dim() {
            return Err(Error::Domain(format!(
                "X and Y shapes differ: {:?} vs {:?}",
                x.dim(),
                y.dim()
            )));
        }
        let (m, d) = x.dim();
        if m == 0 || d == 0 {
            return Err(Error::Domain("snapshot set must have M >= 1, d >= 1".into()));
        }
        if weights.len() != m {
            return Err(Error::Domain(format!(
                "weight count {} does not match pair count {}",
                weights.len(),
                m
            )));
        }
        if !weights.iter().all(|w| w.is_finite() && *w > 0.0) {
            return Err(Error::Domain("weights must be strictly positive and finite".into()));
        }
        Ok(SnapshotSet { x, y, weights })
    }

    /// Builds a snapshot set with the default uniform weights `w_m = 1/M`.
    pub fn with_uniform_weights(x: Array2<f64>, y: Array2<f64>) -> Result<Self> {
        let m = x.nrows();
        if m == 0 {
            return Err(Error::Domain("snapshot set must have M >= 1".into()));
        }
        let w = 1.0 / m as f64;
        Self::new(x, y, vec![w; m])
    }

    pub fn count(&self) -> usize {
        self.x.nrows()
    }

    pub fn dim(&self) -> usize {
        self.x.ncols()
    }

    pub fn x(&self) -> ArrayView2<'_, f64> {
        self.x.view()
    }

    pub fn y(&self) -> ArrayView2<'_, f64> {
        self.y.view()
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn total_weight(&self) -> f64 {
        crate::util::kahan_sum(self.weights.iter().copied())
    }

    /// True when `Y[m] == X[m+1]` bit-for-bit for every consecutive pair,
    /// i.e. the set stores one unbroken trajectory.
    pub fn is_single_trajectory(&self) -> bool {
        (0..self.count().saturating_sub(1)).all(|m| self.y.row(m) == self.x.row(m + 1))
    }

    /// Replaces the weights with a positively scaled copy summing to one.
    pub fn normalize_weights(&mut self) {
        let total = self.total_weight();
        for w in &mut self.weights {
            *w /= total;
        }
    }
}

/// Which dynamical system to sample.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SystemKind {
    /// `dx1 = x2, dx2 = -sin(3 x1)` with `x1` periodic on `[-pi/3, pi/3)`.
    Pendulum,
    /// `dx = 10(y-x), dy = x(28-z)-y, dz = xy - 8z/3`.
    Lorenz,
    /// Rotation by `theta` on the unit circle embedded in R^2.
    Rotation2d { theta: f64 },
    /// Two-frequency rotation embedded in R^4.
    TorusRotation { theta1: f64, theta2: f64 },
}

/// Initial-condition placement. For the rotation systems the coordinates are
/// angles; `UniformGrid` places points evenly (half-open) along each angle.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitScheme {
    UniformGrid { lo: Vec<f64>, hi: Vec<f64> },
    Fixed { point: Vec<f64> },
    Random { lo: Vec<f64>, hi: Vec<f64>, seed: u64 },
}

/// Sampling configuration for one simulated data set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SystemConfig {
    pub kind: SystemKind,
    pub dt_sample: f64,
    pub t_final: f64,
    pub n_trajectories: usize,
    pub init: InitScheme,
    #[serde(default)]
    pub burn_in: usize,
}

impl SystemConfig {
    /// Number of sampled states per trajectory, `round(t_final/dt) + 1`.
    pub fn samples_per_trajectory(&self) -> usize {
        (self.t_final / self.dt_sample).round() as usize + 1
    }

    fn validate(&self) -> Result<()> {
        if !(self.dt_sample > 0.0) {
            return Err(Error::Domain("dt_sample must be positive".into()));
        }
        if !(self.t_final > 0.0) {
            return Err(Error::Domain("t_final must be positive".into()));
        }
        if self.n_trajectories == 0 {
            return Err(Error::Domain("n_trajectories must be at least 1".into()));
        }
        let samples = self.samples_per_trajectory();
        if self.burn_in + 1 >= samples {
            return Err(Error::Domain(format!(
                "burn_in = {} leaves no pairs out of {} samples",
                self.burn_in, samples
            )));
        }
        Ok(())
    }
}

/// Classical RK4 over `[0, dt]` split into `substeps` equal internal steps.
fn rk4_advance<const D: usize>(
    deriv: &impl Fn(&[f64; D]) -> [f64; D],
    mut state: [f64; D],
    dt: f64,
    substeps: usize,
) -> [f64; D] {
    let h = dt / substeps as f64;
    for _ in 0..substeps {
        let k1 = deriv(&state);
        let mut s = state;
        for i in 0..D {
            s[i] = state[i] + 0.5 * h * k1[i];
        }
        let k2 = deriv(&s);
        for i in 0..D {
            s[i] = state[i] + 0.5 * h * k2[i];
        }
        let k3 = deriv(&s);
        for i in 0..D {
            s[i] = state[i] + h * k3[i];
        }
        let k4 = deriv(&s);
        for i in 0..D {
            state[i] += h / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]);
        }
    }
    state
}

/// Integrates one trajectory, returning `n_samples` states sampled every
/// `dt_sample` (the initial state included). `substeps` internal RK4 steps
/// are taken per sample interval.
pub(crate) fn integrate_sampled<const D: usize>(
    deriv: &impl Fn(&[f64; D]) -> [f64; D],
    x0: [f64; D],
    dt_sample: f64,
    n_samples: usize,
    substeps: usize,
    trajectory: usize,
) -> Result<Vec<[f64; D]>> {
    let mut states = Vec::with_capacity(n_samples);
    states.push(x0);
    let mut state = x0;
    for step in 1..n_samples {
        state = rk4_advance(deriv, state, dt_sample, substeps);
        if !state.iter().all(|v| v.is_finite()) {
            return Err(Error::IntegrationDiverged {
                trajectory,
                time: step as f64 * dt_sample,
            });
        }
        states.push(state);
    }
    Ok(states)
}

/// Internal RK4 steps per sampling interval; keeps `h <= dt_sample/10`.
pub const DEFAULT_SUBSTEPS: usize = 10;

const PENDULUM_PERIOD: f64 = 2.0 * std::f64::consts::FRAC_PI_3;

fn pendulum_rhs(s: &[f64; 2]) -> [f64; 2] {
    [s[1], -(3.0 * s[0]).sin()]
}

fn lorenz_rhs(s: &[f64; 3]) -> [f64; 3] {
    [
        10.0 * (s[1] - s[0]),
        s[0] * (28.0 - s[2]) - s[1],
        s[0] * s[1] - 8.0 * s[2] / 3.0,
    ]
}

/// Wraps an angle-like coordinate into `[-pi/3, pi/3)`.
pub fn wrap_pendulum_angle(x: f64) -> f64 {
    let shifted = x + std::f64::consts::FRAC_PI_3;
    let wrapped = shifted - PENDULUM_PERIOD * (shifted / PENDULUM_PERIOD).floor();
    wrapped - std::f64::consts::FRAC_PI_3
}

fn initial_points(init: &InitScheme, dim: usize, n: usize) -> Result<Vec<Vec<f64>>> {
    match init {
        InitScheme::UniformGrid { lo, hi } => {
            if lo.len() != dim || hi.len() != dim {
                return Err(Error::Domain(format!(
                    "uniform_grid box must have dimension {dim}"
                )));
            }
            let side = (n as f64).powf(1.0 / dim as f64).round() as usize;
            if side.pow(dim as u32) != n {
                return Err(Error::Domain(format!(
                    "n_trajectories = {n} is not a perfect power for a {dim}-d grid"
                )));
            }
            let mut points = Vec::with_capacity(n);
            let mut index = vec![0usize; dim];
            loop {
                let point: Vec<f64> = (0..dim)
                    .map(|k| {
                        if side == 1 {
                            0.5 * (lo[k] + hi[k])
                        } else {
                            lo[k] + (hi[k] - lo[k]) * index[k] as f64 / (side - 1) as f64
                        }
                    })
                    .collect();
                points.push(point);
                let mut carry = dim;
                for k in (0..dim).rev() {
                    index[k] += 1;
                    if index[k] < side {
                        carry = k;
                        break;
                    }
                    index[k] = 0;
                }
                if carry == dim {
                    break;
                }
            }
            Ok(points)
        }
        InitScheme::Fixed { point } => {
            if point.len() != dim {
                return Err(Error::Domain(format!("fixed point must have dimension {dim}")));
            }
            if n != 1 {
                return Err(Error::Domain(
                    "fixed init requires n_trajectories = 1".into(),
                ));
            }
            Ok(vec![point.clone()])
        }
        InitScheme::Random { lo, hi, seed } => {
            if lo.len() != dim || hi.len() != dim {
                return Err(Error::Domain(format!("random box must have dimension {dim}")));
            }
            let mut rng = ChaCha8Rng::seed_from_u64(*seed);
            Ok((0..n)
                .map(|_| {
                    (0..dim)
                        .map(|k| lo[k] + (hi[k] - lo[k]) * rng.random::<f64>())
                        .collect()
                })
                .collect())
        }
    }
}

/// Concatenates per-trajectory state sequences into consecutive pairs with
/// uniform weights, dropping the first `burn_in` states of each trajectory.
fn pair_trajectories<const D: usize>(
    trajectories: Vec<Vec<[f64; D]>>,
    burn_in: usize,
) -> Result<SnapshotSet> {
    let pairs: usize = trajectories
        .iter()
        .map(|t| t.len().saturating_sub(burn_in + 1))
        .sum();
    let mut x = Array2::zeros((pairs, D));
    let mut y = Array2::zeros((pairs, D));
    let mut row = 0;
    for traj in &trajectories {
        for t in burn_in..traj.len() - 1 {
            for k in 0..D {
                x[[row, k]] = traj[t][k];
                y[[row, k]] = traj[t + 1][k];
            }
            row += 1;
        }
    }
    SnapshotSet::with_uniform_weights(x, y)
}

/// Simulates the nonlinear pendulum with fixed-step RK4 and wraps the
/// periodic coordinate before storage.
pub fn simulate_pendulum(cfg: &SystemConfig) -> Result<SnapshotSet> {
    if cfg.kind != SystemKind::Pendulum {
        return Err(Error::Domain("config kind must be pendulum".into()));
    }
    cfg.validate()?;
    let samples = cfg.samples_per_trajectory();
    let inits = initial_points(&cfg.init, 2, cfg.n_trajectories)?;
    let trajectories: Vec<Vec<[f64; 2]>> = inits
        .par_iter()
        .enumerate()
        .map(|(t, p)| {
            let mut states = integrate_sampled(
                &pendulum_rhs,
                [p[0], p[1]],
                cfg.dt_sample,
                samples,
                DEFAULT_SUBSTEPS,
                t,
            )?;
            for s in &mut states {
                s[0] = wrap_pendulum_angle(s[0]);
            }
            Ok(states)
        })
        .collect::<Result<_>>()?;
    pair_trajectories(trajectories, cfg.burn_in)
}

/// Simulates the Lorenz system; burn-in states are removed before pairing.
pub fn simulate_lorenz(cfg: &SystemConfig) -> Result<SnapshotSet> {
    if cfg.kind != SystemKind::Lorenz {
        return Err(Error::Domain("config kind must be lorenz".into()));
    }
    cfg.validate()?;
    let samples = cfg.samples_per_trajectory();
    let inits = initial_points(&cfg.init, 3, cfg.n_trajectories)?;
    let trajectories: Vec<Vec<[f64; 3]>> = inits
        .par_iter()
        .enumerate()
        .map(|(t, p)| {
            integrate_sampled(
                &lorenz_rhs,
                [p[0], p[1], p[2]],
                cfg.dt_sample,
                samples,
                DEFAULT_SUBSTEPS,
                t,
            )
        })
        .collect::<Result<_>>()?;
    pair_trajectories(trajectories, cfg.burn_in)
}

/// Applies the exact rotation map: no integrator, pairs are `(x, Rx)`.
///
/// Initial conditions are angles (one per circle factor); each trajectory
/// produces `round(t_final/dt_sample)` pairs.
pub fn simulate_rotation(cfg: &SystemConfig) -> Result<SnapshotSet> {
    cfg.validate()?;
    match cfg.kind {
        SystemKind::Rotation2d { theta } => {
            let samples = cfg.samples_per_trajectory();
            let phases = initial_angles(&cfg.init, 1, cfg.n_trajectories)?;
            let trajectories: Vec<Vec<[f64; 2]>> = phases
                .iter()
                .map(|p| {
                    (0..samples)
                        .map(|t| {
                            let phi = p[0] + t as f64 * theta;
                            [phi.cos(), phi.sin()]
                        })
                        .collect()
                })
                .collect();
            pair_trajectories(trajectories, cfg.burn_in)
        }
        SystemKind::TorusRotation { theta1, theta2 } => {
            let samples = cfg.samples_per_trajectory();
            let phases = initial_angles(&cfg.init, 2, cfg.n_trajectories)?;
            let trajectories: Vec<Vec<[f64; 4]>> = phases
                .iter()
                .map(|p| {
                    (0..samples)
                        .map(|t| {
                            let phi1 = p[0] + t as f64 * theta1;
                            let phi2 = p[1] + t as f64 * theta2;
                            [phi1.cos(), phi1.sin(), phi2.cos(), phi2.sin()]
                        })
                        .collect()
                })
                .collect();
            pair_trajectories(trajectories, cfg.burn_in)
        }
        _ => Err(Error::Domain(
            "config kind must be rotation2d or torus_rotation".into(),
        )),
    }
}

/// Initial angles for the rotation systems. `UniformGrid` spaces
/// `n_trajectories` phases half-open over the box (so antipodal duplicates
/// never occur on the circle).
fn initial_angles(init: &InitScheme, angles: usize, n: usize) -> Result<Vec<Vec<f64>>> {
    match init {
        InitScheme::UniformGrid { lo, hi } => {
            if lo.len() != angles || hi.len() != angles {
                return Err(Error::Domain(format!(
                    "uniform_grid box must have {angles} angle(s)"
                )));
            }
            if angles == 1 {
                Ok((0..n)
                    .map(|m| vec![lo[0] + (hi[0] - lo[0]) * m as f64 / n as f64])
                    .collect())
            } else {
                let side = (n as f64).sqrt().round() as usize;
                if side * side != n {
                    return Err(Error::Domain(format!(
                        "n_trajectories = {n} is not a perfect square for a torus grid"
                    )));
                }
                let mut out = Vec::with_capacity(n);
                for i in 0..side {
                    for j in 0..side {
                        out.push(vec![
                            lo[0] + (hi[0] - lo[0]) * i as f64 / side as f64,
                            lo[1] + (hi[1] - lo[1]) * j as f64 / side as f64,
                        ]);
                    }
                }
                Ok(out)
            }
        }
        InitScheme::Fixed { point } => {
            if point.len() != angles {
                return Err(Error::Domain(format!("fixed init must have {angles} angle(s)")));
            }
            if n != 1 {
                return Err(Error::Domain(
                    "fixed init requires n_trajectories = 1".into(),
                ));
            }
            Ok(vec![point.clone()])
        }
        InitScheme::Random { lo, hi, seed } => {
            if lo.len() != angles || hi.len() != angles {
                return Err(Error::Domain(format!("random box must have {angles} angle(s)")));
            }
            let mut rng = ChaCha8Rng::seed_from_u64(*seed);
            Ok((0..n)
                .map(|_| {
                    (0..angles)
                        .map(|k| lo[k] + (hi[k] - lo[k]) * rng.random::<f64>())
                        .collect()
                })
                .collect())
        }
    }
}

/// Dispatches on `cfg.kind`.
pub fn simulate(cfg: &SystemConfig) -> Result<SnapshotSet> {
    match cfg.kind {
        SystemKind::Pendulum => simulate_pendulum(cfg),
        SystemKind::Lorenz => simulate_lorenz(cfg),
        SystemKind::Rotation2d { .. } | SystemKind::TorusRotation { .. } => simulate_rotation(cfg),
    }
}

/// Adds i.i.d. zero-mean Gaussian noise to every entry of `X` and `Y` with
/// standard deviation `level * RMS(clean X entries)`. Weights are unchanged;
/// the output is deterministic in `(S, level, seed)`.
pub fn add_noise(s: &SnapshotSet, level: f64, seed: u64) -> Result<SnapshotSet> {
    if !(level >= 0.0) {
        return Err(Error::Domain(format!("noise level must be >= 0, got {level}")));
    }
    if level == 0.0 {
        return Ok(s.clone());
    }
    let rms = (s.x.iter().map(|v| v * v).sum::<f64>() / s.x.len() as f64).sqrt();
    let std = level * rms;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut x = s.x.clone();
    let mut y = s.y.clone();
    for v in x.iter_mut() {
        *v += std * rng.sample::<f64, _>(StandardNormal);
    }
    for v in y.iter_mut() {
        *v += std * rng.sample::<f64, _>(StandardNormal);
    }
    SnapshotSet::new(x, y, s.weights.clone())
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn pendulum_energy(x1: f64, x2: f64) -> f64 {
        0.5 * x2 * x2 + (1.0 - (3.0 * x1).cos()) / 3.0
    }

    fn pendulum_cfg(n_trajectories: usize, init: InitScheme, t_final: f64) -> SystemConfig {
        SystemConfig {
            kind: SystemKind::Pendulum,
            dt_sample: 0.1,
            t_final,
            n_trajectories,
            init,
            burn_in: 0,
        }
    }

    #[test]
    fn pendulum_grid_pair_count() {
        let cfg = pendulum_cfg(
            400,
            InitScheme::UniformGrid {
                lo: vec![-0.6, -0.6],
                hi: vec![0.6, 0.6],
            },
            10.0,
        );
        let s = simulate_pendulum(&cfg).unwrap();
        assert_eq!(s.count(), 40_000);
        assert_eq!(s.dim(), 2);
        assert_abs_diff_eq!(s.total_weight(), 1.0, epsilon = 1e-12);
    }

    #[test]
    fn pendulum_equilibrium_is_fixed() {
        let cfg = pendulum_cfg(1, InitScheme::Fixed { point: vec![0.0, 0.0] }, 10.0);
        let s = simulate_pendulum(&cfg).unwrap();
        assert!(s.x.iter().all(|v| *v == 0.0));
        assert!(s.y.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn pendulum_energy_conserved_against_refined_oracle() {
        let cfg = pendulum_cfg(1, InitScheme::Fixed { point: vec![0.1, 0.0] }, 1.0);
        let s = simulate_pendulum(&cfg).unwrap();
        assert_eq!(s.count(), 10);
        let e0 = pendulum_energy(0.1, 0.0);
        for m in 0..s.count() {
            let e = pendulum_energy(s.x()[[m, 0]], s.x()[[m, 1]]);
            assert!((e - e0).abs() / e0 < 1e-6, "energy drift at pair {m}");
        }
        // Oracle: same trajectory at a tenth of the internal step.
        let fine = integrate_sampled(&pendulum_rhs, [0.1, 0.0], 0.1, 11, 100, 0).unwrap();
        for (m, state) in fine.iter().enumerate().take(10) {
            assert_abs_diff_eq!(s.x()[[m, 0]], state[0], epsilon = 1e-9);
            assert_abs_diff_eq!(s.x()[[m, 1]], state[1], epsilon = 1e-9);
        }
    }

    #[test]
    fn pendulum_energy_drift_over_default_horizon() {
        let cfg = pendulum_cfg(1, InitScheme::Fixed { point: vec![0.5, 0.3] }, 10.0);
        let s = simulate_pendulum(&cfg).unwrap();
        let e0 = pendulum_energy(0.5, 0.3);
        for m in 0..s.count() {
            let e = pendulum_energy(s.x()[[m, 0]], s.x()[[m, 1]]);
            assert!((e - e0).abs() / e0 <= 1e-6);
        }
    }

    #[test]
    fn pendulum_wraps_periodic_coordinate() {
        // High-energy initial condition winds around in x1.
        let cfg = SystemConfig {
            kind: SystemKind::Pendulum,
            dt_sample: 0.1,
            t_final: 20.0,
            n_trajectories: 1,
            init: InitScheme::Fixed { point: vec![0.0, 2.0] },
            burn_in: 0,
        };
        let s = simulate_pendulum(&cfg).unwrap();
        for m in 0..s.count() {
            let x1 = s.x()[[m, 0]];
            assert!(
                (-std::f64::consts::FRAC_PI_3..std::f64::consts::FRAC_PI_3).contains(&x1),
                "x1 = {x1} not wrapped"
            );
        }
    }

    #[test]
    fn lorenz_burn_in_count() {
        let cfg = SystemConfig {
            kind: SystemKind::Lorenz,
            dt_sample: 0.01,
            t_final: 10_000.0,
            n_trajectories: 1,
            init: InitScheme::Fixed { point: vec![1.0, 1.0, 1.0] },
            burn_in: 10_000,
        };
        let s = simulate_lorenz(&cfg).unwrap();
        assert_eq!(s.count(), 990_000);
    }

    #[test]
    fn lorenz_origin_is_fixed() {
        let cfg = SystemConfig {
            kind: SystemKind::Lorenz,
            dt_sample: 0.01,
            t_final: 1.0,
            n_trajectories: 1,
            init: InitScheme::Fixed { point: vec![0.0, 0.0, 0.0] },
            burn_in: 0,
        };
        let s = simulate_lorenz(&cfg).unwrap();
        assert!(s.x.iter().all(|v| *v == 0.0));
        assert!(s.y.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn lorenz_matches_step_halving_oracle() {
        let cfg = SystemConfig {
            kind: SystemKind::Lorenz,
            dt_sample: 0.01,
            t_final: 1.0,
            n_trajectories: 1,
            init: InitScheme::Fixed { point: vec![1.0, 1.0, 1.0] },
            burn_in: 0,
        };
        let s = simulate_lorenz(&cfg).unwrap();
        let fine =
            integrate_sampled(&lorenz_rhs, [1.0, 1.0, 1.0], 0.01, 101, 2 * DEFAULT_SUBSTEPS, 0)
                .unwrap();
        let last = s.count() - 1;
        let norm: f64 = (0..3).map(|k| fine[100][k] * fine[100][k]).sum::<f64>().sqrt();
        let err: f64 = (0..3)
            .map(|k| (s.y()[[last, k]] - fine[100][k]).powi(2))
            .sum::<f64>()
            .sqrt();
        assert!(err / norm <= 1e-5, "relative error {}", err / norm);
    }

    #[test]
    fn single_trajectory_pairing_invariant() {
        let cfg = SystemConfig {
            kind: SystemKind::Lorenz,
            dt_sample: 0.01,
            t_final: 2.0,
            n_trajectories: 1,
            init: InitScheme::Fixed { point: vec![1.0, 1.0, 1.0] },
            burn_in: 5,
        };
        let s = simulate_lorenz(&cfg).unwrap();
        assert!(s.is_single_trajectory());
    }

    #[test]
    fn rotation_eighth_turn() {
        let theta = std::f64::consts::TAU / 8.0;
        let cfg = SystemConfig {
            kind: SystemKind::Rotation2d { theta },
            dt_sample: 1.0,
            t_final: 1.0,
            n_trajectories: 64,
            init: InitScheme::UniformGrid { lo: vec![0.0], hi: vec![std::f64::consts::TAU] },
            burn_in: 0,
        };
        let s = simulate_rotation(&cfg).unwrap();
        assert_eq!(s.count(), 64);
        let (c, n) = (theta.cos(), theta.sin());
        for m in 0..64 {
            let (x0, x1) = (s.x()[[m, 0]], s.x()[[m, 1]]);
            assert_abs_diff_eq!(s.y()[[m, 0]], c * x0 - n * x1, epsilon = 1e-12);
            assert_abs_diff_eq!(s.y()[[m, 1]], n * x0 + c * x1, epsilon = 1e-12);
        }
    }

    #[test]
    fn rotation_zero_angle_is_identity() {
        let cfg = SystemConfig {
            kind: SystemKind::Rotation2d { theta: 0.0 },
            dt_sample: 1.0,
            t_final: 4.0,
            n_trajectories: 16,
            init: InitScheme::UniformGrid { lo: vec![0.0], hi: vec![std::f64::consts::TAU] },
            burn_in: 0,
        };
        let s = simulate_rotation(&cfg).unwrap();
        assert_eq!(s.x, s.y);
    }

    #[test]
    fn torus_autocorrelation_peaks_at_first_frequency() {
        let theta1 = std::f64::consts::TAU / 5.0;
        let theta2 = std::f64::consts::TAU * std::f64::consts::SQRT_2 / 20.0;
        let cfg = SystemConfig {
            kind: SystemKind::TorusRotation { theta1, theta2 },
            dt_sample: 1.0,
            t_final: 5000.0,
            n_trajectories: 1,
            init: InitScheme::Fixed { point: vec![0.0, 0.0] },
            burn_in: 0,
        };
        let s = simulate_rotation(&cfg).unwrap();
        assert_eq!(s.count(), 5000);
        // Empirical lag autocorrelation of the first coordinate; the analytic
        // value is cos(n*theta1)/2, peaking at multiples of 5.
        let m = s.count();
        let autocorr = |n: usize| -> f64 {
            (0..m - n).map(|t| s.x()[[t, 0]] * s.x()[[t + n, 0]]).sum::<f64>() / (m - n) as f64
        };
        let values: Vec<f64> = (0..=40).map(autocorr).collect();
        for n in 1..40 {
            let local_max = values[n] > values[n - 1] && values[n] > values[n + 1];
            if local_max {
                let nearest = 5.0 * (n as f64 / 5.0).round();
                assert!(
                    (n as f64 - nearest).abs() <= 1.0,
                    "peak at lag {n} is off the cos(n theta1) grid"
                );
            }
        }
        // The lag-5 peak itself must exist.
        assert!(values[5] > values[4] && values[5] > values[6]);
    }

    #[test]
    fn noise_zero_level_is_identity() {
        let cfg = pendulum_cfg(1, InitScheme::Fixed { point: vec![0.1, 0.0] }, 1.0);
        let s = simulate_pendulum(&cfg).unwrap();
        let noisy = add_noise(&s, 0.0, 7).unwrap();
        assert_eq!(s, noisy);
    }

    #[test]
    fn noise_is_deterministic_in_seed() {
        let cfg = pendulum_cfg(1, InitScheme::Fixed { point: vec![0.1, 0.0] }, 1.0);
        let s = simulate_pendulum(&cfg).unwrap();
        let a = add_noise(&s, 0.4, 11).unwrap();
        let b = add_noise(&s, 0.4, 11).unwrap();
        let c = add_noise(&s, 0.4, 12).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn noise_std_matches_sample_statistics() {
        // Constant data of RMS 1, M*d >= 1e5.
        let m = 60_000;
        let x = Array2::from_elem((m, 1), 1.0);
        let y = Array2::from_elem((m, 1), 1.0);
        let s = SnapshotSet::with_uniform_weights(x, y).unwrap();
        let noisy = add_noise(&s, 0.4, 3).unwrap();
        let mut sum = 0.0;
        let mut sumsq = 0.0;
        let mut count = 0.0;
        for (clean, dirty) in s.x.iter().zip(noisy.x.iter()).chain(s.y.iter().zip(noisy.y.iter())) {
            let d = dirty - clean;
            sum += d;
            sumsq += d * d;
            count += 1.0;
        }
        let std = (sumsq / count - (sum / count).powi(2)).sqrt();
        assert!((std - 0.4).abs() <= 0.01, "sample std {std}");
        assert_eq!(s.weights(), noisy.weights());
    }

    #[test]
    fn noise_negative_level_rejected() {
        let cfg = pendulum_cfg(1, InitScheme::Fixed { point: vec![0.1, 0.0] }, 1.0);
        let s = simulate_pendulum(&cfg).unwrap();
        assert!(matches!(add_noise(&s, -0.1, 0), Err(Error::Domain(_))));
    }
}
