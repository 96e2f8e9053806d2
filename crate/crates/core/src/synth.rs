//! Synthetic acquisition schemes and Rician-corrupted datasets.
//!
//! The default scheme and truths are fixtures: 32 repulsion directions,
//! fifteen knots (0 plus fourteen geometric steps from 62 to 14000 s/mm^2),
//! three repetitions, order-2 eigenvalues (1.7, 0.4, 0.2)e-3 mm^2/s and an
//! order-4 crossing built from that tensor.

use rand::SeedableRng;
use rand::RngExt;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rician::draw_rician;
use crate::scheme::{AcquisitionScheme, Design};
use crate::tensor::{positivity_check, TensorOrder, TensorParams};

/// Version tag written next to fixture-derived outputs.
pub const FIXTURE_VERSION: &str = "fixture-v1";
pub const DEFAULT_DIRECTIONS: usize = 32;
pub const DEFAULT_REPETITIONS: usize = 3;
pub const DEFAULT_S0: f64 = 250.0;
pub const HIGH_NOISE_SIGMA_SQ: f64 = 93.0405;
pub const LOW_NOISE_SIGMA_SQ: f64 = 12.8821;
/// Normalising diffusivity of the order-4 crossing, mm^2/s.
const CROSSING_SCALE: f64 = 0.8e-3;

/// `n` antipodally symmetric points on the upper hemisphere minimising the
/// Coulomb energy of the `2n` charges `+-g`. Starts from a golden spiral and
/// runs a fixed number of normalised gradient steps, so the result is
/// deterministic.
pub fn repulsion_directions(n: usize) -> Vec<[f64; 3]> {
    let mut pts = crate::tensor::hemisphere_grid(n);
    if n < 2 {
        return pts;
    }
    let mut step = 0.1;
    for _ in 0..400 {
        let mut forces = vec![[0.0f64; 3]; n];
        for i in 0..n {
            for j in 0..n {
                if i == j {
                    continue;
                }
                for sign in [1.0, -1.0] {
                    let d = [
                        pts[i][0] - sign * pts[j][0],
                        pts[i][1] - sign * pts[j][1],
                        pts[i][2] - sign * pts[j][2],
                    ];
                    let r2 = d[0] * d[0] + d[1] * d[1] + d[2] * d[2];
                    let inv = 1.0 / (r2 * r2.sqrt());
                    for k in 0..3 {
                        forces[i][k] += d[k] * inv;
                    }
                }
            }
        }
        for i in 0..n {
            let g = pts[i];
            let f = forces[i];
            let radial = f[0] * g[0] + f[1] * g[1] + f[2] * g[2];
            let t = [f[0] - radial * g[0], f[1] - radial * g[1], f[2] - radial * g[2]];
            let tn = (t[0] * t[0] + t[1] * t[1] + t[2] * t[2]).sqrt().max(1e-300);
            let mut p = [g[0] + step * t[0] / tn, g[1] + step * t[1] / tn, g[2] + step * t[2] / tn];
            let pn = (p[0] * p[0] + p[1] * p[1] + p[2] * p[2]).sqrt();
            p.iter_mut().for_each(|v| *v /= pn);
            if p[2] < 0.0 {
                p.iter_mut().for_each(|v| *v = -*v);
            }
            pts[i] = p;
        }
        step *= 0.98;
    }
    pts
}

/// Zero plus fourteen geometric knots from 62 to 14000 s/mm^2.
pub fn default_knots() -> Vec<f64> {
    let (lo, hi) = (62.0f64, 14000.0f64);
    let mut k = vec![0.0];
    for i in 0..14 {
        k.push(lo * (hi / lo).powf(i as f64 / 13.0));
    }
    k[14] = hi;
    k
}

pub fn make_scheme(n_directions: usize, knots: Vec<f64>, repetitions: usize) -> Result<AcquisitionScheme> {
    if n_directions == 0 {
        return Err(Error::invalid("scheme needs at least one direction"));
    }
    AcquisitionScheme::factorial(repulsion_directions(n_directions), knots, repetitions)
}

/// 32 directions x 15 knots x 3 repetitions = 1440 rows.
pub fn default_scheme() -> AcquisitionScheme {
    make_scheme(DEFAULT_DIRECTIONS, default_knots(), DEFAULT_REPETITIONS).expect("default scheme is valid")
}

/// Rotation `Rz(30 deg) Ry(20 deg)` applied to `diag(l)`.
fn rotated_diag(l: [f64; 3], extra_z: f64) -> [[f64; 3]; 3] {
    let (a, b) = (30f64.to_radians() + extra_z, 20f64.to_radians());
    let rz = [[a.cos(), -a.sin(), 0.0], [a.sin(), a.cos(), 0.0], [0.0, 0.0, 1.0]];
    let ry = [[b.cos(), 0.0, b.sin()], [0.0, 1.0, 0.0], [-b.sin(), 0.0, b.cos()]];
    let mut r = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            r[i][j] = (0..3).map(|k| rz[i][k] * ry[k][j]).sum();
        }
    }
    let mut d = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            d[i][j] = (0..3).map(|k| r[i][k] * l[k] * r[j][k]).sum();
        }
    }
    d
}

const EIGENVALUES: [f64; 3] = [1.7e-3, 0.4e-3, 0.2e-3];

pub fn default_order2_truth() -> TensorParams {
    TensorParams::from_matrix(&rotated_diag(EIGENVALUES, 0.0)).expect("finite")
}

/// `d(g) = (g' D1 g)(g' D2 g) / 0.8e-3` with `D2` the order-2 truth turned
/// 90 degrees about z.
pub fn default_order4_truth() -> TensorParams {
    let d1 = rotated_diag(EIGENVALUES, 0.0);
    let mut d2 = rotated_diag(EIGENVALUES, std::f64::consts::FRAC_PI_2);
    d2.iter_mut().flatten().for_each(|v| *v /= CROSSING_SCALE);
    TensorParams::quartic_product(&d1, &d2).expect("finite")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NoiseLevel {
    High,
    Low,
}

impl NoiseLevel {
    pub fn sigma_sq(self) -> f64 {
        match self {
            NoiseLevel::High => HIGH_NOISE_SIGMA_SQ,
            NoiseLevel::Low => LOW_NOISE_SIGMA_SQ,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub theta_true: TensorParams,
    pub s0_true: f64,
    pub sigma_sq_true: f64,
    pub seed: u64,
}

impl GroundTruth {
    pub fn new(theta_true: TensorParams, s0_true: f64, sigma_sq_true: f64, seed: u64) -> Result<Self> {
        if !(s0_true > 0.0 && s0_true.is_finite()) {
            return Err(Error::domain(format!("s0_true must be positive, got {s0_true}")));
        }
        if !(sigma_sq_true >= 0.0 && sigma_sq_true.is_finite()) {
            return Err(Error::domain(format!("sigma_sq_true must be >= 0, got {sigma_sq_true}")));
        }
        let grid = 500;
        if !positivity_check(&theta_true, grid)?.pass {
            return Err(Error::domain("ground-truth tensor is not positive"));
        }
        Ok(Self { theta_true, s0_true, sigma_sq_true, seed })
    }

    /// Fixture truth for an order and noise level with `S0 = 250`.
    pub fn preset(order: TensorOrder, noise: NoiseLevel, seed: u64) -> Self {
        let theta = match order {
            TensorOrder::Two => default_order2_truth(),
            TensorOrder::Four => default_order4_truth(),
        };
        Self::new(theta, DEFAULT_S0, noise.sigma_sq(), seed).expect("fixture truth is valid")
    }

    pub fn order(&self) -> TensorOrder {
        self.theta_true.order()
    }

    /// Noise-free signal `S0 exp(Z theta)` for every row.
    pub fn signal(&self, design: &Design) -> Vec<f64> {
        design.predictor(self.theta_true.theta()).iter().map(|e| self.s0_true * e.exp()).collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct VoxelData {
    pub voxel_id: usize,
    pub seed: u64,
    pub magnitudes: Vec<f64>,
}

/// Magnitudes below `threshold` become exactly 0.
pub fn zero_code(y: &mut [f64], threshold: f64) {
    y.iter_mut().filter(|v| **v < threshold).for_each(|v| *v = 0.0);
}

fn draw_voxel(design: &Design, truth: &GroundTruth, seed: u64, zero_threshold: Option<f64>) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let sigma = truth.sigma_sq_true.sqrt();
    let mut y: Vec<f64> = truth.signal(design).into_iter().map(|s| draw_rician(&mut rng, s, sigma)).collect();
    if let Some(t) = zero_threshold {
        zero_code(&mut y, t);
    }
    y
}

/// One dataset seeded with `truth.seed`.
pub fn synthesize(scheme: &AcquisitionScheme, truth: &GroundTruth) -> VoxelData {
    synthesize_with(scheme, truth, None)
}

pub fn synthesize_with(scheme: &AcquisitionScheme, truth: &GroundTruth, zero_threshold: Option<f64>) -> VoxelData {
    let design = Design::new(scheme, truth.order());
    VoxelData {
        voxel_id: 0,
        seed: truth.seed,
        magnitudes: draw_voxel(&design, truth, truth.seed, zero_threshold),
    }
}

/// Per-dataset seeds: the first `n` draws of a ChaCha8 stream keyed by
/// `master`.
pub fn derived_seeds(master: u64, n: usize) -> Vec<u64> {
    let mut rng = ChaCha8Rng::seed_from_u64(master);
    (0..n).map(|_| rng.random::<u64>()).collect()
}

/// `n_datasets` independent datasets with seeds derived from `truth.seed`;
/// voxel ids are `0..n_datasets`.
pub fn make_ensemble(scheme: &AcquisitionScheme, truth: &GroundTruth, n_datasets: usize, zero_threshold: Option<f64>) -> Result<Vec<VoxelData>> {
    if n_datasets == 0 {
        return Err(Error::invalid("ensemble needs at least one dataset"));
    }
    let design = Design::new(scheme, truth.order());
    Ok(derived_seeds(truth.seed, n_datasets)
        .into_par_iter()
        .enumerate()
        .map(|(voxel_id, seed)| VoxelData {
            voxel_id,
            seed,
            magnitudes: draw_voxel(&design, truth, seed, zero_threshold),
        })
        .collect())
}
