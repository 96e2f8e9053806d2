//! Poisson-augmented EM for Rician diffusion data.
//!
//! Each squared magnitude `X_i = Y_i^2` is modelled as `Gamma(N_i + 1,
//! 1/(2 sigma^2))` given a latent `N_i ~ Poisson(t_i)` with
//! `t_i = S0^2 exp(2 Z_i theta) / (2 sigma^2)`. Given `<N_i>`, the expected
//! complete-data log-likelihood is
//!
//! ```text
//! sum_i [ <N_i> (log S0^2 + 2 Z_i theta) - (2 <N_i> + 1) log sigma^2
//!         - (S0^2 exp(2 Z_i theta) + Y_i^2) / (2 sigma^2) ]
//! ```
//!
//! which is a Poisson GLM in `theta` and has closed-form maximisers in
//! `sigma^2` and `S0^2`. One sweep runs the E-step, stabilised Fisher
//! scoring for `theta`, then the `sigma^2` and `S0^2` updates, each using the
//! most recent values of the other parameters. Every step is a conditional
//! maximisation of the surrogate, so the marginal likelihood never drops.
//!
//! Plain sweeps converge linearly and slowly when the SNR is high (the
//! latent counts carry far more information about `sigma^2` than the
//! magnitudes do), so by default pairs of sweeps are extrapolated with
//! SQUAREM. An extrapolated point is kept only if the sweep taken from it
//! does not lower the objective.
//!
//! Zero magnitudes need no special casing: `<N_i> = 0` and the row still
//! contributes `-t_i` through the `S0^2 exp(2 Z_i theta)` term.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::baselines::log_linear_fit;
use crate::error::{Error, Result};
use crate::linalg::solve_spd_with_ridge;
use crate::report::{Method, ParameterEstimate};
use crate::rician::{augmented_expectation_unchecked, log_density_unchecked, log_i0_and_ratio_unchecked};
use crate::scheme::Design;
use crate::tensor::{positivity_check, project_positive, TensorOrder, TensorParams};

/// Returned for `S0^2` when no row carries signal.
pub const S0_SQ_FLOOR: f64 = 1e-12;
/// Eigenvalue floor for the optional order-2 positivity projection (mm^2/s).
pub const POSITIVITY_FLOOR: f64 = 1e-7;
const MAX_HALVINGS: usize = 30;
const POSITIVITY_GRID: usize = 500;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum InitMethod {
    Ls,
    Wls,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ScoringMode {
    /// Iterate the scoring recursion to a fixed point inside every sweep.
    ToConvergence,
    /// Take a single (backtracked) scoring step per sweep.
    SingleStep,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Acceleration {
    /// Plain sweeps.
    None,
    /// Squared extrapolation over pairs of sweeps with a monotonicity
    /// safeguard. Same fixed points as plain sweeps, far fewer of them.
    Squarem,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitOptions {
    /// Weight of the score outer product in the scoring matrix.
    pub alpha: f64,
    /// `alpha` drops to 0 once a sweep's surrogate gain from the scoring
    /// loop falls below this.
    pub anneal_threshold: f64,
    /// Cap on the number of sweeps (extrapolated or not).
    pub max_em_iters: usize,
    pub max_scoring_iters: usize,
    /// Relative step tolerance of the inner scoring loop.
    pub scoring_tol: f64,
    /// Relative parameter-step tolerance between sweeps.
    pub tol_theta: f64,
    /// Absolute objective-change tolerance between sweeps.
    pub tol_loglik: f64,
    pub init_b_cutoff: f64,
    pub init_method: InitMethod,
    /// Clamp order-2 eigenvalues at [`POSITIVITY_FLOOR`] after each
    /// scoring loop. Voids the monotonicity guarantee when it triggers.
    pub positivity_projection: bool,
    pub scoring: ScoringMode,
    pub acceleration: Acceleration,
    /// After the closed-form updates, move `sigma^2` to the maximiser of
    /// the marginal likelihood given `theta` and `S0^2` (an ECME step).
    pub ecme_sigma: bool,
}

impl Default for FitOptions {
    fn default() -> Self {
        Self {
            alpha: 0.1,
            anneal_threshold: 1e-4,
            max_em_iters: 500,
            max_scoring_iters: 50,
            scoring_tol: 1e-6,
            tol_theta: 1e-6,
            tol_loglik: 1e-8,
            init_b_cutoff: 1000.0,
            init_method: InitMethod::Wls,
            positivity_projection: false,
            scoring: ScoringMode::ToConvergence,
            acceleration: Acceleration::Squarem,
            ecme_sigma: true,
        }
    }
}

impl FitOptions {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(Error::config("alpha", format!("must lie in [0, 1], got {}", self.alpha)));
        }
        for (name, v) in [
            ("tol_theta", self.tol_theta),
            ("tol_loglik", self.tol_loglik),
            ("scoring_tol", self.scoring_tol),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::config(name, format!("must be positive, got {v}")));
            }
        }
        if !(self.anneal_threshold >= 0.0) {
            return Err(Error::config("anneal_threshold", "must be >= 0"));
        }
        if !(self.init_b_cutoff >= 0.0) {
            return Err(Error::config("init_b_cutoff", "must be >= 0"));
        }
        if self.max_scoring_iters == 0 {
            return Err(Error::config("max_scoring_iters", "must be >= 1"));
        }
        Ok(())
    }
}

/// Priors for MAP estimation: `theta ~ N(0, omega^-1)`, an improper
/// `1/sigma^2` prior on the noise variance and a Gamma-type prior on `S0^2`
/// with shape `c1` and rate `c2`.
#[derive(Debug, Clone, PartialEq)]
pub struct PriorSpec {
    pub omega: DMatrix<f64>,
    pub c1: f64,
    pub c2: f64,
    pub sigma_prior: bool,
}

impl PriorSpec {
    /// Flat `theta` prior with `c1 = c2 = 1e-6`.
    pub fn weak(order: TensorOrder) -> Self {
        Self::isotropic(order, 0.0)
    }

    /// `omega = scale * I`.
    pub fn isotropic(order: TensorOrder, scale: f64) -> Self {
        let d = order.dim();
        Self {
            omega: DMatrix::identity(d, d) * scale,
            c1: 1e-6,
            c2: 1e-6,
            sigma_prior: true,
        }
    }

    pub fn validate(&self, d: usize) -> Result<()> {
        if self.omega.nrows() != d || self.omega.ncols() != d {
            return Err(Error::config("omega", format!("must be {d}x{d}")));
        }
        let asym = (&self.omega - self.omega.transpose()).abs().max();
        let scale = self.omega.abs().max().max(1e-300);
        if asym > 1e-12 * scale {
            return Err(Error::config("omega", "must be symmetric"));
        }
        let min_eig = self.omega.clone().symmetric_eigen().eigenvalues.min();
        if min_eig < -1e-12 * scale {
            return Err(Error::config("omega", format!("must be positive semidefinite (eigenvalue {min_eig:e})")));
        }
        if !(self.c1 > 0.0 && self.c1.is_finite()) {
            return Err(Error::config("c1", "must be positive"));
        }
        if !(self.c2 > 0.0 && self.c2.is_finite()) {
            return Err(Error::config("c2", "must be positive"));
        }
        Ok(())
    }

    /// Log prior density up to a constant. The `S0^2` term uses
    /// `c1 log S0^2`, the exponent for which the closed-form `S0^2` update
    /// below is the exact conditional maximiser.
    pub fn log_density(&self, theta: &[f64], s0_sq: f64, sigma_sq: f64) -> f64 {
        let t = DVector::from_column_slice(theta);
        let mut v = -0.5 * t.dot(&(&self.omega * &t));
        v += self.c1 * s0_sq.ln() - self.c2 * s0_sq;
        if self.sigma_prior {
            v -= sigma_sq.ln();
        }
        v
    }
}

/// Current EM iterate with the latent expectations it was built from.
#[derive(Debug, Clone, PartialEq)]
pub struct FitState {
    pub theta: TensorParams,
    pub s0_sq: f64,
    pub sigma_sq: f64,
    pub n_expect: Vec<f64>,
    pub iteration: usize,
    pub marginal_loglik: f64,
}

impl FitState {
    pub fn new(theta: TensorParams, s0_sq: f64, sigma_sq: f64) -> Result<Self> {
        if !(s0_sq > 0.0 && s0_sq.is_finite()) {
            return Err(Error::domain(format!("s0_sq must be positive, got {s0_sq}")));
        }
        if !(sigma_sq > 0.0 && sigma_sq.is_finite()) {
            return Err(Error::domain(format!("sigma_sq must be positive, got {sigma_sq}")));
        }
        Ok(Self {
            theta,
            s0_sq,
            sigma_sq,
            n_expect: Vec::new(),
            iteration: 0,
            marginal_loglik: f64::NAN,
        })
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct FitFlags {
    pub degenerate: bool,
    pub non_converged: bool,
    pub positivity_fail: bool,
    /// The stabilised scoring matrix stayed singular after the ridge retry.
    pub scoring_failed: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FitReport {
    pub method: Method,
    pub theta: TensorParams,
    pub s0_sq: f64,
    pub sigma_sq: f64,
    pub converged: bool,
    /// Sweeps performed.
    pub iterations: usize,
    /// Marginal Rician log-likelihood at the final parameters.
    pub loglik: f64,
    /// Objective after initialisation and after every accepted iterate (one
    /// sweep, or one extrapolation cycle): the marginal log-likelihood for
    /// ML, plus the log prior for MAP.
    pub loglik_trace: Vec<f64>,
    pub n_expect: Vec<f64>,
    pub flags: FitFlags,
}

impl ParameterEstimate for FitReport {
    fn method(&self) -> Method {
        self.method
    }
    fn theta(&self) -> &TensorParams {
        &self.theta
    }
    fn s0_sq(&self) -> f64 {
        self.s0_sq
    }
    fn sigma_sq(&self) -> f64 {
        self.sigma_sq
    }
}

fn exp2_predictor(design: &Design, theta: &[f64]) -> Vec<f64> {
    design.predictor(theta).into_iter().map(|e| (2.0 * e).exp()).collect()
}

/// Marginal log-likelihood of the magnitudes. Rows with `Y_i = 0` use the
/// density of the squared magnitude at zero, `-t_i - log(2 sigma^2)`; for
/// positive rows the squared-magnitude and magnitude densities differ by a
/// parameter-free Jacobian, so the Rician density is used as is.
pub fn marginal_loglik(design: &Design, y: &[f64], theta: &[f64], s0_sq: f64, sigma_sq: f64) -> f64 {
    let s0 = s0_sq.sqrt();
    design
        .predictor(theta)
        .iter()
        .zip(y)
        .map(|(eta, &yi)| {
            let signal = s0 * eta.exp();
            if yi > 0.0 {
                log_density_unchecked(yi, signal, sigma_sq)
            } else {
                -signal * signal / (2.0 * sigma_sq) - (2.0 * sigma_sq).ln()
            }
        })
        .sum()
}

/// E-step: `<N_i> = tau_i I1(2 tau_i) / I0(2 tau_i)` with
/// `tau_i = Y_i S0 exp(Z_i theta) / (2 sigma^2)`.
pub fn e_step(state: &FitState, design: &Design, y: &[f64]) -> Vec<f64> {
    let s0 = state.s0_sq.sqrt();
    let scale = s0 / (2.0 * state.sigma_sq);
    design
        .predictor(state.theta.theta())
        .iter()
        .zip(y)
        .map(|(eta, &yi)| {
            if yi == 0.0 {
                0.0
            } else {
                augmented_expectation_unchecked(yi * scale * eta.exp())
            }
        })
        .collect()
}

/// ML update of `sigma^2`:
/// `sum(S0^2 exp(2 Z_i theta) + Y_i^2) / (2 m + 4 sum <N_i>)`.
pub fn m_step_sigma(state: &FitState, design: &Design, y: &[f64]) -> Result<f64> {
    let e = exp2_predictor(design, state.theta.theta());
    let num: f64 = e.iter().zip(y).map(|(ei, yi)| state.s0_sq * ei + yi * yi).sum();
    let n_sum: f64 = state.n_expect.iter().sum();
    let den = 2.0 * y.len() as f64 + 4.0 * n_sum;
    sigma_from_sums(num, den)
}

fn sigma_from_sums(num: f64, den: f64) -> Result<f64> {
    if !(num > 0.0) || !num.is_finite() {
        return Err(Error::Degenerate(format!("sigma^2 update numerator is {num}")));
    }
    Ok(num / den)
}

/// MAP update of `sigma^2` under the `1/sigma^2` prior.
pub fn m_step_sigma_map(state: &FitState, design: &Design, y: &[f64]) -> Result<f64> {
    let e = exp2_predictor(design, state.theta.theta());
    let num: f64 = 0.5 * e.iter().zip(y).map(|(ei, yi)| state.s0_sq * ei + yi * yi).sum::<f64>();
    let den: f64 = state.n_expect.iter().map(|n| 2.0 * n + 1.0).sum::<f64>() + 1.0;
    sigma_from_sums(num, den)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct S0Update {
    pub s0_sq: f64,
    /// No latent count mass: the voxel carries no signal.
    pub degenerate: bool,
}

/// ML update of `S0^2`: `2 sigma^2 sum <N_i> / sum exp(2 Z_i theta)`.
pub fn m_step_s0(state: &FitState, design: &Design) -> S0Update {
    let n_sum: f64 = state.n_expect.iter().sum();
    if !(n_sum > 0.0) {
        return S0Update { s0_sq: S0_SQ_FLOOR, degenerate: true };
    }
    let e_sum: f64 = exp2_predictor(design, state.theta.theta()).iter().sum();
    S0Update {
        s0_sq: (2.0 * state.sigma_sq * n_sum / e_sum).max(S0_SQ_FLOOR),
        degenerate: false,
    }
}

/// MAP update of `S0^2`: `(sum <N_i> + c1) / (sum exp(2 Z_i theta) / (2 sigma^2) + c2)`.
pub fn m_step_s0_map(state: &FitState, design: &Design, prior: &PriorSpec) -> S0Update {
    let n_sum: f64 = state.n_expect.iter().sum();
    let e_sum: f64 = exp2_predictor(design, state.theta.theta()).iter().sum();
    S0Update {
        s0_sq: ((n_sum + prior.c1) / (e_sum / (2.0 * state.sigma_sq) + prior.c2)).max(S0_SQ_FLOOR),
        degenerate: !(n_sum > 0.0),
    }
}

/// The `theta` part of the expected complete-data log-likelihood,
/// `sum_i [2 Z_i theta <N_i> - S0^2 exp(2 Z_i theta) / (2 sigma^2)]`.
pub fn surrogate_theta(state: &FitState, design: &Design, theta: &[f64]) -> f64 {
    let half_a = state.s0_sq / (2.0 * state.sigma_sq);
    design
        .predictor(theta)
        .iter()
        .zip(&state.n_expect)
        .map(|(eta, n)| 2.0 * eta * n - half_a * (2.0 * eta).exp())
        .sum()
}

fn score_at(state: &FitState, design: &Design, theta: &[f64]) -> DVector<f64> {
    let a = state.s0_sq / state.sigma_sq;
    let w: Vec<f64> = design
        .predictor(theta)
        .iter()
        .zip(&state.n_expect)
        .map(|(eta, n)| 2.0 * n - a * (2.0 * eta).exp())
        .collect();
    design.z().tr_mul(&DVector::from_vec(w))
}

fn fisher_at(state: &FitState, design: &Design, theta: &[f64]) -> DMatrix<f64> {
    let a2 = 2.0 * state.s0_sq / state.sigma_sq;
    let e = exp2_predictor(design, theta);
    let mut zw = design.z().clone();
    for (i, ei) in e.iter().enumerate() {
        zw.row_mut(i).scale_mut(a2 * ei);
    }
    design.z().tr_mul(&zw)
}

/// `S(theta) = 2 sum Z_i <N_i> - (S0^2 / sigma^2) sum exp(2 Z_i theta) Z_i`.
pub fn score_theta(state: &FitState, design: &Design) -> DVector<f64> {
    score_at(state, design, state.theta.theta())
}

/// `J(theta) = 2 (S0^2 / sigma^2) sum exp(2 Z_i theta) Z_i' Z_i`, minus the
/// Hessian of [`surrogate_theta`].
pub fn fisher_info_theta(state: &FitState, design: &Design) -> DMatrix<f64> {
    fisher_at(state, design, state.theta.theta())
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScoringOutcome {
    pub theta: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
    /// The stabilised matrix could not be inverted even with a ridge.
    pub singular: bool,
    /// Surrogate increase over the whole loop.
    pub gain: f64,
}

/// Stabilised Fisher scoring for `theta` at fixed `<N>`, `S0^2`,
/// `sigma^2`:
///
/// ```text
/// theta <- theta + ((1 - alpha) J + alpha S S')^{-1} S
/// ```
///
/// With `omega` the score and information become `S - omega theta` and
/// `J + omega`. Steps that lower the (penalised) surrogate are halved, up to
/// 30 times.
pub fn scoring_loop(
    state: &FitState,
    design: &Design,
    alpha: f64,
    omega: Option<&DMatrix<f64>>,
    max_iters: usize,
    tol: f64,
) -> ScoringOutcome {
    let z = design.z();
    let a = state.s0_sq / state.sigma_sq;
    let n = DVector::from_column_slice(&state.n_expect);
    // Surrogate, penalty included, with exp(2 eta) returned for reuse.
    let evaluate = |theta: &DVector<f64>| {
        let eta = z * theta;
        let e2 = eta.map(|v| (2.0 * v).exp());
        let mut v = 2.0 * eta.dot(&n) - 0.5 * a * e2.sum();
        if let Some(om) = omega {
            v -= 0.5 * theta.dot(&(om * theta));
        }
        (v, e2)
    };
    let mut theta = DVector::from_column_slice(state.theta.theta());
    let (mut current, mut e2) = evaluate(&theta);
    let start = current;
    let mut out = ScoringOutcome {
        theta: Vec::new(),
        iterations: 0,
        converged: false,
        singular: false,
        gain: 0.0,
    };
    let mut weighted = z.clone();

    for _ in 0..max_iters {
        out.iterations += 1;
        let mut score = z.tr_mul(&(&n * 2.0 - &e2 * a));
        for (j, mut col) in weighted.column_iter_mut().enumerate() {
            col.zip_zip_apply(&z.column(j), &e2, |w, zij, ei| *w = 2.0 * a * ei * zij);
        }
        let mut info = z.tr_mul(&weighted);
        if let Some(om) = omega {
            score -= om * &theta;
            info += om;
        }
        if score.iter().all(|v| *v == 0.0) {
            out.converged = true;
            break;
        }
        let m = info * (1.0 - alpha) + (&score * score.transpose()) * alpha;
        let Some(mut step) = solve_spd_with_ridge(&m, &score) else {
            out.singular = true;
            break;
        };
        if score.dot(&step).abs() < 1e-15 * current.abs().max(1.0) {
            // Predicted gain is below the surrogate's resolution.
            out.converged = true;
            break;
        }

        let mut accepted = None;
        for _ in 0..=MAX_HALVINGS {
            let cand = &theta + &step;
            let (val, cand_e2) = evaluate(&cand);
            if val >= current {
                accepted = Some((cand, val, cand_e2));
                break;
            }
            step *= 0.5;
        }
        let Some((cand, val, cand_e2)) = accepted else {
            // No ascent along the scoring direction: numerically stationary.
            out.converged = true;
            break;
        };
        let rel = step.norm() / theta.norm().max(1e-300);
        theta = cand;
        current = val;
        e2 = cand_e2;
        if rel < tol {
            out.converged = true;
            break;
        }
    }
    out.gain = current - start;
    out.theta = theta.iter().copied().collect();
    out
}

/// One call of the scoring recursion (iterated to `options.scoring_tol`
/// unless `options.scoring` is [`ScoringMode::SingleStep`]).
pub fn scoring_step(state: &FitState, design: &Design, options: &FitOptions) -> ScoringOutcome {
    let iters = match options.scoring {
        ScoringMode::ToConvergence => options.max_scoring_iters,
        ScoringMode::SingleStep => 1,
    };
    scoring_loop(state, design, options.alpha, None, iters, options.scoring_tol)
}

/// Starting point from a log-linear fit on the truncated, positive subset.
/// Zero magnitudes are excluded here but kept for the EM sweeps.
pub fn initialize(design: &Design, y: &[f64], options: &FitOptions) -> Result<FitState> {
    design.check_data(y)?;
    let passes = match options.init_method {
        InitMethod::Ls => 0,
        InitMethod::Wls => 1,
    };
    let fit = log_linear_fit(design, y, Some(options.init_b_cutoff), passes)?;
    let theta = TensorParams::new(design.order(), fit.theta)?;
    let mut state = FitState::new(theta, (2.0 * fit.log_s0).exp(), fit.sigma_sq)?;
    state.n_expect = vec![0.0; y.len()];
    Ok(state)
}

fn degenerate_report(design: &Design, method: Method) -> FitReport {
    FitReport {
        method,
        theta: TensorParams::zeros(design.order()),
        s0_sq: S0_SQ_FLOOR,
        sigma_sq: f64::MIN_POSITIVE,
        converged: false,
        iterations: 0,
        loglik: f64::NAN,
        loglik_trace: Vec::new(),
        n_expect: vec![0.0; design.len()],
        flags: FitFlags {
            degenerate: true,
            ..FitFlags::default()
        },
    }
}

fn relative_change(old: f64, new: f64) -> f64 {
    (new - old).abs() / old.abs().max(1e-300)
}

/// Maximises the marginal log-likelihood (plus `-log sigma^2` when
/// `sigma_prior`) over `sigma^2` with the signal held fixed: safeguarded
/// Newton in `psi = log sigma^2`. With `x = Y S / sigma^2` and `g = I1/I0`,
///
/// ```text
/// dl/dpsi   = sum[-1 + (Y^2 + S^2) / (2 sigma^2) - g(x) x]
/// d2l/dpsi2 = sum[-(Y^2 + S^2) / (2 sigma^2) + x^2 (1 - g(x)^2)]
/// ```
///
/// (zero rows drop the Bessel terms). Never returns a point with a lower
/// objective than `sigma_sq`.
pub fn maximize_sigma_marginal(design: &Design, y: &[f64], theta: &[f64], s0_sq: f64, sigma_sq: f64, sigma_prior: bool) -> f64 {
    let s0 = s0_sq.sqrt();
    let signal: Vec<f64> = design.predictor(theta).iter().map(|e| s0 * e.exp()).collect();
    let penalty = if sigma_prior { 1.0 } else { 0.0 };
    // Objective, first and second derivative in psi at sigma^2 = s2.
    let eval = |s2: f64| {
        let (mut val, mut grad, mut curv) = (-penalty * s2.ln(), -penalty, 0.0);
        let log_s2 = s2.ln();
        for (&s, &yi) in signal.iter().zip(y) {
            let q = (yi * yi + s * s) / (2.0 * s2);
            if yi > 0.0 {
                let x = yi * s / s2;
                let (log_i0, g) = log_i0_and_ratio_unchecked(x);
                val += yi.ln() - log_s2 - q + log_i0;
                grad += -1.0 + q - g * x;
                curv += -q + x * x * (1.0 - g * g);
            } else {
                val += -s * s / (2.0 * s2) - std::f64::consts::LN_2 - log_s2;
                grad += -1.0 + q;
                curv += -q;
            }
        }
        (val, grad, curv)
    };
    let mut s2 = sigma_sq;
    let (mut current, mut grad, mut curv) = eval(s2);
    for _ in 0..30 {
        // Newton where the objective is concave in psi, otherwise a unit
        // step along the gradient; backtrack on the objective.
        let mut step = if curv < 0.0 { -grad / curv } else { grad.signum() };
        step = step.clamp(-2.0, 2.0);
        // Stop once the predicted gain is below the objective's resolution.
        if step.abs() < 1e-10 || (grad * step).abs() < 1e-13 * current.abs().max(1.0) {
            break;
        }
        let mut moved = false;
        for _ in 0..40 {
            let cand = s2 * step.exp();
            let (val, g, c) = eval(cand);
            if val >= current && cand.is_finite() && cand > 0.0 {
                moved = true;
                s2 = cand;
                (current, grad, curv) = (val, g, c);
                break;
            }
            step *= 0.5;
        }
        if !moved {
            break;
        }
    }
    s2
}

/// Drives EM sweeps and owns the state that persists across them.
struct Sweeper<'a> {
    design: &'a Design,
    y: &'a [f64],
    prior: Option<&'a PriorSpec>,
    options: &'a FitOptions,
    alpha: f64,
    sweeps: usize,
    scoring_failed: bool,
}

impl Sweeper<'_> {
    fn objective(&self, s: &FitState) -> f64 {
        match self.prior {
            Some(p) => s.marginal_loglik + p.log_density(s.theta.theta(), s.s0_sq, s.sigma_sq),
            None => s.marginal_loglik,
        }
    }

    fn budget_left(&self) -> bool {
        self.sweeps < self.options.max_em_iters
    }

    /// One sweep: E-step, scoring for theta, then sigma^2 and S0^2, each
    /// update using the newest values of the others. Returns whether the
    /// `S0^2` update found no latent count mass.
    fn sweep(&mut self, state: &mut FitState) -> Result<bool> {
        let (design, y) = (self.design, self.y);
        state.n_expect = e_step(state, design, y);
        let iters = match self.options.scoring {
            ScoringMode::ToConvergence => self.options.max_scoring_iters,
            ScoringMode::SingleStep => 1,
        };
        let sc = scoring_loop(state, design, self.alpha, self.prior.map(|p| &p.omega), iters, self.options.scoring_tol);
        self.scoring_failed |= sc.singular;
        let mut theta = TensorParams::new(design.order(), sc.theta)?;
        if self.options.positivity_projection && design.order() == TensorOrder::Two {
            theta = project_positive(&theta, POSITIVITY_FLOOR)?;
        }
        state.theta = theta;
        if sc.gain < self.options.anneal_threshold {
            self.alpha = 0.0;
        }
        state.sigma_sq = match self.prior {
            Some(p) if p.sigma_prior => m_step_sigma_map(state, design, y)?,
            _ => m_step_sigma(state, design, y)?,
        };
        let s0 = match self.prior {
            Some(p) => m_step_s0_map(state, design, p),
            None => m_step_s0(state, design),
        };
        state.s0_sq = s0.s0_sq;
        if self.options.ecme_sigma {
            let sigma_prior = self.prior.is_some_and(|p| p.sigma_prior);
            state.sigma_sq = maximize_sigma_marginal(design, y, state.theta.theta(), state.s0_sq, state.sigma_sq, sigma_prior);
        }
        state.iteration += 1;
        state.marginal_loglik = marginal_loglik(design, y, state.theta.theta(), state.s0_sq, state.sigma_sq);
        self.sweeps += 1;
        Ok(s0.degenerate)
    }

    /// Squared extrapolation (SQUAREM, steplength `-|r| / |v|`) over two
    /// sweeps, followed by a stabilising sweep from the extrapolated point.
    /// The result is kept only if it does not lower the objective; otherwise
    /// the step length is pulled back toward the plain double sweep, which
    /// is always acceptable.
    fn squarem_cycle(&mut self, state: &FitState) -> Result<(FitState, bool)> {
        let l0 = self.objective(state);
        let mut s1 = state.clone();
        let deg1 = self.sweep(&mut s1)?;
        if !self.budget_left() {
            return Ok((s1, deg1));
        }
        let mut s2 = s1.clone();
        let deg2 = self.sweep(&mut s2)?;
        let (p0, p1, p2) = (pack(state), pack(&s1), pack(&s2));
        let r: Vec<f64> = p1.iter().zip(&p0).map(|(a, b)| a - b).collect();
        let v: Vec<f64> = p2.iter().zip(&p1).zip(&p0).map(|((c, b), a)| c - 2.0 * b + a).collect();
        let (rn, vn) = (norm(&r), norm(&v));
        if !(rn > 0.0 && vn > 0.0) {
            return Ok((s2, deg2));
        }
        let mut a = -(rn / vn);
        for _ in 0..4 {
            if a > -1.0 - 1e-3 || !self.budget_left() {
                break;
            }
            let p: Vec<f64> = (0..p0.len()).map(|i| p0[i] - 2.0 * a * r[i] + a * a * v[i]).collect();
            if let Some(mut s3) = unpack(self.design.order(), &p) {
                if let Ok(deg) = self.sweep(&mut s3) {
                    let l3 = self.objective(&s3);
                    if l3.is_finite() && l3 >= l0 {
                        return Ok((s3, deg));
                    }
                }
            }
            a = 0.5 * (a - 1.0);
        }
        Ok((s2, deg2))
    }
}

fn pack(s: &FitState) -> Vec<f64> {
    let mut p = s.theta.theta().to_vec();
    p.push(s.s0_sq.ln());
    p.push(s.sigma_sq.ln());
    p
}

fn unpack(order: TensorOrder, p: &[f64]) -> Option<FitState> {
    let d = order.dim();
    let theta = TensorParams::new(order, p[..d].to_vec()).ok()?;
    FitState::new(theta, p[d].exp(), p[d + 1].exp()).ok()
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn run_em(design: &Design, y: &[f64], options: &FitOptions, prior: Option<&PriorSpec>) -> Result<FitReport> {
    options.validate()?;
    design.check_data(y)?;
    let method = if prior.is_some() { Method::Map } else { Method::Mle };
    if let Some(p) = prior {
        p.validate(design.dim())?;
    }
    if y.iter().all(|v| *v == 0.0) {
        return Ok(degenerate_report(design, method));
    }

    let mut state = initialize(design, y, options)?;
    state.marginal_loglik = marginal_loglik(design, y, state.theta.theta(), state.s0_sq, state.sigma_sq);
    let mut sw = Sweeper {
        design,
        y,
        prior,
        options,
        alpha: options.alpha,
        sweeps: 0,
        scoring_failed: false,
    };
    let mut trace = vec![sw.objective(&state)];
    let mut degenerate = false;
    let mut converged = false;

    while sw.budget_left() {
        let prev = state.clone();
        let prev_obj = *trace.last().unwrap();
        let (next, deg) = match options.acceleration {
            Acceleration::None => {
                let mut s = state.clone();
                let deg = sw.sweep(&mut s)?;
                (s, deg)
            }
            Acceleration::Squarem => sw.squarem_cycle(&state)?,
        };
        state = next;
        state.iteration = sw.sweeps;
        degenerate = deg;
        let obj = sw.objective(&state);
        trace.push(obj);

        let dtheta: Vec<f64> = state.theta.theta().iter().zip(prev.theta.theta()).map(|(a, b)| a - b).collect();
        let step = (norm(&dtheta) / norm(prev.theta.theta()).max(1e-300))
            .max(relative_change(prev.s0_sq, state.s0_sq))
            .max(relative_change(prev.sigma_sq, state.sigma_sq));
        if step < options.tol_theta && (obj - prev_obj).abs() < options.tol_loglik {
            converged = true;
            break;
        }
    }

    let flags = FitFlags {
        degenerate,
        non_converged: !converged,
        positivity_fail: !positivity_check(&state.theta, POSITIVITY_GRID)?.pass,
        scoring_failed: sw.scoring_failed,
    };
    Ok(FitReport {
        method,
        theta: state.theta,
        s0_sq: state.s0_sq,
        sigma_sq: state.sigma_sq,
        converged,
        iterations: sw.sweeps,
        loglik: state.marginal_loglik,
        loglik_trace: trace,
        n_expect: state.n_expect,
        flags,
    })
}

/// Maximum-likelihood fit of `(theta, S0^2, sigma^2)` by EM.
///
/// Never fails silently on non-convergence: the report carries
/// `converged = false` and `flags.non_converged`. An all-zero voxel returns a
/// degenerate report (`theta = 0`, floored `S0^2` and `sigma^2`).
pub fn fit_mle(design: &Design, y: &[f64], options: &FitOptions) -> Result<FitReport> {
    run_em(design, y, options, None)
}

/// MAP fit: the same sweep with penalised updates.
pub fn fit_map(design: &Design, y: &[f64], prior: &PriorSpec, options: &FitOptions) -> Result<FitReport> {
    run_em(design, y, options, Some(prior))
}
