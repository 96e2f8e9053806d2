//! Comparison estimators: least squares on log-magnitudes and direct
//! ascent on the Rician log-likelihood.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::em::{self, FitOptions};
use crate::error::{Error, Result};
use crate::linalg::{solve_spd_with_ridge, weighted_least_squares};
use crate::report::{Method, ParameterEstimate};
use crate::rician::{log_density_unchecked, ratio_unchecked};
use crate::scheme::Design;
use crate::tensor::TensorParams;

/// Default b-value cutoff (s/mm^2) for the truncated variants.
pub const TRUNCATION_CUTOFF: f64 = 1000.0;

#[derive(Debug, Clone, PartialEq)]
pub struct LogLinearFit {
    pub log_s0: f64,
    pub theta: Vec<f64>,
    pub sigma_sq: f64,
    pub rows_used: usize,
}

/// Regresses `log Y` on `[1, Z]` over rows with `Y > 0` and `b <= cutoff`,
/// then re-solves `reweight_passes` times with weights equal to the squared
/// fitted signal (normalised by its maximum, so the weights do not depend
/// on the scale of `Y`).
///
/// `sigma^2` is the residual variance of the log fit mapped to magnitude
/// units with the squared geometric-mean fitted signal (`Var(log Y)` is about
/// `sigma^2 / S^2` at moderate SNR).
pub fn log_linear_fit(design: &Design, y: &[f64], cutoff: Option<f64>, reweight_passes: usize) -> Result<LogLinearFit> {
    design.check_data(y)?;
    let limit = cutoff.unwrap_or(f64::INFINITY);
    let positive = y.iter().filter(|v| **v > 0.0).count();
    let truncated = design.b().iter().filter(|b| **b <= limit).count();
    let rows: Vec<usize> = (0..y.len()).filter(|&i| y[i] > 0.0 && design.b()[i] <= limit).collect();
    let p = design.dim() + 1;
    if rows.len() < p {
        return Err(Error::Initialization {
            usable: rows.len(),
            required: p,
            total: y.len(),
            positive,
            truncated,
            cutoff: limit,
        });
    }

    let n = rows.len();
    let a = DMatrix::from_fn(n, p, |r, c| if c == 0 { 1.0 } else { design.z()[(rows[r], c - 1)] });
    let ly = DVector::from_iterator(n, rows.iter().map(|&i| y[i].ln()));
    let mut beta = weighted_least_squares(&a, &ly, None).map_err(Error::RankDeficient)?;
    for _ in 0..reweight_passes {
        let fitted = &a * &beta;
        let top = fitted.max();
        let w = fitted.map(|f| (2.0 * (f - top)).exp());
        beta = weighted_least_squares(&a, &ly, Some(&w)).map_err(Error::RankDeficient)?;
    }

    let fitted = &a * &beta;
    let rss = (&ly - &fitted).norm_squared();
    let dof = n.saturating_sub(p).max(1) as f64;
    let gm_sq = (2.0 * fitted.mean()).exp();
    let sigma_sq = (rss / dof * gm_sq).max(1e-16 * gm_sq).max(f64::MIN_POSITIVE);
    Ok(LogLinearFit {
        log_s0: beta[0],
        theta: beta.iter().skip(1).copied().collect(),
        sigma_sq,
        rows_used: n,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct BaselineReport {
    pub method: Method,
    pub theta: TensorParams,
    pub s0_sq: f64,
    pub sigma_sq: f64,
    pub converged: bool,
    pub iterations: usize,
    /// Marginal Rician log-likelihood at the estimate (same convention as
    /// the EM reports, so values are comparable across methods).
    pub loglik: f64,
    pub rows_used: usize,
    pub degenerate: bool,
}

impl ParameterEstimate for BaselineReport {
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

fn log_linear_report(design: &Design, y: &[f64], cutoff: Option<f64>, passes: usize, method: Method) -> Result<BaselineReport> {
    let fit = log_linear_fit(design, y, cutoff, passes)?;
    let s0_sq = (2.0 * fit.log_s0).exp();
    Ok(BaselineReport {
        method,
        loglik: em::marginal_loglik(design, y, &fit.theta, s0_sq, fit.sigma_sq),
        theta: TensorParams::new(design.order(), fit.theta)?,
        s0_sq,
        sigma_sq: fit.sigma_sq,
        converged: true,
        iterations: passes + 1,
        rows_used: fit.rows_used,
        degenerate: false,
    })
}

/// Ordinary least squares on `log Y`. `b_cutoff = None` uses every
/// positive row; a cutoff gives the truncated variant.
pub fn fit_ls(design: &Design, y: &[f64], b_cutoff: Option<f64>) -> Result<BaselineReport> {
    let method = if b_cutoff.is_some() { Method::LsTrunc } else { Method::Ls };
    log_linear_report(design, y, b_cutoff, 0, method)
}

/// LS followed by two reweighted passes.
pub fn fit_wls(design: &Design, y: &[f64], b_cutoff: Option<f64>) -> Result<BaselineReport> {
    let method = if b_cutoff.is_some() { Method::WlsTrunc } else { Method::Wls };
    log_linear_report(design, y, b_cutoff, 2, method)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Curvature {
    /// Analytic Hessian of the log-likelihood.
    Exact,
    /// High-SNR information `sum W W' (S^2/sigma^2 - 1/2)`, with negative
    /// weights (rows below the approximation's SNR range) clamped to 0.
    Approximate,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DirectOptions {
    pub curvature: Curvature,
    pub max_iters: usize,
    /// Stop when the natural-gradient norm drops below this.
    pub grad_tol: f64,
    /// Censoring floor for zero magnitudes; `None` uses half the smallest
    /// positive magnitude.
    pub y_min: Option<f64>,
    pub init: FitOptions,
}

impl Default for DirectOptions {
    fn default() -> Self {
        Self {
            curvature: Curvature::Exact,
            max_iters: 500,
            grad_tol: 1e-6,
            y_min: None,
            init: FitOptions::default(),
        }
    }
}

/// Half the smallest positive magnitude, or `None` without positive data.
pub fn default_censor_floor(y: &[f64]) -> Option<f64> {
    y.iter().copied().filter(|v| *v > 0.0).min_by(|a, b| a.partial_cmp(b).unwrap()).map(|v| 0.5 * v)
}

fn check_params(theta: &[f64], s0_sq: f64, sigma_sq: f64, design: &Design) -> Result<()> {
    if theta.len() != design.dim() {
        return Err(Error::invalid(format!("theta has {} entries, design has {}", theta.len(), design.dim())));
    }
    if !(s0_sq >= 0.0 && s0_sq.is_finite()) {
        return Err(Error::domain(format!("s0_sq must be >= 0, got {s0_sq}")));
    }
    if !(sigma_sq > 0.0 && sigma_sq.is_finite()) {
        return Err(Error::domain(format!("sigma_sq must be positive, got {sigma_sq}")));
    }
    Ok(())
}

fn resolve_floor(y: &[f64], y_min: Option<f64>) -> Result<f64> {
    match y_min.or_else(|| default_censor_floor(y)) {
        Some(v) if v > 0.0 && v.is_finite() => Ok(v),
        Some(v) => Err(Error::domain(format!("censoring floor must be positive, got {v}"))),
        None => Ok(1.0),
    }
}

/// Sum of Rician log-densities. Zero magnitudes are treated as censored
/// below `y_min` with the small-`y` approximation
/// `log P(Y < y_min) ~ log(y_min^2 / (2 sigma^2)) - S^2 / (2 sigma^2)`.
pub fn rician_direct_loglik(design: &Design, y: &[f64], theta: &[f64], s0_sq: f64, sigma_sq: f64, y_min: Option<f64>) -> Result<f64> {
    design.check_data(y)?;
    check_params(theta, s0_sq, sigma_sq, design)?;
    let floor = resolve_floor(y, y_min)?;
    Ok(loglik_unchecked(design, y, theta, s0_sq, sigma_sq, floor))
}

fn loglik_unchecked(design: &Design, y: &[f64], theta: &[f64], s0_sq: f64, sigma_sq: f64, floor: f64) -> f64 {
    let s0 = s0_sq.sqrt();
    let censored = (floor * floor / (2.0 * sigma_sq)).ln();
    design
        .predictor(theta)
        .iter()
        .zip(y)
        .map(|(eta, &yi)| {
            let s = s0 * eta.exp();
            if yi > 0.0 {
                log_density_unchecked(yi, s, sigma_sq)
            } else {
                censored - s * s / (2.0 * sigma_sq)
            }
        })
        .sum()
}

#[derive(Debug, Clone, PartialEq)]
pub struct DirectGradient {
    pub theta: DVector<f64>,
    pub s0_sq: f64,
    pub sigma_sq: f64,
}

/// `g(x) / x` with `g = I1 / I0`, finite at `x = 0`.
fn ratio_over_x(x: f64) -> f64 {
    if x < 1e-6 {
        0.5 - x * x / 16.0
    } else {
        ratio_unchecked(x) / x
    }
}

/// Analytic gradient of [`rician_direct_loglik`] in `(theta, S0^2, sigma^2)`.
pub fn rician_direct_gradient(design: &Design, y: &[f64], theta: &[f64], s0_sq: f64, sigma_sq: f64) -> Result<DirectGradient> {
    design.check_data(y)?;
    check_params(theta, s0_sq, sigma_sq, design)?;
    let mut w_theta = vec![0.0; y.len()];
    let (mut g_s0, mut g_sigma) = (0.0, 0.0);
    let s4 = sigma_sq * sigma_sq;
    for (i, eta) in design.predictor(theta).iter().enumerate() {
        let e2 = (2.0 * eta).exp();
        let s_sq = s0_sq * e2;
        let yi = y[i];
        // h = g(x) x with x = Y S / sigma^2, written via g(x)/x to stay
        // finite at S = 0.
        let x_sq = yi * yi * s_sq / s4;
        let h = ratio_over_x(x_sq.sqrt()) * x_sq;
        w_theta[i] = -s_sq / sigma_sq + h;
        g_s0 += -e2 / (2.0 * sigma_sq) + ratio_over_x(x_sq.sqrt()) * yi * yi * e2 / (2.0 * s4);
        g_sigma += -1.0 / sigma_sq + (yi * yi + s_sq) / (2.0 * s4) - h / sigma_sq;
    }
    Ok(DirectGradient {
        theta: design.z().tr_mul(&DVector::from_vec(w_theta)),
        s0_sq: g_s0,
        sigma_sq: g_sigma,
    })
}

/// Curvature of the log-likelihood in `(log S0, theta)`: the negated Hessian
/// for [`Curvature::Exact`], the high-SNR information otherwise. Row
/// `i` has regressor `W_i = [1, Z_i]`, `a_i = S_i^2 / sigma^2` and
/// `x_i = Y_i S_i / sigma^2`; the exact Hessian weight is
/// `-2 a_i + x_i^2 (1 - g(x_i)^2)`, which follows from
/// `g'(x) = 1 - g/x - g^2`.
pub fn direct_curvature(design: &Design, y: &[f64], theta: &[f64], s0_sq: f64, sigma_sq: f64, kind: Curvature) -> DMatrix<f64> {
    let p = design.dim() + 1;
    let mut m = DMatrix::zeros(p, p);
    let mut w = vec![0.0; p];
    for (i, eta) in design.predictor(theta).iter().enumerate() {
        let a = s0_sq * (2.0 * eta).exp() / sigma_sq;
        let weight = match kind {
            Curvature::Approximate => (a - 0.5).max(0.0),
            Curvature::Exact if y[i] > 0.0 => {
                let x = y[i] * a.sqrt() / sigma_sq.sqrt();
                let g = ratio_unchecked(x);
                2.0 * a - x * x * (1.0 - g * g)
            }
            Curvature::Exact => 2.0 * a,
        };
        w[0] = 1.0;
        for j in 1..p {
            w[j] = design.z()[(i, j - 1)];
        }
        for r in 0..p {
            let wr = weight * w[r];
            for c in r..p {
                m[(r, c)] += wr * w[c];
            }
        }
    }
    m.fill_lower_triangle_with_upper_triangle();
    m
}

/// Gradient in `(log S0, theta)`.
fn beta_gradient(design: &Design, y: &[f64], theta: &[f64], s0_sq: f64, sigma_sq: f64) -> DVector<f64> {
    let p = design.dim() + 1;
    let mut g = DVector::zeros(p);
    for (i, eta) in design.predictor(theta).iter().enumerate() {
        let a = s0_sq * (2.0 * eta).exp() / sigma_sq;
        let x_sq = y[i] * y[i] * a / sigma_sq;
        let w = -a + ratio_over_x(x_sq.sqrt()) * x_sq;
        g[0] += w;
        for j in 1..p {
            g[j] += w * design.z()[(i, j - 1)];
        }
    }
    g
}

/// Positive definite curvature for the Newton step; a Levenberg shift is
/// added when the exact Hessian is indefinite, bending the step toward the
/// gradient.
fn ascent_direction(curv: &DMatrix<f64>, grad: &DVector<f64>) -> Option<DVector<f64>> {
    if let Some(ch) = curv.clone().cholesky() {
        return Some(ch.solve(grad));
    }
    let p = curv.nrows();
    let scale = (0..p).map(|i| curv[(i, i)].abs()).fold(0.0, f64::max).max(1e-300);
    let mut mu = 1e-8 * scale;
    for _ in 0..40 {
        let shifted = curv + DMatrix::identity(p, p) * mu;
        if let Some(ch) = shifted.cholesky() {
            return Some(ch.solve(grad));
        }
        mu *= 10.0;
    }
    solve_spd_with_ridge(&DMatrix::identity(p, p), grad)
}

/// Direct maximisation of the Rician log-likelihood.
///
/// Each iteration takes a backtracked Newton step in `(log S0, theta)` and
/// then a fixed-point update of `sigma^2` from its score,
/// `sigma^2 <- (sum(Y^2 + S^2)/2 - sum g(x) Y S) / m`, also backtracked (in
/// log space). Stops when the natural-gradient norm
/// `sqrt(grad' C^-1 grad + (sigma^2 dQ/dsigma^2)^2 / m)` is below
/// `grad_tol`.
pub fn fit_rician_direct(design: &Design, y: &[f64], options: &DirectOptions) -> Result<BaselineReport> {
    design.check_data(y)?;
    if !(options.grad_tol > 0.0) {
        return Err(Error::config("grad_tol", "must be positive"));
    }
    if y.iter().all(|v| *v == 0.0) {
        return Ok(BaselineReport {
            method: Method::RicianDirect,
            theta: TensorParams::zeros(design.order()),
            s0_sq: em::S0_SQ_FLOOR,
            sigma_sq: f64::MIN_POSITIVE,
            converged: false,
            iterations: 0,
            loglik: f64::NAN,
            rows_used: y.len(),
            degenerate: true,
        });
    }
    let floor = resolve_floor(y, options.y_min)?;
    let init = em::initialize(design, y, &options.init)?;
    let mut theta = init.theta.into_theta();
    let mut s0_sq = init.s0_sq;
    let mut sigma_sq = init.sigma_sq;
    let m = y.len() as f64;
    let q = |t: &[f64], s0: f64, s2: f64| loglik_unchecked(design, y, t, s0, s2, floor);
    let mut current = q(&theta, s0_sq, sigma_sq);
    let mut converged = false;
    let mut iterations = 0;

    for _ in 0..options.max_iters {
        iterations += 1;

        let grad = beta_gradient(design, y, &theta, s0_sq, sigma_sq);
        let curv = direct_curvature(design, y, &theta, s0_sq, sigma_sq, options.curvature);
        let Some(mut step) = ascent_direction(&curv, &grad) else { break };
        let decrement = grad.dot(&step).max(0.0);
        let sigma_grad = rician_direct_gradient(design, y, &theta, s0_sq, sigma_sq)?.sigma_sq * sigma_sq;
        if (decrement + sigma_grad * sigma_grad / m).sqrt() < options.grad_tol {
            converged = true;
            break;
        }

        let before = current;
        for _ in 0..=30 {
            let cand: Vec<f64> = theta.iter().enumerate().map(|(j, t)| t + step[j + 1]).collect();
            let cand_s0 = s0_sq * (2.0 * step[0]).exp();
            let val = q(&cand, cand_s0, sigma_sq);
            if val >= current {
                theta = cand;
                s0_sq = cand_s0;
                current = val;
                break;
            }
            step *= 0.5;
        }

        let s0 = s0_sq.sqrt();
        let (mut a, mut b) = (0.0, 0.0);
        for (eta, &yi) in design.predictor(&theta).iter().zip(y) {
            let s = s0 * eta.exp();
            a += yi * yi + s * s;
            if yi > 0.0 {
                b += ratio_unchecked(yi * s / sigma_sq) * yi * s;
            }
        }
        let target = (0.5 * a - b) / m;
        if target > 0.0 && target.is_finite() {
            let mut log_step = (target / sigma_sq).ln();
            for _ in 0..=30 {
                let cand = sigma_sq * log_step.exp();
                let val = q(&theta, s0_sq, cand);
                if val >= current {
                    sigma_sq = cand;
                    current = val;
                    break;
                }
                log_step *= 0.5;
            }
        }
        if !(current > before) {
            // Stationary to within the resolution of the log-likelihood.
            converged = true;
            break;
        }
    }

    Ok(BaselineReport {
        method: Method::RicianDirect,
        loglik: em::marginal_loglik(design, y, &theta, s0_sq, sigma_sq),
        theta: TensorParams::new(design.order(), theta)?,
        s0_sq,
        sigma_sq,
        converged,
        iterations,
        rows_used: y.len(),
        degenerate: false,
    })
}
