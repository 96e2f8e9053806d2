//! Evaluation statistics: SNR curves, MSE tables and fitted-signal curves.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::report::{Method, ParameterEstimate};
use crate::scheme::AcquisitionScheme;
use crate::synth::GroundTruth;
use crate::tensor::{design_row_into, TensorOrder};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SnrCurve {
    pub knots: Vec<f64>,
    pub snr: Vec<f64>,
}

fn fitted_signal(order: TensorOrder, theta: &[f64], s0: f64, b: f64, g: &[f64; 3]) -> f64 {
    let mut row = [0.0; 15];
    design_row_into(b, g, order, &mut row[..order.dim()]);
    let eta: f64 = row.iter().zip(theta).map(|(z, t)| z * t).sum();
    s0 * eta.exp()
}

fn direction_mean(order: TensorOrder, theta: &[f64], s0: f64, b: f64, dirs: &[[f64; 3]]) -> f64 {
    dirs.iter().map(|g| fitted_signal(order, theta, s0, b, g)).sum::<f64>() / dirs.len() as f64
}

/// Fitted SNR per knot: the direction average of `S0 exp(Z theta) / sigma`.
pub fn snr_curve(fit: &dyn ParameterEstimate, scheme: &AcquisitionScheme) -> SnrCurve {
    let knots = scheme.knots();
    let dirs = scheme.directions();
    let theta = fit.theta();
    let s0 = fit.s0_sq().sqrt();
    let sigma = fit.sigma_sq().sqrt();
    let snr = knots
        .iter()
        .map(|&b| direction_mean(theta.order(), theta.theta(), s0, b, &dirs) / sigma)
        .collect();
    SnrCurve { knots, snr }
}

/// Raw-moment diagnostic: `mean(Y) / sd(Y)` over all rows at each knot.
/// Directional variation of the signal inflates `sd(Y)`, so this
/// understates the SNR of anisotropic voxels.
pub fn raw_snr_curve(scheme: &AcquisitionScheme, y: &[f64]) -> Result<SnrCurve> {
    if y.len() != scheme.len() {
        return Err(Error::invalid(format!("{} magnitudes for {} rows", y.len(), scheme.len())));
    }
    let knots = scheme.knots();
    let snr = knots
        .iter()
        .map(|&b| {
            let vals: Vec<f64> = scheme.rows().iter().zip(y).filter(|(r, _)| r.b == b).map(|(_, v)| *v).collect();
            let n = vals.len() as f64;
            let mean = vals.iter().sum::<f64>() / n;
            if vals.len() < 2 {
                return f64::NAN;
            }
            let sd = (vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
            if sd > 0.0 { mean / sd } else { f64::INFINITY }
        })
        .collect();
    Ok(SnrCurve { knots, snr })
}

fn find_knot(scheme: &AcquisitionScheme, b: f64) -> Result<f64> {
    let knots = scheme.knots();
    knots
        .iter()
        .copied()
        .find(|k| (k - b).abs() <= 1e-9 * k.abs().max(1.0))
        .ok_or_else(|| Error::invalid(format!("b = {b} is not a knot; knots are {knots:?}")))
}

/// `S0 exp(Z(b, g) theta)` for every direction of the scheme at knot `b`.
pub fn signal_curve(fit: &dyn ParameterEstimate, scheme: &AcquisitionScheme, b: f64) -> Result<Vec<f64>> {
    let b = find_knot(scheme, b)?;
    let theta = fit.theta();
    let s0 = fit.s0_sq().sqrt();
    Ok(scheme
        .directions()
        .iter()
        .map(|g| fitted_signal(theta.order(), theta.theta(), s0, b, g))
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodMse {
    pub method: Method,
    pub datasets: usize,
    pub theta_mse: Vec<f64>,
    /// Unweighted mean of `theta_mse`.
    pub theta_mse_mean: f64,
    pub sigma_sq_mse: f64,
    pub sigma_sq_bias: f64,
    /// Per knot, averaged over directions and datasets.
    pub signal_mse: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MseTable {
    pub knots: Vec<f64>,
    /// One row per method present, in [`Method`] order.
    pub rows: Vec<MethodMse>,
}

impl MseTable {
    pub fn get(&self, method: Method) -> Option<&MethodMse> {
        self.rows.iter().find(|r| r.method == method)
    }
}

/// Sum after sorting, so the result does not depend on input order.
fn ordered_mean(mut v: Vec<f64>) -> f64 {
    let n = v.len() as f64;
    v.sort_by(|a, b| a.partial_cmp(b).unwrap_or(std::cmp::Ordering::Equal));
    v.iter().sum::<f64>() / n
}

fn same_truth(a: &GroundTruth, b: &GroundTruth) -> bool {
    a.theta_true == b.theta_true && a.s0_true == b.s0_true && a.sigma_sq_true == b.sigma_sq_true
}

/// MSE table over `(estimate, truth)` pairs. Truths may differ only in
/// their seed; estimates must match the truth's tensor order.
pub fn mse_report(fits: &[(&dyn ParameterEstimate, &GroundTruth)], scheme: &AcquisitionScheme) -> Result<MseTable> {
    let Some((_, first)) = fits.first() else {
        return Err(Error::invalid("mse_report needs at least one fit"));
    };
    for (fit, truth) in fits {
        if !same_truth(first, truth) {
            return Err(Error::invalid("fits reference different ground truths"));
        }
        if fit.theta().order() != truth.order() {
            return Err(Error::invalid(format!(
                "{} fit has order {}, truth has order {}",
                fit.method(),
                fit.theta().order(),
                truth.order()
            )));
        }
    }
    let truth = *first;
    let knots = scheme.knots();
    let dirs = scheme.directions();
    let order = truth.order();
    let d = order.dim();
    let true_signal: Vec<Vec<f64>> = knots
        .iter()
        .map(|&b| dirs.iter().map(|g| fitted_signal(order, truth.theta_true.theta(), truth.s0_true, b, g)).collect())
        .collect();

    let mut methods: Vec<Method> = fits.iter().map(|(f, _)| f.method()).collect();
    methods.sort();
    methods.dedup();
    let rows = methods
        .into_iter()
        .map(|method| {
            let group: Vec<&dyn ParameterEstimate> =
                fits.iter().filter(|(f, _)| f.method() == method).map(|(f, _)| *f).collect();
            let theta_mse: Vec<f64> = (0..d)
                .map(|j| ordered_mean(group.iter().map(|f| (f.theta().theta()[j] - truth.theta_true.theta()[j]).powi(2)).collect()))
                .collect();
            let sigma_sq_mse = ordered_mean(group.iter().map(|f| (f.sigma_sq() - truth.sigma_sq_true).powi(2)).collect());
            let sigma_sq_bias = ordered_mean(group.iter().map(|f| f.sigma_sq() - truth.sigma_sq_true).collect());
            let signal_mse = knots
                .iter()
                .zip(&true_signal)
                .map(|(&b, truth_b)| {
                    let mut errs = Vec::with_capacity(group.len() * dirs.len());
                    for f in &group {
                        let s0 = f.s0_sq().sqrt();
                        for (g, t) in dirs.iter().zip(truth_b) {
                            errs.push((fitted_signal(order, f.theta().theta(), s0, b, g) - t).powi(2));
                        }
                    }
                    ordered_mean(errs)
                })
                .collect();
            MethodMse {
                method,
                datasets: group.len(),
                theta_mse_mean: ordered_mean(theta_mse.clone()),
                theta_mse,
                sigma_sq_mse,
                sigma_sq_bias,
                signal_mse,
            }
        })
        .collect();
    Ok(MseTable { knots, rows })
}
