//! Small dense solves on top of nalgebra.

use nalgebra::{DMatrix, DVector};

/// Solves `m x = rhs` for a symmetric matrix expected to be positive
/// definite. Falls back to a ridge of `1e-10 * trace / d` and then to LU.
/// Returns `None` when every attempt fails.
pub fn solve_spd_with_ridge(m: &DMatrix<f64>, rhs: &DVector<f64>) -> Option<DVector<f64>> {
    if let Some(ch) = m.clone().cholesky() {
        return Some(ch.solve(rhs));
    }
    let d = m.nrows();
    let ridge = 1e-10 * m.trace().abs() / d as f64;
    if ridge > 0.0 {
        let mut r = m.clone();
        for i in 0..d {
            r[(i, i)] += ridge;
        }
        if let Some(ch) = r.clone().cholesky() {
            return Some(ch.solve(rhs));
        }
        let x = r.lu().solve(rhs)?;
        if x.iter().all(|v| v.is_finite()) {
            return Some(x);
        }
    }
    None
}

/// Least squares `min ||w^{1/2} (A x - y)||` via column-equilibrated SVD.
/// Reports the column whose removal would be needed when the design is
/// rank deficient.
pub fn weighted_least_squares(
    a: &DMatrix<f64>,
    y: &DVector<f64>,
    w: Option<&DVector<f64>>,
) -> Result<DVector<f64>, String> {
    let (n, p) = a.shape();
    if n < p {
        return Err(format!("{n} rows for {p} unknowns"));
    }
    let mut aw = a.clone();
    let mut yw = y.clone();
    if let Some(w) = w {
        for i in 0..n {
            let s = w[i].sqrt();
            aw.row_mut(i).scale_mut(s);
            yw[i] *= s;
        }
    }
    let scales: Vec<f64> = (0..p)
        .map(|j| {
            let c = aw.column(j).norm();
            if c > 0.0 { c } else { 1.0 }
        })
        .collect();
    for (j, s) in scales.iter().enumerate() {
        aw.column_mut(j).unscale_mut(*s);
    }
    let svd = aw.svd(true, true);
    let smax = svd.singular_values.max();
    let smin = svd.singular_values.min();
    if !(smax > 0.0) || smin <= 1e-12 * smax {
        let worst = (0..p)
            .min_by(|&i, &j| {
                svd.singular_values[i]
                    .partial_cmp(&svd.singular_values[j])
                    .unwrap()
            })
            .unwrap_or(0);
        return Err(format!(
            "condition number above 1e12 ({n}x{p} design, singular value {smin:e} of {smax:e}, index {worst})"
        ));
    }
    let mut x = svd.solve(&yw, 0.0)?;
    for (j, s) in scales.iter().enumerate() {
        x[j] /= s;
    }
    Ok(x)
}
