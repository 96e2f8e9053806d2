//! Diffusivity models on the sphere.
//!
//! Order 2 uses `(Dxx, Dyy, Dzz, Dxy, Dxz, Dyz)`. Order 4 stores the 15
//! distinct entries of the totally symmetric tensor, ordered
//! lexicographically by the exponents `(a, b, c)` of `gx^a gy^b gz^c`:
//! 4000, 3100, 3010, 2200, 2110, 2020, 1300, 1210, 1120, 1030, 0400, 0310,
//! 0220, 0130, 0040. The multinomial multiplicity of each entry lives in the
//! design row, so `Z . theta = -b d(g)` holds exactly for both orders.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const UNIT_TOL: f64 = 1e-9;

/// Exponents of the order-4 monomials in coefficient order.
pub const QUARTIC_EXPONENTS: [[u8; 3]; 15] = [
    [4, 0, 0],
    [3, 1, 0],
    [3, 0, 1],
    [2, 2, 0],
    [2, 1, 1],
    [2, 0, 2],
    [1, 3, 0],
    [1, 2, 1],
    [1, 1, 2],
    [1, 0, 3],
    [0, 4, 0],
    [0, 3, 1],
    [0, 2, 2],
    [0, 1, 3],
    [0, 0, 4],
];

/// Multinomial multiplicities `4! / (a! b! c!)` matching [`QUARTIC_EXPONENTS`].
pub const QUARTIC_MULTIPLICITY: [f64; 15] = [
    1.0, 4.0, 4.0, 6.0, 12.0, 6.0, 4.0, 12.0, 12.0, 4.0, 1.0, 4.0, 6.0, 4.0, 1.0,
];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "u8", into = "u8")]
pub enum TensorOrder {
    Two,
    Four,
}

impl TensorOrder {
    /// Number of free coefficients.
    pub fn dim(self) -> usize {
        match self {
            TensorOrder::Two => 6,
            TensorOrder::Four => 15,
        }
    }

    pub fn as_u8(self) -> u8 {
        match self {
            TensorOrder::Two => 2,
            TensorOrder::Four => 4,
        }
    }
}

impl TryFrom<u8> for TensorOrder {
    type Error = Error;

    fn try_from(v: u8) -> Result<Self> {
        match v {
            2 => Ok(TensorOrder::Two),
            4 => Ok(TensorOrder::Four),
            other => Err(Error::invalid(format!("tensor order must be 2 or 4, got {other}"))),
        }
    }
}

impl From<TensorOrder> for u8 {
    fn from(o: TensorOrder) -> u8 {
        o.as_u8()
    }
}

impl std::fmt::Display for TensorOrder {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}", self.as_u8())
    }
}

/// A diffusion-weighting control: b-amplitude and unit gradient direction.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GradientControl {
    pub b: f64,
    pub g: [f64; 3],
}

impl GradientControl {
    pub fn new(b: f64, g: [f64; 3]) -> Result<Self> {
        let c = Self { b, g };
        c.validate()?;
        Ok(c)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.b.is_finite() && self.b >= 0.0) {
            return Err(Error::domain(format!("b must be finite and >= 0, got {}", self.b)));
        }
        if self.b > 0.0 {
            check_unit(&self.g)?;
        }
        Ok(())
    }
}

fn norm3(g: &[f64; 3]) -> f64 {
    (g[0] * g[0] + g[1] * g[1] + g[2] * g[2]).sqrt()
}

fn check_unit(g: &[f64; 3]) -> Result<()> {
    let n = norm3(g);
    if (n - 1.0).abs() > UNIT_TOL || !n.is_finite() {
        return Err(Error::domain(format!("gradient direction must have unit length, |g| = {n}")));
    }
    Ok(())
}

/// Tensor coefficients tagged with their order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorParams {
    order: TensorOrder,
    theta: Vec<f64>,
}

impl TensorParams {
    pub fn new(order: TensorOrder, theta: Vec<f64>) -> Result<Self> {
        if theta.len() != order.dim() {
            return Err(Error::invalid(format!(
                "order-{order} tensor needs {} coefficients, got {}",
                order.dim(),
                theta.len()
            )));
        }
        if let Some(bad) = theta.iter().find(|v| !v.is_finite()) {
            return Err(Error::invalid(format!("tensor coefficient is not finite: {bad}")));
        }
        Ok(Self { order, theta })
    }

    pub fn zeros(order: TensorOrder) -> Self {
        Self {
            order,
            theta: vec![0.0; order.dim()],
        }
    }

    pub fn order(&self) -> TensorOrder {
        self.order
    }

    pub fn theta(&self) -> &[f64] {
        &self.theta
    }

    pub fn into_theta(self) -> Vec<f64> {
        self.theta
    }

    /// Order-2 tensor from a symmetric 3x3 matrix.
    pub fn from_matrix(d: &[[f64; 3]; 3]) -> Result<Self> {
        Self::new(
            TensorOrder::Two,
            vec![d[0][0], d[1][1], d[2][2], d[0][1], d[0][2], d[1][2]],
        )
    }

    /// The symmetric 3x3 matrix of an order-2 tensor.
    pub fn matrix(&self) -> Result<[[f64; 3]; 3]> {
        if self.order != TensorOrder::Two {
            return Err(Error::invalid("matrix form is only defined for order-2 tensors"));
        }
        let t = &self.theta;
        Ok([[t[0], t[3], t[4]], [t[3], t[1], t[5]], [t[4], t[5], t[2]]])
    }

    /// Order-4 tensor whose diffusivity is `(g' A g)(g' B g)` for symmetric
    /// `A`, `B`. Positive whenever both factors are.
    pub fn quartic_product(a: &[[f64; 3]; 3], b: &[[f64; 3]; 3]) -> Result<Self> {
        // Quadratic monomials gx^2, gy^2, gz^2, gxgy, gxgz, gygz.
        const QUAD: [[u8; 3]; 6] = [[2, 0, 0], [0, 2, 0], [0, 0, 2], [1, 1, 0], [1, 0, 1], [0, 1, 1]];
        let coeffs = |m: &[[f64; 3]; 3]| {
            [m[0][0], m[1][1], m[2][2], 2.0 * m[0][1], 2.0 * m[0][2], 2.0 * m[1][2]]
        };
        let (ca, cb) = (coeffs(a), coeffs(b));
        let mut poly = [0.0; 15];
        for (i, ea) in QUAD.iter().enumerate() {
            for (j, eb) in QUAD.iter().enumerate() {
                let e = [ea[0] + eb[0], ea[1] + eb[1], ea[2] + eb[2]];
                let k = QUARTIC_EXPONENTS.iter().position(|x| *x == e).expect("degree-4 monomial");
                poly[k] += ca[i] * cb[j];
            }
        }
        let theta = poly
            .iter()
            .zip(QUARTIC_MULTIPLICITY.iter())
            .map(|(p, m)| p / m)
            .collect();
        Self::new(TensorOrder::Four, theta)
    }

    /// Order-4 embedding of an order-2 tensor, `d4(g) = (g' D g) |g|^2`.
    pub fn lift_to_order4(&self) -> Result<Self> {
        let id = [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]];
        Self::quartic_product(&self.matrix()?, &id)
    }
}

/// Writes the design row for `(b, g)` into `out` (length `order.dim()`).
/// Performs no validation.
pub(crate) fn design_row_into(b: f64, g: &[f64; 3], order: TensorOrder, out: &mut [f64]) {
    if b == 0.0 {
        out.iter_mut().for_each(|v| *v = 0.0);
        return;
    }
    let [x, y, z] = *g;
    match order {
        TensorOrder::Two => {
            out[0] = -b * x * x;
            out[1] = -b * y * y;
            out[2] = -b * z * z;
            out[3] = -b * 2.0 * x * y;
            out[4] = -b * 2.0 * x * z;
            out[5] = -b * 2.0 * y * z;
        }
        TensorOrder::Four => {
            for (k, e) in QUARTIC_EXPONENTS.iter().enumerate() {
                out[k] = -b
                    * QUARTIC_MULTIPLICITY[k]
                    * x.powi(e[0] as i32)
                    * y.powi(e[1] as i32)
                    * z.powi(e[2] as i32);
            }
        }
    }
}

/// Design row `Z` with `Z . theta = -b d(g)`; zero when `b = 0`.
pub fn design_row(control: &GradientControl, order: TensorOrder) -> Result<Vec<f64>> {
    control.validate()?;
    let mut out = vec![0.0; order.dim()];
    design_row_into(control.b, &control.g, order, &mut out);
    Ok(out)
}

/// Apparent diffusivity `d(g)` along a unit direction.
pub fn diffusivity(theta: &TensorParams, g: &[f64; 3]) -> Result<f64> {
    check_unit(g)?;
    Ok(diffusivity_unchecked(theta, g))
}

fn diffusivity_unchecked(theta: &TensorParams, g: &[f64; 3]) -> f64 {
    let mut row = [0.0; 15];
    let d = theta.order.dim();
    design_row_into(1.0, g, theta.order, &mut row[..d]);
    -row[..d].iter().zip(&theta.theta).map(|(z, t)| z * t).sum::<f64>()
}

/// Eigenvalues in descending order with matching orthonormal eigenvectors
/// (`vectors[i]` belongs to `values[i]`).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EigenDecomposition {
    pub values: [f64; 3],
    pub vectors: [[f64; 3]; 3],
}

impl EigenDecomposition {
    /// `V diag(values) V'`.
    pub fn reconstruct(&self) -> [[f64; 3]; 3] {
        let mut m = [[0.0; 3]; 3];
        for k in 0..3 {
            let v = &self.vectors[k];
            for i in 0..3 {
                for j in 0..3 {
                    m[i][j] += self.values[k] * v[i] * v[j];
                }
            }
        }
        m
    }
}

fn dot(a: &[f64; 3], b: &[f64; 3]) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

fn cross(a: &[f64; 3], b: &[f64; 3]) -> [f64; 3] {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

fn scale(a: &[f64; 3], s: f64) -> [f64; 3] {
    [a[0] * s, a[1] * s, a[2] * s]
}

fn mat_vec(m: &[[f64; 3]; 3], v: &[f64; 3]) -> [f64; 3] {
    [dot(&m[0], v), dot(&m[1], v), dot(&m[2], v)]
}

fn quad_form(m: &[[f64; 3]; 3], v: &[f64; 3]) -> f64 {
    dot(v, &mat_vec(m, v))
}

/// Closed-form symmetric 3x3 eigen-solve.
///
/// Cardano gives the three roots. Only the eigenvector of the most isolated
/// root is taken from the null space of `A - lambda I`; the other two come
/// from an exact Jacobi rotation of the 2x2 block in its orthogonal
/// complement, so the basis is orthonormal by construction. Eigenvalues are
/// then recomputed as Rayleigh quotients.
pub fn eigen_symmetric3(a: &[[f64; 3]; 3]) -> EigenDecomposition {
    let s = a.iter().flatten().fold(0.0f64, |m, v| m.max(v.abs()));
    if s == 0.0 || !s.is_finite() {
        return EigenDecomposition {
            values: [0.0; 3],
            vectors: [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]],
        };
    }
    let mut b = *a;
    b.iter_mut().flatten().for_each(|v| *v /= s);
    // Symmetrise in case the caller's matrix is off by rounding.
    for i in 0..3 {
        for j in (i + 1)..3 {
            let m = 0.5 * (b[i][j] + b[j][i]);
            b[i][j] = m;
            b[j][i] = m;
        }
    }

    let q = (b[0][0] + b[1][1] + b[2][2]) / 3.0;
    let p1 = b[0][1].powi(2) + b[0][2].powi(2) + b[1][2].powi(2);
    let p2 = (b[0][0] - q).powi(2) + (b[1][1] - q).powi(2) + (b[2][2] - q).powi(2) + 2.0 * p1;
    let p = (p2 / 6.0).sqrt();
    if p < 1e-15 {
        return EigenDecomposition {
            values: [q * s; 3],
            vectors: [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]],
        };
    }
    let mut c = b;
    for (i, row) in c.iter_mut().enumerate() {
        row[i] -= q;
        row.iter_mut().for_each(|v| *v /= p);
    }
    let det = c[0][0] * (c[1][1] * c[2][2] - c[1][2] * c[2][1])
        - c[0][1] * (c[1][0] * c[2][2] - c[1][2] * c[2][0])
        + c[0][2] * (c[1][0] * c[2][1] - c[1][1] * c[2][0]);
    let r = (0.5 * det).clamp(-1.0, 1.0);
    let phi = r.acos() / 3.0;
    let l1 = q + 2.0 * p * phi.cos();
    let l3 = q + 2.0 * p * (phi + 2.0 * std::f64::consts::PI / 3.0).cos();
    let l2 = 3.0 * q - l1 - l3;

    let isolated = if l1 - l2 >= l2 - l3 { l1 } else { l3 };
    let shifted = [
        [b[0][0] - isolated, b[0][1], b[0][2]],
        [b[1][0], b[1][1] - isolated, b[1][2]],
        [b[2][0], b[2][1], b[2][2] - isolated],
    ];
    let candidates = [
        cross(&shifted[0], &shifted[1]),
        cross(&shifted[0], &shifted[2]),
        cross(&shifted[1], &shifted[2]),
    ];
    let best = candidates
        .iter()
        .max_by(|x, y| dot(x, x).partial_cmp(&dot(y, y)).unwrap())
        .copied()
        .unwrap();
    let v = scale(&best, 1.0 / dot(&best, &best).sqrt());

    // Orthonormal complement of v.
    let axis = {
        let av = [v[0].abs(), v[1].abs(), v[2].abs()];
        let k = if av[0] <= av[1] && av[0] <= av[2] {
            0
        } else if av[1] <= av[2] {
            1
        } else {
            2
        };
        let mut e = [0.0; 3];
        e[k] = 1.0;
        e
    };
    let u = cross(&v, &axis);
    let u = scale(&u, 1.0 / dot(&u, &u).sqrt());
    let w = cross(&v, &u);

    let bu = mat_vec(&b, &u);
    let m00 = dot(&u, &bu);
    let m01 = dot(&w, &bu);
    let m11 = quad_form(&b, &w);
    let angle = 0.5 * (2.0 * m01).atan2(m00 - m11);
    let (sn, cs) = angle.sin_cos();
    let e1 = [cs * u[0] + sn * w[0], cs * u[1] + sn * w[1], cs * u[2] + sn * w[2]];
    let e2 = [-sn * u[0] + cs * w[0], -sn * u[1] + cs * w[1], -sn * u[2] + cs * w[2]];

    let mut pairs = [
        (quad_form(&b, &v) * s, v),
        (quad_form(&b, &e1) * s, e1),
        (quad_form(&b, &e2) * s, e2),
    ];
    pairs.sort_by(|x, y| y.0.partial_cmp(&x.0).unwrap());
    EigenDecomposition {
        values: [pairs[0].0, pairs[1].0, pairs[2].0],
        vectors: [pairs[0].1, pairs[1].1, pairs[2].1],
    }
}

/// Eigen-decomposition of an order-2 tensor.
pub fn eigen_2nd_order(theta: &TensorParams) -> Result<EigenDecomposition> {
    Ok(eigen_symmetric3(&theta.matrix()?))
}

/// Fractional anisotropy from the three eigenvalues, clamped to `[0, 1]`.
pub fn fractional_anisotropy(eig: &EigenDecomposition) -> Result<f64> {
    let l = eig.values;
    let norm_sq = l[0] * l[0] + l[1] * l[1] + l[2] * l[2];
    if norm_sq == 0.0 {
        return Err(Error::domain("fractional anisotropy is undefined for a zero tensor"));
    }
    let mean = (l[0] + l[1] + l[2]) / 3.0;
    let dev = (l[0] - mean).powi(2) + (l[1] - mean).powi(2) + (l[2] - mean).powi(2);
    Ok(((3.0 * dev) / (2.0 * norm_sq)).sqrt().clamp(0.0, 1.0))
}

/// Mean diffusivity.
///
/// Order 2 is `trace / 3`. Order 4 uses the six-component expression
/// `(D1111 + D1122 + D1133 + 2 D2222 + 2 D3333 + 2 D2233) / 5` as published;
/// note that it is not the sphere average of `d(g)` (an isotropic unit
/// quartic evaluates to 19/15, not 1).
pub fn mean_diffusivity(theta: &TensorParams) -> f64 {
    let t = &theta.theta;
    match theta.order {
        TensorOrder::Two => (t[0] + t[1] + t[2]) / 3.0,
        TensorOrder::Four => {
            let (d1111, d1122, d1133) = (t[0], t[3], t[5]);
            let (d2222, d2233, d3333) = (t[10], t[12], t[14]);
            (d1111 + d1122 + d1133 + 2.0 * d2222 + 2.0 * d3333 + 2.0 * d2233) / 5.0
        }
    }
}

/// Deterministic near-uniform point set on the upper hemisphere (golden
/// spiral). `d(g) = d(-g)`, so a hemisphere covers the sphere.
pub fn hemisphere_grid(n: usize) -> Vec<[f64; 3]> {
    let golden = std::f64::consts::PI * (3.0 - 5f64.sqrt());
    (0..n)
        .map(|i| {
            let z = 1.0 - (i as f64 + 0.5) / n as f64;
            let r = (1.0 - z * z).max(0.0).sqrt();
            let phi = golden * i as f64;
            [r * phi.cos(), r * phi.sin(), z]
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PositivityReport {
    pub min_diffusivity: f64,
    pub min_direction: [f64; 3],
    /// Smallest eigenvalue; order 2 only.
    pub min_eigenvalue: Option<f64>,
    pub pass: bool,
}

/// Positivity diagnostic. Order 2 is decided by the smallest eigenvalue;
/// order 4 by the minimum of `d(g)` over a `grid_size`-point hemisphere grid.
pub fn positivity_check(theta: &TensorParams, grid_size: usize) -> Result<PositivityReport> {
    match theta.order {
        TensorOrder::Two => {
            let eig = eigen_2nd_order(theta)?;
            Ok(PositivityReport {
                min_diffusivity: eig.values[2],
                min_direction: eig.vectors[2],
                min_eigenvalue: Some(eig.values[2]),
                pass: eig.values[2] > 0.0,
            })
        }
        TensorOrder::Four => {
            if grid_size < 60 {
                return Err(Error::domain(format!(
                    "order-4 positivity check needs grid_size >= 60, got {grid_size}"
                )));
            }
            let (min_d, dir) = hemisphere_grid(grid_size)
                .into_iter()
                .map(|g| (diffusivity_unchecked(theta, &g), g))
                .min_by(|a, b| a.0.partial_cmp(&b.0).unwrap())
                .expect("non-empty grid");
            Ok(PositivityReport {
                min_diffusivity: min_d,
                min_direction: dir,
                min_eigenvalue: None,
                pass: min_d > 0.0,
            })
        }
    }
}

/// Clamp the eigenvalues of an order-2 tensor from below at `floor`.
pub fn project_positive(theta: &TensorParams, floor: f64) -> Result<TensorParams> {
    let mut eig = eigen_2nd_order(theta)?;
    if eig.values[2] >= floor {
        return Ok(theta.clone());
    }
    eig.values.iter_mut().for_each(|v| *v = v.max(floor));
    TensorParams::from_matrix(&eig.reconstruct())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{RngExt, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_unit(rng: &mut ChaCha8Rng) -> [f64; 3] {
        loop {
            let v: [f64; 3] = [
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
            ];
            let n = norm3(&v);
            if n > 0.1 && n < 1.0 {
                return scale(&v, 1.0 / n);
            }
        }
    }

    /// Brute-force `sum_{ijkl} D_ijkl g_i g_j g_k g_l` from the 15 stored
    /// entries: each index tuple maps to the entry of its exponent pattern.
    fn four_fold_contraction(theta: &[f64], g: &[f64; 3]) -> f64 {
        let mut sum = 0.0;
        for i in 0..3 {
            for j in 0..3 {
                for k in 0..3 {
                    for l in 0..3 {
                        let mut e = [0u8; 3];
                        for idx in [i, j, k, l] {
                            e[idx] += 1;
                        }
                        let pos = QUARTIC_EXPONENTS.iter().position(|x| *x == e).unwrap();
                        sum += theta[pos] * g[i] * g[j] * g[k] * g[l];
                    }
                }
            }
        }
        sum
    }

    #[test]
    fn multiplicities_match_exponents() {
        let fact = |n: u8| (1..=n as u32).product::<u32>() as f64;
        for (e, m) in QUARTIC_EXPONENTS.iter().zip(QUARTIC_MULTIPLICITY) {
            assert_eq!(e.iter().sum::<u8>(), 4);
            assert_eq!(24.0 / (fact(e[0]) * fact(e[1]) * fact(e[2])), m);
        }
    }

    #[test]
    fn design_row_examples() {
        let c = GradientControl::new(1000.0, [1.0, 0.0, 0.0]).unwrap();
        assert_eq!(design_row(&c, TensorOrder::Two).unwrap(), vec![-1000.0, 0.0, 0.0, 0.0, 0.0, 0.0]);

        let h = 0.5f64.sqrt();
        let c = GradientControl { b: 1.0, g: [h, h, 0.0] };
        let z = design_row(&c, TensorOrder::Two).unwrap();
        let want = [-0.5, -0.5, 0.0, -1.0, 0.0, 0.0];
        for (a, b) in z.iter().zip(want) {
            assert!((a - b).abs() < 1e-15);
        }

        let c = GradientControl { b: 0.0, g: [0.3, 0.0, 0.0] };
        assert!(design_row(&c, TensorOrder::Four).unwrap().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn design_row_rejects_non_unit_direction() {
        let c = GradientControl { b: 10.0, g: [1.0, 1.0, 0.0] };
        assert!(design_row(&c, TensorOrder::Two).is_err());
        assert!(GradientControl::new(-1.0, [1.0, 0.0, 0.0]).is_err());
        assert!(diffusivity(&TensorParams::zeros(TensorOrder::Two), &[0.0, 0.0, 2.0]).is_err());
    }

    #[test]
    fn order4_design_row_matches_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..100 {
            let theta: Vec<f64> = (0..15).map(|_| rng.random_range(-1.0..1.0)).collect();
            let g = random_unit(&mut rng);
            let z = design_row(&GradientControl { b: 1.0, g }, TensorOrder::Four).unwrap();
            let zt: f64 = z.iter().zip(&theta).map(|(a, b)| a * b).sum();
            let brute = four_fold_contraction(&theta, &g);
            assert!((zt + brute).abs() < 1e-12 * (1.0 + brute.abs()));
            let tp = TensorParams::new(TensorOrder::Four, theta.clone()).unwrap();
            assert!((diffusivity(&tp, &g).unwrap() - brute).abs() < 1e-12 * (1.0 + brute.abs()));
        }
    }

    #[test]
    fn diffusivity_examples() {
        let iso = TensorParams::new(TensorOrder::Two, vec![1.0, 1.0, 1.0, 0.0, 0.0, 0.0]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..20 {
            let g = random_unit(&mut rng);
            assert!((diffusivity(&iso, &g).unwrap() - 1.0).abs() < 1e-14);
        }
        let t = TensorParams::new(TensorOrder::Two, vec![2.0, 1.0, 1.0, 0.0, 0.0, 0.0]).unwrap();
        assert_eq!(diffusivity(&t, &[1.0, 0.0, 0.0]).unwrap(), 2.0);
    }

    #[test]
    fn eigen_examples() {
        let t = TensorParams::new(TensorOrder::Two, vec![3.0, 2.0, 1.0, 0.0, 0.0, 0.0]).unwrap();
        let e = eigen_2nd_order(&t).unwrap();
        assert_eq!(e.values.map(|v| (v * 1e12).round() / 1e12), [3.0, 2.0, 1.0]);
        for (k, axis) in [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]].iter().enumerate() {
            assert!((dot(&e.vectors[k], axis).abs() - 1.0).abs() < 1e-12);
        }

        let t = TensorParams::new(TensorOrder::Two, vec![1.0, 1.0, 1.0, 1.0, 0.0, 0.0]).unwrap();
        let e = eigen_2nd_order(&t).unwrap();
        for (got, want) in e.values.iter().zip([2.0, 1.0, 0.0]) {
            assert!((got - want).abs() < 1e-14);
        }
        assert!(eigen_2nd_order(&TensorParams::zeros(TensorOrder::Four)).is_err());
    }

    fn check_decomposition(m: &[[f64; 3]; 3]) {
        let e = eigen_symmetric3(m);
        let norm = m.iter().flatten().map(|v| v * v).sum::<f64>().sqrt();
        let r = e.reconstruct();
        let err = (0..3)
            .flat_map(|i| (0..3).map(move |j| (i, j)))
            .map(|(i, j)| (r[i][j] - m[i][j]).powi(2))
            .sum::<f64>()
            .sqrt();
        assert!(err <= 1e-9 * norm.max(1e-300), "reconstruction error {err} for {m:?}");
        for i in 0..3 {
            for j in 0..3 {
                let want = if i == j { 1.0 } else { 0.0 };
                assert!((dot(&e.vectors[i], &e.vectors[j]) - want).abs() < 1e-9);
            }
        }
        assert!(e.values[0] >= e.values[1] && e.values[1] >= e.values[2]);
    }

    #[test]
    fn eigen_near_degenerate_cases() {
        check_decomposition(&[[1.0, 1e-9, 0.0], [1e-9, 1.0, 0.0], [0.0, 0.0, 1.0]]);
        check_decomposition(&[[2.0, 0.0, 0.0], [0.0, 1.0 + 1e-12, 0.0], [0.0, 0.0, 1.0]]);
        check_decomposition(&[[1.7e-3, 0.0, 0.0], [0.0, 0.2e-3, 1e-10], [0.0, 1e-10, 0.2e-3]]);
        check_decomposition(&[[0.0; 3]; 3]);
        check_decomposition(&[[5.0, 0.0, 0.0], [0.0, 5.0, 0.0], [0.0, 0.0, 5.0]]);
    }

    #[test]
    fn fa_examples() {
        let fa = |l: [f64; 3]| {
            fractional_anisotropy(&EigenDecomposition { values: l, vectors: [[0.0; 3]; 3] })
        };
        assert!(fa([1.0, 1.0, 1.0]).unwrap().abs() < 1e-15);
        assert!((fa([1.0, 0.0, 0.0]).unwrap() - 1.0).abs() < 1e-15);
        assert!((fa([2.0, 1.0, 1.0]).unwrap() - 1.0 / 6f64.sqrt()).abs() < 1e-12);
        assert!(fa([0.0, 0.0, 0.0]).is_err());
    }

    #[test]
    fn md_examples() {
        let t = TensorParams::new(TensorOrder::Two, vec![3.0, 2.0, 1.0, 0.0, 0.0, 0.0]).unwrap();
        assert_eq!(mean_diffusivity(&t), 2.0);

        let mut theta = vec![0.0; 15];
        for k in [0, 3, 5, 10, 12, 14] {
            theta[k] = 1.0;
        }
        let t4 = TensorParams::new(TensorOrder::Four, theta).unwrap();
        assert!((mean_diffusivity(&t4) - 9.0 / 5.0).abs() < 1e-15);

        // |g|^4 has D1111 = D2222 = D3333 = 1 and D1122 = D1133 = D2233 = 1/3.
        let id = [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]];
        let iso4 = TensorParams::quartic_product(&id, &id).unwrap();
        for g in hemisphere_grid(50) {
            assert!((diffusivity(&iso4, &g).unwrap() - 1.0).abs() < 1e-12);
        }
        assert!((mean_diffusivity(&iso4) - 19.0 / 15.0).abs() < 1e-14);
    }

    #[test]
    fn positivity_examples() {
        let t = TensorParams::new(TensorOrder::Two, vec![1.0, 1.0, 1.0, 0.0, 0.0, 0.0]).unwrap();
        let r = positivity_check(&t, 10).unwrap();
        assert!(r.pass);
        assert!((r.min_eigenvalue.unwrap() - 1.0).abs() < 1e-14);

        let t = TensorParams::new(TensorOrder::Two, vec![1.0, 1.0, -1.0, 0.0, 0.0, 0.0]).unwrap();
        let r = positivity_check(&t, 10).unwrap();
        assert!(!r.pass);
        assert!((r.min_eigenvalue.unwrap() + 1.0).abs() < 1e-14);

        let d = [[1.7, 0.1, 0.0], [0.1, 0.4, 0.05], [0.0, 0.05, 0.2]];
        let sq = TensorParams::quartic_product(&d, &d).unwrap();
        let r = positivity_check(&sq, 500).unwrap();
        assert!(r.pass && r.min_diffusivity > 0.0);
        assert!(positivity_check(&sq, 30).is_err());

        // A quartic with a negative lobe along z.
        let neg = [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, -0.5]];
        let id = [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]];
        let t4 = TensorParams::quartic_product(&neg, &id).unwrap();
        let r = positivity_check(&t4, 200).unwrap();
        assert!(!r.pass && r.min_direction[2].abs() > 0.9);
    }

    #[test]
    fn projection_clamps_eigenvalues() {
        let t = TensorParams::new(TensorOrder::Two, vec![1e-3, 5e-4, -1e-4, 0.0, 0.0, 0.0]).unwrap();
        let p = project_positive(&t, 1e-7).unwrap();
        let e = eigen_2nd_order(&p).unwrap();
        assert!((e.values[2] - 1e-7).abs() < 1e-15);
        assert!((e.values[0] - 1e-3).abs() < 1e-15);
    }

    #[test]
    fn lift_preserves_diffusivity() {
        let t = TensorParams::new(TensorOrder::Two, vec![1.7, 0.4, 0.2, 0.1, -0.05, 0.02]).unwrap();
        let t4 = t.lift_to_order4().unwrap();
        for g in hemisphere_grid(40) {
            assert!((diffusivity(&t, &g).unwrap() - diffusivity(&t4, &g).unwrap()).abs() < 1e-12);
        }
    }

    fn rotation(axis: [f64; 3], angle: f64) -> [[f64; 3]; 3] {
        let n = norm3(&axis);
        let [x, y, z] = scale(&axis, 1.0 / n);
        let (s, c) = angle.sin_cos();
        let t = 1.0 - c;
        [
            [t * x * x + c, t * x * y - s * z, t * x * z + s * y],
            [t * x * y + s * z, t * y * y + c, t * y * z - s * x],
            [t * x * z - s * y, t * y * z + s * x, t * z * z + c],
        ]
    }

    proptest! {
        #[test]
        fn design_row_linear_in_b(b in 0.0f64..2e4, x in -1.0f64..1.0, y in -1.0f64..1.0, z in -1.0f64..1.0) {
            let n = (x * x + y * y + z * z).sqrt();
            prop_assume!(n > 1e-3);
            let g = [x / n, y / n, z / n];
            for order in [TensorOrder::Two, TensorOrder::Four] {
                let zb = design_row(&GradientControl { b, g }, order).unwrap();
                let z1 = design_row(&GradientControl { b: 1.0, g }, order).unwrap();
                for (a, c) in zb.iter().zip(&z1) {
                    prop_assert!((a - b * c).abs() <= 1e-12 * (1.0 + a.abs()));
                }
            }
        }

        #[test]
        fn reflection_symmetry(theta in proptest::collection::vec(-1.0f64..1.0, 15),
                               x in -1.0f64..1.0, y in -1.0f64..1.0, z in -1.0f64..1.0) {
            let n = (x * x + y * y + z * z).sqrt();
            prop_assume!(n > 1e-3);
            let g = [x / n, y / n, z / n];
            let t4 = TensorParams::new(TensorOrder::Four, theta.clone()).unwrap();
            let t2 = TensorParams::new(TensorOrder::Two, theta[..6].to_vec()).unwrap();
            let ng = scale(&g, -1.0);
            prop_assert_eq!(diffusivity(&t4, &g).unwrap(), diffusivity(&t4, &ng).unwrap());
            prop_assert_eq!(diffusivity(&t2, &g).unwrap(), diffusivity(&t2, &ng).unwrap());
        }

        #[test]
        fn order2_matches_quadratic_form(theta in proptest::collection::vec(-1.0f64..1.0, 6),
                                         x in -1.0f64..1.0, y in -1.0f64..1.0, z in -1.0f64..1.0) {
            let n = (x * x + y * y + z * z).sqrt();
            prop_assume!(n > 1e-3);
            let g = [x / n, y / n, z / n];
            let t = TensorParams::new(TensorOrder::Two, theta).unwrap();
            let m = t.matrix().unwrap();
            prop_assert!((diffusivity(&t, &g).unwrap() - quad_form(&m, &g)).abs() < 1e-12);
        }

        #[test]
        fn eigen_reconstructs_random(theta in proptest::collection::vec(-1.0f64..1.0, 6)) {
            let t = TensorParams::new(TensorOrder::Two, theta).unwrap();
            check_decomposition(&t.matrix().unwrap());
        }

        #[test]
        fn fa_scale_invariant(l1 in 0.01f64..5.0, l2 in 0.0f64..5.0, l3 in 0.0f64..5.0, c in 1e-3f64..1e3) {
            let e = EigenDecomposition { values: [l1, l2, l3], vectors: [[0.0; 3]; 3] };
            let es = EigenDecomposition { values: [c * l1, c * l2, c * l3], vectors: [[0.0; 3]; 3] };
            let a = fractional_anisotropy(&e).unwrap();
            let b = fractional_anisotropy(&es).unwrap();
            prop_assert!((a - b).abs() < 1e-12);
            prop_assert!((0.0..=1.0).contains(&a));
        }

        #[test]
        fn md_rotation_invariant(theta in proptest::collection::vec(-1.0f64..1.0, 6),
                                 ax in proptest::array::uniform3(-1.0f64..1.0), angle in 0.0f64..6.3) {
            prop_assume!(norm3(&ax) > 1e-3);
            let t = TensorParams::new(TensorOrder::Two, theta).unwrap();
            let d = t.matrix().unwrap();
            let r = rotation(ax, angle);
            let mut rd = [[0.0; 3]; 3];
            for i in 0..3 {
                for j in 0..3 {
                    for k in 0..3 {
                        for l in 0..3 {
                            rd[i][j] += r[i][k] * d[k][l] * r[j][l];
                        }
                    }
                }
            }
            let tr = TensorParams::from_matrix(&rd).unwrap();
            prop_assert!((mean_diffusivity(&t) - mean_diffusivity(&tr)).abs() < 1e-12);
        }
    }
}
