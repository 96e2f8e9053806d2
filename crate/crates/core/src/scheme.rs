//! Acquisition schemes and the design matrix built from them.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{design_row_into, GradientControl, TensorOrder};

/// Factorial layout of a scheme: every direction at every knot, repeated.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Factorial {
    pub directions: Vec<[f64; 3]>,
    pub knots: Vec<f64>,
    pub repetitions: usize,
}

/// Ordered list of acquisitions.
///
/// Factorial schemes expand repetition-major, then knot, then direction, so
/// the first `directions x knots` rows hold one full repetition.
#[derive(Debug, Clone, PartialEq)]
pub struct AcquisitionScheme {
    rows: Vec<GradientControl>,
    layout: Option<Factorial>,
}

impl AcquisitionScheme {
    pub fn factorial(directions: Vec<[f64; 3]>, knots: Vec<f64>, repetitions: usize) -> Result<Self> {
        if directions.is_empty() || knots.is_empty() || repetitions == 0 {
            return Err(Error::invalid("scheme needs at least one direction, knot and repetition"));
        }
        if knots.windows(2).any(|w| !(w[0] < w[1])) || knots[0] < 0.0 {
            return Err(Error::invalid("knots must be nonnegative and strictly increasing"));
        }
        let mut rows = Vec::with_capacity(directions.len() * knots.len() * repetitions);
        for _ in 0..repetitions {
            for &b in &knots {
                for &g in &directions {
                    rows.push(GradientControl::new(b, g)?);
                }
            }
        }
        // b = 0 rows still carry a direction; make sure those are unit too.
        for g in &directions {
            GradientControl::new(1.0, *g)?;
        }
        Ok(Self {
            rows,
            layout: Some(Factorial { directions, knots, repetitions }),
        })
    }

    /// Arbitrary scheme with no factorial structure.
    pub fn from_rows(rows: Vec<GradientControl>) -> Result<Self> {
        if rows.is_empty() {
            return Err(Error::invalid("scheme has no rows"));
        }
        for r in &rows {
            r.validate()?;
        }
        Ok(Self { rows, layout: None })
    }

    pub fn rows(&self) -> &[GradientControl] {
        &self.rows
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn layout(&self) -> Option<&Factorial> {
        self.layout.as_ref()
    }

    pub fn repetitions(&self) -> usize {
        self.layout.as_ref().map_or(1, |l| l.repetitions)
    }

    /// Distinct b-values in increasing order.
    pub fn knots(&self) -> Vec<f64> {
        if let Some(l) = &self.layout {
            return l.knots.clone();
        }
        let mut bs: Vec<f64> = self.rows.iter().map(|r| r.b).collect();
        bs.sort_by(|a, b| a.partial_cmp(b).unwrap());
        bs.dedup();
        bs
    }

    /// Distinct directions in order of first appearance.
    pub fn directions(&self) -> Vec<[f64; 3]> {
        if let Some(l) = &self.layout {
            return l.directions.clone();
        }
        let mut out: Vec<[f64; 3]> = Vec::new();
        for r in &self.rows {
            if !out.contains(&r.g) {
                out.push(r.g);
            }
        }
        out
    }
}

/// Design matrix of a scheme for a tensor order; row `i` is `Z_i`.
#[derive(Debug, Clone)]
pub struct Design {
    order: TensorOrder,
    z: DMatrix<f64>,
    b: Vec<f64>,
}

impl Design {
    pub fn new(scheme: &AcquisitionScheme, order: TensorOrder) -> Self {
        let d = order.dim();
        let m = scheme.len();
        let mut z = DMatrix::zeros(m, d);
        let mut row = vec![0.0; d];
        for (i, c) in scheme.rows().iter().enumerate() {
            design_row_into(c.b, &c.g, order, &mut row);
            for j in 0..d {
                z[(i, j)] = row[j];
            }
        }
        Self {
            order,
            z,
            b: scheme.rows().iter().map(|r| r.b).collect(),
        }
    }

    /// Design from explicit rows, e.g. for synthetic test problems.
    pub fn from_matrix(order: TensorOrder, z: DMatrix<f64>, b: Vec<f64>) -> Result<Self> {
        if z.ncols() != order.dim() || z.nrows() != b.len() {
            return Err(Error::invalid(format!(
                "design is {}x{}, expected {}x{}",
                z.nrows(),
                z.ncols(),
                b.len(),
                order.dim()
            )));
        }
        Ok(Self { order, z, b })
    }

    pub fn order(&self) -> TensorOrder {
        self.order
    }

    pub fn dim(&self) -> usize {
        self.z.ncols()
    }

    pub fn len(&self) -> usize {
        self.z.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.z.nrows() == 0
    }

    pub fn z(&self) -> &DMatrix<f64> {
        &self.z
    }

    pub fn b(&self) -> &[f64] {
        &self.b
    }

    /// `Z_i . theta`.
    pub fn row_dot(&self, i: usize, theta: &[f64]) -> f64 {
        let mut s = 0.0;
        for (j, t) in theta.iter().enumerate() {
            s += self.z[(i, j)] * t;
        }
        s
    }

    /// Linear predictor `Z theta` for every row.
    pub fn predictor(&self, theta: &[f64]) -> Vec<f64> {
        (&self.z * DVector::from_column_slice(theta)).data.into()
    }

    pub fn check_data(&self, y: &[f64]) -> Result<()> {
        if y.len() != self.len() {
            return Err(Error::invalid(format!(
                "{} magnitudes for a {}-row scheme",
                y.len(),
                self.len()
            )));
        }
        if let Some((i, v)) = y.iter().enumerate().find(|(_, v)| !(v.is_finite() && **v >= 0.0)) {
            return Err(Error::invalid(format!("magnitude {i} is {v}; must be finite and >= 0")));
        }
        Ok(())
    }
}
