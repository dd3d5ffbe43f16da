//! Evaluation grids, basis systems and quadrature inner products over the
//! curve domain.
//!
//! All integrals use trapezoid weights on the observed grid. Basis functions
//! are evaluated on the grid mapped to `[0, 1]`; the weights stay in raw
//! domain units so `inner_product` approximates `∫ f(u) g(u) du` over the
//! original domain.

use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use nalgebra::{Cholesky, DMatrix, DVector, Dyn, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Relative ridge added to the normal equations when they are singular or
/// too badly conditioned for a plain Cholesky solve.
const PROJECTION_RIDGE: f64 = 1e-8;
const MAX_CONDITION: f64 = 1e12;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Grid {
    points: Vec<f64>,
    weights: Vec<f64>,
}

impl Grid {
    pub fn new(points: Vec<f64>) -> Result<Self> {
        if points.len() < 2 {
            return Err(Error::Contract(format!(
                "grid needs at least 2 points, got {}",
                points.len()
            )));
        }
        if points.iter().any(|p| !p.is_finite()) {
            return Err(Error::Contract("grid points must be finite".into()));
        }
        if let Some(w) = points.windows(2).position(|w| w[1] <= w[0]) {
            return Err(Error::Contract(format!(
                "grid points must be strictly increasing (at index {})",
                w + 1
            )));
        }
        let m = points.len();
        let mut weights = vec![0.0; m];
        for i in 0..m - 1 {
            let half = 0.5 * (points[i + 1] - points[i]);
            weights[i] += half;
            weights[i + 1] += half;
        }
        Ok(Grid { points, weights })
    }

    pub fn uniform(lower: f64, upper: f64, m: usize) -> Result<Self> {
        if m < 2 || !(upper > lower) {
            return Err(Error::Contract(format!(
                "uniform grid needs m >= 2 and upper > lower (m={m}, [{lower}, {upper}])"
            )));
        }
        let step = (upper - lower) / (m - 1) as f64;
        let mut pts: Vec<f64> = (0..m).map(|i| lower + step * i as f64).collect();
        pts[m - 1] = upper;
        Grid::new(pts)
    }

    pub fn points(&self) -> &[f64] {
        &self.points
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn lower(&self) -> f64 {
        self.points[0]
    }

    pub fn upper(&self) -> f64 {
        self.points[self.points.len() - 1]
    }

    pub fn span(&self) -> f64 {
        self.upper() - self.lower()
    }

    /// Grid points mapped affinely onto `[0, 1]`.
    pub fn normalized_points(&self) -> Vec<f64> {
        let (lo, span) = (self.lower(), self.span());
        let mut out: Vec<f64> = self.points.iter().map(|p| (p - lo) / span).collect();
        let last = out.len() - 1;
        out[0] = 0.0;
        out[last] = 1.0;
        out
    }

    /// Quadrature of the product of two value vectors on this grid.
    pub fn integrate_product(&self, f: &[f64], g: &[f64]) -> f64 {
        self.weights
            .iter()
            .zip(f.iter().zip(g))
            .map(|(w, (a, b))| w * a * b)
            .sum()
    }
}

/// Values of a function sampled on a grid.
#[derive(Clone, Debug, PartialEq)]
pub struct Curve {
    grid: Arc<Grid>,
    values: Vec<f64>,
}

impl Curve {
    pub fn new(grid: Arc<Grid>, values: Vec<f64>) -> Result<Self> {
        if values.len() != grid.len() {
            return Err(Error::Contract(format!(
                "curve has {} values on a {}-point grid",
                values.len(),
                grid.len()
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::Contract("curve values must be finite".into()));
        }
        Ok(Curve { grid, values })
    }

    pub fn from_fn(grid: Arc<Grid>, f: impl Fn(f64) -> f64) -> Result<Self> {
        let values = grid.points().iter().map(|&u| f(u)).collect();
        Curve::new(grid, values)
    }

    pub fn constant(grid: Arc<Grid>, value: f64) -> Result<Self> {
        let m = grid.len();
        Curve::new(grid, vec![value; m])
    }

    pub fn grid(&self) -> &Arc<Grid> {
        &self.grid
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn same_grid(&self, other: &Curve) -> bool {
        same_grid(&self.grid, &other.grid)
    }
}

pub(crate) fn same_grid(a: &Arc<Grid>, b: &Arc<Grid>) -> bool {
    Arc::ptr_eq(a, b) || a.points == b.points
}

/// `⟨f, g⟩ = Σ_m w_m f(u_m) g(u_m)`.
pub fn inner_product(f: &Curve, g: &Curve) -> Result<f64> {
    if !f.same_grid(g) {
        return Err(Error::Contract(
            "inner product of curves on different grids".into(),
        ));
    }
    Ok(f.grid.integrate_product(&f.values, &g.values))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BasisKind {
    Bspline,
    Fourier,
}

impl fmt::Display for BasisKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            BasisKind::Bspline => "bspline",
            BasisKind::Fourier => "fourier",
        })
    }
}

impl FromStr for BasisKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "bspline" => Ok(BasisKind::Bspline),
            "fourier" => Ok(BasisKind::Fourier),
            other => Err(Error::Config(format!("unknown basis kind '{other}'"))),
        }
    }
}

/// A finite basis evaluated on a grid, with a cached least-squares projector.
#[derive(Clone)]
pub struct BasisSystem {
    kind: BasisKind,
    grid: Arc<Grid>,
    /// `M x D` matrix of `φ_d(u_m)`.
    eval: DMatrix<f64>,
    normal: Option<Cholesky<f64, Dyn>>,
    condition: f64,
}

impl fmt::Debug for BasisSystem {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("BasisSystem")
            .field("kind", &self.kind)
            .field("size", &self.size())
            .field("grid_len", &self.grid.len())
            .field("condition", &self.condition)
            .finish()
    }
}

/// Cubic B-spline values at `x ∈ [0, 1]` with `size - 4` equally spaced interior knots.
fn bspline_row(x: f64, size: usize) -> Vec<f64> {
    const ORDER: usize = 4;
    let degree = ORDER - 1;
    let n_interior = size - ORDER;
    let mut knots = Vec::with_capacity(size + ORDER);
    knots.extend(std::iter::repeat_n(0.0, ORDER));
    for i in 1..=n_interior {
        knots.push(i as f64 / (n_interior + 1) as f64);
    }
    knots.extend(std::iter::repeat_n(1.0, ORDER));

    // knot span with knots[span] <= x < knots[span + 1]; x == 1 uses the last span
    let span = if x >= 1.0 {
        size - 1
    } else {
        let mut s = degree;
        while s < size - 1 && knots[s + 1] <= x {
            s += 1;
        }
        s
    };

    let mut n = vec![0.0; ORDER];
    let mut left = [0.0; ORDER];
    let mut right = [0.0; ORDER];
    n[0] = 1.0;
    for j in 1..=degree {
        left[j] = x - knots[span + 1 - j];
        right[j] = knots[span + j] - x;
        let mut saved = 0.0;
        for r in 0..j {
            let denom = right[r + 1] + left[j - r];
            let temp = if denom == 0.0 { 0.0 } else { n[r] / denom };
            n[r] = saved + right[r + 1] * temp;
            saved = left[j - r] * temp;
        }
        n[j] = saved;
    }
    let mut row = vec![0.0; size];
    for (j, v) in n.into_iter().enumerate() {
        row[span - degree + j] = v;
    }
    row
}

fn fourier_row(x: f64, size: usize) -> Vec<f64> {
    let mut row = Vec::with_capacity(size);
    row.push(1.0);
    let mut freq = 1;
    while row.len() < size {
        let w = 2.0 * std::f64::consts::PI * freq as f64 * x;
        row.push(w.sin());
        if row.len() < size {
            row.push(w.cos());
        }
        freq += 1;
    }
    row
}

/// Build a basis of `size` functions evaluated on `grid`.
pub fn make_basis(kind: BasisKind, size: usize, grid: Arc<Grid>) -> Result<BasisSystem> {
    if size < 4 {
        return Err(Error::Config(format!(
            "basis size {size} must be at least 4"
        )));
    }
    if size > grid.len() {
        log::warn!(
            "basis size {size} exceeds grid size {}; projection is underdetermined and ridge-regularized",
            grid.len()
        );
    }
    let xs = grid.normalized_points();
    let m = xs.len();
    let mut eval = DMatrix::zeros(m, size);
    for (i, &x) in xs.iter().enumerate() {
        let row = match kind {
            BasisKind::Bspline => bspline_row(x, size),
            BasisKind::Fourier => fourier_row(x, size),
        };
        for (j, v) in row.into_iter().enumerate() {
            eval[(i, j)] = v;
        }
    }

    let w = DVector::from_column_slice(grid.weights());
    let weighted = DMatrix::from_fn(m, size, |i, j| eval[(i, j)] * w[i]);
    let gram = eval.transpose() * weighted;
    let eig = SymmetricEigen::new(gram.clone()).eigenvalues;
    let (lo, hi) = eig.iter().fold((f64::INFINITY, 0.0_f64), |(lo, hi), &v| {
        (lo.min(v), hi.max(v.abs()))
    });
    let condition = if lo > 0.0 { hi / lo } else { f64::INFINITY };

    let mut normal = if condition <= MAX_CONDITION {
        Cholesky::new(gram.clone())
    } else {
        None
    };
    if normal.is_none() {
        let ridge = PROJECTION_RIDGE * gram.trace() / size as f64;
        let mut reg = gram.clone();
        for d in 0..size {
            reg[(d, d)] += ridge;
        }
        normal = Cholesky::new(reg);
    }

    Ok(BasisSystem {
        kind,
        grid,
        eval,
        normal,
        condition,
    })
}

impl BasisSystem {
    pub fn kind(&self) -> BasisKind {
        self.kind
    }

    pub fn size(&self) -> usize {
        self.eval.ncols()
    }

    pub fn grid(&self) -> &Arc<Grid> {
        &self.grid
    }

    /// `φ_d(u_m)`.
    pub fn value(&self, m: usize, d: usize) -> f64 {
        self.eval[(m, d)]
    }

    /// Estimated condition number of the unregularized normal equations.
    pub fn condition(&self) -> f64 {
        self.condition
    }

    /// The basis function `φ_d` as a curve on the grid.
    pub fn function(&self, d: usize) -> Curve {
        let values = self.eval.column(d).iter().copied().collect();
        Curve::new(self.grid.clone(), values).expect("basis values are finite")
    }

    /// `M x D` matrix with entries `(w_m / span) φ_d(u_m)`, so that a row of
    /// curve values times this matrix gives the inner products `⟨φ_d, x⟩`
    /// over the domain rescaled to unit length.
    pub fn unit_design(&self) -> Tensor {
        let (m, d) = self.eval.shape();
        let span = self.grid.span();
        let w = self.grid.weights();
        let mut data = Vec::with_capacity(m * d);
        for (i, wi) in w.iter().enumerate() {
            for j in 0..d {
                data.push(self.eval[(i, j)] * wi / span);
            }
        }
        Tensor::matrix(m, d, data).expect("design shape")
    }

    /// Weighted least-squares coefficients of `curve` in this basis.
    pub fn project(&self, curve: &Curve) -> Result<Vec<f64>> {
        if !same_grid(&self.grid, curve.grid()) {
            return Err(Error::Contract(
                "curve grid does not match basis grid".into(),
            ));
        }
        self.project_values(curve.values())
    }

    pub(crate) fn project_values(&self, values: &[f64]) -> Result<Vec<f64>> {
        let chol = self.normal.as_ref().ok_or_else(|| {
            Error::Numerical(format!(
                "normal equations are rank deficient (condition estimate {:.3e})",
                self.condition
            ))
        })?;
        let w = self.grid.weights();
        let rhs = DVector::from_fn(self.size(), |d, _| {
            (0..values.len())
                .map(|m| self.eval[(m, d)] * w[m] * values[m])
                .sum()
        });
        Ok(chol.solve(&rhs).iter().copied().collect())
    }

    pub fn reconstruct(&self, coeffs: &[f64]) -> Result<Curve> {
        Curve::new(self.grid.clone(), self.reconstruct_values(coeffs)?)
    }

    pub(crate) fn reconstruct_values(&self, coeffs: &[f64]) -> Result<Vec<f64>> {
        if coeffs.len() != self.size() {
            return Err(Error::Contract(format!(
                "{} coefficients for a basis of size {}",
                coeffs.len(),
                self.size()
            )));
        }
        let a = DVector::from_column_slice(coeffs);
        Ok((&self.eval * a).iter().copied().collect())
    }
}

/// Free-function form of [`BasisSystem::project`].
pub fn project_curve(curve: &Curve, basis: &BasisSystem) -> Result<Vec<f64>> {
    basis.project(curve)
}

/// Free-function form of [`BasisSystem::reconstruct`].
pub fn reconstruct(coeffs: &[f64], basis: &BasisSystem) -> Result<Curve> {
    basis.reconstruct(coeffs)
}
