//! Ellipsoidal set algebra with guaranteed outer approximations.
//!
//! An ellipsoid `E(a, P) = { x : (x - a)ᵀ P⁻¹ (x - a) ≤ 1 }` is stored as its
//! center `a` and a symmetric positive-definite shape matrix `P`. Every
//! operation here returns a set that contains the exact result of the
//! corresponding set operation; where the exact result is not an ellipsoid the
//! minimum-trace outer ellipsoid is returned.

use nalgebra::{Cholesky, DMatrix, DVector, Dim, Matrix, Storage, SymmetricEigen};
use thiserror::Error;

/// Smallest admissible eigenvalue of a shape matrix.
pub const PSD_FLOOR: f64 = 1e-12;
/// Slack on the unit quadratic form used by [`Ellipsoid::contains`].
pub const CONTAINMENT_SLACK: f64 = 1e-9;
const SYMMETRY_TOL: f64 = 1e-10;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EllipsoidError {
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("shape matrix is not symmetric (max asymmetry {0:e})")]
    Asymmetric(f64),
    #[error("shape matrix eigenvalue {eigenvalue:e} is below the floor {floor:e}")]
    NotPositiveDefinite { eigenvalue: f64, floor: f64 },
    #[error("degenerate shape: linear map has singular value {singular_value:e}")]
    DegenerateShape { singular_value: f64 },
    #[error("minkowski sum needs at least one operand")]
    EmptyOperands,
    #[error("ellipsoids are disjoint (nu = {nu} at lambda = {lambda})")]
    Disjoint { nu: f64, lambda: f64 },
    #[error("non-finite value in ellipsoid data")]
    NonFinite,
    #[error("invalid interval [{lower}, {upper}]")]
    InvalidInterval { lower: f64, upper: f64 },
}

pub type Result<T> = std::result::Result<T, EllipsoidError>;

#[derive(Debug, Clone, PartialEq)]
pub struct Ellipsoid {
    center: DVector<f64>,
    shape: DMatrix<f64>,
}

fn symmetrize(m: &mut DMatrix<f64>) {
    let n = m.nrows();
    for i in 0..n {
        for j in (i + 1)..n {
            let v = 0.5 * (m[(i, j)] + m[(j, i)]);
            m[(i, j)] = v;
            m[(j, i)] = v;
        }
    }
}

fn max_asymmetry(m: &DMatrix<f64>) -> f64 {
    let n = m.nrows();
    let mut worst: f64 = 0.0;
    for i in 0..n {
        for j in (i + 1)..n {
            worst = worst.max((m[(i, j)] - m[(j, i)]).abs());
        }
    }
    worst
}

/// Lifts every eigenvalue of a symmetric matrix to at least `floor`.
///
/// The matrix is only rebuilt when an eigenvalue actually sits below the
/// floor, so well-conditioned inputs come back bit-for-bit unchanged.
pub fn floor_eigenvalues(shape: &mut DMatrix<f64>, floor: f64) {
    symmetrize(shape);
    let eig = SymmetricEigen::new(shape.clone());
    if eig.eigenvalues.iter().all(|&l| l >= floor) {
        return;
    }
    let lifted = eig.eigenvalues.map(|l| if l < floor { floor } else { l });
    let v = &eig.eigenvectors;
    *shape = v * DMatrix::from_diagonal(&lifted) * v.transpose();
    symmetrize(shape);
    // Reconstruction round-off can leave the smallest eigenvalue a hair under.
    let min = SymmetricEigen::new(shape.clone()).eigenvalues.min();
    if min < floor {
        for i in 0..shape.nrows() {
            shape[(i, i)] += floor - min;
        }
    }
}

impl Ellipsoid {
    /// Strict constructor: symmetrizes the shape and rejects it when the
    /// smallest eigenvalue is below [`PSD_FLOOR`].
    pub fn new(center: DVector<f64>, shape: DMatrix<f64>) -> Result<Self> {
        Self::with_floor(center, shape, PSD_FLOOR)
    }

    pub fn with_floor(center: DVector<f64>, mut shape: DMatrix<f64>, floor: f64) -> Result<Self> {
        check_dims(&center, &shape)?;
        if center.iter().chain(shape.iter()).any(|v| !v.is_finite()) {
            return Err(EllipsoidError::NonFinite);
        }
        let scale = shape.amax().max(1.0);
        let asym = max_asymmetry(&shape);
        if asym > SYMMETRY_TOL * scale {
            return Err(EllipsoidError::Asymmetric(asym));
        }
        symmetrize(&mut shape);
        let min = SymmetricEigen::new(shape.clone()).eigenvalues.min();
        if min < floor {
            return Err(EllipsoidError::NotPositiveDefinite { eigenvalue: min, floor });
        }
        Ok(Self { center, shape })
    }

    /// Builds an ellipsoid from a positive semi-definite shape, inflating any
    /// eigenvalue below [`PSD_FLOOR`] up to the floor. The result contains the
    /// (possibly degenerate) set described by the inputs.
    pub fn regularized(center: DVector<f64>, mut shape: DMatrix<f64>) -> Result<Self> {
        check_dims(&center, &shape)?;
        if center.iter().chain(shape.iter()).any(|v| !v.is_finite()) {
            return Err(EllipsoidError::NonFinite);
        }
        floor_eigenvalues(&mut shape, PSD_FLOOR);
        Ok(Self { center, shape })
    }

    /// Ellipsoid centered at the origin.
    pub fn centered(shape: DMatrix<f64>) -> Result<Self> {
        let n = shape.nrows();
        Self::regularized(DVector::zeros(n), shape)
    }

    /// Smallest valid ellipsoid around `center`: shape `PSD_FLOOR · I`.
    pub fn point(center: DVector<f64>) -> Self {
        let n = center.len();
        Self { center, shape: DMatrix::identity(n, n) * PSD_FLOOR }
    }

    pub fn dim(&self) -> usize {
        self.center.len()
    }

    pub fn center(&self) -> &DVector<f64> {
        &self.center
    }

    pub fn shape(&self) -> &DMatrix<f64> {
        &self.shape
    }

    pub fn trace(&self) -> f64 {
        self.shape.trace()
    }

    pub fn into_parts(self) -> (DVector<f64>, DMatrix<f64>) {
        (self.center, self.shape)
    }

    /// Same shape, new center.
    pub fn recentered(&self, center: DVector<f64>) -> Result<Self> {
        if center.len() != self.dim() {
            return Err(EllipsoidError::DimensionMismatch { expected: self.dim(), got: center.len() });
        }
        Ok(Self { center, shape: self.shape.clone() })
    }

    /// Quadratic form `(x - a)ᵀ P⁻¹ (x - a)`.
    pub fn quadratic_form(&self, x: &DVector<f64>) -> f64 {
        let d = x - &self.center;
        match Cholesky::new(self.shape.clone()) {
            Some(ch) => d.dot(&ch.solve(&d)),
            None => f64::INFINITY,
        }
    }

    pub fn contains(&self, x: &DVector<f64>) -> bool {
        self.contains_with_slack(x, CONTAINMENT_SLACK)
    }

    pub fn contains_with_slack(&self, x: &DVector<f64>, slack: f64) -> bool {
        assert_eq!(x.len(), self.dim(), "membership test with mismatched dimension");
        self.quadratic_form(x) <= 1.0 + slack
    }

    /// `{A x + b : x ∈ E}` as `E(A a + b, A P Aᵀ)`.
    ///
    /// Only maps with full row rank (`m ≤ n`) keep the shape non-degenerate.
    pub fn affine_map(&self, a: &DMatrix<f64>, b: &DVector<f64>) -> Result<Self> {
        if a.ncols() != self.dim() {
            return Err(EllipsoidError::DimensionMismatch { expected: self.dim(), got: a.ncols() });
        }
        if b.len() != a.nrows() {
            return Err(EllipsoidError::DimensionMismatch { expected: a.nrows(), got: b.len() });
        }
        if a.nrows() > a.ncols() {
            return Err(EllipsoidError::DegenerateShape { singular_value: 0.0 });
        }
        let sv = a.clone().svd(false, false).singular_values;
        let smax = sv.max();
        let smin = sv.min();
        if !(smin > 1e-12 * smax.max(1.0)) {
            return Err(EllipsoidError::DegenerateShape { singular_value: smin });
        }
        let center = a * &self.center + b;
        let shape = a * &self.shape * a.transpose();
        Self::regularized(center, shape)
    }

    /// Trace-minimal outer ellipsoid of the intersection with `other`.
    pub fn intersect(&self, other: &Ellipsoid) -> Result<Self> {
        intersect_outer(self, other, &IntersectOptions::default())
    }
}

fn check_dims(center: &DVector<f64>, shape: &DMatrix<f64>) -> Result<()> {
    if shape.nrows() != shape.ncols() {
        return Err(EllipsoidError::DimensionMismatch { expected: shape.nrows(), got: shape.ncols() });
    }
    if center.len() != shape.nrows() {
        return Err(EllipsoidError::DimensionMismatch { expected: shape.nrows(), got: center.len() });
    }
    Ok(())
}

/// Streaming form of the minimum-trace Minkowski sum.
///
/// With `s_i = √tr(P_i)` the closed-form weights are `β_i = s_i / Σ s_j`, so
/// the outer shape is `(Σ s_j) · Σ P_i / s_i`. Operands are folded in one at
/// a time, which lets callers sum thousands of fixed-size shapes without
/// building an [`Ellipsoid`] for each.
#[derive(Debug, Clone)]
pub struct MinkowskiAccumulator {
    center: DVector<f64>,
    weighted: DMatrix<f64>,
    root_trace_sum: f64,
    count: usize,
}

impl MinkowskiAccumulator {
    pub fn new(dim: usize) -> Self {
        Self {
            center: DVector::zeros(dim),
            weighted: DMatrix::zeros(dim, dim),
            root_trace_sum: 0.0,
            count: 0,
        }
    }

    pub fn dim(&self) -> usize {
        self.center.len()
    }

    pub fn len(&self) -> usize {
        self.count
    }

    pub fn is_empty(&self) -> bool {
        self.count == 0
    }

    /// Adds `copies` identical centered operands of the given shape.
    ///
    /// A zero-trace shape is the singleton `{0}` and leaves the sum unchanged.
    pub fn add_shape_copies<R: Dim, C: Dim, S: Storage<f64, R, C>>(
        &mut self,
        shape: &Matrix<f64, R, C, S>,
        copies: usize,
    ) {
        let n = self.dim();
        assert_eq!((shape.nrows(), shape.ncols()), (n, n), "operand dimension mismatch");
        self.count += copies;
        let tr: f64 = (0..n).map(|i| shape[(i, i)]).sum();
        if !(tr > 0.0) || copies == 0 {
            return;
        }
        let s = tr.sqrt();
        let k = copies as f64;
        self.root_trace_sum += k * s;
        let w = k / s;
        for j in 0..n {
            for i in 0..n {
                self.weighted[(i, j)] += w * shape[(i, j)];
            }
        }
    }

    pub fn add_shape<R: Dim, C: Dim, S: Storage<f64, R, C>>(&mut self, shape: &Matrix<f64, R, C, S>) {
        self.add_shape_copies(shape, 1);
    }

    pub fn add(&mut self, e: &Ellipsoid) {
        self.center += &e.center;
        self.add_shape(&e.shape);
    }

    /// Raw (unfloored) outer shape of everything added so far.
    pub fn shape(&self) -> DMatrix<f64> {
        &self.weighted * self.root_trace_sum
    }

    pub fn finish(self) -> Result<Ellipsoid> {
        if self.count == 0 {
            return Err(EllipsoidError::EmptyOperands);
        }
        let shape = self.shape();
        Ellipsoid::regularized(self.center, shape)
    }
}

/// Minimum-trace outer ellipsoid of the Minkowski sum of `operands`.
pub fn minkowski_sum_outer(operands: &[Ellipsoid]) -> Result<Ellipsoid> {
    let first = operands.first().ok_or(EllipsoidError::EmptyOperands)?;
    if operands.len() == 1 {
        return Ok(first.clone());
    }
    let mut acc = MinkowskiAccumulator::new(first.dim());
    for e in operands {
        if e.dim() != first.dim() {
            return Err(EllipsoidError::DimensionMismatch { expected: first.dim(), got: e.dim() });
        }
        acc.add(e);
    }
    acc.finish()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IntersectOptions {
    /// The search runs over `[lambda_eps, 1 - lambda_eps]`.
    pub lambda_eps: f64,
    /// Width of the final golden-section bracket.
    pub lambda_tol: f64,
    /// Also scan a coarse λ grid and keep the better of the two minima.
    pub grid_check: bool,
}

impl Default for IntersectOptions {
    fn default() -> Self {
        Self { lambda_eps: 1e-9, lambda_tol: 1e-8, grid_check: false }
    }
}

/// The one-parameter family of outer ellipsoids of `E1 ∩ E2`.
///
/// Coordinates are shifted so the first center sits at the origin, which keeps
/// the `ν` cancellation small when the centers are far from the origin.
pub struct FusionFamily {
    origin: DVector<f64>,
    w1: DMatrix<f64>,
    w2: DMatrix<f64>,
    w2d: DVector<f64>,
    dw2d: f64,
}

/// One member of [`FusionFamily`].
#[derive(Debug, Clone)]
pub struct FusionMember {
    pub lambda: f64,
    pub nu: f64,
    pub center: DVector<f64>,
    /// `(1 - ν) P_λ`, unfloored.
    pub shape: DMatrix<f64>,
}

impl FusionMember {
    pub fn trace(&self) -> f64 {
        self.shape.trace()
    }
}

fn spd_inverse(p: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    match Cholesky::new(p.clone()) {
        Some(ch) => {
            let mut inv = ch.inverse();
            symmetrize(&mut inv);
            Ok(inv)
        }
        None => {
            let min = SymmetricEigen::new(p.clone()).eigenvalues.min();
            Err(EllipsoidError::NotPositiveDefinite { eigenvalue: min, floor: PSD_FLOOR })
        }
    }
}

impl FusionFamily {
    pub fn new(e1: &Ellipsoid, e2: &Ellipsoid) -> Result<Self> {
        if e1.dim() != e2.dim() {
            return Err(EllipsoidError::DimensionMismatch { expected: e1.dim(), got: e2.dim() });
        }
        let w1 = spd_inverse(&e1.shape)?;
        let w2 = spd_inverse(&e2.shape)?;
        let d = &e2.center - &e1.center;
        let w2d = &w2 * &d;
        let dw2d = d.dot(&w2d);
        Ok(Self { origin: e1.center.clone(), w1, w2, w2d, dw2d })
    }

    pub fn member(&self, lambda: f64) -> Option<FusionMember> {
        let m = &self.w1 * (1.0 - lambda) + &self.w2 * lambda;
        let ch = Cholesky::new(m)?;
        let rhs = &self.w2d * lambda;
        let a = ch.solve(&rhs);
        // a1 = 0 in shifted coordinates, so only the second term survives.
        let nu = lambda * self.dw2d - a.dot(&rhs);
        let mut p_lambda = ch.inverse();
        symmetrize(&mut p_lambda);
        let shape = p_lambda * (1.0 - nu);
        Some(FusionMember { lambda, nu, center: a + &self.origin, shape })
    }

    fn objective(&self, lambda: f64) -> f64 {
        self.member(lambda).map_or(f64::INFINITY, |m| m.trace())
    }

    /// Golden-section search for the trace-minimal member.
    pub fn minimize(&self, opts: &IntersectOptions) -> Option<FusionMember> {
        const INV_PHI: f64 = 0.618_033_988_749_894_8;
        let mut lo = opts.lambda_eps;
        let mut hi = 1.0 - opts.lambda_eps;
        let mut x1 = hi - INV_PHI * (hi - lo);
        let mut x2 = lo + INV_PHI * (hi - lo);
        let mut f1 = self.objective(x1);
        let mut f2 = self.objective(x2);
        while hi - lo > opts.lambda_tol {
            if f1 <= f2 {
                hi = x2;
                x2 = x1;
                f2 = f1;
                x1 = hi - INV_PHI * (hi - lo);
                f1 = self.objective(x1);
            } else {
                lo = x1;
                x1 = x2;
                f1 = f2;
                x2 = lo + INV_PHI * (hi - lo);
                f2 = self.objective(x2);
            }
        }
        let mut best_lambda = 0.5 * (lo + hi);
        let mut best = self.objective(best_lambda);
        // The bracket can collapse onto an endpoint of the open interval.
        for cand in [opts.lambda_eps, 1.0 - opts.lambda_eps] {
            let f = self.objective(cand);
            if f < best {
                best = f;
                best_lambda = cand;
            }
        }
        if opts.grid_check {
            const GRID: usize = 1000;
            for i in 0..=GRID {
                let lambda = opts.lambda_eps + (1.0 - 2.0 * opts.lambda_eps) * i as f64 / GRID as f64;
                let f = self.objective(lambda);
                if f < best {
                    log::warn!("golden-section λ={best_lambda} beaten by grid λ={lambda}: trace not unimodal");
                    best = f;
                    best_lambda = lambda;
                }
            }
        }
        self.member(best_lambda)
    }
}

/// Minimum-trace outer ellipsoid of `E1 ∩ E2`.
///
/// Returns [`EllipsoidError::Disjoint`] when `ν ≥ 1` at the optimal `λ`,
/// which means the two sets cannot share a point.
pub fn intersect_outer(e1: &Ellipsoid, e2: &Ellipsoid, opts: &IntersectOptions) -> Result<Ellipsoid> {
    let family = FusionFamily::new(e1, e2)?;
    let best = family
        .minimize(opts)
        .ok_or(EllipsoidError::NotPositiveDefinite { eigenvalue: 0.0, floor: PSD_FLOOR })?;
    if !(best.nu < 1.0) {
        return Err(EllipsoidError::Disjoint { nu: best.nu, lambda: best.lambda });
    }
    Ellipsoid::regularized(best.center, best.shape)
}

/// Axis-aligned box: a product of closed intervals.
#[derive(Debug, Clone, PartialEq)]
pub struct IntervalBox {
    intervals: Vec<(f64, f64)>,
}

impl IntervalBox {
    pub fn new(intervals: Vec<(f64, f64)>) -> Result<Self> {
        for &(lower, upper) in &intervals {
            if !(lower <= upper) || !lower.is_finite() || !upper.is_finite() {
                return Err(EllipsoidError::InvalidInterval { lower, upper });
            }
        }
        Ok(Self { intervals })
    }

    /// Box `[-r_i, r_i]` per axis.
    pub fn symmetric(radii: &[f64]) -> Result<Self> {
        Self::new(radii.iter().map(|&r| (-r, r)).collect())
    }

    pub fn dim(&self) -> usize {
        self.intervals.len()
    }

    pub fn intervals(&self) -> &[(f64, f64)] {
        &self.intervals
    }

    pub fn midpoint(&self) -> DVector<f64> {
        DVector::from_iterator(self.dim(), self.intervals.iter().map(|&(l, u)| 0.5 * (l + u)))
    }

    pub fn radii(&self) -> Vec<f64> {
        self.intervals.iter().map(|&(l, u)| 0.5 * (u - l)).collect()
    }

    pub fn to_ellipsoid(&self) -> Ellipsoid {
        box_to_ellipsoid(self)
    }
}

/// Outer ellipsoid of a box: midpoint center and shape `diag(n r_i²)`.
///
/// Zero-width intervals get radius `√PSD_FLOOR` so the shape stays valid.
pub fn box_to_ellipsoid(b: &IntervalBox) -> Ellipsoid {
    let n = b.dim() as f64;
    let min_radius = PSD_FLOOR.sqrt();
    let diag = DVector::from_iterator(
        b.dim(),
        b.radii().into_iter().map(|r| n * r.max(min_radius).powi(2)),
    );
    Ellipsoid { center: b.midpoint(), shape: DMatrix::from_diagonal(&diag) }
}
