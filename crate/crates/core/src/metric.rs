//! H-weighted linear algebra.
//!
//! Every convergence statement of the fixed-point machinery is made in a norm
//! `‖u‖_H = sqrt(⟨u, Hu⟩)` induced by a positive-definite matrix `H`. This
//! module owns that matrix type, the projections onto simple domains that are
//! exact in such a norm, and the eigenvalue / singular value estimates used for
//! step-size bounds and spectral normalization.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn, SymmetricEigen};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{check_dim, Error, Result};

pub type Vector = DVector<f64>;
pub type Matrix = DMatrix<f64>;

/// Seed used for power-iteration start vectors unless overridden.
pub const POWER_ITERATION_SEED: u64 = 0x6b6d_5f70_6f77_6572;

/// Positive-definite metric matrix.
#[derive(Debug, Clone, PartialEq)]
pub enum MetricMatrix {
    Identity(usize),
    Diagonal(Vector),
    BlockDiagonal(Vec<MetricMatrix>),
    DenseSymmetric(Matrix),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MetricKind {
    Identity,
    Diagonal,
    BlockDiagonal,
    DenseSymmetric,
}

impl MetricMatrix {
    pub fn identity(dim: usize) -> Self {
        MetricMatrix::Identity(dim)
    }

    pub fn diagonal(entries: &[f64]) -> Self {
        MetricMatrix::Diagonal(Vector::from_column_slice(entries))
    }

    pub fn kind(&self) -> MetricKind {
        match self {
            MetricMatrix::Identity(_) => MetricKind::Identity,
            MetricMatrix::Diagonal(_) => MetricKind::Diagonal,
            MetricMatrix::BlockDiagonal(_) => MetricKind::BlockDiagonal,
            MetricMatrix::DenseSymmetric(_) => MetricKind::DenseSymmetric,
        }
    }

    pub fn dim(&self) -> usize {
        match self {
            MetricMatrix::Identity(n) => *n,
            MetricMatrix::Diagonal(d) => d.len(),
            MetricMatrix::BlockDiagonal(blocks) => blocks.iter().map(MetricMatrix::dim).sum(),
            MetricMatrix::DenseSymmetric(m) => m.nrows(),
        }
    }

    /// True when the matrix is diagonal in the standard basis.
    pub fn is_diagonal(&self) -> bool {
        match self {
            MetricMatrix::Identity(_) | MetricMatrix::Diagonal(_) => true,
            MetricMatrix::BlockDiagonal(blocks) => blocks.iter().all(MetricMatrix::is_diagonal),
            MetricMatrix::DenseSymmetric(_) => false,
        }
    }

    /// Diagonal entries when [`is_diagonal`](Self::is_diagonal) holds.
    pub fn diagonal_entries(&self) -> Option<Vector> {
        match self {
            MetricMatrix::Identity(n) => Some(Vector::from_element(*n, 1.0)),
            MetricMatrix::Diagonal(d) => Some(d.clone()),
            MetricMatrix::BlockDiagonal(blocks) => {
                let mut out = Vec::with_capacity(self.dim());
                for b in blocks {
                    out.extend(b.diagonal_entries()?.iter().copied());
                }
                Some(Vector::from_vec(out))
            }
            MetricMatrix::DenseSymmetric(_) => None,
        }
    }

    /// Dense copy, mostly for tests and small diagnostics.
    pub fn to_dense(&self) -> Matrix {
        match self {
            MetricMatrix::Identity(n) => Matrix::identity(*n, *n),
            MetricMatrix::Diagonal(d) => Matrix::from_diagonal(d),
            MetricMatrix::BlockDiagonal(blocks) => {
                let n = self.dim();
                let mut out = Matrix::zeros(n, n);
                let mut off = 0;
                for b in blocks {
                    let d = b.dim();
                    out.view_mut((off, off), (d, d)).copy_from(&b.to_dense());
                    off += d;
                }
                out
            }
            MetricMatrix::DenseSymmetric(m) => m.clone(),
        }
    }

    /// `H v`.
    pub fn apply(&self, v: &Vector) -> Result<Vector> {
        check_dim(self.dim(), v.len())?;
        Ok(match self {
            MetricMatrix::Identity(_) => v.clone(),
            MetricMatrix::Diagonal(d) => d.component_mul(v),
            MetricMatrix::BlockDiagonal(blocks) => {
                let mut out = Vector::zeros(v.len());
                let mut off = 0;
                for b in blocks {
                    let d = b.dim();
                    let part = b.apply(&v.rows(off, d).into_owned())?;
                    out.rows_mut(off, d).copy_from(&part);
                    off += d;
                }
                out
            }
            MetricMatrix::DenseSymmetric(m) => m * v,
        })
    }

    /// Checks symmetry and positive definiteness.
    pub fn validate(&self) -> Result<()> {
        match self {
            MetricMatrix::Identity(n) => {
                if *n == 0 {
                    return Err(Error::InvalidMetric("zero dimension".into()));
                }
            }
            MetricMatrix::Diagonal(d) => {
                if d.is_empty() {
                    return Err(Error::InvalidMetric("zero dimension".into()));
                }
                if let Some(bad) = d.iter().find(|x| !(x.is_finite() && **x > 0.0)) {
                    return Err(Error::InvalidMetric(format!(
                        "diagonal entry {bad} is not positive"
                    )));
                }
            }
            MetricMatrix::BlockDiagonal(blocks) => {
                if blocks.is_empty() {
                    return Err(Error::InvalidMetric("no blocks".into()));
                }
                for b in blocks {
                    b.validate()?;
                }
            }
            MetricMatrix::DenseSymmetric(m) => {
                if m.nrows() == 0 || m.nrows() != m.ncols() {
                    return Err(Error::InvalidMetric(format!(
                        "dense metric must be square and non-empty, got {}x{}",
                        m.nrows(),
                        m.ncols()
                    )));
                }
                let scale = m.amax().max(1.0);
                let n = m.nrows();
                for i in 0..n {
                    for j in (i + 1)..n {
                        if (m[(i, j)] - m[(j, i)]).abs() > 1e-12 * scale {
                            return Err(Error::InvalidMetric(format!(
                                "not symmetric at ({i}, {j})"
                            )));
                        }
                    }
                }
                let lmin = min_eigen_estimate(self)?;
                if !(lmin > 0.0) {
                    return Err(Error::InvalidMetric(format!(
                        "smallest eigenvalue {lmin:e} is not positive"
                    )));
                }
            }
        }
        Ok(())
    }

    /// Factorization for repeated `H⁻¹ v` solves.
    pub fn factor(&self) -> Result<FactoredMetric> {
        let mut blocks = Vec::new();
        self.push_factors(&mut blocks)?;
        Ok(FactoredMetric { dim: self.dim(), blocks })
    }

    fn push_factors(&self, out: &mut Vec<BlockFactor>) -> Result<()> {
        match self {
            MetricMatrix::Identity(n) => out.push(BlockFactor::Identity(*n)),
            MetricMatrix::Diagonal(d) => {
                if d.iter().any(|x| !(*x > 0.0)) {
                    return Err(Error::InvalidMetric("non-positive diagonal".into()));
                }
                out.push(BlockFactor::Diagonal(d.map(|x| 1.0 / x)));
            }
            MetricMatrix::BlockDiagonal(blocks) => {
                for b in blocks {
                    b.push_factors(out)?;
                }
            }
            MetricMatrix::DenseSymmetric(m) => {
                let chol = Cholesky::new(m.clone()).ok_or_else(|| {
                    Error::InvalidMetric("dense metric is not positive definite".into())
                })?;
                out.push(BlockFactor::Dense(Box::new(chol)));
            }
        }
        Ok(())
    }

    pub fn max_eigen_estimate(&self) -> Result<f64> {
        match self {
            MetricMatrix::Identity(_) => Ok(1.0),
            MetricMatrix::Diagonal(d) => Ok(d.max()),
            MetricMatrix::BlockDiagonal(blocks) => {
                let mut best = f64::NEG_INFINITY;
                for b in blocks {
                    best = best.max(b.max_eigen_estimate()?);
                }
                Ok(best)
            }
            MetricMatrix::DenseSymmetric(m) => {
                // λ_max of a PD matrix equals its spectral norm.
                spectral_norm_with(m, &PowerIteration { tol: 1e-10, ..Default::default() })
            }
        }
    }
}

#[derive(Debug, Clone)]
enum BlockFactor {
    Identity(usize),
    Diagonal(Vector),
    Dense(Box<Cholesky<f64, Dyn>>),
}

impl BlockFactor {
    fn dim(&self) -> usize {
        match self {
            BlockFactor::Identity(n) => *n,
            BlockFactor::Diagonal(d) => d.len(),
            BlockFactor::Dense(c) => c.l_dirty().nrows(),
        }
    }
}

/// Cached factorization of a [`MetricMatrix`].
#[derive(Debug, Clone)]
pub struct FactoredMetric {
    dim: usize,
    blocks: Vec<BlockFactor>,
}

impl FactoredMetric {
    pub fn dim(&self) -> usize {
        self.dim
    }

    /// `H⁻¹ v`.
    pub fn solve(&self, v: &Vector) -> Result<Vector> {
        check_dim(self.dim, v.len())?;
        if let [single] = self.blocks.as_slice() {
            return Ok(match single {
                BlockFactor::Identity(_) => v.clone(),
                BlockFactor::Diagonal(inv) => inv.component_mul(v),
                BlockFactor::Dense(c) => c.solve(v),
            });
        }
        let mut out = Vector::zeros(v.len());
        let mut off = 0;
        for b in &self.blocks {
            let d = b.dim();
            let part = v.rows(off, d);
            match b {
                BlockFactor::Identity(_) => out.rows_mut(off, d).copy_from(&part),
                BlockFactor::Diagonal(inv) => {
                    out.rows_mut(off, d).copy_from(&inv.component_mul(&part))
                }
                BlockFactor::Dense(c) => out.rows_mut(off, d).copy_from(&c.solve(&part.into_owned())),
            }
            off += d;
        }
        Ok(out)
    }
}

/// `⟨u, Hv⟩`.
pub fn h_inner(h: &MetricMatrix, u: &Vector, v: &Vector) -> Result<f64> {
    check_dim(h.dim(), u.len())?;
    Ok(u.dot(&h.apply(v)?))
}

/// `‖u‖_H`.
pub fn h_norm(h: &MetricMatrix, u: &Vector) -> Result<f64> {
    Ok(h_inner(h, u, u)?.max(0.0).sqrt())
}

/// Convex domain `U` of the inner iterates.
#[derive(Debug, Clone, PartialEq)]
pub enum DomainDescriptor {
    FullSpace(usize),
    Box { lower: Vector, upper: Vector },
    Ball { center: Vector, radius: f64 },
}

impl DomainDescriptor {
    pub fn dim(&self) -> usize {
        match self {
            DomainDescriptor::FullSpace(n) => *n,
            DomainDescriptor::Box { lower, .. } => lower.len(),
            DomainDescriptor::Ball { center, .. } => center.len(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            DomainDescriptor::FullSpace(_) => Ok(()),
            DomainDescriptor::Box { lower, upper } => {
                check_dim(lower.len(), upper.len())?;
                if lower.iter().zip(upper.iter()).any(|(l, u)| !(l <= u)) {
                    return Err(Error::InvalidArgument("box requires lower <= upper".into()));
                }
                Ok(())
            }
            DomainDescriptor::Ball { radius, .. } => {
                if !(*radius > 0.0) {
                    return Err(Error::InvalidArgument("ball radius must be positive".into()));
                }
                Ok(())
            }
        }
    }

    pub fn contains(&self, u: &Vector, tol: f64) -> bool {
        match self {
            DomainDescriptor::FullSpace(_) => true,
            DomainDescriptor::Box { lower, upper } => u
                .iter()
                .zip(lower.iter().zip(upper.iter()))
                .all(|(x, (l, h))| *x >= l - tol && *x <= h + tol),
            DomainDescriptor::Ball { center, radius } => (u - center).norm() <= radius + tol,
        }
    }

    pub fn is_bounded(&self) -> bool {
        match self {
            DomainDescriptor::FullSpace(_) => false,
            DomainDescriptor::Box { lower, upper } => {
                lower.iter().chain(upper.iter()).all(|x| x.is_finite())
            }
            DomainDescriptor::Ball { .. } => true,
        }
    }
}

fn is_scaled_identity(h: &MetricMatrix) -> bool {
    match h {
        MetricMatrix::Identity(_) => true,
        MetricMatrix::Diagonal(d) => {
            let first = d[0];
            d.iter().all(|x| *x == first)
        }
        _ => false,
    }
}

/// `argmin_{ū ∈ U} ‖ū − u‖_H` for the supported (H, U) pairings.
///
/// FullSpace works for any metric, boxes need a diagonal metric, balls a
/// multiple of the identity. Other pairings are quadratic programs and are
/// rejected instead of being solved approximately.
pub fn h_project(h: &MetricMatrix, domain: &DomainDescriptor, u: &Vector) -> Result<Vector> {
    check_dim(h.dim(), u.len())?;
    check_dim(domain.dim(), u.len())?;
    match domain {
        DomainDescriptor::FullSpace(_) => Ok(u.clone()),
        DomainDescriptor::Box { lower, upper } => {
            if !h.is_diagonal() {
                return Err(Error::UnsupportedProjection(format!(
                    "box projection needs a diagonal metric, got {:?}",
                    h.kind()
                )));
            }
            Ok(Vector::from_iterator(
                u.len(),
                u.iter()
                    .zip(lower.iter().zip(upper.iter()))
                    .map(|(x, (l, hi))| x.clamp(*l, *hi)),
            ))
        }
        DomainDescriptor::Ball { center, radius } => {
            if !is_scaled_identity(h) {
                return Err(Error::UnsupportedProjection(format!(
                    "ball projection needs a scaled identity metric, got {:?}",
                    h.kind()
                )));
            }
            let d = u - center;
            let r = d.norm();
            if r <= *radius {
                Ok(u.clone())
            } else {
                Ok(center + d * (*radius / r))
            }
        }
    }
}

/// Transposed Jacobian of [`h_project`] at `u` applied to `cot`.
///
/// Boxes use the almost-everywhere derivative (mask of inactive coordinates).
pub fn h_project_vjp(domain: &DomainDescriptor, u: &Vector, cot: &Vector) -> Vector {
    match domain {
        DomainDescriptor::FullSpace(_) => cot.clone(),
        DomainDescriptor::Box { lower, upper } => Vector::from_iterator(
            u.len(),
            u.iter()
                .zip(lower.iter().zip(upper.iter()))
                .zip(cot.iter())
                .map(|((x, (l, h)), c)| if *x > *l && *x < *h { *c } else { 0.0 }),
        ),
        DomainDescriptor::Ball { center, radius } => {
            let d = u - center;
            let r = d.norm();
            if r <= *radius {
                cot.clone()
            } else {
                let dir = &d / r;
                let along = dir.dot(cot);
                (cot - &dir * along) * (*radius / r)
            }
        }
    }
}

/// Options for the power iterations behind the spectral estimates.
#[derive(Debug, Clone, Copy)]
pub struct PowerIteration {
    /// Relative accuracy requested for the returned value.
    pub tol: f64,
    pub max_iter: usize,
    pub seed: u64,
}

impl Default for PowerIteration {
    fn default() -> Self {
        Self { tol: 1e-6, max_iter: 10_000, seed: POWER_ITERATION_SEED }
    }
}

fn random_unit(n: usize, seed: u64) -> Vector {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let v = Vector::from_fn(n, |_, _| rng.random::<f64>() - 0.5);
    let nrm = v.norm();
    if nrm > 0.0 {
        v / nrm
    } else {
        Vector::from_element(n, 1.0 / (n as f64).sqrt())
    }
}

/// Largest singular value of `a` to relative tolerance `tol`.
pub fn spectral_norm_estimate(a: &Matrix, tol: f64) -> Result<f64> {
    spectral_norm_with(a, &PowerIteration { tol, ..Default::default() })
}

pub fn spectral_norm_with(a: &Matrix, opts: &PowerIteration) -> Result<f64> {
    if a.iter().any(|x| !x.is_finite()) {
        return Err(Error::NumericFailure("matrix has non-finite entries".into()));
    }
    if a.is_empty() || a.amax() == 0.0 {
        return Ok(0.0);
    }
    // The change between sweeps underestimates the remaining error when the top
    // two singular values are close, so stop well below the requested tolerance.
    let stop = (opts.tol * 1e-2).max(1e-15);
    let mut v = random_unit(a.ncols(), opts.seed);
    let mut sigma_prev = (a * &v).norm();
    for _ in 0..opts.max_iter {
        let av = a * &v;
        let w = a.tr_mul(&av);
        let nrm = w.norm();
        if nrm == 0.0 {
            return Ok(0.0);
        }
        v = w / nrm;
        let sigma = (a * &v).norm();
        if (sigma - sigma_prev).abs() <= stop * sigma {
            return Ok(sigma);
        }
        sigma_prev = sigma;
    }
    Err(Error::NumericFailure(format!(
        "power iteration did not converge in {} iterations",
        opts.max_iter
    )))
}

/// Smallest eigenvalue of a metric.
///
/// Exact for identity and diagonal structure; dense blocks use inverse power
/// iteration to relative tolerance 1e-8, falling back to a full symmetric
/// eigendecomposition when 500 sweeps do not settle (clustered spectra).
pub fn min_eigen_estimate(h: &MetricMatrix) -> Result<f64> {
    match h {
        MetricMatrix::Identity(_) => Ok(1.0),
        MetricMatrix::Diagonal(d) => Ok(d.min()),
        MetricMatrix::BlockDiagonal(blocks) => {
            let mut best = f64::INFINITY;
            for b in blocks {
                best = best.min(min_eigen_estimate(b)?);
            }
            Ok(best)
        }
        MetricMatrix::DenseSymmetric(m) => dense_min_eigen(m, 1e-8, 500),
    }
}

fn dense_min_eigen(m: &Matrix, tol: f64, max_iter: usize) -> Result<f64> {
    if m.iter().any(|x| !x.is_finite()) {
        return Err(Error::NumericFailure("metric has non-finite entries".into()));
    }
    let Some(chol) = Cholesky::new(m.clone()) else {
        // Not positive definite: inverse iteration is meaningless, report the
        // actual (non-positive) eigenvalue instead.
        let eig = SymmetricEigen::new(m.clone());
        return Ok(eig.eigenvalues.min());
    };
    let mut v = random_unit(m.nrows(), POWER_ITERATION_SEED);
    let mut lambda_prev = v.dot(&(m * &v));
    for _ in 0..max_iter {
        let w = chol.solve(&v);
        let nrm = w.norm();
        v = w / nrm;
        let lambda = v.dot(&(m * &v));
        if (lambda - lambda_prev).abs() <= tol * 1e-2 * lambda.abs() {
            return Ok(lambda);
        }
        lambda_prev = lambda;
    }
    Ok(SymmetricEigen::new(m.clone()).eigenvalues.min())
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn v(xs: &[f64]) -> Vector {
        Vector::from_column_slice(xs)
    }

    #[test]
    fn inner_and_norm_examples() {
        let id = MetricMatrix::identity(2);
        assert_eq!(h_inner(&id, &v(&[3.0, 4.0]), &v(&[3.0, 4.0])).unwrap(), 25.0);
        assert_eq!(h_norm(&id, &v(&[3.0, 4.0])).unwrap(), 5.0);

        let two = MetricMatrix::diagonal(&[2.0, 2.0]);
        assert_eq!(h_inner(&two, &v(&[1.0, 1.0]), &v(&[1.0, 1.0])).unwrap(), 4.0);

        let d14 = MetricMatrix::diagonal(&[1.0, 4.0]);
        assert_eq!(h_inner(&d14, &v(&[1.0, 1.0]), &v(&[1.0, 0.0])).unwrap(), 1.0);
        assert_relative_eq!(h_norm(&d14, &v(&[1.0, 1.0])).unwrap(), 5f64.sqrt());
        assert_eq!(h_norm(&d14, &v(&[0.0, 0.0])).unwrap(), 0.0);
    }

    #[test]
    fn dimension_mismatch_is_an_error() {
        let id = MetricMatrix::identity(3);
        assert!(matches!(
            h_inner(&id, &v(&[1.0]), &v(&[1.0])),
            Err(Error::DimensionMismatch { .. })
        ));
        assert!(h_norm(&id, &v(&[1.0, 2.0])).is_err());
    }

    #[test]
    fn projection_examples() {
        let u = v(&[2.0, -1.0]);
        let full = DomainDescriptor::FullSpace(2);
        assert_eq!(h_project(&MetricMatrix::diagonal(&[1.0, 3.0]), &full, &u).unwrap(), u);

        let boxed = DomainDescriptor::Box { lower: v(&[0.0, 0.0]), upper: v(&[1.0, 1.0]) };
        let p = h_project(&MetricMatrix::diagonal(&[1.0, 3.0]), &boxed, &u).unwrap();
        assert_eq!(p, v(&[1.0, 0.0]));

        let ball = DomainDescriptor::Ball { center: v(&[0.0, 0.0]), radius: 1.0 };
        let p = h_project(&MetricMatrix::identity(2), &ball, &v(&[0.0, 2.0])).unwrap();
        assert_eq!(p, v(&[0.0, 1.0]));
    }

    #[test]
    fn dense_box_projection_is_rejected() {
        let dense = MetricMatrix::DenseSymmetric(Matrix::from_row_slice(2, 2, &[2.0, 1.0, 1.0, 2.0]));
        let boxed = DomainDescriptor::Box { lower: v(&[0.0, 0.0]), upper: v(&[1.0, 1.0]) };
        assert!(matches!(
            h_project(&dense, &boxed, &v(&[3.0, 3.0])),
            Err(Error::UnsupportedProjection(_))
        ));
        let ball = DomainDescriptor::Ball { center: v(&[0.0, 0.0]), radius: 1.0 };
        assert!(h_project(&MetricMatrix::diagonal(&[1.0, 2.0]), &ball, &v(&[3.0, 0.0])).is_err());
    }

    #[test]
    fn min_eigen_examples() {
        assert_eq!(min_eigen_estimate(&MetricMatrix::diagonal(&[1.0, 4.0])).unwrap(), 1.0);
        assert_eq!(min_eigen_estimate(&MetricMatrix::identity(5)).unwrap(), 1.0);
        let dense = MetricMatrix::DenseSymmetric(Matrix::from_row_slice(2, 2, &[2.0, 1.0, 1.0, 2.0]));
        assert_relative_eq!(min_eigen_estimate(&dense).unwrap(), 1.0, max_relative = 1e-8);
        assert_relative_eq!(dense.max_eigen_estimate().unwrap(), 3.0, max_relative = 1e-8);
    }

    #[test]
    fn spectral_norm_examples() {
        assert_relative_eq!(
            spectral_norm_estimate(&Matrix::identity(4, 4), 1e-6).unwrap(),
            1.0,
            max_relative = 1e-6
        );
        let d = Matrix::from_row_slice(2, 2, &[2.0, 0.0, 0.0, 0.5]);
        assert_relative_eq!(spectral_norm_estimate(&d, 1e-6).unwrap(), 2.0, max_relative = 1e-6);
        let n = Matrix::from_row_slice(2, 2, &[0.0, 3.0, 0.0, 0.0]);
        assert_relative_eq!(spectral_norm_estimate(&n, 1e-6).unwrap(), 3.0, max_relative = 1e-6);
        assert_eq!(spectral_norm_estimate(&Matrix::zeros(3, 2), 1e-6).unwrap(), 0.0);
    }

    #[test]
    fn validate_rejects_bad_metrics() {
        assert!(MetricMatrix::diagonal(&[1.0, 0.0]).validate().is_err());
        let asym = MetricMatrix::DenseSymmetric(Matrix::from_row_slice(2, 2, &[2.0, 1.0, 0.0, 2.0]));
        assert!(asym.validate().is_err());
        let indefinite =
            MetricMatrix::DenseSymmetric(Matrix::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 1.0]));
        assert!(indefinite.validate().is_err());
        assert!(min_eigen_estimate(&indefinite).unwrap() < 0.0);
        let block = MetricMatrix::BlockDiagonal(vec![
            MetricMatrix::identity(2),
            MetricMatrix::diagonal(&[-1.0]),
        ]);
        assert!(block.validate().is_err());
    }

    #[test]
    fn factored_solve_inverts_apply() {
        let h = MetricMatrix::BlockDiagonal(vec![
            MetricMatrix::DenseSymmetric(Matrix::from_row_slice(2, 2, &[2.0, 1.0, 1.0, 2.0])),
            MetricMatrix::diagonal(&[0.5, 4.0]),
            MetricMatrix::identity(1),
        ]);
        let x = v(&[1.0, -2.0, 3.0, 0.25, 7.0]);
        let hx = h.apply(&x).unwrap();
        let back = h.factor().unwrap().solve(&hx).unwrap();
        assert_relative_eq!(back, x, epsilon = 1e-12);
    }

    #[test]
    fn ball_projection_vjp_matches_finite_differences() {
        let ball = DomainDescriptor::Ball { center: v(&[0.5, -0.5]), radius: 1.0 };
        let id = MetricMatrix::identity(2);
        let u = v(&[2.0, 1.0]);
        let cot = v(&[0.3, -0.7]);
        let got = h_project_vjp(&ball, &u, &cot);
        let eps = 1e-6;
        for i in 0..2 {
            let mut up = u.clone();
            let mut dn = u.clone();
            up[i] += eps;
            dn[i] -= eps;
            let fd = (h_project(&id, &ball, &up).unwrap() - h_project(&id, &ball, &dn).unwrap())
                .dot(&cot)
                / (2.0 * eps);
            assert_relative_eq!(got[i], fd, epsilon = 1e-8);
        }
    }
}
