//! Linearized ADMM step for `min κ1‖u1‖₁ + κ2‖u2‖₁  s.t.  Qu1 + u2 = b`
//! on the state `(u1, u2, λ)`.
//!
//! The step is non-expansive in
//! `H = diag(ρ1·I − βQᵀQ, ρ2·I, (βγ)⁻¹·I)` whenever `ρ1 ≥ β‖Q‖²`, `ρ2 ≥ β`
//! and `0 < γ ≤ 1`.

use std::sync::Arc;

use crate::error::{check_dim, Error, Result};
use crate::metric::{spectral_norm_with, Matrix, MetricMatrix, PowerIteration, Vector};
use crate::params::{HyperParams, Scalar};

use super::{soft_threshold_scalar_vjp, soft_threshold_uniform};

/// Relative margin kept above `β‖Q‖²` when certifying ρ1, so that the
/// metric stays strictly positive definite.
pub const DEFAULT_RHO1_MARGIN: f64 = 0.05;

#[derive(Debug, Clone, Copy)]
pub struct DladmmParams {
    pub beta: Scalar,
    pub gamma: Scalar,
    pub rho1: Scalar,
    pub rho2: Scalar,
    pub kappa1: Scalar,
    pub kappa2: Scalar,
}

#[derive(Debug, Clone)]
pub struct DladmmOp {
    q: Arc<Matrix>,
    qtq: Arc<Matrix>,
    lq: f64,
    b: Vector,
    pub params: DladmmParams,
    pub rho1_margin: f64,
}

struct Values {
    beta: f64,
    gamma: f64,
    rho1: f64,
    rho2: f64,
    kappa1: f64,
    kappa2: f64,
}

impl DladmmOp {
    pub fn new(q: Arc<Matrix>, b: Vector, params: DladmmParams) -> Result<Self> {
        check_dim(q.nrows(), b.len())?;
        let lq = spectral_norm_with(&q, &PowerIteration { tol: 1e-10, ..Default::default() })?;
        let qtq = Arc::new(q.tr_mul(&q));
        Ok(Self { q, qtq, lq, b, params, rho1_margin: DEFAULT_RHO1_MARGIN })
    }

    /// Same dictionary and parameters, different observation.
    pub fn with_b(&self, b: Vector) -> Result<Self> {
        check_dim(self.q.nrows(), b.len())?;
        Ok(Self { b, ..self.clone() })
    }

    pub fn q(&self) -> &Arc<Matrix> {
        &self.q
    }

    pub fn b(&self) -> &Vector {
        &self.b
    }

    /// `‖Q‖₂`.
    pub fn lq(&self) -> f64 {
        self.lq
    }

    pub fn n(&self) -> usize {
        self.q.ncols()
    }

    pub fn m(&self) -> usize {
        self.q.nrows()
    }

    pub fn dim(&self) -> usize {
        self.n() + 2 * self.m()
    }

    pub fn blocks(&self) -> Vec<(String, usize)> {
        vec![("u1".into(), self.n()), ("u2".into(), self.m()), ("lambda".into(), self.m())]
    }

    fn values(&self, omega: &[f64]) -> Result<Values> {
        let p = &self.params;
        Ok(Values {
            beta: p.beta.eval(omega)?,
            gamma: p.gamma.eval(omega)?,
            rho1: p.rho1.eval(omega)?,
            rho2: p.rho2.eval(omega)?,
            kappa1: p.kappa1.eval(omega)?,
            kappa2: p.kappa2.eval(omega)?,
        })
    }

    pub(crate) fn prepare(&self, omega: &[f64]) -> Result<DladmmPrepared<'_>> {
        let v = self.values(omega)?;
        for (name, x) in [("β", v.beta), ("γ", v.gamma), ("ρ1", v.rho1), ("ρ2", v.rho2)] {
            if !(x > 0.0 && x.is_finite()) {
                return Err(Error::InvalidOmega(format!("{name} = {x} must be positive")));
            }
        }
        if v.kappa1 < 0.0 || v.kappa2 < 0.0 {
            return Err(Error::InvalidOmega("ℓ1 weights must be nonnegative".into()));
        }
        let tol = 1.0 - 1e-12;
        if v.rho1 < v.beta * self.lq * self.lq * tol || v.rho2 < v.beta * tol {
            return Err(Error::Contract(format!(
                "ρ1 = {} must be ≥ β‖Q‖² = {} and ρ2 = {} ≥ β = {}",
                v.rho1,
                v.beta * self.lq * self.lq,
                v.rho2,
                v.beta
            )));
        }
        Ok(DladmmPrepared { op: self, v })
    }

    /// Raises ρ1, ρ2 back above their bounds and caps γ at 1.
    pub fn certify(&self, omega: &mut HyperParams) -> Result<()> {
        let v = self.values(omega.values())?;
        let w = omega.values_mut();
        if let Some(i) = self.params.rho1.offset() {
            w[i] = w[i].max((1.0 + self.rho1_margin) * v.beta * self.lq * self.lq);
        }
        if let Some(i) = self.params.rho2.offset() {
            w[i] = w[i].max(v.beta);
        }
        if let Some(i) = self.params.gamma.offset() {
            w[i] = w[i].min(1.0);
        }
        Ok(())
    }
}

pub(crate) struct DladmmPrepared<'a> {
    op: &'a DladmmOp,
    v: Values,
}

struct Forward {
    lam: Vector,
    c1: Vector,
    qte1: Vector,
    r1: Vector,
    u1n: Vector,
    c2: Vector,
    e2: Vector,
    r2: Vector,
    u2n: Vector,
    c3: Vector,
}

impl DladmmPrepared<'_> {
    fn forward(&self, s: &Vector) -> Result<Forward> {
        let op = self.op;
        check_dim(op.dim(), s.len())?;
        let (n, m) = (op.n(), op.m());
        let v = &self.v;
        let u1 = s.rows(0, n).into_owned();
        let u2 = s.rows(n, m).into_owned();
        let lam = s.rows(n + m, m).into_owned();
        let c1 = &*op.q * &u1 + &u2 - &op.b;
        let e1 = &c1 * v.beta + &lam;
        let qte1 = op.q.tr_mul(&e1);
        let r1 = &u1 - &qte1 / v.rho1;
        let u1n = soft_threshold_uniform(&r1, v.kappa1 / v.rho1);
        let qu1n = &*op.q * &u1n;
        let c2 = &qu1n + &u2 - &op.b;
        let e2 = &c2 * v.beta + &lam;
        let r2 = &u2 - &e2 / v.rho2;
        let u2n = soft_threshold_uniform(&r2, v.kappa2 / v.rho2);
        let c3 = qu1n + &u2n - &op.b;
        Ok(Forward { lam, c1, qte1, r1, u1n, c2, e2, r2, u2n, c3 })
    }

    pub fn apply(&self, s: &Vector) -> Result<Vector> {
        let f = self.forward(s)?;
        let (n, m) = (self.op.n(), self.op.m());
        let mut out = Vector::zeros(s.len());
        out.rows_mut(0, n).copy_from(&f.u1n);
        out.rows_mut(n, m).copy_from(&f.u2n);
        out.rows_mut(n + m, m).copy_from(&(&f.lam + &f.c3 * (self.v.gamma * self.v.beta)));
        Ok(out)
    }

    pub fn vjp(&self, s: &Vector, cot: &Vector, grad: &mut [f64]) -> Result<Vector> {
        let f = self.forward(s)?;
        let op = self.op;
        let v = &self.v;
        let p = &op.params;
        let (n, m) = (op.n(), op.m());
        let u1n_bar = cot.rows(0, n).into_owned();
        let u2n_bar = cot.rows(n, m).into_owned();
        let lamn_bar = cot.rows(n + m, m).into_owned();

        let mut beta_bar = 0.0;
        let mut rho1_bar = 0.0;
        let mut rho2_bar = 0.0;

        // λ⁺ = λ + γβ c3
        let mut lam_bar = lamn_bar.clone();
        let c3_bar = &lamn_bar * (v.gamma * v.beta);
        p.gamma.add_grad(grad, v.beta * f.c3.dot(&lamn_bar));
        beta_bar += v.gamma * f.c3.dot(&lamn_bar);

        // c3 = Q u1⁺ + u2⁺ − b
        let mut u1n_tot = u1n_bar + op.q.tr_mul(&c3_bar);
        let u2n_tot = u2n_bar + &c3_bar;

        // u2⁺ = S(r2, κ2/ρ2)
        let (r2_bar, t2_bar) = soft_threshold_scalar_vjp(&f.r2, v.kappa2 / v.rho2, &u2n_tot);
        p.kappa2.add_grad(grad, t2_bar / v.rho2);
        rho2_bar -= t2_bar * v.kappa2 / (v.rho2 * v.rho2);
        // r2 = u2 − e2/ρ2
        let mut u2_bar = r2_bar.clone();
        let e2_bar = -&r2_bar / v.rho2;
        rho2_bar += r2_bar.dot(&f.e2) / (v.rho2 * v.rho2);
        // e2 = β c2 + λ
        let c2_bar = &e2_bar * v.beta;
        beta_bar += f.c2.dot(&e2_bar);
        lam_bar += &e2_bar;
        // c2 = Q u1⁺ + u2 − b
        u1n_tot += op.q.tr_mul(&c2_bar);
        u2_bar += &c2_bar;

        // u1⁺ = S(r1, κ1/ρ1)
        let (r1_bar, t1_bar) = soft_threshold_scalar_vjp(&f.r1, v.kappa1 / v.rho1, &u1n_tot);
        p.kappa1.add_grad(grad, t1_bar / v.rho1);
        rho1_bar -= t1_bar * v.kappa1 / (v.rho1 * v.rho1);
        // r1 = u1 − Qᵀe1/ρ1
        let mut u1_bar = r1_bar.clone();
        let e1_bar = -(&*op.q * &r1_bar) / v.rho1;
        rho1_bar += r1_bar.dot(&f.qte1) / (v.rho1 * v.rho1);
        // e1 = β c1 + λ
        let c1_bar = &e1_bar * v.beta;
        beta_bar += f.c1.dot(&e1_bar);
        lam_bar += &e1_bar;
        // c1 = Q u1 + u2 − b
        u1_bar += op.q.tr_mul(&c1_bar);
        u2_bar += &c1_bar;

        p.beta.add_grad(grad, beta_bar);
        p.rho1.add_grad(grad, rho1_bar);
        p.rho2.add_grad(grad, rho2_bar);

        let mut out = Vector::zeros(s.len());
        out.rows_mut(0, n).copy_from(&u1_bar);
        out.rows_mut(n, m).copy_from(&u2_bar);
        out.rows_mut(n + m, m).copy_from(&lam_bar);
        Ok(out)
    }

    pub fn metric(&self) -> MetricMatrix {
        let op = self.op;
        let v = &self.v;
        let mut top = &*op.qtq * (-v.beta);
        for i in 0..op.n() {
            top[(i, i)] += v.rho1;
        }
        MetricMatrix::BlockDiagonal(vec![
            MetricMatrix::DenseSymmetric(top),
            MetricMatrix::Diagonal(Vector::from_element(op.m(), v.rho2)),
            MetricMatrix::Diagonal(Vector::from_element(op.m(), 1.0 / (v.beta * v.gamma))),
        ])
    }

    pub fn metric_grad(&self, x: &Vector, y: &Vector, grad: &mut [f64]) {
        let op = self.op;
        let v = &self.v;
        let p = &op.params;
        let (n, m) = (op.n(), op.m());
        let x1 = x.rows(0, n);
        let y1 = y.rows(0, n);
        let x2 = x.rows(n, m);
        let y2 = y.rows(n, m);
        let xl = x.rows(n + m, m);
        let yl = y.rows(n + m, m);
        let ll = xl.dot(&yl);
        p.rho1.add_grad(grad, x1.dot(&y1));
        p.rho2.add_grad(grad, x2.dot(&y2));
        let qx = &*op.q * x1;
        let qy = &*op.q * y1;
        p.beta.add_grad(grad, -qx.dot(&qy) - ll / (v.beta * v.beta * v.gamma));
        p.gamma.add_grad(grad, -ll / (v.beta * v.gamma * v.gamma));
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fixed(beta: f64, gamma: f64, rho1: f64, rho2: f64, k1: f64, k2: f64) -> DladmmParams {
        DladmmParams {
            beta: Scalar::Fixed(beta),
            gamma: Scalar::Fixed(gamma),
            rho1: Scalar::Fixed(rho1),
            rho2: Scalar::Fixed(rho2),
            kappa1: Scalar::Fixed(k1),
            kappa2: Scalar::Fixed(k2),
        }
    }

    #[test]
    fn scalar_hand_example() {
        let op = DladmmOp::new(
            Arc::new(Matrix::identity(1, 1)),
            Vector::zeros(1),
            fixed(0.1, 1.0, 0.1, 0.1, 0.0, 0.0),
        )
        .unwrap();
        let out = op.prepare(&[]).unwrap().apply(&Vector::from_vec(vec![1.0, 1.0, 0.0])).unwrap();
        approx::assert_relative_eq!(out[0], -1.0, epsilon = 1e-12);
        approx::assert_relative_eq!(out[1], 1.0, epsilon = 1e-12);
        approx::assert_relative_eq!(out[2], 0.0, epsilon = 1e-12);
    }

    #[test]
    fn large_thresholds_zero_everything() {
        let op = DladmmOp::new(Arc::new(Matrix::zeros(2, 3)), Vector::zeros(2), fixed(1.0, 1.0, 1.0, 1.0, 1e6, 1e6))
            .unwrap();
        let s = Vector::from_vec(vec![0.5, -2.0, 3.0, 1.0, -1.0, 0.0, 0.0]);
        let out = op.prepare(&[]).unwrap().apply(&s).unwrap();
        assert_eq!(out, Vector::zeros(7));
    }

    #[test]
    fn rho_below_bound_is_rejected() {
        let op = DladmmOp::new(
            Arc::new(Matrix::from_element(1, 1, 2.0)),
            Vector::zeros(1),
            fixed(1.0, 1.0, 3.0, 1.0, 0.0, 0.0),
        )
        .unwrap();
        assert!(matches!(op.prepare(&[]), Err(Error::Contract(_))));
    }
}
