//! Proximal augmented Lagrangian step for
//! `min ½uᵀPu + qᵀu + Σ wᵢ|uᵢ|  s.t.  Au = b`
//! on the joint state `(u, λ)`.

use std::sync::Arc;

use nalgebra::Cholesky;

use crate::error::{check_dim, Error, Result};
use crate::metric::{
    min_eigen_estimate, spectral_norm_with, Matrix, MetricMatrix, PowerIteration, Vector,
};
use crate::params::{Diag, Scalar};

use super::{soft_threshold, soft_threshold_vjp};

/// How the primal subproblem is regularized.
#[derive(Debug, Clone)]
pub enum AlmProximal {
    /// `+ ½‖x − u‖²_G` with `G = diag(g)`; the subproblem is solved exactly.
    Exact { g: Diag },
    /// `G = diag(ρ) − βAᵀA − P`, which turns the subproblem into one
    /// gradient step on the augmented Lagrangian followed by shrinkage.
    Linearized { rho: Diag },
}

#[derive(Debug, Clone)]
pub struct AlmOp {
    n: usize,
    a: Arc<Matrix>,
    ata: Arc<Matrix>,
    a_norm_sq: f64,
    b: Vector,
    p: Option<Arc<Matrix>>,
    p_norm: f64,
    q: Option<Vector>,
    pub weights: Option<Diag>,
    pub beta: Scalar,
    pub proximal: AlmProximal,
    blocks: Vec<(String, usize)>,
}

impl AlmOp {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        a: Arc<Matrix>,
        b: Vector,
        p: Option<Arc<Matrix>>,
        q: Option<Vector>,
        weights: Option<Diag>,
        beta: Scalar,
        proximal: AlmProximal,
    ) -> Result<Self> {
        let n = a.ncols();
        check_dim(a.nrows(), b.len())?;
        if let Some(p) = &p {
            check_dim(n, p.nrows())?;
            check_dim(n, p.ncols())?;
        }
        if let Some(q) = &q {
            check_dim(n, q.len())?;
        }
        if let Some(w) = &weights {
            check_dim(n, w.len())?;
        }
        match &proximal {
            AlmProximal::Exact { g } => check_dim(n, g.len())?,
            AlmProximal::Linearized { rho } => check_dim(n, rho.len())?,
        }
        let ata = Arc::new(a.tr_mul(&a));
        let opts = PowerIteration { tol: 1e-10, ..Default::default() };
        let a_norm_sq = spectral_norm_with(&a, &opts)?.powi(2);
        let p_norm = match &p {
            Some(p) => spectral_norm_with(p, &opts)?,
            None => 0.0,
        };
        let blocks = vec![("u".to_string(), n), ("lambda".to_string(), a.nrows())];
        Ok(Self { n, a, ata, a_norm_sq, b, p, p_norm, q, weights, beta, proximal, blocks })
    }

    /// Names and lengths of the primal and dual blocks, e.g. `u_b, u_r, v_b, v_r`
    /// and `lambda_1, lambda_2, lambda_3`.
    pub fn with_blocks(mut self, primal: &[(&str, usize)], dual: &[(&str, usize)]) -> Result<Self> {
        let pn: usize = primal.iter().map(|b| b.1).sum();
        let dn: usize = dual.iter().map(|b| b.1).sum();
        check_dim(self.n, pn)?;
        check_dim(self.a.nrows(), dn)?;
        self.blocks = primal.iter().chain(dual).map(|(s, l)| (s.to_string(), *l)).collect();
        Ok(self)
    }

    pub fn with_b(&self, b: Vector) -> Result<Self> {
        check_dim(self.a.nrows(), b.len())?;
        Ok(Self { b, ..self.clone() })
    }

    /// Replaces the linear term of the smooth part.
    pub fn set_q(&mut self, q: Option<Vector>) -> Result<()> {
        if let Some(q) = &q {
            check_dim(self.n, q.len())?;
        }
        self.q = q;
        Ok(())
    }

    pub fn primal_dim(&self) -> usize {
        self.n
    }

    pub fn dual_dim(&self) -> usize {
        self.a.nrows()
    }

    pub fn dim(&self) -> usize {
        self.n + self.a.nrows()
    }

    pub fn a(&self) -> &Arc<Matrix> {
        &self.a
    }

    pub fn b(&self) -> &Vector {
        &self.b
    }

    /// `‖A‖²`.
    pub fn a_norm_sq(&self) -> f64 {
        self.a_norm_sq
    }

    pub fn blocks(&self) -> &[(String, usize)] {
        &self.blocks
    }

    pub(crate) fn prepare(&self, omega: &[f64]) -> Result<AlmPrepared<'_>> {
        let beta = self.beta.eval(omega)?;
        if !(beta > 0.0 && beta.is_finite()) {
            return Err(Error::InvalidOmega(format!("penalty β = {beta} must be positive")));
        }
        let w = match &self.weights {
            Some(d) => {
                let w = d.eval(omega)?;
                if w.iter().any(|x| *x < 0.0) {
                    return Err(Error::InvalidOmega("negative ℓ1 weight".into()));
                }
                Some(w).filter(|w| w.iter().any(|x| *x != 0.0))
            }
            None => None,
        };
        let kind = match &self.proximal {
            AlmProximal::Exact { g } => {
                let g = g.eval(omega)?;
                if g.iter().any(|x| !(*x > 0.0)) {
                    return Err(Error::InvalidOmega("proximal metric must be positive".into()));
                }
                let mut m = &*self.ata * beta;
                if let Some(p) = &self.p {
                    m += &**p;
                }
                for i in 0..self.n {
                    m[(i, i)] += g[i];
                }
                let off_diag = (0..self.n)
                    .flat_map(|i| (0..self.n).map(move |j| (i, j)))
                    .any(|(i, j)| i != j && m[(i, j)] != 0.0);
                let solve = if !off_diag {
                    ExactSolve::Diagonal(m.diagonal())
                } else if w.is_none() {
                    let chol = Cholesky::new(m).ok_or_else(|| {
                        Error::NumericFailure("augmented system is not positive definite".into())
                    })?;
                    ExactSolve::Dense(Box::new(chol))
                } else {
                    return Err(Error::Unsupported(
                        "exact proximal ALM with a coupled quadratic and an ℓ1 term has no closed form"
                            .into(),
                    ));
                };
                PreparedKind::Exact { g, solve }
            }
            AlmProximal::Linearized { rho } => {
                let rho = rho.eval(omega)?;
                // Cheap certificate for diag(ρ) − βAᵀA − P ≻ 0, with an exact
                // fallback when it is inconclusive.
                let floor = rho.min() - beta * self.a_norm_sq - self.p_norm;
                if !(floor > 0.0) {
                    let g = self.linearized_metric_block(&rho, beta);
                    if !(min_eigen_estimate(&MetricMatrix::DenseSymmetric(g))? > 0.0) {
                        return Err(Error::InvalidOmega(
                            "diag(ρ) − βAᵀA − P is not positive definite".into(),
                        ));
                    }
                }
                PreparedKind::Linearized { rho }
            }
        };
        Ok(AlmPrepared { op: self, beta, w, kind })
    }

    fn linearized_metric_block(&self, rho: &Vector, beta: f64) -> Matrix {
        let mut g = &*self.ata * (-beta);
        if let Some(p) = &self.p {
            g -= &**p;
        }
        for i in 0..self.n {
            g[(i, i)] += rho[i];
        }
        g
    }
}

enum ExactSolve {
    Diagonal(Vector),
    Dense(Box<Cholesky<f64, nalgebra::Dyn>>),
}

enum PreparedKind {
    Exact { g: Vector, solve: ExactSolve },
    Linearized { rho: Vector },
}

pub(crate) struct AlmPrepared<'a> {
    op: &'a AlmOp,
    beta: f64,
    w: Option<Vector>,
    kind: PreparedKind,
}

impl AlmPrepared<'_> {
    fn split(&self, s: &Vector) -> (Vector, Vector) {
        (s.rows(0, self.op.n).into_owned(), s.rows(self.op.n, self.op.dual_dim()).into_owned())
    }

    fn join(&self, u: &Vector, l: &Vector) -> Vector {
        let mut out = Vector::zeros(self.op.dim());
        out.rows_mut(0, self.op.n).copy_from(u);
        out.rows_mut(self.op.n, self.op.dual_dim()).copy_from(l);
        out
    }

    fn grad_f(&self, u: &Vector) -> Vector {
        let mut g = match &self.op.p {
            Some(p) => &**p * u,
            None => Vector::zeros(self.op.n),
        };
        if let Some(q) = &self.op.q {
            g += q;
        }
        g
    }

    /// Primal argument of the shrinkage and the shrinkage thresholds.
    fn primal_pre(&self, u: &Vector, lam: &Vector) -> (Vector, Option<Vector>, Vector) {
        let op = self.op;
        match &self.kind {
            PreparedKind::Exact { g, solve } => {
                let mut rhs = g.component_mul(u) - op.a.tr_mul(&(lam - &op.b * self.beta));
                if let Some(q) = &op.q {
                    rhs -= q;
                }
                match solve {
                    ExactSolve::Diagonal(m) => {
                        let r = rhs.component_div(m);
                        let t = self.w.as_ref().map(|w| w.component_div(m));
                        (r, t, rhs)
                    }
                    ExactSolve::Dense(chol) => (chol.solve(&rhs), None, rhs),
                }
            }
            PreparedKind::Linearized { rho } => {
                let resid = &*op.a * u - &op.b;
                let e = self.grad_f(u) + op.a.tr_mul(&(lam + resid * self.beta));
                let r = u - e.component_div(rho);
                let t = self.w.as_ref().map(|w| w.component_div(rho));
                (r, t, e)
            }
        }
    }

    pub fn apply(&self, s: &Vector) -> Result<Vector> {
        check_dim(self.op.dim(), s.len())?;
        let (u, lam) = self.split(s);
        let (r, t, _) = self.primal_pre(&u, &lam);
        let u_new = match &t {
            Some(t) => soft_threshold(&r, t),
            None => r,
        };
        let lam_new = lam + (&*self.op.a * &u_new - &self.op.b) * self.beta;
        Ok(self.join(&u_new, &lam_new))
    }

    pub fn vjp(&self, s: &Vector, cot: &Vector, grad: &mut [f64]) -> Result<Vector> {
        check_dim(self.op.dim(), s.len())?;
        let op = self.op;
        let beta = self.beta;
        let (u, lam) = self.split(s);
        let (un_bar, ln_bar) = self.split(cot);
        let (r, t, pre) = self.primal_pre(&u, &lam);
        let u_new = match &t {
            Some(t) => soft_threshold(&r, t),
            None => r.clone(),
        };

        // λ⁺ = λ + β(Au⁺ − b)
        let mut beta_bar = ln_bar.dot(&(&*op.a * &u_new - &op.b));
        let mut lam_bar = ln_bar.clone();
        let unew_bar = un_bar + op.a.tr_mul(&ln_bar) * beta;

        let (r_bar, t_bar) = match &t {
            Some(t) => {
                let (rb, tb) = soft_threshold_vjp(&r, t, &unew_bar);
                (rb, Some(tb))
            }
            None => (unew_bar, None),
        };

        let mut u_bar;
        match &self.kind {
            PreparedKind::Exact { g, solve } => {
                let (rhs_bar, m_bar) = match solve {
                    ExactSolve::Diagonal(m) => {
                        let rhs_bar = r_bar.component_div(m);
                        let mut m_bar = -rhs_bar.component_mul(&r);
                        if let (Some(tb), Some(w)) = (&t_bar, &self.w) {
                            let w_bar = tb.component_div(m);
                            m_bar -= tb.component_mul(w).component_div(&m.component_mul(m));
                            if let Some(d) = &op.weights {
                                d.add_grad(grad, &w_bar);
                            }
                        }
                        (rhs_bar, MBar::Diagonal(m_bar))
                    }
                    ExactSolve::Dense(chol) => {
                        let rhs_bar = chol.solve(&r_bar);
                        (rhs_bar, MBar::Outer)
                    }
                };
                // rhs = g∘u − Aᵀλ + βAᵀb − q
                u_bar = g.component_mul(&rhs_bar);
                let mut g_bar = u.component_mul(&rhs_bar);
                let a_rhs_bar = &*op.a * &rhs_bar;
                lam_bar -= &a_rhs_bar;
                beta_bar += a_rhs_bar.dot(&op.b);
                // M = P + βAᵀA + diag(g)
                match m_bar {
                    MBar::Diagonal(mb) => {
                        g_bar += &mb;
                        beta_bar += (0..op.n).map(|i| mb[i] * op.ata[(i, i)]).sum::<f64>();
                    }
                    MBar::Outer => {
                        // M̄ = −rhs̄ xᵀ with x = r
                        g_bar -= rhs_bar.component_mul(&r);
                        beta_bar -= a_rhs_bar.dot(&(&*op.a * &r));
                    }
                }
                if let AlmProximal::Exact { g: gd } = &op.proximal {
                    gd.add_grad(grad, &g_bar);
                }
            }
            PreparedKind::Linearized { rho } => {
                let e = pre;
                // r = u − e/ρ
                let e_bar = -r_bar.component_div(rho);
                let mut rho_bar = r_bar.component_mul(&e).component_div(&rho.component_mul(rho));
                if let (Some(tb), Some(w)) = (&t_bar, &self.w) {
                    let w_bar = tb.component_div(rho);
                    rho_bar -= tb.component_mul(w).component_div(&rho.component_mul(rho));
                    if let Some(d) = &op.weights {
                        d.add_grad(grad, &w_bar);
                    }
                }
                // e = Pu + q + Aᵀλ + βAᵀ(Au − b)
                let a_e_bar = &*op.a * &e_bar;
                u_bar = r_bar + op.a.tr_mul(&a_e_bar) * beta;
                if let Some(p) = &op.p {
                    u_bar += p.tr_mul(&e_bar);
                }
                lam_bar += &a_e_bar;
                beta_bar += a_e_bar.dot(&(&*op.a * &u - &op.b));
                if let AlmProximal::Linearized { rho: rd } = &op.proximal {
                    rd.add_grad(grad, &rho_bar);
                }
            }
        }
        op.beta.add_grad(grad, beta_bar);
        Ok(self.join(&u_bar, &lam_bar))
    }

    pub fn metric(&self) -> MetricMatrix {
        let primal = match &self.kind {
            PreparedKind::Exact { g, .. } => MetricMatrix::Diagonal(g.clone()),
            PreparedKind::Linearized { rho } => {
                MetricMatrix::DenseSymmetric(self.op.linearized_metric_block(rho, self.beta))
            }
        };
        MetricMatrix::BlockDiagonal(vec![
            primal,
            MetricMatrix::Diagonal(Vector::from_element(self.op.dual_dim(), 1.0 / self.beta)),
        ])
    }

    /// `∂(xᵀ H y)/∂ω`.
    pub fn metric_grad(&self, x: &Vector, y: &Vector, grad: &mut [f64]) {
        let op = self.op;
        let (xu, xl) = self.split(x);
        let (yu, yl) = self.split(y);
        let mut beta_bar = -xl.dot(&yl) / (self.beta * self.beta);
        match &op.proximal {
            AlmProximal::Exact { g } => g.add_grad(grad, &xu.component_mul(&yu)),
            AlmProximal::Linearized { rho } => {
                rho.add_grad(grad, &xu.component_mul(&yu));
                beta_bar -= (&*op.a * &xu).dot(&(&*op.a * &yu));
            }
        }
        op.beta.add_grad(grad, beta_bar);
    }
}

enum MBar {
    Diagonal(Vector),
    Outer,
}
