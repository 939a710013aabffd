//! Proximal gradient step for `f(u) = ½uᵀPu + qᵀu` plus a weighted ℓ1 term,
//! taken in the metric `G = diag(g)`.

use std::sync::Arc;

use crate::error::{check_dim, Error, Result};
use crate::metric::{spectral_norm_with, Matrix, MetricMatrix, PowerIteration, Vector};
use crate::params::{Diag, Scalar};

use super::{soft_threshold, soft_threshold_vjp};

#[derive(Debug, Clone)]
pub struct PgOp {
    dim: usize,
    p: Option<Arc<Matrix>>,
    q: Option<Vector>,
    lf: f64,
    pub gamma: Scalar,
    /// Diagonal of the metric G(ω).
    pub g: Diag,
    /// ℓ1 weights; `None` means no nonsmooth term.
    pub weights: Option<Diag>,
}

impl PgOp {
    /// `p` must be symmetric positive semidefinite.
    pub fn new(
        dim: usize,
        p: Option<Arc<Matrix>>,
        q: Option<Vector>,
        gamma: Scalar,
        g: Diag,
        weights: Option<Diag>,
    ) -> Result<Self> {
        if let Some(p) = &p {
            if p.nrows() != dim || p.ncols() != dim {
                return Err(Error::DimensionMismatch { expected: dim, got: p.nrows() });
            }
        }
        if let Some(q) = &q {
            check_dim(dim, q.len())?;
        }
        check_dim(dim, g.len())?;
        if let Some(w) = &weights {
            check_dim(dim, w.len())?;
        }
        let lf = match &p {
            Some(p) => spectral_norm_with(p, &PowerIteration { tol: 1e-10, ..Default::default() })?,
            None => 0.0,
        };
        Ok(Self { dim, p, q, lf, gamma, g, weights })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Lipschitz constant of ∇f.
    pub fn lipschitz_f(&self) -> f64 {
        self.lf
    }

    pub fn p(&self) -> Option<&Arc<Matrix>> {
        self.p.as_ref()
    }

    pub fn q(&self) -> Option<&Vector> {
        self.q.as_ref()
    }

    pub fn with_q(&self, q: Option<Vector>) -> Result<Self> {
        if let Some(q) = &q {
            check_dim(self.dim, q.len())?;
        }
        Ok(Self { q, ..self.clone() })
    }

    pub(crate) fn prepare(&self, omega: &[f64]) -> Result<PgPrepared<'_>> {
        let gamma = self.gamma.eval(omega)?;
        let g = self.g.eval(omega)?;
        if let Some(bad) = g.iter().find(|x| !(**x > 0.0 && x.is_finite())) {
            return Err(Error::InvalidOmega(format!("metric diagonal entry {bad} is not positive")));
        }
        let gmin = g.min();
        if !(gamma > 0.0) || (self.lf > 0.0 && gamma >= 2.0 * gmin / self.lf) {
            return Err(Error::Contract(format!(
                "step size {gamma} outside (0, 2·λ_min(G)/L_f) = (0, {})",
                if self.lf > 0.0 { 2.0 * gmin / self.lf } else { f64::INFINITY }
            )));
        }
        let w = match &self.weights {
            Some(d) => {
                let w = d.eval(omega)?;
                if w.iter().any(|x| *x < 0.0) {
                    return Err(Error::InvalidOmega("negative ℓ1 weight".into()));
                }
                Some(w)
            }
            None => None,
        };
        Ok(PgPrepared { op: self, gamma, g, w })
    }
}

pub(crate) struct PgPrepared<'a> {
    op: &'a PgOp,
    gamma: f64,
    g: Vector,
    w: Option<Vector>,
}

impl PgPrepared<'_> {
    fn grad_f(&self, u: &Vector) -> Vector {
        let mut g = match &self.op.p {
            Some(p) => &**p * u,
            None => Vector::zeros(u.len()),
        };
        if let Some(q) = &self.op.q {
            g += q;
        }
        g
    }

    fn thresholds(&self) -> Option<Vector> {
        self.w.as_ref().map(|w| (w * self.gamma).component_div(&self.g))
    }

    pub fn apply(&self, u: &Vector) -> Result<Vector> {
        check_dim(self.op.dim, u.len())?;
        let r = u - (self.grad_f(u) * self.gamma).component_div(&self.g);
        Ok(match self.thresholds() {
            Some(t) => soft_threshold(&r, &t),
            None => r,
        })
    }

    pub fn vjp(&self, u: &Vector, cot: &Vector, grad: &mut [f64]) -> Result<Vector> {
        check_dim(self.op.dim, u.len())?;
        let gf = self.grad_f(u);
        let r = u - (&gf * self.gamma).component_div(&self.g);
        let (r_bar, t_bar) = match self.thresholds() {
            Some(t) => {
                let (rb, tb) = soft_threshold_vjp(&r, &t, cot);
                (rb, Some(tb))
            }
            None => (cot.clone(), None),
        };
        let mut g_bar = Vector::zeros(self.op.dim);
        let mut gamma_bar = 0.0;
        // r = u − γ G⁻¹ ∇f(u)
        let scaled = r_bar.component_div(&self.g);
        let mut u_bar = r_bar.clone();
        if let Some(p) = &self.op.p {
            u_bar -= p.tr_mul(&scaled) * self.gamma;
        }
        gamma_bar -= scaled.dot(&gf);
        for i in 0..self.op.dim {
            g_bar[i] += self.gamma * r_bar[i] * gf[i] / (self.g[i] * self.g[i]);
        }
        // t = γ w / g
        if let (Some(tb), Some(w)) = (t_bar, &self.w) {
            let mut w_bar = Vector::zeros(self.op.dim);
            for i in 0..self.op.dim {
                gamma_bar += tb[i] * w[i] / self.g[i];
                w_bar[i] = tb[i] * self.gamma / self.g[i];
                g_bar[i] -= tb[i] * self.gamma * w[i] / (self.g[i] * self.g[i]);
            }
            if let Some(d) = &self.op.weights {
                d.add_grad(grad, &w_bar);
            }
        }
        self.op.gamma.add_grad(grad, gamma_bar);
        self.op.g.add_grad(grad, &g_bar);
        Ok(u_bar)
    }

    pub fn metric(&self) -> MetricMatrix {
        MetricMatrix::Diagonal(self.g.clone())
    }

    pub fn metric_grad(&self, x: &Vector, y: &Vector, grad: &mut [f64]) {
        self.op.g.add_grad(grad, &x.component_mul(y));
    }
}
