//! The inner loop, its differentiation tape and the unrolled hypergradient.

use std::sync::Arc;

use crate::bmo::BmoConfig;
use crate::error::{check_dim, Error, Result};
use crate::metric::{
    h_norm, h_project, h_project_vjp, min_eigen_estimate, spectral_norm_with, DomainDescriptor,
    FactoredMetric, Matrix, MetricMatrix, PowerIteration, Vector,
};
use crate::operators::{OperatorDescriptor, Prepared};
use crate::params::HyperParams;

/// Which coordinates of the state a squared-error loss looks at.
#[derive(Debug, Clone)]
pub enum Readout {
    Identity,
    /// The first `len` coordinates.
    Prefix(usize),
    Matrix(Arc<Matrix>),
}

impl Readout {
    fn apply(&self, u: &Vector) -> Vector {
        match self {
            Readout::Identity => u.clone(),
            Readout::Prefix(len) => u.rows(0, *len).into_owned(),
            Readout::Matrix(r) => &**r * u,
        }
    }

    fn transpose_apply(&self, y: &Vector, dim: usize) -> Vector {
        match self {
            Readout::Identity => y.clone(),
            Readout::Prefix(len) => {
                let mut out = Vector::zeros(dim);
                out.rows_mut(0, *len).copy_from(y);
                out
            }
            Readout::Matrix(r) => r.tr_mul(y),
        }
    }

    fn out_dim(&self, dim: usize) -> usize {
        match self {
            Readout::Identity => dim,
            Readout::Prefix(len) => *len,
            Readout::Matrix(r) => r.nrows(),
        }
    }
}

#[derive(Debug, Clone)]
pub enum LossKind {
    /// `(c/2)‖R u − target‖²`.
    SquaredError { readout: Readout, target: Vector, scale: f64 },
    /// `½‖Q u1 + u2 − b‖²` on a state whose first blocks are `u1 ∈ Rⁿ, u2 ∈ Rᵐ`.
    FeasibilityResidual { q: Arc<Matrix>, b: Vector },
    /// `½uᵀPu + qᵀu` with `P` symmetric positive semidefinite.
    Quadratic { p: Arc<Matrix>, q: Vector },
}

/// Ridge term `(w/2)‖ω − center‖²`, the only ω-dependence a loss may have.
#[derive(Debug, Clone)]
pub struct OmegaRidge {
    pub weight: f64,
    pub center: Vec<f64>,
}

/// Upper-level loss `ℓ(u, ω)`, convex and smooth in `u`.
#[derive(Debug, Clone)]
pub struct LossDescriptor {
    pub kind: LossKind,
    pub omega_ridge: Option<OmegaRidge>,
    dim: usize,
    lipschitz: f64,
}

impl LossDescriptor {
    /// `dim` is the length of the state the loss is evaluated on.
    pub fn new(kind: LossKind, dim: usize) -> Result<Self> {
        let opts = PowerIteration { tol: 1e-10, ..Default::default() };
        let lipschitz = match &kind {
            LossKind::SquaredError { readout, target, scale } => {
                if !(*scale > 0.0) {
                    return Err(Error::InvalidArgument("loss scale must be positive".into()));
                }
                check_dim(readout.out_dim(dim), target.len())?;
                let r2 = match readout {
                    Readout::Identity => 1.0,
                    Readout::Prefix(len) => {
                        if *len > dim {
                            return Err(Error::DimensionMismatch { expected: dim, got: *len });
                        }
                        1.0
                    }
                    Readout::Matrix(r) => {
                        check_dim(dim, r.ncols())?;
                        spectral_norm_with(r, &opts)?.powi(2)
                    }
                };
                scale * r2
            }
            LossKind::FeasibilityResidual { q, b } => {
                check_dim(q.nrows(), b.len())?;
                if q.ncols() + q.nrows() > dim {
                    return Err(Error::DimensionMismatch { expected: dim, got: q.ncols() + q.nrows() });
                }
                let mut qi = Matrix::zeros(q.nrows(), q.ncols() + q.nrows());
                qi.view_mut((0, 0), (q.nrows(), q.ncols())).copy_from(&**q);
                qi.view_mut((0, q.ncols()), (q.nrows(), q.nrows())).fill_with_identity();
                spectral_norm_with(&qi, &opts)?.powi(2)
            }
            LossKind::Quadratic { p, q } => {
                check_dim(dim, p.nrows())?;
                check_dim(dim, p.ncols())?;
                check_dim(dim, q.len())?;
                spectral_norm_with(p, &opts)?
            }
        };
        if !(lipschitz > 0.0) {
            return Err(Error::InvalidArgument("loss has a zero Hessian".into()));
        }
        Ok(Self { kind, omega_ridge: None, dim, lipschitz })
    }

    /// `½‖u − target‖²`.
    pub fn squared_error(target: Vector) -> Result<Self> {
        let n = target.len();
        Self::new(LossKind::SquaredError { readout: Readout::Identity, target, scale: 1.0 }, n)
    }

    pub fn with_ridge(mut self, weight: f64, center: Vec<f64>) -> Self {
        self.omega_ridge = Some(OmegaRidge { weight, center });
        self
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Lipschitz constant of `∇_u ℓ`.
    pub fn lipschitz(&self) -> f64 {
        self.lipschitz
    }

    /// Same loss against a different target / observation.
    pub fn with_data(&self, data: Vector) -> Result<Self> {
        let kind = match &self.kind {
            LossKind::SquaredError { readout, target, scale } => {
                check_dim(target.len(), data.len())?;
                LossKind::SquaredError { readout: readout.clone(), target: data, scale: *scale }
            }
            LossKind::FeasibilityResidual { q, b } => {
                check_dim(b.len(), data.len())?;
                LossKind::FeasibilityResidual { q: q.clone(), b: data }
            }
            LossKind::Quadratic { p, q } => {
                check_dim(q.len(), data.len())?;
                LossKind::Quadratic { p: p.clone(), q: data }
            }
        };
        Ok(Self { kind, ..self.clone() })
    }

    fn residual(&self, u: &Vector) -> Vector {
        match &self.kind {
            LossKind::SquaredError { readout, target, .. } => readout.apply(u) - target,
            LossKind::FeasibilityResidual { q, b } => {
                let (n, m) = (q.ncols(), q.nrows());
                &**q * u.rows(0, n) + u.rows(n, m) - b
            }
            LossKind::Quadratic { .. } => unreachable!("quadratic loss has no residual form"),
        }
    }

    /// `(ℓ, ∂ℓ/∂u, ∂ℓ/∂ω)`.
    pub fn value_and_grad(&self, u: &Vector, omega: &[f64]) -> Result<(f64, Vector, Vec<f64>)> {
        check_dim(self.dim, u.len())?;
        let (value, gu) = self.value_and_grad_u(u);
        let mut gw = vec![0.0; omega.len()];
        let mut value = value;
        if let Some(r) = &self.omega_ridge {
            check_dim(omega.len(), r.center.len())?;
            for i in 0..omega.len() {
                let d = omega[i] - r.center[i];
                value += 0.5 * r.weight * d * d;
                gw[i] = r.weight * d;
            }
        }
        Ok((value, gu, gw))
    }

    fn value_and_grad_u(&self, u: &Vector) -> (f64, Vector) {
        match &self.kind {
            LossKind::SquaredError { readout, scale, .. } => {
                let r = self.residual(u);
                (0.5 * scale * r.norm_squared(), readout.transpose_apply(&r, self.dim) * *scale)
            }
            LossKind::FeasibilityResidual { q, .. } => {
                let r = self.residual(u);
                let (n, m) = (q.ncols(), q.nrows());
                let mut g = Vector::zeros(self.dim);
                g.rows_mut(0, n).copy_from(&q.tr_mul(&r));
                g.rows_mut(n, m).copy_from(&r);
                (0.5 * r.norm_squared(), g)
            }
            LossKind::Quadratic { p, q } => {
                let pu = &**p * u;
                (0.5 * u.dot(&pu) + q.dot(u), pu + q)
            }
        }
    }

    /// `∇²_u ℓ · v`.
    pub fn hvp(&self, v: &Vector) -> Vector {
        match &self.kind {
            LossKind::SquaredError { readout, scale, .. } => {
                readout.transpose_apply(&readout.apply(v), self.dim) * *scale
            }
            LossKind::FeasibilityResidual { q, .. } => {
                let (n, m) = (q.ncols(), q.nrows());
                let r = &**q * v.rows(0, n) + v.rows(n, m);
                let mut g = Vector::zeros(self.dim);
                g.rows_mut(0, n).copy_from(&q.tr_mul(&r));
                g.rows_mut(n, m).copy_from(&r);
                g
            }
            LossKind::Quadratic { p, .. } => &**p * v,
        }
    }
}

/// Largest eigenvalue of the u-Hessian of a loss.
pub fn estimate_l_ell(loss: &LossDescriptor) -> f64 {
    loss.lipschitz()
}

/// `H_ω` with its factorization and smallest eigenvalue, computed once per ω.
#[derive(Debug, Clone)]
pub struct PreparedMetric {
    pub metric: MetricMatrix,
    pub factor: FactoredMetric,
    pub lambda_min: f64,
}

impl PreparedMetric {
    pub fn new(op: &OperatorDescriptor, omega: &HyperParams) -> Result<Self> {
        Self::from_metric(op.metric(omega)?)
    }

    pub fn from_metric(metric: MetricMatrix) -> Result<Self> {
        let lambda_min = min_eigen_estimate(&metric)?;
        if !(lambda_min > 0.0) {
            return Err(Error::InvalidMetric(format!(
                "operator metric has smallest eigenvalue {lambda_min:e}"
            )));
        }
        let factor = metric.factor()?;
        Ok(Self { metric, factor, lambda_min })
    }
}

/// One inner step, enough to replay it forward and to run its reverse rule.
#[derive(Debug, Clone)]
pub struct TapeStep {
    pub k: usize,
    pub s_k: f64,
    pub u_prev: Vector,
    /// `μ v_u + (1 − μ) v_l` before projection.
    pub mixed: Vector,
}

#[derive(Debug, Clone)]
pub struct Tape<'a> {
    pub op: &'a OperatorDescriptor,
    pub alpha: f64,
    pub mu: f64,
    pub metric_flow: bool,
    pub domain: Option<DomainDescriptor>,
    pub metric: Arc<PreparedMetric>,
    pub u0: Vector,
    pub steps: Vec<TapeStep>,
    pub u_final: Vector,
    pub loss_value: f64,
}

/// Per-k record of an inner run.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct InnerRecord {
    pub k: usize,
    /// `‖u^k − T(u^k)‖²` in the lower-bound metric.
    pub residual: Option<f64>,
    /// `‖u^k − u^{k−1}‖ / ‖u^{k−1}‖`, absent when `u^{k−1} = 0`.
    pub rel_step: Option<f64>,
    pub loss: f64,
    /// `‖u^k − u^{k−1}‖²`.
    pub step_norm_sq: f64,
    /// `‖u^k‖²`.
    pub norm_sq: f64,
}

#[derive(Debug, Clone)]
pub struct InnerRun<'a> {
    pub u_k: Vector,
    pub tape: Tape<'a>,
    pub records: Vec<InnerRecord>,
}

/// Step-size bound `λ_min(H_lb)/L_ℓ` for a given metric.
pub fn step_size_bound(cfg: &BmoConfig, metric: &PreparedMetric, loss: &LossDescriptor) -> Result<f64> {
    let lmin = match (&cfg.h_lb_min_eig, &cfg.h_lb) {
        (Some(x), _) => *x,
        (None, Some(h)) => min_eigen_estimate(h)?,
        (None, None) => metric.lambda_min,
    };
    Ok(lmin / loss.lipschitz())
}

fn magnitude_ok(x: f64, threshold: f64) -> bool {
    x.is_finite() && x.abs() <= threshold
}

/// Runs `K = cfg.k` steps of
/// `v_l = T(u)`, `v_u = u − s_k H⁻¹∇ℓ(u)`, `u ← Proj(μ v_u + (1 − μ) v_l)`
/// with `s_k = s/(k + 1)`, from `u0`.
pub fn inner_loop<'a>(
    op: &'a OperatorDescriptor,
    loss: &LossDescriptor,
    omega: &HyperParams,
    cfg: &BmoConfig,
    u0: &Vector,
    metric: Option<Arc<PreparedMetric>>,
) -> Result<InnerRun<'a>> {
    if !(cfg.mu > 0.0 && cfg.mu < 1.0) {
        return Err(Error::Contract(format!("μ = {} outside (0, 1)", cfg.mu)));
    }
    run_inner(op, loss, omega, cfg, u0, metric, cfg.mu, cfg.k)
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn run_inner<'a>(
    op: &'a OperatorDescriptor,
    loss: &LossDescriptor,
    omega: &HyperParams,
    cfg: &BmoConfig,
    u0: &Vector,
    metric: Option<Arc<PreparedMetric>>,
    mu: f64,
    k_max: usize,
) -> Result<InnerRun<'a>> {
    if !(cfg.alpha > 0.0 && cfg.alpha < 1.0) {
        return Err(Error::Contract(format!("α = {} outside (0, 1)", cfg.alpha)));
    }
    check_dim(op.dim(), u0.len())?;
    check_dim(loss.dim(), u0.len())?;
    let prepared = op.prepare(omega.values())?;
    let metric = match metric {
        Some(m) => {
            check_dim(op.dim(), m.metric.dim())?;
            m
        }
        None => Arc::new(PreparedMetric::from_metric(prepared.metric())?),
    };
    let s = if mu > 0.0 {
        let bound = step_size_bound(cfg, &metric, loss)?;
        let s = if cfg.s_relative {
            if !(cfg.s > 0.0 && cfg.s < 1.0) {
                return Err(Error::Contract(format!("relative step size {} outside (0, 1)", cfg.s)));
            }
            cfg.s * bound
        } else {
            cfg.s
        };
        if !(s > 0.0 && s < bound) {
            return Err(Error::Contract(format!("step size s = {s} outside (0, {bound})")));
        }
        s
    } else {
        cfg.s
    };
    if let Some(d) = &cfg.domain {
        d.validate()?;
    }
    let residual_metric = cfg.h_lb.as_ref().unwrap_or(&metric.metric);
    let limit = cfg.divergence_threshold;

    let mut u = u0.clone();
    let mut steps = Vec::with_capacity(k_max);
    let mut records: Vec<InnerRecord> = Vec::with_capacity(k_max);
    let mut pending_loss = None;
    for k in 1..=k_max {
        let d = prepared.apply(&u)?;
        let v_l = &u * (1.0 - cfg.alpha) + d * cfg.alpha;
        if let Some(prev) = records.last_mut() {
            if cfg.record_residuals {
                let r = h_norm(residual_metric, &(&u - &v_l))?.powi(2);
                if !magnitude_ok(r, limit) {
                    return Err(Error::Divergence { t: 0, k: k - 1 });
                }
                prev.residual = Some(r);
            }
        }
        let s_k = s / (k as f64 + 1.0);
        let mixed = if mu > 0.0 {
            let (_, g, _) = loss.value_and_grad(&u, omega.values())?;
            let v_u = &u - metric.factor.solve(&g)? * s_k;
            v_u * mu + v_l * (1.0 - mu)
        } else {
            v_l
        };
        let u_next = match &cfg.domain {
            Some(dom) => h_project(&metric.metric, dom, &mixed)?,
            None => mixed.clone(),
        };
        let (value, _, _) = loss.value_and_grad(&u_next, omega.values())?;
        if u_next.iter().any(|x| !x.is_finite()) || !magnitude_ok(value, limit) {
            return Err(Error::Divergence { t: 0, k });
        }
        let prev_norm = u.norm();
        let step_norm = (&u_next - &u).norm();
        let rel_step = (prev_norm > 0.0).then(|| step_norm / prev_norm);
        if let Some(r) = rel_step {
            if !magnitude_ok(r, limit) {
                return Err(Error::Divergence { t: 0, k });
            }
        }
        records.push(InnerRecord {
            k,
            residual: None,
            rel_step,
            loss: value,
            step_norm_sq: step_norm * step_norm,
            norm_sq: u_next.norm_squared(),
        });
        steps.push(TapeStep { k, s_k, u_prev: std::mem::replace(&mut u, u_next), mixed });
        pending_loss = Some(value);
    }
    if cfg.record_residuals {
        if let Some(last) = records.last_mut() {
            let d = prepared.apply(&u)?;
            let v_l = &u * (1.0 - cfg.alpha) + d * cfg.alpha;
            let r = h_norm(residual_metric, &(&u - &v_l))?.powi(2);
            if !magnitude_ok(r, limit) {
                return Err(Error::Divergence { t: 0, k: last.k });
            }
            last.residual = Some(r);
        }
    }
    let loss_value = match pending_loss {
        Some(v) => v,
        None => loss.value_and_grad(&u, omega.values())?.0,
    };
    let tape = Tape {
        op,
        alpha: cfg.alpha,
        mu,
        metric_flow: cfg.metric_flow,
        domain: cfg.domain.clone(),
        metric,
        u0: u0.clone(),
        steps,
        u_final: u.clone(),
        loss_value,
    };
    Ok(InnerRun { u_k: u, tape, records })
}

impl Tape<'_> {
    /// Recomputes `u^K` from `u0` with the recorded step sizes.
    pub fn replay(&self, loss: &LossDescriptor, omega: &HyperParams) -> Result<Vector> {
        let prepared = self.op.prepare(omega.values())?;
        let mut u = self.u0.clone();
        for st in &self.steps {
            let d = prepared.apply(&u)?;
            let v_l = &u * (1.0 - self.alpha) + d * self.alpha;
            let mixed = if self.mu > 0.0 {
                let (_, g, _) = loss.value_and_grad(&u, omega.values())?;
                let v_u = &u - self.metric.factor.solve(&g)? * st.s_k;
                v_u * self.mu + v_l * (1.0 - self.mu)
            } else {
                v_l
            };
            u = match &self.domain {
                Some(dom) => h_project(&self.metric.metric, dom, &mixed)?,
                None => mixed,
            };
        }
        Ok(u)
    }
}

/// Deliberately wrong reverse rules, used to check that the finite-difference
/// oracle catches mistakes.
#[doc(hidden)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReverseFault {
    /// Uses α instead of 1 − α for the identity branch of the averaging.
    AveragingWeight,
}

#[derive(Debug, Clone, Copy, Default)]
pub struct HypergradOptions {
    /// Overrides the tape's setting for differentiating through `H_ω⁻¹`.
    pub metric_flow: Option<bool>,
    #[doc(hidden)]
    pub fault: Option<ReverseFault>,
}

/// `dℓ(u^K(ω), ω)/dω` by a reverse sweep over the tape.
pub fn hypergradient(tape: &Tape<'_>, loss: &LossDescriptor, omega: &HyperParams) -> Result<Vec<f64>> {
    hypergradient_with(tape, loss, omega, &HypergradOptions::default())
}

pub fn hypergradient_with(
    tape: &Tape<'_>,
    loss: &LossDescriptor,
    omega: &HyperParams,
    opts: &HypergradOptions,
) -> Result<Vec<f64>> {
    let (_, g_final, mut grad) = loss.value_and_grad(&tape.u_final, omega.values())?;
    if tape.steps.is_empty() {
        return Ok(grad);
    }
    let prepared: Prepared<'_> = tape.op.prepare(omega.values())?;
    let metric_flow = opts.metric_flow.unwrap_or(tape.metric_flow);
    let identity_weight = match opts.fault {
        Some(ReverseFault::AveragingWeight) => tape.alpha,
        None => 1.0 - tape.alpha,
    };
    let mut u_bar = g_final;
    for st in tape.steps.iter().rev() {
        let w_bar = match &tape.domain {
            Some(dom) => h_project_vjp(dom, &st.mixed, &u_bar),
            None => u_bar,
        };
        let vl_bar = &w_bar * (1.0 - tape.mu);
        let mut prev_bar = &vl_bar * identity_weight;
        prev_bar += prepared.vjp(&st.u_prev, &(&vl_bar * tape.alpha), &mut grad)?;
        if tape.mu > 0.0 {
            let vu_bar = &w_bar * tape.mu;
            let x = tape.metric.factor.solve(&vu_bar)?;
            prev_bar += &vu_bar;
            prev_bar -= loss.hvp(&x) * st.s_k;
            if metric_flow {
                let (_, g, _) = loss.value_and_grad(&st.u_prev, omega.values())?;
                let y = tape.metric.factor.solve(&g)?;
                let mut mg = vec![0.0; grad.len()];
                prepared.metric_grad(&x, &y, &mut mg);
                for (a, b) in grad.iter_mut().zip(mg) {
                    *a += st.s_k * b;
                }
            }
        }
        u_bar = prev_bar;
    }
    Ok(grad)
}

/// `φ_K(ω) = ℓ(u^K(ω), ω)`.
pub fn phi_k(
    op: &OperatorDescriptor,
    loss: &LossDescriptor,
    omega: &HyperParams,
    cfg: &BmoConfig,
    u0: &Vector,
) -> Result<f64> {
    Ok(inner_loop(op, loss, omega, cfg, u0, None)?.tape.loss_value)
}

/// Central differences of `φ_K` with step `h·(|ω_i| + 1)` per coordinate.
pub fn fd_hypergradient(
    op: &OperatorDescriptor,
    loss: &LossDescriptor,
    omega: &HyperParams,
    cfg: &BmoConfig,
    u0: &Vector,
    h: f64,
) -> Result<Vec<f64>> {
    if !(h > 0.0) {
        return Err(Error::InvalidArgument(format!("finite-difference step {h} must be positive")));
    }
    let mut out = vec![0.0; omega.len()];
    let mut w = omega.clone();
    for i in 0..omega.len() {
        let x = omega.values()[i];
        let step = h * (x.abs() + 1.0);
        w.values_mut()[i] = x + step;
        let up = phi_k(op, loss, &w, cfg, u0)?;
        w.values_mut()[i] = x - step;
        let dn = phi_k(op, loss, &w, cfg, u0)?;
        w.values_mut()[i] = x;
        out[i] = (up - dn) / (2.0 * step);
    }
    Ok(out)
}

/// `‖a − b‖ / max(‖b‖, 1e-8)`.
pub fn relative_error(a: &[f64], b: &[f64]) -> f64 {
    let diff: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|y| y * y).sum::<f64>().sqrt();
    diff / nb.max(1e-8)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::operators::{push_layer, Activation, NetOp};
    use crate::params::Role;
    use approx::assert_relative_eq;

    fn scalar_net(hp: &mut HyperParams, w: f64) -> OperatorDescriptor {
        let l = push_layer(hp, "d", &Matrix::from_element(1, 1, w), None).unwrap();
        OperatorDescriptor::Net(NetOp::new(1, vec![l], Activation::Identity, 1.0).unwrap())
    }

    fn cfg(alpha: f64, mu: f64, s: f64, k: usize) -> BmoConfig {
        BmoConfig { alpha, mu, s, k, ..BmoConfig::default() }
    }

    #[test]
    fn loss_examples() {
        let l = LossDescriptor::squared_error(Vector::zeros(2)).unwrap();
        let (v, g, _) = l.value_and_grad(&Vector::from_vec(vec![3.0, 4.0]), &[]).unwrap();
        assert_eq!(v, 12.5);
        assert_eq!(g, Vector::from_vec(vec![3.0, 4.0]));
        let t = Vector::from_vec(vec![1.0, -1.0]);
        let l = LossDescriptor::squared_error(t.clone()).unwrap();
        let (v, g, _) = l.value_and_grad(&t, &[]).unwrap();
        assert_eq!(v, 0.0);
        assert_eq!(g, Vector::zeros(2));

        let q = Arc::new(Matrix::from_row_slice(1, 2, &[1.0, 2.0]));
        let l = LossDescriptor::new(LossKind::FeasibilityResidual { q, b: Vector::from_vec(vec![5.0]) }, 4).unwrap();
        let (v, _, _) = l.value_and_grad(&Vector::from_vec(vec![1.0, 1.0, 2.0, 9.0]), &[]).unwrap();
        assert_eq!(v, 0.0);
    }

    #[test]
    fn lipschitz_examples() {
        assert_eq!(estimate_l_ell(&LossDescriptor::squared_error(Vector::zeros(3)).unwrap()), 1.0);
        let q = Arc::new(Matrix::from_diagonal(&Vector::from_vec(vec![1.0, 3.0])));
        let l = LossDescriptor::new(
            LossKind::SquaredError { readout: Readout::Matrix(q), target: Vector::zeros(2), scale: 1.0 },
            2,
        )
        .unwrap();
        assert_relative_eq!(estimate_l_ell(&l), 9.0, max_relative = 1e-9);
        let l = LossDescriptor::new(
            LossKind::SquaredError { readout: Readout::Identity, target: Vector::zeros(2), scale: 2.5 },
            2,
        )
        .unwrap();
        assert_eq!(estimate_l_ell(&l), 2.5);
    }

    #[test]
    fn single_step_scalar_example() {
        let mut hp = HyperParams::new();
        let op = scalar_net(&mut hp, 1.0);
        let loss = LossDescriptor::squared_error(Vector::zeros(1)).unwrap();
        let run = inner_loop(&op, &loss, &hp, &cfg(0.5, 0.5, 0.5, 1), &Vector::from_vec(vec![1.0]), None).unwrap();
        assert_relative_eq!(run.u_k[0], 0.875, epsilon = 1e-15);
        assert_relative_eq!(run.tape.loss_value, 0.5 * 0.875 * 0.875, epsilon = 1e-15);
    }

    #[test]
    fn zero_steps_return_the_start() {
        let mut hp = HyperParams::new();
        let op = scalar_net(&mut hp, 1.0);
        let loss = LossDescriptor::squared_error(Vector::zeros(1)).unwrap().with_ridge(2.0, vec![0.5]);
        let u0 = Vector::from_vec(vec![1.0]);
        let run = inner_loop(&op, &loss, &hp, &cfg(0.5, 0.5, 0.5, 0), &u0, None).unwrap();
        assert_eq!(run.u_k, u0);
        assert!(run.tape.steps.is_empty());
        let g = hypergradient(&run.tape, &loss, &hp).unwrap();
        assert_eq!(g, vec![2.0 * (1.0 - 0.5)]);
    }

    #[test]
    fn mu_at_the_boundary_is_rejected() {
        let mut hp = HyperParams::new();
        let op = scalar_net(&mut hp, 1.0);
        let loss = LossDescriptor::squared_error(Vector::zeros(1)).unwrap();
        let u0 = Vector::from_vec(vec![1.0]);
        for mu in [0.0, 1.0] {
            assert!(matches!(
                inner_loop(&op, &loss, &hp, &cfg(0.5, mu, 0.5, 3), &u0, None),
                Err(Error::Contract(_))
            ));
        }
        assert!(matches!(
            inner_loop(&op, &loss, &hp, &cfg(0.5, 0.5, 1.5, 3), &u0, None),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn one_step_hand_derivative() {
        // D(u) = ωu, ℓ = (u − 1)², α = μ = 0.5, s = 0.25, u0 = 1, K = 1.
        // s_1 = 0.125; v_l = 0.5 + 0.5ω; v_u = 1 − 0.125·2·0 = 1;
        // u¹ = 0.5 + 0.25 + 0.25ω; dφ/dω = 2(u¹ − 1)·0.25.
        let mut hp = HyperParams::new();
        let op = scalar_net(&mut hp, 0.6);
        let loss = LossDescriptor::new(
            LossKind::SquaredError { readout: Readout::Identity, target: Vector::from_vec(vec![1.0]), scale: 2.0 },
            1,
        )
        .unwrap();
        let run = inner_loop(&op, &loss, &hp, &cfg(0.5, 0.5, 0.25, 1), &Vector::from_vec(vec![1.0]), None).unwrap();
        let u1 = 0.75 + 0.25 * 0.6;
        assert_relative_eq!(run.u_k[0], u1, epsilon = 1e-15);
        let g = hypergradient(&run.tape, &loss, &hp).unwrap();
        assert_relative_eq!(g[0], 2.0 * (u1 - 1.0) * 0.25, epsilon = 1e-15);
    }

    #[test]
    fn replay_is_bit_identical() {
        let mut hp = HyperParams::new();
        let op = scalar_net(&mut hp, 0.7);
        let loss = LossDescriptor::squared_error(Vector::from_vec(vec![0.3])).unwrap();
        let run = inner_loop(&op, &loss, &hp, &cfg(0.4, 0.3, 0.5, 12), &Vector::from_vec(vec![2.0]), None).unwrap();
        assert_eq!(run.tape.replay(&loss, &hp).unwrap(), run.u_k);
    }

    #[test]
    fn linear_phi_is_exact_under_central_differences() {
        // φ_0(ω) = ridge only, which is quadratic: central differences are exact
        // up to rounding for the linear part of its gradient.
        let mut hp = HyperParams::new();
        hp.push_scalar("a", Role::Threshold, 0.3).unwrap();
        let op = OperatorDescriptor::Net(
            NetOp::new(
                1,
                vec![push_layer(&mut hp, "d", &Matrix::from_element(1, 1, 0.5), None).unwrap()],
                Activation::Identity,
                1.0,
            )
            .unwrap(),
        );
        let loss = LossDescriptor::squared_error(Vector::zeros(1)).unwrap().with_ridge(1.0, vec![0.0, 0.0]);
        let c = cfg(0.5, 0.5, 0.5, 0);
        let u0 = Vector::from_vec(vec![1.0]);
        let fd = fd_hypergradient(&op, &loss, &hp, &c, &u0, 1e-6).unwrap();
        assert_relative_eq!(fd[0], 0.3, epsilon = 1e-9);
        assert_relative_eq!(fd[1], 0.5, epsilon = 1e-9);
    }
}
