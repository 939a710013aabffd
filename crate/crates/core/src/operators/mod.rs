//! Parameterized fixed-point operators `D(·, ω)` and the averaging wrapper
//! `T = (1 − α)I + αD`.

pub mod alm;
pub mod dladmm;
pub mod net;
pub mod pg;

use crate::error::{check_dim, Error, Result};
use crate::metric::{MetricMatrix, Vector};
use crate::params::HyperParams;

pub use alm::{AlmOp, AlmProximal};
pub use dladmm::{DladmmOp, DladmmParams};
pub use net::{normalize_net, push_layer, Activation, NetLayer, NetOp};
pub use pg::PgOp;

/// A parameterized fixed-point map.
///
/// `Composite(vec![a, b])` is `a ∘ b`: `b` is applied first.
#[derive(Debug, Clone)]
pub enum OperatorDescriptor {
    Pg(PgOp),
    Alm(AlmOp),
    Dladmm(DladmmOp),
    Net(NetOp),
    Composite(Vec<OperatorDescriptor>),
}

impl OperatorDescriptor {
    pub fn dim(&self) -> usize {
        match self {
            Self::Pg(op) => op.dim(),
            Self::Alm(op) => op.dim(),
            Self::Dladmm(op) => op.dim(),
            Self::Net(op) => op.dim(),
            Self::Composite(ms) => ms.first().map_or(0, OperatorDescriptor::dim),
        }
    }

    pub fn kind_name(&self) -> &'static str {
        match self {
            Self::Pg(_) => "pg",
            Self::Alm(_) => "alm",
            Self::Dladmm(_) => "dladmm",
            Self::Net(_) => "net",
            Self::Composite(_) => "composite",
        }
    }

    /// Evaluates ω-dependent quantities once and checks preconditions.
    pub(crate) fn prepare(&self, omega: &[f64]) -> Result<Prepared<'_>> {
        Ok(match self {
            Self::Pg(op) => Prepared::Pg(op.prepare(omega)?),
            Self::Alm(op) => Prepared::Alm(op.prepare(omega)?),
            Self::Dladmm(op) => Prepared::Dladmm(op.prepare(omega)?),
            Self::Net(op) => Prepared::Net(op.prepare(omega)?),
            Self::Composite(members) => {
                if members.is_empty() {
                    return Err(Error::InvalidArgument("empty composite".into()));
                }
                let dim = members[0].dim();
                for m in members {
                    check_dim(dim, m.dim())?;
                }
                let prepared = members.iter().map(|m| m.prepare(omega)).collect::<Result<Vec<_>>>()?;
                let lead = members
                    .iter()
                    .position(|m| !matches!(m, Self::Net(_)))
                    .unwrap_or(0);
                let metric = prepared[lead].metric();
                for (i, p) in prepared.iter().enumerate() {
                    if i != lead && !metrics_agree(&metric, &p.metric()) {
                        return Err(Error::Contract(format!(
                            "composite member {i} ({}) does not share the metric of member {lead} ({})",
                            members[i].kind_name(),
                            members[lead].kind_name()
                        )));
                    }
                }
                Prepared::Composite(prepared, lead)
            }
        })
    }

    /// `D(u, ω)`.
    pub fn apply(&self, u: &Vector, omega: &HyperParams) -> Result<Vector> {
        self.prepare(omega.values())?.apply(u)
    }

    /// `(∂D/∂u)ᵀ cot`, accumulating `(∂D/∂ω)ᵀ cot` into `grad`.
    pub fn vjp(&self, u: &Vector, omega: &HyperParams, cot: &Vector, grad: &mut [f64]) -> Result<Vector> {
        check_dim(omega.len(), grad.len())?;
        self.prepare(omega.values())?.vjp(u, cot, grad)
    }

    /// The metric `H_ω` in which the operator is non-expansive.
    pub fn metric(&self, omega: &HyperParams) -> Result<MetricMatrix> {
        Ok(self.prepare(omega.values())?.metric())
    }

    /// Puts ω back into the certified region: DLADMM penalties above their
    /// bounds, network layers spectrally normalized.
    pub fn certify(&self, omega: &mut HyperParams) -> Result<()> {
        match self {
            Self::Dladmm(op) => op.certify(omega),
            Self::Net(op) => op.normalize(omega),
            Self::Composite(ms) => ms.iter().try_for_each(|m| m.certify(omega)),
            Self::Pg(_) | Self::Alm(_) => Ok(()),
        }
    }

    /// Upper bound on the Lipschitz constant in the operator's own metric.
    /// Numerical operators are only certified non-expansive, so they report 1.
    pub fn lipschitz_bound(&self, omega: &HyperParams) -> Result<f64> {
        match self {
            Self::Net(op) => op.lipschitz_bound(omega.values()),
            Self::Composite(ms) => {
                let mut prod = 1.0;
                for m in ms {
                    prod *= m.lipschitz_bound(omega)?;
                }
                Ok(prod)
            }
            _ => Ok(1.0),
        }
    }

    /// Named blocks of the state vector.
    pub fn state_blocks(&self) -> Vec<(String, usize)> {
        match self {
            Self::Pg(op) => vec![("u".into(), op.dim())],
            Self::Alm(op) => op.blocks().to_vec(),
            Self::Dladmm(op) => op.blocks(),
            Self::Net(op) => vec![("u".into(), op.dim())],
            Self::Composite(ms) => ms
                .iter()
                .find(|m| !matches!(m, Self::Net(_)))
                .or(ms.first())
                .map(|m| m.state_blocks())
                .unwrap_or_default(),
        }
    }
}

fn metrics_agree(a: &MetricMatrix, b: &MetricMatrix) -> bool {
    if a.dim() != b.dim() {
        return false;
    }
    if let (Some(x), Some(y)) = (a.diagonal_entries(), b.diagonal_entries()) {
        return x.iter().zip(y.iter()).all(|(p, q)| (p - q).abs() <= 1e-12 * p.abs().max(q.abs()).max(1.0));
    }
    let (x, y) = (a.to_dense(), b.to_dense());
    let scale = x.amax().max(y.amax()).max(1.0);
    (x - y).amax() <= 1e-12 * scale
}

pub(crate) enum Prepared<'a> {
    Pg(pg::PgPrepared<'a>),
    Alm(alm::AlmPrepared<'a>),
    Dladmm(dladmm::DladmmPrepared<'a>),
    Net(net::NetPrepared<'a>),
    /// Members and the index of the member whose metric is shared.
    Composite(Vec<Prepared<'a>>, usize),
}

impl Prepared<'_> {
    pub fn apply(&self, u: &Vector) -> Result<Vector> {
        match self {
            Self::Pg(p) => p.apply(u),
            Self::Alm(p) => p.apply(u),
            Self::Dladmm(p) => p.apply(u),
            Self::Net(p) => p.apply(u),
            Self::Composite(ms, _) => {
                let mut x = u.clone();
                for m in ms.iter().rev() {
                    x = m.apply(&x)?;
                }
                Ok(x)
            }
        }
    }

    pub fn vjp(&self, u: &Vector, cot: &Vector, grad: &mut [f64]) -> Result<Vector> {
        match self {
            Self::Pg(p) => p.vjp(u, cot, grad),
            Self::Alm(p) => p.vjp(u, cot, grad),
            Self::Dladmm(p) => p.vjp(u, cot, grad),
            Self::Net(p) => p.vjp(u, cot, grad),
            Self::Composite(ms, _) => {
                let mut inputs = Vec::with_capacity(ms.len());
                let mut x = u.clone();
                for m in ms.iter().rev() {
                    let y = m.apply(&x)?;
                    inputs.push(x);
                    x = y;
                }
                let mut bar = cot.clone();
                for (m, x) in ms.iter().zip(inputs.iter().rev()) {
                    bar = m.vjp(x, &bar, grad)?;
                }
                Ok(bar)
            }
        }
    }

    pub fn metric(&self) -> MetricMatrix {
        match self {
            Self::Pg(p) => p.metric(),
            Self::Alm(p) => p.metric(),
            Self::Dladmm(p) => p.metric(),
            Self::Net(p) => p.metric(),
            Self::Composite(ms, lead) => ms[*lead].metric(),
        }
    }

    /// Accumulates `∂(xᵀ H_ω y)/∂ω` into `grad`.
    pub fn metric_grad(&self, x: &Vector, y: &Vector, grad: &mut [f64]) {
        match self {
            Self::Pg(p) => p.metric_grad(x, y, grad),
            Self::Alm(p) => p.metric_grad(x, y, grad),
            Self::Dladmm(p) => p.metric_grad(x, y, grad),
            Self::Net(p) => p.metric_grad(x, y, grad),
            Self::Composite(ms, lead) => ms[*lead].metric_grad(x, y, grad),
        }
    }
}

/// Componentwise `sign(r)·max(|r| − t, 0)`.
pub(crate) fn soft_threshold(r: &Vector, t: &Vector) -> Vector {
    r.zip_map(t, soft)
}

pub(crate) fn soft_threshold_uniform(r: &Vector, t: f64) -> Vector {
    r.map(|x| soft(x, t))
}

fn soft(x: f64, t: f64) -> f64 {
    if x > t {
        x - t
    } else if x < -t {
        x + t
    } else {
        0.0
    }
}

/// Kinks get derivative 0; a zero threshold is the identity everywhere.
fn active(x: f64, t: f64) -> bool {
    t == 0.0 || x.abs() > t
}

/// Returns `(r̄, t̄)` for `y = S(r, t)` given `ȳ`.
pub(crate) fn soft_threshold_vjp(r: &Vector, t: &Vector, y_bar: &Vector) -> (Vector, Vector) {
    let mut rb = Vector::zeros(r.len());
    let mut tb = Vector::zeros(r.len());
    for i in 0..r.len() {
        if active(r[i], t[i]) {
            rb[i] = y_bar[i];
            tb[i] = -r[i].signum() * y_bar[i];
        }
    }
    (rb, tb)
}

/// Same as [`soft_threshold_vjp`] with one shared threshold; `t̄` is summed.
pub(crate) fn soft_threshold_scalar_vjp(r: &Vector, t: f64, y_bar: &Vector) -> (Vector, f64) {
    let mut rb = Vector::zeros(r.len());
    let mut tb = 0.0;
    for i in 0..r.len() {
        if active(r[i], t) {
            rb[i] = y_bar[i];
            if t != 0.0 {
                tb -= r[i].signum() * y_bar[i];
            }
        }
    }
    (rb, tb)
}

/// Averaging parameter of `T = (1 − α)I + αD`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GkmConfig {
    pub alpha: f64,
}

impl GkmConfig {
    pub fn new(alpha: f64) -> Result<Self> {
        let c = Self { alpha };
        c.validate()?;
        Ok(c)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return Err(Error::Contract(format!("averaging parameter α = {} outside (0, 1)", self.alpha)));
        }
        Ok(())
    }
}

/// State vector with named blocks, e.g. `(u1, u2, λ)`.
#[derive(Debug, Clone, PartialEq)]
pub struct AugmentedState {
    pub values: Vector,
    pub blocks: Vec<(String, usize)>,
}

impl AugmentedState {
    pub fn new(values: Vector, blocks: Vec<(String, usize)>) -> Result<Self> {
        let total: usize = blocks.iter().map(|b| b.1).sum();
        if total != values.len() {
            return Err(Error::Layout(format!("blocks cover {total} entries, state has {}", values.len())));
        }
        Ok(Self { values, blocks })
    }

    pub fn zeros(op: &OperatorDescriptor) -> Self {
        let blocks = op.state_blocks();
        let n = blocks.iter().map(|b| b.1).sum();
        Self { values: Vector::zeros(n), blocks }
    }

    pub fn block(&self, name: &str) -> Option<Vector> {
        let mut off = 0;
        for (n, len) in &self.blocks {
            if n == name {
                return Some(self.values.rows(off, *len).into_owned());
            }
            off += len;
        }
        None
    }

    fn with_values(&self, values: Vector) -> Self {
        Self { values, blocks: self.blocks.clone() }
    }
}

pub fn metric_of(op: &OperatorDescriptor, omega: &HyperParams) -> Result<MetricMatrix> {
    op.metric(omega)
}

pub fn apply_pg(op: &PgOp, u: &Vector, omega: &HyperParams) -> Result<Vector> {
    op.prepare(omega.values())?.apply(u)
}

pub fn apply_alm(op: &AlmOp, state: &AugmentedState, omega: &HyperParams) -> Result<AugmentedState> {
    Ok(state.with_values(op.prepare(omega.values())?.apply(&state.values)?))
}

pub fn apply_dladmm(op: &DladmmOp, state: &AugmentedState, omega: &HyperParams) -> Result<AugmentedState> {
    Ok(state.with_values(op.prepare(omega.values())?.apply(&state.values)?))
}

pub fn apply_net(op: &NetOp, u: &Vector, omega: &HyperParams) -> Result<Vector> {
    op.prepare(omega.values())?.apply(u)
}

pub fn apply_composite(members: &[OperatorDescriptor], u: &Vector, omega: &HyperParams) -> Result<Vector> {
    OperatorDescriptor::Composite(members.to_vec()).apply(u, omega)
}

/// `T(u) = (1 − α)u + αD(u, ω)`.
pub fn apply_t(op: &OperatorDescriptor, u: &Vector, omega: &HyperParams, cfg: &GkmConfig) -> Result<Vector> {
    cfg.validate()?;
    let d = op.apply(u, omega)?;
    Ok(u * (1.0 - cfg.alpha) + d * cfg.alpha)
}
