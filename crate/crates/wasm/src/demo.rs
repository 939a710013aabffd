//! Plain-Rust demo computations behind the browser bindings.

use gkm_core::bmo::{plain_km, residual_envelope_check_split, train, BmoConfig};
use gkm_core::hypergrad::{inner_loop, step_size_bound, LossDescriptor, LossKind, PreparedMetric, Readout};
use gkm_core::operators::{push_layer, Activation, NetOp, OperatorDescriptor};
use gkm_core::params::HyperParams;
use gkm_core::{bmo::envelope, Error, Matrix, Vector};

/// Iterates of the selection problem: `T` is the 0.5-averaged projection onto
/// span{(1, 1)} and `ℓ(u) = ‖u − (2, 0)‖²`.
#[derive(Debug, Clone, PartialEq)]
pub struct SelectionPaths {
    /// Flat `(x, y)` pairs, `u^0 … u^K`, with the upper-level step.
    pub bmo: Vec<f64>,
    /// Same for plain KM (`μ = 0`).
    pub km: Vec<f64>,
}

fn selection_problem() -> Result<(OperatorDescriptor, HyperParams, LossDescriptor), Error> {
    let mut omega = HyperParams::new();
    let w = Matrix::from_row_slice(2, 2, &[0.5, 0.5, 0.5, 0.5]);
    let l = push_layer(&mut omega, "proj", &w, None)?;
    let op = OperatorDescriptor::Net(NetOp::new(2, vec![l], Activation::Identity, 1.0)?);
    let loss = LossDescriptor::new(
        LossKind::SquaredError { readout: Readout::Identity, target: Vector::from_vec(vec![2.0, 0.0]), scale: 2.0 },
        2,
    )?;
    Ok((op, omega, loss))
}

fn bounded_step(op: &OperatorDescriptor, omega: &HyperParams, loss: &LossDescriptor, cfg: BmoConfig, frac: f64) -> Result<BmoConfig, Error> {
    let metric = PreparedMetric::new(op, omega)?;
    let s = frac * step_size_bound(&cfg, &metric, loss)?;
    Ok(BmoConfig { s, ..cfg })
}

fn flatten(tape: &gkm_core::hypergrad::Tape<'_>) -> Vec<f64> {
    tape.steps
        .iter()
        .map(|s| &s.u_prev)
        .chain(std::iter::once(&tape.u_final))
        .flat_map(|u| u.iter().copied())
        .collect()
}

/// `s_frac` is the step as a fraction of its bound, in (0, 1).
pub fn selection_paths(alpha: f64, mu: f64, s_frac: f64, u0: [f64; 2], k: usize) -> Result<SelectionPaths, Error> {
    let (op, omega, loss) = selection_problem()?;
    let base = BmoConfig { alpha, mu, k, record_residuals: false, ..BmoConfig::default() };
    base.validate()?;
    let cfg = bounded_step(&op, &omega, &loss, base, s_frac)?;
    let u0 = Vector::from_vec(u0.to_vec());
    let bmo = inner_loop(&op, &loss, &omega, &cfg, &u0, None)?;
    let km = plain_km(&op, &loss, &omega, &cfg, &u0, k)?;
    Ok(SelectionPaths { bmo: flatten(&bmo.tape), km: flatten(&km.tape) })
}

#[derive(Debug, Clone, PartialEq)]
pub struct ResidualCurve {
    /// `‖u^k − T(u^k)‖²_H` for k = 1, 2, …
    pub residuals: Vec<f64>,
    /// Envelope `C·√((1 + ln(1 + k))/k^{1/4})` fitted on the first half.
    pub envelope: Vec<f64>,
    pub violations: usize,
    /// Inner step at which the iterate blew up.
    pub diverged_at: Option<usize>,
}

/// Block rotation: angle `theta` on coordinates (0, 1) and `theta/2` on (2, 3).
fn rotation(theta: f64) -> Matrix {
    let mut m = Matrix::zeros(4, 4);
    for (b, a) in [(0, theta), (2, 0.5 * theta)] {
        let (s, c) = a.sin_cos();
        m[(b, b)] = c;
        m[(b, b + 1)] = -s;
        m[(b + 1, b)] = s;
        m[(b + 1, b + 1)] = c;
    }
    m
}

/// GKM residuals for a two-layer ReLU net whose layers are `scale` times a
/// rotation by `theta`. With `normalize` the net is rescaled to be
/// non-expansive first.
pub fn residual_curve(scale: f64, theta: f64, normalize: bool, k: usize) -> Result<ResidualCurve, Error> {
    if k < 16 {
        return Err(Error::InvalidArgument("need at least 16 inner steps".into()));
    }
    let mut omega = HyperParams::new();
    let bias = Vector::from_vec(vec![0.3, -0.2, 0.1, 0.4]);
    let l0 = push_layer(&mut omega, "d0", &(rotation(theta) * scale), Some(&bias))?;
    let l1 = push_layer(&mut omega, "d1", &(rotation(-0.5 * theta) * scale), Some(&(-&bias)))?;
    let net = NetOp::new(4, vec![l0, l1], Activation::Relu, 1.0)?;
    let net = if normalize {
        net.normalize(&mut omega)?;
        net
    } else {
        net.without_certificate()
    };
    let op = OperatorDescriptor::Net(net);
    let loss = LossDescriptor::squared_error(Vector::from_vec(vec![1.0, 0.0, -1.0, 0.5]))?;
    let cfg = bounded_step(&op, &omega, &loss, BmoConfig { k, ..BmoConfig::default() }, 0.5)?;
    let u0 = Vector::from_vec(vec![1.0, 1.0, 1.0, 1.0]);
    match inner_loop(&op, &loss, &omega, &cfg, &u0, None) {
        Ok(run) => {
            let pts: Vec<(usize, f64)> = run.records.iter().map(|r| (r.k, r.residual.unwrap_or(f64::NAN))).collect();
            let check = residual_envelope_check_split(&pts, k / 2)?;
            Ok(ResidualCurve {
                residuals: pts.iter().map(|p| p.1).collect(),
                envelope: pts.iter().map(|&(kk, _)| check.c_head * envelope(kk)).collect(),
                violations: check.violations,
                diverged_at: None,
            })
        }
        Err(Error::Divergence { k, .. }) => {
            Ok(ResidualCurve { residuals: Vec::new(), envelope: Vec::new(), violations: 0, diverged_at: Some(k) })
        }
        Err(e) => Err(e),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BiasTraining {
    /// ‖∇φ_K‖ at t = 0 … T.
    pub grad_norms: Vec<f64>,
    pub bias: [f64; 2],
}

/// Learns `b` in `D(u) = u/2 + b` for `ℓ(u) = ½‖u − c‖²`; the stationary
/// point is `b = c/2`.
pub fn train_bias(c: [f64; 2], lr: f64, t: usize) -> Result<BiasTraining, Error> {
    let mut omega = HyperParams::new();
    let l = push_layer(&mut omega, "d", &(Matrix::identity(2, 2) * 0.5), Some(&Vector::zeros(2)))?;
    let op = OperatorDescriptor::Net(NetOp::new(2, vec![l], Activation::Identity, 1.0)?);
    let loss = LossDescriptor::squared_error(Vector::from_vec(c.to_vec()))?;
    let base = BmoConfig {
        k: 50,
        t,
        gamma: lr,
        trainable: Some(vec!["d.bias".into()]),
        record_residuals: false,
        ..BmoConfig::default()
    };
    let cfg = bounded_step(&op, &omega, &loss, base, 0.5)?;
    let rep = train(&op, &loss, &omega, &cfg)?;
    let b = rep.omega.get("d.bias")?;
    Ok(BiasTraining { grad_norms: rep.trajectory.outer.iter().map(|o| o.grad_norm).collect(), bias: [b[0], b[1]] })
}
