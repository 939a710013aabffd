//! 1-D two-layer separation `b = u_b + u_r`:
//! `min ½‖u_b + u_r − b‖² + κ_b‖v_b‖₁ + κ_r‖v_r‖₁  s.t.  v_b = u_b, v_r = ∇u_r`,
//! solved by a linearized proximal ALM on `(u_b, u_r, v_b, v_r, λ_b, λ_r)`.

use std::f64::consts::PI;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;

use crate::bmo::Sample;
use crate::error::{Error, Result};
use crate::hypergrad::{LossDescriptor, LossKind, Readout};
use crate::metric::{Matrix, Vector};
use crate::operators::{AlmOp, AlmProximal, OperatorDescriptor};
use crate::params::{Diag, HyperParams, OmegaBounds, Role, Scalar};

use super::container::{Array, Container};
use super::PRNG_NAME;

/// Forward differences, `(n − 1) × n`.
pub fn forward_difference(n: usize) -> Matrix {
    let mut d = Matrix::zeros(n.saturating_sub(1), n);
    for i in 0..n.saturating_sub(1) {
        d[(i, i)] = -1.0;
        d[(i, i + 1)] = 1.0;
    }
    d
}

#[derive(Debug, Clone, PartialEq)]
pub struct SeparationInstance {
    pub background: Vec<Vector>,
    pub streaks: Vec<Vector>,
    /// `background + streaks`, entrywise.
    pub observed: Vec<Vector>,
    pub seed: u64,
}

/// Smooth backgrounds (a few low-frequency cosines around 0.5) plus
/// piecewise-constant streak pulses.
pub fn gen_separation(n: usize, batch: usize, seed: u64) -> Result<SeparationInstance> {
    if n < 8 {
        return Err(Error::InvalidArgument(format!("signal length {n} is below 8")));
    }
    let mut r = ChaCha20Rng::seed_from_u64(seed);
    let mut background = Vec::with_capacity(batch);
    let mut streaks = Vec::with_capacity(batch);
    let mut observed = Vec::with_capacity(batch);
    for _ in 0..batch {
        let waves: Vec<(f64, f64, f64)> = (0..3)
            .map(|_| (0.15 * r.random::<f64>(), r.random_range(1..=3) as f64, 2.0 * PI * r.random::<f64>()))
            .collect();
        let ub = Vector::from_fn(n, |i, _| {
            0.5 + waves.iter().map(|(a, f, p)| a * (2.0 * PI * f * i as f64 / n as f64 + p).cos()).sum::<f64>()
        });
        let mut ur = Vector::zeros(n);
        for _ in 0..3 {
            let len = r.random_range(2..=(n / 8).max(2));
            let start = r.random_range(0..n - len);
            let amp = 0.3 + 0.5 * r.random::<f64>();
            for i in start..start + len {
                ur[i] = amp;
            }
        }
        observed.push(&ub + &ur);
        background.push(ub);
        streaks.push(ur);
    }
    Ok(SeparationInstance { background, streaks, observed, seed })
}

impl SeparationInstance {
    pub fn n(&self) -> usize {
        self.observed.first().map_or(0, Vector::len)
    }

    pub fn to_container(&self) -> Container {
        let mut c = Container::default();
        c.set_attr("task", "separation");
        c.set_attr("prng", PRNG_NAME);
        c.set_attr("seed", self.seed);
        let n = self.n();
        let k = self.observed.len();
        let stack = |vs: &[Vector]| vs.iter().flat_map(|v| v.iter().copied()).collect::<Vec<_>>();
        c.arrays.insert("background".into(), Array { shape: vec![k, n], data: stack(&self.background) });
        c.arrays.insert("streaks".into(), Array { shape: vec![k, n], data: stack(&self.streaks) });
        c.arrays.insert("observed".into(), Array { shape: vec![k, n], data: stack(&self.observed) });
        c
    }

    pub fn from_container(c: &Container) -> Result<Self> {
        if c.attr("task")? != "separation" {
            return Err(Error::Format(format!("container holds a {} instance", c.attr("task")?)));
        }
        let rows = |name: &str| -> Result<Vec<Vector>> {
            let a = c.array(name)?;
            let [_, n] = a.shape[..] else {
                return Err(Error::Format(format!("{name} must be two-dimensional")));
            };
            if n == 0 {
                return Err(Error::Format(format!("{name} has empty rows")));
            }
            Ok(a.data.chunks(n).map(Vector::from_row_slice).collect())
        };
        let inst = Self {
            background: rows("background")?,
            streaks: rows("streaks")?,
            observed: rows("observed")?,
            seed: c.parse_attr("seed")?,
        };
        if inst.background.len() != inst.observed.len() || inst.streaks.len() != inst.observed.len() {
            return Err(Error::Format("batch sizes disagree".into()));
        }
        Ok(inst)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SeparationDefaults {
    pub beta: f64,
    pub rho: f64,
    pub kappa_b: f64,
    pub kappa_r: f64,
    pub beta_range: (f64, f64),
    pub rho_range: (f64, f64),
}

impl Default for SeparationDefaults {
    fn default() -> Self {
        Self { beta: 0.2, rho: 6.0, kappa_b: 0.01, kappa_r: 0.05, beta_range: (0.05, 0.5), rho_range: (5.0, 20.0) }
    }
}

#[derive(Debug, Clone)]
pub struct SeparationTask {
    pub op: AlmOp,
    pub omega: HyperParams,
    pub bounds: OmegaBounds,
    loss: LossDescriptor,
    n: usize,
}

const RHO_NAMES: [&str; 4] = ["rho_ub", "rho_ur", "rho_vb", "rho_vr"];

pub fn build_separation_operator(inst: &SeparationInstance, d: &SeparationDefaults) -> Result<SeparationTask> {
    let n = inst.n();
    let nd = n - 1;
    let primal = 3 * n + nd;
    let dual = n + nd;

    let mut a = Matrix::zeros(dual, primal);
    for i in 0..n {
        a[(i, i)] = 1.0;
        a[(i, 2 * n + i)] = -1.0;
    }
    a.view_mut((n, n), (nd, n)).copy_from(&forward_difference(n));
    for i in 0..nd {
        a[(n + i, 3 * n + i)] = -1.0;
    }
    let mut p = Matrix::zeros(primal, primal);
    for i in 0..n {
        p[(i, i)] = 1.0;
        p[(n + i, n + i)] = 1.0;
        p[(i, n + i)] = 1.0;
        p[(n + i, i)] = 1.0;
    }

    let mut omega = HyperParams::new();
    let beta = omega.push_scalar("beta", Role::Penalty, d.beta)?;
    let rhos = RHO_NAMES.map(|name| omega.push_scalar(name, Role::Penalty, d.rho));
    let kb = omega.push_scalar("kappa_b", Role::Threshold, d.kappa_b)?;
    let kr = omega.push_scalar("kappa_r", Role::Threshold, d.kappa_r)?;
    let [r_ub, r_ur, r_vb, r_vr] = rhos;
    let rho = Diag::broadcast(n, Scalar::learned(r_ub?))
        .then(Diag::broadcast(n, Scalar::learned(r_ur?)))
        .then(Diag::broadcast(n, Scalar::learned(r_vb?)))
        .then(Diag::broadcast(nd, Scalar::learned(r_vr?)));
    let weights = Diag::constant(2 * n, 0.0)
        .then(Diag::broadcast(n, Scalar::learned(kb)))
        .then(Diag::broadcast(nd, Scalar::learned(kr)));
    let op = AlmOp::new(
        Arc::new(a),
        Vector::zeros(dual),
        Some(Arc::new(p)),
        None,
        Some(weights),
        Scalar::learned(beta),
        AlmProximal::Linearized { rho },
    )?
    .with_blocks(
        &[("u_b", n), ("u_r", n), ("v_b", n), ("v_r", nd)],
        &[("lambda_b", n), ("lambda_r", nd)],
    )?;

    let mut bounds = OmegaBounds::for_params(&omega)
        .with(&omega, "beta", d.beta_range.0, d.beta_range.1)?
        .with(&omega, "kappa_b", 0.0, 1.0)?
        .with(&omega, "kappa_r", 0.0, 1.0)?;
    for name in RHO_NAMES {
        bounds.set(&omega, name, d.rho_range.0, d.rho_range.1)?;
    }
    // ‖P‖ = 2 for the data term.
    let worst = d.rho_range.0 - d.beta_range.1 * op.a_norm_sq() - 2.0;
    if !(worst > 0.0) {
        return Err(Error::Contract(format!(
            "Ω admits an indefinite metric: ρ_min − β_max‖A‖² − ‖P‖ = {worst}"
        )));
    }
    if !bounds.contains(omega.values()) {
        return Err(Error::InvalidOmega("separation parameters fall outside Ω".into()));
    }

    let loss = LossDescriptor::new(
        LossKind::SquaredError { readout: Readout::Prefix(2 * n), target: Vector::zeros(2 * n), scale: 1.0 },
        op.dim(),
    )?;
    Ok(SeparationTask { op, omega, bounds, loss, n })
}

impl SeparationTask {
    pub fn descriptor(&self, b: &Vector) -> Result<OperatorDescriptor> {
        let n = self.n;
        let mut q = Vector::zeros(self.op.primal_dim());
        q.rows_mut(0, n).copy_from(&-b);
        q.rows_mut(n, n).copy_from(&-b);
        let mut op = self.op.clone();
        op.set_q(Some(q))?;
        Ok(OperatorDescriptor::Alm(op))
    }

    /// `½‖(u_b, u_r) − (u_b*, u_r*)‖²`.
    pub fn loss(&self, background: &Vector, streaks: &Vector) -> Result<LossDescriptor> {
        let mut t = Vector::zeros(2 * self.n);
        t.rows_mut(0, self.n).copy_from(background);
        t.rows_mut(self.n, self.n).copy_from(streaks);
        self.loss.with_data(t)
    }

    pub fn samples(&self, inst: &SeparationInstance) -> Result<Vec<Sample>> {
        (0..inst.observed.len())
            .map(|i| {
                Ok(Sample::new(
                    self.descriptor(&inst.observed[i])?,
                    self.loss(&inst.background[i], &inst.streaks[i])?,
                ))
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn inst() -> SeparationInstance {
        gen_separation(16, 2, 9).unwrap()
    }

    #[test]
    fn layers_sum_exactly() {
        let s = inst();
        for i in 0..2 {
            assert_eq!(s.observed[i], &s.background[i] + &s.streaks[i]);
        }
        let back = SeparationInstance::from_container(&Container::decode(&s.to_container().encode()).unwrap()).unwrap();
        assert_eq!(back, s);
    }

    #[test]
    fn zero_observation_with_large_thresholds_is_fixed_at_zero() {
        let s = inst();
        let mut task = build_separation_operator(&s, &SeparationDefaults::default()).unwrap();
        task.omega.set_scalar("kappa_b", 1e6).unwrap();
        task.omega.set_scalar("kappa_r", 1e6).unwrap();
        let op = task.descriptor(&Vector::zeros(16)).unwrap();
        let z = Vector::zeros(op.dim());
        assert_eq!(op.apply(&z, &task.omega).unwrap(), z);
    }

    #[test]
    fn ground_truth_is_a_fixed_point_without_priors() {
        let s = inst();
        let d = SeparationDefaults { kappa_b: 0.0, kappa_r: 0.0, ..Default::default() };
        let task = build_separation_operator(&s, &d).unwrap();
        let op = task.descriptor(&s.observed[0]).unwrap();
        let n = 16;
        let mut state = Vector::zeros(op.dim());
        state.rows_mut(0, n).copy_from(&s.background[0]);
        state.rows_mut(n, n).copy_from(&s.streaks[0]);
        state.rows_mut(2 * n, n).copy_from(&s.background[0]);
        state.rows_mut(3 * n, n - 1).copy_from(&(forward_difference(n) * &s.streaks[0]));
        let out = op.apply(&state, &task.omega).unwrap();
        assert!((out - &state).norm() < 1e-8);
    }

    #[test]
    fn penalty_outside_omega_is_rejected() {
        let s = inst();
        let d = SeparationDefaults { beta: 0.6, ..Default::default() };
        assert!(matches!(build_separation_operator(&s, &d), Err(Error::InvalidOmega(_))));
        let d = SeparationDefaults { beta_range: (0.05, 2.0), ..Default::default() };
        assert!(matches!(build_separation_operator(&s, &d), Err(Error::Contract(_))));
    }
}
