//! The outer training loop over ω and the convergence diagnostics built on it.

use std::fmt::Write as _;
use std::sync::Arc;
use std::time::Instant;

#[cfg(feature = "parallel")]
use rayon::prelude::*;

use crate::error::{check_dim, Error, Result};
use crate::hypergrad::{
    hypergradient_with, inner_loop, run_inner, HypergradOptions, InnerRecord, InnerRun, LossDescriptor,
    PreparedMetric,
};
use crate::metric::{DomainDescriptor, MetricMatrix, Vector};
use crate::operators::OperatorDescriptor;
use crate::params::{HyperParams, OmegaBounds};

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum LrSchedule {
    Constant,
    /// `lr_t = γ · rate^{(t−1)/period}` for outer step `t ≥ 1`.
    ExpDecay { rate: f64, period: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum OuterOptimizer {
    /// Projected gradient descent.
    Gd,
    Adam { beta1: f64, beta2: f64, eps: f64 },
}

impl OuterOptimizer {
    pub fn adam() -> Self {
        OuterOptimizer::Adam { beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

#[derive(Debug, Clone)]
pub struct BmoConfig {
    /// Averaging weight of `T = (1 − α)I + αD`.
    pub alpha: f64,
    /// Weight of the upper-level gradient step in the inner loop.
    pub mu: f64,
    /// Base inner step; `s_k = s/(k + 1)`.
    pub s: f64,
    /// Read `s` as a fraction of the step-size bound at the current ω.
    /// The bound is then treated as a constant when differentiating.
    pub s_relative: bool,
    /// Outer learning rate.
    pub gamma: f64,
    pub k: usize,
    pub t: usize,
    pub omega_bounds: Option<OmegaBounds>,
    pub seed: u64,
    pub lr_schedule: LrSchedule,
    pub optimizer: OuterOptimizer,
    /// Start each inner loop from the previous `u^K` instead of `u0`.
    pub warm_start: bool,
    /// Differentiate through `H_ω⁻¹` in the inner gradient step.
    pub metric_flow: bool,
    /// Metric for the recorded residuals; `H_ω` when absent.
    pub h_lb: Option<MetricMatrix>,
    /// `λ_min(H_lb)` for the step-size bound; derived from `h_lb` or `H_ω` when absent.
    pub h_lb_min_eig: Option<f64>,
    /// `None` means the full space.
    pub domain: Option<DomainDescriptor>,
    pub record_residuals: bool,
    /// Names of the ω slices the outer loop may change; all when `None`.
    pub trainable: Option<Vec<String>>,
    pub divergence_threshold: f64,
}

impl Default for BmoConfig {
    fn default() -> Self {
        Self {
            alpha: 0.5,
            mu: 0.5,
            s: 0.1,
            s_relative: false,
            gamma: 1e-2,
            k: 15,
            t: 10,
            omega_bounds: None,
            seed: 0,
            lr_schedule: LrSchedule::Constant,
            optimizer: OuterOptimizer::Gd,
            warm_start: false,
            metric_flow: true,
            h_lb: None,
            h_lb_min_eig: None,
            domain: None,
            record_residuals: true,
            trainable: None,
            divergence_threshold: 1e12,
        }
    }
}

impl BmoConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return Err(Error::Contract(format!("α = {} outside (0, 1)", self.alpha)));
        }
        if !(self.mu > 0.0 && self.mu < 1.0) {
            return Err(Error::Contract(format!("μ = {} outside (0, 1)", self.mu)));
        }
        if !(self.s > 0.0 && self.s.is_finite()) {
            return Err(Error::Contract(format!("s = {} must be positive", self.s)));
        }
        if self.s_relative && self.s >= 1.0 {
            return Err(Error::Contract(format!("relative step size {} must be below 1", self.s)));
        }
        if !(self.gamma >= 0.0 && self.gamma.is_finite()) {
            return Err(Error::Contract(format!("learning rate {} must be nonnegative", self.gamma)));
        }
        if let LrSchedule::ExpDecay { rate, period } = self.lr_schedule {
            if !(rate > 0.0 && period > 0.0) {
                return Err(Error::InvalidArgument("decay rate and period must be positive".into()));
            }
        }
        if !(self.divergence_threshold > 0.0) {
            return Err(Error::InvalidArgument("divergence threshold must be positive".into()));
        }
        Ok(())
    }

    /// Learning rate of outer step `t ≥ 1`.
    pub fn lr(&self, t: usize) -> f64 {
        match self.lr_schedule {
            LrSchedule::Constant => self.gamma,
            LrSchedule::ExpDecay { rate, period } => {
                self.gamma * rate.powf(t.saturating_sub(1) as f64 / period)
            }
        }
    }
}

/// One training example: the operator (which carries the example's data),
/// its loss and the inner starting point.
#[derive(Debug, Clone)]
pub struct Sample {
    pub op: OperatorDescriptor,
    pub loss: LossDescriptor,
    pub u0: Vector,
}

impl Sample {
    pub fn new(op: OperatorDescriptor, loss: LossDescriptor) -> Self {
        let u0 = Vector::zeros(op.dim());
        Self { op, loss, u0 }
    }
}

/// Inner record aggregated over a batch.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BatchInnerRecord {
    pub k: usize,
    /// Mean over samples.
    pub residual: Option<f64>,
    /// `‖U^k − U^{k−1}‖_F / ‖U^{k−1}‖_F` over the stacked batch.
    pub rel_step: Option<f64>,
    /// Sum over samples.
    pub loss: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OuterRecord {
    pub t: usize,
    pub phi_k: f64,
    pub grad_norm: f64,
    pub omega_hash: u64,
}

/// Inner rows of every outer step plus one outer row per evaluated ω.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Trajectory {
    pub inner: Vec<(usize, BatchInnerRecord)>,
    pub outer: Vec<OuterRecord>,
}

pub const TRAJECTORY_HEADER: &str = "phase,t,k,residual_hlb_sq,rel_step,loss,grad_norm";

fn opt(x: Option<f64>) -> String {
    x.map(|v| v.to_string()).unwrap_or_default()
}

impl Trajectory {
    pub fn inner_at(&self, t: usize) -> Vec<BatchInnerRecord> {
        self.inner.iter().filter(|(tt, _)| *tt == t).map(|(_, r)| *r).collect()
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::new();
        out.push_str(TRAJECTORY_HEADER);
        out.push('\n');
        let mut inner = self.inner.iter().peekable();
        for o in &self.outer {
            while let Some((t, r)) = inner.peek() {
                if *t > o.t {
                    break;
                }
                let _ = writeln!(out, "inner,{t},{},{},{},{},", r.k, opt(r.residual), opt(r.rel_step), r.loss);
                inner.next();
            }
            let _ = writeln!(out, "outer,{},,,,{},{}", o.t, o.phi_k, o.grad_norm);
        }
        for (t, r) in inner {
            let _ = writeln!(out, "inner,{t},{},{},{},{},", r.k, opt(r.residual), opt(r.rel_step), r.loss);
        }
        out
    }

    pub fn write_csv(&self, path: &std::path::Path) -> Result<()> {
        std::fs::write(path, self.to_csv())?;
        Ok(())
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct PhaseTimings {
    pub inner_s: f64,
    pub reverse_s: f64,
    pub update_s: f64,
}

#[derive(Debug, Clone)]
pub struct TrainReport {
    pub omega: HyperParams,
    /// `u^K` of every sample at the final ω.
    pub u_k: Vec<Vector>,
    pub trajectory: Trajectory,
    /// Envelope constant fitted on the final inner run, when it is long enough.
    pub envelope_c: Option<f64>,
    pub timings: PhaseTimings,
}

impl TrainReport {
    pub fn final_record(&self) -> Option<&OuterRecord> {
        self.trajectory.outer.last()
    }

    /// `key = value` lines; ω slices as `omega.<name> = v1,v2,...`.
    pub fn to_kv(&self) -> String {
        let mut out = String::new();
        if let Some(last) = self.final_record() {
            let _ = writeln!(out, "outer_steps = {}", last.t);
            let _ = writeln!(out, "final_phi_k = {}", last.phi_k);
            let _ = writeln!(out, "final_grad_norm = {}", last.grad_norm);
            let _ = writeln!(out, "omega_hash = {:016x}", last.omega_hash);
        }
        if let Some(c) = self.envelope_c {
            let _ = writeln!(out, "envelope_c = {c}");
        }
        let _ = writeln!(out, "time.inner_s = {:.3}", self.timings.inner_s);
        let _ = writeln!(out, "time.reverse_s = {:.3}", self.timings.reverse_s);
        let _ = writeln!(out, "time.update_s = {:.3}", self.timings.update_s);
        out.push_str(&omega_to_kv(&self.omega));
        out
    }
}

pub fn omega_to_kv(omega: &HyperParams) -> String {
    let mut out = String::new();
    for s in omega.layout() {
        let vals: Vec<String> = omega.values()[s.range()].iter().map(|v| v.to_string()).collect();
        let _ = writeln!(out, "omega.{} = {}", s.name, vals.join(","));
    }
    out
}

/// Reads `omega.<name> = ...` lines into a copy of `template`.
pub fn omega_from_kv(text: &str, template: &HyperParams) -> Result<HyperParams> {
    let mut out = template.clone();
    let mut seen = 0;
    for (lineno, line) in text.lines().enumerate() {
        let Some((key, value)) = line.split_once('=') else { continue };
        let Some(name) = key.trim().strip_prefix("omega.") else { continue };
        let parsed = value
            .split(',')
            .map(|v| v.trim().parse::<f64>())
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|e| Error::Format(format!("line {}: {e}", lineno + 1)))?;
        let slot = out.get_mut(name)?;
        if slot.len() != parsed.len() {
            return Err(Error::Format(format!(
                "line {}: slice {name} expects {} values, got {}",
                lineno + 1,
                slot.len(),
                parsed.len()
            )));
        }
        slot.copy_from_slice(&parsed);
        seen += 1;
    }
    if seen != template.layout().len() {
        return Err(Error::Format(format!("report lists {seen} of {} ω slices", template.layout().len())));
    }
    Ok(out)
}

struct SampleResult {
    phi: f64,
    grad: Vec<f64>,
    u_k: Vector,
    records: Vec<InnerRecord>,
    inner_s: f64,
    reverse_s: f64,
}

fn shared_metric(samples: &[Sample], omega: &HyperParams) -> Result<Arc<PreparedMetric>> {
    Ok(Arc::new(PreparedMetric::new(&samples[0].op, omega)?))
}

fn with_t<T>(r: Result<T>, t: usize) -> Result<T> {
    r.map_err(|e| match e {
        Error::Divergence { k, .. } => Error::Divergence { t, k },
        other => other,
    })
}

fn run_sample(
    sample: &Sample,
    u0: &Vector,
    omega: &HyperParams,
    cfg: &BmoConfig,
    metric: &Arc<PreparedMetric>,
    opts: &HypergradOptions,
) -> Result<SampleResult> {
    let t0 = Instant::now();
    let run = inner_loop(&sample.op, &sample.loss, omega, cfg, u0, Some(metric.clone()))?;
    let t1 = Instant::now();
    let grad = hypergradient_with(&run.tape, &sample.loss, omega, opts)?;
    let t2 = Instant::now();
    Ok(SampleResult {
        phi: run.tape.loss_value,
        grad,
        u_k: run.u_k,
        records: run.records,
        inner_s: (t1 - t0).as_secs_f64(),
        reverse_s: (t2 - t1).as_secs_f64(),
    })
}

/// `φ_K` and its hypergradient summed over a batch, in a fixed order.
pub struct BatchEval {
    pub phi: f64,
    pub grad: Vec<f64>,
    pub u_k: Vec<Vector>,
    pub records: Vec<BatchInnerRecord>,
    inner_s: f64,
    reverse_s: f64,
}

pub fn evaluate_batch(
    samples: &[Sample],
    starts: &[Vector],
    omega: &HyperParams,
    cfg: &BmoConfig,
    opts: &HypergradOptions,
) -> Result<BatchEval> {
    if samples.is_empty() {
        return Err(Error::InvalidArgument("empty batch".into()));
    }
    check_dim(samples.len(), starts.len())?;
    let metric = shared_metric(samples, omega)?;
    let work = |(s, u0): (&Sample, &Vector)| run_sample(s, u0, omega, cfg, &metric, opts);
    #[cfg(feature = "parallel")]
    let results: Vec<Result<SampleResult>> = samples.par_iter().zip(starts.par_iter()).map(work).collect();
    #[cfg(not(feature = "parallel"))]
    let results: Vec<Result<SampleResult>> = samples.iter().zip(starts.iter()).map(work).collect();

    let mut phi = 0.0;
    let mut grad = vec![0.0; omega.len()];
    let mut u_k = Vec::with_capacity(samples.len());
    let mut per_sample = Vec::with_capacity(samples.len());
    let (mut inner_s, mut reverse_s) = (0.0, 0.0);
    for r in results {
        let r = r?;
        phi += r.phi;
        for (a, b) in grad.iter_mut().zip(&r.grad) {
            *a += b;
        }
        u_k.push(r.u_k);
        per_sample.push(r.records);
        inner_s += r.inner_s;
        reverse_s += r.reverse_s;
    }
    let starts_norm: Vec<f64> = starts.iter().map(|u| u.norm_squared()).collect();
    Ok(BatchEval { phi, grad, u_k, records: aggregate(&per_sample, &starts_norm), inner_s, reverse_s })
}

/// Batch aggregation of per-sample inner records.
fn aggregate(per_sample: &[Vec<InnerRecord>], start_norm_sq: &[f64]) -> Vec<BatchInnerRecord> {
    let k_max = per_sample.iter().map(Vec::len).max().unwrap_or(0);
    let n = per_sample.len() as f64;
    let mut out = Vec::with_capacity(k_max);
    for i in 0..k_max {
        let mut res_sum = 0.0;
        let mut res_all = true;
        let mut step_sq = 0.0;
        let mut prev_sq = 0.0;
        let mut loss = 0.0;
        for (s, recs) in per_sample.iter().enumerate() {
            let r = &recs[i];
            match r.residual {
                Some(x) => res_sum += x,
                None => res_all = false,
            }
            step_sq += r.step_norm_sq;
            prev_sq += if i == 0 { start_norm_sq[s] } else { recs[i - 1].norm_sq };
            loss += r.loss;
        }
        out.push(BatchInnerRecord {
            k: per_sample[0][i].k,
            residual: res_all.then_some(res_sum / n),
            rel_step: (prev_sq > 0.0).then(|| (step_sq / prev_sq).sqrt()),
            loss,
        });
    }
    out
}

fn gradient_mapping(omega: &[f64], grad: &[f64], lr: f64, bounds: &OmegaBounds) -> f64 {
    if lr == 0.0 {
        return grad.iter().map(|g| g * g).sum::<f64>().sqrt();
    }
    omega
        .iter()
        .zip(grad)
        .enumerate()
        .map(|(i, (w, g))| {
            let moved = (w - lr * g).clamp(bounds.lower[i], bounds.upper[i]);
            ((w - moved) / lr).powi(2)
        })
        .sum::<f64>()
        .sqrt()
}

/// Trains ω on a single example starting from `u0 = 0`.
pub fn train(op: &OperatorDescriptor, loss: &LossDescriptor, omega0: &HyperParams, cfg: &BmoConfig) -> Result<TrainReport> {
    train_batch(&[Sample::new(op.clone(), loss.clone())], omega0, cfg)
}

/// Projected (clamped) gradient descent on `Σ_i φ_K^i(ω)`, re-certifying the
/// operator after every update.
pub fn train_batch(samples: &[Sample], omega0: &HyperParams, cfg: &BmoConfig) -> Result<TrainReport> {
    cfg.validate()?;
    omega0.validate()?;
    if samples.is_empty() {
        return Err(Error::InvalidArgument("empty batch".into()));
    }
    let bounds = cfg.omega_bounds.clone().unwrap_or_else(|| OmegaBounds::for_params(omega0));
    check_dim(omega0.len(), bounds.len())?;
    if !bounds.contains(omega0.values()) {
        return Err(Error::InvalidOmega("initial ω lies outside Ω".into()));
    }
    let mask = match &cfg.trainable {
        Some(names) => omega0.mask_for(names)?,
        None => vec![true; omega0.len()],
    };
    let opts = HypergradOptions { metric_flow: Some(cfg.metric_flow), ..Default::default() };

    let mut omega = omega0.clone();
    let mut starts: Vec<Vector> = samples.iter().map(|s| s.u0.clone()).collect();
    let mut traj = Trajectory::default();
    let mut timings = PhaseTimings::default();
    let mut adam_m = vec![0.0; omega.len()];
    let mut adam_v = vec![0.0; omega.len()];
    let mut last_eval = None;

    for t in 0..=cfg.t {
        let eval = with_t(evaluate_batch(samples, &starts, &omega, cfg, &opts), t)?;
        timings.inner_s += eval.inner_s;
        timings.reverse_s += eval.reverse_s;
        let mut grad = eval.grad.clone();
        for (g, m) in grad.iter_mut().zip(&mask) {
            if !m {
                *g = 0.0;
            }
        }
        let lr = cfg.lr(t + 1);
        let grad_norm = gradient_mapping(omega.values(), &grad, lr, &bounds);
        if !eval.phi.is_finite() || eval.phi.abs() > cfg.divergence_threshold || !grad_norm.is_finite() {
            return Err(Error::Divergence { t, k: cfg.k });
        }
        for r in &eval.records {
            traj.inner.push((t, *r));
        }
        traj.outer.push(OuterRecord { t, phi_k: eval.phi, grad_norm, omega_hash: omega.value_hash() });

        if t == cfg.t {
            last_eval = Some(eval);
            break;
        }
        let u0 = Instant::now();
        match cfg.optimizer {
            OuterOptimizer::Gd => {
                for (w, g) in omega.values_mut().iter_mut().zip(&grad) {
                    *w -= lr * g;
                }
            }
            OuterOptimizer::Adam { beta1, beta2, eps } => {
                let step = (t + 1) as i32;
                for i in 0..grad.len() {
                    if !mask[i] {
                        continue;
                    }
                    adam_m[i] = beta1 * adam_m[i] + (1.0 - beta1) * grad[i];
                    adam_v[i] = beta2 * adam_v[i] + (1.0 - beta2) * grad[i] * grad[i];
                    let mh = adam_m[i] / (1.0 - beta1.powi(step));
                    let vh = adam_v[i] / (1.0 - beta2.powi(step));
                    omega.values_mut()[i] -= lr * mh / (vh.sqrt() + eps);
                }
            }
        }
        bounds.clamp(omega.values_mut());
        for s in samples {
            s.op.certify(&mut omega)?;
        }
        if !bounds.contains(omega.values()) {
            return Err(Error::InvalidOmega(format!(
                "certifying the operator moved ω outside Ω at outer step {}",
                t + 1
            )));
        }
        if cfg.warm_start {
            starts = eval.u_k;
        }
        timings.update_s += u0.elapsed().as_secs_f64();
    }

    let eval = last_eval.expect("loop always evaluates the final ω");
    let final_inner = traj.inner_at(cfg.t);
    let envelope_c = if final_inner.len() >= 16 {
        let res: Option<Vec<(usize, f64)>> = final_inner.iter().map(|r| r.residual.map(|x| (r.k, x))).collect();
        res.and_then(|r| residual_envelope_check(&r).ok()).map(|e| e.c_fit)
    } else {
        None
    };
    Ok(TrainReport { omega, u_k: eval.u_k, trajectory: traj, envelope_c, timings })
}

/// `φ_K(ω)` from `u0 = 0`.
pub fn evaluate_phi_k(op: &OperatorDescriptor, loss: &LossDescriptor, omega: &HyperParams, cfg: &BmoConfig) -> Result<f64> {
    let u0 = Vector::zeros(op.dim());
    Ok(inner_loop(op, loss, omega, cfg, &u0, None)?.tape.loss_value)
}

/// `Σ_i φ_K^i(ω)` over a batch, without the reverse sweep.
pub fn evaluate_phi_k_batch(samples: &[Sample], omega: &HyperParams, cfg: &BmoConfig) -> Result<f64> {
    if samples.is_empty() {
        return Ok(0.0);
    }
    let metric = shared_metric(samples, omega)?;
    let work = |s: &Sample| -> Result<f64> {
        Ok(inner_loop(&s.op, &s.loss, omega, cfg, &s.u0, Some(metric.clone()))?.tape.loss_value)
    };
    #[cfg(feature = "parallel")]
    let vals: Vec<Result<f64>> = samples.par_iter().map(work).collect();
    #[cfg(not(feature = "parallel"))]
    let vals: Vec<Result<f64>> = samples.iter().map(work).collect();
    let mut total = 0.0;
    for v in vals {
        total += v?;
    }
    Ok(total)
}

/// `√((1 + ln(1 + k)) / k^{1/4})`.
pub fn envelope(k: usize) -> f64 {
    let k = k as f64;
    ((1.0 + (1.0 + k).ln()) / k.powf(0.25)).sqrt()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EnvelopeCheck {
    /// `max_{k ≥ 2} residual_k / envelope(k)` over the whole record.
    pub c_fit: f64,
    /// Constant fitted on the first part only.
    pub c_head: f64,
    /// Records after the fitted part that exceed `c_head · envelope(k)`.
    pub violations: usize,
    pub checked: usize,
}

/// Fits the envelope constant on the first half of `(k, residual)` records and
/// counts violations in the second half.
pub fn residual_envelope_check(records: &[(usize, f64)]) -> Result<EnvelopeCheck> {
    if records.len() < 16 {
        return Err(Error::InvalidArgument(format!(
            "envelope check needs at least 16 inner records, got {}",
            records.len()
        )));
    }
    let split = records[records.len() / 2 - 1].0;
    residual_envelope_check_split(records, split)
}

/// As [`residual_envelope_check`], fitting on `k ≤ fit_until`.
pub fn residual_envelope_check_split(records: &[(usize, f64)], fit_until: usize) -> Result<EnvelopeCheck> {
    let ratio = |(k, r): &(usize, f64)| r / envelope(*k);
    let fit = |it: &mut dyn Iterator<Item = &(usize, f64)>| it.map(ratio).fold(0.0_f64, f64::max);
    let c_fit = fit(&mut records.iter().filter(|(k, _)| *k >= 2));
    let c_head = fit(&mut records.iter().filter(|(k, _)| *k >= 2 && *k <= fit_until));
    let tail: Vec<_> = records.iter().filter(|(k, _)| *k > fit_until).collect();
    let violations = tail.iter().filter(|(k, r)| !(*r <= c_head * envelope(*k))).count();
    Ok(EnvelopeCheck { c_fit, c_head, violations, checked: tail.len() })
}

#[derive(Debug, Clone, PartialEq)]
pub struct StationarityRow {
    pub k: usize,
    pub grad_norm: f64,
    /// `‖∇φ_K − ∇φ_{K_ref}‖`.
    pub gap_to_ref: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StationarityProbe {
    pub rows: Vec<StationarityRow>,
    pub k_ref: usize,
    pub ref_grad_norm: f64,
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Hypergradient norms `‖∇φ_K(ω)‖` for each K, plus the long-run proxy
/// `K_ref = 10 · max K`. Requires a contractive operator.
pub fn stationarity_probe(
    op: &OperatorDescriptor,
    loss: &LossDescriptor,
    omega: &HyperParams,
    cfg: &BmoConfig,
    k_list: &[usize],
) -> Result<StationarityProbe> {
    let lip = op.lipschitz_bound(omega)?;
    if !(lip < 1.0) {
        return Err(Error::Contract(format!(
            "stationarity probe needs a contractive operator, Lipschitz bound is {lip}"
        )));
    }
    let u0 = Vector::zeros(op.dim());
    let sample = Sample { op: op.clone(), loss: loss.clone(), u0: u0.clone() };
    let grad_at = |k: usize| -> Result<Vec<f64>> {
        let c = BmoConfig { k, record_residuals: false, ..cfg.clone() };
        let eval = evaluate_batch(std::slice::from_ref(&sample), std::slice::from_ref(&u0), omega, &c, &HypergradOptions {
            metric_flow: Some(cfg.metric_flow),
            ..Default::default()
        })?;
        Ok(eval.grad)
    };
    let k_ref = 10 * k_list.iter().copied().max().unwrap_or(1);
    let g_ref = grad_at(k_ref)?;
    let mut rows = Vec::with_capacity(k_list.len());
    for &k in k_list {
        let g = grad_at(k)?;
        let gap: Vec<f64> = g.iter().zip(&g_ref).map(|(a, b)| a - b).collect();
        rows.push(StationarityRow { k, grad_norm: norm(&g), gap_to_ref: norm(&gap) });
    }
    Ok(StationarityProbe { rows, k_ref, ref_grad_norm: norm(&g_ref) })
}

/// Runs the trained inner scheme for `k_total` steps (typically beyond the
/// trained K) and aggregates its records over the batch.
pub fn rollout(samples: &[Sample], omega: &HyperParams, cfg: &BmoConfig, k_total: usize) -> Result<Vec<BatchInnerRecord>> {
    if samples.is_empty() {
        return Ok(Vec::new());
    }
    let metric = shared_metric(samples, omega)?;
    let work = |s: &Sample| -> Result<Vec<InnerRecord>> {
        Ok(run_inner(&s.op, &s.loss, omega, cfg, &s.u0, Some(metric.clone()), cfg.mu, k_total)?.records)
    };
    #[cfg(feature = "parallel")]
    let res: Vec<Result<Vec<InnerRecord>>> = samples.par_iter().map(work).collect();
    #[cfg(not(feature = "parallel"))]
    let res: Vec<Result<Vec<InnerRecord>>> = samples.iter().map(work).collect();
    let per_sample = res.into_iter().collect::<Result<Vec<_>>>()?;
    let starts: Vec<f64> = samples.iter().map(|s| s.u0.norm_squared()).collect();
    Ok(aggregate(&per_sample, &starts))
}

/// Plain averaged iteration `u ← T(u)` (no upper-level step), for diagnostics.
pub fn plain_km<'a>(
    op: &'a OperatorDescriptor,
    loss: &LossDescriptor,
    omega: &HyperParams,
    cfg: &BmoConfig,
    u0: &Vector,
    k: usize,
) -> Result<InnerRun<'a>> {
    run_inner(op, loss, omega, cfg, u0, None, 0.0, k)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::hypergrad::LossDescriptor;
    use crate::metric::Matrix;
    use crate::operators::{push_layer, Activation, NetOp};

    fn half_net() -> (HyperParams, OperatorDescriptor) {
        let mut hp = HyperParams::new();
        let l = push_layer(&mut hp, "d", &Matrix::from_element(1, 1, 0.5), Some(&Vector::from_vec(vec![0.2]))).unwrap();
        let op = OperatorDescriptor::Net(NetOp::new(1, vec![l], Activation::Identity, 1.0).unwrap());
        (hp, op)
    }

    #[test]
    fn zero_outer_steps_keep_omega() {
        let (hp, op) = half_net();
        let loss = LossDescriptor::squared_error(Vector::from_vec(vec![1.0])).unwrap();
        let cfg = BmoConfig { t: 0, s: 0.5, ..BmoConfig::default() };
        let rep = train(&op, &loss, &hp, &cfg).unwrap();
        assert_eq!(rep.omega, hp);
        assert_eq!(rep.trajectory.outer.len(), 1);
    }

    #[test]
    fn zero_learning_rate_keeps_phi_constant() {
        let (hp, op) = half_net();
        let loss = LossDescriptor::squared_error(Vector::from_vec(vec![1.0])).unwrap();
        let cfg = BmoConfig { t: 4, gamma: 0.0, s: 0.5, ..BmoConfig::default() };
        let rep = train(&op, &loss, &hp, &cfg).unwrap();
        assert_eq!(rep.omega, hp);
        let phis: Vec<f64> = rep.trajectory.outer.iter().map(|o| o.phi_k).collect();
        assert!(phis.windows(2).all(|w| w[0] == w[1]));
    }

    #[test]
    fn phi_k_examples() {
        let mut hp = HyperParams::new();
        let l = push_layer(&mut hp, "d", &Matrix::identity(1, 1), None).unwrap();
        let op = OperatorDescriptor::Net(NetOp::new(1, vec![l], Activation::Identity, 1.0).unwrap());
        let loss = LossDescriptor::squared_error(Vector::zeros(1)).unwrap();
        let cfg = BmoConfig { k: 0, s: 0.5, ..BmoConfig::default() };
        assert_eq!(evaluate_phi_k(&op, &loss, &hp, &cfg).unwrap(), 0.0);

        let cfg = BmoConfig { k: 1, s: 0.5, alpha: 0.5, mu: 0.5, ..BmoConfig::default() };
        let u0 = Vector::from_vec(vec![1.0]);
        let run = inner_loop(&op, &loss, &hp, &cfg, &u0, None).unwrap();
        approx::assert_relative_eq!(run.tape.loss_value, 0.5 * 0.875 * 0.875, epsilon = 1e-15);
        assert_eq!(run.tape.loss_value, run.records.last().unwrap().loss);
    }

    #[test]
    fn envelope_examples() {
        let zeros: Vec<(usize, f64)> = (1..=40).map(|k| (k, 0.0)).collect();
        let e = residual_envelope_check(&zeros).unwrap();
        assert_eq!((e.c_fit, e.violations), (0.0, 0));

        let geometric: Vec<(usize, f64)> = (1..=40).map(|k| (k, 0.8f64.powi(k as i32))).collect();
        assert_eq!(residual_envelope_check(&geometric).unwrap().violations, 0);

        let linear: Vec<(usize, f64)> = (1..=40).map(|k| (k, k as f64)).collect();
        assert!(residual_envelope_check(&linear).unwrap().violations > 0);

        assert!(residual_envelope_check(&zeros[..10]).is_err());
    }

    #[test]
    fn csv_has_the_documented_header() {
        let (hp, op) = half_net();
        let loss = LossDescriptor::squared_error(Vector::from_vec(vec![1.0])).unwrap();
        let cfg = BmoConfig { t: 1, k: 2, s: 0.5, ..BmoConfig::default() };
        let csv = train(&op, &loss, &hp, &cfg).unwrap().trajectory.to_csv();
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0], TRAJECTORY_HEADER);
        assert!(lines[1].starts_with("inner,0,1,"));
        assert!(lines[3].starts_with("outer,0,,,,"));
        assert_eq!(lines.len(), 1 + 2 * 3);
    }

    #[test]
    fn report_round_trips_omega() {
        let (hp, op) = half_net();
        let loss = LossDescriptor::squared_error(Vector::from_vec(vec![1.0])).unwrap();
        let cfg = BmoConfig { t: 3, s: 0.5, ..BmoConfig::default() };
        let rep = train(&op, &loss, &hp, &cfg).unwrap();
        let back = omega_from_kv(&rep.to_kv(), &hp).unwrap();
        assert_eq!(back, rep.omega);
    }

    #[test]
    fn probe_rejects_non_contractive_operators() {
        let mut hp = HyperParams::new();
        let l = push_layer(&mut hp, "d", &Matrix::identity(1, 1), None).unwrap();
        let op = OperatorDescriptor::Net(NetOp::new(1, vec![l], Activation::Identity, 1.0).unwrap());
        let loss = LossDescriptor::squared_error(Vector::zeros(1)).unwrap();
        let cfg = BmoConfig { s: 0.5, ..BmoConfig::default() };
        assert!(matches!(stationarity_probe(&op, &loss, &hp, &cfg, &[5]), Err(Error::Contract(_))));
    }
}
