use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use gkm_core::bmo::{
    envelope, evaluate_batch, omega_from_kv, residual_envelope_check_split, rollout, train_batch, BatchInnerRecord,
    BmoConfig, Sample, TRAJECTORY_HEADER,
};
use gkm_core::hypergrad::{HypergradOptions, ReverseFault};
use gkm_core::params::HyperParams;
use gkm_core::tasks::Container;
use gkm_core::Error;

use crate::config::{ExperimentConfig, FdcheckConfig};
use crate::error::{read_artifact, CliError, CliResult};
use crate::fdcheck;
use crate::task::{generate, Task};

pub const INSTANCE_FILE: &str = "instance.bin";
pub const TRAJECTORY_FILE: &str = "trajectory.csv";
pub const REPORT_FILE: &str = "report.txt";
pub const DIAGNOSTICS_FILE: &str = "diagnostics.csv";
pub const METRICS_FILE: &str = "metrics.csv";

fn write(path: &Path, contents: impl AsRef<[u8]>) -> CliResult<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(Error::from)?;
    }
    std::fs::write(path, contents).map_err(Error::from)?;
    Ok(())
}

fn load_task(cfg: &ExperimentConfig, instance: &Path) -> CliResult<Task> {
    let bytes = read_artifact(instance)?;
    Task::load(cfg, &Container::decode(&bytes)?)
}

fn load_omega(task: &Task, report: &Path) -> CliResult<HyperParams> {
    let text = String::from_utf8(read_artifact(report)?)
        .map_err(|_| Error::Format(format!("{} is not UTF-8", report.display())))?;
    let omega = omega_from_kv(&text, task.omega0())?;
    omega.validate()?;
    Ok(omega)
}

pub fn cmd_gen(cfg: &ExperimentConfig) -> CliResult<PathBuf> {
    let c = generate(cfg)?;
    let path = cfg.out_dir.join(INSTANCE_FILE);
    write(&path, c.encode())?;
    println!("wrote {} ({} instance, seed {})", path.display(), cfg.task.name(), cfg.seed);
    for (name, a) in &c.arrays {
        println!("  {name}: {:?}", a.shape);
    }
    Ok(path)
}

pub fn cmd_train(cfg: &ExperimentConfig, instance: &Path) -> CliResult<()> {
    let task = load_task(cfg, instance)?;
    let bmo = task.bmo_config(&cfg.bmo);
    let report = train_batch(&task.samples()?, task.omega0(), &bmo)?;
    report.trajectory.write_csv(&cfg.out_dir.join(TRAJECTORY_FILE))?;
    let mut text = format!("task = {}\nseed = {}\n", cfg.task.name(), cfg.seed);
    text.push_str(&report.to_kv());
    write(&cfg.out_dir.join(REPORT_FILE), &text)?;
    if let Some(last) = report.final_record() {
        println!("trained {} outer steps: phi_K = {:.6e}, grad_norm = {:.3e}", last.t, last.phi_k, last.grad_norm);
    }
    println!("wrote {} and {}", TRAJECTORY_FILE, REPORT_FILE);
    Ok(())
}

pub fn cmd_eval(cfg: &ExperimentConfig, instance: &Path, report: &Path) -> CliResult<()> {
    let task = load_task(cfg, instance)?;
    let omega = load_omega(&task, report)?;
    let bmo = task.bmo_config(&cfg.bmo);
    let baseline_cfg = BmoConfig { trainable: Some(task.baseline_trainable()), ..bmo.clone() };
    let baseline = train_batch(&task.samples()?, task.omega0(), &baseline_cfg)?;

    let held = cfg.instance.held_out;
    let ours = task.metrics(&omega, &bmo, held)?;
    let theirs = task.metrics(&baseline.omega, &bmo, held)?;
    let mut csv = String::from("method,metric,value\n");
    println!("{:<20} {:>14} {:>14}", "metric", "bmo", "baseline");
    for ((name, a), (_, b)) in ours.iter().zip(&theirs) {
        let _ = writeln!(csv, "bmo,{name},{a}");
        let _ = writeln!(csv, "baseline,{name},{b}");
        println!("{name:<20} {a:>14.6} {b:>14.6}");
    }
    write(&cfg.out_dir.join(METRICS_FILE), csv)?;
    Ok(())
}

fn inner_rows(out: &mut String, phase: &str, recs: &[BatchInnerRecord]) {
    let opt = |x: Option<f64>| x.map(|v| v.to_string()).unwrap_or_default();
    for r in recs {
        let _ = writeln!(out, "{phase},0,{},{},{},{},", r.k, opt(r.residual), opt(r.rel_step), r.loss);
    }
}

/// Envelope fit on `k ≤ fit_until`; returns (C, violations, checked).
fn envelope_rows(out: &mut String, phase: &str, recs: &[BatchInnerRecord], fit_until: usize) -> CliResult<(f64, usize, usize)> {
    let pts: Vec<(usize, f64)> = recs.iter().filter_map(|r| r.residual.map(|x| (r.k, x))).collect();
    let e = residual_envelope_check_split(&pts, fit_until)?;
    for &(k, _) in pts.iter().filter(|(k, _)| *k >= 2) {
        let _ = writeln!(out, "{phase},0,{k},{},,,", e.c_head * envelope(k));
    }
    Ok((e.c_head, e.violations, e.checked))
}

pub fn cmd_diagnose(cfg: &ExperimentConfig, instance: &Path, report: &Path) -> CliResult<()> {
    let task = load_task(cfg, instance)?;
    let omega = if report.exists() {
        println!("using trained ω from {}", report.display());
        load_omega(&task, report)?
    } else {
        println!("no report at {}; using default ω", report.display());
        task.omega0().clone()
    };
    let bmo = BmoConfig { record_residuals: true, ..task.bmo_config(&cfg.bmo) };
    let k = bmo.k;
    let k_total = cfg.diagnose.rollout_factor.max(1) * k;
    let samples = task.samples()?;

    let mut csv = format!("{TRAJECTORY_HEADER}\n");
    let recs = rollout(&samples, &omega, &bmo, k_total)?;
    inner_rows(&mut csv, "rollout", &recs);
    let (c, v, checked) = envelope_rows(&mut csv, "envelope", &recs, k)?;
    println!("rollout to k = {k_total}: envelope C = {c:.4e}, {v}/{checked} violations beyond k = {k}");

    let mut ks: Vec<usize> = std::iter::successors(Some(1usize), |x| Some(x * 2)).take_while(|x| *x <= k_total).collect();
    ks.push(k);
    ks.sort_unstable();
    ks.dedup();
    let starts: Vec<_> = samples.iter().map(|s| s.u0.clone()).collect();
    let opts = HypergradOptions { metric_flow: Some(bmo.metric_flow), ..Default::default() };
    for kk in ks {
        let c = BmoConfig { k: kk, record_residuals: false, ..bmo.clone() };
        let eval = evaluate_batch(&samples, &starts, &omega, &c, &opts)?;
        let g = eval.grad.iter().map(|x| x * x).sum::<f64>().sqrt();
        let _ = writeln!(csv, "gradient,0,{kk},,,{},{g}", eval.phi);
        println!("K = {kk:>4}: phi_K = {:.6e}, ‖∇φ_K‖ = {g:.3e}", eval.phi);
    }

    match task.ablation(cfg)? {
        Some((raw, raw_omega)) => ablation(&mut csv, &raw, &raw_omega, &bmo, k_total, k)?,
        None => println!("ablation: not applicable, the operator has no learned network"),
    }
    write(&cfg.out_dir.join(DIAGNOSTICS_FILE), csv)?;
    println!("wrote {DIAGNOSTICS_FILE}");
    Ok(())
}

fn ablation(csv: &mut String, samples: &[Sample], omega: &HyperParams, bmo: &BmoConfig, k_total: usize, k: usize) -> CliResult<()> {
    match rollout(samples, omega, bmo, k_total) {
        Ok(recs) => {
            inner_rows(csv, "ablation", &recs);
            let (c, v, checked) = envelope_rows(csv, "ablation_envelope", &recs, k)?;
            let verdict = if v > 0 { "flagged" } else { "not flagged" };
            println!("ablation (normalization off): {verdict}, C = {c:.4e}, {v}/{checked} envelope violations");
        }
        Err(Error::Divergence { k, .. }) => {
            let _ = writeln!(csv, "ablation_divergence,0,{k},,,,");
            println!("ablation (normalization off): flagged, diverged at k = {k}");
        }
        Err(e) => return Err(e.into()),
    }
    Ok(())
}

pub fn cmd_fdcheck(cfg: &FdcheckConfig, seed: u64, inject_fault: bool) -> CliResult<()> {
    let fault = inject_fault.then_some(ReverseFault::AveragingWeight);
    let rows = fdcheck::run(cfg, seed, fault)?;
    if rows.is_empty() {
        eprintln!("warning: empty suite, nothing checked");
        return Ok(());
    }
    println!("instance,kind,k,dim_omega,rel_error,status");
    let mut failed = 0;
    for r in &rows {
        let ok = r.rel_error <= cfg.tol;
        failed += usize::from(!ok);
        println!("{},{},{},{},{:.3e},{}", r.instance, r.kind, r.k, r.dim_omega, r.rel_error, if ok { "pass" } else { "FAIL" });
    }
    if failed > 0 {
        return Err(CliError::Check(format!("{failed} of {} instances exceed relative error {}", rows.len(), cfg.tol)));
    }
    println!("all {} instances within {}", rows.len(), cfg.tol);
    Ok(())
}
