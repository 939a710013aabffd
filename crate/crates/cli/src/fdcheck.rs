//! Finite-difference validation of the reverse pass on a family of smooth toys.

use std::sync::Arc;

use gkm_core::bmo::BmoConfig;
use gkm_core::hypergrad::{
    fd_hypergradient, hypergradient_with, inner_loop, relative_error, step_size_bound, HypergradOptions,
    LossDescriptor, PreparedMetric, ReverseFault,
};
use gkm_core::operators::{push_layer, Activation, NetOp, OperatorDescriptor, PgOp};
use gkm_core::params::{Diag, HyperParams, Role, Scalar};
use gkm_core::{Matrix, Result, Vector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rand_distr::StandardNormal;

use crate::config::FdcheckConfig;

#[derive(Debug, Clone, PartialEq)]
pub struct FdRow {
    pub instance: usize,
    pub kind: &'static str,
    pub k: usize,
    pub dim_omega: usize,
    pub rel_error: f64,
}

fn normal_mat(r: &mut ChaCha20Rng, rows: usize, cols: usize) -> Matrix {
    Matrix::from_fn(rows, cols, |_, _| r.sample(StandardNormal))
}

fn normal_vec(r: &mut ChaCha20Rng, n: usize) -> Vector {
    Vector::from_fn(n, |_, _| r.sample(StandardNormal))
}

fn scaled(m: Matrix, sigma: f64) -> Matrix {
    let s = m.clone().svd(false, false).singular_values.max();
    m * (sigma / s)
}

/// Smooth PG: quadratic data term, learned step and diagonal metric, no ℓ1.
fn smooth_pg(r: &mut ChaCha20Rng, omega: &mut HyperParams, n: usize) -> Result<(PgOp, Diag)> {
    let b = normal_mat(r, n, n) / (n as f64).sqrt();
    let p = b.transpose() * b;
    let lf = p.clone().symmetric_eigen().eigenvalues.max().max(1e-3);
    let g_vals: Vec<f64> = (0..n).map(|_| 0.5 + 1.5 * r.random::<f64>()).collect();
    let gmin = g_vals.iter().copied().fold(f64::INFINITY, f64::min);
    let gamma = omega.push_scalar("pg.gamma", Role::StepSize, (0.1 + 1.7 * r.random::<f64>()) * gmin / lf)?;
    let g = Diag::learned(omega.push("pg.g", Role::MetricDiagonal, &[n], &g_vals)?);
    let op = PgOp::new(n, Some(Arc::new(p)), Some(normal_vec(r, n)), Scalar::learned(gamma), g.clone(), None)?;
    Ok((op, g))
}

fn instance(r: &mut ChaCha20Rng, i: usize) -> Result<(&'static str, OperatorDescriptor, HyperParams)> {
    let mut omega = HyperParams::new();
    Ok(match i % 3 {
        0 => {
            let l0 = push_layer(&mut omega, "net.0", &scaled(normal_mat(r, 2, 2), 0.8), None)?;
            let l1 = push_layer(&mut omega, "net.1", &scaled(normal_mat(r, 2, 2), 0.8), Some(&normal_vec(r, 2)))?;
            ("net", OperatorDescriptor::Net(NetOp::new(2, vec![l0, l1], Activation::Tanh, 1.0)?), omega)
        }
        1 => {
            let (pg, _) = smooth_pg(r, &mut omega, 4)?;
            ("pg", OperatorDescriptor::Pg(pg), omega)
        }
        _ => {
            let (pg, g) = smooth_pg(r, &mut omega, 2)?;
            let l = push_layer(&mut omega, "net.0", &scaled(normal_mat(r, 2, 2), 0.7), None)?;
            let net = NetOp::new(2, vec![l], Activation::Identity, 1.0)?.with_conjugation(g)?;
            net.normalize(&mut omega)?;
            let op = OperatorDescriptor::Composite(vec![OperatorDescriptor::Pg(pg), OperatorDescriptor::Net(net)]);
            ("composite", op, omega)
        }
    })
}

/// Compares the reverse pass (optionally corrupted) with central differences
/// on `cfg.instances` random smooth toys.
pub fn run(cfg: &FdcheckConfig, seed: u64, fault: Option<ReverseFault>) -> Result<Vec<FdRow>> {
    let mut r = ChaCha20Rng::seed_from_u64(seed);
    let mut rows = Vec::with_capacity(cfg.instances);
    for i in 0..cfg.instances {
        let (kind, op, omega) = instance(&mut r, i)?;
        let n = op.dim();
        let loss = LossDescriptor::squared_error(normal_vec(&mut r, n))?;
        let base = BmoConfig {
            alpha: 0.2 + 0.6 * r.random::<f64>(),
            mu: 0.2 + 0.6 * r.random::<f64>(),
            k: r.random_range(1..=cfg.k_max.max(1)),
            ..BmoConfig::default()
        };
        let metric = PreparedMetric::new(&op, &omega)?;
        let bmo = BmoConfig { s: 0.5 * step_size_bound(&base, &metric, &loss)?, ..base };
        let u0 = normal_vec(&mut r, n) * 0.5;
        let run = inner_loop(&op, &loss, &omega, &bmo, &u0, None)?;
        let grad = hypergradient_with(&run.tape, &loss, &omega, &HypergradOptions { fault, ..Default::default() })?;
        let fd = fd_hypergradient(&op, &loss, &omega, &bmo, &u0, cfg.h)?;
        rows.push(FdRow { instance: i, kind, k: bmo.k, dim_omega: omega.len(), rel_error: relative_error(&grad, &fd) });
    }
    Ok(rows)
}
