#![allow(dead_code)]

use std::sync::Arc;

use gkm_core::metric::{h_norm, spectral_norm_estimate, Matrix, MetricMatrix, Vector};
use gkm_core::operators::{
    push_layer, Activation, AlmOp, AlmProximal, DladmmOp, DladmmParams, NetOp, OperatorDescriptor, PgOp,
};
use gkm_core::params::{Diag, HyperParams, Role, Scalar};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

pub use rand::SeedableRng;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Variant {
    Pg,
    AlmExact,
    AlmLinearized,
    Dladmm,
    Net,
    Composite,
}

pub const ALL_VARIANTS: [Variant; 6] =
    [Variant::Pg, Variant::AlmExact, Variant::AlmLinearized, Variant::Dladmm, Variant::Net, Variant::Composite];

pub struct Case {
    pub op: OperatorDescriptor,
    pub omega: HyperParams,
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn normal_vec(r: &mut ChaCha8Rng, n: usize) -> Vector {
    Vector::from_fn(n, |_, _| r.sample(StandardNormal))
}

pub fn normal_mat(r: &mut ChaCha8Rng, rows: usize, cols: usize) -> Matrix {
    Matrix::from_fn(rows, cols, |_, _| r.sample(StandardNormal))
}

fn uniform(r: &mut ChaCha8Rng, lo: f64, hi: f64) -> f64 {
    lo + (hi - lo) * r.random::<f64>()
}

fn psd(r: &mut ChaCha8Rng, n: usize) -> Matrix {
    let b = normal_mat(r, n, n) / (n as f64).sqrt();
    b.transpose() * b
}

/// Matrix rescaled to spectral norm `sigma`.
pub fn with_norm(m: Matrix, sigma: f64) -> Matrix {
    let s = m.clone().svd(false, false).singular_values.max();
    m * (sigma / s)
}

fn pg(r: &mut ChaCha8Rng, omega: &mut HyperParams, n: usize, smooth: bool) -> (PgOp, Diag) {
    let p = Arc::new(psd(r, n));
    let lf = spectral_norm_estimate(&p, 1e-10).unwrap();
    let g_vals: Vec<f64> = (0..n).map(|_| uniform(r, 0.5, 2.0)).collect();
    let gmin = g_vals.iter().copied().fold(f64::INFINITY, f64::min);
    let gamma = omega.push_scalar("pg.gamma", Role::StepSize, uniform(r, 0.05, 1.9) * gmin / lf).unwrap();
    let g = Diag::learned(omega.push("pg.g", Role::MetricDiagonal, &[n], &g_vals).unwrap());
    let weights = if smooth {
        None
    } else {
        let w: Vec<f64> = (0..n).map(|_| uniform(r, 0.0, 0.5)).collect();
        Some(Diag::learned(omega.push("pg.w", Role::Threshold, &[n], &w).unwrap()))
    };
    let op = PgOp::new(n, Some(p), Some(normal_vec(r, n)), Scalar::learned(gamma), g.clone(), weights).unwrap();
    (op, g)
}

fn net(
    r: &mut ChaCha8Rng,
    omega: &mut HyperParams,
    n: usize,
    hidden: Option<usize>,
    activation: Activation,
    sigma: f64,
    bias: bool,
) -> NetOp {
    let widths: Vec<usize> = match hidden {
        Some(h) => vec![n, h, n],
        None => vec![n, n],
    };
    let mut layers = Vec::new();
    for (i, w) in widths.windows(2).enumerate() {
        let m = with_norm(normal_mat(r, w[1], w[0]), sigma);
        let b = bias.then(|| normal_vec(r, w[1]) * 0.3);
        layers.push(push_layer(omega, &format!("net.{i}"), &m, b.as_ref()).unwrap());
    }
    NetOp::new(n, layers, activation, 1.0).unwrap()
}

/// A random operator of the given variant with a random valid ω. `smooth`
/// removes every nonsmooth piece so that finite differences apply.
pub fn random_case(v: Variant, r: &mut ChaCha8Rng, smooth: bool) -> Case {
    let mut omega = HyperParams::new();
    let op = match v {
        Variant::Pg => OperatorDescriptor::Pg(pg(r, &mut omega, if smooth { 4 } else { 6 }, smooth).0),
        Variant::AlmExact => {
            let n = if smooth { 3 } else { 6 };
            let m = if smooth { 1 } else { 3 };
            let beta = omega.push_scalar("beta", Role::Penalty, uniform(r, 0.1, 2.0)).unwrap();
            let g_vals: Vec<f64> = (0..n).map(|_| uniform(r, 0.2, 2.0)).collect();
            let g = Diag::learned(omega.push("g", Role::MetricDiagonal, &[n], &g_vals).unwrap());
            if smooth {
                let a = Arc::new(normal_mat(r, m, n));
                let p = Arc::new(psd(r, n));
                let op = AlmOp::new(a, normal_vec(r, m), Some(p), Some(normal_vec(r, n)), None, Scalar::learned(beta), AlmProximal::Exact { g })
                    .unwrap();
                OperatorDescriptor::Alm(op)
            } else {
                let mut a = Matrix::zeros(m, n);
                for i in 0..m {
                    a[(i, i)] = uniform(r, 0.5, 1.5);
                }
                let p = Arc::new(Matrix::from_diagonal(&Vector::from_fn(n, |_, _| uniform(r, 0.0, 1.0))));
                let w: Vec<f64> = (0..n).map(|_| uniform(r, 0.0, 0.5)).collect();
                let w = Diag::learned(omega.push("w", Role::Threshold, &[n], &w).unwrap());
                let op = AlmOp::new(
                    Arc::new(a),
                    normal_vec(r, m),
                    Some(p),
                    Some(normal_vec(r, n)),
                    Some(w),
                    Scalar::learned(beta),
                    AlmProximal::Exact { g },
                )
                .unwrap();
                OperatorDescriptor::Alm(op)
            }
        }
        Variant::AlmLinearized => {
            let (n, m) = if smooth { (4, 2) } else { (6, 3) };
            let a = normal_mat(r, m, n);
            let p = psd(r, n);
            let an = spectral_norm_estimate(&a, 1e-10).unwrap().powi(2);
            let pn = spectral_norm_estimate(&p, 1e-10).unwrap();
            let b = uniform(r, 0.1, 1.0);
            let beta = omega.push_scalar("beta", Role::Penalty, b).unwrap();
            let rho_min = b * an + pn;
            let rho = if smooth {
                Diag::broadcast(n, Scalar::learned(omega.push_scalar("rho", Role::Penalty, rho_min + uniform(r, 0.2, 1.0)).unwrap()))
            } else {
                let vals: Vec<f64> = (0..n).map(|_| rho_min + uniform(r, 0.05, 1.0)).collect();
                Diag::learned(omega.push("rho", Role::Penalty, &[n], &vals).unwrap())
            };
            let weights = (!smooth).then(|| {
                let w: Vec<f64> = (0..n).map(|_| uniform(r, 0.0, 0.5)).collect();
                Diag::learned(omega.push("w", Role::Threshold, &[n], &w).unwrap())
            });
            let op = AlmOp::new(
                Arc::new(a),
                normal_vec(r, m),
                Some(Arc::new(p)),
                Some(normal_vec(r, n)),
                weights,
                Scalar::learned(beta),
                AlmProximal::Linearized { rho },
            )
            .unwrap();
            OperatorDescriptor::Alm(op)
        }
        Variant::Dladmm => {
            let (m, n) = if smooth { (2, 4) } else { (4, 8) };
            let mut q = normal_mat(r, m, n);
            for mut c in q.column_iter_mut() {
                let nc = c.norm();
                c /= nc;
            }
            let lq = spectral_norm_estimate(&q, 1e-10).unwrap();
            let beta = uniform(r, 0.05, 1.0);
            let mut p = |name: &str, role: Role, v: f64| Scalar::learned(omega.push_scalar(name, role, v).unwrap());
            let params = DladmmParams {
                beta: p("beta", Role::Penalty, beta),
                gamma: p("gamma", Role::StepSize, uniform(r, 0.1, 1.0)),
                rho1: p("rho1", Role::Penalty, beta * lq * lq * uniform(r, 1.05, 1.5)),
                rho2: p("rho2", Role::Penalty, beta * uniform(r, 1.0, 1.5)),
                kappa1: if smooth { Scalar::Fixed(0.0) } else { p("kappa1", Role::Threshold, uniform(r, 0.0, 0.5)) },
                kappa2: if smooth { Scalar::Fixed(0.0) } else { p("kappa2", Role::Threshold, uniform(r, 0.0, 0.5)) },
            };
            OperatorDescriptor::Dladmm(DladmmOp::new(Arc::new(q), normal_vec(r, m), params).unwrap())
        }
        Variant::Net => {
            if smooth {
                OperatorDescriptor::Net(net(r, &mut omega, 3, None, Activation::Tanh, 0.7, false))
            } else {
                let act = [Activation::Relu, Activation::Tanh, Activation::HardTanh][r.random_range(0..3)];
                let n = 5;
                let h: Vec<f64> = (0..n).map(|_| uniform(r, 0.5, 2.0)).collect();
                let h = Diag::learned(omega.push("h", Role::MetricDiagonal, &[n], &h).unwrap());
                let op = net(r, &mut omega, n, Some(7), act, 1.0, true).with_conjugation(h).unwrap();
                op.normalize(&mut omega).unwrap();
                OperatorDescriptor::Net(op)
            }
        }
        Variant::Composite => {
            let n = if smooth { 2 } else { 5 };
            let (p, g) = pg(r, &mut omega, n, smooth);
            let nt = if smooth {
                net(r, &mut omega, n, None, Activation::Identity, 0.7, false)
            } else {
                net(r, &mut omega, n, Some(6), Activation::Relu, 1.0, true)
            };
            let nt = nt.with_conjugation(g).unwrap();
            nt.normalize(&mut omega).unwrap();
            if smooth {
                for s in omega.layout().to_vec() {
                    if s.role == Role::LayerMatrix {
                        for x in &mut omega.values_mut()[s.range()] {
                            *x *= 0.8;
                        }
                    }
                }
            }
            OperatorDescriptor::Composite(vec![OperatorDescriptor::Pg(p), OperatorDescriptor::Net(nt)])
        }
    };
    omega.validate().unwrap();
    Case { op, omega }
}

pub fn random_state(r: &mut ChaCha8Rng, n: usize) -> Vector {
    let scale = [0.1, 1.0, 10.0][r.random_range(0..3)];
    normal_vec(r, n) * scale
}

/// `‖Du − Dv‖_H − ‖u − v‖_H` and the averaged-operator gap
/// `‖u − v‖²_H − ‖Tu − Tv‖²_H − ((1 − α)/α)‖(I − T)u − (I − T)v‖²_H`.
pub fn pair_gaps(case: &Case, h: &MetricMatrix, u: &Vector, v: &Vector, alpha: f64) -> (f64, f64) {
    let du = case.op.apply(u, &case.omega).unwrap();
    let dv = case.op.apply(v, &case.omega).unwrap();
    let ne = h_norm(h, &(&du - &dv)).unwrap() - h_norm(h, &(u - v)).unwrap();
    let tu = u * (1.0 - alpha) + &du * alpha;
    let tv = v * (1.0 - alpha) + &dv * alpha;
    let lhs = h_norm(h, &(u - v)).unwrap().powi(2) - h_norm(h, &(&tu - &tv)).unwrap().powi(2);
    let rhs = (1.0 - alpha) / alpha * h_norm(h, &((u - &tu) - (v - &tv))).unwrap().powi(2);
    (ne, rhs - lhs)
}
