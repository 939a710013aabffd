//! Two-layer Net toy: `D(u) = W1 σ(W0 u + b0) + b1` with per-sample targets
//! (ReLU unless configured otherwise).
//!
//! Raw layers sit near `c·I` with spectral norm `c = layer_norm`, so with
//! `c > 1` the unnormalized map is expansive.

use gkm_core::bmo::Sample;
use gkm_core::hypergrad::LossDescriptor;
use gkm_core::operators::{push_layer, Activation, NetOp, OperatorDescriptor};
use gkm_core::params::HyperParams;
use gkm_core::tasks::{Array, Container, PRNG_NAME};
use gkm_core::{Error, Matrix, Result, Vector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rand_distr::StandardNormal;

#[derive(Debug, Clone, PartialEq)]
pub struct ToyInstance {
    pub w0: Matrix,
    pub w1: Matrix,
    pub b0: Vector,
    pub b1: Vector,
    pub targets: Vec<Vector>,
    pub seed: u64,
}

fn normal_mat(r: &mut ChaCha20Rng, n: usize) -> Matrix {
    Matrix::from_fn(n, n, |_, _| r.sample(StandardNormal))
}

fn normal_vec(r: &mut ChaCha20Rng, n: usize) -> Vector {
    Vector::from_fn(n, |_, _| r.sample(StandardNormal))
}

pub fn gen_toy(n: usize, batch: usize, layer_norm: f64, seed: u64) -> Result<ToyInstance> {
    if n == 0 || !(layer_norm > 0.0) {
        return Err(Error::InvalidArgument("toy needs n ≥ 1 and a positive layer norm".into()));
    }
    let mut r = ChaCha20Rng::seed_from_u64(seed);
    let layer = |r: &mut ChaCha20Rng| {
        let m = Matrix::identity(n, n) + normal_mat(r, n) * 0.3;
        let s = m.clone().svd(false, false).singular_values.max();
        m * (layer_norm / s)
    };
    let w0 = layer(&mut r);
    let w1 = layer(&mut r);
    let b0 = normal_vec(&mut r, n) * 0.3;
    let b1 = normal_vec(&mut r, n) * 0.3;
    let targets = (0..batch).map(|_| normal_vec(&mut r, n)).collect();
    Ok(ToyInstance { w0, w1, b0, b1, targets, seed })
}

impl ToyInstance {
    pub fn n(&self) -> usize {
        self.b0.len()
    }

    pub fn to_container(&self) -> Container {
        let n = self.n();
        let mut c = Container::default();
        c.set_attr("task", "toy");
        c.set_attr("prng", PRNG_NAME);
        c.set_attr("seed", self.seed);
        let rows = |m: &Matrix| (0..n).flat_map(|i| m.row(i).iter().copied().collect::<Vec<_>>()).collect();
        c.arrays.insert("w0".into(), Array { shape: vec![n, n], data: rows(&self.w0) });
        c.arrays.insert("w1".into(), Array { shape: vec![n, n], data: rows(&self.w1) });
        c.arrays.insert("b0".into(), Array::vector(self.b0.as_slice().to_vec()));
        c.arrays.insert("b1".into(), Array::vector(self.b1.as_slice().to_vec()));
        let data = self.targets.iter().flat_map(|t| t.iter().copied()).collect();
        c.arrays.insert("targets".into(), Array { shape: vec![self.targets.len(), n], data });
        c
    }

    pub fn from_container(c: &Container) -> Result<Self> {
        if c.attr("task")? != "toy" {
            return Err(Error::Format(format!("container holds a {} instance", c.attr("task")?)));
        }
        let b0 = Vector::from_vec(c.array("b0")?.data.clone());
        let n = b0.len();
        let square = |name: &str| -> Result<Matrix> {
            let a = c.array(name)?;
            if a.shape != [n, n] {
                return Err(Error::Format(format!("{name} has shape {:?}", a.shape)));
            }
            Ok(Matrix::from_row_slice(n, n, &a.data))
        };
        let b1 = c.array("b1")?;
        let t = c.array("targets")?;
        if b1.data.len() != n || t.shape.len() != 2 || t.shape[1] != n {
            return Err(Error::Format("toy arrays disagree in size".into()));
        }
        Ok(Self {
            w0: square("w0")?,
            w1: square("w1")?,
            b0,
            b1: Vector::from_vec(b1.data.clone()),
            targets: t.data.chunks(n).map(|c| Vector::from_row_slice(c)).collect(),
            seed: c.parse_attr("seed")?,
        })
    }
}

#[derive(Debug, Clone)]
pub struct ToyTask {
    pub op: OperatorDescriptor,
    pub omega: HyperParams,
}

/// Normalized to `rho_bar` when `normalize`, otherwise the raw layers with the
/// certificate disabled.
pub fn build_toy(inst: &ToyInstance, activation: Activation, rho_bar: f64, normalize: bool) -> Result<ToyTask> {
    let mut omega = HyperParams::new();
    let l0 = push_layer(&mut omega, "d0", &inst.w0, Some(&inst.b0))?;
    let l1 = push_layer(&mut omega, "d1", &inst.w1, Some(&inst.b1))?;
    let net = NetOp::new(inst.n(), vec![l0, l1], activation, rho_bar)?;
    let net = if normalize {
        net.normalize(&mut omega)?;
        net
    } else {
        net.without_certificate()
    };
    Ok(ToyTask { op: OperatorDescriptor::Net(net), omega })
}

impl ToyTask {
    pub fn samples(&self, inst: &ToyInstance) -> Result<Vec<Sample>> {
        inst.targets
            .iter()
            .map(|t| Ok(Sample::new(self.op.clone(), LossDescriptor::squared_error(t.clone())?)))
            .collect()
    }
}
