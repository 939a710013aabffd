//! Synthetic sparse coding `min κ1‖u1‖₁ + κ2‖u2‖₁  s.t.  Qu1 + u2 = b`,
//! where `u2` absorbs salt-and-pepper corruption of `b`.

use std::sync::Arc;

use rand::seq::index::sample as sample_indices;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rand_distr::StandardNormal;

use crate::bmo::Sample;
use crate::error::{Error, Result};
use crate::hypergrad::{LossDescriptor, LossKind};
use crate::metric::{Matrix, Vector};
use crate::operators::{DladmmOp, DladmmParams, OperatorDescriptor};
use crate::params::{HyperParams, OmegaBounds, Role, Scalar};

use super::container::{Array, Container};
use super::PRNG_NAME;

const STREAM_DICTIONARY: u64 = 0;
const STREAM_TRAIN: u64 = 1;
const STREAM_HELD_OUT: u64 = 2;

#[derive(Debug, Clone, PartialEq)]
pub struct SparseCodingInstance {
    /// `m × n` with unit-norm columns.
    pub q: Matrix,
    pub b: Vec<Vector>,
    /// Ground-truth codes, for evaluation only.
    pub codes: Vec<Vector>,
    /// Entries of each `b` overwritten by salt-and-pepper noise.
    pub noise_mask: Vec<Vec<bool>>,
    pub sparsity: f64,
    pub noise_frac: f64,
    pub seed: u64,
}

fn rng(seed: u64, stream: u64) -> ChaCha20Rng {
    let mut r = ChaCha20Rng::seed_from_u64(seed);
    r.set_stream(stream);
    r
}

fn check_ranges(m: usize, n: usize, sparsity: f64, noise_frac: f64) -> Result<()> {
    if !(m > 0 && m < n) {
        return Err(Error::InvalidArgument(format!("need 0 < m < n, got m = {m}, n = {n}")));
    }
    if !(0.0..1.0).contains(&sparsity) {
        return Err(Error::InvalidArgument(format!("sparsity {sparsity} outside [0, 1)")));
    }
    if !(0.0..1.0).contains(&noise_frac) {
        return Err(Error::InvalidArgument(format!("noise fraction {noise_frac} outside [0, 1)")));
    }
    Ok(())
}

/// Nonzeros per code, `⌈sparsity · n⌉`.
pub fn nonzeros(n: usize, sparsity: f64) -> usize {
    ((sparsity * n as f64) - 1e-9).ceil().max(0.0) as usize
}

fn draw_batch(
    q: &Matrix,
    batch: usize,
    sparsity: f64,
    noise_frac: f64,
    r: &mut ChaCha20Rng,
) -> (Vec<Vector>, Vec<Vector>, Vec<Vec<bool>>) {
    let (m, n) = q.shape();
    let nnz = nonzeros(n, sparsity);
    let corrupt = (noise_frac * m as f64).round() as usize;
    let mut bs = Vec::with_capacity(batch);
    let mut codes = Vec::with_capacity(batch);
    let mut masks = Vec::with_capacity(batch);
    for _ in 0..batch {
        let mut c = Vector::zeros(n);
        for i in sample_indices(r, n, nnz) {
            c[i] = r.sample(StandardNormal);
        }
        let mut b = q * &c;
        let peak = b.amax();
        let mut mask = vec![false; m];
        for i in sample_indices(r, m, corrupt) {
            mask[i] = true;
            b[i] = if r.random::<bool>() { peak } else { -peak };
        }
        bs.push(b);
        codes.push(c);
        masks.push(mask);
    }
    (bs, codes, masks)
}

/// Draws `Q` with standard-normal entries and unit columns, then `batch`
/// codes with `⌈sparsity·n⌉` standard-normal nonzeros each, `b = Qc`, and
/// finally sets `round(noise_frac·m)` entries of each `b` to `±max|b|`.
pub fn gen_sparse_coding(
    m: usize,
    n: usize,
    batch: usize,
    sparsity: f64,
    noise_frac: f64,
    seed: u64,
) -> Result<SparseCodingInstance> {
    check_ranges(m, n, sparsity, noise_frac)?;
    let mut r = rng(seed, STREAM_DICTIONARY);
    let mut q = Matrix::from_fn(m, n, |_, _| r.sample(StandardNormal));
    for mut col in q.column_iter_mut() {
        let norm = col.norm();
        if norm > 0.0 {
            col /= norm;
        }
    }
    let (b, codes, noise_mask) = draw_batch(&q, batch, sparsity, noise_frac, &mut rng(seed, STREAM_TRAIN));
    Ok(SparseCodingInstance { q, b, codes, noise_mask, sparsity, noise_frac, seed })
}

impl SparseCodingInstance {
    pub fn m(&self) -> usize {
        self.q.nrows()
    }

    pub fn n(&self) -> usize {
        self.q.ncols()
    }

    pub fn batch(&self) -> usize {
        self.b.len()
    }

    /// A fresh batch over the same dictionary, drawn from its own stream.
    pub fn held_out(&self, batch: usize) -> SparseCodingInstance {
        let (b, codes, noise_mask) =
            draw_batch(&self.q, batch, self.sparsity, self.noise_frac, &mut rng(self.seed, STREAM_HELD_OUT));
        SparseCodingInstance { b, codes, noise_mask, ..self.clone() }
    }

    pub fn to_container(&self) -> Container {
        let mut c = Container::default();
        c.set_attr("task", "sparse_coding");
        c.set_attr("prng", PRNG_NAME);
        c.set_attr("seed", self.seed);
        c.set_attr("sparsity", self.sparsity);
        c.set_attr("noise_frac", self.noise_frac);
        let (m, n, k) = (self.m(), self.n(), self.batch());
        let row_major: Vec<f64> = (0..m).flat_map(|i| self.q.row(i).iter().copied().collect::<Vec<_>>()).collect();
        c.arrays.insert("q".into(), Array { shape: vec![m, n], data: row_major });
        let stack = |vs: &[Vector]| vs.iter().flat_map(|v| v.iter().copied()).collect::<Vec<_>>();
        c.arrays.insert("b".into(), Array { shape: vec![k, m], data: stack(&self.b) });
        c.arrays.insert("codes".into(), Array { shape: vec![k, n], data: stack(&self.codes) });
        let mask = self.noise_mask.iter().flatten().map(|&x| if x { 1.0 } else { 0.0 }).collect();
        c.arrays.insert("noise_mask".into(), Array { shape: vec![k, m], data: mask });
        c
    }

    pub fn from_container(c: &Container) -> Result<Self> {
        if c.attr("task")? != "sparse_coding" {
            return Err(Error::Format(format!("container holds a {} instance", c.attr("task")?)));
        }
        let q = c.array("q")?;
        let [m, n] = q.shape[..] else {
            return Err(Error::Format("q must be two-dimensional".into()));
        };
        let q = Matrix::from_row_slice(m, n, &q.data);
        let rows = |name: &str, len: usize| -> Result<Vec<Vec<f64>>> {
            let a = c.array(name)?;
            if a.shape.len() != 2 || a.shape[1] != len {
                return Err(Error::Format(format!("{name} has shape {:?}", a.shape)));
            }
            Ok(a.data.chunks(len).map(<[f64]>::to_vec).collect())
        };
        let b: Vec<Vector> = rows("b", m)?.into_iter().map(Vector::from_vec).collect();
        let codes: Vec<Vector> = rows("codes", n)?.into_iter().map(Vector::from_vec).collect();
        let noise_mask: Vec<Vec<bool>> =
            rows("noise_mask", m)?.into_iter().map(|r| r.into_iter().map(|x| x != 0.0).collect()).collect();
        if codes.len() != b.len() || noise_mask.len() != b.len() {
            return Err(Error::Format("batch sizes disagree".into()));
        }
        Ok(Self {
            q,
            b,
            codes,
            noise_mask,
            sparsity: c.parse_attr("sparsity")?,
            noise_frac: c.parse_attr("noise_frac")?,
            seed: c.parse_attr("seed")?,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SparseCodingDefaults {
    pub beta: f64,
    pub gamma: f64,
    pub kappa1: f64,
    pub kappa2: f64,
}

impl Default for SparseCodingDefaults {
    fn default() -> Self {
        Self { beta: 0.1, gamma: 1.0, kappa1: 1.0, kappa2: 1.0 }
    }
}

/// The DLADMM operator, its ω and Ω, and the shared loss template.
#[derive(Debug, Clone)]
pub struct SparseCodingTask {
    pub op: DladmmOp,
    pub omega: HyperParams,
    pub bounds: OmegaBounds,
    loss: LossDescriptor,
}

/// Slices trained by the LADMM baseline.
pub const LADMM_TRAINABLE: [&str; 2] = ["beta", "gamma"];

pub fn build_sparse_coding_operator(
    inst: &SparseCodingInstance,
    defaults: &SparseCodingDefaults,
) -> Result<SparseCodingTask> {
    let q = Arc::new(inst.q.clone());
    let mut omega = HyperParams::new();
    let beta = omega.push_scalar("beta", Role::Penalty, defaults.beta)?;
    let gamma = omega.push_scalar("gamma", Role::StepSize, defaults.gamma)?;
    let rho1 = omega.push_scalar("rho1", Role::Penalty, 0.0)?;
    let rho2 = omega.push_scalar("rho2", Role::Penalty, 0.0)?;
    let kappa1 = omega.push_scalar("kappa1", Role::Threshold, defaults.kappa1)?;
    let kappa2 = omega.push_scalar("kappa2", Role::Threshold, defaults.kappa2)?;
    let params = DladmmParams {
        beta: Scalar::learned(beta),
        gamma: Scalar::learned(gamma),
        rho1: Scalar::learned(rho1),
        rho2: Scalar::learned(rho2),
        kappa1: Scalar::learned(kappa1),
        kappa2: Scalar::learned(kappa2),
    };
    let op = DladmmOp::new(q.clone(), Vector::zeros(inst.m()), params)?;
    op.certify(&mut omega)?;
    omega.validate()?;
    let bounds = OmegaBounds::for_params(&omega)
        .with(&omega, "beta", 1e-3, 10.0)?
        .with(&omega, "gamma", 1e-3, 1.0)?
        .with(&omega, "kappa1", 0.0, 10.0)?
        .with(&omega, "kappa2", 0.0, 10.0)?;
    let loss = LossDescriptor::new(LossKind::FeasibilityResidual { q, b: Vector::zeros(inst.m()) }, op.dim())?;
    Ok(SparseCodingTask { op, omega, bounds, loss })
}

impl SparseCodingTask {
    pub fn descriptor(&self, b: &Vector) -> Result<OperatorDescriptor> {
        Ok(OperatorDescriptor::Dladmm(self.op.with_b(b.clone())?))
    }

    /// `½‖Qu1 + u2 − b‖²` for one observation.
    pub fn loss(&self, b: &Vector) -> Result<LossDescriptor> {
        self.loss.with_data(b.clone())
    }

    /// One training sample per observation, each starting from zero.
    pub fn samples(&self, inst: &SparseCodingInstance) -> Result<Vec<Sample>> {
        inst.b
            .iter()
            .map(|b| Ok(Sample::new(self.descriptor(b)?, self.loss(b)?)))
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::operators::{apply_dladmm, AugmentedState};

    #[test]
    fn generator_examples() {
        let inst = gen_sparse_coding(64, 128, 4, 0.1, 0.1, 1).unwrap();
        assert!(inst.codes.iter().all(|c| c.iter().filter(|x| **x != 0.0).count() == 13));
        for col in inst.q.column_iter() {
            approx::assert_relative_eq!(col.norm(), 1.0, epsilon = 1e-12);
        }
        assert!(inst.noise_mask.iter().all(|m| m.iter().filter(|x| **x).count() == 6));
        assert_eq!(inst, gen_sparse_coding(64, 128, 4, 0.1, 0.1, 1).unwrap());
        assert_ne!(inst.held_out(4).b, inst.b);

        let zero = gen_sparse_coding(4, 8, 3, 0.0, 0.0, 2).unwrap();
        assert!(zero.b.iter().all(|b| b.iter().all(|x| *x == 0.0)));

        assert!(gen_sparse_coding(8, 8, 1, 0.1, 0.0, 0).is_err());
        assert!(gen_sparse_coding(4, 8, 1, 0.1, 1.0, 0).is_err());
    }

    #[test]
    fn container_round_trip() {
        let inst = gen_sparse_coding(6, 10, 3, 0.3, 0.2, 5).unwrap();
        let back = SparseCodingInstance::from_container(&Container::decode(&inst.to_container().encode()).unwrap()).unwrap();
        assert_eq!(back, inst);
    }

    #[test]
    fn builder_defaults() {
        let inst = gen_sparse_coding(16, 32, 2, 0.1, 0.1, 3).unwrap();
        let task = build_sparse_coding_operator(&inst, &SparseCodingDefaults::default()).unwrap();
        assert_eq!(task.omega.scalar("beta").unwrap(), 0.1);
        assert_eq!(task.omega.scalar("gamma").unwrap(), 1.0);
        let lq = task.op.lq();
        assert!(task.omega.scalar("rho1").unwrap() >= 0.1 * lq * lq);
        assert!(task.omega.scalar("rho2").unwrap() >= 0.1);
        assert!(task.bounds.contains(task.omega.values()));
        let samples = task.samples(&inst).unwrap();
        assert_eq!(samples.len(), 2);
    }

    #[test]
    fn identity_dictionary_matches_hand_example() {
        let inst = SparseCodingInstance {
            q: Matrix::identity(1, 1),
            b: vec![Vector::zeros(1)],
            codes: vec![Vector::zeros(1)],
            noise_mask: vec![vec![false]],
            sparsity: 0.0,
            noise_frac: 0.0,
            seed: 0,
        };
        let d = SparseCodingDefaults { beta: 0.1, gamma: 1.0, kappa1: 0.0, kappa2: 0.0 };
        let mut task = build_sparse_coding_operator(&inst, &d).unwrap();
        task.omega.set_scalar("rho1", 0.1).unwrap();
        let op = task.op.with_b(inst.b[0].clone()).unwrap();
        let state = AugmentedState::new(Vector::from_vec(vec![1.0, 1.0, 0.0]), op.blocks()).unwrap();
        let out = apply_dladmm(&op, &state, &task.omega).unwrap();
        for (a, b) in out.values.iter().zip([-1.0, 1.0, 0.0]) {
            approx::assert_relative_eq!(*a, b, epsilon = 1e-12);
        }
    }
}
