//! 1-D deconvolution `min ½‖Q Wᵀz − b‖² + κ‖z‖₁` in Haar coefficients `z`,
//! with `Q` a circular blur.

use std::f64::consts::PI;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rand_distr::StandardNormal;

use crate::bmo::Sample;
use crate::error::{Error, Result};
use crate::hypergrad::{LossDescriptor, LossKind, Readout};
use crate::metric::{Matrix, Vector};
use crate::operators::{push_layer, Activation, NetOp, OperatorDescriptor, PgOp};
use crate::params::{Diag, HyperParams, OmegaBounds, Role, Scalar};

use super::container::{Array, Container};
use super::PRNG_NAME;

/// Orthonormal Haar analysis matrix (`z = W u`) with `levels` levels; `n`
/// must be divisible by `2^levels`.
pub fn haar_matrix(n: usize, levels: usize) -> Result<Matrix> {
    if n == 0 || levels == 0 || n % (1usize << levels) != 0 {
        return Err(Error::InvalidArgument(format!("length {n} is not divisible by 2^{levels}")));
    }
    let mut w = Matrix::identity(n, n);
    let s = std::f64::consts::FRAC_1_SQRT_2;
    let mut len = n;
    for _ in 0..levels {
        let mut step = Matrix::identity(n, n);
        for i in 0..len {
            step[(i, i)] = 0.0;
        }
        for i in 0..len / 2 {
            step[(i, 2 * i)] = s;
            step[(i, 2 * i + 1)] = s;
            step[(len / 2 + i, 2 * i)] = s;
            step[(len / 2 + i, 2 * i + 1)] = -s;
        }
        w = step * w;
        len /= 2;
    }
    Ok(w)
}

/// Circulant matrix of a centered kernel: `(Qu)_i = Σ_j k_j u_{i + j − c}`.
pub fn circulant(kernel: &[f64], n: usize) -> Matrix {
    let c = kernel.len() / 2;
    let mut q = Matrix::zeros(n, n);
    for i in 0..n {
        for (j, k) in kernel.iter().enumerate() {
            let col = (i + n * kernel.len() + j - c) % n;
            q[(i, col)] += k;
        }
    }
    q
}

/// `max_f |k̂(f)|`, the largest singular value of the circulant matrix.
pub fn circulant_sigma_max(kernel: &[f64], n: usize) -> f64 {
    (0..n)
        .map(|f| {
            let (mut re, mut im) = (0.0, 0.0);
            for (j, k) in kernel.iter().enumerate() {
                let th = -2.0 * PI * (f * j) as f64 / n as f64;
                re += k * th.cos();
                im += k * th.sin();
            }
            re.hypot(im)
        })
        .fold(0.0, f64::max)
}

/// Normalized Gaussian kernel of odd `width`.
pub fn gaussian_kernel(width: usize, sigma: f64) -> Result<Vec<f64>> {
    if width % 2 == 0 || !(sigma > 0.0) {
        return Err(Error::InvalidArgument("kernel width must be odd and σ positive".into()));
    }
    let c = (width / 2) as f64;
    let k: Vec<f64> = (0..width).map(|i| (-((i as f64 - c).powi(2)) / (2.0 * sigma * sigma)).exp()).collect();
    let s: f64 = k.iter().sum();
    Ok(k.into_iter().map(|v| v / s).collect())
}

#[derive(Debug, Clone, PartialEq)]
pub struct DeconvInstance {
    pub kernel: Vec<f64>,
    pub levels: usize,
    pub clean: Vec<Vector>,
    pub observed: Vec<Vector>,
    pub noise_sigma: f64,
    pub seed: u64,
}

/// Piecewise-constant signals in `[0, 1]`, blurred circularly and corrupted
/// by Gaussian noise of standard deviation `noise_sigma`.
pub fn gen_deconv(
    n: usize,
    batch: usize,
    kernel: Vec<f64>,
    levels: usize,
    noise_sigma: f64,
    seed: u64,
) -> Result<DeconvInstance> {
    haar_matrix(n, levels)?;
    if kernel.is_empty() || kernel.len() > n {
        return Err(Error::InvalidArgument("kernel must be nonempty and no longer than the signal".into()));
    }
    if !(noise_sigma >= 0.0) {
        return Err(Error::InvalidArgument("noise level must be nonnegative".into()));
    }
    let mut r = ChaCha20Rng::seed_from_u64(seed);
    let q = circulant(&kernel, n);
    let mut clean = Vec::with_capacity(batch);
    let mut observed = Vec::with_capacity(batch);
    for _ in 0..batch {
        let mut u = Vector::zeros(n);
        let mut level = r.random::<f64>();
        for i in 0..n {
            if r.random::<f64>() < 4.0 / n as f64 {
                level = r.random::<f64>();
            }
            u[i] = level;
        }
        let mut b = &q * &u;
        for x in b.iter_mut() {
            *x += noise_sigma * r.sample::<f64, _>(StandardNormal);
        }
        clean.push(u);
        observed.push(b);
    }
    Ok(DeconvInstance { kernel, levels, clean, observed, noise_sigma, seed })
}

impl DeconvInstance {
    pub fn n(&self) -> usize {
        self.clean.first().map_or(0, Vector::len)
    }

    pub fn blur(&self) -> Matrix {
        circulant(&self.kernel, self.n())
    }

    pub fn wavelet(&self) -> Result<Matrix> {
        haar_matrix(self.n(), self.levels)
    }

    pub fn to_container(&self) -> Container {
        let mut c = Container::default();
        c.set_attr("task", "deconv");
        c.set_attr("prng", PRNG_NAME);
        c.set_attr("seed", self.seed);
        c.set_attr("levels", self.levels);
        c.set_attr("noise_sigma", self.noise_sigma);
        c.arrays.insert("kernel".into(), Array::vector(self.kernel.clone()));
        let n = self.n();
        let stack = |vs: &[Vector]| vs.iter().flat_map(|v| v.iter().copied()).collect::<Vec<_>>();
        c.arrays.insert("clean".into(), Array { shape: vec![self.clean.len(), n], data: stack(&self.clean) });
        c.arrays.insert("observed".into(), Array { shape: vec![self.observed.len(), n], data: stack(&self.observed) });
        c
    }

    pub fn from_container(c: &Container) -> Result<Self> {
        if c.attr("task")? != "deconv" {
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
            kernel: c.array("kernel")?.data.clone(),
            levels: c.parse_attr("levels")?,
            clean: rows("clean")?,
            observed: rows("observed")?,
            noise_sigma: c.parse_attr("noise_sigma")?,
            seed: c.parse_attr("seed")?,
        };
        if inst.clean.len() != inst.observed.len() {
            return Err(Error::Format("batch sizes disagree".into()));
        }
        Ok(inst)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum NetInit {
    Identity,
    Random { seed: u64 },
}

/// Architecture of the learned module acting on the coefficients.
#[derive(Debug, Clone, PartialEq)]
pub struct NetSpec {
    pub hidden: Vec<usize>,
    pub activation: Activation,
    pub rho_bar: f64,
    pub init: NetInit,
}

impl NetSpec {
    /// A single linear layer initialized at the identity.
    pub fn identity() -> Self {
        Self { hidden: Vec::new(), activation: Activation::Identity, rho_bar: 1.0, init: NetInit::Identity }
    }
}

impl Default for NetSpec {
    fn default() -> Self {
        Self { hidden: Vec::new(), activation: Activation::Tanh, rho_bar: 1.0, init: NetInit::Random { seed: 0 } }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DeconvDefaults {
    /// Step size as a fraction of `1/L_f`.
    pub gamma_frac: f64,
    pub g: f64,
    pub kappa: f64,
}

impl Default for DeconvDefaults {
    fn default() -> Self {
        Self { gamma_frac: 0.9, g: 1.0, kappa: 0.01 }
    }
}

#[derive(Debug, Clone)]
pub struct DeconvTask {
    pub pg: PgOp,
    pub net: NetOp,
    pub omega: HyperParams,
    pub bounds: OmegaBounds,
    /// Synthesis matrix `Wᵀ`.
    pub synthesis: Arc<Matrix>,
    /// `W Qᵀ`, mapping an observation to the linear term `−W Qᵀ b`.
    wqt: Matrix,
    loss: LossDescriptor,
}

/// Composite of a proximal gradient step in `z` with metric `diag(g)` and a
/// normalized Net conjugated by the same diagonal.
pub fn build_deconv_operator(inst: &DeconvInstance, net_spec: &NetSpec, defaults: &DeconvDefaults) -> Result<DeconvTask> {
    let n = inst.n();
    let w = inst.wavelet()?;
    let q = inst.blur();
    let qw = &q * w.transpose();
    let p = Arc::new(qw.transpose() * &qw);
    let lf = circulant_sigma_max(&inst.kernel, n).powi(2);

    let mut omega = HyperParams::new();
    let gamma_val = if lf > 0.0 { defaults.gamma_frac / lf } else { defaults.gamma_frac };
    let gamma = omega.push_scalar("gamma", Role::StepSize, gamma_val)?;
    let g = omega.push("g", Role::MetricDiagonal, &[n], &vec![defaults.g; n])?;
    let kappa = omega.push_scalar("kappa", Role::Threshold, defaults.kappa)?;
    let g_diag = Diag::learned(g);
    let pg = PgOp::new(
        n,
        Some(p),
        None,
        Scalar::learned(gamma),
        g_diag.clone(),
        Some(Diag::broadcast(n, Scalar::learned(kappa))),
    )?;

    let widths: Vec<usize> = std::iter::once(n).chain(net_spec.hidden.iter().copied()).chain(std::iter::once(n)).collect();
    let mut rng = match net_spec.init {
        NetInit::Random { seed } => Some(ChaCha20Rng::seed_from_u64(seed)),
        NetInit::Identity => None,
    };
    let mut layers = Vec::with_capacity(widths.len() - 1);
    for (i, pair) in widths.windows(2).enumerate() {
        let (cols, rows) = (pair[0], pair[1]);
        let m = match rng.as_mut() {
            Some(r) => Matrix::from_fn(rows, cols, |_, _| r.sample::<f64, _>(StandardNormal) / (cols as f64).sqrt()),
            None if rows == cols => Matrix::identity(rows, cols),
            None => return Err(Error::InvalidArgument("identity initialization needs square layers".into())),
        };
        layers.push(push_layer(&mut omega, &format!("net.{i}"), &m, Some(&Vector::zeros(rows)))?);
    }
    let net = NetOp::new(n, layers, net_spec.activation, net_spec.rho_bar)?.with_conjugation(g_diag)?;
    net.normalize(&mut omega)?;
    omega.validate()?;

    let g_lo = 0.5 * defaults.g;
    let bounds = OmegaBounds::for_params(&omega)
        .with(&omega, "g", g_lo, 2.0 * defaults.g)?
        .with(&omega, "kappa", 0.0, 1.0)?;
    let bounds = if lf > 0.0 {
        bounds.with(&omega, "gamma", 0.05 / lf, 0.95 * 2.0 * g_lo / lf)?
    } else {
        bounds
    };
    if !bounds.contains(omega.values()) {
        return Err(Error::InvalidOmega("deconvolution defaults fall outside Ω".into()));
    }

    let synthesis = Arc::new(w.transpose());
    let loss = LossDescriptor::new(
        LossKind::SquaredError { readout: Readout::Matrix(synthesis.clone()), target: Vector::zeros(n), scale: 1.0 },
        n,
    )?;
    let wqt = &w * q.transpose();
    Ok(DeconvTask { pg, net, omega, bounds, synthesis, wqt, loss })
}

impl DeconvTask {
    pub fn descriptor(&self, b: &Vector) -> Result<OperatorDescriptor> {
        let pg = self.pg.with_q(Some(-(&self.wqt * b)))?;
        Ok(OperatorDescriptor::Composite(vec![OperatorDescriptor::Pg(pg), OperatorDescriptor::Net(self.net.clone())]))
    }

    /// `½‖Wᵀz − u*‖²`.
    pub fn loss(&self, clean: &Vector) -> Result<LossDescriptor> {
        self.loss.with_data(clean.clone())
    }

    pub fn samples(&self, inst: &DeconvInstance) -> Result<Vec<Sample>> {
        inst.observed
            .iter()
            .zip(&inst.clean)
            .map(|(b, u)| Ok(Sample::new(self.descriptor(b)?, self.loss(u)?)))
            .collect()
    }

    /// Signal-domain reconstruction `Wᵀz`.
    pub fn reconstruct(&self, z: &Vector) -> Vector {
        &*self.synthesis * z
    }
}
