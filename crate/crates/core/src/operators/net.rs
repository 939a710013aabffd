//! Dense feed-forward network with spectrally normalized layers.

use std::collections::HashMap;
use std::sync::{Arc, Mutex};

use crate::error::{check_dim, Error, Result};
use crate::metric::{spectral_norm_with, Matrix, MetricMatrix, PowerIteration, Vector};
use crate::params::{fnv1a, Diag, HyperParams, ParamRef, Role};

/// Componentwise 1-Lipschitz nonlinearities.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Identity,
    Relu,
    HardTanh,
    Tanh,
}

impl Activation {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "identity" | "linear" => Some(Self::Identity),
            "relu" => Some(Self::Relu),
            "hardtanh" => Some(Self::HardTanh),
            "tanh" => Some(Self::Tanh),
            _ => None,
        }
    }

    fn eval(self, z: f64) -> f64 {
        match self {
            Self::Identity => z,
            Self::Relu => z.max(0.0),
            Self::HardTanh => z.clamp(-1.0, 1.0),
            Self::Tanh => z.tanh(),
        }
    }

    fn deriv(self, z: f64) -> f64 {
        match self {
            Self::Identity => 1.0,
            Self::Relu => {
                if z > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Self::HardTanh => {
                if z.abs() < 1.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Self::Tanh => 1.0 - z.tanh().powi(2),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NetLayer {
    /// Row-major `rows × cols` weight matrix.
    pub weight: ParamRef,
    pub rows: usize,
    pub cols: usize,
    pub bias: Option<ParamRef>,
}

/// Adds a layer's weight (and optional bias) slices to ω.
pub fn push_layer(omega: &mut HyperParams, name: &str, w: &Matrix, bias: Option<&Vector>) -> Result<NetLayer> {
    let row_major: Vec<f64> = w.transpose().iter().copied().collect();
    let weight = omega.push(&format!("{name}.weight"), Role::LayerMatrix, &[w.nrows(), w.ncols()], &row_major)?;
    let bias = match bias {
        Some(b) => {
            check_dim(w.nrows(), b.len())?;
            Some(omega.push(&format!("{name}.bias"), Role::LayerBias, &[b.len()], b.as_slice())?)
        }
        None => None,
    };
    Ok(NetLayer { weight, rows: w.nrows(), cols: w.ncols(), bias })
}

type CertificateCache = Arc<Mutex<HashMap<u64, Vec<f64>>>>;

/// `N(u) = W_L σ(… σ(W_1 u + b_1) …) + b_L`, optionally conjugated as
/// `H^{-1/2} N(H^{1/2} u)` so that it is non-expansive in a diagonal metric `H`.
#[derive(Debug, Clone)]
pub struct NetOp {
    dim: usize,
    layers: Vec<NetLayer>,
    pub activation: Activation,
    rho_bar: f64,
    enforce: bool,
    conjugate: Option<Diag>,
    cache: CertificateCache,
}

const CERT_SLACK: f64 = 1e-6;

impl NetOp {
    pub fn new(dim: usize, layers: Vec<NetLayer>, activation: Activation, rho_bar: f64) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::InvalidArgument("a network needs at least one layer".into()));
        }
        if !(rho_bar > 0.0 && rho_bar <= 1.0) {
            return Err(Error::InvalidArgument(format!("target Lipschitz constant {rho_bar} outside (0, 1]")));
        }
        let mut width = dim;
        for l in &layers {
            check_dim(width, l.cols)?;
            check_dim(l.rows * l.cols, l.weight.len)?;
            if let Some(b) = &l.bias {
                check_dim(l.rows, b.len)?;
            }
            width = l.rows;
        }
        check_dim(dim, width)?;
        Ok(Self {
            dim,
            layers,
            activation,
            rho_bar,
            enforce: true,
            conjugate: None,
            cache: Arc::new(Mutex::new(HashMap::new())),
        })
    }

    /// Conjugates the network with the diagonal metric `diag(h)`.
    pub fn with_conjugation(mut self, h: Diag) -> Result<Self> {
        check_dim(self.dim, h.len())?;
        self.conjugate = Some(h);
        Ok(self)
    }

    /// Skips normalization and the certificate check (used for ablations).
    pub fn without_certificate(mut self) -> Self {
        self.enforce = false;
        self
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn layers(&self) -> &[NetLayer] {
        &self.layers
    }

    pub fn rho_bar(&self) -> f64 {
        self.rho_bar
    }

    pub fn is_certified(&self) -> bool {
        self.enforce
    }

    pub fn conjugation(&self) -> Option<&Diag> {
        self.conjugate.as_ref()
    }

    fn layer_target(&self) -> f64 {
        self.rho_bar.powf(1.0 / self.layers.len() as f64)
    }

    fn weight(&self, l: &NetLayer, omega: &[f64]) -> Result<Matrix> {
        Ok(Matrix::from_row_slice(l.rows, l.cols, l.weight.read(omega)?))
    }

    fn weights_hash(&self, omega: &[f64]) -> Result<u64> {
        let mut all = Vec::new();
        for l in &self.layers {
            all.extend_from_slice(l.weight.read(omega)?);
        }
        Ok(fnv1a(&all))
    }

    /// Largest singular value of every layer, cached per weight hash.
    pub fn layer_norms(&self, omega: &[f64]) -> Result<Vec<f64>> {
        let key = self.weights_hash(omega)?;
        if let Some(v) = self.cache.lock().expect("certificate cache poisoned").get(&key) {
            return Ok(v.clone());
        }
        let opts = PowerIteration { tol: 1e-12, ..Default::default() };
        let mut out = Vec::with_capacity(self.layers.len());
        for l in &self.layers {
            out.push(spectral_norm_with(&self.weight(l, omega)?, &opts)?);
        }
        let mut cache = self.cache.lock().expect("certificate cache poisoned");
        if cache.len() > 256 {
            cache.clear();
        }
        cache.insert(key, out.clone());
        Ok(out)
    }

    /// Product of the layer norms; an upper bound on the Lipschitz constant
    /// (in the conjugating metric when conjugated).
    pub fn lipschitz_bound(&self, omega: &[f64]) -> Result<f64> {
        Ok(self.layer_norms(omega)?.iter().product())
    }

    /// Rescales this network's layers in place so each has norm ≤ ρ̄^{1/L}.
    pub fn normalize(&self, omega: &mut HyperParams) -> Result<()> {
        if !self.enforce {
            return Ok(());
        }
        let target = self.layer_target();
        let norms = self.layer_norms(omega.values())?;
        let values = omega.values_mut();
        for (l, sigma) in self.layers.iter().zip(norms) {
            if sigma > target {
                let scale = target / (sigma * (1.0 + 1e-9));
                for x in &mut values[l.weight.offset..l.weight.offset + l.weight.len] {
                    *x *= scale;
                }
            }
        }
        Ok(())
    }

    pub(crate) fn prepare(&self, omega: &[f64]) -> Result<NetPrepared<'_>> {
        if self.enforce {
            let target = self.layer_target();
            for (i, sigma) in self.layer_norms(omega)?.iter().enumerate() {
                if *sigma > target * (1.0 + CERT_SLACK) {
                    return Err(Error::Contract(format!(
                        "layer {i} has spectral norm {sigma:.6} above {target:.6}; normalize the network first"
                    )));
                }
            }
        }
        let mut weights = Vec::with_capacity(self.layers.len());
        for l in &self.layers {
            let bias = match &l.bias {
                Some(b) => Some(Vector::from_column_slice(b.read(omega)?)),
                None => None,
            };
            weights.push((self.weight(l, omega)?, bias));
        }
        let h = match &self.conjugate {
            Some(d) => {
                let h = d.eval(omega)?;
                if h.iter().any(|x| !(*x > 0.0)) {
                    return Err(Error::InvalidOmega("conjugating metric must be positive".into()));
                }
                Some(h)
            }
            None => None,
        };
        let sqrt_h = h.as_ref().map(|h| h.map(f64::sqrt));
        Ok(NetPrepared { op: self, weights, h, sqrt_h })
    }
}

pub(crate) struct NetPrepared<'a> {
    op: &'a NetOp,
    weights: Vec<(Matrix, Option<Vector>)>,
    h: Option<Vector>,
    sqrt_h: Option<Vector>,
}

impl NetPrepared<'_> {
    /// Inputs of every layer plus the final output.
    fn forward(&self, a: &Vector) -> (Vec<Vector>, Vec<Vector>, Vector) {
        let last = self.weights.len() - 1;
        let mut inputs = Vec::with_capacity(self.weights.len());
        let mut pre = Vec::with_capacity(self.weights.len());
        let mut x = a.clone();
        for (l, (w, b)) in self.weights.iter().enumerate() {
            let mut z = w * &x;
            if let Some(b) = b {
                z += b;
            }
            inputs.push(x);
            x = if l < last { z.map(|t| self.op.activation.eval(t)) } else { z.clone() };
            pre.push(z);
        }
        (inputs, pre, x)
    }

    pub fn apply(&self, u: &Vector) -> Result<Vector> {
        check_dim(self.op.dim, u.len())?;
        Ok(match &self.sqrt_h {
            Some(s) => self.forward(&s.component_mul(u)).2.component_div(s),
            None => self.forward(u).2,
        })
    }

    pub fn vjp(&self, u: &Vector, cot: &Vector, grad: &mut [f64]) -> Result<Vector> {
        check_dim(self.op.dim, u.len())?;
        let a = match &self.sqrt_h {
            Some(s) => s.component_mul(u),
            None => u.clone(),
        };
        let (inputs, pre, out) = self.forward(&a);
        let last = self.weights.len() - 1;
        let mut x_bar = match &self.sqrt_h {
            Some(s) => cot.component_div(s),
            None => cot.clone(),
        };
        for l in (0..self.weights.len()).rev() {
            let z_bar = if l < last {
                x_bar.zip_map(&pre[l], |g, z| g * self.op.activation.deriv(z))
            } else {
                x_bar
            };
            let layer = &self.op.layers[l];
            let x_in = &inputs[l];
            for i in 0..layer.rows {
                let zi = z_bar[i];
                if zi != 0.0 {
                    let row = layer.weight.offset + i * layer.cols;
                    for j in 0..layer.cols {
                        grad[row + j] += zi * x_in[j];
                    }
                }
            }
            if let Some(b) = &layer.bias {
                for i in 0..layer.rows {
                    grad[b.offset + i] += z_bar[i];
                }
            }
            x_bar = self.weights[l].0.tr_mul(&z_bar);
        }
        Ok(match (&self.sqrt_h, &self.op.conjugate) {
            (Some(s), Some(d)) => {
                // y = N(s∘u)/s
                let mut s_bar = x_bar.component_mul(u);
                s_bar -= cot.component_mul(&out).component_div(&s.component_mul(s));
                d.add_grad(grad, &s_bar.component_div(&(s * 2.0)));
                s.component_mul(&x_bar)
            }
            _ => x_bar,
        })
    }

    pub fn metric(&self) -> MetricMatrix {
        match &self.h {
            Some(h) => MetricMatrix::Diagonal(h.clone()),
            None => MetricMatrix::Identity(self.op.dim),
        }
    }

    pub fn metric_grad(&self, x: &Vector, y: &Vector, grad: &mut [f64]) {
        if let Some(d) = &self.op.conjugate {
            d.add_grad(grad, &x.component_mul(y));
        }
    }
}

/// Rescales every layer-matrix slice of ω so that the composition of all of
/// them has Lipschitz constant at most ρ̄ (budget ρ̄^{1/L} per layer).
pub fn normalize_net(omega: &HyperParams, rho_bar: f64) -> Result<HyperParams> {
    if !(rho_bar > 0.0 && rho_bar <= 1.0) {
        return Err(Error::InvalidArgument(format!("target Lipschitz constant {rho_bar} outside (0, 1]")));
    }
    let layers: Vec<_> = omega
        .layout()
        .iter()
        .filter(|s| s.role == Role::LayerMatrix && s.shape.len() == 2)
        .cloned()
        .collect();
    let mut out = omega.clone();
    if layers.is_empty() {
        return Ok(out);
    }
    let target = rho_bar.powf(1.0 / layers.len() as f64);
    let opts = PowerIteration { tol: 1e-12, ..Default::default() };
    for s in layers {
        let w = Matrix::from_row_slice(s.shape[0], s.shape[1], &omega.values()[s.range()]);
        let sigma = spectral_norm_with(&w, &opts)?;
        if sigma > target {
            let scale = target / (sigma * (1.0 + 1e-9));
            for x in &mut out.values_mut()[s.range()] {
                *x *= scale;
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn one_layer(w: Matrix) -> (HyperParams, NetOp) {
        let mut hp = HyperParams::new();
        let n = w.nrows();
        let l = push_layer(&mut hp, "l0", &w, None).unwrap();
        (hp, NetOp::new(n, vec![l], Activation::Identity, 1.0).unwrap())
    }

    #[test]
    fn identity_layer_is_identity() {
        let (hp, op) = one_layer(Matrix::identity(3, 3));
        let u = Vector::from_vec(vec![1.0, -2.0, 0.5]);
        assert_eq!(op.prepare(hp.values()).unwrap().apply(&u).unwrap(), u);
    }

    #[test]
    fn half_identity_halves() {
        let (hp, op) = one_layer(Matrix::identity(2, 2) * 0.5);
        let u = Vector::from_vec(vec![2.0, -4.0]);
        assert_eq!(op.prepare(hp.values()).unwrap().apply(&u).unwrap(), u * 0.5);
    }

    #[test]
    fn unnormalized_layers_are_a_contract_violation() {
        let (mut hp, op) = one_layer(Matrix::identity(2, 2) * 2.0);
        assert!(matches!(op.prepare(hp.values()), Err(Error::Contract(_))));
        op.normalize(&mut hp).unwrap();
        assert!(op.prepare(hp.values()).is_ok());
    }

    #[test]
    fn normalize_examples() {
        let mut hp = HyperParams::new();
        push_layer(&mut hp, "a", &(Matrix::identity(2, 2) * 2.0), None).unwrap();
        let out = normalize_net(&hp, 1.0).unwrap();
        let w = Matrix::from_row_slice(2, 2, out.get("a.weight").unwrap());
        assert_relative_eq!(spectral_norm_with(&w, &PowerIteration::default()).unwrap(), 1.0, epsilon = 1e-6);

        let mut hp = HyperParams::new();
        push_layer(&mut hp, "a", &(Matrix::identity(2, 2) * 0.5), None).unwrap();
        assert_eq!(normalize_net(&hp, 1.0).unwrap(), hp);

        let mut hp = HyperParams::new();
        push_layer(&mut hp, "a", &(Matrix::identity(2, 2) * 2.0), None).unwrap();
        push_layer(&mut hp, "b", &Matrix::from_row_slice(2, 2, &[0.0, 2.0, 2.0, 0.0]), None).unwrap();
        let out = normalize_net(&hp, 0.81).unwrap();
        for name in ["a.weight", "b.weight"] {
            let w = Matrix::from_row_slice(2, 2, out.get(name).unwrap());
            assert_relative_eq!(spectral_norm_with(&w, &PowerIteration::default()).unwrap(), 0.9, epsilon = 1e-6);
        }
    }

    #[test]
    fn push_layer_stores_row_major() {
        let mut hp = HyperParams::new();
        let w = Matrix::from_row_slice(2, 3, &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        push_layer(&mut hp, "l", &w, Some(&Vector::from_vec(vec![7.0, 8.0]))).unwrap();
        assert_eq!(hp.get("l.weight").unwrap(), &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        assert_eq!(hp.slice("l.weight").unwrap().shape, vec![2, 3]);
        assert_eq!(hp.get("l.bias").unwrap(), &[7.0, 8.0]);
    }
}
