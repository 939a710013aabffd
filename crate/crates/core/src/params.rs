//! The flat hyper-training variable ω and the references operators use to read it.

use std::fmt;

use crate::error::{Error, Result};
use crate::metric::Vector;

/// What a slice of ω parameterizes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Role {
    StepSize,
    Penalty,
    Threshold,
    MetricDiagonal,
    LayerMatrix,
    LayerBias,
}

impl Role {
    /// Step sizes and penalties must stay strictly positive.
    pub fn requires_positive(self) -> bool {
        matches!(self, Role::StepSize | Role::Penalty)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Role::StepSize => "step-size",
            Role::Penalty => "penalty",
            Role::Threshold => "threshold",
            Role::MetricDiagonal => "metric-diagonal",
            Role::LayerMatrix => "layer-matrix",
            Role::LayerBias => "layer-bias",
        }
    }
}

impl fmt::Display for Role {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Slice {
    pub name: String,
    pub offset: usize,
    /// Row-major shape; a scalar has shape `[1]`.
    pub shape: Vec<usize>,
    pub role: Role,
}

impl Slice {
    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn range(&self) -> std::ops::Range<usize> {
        self.offset..self.offset + self.len()
    }

    pub fn as_ref(&self) -> ParamRef {
        ParamRef { offset: self.offset, len: self.len() }
    }
}

/// ω together with its layout.
#[derive(Debug, Clone, PartialEq)]
pub struct HyperParams {
    values: Vec<f64>,
    layout: Vec<Slice>,
}

impl Default for HyperParams {
    fn default() -> Self {
        Self::new()
    }
}

impl HyperParams {
    pub fn new() -> Self {
        Self { values: Vec::new(), layout: Vec::new() }
    }

    /// Appends a slice and returns a reference to it.
    pub fn push(&mut self, name: &str, role: Role, shape: &[usize], values: &[f64]) -> Result<ParamRef> {
        let len: usize = shape.iter().product();
        if len != values.len() {
            return Err(Error::Layout(format!(
                "slice {name}: shape {shape:?} holds {len} values, got {}",
                values.len()
            )));
        }
        if self.slice(name).is_some() {
            return Err(Error::Layout(format!("duplicate slice name {name}")));
        }
        let offset = self.values.len();
        self.values.extend_from_slice(values);
        self.layout.push(Slice { name: name.to_string(), offset, shape: shape.to_vec(), role });
        Ok(ParamRef { offset, len })
    }

    pub fn push_scalar(&mut self, name: &str, role: Role, value: f64) -> Result<ParamRef> {
        self.push(name, role, &[1], &[value])
    }

    pub fn from_parts(values: Vec<f64>, layout: Vec<Slice>) -> Result<Self> {
        let hp = Self { values, layout };
        hp.validate_layout()?;
        Ok(hp)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn layout(&self) -> &[Slice] {
        &self.layout
    }

    pub fn slice(&self, name: &str) -> Option<&Slice> {
        self.layout.iter().find(|s| s.name == name)
    }

    pub fn get(&self, name: &str) -> Result<&[f64]> {
        let s = self
            .slice(name)
            .ok_or_else(|| Error::Layout(format!("no slice named {name}")))?;
        Ok(&self.values[s.range()])
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut [f64]> {
        let r = self
            .slice(name)
            .ok_or_else(|| Error::Layout(format!("no slice named {name}")))?
            .range();
        Ok(&mut self.values[r])
    }

    pub fn scalar(&self, name: &str) -> Result<f64> {
        let v = self.get(name)?;
        match v {
            [x] => Ok(*x),
            _ => Err(Error::Layout(format!("slice {name} is not a scalar"))),
        }
    }

    pub fn set_scalar(&mut self, name: &str, value: f64) -> Result<()> {
        match self.get_mut(name)? {
            [x] => {
                *x = value;
                Ok(())
            }
            _ => Err(Error::Layout(format!("slice {name} is not a scalar"))),
        }
    }

    /// Checks that the slices tile the value vector without gaps or overlaps.
    pub fn validate_layout(&self) -> Result<()> {
        let mut sorted: Vec<&Slice> = self.layout.iter().collect();
        sorted.sort_by_key(|s| s.offset);
        let mut next = 0;
        for s in sorted {
            if s.offset != next {
                return Err(Error::Layout(format!(
                    "slice {} starts at {}, expected {next}",
                    s.name, s.offset
                )));
            }
            next += s.len();
        }
        if next != self.values.len() {
            return Err(Error::Layout(format!(
                "layout covers {next} values, vector has {}",
                self.values.len()
            )));
        }
        Ok(())
    }

    /// Layout plus finiteness plus positivity of step-size and penalty slices.
    pub fn validate(&self) -> Result<()> {
        self.validate_layout()?;
        if let Some(i) = self.values.iter().position(|x| !x.is_finite()) {
            return Err(Error::InvalidOmega(format!("entry {i} is not finite")));
        }
        for s in &self.layout {
            if s.role.requires_positive() && self.values[s.range()].iter().any(|x| *x <= 0.0) {
                return Err(Error::InvalidOmega(format!("{} slice {} must be positive", s.role, s.name)));
            }
        }
        Ok(())
    }

    /// Same names, offsets, shapes and roles.
    pub fn same_layout(&self, other: &HyperParams) -> bool {
        self.layout == other.layout
    }

    /// Hash of the values (FNV-1a over the IEEE bit patterns).
    pub fn value_hash(&self) -> u64 {
        fnv1a(&self.values)
    }

    /// Indices belonging to the named slices.
    pub fn mask_for(&self, names: &[String]) -> Result<Vec<bool>> {
        let mut mask = vec![false; self.values.len()];
        for n in names {
            let s = self
                .slice(n)
                .ok_or_else(|| Error::Layout(format!("no slice named {n}")))?;
            for i in s.range() {
                mask[i] = true;
            }
        }
        Ok(mask)
    }
}

pub(crate) fn fnv1a(values: &[f64]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for v in values {
        for b in v.to_bits().to_le_bytes() {
            h ^= b as u64;
            h = h.wrapping_mul(0x0100_0000_01b3);
        }
    }
    h
}

/// Box constraints defining Ω, one interval per entry of ω.
#[derive(Debug, Clone, PartialEq)]
pub struct OmegaBounds {
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
}

impl OmegaBounds {
    pub fn unbounded(len: usize) -> Self {
        Self { lower: vec![f64::NEG_INFINITY; len], upper: vec![f64::INFINITY; len] }
    }

    /// Unbounded everywhere except that positive roles get a tiny positive floor.
    pub fn for_params(omega: &HyperParams) -> Self {
        let mut b = Self::unbounded(omega.len());
        for s in omega.layout() {
            if s.role.requires_positive() {
                for i in s.range() {
                    b.lower[i] = 1e-8;
                }
            }
        }
        b
    }

    /// Sets the interval of every entry of a named slice.
    pub fn set(&mut self, omega: &HyperParams, name: &str, lo: f64, hi: f64) -> Result<()> {
        if !(lo <= hi) {
            return Err(Error::InvalidArgument(format!("bounds for {name}: {lo} > {hi}")));
        }
        let s = omega
            .slice(name)
            .ok_or_else(|| Error::Layout(format!("no slice named {name}")))?;
        for i in s.range() {
            self.lower[i] = lo;
            self.upper[i] = hi;
        }
        Ok(())
    }

    pub fn with(mut self, omega: &HyperParams, name: &str, lo: f64, hi: f64) -> Result<Self> {
        self.set(omega, name, lo, hi)?;
        Ok(self)
    }

    pub fn len(&self) -> usize {
        self.lower.len()
    }

    pub fn is_empty(&self) -> bool {
        self.lower.is_empty()
    }

    pub fn clamp(&self, values: &mut [f64]) {
        for ((x, lo), hi) in values.iter_mut().zip(&self.lower).zip(&self.upper) {
            *x = x.clamp(*lo, *hi);
        }
    }

    pub fn contains(&self, values: &[f64]) -> bool {
        values.len() == self.lower.len()
            && values
                .iter()
                .zip(self.lower.iter().zip(&self.upper))
                .all(|(x, (lo, hi))| *x >= *lo && *x <= *hi)
    }
}

/// Location of a slice inside ω.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamRef {
    pub offset: usize,
    pub len: usize,
}

impl ParamRef {
    pub fn read<'a>(&self, omega: &'a [f64]) -> Result<&'a [f64]> {
        omega
            .get(self.offset..self.offset + self.len)
            .ok_or_else(|| Error::Layout(format!("reference {self:?} outside ω of length {}", omega.len())))
    }
}

/// A scalar operator parameter, either constant or read from ω.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Scalar {
    Fixed(f64),
    Learned(usize),
}

impl Scalar {
    pub fn learned(r: ParamRef) -> Self {
        debug_assert_eq!(r.len, 1);
        Scalar::Learned(r.offset)
    }

    pub fn eval(&self, omega: &[f64]) -> Result<f64> {
        match self {
            Scalar::Fixed(x) => Ok(*x),
            Scalar::Learned(i) => omega
                .get(*i)
                .copied()
                .ok_or_else(|| Error::Layout(format!("scalar index {i} outside ω"))),
        }
    }

    pub fn add_grad(&self, grad: &mut [f64], g: f64) {
        if let Scalar::Learned(i) = self {
            grad[*i] += g;
        }
    }

    pub fn offset(&self) -> Option<usize> {
        match self {
            Scalar::Fixed(_) => None,
            Scalar::Learned(i) => Some(*i),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Segment {
    Fixed(Vector),
    Broadcast { len: usize, value: Scalar },
    Learned(ParamRef),
}

impl Segment {
    fn len(&self) -> usize {
        match self {
            Segment::Fixed(v) => v.len(),
            Segment::Broadcast { len, .. } => *len,
            Segment::Learned(r) => r.len,
        }
    }
}

/// A vector-valued operator parameter (metric diagonals, thresholds) assembled
/// from constant, broadcast-scalar and per-entry learned segments.
#[derive(Debug, Clone, PartialEq)]
pub struct Diag {
    pub segments: Vec<Segment>,
}

impl Diag {
    pub fn fixed(v: Vector) -> Self {
        Self { segments: vec![Segment::Fixed(v)] }
    }

    pub fn constant(len: usize, value: f64) -> Self {
        Self::broadcast(len, Scalar::Fixed(value))
    }

    pub fn broadcast(len: usize, value: Scalar) -> Self {
        Self { segments: vec![Segment::Broadcast { len, value }] }
    }

    pub fn learned(r: ParamRef) -> Self {
        Self { segments: vec![Segment::Learned(r)] }
    }

    pub fn then(mut self, other: Diag) -> Self {
        self.segments.extend(other.segments);
        self
    }

    pub fn len(&self) -> usize {
        self.segments.iter().map(Segment::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// True when no segment reads ω.
    pub fn is_fixed(&self) -> bool {
        self.segments.iter().all(|s| match s {
            Segment::Fixed(_) => true,
            Segment::Broadcast { value, .. } => matches!(value, Scalar::Fixed(_)),
            Segment::Learned(_) => false,
        })
    }

    pub fn eval(&self, omega: &[f64]) -> Result<Vector> {
        let mut out = Vec::with_capacity(self.len());
        for s in &self.segments {
            match s {
                Segment::Fixed(v) => out.extend(v.iter().copied()),
                Segment::Broadcast { len, value } => {
                    let x = value.eval(omega)?;
                    out.extend(std::iter::repeat_n(x, *len));
                }
                Segment::Learned(r) => out.extend_from_slice(r.read(omega)?),
            }
        }
        Ok(Vector::from_vec(out))
    }

    /// Accumulates `∂/∂ω ⟨cot, diag(ω)⟩` into `grad`.
    pub fn add_grad(&self, grad: &mut [f64], cot: &Vector) {
        let mut off = 0;
        for s in &self.segments {
            let n = s.len();
            match s {
                Segment::Fixed(_) => {}
                Segment::Broadcast { value, .. } => {
                    value.add_grad(grad, cot.rows(off, n).sum());
                }
                Segment::Learned(r) => {
                    for i in 0..n {
                        grad[r.offset + i] += cot[off + i];
                    }
                }
            }
            off += n;
        }
    }
}
