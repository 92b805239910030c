//! Fully connected networks: plain evaluation, tape evaluation and a compact
//! binary encoding for checkpoints.

use rand::Rng;
use thiserror::Error;

use crate::diff::{Graph, Var};
use crate::linalg::{gemm, Matrix};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MlpError {
    #[error("input has {got} values, network expects {expected}")]
    InputDim { expected: usize, got: usize },
    #[error("invalid architecture: {0}")]
    Architecture(String),
    #[error("malformed network encoding: {0}")]
    Decode(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Tanh,
    Identity,
}

impl Activation {
    fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Relu => x.max(0.0),
            Activation::Tanh => x.tanh(),
            Activation::Identity => x,
        }
    }

    fn tag(self) -> u8 {
        match self {
            Activation::Relu => 0,
            Activation::Tanh => 1,
            Activation::Identity => 2,
        }
    }

    fn from_tag(tag: u8) -> Option<Self> {
        match tag {
            0 => Some(Activation::Relu),
            1 => Some(Activation::Tanh),
            2 => Some(Activation::Identity),
            _ => None,
        }
    }
}

/// Multilayer perceptron. Layer `k` maps `x ↦ act_k(x·W_k + b_k)` with
/// `W_k` stored as `in × out` and `b_k` as a `1 × out` row.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    widths: Vec<usize>,
    activations: Vec<Activation>,
    /// `[W_0, b_0, W_1, b_1, ...]`
    params: Vec<Matrix>,
}

const MAGIC: &[u8; 4] = b"MLP1";
const MAX_LAYERS: usize = 64;
const MAX_WIDTH: usize = 1 << 16;
const MAX_PARAMS: usize = 1 << 26;

impl Mlp {
    /// Randomly initialised network with `hidden` activations between layers
    /// and `output` on the last one. Weights and biases are drawn uniformly
    /// from `±1/sqrt(fan_in)`.
    pub fn new<R: Rng + ?Sized>(
        widths: &[usize],
        hidden: Activation,
        output: Activation,
        rng: &mut R,
    ) -> Result<Self, MlpError> {
        let mut net = Self::zeros(widths, hidden, output)?;
        for k in 0..net.num_layers() {
            let bound = 1.0 / (widths[k] as f64).sqrt();
            for p in [2 * k, 2 * k + 1] {
                for v in net.params[p].as_mut_slice() {
                    *v = rng.gen_range(-bound..bound);
                }
            }
        }
        Ok(net)
    }

    pub fn zeros(widths: &[usize], hidden: Activation, output: Activation) -> Result<Self, MlpError> {
        validate_widths(widths)?;
        let layers = widths.len() - 1;
        let mut activations = vec![hidden; layers];
        activations[layers - 1] = output;
        let params = (0..layers)
            .flat_map(|k| [Matrix::zeros(widths[k], widths[k + 1]), Matrix::zeros(1, widths[k + 1])])
            .collect();
        Ok(Self { widths: widths.to_vec(), activations, params })
    }

    /// Builds a network from explicit `(weight, bias)` pairs.
    pub fn from_layers(layers: Vec<(Matrix, Matrix)>, activations: Vec<Activation>) -> Result<Self, MlpError> {
        if layers.is_empty() || layers.len() != activations.len() {
            return Err(MlpError::Architecture(format!(
                "{} layers with {} activations",
                layers.len(),
                activations.len()
            )));
        }
        let mut widths = vec![layers[0].0.rows()];
        for (k, (w, b)) in layers.iter().enumerate() {
            if w.rows() != widths[k] {
                return Err(MlpError::Architecture(format!(
                    "layer {k} expects {} inputs but previous layer emits {}",
                    w.rows(),
                    widths[k]
                )));
            }
            if b.rows() != 1 || b.cols() != w.cols() {
                return Err(MlpError::Architecture(format!(
                    "layer {k} bias is {}x{}, expected 1x{}",
                    b.rows(),
                    b.cols(),
                    w.cols()
                )));
            }
            widths.push(w.cols());
        }
        validate_widths(&widths)?;
        let params = layers.into_iter().flat_map(|(w, b)| [w, b]).collect();
        Ok(Self { widths, activations, params })
    }

    pub fn widths(&self) -> &[usize] {
        &self.widths
    }

    pub fn activations(&self) -> &[Activation] {
        &self.activations
    }

    pub fn input_dim(&self) -> usize {
        self.widths[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.widths.last().expect("validated widths")
    }

    pub fn num_layers(&self) -> usize {
        self.widths.len() - 1
    }

    pub fn num_params(&self) -> usize {
        self.params.iter().map(Matrix::len).sum()
    }

    pub fn params(&self) -> &[Matrix] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Matrix] {
        &mut self.params
    }

    pub fn apply(&self, x: &[f64]) -> Result<Vec<f64>, MlpError> {
        Ok(self.apply_batch(&Matrix::row_vector(x))?.into_vec())
    }

    /// Evaluates every row of `x`.
    pub fn apply_batch(&self, x: &Matrix) -> Result<Matrix, MlpError> {
        if x.cols() != self.input_dim() {
            return Err(MlpError::InputDim { expected: self.input_dim(), got: x.cols() });
        }
        let mut h = x.clone();
        for (k, act) in self.activations.iter().enumerate() {
            let mut z = gemm(&h, false, &self.params[2 * k], false);
            let bias = self.params[2 * k + 1].as_slice();
            for r in 0..z.rows() {
                for (v, b) in z.row_mut(r).iter_mut().zip(bias) {
                    *v = act.apply(*v + b);
                }
            }
            h = z;
        }
        Ok(h)
    }

    /// Places the parameters on `g`, as trainable leaves or as constants.
    pub fn bind(&self, g: &mut Graph, trainable: bool) -> Vec<Var> {
        self.params
            .iter()
            .map(|p| if trainable { g.param(p.clone()) } else { g.constant(p.clone()) })
            .collect()
    }

    /// Tape evaluation using parameters previously placed by [`Mlp::bind`].
    /// Performs the same arithmetic as [`Mlp::apply_batch`].
    pub fn forward(&self, g: &mut Graph, params: &[Var], x: Var) -> Var {
        assert_eq!(params.len(), self.params.len(), "forward: parameter count mismatch");
        assert_eq!(g.value(x).cols(), self.input_dim(), "forward: input width mismatch");
        let mut h = x;
        for (k, act) in self.activations.iter().enumerate() {
            let z = g.matmul(h, params[2 * k]);
            let z = g.add_row(z, params[2 * k + 1]);
            h = match act {
                Activation::Relu => g.relu(z),
                Activation::Tanh => g.tanh(z),
                Activation::Identity => z,
            };
        }
        h
    }

    /// Replaces every parameter matrix; shapes must match the current ones.
    pub fn set_params(&mut self, params: Vec<Matrix>) -> Result<(), MlpError> {
        if params.len() != self.params.len()
            || params.iter().zip(&self.params).any(|(a, b)| a.shape() != b.shape())
        {
            return Err(MlpError::Architecture("parameter shapes differ".into()));
        }
        self.params = params;
        Ok(())
    }

    pub fn same_shape(&self, other: &Mlp) -> bool {
        self.widths == other.widths && self.activations == other.activations
    }

    /// `self ← (1 − τ)·self + τ·online`, elementwise.
    pub fn polyak_from(&mut self, online: &Mlp, tau: f64) -> Result<(), MlpError> {
        if !self.same_shape(online) {
            return Err(MlpError::Architecture(format!(
                "polyak between {:?} and {:?}",
                self.widths, online.widths
            )));
        }
        for (t, o) in self.params.iter_mut().zip(&online.params) {
            for (tv, ov) in t.as_mut_slice().iter_mut().zip(o.as_slice()) {
                *tv = (1.0 - tau) * *tv + tau * ov;
            }
        }
        Ok(())
    }

    pub fn flat_params(&self) -> Vec<f64> {
        self.params.iter().flat_map(|p| p.as_slice().iter().copied()).collect()
    }

    /// Binary encoding: magic, layer count, widths, activation tags, then
    /// every parameter as little-endian `f64`.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(16 + 8 * self.num_params());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(self.num_layers() as u32).to_le_bytes());
        for w in &self.widths {
            out.extend_from_slice(&(*w as u32).to_le_bytes());
        }
        out.extend(self.activations.iter().map(|a| a.tag()));
        for p in &self.params {
            for v in p.as_slice() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, MlpError> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(MlpError::Decode("bad magic".into()));
        }
        let layers = r.u32()? as usize;
        if layers == 0 || layers > MAX_LAYERS {
            return Err(MlpError::Decode(format!("{layers} layers")));
        }
        let widths = (0..=layers).map(|_| r.u32().map(|w| w as usize)).collect::<Result<Vec<_>, _>>()?;
        validate_widths(&widths).map_err(|e| MlpError::Decode(e.to_string()))?;
        let activations = r
            .take(layers)?
            .iter()
            .map(|&t| Activation::from_tag(t).ok_or_else(|| MlpError::Decode(format!("activation tag {t}"))))
            .collect::<Result<Vec<_>, _>>()?;
        let mut params = Vec::with_capacity(2 * layers);
        for k in 0..layers {
            for (rows, cols) in [(widths[k], widths[k + 1]), (1, widths[k + 1])] {
                let data = (0..rows * cols).map(|_| r.f64()).collect::<Result<Vec<_>, _>>()?;
                params.push(Matrix::from_vec(rows, cols, data).expect("sized by construction"));
            }
        }
        if r.pos != bytes.len() {
            return Err(MlpError::Decode(format!("{} trailing bytes", bytes.len() - r.pos)));
        }
        Ok(Self { widths, activations, params })
    }
}

fn validate_widths(widths: &[usize]) -> Result<(), MlpError> {
    if widths.len() < 2 || widths.len() > MAX_LAYERS + 1 {
        return Err(MlpError::Architecture(format!("{} widths", widths.len())));
    }
    if let Some(w) = widths.iter().find(|&&w| w == 0 || w > MAX_WIDTH) {
        return Err(MlpError::Architecture(format!("layer width {w}")));
    }
    let total: usize = widths.windows(2).map(|p| p[0] * p[1] + p[1]).sum();
    if total > MAX_PARAMS {
        return Err(MlpError::Architecture(format!("{total} parameters")));
    }
    Ok(())
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], MlpError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| MlpError::Decode("truncated".into()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32, MlpError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn f64(&mut self) -> Result<f64, MlpError> {
        let v = f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes"));
        if v.is_finite() {
            Ok(v)
        } else {
            Err(MlpError::Decode("non-finite parameter".into()))
        }
    }
}
