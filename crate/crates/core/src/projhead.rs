//! Projection heads: the small trainable maps from a frozen encoder space into
//! the shared space, with analytic forward/backward passes and `PRJW`
//! checkpoints.
//!
//! The head also carries the contrastive temperature, stored as the logit
//! scale `ln(1/τ)`. It is only updated by the optimizer when the head is
//! flagged as having a learnable temperature.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use ndarray::{Array1, Array2, Axis, Zip};
use rand::distr::{Distribution, Uniform};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub const PRJW_MAGIC: [u8; 4] = *b"PRJW";
pub const PRJW_VERSION: u16 = 1;
const FLAG_LEARNABLE_TEMPERATURE: u16 = 1;

/// Temperature every fresh head starts with.
pub const DEFAULT_TAU: f64 = 0.07;
/// Upper bound on `1/τ`.
pub const MAX_LOGIT_SCALE: f64 = 100.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Identity,
    Relu,
}

impl Activation {
    fn code(self) -> u8 {
        match self {
            Activation::Identity => 0,
            Activation::Relu => 1,
        }
    }

    fn from_code(code: u8) -> Result<Self> {
        match code {
            0 => Ok(Activation::Identity),
            1 => Ok(Activation::Relu),
            other => Err(Error::InvalidArgument(format!("unknown activation code {other}"))),
        }
    }
}

/// `y = act(W x + b)` with `W` stored `out_dim x in_dim`.
#[derive(Debug, Clone, PartialEq)]
pub struct AffineLayer {
    pub weights: Array2<f64>,
    pub bias: Array1<f64>,
    pub activation: Activation,
}

impl AffineLayer {
    pub fn new(weights: Array2<f64>, bias: Array1<f64>, activation: Activation) -> Result<Self> {
        if weights.nrows() != bias.len() {
            return Err(Error::Shape(format!(
                "bias length {} does not match weight rows {}",
                bias.len(),
                weights.nrows()
            )));
        }
        if weights.is_empty() {
            return Err(Error::InvalidArgument("layer dims must be positive".into()));
        }
        Ok(Self {
            weights,
            bias,
            activation,
        })
    }

    pub fn in_dim(&self) -> usize {
        self.weights.ncols()
    }

    pub fn out_dim(&self) -> usize {
        self.weights.nrows()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProjectionHead {
    pub layers: Vec<AffineLayer>,
    /// `ln(1/τ)`, clamped to `(-inf, ln 100]`.
    pub logit_scale: f64,
    pub learnable_temperature: bool,
}

/// Gradients laid out exactly like the owning head.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadGradients {
    pub weights: Vec<Array2<f64>>,
    pub bias: Vec<Array1<f64>>,
    pub logit_scale: f64,
}

impl HeadGradients {
    pub fn zeros_like(head: &ProjectionHead) -> Self {
        Self {
            weights: head.layers.iter().map(|l| Array2::zeros(l.weights.raw_dim())).collect(),
            bias: head.layers.iter().map(|l| Array1::zeros(l.bias.len())).collect(),
            logit_scale: 0.0,
        }
    }

    /// Flat view in the same order as [`ProjectionHead::parameters`].
    pub fn values(&self) -> impl Iterator<Item = f64> + '_ {
        self.weights
            .iter()
            .zip(&self.bias)
            .flat_map(|(w, b)| w.iter().chain(b.iter()).copied())
            .chain(std::iter::once(self.logit_scale))
    }

    pub fn is_finite(&self) -> bool {
        self.values().all(f64::is_finite)
    }

    pub fn matches(&self, head: &ProjectionHead) -> bool {
        self.weights.len() == head.layers.len()
            && self.bias.len() == head.layers.len()
            && head
                .layers
                .iter()
                .zip(self.weights.iter().zip(&self.bias))
                .all(|(l, (w, b))| w.dim() == l.weights.dim() && b.len() == l.bias.len())
    }
}

/// Per-layer activations cached by [`ProjectionHead::forward`].
#[derive(Debug, Clone)]
pub struct Tape {
    inputs: Vec<Array2<f64>>,
    pre_activations: Vec<Array2<f64>>,
}

impl Tape {
    pub fn batch_size(&self) -> usize {
        self.inputs.first().map_or(0, |x| x.nrows())
    }
}

/// Glorot-uniform weights, zero biases, `τ = 0.07`. Hidden layers use
/// `activation`; the final layer is always identity.
pub fn init_head(layer_dims: &[usize], activation: Activation, seed: u64) -> Result<ProjectionHead> {
    if layer_dims.len() < 2 {
        return Err(Error::InvalidArgument(format!(
            "a head needs at least 2 layer dims, got {}",
            layer_dims.len()
        )));
    }
    if layer_dims.contains(&0) {
        return Err(Error::InvalidArgument("layer dims must be positive".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let last = layer_dims.len() - 2;
    let layers = layer_dims
        .windows(2)
        .enumerate()
        .map(|(k, w)| {
            let (fan_in, fan_out) = (w[0], w[1]);
            let s = (6.0 / (fan_in + fan_out) as f64).sqrt();
            let dist = Uniform::new_inclusive(-s, s).expect("finite bound");
            let weights = Array2::from_shape_simple_fn((fan_out, fan_in), || dist.sample(&mut rng));
            AffineLayer {
                weights,
                bias: Array1::zeros(fan_out),
                activation: if k == last { Activation::Identity } else { activation },
            }
        })
        .collect();
    Ok(ProjectionHead {
        layers,
        logit_scale: (1.0 / DEFAULT_TAU).ln(),
        learnable_temperature: false,
    })
}

impl ProjectionHead {
    /// A single square identity layer, the untransformed side of a one-sided setup.
    pub fn identity(dim: usize) -> Self {
        Self {
            layers: vec![AffineLayer {
                weights: Array2::eye(dim),
                bias: Array1::zeros(dim),
                activation: Activation::Identity,
            }],
            logit_scale: (1.0 / DEFAULT_TAU).ln(),
            learnable_temperature: false,
        }
    }

    pub fn in_dim(&self) -> usize {
        self.layers[0].in_dim()
    }

    pub fn out_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].out_dim()
    }

    pub fn tau(&self) -> f64 {
        (-self.logit_scale).exp()
    }

    pub fn set_tau(&mut self, tau: f64) -> Result<()> {
        if !(tau.is_finite() && tau >= 1.0 / MAX_LOGIT_SCALE) {
            return Err(Error::InvalidArgument(format!(
                "temperature must be finite and >= {}, got {tau}",
                1.0 / MAX_LOGIT_SCALE
            )));
        }
        self.logit_scale = (1.0 / tau).ln().min(MAX_LOGIT_SCALE.ln());
        Ok(())
    }

    pub fn clamp_temperature(&mut self) {
        self.logit_scale = self.logit_scale.min(MAX_LOGIT_SCALE.ln());
    }

    pub fn num_parameters(&self) -> usize {
        self.layers.iter().map(|l| l.weights.len() + l.bias.len()).sum::<usize>() + 1
    }

    /// Flat mutable view: each layer's weights (row-major) then bias, then the logit scale.
    pub fn parameters_mut(&mut self) -> impl Iterator<Item = &mut f64> + '_ {
        let Self {
            layers,
            logit_scale,
            ..
        } = self;
        layers
            .iter_mut()
            .flat_map(|l| l.weights.iter_mut().chain(l.bias.iter_mut()))
            .chain(std::iter::once(logit_scale))
    }

    pub fn parameters(&self) -> impl Iterator<Item = f64> + '_ {
        self.layers
            .iter()
            .flat_map(|l| l.weights.iter().chain(l.bias.iter()).copied())
            .chain(std::iter::once(self.logit_scale))
    }

    pub fn validate(&self) -> Result<()> {
        let Some(last) = self.layers.last() else {
            return Err(Error::InvalidArgument("head has no layers".into()));
        };
        for (k, pair) in self.layers.windows(2).enumerate() {
            if pair[0].out_dim() != pair[1].in_dim() {
                return Err(Error::Shape(format!(
                    "layer {k} out_dim {} does not feed layer {} in_dim {}",
                    pair[0].out_dim(),
                    k + 1,
                    pair[1].in_dim()
                )));
            }
        }
        for (k, l) in self.layers.iter().enumerate() {
            if l.weights.nrows() != l.bias.len() || l.weights.is_empty() {
                return Err(Error::Shape(format!("layer {k} has inconsistent shapes")));
            }
            if !l.weights.iter().chain(l.bias.iter()).all(|v| v.is_finite()) {
                return Err(Error::NonFinite(format!("layer {k} parameters")));
            }
        }
        if last.activation != Activation::Identity {
            return Err(Error::InvalidArgument("final layer activation must be identity".into()));
        }
        if !self.logit_scale.is_finite() || self.logit_scale > MAX_LOGIT_SCALE.ln() {
            return Err(Error::InvalidArgument(format!(
                "logit scale {} outside (-inf, ln {MAX_LOGIT_SCALE}]",
                self.logit_scale
            )));
        }
        Ok(())
    }

    fn check_inputs(&self, inputs: &Array2<f64>) -> Result<()> {
        if inputs.ncols() != self.in_dim() {
            return Err(Error::Shape(format!(
                "input has {} columns, head expects {}",
                inputs.ncols(),
                self.in_dim()
            )));
        }
        if !inputs.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite("head input".into()));
        }
        Ok(())
    }

    /// Row-wise forward pass, keeping what [`backward`](Self::backward) needs.
    pub fn forward(&self, inputs: &Array2<f64>) -> Result<(Array2<f64>, Tape)> {
        self.check_inputs(inputs)?;
        let mut tape = Tape {
            inputs: Vec::with_capacity(self.layers.len()),
            pre_activations: Vec::with_capacity(self.layers.len()),
        };
        let mut x = inputs.clone();
        for layer in &self.layers {
            let z = x.dot(&layer.weights.t()) + &layer.bias;
            let y = activate(&z, layer.activation);
            tape.inputs.push(x);
            tape.pre_activations.push(z);
            x = y;
        }
        Ok((x, tape))
    }

    /// Forward pass without a tape.
    pub fn apply(&self, inputs: &Array2<f64>) -> Result<Array2<f64>> {
        self.check_inputs(inputs)?;
        let mut x = inputs.clone();
        for layer in &self.layers {
            let z = x.dot(&layer.weights.t()) + &layer.bias;
            x = activate(&z, layer.activation);
        }
        Ok(x)
    }

    /// Exact gradients of the forward map. The ReLU subgradient at 0 is 0.
    /// `logit_scale` in the result is left at 0; the loss owns that term.
    pub fn backward(&self, tape: &Tape, output_grads: &Array2<f64>) -> Result<(HeadGradients, Array2<f64>)> {
        if tape.inputs.len() != self.layers.len() {
            return Err(Error::Shape(format!(
                "tape has {} layers, head has {}",
                tape.inputs.len(),
                self.layers.len()
            )));
        }
        if output_grads.dim() != (tape.batch_size(), self.out_dim()) {
            return Err(Error::Shape(format!(
                "output grads {:?} do not match forward output ({}, {})",
                output_grads.dim(),
                tape.batch_size(),
                self.out_dim()
            )));
        }
        let mut grads = HeadGradients::zeros_like(self);
        let mut upstream = output_grads.clone();
        for (k, layer) in self.layers.iter().enumerate().rev() {
            let input = &tape.inputs[k];
            if input.ncols() != layer.in_dim() {
                return Err(Error::Shape(format!("tape layer {k} does not match the head")));
            }
            if layer.activation == Activation::Relu {
                Zip::from(&mut upstream)
                    .and(&tape.pre_activations[k])
                    .for_each(|g, &z| {
                        if z <= 0.0 {
                            *g = 0.0;
                        }
                    });
            }
            grads.weights[k] = upstream.t().dot(input);
            grads.bias[k] = upstream.sum_axis(Axis(0));
            upstream = upstream.dot(&layer.weights);
        }
        Ok((grads, upstream))
    }

    /// SHA-256 of the PRJW encoding, hex.
    pub fn checksum(&self) -> Result<String> {
        let mut bytes = Vec::new();
        save_head(self, &mut bytes)?;
        Ok(hex::encode(Sha256::digest(&bytes)))
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<u64> {
        let mut w = BufWriter::new(File::create(path)?);
        let n = save_head(self, &mut w)?;
        w.flush()?;
        Ok(n)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        load_head(BufReader::new(File::open(path)?))
    }
}

fn activate(z: &Array2<f64>, activation: Activation) -> Array2<f64> {
    match activation {
        Activation::Identity => z.clone(),
        Activation::Relu => z.mapv(|v| v.max(0.0)),
    }
}

/// Writes the PRJW checkpoint and returns the byte count.
pub fn save_head<W: Write>(head: &ProjectionHead, mut sink: W) -> Result<u64> {
    head.validate()?;
    let flags = if head.learnable_temperature {
        FLAG_LEARNABLE_TEMPERATURE
    } else {
        0
    };
    let mut buf = Vec::new();
    buf.extend_from_slice(&PRJW_MAGIC);
    buf.extend_from_slice(&PRJW_VERSION.to_le_bytes());
    buf.extend_from_slice(&flags.to_le_bytes());
    buf.extend_from_slice(&(head.layers.len() as u32).to_le_bytes());
    buf.extend_from_slice(&head.logit_scale.to_le_bytes());
    for layer in &head.layers {
        buf.extend_from_slice(&(layer.in_dim() as u32).to_le_bytes());
        buf.extend_from_slice(&(layer.out_dim() as u32).to_le_bytes());
        buf.push(layer.activation.code());
        // `iter()` on a standard-layout array is row-major
        for v in layer.weights.iter().chain(layer.bias.iter()) {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    sink.write_all(&buf)?;
    Ok(buf.len() as u64)
}

struct Cursor<R> {
    inner: R,
}

impl<R: Read> Cursor<R> {
    fn take<const N: usize>(&mut self, what: &str) -> Result<[u8; N]> {
        let mut buf = [0u8; N];
        self.inner.read_exact(&mut buf).map_err(|e| match e.kind() {
            std::io::ErrorKind::UnexpectedEof => Error::Truncated(what.to_string()),
            _ => Error::Io(e),
        })?;
        Ok(buf)
    }

    fn f64s(&mut self, n: usize, what: &str) -> Result<Vec<f64>> {
        (0..n).map(|_| self.take::<8>(what).map(f64::from_le_bytes)).collect()
    }
}

/// Reads and validates a PRJW checkpoint. Rejects trailing bytes.
pub fn load_head<R: Read>(source: R) -> Result<ProjectionHead> {
    let mut cur = Cursor { inner: source };
    let magic = cur.take::<4>("magic")?;
    if magic != PRJW_MAGIC {
        return Err(Error::BadMagic {
            expected: PRJW_MAGIC,
            found: magic,
        });
    }
    let version = u16::from_le_bytes(cur.take("header")?);
    if version != PRJW_VERSION {
        return Err(Error::UnsupportedVersion(version));
    }
    let flags = u16::from_le_bytes(cur.take("header")?);
    let layer_count = u32::from_le_bytes(cur.take("header")?) as usize;
    let logit_scale = f64::from_le_bytes(cur.take("header")?);
    if layer_count == 0 {
        return Err(Error::InvalidArgument("checkpoint declares zero layers".into()));
    }

    let mut layers = Vec::with_capacity(layer_count.min(64));
    for k in 0..layer_count {
        let what = format!("layer {k}");
        let in_dim = u32::from_le_bytes(cur.take(&what)?) as usize;
        let out_dim = u32::from_le_bytes(cur.take(&what)?) as usize;
        let activation = Activation::from_code(cur.take::<1>(&what)?[0])?;
        if in_dim == 0 || out_dim == 0 {
            return Err(Error::InvalidArgument(format!("layer {k} has a zero dimension")));
        }
        let weights = Array2::from_shape_vec((out_dim, in_dim), cur.f64s(in_dim * out_dim, &what)?)
            .map_err(|e| Error::Shape(e.to_string()))?;
        let bias = Array1::from_vec(cur.f64s(out_dim, &what)?);
        layers.push(AffineLayer {
            weights,
            bias,
            activation,
        });
    }
    let mut probe = [0u8; 1];
    if cur.inner.read(&mut probe)? != 0 {
        return Err(Error::TrailingBytes);
    }

    let head = ProjectionHead {
        layers,
        logit_scale,
        learnable_temperature: flags & FLAG_LEARNABLE_TEMPERATURE != 0,
    };
    head.validate()?;
    Ok(head)
}
