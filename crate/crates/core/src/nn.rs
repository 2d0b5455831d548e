//! Small dense networks with hand-written backpropagation, Adam, soft target
//! updates and an experience replay buffer.
//!
//! Networks work on row-major batches: inputs are `batch x in_dim` matrices and
//! a single vector is a batch of one. All arithmetic is `f64`.

use std::io::{Read, Write};
use std::path::Path;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use ndarray::{Array1, Array2, ArrayView2, Axis, Zip};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::NnError;

static NEXT_STAMP: AtomicU64 = AtomicU64::new(1);

fn fresh_stamp() -> u64 {
    NEXT_STAMP.fetch_add(1, Ordering::Relaxed)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Tanh,
    Identity,
}

impl Activation {
    fn apply(&self, z: &mut Array2<f64>) {
        match self {
            Activation::Relu => z.mapv_inplace(|v| v.max(0.0)),
            Activation::Tanh => z.mapv_inplace(f64::tanh),
            Activation::Identity => {}
        }
    }

    /// Derivative expressed through the activation's output.
    fn derivative_from_output(&self, y: f64) -> f64 {
        match self {
            Activation::Relu => {
                if y > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Tanh => 1.0 - y * y,
            Activation::Identity => 1.0,
        }
    }

    fn code(&self) -> u8 {
        match self {
            Activation::Relu => 0,
            Activation::Tanh => 1,
            Activation::Identity => 2,
        }
    }

    fn from_code(code: u8) -> Option<Self> {
        match code {
            0 => Some(Activation::Relu),
            1 => Some(Activation::Tanh),
            2 => Some(Activation::Identity),
            _ => None,
        }
    }
}

/// Fully connected layer `y = act(W x + b)`, `W` stored `out x in`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    pub weights: Array2<f64>,
    pub bias: Array1<f64>,
    pub activation: Activation,
}

impl Dense {
    pub fn in_dim(&self) -> usize {
        self.weights.ncols()
    }

    pub fn out_dim(&self) -> usize {
        self.weights.nrows()
    }

    pub fn zeros(in_dim: usize, out_dim: usize, activation: Activation) -> Self {
        Self {
            weights: Array2::zeros((out_dim, in_dim)),
            bias: Array1::zeros(out_dim),
            activation,
        }
    }

    /// He init for ReLU, Xavier (Glorot normal) otherwise; zero bias.
    pub fn init<R: Rng + ?Sized>(in_dim: usize, out_dim: usize, activation: Activation, rng: &mut R) -> Self {
        let std = match activation {
            Activation::Relu => (2.0 / in_dim as f64).sqrt(),
            Activation::Tanh | Activation::Identity => (2.0 / (in_dim + out_dim) as f64).sqrt(),
        };
        let normal = Normal::new(0.0, std).expect("finite std");
        let weights = Array2::from_shape_simple_fn((out_dim, in_dim), || normal.sample(rng));
        Self {
            weights,
            bias: Array1::zeros(out_dim),
            activation,
        }
    }
}

/// Multilayer perceptron. Every parameter change gets a new stamp so caches
/// from older parameters are rejected by `backward`.
#[derive(Debug, Clone)]
pub struct Mlp {
    layers: Vec<Dense>,
    stamp: u64,
}

impl PartialEq for Mlp {
    fn eq(&self, other: &Self) -> bool {
        self.layers == other.layers
    }
}

/// Activations recorded by a forward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    stamp: u64,
    /// Input to each layer (the first entry is the network input).
    inputs: Vec<Array2<f64>>,
    /// Post-activation output of the last layer.
    output: Array2<f64>,
}

impl ForwardCache {
    pub fn output(&self) -> &Array2<f64> {
        &self.output
    }
}

/// Parameter-shaped gradient (or moment) buffers.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub weights: Vec<Array2<f64>>,
    pub biases: Vec<Array1<f64>>,
}

impl Gradients {
    pub fn zeros_like(net: &Mlp) -> Self {
        Self {
            weights: net.layers.iter().map(|l| Array2::zeros(l.weights.raw_dim())).collect(),
            biases: net.layers.iter().map(|l| Array1::zeros(l.bias.raw_dim())).collect(),
        }
    }

    /// Values in parameter order: per layer, weights row-major then bias.
    pub fn flat(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for (w, b) in self.weights.iter().zip(&self.biases) {
            out.extend(w.iter());
            out.extend(b.iter());
        }
        out
    }

    pub fn scale(&mut self, factor: f64) {
        self.weights.iter_mut().for_each(|w| *w *= factor);
        self.biases.iter_mut().for_each(|b| *b *= factor);
    }

    pub fn norm(&self) -> f64 {
        self.weights
            .iter()
            .map(|w| w.iter().map(|v| v * v).sum::<f64>())
            .chain(self.biases.iter().map(|b| b.iter().map(|v| v * v).sum::<f64>()))
            .sum::<f64>()
            .sqrt()
    }
}

impl Mlp {
    pub fn from_layers(layers: Vec<Dense>) -> Result<Self, NnError> {
        if layers.is_empty() {
            return Err(NnError::Shape("network needs at least one layer".into()));
        }
        for (i, pair) in layers.windows(2).enumerate() {
            if pair[0].out_dim() != pair[1].in_dim() {
                return Err(NnError::Shape(format!(
                    "layer {i} outputs {} but layer {} expects {}",
                    pair[0].out_dim(),
                    i + 1,
                    pair[1].in_dim()
                )));
            }
        }
        for (i, l) in layers.iter().enumerate() {
            if l.bias.len() != l.out_dim() {
                return Err(NnError::Shape(format!("layer {i} bias length mismatch")));
            }
        }
        Ok(Self {
            layers,
            stamp: fresh_stamp(),
        })
    }

    /// Randomly initialised network with `sizes = [in, hidden.., out]`.
    pub fn new<R: Rng + ?Sized>(sizes: &[usize], hidden: Activation, output: Activation, rng: &mut R) -> Self {
        assert!(sizes.len() >= 2, "need input and output sizes");
        let n = sizes.len() - 1;
        let layers = (0..n)
            .map(|i| {
                let act = if i + 1 == n { output } else { hidden };
                Dense::init(sizes[i], sizes[i + 1], act, rng)
            })
            .collect();
        Self::from_layers(layers).expect("sizes chain by construction")
    }

    pub fn layers(&self) -> &[Dense] {
        &self.layers
    }

    /// Mutable access to the parameters; invalidates outstanding caches.
    pub fn layers_mut(&mut self) -> &mut [Dense] {
        self.stamp = fresh_stamp();
        &mut self.layers
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].in_dim()
    }

    pub fn output_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].out_dim()
    }

    pub fn sizes(&self) -> Vec<usize> {
        std::iter::once(self.input_dim())
            .chain(self.layers.iter().map(Dense::out_dim))
            .collect()
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(|l| l.weights.len() + l.bias.len()).sum()
    }

    /// Parameters in `Gradients::flat` order.
    pub fn flat_params(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_count());
        for l in &self.layers {
            out.extend(l.weights.iter());
            out.extend(l.bias.iter());
        }
        out
    }

    /// Mutable reference to the parameter at flat index `k`.
    pub fn param_mut(&mut self, mut k: usize) -> &mut f64 {
        self.stamp = fresh_stamp();
        for l in &mut self.layers {
            let nw = l.weights.len();
            if k < nw {
                let cols = l.weights.ncols();
                return &mut l.weights[(k / cols, k % cols)];
            }
            k -= nw;
            if k < l.bias.len() {
                return &mut l.bias[k];
            }
            k -= l.bias.len();
        }
        panic!("parameter index out of range");
    }

    fn check_input(&self, cols: usize) -> Result<(), NnError> {
        if cols != self.input_dim() {
            return Err(NnError::Shape(format!(
                "input has {cols} features, network expects {}",
                self.input_dim()
            )));
        }
        Ok(())
    }

    /// Batch forward pass without recording activations.
    pub fn predict_batch(&self, x: ArrayView2<f64>) -> Result<Array2<f64>, NnError> {
        self.check_input(x.ncols())?;
        let mut h = x.to_owned();
        for l in &self.layers {
            let mut z = h.dot(&l.weights.t());
            z += &l.bias;
            l.activation.apply(&mut z);
            h = z;
        }
        Ok(h)
    }

    pub fn predict(&self, x: &[f64]) -> Result<Vec<f64>, NnError> {
        let view = ArrayView2::from_shape((1, x.len()), x).expect("row vector");
        Ok(self.predict_batch(view)?.into_raw_vec_and_offset().0)
    }

    /// Batch forward pass recording what `backward` needs.
    pub fn forward_batch(&self, x: ArrayView2<f64>) -> Result<(Array2<f64>, ForwardCache), NnError> {
        self.check_input(x.ncols())?;
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut h = x.to_owned();
        for l in &self.layers {
            let mut z = h.dot(&l.weights.t());
            z += &l.bias;
            l.activation.apply(&mut z);
            inputs.push(std::mem::replace(&mut h, z));
        }
        let cache = ForwardCache {
            stamp: self.stamp,
            inputs,
            output: h.clone(),
        };
        Ok((h, cache))
    }

    pub fn forward(&self, x: &[f64]) -> Result<(Vec<f64>, ForwardCache), NnError> {
        let view = ArrayView2::from_shape((1, x.len()), x).expect("row vector");
        let (out, cache) = self.forward_batch(view)?;
        Ok((out.into_raw_vec_and_offset().0, cache))
    }

    /// Backpropagates `upstream = dL/d(output)` (`batch x out_dim`). Returns the
    /// parameter gradients summed over the batch and `dL/d(input)`.
    pub fn backward(&self, cache: &ForwardCache, upstream: ArrayView2<f64>) -> Result<(Gradients, Array2<f64>), NnError> {
        if cache.stamp != self.stamp || cache.inputs.len() != self.layers.len() {
            return Err(NnError::StaleCache);
        }
        if upstream.dim() != cache.output.dim() {
            return Err(NnError::Shape(format!(
                "upstream gradient {:?} does not match output {:?}",
                upstream.dim(),
                cache.output.dim()
            )));
        }
        let n = self.layers.len();
        let mut weights = Vec::with_capacity(n);
        let mut biases = Vec::with_capacity(n);
        let mut grad = upstream.to_owned();
        for i in (0..n).rev() {
            let layer = &self.layers[i];
            let out = if i + 1 == n { &cache.output } else { &cache.inputs[i + 1] };
            let act = layer.activation;
            Zip::from(&mut grad)
                .and(out)
                .for_each(|g, &y| *g *= act.derivative_from_output(y));
            weights.push(grad.t().dot(&cache.inputs[i]));
            biases.push(grad.sum_axis(Axis(0)));
            grad = grad.dot(&layer.weights);
        }
        weights.reverse();
        biases.reverse();
        Ok((Gradients { weights, biases }, grad))
    }

    fn check_same_shape(&self, other: &Mlp) -> Result<(), NnError> {
        let same = self.layers.len() == other.layers.len()
            && self
                .layers
                .iter()
                .zip(&other.layers)
                .all(|(a, b)| a.weights.dim() == b.weights.dim() && a.activation == b.activation);
        if same {
            Ok(())
        } else {
            Err(NnError::Shape(format!(
                "networks differ: {:?} vs {:?}",
                self.sizes(),
                other.sizes()
            )))
        }
    }

    /// Writes the versioned little-endian checkpoint format.
    pub fn write_to<W: Write>(&self, mut w: W) -> Result<(), NnError> {
        w.write_all(CHECKPOINT_MAGIC)?;
        w.write_all(&[CHECKPOINT_VERSION])?;
        w.write_all(&(self.layers.len() as u32).to_le_bytes())?;
        for l in &self.layers {
            w.write_all(&(l.in_dim() as u32).to_le_bytes())?;
            w.write_all(&(l.out_dim() as u32).to_le_bytes())?;
            w.write_all(&[l.activation.code()])?;
            for v in l.weights.iter().chain(l.bias.iter()) {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn read_from<R: Read>(mut r: R) -> Result<Self, NnError> {
        let mut magic = [0u8; 6];
        r.read_exact(&mut magic)?;
        if &magic != CHECKPOINT_MAGIC {
            return Err(NnError::Checkpoint("bad magic".into()));
        }
        let mut version = [0u8; 1];
        r.read_exact(&mut version)?;
        if version[0] != CHECKPOINT_VERSION {
            return Err(NnError::Checkpoint(format!("unsupported version {}", version[0])));
        }
        let read_u32 = |r: &mut R| -> Result<usize, NnError> {
            let mut b = [0u8; 4];
            r.read_exact(&mut b)?;
            Ok(u32::from_le_bytes(b) as usize)
        };
        let read_f64 = |r: &mut R| -> Result<f64, NnError> {
            let mut b = [0u8; 8];
            r.read_exact(&mut b)?;
            Ok(f64::from_le_bytes(b))
        };
        let count = read_u32(&mut r)?;
        let mut layers = Vec::with_capacity(count);
        for _ in 0..count {
            let in_dim = read_u32(&mut r)?;
            let out_dim = read_u32(&mut r)?;
            let mut code = [0u8; 1];
            r.read_exact(&mut code)?;
            let activation = Activation::from_code(code[0])
                .ok_or_else(|| NnError::Checkpoint(format!("unknown activation {}", code[0])))?;
            let mut weights = Vec::with_capacity(in_dim * out_dim);
            for _ in 0..in_dim * out_dim {
                weights.push(read_f64(&mut r)?);
            }
            let mut bias = Vec::with_capacity(out_dim);
            for _ in 0..out_dim {
                bias.push(read_f64(&mut r)?);
            }
            layers.push(Dense {
                weights: Array2::from_shape_vec((out_dim, in_dim), weights).expect("sized"),
                bias: Array1::from_vec(bias),
                activation,
            });
        }
        Self::from_layers(layers)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), NnError> {
        let file = std::fs::File::create(path)?;
        let mut w = std::io::BufWriter::new(file);
        self.write_to(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, NnError> {
        let file = std::fs::File::open(path)?;
        Self::read_from(std::io::BufReader::new(file))
    }
}

const CHECKPOINT_MAGIC: &[u8; 6] = b"CSMLP\0";
const CHECKPOINT_VERSION: u8 = 1;

/// Adam moments and step counter for one network.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Gradients,
    pub v: Gradients,
    pub step: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamState {
    pub fn new(net: &Mlp) -> Self {
        Self {
            m: Gradients::zeros_like(net),
            v: Gradients::zeros_like(net),
            step: 0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// One bias-corrected Adam descent step on `net`.
pub fn adam_step(net: &mut Mlp, grads: &Gradients, state: &mut AdamState, lr: f64) -> Result<(), NnError> {
    let shapes_match = grads.weights.len() == net.layers.len()
        && net
            .layers
            .iter()
            .zip(grads.weights.iter().zip(&grads.biases))
            .all(|(l, (w, b))| l.weights.dim() == w.dim() && l.bias.len() == b.len());
    if !shapes_match {
        return Err(NnError::Shape("gradient shapes do not match the network".into()));
    }
    state.step += 1;
    let (b1, b2, eps) = (state.beta1, state.beta2, state.eps);
    let c1 = 1.0 - b1.powf(state.step as f64);
    let c2 = 1.0 - b2.powf(state.step as f64);
    let update = |p: &mut f64, m: &mut f64, v: &mut f64, g: f64| {
        *m = b1 * *m + (1.0 - b1) * g;
        *v = b2 * *v + (1.0 - b2) * g * g;
        let m_hat = *m / c1;
        let v_hat = *v / c2;
        *p -= lr * m_hat / (v_hat.sqrt() + eps);
    };
    for (i, layer) in net.layers_mut().iter_mut().enumerate() {
        Zip::from(&mut layer.weights)
            .and(&mut state.m.weights[i])
            .and(&mut state.v.weights[i])
            .and(&grads.weights[i])
            .for_each(|p, m, v, &g| update(p, m, v, g));
        Zip::from(&mut layer.bias)
            .and(&mut state.m.biases[i])
            .and(&mut state.v.biases[i])
            .and(&grads.biases[i])
            .for_each(|p, m, v, &g| update(p, m, v, g));
    }
    Ok(())
}

/// `target <- tau * online + (1 - tau) * target`, elementwise.
pub fn soft_update(target: &mut Mlp, online: &Mlp, tau: f64) -> Result<(), NnError> {
    target.check_same_shape(online)?;
    for (t, o) in target.layers_mut().iter_mut().zip(&online.layers) {
        Zip::from(&mut t.weights)
            .and(&o.weights)
            .for_each(|t, &o| *t = tau * o + (1.0 - tau) * *t);
        Zip::from(&mut t.bias)
            .and(&o.bias)
            .for_each(|t, &o| *t = tau * o + (1.0 - tau) * *t);
    }
    Ok(())
}

/// One environment transition. States are shared so consecutive transitions
/// can reuse the same allocation.
#[derive(Debug, Clone, PartialEq)]
pub struct Transition {
    pub state: Arc<[f64]>,
    pub action: Vec<f64>,
    pub reward: f64,
    pub next_state: Arc<[f64]>,
    pub done: bool,
}

/// Fixed-capacity ring of transitions.
#[derive(Debug, Clone)]
pub struct ReplayBuffer {
    capacity: usize,
    items: Vec<Transition>,
    next: usize,
}

impl ReplayBuffer {
    pub fn new(capacity: usize) -> Self {
        assert!(capacity > 0, "replay capacity must be positive");
        Self {
            capacity,
            items: Vec::new(),
            next: 0,
        }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    /// Appends, evicting the oldest transition once full.
    pub fn push(&mut self, t: Transition) {
        if self.items.len() < self.capacity {
            self.items.push(t);
        } else {
            self.items[self.next] = t;
        }
        self.next = (self.next + 1) % self.capacity;
    }

    /// Oldest-first view of the stored transitions.
    pub fn iter(&self) -> impl Iterator<Item = &Transition> {
        let split = if self.items.len() < self.capacity { 0 } else { self.next };
        self.items[split..].iter().chain(self.items[..split].iter())
    }

    /// Uniform sample of `batch_size` distinct transitions.
    pub fn sample<R: Rng + ?Sized>(&self, batch_size: usize, rng: &mut R) -> Result<Vec<&Transition>, NnError> {
        if batch_size == 0 || self.items.len() < batch_size {
            return Err(NnError::NotReady {
                have: self.items.len(),
                need: batch_size.max(1),
            });
        }
        Ok(rand::seq::index::sample(rng, self.items.len(), batch_size)
            .into_iter()
            .map(|i| &self.items[i])
            .collect())
    }
}
