//! Fully connected network with hand-written backpropagation.
//!
//! Besides the loss gradient, the backward pass keeps what the curvature
//! blocks need: for every layer the inputs it saw (`a_root`, with a trailing
//! row of ones when the layer has a bias) and the per-sample gradient of the
//! loss with respect to its pre-activation output (`g_root`).

use crate::linalg::Matrix;
use crate::rng::{Rng, Stream};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Tanh,
    Relu,
    Identity,
}

impl Activation {
    fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Tanh => z.tanh(),
            Activation::Relu => z.max(0.0),
            Activation::Identity => z,
        }
    }

    /// Derivative at pre-activation `z`; relu'(0) = 0.
    fn derivative(self, z: f64) -> f64 {
        match self {
            Activation::Tanh => {
                let t = z.tanh();
                1.0 - t * t
            }
            Activation::Relu => {
                if z > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Identity => 1.0,
        }
    }
}

impl std::str::FromStr for Activation {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "tanh" => Ok(Activation::Tanh),
            "relu" => Ok(Activation::Relu),
            "identity" => Ok(Activation::Identity),
            other => Err(Error::Config(format!("unknown activation `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LossKind {
    /// Softmax cross-entropy against integer labels.
    CrossEntropy,
    /// `0.5 * ||z - y||²`, averaged over the batch.
    Mse,
}

impl LossKind {
    pub fn name(self) -> &'static str {
        match self {
            LossKind::CrossEntropy => "cross_entropy",
            LossKind::Mse => "mse",
        }
    }
}

impl std::str::FromStr for LossKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cross_entropy" | "ce" => Ok(LossKind::CrossEntropy),
            "mse" => Ok(LossKind::Mse),
            other => Err(Error::Config(format!("unknown loss `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Targets {
    Labels(Vec<usize>),
    Values(Matrix),
}

impl Targets {
    pub fn len(&self) -> usize {
        match self {
            Targets::Labels(l) => l.len(),
            Targets::Values(m) => m.cols(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LayerSpec {
    pub in_dim: usize,
    pub out_dim: usize,
    pub activation: Activation,
    pub has_bias: bool,
}

impl LayerSpec {
    /// Rows of the activation factor: inputs plus the bias row.
    pub fn n_a(&self) -> usize {
        self.in_dim + usize::from(self.has_bias)
    }

    pub fn n_g(&self) -> usize {
        self.out_dim
    }

    pub fn n_params(&self) -> usize {
        self.n_a() * self.n_g()
    }
}

/// Layer specs plus one `out_dim x n_a` weight matrix per layer; the bias,
/// when present, is the last column.
#[derive(Debug, Clone, PartialEq)]
pub struct NetworkState {
    layers: Vec<LayerSpec>,
    weights: Vec<Matrix>,
}

impl NetworkState {
    pub fn new(layers: Vec<LayerSpec>, weights: Vec<Matrix>) -> Result<Self> {
        validate_layers(&layers)?;
        if weights.len() != layers.len() {
            return Err(Error::dims("network weights", layers.len(), weights.len()));
        }
        for (spec, w) in layers.iter().zip(&weights) {
            if w.shape() != (spec.n_g(), spec.n_a()) {
                return Err(Error::dims(
                    "network weights",
                    format!("{}x{}", spec.n_g(), spec.n_a()),
                    format!("{}x{}", w.rows(), w.cols()),
                ));
            }
            if !w.is_finite() {
                return Err(Error::NonFinite("network weights"));
            }
        }
        Ok(NetworkState { layers, weights })
    }

    /// Uniform fan-based initialization in `[-s, s]`, `s = sqrt(6 / (in + out))`.
    /// Bias columns start at zero.
    pub fn init(layers: Vec<LayerSpec>, seed: u64) -> Result<Self> {
        validate_layers(&layers)?;
        let mut rng = Rng::new(seed, Stream::Init);
        let weights = layers
            .iter()
            .map(|spec| {
                let s = (6.0 / (spec.in_dim + spec.out_dim) as f64).sqrt();
                Matrix::from_fn(spec.n_g(), spec.n_a(), |_, j| {
                    if j == spec.in_dim {
                        0.0
                    } else {
                        rng.uniform(-s, s)
                    }
                })
            })
            .collect();
        Ok(NetworkState { layers, weights })
    }

    /// A perceptron with layer widths `dims`, `hidden` activation on every
    /// layer but the last, and identity logits.
    pub fn mlp(dims: &[usize], hidden: Activation, has_bias: bool, seed: u64) -> Result<Self> {
        Self::init(mlp_layers(dims, hidden, has_bias)?, seed)
    }

    pub fn layers(&self) -> &[LayerSpec] {
        &self.layers
    }

    pub fn weights(&self) -> &[Matrix] {
        &self.weights
    }

    pub fn n_params(&self) -> usize {
        self.layers.iter().map(LayerSpec::n_params).sum()
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].in_dim
    }

    pub fn output_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].out_dim
    }
}

pub fn mlp_layers(dims: &[usize], hidden: Activation, has_bias: bool) -> Result<Vec<LayerSpec>> {
    if dims.len() < 2 {
        return Err(Error::Config("a network needs at least input and output widths".into()));
    }
    let last = dims.len() - 2;
    Ok(dims
        .windows(2)
        .enumerate()
        .map(|(i, w)| LayerSpec {
            in_dim: w[0],
            out_dim: w[1],
            activation: if i == last { Activation::Identity } else { hidden },
            has_bias,
        })
        .collect())
}

fn validate_layers(layers: &[LayerSpec]) -> Result<()> {
    let Some(last) = layers.last() else {
        return Err(Error::Empty("network layers"));
    };
    if layers.iter().any(|l| l.in_dim == 0 || l.out_dim == 0) {
        return Err(Error::Config("layer dimensions must be positive".into()));
    }
    for pair in layers.windows(2) {
        if pair[0].out_dim != pair[1].in_dim {
            return Err(Error::dims("layer chain", pair[0].out_dim, pair[1].in_dim));
        }
    }
    if last.activation != Activation::Identity {
        return Err(Error::Config("the output layer must use the identity activation".into()));
    }
    Ok(())
}

/// Cached state of one forward pass.
#[derive(Debug, Clone)]
pub struct ForwardPass {
    pub logits: Matrix,
    /// Per-layer inputs, `n_a x B`, with the bias row of ones appended.
    pub inputs: Vec<Matrix>,
    pub preacts: Vec<Matrix>,
}

impl ForwardPass {
    pub fn batch_size(&self) -> usize {
        self.logits.cols()
    }
}

pub fn forward(net: &NetworkState, x_batch: &Matrix) -> Result<ForwardPass> {
    if x_batch.rows() != net.input_dim() {
        return Err(Error::dims("forward", net.input_dim(), x_batch.rows()));
    }
    let batch = x_batch.cols();
    let mut inputs = Vec::with_capacity(net.layers.len());
    let mut preacts = Vec::with_capacity(net.layers.len());
    let mut h = x_batch.clone();
    for (spec, w) in net.layers.iter().zip(&net.weights) {
        let a = if spec.has_bias {
            Matrix::from_fn(spec.n_a(), batch, |i, j| if i < spec.in_dim { h[(i, j)] } else { 1.0 })
        } else {
            h
        };
        let z = w.matmul(&a)?;
        h = Matrix::from_fn(z.rows(), batch, |i, j| spec.activation.apply(z[(i, j)]));
        inputs.push(a);
        preacts.push(z);
    }
    if !h.is_finite() {
        return Err(Error::Divergence("network output"));
    }
    Ok(ForwardPass {
        logits: h,
        inputs,
        preacts,
    })
}

/// Everything the preconditioners need from one mini-batch.
#[derive(Debug, Clone)]
pub struct BatchCapture {
    /// Layer inputs, `n_a x B`.
    pub a_roots: Vec<Matrix>,
    /// Per-sample loss gradients with respect to pre-activations, `n_g x B`.
    pub g_roots: Vec<Matrix>,
    /// `(1/B) g_root a_rootᵀ`, the batch-mean weight gradient, `n_g x n_a`.
    pub mean_gradients: Vec<Matrix>,
    pub batch_size: usize,
}

impl BatchCapture {
    pub fn n_layers(&self) -> usize {
        self.a_roots.len()
    }

    /// Euclidean norm of all mean gradients stacked.
    pub fn grad_norm(&self) -> f64 {
        self.mean_gradients
            .iter()
            .map(|g| g.frobenius_norm().powi(2))
            .sum::<f64>()
            .sqrt()
    }
}

fn check_targets(logits: &Matrix, targets: &Targets, kind: LossKind) -> Result<()> {
    let batch = logits.cols();
    if targets.len() != batch {
        return Err(Error::dims("targets", batch, targets.len()));
    }
    match (kind, targets) {
        (LossKind::CrossEntropy, Targets::Labels(labels)) => {
            if let Some(&bad) = labels.iter().find(|&&l| l >= logits.rows()) {
                return Err(Error::dims("label range", format!("< {}", logits.rows()), bad));
            }
            Ok(())
        }
        (LossKind::Mse, Targets::Values(y)) => {
            if y.shape() != logits.shape() {
                return Err(Error::dims(
                    "regression targets",
                    format!("{:?}", logits.shape()),
                    format!("{:?}", y.shape()),
                ));
            }
            Ok(())
        }
        (LossKind::CrossEntropy, Targets::Values(_)) => {
            Err(Error::Config("cross-entropy needs integer labels".into()))
        }
        (LossKind::Mse, Targets::Labels(_)) => {
            Err(Error::Config("mse needs real-valued targets".into()))
        }
    }
}

fn log_softmax_col(z: &[f64]) -> Vec<f64> {
    let max = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + z.iter().map(|&x| (x - max).exp()).sum::<f64>().ln();
    z.iter().map(|&x| x - lse).collect()
}

/// Batch-mean loss.
pub fn loss(logits: &Matrix, targets: &Targets, kind: LossKind) -> Result<f64> {
    if targets.is_empty() {
        return Err(Error::Empty("batch"));
    }
    check_targets(logits, targets, kind)?;
    let batch = logits.cols();
    let total: f64 = match targets {
        Targets::Labels(labels) => labels
            .iter()
            .enumerate()
            .map(|(j, &y)| -log_softmax_col(logits.col(j))[y])
            .sum(),
        Targets::Values(y) => (0..batch)
            .map(|j| {
                0.5 * logits
                    .col(j)
                    .iter()
                    .zip(y.col(j))
                    .map(|(z, t)| (z - t).powi(2))
                    .sum::<f64>()
            })
            .sum(),
    };
    let value = total / batch as f64;
    if !value.is_finite() {
        return Err(Error::Divergence("loss"));
    }
    Ok(value)
}

/// Argmax match rate; ties go to the lowest class index.
pub fn accuracy(logits: &Matrix, labels: &[usize]) -> f64 {
    let hits = labels
        .iter()
        .enumerate()
        .filter(|&(j, &y)| argmax(logits.col(j)) == y)
        .count();
    hits as f64 / labels.len().max(1) as f64
}

fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

/// Per-sample gradient of the loss at the output pre-activations.
fn output_gradient(logits: &Matrix, targets: &Targets) -> Matrix {
    match targets {
        Targets::Labels(labels) => {
            let mut g = Matrix::zeros(logits.rows(), logits.cols());
            for (j, &y) in labels.iter().enumerate() {
                for (i, lp) in log_softmax_col(logits.col(j)).into_iter().enumerate() {
                    g[(i, j)] = lp.exp() - if i == y { 1.0 } else { 0.0 };
                }
            }
            g
        }
        Targets::Values(y) => logits.sub(y).expect("shapes checked"),
    }
}

pub fn backward(
    net: &NetworkState,
    pass: &ForwardPass,
    targets: &Targets,
    kind: LossKind,
) -> Result<BatchCapture> {
    let batch = pass.batch_size();
    if targets.is_empty() {
        return Err(Error::Empty("batch"));
    }
    check_targets(&pass.logits, targets, kind)?;
    let n_layers = net.layers.len();
    let mut g_roots = Vec::with_capacity(n_layers);
    let mut delta = output_gradient(&pass.logits, targets);
    for i in (0..n_layers).rev() {
        if i > 0 {
            let spec = &net.layers[i];
            let prev = &net.layers[i - 1];
            let w = &net.weights[i];
            let z_prev = &pass.preacts[i - 1];
            let back = Matrix::from_fn(spec.in_dim, batch, |r, j| {
                let s: f64 = (0..spec.out_dim).map(|k| w[(k, r)] * delta[(k, j)]).sum();
                s * prev.activation.derivative(z_prev[(r, j)])
            });
            crate::telemetry::add_flops(spec.in_dim * spec.out_dim * batch);
            g_roots.push(std::mem::replace(&mut delta, back));
        } else {
            g_roots.push(delta.clone());
        }
    }
    g_roots.reverse();
    let inv_b = 1.0 / batch as f64;
    let mut mean_gradients = Vec::with_capacity(n_layers);
    for (g, a) in g_roots.iter().zip(&pass.inputs) {
        if !g.is_finite() {
            return Err(Error::Divergence("gradient"));
        }
        mean_gradients.push(g.matmul_t(a)?.scaled(inv_b));
    }
    Ok(BatchCapture {
        a_roots: pass.inputs.clone(),
        g_roots,
        mean_gradients,
        batch_size: batch,
    })
}

/// `weights - eta * direction`, layer by layer.
pub fn apply_update(net: &NetworkState, directions: &[Matrix], eta: f64) -> Result<NetworkState> {
    if !eta.is_finite() {
        return Err(Error::NonFinite("step size"));
    }
    if directions.len() != net.weights.len() {
        return Err(Error::dims("update", net.weights.len(), directions.len()));
    }
    let mut weights = Vec::with_capacity(directions.len());
    for (w, d) in net.weights.iter().zip(directions) {
        if w.shape() != d.shape() {
            return Err(Error::dims(
                "update",
                format!("{:?}", w.shape()),
                format!("{:?}", d.shape()),
            ));
        }
        if !d.is_finite() {
            return Err(Error::NonFinite("update direction"));
        }
        weights.push(Matrix::from_fn(w.rows(), w.cols(), |i, j| {
            w[(i, j)] - eta * d[(i, j)]
        }));
    }
    Ok(NetworkState {
        layers: net.layers.clone(),
        weights,
    })
}
