//! Minimal feedforward model: dense and unrolled-convolution layers with a
//! forward pass, loss evaluation, per-sample backward pass capturing the
//! appended-1 activations and pre-activation derivatives, and sampling of
//! targets from the model predictive distribution.

pub mod conv;

use nalgebra::DVectorView;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::linalg::{DenseMatrix, DenseVector};
use crate::{Error, Result};

pub use conv::ConvSpec;

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Identity,
    Tanh,
    Relu,
    Sigmoid,
}

impl Activation {
    pub fn apply(self, s: f64) -> f64 {
        match self {
            Activation::Identity => s,
            Activation::Tanh => s.tanh(),
            Activation::Relu => s.max(0.0),
            Activation::Sigmoid => 1.0 / (1.0 + (-s).exp()),
        }
    }

    /// Derivative evaluated at the pre-activation. relu'(0) is defined as 0.
    pub fn deriv(self, s: f64) -> f64 {
        match self {
            Activation::Identity => 1.0,
            Activation::Tanh => 1.0 - s.tanh().powi(2),
            Activation::Relu => {
                if s > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Sigmoid => {
                let sig = 1.0 / (1.0 + (-s).exp());
                sig * (1.0 - sig)
            }
        }
    }
}

/// Loss kind together with its model predictive distribution: Gaussian with
/// unit covariance for the squared error, categorical for cross-entropy.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LossKind {
    SquaredError,
    CrossEntropy,
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum LayerSpec {
    Dense {
        d_in: usize,
        d_out: usize,
        activation: Activation,
    },
    Conv {
        #[serde(flatten)]
        spec: ConvSpec,
        activation: Activation,
    },
}

impl LayerSpec {
    /// Shape of the weight matrix including the bias column.
    pub fn weight_shape(&self) -> (usize, usize) {
        match self {
            LayerSpec::Dense { d_in, d_out, .. } => (*d_out, d_in + 1),
            LayerSpec::Conv { spec, .. } => (spec.out_channels, spec.patch_len() + 1),
        }
    }

    pub fn param_count(&self) -> usize {
        let (r, c) = self.weight_shape();
        r * c
    }

    pub fn input_len(&self) -> usize {
        match self {
            LayerSpec::Dense { d_in, .. } => *d_in,
            LayerSpec::Conv { spec, .. } => spec.in_channels * spec.t_in(),
        }
    }

    pub fn output_len(&self) -> usize {
        match self {
            LayerSpec::Dense { d_out, .. } => *d_out,
            LayerSpec::Conv { spec, .. } => spec.out_channels * spec.t_out(),
        }
    }

    pub fn activation(&self) -> Activation {
        match self {
            LayerSpec::Dense { activation, .. } | LayerSpec::Conv { activation, .. } => *activation,
        }
    }
}

/// One layer's slice of the flat parameter vector, with its MAT shape.
#[derive(Debug, Clone, Copy)]
pub struct Segment {
    pub offset: usize,
    pub rows: usize,
    pub cols: usize,
}

impl Segment {
    pub fn len(&self) -> usize {
        self.rows * self.cols
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Per-layer segmentation of the flat parameter vector. vec is column-major
/// throughout, so segment `i` of `theta` is `vec(W_i)`.
#[derive(Debug, Clone)]
pub struct Layout {
    pub segments: Vec<Segment>,
    pub p: usize,
}

impl Layout {
    pub fn of(layers: &[LayerSpec]) -> Layout {
        let mut segments = Vec::with_capacity(layers.len());
        let mut offset = 0;
        for l in layers {
            let (rows, cols) = l.weight_shape();
            segments.push(Segment { offset, rows, cols });
            offset += rows * cols;
        }
        Layout { segments, p: offset }
    }

    pub fn num_layers(&self) -> usize {
        self.segments.len()
    }

    /// View of segment `i` of a flat vector.
    pub fn segment<'a>(&self, u: &'a DenseVector, i: usize) -> DVectorView<'a, f64> {
        let s = self.segments[i];
        u.rows(s.offset, s.len())
    }

    /// MAT of segment `i`: the column-major reshape to the layer's weight shape.
    pub fn mat(&self, u: &DenseVector, i: usize) -> DenseMatrix {
        let s = self.segments[i];
        DenseMatrix::from_column_slice(s.rows, s.cols, self.segment(u, i).as_slice())
    }

    /// Writes `m` into segment `i` of `u`.
    pub fn set_mat(&self, u: &mut DenseVector, i: usize, m: &DenseMatrix) {
        let s = self.segments[i];
        u.rows_mut(s.offset, s.len()).copy_from_slice(m.as_slice());
    }
}

#[derive(Debug, Clone)]
pub struct Network {
    pub layers: Vec<LayerSpec>,
    pub layout: Layout,
    pub theta: DenseVector,
}

impl Network {
    /// Builds a network from layer specs and a flat parameter vector,
    /// validating that consecutive layer dimensions compose.
    pub fn new(layers: Vec<LayerSpec>, theta: DenseVector) -> Result<Network> {
        validate_chain(&layers)?;
        let layout = Layout::of(&layers);
        if theta.len() != layout.p {
            return Err(Error::DimMismatch {
                expected: layout.p,
                got: theta.len(),
            });
        }
        Ok(Network { layers, layout, theta })
    }

    /// Glorot-uniform initialization; bias columns start at zero.
    pub fn init(layers: Vec<LayerSpec>, rng: &mut ChaCha8Rng) -> Result<Network> {
        validate_chain(&layers)?;
        let layout = Layout::of(&layers);
        let mut theta = DenseVector::zeros(layout.p);
        for (l, seg) in layers.iter().zip(&layout.segments) {
            let (rows, cols) = l.weight_shape();
            let fan_in = cols - 1;
            let scale = (6.0 / (fan_in + rows) as f64).sqrt();
            // Column-major fill, bias column (last) left at zero.
            for j in 0..fan_in {
                for i in 0..rows {
                    theta[seg.offset + j * rows + i] = rng.gen_range(-scale..scale);
                }
            }
        }
        Ok(Network { layers, layout, theta })
    }

    pub fn weight(&self, i: usize) -> DenseMatrix {
        self.layout.mat(&self.theta, i)
    }

    pub fn input_len(&self) -> usize {
        self.layers[0].input_len()
    }

    pub fn output_len(&self) -> usize {
        self.layers.last().unwrap().output_len()
    }
}

fn validate_chain(layers: &[LayerSpec]) -> Result<()> {
    if layers.is_empty() {
        return Err(Error::BadConfig("network needs at least one layer".into()));
    }
    for (i, pair) in layers.windows(2).enumerate() {
        let (prev, next) = (&pair[0], &pair[1]);
        if prev.output_len() != next.input_len() {
            return Err(Error::LayerChain {
                layer: i + 1,
                detail: format!(
                    "layer {} outputs {} values but layer {} expects {}",
                    i,
                    prev.output_len(),
                    i + 1,
                    next.input_len()
                ),
            });
        }
        if let (LayerSpec::Conv { spec: a, .. }, LayerSpec::Conv { spec: b, .. }) = (prev, next) {
            if a.out_channels != b.in_channels || a.out_h() != b.in_h || a.out_w() != b.in_w {
                return Err(Error::LayerChain {
                    layer: i + 1,
                    detail: "conv spatial shape does not match previous conv output".into(),
                });
            }
        }
    }
    Ok(())
}

/// Captured per-layer quantities for one mini-batch.
#[derive(Debug, Clone)]
pub enum LayerCache {
    Dense {
        /// Activations with appended 1, (d_in + 1) x B.
        abar: DenseMatrix,
        /// Pre-activations, d_out x B.
        s: DenseMatrix,
        /// Pre-activation derivatives, d_out x B; filled by `backward`.
        g: Option<DenseMatrix>,
    },
    Conv {
        /// Per sample: patch matrix with appended-1 rows, (c_in*delta + 1) x T_out.
        patches: Vec<DenseMatrix>,
        /// Per sample: pre-activations, c_out x T_out.
        s: Vec<DenseMatrix>,
        /// Per sample: pre-activation derivatives, c_out x T_out.
        g: Option<Vec<DenseMatrix>>,
    },
}

#[derive(Debug, Clone)]
pub struct BatchCache {
    pub layers: Vec<LayerCache>,
    /// Network outputs z, d_y x B.
    pub outputs: DenseMatrix,
    pub batch: usize,
    pub loss: LossKind,
}

/// Forward propagation; captures activations and pre-activations per layer.
pub fn forward(net: &Network, inputs: &DenseMatrix, loss: LossKind) -> Result<BatchCache> {
    if inputs.nrows() != net.input_len() {
        return Err(Error::DimMismatch {
            expected: net.input_len(),
            got: inputs.nrows(),
        });
    }
    if inputs.ncols() == 0 {
        return Err(Error::EmptyBatch);
    }
    let batch = inputs.ncols();
    let mut x = inputs.clone();
    let mut caches = Vec::with_capacity(net.layers.len());
    for (i, layer) in net.layers.iter().enumerate() {
        let w = net.weight(i);
        match layer {
            LayerSpec::Dense { d_in, activation, .. } => {
                let mut abar = DenseMatrix::zeros(d_in + 1, batch);
                abar.rows_mut(0, *d_in).copy_from(&x);
                abar.row_mut(*d_in).fill(1.0);
                let s = &w * &abar;
                x = s.map(|v| activation.apply(v));
                caches.push(LayerCache::Dense { abar, s, g: None });
            }
            LayerSpec::Conv { spec, activation } => {
                let t_out = spec.t_out();
                let c_out = spec.out_channels;
                let mut patches = Vec::with_capacity(batch);
                let mut ss = Vec::with_capacity(batch);
                let mut out = DenseMatrix::zeros(c_out * t_out, batch);
                for b in 0..batch {
                    let a = DenseMatrix::from_column_slice(
                        spec.in_channels,
                        spec.t_in(),
                        x.column(b).as_slice(),
                    );
                    let p = conv::im2col(&a, spec);
                    let s = &w * &p;
                    let act = s.map(|v| activation.apply(v));
                    out.column_mut(b).copy_from_slice(act.as_slice());
                    patches.push(p);
                    ss.push(s);
                }
                x = out;
                caches.push(LayerCache::Conv { patches, s: ss, g: None });
            }
        }
    }
    Ok(BatchCache {
        layers: caches,
        outputs: x,
        batch,
        loss,
    })
}

/// Mean empirical loss over the batch.
pub fn batch_loss(outputs: &DenseMatrix, targets: &DenseMatrix, loss: LossKind) -> f64 {
    let batch = outputs.ncols();
    let mut total = 0.0;
    for b in 0..batch {
        let z = outputs.column(b);
        let y = targets.column(b);
        match loss {
            LossKind::SquaredError => {
                total += 0.5 * (z - y).norm_squared();
            }
            LossKind::CrossEntropy => {
                let logp = log_softmax(&z.clone_owned());
                total -= y.dot(&logp);
            }
        }
    }
    total / batch as f64
}

fn log_softmax(z: &DenseVector) -> DenseVector {
    let m = z.max();
    let lse = m + z.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
    z.map(|v| v - lse)
}

fn softmax(z: &DenseVector) -> DenseVector {
    log_softmax(z).map(f64::exp)
}

/// Per-sample gradients together with their batch mean.
#[derive(Debug, Clone)]
pub struct BackwardPass {
    /// One flat gradient per sample, each of length p.
    pub per_sample: Vec<DenseVector>,
    /// (1/B) sum of the per-sample gradients, reduced in ascending sample order.
    pub mean: DenseVector,
}

/// Back-propagation from `targets`; fills the pre-activation derivatives `g`
/// in the cache and returns per-sample and mean gradients.
pub fn backward(net: &Network, cache: &mut BatchCache, targets: &DenseMatrix) -> Result<BackwardPass> {
    let batch = cache.batch;
    if targets.ncols() != batch || targets.nrows() != net.output_len() {
        return Err(Error::DimMismatch {
            expected: net.output_len() * batch,
            got: targets.nrows() * targets.ncols(),
        });
    }
    let p = net.layout.p;
    let mut per_sample = vec![DenseVector::zeros(p); batch];

    // dL/dz per sample; both losses share the form (predictive mean - target).
    let mut da = DenseMatrix::zeros(net.output_len(), batch);
    for b in 0..batch {
        let z = cache.outputs.column(b).clone_owned();
        let grad = match cache.loss {
            LossKind::SquaredError => &z - targets.column(b),
            LossKind::CrossEntropy => softmax(&z) - targets.column(b),
        };
        da.column_mut(b).copy_from(&grad);
    }

    for i in (0..net.layers.len()).rev() {
        let w = net.weight(i);
        let seg = net.layout.segments[i];
        match (&net.layers[i], &mut cache.layers[i]) {
            (LayerSpec::Dense { d_in, activation, .. }, LayerCache::Dense { abar, s, g }) => {
                let gm = DenseMatrix::from_fn(s.nrows(), batch, |r, c| {
                    da[(r, c)] * activation.deriv(s[(r, c)])
                });
                for b in 0..batch {
                    let dw = gm.column(b) * abar.column(b).transpose();
                    per_sample[b]
                        .rows_mut(seg.offset, seg.len())
                        .copy_from_slice(dw.as_slice());
                }
                // Bias row of W^T dropped when propagating to the layer below.
                let w_nobias = w.columns(0, *d_in).clone_owned();
                da = w_nobias.transpose() * &gm;
                *g = Some(gm);
            }
            (LayerSpec::Conv { spec, activation }, LayerCache::Conv { patches, s, g }) => {
                let mut gs = Vec::with_capacity(batch);
                let mut da_prev = DenseMatrix::zeros(spec.in_channels * spec.t_in(), batch);
                let w_nobias = w.columns(0, spec.patch_len()).clone_owned();
                for b in 0..batch {
                    let da_b = DenseMatrix::from_column_slice(
                        spec.out_channels,
                        spec.t_out(),
                        da.column(b).as_slice(),
                    );
                    let g_b = DenseMatrix::from_fn(spec.out_channels, spec.t_out(), |r, c| {
                        da_b[(r, c)] * activation.deriv(s[b][(r, c)])
                    });
                    let dw = &g_b * patches[b].transpose();
                    per_sample[b]
                        .rows_mut(seg.offset, seg.len())
                        .copy_from_slice(dw.as_slice());
                    let cols = w_nobias.transpose() * &g_b;
                    let back = conv::col2im(&cols, spec);
                    da_prev.column_mut(b).copy_from_slice(back.as_slice());
                    gs.push(g_b);
                }
                da = da_prev;
                *g = Some(gs);
            }
            _ => unreachable!("cache layer kind matches network layer kind"),
        }
    }

    let mut mean = DenseVector::zeros(p);
    for g in &per_sample {
        mean += g;
    }
    mean /= batch as f64;
    Ok(BackwardPass { per_sample, mean })
}

/// Samples targets from the model predictive distribution: Normal(z, I) for
/// the squared error, Categorical(softmax(z)) (as one-hot vectors) for
/// cross-entropy. Deterministic given the RNG state.
pub fn sample_targets(outputs: &DenseMatrix, loss: LossKind, rng: &mut ChaCha8Rng) -> DenseMatrix {
    let (d, batch) = outputs.shape();
    let mut targets = DenseMatrix::zeros(d, batch);
    for b in 0..batch {
        match loss {
            LossKind::SquaredError => {
                for r in 0..d {
                    let noise: f64 = StandardNormal.sample(rng);
                    targets[(r, b)] = outputs[(r, b)] + noise;
                }
            }
            LossKind::CrossEntropy => {
                let probs = softmax(&outputs.column(b).clone_owned());
                let u: f64 = rng.gen();
                let mut acc = 0.0;
                let mut class = d - 1;
                for (k, pk) in probs.iter().enumerate() {
                    acc += pk;
                    if u < acc {
                        class = k;
                        break;
                    }
                }
                targets[(class, b)] = 1.0;
            }
        }
    }
    targets
}
