//! Per-node MLP encoder with unit-sphere outputs, manual backprop and AdamW.

use ndarray::{Array1, Array2, ArrayView2, Axis, Zip};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::objective::FeatureMatrix;

/// Floor on the column norm in the output normalization.
pub const NORM_FLOOR: f64 = 1e-12;
const ADAM_EPS: f64 = 1e-8;
const CHECKPOINT_MAGIC: &[u8; 4] = b"MC2E";
const CHECKPOINT_VERSION: u8 = 1;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    #[default]
    Elu,
}

impl Activation {
    fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Relu => x.max(0.0),
            Activation::Elu => {
                if x > 0.0 {
                    x
                } else {
                    x.exp_m1()
                }
            }
        }
    }

    fn derivative(self, x: f64) -> f64 {
        match (self, x > 0.0) {
            (_, true) => 1.0,
            (Activation::Relu, false) => 0.0,
            (Activation::Elu, false) => x.exp(),
        }
    }

    fn code(self) -> u8 {
        match self {
            Activation::Relu => 0,
            Activation::Elu => 1,
        }
    }

    fn from_code(code: u8) -> Result<Self> {
        match code {
            0 => Ok(Activation::Relu),
            1 => Ok(Activation::Elu),
            other => Err(Error::BadArch(format!("unknown activation code {other}"))),
        }
    }
}

/// Affine layer `y = W x + b`, with `W` shaped `out × in`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Layer {
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
}

/// Weights and biases of one node's encoder. The activation is applied after
/// every layer except the last; the output is then L2-normalized per column.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EncoderParams {
    pub layers: Vec<Layer>,
    pub activation: Activation,
}

impl EncoderParams {
    pub fn from_layers(layers: Vec<Layer>, activation: Activation) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::BadArch("encoder needs at least one layer".into()));
        }
        for (l, layer) in layers.iter().enumerate() {
            if layer.bias.len() != layer.weight.nrows() {
                return Err(Error::BadArch(format!("layer {l}: bias length differs from output width")));
            }
            if l > 0 && layers[l - 1].weight.nrows() != layer.weight.ncols() {
                return Err(Error::BadArch(format!("layer {l}: input width does not match previous output")));
            }
        }
        Ok(EncoderParams { layers, activation })
    }

    /// Layer widths, input first.
    pub fn arch(&self) -> Vec<usize> {
        let mut dims = vec![self.layers[0].weight.ncols()];
        dims.extend(self.layers.iter().map(|l| l.weight.nrows()));
        dims
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].weight.ncols()
    }

    pub fn out_dim(&self) -> usize {
        self.layers.last().map(|l| l.weight.nrows()).unwrap_or(0)
    }

    pub fn num_params(&self) -> usize {
        self.layers.iter().map(|l| l.weight.len() + l.bias.len()).sum()
    }

    pub fn zeros_like(&self) -> Self {
        EncoderParams {
            layers: self
                .layers
                .iter()
                .map(|l| Layer { weight: Array2::zeros(l.weight.raw_dim()), bias: Array1::zeros(l.bias.len()) })
                .collect(),
            activation: self.activation,
        }
    }

    pub fn same_shape(&self, other: &EncoderParams) -> bool {
        self.activation == other.activation && self.arch() == other.arch()
    }

    /// Weights (row-major) then bias, layer by layer.
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_params());
        for l in &self.layers {
            out.extend(l.weight.iter());
            out.extend(l.bias.iter());
        }
        out
    }

    pub fn assign_flat(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.num_params() {
            return Err(Error::ShapeMismatch(format!(
                "flat vector has {} entries, encoder has {}",
                flat.len(),
                self.num_params()
            )));
        }
        let mut values = flat.iter().copied();
        for l in &mut self.layers {
            l.weight.iter_mut().for_each(|w| *w = values.next().unwrap());
            l.bias.iter_mut().for_each(|b| *b = values.next().unwrap());
        }
        Ok(())
    }

    pub fn squared_norm(&self) -> f64 {
        self.layers.iter().map(|l| l.weight.iter().chain(l.bias.iter()).map(|v| v * v).sum::<f64>()).sum()
    }

    fn check_same_shape(&self, other: &EncoderParams) -> Result<()> {
        if self.arch() != other.arch() {
            return Err(Error::ShapeMismatch(format!(
                "encoder shapes differ: {:?} vs {:?}",
                self.arch(),
                other.arch()
            )));
        }
        Ok(())
    }

    /// Serialize as `MC2E`, version, activation, layer count, widths (u32 LE),
    /// then every parameter as f64 LE in [`EncoderParams::flatten`] order.
    pub fn to_checkpoint(&self) -> Vec<u8> {
        let arch = self.arch();
        let mut out = Vec::with_capacity(10 + 4 * arch.len() + 8 * self.num_params());
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.push(CHECKPOINT_VERSION);
        out.push(self.activation.code());
        out.extend_from_slice(&(arch.len() as u32).to_le_bytes());
        for d in &arch {
            out.extend_from_slice(&(*d as u32).to_le_bytes());
        }
        for v in self.flatten() {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn from_checkpoint(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 10 {
            return Err(Error::TruncatedPayload { expected: 10, actual: bytes.len() });
        }
        if &bytes[0..4] != CHECKPOINT_MAGIC {
            return Err(Error::BadMagic(format!("expected MC2E checkpoint, found {:02x?}", &bytes[0..4])));
        }
        if bytes[4] != CHECKPOINT_VERSION {
            return Err(Error::BadMagic(format!("unsupported checkpoint version {}", bytes[4])));
        }
        let activation = Activation::from_code(bytes[5])?;
        let n_dims = u32::from_le_bytes(bytes[6..10].try_into().unwrap()) as usize;
        let header = 10 + 4 * n_dims;
        if bytes.len() < header {
            return Err(Error::TruncatedPayload { expected: header, actual: bytes.len() });
        }
        let arch: Vec<usize> = bytes[10..header]
            .chunks_exact(4)
            .map(|c| u32::from_le_bytes(c.try_into().unwrap()) as usize)
            .collect();
        let mut params = zero_params(&arch, activation)?;
        let expected = header + 8 * params.num_params();
        match bytes.len().cmp(&expected) {
            std::cmp::Ordering::Less => {
                return Err(Error::TruncatedPayload { expected, actual: bytes.len() })
            }
            std::cmp::Ordering::Greater => {
                return Err(Error::TrailingBytes { extra: bytes.len() - expected })
            }
            std::cmp::Ordering::Equal => {}
        }
        let flat: Vec<f64> = bytes[header..]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        params.assign_flat(&flat)?;
        Ok(params)
    }
}

fn zero_params(arch: &[usize], activation: Activation) -> Result<EncoderParams> {
    if arch.len() < 2 {
        return Err(Error::BadArch(format!("need at least input and output widths, got {arch:?}")));
    }
    if arch.contains(&0) {
        return Err(Error::BadArch(format!("zero-width layer in {arch:?}")));
    }
    let layers = arch
        .windows(2)
        .map(|w| Layer { weight: Array2::zeros((w[1], w[0])), bias: Array1::zeros(w[1]) })
        .collect();
    Ok(EncoderParams { layers, activation })
}

/// Xavier-uniform weights, zero biases.
pub fn init_params(arch: &[usize], activation: Activation, seed: u64) -> Result<EncoderParams> {
    let mut params = zero_params(arch, activation)?;
    let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(seed);
    for layer in &mut params.layers {
        let (fan_out, fan_in) = layer.weight.dim();
        let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
        layer.weight.iter_mut().for_each(|w| *w = rng.random_range(-bound..=bound));
    }
    Ok(params)
}

/// Activations kept from a forward pass.
#[derive(Clone, Debug)]
pub struct ForwardCache {
    /// Input to each layer (`inputs[0]` is the batch itself).
    inputs: Vec<Array2<f64>>,
    /// Pre-activation output of each hidden layer.
    pre: Vec<Array2<f64>>,
    /// Output of the last affine layer, before normalization.
    pub raw: Array2<f64>,
    norms: Array1<f64>,
}

impl ForwardCache {
    /// Input of the last layer.
    pub fn penultimate(&self) -> &Array2<f64> {
        self.inputs.last().expect("at least one layer")
    }
}

fn affine(layer: &Layer, x: &ArrayView2<'_, f64>) -> Array2<f64> {
    let mut y = layer.weight.dot(x);
    y += &layer.bias.view().insert_axis(Axis(1));
    y
}

/// Run the affine/activation stack and keep what backprop needs.
pub fn forward_cached(params: &EncoderParams, x: ArrayView2<'_, f64>) -> Result<(FeatureMatrix, ForwardCache)> {
    if x.nrows() != params.input_dim() {
        return Err(Error::ShapeMismatch(format!(
            "input has {} rows, encoder expects {}",
            x.nrows(),
            params.input_dim()
        )));
    }
    let last = params.layers.len() - 1;
    let mut inputs = Vec::with_capacity(params.layers.len());
    let mut pre = Vec::with_capacity(last);
    let mut h = x.to_owned();
    for (l, layer) in params.layers.iter().enumerate() {
        let y = affine(layer, &h.view());
        inputs.push(h);
        if l == last {
            h = y;
        } else {
            let act = params.activation;
            h = y.mapv(|v| act.apply(v));
            pre.push(y);
        }
    }
    let raw = h;
    let norms = raw.map_axis(Axis(0), |c| c.dot(&c).sqrt().max(NORM_FLOOR));
    let z = &raw / &norms.view().insert_axis(Axis(0));
    Ok((z, ForwardCache { inputs, pre, raw, norms }))
}

/// Unit-norm features of the batch `x` (column per sample).
pub fn forward(params: &EncoderParams, x: ArrayView2<'_, f64>) -> Result<FeatureMatrix> {
    forward_cached(params, x).map(|(z, _)| z)
}

/// Parameter gradients given `dLoss/dZ` for the normalized output.
pub fn backward(params: &EncoderParams, x: ArrayView2<'_, f64>, upstream: ArrayView2<'_, f64>) -> Result<EncoderParams> {
    let (_, cache) = forward_cached(params, x)?;
    backward_cached(params, &cache, upstream)
}

pub fn backward_cached(
    params: &EncoderParams,
    cache: &ForwardCache,
    upstream: ArrayView2<'_, f64>,
) -> Result<EncoderParams> {
    if upstream.dim() != cache.raw.dim() {
        return Err(Error::ShapeMismatch(format!(
            "upstream gradient {:?} does not match features {:?}",
            upstream.dim(),
            cache.raw.dim()
        )));
    }
    // Through z = h / max(‖h‖, floor): dh = (g − z·(zᵀg)) / ‖h‖ above the floor, g / floor below.
    let mut dh = Array2::<f64>::zeros(cache.raw.raw_dim());
    for (j, mut col) in dh.axis_iter_mut(Axis(1)).enumerate() {
        let n = cache.norms[j];
        let h = cache.raw.column(j);
        let g = upstream.column(j);
        if h.dot(&h).sqrt() > NORM_FLOOR {
            let z = &h / n;
            let proj = z.dot(&g);
            Zip::from(&mut col).and(&g).and(&z).for_each(|o, &gi, &zi| *o = (gi - zi * proj) / n);
        } else {
            col.assign(&(&g / n));
        }
    }
    backward_raw(params, cache, dh.view())
}

/// Parameter gradients given `dLoss/dH` for the pre-normalization output.
pub fn backward_raw(params: &EncoderParams, cache: &ForwardCache, upstream: ArrayView2<'_, f64>) -> Result<EncoderParams> {
    if upstream.dim() != cache.raw.dim() {
        return Err(Error::ShapeMismatch(format!(
            "upstream gradient {:?} does not match raw output {:?}",
            upstream.dim(),
            cache.raw.dim()
        )));
    }
    let mut grads = params.zeros_like();
    let mut delta = upstream.to_owned();
    for l in (0..params.layers.len()).rev() {
        if l + 1 < params.layers.len() {
            let act = params.activation;
            Zip::from(&mut delta).and(&cache.pre[l]).for_each(|d, &p| *d *= act.derivative(p));
        }
        grads.layers[l].weight = delta.dot(&cache.inputs[l].t());
        grads.layers[l].bias = delta.sum_axis(Axis(1));
        if l > 0 {
            delta = params.layers[l].weight.t().dot(&delta);
        }
    }
    Ok(grads)
}

/// Adam moments and hyperparameters for one node.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub m: EncoderParams,
    pub v: EncoderParams,
    pub step: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub weight_decay: f64,
    pub lr: f64,
}

impl AdamState {
    pub fn new(params: &EncoderParams, lr: f64, weight_decay: f64) -> Self {
        AdamState {
            m: params.zeros_like(),
            v: params.zeros_like(),
            step: 0,
            beta1: 0.9,
            beta2: 0.999,
            weight_decay,
            lr,
        }
    }
}

/// One Adam step with decoupled weight decay:
/// `θ ← θ·(1 − η·λ) − η·m̂/(√v̂ + 1e-8)`.
pub fn adam_step(params: &mut EncoderParams, grads: &EncoderParams, state: &mut AdamState) -> Result<()> {
    params.check_same_shape(grads)?;
    params.check_same_shape(&state.m)?;
    state.step += 1;
    let (b1, b2, lr) = (state.beta1, state.beta2, state.lr);
    let c1 = 1.0 - b1.powi(state.step as i32);
    let c2 = 1.0 - b2.powi(state.step as i32);
    let decay = 1.0 - lr * state.weight_decay;
    let update = |p: &mut f64, g: f64, m: &mut f64, v: &mut f64| {
        *m = b1 * *m + (1.0 - b1) * g;
        *v = b2 * *v + (1.0 - b2) * g * g;
        let m_hat = *m / c1;
        let v_hat = *v / c2;
        *p = *p * decay - lr * m_hat / (v_hat.sqrt() + ADAM_EPS);
    };
    for (((layer, grad), m), v) in params
        .layers
        .iter_mut()
        .zip(&grads.layers)
        .zip(state.m.layers.iter_mut())
        .zip(state.v.layers.iter_mut())
    {
        Zip::from(&mut layer.weight)
            .and(&grad.weight)
            .and(&mut m.weight)
            .and(&mut v.weight)
            .for_each(|p, &g, m, v| update(p, g, m, v));
        Zip::from(&mut layer.bias)
            .and(&grad.bias)
            .and(&mut m.bias)
            .and(&mut v.bias)
            .for_each(|p, &g, m, v| update(p, g, m, v));
    }
    Ok(())
}

/// Plain SGD with decoupled weight decay.
pub fn sgd_step(params: &mut EncoderParams, grads: &EncoderParams, lr: f64, weight_decay: f64) -> Result<()> {
    params.check_same_shape(grads)?;
    let decay = 1.0 - lr * weight_decay;
    for (layer, grad) in params.layers.iter_mut().zip(&grads.layers) {
        Zip::from(&mut layer.weight).and(&grad.weight).for_each(|p, &g| *p = *p * decay - lr * g);
        Zip::from(&mut layer.bias).and(&grad.bias).for_each(|p, &g| *p = *p * decay - lr * g);
    }
    Ok(())
}

/// Entrywise mean of encoders with identical shape; `None` if shapes differ.
pub fn mean_params(all: &[&EncoderParams]) -> Option<EncoderParams> {
    let first = *all.first()?;
    if all.iter().any(|p| !p.same_shape(first)) {
        return None;
    }
    let scale = 1.0 / all.len() as f64;
    let mut out = first.zeros_like();
    for p in all {
        for (o, l) in out.layers.iter_mut().zip(&p.layers) {
            o.weight.scaled_add(scale, &l.weight);
            o.bias.scaled_add(scale, &l.bias);
        }
    }
    Some(out)
}
