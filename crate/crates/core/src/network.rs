//! Fully-connected softplus networks with optional batch normalization.
//!
//! Hidden layer `l` computes `h_l = σ(BN(h_{l-1} W_l + b_l))`, where the
//! batch-normalization step is present only when the layer's flag is set.
//! The output is the affine map `f = [h_H, 1] · [W_{H+1}; b_{H+1}]`.
//!
//! Parameters live in a single flat vector. Every layer stores `vec([W; b])`
//! column by column (unit `j` owns the contiguous slice `W[:, j], b[j]`),
//! followed by the BN scale and shift vectors when that layer normalizes.
//! The last-layer block is therefore exactly `vec([W_{H+1}; b_{H+1}])`.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::Matrix;

/// Softplus with sharpness `ς`: `ln(1 + e^{ςz}) / ς`, evaluated as
/// `max(z, 0) + ln(1 + e^{−ς|z|}) / ς` so it never overflows.
#[inline]
pub fn softplus(z: f64, sharpness: f64) -> f64 {
    z.max(0.0) + (-sharpness * z.abs()).exp().ln_1p() / sharpness
}

/// Derivative of [`softplus`]: the logistic function at `ςz`.
#[inline]
pub fn softplus_deriv(z: f64, sharpness: f64) -> f64 {
    let t = sharpness * z;
    if t >= 0.0 {
        1.0 / (1.0 + (-t).exp())
    } else {
        let e = t.exp();
        e / (1.0 + e)
    }
}

/// Batch-normalizes one unit over the batch with population variance.
pub fn batchnorm_forward(batch: &[f64], gamma: f64, beta: f64, epsilon: f64) -> Result<Vec<f64>> {
    if batch.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let (mean, var) = mean_var(batch.iter().copied());
    let inv_std = 1.0 / (var + epsilon).sqrt();
    Ok(batch.iter().map(|z| gamma * (z - mean) * inv_std + beta).collect())
}

fn mean_var(values: impl Iterator<Item = f64> + Clone) -> (f64, f64) {
    let mut count = 0usize;
    let mut sum = 0.0;
    for v in values.clone() {
        sum += v;
        count += 1;
    }
    let mean = sum / count as f64;
    let var = values.map(|v| (v - mean) * (v - mean)).sum::<f64>() / count as f64;
    (mean, var)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetworkSpec {
    /// `m_0 = m_x`.
    pub input_dim: usize,
    /// `m_1, …, m_H`.
    pub hidden: Vec<usize>,
    /// `m_y`.
    pub output_dim: usize,
    /// Softplus sharpness `ς`.
    pub sharpness: f64,
    /// One flag per hidden layer.
    pub batch_norm: Vec<bool>,
    pub bn_epsilon: f64,
}

impl NetworkSpec {
    pub fn new(
        input_dim: usize,
        hidden: Vec<usize>,
        output_dim: usize,
        sharpness: f64,
        batch_norm: Vec<bool>,
        bn_epsilon: f64,
    ) -> Result<Self> {
        let spec = NetworkSpec {
            input_dim,
            hidden,
            output_dim,
            sharpness,
            batch_norm,
            bn_epsilon,
        };
        spec.validate()?;
        Ok(spec)
    }

    /// Plain fully-connected network without batch normalization.
    pub fn plain(input_dim: usize, hidden: Vec<usize>, output_dim: usize, sharpness: f64) -> Result<Self> {
        let flags = vec![false; hidden.len()];
        NetworkSpec::new(input_dim, hidden, output_dim, sharpness, flags, 1e-5)
    }

    pub fn validate(&self) -> Result<()> {
        if self.hidden.is_empty() {
            return Err(Error::Config("at least one hidden layer is required".into()));
        }
        if self.input_dim == 0 || self.output_dim == 0 || self.hidden.iter().any(|&m| m == 0) {
            return Err(Error::Config("all layer widths must be at least 1".into()));
        }
        if !(self.sharpness > 0.0 && self.sharpness.is_finite()) {
            return Err(Error::Config(format!("softplus sharpness must be positive, got {}", self.sharpness)));
        }
        if self.batch_norm.len() != self.hidden.len() {
            return Err(Error::Config(format!(
                "{} batch-norm flags for {} hidden layers",
                self.batch_norm.len(),
                self.hidden.len()
            )));
        }
        if !(self.bn_epsilon > 0.0 && self.bn_epsilon.is_finite()) {
            return Err(Error::Config(format!("batch-norm epsilon must be positive, got {}", self.bn_epsilon)));
        }
        Ok(())
    }

    /// Number of hidden layers `H`.
    pub fn depth(&self) -> usize {
        self.hidden.len()
    }

    /// Width of the last hidden layer `m_H`.
    pub fn last_hidden(&self) -> usize {
        *self.hidden.last().unwrap()
    }

    pub fn has_batch_norm(&self) -> bool {
        self.batch_norm.iter().any(|&b| b)
    }

    pub fn layout(&self) -> Layout {
        Layout::new(self)
    }
}

/// Where one layer's parameters sit in the flat vector.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerLayout {
    pub offset: usize,
    pub fan_in: usize,
    pub width: usize,
    pub batch_norm: bool,
}

impl LayerLayout {
    #[inline]
    pub fn weight(&self, i: usize, j: usize) -> usize {
        self.offset + j * (self.fan_in + 1) + i
    }

    #[inline]
    pub fn bias(&self, j: usize) -> usize {
        self.offset + j * (self.fan_in + 1) + self.fan_in
    }

    #[inline]
    pub fn gamma(&self, j: usize) -> usize {
        debug_assert!(self.batch_norm);
        self.offset + self.width * (self.fan_in + 1) + j
    }

    #[inline]
    pub fn beta(&self, j: usize) -> usize {
        debug_assert!(self.batch_norm);
        self.offset + self.width * (self.fan_in + 2) + j
    }

    /// `d_l`.
    pub fn len(&self) -> usize {
        let affine = self.width * (self.fan_in + 1);
        if self.batch_norm {
            affine + 2 * self.width
        } else {
            affine
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn range(&self) -> std::ops::Range<usize> {
        self.offset..self.offset + self.len()
    }
}

/// Flat parameter layout: `H` hidden layers followed by the output layer.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Layout {
    pub layers: Vec<LayerLayout>,
    /// `d_{1:H}`, also the offset of the output layer.
    pub hidden_len: usize,
    /// `d`.
    pub total: usize,
}

impl Layout {
    fn new(spec: &NetworkSpec) -> Self {
        let mut layers = Vec::with_capacity(spec.depth() + 1);
        let mut offset = 0;
        let mut fan_in = spec.input_dim;
        for (l, &width) in spec.hidden.iter().enumerate() {
            let layer = LayerLayout {
                offset,
                fan_in,
                width,
                batch_norm: spec.batch_norm[l],
            };
            offset += layer.len();
            fan_in = width;
            layers.push(layer);
        }
        let hidden_len = offset;
        let out = LayerLayout {
            offset,
            fan_in,
            width: spec.output_dim,
            batch_norm: false,
        };
        offset += out.len();
        layers.push(out);
        Layout {
            layers,
            hidden_len,
            total: offset,
        }
    }

    pub fn output_layer(&self) -> &LayerLayout {
        self.layers.last().unwrap()
    }

    pub fn hidden_layers(&self) -> &[LayerLayout] {
        &self.layers[..self.layers.len() - 1]
    }

    /// `d_{H+1} = (m_H + 1) · m_y`.
    pub fn last_len(&self) -> usize {
        self.total - self.hidden_len
    }
}

/// Flat parameter vector `w` paired with its layout.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Params {
    layout: Layout,
    values: Vec<f64>,
}

impl Params {
    pub fn zeros(spec: &NetworkSpec) -> Self {
        let layout = spec.layout();
        let values = vec![0.0; layout.total];
        Params { layout, values }
    }

    pub fn from_flat(spec: &NetworkSpec, values: Vec<f64>) -> Result<Self> {
        let layout = spec.layout();
        if values.len() != layout.total {
            return Err(Error::Shape(format!(
                "parameter vector has length {}, architecture needs {}",
                values.len(),
                layout.total
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("parameter vector".into()));
        }
        Ok(Params { layout, values })
    }

    /// Gaussian initialization: weights and biases `N(0, scale² / fan_in)`,
    /// BN scales 1 and shifts 0.
    pub fn init_gaussian<R: Rng + ?Sized>(spec: &NetworkSpec, scale: f64, rng: &mut R) -> Self {
        let mut p = Params::zeros(spec);
        for layer in p.layout.layers.clone() {
            let std = scale / (layer.fan_in as f64).sqrt();
            let normal = Normal::new(0.0, std).expect("finite std");
            for j in 0..layer.width {
                for i in 0..layer.fan_in {
                    p.values[layer.weight(i, j)] = normal.sample(rng);
                }
                p.values[layer.bias(j)] = normal.sample(rng);
                if layer.batch_norm {
                    p.values[layer.gamma(j)] = 1.0;
                }
            }
        }
        p
    }

    pub fn layout(&self) -> &Layout {
        &self.layout
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.values
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn to_flat(&self) -> Vec<f64> {
        self.values.clone()
    }

    pub fn hidden_slice(&self) -> &[f64] {
        &self.values[..self.layout.hidden_len]
    }

    pub fn last_slice(&self) -> &[f64] {
        &self.values[self.layout.hidden_len..]
    }

    pub fn last_slice_mut(&mut self) -> &mut [f64] {
        let split = self.layout.hidden_len;
        &mut self.values[split..]
    }

    /// Weight matrix `W^{(l)}` (`m_{l−1} × m_l`) for `l` in `1..=H+1`.
    pub fn weight_matrix(&self, l: usize) -> Matrix {
        let layer = self.layout.layers[l - 1];
        let mut w = Matrix::zeros(layer.fan_in, layer.width);
        for j in 0..layer.width {
            for i in 0..layer.fan_in {
                w.set(i, j, self.values[layer.weight(i, j)]);
            }
        }
        w
    }

    /// `[W^{(l)}; b^{(l)}]`, an `(m_{l−1} + 1) × m_l` matrix.
    pub fn affine_matrix(&self, l: usize) -> Matrix {
        let layer = self.layout.layers[l - 1];
        let rows = layer.fan_in + 1;
        let mut w = Matrix::zeros(rows, layer.width);
        for j in 0..layer.width {
            let col = &self.values[layer.offset + j * rows..layer.offset + (j + 1) * rows];
            for (i, &v) in col.iter().enumerate() {
                w.set(i, j, v);
            }
        }
        w
    }

    pub fn set_affine_matrix(&mut self, l: usize, m: &Matrix) -> Result<()> {
        let layer = self.layout.layers[l - 1];
        if m.shape() != (layer.fan_in + 1, layer.width) {
            return Err(Error::Shape(format!(
                "layer {} affine block must be {}x{}, got {:?}",
                l,
                layer.fan_in + 1,
                layer.width,
                m.shape()
            )));
        }
        let rows = layer.fan_in + 1;
        for j in 0..layer.width {
            for i in 0..rows {
                self.values[layer.offset + j * rows + i] = m.get(i, j);
            }
        }
        Ok(())
    }

    /// `[W^{(H+1)}; b^{(H+1)}]`.
    pub fn last_layer_matrix(&self) -> Matrix {
        self.affine_matrix(self.layout.layers.len())
    }

    pub fn set_last_layer_matrix(&mut self, m: &Matrix) -> Result<()> {
        self.set_affine_matrix(self.layout.layers.len(), m)
    }

    pub fn set(&mut self, index: usize, value: f64) {
        self.values[index] = value;
    }

    pub fn get(&self, index: usize) -> f64 {
        self.values[index]
    }
}

/// Batch-normalization statistics `(μ, σ²)` per unit, one entry per hidden
/// layer (`None` where the layer does not normalize).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BnStats {
    pub layers: Vec<Option<(Vec<f64>, Vec<f64>)>>,
}

/// How BN layers obtain their statistics.
#[derive(Debug, Clone, Copy)]
pub enum BnMode<'a> {
    /// Statistics of the current forward batch, differentiated through.
    Batch,
    /// Fixed statistics; rows are processed independently.
    Frozen(&'a BnStats),
}

#[derive(Debug, Clone, PartialEq)]
pub struct BnCache {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
    pub inv_std: Vec<f64>,
    /// `(z − μ) / √(σ² + ε)`.
    pub normalized: Matrix,
    pub frozen: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerTrace {
    /// `h_{l−1} W_l + b_l`.
    pub affine: Matrix,
    pub bn: Option<BnCache>,
    /// Input to the activation (the BN output when BN is present).
    pub pre_activation: Matrix,
    /// `h_l`.
    pub output: Matrix,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ForwardTrace {
    pub input: Matrix,
    pub layers: Vec<LayerTrace>,
    /// `f_X`, `n × m_y`.
    pub output: Matrix,
}

impl ForwardTrace {
    /// `h_X^{(H)}`, `n × m_H`.
    pub fn hidden(&self) -> &Matrix {
        &self.layers.last().unwrap().output
    }

    pub fn bn_stats(&self) -> BnStats {
        BnStats {
            layers: self
                .layers
                .iter()
                .map(|l| l.bn.as_ref().map(|c| (c.mean.clone(), c.var.clone())))
                .collect(),
        }
    }
}

fn check_params(spec: &NetworkSpec, params: &Params) -> Result<()> {
    if params.layout != spec.layout() {
        return Err(Error::Shape("parameters were built for a different architecture".into()));
    }
    Ok(())
}

/// Runs the network on every row of `x` and keeps all intermediate values.
pub fn forward(spec: &NetworkSpec, params: &Params, x: &Matrix, bn_mode: BnMode<'_>) -> Result<ForwardTrace> {
    check_params(spec, params)?;
    if x.cols() != spec.input_dim {
        return Err(Error::Shape(format!(
            "layer 1 expects {} input features, got {}",
            spec.input_dim,
            x.cols()
        )));
    }
    if x.rows() == 0 {
        return Err(Error::EmptyBatch);
    }
    let n = x.rows();
    let layout = params.layout();
    let mut layers = Vec::with_capacity(spec.depth());
    let mut prev = x.clone();
    for (l, layer) in layout.hidden_layers().iter().enumerate() {
        let affine = prev
            .with_ones_column()
            .matmul(&params.affine_matrix(l + 1))
            .map_err(|e| Error::Shape(format!("layer {}: {}", l + 1, e)))?;
        let (pre_activation, bn) = if layer.batch_norm {
            let frozen = match bn_mode {
                BnMode::Batch => None,
                BnMode::Frozen(stats) => Some(
                    stats
                        .layers
                        .get(l)
                        .and_then(|s| s.as_ref())
                        .ok_or_else(|| Error::Shape(format!("no frozen BN statistics for layer {}", l + 1)))?,
                ),
            };
            let mut mean = Vec::with_capacity(layer.width);
            let mut var = Vec::with_capacity(layer.width);
            for j in 0..layer.width {
                let (m, v) = match frozen {
                    Some((fm, fv)) => (fm[j], fv[j]),
                    None => mean_var((0..n).map(|i| affine.get(i, j))),
                };
                mean.push(m);
                var.push(v);
            }
            let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + spec.bn_epsilon).sqrt()).collect();
            let mut normalized = Matrix::zeros(n, layer.width);
            let mut out = Matrix::zeros(n, layer.width);
            for i in 0..n {
                for j in 0..layer.width {
                    let xh = (affine.get(i, j) - mean[j]) * inv_std[j];
                    normalized.set(i, j, xh);
                    let g = params.get(layer.gamma(j));
                    let b = params.get(layer.beta(j));
                    out.set(i, j, g * xh + b);
                }
            }
            (
                out,
                Some(BnCache {
                    mean,
                    var,
                    inv_std,
                    normalized,
                    frozen: frozen.is_some(),
                }),
            )
        } else {
            (affine.clone(), None)
        };
        let mut output = pre_activation.clone();
        for v in output.as_mut_slice() {
            *v = softplus(*v, spec.sharpness);
        }
        prev = output.clone();
        layers.push(LayerTrace {
            affine,
            bn,
            pre_activation,
            output,
        });
    }
    let output = prev.with_ones_column().matmul(&params.last_layer_matrix())?;
    Ok(ForwardTrace {
        input: x.clone(),
        layers,
        output,
    })
}

/// `h_X^{(H)}` with training-mode (batch) statistics.
pub fn forward_hidden(spec: &NetworkSpec, params: &Params, x: &Matrix) -> Result<ForwardTrace> {
    forward(spec, params, x, BnMode::Batch)
}

/// `f_X = [h_X^{(H)}, 1] · [W^{(H+1)}; b^{(H+1)}]`.
pub fn forward_output(spec: &NetworkSpec, params: &Params, x: &Matrix) -> Result<Matrix> {
    forward(spec, params, x, BnMode::Batch).map(|t| t.output)
}

/// Which parameter blocks a backward pass fills in.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamSubset {
    All,
    LastLayerOnly,
    HiddenOnly,
}

/// Gradient of `⟨upstream, f_X⟩` with respect to the parameters, as a
/// full-length vector with zeros outside the requested subset.
pub fn backprop(
    spec: &NetworkSpec,
    params: &Params,
    x: &Matrix,
    upstream: &Matrix,
    subset: ParamSubset,
) -> Result<Vec<f64>> {
    let trace = forward(spec, params, x, BnMode::Batch)?;
    backprop_trace(spec, params, &trace, upstream, subset)
}

/// Same as [`backprop`] but reuses a forward trace (whose BN mode it honors).
pub fn backprop_trace(
    spec: &NetworkSpec,
    params: &Params,
    trace: &ForwardTrace,
    upstream: &Matrix,
    subset: ParamSubset,
) -> Result<Vec<f64>> {
    check_params(spec, params)?;
    let n = trace.input.rows();
    if upstream.shape() != (n, spec.output_dim) {
        return Err(Error::Shape(format!(
            "upstream gradient is {:?}, expected ({}, {})",
            upstream.shape(),
            n,
            spec.output_dim
        )));
    }
    let layout = params.layout();
    let mut grad = vec![0.0; layout.total];

    let h_last = trace.hidden();
    if subset != ParamSubset::HiddenOnly {
        let out = layout.output_layer();
        let g = h_last.with_ones_column().t_matmul(upstream)?;
        for j in 0..out.width {
            for i in 0..=out.fan_in {
                grad[out.offset + j * (out.fan_in + 1) + i] = g.get(i, j);
            }
        }
    }
    if subset == ParamSubset::LastLayerOnly {
        return Ok(grad);
    }

    // dL/dh_H
    let mut d_out = upstream.matmul_t(&params.weight_matrix(layout.layers.len()))?;
    for l in (0..spec.depth()).rev() {
        let layer = layout.layers[l];
        let lt = &trace.layers[l];
        let mut d_pre = d_out;
        for (d, &z) in d_pre.as_mut_slice().iter_mut().zip(lt.pre_activation.as_slice()) {
            *d *= softplus_deriv(z, spec.sharpness);
        }
        let d_affine = match &lt.bn {
            None => d_pre,
            Some(cache) => {
                let mut d_affine = Matrix::zeros(n, layer.width);
                for j in 0..layer.width {
                    let gamma = params.get(layer.gamma(j));
                    let mut sum_dy = 0.0;
                    let mut sum_dy_xh = 0.0;
                    for i in 0..n {
                        let dy = d_pre.get(i, j);
                        sum_dy += dy;
                        sum_dy_xh += dy * cache.normalized.get(i, j);
                    }
                    grad[layer.gamma(j)] = sum_dy_xh;
                    grad[layer.beta(j)] = sum_dy;
                    let inv_std = cache.inv_std[j];
                    if cache.frozen {
                        for i in 0..n {
                            d_affine.set(i, j, gamma * d_pre.get(i, j) * inv_std);
                        }
                    } else {
                        let mean_dxh = gamma * sum_dy / n as f64;
                        let mean_dxh_xh = gamma * sum_dy_xh / n as f64;
                        for i in 0..n {
                            let dxh = gamma * d_pre.get(i, j);
                            let xh = cache.normalized.get(i, j);
                            d_affine.set(i, j, inv_std * (dxh - mean_dxh - xh * mean_dxh_xh));
                        }
                    }
                }
                d_affine
            }
        };
        let input = if l == 0 { &trace.input } else { &trace.layers[l - 1].output };
        let g = input.with_ones_column().t_matmul(&d_affine)?;
        for j in 0..layer.width {
            for i in 0..=layer.fan_in {
                grad[layer.offset + j * (layer.fan_in + 1) + i] = g.get(i, j);
            }
        }
        if l > 0 {
            d_out = d_affine.matmul_t(&params.weight_matrix(l + 1))?;
        } else {
            break;
        }
    }
    Ok(grad)
}
