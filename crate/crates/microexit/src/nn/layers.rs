//! Layer definitions: single-sample inference forward, batched training
//! forward with caches, and batched backward passes.
//!
//! Parameter layout conventions, used consistently by [`Layer::append_params`],
//! [`Layer::load_params`], and the gradient vectors returned from
//! [`Layer::backward_batch`]:
//!
//! - convolution: weights indexed `[out][in][k]` row-major, then biases;
//! - dense: weights indexed `[out][in]` row-major, then biases;
//! - batch norm: all gammas, then all betas (running statistics are state,
//!   not parameters, and receive no gradient).

use crate::nn::{conv_out_len, Tensor2};
use crate::{Error, Result};

/// Valid-padding 1D convolution.
#[derive(Debug, Clone, PartialEq)]
pub struct Conv1d {
    pub kernel_size: usize,
    pub stride: usize,
    pub in_channels: usize,
    pub out_channels: usize,
    /// `out_channels * in_channels * kernel_size` values, `[out][in][k]` row-major.
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

impl Conv1d {
    /// Zero-initialized convolution with the given geometry.
    pub fn new(kernel_size: usize, stride: usize, in_channels: usize, out_channels: usize) -> Self {
        Conv1d {
            kernel_size,
            stride,
            in_channels,
            out_channels,
            weights: vec![0.0; out_channels * in_channels * kernel_size],
            bias: vec![0.0; out_channels],
        }
    }

    #[inline]
    fn w(&self, o: usize, c: usize, k: usize) -> f64 {
        self.weights[(o * self.in_channels + c) * self.kernel_size + k]
    }

    fn check_input(&self, input: &Tensor2) -> Result<usize> {
        if input.channels() != self.in_channels {
            return Err(Error::shape(
                "conv1d",
                format!("{} channels", self.in_channels),
                format!("{} channels", input.channels()),
            ));
        }
        conv_out_len(input.len(), self.kernel_size, self.stride).ok_or_else(|| {
            Error::shape(
                "conv1d",
                format!("length >= kernel size {}", self.kernel_size),
                format!("length {}", input.len()),
            )
        })
    }

    /// Forward pass: `out[t][o] = bias[o] + sum_{c,k} w[o][c][k] * in[t*stride + k][c]`.
    pub fn forward(&self, input: &Tensor2) -> Result<Tensor2> {
        let out_len = self.check_input(input)?;
        let mut out = Tensor2::zeros(out_len, self.out_channels);
        for t in 0..out_len {
            let base = t * self.stride;
            for o in 0..self.out_channels {
                let mut acc = self.bias[o];
                for c in 0..self.in_channels {
                    for k in 0..self.kernel_size {
                        acc += self.w(o, c, k) * input.at(base + k, c);
                    }
                }
                *out.at_mut(t, o) = acc;
            }
        }
        Ok(out)
    }

    fn backward(&self, input: &Tensor2, upstream: &Tensor2, wgrad: &mut [f64], bgrad: &mut [f64]) -> Tensor2 {
        let mut dx = Tensor2::zeros(input.len(), self.in_channels);
        for t in 0..upstream.len() {
            let base = t * self.stride;
            for o in 0..self.out_channels {
                let g = upstream.at(t, o);
                bgrad[o] += g;
                for c in 0..self.in_channels {
                    for k in 0..self.kernel_size {
                        wgrad[(o * self.in_channels + c) * self.kernel_size + k] += g * input.at(base + k, c);
                        *dx.at_mut(base + k, c) += g * self.w(o, c, k);
                    }
                }
            }
        }
        dx
    }
}

/// Average pooling over the time dimension.
#[derive(Debug, Clone, PartialEq)]
pub struct AvgPool1d {
    pub kernel_size: usize,
    pub stride: usize,
}

impl AvgPool1d {
    /// Forward pass: each output element is the arithmetic mean of its window.
    pub fn forward(&self, input: &Tensor2) -> Result<Tensor2> {
        let out_len = conv_out_len(input.len(), self.kernel_size, self.stride).ok_or_else(|| {
            Error::shape(
                "avgpool1d",
                format!("length >= kernel size {}", self.kernel_size),
                format!("length {}", input.len()),
            )
        })?;
        let scale = 1.0 / self.kernel_size as f64;
        let mut out = Tensor2::zeros(out_len, input.channels());
        for t in 0..out_len {
            let base = t * self.stride;
            for c in 0..input.channels() {
                let mut acc = 0.0;
                for k in 0..self.kernel_size {
                    acc += input.at(base + k, c);
                }
                *out.at_mut(t, c) = acc * scale;
            }
        }
        Ok(out)
    }

    fn backward(&self, in_len: usize, upstream: &Tensor2) -> Tensor2 {
        let scale = 1.0 / self.kernel_size as f64;
        let mut dx = Tensor2::zeros(in_len, upstream.channels());
        for t in 0..upstream.len() {
            let base = t * self.stride;
            for c in 0..upstream.channels() {
                let g = upstream.at(t, c) * scale;
                for k in 0..self.kernel_size {
                    *dx.at_mut(base + k, c) += g;
                }
            }
        }
        dx
    }
}

/// Per-channel batch normalization over the time dimension.
///
/// Training mode normalizes with statistics of the current mini-batch
/// (population variance over every time step of every sample) and folds the
/// batch statistics into the running estimates by exponential moving average:
/// `running = (1 - momentum) * running + momentum * batch`. Inference mode
/// uses the running estimates only and never mutates them.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchNorm1d {
    pub channels: usize,
    pub gamma: Vec<f64>,
    pub beta: Vec<f64>,
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
    pub epsilon: f64,
    pub momentum: f64,
}

impl BatchNorm1d {
    /// Identity-initialized batch norm: gamma 1, beta 0, running mean 0,
    /// running variance 1.
    pub fn new(channels: usize, epsilon: f64, momentum: f64) -> Self {
        BatchNorm1d {
            channels,
            gamma: vec![1.0; channels],
            beta: vec![0.0; channels],
            running_mean: vec![0.0; channels],
            running_var: vec![1.0; channels],
            epsilon,
            momentum,
        }
    }

    fn check_channels(&self, input: &Tensor2) -> Result<()> {
        if input.channels() != self.channels {
            return Err(Error::shape(
                "batchnorm",
                format!("{} channels", self.channels),
                format!("{} channels", input.channels()),
            ));
        }
        Ok(())
    }

    /// Inference forward pass using running statistics.
    pub fn forward_infer(&self, input: &Tensor2) -> Result<Tensor2> {
        self.check_channels(input)?;
        let mut out = Tensor2::zeros(input.len(), self.channels);
        for c in 0..self.channels {
            let inv_std = 1.0 / (self.running_var[c] + self.epsilon).sqrt();
            for t in 0..input.len() {
                *out.at_mut(t, c) = self.gamma[c] * (input.at(t, c) - self.running_mean[c]) * inv_std + self.beta[c];
            }
        }
        Ok(out)
    }

    /// Training forward pass over a mini-batch. Returns the normalized
    /// outputs together with the pre-scale values and inverse standard
    /// deviations needed by the backward pass, and updates the running
    /// statistics in place.
    pub fn forward_train(&mut self, inputs: &[Tensor2]) -> Result<(Vec<Tensor2>, Vec<Tensor2>, Vec<f64>)> {
        for input in inputs {
            self.check_channels(input)?;
        }
        let count: usize = inputs.iter().map(Tensor2::len).sum();
        if count == 0 {
            return Err(Error::Data("batchnorm training batch is empty".into()));
        }
        let n = count as f64;

        let mut mean = vec![0.0; self.channels];
        let mut var = vec![0.0; self.channels];
        for input in inputs {
            for t in 0..input.len() {
                for (c, m) in mean.iter_mut().enumerate() {
                    *m += input.at(t, c);
                }
            }
        }
        for m in &mut mean {
            *m /= n;
        }
        for input in inputs {
            for t in 0..input.len() {
                for c in 0..self.channels {
                    let d = input.at(t, c) - mean[c];
                    var[c] += d * d;
                }
            }
        }
        for v in &mut var {
            *v /= n;
        }

        for c in 0..self.channels {
            self.running_mean[c] = (1.0 - self.momentum) * self.running_mean[c] + self.momentum * mean[c];
            self.running_var[c] = (1.0 - self.momentum) * self.running_var[c] + self.momentum * var[c];
        }

        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + self.epsilon).sqrt()).collect();
        let mut outputs = Vec::with_capacity(inputs.len());
        let mut xhat = Vec::with_capacity(inputs.len());
        for input in inputs {
            let mut h = Tensor2::zeros(input.len(), self.channels);
            let mut y = Tensor2::zeros(input.len(), self.channels);
            for t in 0..input.len() {
                for c in 0..self.channels {
                    let v = (input.at(t, c) - mean[c]) * inv_std[c];
                    *h.at_mut(t, c) = v;
                    *y.at_mut(t, c) = self.gamma[c] * v + self.beta[c];
                }
            }
            outputs.push(y);
            xhat.push(h);
        }
        Ok((outputs, xhat, inv_std))
    }

    /// Backward pass matching [`forward_train`](Self::forward_train): the
    /// batch statistics are functions of the inputs, so their gradient
    /// contributions are included.
    fn backward(
        &self,
        xhat: &[Tensor2],
        inv_std: &[f64],
        upstream: &[Tensor2],
        ggrad: &mut [f64],
        bgrad: &mut [f64],
    ) -> Vec<Tensor2> {
        let count: usize = xhat.iter().map(Tensor2::len).sum();
        let n = count as f64;

        let mut sum_g = vec![0.0; self.channels];
        let mut sum_gh = vec![0.0; self.channels];
        for (h, up) in xhat.iter().zip(upstream) {
            for t in 0..h.len() {
                for c in 0..self.channels {
                    let g = up.at(t, c);
                    sum_g[c] += g;
                    sum_gh[c] += g * h.at(t, c);
                }
            }
        }
        for c in 0..self.channels {
            ggrad[c] += sum_gh[c];
            bgrad[c] += sum_g[c];
        }

        let mut dx = Vec::with_capacity(xhat.len());
        for (h, up) in xhat.iter().zip(upstream) {
            let mut d = Tensor2::zeros(h.len(), self.channels);
            for t in 0..h.len() {
                for c in 0..self.channels {
                    let g = up.at(t, c);
                    *d.at_mut(t, c) =
                        self.gamma[c] * inv_std[c] * (g - sum_g[c] / n - h.at(t, c) * sum_gh[c] / n);
                }
            }
            dx.push(d);
        }
        dx
    }
}

/// Fully connected layer on flat vectors.
#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    pub in_features: usize,
    pub out_features: usize,
    /// `out_features * in_features` values, `[out][in]` row-major.
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

impl Dense {
    /// Zero-initialized dense layer.
    pub fn new(in_features: usize, out_features: usize) -> Self {
        Dense {
            in_features,
            out_features,
            weights: vec![0.0; out_features * in_features],
            bias: vec![0.0; out_features],
        }
    }

    fn check_input(&self, input: &Tensor2) -> Result<()> {
        if input.channels() != 1 || input.len() != self.in_features {
            return Err(Error::shape(
                "dense",
                format!("{}x1 vector", self.in_features),
                format!("{}x{}", input.len(), input.channels()),
            ));
        }
        Ok(())
    }

    /// Forward pass `W * input + bias` on a flat vector.
    pub fn forward_vec(&self, input: &[f64]) -> Result<Vec<f64>> {
        if input.len() != self.in_features {
            return Err(Error::shape(
                "dense",
                format!("{} inputs", self.in_features),
                format!("{} inputs", input.len()),
            ));
        }
        let mut out = self.bias.clone();
        for (o, acc) in out.iter_mut().enumerate() {
            let row = &self.weights[o * self.in_features..(o + 1) * self.in_features];
            for (w, x) in row.iter().zip(input) {
                *acc += w * x;
            }
        }
        Ok(out)
    }

    /// Forward pass on a `in_features x 1` tensor.
    pub fn forward(&self, input: &Tensor2) -> Result<Tensor2> {
        self.check_input(input)?;
        Ok(Tensor2::from_vector(self.forward_vec(input.data())?))
    }

    fn backward(&self, input: &Tensor2, upstream: &Tensor2, wgrad: &mut [f64], bgrad: &mut [f64]) -> Tensor2 {
        let x = input.data();
        let g = upstream.data();
        let mut dx = vec![0.0; self.in_features];
        for o in 0..self.out_features {
            bgrad[o] += g[o];
            let row = &self.weights[o * self.in_features..(o + 1) * self.in_features];
            let grow = &mut wgrad[o * self.in_features..(o + 1) * self.in_features];
            for i in 0..self.in_features {
                grow[i] += g[o] * x[i];
                dx[i] += g[o] * row[i];
            }
        }
        Tensor2::from_vector(dx)
    }
}

/// Elementwise leaky rectifier: `x` when `x >= 0`, `alpha * x` otherwise.
#[derive(Debug, Clone, PartialEq)]
pub struct LeakyRelu {
    pub alpha: f64,
}

impl LeakyRelu {
    pub fn forward(&self, input: &Tensor2) -> Tensor2 {
        let mut out = input.clone();
        for v in out.data_mut() {
            if *v < 0.0 {
                *v *= self.alpha;
            }
        }
        out
    }

    fn backward(&self, input: &Tensor2, upstream: &Tensor2) -> Tensor2 {
        let mut dx = upstream.clone();
        // The kink at zero takes the non-negative branch's slope of 1.
        for (d, x) in dx.data_mut().iter_mut().zip(input.data()) {
            if *x < 0.0 {
                *d *= self.alpha;
            }
        }
        dx
    }
}

/// Numerically stable softmax over a flat vector.
#[derive(Debug, Clone, PartialEq)]
pub struct Softmax;

impl Softmax {
    /// Exponentiates after subtracting the maximum logit, so arbitrarily
    /// large logits cannot overflow.
    pub fn forward_vec(input: &[f64]) -> Vec<f64> {
        let max = input.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut out: Vec<f64> = input.iter().map(|v| (v - max).exp()).collect();
        let sum: f64 = out.iter().sum();
        for v in &mut out {
            *v /= sum;
        }
        out
    }

    pub fn forward(&self, input: &Tensor2) -> Result<Tensor2> {
        if input.channels() != 1 {
            return Err(Error::shape(
                "softmax",
                "flat vector".to_string(),
                format!("{}x{}", input.len(), input.channels()),
            ));
        }
        Ok(Tensor2::from_vector(Self::forward_vec(input.data())))
    }

    fn backward(output: &Tensor2, upstream: &Tensor2) -> Tensor2 {
        let y = output.data();
        let g = upstream.data();
        let dot: f64 = y.iter().zip(g).map(|(a, b)| a * b).sum();
        let dx: Vec<f64> = y.iter().zip(g).map(|(yi, gi)| yi * (gi - dot)).collect();
        Tensor2::from_vector(dx)
    }
}

/// Relabels a time-by-channel block as a flat vector. Zero cost, zero
/// parameters; exists so layer sequences and cost ledgers can name the
/// boundary between convolutional and dense stages.
#[derive(Debug, Clone, PartialEq)]
pub struct Flatten;

/// One network layer. Sequences of these make up the trunk and head stages
/// of the two-head model.
#[derive(Debug, Clone, PartialEq)]
pub enum Layer {
    Conv1d(Conv1d),
    AvgPool1d(AvgPool1d),
    BatchNorm1d(BatchNorm1d),
    LeakyRelu(LeakyRelu),
    Flatten(Flatten),
    Dense(Dense),
    Softmax(Softmax),
}

/// Per-layer state captured by a training forward pass and consumed by the
/// matching backward pass.
#[derive(Debug, Clone)]
pub enum Cache {
    Conv { inputs: Vec<Tensor2> },
    Pool { in_len: usize },
    BatchNorm { xhat: Vec<Tensor2>, inv_std: Vec<f64> },
    LeakyRelu { inputs: Vec<Tensor2> },
    Flatten { in_len: usize, in_channels: usize },
    Dense { inputs: Vec<Tensor2> },
    Softmax { outputs: Vec<Tensor2> },
}

impl Layer {
    /// Short kind name for ledgers and serialized manifests.
    pub fn kind(&self) -> &'static str {
        match self {
            Layer::Conv1d(_) => "conv1d",
            Layer::AvgPool1d(_) => "avgpool1d",
            Layer::BatchNorm1d(_) => "batchnorm",
            Layer::LeakyRelu(_) => "leaky_relu",
            Layer::Flatten(_) => "flatten",
            Layer::Dense(_) => "dense",
            Layer::Softmax(_) => "softmax",
        }
    }

    /// Number of learnable parameters.
    pub fn param_count(&self) -> usize {
        match self {
            Layer::Conv1d(l) => l.weights.len() + l.bias.len(),
            Layer::Dense(l) => l.weights.len() + l.bias.len(),
            // Running statistics ship with the model, so they count toward
            // its stored size even though only gamma and beta are trained.
            Layer::BatchNorm1d(l) => 4 * l.channels,
            _ => 0,
        }
    }

    /// Number of values moved by [`append_params`](Self::append_params):
    /// trainable parameters only.
    pub fn trainable_count(&self) -> usize {
        match self {
            Layer::Conv1d(l) => l.weights.len() + l.bias.len(),
            Layer::Dense(l) => l.weights.len() + l.bias.len(),
            Layer::BatchNorm1d(l) => 2 * l.channels,
            _ => 0,
        }
    }

    /// Output shape for a given input shape, or a shape error.
    pub fn output_shape(&self, input: (usize, usize)) -> Result<(usize, usize)> {
        let (len, ch) = input;
        match self {
            Layer::Conv1d(l) => {
                if ch != l.in_channels {
                    return Err(Error::shape("conv1d", format!("{} channels", l.in_channels), format!("{ch} channels")));
                }
                let out = conv_out_len(len, l.kernel_size, l.stride).ok_or_else(|| {
                    Error::shape("conv1d", format!("length >= {}", l.kernel_size), format!("length {len}"))
                })?;
                Ok((out, l.out_channels))
            }
            Layer::AvgPool1d(l) => {
                let out = conv_out_len(len, l.kernel_size, l.stride).ok_or_else(|| {
                    Error::shape("avgpool1d", format!("length >= {}", l.kernel_size), format!("length {len}"))
                })?;
                Ok((out, ch))
            }
            Layer::BatchNorm1d(l) => {
                if ch != l.channels {
                    return Err(Error::shape("batchnorm", format!("{} channels", l.channels), format!("{ch} channels")));
                }
                Ok((len, ch))
            }
            Layer::LeakyRelu(_) => Ok((len, ch)),
            Layer::Flatten(_) => Ok((len * ch, 1)),
            Layer::Dense(l) => {
                if ch != 1 || len != l.in_features {
                    return Err(Error::shape("dense", format!("{}x1", l.in_features), format!("{len}x{ch}")));
                }
                Ok((l.out_features, 1))
            }
            Layer::Softmax(_) => {
                if ch != 1 {
                    return Err(Error::shape("softmax", "flat vector".to_string(), format!("{len}x{ch}")));
                }
                Ok((len, 1))
            }
        }
    }

    /// Single-sample inference forward pass. Batch norm uses running
    /// statistics; nothing is mutated, so concurrent calls over distinct
    /// inputs against a shared layer are safe.
    pub fn forward(&self, input: &Tensor2) -> Result<Tensor2> {
        match self {
            Layer::Conv1d(l) => l.forward(input),
            Layer::AvgPool1d(l) => l.forward(input),
            Layer::BatchNorm1d(l) => l.forward_infer(input),
            Layer::LeakyRelu(l) => Ok(l.forward(input)),
            Layer::Flatten(_) => Ok(input.clone().flatten()),
            Layer::Dense(l) => l.forward(input),
            Layer::Softmax(s) => s.forward(input),
        }
    }

    /// Batched training forward pass. Batch norm normalizes with statistics
    /// of this batch and updates its running estimates; every other layer
    /// maps samples independently.
    pub fn forward_batch(&mut self, inputs: &[Tensor2]) -> Result<(Vec<Tensor2>, Cache)> {
        match self {
            Layer::BatchNorm1d(l) => {
                let (outputs, xhat, inv_std) = l.forward_train(inputs)?;
                Ok((outputs, Cache::BatchNorm { xhat, inv_std }))
            }
            Layer::Conv1d(l) => {
                let outputs: Result<Vec<_>> = inputs.iter().map(|x| l.forward(x)).collect();
                Ok((outputs?, Cache::Conv { inputs: inputs.to_vec() }))
            }
            Layer::AvgPool1d(l) => {
                let in_len = inputs.first().map_or(0, Tensor2::len);
                let outputs: Result<Vec<_>> = inputs.iter().map(|x| l.forward(x)).collect();
                Ok((outputs?, Cache::Pool { in_len }))
            }
            Layer::LeakyRelu(l) => {
                let outputs = inputs.iter().map(|x| l.forward(x)).collect();
                Ok((outputs, Cache::LeakyRelu { inputs: inputs.to_vec() }))
            }
            Layer::Flatten(_) => {
                let (in_len, in_channels) = inputs.first().map_or((0, 0), Tensor2::shape);
                let outputs = inputs.iter().map(|x| x.clone().flatten()).collect();
                Ok((outputs, Cache::Flatten { in_len, in_channels }))
            }
            Layer::Dense(l) => {
                let outputs: Result<Vec<_>> = inputs.iter().map(|x| l.forward(x)).collect();
                Ok((outputs?, Cache::Dense { inputs: inputs.to_vec() }))
            }
            Layer::Softmax(s) => {
                let outputs: Result<Vec<Tensor2>> = inputs.iter().map(|x| s.forward(x)).collect();
                let outputs = outputs?;
                Ok((outputs.clone(), Cache::Softmax { outputs }))
            }
        }
    }

    /// Batched backward pass. Returns per-sample input gradients and this
    /// layer's flat parameter gradient (summed over the batch), laid out as
    /// documented at module level.
    pub fn backward_batch(&self, cache: &Cache, upstream: &[Tensor2]) -> Result<(Vec<Tensor2>, Vec<f64>)> {
        match (self, cache) {
            (Layer::Conv1d(l), Cache::Conv { inputs }) => {
                let mut wgrad = vec![0.0; l.weights.len()];
                let mut bgrad = vec![0.0; l.bias.len()];
                let dx = inputs
                    .iter()
                    .zip(upstream)
                    .map(|(x, g)| l.backward(x, g, &mut wgrad, &mut bgrad))
                    .collect();
                wgrad.extend_from_slice(&bgrad);
                Ok((dx, wgrad))
            }
            (Layer::AvgPool1d(l), Cache::Pool { in_len }) => {
                let dx = upstream.iter().map(|g| l.backward(*in_len, g)).collect();
                Ok((dx, Vec::new()))
            }
            (Layer::BatchNorm1d(l), Cache::BatchNorm { xhat, inv_std }) => {
                let mut ggrad = vec![0.0; l.channels];
                let mut bgrad = vec![0.0; l.channels];
                let dx = l.backward(xhat, inv_std, upstream, &mut ggrad, &mut bgrad);
                ggrad.extend_from_slice(&bgrad);
                Ok((dx, ggrad))
            }
            (Layer::LeakyRelu(l), Cache::LeakyRelu { inputs }) => {
                let dx = inputs.iter().zip(upstream).map(|(x, g)| l.backward(x, g)).collect();
                Ok((dx, Vec::new()))
            }
            (Layer::Flatten(_), Cache::Flatten { in_len, in_channels }) => {
                let dx: Result<Vec<_>> = upstream
                    .iter()
                    .map(|g| Tensor2::from_data(*in_len, *in_channels, g.data().to_vec()))
                    .collect();
                Ok((dx?, Vec::new()))
            }
            (Layer::Dense(l), Cache::Dense { inputs }) => {
                let mut wgrad = vec![0.0; l.weights.len()];
                let mut bgrad = vec![0.0; l.bias.len()];
                let dx = inputs
                    .iter()
                    .zip(upstream)
                    .map(|(x, g)| l.backward(x, g, &mut wgrad, &mut bgrad))
                    .collect();
                wgrad.extend_from_slice(&bgrad);
                Ok((dx, wgrad))
            }
            (Layer::Softmax(_), Cache::Softmax { outputs }) => {
                let dx = outputs
                    .iter()
                    .zip(upstream)
                    .map(|(y, g)| Softmax::backward(y, g))
                    .collect();
                Ok((dx, Vec::new()))
            }
            _ => Err(Error::Data("layer backward called with a cache from a different layer kind".into())),
        }
    }

    /// Appends this layer's trainable parameters to `out` in the documented
    /// order.
    pub fn append_params(&self, out: &mut Vec<f64>) {
        match self {
            Layer::Conv1d(l) => {
                out.extend_from_slice(&l.weights);
                out.extend_from_slice(&l.bias);
            }
            Layer::Dense(l) => {
                out.extend_from_slice(&l.weights);
                out.extend_from_slice(&l.bias);
            }
            Layer::BatchNorm1d(l) => {
                out.extend_from_slice(&l.gamma);
                out.extend_from_slice(&l.beta);
            }
            _ => {}
        }
    }

    /// Overwrites this layer's trainable parameters from the front of `src`
    /// and returns how many values were consumed.
    pub fn load_params(&mut self, src: &[f64]) -> usize {
        let n = self.trainable_count();
        let src = &src[..n];
        match self {
            Layer::Conv1d(l) => {
                let (w, b) = src.split_at(l.weights.len());
                l.weights.copy_from_slice(w);
                l.bias.copy_from_slice(b);
            }
            Layer::Dense(l) => {
                let (w, b) = src.split_at(l.weights.len());
                l.weights.copy_from_slice(w);
                l.bias.copy_from_slice(b);
            }
            Layer::BatchNorm1d(l) => {
                let (g, b) = src.split_at(l.channels);
                l.gamma.copy_from_slice(g);
                l.beta.copy_from_slice(b);
            }
            _ => {}
        }
        n
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::rngs::StdRng;
    use rand::{Rng, SeedableRng};

    fn rand_tensor(rng: &mut StdRng, len: usize, channels: usize) -> Tensor2 {
        let data: Vec<f64> = (0..len * channels).map(|_| rng.random_range(-1.0..1.0)).collect();
        Tensor2::from_data(len, channels, data).unwrap()
    }

    fn randomize(layer: &mut Layer, rng: &mut StdRng) {
        let n = layer.trainable_count();
        let params: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
        layer.load_params(&params);
    }

    #[test]
    fn conv_shapes_match_the_network_plan() {
        let c1 = Conv1d::new(5, 3, 7, 6);
        let out = c1.forward(&Tensor2::zeros(32, 7)).unwrap();
        assert_eq!(out.shape(), (10, 6));

        let c2 = Conv1d::new(4, 1, 6, 8);
        let out = c2.forward(&Tensor2::zeros(5, 6)).unwrap();
        assert_eq!(out.shape(), (2, 8));
    }

    #[test]
    fn conv_with_zero_weights_outputs_zero() {
        let conv = Conv1d::new(3, 2, 2, 4);
        let mut rng = StdRng::seed_from_u64(7);
        let out = conv.forward(&rand_tensor(&mut rng, 11, 2)).unwrap();
        assert!(out.data().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn conv_rejects_wrong_channels_and_short_input() {
        let conv = Conv1d::new(5, 3, 7, 6);
        let err = conv.forward(&Tensor2::zeros(32, 3)).unwrap_err();
        assert!(err.to_string().contains("7 channels"), "{err}");
        assert!(err.to_string().contains("3 channels"), "{err}");
        assert!(conv.forward(&Tensor2::zeros(4, 7)).is_err());
    }

    #[test]
    fn pool_averages_each_window() {
        let pool = AvgPool1d { kernel_size: 2, stride: 2 };
        let input = Tensor2::from_vector(vec![1.0, 3.0, 5.0, 7.0]);
        let out = pool.forward(&input).unwrap();
        assert_eq!(out.data(), &[2.0, 6.0]);

        let out = pool.forward(&Tensor2::zeros(10, 6)).unwrap();
        assert_eq!(out.shape(), (5, 6));
    }

    #[test]
    fn pool_preserves_constants() {
        let pool = AvgPool1d { kernel_size: 3, stride: 1 };
        let input = Tensor2::from_data(7, 2, vec![4.25; 14]).unwrap();
        let out = pool.forward(&input).unwrap();
        assert!(out.data().iter().all(|v| (*v - 4.25).abs() < 1e-12));
    }

    #[test]
    fn batchnorm_infer_with_identity_stats_is_identity() {
        let bn = BatchNorm1d::new(3, 1e-12, 0.01);
        let mut rng = StdRng::seed_from_u64(3);
        let input = rand_tensor(&mut rng, 9, 3);
        let out = bn.forward_infer(&input).unwrap();
        for (a, b) in out.data().iter().zip(input.data()) {
            assert_relative_eq!(a, b, max_relative = 1e-9);
        }
    }

    #[test]
    fn batchnorm_train_rescales_to_gamma_beta() {
        // Standardized input, gamma 2, beta 1: outputs should have mean 1
        // and standard deviation 2 up to the epsilon shrinkage.
        let mut bn = BatchNorm1d::new(1, 1e-9, 0.01);
        bn.gamma[0] = 2.0;
        bn.beta[0] = 1.0;
        let mut rng = StdRng::seed_from_u64(11);
        let raw: Vec<f64> = (0..200).map(|_| rng.random_range(-1.0..1.0)).collect();
        let mean: f64 = raw.iter().sum::<f64>() / 200.0;
        let var: f64 = raw.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / 200.0;
        let std_in: Vec<f64> = raw.iter().map(|v| (v - mean) / var.sqrt()).collect();

        let batch = vec![Tensor2::from_vector(std_in)];
        let (out, _, _) = bn.forward_train(&batch).unwrap();
        let data = out[0].data();
        let m: f64 = data.iter().sum::<f64>() / 200.0;
        let s: f64 = (data.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / 200.0).sqrt();
        assert_relative_eq!(m, 1.0, epsilon = 1e-6);
        assert_relative_eq!(s, 2.0, epsilon = 1e-6);
    }

    #[test]
    fn batchnorm_updates_running_stats_by_ema() {
        let mut bn = BatchNorm1d::new(1, 1e-3, 0.25);
        let batch = vec![Tensor2::from_vector(vec![2.0, 4.0, 6.0, 8.0])];
        bn.forward_train(&batch).unwrap();
        // batch mean 5, population variance 5
        assert_relative_eq!(bn.running_mean[0], 0.75 * 0.0 + 0.25 * 5.0);
        assert_relative_eq!(bn.running_var[0], 0.75 * 1.0 + 0.25 * 5.0);
    }

    #[test]
    fn dense_identity_passes_input_through() {
        let mut d = Dense::new(4, 4);
        for i in 0..4 {
            d.weights[i * 4 + i] = 1.0;
        }
        let out = d.forward_vec(&[1.0, -2.0, 3.0, 0.5]).unwrap();
        assert_eq!(out, vec![1.0, -2.0, 3.0, 0.5]);
    }

    #[test]
    fn parameter_counts_match_the_network_plan() {
        let conv1 = Layer::Conv1d(Conv1d::new(5, 3, 7, 6));
        assert_eq!(conv1.param_count(), 216);
        let bn1 = Layer::BatchNorm1d(BatchNorm1d::new(6, 1e-3, 0.01));
        assert_eq!(bn1.param_count(), 24);
        let conv2 = Layer::Conv1d(Conv1d::new(4, 1, 6, 8));
        assert_eq!(conv2.param_count(), 200);
        let bn2 = Layer::BatchNorm1d(BatchNorm1d::new(8, 1e-3, 0.01));
        assert_eq!(bn2.param_count(), 32);
        let dense2 = Layer::Dense(Dense::new(16, 16));
        assert_eq!(dense2.param_count(), 272);
        let early_head = Layer::Dense(Dense::new(30, 4));
        assert_eq!(early_head.param_count(), 124);
        assert_eq!(Layer::AvgPool1d(AvgPool1d { kernel_size: 2, stride: 2 }).param_count(), 0);
    }

    #[test]
    fn leaky_relu_scales_negatives_only() {
        let lr = LeakyRelu { alpha: 0.01 };
        let out = lr.forward(&Tensor2::from_vector(vec![-1.0, 2.0]));
        assert_eq!(out.data(), &[-0.01, 2.0]);
    }

    #[test]
    fn softmax_is_uniform_on_equal_logits() {
        assert_eq!(Softmax::forward_vec(&[0.0; 4]), vec![0.25; 4]);
        let out = Softmax::forward_vec(&[1000.0, 1000.0]);
        assert!(out.iter().all(|v| v.is_finite()));
        assert_relative_eq!(out[0], 0.5);
        assert_relative_eq!(out[1], 0.5);
    }

    #[test]
    fn softmax_output_is_a_probability_vector() {
        let mut rng = StdRng::seed_from_u64(5);
        for _ in 0..50 {
            let logits: Vec<f64> = (0..8).map(|_| rng.random_range(-30.0..30.0)).collect();
            let p = Softmax::forward_vec(&logits);
            assert!(p.iter().all(|v| *v > 0.0 && *v < 1.0));
            assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            let shifted: Vec<f64> = logits.iter().map(|v| v + 13.5).collect();
            let q = Softmax::forward_vec(&shifted);
            for (a, b) in p.iter().zip(&q) {
                assert!((a - b).abs() < 1e-9);
            }
        }
    }

    /// Finite-difference oracle: evaluates the scalar loss
    /// `L = sum_ij probe_ij * out_ij` through a fresh training forward pass.
    fn batch_loss(layer: &Layer, inputs: &[Tensor2], probe: &[Tensor2]) -> f64 {
        let mut layer = layer.clone();
        let (outputs, _) = layer.forward_batch(inputs).unwrap();
        outputs
            .iter()
            .zip(probe)
            .map(|(y, p)| y.data().iter().zip(p.data()).map(|(a, b)| a * b).sum::<f64>())
            .sum()
    }

    fn check_gradients(layer: &Layer, inputs: &[Tensor2], probe_seed: u64) {
        let mut rng = StdRng::seed_from_u64(probe_seed);
        let mut work = layer.clone();
        let (outputs, cache) = work.forward_batch(inputs).unwrap();
        let probe: Vec<Tensor2> = outputs
            .iter()
            .map(|y| rand_tensor(&mut rng, y.len(), y.channels()))
            .collect();
        let (dx, dparams) = layer.backward_batch(&cache, &probe).unwrap();

        let h = 1e-5;
        // Input gradients.
        for (s, input) in inputs.iter().enumerate() {
            for i in 0..input.data().len() {
                let mut plus = inputs.to_vec();
                plus[s].data_mut()[i] += h;
                let mut minus = inputs.to_vec();
                minus[s].data_mut()[i] -= h;
                let fd = (batch_loss(layer, &plus, &probe) - batch_loss(layer, &minus, &probe)) / (2.0 * h);
                let got = dx[s].data()[i];
                let denom = fd.abs().max(got.abs()).max(1e-6);
                assert!(
                    ((fd - got) / denom).abs() < 1e-4,
                    "input grad mismatch at sample {s} index {i}: fd={fd} analytic={got}"
                );
            }
        }
        // Parameter gradients.
        let mut base = Vec::new();
        layer.append_params(&mut base);
        for i in 0..base.len() {
            let mut plus = layer.clone();
            let mut p = base.clone();
            p[i] += h;
            plus.load_params(&p);
            let mut minus = layer.clone();
            p[i] = base[i] - h;
            minus.load_params(&p);
            let fd = (batch_loss(&plus, inputs, &probe) - batch_loss(&minus, inputs, &probe)) / (2.0 * h);
            let got = dparams[i];
            let denom = fd.abs().max(got.abs()).max(1e-6);
            assert!(
                ((fd - got) / denom).abs() < 1e-4,
                "param grad mismatch at index {i}: fd={fd} analytic={got}"
            );
        }
    }

    #[test]
    fn gradients_match_finite_differences() {
        let mut rng = StdRng::seed_from_u64(42);
        let batch: Vec<Tensor2> = (0..3).map(|_| rand_tensor(&mut rng, 9, 2)).collect();

        let mut conv = Layer::Conv1d(Conv1d::new(3, 2, 2, 4));
        randomize(&mut conv, &mut rng);
        check_gradients(&conv, &batch, 101);

        let pool = Layer::AvgPool1d(AvgPool1d { kernel_size: 3, stride: 2 });
        check_gradients(&pool, &batch, 102);

        let mut bn = Layer::BatchNorm1d(BatchNorm1d::new(2, 1e-3, 0.01));
        randomize(&mut bn, &mut rng);
        check_gradients(&bn, &batch, 103);

        let lr = Layer::LeakyRelu(LeakyRelu { alpha: 0.01 });
        check_gradients(&lr, &batch, 104);

        let flat_batch: Vec<Tensor2> = (0..3).map(|_| rand_tensor(&mut rng, 6, 1)).collect();
        let mut dense = Layer::Dense(Dense::new(6, 5));
        randomize(&mut dense, &mut rng);
        check_gradients(&dense, &flat_batch, 105);

        let softmax = Layer::Softmax(Softmax);
        check_gradients(&softmax, &flat_batch, 106);

        let flatten = Layer::Flatten(Flatten);
        check_gradients(&flatten, &batch, 107);
    }

    #[test]
    fn zero_upstream_gradient_gives_zero_gradients() {
        let mut rng = StdRng::seed_from_u64(9);
        let batch: Vec<Tensor2> = (0..2).map(|_| rand_tensor(&mut rng, 8, 2)).collect();
        let mut conv = Layer::Conv1d(Conv1d::new(3, 1, 2, 3));
        randomize(&mut conv, &mut rng);
        let mut work = conv.clone();
        let (outputs, cache) = work.forward_batch(&batch).unwrap();
        let zeros: Vec<Tensor2> = outputs.iter().map(|y| Tensor2::zeros(y.len(), y.channels())).collect();
        let (dx, dp) = conv.backward_batch(&cache, &zeros).unwrap();
        assert!(dx.iter().all(|t| t.data().iter().all(|v| *v == 0.0)));
        assert!(dp.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn dense_identity_backward_passes_gradient_through() {
        let mut d = Dense::new(3, 3);
        for i in 0..3 {
            d.weights[i * 3 + i] = 1.0;
        }
        let layer = Layer::Dense(d);
        let mut work = layer.clone();
        let batch = vec![Tensor2::from_vector(vec![0.5, -0.25, 2.0])];
        let (_, cache) = work.forward_batch(&batch).unwrap();
        let upstream = vec![Tensor2::from_vector(vec![1.0, 2.0, 3.0])];
        let (dx, _) = layer.backward_batch(&cache, &upstream).unwrap();
        assert_eq!(dx[0].data(), &[1.0, 2.0, 3.0]);
    }

    #[test]
    fn params_round_trip_through_flat_vectors() {
        let mut rng = StdRng::seed_from_u64(21);
        let mut layer = Layer::Conv1d(Conv1d::new(3, 1, 2, 4));
        randomize(&mut layer, &mut rng);
        let mut flat = Vec::new();
        layer.append_params(&mut flat);
        assert_eq!(flat.len(), layer.trainable_count());
        let mut other = Layer::Conv1d(Conv1d::new(3, 1, 2, 4));
        assert_eq!(other.load_params(&flat), flat.len());
        assert_eq!(layer, other);
    }
}
