//! A small deterministic CNN: valid 2-D convolutions, ReLU, 2x2 max
//! pooling and fully connected layers, with hand-written backpropagation.
//!
//! Activations are `f64`, stored channel-major (`[channel][row][col]`).

mod kernels;
pub mod model_io;
pub mod train;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use model_io::{decode_model, encode_model, load_model, save_model, ModelManifest, ModelMeta};
pub use train::{lr_schedule, mse_loss, sgd_step, train, xavier_init, TrainConfig, TrainReport, Velocity};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Shape3 {
    pub channels: usize,
    pub rows: usize,
    pub cols: usize,
}

impl Shape3 {
    pub fn new(channels: usize, rows: usize, cols: usize) -> Self {
        Self { channels, rows, cols }
    }

    pub fn flat(n: usize) -> Self {
        Self::new(n, 1, 1)
    }

    pub fn len(&self) -> usize {
        self.channels * self.rows * self.cols
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Layer description used to build networks and to persist them.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum LayerSpec {
    Conv { channels: usize, kernel: usize },
    Relu,
    MaxPool,
    Dense { outputs: usize },
}

/// The regression network layout: two 5x5 valid convolutions, each followed
/// by 2x2/2 max pooling, a hidden fully connected ReLU layer and a linear
/// output layer with one node per regressed parameter.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Architecture {
    pub input_rows: usize,
    pub input_cols: usize,
    pub conv1_channels: usize,
    pub conv2_channels: usize,
    pub kernel: usize,
    pub hidden: usize,
    pub n_out: usize,
    /// ReLU after each convolution.
    pub conv_relu: bool,
}

impl Architecture {
    pub fn regression(input_rows: usize, input_cols: usize, n_out: usize) -> Self {
        Self {
            input_rows,
            input_cols,
            conv1_channels: 6,
            conv2_channels: 16,
            kernel: 5,
            hidden: 250,
            n_out,
            conv_relu: true,
        }
    }

    pub fn layers(&self) -> Vec<LayerSpec> {
        let mut v = vec![LayerSpec::Conv {
            channels: self.conv1_channels,
            kernel: self.kernel,
        }];
        if self.conv_relu {
            v.push(LayerSpec::Relu);
        }
        v.push(LayerSpec::MaxPool);
        v.push(LayerSpec::Conv {
            channels: self.conv2_channels,
            kernel: self.kernel,
        });
        if self.conv_relu {
            v.push(LayerSpec::Relu);
        }
        v.push(LayerSpec::MaxPool);
        v.push(LayerSpec::Dense { outputs: self.hidden });
        v.push(LayerSpec::Relu);
        v.push(LayerSpec::Dense { outputs: self.n_out });
        v
    }

    pub fn input_shape(&self) -> Shape3 {
        Shape3::new(1, self.input_rows, self.input_cols)
    }

    pub fn build(&self) -> Result<Network> {
        Network::new(self.input_shape(), &self.layers())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Conv2d {
    pub input: Shape3,
    pub out_channels: usize,
    pub kernel: usize,
    /// `[out][in][ky][kx]`
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

impl Conv2d {
    pub fn output(&self) -> Shape3 {
        Shape3::new(
            self.out_channels,
            self.input.rows + 1 - self.kernel,
            self.input.cols + 1 - self.kernel,
        )
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    pub inputs: usize,
    pub outputs: usize,
    /// `[out][in]`
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Layer {
    Conv(Conv2d),
    Relu,
    MaxPool,
    Dense(Dense),
}

impl Layer {
    pub fn name(&self) -> &'static str {
        match self {
            Layer::Conv(_) => "conv",
            Layer::Relu => "relu",
            Layer::MaxPool => "maxpool",
            Layer::Dense(_) => "dense",
        }
    }

    /// `(weights, bias)` for parametric layers.
    pub fn params(&self) -> Option<(&[f64], &[f64])> {
        match self {
            Layer::Conv(c) => Some((&c.weights, &c.bias)),
            Layer::Dense(d) => Some((&d.weights, &d.bias)),
            _ => None,
        }
    }

    pub fn params_mut(&mut self) -> Option<(&mut Vec<f64>, &mut Vec<f64>)> {
        match self {
            Layer::Conv(c) => Some((&mut c.weights, &mut c.bias)),
            Layer::Dense(d) => Some((&mut d.weights, &mut d.bias)),
            _ => None,
        }
    }

    /// `(fan_in, fan_out)` of a parametric layer.
    pub fn fans(&self) -> Option<(usize, usize)> {
        match self {
            Layer::Conv(c) => {
                let k2 = c.kernel * c.kernel;
                Some((c.input.channels * k2, c.out_channels * k2))
            }
            Layer::Dense(d) => Some((d.inputs, d.outputs)),
            _ => None,
        }
    }
}

/// Sequential network with shapes resolved at construction. Weights start
/// at zero; see [`xavier_init`].
#[derive(Debug, Clone, PartialEq)]
pub struct Network {
    input: Shape3,
    specs: Vec<LayerSpec>,
    layers: Vec<Layer>,
    /// `shapes[i]` is the output shape of layer `i`.
    shapes: Vec<Shape3>,
}

/// Upper bound on parameters and activations per layer; keeps decoded
/// manifests from requesting absurd allocations.
const MAX_LAYER_LEN: usize = 1 << 28;

fn checked_len(factors: &[usize], what: &str) -> Result<usize> {
    factors
        .iter()
        .try_fold(1usize, |acc, &f| acc.checked_mul(f))
        .filter(|&n| n <= MAX_LAYER_LEN)
        .ok_or_else(|| Error::InvalidParameter(format!("{what} too large: {factors:?}")))
}

impl Network {
    /// Parameter count implied by `specs`, validated without allocating.
    pub fn count_params(input: Shape3, specs: &[LayerSpec]) -> Result<usize> {
        checked_len(&[input.channels, input.rows, input.cols], "input")?;
        let mut shape = input;
        let mut total = 0usize;
        for (n, spec) in specs.iter().enumerate() {
            match *spec {
                LayerSpec::Conv { channels, kernel } => {
                    if channels == 0 || kernel == 0 || shape.rows < kernel || shape.cols < kernel {
                        return Err(Error::Shape {
                            layer: format!("layer {n} (conv)"),
                            expected: format!("input of at least {kernel}x{kernel} and channels > 0"),
                            got: format!("{}x{}x{}", shape.channels, shape.rows, shape.cols),
                        });
                    }
                    let w = checked_len(&[channels, shape.channels, kernel, kernel], "conv weights")?;
                    total = total.saturating_add(w + channels);
                    shape = Shape3::new(channels, shape.rows + 1 - kernel, shape.cols + 1 - kernel);
                    checked_len(&[shape.channels, shape.rows, shape.cols], "conv output")?;
                }
                LayerSpec::Relu => {}
                LayerSpec::MaxPool => {
                    if shape.rows < 2 || shape.cols < 2 {
                        return Err(Error::Shape {
                            layer: format!("layer {n} (maxpool)"),
                            expected: "at least 2x2".into(),
                            got: format!("{}x{}", shape.rows, shape.cols),
                        });
                    }
                    shape = Shape3::new(shape.channels, shape.rows / 2, shape.cols / 2);
                }
                LayerSpec::Dense { outputs } => {
                    if outputs == 0 {
                        return Err(Error::InvalidParameter(format!("layer {n}: dense layer with 0 outputs")));
                    }
                    let w = checked_len(&[shape.len(), outputs], "dense weights")?;
                    total = total.saturating_add(w + outputs);
                    shape = Shape3::flat(outputs);
                }
            }
        }
        Ok(total)
    }

    pub fn new(input: Shape3, specs: &[LayerSpec]) -> Result<Self> {
        Self::count_params(input, specs)?;
        if input.is_empty() {
            return Err(Error::InvalidParameter("network input is empty".into()));
        }
        let mut shape = input;
        let mut layers = Vec::with_capacity(specs.len());
        let mut shapes = Vec::with_capacity(specs.len());
        for (n, spec) in specs.iter().enumerate() {
            let layer = match *spec {
                LayerSpec::Conv { channels, kernel } => {
                    if channels == 0 || kernel == 0 || shape.rows < kernel || shape.cols < kernel {
                        return Err(Error::Shape {
                            layer: format!("layer {n} (conv)"),
                            expected: format!("input of at least {kernel}x{kernel} and channels > 0"),
                            got: format!("{}x{}x{}", shape.channels, shape.rows, shape.cols),
                        });
                    }
                    Layer::Conv(Conv2d {
                        input: shape,
                        out_channels: channels,
                        kernel,
                        weights: vec![0.0; channels * shape.channels * kernel * kernel],
                        bias: vec![0.0; channels],
                    })
                }
                LayerSpec::Relu => Layer::Relu,
                LayerSpec::MaxPool => {
                    if shape.rows < 2 || shape.cols < 2 {
                        return Err(Error::Shape {
                            layer: format!("layer {n} (maxpool)"),
                            expected: "at least 2x2".into(),
                            got: format!("{}x{}", shape.rows, shape.cols),
                        });
                    }
                    Layer::MaxPool
                }
                LayerSpec::Dense { outputs } => {
                    if outputs == 0 {
                        return Err(Error::InvalidParameter(format!("layer {n}: dense layer with 0 outputs")));
                    }
                    let inputs = shape.len();
                    Layer::Dense(Dense {
                        inputs,
                        outputs,
                        weights: vec![0.0; inputs * outputs],
                        bias: vec![0.0; outputs],
                    })
                }
            };
            shape = match &layer {
                Layer::Conv(c) => c.output(),
                Layer::Relu => shape,
                Layer::MaxPool => Shape3::new(shape.channels, shape.rows / 2, shape.cols / 2),
                Layer::Dense(d) => Shape3::flat(d.outputs),
            };
            layers.push(layer);
            shapes.push(shape);
        }
        Ok(Self {
            input,
            specs: specs.to_vec(),
            layers,
            shapes,
        })
    }

    pub fn input_shape(&self) -> Shape3 {
        self.input
    }

    pub fn output_len(&self) -> usize {
        self.shapes.last().map_or(self.input.len(), |s| s.len())
    }

    pub fn specs(&self) -> &[LayerSpec] {
        &self.specs
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Layer] {
        &mut self.layers
    }

    pub fn shapes(&self) -> &[Shape3] {
        &self.shapes
    }

    pub fn param_count(&self) -> usize {
        self.layers
            .iter()
            .filter_map(|l| l.params())
            .map(|(w, b)| w.len() + b.len())
            .sum()
    }

    /// All parameters, layer by layer, weights before biases.
    pub fn flat_params(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_count());
        for (w, b) in self.layers.iter().filter_map(|l| l.params()) {
            out.extend_from_slice(w);
            out.extend_from_slice(b);
        }
        out
    }

    pub fn set_flat_params(&mut self, values: &[f64]) -> Result<()> {
        if values.len() != self.param_count() {
            return Err(Error::format(
                "weights",
                format!("network has {} parameters, blob holds {}", self.param_count(), values.len()),
            ));
        }
        let mut off = 0;
        for (w, b) in self.layers.iter_mut().filter_map(|l| l.params_mut()) {
            let (nw, nb) = (w.len(), b.len());
            w.copy_from_slice(&values[off..off + nw]);
            off += nw;
            b.copy_from_slice(&values[off..off + nb]);
            off += nb;
        }
        Ok(())
    }

    fn check_input(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.input.len() {
            return Err(Error::Shape {
                layer: "input".into(),
                expected: format!("{}x{}x{} = {}", self.input.channels, self.input.rows, self.input.cols, self.input.len()),
                got: format!("{} values", x.len()),
            });
        }
        Ok(())
    }

    pub fn forward(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.check_input(x)?;
        let mut act = x.to_vec();
        let mut shape = self.input;
        for (layer, &out_shape) in self.layers.iter().zip(&self.shapes) {
            act = layer_forward(layer, &act, shape);
            shape = out_shape;
        }
        Ok(act)
    }

    /// All activations: `acts[0]` is the input, `acts[i + 1]` the output of
    /// layer `i`.
    fn forward_all(&self, x: &[f64]) -> Vec<Vec<f64>> {
        let mut acts = Vec::with_capacity(self.layers.len() + 1);
        acts.push(x.to_vec());
        let mut shape = self.input;
        for (layer, &out_shape) in self.layers.iter().zip(&self.shapes) {
            let next = layer_forward(layer, acts.last().expect("non-empty"), shape);
            acts.push(next);
            shape = out_shape;
        }
        acts
    }

    /// Adds the gradient of `‖target - f(x)‖²` to `acc` and returns the loss.
    pub fn accumulate_gradient(&self, x: &[f64], target: &[f64], acc: &mut Gradients) -> Result<f64> {
        self.check_input(x)?;
        if target.len() != self.output_len() {
            return Err(Error::Shape {
                layer: "output".into(),
                expected: format!("{} targets", self.output_len()),
                got: format!("{} targets", target.len()),
            });
        }
        let acts = self.forward_all(x);
        let out = acts.last().expect("non-empty");
        let mut loss = 0.0;
        let mut grad: Vec<f64> = out
            .iter()
            .zip(target)
            .map(|(f, y)| {
                loss += (y - f) * (y - f);
                2.0 * (f - y)
            })
            .collect();
        // the input itself never needs a gradient
        let first_param = self.layers.iter().position(|l| l.params().is_some()).unwrap_or(0);
        for n in (0..self.layers.len()).rev() {
            let in_shape = if n == 0 { self.input } else { self.shapes[n - 1] };
            let need_input_grad = n > first_param;
            grad = layer_backward(&self.layers[n], &acts[n], in_shape, &grad, &mut acc.layers[n], need_input_grad);
            if !need_input_grad {
                break;
            }
        }
        Ok(loss)
    }

    /// Single-sample loss and its gradient.
    pub fn backward(&self, x: &[f64], target: &[f64]) -> Result<(f64, Gradients)> {
        let mut g = Gradients::zeros_like(self);
        let loss = self.accumulate_gradient(x, target, &mut g)?;
        Ok((loss, g))
    }
}

fn layer_forward(layer: &Layer, x: &[f64], shape: Shape3) -> Vec<f64> {
    match layer {
        Layer::Conv(c) => kernels::conv_forward(c, x),
        Layer::Relu => x.iter().map(|&v| v.max(0.0)).collect(),
        Layer::MaxPool => kernels::maxpool_forward(x, shape),
        Layer::Dense(d) => kernels::dense_forward(d, x),
    }
}

/// Backpropagates `grad_out` through one layer, accumulating parameter
/// gradients into `acc`. Returns the gradient w.r.t. the layer input (empty
/// when `need_input_grad` is false).
fn layer_backward(
    layer: &Layer,
    x: &[f64],
    shape: Shape3,
    grad_out: &[f64],
    acc: &mut ParamGrad,
    need_input_grad: bool,
) -> Vec<f64> {
    match layer {
        Layer::Conv(c) => kernels::conv_backward(c, x, grad_out, acc, need_input_grad),
        Layer::Relu => x
            .iter()
            .zip(grad_out)
            .map(|(&v, &g)| if v > 0.0 { g } else { 0.0 })
            .collect(),
        Layer::MaxPool => kernels::maxpool_backward(x, shape, grad_out),
        Layer::Dense(d) => kernels::dense_backward(d, x, grad_out, acc, need_input_grad),
    }
}

/// Gradient buffers mirroring a network's parameters (empty for
/// parameter-free layers).
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamGrad {
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub layers: Vec<ParamGrad>,
}

impl Gradients {
    pub fn zeros_like(net: &Network) -> Self {
        Self {
            layers: net
                .layers
                .iter()
                .map(|l| match l.params() {
                    Some((w, b)) => ParamGrad {
                        weights: vec![0.0; w.len()],
                        bias: vec![0.0; b.len()],
                    },
                    None => ParamGrad::default(),
                })
                .collect(),
        }
    }

    pub fn add_assign(&mut self, other: &Gradients) {
        for (a, b) in self.layers.iter_mut().zip(&other.layers) {
            a.weights.iter_mut().zip(&b.weights).for_each(|(x, y)| *x += y);
            a.bias.iter_mut().zip(&b.bias).for_each(|(x, y)| *x += y);
        }
    }

    pub fn scale(&mut self, factor: f64) {
        for g in &mut self.layers {
            g.weights.iter_mut().for_each(|x| *x *= factor);
            g.bias.iter_mut().for_each(|x| *x *= factor);
        }
    }

    pub fn flat(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for g in &self.layers {
            out.extend_from_slice(&g.weights);
            out.extend_from_slice(&g.bias);
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn tiny_arch() -> Architecture {
        Architecture {
            input_rows: 12,
            input_cols: 12,
            conv1_channels: 2,
            conv2_channels: 2,
            kernel: 3,
            hidden: 8,
            n_out: 3,
            conv_relu: true,
        }
    }

    fn randomize(net: &mut Network, rng: &mut ChaCha8Rng, scale: f64) {
        for (w, b) in net.layers_mut().iter_mut().filter_map(|l| l.params_mut()) {
            w.iter_mut().for_each(|v| *v = rng.random_range(-scale..scale));
            b.iter_mut().for_each(|v| *v = rng.random_range(-scale..scale));
        }
    }

    /// Direct nested-loop reference for the conv/pool/dense stack.
    fn reference_forward(net: &Network, x: &[f64]) -> Vec<f64> {
        let mut a = x.to_vec();
        let mut s = net.input_shape();
        for layer in net.layers() {
            match layer {
                Layer::Conv(c) => {
                    let o = c.output();
                    let k = c.kernel;
                    let mut out = vec![0.0; o.len()];
                    for oc in 0..o.channels {
                        for y in 0..o.rows {
                            for xx in 0..o.cols {
                                let mut acc = c.bias[oc];
                                for ic in 0..s.channels {
                                    for ky in 0..k {
                                        for kx in 0..k {
                                            let w = c.weights[((oc * s.channels + ic) * k + ky) * k + kx];
                                            acc += w * a[(ic * s.rows + y + ky) * s.cols + xx + kx];
                                        }
                                    }
                                }
                                out[(oc * o.rows + y) * o.cols + xx] = acc;
                            }
                        }
                    }
                    a = out;
                    s = o;
                }
                Layer::Relu => a.iter_mut().for_each(|v| *v = v.max(0.0)),
                Layer::MaxPool => {
                    let o = Shape3::new(s.channels, s.rows / 2, s.cols / 2);
                    let mut out = vec![0.0; o.len()];
                    for ch in 0..o.channels {
                        for y in 0..o.rows {
                            for xx in 0..o.cols {
                                let mut m = f64::NEG_INFINITY;
                                for dy in 0..2 {
                                    for dx in 0..2 {
                                        m = m.max(a[(ch * s.rows + 2 * y + dy) * s.cols + 2 * xx + dx]);
                                    }
                                }
                                out[(ch * o.rows + y) * o.cols + xx] = m;
                            }
                        }
                    }
                    a = out;
                    s = o;
                }
                Layer::Dense(d) => {
                    a = (0..d.outputs)
                        .map(|o| d.bias[o] + (0..d.inputs).map(|i| d.weights[o * d.inputs + i] * a[i]).sum::<f64>())
                        .collect();
                    s = Shape3::flat(d.outputs);
                }
            }
        }
        a
    }

    #[test]
    fn regression_shape_chain() {
        let net = Architecture::regression(156, 300, 3).build().unwrap();
        let s = net.shapes();
        let conv_pool: Vec<(usize, usize)> = s.iter().map(|s| (s.rows, s.cols)).collect();
        assert_eq!(conv_pool[0], (152, 296));
        assert_eq!(conv_pool[2], (76, 148));
        assert_eq!(conv_pool[3], (72, 144));
        assert_eq!(conv_pool[5], (36, 72));
        match &net.layers()[6] {
            Layer::Dense(d) => {
                assert_eq!(d.inputs, 36 * 72 * 16);
                assert_eq!(d.outputs, 250);
            }
            other => panic!("expected dense, got {other:?}"),
        }
        assert_eq!(net.output_len(), 3);
    }

    #[test]
    fn zero_network_outputs_zero() {
        let net = tiny_arch().build().unwrap();
        let x: Vec<f64> = (0..144).map(|i| (i as f64).sin()).collect();
        assert_eq!(net.forward(&x).unwrap(), vec![0.0; 3]);
    }

    #[test]
    fn hand_computed_toy() {
        // 1x1 conv with weight 2, bias 1 -> pool -> dense summing with weight 0.5
        let mut net = Network::new(
            Shape3::new(1, 2, 2),
            &[LayerSpec::Conv { channels: 1, kernel: 1 }, LayerSpec::MaxPool, LayerSpec::Dense { outputs: 1 }],
        )
        .unwrap();
        net.set_flat_params(&[2.0, 1.0, 0.5, 0.25]).unwrap();
        // constant input 3: conv -> 7, pool -> 7, dense -> 0.5*7 + 0.25
        assert_eq!(net.forward(&[3.0; 4]).unwrap(), vec![3.75]);
    }

    #[test]
    fn forward_matches_nested_loop_reference() {
        let mut arch = tiny_arch();
        arch.input_rows = 20;
        arch.input_cols = 24;
        arch.kernel = 5;
        let mut net = arch.build().unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        randomize(&mut net, &mut rng, 0.5);
        for _ in 0..5 {
            let x: Vec<f64> = (0..480).map(|_| rng.random_range(-1.0..1.0)).collect();
            let a = net.forward(&x).unwrap();
            let b = reference_forward(&net, &x);
            for (p, q) in a.iter().zip(&b) {
                assert!((p - q).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn shape_errors_name_the_layer() {
        let net = tiny_arch().build().unwrap();
        match net.forward(&[0.0; 10]) {
            Err(Error::Shape { layer, .. }) => assert_eq!(layer, "input"),
            other => panic!("{other:?}"),
        }
        assert!(Network::new(Shape3::new(1, 3, 3), &[LayerSpec::Conv { channels: 1, kernel: 5 }]).is_err());
    }

    #[test]
    fn zero_input_zero_target_zero_bias_gives_zero_gradient() {
        let mut net = tiny_arch().build().unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        randomize(&mut net, &mut rng, 0.5);
        for (_, b) in net.layers_mut().iter_mut().filter_map(|l| l.params_mut()) {
            b.iter_mut().for_each(|v| *v = 0.0);
        }
        let (loss, g) = net.backward(&[0.0; 144], &[0.0; 3]).unwrap();
        assert_eq!(loss, 0.0);
        assert!(g.flat().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn dense_only_gradient_is_closed_form() {
        let mut net = Network::new(Shape3::flat(4), &[LayerSpec::Dense { outputs: 2 }]).unwrap();
        let w = [0.1, -0.2, 0.3, 0.4, 0.5, 0.6, -0.7, 0.8];
        let mut p = w.to_vec();
        p.extend([0.0, 0.0]);
        net.set_flat_params(&p).unwrap();
        let x = [1.0, 2.0, -1.0, 0.5];
        let y = [0.3, -0.1];
        let (_, g) = net.backward(&x, &y).unwrap();
        for o in 0..2 {
            let wx: f64 = (0..4).map(|i| w[o * 4 + i] * x[i]).sum();
            for i in 0..4 {
                let expected = 2.0 * (wx - y[o]) * x[i];
                assert!((g.layers[0].weights[o * 4 + i] - expected).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn backprop_matches_central_differences() {
        let mut net = tiny_arch().build().unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        randomize(&mut net, &mut rng, 0.4);
        let x: Vec<f64> = (0..144).map(|_| rng.random_range(-1.0..1.0)).collect();
        let y = [0.3, -0.2, 0.5];
        let (_, g) = net.backward(&x, &y).unwrap();
        let g = g.flat();
        let base = net.flat_params();
        let h = 1e-5;
        for _ in 0..100 {
            let i = rng.random_range(0..base.len());
            let loss_at = |v: f64, net: &mut Network| {
                let mut p = base.clone();
                p[i] = v;
                net.set_flat_params(&p).unwrap();
                let f = net.forward(&x).unwrap();
                f.iter().zip(&y).map(|(a, b)| (a - b) * (a - b)).sum::<f64>()
            };
            let numeric = (loss_at(base[i] + h, &mut net) - loss_at(base[i] - h, &mut net)) / (2.0 * h);
            let rel = (numeric - g[i]).abs() / numeric.abs().max(g[i].abs()).max(1e-6);
            assert!(rel < 1e-4, "param {i}: analytic {} numeric {numeric}", g[i]);
        }
    }

    #[test]
    fn pooling_routes_each_gradient_once() {
        let x = vec![1.0, 5.0, 2.0, 0.0, 3.0, 4.0, 9.0, 9.0, -1.0, 0.0, 2.0, 8.0, 7.0, 7.0, 1.0, 3.0];
        let s = Shape3::new(1, 4, 4);
        let g = kernels::maxpool_backward(&x, s, &[1.0, 10.0, 100.0, 1000.0]);
        let nonzero: Vec<(usize, f64)> = g.iter().copied().enumerate().filter(|(_, v)| *v != 0.0).collect();
        // window maxima: 5 at 1, first 9 at 6, first 7 at 12, 8 at 11
        assert_eq!(nonzero, vec![(1, 1.0), (6, 10.0), (11, 1000.0), (12, 100.0)]);
    }
}
