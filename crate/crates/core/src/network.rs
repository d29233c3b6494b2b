//! Small convolutional classifiers with per-layer activation capture and an
//! optional channel mask on the last convolutional block.
//!
//! A network is a chain of conv blocks (`conv → relu → optional 2×2 pool`),
//! fully connected hidden layers (`dense → relu`) and one output layer. Each
//! conv block and each hidden dense layer contributes one entry to the
//! [`ActivationTrace`]; layer indices are 1-based.

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::tensor::Tensor;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use std::fmt;
use std::str::FromStr;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum LayerSpec {
    Conv {
        out_channels: usize,
        kernel: usize,
        pool: bool,
    },
    Dense {
        width: usize,
    },
    Output {
        classes: usize,
    },
}

impl fmt::Display for LayerSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            LayerSpec::Conv {
                out_channels,
                kernel,
                pool,
            } => {
                write!(f, "conv:{out_channels}:{kernel}")?;
                if *pool {
                    write!(f, ":pool")?;
                }
                Ok(())
            }
            LayerSpec::Dense { width } => write!(f, "fc:{width}"),
            LayerSpec::Output { classes } => write!(f, "out:{classes}"),
        }
    }
}

impl FromStr for LayerSpec {
    type Err = Error;

    /// `conv:<channels>:<kernel>[:pool]`, `fc:<width>` or `out:<classes>`.
    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::Config(format!("cannot parse layer spec {s:?}"));
        let parts: Vec<&str> = s.trim().split(':').collect();
        let num = |p: &str| p.parse::<usize>().map_err(|_| bad());
        match parts.as_slice() {
            ["conv", c, k] => Ok(LayerSpec::Conv {
                out_channels: num(c)?,
                kernel: num(k)?,
                pool: false,
            }),
            ["conv", c, k, "pool"] => Ok(LayerSpec::Conv {
                out_channels: num(c)?,
                kernel: num(k)?,
                pool: true,
            }),
            ["fc", w] => Ok(LayerSpec::Dense { width: num(w)? }),
            ["out", c] => Ok(LayerSpec::Output { classes: num(c)? }),
            _ => Err(bad()),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct NetworkConfig {
    /// `(channels, height, width)` of one input example.
    pub input: [usize; 3],
    pub layers: Vec<LayerSpec>,
}

impl NetworkConfig {
    /// Three conv blocks (16, 32, 64 channels, 3×3, pooled) and two hidden
    /// dense layers (128, 64).
    pub fn mini_conv_net(input: [usize; 3], classes: usize) -> Self {
        NetworkConfig {
            input,
            layers: vec![
                LayerSpec::Conv {
                    out_channels: 16,
                    kernel: 3,
                    pool: true,
                },
                LayerSpec::Conv {
                    out_channels: 32,
                    kernel: 3,
                    pool: true,
                },
                LayerSpec::Conv {
                    out_channels: 64,
                    kernel: 3,
                    pool: true,
                },
                LayerSpec::Dense { width: 128 },
                LayerSpec::Dense { width: 64 },
                LayerSpec::Output { classes },
            ],
        }
    }

    /// Two conv blocks (8, 16 channels) and one hidden dense layer, sized for
    /// finite-difference checks.
    pub fn mini_conv_net_tiny(input: [usize; 3], classes: usize) -> Self {
        NetworkConfig {
            input,
            layers: vec![
                LayerSpec::Conv {
                    out_channels: 8,
                    kernel: 3,
                    pool: true,
                },
                LayerSpec::Conv {
                    out_channels: 16,
                    kernel: 3,
                    pool: true,
                },
                LayerSpec::Dense { width: 16 },
                LayerSpec::Output { classes },
            ],
        }
    }

    pub fn classes(&self) -> usize {
        match self.layers.last() {
            Some(LayerSpec::Output { classes }) => *classes,
            _ => 0,
        }
    }

    /// Number of hidden layers, i.e. trace entries.
    pub fn hidden_layers(&self) -> usize {
        self.layers.len().saturating_sub(1)
    }

    /// 1-based index of the last conv block.
    pub fn last_conv_layer(&self) -> Option<usize> {
        self.layers
            .iter()
            .rposition(|l| matches!(l, LayerSpec::Conv { .. }))
            .map(|i| i + 1)
    }

    pub fn last_conv_channels(&self) -> Option<usize> {
        self.last_conv_layer().map(|l| match self.layers[l - 1] {
            LayerSpec::Conv { out_channels, .. } => out_channels,
            _ => unreachable!(),
        })
    }

    /// Display name in the "Conv Block n" / "FullyC n" convention.
    pub fn layer_name(&self, layer: usize) -> String {
        let kind = |l: &LayerSpec| matches!(l, LayerSpec::Conv { .. });
        let Some(spec) = layer.checked_sub(1).and_then(|i| self.layers.get(i)) else {
            return format!("Layer {layer}");
        };
        let ordinal = self.layers[..layer].iter().filter(|l| kind(l) == kind(spec)).count();
        match spec {
            LayerSpec::Conv { .. } => format!("Conv Block {ordinal}"),
            LayerSpec::Dense { .. } => format!("FullyC {ordinal}"),
            LayerSpec::Output { .. } => "Output".to_string(),
        }
    }

    /// Checks structural invariants and returns the output shape (without
    /// the batch dimension) of every layer.
    pub fn validate(&self) -> Result<Vec<Vec<usize>>> {
        let err = |index: usize, reason: &str| Error::InvalidLayer {
            index,
            reason: reason.to_string(),
        };
        if self.input.contains(&0) {
            return Err(err(0, "input dimensions must be positive"));
        }
        if self.layers.is_empty() {
            return Err(err(0, "network has no layers"));
        }
        let mut shapes = Vec::with_capacity(self.layers.len());
        let [_, mut h, mut w] = self.input;
        let mut flat: Option<usize> = None;
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            let index = i + 1;
            match *layer {
                LayerSpec::Conv {
                    out_channels,
                    kernel,
                    pool,
                } => {
                    if flat.is_some() {
                        return Err(err(index, "conv block after a fully connected layer"));
                    }
                    if out_channels == 0 || kernel == 0 {
                        return Err(err(index, "channels and kernel must be positive"));
                    }
                    if kernel % 2 == 0 {
                        return Err(err(index, "kernel must be odd for same padding"));
                    }
                    if pool {
                        if h < 2 || w < 2 {
                            return Err(err(index, "feature map too small to pool"));
                        }
                        h /= 2;
                        w /= 2;
                    }
                    shapes.push(vec![out_channels, h, w]);
                }
                LayerSpec::Dense { width } | LayerSpec::Output { classes: width } => {
                    let is_output = matches!(layer, LayerSpec::Output { .. });
                    if i == 0 {
                        return Err(err(index, "a conv block must precede the first dense layer"));
                    }
                    if is_output != (i == last) {
                        return Err(err(index, "the output layer must be last and unique"));
                    }
                    if width == 0 {
                        return Err(err(index, "width must be positive"));
                    }
                    flat = Some(width);
                    shapes.push(vec![width]);
                }
            }
        }
        if !matches!(self.layers[last], LayerSpec::Output { .. }) {
            return Err(err(last + 1, "the last layer must be the output layer"));
        }
        Ok(shapes)
    }

    /// Compact text form: `1x28x28;conv:16:3:pool,fc:128,out:10`.
    pub fn to_text(&self) -> String {
        let [c, h, w] = self.input;
        let layers: Vec<String> = self.layers.iter().map(ToString::to_string).collect();
        format!("{c}x{h}x{w};{}", layers.join(","))
    }

    pub fn from_text(s: &str) -> Result<Self> {
        let (input, layers) = s
            .split_once(';')
            .ok_or_else(|| Error::Config(format!("network text {s:?} lacks ';'")))?;
        let dims: Vec<usize> = input
            .split('x')
            .map(|d| d.trim().parse::<usize>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|_| Error::Config(format!("bad input shape {input:?}")))?;
        let input: [usize; 3] = dims
            .try_into()
            .map_err(|_| Error::Config(format!("input shape {input:?} must be CxHxW")))?;
        let layers = layers
            .split(',')
            .filter(|l| !l.trim().is_empty())
            .map(str::parse)
            .collect::<Result<Vec<LayerSpec>>>()?;
        Ok(NetworkConfig { input, layers })
    }
}

/// Binary keep/drop flags over the channels of the last conv block.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChannelMask {
    keep: Vec<bool>,
    threshold: f64,
    /// Epoch after which the mask was computed, when produced by training.
    pub epoch: Option<usize>,
    /// Number of batches the scores were averaged over.
    pub batches: usize,
}

impl ChannelMask {
    /// `max(1, round(fraction · channels))`, capped at `channels`.
    pub fn elimination_count(channels: usize, fraction: f64) -> usize {
        ((fraction * channels as f64).round() as usize).max(1).min(channels)
    }

    /// Drops the `k` lowest-scoring channels. The threshold is the `k`-th
    /// smallest score; channels tied at the threshold are dropped in
    /// ascending index order until exactly `k` are gone.
    pub fn from_scores(scores: &[f64], fraction: f64) -> Result<Self> {
        if scores.is_empty() {
            return Err(Error::NoChannels);
        }
        let k = Self::elimination_count(scores.len(), fraction);
        let mut order: Vec<usize> = (0..scores.len()).collect();
        order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]).then(a.cmp(&b)));
        let mut keep = vec![true; scores.len()];
        for &c in &order[..k] {
            keep[c] = false;
        }
        Ok(ChannelMask {
            keep,
            threshold: scores[order[k - 1]],
            epoch: None,
            batches: 0,
        })
    }

    pub fn from_parts(keep: Vec<bool>, threshold: f64) -> Self {
        ChannelMask {
            keep,
            threshold,
            epoch: None,
            batches: 0,
        }
    }

    pub fn all_ones(channels: usize) -> Self {
        Self::from_parts(vec![true; channels], f64::NEG_INFINITY)
    }

    pub fn channels(&self) -> usize {
        self.keep.len()
    }

    pub fn keep(&self) -> &[bool] {
        &self.keep
    }

    pub fn threshold(&self) -> f64 {
        self.threshold
    }

    pub fn removed(&self) -> Vec<usize> {
        self.keep
            .iter()
            .enumerate()
            .filter(|(_, &k)| !k)
            .map(|(i, _)| i)
            .collect()
    }
}

/// Graph handles of the hidden-layer outputs of one forward pass.
#[derive(Clone, Debug)]
pub struct ActivationTrace {
    layers: Vec<Var>,
    last_conv: usize,
}

impl ActivationTrace {
    /// Output of 1-based hidden layer `l`.
    pub fn layer(&self, l: usize) -> Var {
        self.layers[l - 1]
    }

    pub fn layers(&self) -> &[Var] {
        &self.layers
    }

    pub fn len(&self) -> usize {
        self.layers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.layers.is_empty()
    }

    /// Masked output of the last conv block, `(m, C, h, w)`.
    pub fn last_conv(&self) -> Var {
        self.layers[self.last_conv - 1]
    }

    pub fn last_conv_layer(&self) -> usize {
        self.last_conv
    }
}

#[derive(Clone, Debug)]
pub struct Forward {
    pub logits: Var,
    pub trace: ActivationTrace,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Network {
    config: NetworkConfig,
    params: Vec<Tensor>,
    mask: Option<ChannelMask>,
}

impl Network {
    /// He-normal weights (`std = sqrt(2 / fan_in)`) and zero biases from a
    /// seeded ChaCha stream.
    pub fn new(config: NetworkConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = Vec::new();
        for (shape_w, shape_b, fan_in) in param_shapes(&config) {
            let std = (2.0 / fan_in as f64).sqrt();
            let n: usize = shape_w.iter().product();
            let data = (0..n)
                .map(|_| {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    std * z
                })
                .collect::<Vec<f64>>();
            params.push(Tensor::from_parts(shape_w, data));
            params.push(Tensor::zeros(&shape_b));
        }
        Ok(Network {
            config,
            params,
            mask: None,
        })
    }

    /// Rebuilds a network from stored parameters, checking every shape.
    pub fn from_params(config: NetworkConfig, params: Vec<Tensor>) -> Result<Self> {
        config.validate()?;
        let expected: Vec<Vec<usize>> = param_shapes(&config).into_iter().flat_map(|(w, b, _)| [w, b]).collect();
        if expected.len() != params.len() {
            return Err(Error::Config(format!(
                "expected {} parameter tensors, got {}",
                expected.len(),
                params.len()
            )));
        }
        for (want, got) in expected.iter().zip(&params) {
            if want.as_slice() != got.shape() {
                return Err(Error::ShapeMismatch {
                    op: "from_params",
                    left: want.clone(),
                    right: got.shape().to_vec(),
                });
            }
        }
        Ok(Network {
            config,
            params,
            mask: None,
        })
    }

    pub fn config(&self) -> &NetworkConfig {
        &self.config
    }

    /// Parameters in declaration order: weight then bias for every layer.
    pub fn params(&self) -> &[Tensor] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Tensor] {
        &mut self.params
    }

    /// Weights sit at even positions, biases at odd ones.
    pub fn is_weight(index: usize) -> bool {
        index.is_multiple_of(2)
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(Tensor::len).sum()
    }

    pub fn mask(&self) -> Option<&ChannelMask> {
        self.mask.as_ref()
    }

    pub fn set_mask(&mut self, mask: ChannelMask) -> Result<()> {
        let layer = self.config.last_conv_channels().ok_or(Error::NoConvLayer)?;
        if mask.channels() != layer {
            return Err(Error::MaskMismatch {
                mask: mask.channels(),
                layer,
            });
        }
        self.mask = Some(mask);
        Ok(())
    }

    pub fn clear_mask(&mut self) -> Option<ChannelMask> {
        self.mask.take()
    }

    /// Inserts the parameters as graph leaves.
    pub fn bind(&self, g: &mut Graph, trainable: bool) -> Vec<Var> {
        self.params.iter().map(|p| g.leaf(p.clone(), trainable)).collect()
    }

    /// Forward pass recording each hidden layer. With `use_mask` and an
    /// attached mask, dropped channels of the last conv block are zeroed in
    /// the graph before anything downstream reads them.
    pub fn forward(&self, g: &mut Graph, params: &[Var], x: Var, use_mask: bool) -> Result<Forward> {
        let [c, h, w] = self.config.input;
        let xs = g.shape(x).to_vec();
        if xs.len() != 4 || xs[1..] != [c, h, w] {
            return Err(Error::ShapeMismatch {
                op: "forward",
                left: xs,
                right: vec![c, h, w],
            });
        }
        let last_conv = self.config.last_conv_layer().ok_or(Error::NoConvLayer)?;
        let mask = if use_mask { self.mask.as_ref() } else { None };
        if let Some(m) = mask {
            let layer = self.config.last_conv_channels().unwrap_or(0);
            if m.channels() != layer {
                return Err(Error::MaskMismatch {
                    mask: m.channels(),
                    layer,
                });
            }
        }
        let mut layers = Vec::with_capacity(self.config.hidden_layers());
        let mut cur = x;
        let mut logits = None;
        for (i, spec) in self.config.layers.iter().enumerate() {
            let (wv, bv) = (params[2 * i], params[2 * i + 1]);
            match *spec {
                LayerSpec::Conv { kernel, pool, .. } => {
                    cur = g.conv2d(cur, wv, Some(bv), kernel / 2)?;
                    cur = g.relu(cur);
                    if pool {
                        cur = g.max_pool2(cur)?;
                    }
                    if i + 1 == last_conv {
                        if let Some(m) = mask {
                            let full = channel_mask_tensor(m, g.shape(cur));
                            let mv = g.constant(full);
                            cur = g.mul(cur, mv)?;
                        }
                    }
                    layers.push(cur);
                }
                LayerSpec::Dense { .. } => {
                    if g.shape(cur).len() != 2 {
                        cur = g.flatten(cur);
                    }
                    cur = g.matmul(cur, wv)?;
                    cur = g.add_row(cur, bv)?;
                    cur = g.relu(cur);
                    layers.push(cur);
                }
                LayerSpec::Output { .. } => {
                    if g.shape(cur).len() != 2 {
                        cur = g.flatten(cur);
                    }
                    cur = g.matmul(cur, wv)?;
                    cur = g.add_row(cur, bv)?;
                    logits = Some(cur);
                }
            }
        }
        Ok(Forward {
            logits: logits.expect("validated config ends with output"),
            trace: ActivationTrace { layers, last_conv },
        })
    }

    /// Logits for a batch without recording gradients.
    pub fn logits(&self, x: &Tensor, use_mask: bool) -> Result<Tensor> {
        let mut g = Graph::new();
        let params = self.bind(&mut g, false);
        let xv = g.constant(x.clone());
        let f = self.forward(&mut g, &params, xv, use_mask)?;
        Ok(g.value(f.logits).clone())
    }

    /// Arg-max class per example, honoring the attached mask.
    pub fn predict(&self, x: &Tensor) -> Result<Vec<usize>> {
        Ok(argmax_rows(&self.logits(x, true)?))
    }
}

/// Row-wise arg-max; exact ties resolve to the smallest class index.
pub fn argmax_rows(t: &Tensor) -> Vec<usize> {
    let k = t.row_len();
    t.data()
        .chunks(k)
        .map(|row| {
            let mut best = 0;
            for (j, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = j;
                }
            }
            best
        })
        .collect()
}

fn channel_mask_tensor(mask: &ChannelMask, shape: &[usize]) -> Tensor {
    let (n, c) = (shape[0], shape[1]);
    let plane: usize = shape[2..].iter().product();
    let mut data = Vec::with_capacity(n * c * plane);
    for _ in 0..n {
        for &keep in mask.keep() {
            let v = if keep { 1.0 } else { 0.0 };
            data.extend(std::iter::repeat_n(v, plane));
        }
    }
    Tensor::from_parts(shape.to_vec(), data)
}

/// `(weight shape, bias shape, fan-in)` per layer of a validated config.
fn param_shapes(config: &NetworkConfig) -> Vec<(Vec<usize>, Vec<usize>, usize)> {
    let [mut c, mut h, mut w] = config.input;
    let mut flat = None;
    let mut out = Vec::new();
    for spec in &config.layers {
        match *spec {
            LayerSpec::Conv {
                out_channels,
                kernel,
                pool,
            } => {
                out.push((
                    vec![out_channels, c, kernel, kernel],
                    vec![out_channels],
                    c * kernel * kernel,
                ));
                c = out_channels;
                if pool {
                    h /= 2;
                    w /= 2;
                }
            }
            LayerSpec::Dense { width } | LayerSpec::Output { classes: width } => {
                let fan_in = flat.unwrap_or(c * h * w);
                out.push((vec![fan_in, width], vec![width], fan_in));
                flat = Some(width);
            }
        }
    }
    out
}
