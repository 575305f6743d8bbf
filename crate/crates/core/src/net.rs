//! Network configuration, state, and the forward/backward passes.
//!
//! The architecture is a shared trunk (conv / pool / batch-norm / randomized
//! leaky ReLU / dropout / fully connected blocks) feeding three independent
//! fully connected heads of width `classes`, one per loss. The output of the
//! last shared block is the penultimate feature vector used downstream for
//! verification.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::layers::{
    apply_multipliers, bn_backward, bn_forward_eval, bn_forward_train, conv_backward,
    conv_forward, conv_out_dim, dropout_multipliers, fc_backward, fc_forward, maxpool_backward,
    maxpool_forward, rrelu_multipliers_eval, rrelu_multipliers_train, BN_MOMENTUM,
};
use crate::tensor::{Real, Tensor};

/// Number of independent output heads (one per loss).
pub const HEAD_COUNT: usize = 3;

/// One entry of the layer vocabulary. Conv and Fc are the learnable layers;
/// the presets follow each of them with BatchNorm and Rrelu.
#[derive(Debug, Clone, PartialEq)]
pub enum Layer {
    Dropout { p: f64 },
    Conv { out_channels: usize, kernel: usize, stride: usize, pad: usize },
    BatchNorm,
    Rrelu,
    MaxPool { kernel: usize, stride: usize },
    Fc { width: usize },
}

impl Layer {
    fn describe(&self) -> String {
        match self {
            Layer::Dropout { p } => format!("dropout p={p}"),
            Layer::Conv { out_channels, kernel, stride, pad } => {
                format!("conv {out_channels}x{kernel}x{kernel} stride {stride} pad {pad}")
            }
            Layer::BatchNorm => "batchnorm".into(),
            Layer::Rrelu => "rrelu".into(),
            Layer::MaxPool { kernel, stride } => format!("maxpool {kernel}x{kernel} stride {stride}"),
            Layer::Fc { width } => format!("fc {width}"),
        }
    }
}

/// Shape of the activation flowing between layers.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ActShape {
    Spatial { channels: usize, height: usize, width: usize },
    Flat { width: usize },
}

impl ActShape {
    fn element_count(&self) -> usize {
        match *self {
            ActShape::Spatial { channels, height, width } => channels * height * width,
            ActShape::Flat { width } => width,
        }
    }

    fn channel_count(&self) -> usize {
        match *self {
            ActShape::Spatial { channels, .. } => channels,
            ActShape::Flat { width } => width,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NetworkConfig {
    /// Input as (channels, height, width).
    pub input: (usize, usize, usize),
    pub layers: Vec<Layer>,
    /// Class count C; every head has width C.
    pub classes: usize,
}

impl NetworkConfig {
    /// Desk-scale preset: 1x32x32 input, two conv blocks, two FC blocks of
    /// width 128, feature width 128.
    pub fn desk(classes: usize) -> Self {
        use Layer::*;
        NetworkConfig {
            input: (1, 32, 32),
            layers: vec![
                Conv { out_channels: 16, kernel: 5, stride: 1, pad: 2 },
                BatchNorm,
                Rrelu,
                MaxPool { kernel: 2, stride: 2 },
                Conv { out_channels: 32, kernel: 3, stride: 1, pad: 1 },
                BatchNorm,
                Rrelu,
                MaxPool { kernel: 2, stride: 2 },
                Fc { width: 128 },
                BatchNorm,
                Rrelu,
                Dropout { p: 0.5 },
                Fc { width: 128 },
                BatchNorm,
                Rrelu,
                Dropout { p: 0.5 },
            ],
            classes,
        }
    }

    /// Full-scale preset: input dropout, five conv layers, two FC blocks of
    /// width 2048. Input resolution is configurable; 150x220 by default.
    pub fn paper(classes: usize, input_hw: (usize, usize)) -> Self {
        use Layer::*;
        NetworkConfig {
            input: (1, input_hw.0, input_hw.1),
            layers: vec![
                Dropout { p: 0.1 },
                Conv { out_channels: 96, kernel: 11, stride: 4, pad: 0 },
                BatchNorm,
                Rrelu,
                MaxPool { kernel: 3, stride: 2 },
                Conv { out_channels: 256, kernel: 5, stride: 1, pad: 2 },
                BatchNorm,
                Rrelu,
                MaxPool { kernel: 3, stride: 2 },
                Conv { out_channels: 384, kernel: 3, stride: 1, pad: 1 },
                BatchNorm,
                Rrelu,
                Conv { out_channels: 384, kernel: 3, stride: 1, pad: 1 },
                BatchNorm,
                Rrelu,
                Conv { out_channels: 256, kernel: 3, stride: 1, pad: 1 },
                BatchNorm,
                Rrelu,
                MaxPool { kernel: 3, stride: 2 },
                Fc { width: 2048 },
                BatchNorm,
                Rrelu,
                Dropout { p: 0.5 },
                Fc { width: 2048 },
                BatchNorm,
                Rrelu,
                Dropout { p: 0.5 },
            ],
            classes,
        }
    }

    /// Computes the activation shape after every layer, rejecting
    /// inconsistent configurations with the offending layer pair named.
    pub fn shape_plan(&self) -> Result<Vec<ActShape>> {
        if self.classes == 0 {
            return Err(Error::Config("class count must be positive".into()));
        }
        let (c, h, w) = self.input;
        if c == 0 || h == 0 || w == 0 {
            return Err(Error::Config(format!("input shape {c}x{h}x{w} has a zero dimension")));
        }
        let mut shape = ActShape::Spatial { channels: c, height: h, width: w };
        let mut plan = Vec::with_capacity(self.layers.len());
        for (i, layer) in self.layers.iter().enumerate() {
            let feeder = if i == 0 { "input".to_string() } else { format!("layer {}", i - 1) };
            shape = match (layer, shape) {
                (Layer::Dropout { p }, s) => {
                    if !(0.0..=1.0).contains(p) {
                        return Err(Error::Config(format!(
                            "layer {i} (dropout) probability {p} outside [0,1]"
                        )));
                    }
                    s
                }
                (Layer::BatchNorm, s) | (Layer::Rrelu, s) => s,
                (
                    Layer::Conv { out_channels, kernel, stride, pad },
                    ActShape::Spatial { height, width, .. },
                ) => {
                    let oh = conv_out_dim(height, *kernel, *stride, *pad);
                    let ow = conv_out_dim(width, *kernel, *stride, *pad);
                    match (oh, ow) {
                        (Some(oh), Some(ow)) if oh > 0 && ow > 0 => ActShape::Spatial {
                            channels: *out_channels,
                            height: oh,
                            width: ow,
                        },
                        _ => {
                            return Err(Error::Config(format!(
                                "layer {i} ({}) does not fit the {height}x{width} output of {feeder}",
                                layer.describe()
                            )))
                        }
                    }
                }
                (Layer::Conv { .. }, ActShape::Flat { .. }) => {
                    return Err(Error::Config(format!(
                        "layer {i} ({}) requires a spatial input but {feeder} is flat",
                        layer.describe()
                    )))
                }
                (
                    Layer::MaxPool { kernel, stride },
                    ActShape::Spatial { channels, height, width },
                ) => {
                    if *stride == 0 || *kernel == 0 || height < *kernel || width < *kernel {
                        return Err(Error::Config(format!(
                            "layer {i} ({}) does not fit the {height}x{width} output of {feeder}",
                            layer.describe()
                        )));
                    }
                    ActShape::Spatial {
                        channels,
                        height: (height - kernel) / stride + 1,
                        width: (width - kernel) / stride + 1,
                    }
                }
                (Layer::MaxPool { .. }, ActShape::Flat { .. }) => {
                    return Err(Error::Config(format!(
                        "layer {i} ({}) requires a spatial input but {feeder} is flat",
                        layer.describe()
                    )))
                }
                (Layer::Fc { width }, s) => {
                    if *width == 0 {
                        return Err(Error::Config(format!("layer {i} (fc) has zero width")));
                    }
                    let _ = s.element_count();
                    ActShape::Flat { width: *width }
                }
            };
            plan.push(shape);
        }
        match plan.last() {
            Some(ActShape::Flat { .. }) => Ok(plan),
            _ => Err(Error::Config(
                "network must end in a fully connected layer before the heads".into(),
            )),
        }
    }

    /// Width of the penultimate feature vector (the last shared FC output).
    pub fn feature_width(&self) -> Result<usize> {
        match self.shape_plan()?.last() {
            Some(ActShape::Flat { width }) => Ok(*width),
            _ => unreachable!("shape_plan guarantees a flat tail"),
        }
    }

    /// Canonical one-line-per-layer text form; round-trips exactly.
    pub fn to_canonical_text(&self) -> String {
        let mut s = String::new();
        s.push_str(&format!("classes {}\n", self.classes));
        s.push_str(&format!("input {} {} {}\n", self.input.0, self.input.1, self.input.2));
        for layer in &self.layers {
            match layer {
                Layer::Dropout { p } => s.push_str(&format!("layer dropout {p}\n")),
                Layer::Conv { out_channels, kernel, stride, pad } => {
                    s.push_str(&format!("layer conv {out_channels} {kernel} {stride} {pad}\n"))
                }
                Layer::BatchNorm => s.push_str("layer batchnorm\n"),
                Layer::Rrelu => s.push_str("layer rrelu\n"),
                Layer::MaxPool { kernel, stride } => {
                    s.push_str(&format!("layer maxpool {kernel} {stride}\n"))
                }
                Layer::Fc { width } => s.push_str(&format!("layer fc {width}\n")),
            }
        }
        s
    }

    pub fn from_canonical_text(text: &str) -> Result<Self> {
        let mut classes = None;
        let mut input = None;
        let mut layers = Vec::new();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            let mut parts = line.split_whitespace();
            let head = parts.next().unwrap();
            let rest: Vec<&str> = parts.collect();
            let bad = |what: &str| {
                Error::Parse(format!("config line {}: {what}: {line:?}", lineno + 1))
            };
            match head {
                "classes" => {
                    classes = Some(
                        rest.first()
                            .and_then(|v| v.parse::<usize>().ok())
                            .ok_or_else(|| bad("expected class count"))?,
                    );
                }
                "input" => {
                    if rest.len() != 3 {
                        return Err(bad("expected three input dimensions"));
                    }
                    let dims: Vec<usize> = rest
                        .iter()
                        .map(|v| v.parse::<usize>())
                        .collect::<std::result::Result<_, _>>()
                        .map_err(|_| bad("bad input dimension"))?;
                    input = Some((dims[0], dims[1], dims[2]));
                }
                "layer" => {
                    let kind = rest.first().ok_or_else(|| bad("missing layer kind"))?;
                    let nums: Vec<&str> = rest[1..].to_vec();
                    let usize_at = |k: usize| {
                        nums.get(k)
                            .and_then(|v| v.parse::<usize>().ok())
                            .ok_or_else(|| bad("bad layer parameter"))
                    };
                    let layer = match *kind {
                        "dropout" => Layer::Dropout {
                            p: nums
                                .first()
                                .and_then(|v| v.parse::<f64>().ok())
                                .ok_or_else(|| bad("bad dropout probability"))?,
                        },
                        "conv" => Layer::Conv {
                            out_channels: usize_at(0)?,
                            kernel: usize_at(1)?,
                            stride: usize_at(2)?,
                            pad: usize_at(3)?,
                        },
                        "batchnorm" => Layer::BatchNorm,
                        "rrelu" => Layer::Rrelu,
                        "maxpool" => Layer::MaxPool { kernel: usize_at(0)?, stride: usize_at(1)? },
                        "fc" => Layer::Fc { width: usize_at(0)? },
                        other => return Err(bad(&format!("unknown layer kind {other:?}"))),
                    };
                    layers.push(layer);
                }
                other => return Err(Error::Parse(format!(
                    "config line {}: unknown directive {other:?}",
                    lineno + 1
                ))),
            }
        }
        Ok(NetworkConfig {
            input: input.ok_or_else(|| Error::Parse("config missing input line".into()))?,
            layers,
            classes: classes.ok_or_else(|| Error::Parse("config missing classes line".into()))?,
        })
    }
}

/// All learnable parameters plus batch-norm running statistics.
#[derive(Debug, Clone, PartialEq)]
pub struct NetworkState<T: Real = f32> {
    pub config: NetworkConfig,
    pub params: BTreeMap<String, Tensor<T>>,
    pub running: BTreeMap<String, Tensor<T>>,
    pub rng_seed: u64,
}

fn pname(layer: usize, which: &str) -> String {
    format!("layer{layer:02}.{which}")
}

fn hname(head: usize, which: &str) -> String {
    format!("head{head}.{which}")
}

impl<T: Real> NetworkState<T> {
    /// Elementwise conversion of every tensor; used to widen an `f32` state
    /// to `f64` for gradient oracles.
    pub fn cast<U: Real>(&self) -> NetworkState<U> {
        NetworkState {
            config: self.config.clone(),
            params: self.params.iter().map(|(k, v)| (k.clone(), v.cast())).collect(),
            running: self.running.iter().map(|(k, v)| (k.clone(), v.cast())).collect(),
            rng_seed: self.rng_seed,
        }
    }

    /// Folds the batch statistics recorded in a train-mode cache into the
    /// running estimates (EMA with factor [`BN_MOMENTUM`]).
    pub fn absorb_batch_stats(&mut self, cache: &Cache<T>) {
        let keep = T::from_f64(1.0 - BN_MOMENTUM);
        let take = T::from_f64(BN_MOMENTUM);
        for (i, entry) in cache.entries.iter().enumerate() {
            if let LayerCache::BatchNorm { batch_mean, batch_var, .. } = entry {
                for (which, batch) in [("running_mean", batch_mean), ("running_var", batch_var)] {
                    let t = self
                        .running
                        .get_mut(&pname(i, which))
                        .expect("running stats exist for every batchnorm layer");
                    for (r, b) in t.data_mut().iter_mut().zip(batch) {
                        *r = keep * *r + take * *b;
                    }
                }
            }
        }
    }
}

/// Tensor shapes implied by a config: (parameters, running statistics).
/// Used to validate deserialized snapshots against their config text.
pub fn parameter_shapes(
    config: &NetworkConfig,
) -> Result<(BTreeMap<String, Vec<usize>>, BTreeMap<String, Vec<usize>>)> {
    let plan = config.shape_plan()?;
    let mut params = BTreeMap::new();
    let mut running = BTreeMap::new();
    let mut prev = ActShape::Spatial {
        channels: config.input.0,
        height: config.input.1,
        width: config.input.2,
    };
    for (i, layer) in config.layers.iter().enumerate() {
        match layer {
            Layer::Conv { out_channels, kernel, .. } => {
                let in_c = prev.channel_count();
                params.insert(pname(i, "weight"), vec![*out_channels, in_c, *kernel, *kernel]);
                params.insert(pname(i, "bias"), vec![*out_channels]);
            }
            Layer::Fc { width } => {
                params.insert(pname(i, "weight"), vec![*width, prev.element_count()]);
                params.insert(pname(i, "bias"), vec![*width]);
            }
            Layer::BatchNorm => {
                let c = prev.channel_count();
                params.insert(pname(i, "gamma"), vec![c]);
                params.insert(pname(i, "beta"), vec![c]);
                running.insert(pname(i, "running_mean"), vec![c]);
                running.insert(pname(i, "running_var"), vec![c]);
            }
            Layer::Dropout { .. } | Layer::Rrelu | Layer::MaxPool { .. } => {}
        }
        prev = plan[i];
    }
    let feat = prev.element_count();
    for h in 0..HEAD_COUNT {
        params.insert(hname(h, "weight"), vec![config.classes, feat]);
        params.insert(hname(h, "bias"), vec![config.classes]);
    }
    Ok((params, running))
}

fn he_normal<T: Real>(shape: &[usize], fan_in: usize, rng: &mut ChaCha8Rng) -> Tensor<T> {
    let std = (2.0 / fan_in as f64).sqrt();
    let data = (0..shape.iter().product::<usize>())
        .map(|_| {
            let z: f64 = rng.sample(StandardNormal);
            T::from_f64(z * std)
        })
        .collect();
    Tensor::from_vec(shape, data)
}

/// He-normal initialization of all conv/FC weights (variance 2/fan_in),
/// zero biases, identity batch norm, unit running variance. Deterministic
/// in `seed`.
pub fn init_network(config: &NetworkConfig, seed: u64) -> Result<NetworkState<f32>> {
    let plan = config.shape_plan()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = BTreeMap::new();
    let mut running = BTreeMap::new();

    let mut prev = ActShape::Spatial {
        channels: config.input.0,
        height: config.input.1,
        width: config.input.2,
    };
    for (i, layer) in config.layers.iter().enumerate() {
        match layer {
            Layer::Conv { out_channels, kernel, .. } => {
                let in_c = prev.channel_count();
                let fan_in = in_c * kernel * kernel;
                params.insert(
                    pname(i, "weight"),
                    he_normal(&[*out_channels, in_c, *kernel, *kernel], fan_in, &mut rng),
                );
                params.insert(pname(i, "bias"), Tensor::zeros(&[*out_channels]));
            }
            Layer::Fc { width } => {
                let fan_in = prev.element_count();
                params.insert(pname(i, "weight"), he_normal(&[*width, fan_in], fan_in, &mut rng));
                params.insert(pname(i, "bias"), Tensor::zeros(&[*width]));
            }
            Layer::BatchNorm => {
                let c = prev.channel_count();
                params.insert(pname(i, "gamma"), Tensor::full(&[c], 1.0));
                params.insert(pname(i, "beta"), Tensor::zeros(&[c]));
                running.insert(pname(i, "running_mean"), Tensor::zeros(&[c]));
                running.insert(pname(i, "running_var"), Tensor::full(&[c], 1.0));
            }
            Layer::Dropout { .. } | Layer::Rrelu | Layer::MaxPool { .. } => {}
        }
        prev = plan[i];
    }

    let feat = prev.element_count();
    for h in 0..HEAD_COUNT {
        params.insert(hname(h, "weight"), he_normal(&[config.classes, feat], feat, &mut rng));
        params.insert(hname(h, "bias"), Tensor::zeros(&[config.classes]));
    }

    Ok(NetworkState { config: config.clone(), params, running, rng_seed: seed })
}

/// Forward-pass mode. Train mode carries the rng stream that feeds dropout
/// masks and randomized ReLU slopes.
pub enum Mode<'a> {
    Train(&'a mut ChaCha8Rng),
    Eval,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum CacheMode {
    Train,
    Eval,
}

enum LayerCache<T: Real> {
    /// Nothing to record (eval mode, or a no-param pass-through).
    Skipped,
    /// Multiplier vector covering dropout and rrelu backward.
    Mult(Vec<T>),
    Conv { input: Tensor<T> },
    BatchNorm { xhat: Tensor<T>, inv_std: Vec<T>, batch_mean: Vec<T>, batch_var: Vec<T> },
    MaxPool { input_shape: Vec<usize>, argmax: Vec<usize> },
    Fc { input: Tensor<T>, unflattened_shape: Vec<usize> },
}

/// Opaque per-layer activations recorded by a forward pass; consumed by
/// [`network_backward`].
pub struct Cache<T: Real> {
    mode: CacheMode,
    config_text: String,
    batch: usize,
    entries: Vec<LayerCache<T>>,
    head_input: Tensor<T>,
}

pub struct ForwardPass<T: Real> {
    /// Raw (pre-softmax) outputs of the three heads, each (batch, classes).
    pub head_outputs: [Tensor<T>; 3],
    /// Output of the last shared FC block, (batch, feature_width).
    pub penultimate: Tensor<T>,
    pub cache: Cache<T>,
}

fn spatial_tensor_shape(batch: usize, s: ActShape) -> Vec<usize> {
    match s {
        ActShape::Spatial { channels, height, width } => vec![batch, channels, height, width],
        ActShape::Flat { width } => vec![batch, width],
    }
}

pub fn network_forward<T: Real>(
    state: &NetworkState<T>,
    batch: &Tensor<T>,
    mode: Mode<'_>,
) -> Result<ForwardPass<T>> {
    let config = &state.config;
    let plan = config.shape_plan()?;
    let bs = batch.shape();
    let (c, h, w) = config.input;
    if bs.len() != 4 || bs[1] != c || bs[2] != h || bs[3] != w {
        return Err(Error::Dimension(format!(
            "batch shape {:?} does not match configured input {}x{}x{}",
            bs, c, h, w
        )));
    }
    let b = bs[0];
    if b == 0 {
        return Err(Error::Dimension("empty batch".into()));
    }

    let mut rng = match mode {
        Mode::Train(r) => Some(r),
        Mode::Eval => None,
    };
    let train = rng.is_some();

    let mut act = batch.clone();
    let mut entries = Vec::with_capacity(config.layers.len());

    for (i, layer) in config.layers.iter().enumerate() {
        let entry = match layer {
            Layer::Dropout { p } => {
                if train && *p > 0.0 {
                    let mult = dropout_multipliers(act.len(), *p, rng.as_mut().unwrap());
                    apply_multipliers(&mut act, &mult);
                    LayerCache::Mult(mult)
                } else {
                    LayerCache::Skipped
                }
            }
            Layer::Conv { stride, pad, .. } => {
                let weight = &state.params[&pname(i, "weight")];
                let bias = &state.params[&pname(i, "bias")];
                let out = conv_forward(&act, weight, bias, *stride, *pad);
                let entry = if train {
                    LayerCache::Conv { input: act }
                } else {
                    LayerCache::Skipped
                };
                act = out;
                entry
            }
            Layer::BatchNorm => {
                let gamma = &state.params[&pname(i, "gamma")];
                let beta = &state.params[&pname(i, "beta")];
                if train {
                    let bn = bn_forward_train(&act, gamma, beta);
                    act = bn.output;
                    LayerCache::BatchNorm {
                        xhat: bn.xhat,
                        inv_std: bn.inv_std,
                        batch_mean: bn.batch_mean,
                        batch_var: bn.batch_var,
                    }
                } else {
                    let rm = &state.running[&pname(i, "running_mean")];
                    let rv = &state.running[&pname(i, "running_var")];
                    act = bn_forward_eval(&act, gamma, beta, rm, rv);
                    LayerCache::Skipped
                }
            }
            Layer::Rrelu => {
                let mult = if let Some(r) = rng.as_mut() {
                    rrelu_multipliers_train(&act, *r)
                } else {
                    rrelu_multipliers_eval(&act)
                };
                apply_multipliers(&mut act, &mult);
                if train {
                    LayerCache::Mult(mult)
                } else {
                    LayerCache::Skipped
                }
            }
            Layer::MaxPool { kernel, stride } => {
                let input_shape = act.shape().to_vec();
                let (out, argmax) = maxpool_forward(&act, *kernel, *stride);
                act = out;
                if train {
                    LayerCache::MaxPool { input_shape, argmax }
                } else {
                    LayerCache::Skipped
                }
            }
            Layer::Fc { .. } => {
                let unflattened_shape = act.shape().to_vec();
                let flat_width: usize = unflattened_shape[1..].iter().product();
                let input = act.reshaped(&[b, flat_width]);
                let weight = &state.params[&pname(i, "weight")];
                let bias = &state.params[&pname(i, "bias")];
                act = fc_forward(&input, weight, bias);
                if train {
                    LayerCache::Fc { input, unflattened_shape }
                } else {
                    LayerCache::Skipped
                }
            }
        };
        entries.push(entry);
        debug_assert_eq!(act.shape(), &spatial_tensor_shape(b, plan[i])[..]);
    }

    let penultimate = act;
    let mut head_outputs = Vec::with_capacity(HEAD_COUNT);
    for hd in 0..HEAD_COUNT {
        let weight = &state.params[&hname(hd, "weight")];
        let bias = &state.params[&hname(hd, "bias")];
        head_outputs.push(fc_forward(&penultimate, weight, bias));
    }
    let head_outputs: [Tensor<T>; 3] = head_outputs.try_into().map_err(|_| ()).unwrap();

    let cache = Cache {
        mode: if train { CacheMode::Train } else { CacheMode::Eval },
        config_text: config.to_canonical_text(),
        batch: b,
        entries,
        head_input: if train { penultimate.clone() } else { Tensor::zeros(&[0]) },
    };

    Ok(ForwardPass { head_outputs, penultimate, cache })
}

/// Backpropagates the three head gradients through the trunk, returning a
/// gradient map congruent with `state.params`. The trunk accumulates the
/// contributions of all three heads.
pub fn network_backward<T: Real>(
    state: &NetworkState<T>,
    cache: &Cache<T>,
    head_grads: &[Tensor<T>; 3],
) -> Result<BTreeMap<String, Tensor<T>>> {
    if cache.mode != CacheMode::Train {
        return Err(Error::Consistency(
            "backward requires a cache from a train-mode forward".into(),
        ));
    }
    if cache.config_text != state.config.to_canonical_text() {
        return Err(Error::Consistency("cache was produced by a different network".into()));
    }
    for (h, g) in head_grads.iter().enumerate() {
        if g.shape() != [cache.batch, state.config.classes] {
            return Err(Error::Dimension(format!(
                "head {h} gradient shape {:?}, expected [{}, {}]",
                g.shape(),
                cache.batch,
                state.config.classes
            )));
        }
    }

    let mut grads: BTreeMap<String, Tensor<T>> = BTreeMap::new();

    // Heads: independent FC layers; their input gradients sum on the trunk.
    let feat_width = cache.head_input.shape()[1];
    let mut g = Tensor::<T>::zeros(&[cache.batch, feat_width]);
    for (hd, hg) in head_grads.iter().enumerate() {
        let weight = &state.params[&hname(hd, "weight")];
        let (dx, dw, db) = fc_backward(&cache.head_input, weight, hg);
        for (acc, v) in g.data_mut().iter_mut().zip(dx.data()) {
            *acc = *acc + *v;
        }
        grads.insert(hname(hd, "weight"), dw);
        grads.insert(hname(hd, "bias"), db);
    }

    for (i, layer) in state.config.layers.iter().enumerate().rev() {
        let entry = &cache.entries[i];
        match (layer, entry) {
            (Layer::Dropout { .. }, LayerCache::Mult(mult)) => {
                apply_multipliers(&mut g, mult);
            }
            (Layer::Dropout { .. }, LayerCache::Skipped) => {}
            (Layer::Rrelu, LayerCache::Mult(mult)) => {
                apply_multipliers(&mut g, mult);
            }
            (Layer::Conv { stride, pad, .. }, LayerCache::Conv { input }) => {
                let weight = &state.params[&pname(i, "weight")];
                let (dx, dw, db) = conv_backward(input, weight, &g, *stride, *pad);
                grads.insert(pname(i, "weight"), dw);
                grads.insert(pname(i, "bias"), db);
                g = dx;
            }
            (Layer::BatchNorm, LayerCache::BatchNorm { xhat, inv_std, .. }) => {
                let gamma = &state.params[&pname(i, "gamma")];
                let (dx, dgamma, dbeta) = bn_backward(xhat, inv_std, gamma, &g);
                grads.insert(pname(i, "gamma"), dgamma);
                grads.insert(pname(i, "beta"), dbeta);
                g = dx;
            }
            (Layer::MaxPool { .. }, LayerCache::MaxPool { input_shape, argmax }) => {
                g = maxpool_backward(input_shape, argmax, &g);
            }
            (Layer::Fc { .. }, LayerCache::Fc { input, unflattened_shape }) => {
                let weight = &state.params[&pname(i, "weight")];
                let (dx, dw, db) = fc_backward(input, weight, &g);
                grads.insert(pname(i, "weight"), dw);
                grads.insert(pname(i, "bias"), db);
                g = dx.reshaped(unflattened_shape);
            }
            _ => {
                return Err(Error::Consistency(format!(
                    "cache entry {i} does not match layer {}",
                    layer.describe()
                )))
            }
        }
    }

    Ok(grads)
}

/// Raw dropout mask of zeros and ones (no rescaling); the caller owns any
/// scaling policy.
pub fn make_dropout_mask<T: Real, R: Rng>(
    shape: &[usize],
    p: f64,
    rng: &mut R,
) -> Result<Tensor<T>> {
    if !(0.0..=1.0).contains(&p) {
        return Err(Error::Parameter(format!("dropout probability {p} outside [0,1]")));
    }
    let data = (0..shape.iter().product::<usize>())
        .map(|_| if rng.gen::<f64>() < p { T::zero() } else { T::one() })
        .collect();
    Ok(Tensor::from_vec(shape, data))
}
