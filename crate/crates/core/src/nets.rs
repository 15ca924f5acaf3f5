//! Declarative network topologies, their parameters, and the forward pass.
//!
//! A [`NetworkSpec`] is a flat list of [`Layer`]s whose shapes are validated at
//! build time. Parameters live in a [`NetworkState`] keyed by
//! `"<layer>/<role>"`, so the same state can be bound into an `f32` training
//! graph or an `f64` gradient-check graph.

use std::collections::BTreeMap;

use pirtune_autodiff::{Element, Gradients, Graph, Mode, Optimizer, RunningStats, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};

/// Leaky ReLU slope used throughout the GAN.
pub const LEAKY_SLOPE: f64 = 0.2;

/// Standard deviation of the truncated-normal weight initialiser.
pub const INIT_STD: f64 = 0.02;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum Activation {
    LeakyRelu(f64),
    Relu,
    Tanh,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum Layer {
    Dense {
        name: String,
        inputs: usize,
        outputs: usize,
    },
    /// Flat `[N, h·w·c]` to image `[N, h, w, c]`.
    Reshape {
        height: usize,
        width: usize,
        channels: usize,
    },
    Upsample2x,
    Conv {
        name: String,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        bias: bool,
    },
    BatchNorm {
        name: String,
        channels: usize,
    },
    Activation(Activation),
    Dropout {
        rate: f64,
    },
    MaxPool2x,
    GlobalAvgPool,
    Flatten,
    /// Applies tanh to column 0 (the real/fake score) and leaves class logits.
    SourceTanh,
    /// Exposes the current activation under `name` for introspection.
    Tap {
        name: String,
    },
}

impl Layer {
    pub fn kind(&self) -> &'static str {
        match self {
            Layer::Dense { .. } => "dense",
            Layer::Reshape { .. } => "reshape",
            Layer::Upsample2x => "upsample2x",
            Layer::Conv { .. } => "conv",
            Layer::BatchNorm { .. } => "batch_norm",
            Layer::Activation(Activation::LeakyRelu(_)) => "leaky_relu",
            Layer::Activation(Activation::Relu) => "relu",
            Layer::Activation(Activation::Tanh) => "tanh",
            Layer::Dropout { .. } => "dropout",
            Layer::MaxPool2x => "max_pool2x",
            Layer::GlobalAvgPool => "global_avg_pool",
            Layer::Flatten => "flatten",
            Layer::SourceTanh => "source_tanh",
            Layer::Tap { .. } => "tap",
        }
    }
}

/// Per-example activation shape.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Shape {
    Flat(usize),
    Image {
        height: usize,
        width: usize,
        channels: usize,
    },
}

impl Shape {
    pub fn image(height: usize, width: usize, channels: usize) -> Self {
        Shape::Image {
            height,
            width,
            channels,
        }
    }

    pub fn size(&self) -> usize {
        match *self {
            Shape::Flat(n) => n,
            Shape::Image {
                height,
                width,
                channels,
            } => height * width * channels,
        }
    }

    /// Tensor shape for a batch of `n`.
    pub fn batched(&self, n: usize) -> Vec<usize> {
        match *self {
            Shape::Flat(d) => vec![n, d],
            Shape::Image {
                height,
                width,
                channels,
            } => vec![n, height, width, channels],
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum NetworkRole {
    Generator,
    Discriminator,
    Estimator,
    Oracle,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NetworkSpec {
    pub name: String,
    pub role: NetworkRole,
    pub input: Shape,
    pub output: Shape,
    /// Number of one-hot classes the network is conditioned on (generator) or
    /// predicts alongside its source output (discriminator); 0 when
    /// unconditional.
    pub classes: usize,
    pub layers: Vec<Layer>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PresetName {
    Paper,
    Desk,
}

/// Network sizes and default step budgets for one experimental scale.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScalePreset {
    pub name: PresetName,
    pub image_size: usize,
    pub latent_size: usize,
    pub classes: usize,
    /// Depth of the initial 4×4 map followed by the output depth of each
    /// generator stage; the last entry is 3 (RGB).
    pub generator_depths: Vec<usize>,
    pub discriminator_filters: Vec<usize>,
    pub discriminator_strides: Vec<usize>,
    pub discriminator_dropout: f64,
    pub estimator_depths: Vec<usize>,
    pub oracle_depths: Vec<usize>,
    pub oracle_hidden: usize,
    pub pretrain_steps: usize,
    pub oracle_steps: usize,
    pub estimator_steps: usize,
    pub tune_steps: usize,
    pub iterate_estimator_steps: usize,
    pub batch_size: usize,
}

impl ScalePreset {
    pub fn paper() -> Self {
        Self {
            name: PresetName::Paper,
            image_size: 64,
            latent_size: 64,
            classes: 2,
            generator_depths: vec![512, 512, 256, 128, 64, 3],
            discriminator_filters: vec![16, 32, 64, 128, 256, 512],
            discriminator_strides: vec![2, 1, 2, 1, 2, 1],
            discriminator_dropout: 0.3,
            estimator_depths: vec![32, 64, 128, 256],
            oracle_depths: vec![16, 32, 64, 128],
            oracle_hidden: 64,
            pretrain_steps: 1_100_000,
            oracle_steps: 20_000,
            estimator_steps: 25_000,
            tune_steps: 50_000,
            iterate_estimator_steps: 25_000,
            batch_size: 32,
        }
    }

    pub fn desk() -> Self {
        Self {
            name: PresetName::Desk,
            image_size: 16,
            latent_size: 32,
            classes: 2,
            generator_depths: vec![128, 64, 32, 3],
            discriminator_filters: vec![16, 32, 64],
            discriminator_strides: vec![2, 1, 2],
            discriminator_dropout: 0.3,
            estimator_depths: vec![32, 64, 128, 256],
            oracle_depths: vec![16, 32, 64, 128],
            oracle_hidden: 64,
            pretrain_steps: 20_000,
            oracle_steps: 1_500,
            estimator_steps: 10_000,
            tune_steps: 5_000,
            iterate_estimator_steps: 2_500,
            batch_size: 32,
        }
    }

    pub fn by_name(name: PresetName) -> Self {
        match name {
            PresetName::Paper => Self::paper(),
            PresetName::Desk => Self::desk(),
        }
    }
}

fn dense(name: &str, inputs: usize, outputs: usize) -> Layer {
    Layer::Dense {
        name: name.to_string(),
        inputs,
        outputs,
    }
}

fn conv(name: &str, in_channels: usize, out_channels: usize, stride: usize, bias: bool) -> Layer {
    Layer::Conv {
        name: name.to_string(),
        in_channels,
        out_channels,
        kernel: 3,
        stride,
        bias,
    }
}

fn tap(name: &str) -> Layer {
    Layer::Tap {
        name: name.to_string(),
    }
}

/// Dense latent (plus one-hot class when conditional) to a 4×4 map, then one
/// upsample/conv/activation stage per remaining depth (no upsample on the
/// first stage, tanh on the last).
pub fn build_generator(preset: &ScalePreset, conditional: bool) -> Result<NetworkSpec> {
    let depths = &preset.generator_depths;
    if depths.len() < 2 || *depths.last().unwrap() != 3 {
        return Err(CoreError::InvalidSpec {
            network: "generator".into(),
            detail: format!("depth schedule {depths:?} must end in 3 and have ≥ 2 entries"),
        });
    }
    let classes = if conditional { preset.classes } else { 0 };
    let inputs = preset.latent_size + classes;
    let mut layers = vec![
        dense("project", inputs, 16 * depths[0]),
        Layer::Reshape {
            height: 4,
            width: 4,
            channels: depths[0],
        },
    ];
    let stages = depths.len() - 1;
    for stage in 0..stages {
        if stage > 0 {
            layers.push(Layer::Upsample2x);
        }
        layers.push(conv(
            &format!("stage{}", stage + 1),
            depths[stage],
            depths[stage + 1],
            1,
            true,
        ));
        layers.push(Layer::Activation(if stage + 1 == stages {
            Activation::Tanh
        } else {
            Activation::LeakyRelu(LEAKY_SLOPE)
        }));
    }
    let size = 4 << (stages - 1);
    NetworkSpec {
        name: "generator".into(),
        role: NetworkRole::Generator,
        input: Shape::Flat(inputs),
        output: Shape::image(size, size, 3),
        classes,
        layers,
    }
    .validated()
}

/// Strided conv stack with batch norm and dropout, then a dense head with one
/// tanh source score plus `classes` logits when conditional.
pub fn build_discriminator(preset: &ScalePreset, conditional: bool) -> Result<NetworkSpec> {
    if preset.discriminator_filters.len() != preset.discriminator_strides.len() {
        return Err(CoreError::InvalidSpec {
            network: "discriminator".into(),
            detail: "filters and strides differ in length".into(),
        });
    }
    let classes = if conditional { preset.classes } else { 0 };
    let mut layers = Vec::new();
    let mut channels = 3;
    let mut size = preset.image_size;
    for (i, (&filters, &stride)) in preset
        .discriminator_filters
        .iter()
        .zip(&preset.discriminator_strides)
        .enumerate()
    {
        let name = format!("conv{}", i + 1);
        layers.push(conv(&name, channels, filters, stride, false));
        layers.push(Layer::BatchNorm {
            name: format!("bn{}", i + 1),
            channels: filters,
        });
        layers.push(Layer::Activation(Activation::LeakyRelu(LEAKY_SLOPE)));
        // after the 1st, 3rd and 5th convolutions
        if i % 2 == 0 {
            layers.push(Layer::Dropout {
                rate: preset.discriminator_dropout,
            });
        }
        channels = filters;
        size = size.div_ceil(stride);
    }
    layers.push(Layer::Flatten);
    layers.push(dense("head", size * size * channels, 1 + classes));
    layers.push(Layer::SourceTanh);
    NetworkSpec {
        name: "discriminator".into(),
        role: NetworkRole::Discriminator,
        input: Shape::image(preset.image_size, preset.image_size, 3),
        output: Shape::Flat(1 + classes),
        classes,
        layers,
    }
    .validated()
}

/// Number of PIR bins the estimator classifies into.
pub const PIR_BINS: usize = 100;

/// Stride-2 conv blocks with leaky ReLU, global average pooling, and a dense
/// layer to [`PIR_BINS`] logits.
pub fn build_estimator(preset: &ScalePreset) -> Result<NetworkSpec> {
    let mut layers = Vec::new();
    let mut channels = 3;
    for (i, &depth) in preset.estimator_depths.iter().enumerate() {
        layers.push(conv(&format!("block{}", i + 1), channels, depth, 2, true));
        layers.push(Layer::Activation(Activation::LeakyRelu(LEAKY_SLOPE)));
        channels = depth;
    }
    layers.push(Layer::GlobalAvgPool);
    layers.push(dense("logits", channels, PIR_BINS));
    NetworkSpec {
        name: "estimator".into(),
        role: NetworkRole::Estimator,
        input: Shape::image(preset.image_size, preset.image_size, 3),
        output: Shape::Flat(PIR_BINS),
        classes: 0,
        layers,
    }
    .validated()
}

/// Small ReLU classifier with max pooling between convolutions and named taps
/// `conv1..convK`, `fc1`, `fc_out` for building filter-norm objectives.
pub fn build_oracle(preset: &ScalePreset) -> Result<NetworkSpec> {
    let mut layers = Vec::new();
    let mut channels = 3;
    let mut size = preset.image_size;
    let count = preset.oracle_depths.len();
    for (i, &depth) in preset.oracle_depths.iter().enumerate() {
        let name = format!("conv{}", i + 1);
        layers.push(conv(&name, channels, depth, 1, true));
        layers.push(Layer::Activation(Activation::Relu));
        layers.push(tap(&name));
        if i + 1 < count && size % 2 == 0 && size > 1 {
            layers.push(Layer::MaxPool2x);
            size /= 2;
        }
        channels = depth;
    }
    layers.push(Layer::GlobalAvgPool);
    layers.push(dense("fc1", channels, preset.oracle_hidden));
    layers.push(Layer::Activation(Activation::Relu));
    layers.push(tap("fc1"));
    layers.push(dense("fc_out", preset.oracle_hidden, preset.classes));
    layers.push(tap("fc_out"));
    NetworkSpec {
        name: "oracle".into(),
        role: NetworkRole::Oracle,
        input: Shape::image(preset.image_size, preset.image_size, 3),
        output: Shape::Flat(preset.classes),
        classes: preset.classes,
        layers,
    }
    .validated()
}

/// Named parameter and running-statistic shapes a spec requires.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParameterLayout {
    pub params: Vec<(String, Vec<usize>)>,
    pub running_stats: Vec<(String, usize)>,
}

impl NetworkSpec {
    fn invalid(&self, detail: String) -> CoreError {
        CoreError::InvalidSpec {
            network: self.name.clone(),
            detail,
        }
    }

    /// Walks the layers, checking that consecutive shapes compose and that the
    /// final shape matches `output`.
    pub fn validate(&self) -> Result<()> {
        let mut shape = self.input;
        for (i, layer) in self.layers.iter().enumerate() {
            shape = self
                .next_shape(shape, layer)
                .map_err(|d| self.invalid(format!("layer {i} ({}): {d}", layer.kind())))?;
        }
        if shape != self.output {
            return Err(self.invalid(format!(
                "layers produce {shape:?}, declared output {:?}",
                self.output
            )));
        }
        Ok(())
    }

    fn validated(self) -> Result<Self> {
        self.validate()?;
        Ok(self)
    }

    fn next_shape(&self, shape: Shape, layer: &Layer) -> std::result::Result<Shape, String> {
        use Shape::*;
        Ok(match (layer, shape) {
            (Layer::Dense { inputs, outputs, .. }, Flat(n)) if n == *inputs => Flat(*outputs),
            (
                Layer::Reshape {
                    height,
                    width,
                    channels,
                },
                Flat(n),
            ) if n == height * width * channels => Shape::image(*height, *width, *channels),
            (
                Layer::Upsample2x,
                Image {
                    height,
                    width,
                    channels,
                },
            ) => Shape::image(2 * height, 2 * width, channels),
            (
                Layer::Conv {
                    in_channels,
                    out_channels,
                    kernel,
                    stride,
                    ..
                },
                Image {
                    height,
                    width,
                    channels,
                },
            ) if channels == *in_channels && kernel % 2 == 1 && *stride > 0 => Shape::image(
                height.div_ceil(*stride),
                width.div_ceil(*stride),
                *out_channels,
            ),
            (Layer::BatchNorm { channels: c, .. }, Image { channels, .. }) if channels == *c => {
                shape
            }
            (Layer::BatchNorm { channels: c, .. }, Flat(n)) if n == *c => shape,
            (Layer::Activation(_), _) | (Layer::Tap { .. }, _) => shape,
            (Layer::Dropout { rate }, _) if (0.0..1.0).contains(rate) => shape,
            (
                Layer::MaxPool2x,
                Image {
                    height,
                    width,
                    channels,
                },
            ) if height % 2 == 0 && width % 2 == 0 => {
                Shape::image(height / 2, width / 2, channels)
            }
            (Layer::GlobalAvgPool, Image { channels, .. }) => Flat(channels),
            (Layer::Flatten, s) => Flat(s.size()),
            (Layer::SourceTanh, Flat(n)) if n == 1 + self.classes => shape,
            (layer, shape) => {
                return Err(format!("cannot apply {} to {shape:?}", layer.kind()));
            }
        })
    }

    pub fn layout(&self) -> ParameterLayout {
        let mut layout = ParameterLayout::default();
        for layer in &self.layers {
            match layer {
                Layer::Dense {
                    name,
                    inputs,
                    outputs,
                } => {
                    layout
                        .params
                        .push((format!("{name}/weights"), vec![*inputs, *outputs]));
                    layout.params.push((format!("{name}/bias"), vec![*outputs]));
                }
                Layer::Conv {
                    name,
                    in_channels,
                    out_channels,
                    kernel,
                    bias,
                    ..
                } => {
                    layout.params.push((
                        format!("{name}/kernel"),
                        vec![*kernel, *kernel, *in_channels, *out_channels],
                    ));
                    if *bias {
                        layout
                            .params
                            .push((format!("{name}/bias"), vec![*out_channels]));
                    }
                }
                Layer::BatchNorm { name, channels } => {
                    layout.params.push((format!("{name}/gamma"), vec![*channels]));
                    layout.params.push((format!("{name}/beta"), vec![*channels]));
                    layout.running_stats.push((name.clone(), *channels));
                }
                _ => {}
            }
        }
        layout
    }

    /// Names of the introspection taps, in forward order.
    pub fn tap_names(&self) -> Vec<&str> {
        self.layers
            .iter()
            .filter_map(|l| match l {
                Layer::Tap { name } => Some(name.as_str()),
                _ => None,
            })
            .collect()
    }

    /// Layer kinds excluding taps; two specs with different sequences are
    /// structurally different networks.
    pub fn kind_sequence(&self) -> Vec<&'static str> {
        self.layers
            .iter()
            .filter(|l| !matches!(l, Layer::Tap { .. }))
            .map(Layer::kind)
            .collect()
    }

    /// Fresh parameters: truncated normal (σ = 0.02, cut at 2σ) weights, zero
    /// biases, unit batch-norm scale.
    pub fn init_state<R: Rng + ?Sized>(&self, rng: &mut R) -> NetworkState {
        let layout = self.layout();
        let mut state = NetworkState::default();
        for (name, shape) in layout.params {
            let tensor = if name.ends_with("/bias") || name.ends_with("/beta") {
                Tensor::zeros(&shape)
            } else if name.ends_with("/gamma") {
                Tensor::full(&shape, 1.0)
            } else {
                Tensor::from_fn(&shape, |_| truncated_normal(rng) as f32)
            };
            state.trainable.insert(name.clone(), true);
            state.params.insert(name, tensor);
        }
        for (name, channels) in layout.running_stats {
            state.stats.insert(name, RunningStats::new(channels));
        }
        state
    }

    /// Checks that `state` holds exactly the tensors this spec needs.
    pub fn check_state(&self, state: &NetworkState) -> Result<()> {
        let layout = self.layout();
        for (name, shape) in &layout.params {
            let t = state.params.get(name).ok_or_else(|| {
                self.invalid(format!("state is missing parameter `{name}`"))
            })?;
            if t.shape() != shape.as_slice() {
                return Err(self.invalid(format!(
                    "parameter `{name}` has shape {:?}, expected {shape:?}",
                    t.shape()
                )));
            }
        }
        if state.params.len() != layout.params.len() {
            return Err(self.invalid("state has unexpected parameters".into()));
        }
        for (name, channels) in &layout.running_stats {
            let s = state
                .stats
                .get(name)
                .ok_or_else(|| self.invalid(format!("state is missing running stats `{name}`")))?;
            if s.mean.len() != *channels || s.var.len() != *channels {
                return Err(self.invalid(format!("running stats `{name}` have wrong width")));
            }
        }
        Ok(())
    }

    /// Records the forward pass for a batch held in `input`.
    ///
    /// Trainable parameters become differentiable leaves; frozen ones become
    /// constants. Batch-norm statistic updates are returned rather than applied.
    pub fn forward<T: Element, R: Rng + ?Sized>(
        &self,
        graph: &mut Graph<T>,
        state: &NetworkState,
        input: Var,
        mode: Mode,
        rng: &mut R,
    ) -> Result<ForwardPass> {
        self.forward_with(graph, state, &BTreeMap::new(), input, mode, rng)
    }

    /// [`forward`](Self::forward) with some parameters supplied as existing
    /// graph nodes instead of being read from `state`.
    pub fn forward_with<T: Element, R: Rng + ?Sized>(
        &self,
        graph: &mut Graph<T>,
        state: &NetworkState,
        overrides: &BTreeMap<String, Var>,
        input: Var,
        mode: Mode,
        rng: &mut R,
    ) -> Result<ForwardPass> {
        let mut pass = ForwardPass {
            output: input,
            taps: Vec::new(),
            params: Vec::new(),
            stats_updates: Vec::new(),
        };
        let bind = |graph: &mut Graph<T>, pass: &mut ForwardPass, name: String| -> Result<Var> {
            if let Some(&var) = overrides.get(&name) {
                pass.params.push((name, var));
                return Ok(var);
            }
            let t = state
                .params
                .get(&name)
                .ok_or_else(|| self.invalid(format!("missing parameter `{name}`")))?;
            let var = if state.is_trainable(&name) {
                graph.param(t.cast())
            } else {
                graph.constant(t.cast())
            };
            pass.params.push((name, var));
            Ok(var)
        };
        let mut x = input;
        for layer in &self.layers {
            x = match layer {
                Layer::Dense { name, .. } => {
                    let w = bind(graph, &mut pass, format!("{name}/weights"))?;
                    let b = bind(graph, &mut pass, format!("{name}/bias"))?;
                    graph.dense(x, w, b)?
                }
                Layer::Reshape {
                    height,
                    width,
                    channels,
                } => {
                    let n = graph.value(x).shape()[0];
                    graph.reshape(x, &[n, *height, *width, *channels])?
                }
                Layer::Upsample2x => graph.upsample_nn2x(x)?,
                Layer::Conv {
                    name, stride, bias, ..
                } => {
                    let k = bind(graph, &mut pass, format!("{name}/kernel"))?;
                    let y = graph.conv2d(x, k, *stride)?;
                    if *bias {
                        let b = bind(graph, &mut pass, format!("{name}/bias"))?;
                        graph.add_bias(y, b)?
                    } else {
                        y
                    }
                }
                Layer::BatchNorm { name, .. } => {
                    let gamma = bind(graph, &mut pass, format!("{name}/gamma"))?;
                    let beta = bind(graph, &mut pass, format!("{name}/beta"))?;
                    let stats = state
                        .stats
                        .get(name)
                        .ok_or_else(|| self.invalid(format!("missing running stats `{name}`")))?;
                    let stats_t = RunningStats {
                        mean: stats.mean.iter().map(|&v| T::of(v as f64)).collect(),
                        var: stats.var.iter().map(|&v| T::of(v as f64)).collect(),
                    };
                    let (y, updated) = graph.batch_norm(x, gamma, beta, &stats_t, mode)?;
                    if mode == Mode::Train {
                        pass.stats_updates.push((
                            name.clone(),
                            RunningStats {
                                mean: updated.mean.iter().map(|v| v.as_f64() as f32).collect(),
                                var: updated.var.iter().map(|v| v.as_f64() as f32).collect(),
                            },
                        ));
                    }
                    y
                }
                Layer::Activation(Activation::LeakyRelu(alpha)) => graph.leaky_relu(x, *alpha)?,
                Layer::Activation(Activation::Relu) => graph.leaky_relu(x, 0.0)?,
                Layer::Activation(Activation::Tanh) => graph.tanh(x)?,
                Layer::Dropout { rate } => graph.dropout(x, *rate, mode, rng)?,
                Layer::MaxPool2x => graph.max_pool2x(x)?,
                Layer::GlobalAvgPool => graph.global_avg_pool(x)?,
                Layer::Flatten => {
                    let shape = graph.value(x).shape();
                    let n = shape[0];
                    let rest = shape[1..].iter().product::<usize>();
                    graph.reshape(x, &[n, rest])?
                }
                Layer::SourceTanh => {
                    let source = graph.columns(x, 0, 1)?;
                    let source = graph.tanh(source)?;
                    if self.classes > 0 {
                        let logits = graph.columns(x, 1, self.classes)?;
                        graph.concat_columns(source, logits)?
                    } else {
                        source
                    }
                }
                Layer::Tap { name } => {
                    pass.taps.push((name.clone(), x));
                    x
                }
            };
        }
        pass.output = x;
        Ok(pass)
    }

    /// Inference-mode forward over `input` in chunks, returning the output.
    pub fn infer(&self, state: &NetworkState, input: &Tensor<f32>, chunk: usize) -> Result<Tensor<f32>> {
        self.infer_with_taps(state, input, chunk, &[]).map(|(out, _)| out)
    }

    /// Like [`infer`](Self::infer) but also returns the requested taps.
    pub fn infer_with_taps(
        &self,
        state: &NetworkState,
        input: &Tensor<f32>,
        chunk: usize,
        taps: &[&str],
    ) -> Result<(Tensor<f32>, Vec<Tensor<f32>>)> {
        let n = input.shape()[0];
        let chunk = chunk.max(1);
        let mut outputs = Vec::new();
        let mut tap_parts: Vec<Vec<Tensor<f32>>> = vec![Vec::new(); taps.len()];
        // infer mode draws nothing from the rng
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
        let mut frozen = state.clone();
        frozen.freeze();
        for start in (0..n).step_by(chunk) {
            let count = chunk.min(n - start);
            let mut g = Graph::<f32>::new();
            let x = g.constant(input.rows(start, count)?);
            let pass = self.forward(&mut g, &frozen, x, Mode::Infer, &mut rng)?;
            outputs.push(g.value(pass.output).clone());
            for (slot, wanted) in tap_parts.iter_mut().zip(taps) {
                let var = pass
                    .tap(wanted)
                    .ok_or_else(|| CoreError::UnknownLayer(wanted.to_string()))?;
                slot.push(g.value(var).clone());
            }
        }
        let join = |parts: &[Tensor<f32>]| Tensor::concat_rows(&parts.iter().collect::<Vec<_>>());
        let out = join(&outputs)?;
        let taps = tap_parts.iter().map(|p| join(p)).collect::<std::result::Result<_, _>>()?;
        Ok((out, taps))
    }
}

fn truncated_normal<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    loop {
        let v: f64 = StandardNormal.sample(rng);
        if v.abs() <= 2.0 {
            return v * INIT_STD;
        }
    }
}

/// Result of recording a forward pass on a graph.
#[derive(Clone, Debug)]
pub struct ForwardPass {
    pub output: Var,
    pub taps: Vec<(String, Var)>,
    /// Every bound parameter, trainable or not.
    pub params: Vec<(String, Var)>,
    /// Pending batch-norm running-statistic updates (train mode only).
    pub stats_updates: Vec<(String, RunningStats<f32>)>,
}

impl ForwardPass {
    pub fn tap(&self, name: &str) -> Option<Var> {
        self.taps.iter().find(|(n, _)| n == name).map(|(_, v)| *v)
    }
}

/// Learned parameters, batch-norm statistics and per-parameter trainable flags.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct NetworkState {
    pub params: BTreeMap<String, Tensor<f32>>,
    pub stats: BTreeMap<String, RunningStats<f32>>,
    pub trainable: BTreeMap<String, bool>,
}

impl NetworkState {
    pub fn is_trainable(&self, name: &str) -> bool {
        self.trainable.get(name).copied().unwrap_or(true)
    }

    pub fn freeze(&mut self) {
        for flag in self.trainable.values_mut() {
            *flag = false;
        }
        for name in self.params.keys() {
            self.trainable.insert(name.clone(), false);
        }
    }

    pub fn unfreeze(&mut self) {
        for name in self.params.keys() {
            self.trainable.insert(name.clone(), true);
        }
    }

    pub fn is_frozen(&self) -> bool {
        self.params.keys().all(|n| !self.is_trainable(n))
    }

    pub fn parameter_count(&self) -> usize {
        self.params.values().map(Tensor::len).sum()
    }

    pub fn commit_stats(&mut self, updates: Vec<(String, RunningStats<f32>)>) {
        for (name, stats) in updates {
            self.stats.insert(name, stats);
        }
    }

    /// One optimizer step on every trainable parameter bound in `bound`.
    /// Gradients of a parameter bound more than once are summed.
    pub fn apply_gradients(
        &mut self,
        opt: &mut Optimizer,
        bound: &[(String, Var)],
        grads: &mut Gradients<f32>,
    ) -> Result<()> {
        let mut summed: BTreeMap<String, Tensor<f32>> = BTreeMap::new();
        for (name, var) in bound {
            if !self.is_trainable(name) {
                continue;
            }
            let Some(g) = grads.take(*var) else { continue };
            match summed.get_mut(name) {
                Some(acc) => {
                    for (a, b) in acc.data_mut().iter_mut().zip(g.data()) {
                        *a += b;
                    }
                }
                None => {
                    summed.insert(name.clone(), g);
                }
            }
        }
        let updates = self
            .params
            .iter_mut()
            .filter_map(|(name, p)| summed.get(name).map(|g| (name.as_str(), p, g)));
        opt.apply(updates)?;
        Ok(())
    }
}
