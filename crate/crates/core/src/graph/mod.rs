//! Static compute graphs: an ordered list of named layers, each referring to
//! earlier layers by name.
//!
//! The graph is the unit everything else operates on — forward/backward
//! execution ([`exec`]), parameter and FLOP accounting ([`cost`]),
//! serialization ([`io`]) and structured pruning (`crate::pruner`).

pub mod cost;
pub(crate) mod ema;
pub mod exec;
pub mod io;
pub(crate) mod kernels;

use std::collections::HashMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Tensor, TensorSpec};

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;
pub const GN_EPS: f64 = 1e-5;

/// Layer type plus its static configuration. Serialized as
/// `{"type": ..., "config": {...}}` inside a layer record.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type", content = "config", rename_all = "snake_case")]
pub enum LayerKind {
    Input { channels: usize },
    Conv2d { in_channels: usize, out_channels: usize, kernel: usize, stride: usize, groups: usize, bias: bool },
    BatchNorm { channels: usize },
    Silu,
    Sigmoid,
    Add,
    Concat,
    GlobalAvgPool,
    Linear { in_features: usize, out_features: usize, bias: bool },
    Ema { channels: usize, groups: usize },
}

/// Named parameter tensor. `learnable = false` marks running statistics,
/// which are carried in checkpoints but excluded from parameter counts.
#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub name: String,
    pub values: Tensor,
    pub learnable: bool,
}

impl Param {
    pub fn new(name: &str, values: Tensor) -> Self {
        Self { name: name.to_string(), values, learnable: true }
    }

    pub fn buffer(name: &str, values: Tensor) -> Self {
        Self { name: name.to_string(), values, learnable: false }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    pub name: String,
    pub kind: LayerKind,
    pub inbound: Vec<String>,
    pub params: Vec<Param>,
    /// Original identities of the surviving channels. `None` means the layer
    /// has never been pruned (identity mapping). Kept so that re-applying a
    /// pruning plan is a no-op on an already-pruned graph.
    pub channel_ids: Option<Vec<usize>>,
}

impl Layer {
    pub fn param(&self, name: &str) -> Option<&Param> {
        self.params.iter().find(|p| p.name == name)
    }

    pub fn param_mut(&mut self, name: &str) -> Option<&mut Param> {
        self.params.iter_mut().find(|p| p.name == name)
    }

    /// Number of output channels this layer produces, where statically known.
    pub fn out_channels(&self) -> Option<usize> {
        match &self.kind {
            LayerKind::Input { channels } => Some(*channels),
            LayerKind::Conv2d { out_channels, .. } => Some(*out_channels),
            LayerKind::BatchNorm { channels } => Some(*channels),
            LayerKind::Linear { out_features, .. } => Some(*out_features),
            LayerKind::Ema { channels, .. } => Some(*channels),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Default)]
pub struct ModelGraph {
    layers: Vec<Layer>,
    index: HashMap<String, usize>,
}

impl ModelGraph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, layer: Layer) -> Result<()> {
        if self.index.contains_key(&layer.name) {
            return Err(Error::Graph(format!("duplicate layer name '{}'", layer.name)));
        }
        for inb in &layer.inbound {
            if !self.index.contains_key(inb) {
                return Err(Error::Graph(format!(
                    "layer '{}' refers to unknown inbound '{}'",
                    layer.name, inb
                )));
            }
        }
        let expected_inputs = match layer.kind {
            LayerKind::Input { .. } => 0,
            LayerKind::Add | LayerKind::Concat => layer.inbound.len().max(2),
            _ => 1,
        };
        if matches!(layer.kind, LayerKind::Add | LayerKind::Concat) {
            if layer.inbound.len() < 2 {
                return Err(Error::Graph(format!(
                    "layer '{}' needs at least two inbound layers",
                    layer.name
                )));
            }
        } else if layer.inbound.len() != expected_inputs {
            return Err(Error::Graph(format!(
                "layer '{}' expects {} inbound, got {}",
                layer.name,
                expected_inputs,
                layer.inbound.len()
            )));
        }
        self.index.insert(layer.name.clone(), self.layers.len());
        self.layers.push(layer);
        Ok(())
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Layer] {
        &mut self.layers
    }

    pub fn len(&self) -> usize {
        self.layers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.layers.is_empty()
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn layer(&self, name: &str) -> Option<&Layer> {
        self.index_of(name).map(|i| &self.layers[i])
    }

    pub fn layer_mut(&mut self, name: &str) -> Option<&mut Layer> {
        let i = self.index_of(name)?;
        Some(&mut self.layers[i])
    }

    /// The single graph input. Errors when the graph has zero or several.
    pub fn input_index(&self) -> Result<usize> {
        let inputs: Vec<usize> = self
            .layers
            .iter()
            .enumerate()
            .filter(|(_, l)| matches!(l.kind, LayerKind::Input { .. }))
            .map(|(i, _)| i)
            .collect();
        match inputs.as_slice() {
            [i] => Ok(*i),
            [] => Err(Error::Graph("graph has no input layer".into())),
            _ => Err(Error::Graph("graph has multiple input layers".into())),
        }
    }

    /// Indices of layers nothing consumes (the graph outputs).
    pub fn sink_indices(&self) -> Vec<usize> {
        let mut consumed = vec![false; self.layers.len()];
        for layer in &self.layers {
            for inb in &layer.inbound {
                consumed[self.index[inb]] = true;
            }
        }
        consumed
            .iter()
            .enumerate()
            .filter(|(i, c)| !**c && !matches!(self.layers[*i].kind, LayerKind::Input { .. }))
            .map(|(i, _)| i)
            .collect()
    }

    pub fn inbound_indices(&self, idx: usize) -> Vec<usize> {
        self.layers[idx].inbound.iter().map(|n| self.index[n]).collect()
    }

    /// Resolve every layer's output shape for the given input.
    pub fn infer_shapes(&self, input: &TensorSpec) -> Result<Vec<[usize; 4]>> {
        let mut shapes: Vec<[usize; 4]> = Vec::with_capacity(self.layers.len());
        for (idx, layer) in self.layers.iter().enumerate() {
            let ins: Vec<[usize; 4]> = layer.inbound.iter().map(|n| shapes[self.index[n]]).collect();
            let shape = match &layer.kind {
                LayerKind::Input { channels } => {
                    if input.channels != *channels {
                        return Err(Error::Graph(format!(
                            "input has {} channels, layer '{}' expects {}",
                            input.channels, layer.name, channels
                        )));
                    }
                    input.shape()
                }
                LayerKind::Conv2d { in_channels, out_channels, kernel: _, stride, groups, .. } => {
                    let [n, c, h, w] = ins[0];
                    if c != *in_channels {
                        return Err(Error::Graph(format!(
                            "conv '{}' expects {} input channels, got {}",
                            layer.name, in_channels, c
                        )));
                    }
                    if in_channels % groups != 0 || out_channels % groups != 0 {
                        return Err(Error::Graph(format!(
                            "conv '{}': groups {} must divide in={} and out={}",
                            layer.name, groups, in_channels, out_channels
                        )));
                    }
                    [n, *out_channels, (h - 1) / stride + 1, (w - 1) / stride + 1]
                }
                LayerKind::BatchNorm { channels } => {
                    let [n, c, h, w] = ins[0];
                    if c != *channels {
                        return Err(Error::Graph(format!(
                            "batchnorm '{}' expects {} channels, got {}",
                            layer.name, channels, c
                        )));
                    }
                    [n, c, h, w]
                }
                LayerKind::Silu | LayerKind::Sigmoid => ins[0],
                LayerKind::Add => {
                    let first = ins[0];
                    if ins.iter().any(|s| *s != first) {
                        return Err(Error::Graph(format!(
                            "add '{}' has mismatched inbound shapes {:?}",
                            layer.name, ins
                        )));
                    }
                    first
                }
                LayerKind::Concat => {
                    let [n, _, h, w] = ins[0];
                    let mut channels = 0;
                    for s in &ins {
                        if s[0] != n || s[2] != h || s[3] != w {
                            return Err(Error::Graph(format!(
                                "concat '{}' has mismatched spatial shapes {:?}",
                                layer.name, ins
                            )));
                        }
                        channels += s[1];
                    }
                    [n, channels, h, w]
                }
                LayerKind::GlobalAvgPool => {
                    let [n, c, _, _] = ins[0];
                    [n, c, 1, 1]
                }
                LayerKind::Linear { in_features, out_features, .. } => {
                    let [n, c, h, w] = ins[0];
                    if c * h * w != *in_features {
                        return Err(Error::Graph(format!(
                            "linear '{}' expects {} features, got {}x{}x{}",
                            layer.name, in_features, c, h, w
                        )));
                    }
                    [n, *out_features, 1, 1]
                }
                LayerKind::Ema { channels, groups } => {
                    let [n, c, h, w] = ins[0];
                    if c != *channels {
                        return Err(Error::Graph(format!(
                            "ema '{}' expects {} channels, got {}",
                            layer.name, channels, c
                        )));
                    }
                    if *groups == 0 || c % groups != 0 {
                        return Err(Error::Config(format!(
                            "ema '{}': groups {} must divide channels {}",
                            layer.name, groups, c
                        )));
                    }
                    [n, c, h, w]
                }
            };
            shapes.push(shape);
            let _ = idx;
        }
        Ok(shapes)
    }

    /// Zero every parameter, including running statistics.
    pub fn zero_params(&mut self) {
        for layer in &mut self.layers {
            for p in &mut layer.params {
                for v in p.values.data_mut() {
                    *v = 0.0;
                }
            }
        }
    }

    pub fn learnable_param_count(&self) -> u64 {
        self.layers
            .iter()
            .flat_map(|l| l.params.iter())
            .filter(|p| p.learnable)
            .map(|p| p.values.numel() as u64)
            .sum()
    }
}

/// Incremental graph construction with weight initialization.
///
/// Channel counts are tracked per layer name so downstream layers can infer
/// their input widths.
pub struct GraphBuilder<'r, R: Rng> {
    graph: ModelGraph,
    channels: HashMap<String, usize>,
    rng: &'r mut R,
}

impl<'r, R: Rng> GraphBuilder<'r, R> {
    pub fn new(rng: &'r mut R) -> Self {
        Self { graph: ModelGraph::new(), channels: HashMap::new(), rng }
    }

    pub fn channels_of(&self, name: &str) -> usize {
        self.channels[name]
    }

    fn track(&mut self, name: &str, channels: usize) -> String {
        self.channels.insert(name.to_string(), channels);
        name.to_string()
    }

    pub fn input(&mut self, name: &str, channels: usize) -> String {
        self.graph
            .push(Layer {
                name: name.to_string(),
                kind: LayerKind::Input { channels },
                inbound: vec![],
                params: vec![],
                channel_ids: None,
            })
            .expect("builder: input");
        self.track(name, channels)
    }

    pub fn conv(
        &mut self,
        name: &str,
        from: &str,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        groups: usize,
        bias: bool,
    ) -> String {
        let in_channels = self.channels_of(from);
        let fan_in = (in_channels / groups) * kernel * kernel;
        let std = (2.0 / fan_in as f64).sqrt();
        let weight = Tensor::randn([out_channels, in_channels / groups, kernel, kernel], std, self.rng);
        let mut params = vec![Param::new("weight", weight)];
        if bias {
            params.push(Param::new("bias", Tensor::zeros([out_channels, 1, 1, 1])));
        }
        self.graph
            .push(Layer {
                name: name.to_string(),
                kind: LayerKind::Conv2d { in_channels, out_channels, kernel, stride, groups, bias },
                inbound: vec![from.to_string()],
                params,
                channel_ids: None,
            })
            .expect("builder: conv");
        self.track(name, out_channels)
    }

    /// Depthwise convolution with an integer channel multiplier.
    pub fn depthwise(&mut self, name: &str, from: &str, kernel: usize, stride: usize, multiplier: usize) -> String {
        let in_channels = self.channels_of(from);
        let out = in_channels * multiplier;
        self.conv(name, from, out, kernel, stride, in_channels, false)
    }

    pub fn bn(&mut self, name: &str, from: &str) -> String {
        let channels = self.channels_of(from);
        let params = vec![
            Param::new("gamma", Tensor::filled([channels, 1, 1, 1], 1.0)),
            Param::new("beta", Tensor::zeros([channels, 1, 1, 1])),
            Param::buffer("running_mean", Tensor::zeros([channels, 1, 1, 1])),
            Param::buffer("running_var", Tensor::filled([channels, 1, 1, 1], 1.0)),
        ];
        self.graph
            .push(Layer {
                name: name.to_string(),
                kind: LayerKind::BatchNorm { channels },
                inbound: vec![from.to_string()],
                params,
                channel_ids: None,
            })
            .expect("builder: bn");
        self.track(name, channels)
    }

    fn simple(&mut self, name: &str, from: &str, kind: LayerKind) -> String {
        let channels = self.channels_of(from);
        self.graph
            .push(Layer {
                name: name.to_string(),
                kind,
                inbound: vec![from.to_string()],
                params: vec![],
                channel_ids: None,
            })
            .expect("builder: simple");
        self.track(name, channels)
    }

    pub fn silu(&mut self, name: &str, from: &str) -> String {
        self.simple(name, from, LayerKind::Silu)
    }

    pub fn sigmoid(&mut self, name: &str, from: &str) -> String {
        self.simple(name, from, LayerKind::Sigmoid)
    }

    pub fn add(&mut self, name: &str, from: &[&str]) -> String {
        let channels = self.channels_of(from[0]);
        self.graph
            .push(Layer {
                name: name.to_string(),
                kind: LayerKind::Add,
                inbound: from.iter().map(|s| s.to_string()).collect(),
                params: vec![],
                channel_ids: None,
            })
            .expect("builder: add");
        self.track(name, channels)
    }

    pub fn concat(&mut self, name: &str, from: &[&str]) -> String {
        let channels = from.iter().map(|f| self.channels_of(f)).sum();
        self.graph
            .push(Layer {
                name: name.to_string(),
                kind: LayerKind::Concat,
                inbound: from.iter().map(|s| s.to_string()).collect(),
                params: vec![],
                channel_ids: None,
            })
            .expect("builder: concat");
        self.track(name, channels)
    }

    pub fn global_avg_pool(&mut self, name: &str, from: &str) -> String {
        self.simple(name, from, LayerKind::GlobalAvgPool)
    }

    pub fn linear(&mut self, name: &str, from: &str, out_features: usize, bias: bool) -> String {
        let in_features = self.channels_of(from);
        let std = (1.0 / in_features as f64).sqrt();
        let weight = Tensor::randn([out_features, in_features, 1, 1], std, self.rng);
        let mut params = vec![Param::new("weight", weight)];
        if bias {
            params.push(Param::new("bias", Tensor::zeros([out_features, 1, 1, 1])));
        }
        self.graph
            .push(Layer {
                name: name.to_string(),
                kind: LayerKind::Linear { in_features, out_features, bias },
                inbound: vec![from.to_string()],
                params,
                channel_ids: None,
            })
            .expect("builder: linear");
        self.track(name, out_features)
    }

    pub fn ema(&mut self, name: &str, from: &str, groups: usize) -> String {
        let channels = self.channels_of(from);
        assert!(groups >= 1 && channels % groups == 0, "ema groups must divide channels");
        let cpg = channels / groups;
        let std1 = (2.0 / cpg as f64).sqrt();
        let std3 = (2.0 / (cpg * 9) as f64).sqrt();
        let params = vec![
            Param::new("w1", Tensor::randn([cpg, cpg, 1, 1], std1, self.rng)),
            Param::new("b1", Tensor::zeros([cpg, 1, 1, 1])),
            Param::new("w3", Tensor::randn([cpg, cpg, 3, 3], std3, self.rng)),
            Param::new("b3", Tensor::zeros([cpg, 1, 1, 1])),
            Param::new("gn_gamma", Tensor::filled([cpg, 1, 1, 1], 1.0)),
            Param::new("gn_beta", Tensor::zeros([cpg, 1, 1, 1])),
        ];
        self.graph
            .push(Layer {
                name: name.to_string(),
                kind: LayerKind::Ema { channels, groups },
                inbound: vec![from.to_string()],
                params,
                channel_ids: None,
            })
            .expect("builder: ema");
        self.track(name, channels)
    }

    /// conv -> batchnorm -> silu, the default block everywhere.
    pub fn conv_bn_silu(&mut self, prefix: &str, from: &str, out_channels: usize, kernel: usize, stride: usize) -> String {
        let c = self.conv(&format!("{prefix}.conv"), from, out_channels, kernel, stride, 1, false);
        let b = self.bn(&format!("{prefix}.bn"), &c);
        self.silu(&format!("{prefix}.act"), &b)
    }

    pub fn finish(self) -> ModelGraph {
        self.graph
    }
}

/// Forward pass through a single free-standing tensor, batch-stat mode.
/// Convenience for block-level tests.
pub fn run_graph(graph: &ModelGraph, input: &Tensor) -> Result<Tensor> {
    let acts = exec::forward(graph, input, exec::Mode::Train)?;
    let sinks = graph.sink_indices();
    let last = *sinks
        .last()
        .ok_or_else(|| Error::Graph("graph has no output".into()))?;
    Ok(acts.out(last).clone())
}
