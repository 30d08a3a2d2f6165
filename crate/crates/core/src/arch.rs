//! Typed layer graph describing a CNN before or after the multi-narrow rewrite.
//!
//! Layers are stored in topological order: every predecessor id must name a
//! layer that appears earlier in `layers`. Channel counts are totals across
//! all paths, so a grouped layer in an `M`-path graph carries `groups`
//! that is a multiple of `M` and each path owns a contiguous channel block.

use std::collections::{HashMap, HashSet};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ArchError {
    #[error("duplicate layer id `{0}`")]
    DuplicateId(String),
    #[error("layer `{layer}` references unknown or later predecessor `{pred}`")]
    UnknownPredecessor { layer: String, pred: String },
    #[error("layer `{layer}`: {msg}")]
    Invalid { layer: String, msg: String },
    #[error("graph: {0}")]
    Graph(String),
    #[error("cannot classify layer `{layer}` of kind {kind:?} at position {position:?}")]
    Unclassifiable {
        layer: String,
        kind: LayerKind,
        position: LayerPosition,
    },
    #[error("spatial size collapsed to zero at layer `{0}`")]
    Spatial(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum LayerKind {
    Input,
    Conv2d,
    DepthwiseConv2d,
    Dense,
    Norm,
    ReLU,
    /// Average pooling with window and stride equal to `kernel`.
    Pool,
    GlobalPool,
    /// Residual join: elementwise sum of its predecessors.
    Add,
    ClassifierHead,
    /// Mean over the path axis of a grouped classifier output.
    Aggregate,
}

impl LayerKind {
    pub fn is_conv(self) -> bool {
        matches!(self, LayerKind::Conv2d | LayerKind::DepthwiseConv2d)
    }

    pub fn is_linear(self) -> bool {
        matches!(self, LayerKind::Dense | LayerKind::ClassifierHead)
    }

    /// Layers that own trainable tensors.
    pub fn has_params(self) -> bool {
        self.is_conv() || self.is_linear() || self == LayerKind::Norm
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum LayerPosition {
    InputFacing,
    Intermediate,
    OutputFacing,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum PreservationClass {
    DenseCoupling,
    OneSidedFixed,
    Depthwise,
    PerChannel,
    ParameterFree,
}

/// How path outputs are combined by an [`LayerKind::Aggregate`] layer.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AggregationMode {
    /// Arithmetic mean of pre-softmax logits.
    #[default]
    Logits,
    /// Log of the mean of per-path softmax probabilities.
    Probabilities,
}

fn one() -> usize {
    1
}

fn is_one(v: &usize) -> bool {
    *v == 1
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerSpec {
    pub id: String,
    pub kind: LayerKind,
    /// Square spatial kernel size for conv and pool kinds, 0 otherwise.
    #[serde(default)]
    pub kernel: usize,
    pub in_channels: usize,
    pub out_channels: usize,
    #[serde(default = "one")]
    pub groups: usize,
    #[serde(default = "one")]
    pub stride: usize,
    #[serde(default)]
    pub has_bias: bool,
    #[serde(default)]
    pub predecessors: Vec<String>,
    /// Number of times the predecessor's channels are tiled before this
    /// layer reads them. Only input-facing layers of multi-path graphs use
    /// values above one.
    #[serde(default = "one", skip_serializing_if = "is_one")]
    pub input_replicas: usize,
    /// Stage index this layer's channel width belongs to, if any.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub stage: Option<usize>,
}

impl LayerSpec {
    pub fn new(id: impl Into<String>, kind: LayerKind, in_channels: usize, out_channels: usize) -> Self {
        LayerSpec {
            id: id.into(),
            kind,
            kernel: 0,
            in_channels,
            out_channels,
            groups: 1,
            stride: 1,
            has_bias: false,
            predecessors: Vec::new(),
            input_replicas: 1,
            stage: None,
        }
    }

    pub fn after(mut self, pred: &str) -> Self {
        self.predecessors.push(pred.to_string());
        self
    }

    pub fn with_kernel(mut self, kernel: usize, stride: usize) -> Self {
        self.kernel = kernel;
        self.stride = stride;
        self
    }

    pub fn with_groups(mut self, groups: usize) -> Self {
        self.groups = groups;
        self
    }

    pub fn with_bias(mut self, has_bias: bool) -> Self {
        self.has_bias = has_bias;
        self
    }

    pub fn in_stage(mut self, stage: usize) -> Self {
        self.stage = Some(stage);
        self
    }

    /// Zero-padding applied on each side by conv layers ("same" for odd kernels).
    pub fn padding(&self) -> usize {
        if self.kind.is_conv() {
            self.kernel / 2
        } else {
            0
        }
    }

    /// Output spatial size for an input of `h` x `w`.
    pub fn output_hw(&self, h: usize, w: usize) -> Option<(usize, usize)> {
        match self.kind {
            LayerKind::Conv2d | LayerKind::DepthwiseConv2d => {
                let p = self.padding();
                if h + 2 * p < self.kernel || w + 2 * p < self.kernel {
                    return None;
                }
                Some((
                    (h + 2 * p - self.kernel) / self.stride + 1,
                    (w + 2 * p - self.kernel) / self.stride + 1,
                ))
            }
            LayerKind::Pool => {
                let (oh, ow) = (h / self.kernel, w / self.kernel);
                (oh > 0 && ow > 0).then_some((oh, ow))
            }
            LayerKind::GlobalPool | LayerKind::Dense | LayerKind::ClassifierHead | LayerKind::Aggregate => Some((1, 1)),
            _ => Some((h, w)),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArchGraph {
    /// Width divisor applied by the transform (1 for a baseline).
    pub r: usize,
    /// Number of independent paths (1 for a baseline).
    #[serde(rename = "M")]
    pub path_multiplicity: usize,
    #[serde(default)]
    pub stage_widths: Vec<usize>,
    #[serde(default)]
    pub aggregation: AggregationMode,
    pub layers: Vec<LayerSpec>,
}

impl ArchGraph {
    pub fn baseline(layers: Vec<LayerSpec>, stage_widths: Vec<usize>) -> Self {
        ArchGraph {
            r: 1,
            path_multiplicity: 1,
            stage_widths,
            aggregation: AggregationMode::Logits,
            layers,
        }
    }

    pub fn index_of(&self, id: &str) -> Option<usize> {
        self.layers.iter().position(|l| l.id == id)
    }

    pub fn layer(&self, id: &str) -> Option<&LayerSpec> {
        self.layers.iter().find(|l| l.id == id)
    }

    pub fn input(&self) -> &LayerSpec {
        &self.layers[0]
    }

    /// The final layer: an `Aggregate` for multi-path graphs, the classifier otherwise.
    pub fn sink(&self) -> &LayerSpec {
        self.layers.last().expect("validated graph is nonempty")
    }

    pub fn input_channels(&self) -> usize {
        self.input().out_channels
    }

    /// Classes seen by the caller (output width of the sink).
    pub fn num_classes(&self) -> usize {
        self.sink().out_channels
    }

    pub fn is_transformed(&self) -> bool {
        self.r > 1 || self.path_multiplicity > 1
    }

    /// Predecessor indices of every layer, in declaration order.
    pub fn predecessor_indices(&self) -> Vec<Vec<usize>> {
        let index: HashMap<&str, usize> = self
            .layers
            .iter()
            .enumerate()
            .map(|(i, l)| (l.id.as_str(), i))
            .collect();
        self.layers
            .iter()
            .map(|l| l.predecessors.iter().map(|p| index[p.as_str()]).collect())
            .collect()
    }

    /// Indices of layers consuming each layer's output.
    pub fn successor_indices(&self) -> Vec<Vec<usize>> {
        let mut succ = vec![Vec::new(); self.layers.len()];
        for (i, preds) in self.predecessor_indices().into_iter().enumerate() {
            for p in preds {
                succ[p].push(i);
            }
        }
        succ
    }

    pub fn position_of(&self, idx: usize) -> LayerPosition {
        let layer = &self.layers[idx];
        if layer.kind == LayerKind::ClassifierHead {
            return LayerPosition::OutputFacing;
        }
        let reads_input = layer
            .predecessors
            .iter()
            .any(|p| self.layer(p).is_some_and(|l| l.kind == LayerKind::Input));
        if reads_input {
            LayerPosition::InputFacing
        } else {
            LayerPosition::Intermediate
        }
    }

    /// Propagates an input resolution through the graph, returning each layer's output size.
    pub fn spatial_plan(&self, h: usize, w: usize) -> Result<Vec<(usize, usize)>, ArchError> {
        let preds = self.predecessor_indices();
        let mut out: Vec<(usize, usize)> = Vec::with_capacity(self.layers.len());
        for (i, layer) in self.layers.iter().enumerate() {
            let (ih, iw) = match preds[i].first() {
                None => (h, w),
                Some(&p) => out[p],
            };
            for &p in preds[i].iter().skip(1) {
                if out[p] != (ih, iw) {
                    return Err(ArchError::Invalid {
                        layer: layer.id.clone(),
                        msg: format!("predecessors disagree on spatial size: {:?} vs {:?}", out[p], (ih, iw)),
                    });
                }
            }
            if layer.kind.is_linear() && (ih, iw) != (1, 1) {
                return Err(ArchError::Invalid {
                    layer: layer.id.clone(),
                    msg: format!("linear layer needs 1x1 input, got {ih}x{iw}"),
                });
            }
            let hw = layer
                .output_hw(ih, iw)
                .ok_or_else(|| ArchError::Spatial(layer.id.clone()))?;
            out.push(hw);
        }
        Ok(out)
    }

    /// Channel range owned by `path` in a layer with `channels` total channels.
    pub fn path_channels(&self, channels: usize, path: usize) -> std::ops::Range<usize> {
        let per = channels / self.path_multiplicity;
        path * per..(path + 1) * per
    }

    /// Layers tagged with a stage, grouped as `(stage, distinct widths)`.
    pub fn stage_channel_widths(&self) -> Vec<(usize, Vec<usize>)> {
        let mut stages: Vec<(usize, Vec<usize>)> = Vec::new();
        for layer in &self.layers {
            if let Some(s) = layer.stage {
                if layer.kind == LayerKind::Input {
                    continue;
                }
                match stages.iter_mut().find(|(st, _)| *st == s) {
                    Some((_, widths)) => {
                        if !widths.contains(&layer.out_channels) {
                            widths.push(layer.out_channels);
                        }
                    }
                    None => stages.push((s, vec![layer.out_channels])),
                }
            }
        }
        stages.sort_by_key(|(s, _)| *s);
        stages
    }

    pub fn validate(&self) -> Result<(), ArchError> {
        if self.layers.is_empty() {
            return Err(ArchError::Graph("no layers".into()));
        }
        let m = self.path_multiplicity;
        if m == 0 || self.r == 0 {
            return Err(ArchError::Graph("r and M must be positive".into()));
        }
        if self.r > 1 && m != self.r * self.r {
            return Err(ArchError::Graph(format!("M = {m} but r = {} requires M = r^2", self.r)));
        }
        let mut seen: HashSet<&str> = HashSet::new();
        for layer in &self.layers {
            for p in &layer.predecessors {
                if !seen.contains(p.as_str()) {
                    return Err(ArchError::UnknownPredecessor {
                        layer: layer.id.clone(),
                        pred: p.clone(),
                    });
                }
            }
            if !seen.insert(layer.id.as_str()) {
                return Err(ArchError::DuplicateId(layer.id.clone()));
            }
        }
        let inputs = self.layers.iter().filter(|l| l.kind == LayerKind::Input).count();
        if inputs != 1 || self.layers[0].kind != LayerKind::Input {
            return Err(ArchError::Graph(
                "exactly one Input, declared first, is required".into(),
            ));
        }
        let sink = self.sink();
        match (m, sink.kind) {
            (1, LayerKind::ClassifierHead) | (1, LayerKind::Aggregate) => {}
            (_, LayerKind::Aggregate) => {}
            _ => {
                return Err(ArchError::Graph(format!(
                    "sink `{}` must be an Aggregate for a {m}-path graph",
                    sink.id
                )))
            }
        }
        let succ = self.successor_indices();
        let sink_idx = self.layers.len() - 1;
        for (i, s) in succ.iter().enumerate() {
            if i != sink_idx && s.is_empty() {
                return Err(ArchError::Graph(format!(
                    "layer `{}` has no consumer",
                    self.layers[i].id
                )));
            }
        }

        let preds = self.predecessor_indices();
        for (i, layer) in self.layers.iter().enumerate() {
            let bad = |msg: String| ArchError::Invalid {
                layer: layer.id.clone(),
                msg,
            };
            if layer.groups == 0 || layer.stride == 0 || layer.input_replicas == 0 {
                return Err(bad("groups, stride and input_replicas must be positive".into()));
            }
            if layer.kind == LayerKind::Input {
                if !layer.predecessors.is_empty() {
                    return Err(bad("Input takes no predecessors".into()));
                }
                if layer.in_channels != layer.out_channels {
                    return Err(bad("Input must have in_channels == out_channels".into()));
                }
                continue;
            }
            if preds[i].is_empty() {
                return Err(bad("missing predecessor".into()));
            }
            if layer.kind != LayerKind::Add && preds[i].len() != 1 {
                return Err(bad(format!("expected one predecessor, got {}", preds[i].len())));
            }
            let fed = self.layers[preds[i][0]].out_channels;
            if layer.kind == LayerKind::Add {
                if preds[i].len() < 2 {
                    return Err(bad("Add needs at least two predecessors".into()));
                }
                if preds[i].iter().any(|&p| self.layers[p].out_channels != fed) {
                    return Err(bad("Add predecessors disagree on channel count".into()));
                }
            }
            if layer.in_channels != fed * layer.input_replicas {
                return Err(bad(format!(
                    "in_channels {} != predecessor channels {} x replicas {}",
                    layer.in_channels, fed, layer.input_replicas
                )));
            }
            if layer.input_replicas > 1 && self.position_of(i) != LayerPosition::InputFacing {
                return Err(bad("only input-facing layers may replicate their input".into()));
            }
            match layer.kind {
                LayerKind::Conv2d | LayerKind::DepthwiseConv2d => {
                    if layer.kernel == 0 {
                        return Err(bad("conv kernel must be positive".into()));
                    }
                    if layer.in_channels % layer.groups != 0 || layer.out_channels % layer.groups != 0 {
                        return Err(bad(format!(
                            "channels {}->{} not divisible by groups {}",
                            layer.in_channels, layer.out_channels, layer.groups
                        )));
                    }
                    if layer.kind == LayerKind::DepthwiseConv2d
                        && !(layer.groups == layer.in_channels && layer.in_channels == layer.out_channels)
                    {
                        return Err(bad("depthwise conv needs groups == C_in == C_out".into()));
                    }
                }
                LayerKind::Dense | LayerKind::ClassifierHead => {
                    if layer.in_channels % layer.groups != 0 || layer.out_channels % layer.groups != 0 {
                        return Err(bad("channels not divisible by groups".into()));
                    }
                }
                LayerKind::Norm => {
                    if layer.in_channels != layer.out_channels || layer.out_channels % layer.groups != 0 {
                        return Err(bad("norm channels must match and divide into groups".into()));
                    }
                }
                LayerKind::ReLU | LayerKind::GlobalPool | LayerKind::Add => {
                    if layer.in_channels != layer.out_channels {
                        return Err(bad("channel count must pass through".into()));
                    }
                }
                LayerKind::Pool => {
                    if layer.in_channels != layer.out_channels || layer.kernel == 0 {
                        return Err(bad("pool needs positive kernel and matching channels".into()));
                    }
                }
                LayerKind::Aggregate => {
                    if i != sink_idx {
                        return Err(bad("Aggregate must be the sink".into()));
                    }
                    if layer.groups != m || layer.in_channels != layer.out_channels * m {
                        return Err(bad(format!(
                            "Aggregate must combine {m} paths of {} classes",
                            layer.out_channels
                        )));
                    }
                }
                LayerKind::Input => unreachable!(),
            }
            if m > 1
                && matches!(
                    layer.kind,
                    LayerKind::Conv2d
                        | LayerKind::DepthwiseConv2d
                        | LayerKind::Dense
                        | LayerKind::Norm
                        | LayerKind::ClassifierHead
                )
                && layer.groups % m != 0
            {
                return Err(bad(format!(
                    "groups {} is not a multiple of the path count {m}; channels would mix across paths",
                    layer.groups
                )));
            }
            if m > 1 && layer.kind != LayerKind::Aggregate && layer.out_channels % m != 0 {
                return Err(bad(format!(
                    "out_channels {} not divisible by {m} paths",
                    layer.out_channels
                )));
            }
        }
        Ok(())
    }

    pub fn to_json(&self) -> Result<String, ArchError> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self, ArchError> {
        let g: ArchGraph = serde_json::from_str(text)?;
        g.validate()?;
        Ok(g)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, ArchError> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), ArchError> {
        std::fs::write(path, self.to_json()? + "\n")?;
        Ok(())
    }
}

/// Parameter-preservation class of a layer at a given position.
pub fn classify_layer(layer: &LayerSpec, position: LayerPosition) -> Result<PreservationClass, ArchError> {
    use LayerKind::*;
    use LayerPosition::*;
    let class = match (layer.kind, position) {
        (ClassifierHead, OutputFacing) => PreservationClass::OneSidedFixed,
        (Conv2d | Dense, InputFacing) => PreservationClass::OneSidedFixed,
        (Conv2d | Dense, Intermediate) => PreservationClass::DenseCoupling,
        (DepthwiseConv2d, InputFacing | Intermediate) => PreservationClass::Depthwise,
        (Norm, InputFacing | Intermediate) => PreservationClass::PerChannel,
        (Input, InputFacing | Intermediate) => PreservationClass::ParameterFree,
        (ReLU | Pool | GlobalPool | Add | Aggregate, _) => PreservationClass::ParameterFree,
        (kind, position) => {
            return Err(ArchError::Unclassifiable {
                layer: layer.id.clone(),
                kind,
                position,
            })
        }
    };
    Ok(class)
}

/// Classifies every layer of `g` at its structural position.
pub fn classify_graph(g: &ArchGraph) -> Result<Vec<PreservationClass>, ArchError> {
    (0..g.layers.len())
        .map(|i| classify_layer(&g.layers[i], g.position_of(i)))
        .collect()
}

fn conv(id: &str, pred: &str, cin: usize, cout: usize, k: usize, stride: usize, stage: usize) -> LayerSpec {
    LayerSpec::new(id, LayerKind::Conv2d, cin, cout)
        .after(pred)
        .with_kernel(k, stride)
        .in_stage(stage)
}

fn norm(id: &str, pred: &str, c: usize, stage: usize) -> LayerSpec {
    LayerSpec::new(id, LayerKind::Norm, c, c)
        .after(pred)
        .with_groups(c)
        .in_stage(stage)
}

fn relu(id: &str, pred: &str, c: usize, stage: usize) -> LayerSpec {
    LayerSpec::new(id, LayerKind::ReLU, c, c).after(pred).in_stage(stage)
}

fn head(layers: &mut Vec<LayerSpec>, pred: &str, c: usize, num_classes: usize) {
    layers.push(LayerSpec::new("pool", LayerKind::GlobalPool, c, c).after(pred));
    layers.push(
        LayerSpec::new("fc", LayerKind::ClassifierHead, c, num_classes)
            .after("pool")
            .with_bias(true),
    );
}

const RESNET18_WIDTHS: [usize; 4] = [64, 128, 256, 512];

/// ResNet-18 for 32x32 inputs: 3x3 stem without max-pool, four stages of two
/// basic blocks, 1x1 projection shortcuts on downsampling blocks.
pub fn build_resnet18(num_classes: usize, input_channels: usize) -> ArchGraph {
    build_resnet(&RESNET18_WIDTHS, num_classes, input_channels)
}

/// Basic-block ResNet with two blocks per stage and the given stage widths.
pub fn build_resnet(widths: &[usize], num_classes: usize, input_channels: usize) -> ArchGraph {
    assert!(num_classes >= 2 && input_channels >= 1 && !widths.is_empty());
    let mut layers = vec![LayerSpec::new(
        "input",
        LayerKind::Input,
        input_channels,
        input_channels,
    )];
    let w0 = widths[0];
    layers.push(conv("stem.conv", "input", input_channels, w0, 3, 1, 0));
    layers.push(norm("stem.norm", "stem.conv", w0, 0));
    layers.push(relu("stem.relu", "stem.norm", w0, 0));
    let mut prev = "stem.relu".to_string();
    let mut cin = w0;
    for (s, &w) in widths.iter().enumerate() {
        for b in 0..2 {
            let stride = if s > 0 && b == 0 { 2 } else { 1 };
            let p = format!("s{}.b{}", s + 1, b + 1);
            let id = |name: &str| format!("{p}.{name}");
            layers.push(conv(&id("conv1"), &prev, cin, w, 3, stride, s));
            layers.push(norm(&id("norm1"), &id("conv1"), w, s));
            layers.push(relu(&id("relu1"), &id("norm1"), w, s));
            layers.push(conv(&id("conv2"), &id("relu1"), w, w, 3, 1, s));
            layers.push(norm(&id("norm2"), &id("conv2"), w, s));
            let shortcut = if stride != 1 || cin != w {
                layers.push(conv(&id("down.conv"), &prev, cin, w, 1, stride, s));
                layers.push(norm(&id("down.norm"), &id("down.conv"), w, s));
                id("down.norm")
            } else {
                prev.clone()
            };
            layers.push(
                LayerSpec::new(id("add"), LayerKind::Add, w, w)
                    .after(&id("norm2"))
                    .after(&shortcut)
                    .in_stage(s),
            );
            layers.push(relu(&id("relu2"), &id("add"), w, s));
            prev = id("relu2");
            cin = w;
        }
    }
    head(&mut layers, &prev, cin, num_classes);
    ArchGraph::baseline(layers, widths.to_vec())
}

/// Plain conv -> norm -> ReLU stack, 2x2 average pooling between stages,
/// global pooling and a linear classifier. Expects three input channels.
pub fn build_micro_cnn(widths: &[usize], num_classes: usize) -> ArchGraph {
    build_micro_cnn_with_input(widths, num_classes, 3)
}

pub fn build_micro_cnn_with_input(widths: &[usize], num_classes: usize, input_channels: usize) -> ArchGraph {
    assert!(!widths.is_empty() && num_classes >= 1 && input_channels >= 1);
    let mut layers = vec![LayerSpec::new(
        "input",
        LayerKind::Input,
        input_channels,
        input_channels,
    )];
    let mut prev = "input".to_string();
    let mut cin = input_channels;
    for (s, &w) in widths.iter().enumerate() {
        let p = format!("s{}", s + 1);
        layers.push(conv(&format!("{p}.conv"), &prev, cin, w, 3, 1, s));
        layers.push(norm(&format!("{p}.norm"), &format!("{p}.conv"), w, s));
        layers.push(relu(&format!("{p}.relu"), &format!("{p}.norm"), w, s));
        prev = format!("{p}.relu");
        if s + 1 < widths.len() {
            layers.push(
                LayerSpec::new(format!("{p}.pool"), LayerKind::Pool, w, w)
                    .after(&prev)
                    .with_kernel(2, 2)
                    .in_stage(s),
            );
            prev = format!("{p}.pool");
        }
        cin = w;
    }
    head(&mut layers, &prev, cin, num_classes);
    ArchGraph::baseline(layers, widths.to_vec())
}

/// Stem conv followed by one depthwise-separable block (3x3 depthwise, 1x1 pointwise).
pub fn build_depthwise_block(channels: usize, num_classes: usize) -> ArchGraph {
    let c = channels;
    let layers = vec![
        LayerSpec::new("input", LayerKind::Input, 3, 3),
        conv("stem.conv", "input", 3, c, 3, 1, 0),
        norm("stem.norm", "stem.conv", c, 0),
        relu("stem.relu", "stem.norm", c, 0),
        LayerSpec::new("dw.conv", LayerKind::DepthwiseConv2d, c, c)
            .after("stem.relu")
            .with_kernel(3, 1)
            .with_groups(c)
            .in_stage(0),
        norm("dw.norm", "dw.conv", c, 0),
        relu("dw.relu", "dw.norm", c, 0),
        conv("pw.conv", "dw.relu", c, c, 1, 1, 0),
        norm("pw.norm", "pw.conv", c, 0),
        relu("pw.relu", "pw.norm", c, 0),
        LayerSpec::new("pool", LayerKind::GlobalPool, c, c).after("pw.relu"),
        LayerSpec::new("fc", LayerKind::ClassifierHead, c, num_classes)
            .after("pool")
            .with_bias(true),
    ];
    ArchGraph::baseline(layers, vec![c])
}
