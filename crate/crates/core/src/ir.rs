//! Graph intermediate representation, model file format, backbone generators
//! and FLOPs/parameter accounting.
//!
//! Graphs are single-input single-output DAGs of layer nodes in topological
//! order (a node's predecessors always have smaller ids). Activations are
//! channels-last; the final classifier stays in 32-bit real precision even
//! when the rest of the graph is quantized.

use serde::{Deserialize, Serialize};
use std::path::Path;

use crate::qtensor::{AccTensor, AnyTensor, FloatTensor, QuantTensor, Shape};
use crate::{Error, Result};

pub type NodeId = usize;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OpKind {
    Conv2d,
    DwConv2d,
    Linear,
    Add,
    /// Global average pool to 1x1 spatial.
    AvgPool,
}

impl OpKind {
    pub fn is_parametric(self) -> bool {
        matches!(self, OpKind::Conv2d | OpKind::DwConv2d | OpKind::Linear)
    }

    pub fn name(self) -> &'static str {
        match self {
            OpKind::Conv2d => "conv2d",
            OpKind::DwConv2d => "dw_conv2d",
            OpKind::Linear => "linear",
            OpKind::Add => "add",
            OpKind::AvgPool => "avg_pool",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Padding {
    Same,
    Valid,
}

/// Static layer attributes. Non-conv kinds keep kernel/stride at 1.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Attrs {
    pub kernel: usize,
    pub stride: usize,
    pub padding: Padding,
    pub in_channels: usize,
    pub out_channels: usize,
    pub groups: usize,
    /// Fused ReLU6 applied to this node's output.
    pub relu6: bool,
}

impl Attrs {
    pub fn pointwise(in_channels: usize, out_channels: usize, relu6: bool) -> Self {
        Attrs {
            kernel: 1,
            stride: 1,
            padding: Padding::Same,
            in_channels,
            out_channels,
            groups: 1,
            relu6,
        }
    }
}

/// Parameter slots. `None` until weights are initialized; quantized layers
/// hold int8 weights and int32 biases, float layers hold f32 for both.
#[derive(Debug, Clone, PartialEq)]
pub enum Params {
    None,
    Float { weight: FloatTensor, bias: FloatTensor },
    Quant { weight: QuantTensor, bias: AccTensor },
}

impl Params {
    pub fn is_none(&self) -> bool {
        matches!(self, Params::None)
    }

    pub fn is_quant(&self) -> bool {
        matches!(self, Params::Quant { .. })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerNode {
    pub id: NodeId,
    pub kind: OpKind,
    pub attrs: Attrs,
    pub preds: Vec<NodeId>,
    pub params: Params,
    /// Per-tensor activation scale assigned by calibration.
    pub out_scale: Option<f32>,
}

/// Graph input description. `scale` is the quantized input activation scale.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InputSpec {
    pub h: usize,
    pub w: usize,
    pub c: usize,
    #[serde(default)]
    pub scale: Option<f32>,
}

impl InputSpec {
    pub fn shape(&self) -> Shape {
        Shape::hwc(self.h, self.w, self.c)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Graph {
    pub input: InputSpec,
    pub nodes: Vec<LayerNode>,
}

/// Value feeding a node input: the graph input or another node's output.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum TensorId {
    Input,
    Node(NodeId),
}

impl Graph {
    /// Predecessor tensor ids of a node (the graph input when `preds` is
    /// empty).
    pub fn pred_tensors(&self, id: NodeId) -> Vec<TensorId> {
        let node = &self.nodes[id];
        if node.preds.is_empty() {
            vec![TensorId::Input]
        } else {
            node.preds.iter().map(|&p| TensorId::Node(p)).collect()
        }
    }

    /// Ids of parametric (conv/dwconv/linear) nodes in topological order.
    pub fn parametric_nodes(&self) -> Vec<NodeId> {
        self.nodes.iter().filter(|n| n.kind.is_parametric()).map(|n| n.id).collect()
    }

    /// The final classifier node, when the graph ends in a Linear layer.
    pub fn classifier(&self) -> Option<NodeId> {
        self.nodes.last().filter(|n| n.kind == OpKind::Linear).map(|n| n.id)
    }

    /// Output shape of every tensor, keyed for the graph input and each node.
    pub fn shape_of(&self, t: TensorId, shapes: &[Shape]) -> Shape {
        match t {
            TensorId::Input => self.input.shape(),
            TensorId::Node(id) => shapes[id].clone(),
        }
    }

    /// Activation scale of a tensor (input scale or producing node's).
    pub fn scale_of(&self, t: TensorId) -> Result<f32> {
        let s = match t {
            TensorId::Input => self.input.scale,
            TensorId::Node(id) => self.nodes[id].out_scale,
        };
        s.ok_or_else(|| Error::Invalid(format!("missing activation scale for {t:?}")))
    }

    pub fn depth(&self) -> usize {
        self.nodes.len()
    }
}

/// Output spatial size of a conv-like op along one axis.
pub fn conv_out_dim(input: usize, kernel: usize, stride: usize, padding: Padding) -> usize {
    match padding {
        Padding::Same => input.div_ceil(stride),
        Padding::Valid => (input - kernel) / stride + 1,
    }
}

/// Leading (top/left) pad for same padding; the trailing pad is whatever
/// remains. Mirrors the usual channels-last convention.
pub fn same_pad_before(input: usize, kernel: usize, stride: usize) -> usize {
    let out = input.div_ceil(stride);
    let total = ((out - 1) * stride + kernel).saturating_sub(input);
    total / 2
}

fn node_out_shape(node: &LayerNode, in_shape: &Shape) -> Result<Shape> {
    let (h, w, c) = match in_shape.0.as_slice() {
        [h, w, c] => (*h, *w, *c),
        other => {
            return Err(Error::Shape(format!(
                "node {}: expected rank-3 activation, got {other:?}",
                node.id
            )))
        }
    };
    let a = &node.attrs;
    match node.kind {
        OpKind::Conv2d | OpKind::DwConv2d => {
            if c != a.in_channels {
                return Err(Error::Shape(format!(
                    "node {}: input channels {} != attr in_channels {}",
                    node.id, c, a.in_channels
                )));
            }
            if a.padding == Padding::Valid && (h < a.kernel || w < a.kernel) {
                return Err(Error::Shape(format!(
                    "node {}: kernel {} exceeds input {h}x{w}",
                    node.id, a.kernel
                )));
            }
            let oh = conv_out_dim(h, a.kernel, a.stride, a.padding);
            let ow = conv_out_dim(w, a.kernel, a.stride, a.padding);
            Ok(Shape::hwc(oh, ow, a.out_channels))
        }
        OpKind::Linear => {
            if h != 1 || w != 1 {
                return Err(Error::Shape(format!(
                    "node {}: linear expects 1x1 spatial input, got {h}x{w}",
                    node.id
                )));
            }
            if c != a.in_channels {
                return Err(Error::Shape(format!(
                    "node {}: input channels {} != attr in_channels {}",
                    node.id, c, a.in_channels
                )));
            }
            Ok(Shape::hwc(1, 1, a.out_channels))
        }
        OpKind::Add => Ok(in_shape.clone()),
        OpKind::AvgPool => Ok(Shape::hwc(1, 1, c)),
    }
}

fn check_accumulator_width(node: &LayerNode) -> Result<()> {
    // Worst-case |W x| term count must fit 31 bits: 127*127*K^2*C_in/groups.
    let a = &node.attrs;
    let per_group = a.in_channels / a.groups.max(1);
    let terms = 127i64 * 127 * (a.kernel * a.kernel * per_group) as i64;
    if terms >= (1i64 << 31) {
        return Err(Error::Invalid(format!(
            "node {}: int32 accumulator may overflow (k={} c_in={})",
            node.id, a.kernel, a.in_channels
        )));
    }
    Ok(())
}

fn check_params_match(node: &LayerNode) -> Result<()> {
    if !node.kind.is_parametric() {
        return Ok(());
    }
    let a = &node.attrs;
    let wshape = Shape::weights(a.kernel, a.kernel, a.in_channels / a.groups, a.out_channels);
    let (got_w, got_b) = match &node.params {
        Params::None => return Ok(()),
        Params::Float { weight, bias } => (&weight.shape, &bias.shape),
        Params::Quant { weight, bias } => (&weight.shape, &bias.shape),
    };
    if *got_w != wshape {
        return Err(Error::Shape(format!(
            "node {}: weight shape {:?} != expected {:?}",
            node.id, got_w.0, wshape.0
        )));
    }
    if got_b.0 != vec![a.out_channels] {
        return Err(Error::Shape(format!(
            "node {}: bias length {:?} != out_channels {}",
            node.id, got_b.0, a.out_channels
        )));
    }
    Ok(())
}

/// Validate the graph and return every node's output shape.
///
/// Checks topological ordering, single input/output, per-kind structural
/// rules, parameter shapes and the int32 accumulator width obligation.
pub fn validate(graph: &Graph) -> Result<Vec<Shape>> {
    graph.input.shape().validate()?;
    if graph.nodes.is_empty() {
        return Err(Error::Invalid("graph has no nodes".into()));
    }
    let mut shapes: Vec<Shape> = Vec::with_capacity(graph.nodes.len());
    let mut consumed = vec![0usize; graph.nodes.len()];
    let mut input_consumed = 0usize;
    for (idx, node) in graph.nodes.iter().enumerate() {
        if node.id != idx {
            return Err(Error::Invalid(format!(
                "node ids must be dense and ordered: position {idx} holds id {}",
                node.id
            )));
        }
        for &p in &node.preds {
            if p >= idx {
                return Err(Error::Invalid(format!(
                    "node {idx}: predecessor {p} does not precede it"
                )));
            }
            consumed[p] += 1;
        }
        if node.preds.is_empty() {
            input_consumed += 1;
        }
        let a = &node.attrs;
        match node.kind {
            OpKind::Conv2d | OpKind::DwConv2d | OpKind::Linear => {
                if node.preds.len() > 1 {
                    return Err(Error::Invalid(format!(
                        "node {idx}: {} takes one input",
                        node.kind.name()
                    )));
                }
                if !matches!(a.kernel, 1 | 3 | 5 | 7) {
                    return Err(Error::Invalid(format!(
                        "node {idx}: unsupported kernel {}",
                        a.kernel
                    )));
                }
                if !matches!(a.stride, 1 | 2) {
                    return Err(Error::Invalid(format!(
                        "node {idx}: unsupported stride {}",
                        a.stride
                    )));
                }
                if node.kind == OpKind::DwConv2d {
                    if a.groups != a.in_channels || a.in_channels != a.out_channels {
                        return Err(Error::Invalid(format!(
                            "node {idx}: depthwise requires groups == in == out channels \
                             (got groups={} in={} out={})",
                            a.groups, a.in_channels, a.out_channels
                        )));
                    }
                } else if a.groups != 1 {
                    return Err(Error::Invalid(format!(
                        "node {idx}: grouped {} not supported",
                        node.kind.name()
                    )));
                }
                check_accumulator_width(node)?;
                check_params_match(node)?;
            }
            OpKind::Add => {
                if node.preds.len() != 2 {
                    return Err(Error::Invalid(format!(
                        "node {idx}: add takes exactly two inputs"
                    )));
                }
                let s0 = shapes[node.preds[0]].clone();
                let s1 = shapes[node.preds[1]].clone();
                if s0 != s1 {
                    return Err(Error::Shape(format!(
                        "node {idx}: add operands {:?} vs {:?}",
                        s0.0, s1.0
                    )));
                }
            }
            OpKind::AvgPool => {
                if node.preds.len() > 1 {
                    return Err(Error::Invalid(format!("node {idx}: pool takes one input")));
                }
            }
        }
        let in_shape = match node.preds.first() {
            Some(&p) => shapes[p].clone(),
            None => graph.input.shape(),
        };
        shapes.push(node_out_shape(node, &in_shape)?);
    }
    if input_consumed == 0 {
        return Err(Error::Invalid("no node reads the graph input".into()));
    }
    let sinks = consumed[..graph.nodes.len() - 1].iter().filter(|&&c| c == 0).count();
    if sinks > 0 {
        return Err(Error::Invalid(format!(
            "graph must have a single output, found {} extra sink(s)",
            sinks + 1
        )));
    }
    Ok(shapes)
}

/// MACs and parameter bytes (int8 deployment sizing: 1 byte per weight,
/// 4 per bias; the fp32 classifier counts 4 bytes per weight).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CostSummary {
    pub macs: u64,
    pub param_bytes: u64,
}

/// Per-node MAC count. Elementwise and pooling nodes are free by convention;
/// only conv/linear multiply-accumulates are charged.
pub fn node_macs(node: &LayerNode, out_shape: &Shape) -> u64 {
    let a = &node.attrs;
    match node.kind {
        OpKind::Conv2d | OpKind::DwConv2d | OpKind::Linear => {
            let (oh, ow) = (out_shape.0[0], out_shape.0[1]);
            (oh * ow * a.kernel * a.kernel * (a.in_channels / a.groups) * a.out_channels) as u64
        }
        OpKind::Add | OpKind::AvgPool => 0,
    }
}

pub fn count_flops_params(graph: &Graph) -> Result<CostSummary> {
    let shapes = validate(graph)?;
    let mut macs = 0u64;
    let mut params = 0u64;
    let classifier = graph.classifier();
    for node in &graph.nodes {
        macs += node_macs(node, &shapes[node.id]);
        if node.kind.is_parametric() {
            let a = &node.attrs;
            let welems = (a.kernel * a.kernel * (a.in_channels / a.groups) * a.out_channels) as u64;
            let wbytes = if Some(node.id) == classifier { welems * 4 } else { welems };
            params += wbytes + a.out_channels as u64 * 4;
        }
    }
    Ok(CostSummary { macs, param_bytes: params })
}

// ---------------------------------------------------------------------------
// Backbone generators
// ---------------------------------------------------------------------------

/// Round channels to the nearest multiple of 8, minimum 8.
pub fn round_channels(base: f32) -> usize {
    (((base / 8.0).round() as usize) * 8).max(8)
}

pub const STAGE_COUNT: usize = 5;
pub const MAX_STAGE_DEPTH: usize = 4;
const STAGE_BASE_CHANNELS: [usize; STAGE_COUNT] = [24, 32, 64, 96, 160];
const STAGE_STRIDES: [usize; STAGE_COUNT] = [2, 2, 2, 1, 2];
const STEM_BASE: usize = 16;
const HEAD_BASE: usize = 256;

/// Knob settings for the MnasNet-alike inverted-residual space. Per-block
/// arrays are indexed `[stage][block]`; entries past `depth[stage]` are
/// ignored but kept so configs have a fixed gene layout.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BackboneConfig {
    /// Input resolution, 48..=224 step 16.
    pub resolution: usize,
    /// Global width multiplier, 0.2..=1.0 step 0.1.
    pub global_width: f32,
    /// Per-block width multipliers in {0.5, 0.75, 1.0}.
    pub width: [[f32; MAX_STAGE_DEPTH]; STAGE_COUNT],
    /// Per-block depthwise kernel sizes in {3, 5, 7}.
    pub kernel: [[usize; MAX_STAGE_DEPTH]; STAGE_COUNT],
    /// Per-block expansion ratios in {3, 4, 6}.
    pub expansion: [[usize; MAX_STAGE_DEPTH]; STAGE_COUNT],
    /// Per-stage block counts in {2, 3, 4}.
    pub depth: [usize; STAGE_COUNT],
    #[serde(default = "default_classes")]
    pub classes: usize,
}

fn default_classes() -> usize {
    10
}

pub const RESOLUTIONS: [usize; 12] = [48, 64, 80, 96, 112, 128, 144, 160, 176, 192, 208, 224];
pub const GLOBAL_WIDTHS: [f32; 9] = [0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9, 1.0];
pub const BLOCK_WIDTHS: [f32; 3] = [0.5, 0.75, 1.0];
pub const KERNELS: [usize; 3] = [3, 5, 7];
pub const EXPANSIONS: [usize; 3] = [3, 4, 6];
pub const DEPTHS: [usize; 3] = [2, 3, 4];

impl BackboneConfig {
    /// Smallest member of the space: every knob at its minimum.
    pub fn minimal() -> Self {
        BackboneConfig {
            resolution: 48,
            global_width: 0.2,
            width: [[0.5; MAX_STAGE_DEPTH]; STAGE_COUNT],
            kernel: [[3; MAX_STAGE_DEPTH]; STAGE_COUNT],
            expansion: [[3; MAX_STAGE_DEPTH]; STAGE_COUNT],
            depth: [2; STAGE_COUNT],
            classes: 10,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let near = |v: f32, list: &[f32]| list.iter().any(|&x| (x - v).abs() < 1e-6);
        if !RESOLUTIONS.contains(&self.resolution) {
            return Err(Error::Invalid(format!("resolution {} outside domain", self.resolution)));
        }
        if !near(self.global_width, &GLOBAL_WIDTHS) {
            return Err(Error::Invalid(format!(
                "global width {} outside domain",
                self.global_width
            )));
        }
        for s in 0..STAGE_COUNT {
            if !DEPTHS.contains(&self.depth[s]) {
                return Err(Error::Invalid(format!("stage {s} depth {} outside domain", self.depth[s])));
            }
            for b in 0..self.depth[s] {
                if !KERNELS.contains(&self.kernel[s][b]) {
                    return Err(Error::Invalid(format!("kernel {} outside domain", self.kernel[s][b])));
                }
                if !EXPANSIONS.contains(&self.expansion[s][b]) {
                    return Err(Error::Invalid(format!(
                        "expansion {} outside domain",
                        self.expansion[s][b]
                    )));
                }
                if !near(self.width[s][b], &BLOCK_WIDTHS) {
                    return Err(Error::Invalid(format!("width {} outside domain", self.width[s][b])));
                }
            }
        }
        if self.classes == 0 {
            return Err(Error::Invalid("classes must be >= 1".into()));
        }
        Ok(())
    }
}

/// Incrementally builds a chain-with-skips graph.
pub struct GraphBuilder {
    input: InputSpec,
    nodes: Vec<LayerNode>,
}

impl GraphBuilder {
    pub fn new(h: usize, w: usize, c: usize) -> Self {
        GraphBuilder { input: InputSpec { h, w, c, scale: None }, nodes: Vec::new() }
    }

    /// Appends a node fed by `pred` (None = graph input for the first node).
    pub fn push(&mut self, kind: OpKind, attrs: Attrs, preds: Vec<NodeId>) -> NodeId {
        let id = self.nodes.len();
        self.nodes.push(LayerNode { id, kind, attrs, preds, params: Params::None, out_scale: None });
        id
    }

    pub fn conv(
        &mut self,
        pred: Option<NodeId>,
        kernel: usize,
        stride: usize,
        in_c: usize,
        out_c: usize,
        relu6: bool,
    ) -> NodeId {
        let attrs = Attrs {
            kernel,
            stride,
            padding: Padding::Same,
            in_channels: in_c,
            out_channels: out_c,
            groups: 1,
            relu6,
        };
        self.push(OpKind::Conv2d, attrs, pred.into_iter().collect())
    }

    pub fn dwconv(&mut self, pred: NodeId, kernel: usize, stride: usize, c: usize, relu6: bool) -> NodeId {
        let attrs = Attrs {
            kernel,
            stride,
            padding: Padding::Same,
            in_channels: c,
            out_channels: c,
            groups: c,
            relu6,
        };
        self.push(OpKind::DwConv2d, attrs, vec![pred])
    }

    pub fn add(&mut self, a: NodeId, b: NodeId, channels: usize) -> NodeId {
        let attrs = Attrs {
            kernel: 1,
            stride: 1,
            padding: Padding::Same,
            in_channels: channels,
            out_channels: channels,
            groups: 1,
            relu6: false,
        };
        self.push(OpKind::Add, attrs, vec![a, b])
    }

    pub fn avg_pool(&mut self, pred: NodeId, channels: usize) -> NodeId {
        let attrs = Attrs {
            kernel: 1,
            stride: 1,
            padding: Padding::Same,
            in_channels: channels,
            out_channels: channels,
            groups: 1,
            relu6: false,
        };
        self.push(OpKind::AvgPool, attrs, vec![pred])
    }

    pub fn linear(&mut self, pred: NodeId, in_c: usize, out_c: usize) -> NodeId {
        let attrs = Attrs {
            kernel: 1,
            stride: 1,
            padding: Padding::Same,
            in_channels: in_c,
            out_channels: out_c,
            groups: 1,
            relu6: false,
        };
        self.push(OpKind::Linear, attrs, vec![pred])
    }

    /// Expand -> depthwise -> project, with a residual add when the block
    /// preserves shape. `expansion == 1` skips the expand conv.
    pub fn inverted_residual(
        &mut self,
        pred: NodeId,
        in_c: usize,
        out_c: usize,
        kernel: usize,
        stride: usize,
        expansion: usize,
    ) -> NodeId {
        let mid = in_c * expansion;
        let mut cur = pred;
        if expansion != 1 {
            cur = self.conv(Some(cur), 1, 1, in_c, mid, true);
        }
        cur = self.dwconv(cur, kernel, stride, mid, true);
        cur = self.conv(Some(cur), 1, 1, mid, out_c, false);
        if stride == 1 && in_c == out_c {
            cur = self.add(pred, cur, out_c);
        }
        cur
    }

    pub fn finish(self) -> Graph {
        Graph { input: self.input, nodes: self.nodes }
    }
}

/// Build the MnasNet-alike backbone for a search-space config: stem conv
/// (stride 2), five inverted-residual stages, head conv, global pool,
/// classifier.
pub fn build_backbone(config: &BackboneConfig) -> Result<Graph> {
    config.validate()?;
    let r = config.resolution;
    let mut b = GraphBuilder::new(r, r, 3);
    let stem_c = round_channels(STEM_BASE as f32 * config.global_width);
    let mut cur = b.conv(None, 3, 2, 3, stem_c, true);
    let mut cur_c = stem_c;
    for s in 0..STAGE_COUNT {
        for blk in 0..config.depth[s] {
            let out_c = round_channels(
                STAGE_BASE_CHANNELS[s] as f32 * config.global_width * config.width[s][blk],
            );
            let stride = if blk == 0 { STAGE_STRIDES[s] } else { 1 };
            cur = b.inverted_residual(
                cur,
                cur_c,
                out_c,
                config.kernel[s][blk],
                stride,
                config.expansion[s][blk],
            );
            cur_c = out_c;
        }
    }
    let head_c = round_channels(HEAD_BASE as f32 * config.global_width);
    cur = b.conv(Some(cur), 1, 1, cur_c, head_c, true);
    cur = b.avg_pool(cur, head_c);
    b.linear(cur, head_c, config.classes);
    let g = b.finish();
    validate(&g)?;
    Ok(g)
}

/// Classic MobileNetV2 topology (17 inverted-residual blocks in the
/// 1/2/3/4/3/3/1 stage pattern) at a given width multiplier and resolution.
/// Used as the imbalanced-memory study subject.
pub fn mobilenet_v2_like(width: f32, resolution: usize, classes: usize) -> Result<Graph> {
    let mut b = GraphBuilder::new(resolution, resolution, 3);
    let stem_c = round_channels(32.0 * width);
    let mut cur = b.conv(None, 3, 2, 3, stem_c, true);
    let mut cur_c = stem_c;
    let stages: [(usize, usize, usize, usize); 7] = [
        // (expansion, channels, blocks, stride)
        (1, 16, 1, 1),
        (6, 24, 2, 2),
        (6, 32, 3, 2),
        (6, 64, 4, 2),
        (6, 96, 3, 1),
        (6, 160, 3, 2),
        (6, 320, 1, 1),
    ];
    for (e, c, n, s) in stages {
        let out_c = round_channels(c as f32 * width);
        for blk in 0..n {
            let stride = if blk == 0 { s } else { 1 };
            cur = b.inverted_residual(cur, cur_c, out_c, 3, stride, e);
            cur_c = out_c;
        }
    }
    let head_c = round_channels(1280.0 * width.max(1.0));
    cur = b.conv(Some(cur), 1, 1, cur_c, head_c, true);
    cur = b.avg_pool(cur, head_c);
    b.linear(cur, head_c, classes);
    let g = b.finish();
    validate(&g)?;
    Ok(g)
}

/// Seeded random weight initialization for every parametric node. Weights
/// are Kaiming-ish scaled normals, biases small normals; everything stays in
/// f32 until the graph is calibrated and quantized.
pub fn init_weights(graph: &mut Graph, seed: u64) -> Result<()> {
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let ids: Vec<NodeId> = graph.parametric_nodes();
    for id in ids {
        let a = graph.nodes[id].attrs.clone();
        let fan_in = (a.kernel * a.kernel * a.in_channels / a.groups) as f32;
        let std = (2.0 / fan_in).sqrt();
        let wshape = Shape::weights(a.kernel, a.kernel, a.in_channels / a.groups, a.out_channels);
        let wdata: Vec<f32> = (0..wshape.elems())
            .map(|_| {
                // Box-Muller from two uniforms keeps us off rand_distr.
                let u1: f32 = rng.gen_range(1e-6f32..1.0);
                let u2: f32 = rng.gen_range(0.0f32..1.0);
                let z = (-2.0 * u1.ln()).sqrt() * (2.0 * std::f32::consts::PI * u2).cos();
                z * std
            })
            .collect();
        let bdata: Vec<f32> = (0..a.out_channels).map(|_| rng.gen_range(-0.05f32..0.05)).collect();
        graph.nodes[id].params = Params::Float {
            weight: FloatTensor::new(wshape, wdata)?,
            bias: FloatTensor::new(Shape(vec![a.out_channels]), bdata)?,
        };
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Model file format: JSON document + binary blob sidecar
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
struct BlobRef {
    offset: u64,
    len: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct NodeDoc {
    id: usize,
    kind: String,
    attrs: Attrs,
    preds: Vec<usize>,
    #[serde(default)]
    weight_ref: Option<BlobRef>,
    #[serde(default)]
    bias_ref: Option<BlobRef>,
    #[serde(default)]
    scales: Option<NodeScales>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct NodeScales {
    out: f32,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct ModelDoc {
    version: u32,
    #[serde(default)]
    blob_file: Option<String>,
    input: InputSpec,
    nodes: Vec<NodeDoc>,
}

const MODEL_VERSION: u32 = 1;

fn kind_to_str(kind: OpKind) -> &'static str {
    kind.name()
}

fn kind_from_str(s: &str) -> Result<OpKind> {
    Ok(match s {
        "conv2d" => OpKind::Conv2d,
        "dw_conv2d" => OpKind::DwConv2d,
        "linear" => OpKind::Linear,
        "add" => OpKind::Add,
        "avg_pool" => OpKind::AvgPool,
        other => return Err(Error::Parse(format!("unknown op kind `{other}`"))),
    })
}

fn push_blob(blobs: &mut Vec<u8>, t: &AnyTensor) -> BlobRef {
    let offset = blobs.len() as u64;
    let bytes = crate::qtensor::tensor_to_bytes(t);
    blobs.extend_from_slice(&bytes);
    BlobRef { offset, len: bytes.len() as u64 }
}

/// Serialize a graph to the JSON document plus the tensor blob sidecar.
pub fn to_model_bytes(graph: &Graph) -> Result<(Vec<u8>, Vec<u8>)> {
    validate(graph)?;
    let mut blobs = Vec::new();
    let mut nodes = Vec::with_capacity(graph.nodes.len());
    for node in &graph.nodes {
        let (weight_ref, bias_ref) = match &node.params {
            Params::None => (None, None),
            Params::Float { weight, bias } => (
                Some(push_blob(&mut blobs, &AnyTensor::Float(weight.clone()))),
                Some(push_blob(&mut blobs, &AnyTensor::Float(bias.clone()))),
            ),
            Params::Quant { weight, bias } => (
                Some(push_blob(&mut blobs, &AnyTensor::Quant(weight.clone()))),
                Some(push_blob(&mut blobs, &AnyTensor::Acc(bias.clone()))),
            ),
        };
        nodes.push(NodeDoc {
            id: node.id,
            kind: kind_to_str(node.kind).to_string(),
            attrs: node.attrs.clone(),
            preds: node.preds.clone(),
            weight_ref,
            bias_ref,
            scales: node.out_scale.map(|out| NodeScales { out }),
        });
    }
    let doc = ModelDoc {
        version: MODEL_VERSION,
        blob_file: None,
        input: graph.input.clone(),
        nodes,
    };
    let json = serde_json::to_vec_pretty(&doc)
        .map_err(|e| Error::Parse(format!("serialize model: {e}")))?;
    Ok((json, blobs))
}

fn read_blob(blobs: &[u8], r: &BlobRef, what: &str, id: usize) -> Result<AnyTensor> {
    let start = r.offset as usize;
    let end = start + r.len as usize;
    if end > blobs.len() {
        return Err(Error::Parse(format!(
            "node {id}: {what} blob ref {}..{} outside sidecar ({} bytes)",
            start,
            end,
            blobs.len()
        )));
    }
    crate::qtensor::tensor_from_bytes(&blobs[start..end])
}

/// Parse a graph from the JSON document and its blob sidecar.
pub fn from_model_bytes(json: &[u8], blobs: &[u8]) -> Result<Graph> {
    let doc: ModelDoc = serde_json::from_slice(json)
        .map_err(|e| Error::Parse(format!("model document: {e}")))?;
    if doc.version != MODEL_VERSION {
        return Err(Error::Parse(format!("unsupported model version {}", doc.version)));
    }
    let mut nodes = Vec::with_capacity(doc.nodes.len());
    for nd in doc.nodes {
        let kind = kind_from_str(&nd.kind)?;
        let params = match (&nd.weight_ref, &nd.bias_ref) {
            (None, None) => Params::None,
            (Some(wr), Some(br)) => {
                let w = read_blob(blobs, wr, "weight", nd.id)?;
                let b = read_blob(blobs, br, "bias", nd.id)?;
                match (w, b) {
                    (AnyTensor::Float(weight), AnyTensor::Float(bias)) => {
                        Params::Float { weight, bias }
                    }
                    (AnyTensor::Quant(weight), AnyTensor::Acc(bias)) => {
                        Params::Quant { weight, bias }
                    }
                    _ => {
                        return Err(Error::Parse(format!(
                            "node {}: weight/bias dtype combination not supported",
                            nd.id
                        )))
                    }
                }
            }
            _ => {
                return Err(Error::Parse(format!(
                    "node {}: weight and bias refs must both be present or absent",
                    nd.id
                )))
            }
        };
        nodes.push(LayerNode {
            id: nd.id,
            kind,
            attrs: nd.attrs,
            preds: nd.preds,
            params,
            out_scale: nd.scales.map(|s| s.out),
        });
    }
    let graph = Graph { input: doc.input, nodes };
    validate(&graph)?;
    Ok(graph)
}

/// Sidecar path convention: `model.json` -> `model.bin`.
pub fn sidecar_path(json_path: &Path) -> std::path::PathBuf {
    json_path.with_extension("bin")
}

pub fn save_model(graph: &Graph, json_path: &Path) -> Result<()> {
    let (mut json, blobs) = to_model_bytes(graph)?;
    let bin_path = sidecar_path(json_path);
    // Record the sidecar file name in the document.
    let mut doc: serde_json::Value =
        serde_json::from_slice(&json).map_err(|e| Error::Parse(e.to_string()))?;
    if let Some(name) = bin_path.file_name().and_then(|n| n.to_str()) {
        doc["blob_file"] = serde_json::Value::String(name.to_string());
        json = serde_json::to_vec_pretty(&doc).map_err(|e| Error::Parse(e.to_string()))?;
    }
    std::fs::write(json_path, &json).map_err(|e| Error::io(json_path, e))?;
    std::fs::write(&bin_path, &blobs).map_err(|e| Error::io(&bin_path, e))?;
    Ok(())
}

pub fn load_model(json_path: &Path) -> Result<Graph> {
    let json = std::fs::read(json_path).map_err(|e| Error::io(json_path, e))?;
    let doc: serde_json::Value =
        serde_json::from_slice(&json).map_err(|e| Error::Parse(format!("model document: {e}")))?;
    let bin_path = match doc.get("blob_file").and_then(|v| v.as_str()) {
        Some(name) => json_path.parent().unwrap_or(Path::new(".")).join(name),
        None => sidecar_path(json_path),
    };
    let blobs = if bin_path.exists() {
        std::fs::read(&bin_path).map_err(|e| Error::io(&bin_path, e))?
    } else {
        Vec::new()
    };
    from_model_bytes(&json, &blobs)
}

/// Deterministic structural hash substitute: byte equality of serialized
/// form. Handy for reproducibility assertions.
pub fn models_identical(a: &Graph, b: &Graph) -> bool {
    match (to_model_bytes(a), to_model_bytes(b)) {
        (Ok(x), Ok(y)) => x == y,
        _ => false,
    }
}
