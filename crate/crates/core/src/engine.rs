//! Reference fp32 executor and the real int8 quantized executor.
//!
//! Every int8 path is bit-exact across runs and platforms: integer
//! accumulation is order-independent and the single floating step per
//! element is one f32 multiply followed by round-half-to-even. The same
//! requantization constants computed here are baked into emitted C sources,
//! so the two sides agree byte for byte.

use std::collections::HashMap;

use crate::ir::{
    conv_out_dim, same_pad_before, Graph, NodeId, OpKind, Padding, Params, TensorId,
};
use crate::qtensor::{
    round_half_even, saturate_i8, FloatTensor, QuantTensor, ScaleVector, Shape,
};
use crate::{Error, Result};

// ---------------------------------------------------------------------------
// Geometry
// ---------------------------------------------------------------------------

/// Concrete conv geometry after padding resolution. Patched execution feeds
/// pre-materialized regions with zero pads.
#[derive(Debug, Clone, Copy)]
pub struct ConvGeom {
    pub ih: usize,
    pub iw: usize,
    pub ic: usize,
    pub oh: usize,
    pub ow: usize,
    pub oc: usize,
    pub k: usize,
    pub stride: usize,
    pub pad_top: i64,
    pub pad_left: i64,
}

impl ConvGeom {
    /// Geometry for a full-map layer application with its declared padding.
    pub fn full(attrs: &crate::ir::Attrs, ih: usize, iw: usize) -> ConvGeom {
        let (pad_top, pad_left) = match attrs.padding {
            Padding::Same => (
                same_pad_before(ih, attrs.kernel, attrs.stride) as i64,
                same_pad_before(iw, attrs.kernel, attrs.stride) as i64,
            ),
            Padding::Valid => (0, 0),
        };
        ConvGeom {
            ih,
            iw,
            ic: attrs.in_channels,
            oh: conv_out_dim(ih, attrs.kernel, attrs.stride, attrs.padding),
            ow: conv_out_dim(iw, attrs.kernel, attrs.stride, attrs.padding),
            oc: attrs.out_channels,
            k: attrs.kernel,
            stride: attrs.stride,
            pad_top,
            pad_left,
        }
    }
}

// ---------------------------------------------------------------------------
// Requantization constants (shared with codegen)
// ---------------------------------------------------------------------------

/// No ReLU6: the upper clamp stays at the int8 ceiling.
pub const NO_RELU6: i32 = i32::MAX;

/// Per-node constants of the int8 execution. Codegen bakes exactly these
/// values, which is what makes the emitted program bit-identical.
#[derive(Debug, Clone)]
pub enum NodeConsts {
    /// Conv / depthwise / quantized linear: per-output-channel
    /// `s_total = s_w * s_x / s_y` plus the affine ReLU6 ceiling.
    Conv { s_total: Vec<f32>, q6: i32 },
    /// Residual add: operand rescale factors into the output scale.
    Add { fa: f32, fb: f32, q6: i32 },
    /// Global average pool: `s_x / (s_y * count)` folded as `s_x/s_y` with
    /// the element count applied by the kernel.
    Pool { factor: f32, q6: i32 },
    /// fp32 classifier: dequantize inputs by `s_in`, requantize logits by
    /// `1 / s_out`.
    ClassifierF32 { s_in: f32, inv_out: f32 },
}

fn relu6_ceiling(relu6: bool, out_scale: f32) -> i32 {
    if relu6 {
        (round_half_even(6.0 / out_scale) as i32).min(127)
    } else {
        NO_RELU6
    }
}

/// Compute the requantization constants for a node of a quantized graph.
/// `shapes` is the validated shape table.
pub fn node_consts(graph: &Graph, shapes: &[Shape], id: NodeId) -> Result<NodeConsts> {
    let node = &graph.nodes[id];
    let preds = graph.pred_tensors(id);
    let s_out = graph.scale_of(TensorId::Node(id))?;
    match node.kind {
        OpKind::Conv2d | OpKind::DwConv2d | OpKind::Linear => {
            let s_in = graph.scale_of(preds[0])?;
            match &node.params {
                Params::Quant { weight, .. } => {
                    let s_total = (0..node.attrs.out_channels)
                        .map(|c| (weight.scale.at(c) * s_in) / s_out)
                        .collect();
                    Ok(NodeConsts::Conv { s_total, q6: relu6_ceiling(node.attrs.relu6, s_out) })
                }
                Params::Float { .. } if node.kind == OpKind::Linear => {
                    Ok(NodeConsts::ClassifierF32 { s_in, inv_out: 1.0 / s_out })
                }
                Params::Float { .. } => Err(Error::Invalid(format!(
                    "node {id}: float params in quantized execution"
                ))),
                Params::None => {
                    Err(Error::Invalid(format!("node {id}: uninitialized parameters")))
                }
            }
        }
        OpKind::Add => {
            let fa = graph.scale_of(preds[0])? / s_out;
            let fb = graph.scale_of(preds[1])? / s_out;
            Ok(NodeConsts::Add { fa, fb, q6: relu6_ceiling(node.attrs.relu6, s_out) })
        }
        OpKind::AvgPool => {
            let s_in = graph.scale_of(preds[0])?;
            let in_shape = graph.shape_of(preds[0], shapes);
            let count = (in_shape.0[0] * in_shape.0[1]) as f32;
            Ok(NodeConsts::Pool {
                factor: (s_in / s_out) / count,
                q6: relu6_ceiling(node.attrs.relu6, s_out),
            })
        }
    }
}

#[inline]
fn requant_i8(acc: i32, s: f32, q6: i32) -> i8 {
    let mut v = round_half_even(acc as f32 * s) as i64;
    if q6 != NO_RELU6 {
        v = v.clamp(0, q6 as i64);
    }
    v.clamp(-128, 127) as i8
}

// ---------------------------------------------------------------------------
// Int8 kernels
// ---------------------------------------------------------------------------

/// Direct standard convolution, the semantic reference for the tiled path.
pub fn conv2d_int8_direct(
    g: &ConvGeom,
    x: &[i8],
    w: &[i8],
    bias: &[i32],
    s_total: &[f32],
    q6: i32,
    out: &mut [i8],
) {
    let st = |c: usize| if s_total.len() == 1 { s_total[0] } else { s_total[c] };
    let mut acc = vec![0i32; g.oc];
    for oy in 0..g.oh {
        for ox in 0..g.ow {
            acc.copy_from_slice(bias);
            for ky in 0..g.k {
                let iy = (oy * g.stride + ky) as i64 - g.pad_top;
                if iy < 0 || iy >= g.ih as i64 {
                    continue;
                }
                for kx in 0..g.k {
                    let ix = (ox * g.stride + kx) as i64 - g.pad_left;
                    if ix < 0 || ix >= g.iw as i64 {
                        continue;
                    }
                    let xbase = ((iy as usize) * g.iw + ix as usize) * g.ic;
                    let wbase = (ky * g.k + kx) * g.ic * g.oc;
                    for ci in 0..g.ic {
                        let xv = x[xbase + ci] as i32;
                        if xv == 0 {
                            continue;
                        }
                        let wrow = wbase + ci * g.oc;
                        for (co, a) in acc.iter_mut().enumerate() {
                            *a += xv * w[wrow + co] as i32;
                        }
                    }
                }
            }
            let obase = (oy * g.ow + ox) * g.oc;
            for co in 0..g.oc {
                out[obase + co] = requant_i8(acc[co], st(co), q6);
            }
        }
    }
}

/// im2col convolution processing `tile_width` output columns per transform.
/// `scratch` must hold at least `min(tile_width, ow) * k^2 * ic` bytes; the
/// return value is the scratch high-water mark actually used. Output is
/// bit-identical to [`conv2d_int8_direct`] for every tile width.
pub fn conv_im2col_tiled(
    g: &ConvGeom,
    x: &[i8],
    w: &[i8],
    bias: &[i32],
    s_total: &[f32],
    q6: i32,
    tile_width: usize,
    scratch: &mut Vec<i8>,
    out: &mut [i8],
) -> Result<usize> {
    if tile_width == 0 {
        return Err(Error::Invalid("tile width must be >= 1".into()));
    }
    let col = g.k * g.k * g.ic;
    let need = tile_width.min(g.ow.max(1)) * col;
    if scratch.len() < need {
        scratch.resize(need, 0);
    }
    let st = |c: usize| if s_total.len() == 1 { s_total[0] } else { s_total[c] };
    let mut high_water = 0usize;
    let mut acc = vec![0i32; g.oc];
    for oy in 0..g.oh {
        let mut ox0 = 0;
        while ox0 < g.ow {
            let cols = tile_width.min(g.ow - ox0);
            high_water = high_water.max(cols * col);
            // Transform: one column of k^2*ic input samples per output pixel.
            for c in 0..cols {
                let ox = ox0 + c;
                let dst = &mut scratch[c * col..(c + 1) * col];
                let mut j = 0;
                for ky in 0..g.k {
                    let iy = (oy * g.stride + ky) as i64 - g.pad_top;
                    for kx in 0..g.k {
                        let ix = (ox * g.stride + kx) as i64 - g.pad_left;
                        if iy < 0 || iy >= g.ih as i64 || ix < 0 || ix >= g.iw as i64 {
                            for v in &mut dst[j..j + g.ic] {
                                *v = 0;
                            }
                        } else {
                            let xbase = ((iy as usize) * g.iw + ix as usize) * g.ic;
                            dst[j..j + g.ic].copy_from_slice(&x[xbase..xbase + g.ic]);
                        }
                        j += g.ic;
                    }
                }
            }
            for c in 0..cols {
                acc.copy_from_slice(bias);
                let src = &scratch[c * col..(c + 1) * col];
                for (j, &v) in src.iter().enumerate() {
                    if v != 0 {
                        let wrow = j * g.oc;
                        let xv = v as i32;
                        for (co, a) in acc.iter_mut().enumerate() {
                            *a += xv * w[wrow + co] as i32;
                        }
                    }
                }
                let obase = (oy * g.ow + (ox0 + c)) * g.oc;
                for co in 0..g.oc {
                    out[obase + co] = requant_i8(acc[co], st(co), q6);
                }
            }
            ox0 += cols;
        }
    }
    Ok(high_water)
}

/// Depthwise convolution, out-of-place.
pub fn dwconv_int8(
    g: &ConvGeom,
    x: &[i8],
    w: &[i8],
    bias: &[i32],
    s_total: &[f32],
    q6: i32,
    out: &mut [i8],
) {
    let st = |c: usize| if s_total.len() == 1 { s_total[0] } else { s_total[c] };
    for c in 0..g.ic {
        dw_channel(g, x, w, bias[c], st(c), q6, c, c, out);
    }
}

/// One depthwise channel: reads input channel `c`, writes results into
/// channel slot `c_out_slot` of `out`.
fn dw_channel(
    g: &ConvGeom,
    x: &[i8],
    w: &[i8],
    bias: i32,
    s: f32,
    q6: i32,
    c: usize,
    c_out_slot: usize,
    out: &mut [i8],
) {
    let cs = g.ic;
    for oy in 0..g.oh {
        for ox in 0..g.ow {
            let mut acc = bias;
            for ky in 0..g.k {
                let iy = (oy * g.stride + ky) as i64 - g.pad_top;
                if iy < 0 || iy >= g.ih as i64 {
                    continue;
                }
                for kx in 0..g.k {
                    let ix = (ox * g.stride + kx) as i64 - g.pad_left;
                    if ix < 0 || ix >= g.iw as i64 {
                        continue;
                    }
                    let xv = x[((iy as usize) * g.iw + ix as usize) * cs + c] as i32;
                    acc += xv * w[(ky * g.k + kx) * cs + c] as i32;
                }
            }
            out[(oy * g.ow + ox) * cs + c_out_slot] = requant_i8(acc, s, q6);
        }
    }
}

/// In-place depthwise convolution for stride-1 shape-preserving layers.
///
/// Channel `c`'s output overwrites channel `c-1`'s slot while channel `c`'s
/// input is still intact; the first channel goes through a one-plane
/// temporary and the rotation is resolved back to the canonical layout at
/// the end. Extra memory is exactly one channel plane. Returns an error for
/// stride != 1 (callers fall back to the out-of-place kernel).
pub fn dwconv_int8_inplace(
    g: &ConvGeom,
    buf: &mut [i8],
    w: &[i8],
    bias: &[i32],
    s_total: &[f32],
    q6: i32,
) -> Result<()> {
    if g.stride != 1 || g.oh != g.ih || g.ow != g.iw {
        return Err(Error::Invalid(
            "in-place depthwise requires stride 1 and shape-preserving padding".into(),
        ));
    }
    let c_total = g.ic;
    let st = |c: usize| if s_total.len() == 1 { s_total[0] } else { s_total[c] };
    let plane = g.oh * g.ow;
    let mut temp = vec![0i8; plane];
    {
        // First channel into the temporary plane.
        let src: &[i8] = buf;
        for oy in 0..g.oh {
            for ox in 0..g.ow {
                let mut acc = bias[0];
                for ky in 0..g.k {
                    let iy = (oy + ky) as i64 - g.pad_top;
                    if iy < 0 || iy >= g.ih as i64 {
                        continue;
                    }
                    for kx in 0..g.k {
                        let ix = (ox + kx) as i64 - g.pad_left;
                        if ix < 0 || ix >= g.iw as i64 {
                            continue;
                        }
                        acc += src[((iy as usize) * g.iw + ix as usize) * c_total] as i32
                            * w[(ky * g.k + kx) * c_total] as i32;
                    }
                }
                temp[oy * g.ow + ox] = requant_i8(acc, st(0), q6);
            }
        }
    }
    // Channel c overwrites slot c-1; input channel c is untouched until then.
    for c in 1..c_total {
        for oy in 0..g.oh {
            for ox in 0..g.ow {
                let mut acc = bias[c];
                for ky in 0..g.k {
                    let iy = (oy + ky) as i64 - g.pad_top;
                    if iy < 0 || iy >= g.ih as i64 {
                        continue;
                    }
                    for kx in 0..g.k {
                        let ix = (ox + kx) as i64 - g.pad_left;
                        if ix < 0 || ix >= g.iw as i64 {
                            continue;
                        }
                        acc += buf[((iy as usize) * g.iw + ix as usize) * c_total + c] as i32
                            * w[(ky * g.k + kx) * c_total + c] as i32;
                    }
                }
                buf[(oy * g.ow + ox) * c_total + (c - 1)] = requant_i8(acc, st(c), q6);
            }
        }
    }
    // Undo the rotation: slot j currently holds output channel j+1.
    for pos in 0..plane {
        let chunk = &mut buf[pos * c_total..(pos + 1) * c_total];
        chunk.rotate_right(1);
        chunk[0] = temp[pos];
    }
    Ok(())
}

fn add_int8(a: &[i8], b: &[i8], fa: f32, fb: f32, q6: i32, out: &mut [i8]) {
    for i in 0..out.len() {
        let ra = round_half_even(a[i] as f32 * fa) as i64;
        let rb = round_half_even(b[i] as f32 * fb) as i64;
        let mut v = ra + rb;
        if q6 != NO_RELU6 {
            v = v.clamp(0, q6 as i64);
        }
        out[i] = v.clamp(-128, 127) as i8;
    }
}

fn avg_pool_int8(h: usize, w: usize, c: usize, x: &[i8], factor: f32, q6: i32, out: &mut [i8]) {
    for ch in 0..c {
        let mut acc = 0i32;
        for pos in 0..h * w {
            acc += x[pos * c + ch] as i32;
        }
        out[ch] = requant_i8(acc, factor, q6);
    }
}

/// fp32 classifier over an int8 feature vector. The f32 accumulation order
/// (bias first, then ascending input index) is part of the bit-exactness
/// contract with emitted C code.
#[allow(clippy::too_many_arguments)]
fn classifier_f32(
    cin: usize,
    cout: usize,
    x: &[i8],
    s_in: f32,
    w: &[f32],
    b: &[f32],
    inv_out: f32,
    out_q: &mut [i8],
    logits: &mut [f32],
) {
    for co in 0..cout {
        let mut acc = b[co];
        for ci in 0..cin {
            acc += (x[ci] as f32 * s_in) * w[ci * cout + co];
        }
        logits[co] = acc;
        out_q[co] = saturate_i8(round_half_even(acc * inv_out));
    }
}

// ---------------------------------------------------------------------------
// fp32 kernels
// ---------------------------------------------------------------------------

fn relu6_f32(v: f32) -> f32 {
    v.max(0.0).min(6.0)
}

pub fn conv2d_f32(
    g: &ConvGeom,
    x: &[f32],
    w: &[f32],
    bias: &[f32],
    relu6: bool,
    groups: usize,
    out: &mut [f32],
) {
    let icpg = g.ic / groups;
    let ocpg = g.oc / groups;
    for oy in 0..g.oh {
        for ox in 0..g.ow {
            for grp in 0..groups {
                for og in 0..ocpg {
                    let co = grp * ocpg + og;
                    let mut acc = bias[co];
                    for ky in 0..g.k {
                        let iy = (oy * g.stride + ky) as i64 - g.pad_top;
                        if iy < 0 || iy >= g.ih as i64 {
                            continue;
                        }
                        for kx in 0..g.k {
                            let ix = (ox * g.stride + kx) as i64 - g.pad_left;
                            if ix < 0 || ix >= g.iw as i64 {
                                continue;
                            }
                            let xb = ((iy as usize) * g.iw + ix as usize) * g.ic;
                            let wb = (ky * g.k + kx) * icpg * g.oc;
                            for ci in 0..icpg {
                                acc += x[xb + grp * icpg + ci] * w[wb + ci * g.oc + co];
                            }
                        }
                    }
                    out[(oy * g.ow + ox) * g.oc + co] =
                        if relu6 { relu6_f32(acc) } else { acc };
                }
            }
        }
    }
}

// ---------------------------------------------------------------------------
// Whole-graph execution
// ---------------------------------------------------------------------------

/// Forward activations captured by a reference fp32 run.
pub struct FpCapture {
    pub tensors: HashMap<TensorId, FloatTensor>,
}

pub fn run_fp32(graph: &Graph, input: &FloatTensor) -> Result<FloatTensor> {
    let cap = run_fp32_capture(graph, input)?;
    let last = TensorId::Node(graph.nodes.len() - 1);
    Ok(cap.tensors[&last].clone())
}

pub fn run_fp32_capture(graph: &Graph, input: &FloatTensor) -> Result<FpCapture> {
    let shapes = crate::ir::validate(graph)?;
    if input.shape != graph.input.shape() {
        return Err(Error::Shape(format!(
            "input shape {:?} != graph input {:?}",
            input.shape.0,
            graph.input.shape().0
        )));
    }
    let mut tensors: HashMap<TensorId, FloatTensor> = HashMap::new();
    tensors.insert(TensorId::Input, input.clone());
    for node in &graph.nodes {
        let preds = graph.pred_tensors(node.id);
        let out_shape = shapes[node.id].clone();
        let x = &tensors[&preds[0]];
        let mut out = vec![0.0f32; out_shape.elems()];
        match node.kind {
            OpKind::Conv2d | OpKind::DwConv2d => {
                let (weight, bias) = float_params(graph, node.id)?;
                let geom = ConvGeom::full(&node.attrs, x.shape.0[0], x.shape.0[1]);
                conv2d_f32(
                    &geom,
                    &x.data,
                    &weight.data,
                    &bias.data,
                    node.attrs.relu6,
                    node.attrs.groups,
                    &mut out,
                );
            }
            OpKind::Linear => {
                let (weight, bias) = float_params(graph, node.id)?;
                let (cin, cout) = (node.attrs.in_channels, node.attrs.out_channels);
                for co in 0..cout {
                    let mut acc = bias.data[co];
                    for ci in 0..cin {
                        acc += x.data[ci] * weight.data[ci * cout + co];
                    }
                    out[co] = if node.attrs.relu6 { relu6_f32(acc) } else { acc };
                }
            }
            OpKind::Add => {
                let y = &tensors[&preds[1]];
                for i in 0..out.len() {
                    let v = x.data[i] + y.data[i];
                    out[i] = if node.attrs.relu6 { relu6_f32(v) } else { v };
                }
            }
            OpKind::AvgPool => {
                let (h, w, c) = (x.shape.0[0], x.shape.0[1], x.shape.0[2]);
                let inv = 1.0 / (h * w) as f32;
                for ch in 0..c {
                    let mut acc = 0.0f32;
                    for pos in 0..h * w {
                        acc += x.data[pos * c + ch];
                    }
                    out[ch] = acc * inv;
                }
            }
        }
        tensors.insert(TensorId::Node(node.id), FloatTensor::new(out_shape, out)?);
    }
    Ok(FpCapture { tensors })
}

fn float_params(graph: &Graph, id: NodeId) -> Result<(&FloatTensor, &FloatTensor)> {
    match &graph.nodes[id].params {
        Params::Float { weight, bias } => Ok((weight, bias)),
        _ => Err(Error::Invalid(format!("node {id}: expected float parameters"))),
    }
}

fn quant_params(graph: &Graph, id: NodeId) -> Result<(&QuantTensor, &crate::qtensor::AccTensor)> {
    match &graph.nodes[id].params {
        Params::Quant { weight, bias } => Ok((weight, bias)),
        _ => Err(Error::Invalid(format!("node {id}: expected quantized parameters"))),
    }
}

/// Captured int8 forward pass: every tensor plus fp32 classifier logits.
pub struct IntCapture {
    pub tensors: HashMap<TensorId, QuantTensor>,
    /// Present when the final node is the fp32 classifier.
    pub logits: Option<FloatTensor>,
}

/// Execute one node of a quantized graph given its input tensors. The
/// optional tile width drives the conv im2col path (defaults to the full
/// output width).
pub fn exec_node_int8(
    graph: &Graph,
    shapes: &[Shape],
    id: NodeId,
    inputs: &[&QuantTensor],
    tile_width: Option<usize>,
    logits_out: Option<&mut Option<FloatTensor>>,
) -> Result<QuantTensor> {
    let node = &graph.nodes[id];
    let x = inputs[0];
    let (ih, iw) = (x.shape.0[0], x.shape.0.get(1).copied().unwrap_or(1));
    let consts = node_consts(graph, shapes, id)?;
    let out_scale = ScaleVector::splat(graph.scale_of(TensorId::Node(id))?)?;
    match (&consts, node.kind) {
        (NodeConsts::Conv { s_total, q6 }, OpKind::Conv2d) => {
            let (w, b) = quant_params(graph, id)?;
            let geom = ConvGeom::full(&node.attrs, ih, iw);
            let mut out = vec![0i8; geom.oh * geom.ow * geom.oc];
            let tw = tile_width.unwrap_or(geom.ow).max(1);
            let mut scratch = Vec::new();
            conv_im2col_tiled(&geom, &x.data, &w.data, &b.data, s_total, *q6, tw, &mut scratch, &mut out)?;
            QuantTensor::new(Shape::hwc(geom.oh, geom.ow, geom.oc), out, out_scale)
        }
        (NodeConsts::Conv { s_total, q6 }, OpKind::DwConv2d) => {
            let (w, b) = quant_params(graph, id)?;
            let geom = ConvGeom::full(&node.attrs, ih, iw);
            let mut out = vec![0i8; geom.oh * geom.ow * geom.oc];
            dwconv_int8(&geom, &x.data, &w.data, &b.data, s_total, *q6, &mut out);
            QuantTensor::new(Shape::hwc(geom.oh, geom.ow, geom.oc), out, out_scale)
        }
        (NodeConsts::Conv { s_total, q6 }, OpKind::Linear) => {
            let (w, b) = quant_params(graph, id)?;
            let geom = ConvGeom::full(&node.attrs, 1, 1);
            let mut out = vec![0i8; geom.oc];
            conv2d_int8_direct(&geom, &x.data, &w.data, &b.data, s_total, *q6, &mut out);
            QuantTensor::new(Shape::hwc(1, 1, geom.oc), out, out_scale)
        }
        (NodeConsts::ClassifierF32 { s_in, inv_out }, OpKind::Linear) => {
            let (w, b) = float_params(graph, id)?;
            let (cin, cout) = (node.attrs.in_channels, node.attrs.out_channels);
            let mut out = vec![0i8; cout];
            let mut logits = vec![0.0f32; cout];
            classifier_f32(cin, cout, &x.data, *s_in, &w.data, &b.data, *inv_out, &mut out, &mut logits);
            if let Some(slot) = logits_out {
                *slot = Some(FloatTensor::new(Shape::hwc(1, 1, cout), logits)?);
            }
            QuantTensor::new(Shape::hwc(1, 1, cout), out, out_scale)
        }
        (NodeConsts::Add { fa, fb, q6 }, OpKind::Add) => {
            let y = inputs[1];
            let mut out = vec![0i8; x.data.len()];
            add_int8(&x.data, &y.data, *fa, *fb, *q6, &mut out);
            QuantTensor::new(x.shape.clone(), out, out_scale)
        }
        (NodeConsts::Pool { factor, q6 }, OpKind::AvgPool) => {
            let c = x.shape.0[2];
            let mut out = vec![0i8; c];
            avg_pool_int8(ih, iw, c, &x.data, *factor, *q6, &mut out);
            QuantTensor::new(Shape::hwc(1, 1, c), out, out_scale)
        }
        _ => Err(Error::Invalid(format!("node {id}: kind/params mismatch"))),
    }
}

pub fn run_int8(graph: &Graph, input: &QuantTensor) -> Result<QuantTensor> {
    let cap = run_int8_capture(graph, input)?;
    let last = TensorId::Node(graph.nodes.len() - 1);
    Ok(cap.tensors[&last].clone())
}

/// Int8 forward pass keeping every intermediate tensor. Tile widths, when
/// given, are indexed by node id.
pub fn run_int8_capture_tiled(
    graph: &Graph,
    input: &QuantTensor,
    tile_widths: Option<&HashMap<NodeId, usize>>,
) -> Result<IntCapture> {
    let shapes = crate::ir::validate(graph)?;
    if input.shape != graph.input.shape() {
        return Err(Error::Shape(format!(
            "input shape {:?} != graph input {:?}",
            input.shape.0,
            graph.input.shape().0
        )));
    }
    let mut tensors: HashMap<TensorId, QuantTensor> = HashMap::new();
    tensors.insert(TensorId::Input, input.clone());
    let mut logits = None;
    for node in &graph.nodes {
        let preds = graph.pred_tensors(node.id);
        let inputs: Vec<&QuantTensor> = preds.iter().map(|t| &tensors[t]).collect();
        let tw = tile_widths.and_then(|m| m.get(&node.id).copied());
        let out = exec_node_int8(graph, &shapes, node.id, &inputs, tw, Some(&mut logits))?;
        tensors.insert(TensorId::Node(node.id), out);
    }
    Ok(IntCapture { tensors, logits })
}

pub fn run_int8_capture(graph: &Graph, input: &QuantTensor) -> Result<IntCapture> {
    run_int8_capture_tiled(graph, input, None)
}

// ---------------------------------------------------------------------------
// Calibration and graph quantization
// ---------------------------------------------------------------------------

/// Max-abs activation statistics from a calibration batch.
#[derive(Debug, Clone)]
pub struct Calibration {
    pub input_scale: f32,
    pub node_scales: Vec<f32>,
}

fn scale_from_max(m: f32) -> f32 {
    if m == 0.0 {
        1.0
    } else {
        m / 127.0
    }
}

/// Run the fp32 graph over a calibration batch and derive per-tensor
/// activation scales as `max|v| / 127` (post-training quantization).
pub fn calibrate(graph: &Graph, batch: &[FloatTensor]) -> Result<Calibration> {
    if batch.is_empty() {
        return Err(Error::Invalid("empty calibration batch".into()));
    }
    let mut in_max = 0.0f32;
    let mut node_max = vec![0.0f32; graph.nodes.len()];
    for input in batch {
        let cap = run_fp32_capture(graph, input)?;
        in_max = input.data.iter().fold(in_max, |a, v| a.max(v.abs()));
        for (id, m) in node_max.iter_mut().enumerate() {
            let t = &cap.tensors[&TensorId::Node(id)];
            *m = t.data.iter().fold(*m, |a, v| a.max(v.abs()));
        }
    }
    Ok(Calibration {
        input_scale: scale_from_max(in_max),
        node_scales: node_max.into_iter().map(scale_from_max).collect(),
    })
}

/// Quantize a float-weight graph: per-channel int8 weights, int32 biases at
/// scale `s_w * s_x`, per-tensor activation scales from calibration. The
/// final classifier keeps 32-bit real parameters.
pub fn quantize_graph(graph: &Graph, calib: &Calibration) -> Result<Graph> {
    crate::ir::validate(graph)?;
    if calib.node_scales.len() != graph.nodes.len() {
        return Err(Error::Invalid("calibration does not match graph".into()));
    }
    let mut out = graph.clone();
    out.input.scale = Some(calib.input_scale);
    for id in 0..out.nodes.len() {
        out.nodes[id].out_scale = Some(calib.node_scales[id]);
    }
    let classifier = out.classifier();
    let ids = out.parametric_nodes();
    for id in ids {
        if Some(id) == classifier {
            continue; // classifier stays fp32
        }
        let preds = out.pred_tensors(id);
        let s_x = out.scale_of(preds[0])?;
        let (weight, bias) = {
            let (w, b) = float_params(&out, id)?;
            (w.clone(), b.clone())
        };
        let w_scales =
            crate::qtensor::compute_scales(&weight, crate::qtensor::ScaleMode::PerChannel)?;
        let w_q = crate::qtensor::quantize(&weight, &w_scales)?;
        let b_q: Vec<i32> = bias
            .data
            .iter()
            .enumerate()
            .map(|(c, &v)| {
                let s = w_scales.at(c) as f64 * s_x as f64;
                (v as f64 / s).round().clamp(i32::MIN as f64, i32::MAX as f64) as i32
            })
            .collect();
        out.nodes[id].params = Params::Quant {
            weight: w_q,
            bias: crate::qtensor::AccTensor::new(Shape(vec![bias.data.len()]), b_q)?,
        };
    }
    Ok(out)
}

/// Quantize an fp32 input tensor with the graph's input scale.
pub fn quantize_input(graph: &Graph, input: &FloatTensor) -> Result<QuantTensor> {
    let s = graph
        .input
        .scale
        .ok_or_else(|| Error::Invalid("graph has no input scale".into()))?;
    crate::qtensor::quantize(input, &ScaleVector::splat(s)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ir::{Attrs, GraphBuilder};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_f32(rng: &mut ChaCha8Rng, n: usize, lo: f32, hi: f32) -> Vec<f32> {
        (0..n).map(|_| rng.gen_range(lo..hi)).collect()
    }

    /// Independent naive fp32 conv oracle in f64 for engine validation.
    #[allow(clippy::too_many_arguments)]
    fn naive_conv_f64(
        ih: usize,
        iw: usize,
        ic: usize,
        oc: usize,
        k: usize,
        s: usize,
        x: &[f32],
        w: &[f32],
        b: &[f32],
        relu6: bool,
    ) -> Vec<f64> {
        let oh = ih.div_ceil(s);
        let ow = iw.div_ceil(s);
        let pt = same_pad_before(ih, k, s) as i64;
        let pl = same_pad_before(iw, k, s) as i64;
        let mut out = vec![0f64; oh * ow * oc];
        for oy in 0..oh {
            for ox in 0..ow {
                for co in 0..oc {
                    let mut acc = b[co] as f64;
                    for ky in 0..k {
                        for kx in 0..k {
                            let iy = (oy * s + ky) as i64 - pt;
                            let ix = (ox * s + kx) as i64 - pl;
                            if iy < 0 || iy >= ih as i64 || ix < 0 || ix >= iw as i64 {
                                continue;
                            }
                            for ci in 0..ic {
                                acc += x[((iy as usize) * iw + ix as usize) * ic + ci] as f64
                                    * w[((ky * k + kx) * ic + ci) * oc + co] as f64;
                            }
                        }
                    }
                    if relu6 {
                        acc = acc.max(0.0).min(6.0);
                    }
                    out[(oy * ow + ox) * oc + co] = acc;
                }
            }
        }
        out
    }

    fn small_quantized_net(seed: u64) -> (crate::ir::Graph, Vec<FloatTensor>) {
        let mut b = GraphBuilder::new(10, 10, 3);
        let c1 = b.conv(None, 3, 2, 3, 8, true);
        let c2 = b.dwconv(c1, 3, 1, 8, true);
        b.conv(Some(c2), 1, 1, 8, 4, false);
        let mut g = b.finish();
        crate::ir::init_weights(&mut g, seed).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5a5a);
        let batch: Vec<FloatTensor> = (0..4)
            .map(|_| {
                FloatTensor::new(Shape::hwc(10, 10, 3), rand_f32(&mut rng, 300, -1.0, 1.0))
                    .unwrap()
            })
            .collect();
        (g, batch)
    }

    #[test]
    fn identity_pointwise_conv_passes_input_through() {
        let mut b = GraphBuilder::new(4, 4, 3);
        b.conv(None, 1, 1, 3, 3, false);
        let mut g = b.finish();
        let eye = FloatTensor::new(
            Shape::weights(1, 1, 3, 3),
            vec![1., 0., 0., 0., 1., 0., 0., 0., 1.],
        )
        .unwrap();
        let bias = FloatTensor::new(Shape(vec![3]), vec![0.0; 3]).unwrap();
        g.nodes[0].params = Params::Float { weight: eye, bias };
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = FloatTensor::new(Shape::hwc(4, 4, 3), rand_f32(&mut rng, 48, -1.0, 1.0)).unwrap();
        let y = run_fp32(&g, &x).unwrap();
        assert_eq!(x.data, y.data);
    }

    #[test]
    fn zero_weights_broadcast_bias() {
        let mut b = GraphBuilder::new(4, 4, 2);
        b.conv(None, 3, 1, 2, 2, false);
        let mut g = b.finish();
        g.nodes[0].params = Params::Float {
            weight: FloatTensor::new(Shape::weights(3, 3, 2, 2), vec![0.0; 36]).unwrap(),
            bias: FloatTensor::new(Shape(vec![2]), vec![0.5, -0.25]).unwrap(),
        };
        let x = FloatTensor::zeros(Shape::hwc(4, 4, 2));
        let y = run_fp32(&g, &x).unwrap();
        for px in y.data.chunks(2) {
            assert_eq!(px, &[0.5, -0.25]);
        }
    }

    #[test]
    fn fp32_engine_matches_naive_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for trial in 0..5 {
            let (ih, iw, ic, oc, k) = (7, 6, 3, 5, 3);
            let s = 1 + trial % 2;
            let x = rand_f32(&mut rng, ih * iw * ic, -1.0, 1.0);
            let w = rand_f32(&mut rng, k * k * ic * oc, -0.5, 0.5);
            let bias = rand_f32(&mut rng, oc, -0.2, 0.2);
            let mut b = GraphBuilder::new(ih, iw, ic);
            b.conv(None, k, s, ic, oc, true);
            let mut g = b.finish();
            g.nodes[0].params = Params::Float {
                weight: FloatTensor::new(Shape::weights(k, k, ic, oc), w.clone()).unwrap(),
                bias: FloatTensor::new(Shape(vec![oc]), bias.clone()).unwrap(),
            };
            let got =
                run_fp32(&g, &FloatTensor::new(Shape::hwc(ih, iw, ic), x.clone()).unwrap())
                    .unwrap();
            let want = naive_conv_f64(ih, iw, ic, oc, k, s, &x, &w, &bias, true);
            let mut num = 0.0f64;
            let mut den = 0.0f64;
            for (a, b) in got.data.iter().zip(&want) {
                num += (*a as f64 - b).powi(2);
                den += b.powi(2);
            }
            assert!((num / den.max(1e-12)).sqrt() < 1e-5);
        }
    }

    #[test]
    fn int8_run_is_deterministic_and_close_to_fp32() {
        let (g, batch) = small_quantized_net(42);
        let calib = calibrate(&g, &batch).unwrap();
        let qg = quantize_graph(&g, &calib).unwrap();
        let qx = quantize_input(&qg, &batch[0]).unwrap();
        let y1 = run_int8(&qg, &qx).unwrap();
        let y2 = run_int8(&qg, &qx).unwrap();
        assert_eq!(y1.data, y2.data, "two runs must be byte-identical");

        let yf = run_fp32(&g, &batch[0]).unwrap();
        let yd = crate::qtensor::dequantize(&y1);
        let s_out = qg.nodes.last().unwrap().out_scale.unwrap();
        for (a, b) in yd.data.iter().zip(&yf.data) {
            assert!((a - b).abs() < 12.0 * s_out, "{a} vs {b} (s={s_out})");
        }
    }

    #[test]
    fn zero_input_zero_bias_gives_zero_everywhere() {
        let (mut g, batch) = small_quantized_net(7);
        for node in &mut g.nodes {
            if let Params::Float { bias, .. } = &mut node.params {
                bias.data.iter_mut().for_each(|v| *v = 0.0);
            }
        }
        let calib = calibrate(&g, &batch).unwrap();
        let qg = quantize_graph(&g, &calib).unwrap();
        let zero = QuantTensor::new(
            Shape::hwc(10, 10, 3),
            vec![0i8; 300],
            ScaleVector::splat(qg.input.scale.unwrap()).unwrap(),
        )
        .unwrap();
        let cap = run_int8_capture(&qg, &zero).unwrap();
        for (id, t) in &cap.tensors {
            assert!(t.data.iter().all(|&v| v == 0), "nonzero at {id:?}");
        }
    }

    #[test]
    fn tiling_is_invariant_across_all_widths() {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let (ih, iw, ic, oc, k) = (9, 8, 4, 6, 3);
        let geom = ConvGeom::full(
            &Attrs {
                kernel: k,
                stride: 1,
                padding: crate::ir::Padding::Same,
                in_channels: ic,
                out_channels: oc,
                groups: 1,
                relu6: true,
            },
            ih,
            iw,
        );
        let x: Vec<i8> = (0..ih * iw * ic).map(|_| rng.gen_range(-128i32..=127) as i8).collect();
        let w: Vec<i8> =
            (0..k * k * ic * oc).map(|_| rng.gen_range(-128i32..=127) as i8).collect();
        let b: Vec<i32> = (0..oc).map(|_| rng.gen_range(-1000..1000)).collect();
        let st = vec![0.003f32; oc];
        let q6 = 120;
        let mut reference = vec![0i8; geom.oh * geom.ow * geom.oc];
        conv2d_int8_direct(&geom, &x, &w, &b, &st, q6, &mut reference);
        for tw in 1..=geom.ow {
            let mut out = vec![0i8; reference.len()];
            let mut scratch = Vec::new();
            let hw =
                conv_im2col_tiled(&geom, &x, &w, &b, &st, q6, tw, &mut scratch, &mut out).unwrap();
            assert_eq!(out, reference, "tile width {tw}");
            assert!(hw <= tw * k * k * ic);
            if tw == 1 {
                assert_eq!(hw, k * k * ic, "column-at-a-time scratch");
            }
        }
    }

    #[test]
    fn inplace_depthwise_matches_out_of_place() {
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        for trial in 0..20 {
            let c = rng.gen_range(1..9);
            let (h, w) = (rng.gen_range(3..9), rng.gen_range(3..9));
            let k = [3usize, 5][trial % 2];
            let geom = ConvGeom::full(
                &Attrs {
                    kernel: k,
                    stride: 1,
                    padding: crate::ir::Padding::Same,
                    in_channels: c,
                    out_channels: c,
                    groups: c,
                    relu6: trial % 3 == 0,
                },
                h,
                w,
            );
            let x: Vec<i8> =
                (0..h * w * c).map(|_| rng.gen_range(-128i32..=127) as i8).collect();
            let wts: Vec<i8> =
                (0..k * k * c).map(|_| rng.gen_range(-128i32..=127) as i8).collect();
            let b: Vec<i32> = (0..c).map(|_| rng.gen_range(-500..500)).collect();
            let st: Vec<f32> = (0..c).map(|_| rng.gen_range(0.001f32..0.01)).collect();
            let q6 = if trial % 3 == 0 { 110 } else { NO_RELU6 };
            let mut expect = vec![0i8; x.len()];
            dwconv_int8(&geom, &x, &wts, &b, &st, q6, &mut expect);
            let mut buf = x.clone();
            dwconv_int8_inplace(&geom, &mut buf, &wts, &b, &st, q6).unwrap();
            assert_eq!(buf, expect, "trial {trial}");
        }
    }

    #[test]
    fn inplace_depthwise_refuses_stride_two() {
        let geom = ConvGeom::full(
            &Attrs {
                kernel: 3,
                stride: 2,
                padding: crate::ir::Padding::Same,
                in_channels: 2,
                out_channels: 2,
                groups: 2,
                relu6: false,
            },
            6,
            6,
        );
        let mut buf = vec![0i8; 72];
        let err = dwconv_int8_inplace(&geom, &mut buf, &[0; 18], &[0; 2], &[0.1; 2], NO_RELU6);
        assert!(err.is_err());
    }

    #[test]
    fn classifier_stays_fp32_after_quantization() {
        let mut b = GraphBuilder::new(4, 4, 2);
        let c = b.conv(None, 3, 1, 2, 4, true);
        let p = b.avg_pool(c, 4);
        b.linear(p, 4, 3);
        let mut g = b.finish();
        crate::ir::init_weights(&mut g, 5).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let batch = vec![FloatTensor::new(
            Shape::hwc(4, 4, 2),
            rand_f32(&mut rng, 32, -1.0, 1.0),
        )
        .unwrap()];
        let qg = quantize_graph(&g, &calibrate(&g, &batch).unwrap()).unwrap();
        assert!(matches!(qg.nodes.last().unwrap().params, Params::Float { .. }));
        assert!(qg.nodes[0].params.is_quant());
        let qx = quantize_input(&qg, &batch[0]).unwrap();
        let cap = run_int8_capture(&qg, &qx).unwrap();
        assert!(cap.logits.is_some());
    }

    #[test]
    fn missing_scale_is_reported() {
        let (g, batch) = small_quantized_net(3);
        let mut qg = quantize_graph(&g, &calibrate(&g, &batch).unwrap()).unwrap();
        qg.nodes[1].out_scale = None;
        let qx = QuantTensor::new(
            Shape::hwc(10, 10, 3),
            vec![0i8; 300],
            ScaleVector::splat(qg.input.scale.unwrap()).unwrap(),
        )
        .unwrap();
        assert!(run_int8(&qg, &qx).is_err());
    }
}
