//! Quantized and floating tensor types plus the cast/requantize primitives of
//! the real quantized graph.
//!
//! Quantization is symmetric int8 with zero point fixed at 0. Activations are
//! laid out channels-last `(H, W, C)`, weights `(K_h, K_w, C_in/groups,
//! C_out)`. Scales are per-tensor (length 1) or per-output-channel (length
//! `C_out`, broadcast over the last axis). Rounding is half-to-even
//! everywhere, which keeps accumulation bias-free and makes every integer
//! path bit-reproducible across platforms.

use serde::{Deserialize, Serialize};
use std::io::{Read, Write};

use crate::{Error, Result};

/// Tensor extent. Activations use `(H, W, C)`, weights `(K_h, K_w,
/// C_in/groups, C_out)`; the channel axis is always last.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Shape(pub Vec<usize>);

impl Shape {
    pub fn hwc(h: usize, w: usize, c: usize) -> Self {
        Shape(vec![h, w, c])
    }

    pub fn weights(kh: usize, kw: usize, cin: usize, cout: usize) -> Self {
        Shape(vec![kh, kw, cin, cout])
    }

    pub fn elems(&self) -> usize {
        self.0.iter().product()
    }

    /// Size of the trailing (channel) axis.
    pub fn channels(&self) -> usize {
        *self.0.last().unwrap_or(&1)
    }

    pub fn validate(&self) -> Result<()> {
        if self.0.is_empty() {
            return Err(Error::Shape("empty shape".into()));
        }
        if self.0.iter().any(|&d| d == 0) {
            return Err(Error::Shape(format!("zero dim in {:?}", self.0)));
        }
        Ok(())
    }
}

/// Positive per-tensor or per-channel scale factors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScaleVector {
    values: Vec<f32>,
}

impl ScaleVector {
    pub fn new(values: Vec<f32>) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::Invalid("scale vector is empty".into()));
        }
        for &s in &values {
            if !(s.is_finite() && s > 0.0) {
                return Err(Error::Invalid(format!("non-positive scale {s}")));
            }
        }
        Ok(ScaleVector { values })
    }

    pub fn splat(s: f32) -> Result<Self> {
        ScaleVector::new(vec![s])
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    /// Scale for channel `c` (broadcasts a per-tensor scale).
    pub fn at(&self, c: usize) -> f32 {
        if self.values.len() == 1 {
            self.values[0]
        } else {
            self.values[c]
        }
    }

    /// Valid for a tensor shape when per-tensor or matching its channel axis.
    pub fn check_shape(&self, shape: &Shape) -> Result<()> {
        if self.values.len() != 1 && self.values.len() != shape.channels() {
            return Err(Error::Shape(format!(
                "scale length {} does not match channels {}",
                self.values.len(),
                shape.channels()
            )));
        }
        Ok(())
    }
}

/// Dense 32-bit real tensor, row-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FloatTensor {
    pub shape: Shape,
    pub data: Vec<f32>,
}

impl FloatTensor {
    pub fn new(shape: Shape, data: Vec<f32>) -> Result<Self> {
        shape.validate()?;
        if data.len() != shape.elems() {
            return Err(Error::Shape(format!(
                "data length {} != element count {}",
                data.len(),
                shape.elems()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::Invalid("non-finite value in float tensor".into()));
        }
        Ok(FloatTensor { shape, data })
    }

    pub fn zeros(shape: Shape) -> Self {
        let n = shape.elems();
        FloatTensor { shape, data: vec![0.0; n] }
    }
}

/// Signed 8-bit tensor with symmetric scales (zero point 0).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuantTensor {
    pub shape: Shape,
    pub data: Vec<i8>,
    pub scale: ScaleVector,
}

impl QuantTensor {
    pub fn new(shape: Shape, data: Vec<i8>, scale: ScaleVector) -> Result<Self> {
        shape.validate()?;
        if data.len() != shape.elems() {
            return Err(Error::Shape(format!(
                "data length {} != element count {}",
                data.len(),
                shape.elems()
            )));
        }
        scale.check_shape(&shape)?;
        Ok(QuantTensor { shape, data, scale })
    }
}

/// Signed 32-bit accumulator tensor (holds int32 biases and conv sums).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AccTensor {
    pub shape: Shape,
    pub data: Vec<i32>,
}

impl AccTensor {
    pub fn new(shape: Shape, data: Vec<i32>) -> Result<Self> {
        shape.validate()?;
        if data.len() != shape.elems() {
            return Err(Error::Shape(format!(
                "data length {} != element count {}",
                data.len(),
                shape.elems()
            )));
        }
        Ok(AccTensor { shape, data })
    }
}

/// Scale granularity for [`compute_scales`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ScaleMode {
    PerTensor,
    PerChannel,
}

/// Largest representable magnitude of the int8 range.
pub const QMAX: f32 = 127.0;

/// Round to nearest, ties to even. The same algorithm is spelled out in
/// emitted C sources so both sides agree bit for bit.
#[inline]
pub fn round_half_even(x: f32) -> f32 {
    x.round_ties_even()
}

#[inline]
pub(crate) fn saturate_i8(r: f32) -> i8 {
    if r < -128.0 {
        -128
    } else if r > 127.0 {
        127
    } else {
        r as i8
    }
}

/// Compute symmetric scales so the largest weight magnitude maps to 127.
/// An all-zero tensor (or channel) gets the sentinel scale 1.
pub fn compute_scales(weights: &FloatTensor, mode: ScaleMode) -> Result<ScaleVector> {
    match mode {
        ScaleMode::PerTensor => {
            let m = weights.data.iter().fold(0.0f32, |a, &v| a.max(v.abs()));
            ScaleVector::splat(if m == 0.0 { 1.0 } else { m / QMAX })
        }
        ScaleMode::PerChannel => {
            let c = weights.shape.channels();
            let mut maxima = vec![0.0f32; c];
            for (i, &v) in weights.data.iter().enumerate() {
                let ch = i % c;
                maxima[ch] = maxima[ch].max(v.abs());
            }
            ScaleVector::new(
                maxima
                    .into_iter()
                    .map(|m| if m == 0.0 { 1.0 } else { m / QMAX })
                    .collect(),
            )
        }
    }
}

/// `q = clamp(round_half_even(x / s), -128, 127)` with the scale broadcast
/// over the channel axis.
pub fn quantize(x: &FloatTensor, scale: &ScaleVector) -> Result<QuantTensor> {
    scale.check_shape(&x.shape)?;
    let c = x.shape.channels();
    let data = x
        .data
        .iter()
        .enumerate()
        .map(|(i, &v)| saturate_i8(round_half_even(v / scale.at(i % c))))
        .collect();
    QuantTensor::new(x.shape.clone(), data, scale.clone())
}

/// `x = q * s` with the scale broadcast over the channel axis.
pub fn dequantize(q: &QuantTensor) -> FloatTensor {
    let c = q.shape.channels();
    let data = q
        .data
        .iter()
        .enumerate()
        .map(|(i, &v)| v as f32 * q.scale.at(i % c))
        .collect();
    FloatTensor { shape: q.shape.clone(), data }
}

/// Project int32 accumulators back into int8: `clamp(round_half_even(acc *
/// s_total), -128, 127)`. `s_total` is the caller-combined factor
/// `s_W * s_x / s_y` (per output channel) and `out_scale` becomes the scale
/// of the produced tensor.
pub fn requantize_cast(
    acc: &AccTensor,
    s_total: &ScaleVector,
    out_scale: ScaleVector,
) -> Result<QuantTensor> {
    s_total.check_shape(&acc.shape)?;
    let c = acc.shape.channels();
    let data = acc
        .data
        .iter()
        .enumerate()
        .map(|(i, &v)| saturate_i8(round_half_even(v as f32 * s_total.at(i % c))))
        .collect();
    QuantTensor::new(acc.shape.clone(), data, out_scale)
}

// ---------------------------------------------------------------------------
// Binary dump format
//
// Little-endian: {rank: u32, dims: u32[rank], dtype: u8, scale_len: u32,
// scales: f32[scale_len]} followed by the raw payload. dtype 0 = f32,
// 1 = i8 (quantized, scale_len >= 1), 2 = i32.
// ---------------------------------------------------------------------------

const DTYPE_F32: u8 = 0;
const DTYPE_I8: u8 = 1;
const DTYPE_I32: u8 = 2;

/// Any tensor read back from the dump format.
#[derive(Debug, Clone, PartialEq)]
pub enum AnyTensor {
    Float(FloatTensor),
    Quant(QuantTensor),
    Acc(AccTensor),
}

impl AnyTensor {
    pub fn shape(&self) -> &Shape {
        match self {
            AnyTensor::Float(t) => &t.shape,
            AnyTensor::Quant(t) => &t.shape,
            AnyTensor::Acc(t) => &t.shape,
        }
    }
}

fn write_header(
    w: &mut impl Write,
    shape: &Shape,
    dtype: u8,
    scales: &[f32],
) -> std::io::Result<()> {
    w.write_all(&(shape.0.len() as u32).to_le_bytes())?;
    for &d in &shape.0 {
        w.write_all(&(d as u32).to_le_bytes())?;
    }
    w.write_all(&[dtype])?;
    w.write_all(&(scales.len() as u32).to_le_bytes())?;
    for &s in scales {
        w.write_all(&s.to_le_bytes())?;
    }
    Ok(())
}

pub fn write_tensor(w: &mut impl Write, t: &AnyTensor) -> std::io::Result<()> {
    match t {
        AnyTensor::Float(t) => {
            write_header(w, &t.shape, DTYPE_F32, &[])?;
            for &v in &t.data {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        AnyTensor::Quant(t) => {
            write_header(w, &t.shape, DTYPE_I8, t.scale.values())?;
            let bytes: Vec<u8> = t.data.iter().map(|&v| v as u8).collect();
            w.write_all(&bytes)?;
        }
        AnyTensor::Acc(t) => {
            write_header(w, &t.shape, DTYPE_I32, &[])?;
            for &v in &t.data {
                w.write_all(&v.to_le_bytes())?;
            }
        }
    }
    Ok(())
}

pub fn tensor_to_bytes(t: &AnyTensor) -> Vec<u8> {
    let mut buf = Vec::new();
    write_tensor(&mut buf, t).expect("vec write");
    buf
}

fn read_exact(r: &mut impl Read, n: usize) -> Result<Vec<u8>> {
    let mut buf = vec![0u8; n];
    r.read_exact(&mut buf)
        .map_err(|e| Error::Parse(format!("truncated tensor dump: {e}")))?;
    Ok(buf)
}

fn read_u32(r: &mut impl Read) -> Result<u32> {
    let b = read_exact(r, 4)?;
    Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
}

pub fn read_tensor(r: &mut impl Read) -> Result<AnyTensor> {
    let rank = read_u32(r)? as usize;
    if rank == 0 || rank > 8 {
        return Err(Error::Parse(format!("bad tensor rank {rank}")));
    }
    let mut dims = Vec::with_capacity(rank);
    for _ in 0..rank {
        dims.push(read_u32(r)? as usize);
    }
    let shape = Shape(dims);
    shape.validate().map_err(|e| Error::Parse(e.to_string()))?;
    let dtype = read_exact(r, 1)?[0];
    let scale_len = read_u32(r)? as usize;
    let mut scales = Vec::with_capacity(scale_len);
    for _ in 0..scale_len {
        let b = read_exact(r, 4)?;
        scales.push(f32::from_le_bytes([b[0], b[1], b[2], b[3]]));
    }
    let n = shape.elems();
    match dtype {
        DTYPE_F32 => {
            let raw = read_exact(r, n * 4)?;
            let data = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            Ok(AnyTensor::Float(FloatTensor::new(shape, data)?))
        }
        DTYPE_I8 => {
            if scale_len == 0 {
                return Err(Error::Parse("int8 tensor dump missing scales".into()));
            }
            let raw = read_exact(r, n)?;
            let data = raw.into_iter().map(|b| b as i8).collect();
            let scale = ScaleVector::new(scales)?;
            Ok(AnyTensor::Quant(QuantTensor::new(shape, data, scale)?))
        }
        DTYPE_I32 => {
            let raw = read_exact(r, n * 4)?;
            let data = raw
                .chunks_exact(4)
                .map(|c| i32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            Ok(AnyTensor::Acc(AccTensor::new(shape, data)?))
        }
        other => Err(Error::Parse(format!("unknown dtype tag {other}"))),
    }
}

pub fn tensor_from_bytes(bytes: &[u8]) -> Result<AnyTensor> {
    let mut cur = std::io::Cursor::new(bytes);
    read_tensor(&mut cur)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn ft(data: Vec<f32>) -> FloatTensor {
        let n = data.len();
        FloatTensor::new(Shape(vec![n]), data).unwrap()
    }

    #[test]
    fn per_tensor_scale_from_max_magnitude() {
        let t = ft(vec![0.1, -2.54, 1.0]);
        let s = compute_scales(&t, ScaleMode::PerTensor).unwrap();
        assert!((s.at(0) - 0.02).abs() < 1e-9);
    }

    #[test]
    fn all_zero_weights_get_sentinel_scale() {
        let t = ft(vec![0.0; 4]);
        let s = compute_scales(&t, ScaleMode::PerTensor).unwrap();
        assert_eq!(s.at(0), 1.0);
        let t2 = FloatTensor::new(Shape(vec![2, 2]), vec![0.0, 1.27, 0.0, -1.27]).unwrap();
        let s2 = compute_scales(&t2, ScaleMode::PerChannel).unwrap();
        assert_eq!(s2.at(0), 1.0);
        assert!((s2.at(1) - 0.01).abs() < 1e-9);
    }

    #[test]
    fn per_channel_scales_follow_channel_maxima() {
        let t = FloatTensor::new(Shape(vec![2, 2]), vec![1.27, 12.7, -1.0, 3.0]).unwrap();
        let s = compute_scales(&t, ScaleMode::PerChannel).unwrap();
        assert!((s.at(0) - 0.01).abs() < 1e-9);
        assert!((s.at(1) - 0.1).abs() < 1e-9);
    }

    #[test]
    fn quantize_maps_zero_to_zero_and_saturates() {
        let s = ScaleVector::splat(0.01).unwrap();
        let q = quantize(&ft(vec![0.0, 1.27, 10.0, -10.0]), &s).unwrap();
        assert_eq!(q.data, vec![0, 127, 127, -128]);
    }

    #[test]
    fn dequantize_examples() {
        let s = ScaleVector::splat(0.02).unwrap();
        let q = QuantTensor::new(Shape(vec![2]), vec![0, 127], s).unwrap();
        let x = dequantize(&q);
        assert_eq!(x.data, vec![0.0, 2.54]);
    }

    #[test]
    fn requantize_cast_examples() {
        let acc = AccTensor::new(Shape(vec![3]), vec![0, 1000, 1_000_000]).unwrap();
        let s = ScaleVector::splat(0.05).unwrap();
        let out = requantize_cast(&acc, &s, ScaleVector::splat(1.0).unwrap()).unwrap();
        assert_eq!(out.data, vec![0, 50, 127]);
    }

    #[test]
    fn requantize_rejects_nonpositive_scale() {
        assert!(ScaleVector::splat(0.0).is_err());
        assert!(ScaleVector::splat(-0.5).is_err());
        assert!(ScaleVector::new(vec![0.1, f32::NAN]).is_err());
    }

    #[test]
    fn float_tensor_rejects_non_finite() {
        assert!(FloatTensor::new(Shape(vec![1]), vec![f32::INFINITY]).is_err());
    }

    #[test]
    fn round_half_even_ties() {
        assert_eq!(round_half_even(0.5), 0.0);
        assert_eq!(round_half_even(1.5), 2.0);
        assert_eq!(round_half_even(2.5), 2.0);
        assert_eq!(round_half_even(-2.5), -2.0);
        assert_eq!(round_half_even(-1.5), -2.0);
    }

    #[test]
    fn dump_round_trip_quant() {
        let s = ScaleVector::new(vec![0.5, 0.25]).unwrap();
        let q = QuantTensor::new(Shape(vec![2, 2]), vec![1, -2, 3, -4], s).unwrap();
        let bytes = tensor_to_bytes(&AnyTensor::Quant(q.clone()));
        match tensor_from_bytes(&bytes).unwrap() {
            AnyTensor::Quant(back) => assert_eq!(back, q),
            other => panic!("wrong dtype: {other:?}"),
        }
    }

    #[test]
    fn dump_rejects_int8_without_scales() {
        // rank 1, dim 1, dtype i8, scale_len 0, one payload byte
        let bytes = [
            1u32.to_le_bytes().to_vec(),
            1u32.to_le_bytes().to_vec(),
            vec![1u8],
            0u32.to_le_bytes().to_vec(),
            vec![5u8],
        ]
        .concat();
        let err = tensor_from_bytes(&bytes).unwrap_err();
        assert!(err.to_string().contains("missing scales"));
    }

    proptest! {
        #[test]
        fn quant_round_trip_is_idempotent(data in proptest::collection::vec(-3.0f32..3.0, 1..64),
                                          scale in 0.005f32..0.2) {
            let t = ft(data);
            let s = ScaleVector::splat(scale).unwrap();
            let q1 = quantize(&t, &s).unwrap();
            let q2 = quantize(&dequantize(&q1), &s).unwrap();
            prop_assert_eq!(q1.data, q2.data);
        }

        #[test]
        fn quantization_error_bounded(data in proptest::collection::vec(-1.0f32..1.0, 1..64),
                                      scale in 0.01f32..0.1) {
            let t = ft(data.clone());
            let s = ScaleVector::splat(scale).unwrap();
            let back = dequantize(&quantize(&t, &s).unwrap());
            for (x, y) in data.iter().zip(&back.data) {
                if x.abs() <= 127.0 * scale {
                    prop_assert!((x - y).abs() <= scale / 2.0 + 1e-6);
                }
            }
        }

        #[test]
        fn quantize_is_odd_symmetric(data in proptest::collection::vec(-1.0f32..1.0, 1..64),
                                     scale in 0.01f32..0.1) {
            let s = ScaleVector::splat(scale).unwrap();
            let pos = quantize(&ft(data.clone()), &s).unwrap();
            let neg = quantize(&ft(data.iter().map(|v| -v).collect()), &s).unwrap();
            for (a, b) in pos.data.iter().zip(&neg.data) {
                if *a != -128 && *b != -128 {
                    prop_assert_eq!(*a, -*b);
                }
            }
        }
    }
}
