//! Reference executor over [`LayerGraph`] with a fixed f32 evaluation order.
//!
//! Every output element is accumulated from `0.0` by plain `acc = acc + w * x`
//! steps (never fused, never reordered):
//!
//! * conv: over input channel, then kernel row, then kernel column; taps that
//!   fall in the zero padding are skipped
//! * fully connected: over input features, then `+ bias`
//! * batchnorm: `x * (1 + gain) + shift`
//! * global average pool: channel sum in row-major order, then `/ (H·W)`
//! * maxpool: max over taps in row-major order, padding skipped
//! * residual: `relu(bn_b(conv_b(relu(bn_a(conv_a(x))))) + shortcut)`
//!
//! Since each element's value depends only on its inputs and this order, any
//! split `[null, k) + [k, end)` reproduces full execution bit for bit, in any
//! process and under either [`Parallelism`] mode.

use crate::error::{Error, Result};
use crate::frame::Frame;
use crate::graph::{conv_out, elements, Cut, LayerGraph, LayerKind, Stop};
use crate::par::{self, Parallelism};
use crate::pose::{quat_exp, LogQuat, Pose};
use crate::weights::WeightSet;

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        if elements(&shape) != data.len() {
            return Err(Error::Shape { expected: shape, actual: vec![data.len()] });
        }
        Ok(Self { shape, data })
    }

    pub fn to_le_bytes(&self) -> Vec<u8> {
        self.data.iter().flat_map(|v| v.to_le_bytes()).collect()
    }

    pub fn crc32(&self) -> u32 {
        crc32fast::hash(&self.to_le_bytes())
    }
}

/// Raw outputs of the two regression heads.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HeadOutput {
    pub xyz: [f32; 3],
    pub logq: [f32; 3],
}

impl HeadOutput {
    pub fn to_array(&self) -> [f32; 6] {
        [self.xyz[0], self.xyz[1], self.xyz[2], self.logq[0], self.logq[1], self.logq[2]]
    }

    pub fn from_array(v: [f32; 6]) -> Self {
        Self { xyz: [v[0], v[1], v[2]], logq: [v[3], v[4], v[5]] }
    }

    pub fn to_bytes(&self) -> [u8; 24] {
        let mut out = [0u8; 24];
        for (chunk, v) in out.chunks_exact_mut(4).zip(self.to_array()) {
            chunk.copy_from_slice(&v.to_le_bytes());
        }
        out
    }

    /// `t` from the xyz head, `q = exp(logq)`.
    pub fn to_pose(&self) -> Result<Pose> {
        let q = quat_exp(&LogQuat(self.logq.map(f64::from)))?;
        Ok(Pose::new(self.xyz.map(f64::from), q))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum ExecOutput {
    Activation(Tensor),
    Head(HeadOutput),
}

/// Center crop to `res×res`, planar RGB, `pixel / 255 − 0.5`.
pub fn preprocess(frame: &Frame, res: usize) -> Result<Tensor> {
    if frame.height < res || frame.width < res {
        return Err(Error::InvalidArgument(format!(
            "frame {}x{} smaller than input resolution {res}",
            frame.height, frame.width
        )));
    }
    let (oy, ox) = ((frame.height - res) / 2, (frame.width - res) / 2);
    let mut data = vec![0f32; 3 * res * res];
    for c in 0..3 {
        for y in 0..res {
            let row = ((oy + y) * frame.width + ox) * 3;
            for x in 0..res {
                data[(c * res + y) * res + x] = frame.data[row + x * 3 + c] as f32 / 255.0 - 0.5;
            }
        }
    }
    Tensor::new(vec![3, res, res], data)
}

pub fn execute(graph: &LayerGraph, weights: &WeightSet, input: &Tensor, from: Cut, to: Stop) -> Result<ExecOutput> {
    execute_with(Parallelism::available(), graph, weights, input, from, to)
}

pub fn execute_with(
    mode: Parallelism,
    graph: &LayerGraph,
    weights: &WeightSet,
    input: &Tensor,
    from: Cut,
    to: Stop,
) -> Result<ExecOutput> {
    let start = graph.cut_layer_index(from);
    let stop = graph.stop_layer_index(to);
    if stop < start {
        return Err(Error::InvalidArgument(format!("range {from} -> {to:?} runs backwards")));
    }
    let expected = graph.cut_shape(from);
    if input.shape != expected {
        return Err(Error::Shape { expected: expected.to_vec(), actual: input.shape.clone() });
    }
    if !input.data.iter().all(|v| v.is_finite()) {
        return Err(Error::Numeric { layer: "input".into() });
    }
    let body_end = stop.min(graph.head_start());
    let mut act = input.clone();
    for idx in start..body_end {
        let layer = &graph.layers[idx];
        act = run_layer(mode, &layer.kind, &weights.params[idx], &act);
        debug_assert_eq!(act.shape, layer.out_shape);
        check_finite(&act.data, &layer.name)?;
    }
    if to != Stop::End {
        return Ok(ExecOutput::Activation(act));
    }
    let heads = graph.head_start();
    let mut out = [[0f32; 3]; 2];
    for (k, slot) in out.iter_mut().enumerate() {
        let (kind, params) = (&graph.layers[heads + k].kind, &weights.params[heads + k]);
        let t = run_layer(mode, kind, params, &act);
        check_finite(&t.data, &graph.layers[heads + k].name)?;
        slot.copy_from_slice(&t.data);
    }
    Ok(ExecOutput::Head(HeadOutput { xyz: out[0], logq: out[1] }))
}

/// Runs layers before `cut`.
pub fn run_prefix(graph: &LayerGraph, weights: &WeightSet, input: &Tensor, cut: Cut) -> Result<Tensor> {
    match execute(graph, weights, input, Cut::NULL, Stop::Cut(cut))? {
        ExecOutput::Activation(t) => Ok(t),
        ExecOutput::Head(_) => unreachable!("prefix never reaches the heads"),
    }
}

/// Runs layers from `cut` through the heads.
pub fn run_suffix(graph: &LayerGraph, weights: &WeightSet, activation: &Tensor, cut: Cut) -> Result<HeadOutput> {
    match execute(graph, weights, activation, cut, Stop::End)? {
        ExecOutput::Head(h) => Ok(h),
        ExecOutput::Activation(_) => unreachable!("End always yields head output"),
    }
}

pub fn run_full(graph: &LayerGraph, weights: &WeightSet, input: &Tensor) -> Result<HeadOutput> {
    run_suffix(graph, weights, input, Cut::NULL)
}

fn check_finite(data: &[f32], layer: &str) -> Result<()> {
    if data.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::Numeric { layer: layer.to_string() })
    }
}

fn run_layer(mode: Parallelism, kind: &LayerKind, params: &[Vec<f32>], x: &Tensor) -> Tensor {
    match *kind {
        LayerKind::Conv { in_ch, out_ch, kernel, stride, padding } => {
            conv2d(mode, x, &params[0], in_ch, out_ch, kernel, stride, padding)
        }
        LayerKind::BatchNorm { .. } => batchnorm(x, &params[0], &params[1]),
        LayerKind::Relu => relu(x.clone()),
        LayerKind::MaxPool { kernel, stride, padding } => maxpool(x, kernel, stride, padding),
        LayerKind::ResidualBlock { in_ch, out_ch, stride, downsample } => {
            let a = relu(batchnorm(&conv2d(mode, x, &params[0], in_ch, out_ch, 3, stride, 1), &params[1], &params[2]));
            let b = batchnorm(&conv2d(mode, &a, &params[3], out_ch, out_ch, 3, 1, 1), &params[4], &params[5]);
            let shortcut = if downsample {
                batchnorm(&conv2d(mode, x, &params[6], in_ch, out_ch, 1, stride, 0), &params[7], &params[8])
            } else {
                x.clone()
            };
            let sum = b.data.iter().zip(&shortcut.data).map(|(p, q)| p + q).collect();
            relu(Tensor { shape: b.shape, data: sum })
        }
        LayerKind::AvgPoolGlobal => {
            let (c, plane) = (x.shape[0], x.shape[1] * x.shape[2]);
            let data = (0..c)
                .map(|ch| {
                    let mut acc = 0f32;
                    for v in &x.data[ch * plane..(ch + 1) * plane] {
                        acc += v;
                    }
                    acc / plane as f32
                })
                .collect();
            Tensor { shape: vec![c], data }
        }
        LayerKind::FullyConnected { in_features, out_features } => {
            let (w, bias) = (&params[0], &params[1]);
            let data = par::map_indexed(mode, out_features, |o| {
                let row = &w[o * in_features..(o + 1) * in_features];
                let mut acc = 0f32;
                for (wi, xi) in row.iter().zip(&x.data) {
                    acc += wi * xi;
                }
                acc + bias[o]
            });
            Tensor { shape: vec![out_features], data }
        }
    }
}

/// Output rows `o` whose tap `k` lands inside `[0, size)`: `o*stride + k - pad`.
fn valid_range(size: usize, out: usize, k: usize, stride: usize, pad: usize) -> (usize, usize) {
    let lo = if pad > k { (pad - k).div_ceil(stride) } else { 0 };
    let hi = if size + pad > k { ((size + pad - k - 1) / stride + 1).min(out) } else { 0 };
    (lo, hi.max(lo))
}

/// Unfolds `x` into rows indexed by `(ci, kh, kw)` and columns by output
/// pixel. Padding positions hold 0.0.
fn im2col(x: &Tensor, k: usize, stride: usize, pad: usize, ho: usize, wo: usize) -> Vec<f32> {
    let (c, h, wd) = (x.shape[0], x.shape[1], x.shape[2]);
    let p = ho * wo;
    let mut col = vec![0f32; c * k * k * p];
    for ci in 0..c {
        let src = &x.data[ci * h * wd..(ci + 1) * h * wd];
        for kh in 0..k {
            let (oh_lo, oh_hi) = valid_range(h, ho, kh, stride, pad);
            for kw in 0..k {
                let (ow_lo, ow_hi) = valid_range(wd, wo, kw, stride, pad);
                let row = &mut col[((ci * k + kh) * k + kw) * p..][..p];
                for oh in oh_lo..oh_hi {
                    let ih = oh * stride + kh - pad;
                    let dst = &mut row[oh * wo..(oh + 1) * wo];
                    for ow in ow_lo..ow_hi {
                        dst[ow] = src[ih * wd + ow * stride + kw - pad];
                    }
                }
            }
        }
    }
    col
}

const CO_TILE: usize = 4;
const PX_TILE: usize = 8;

/// Convolution as `out[co][p] = Σ_r w[co][r] · col[r][p]`, accumulated from
/// 0.0 in `r = (ci, kh, kw)` order for every element. Padded taps contribute
/// `acc + w·0.0`, which leaves `acc` bit-identical: the accumulator starts at
/// +0.0 and a round-to-nearest sum is never -0.0 unless both operands are.
#[allow(clippy::too_many_arguments)]
fn conv2d(
    mode: Parallelism,
    x: &Tensor,
    w: &[f32],
    in_ch: usize,
    out_ch: usize,
    k: usize,
    stride: usize,
    pad: usize,
) -> Tensor {
    let (h, wd) = (x.shape[1], x.shape[2]);
    let (ho, wo) = (conv_out(h, k, stride, pad), conv_out(wd, k, stride, pad));
    let (rows, px) = (in_ch * k * k, ho * wo);
    let unfolded;
    let col: &[f32] = if k == 1 && stride == 1 && pad == 0 {
        &x.data
    } else {
        unfolded = im2col(x, k, stride, pad, ho, wo);
        &unfolded
    };
    let mut out = vec![0f32; out_ch * px];
    par::for_each_chunk_mut(mode, &mut out, CO_TILE * px, |block, dst| {
        let co0 = block * CO_TILE;
        let nco = dst.len() / px;
        let wrow = |i: usize| &w[(co0 + i) * rows..(co0 + i + 1) * rows];
        let mut p0 = 0;
        if nco == CO_TILE {
            let wt: [&[f32]; CO_TILE] = std::array::from_fn(wrow);
            while p0 + PX_TILE <= px {
                let mut acc = [[0f32; PX_TILE]; CO_TILE];
                for r in 0..rows {
                    let c: &[f32; PX_TILE] = col[r * px + p0..r * px + p0 + PX_TILE].try_into().unwrap();
                    for i in 0..CO_TILE {
                        let wv = wt[i][r];
                        for j in 0..PX_TILE {
                            acc[i][j] += wv * c[j];
                        }
                    }
                }
                for (i, a) in acc.iter().enumerate() {
                    dst[i * px + p0..i * px + p0 + PX_TILE].copy_from_slice(a);
                }
                p0 += PX_TILE;
            }
        }
        for i in 0..nco {
            let wr = wrow(i);
            for p in p0..px {
                let mut acc = 0f32;
                for (r, wv) in wr.iter().enumerate() {
                    acc += wv * col[r * px + p];
                }
                dst[i * px + p] = acc;
            }
        }
    });
    Tensor { shape: vec![out_ch, ho, wo], data: out }
}

fn batchnorm(x: &Tensor, gain: &[f32], shift: &[f32]) -> Tensor {
    let plane: usize = x.shape[1..].iter().product();
    let mut data = x.data.clone();
    for (c, chunk) in data.chunks_mut(plane).enumerate() {
        let scale = 1.0f32 + gain[c];
        for v in chunk {
            *v = *v * scale + shift[c];
        }
    }
    Tensor { shape: x.shape.clone(), data }
}

fn relu(mut x: Tensor) -> Tensor {
    for v in &mut x.data {
        *v = if *v > 0.0 { *v } else { 0.0 };
    }
    x
}

fn maxpool(x: &Tensor, k: usize, stride: usize, pad: usize) -> Tensor {
    let (c, h, w) = (x.shape[0], x.shape[1], x.shape[2]);
    let (ho, wo) = (conv_out(h, k, stride, pad), conv_out(w, k, stride, pad));
    let mut out = vec![f32::NEG_INFINITY; c * ho * wo];
    for ch in 0..c {
        for oh in 0..ho {
            for ow in 0..wo {
                let mut m = f32::NEG_INFINITY;
                for kh in 0..k {
                    let ih = (oh * stride + kh) as isize - pad as isize;
                    if ih < 0 || ih >= h as isize {
                        continue;
                    }
                    for kw in 0..k {
                        let iw = (ow * stride + kw) as isize - pad as isize;
                        if iw < 0 || iw >= w as isize {
                            continue;
                        }
                        let v = x.data[(ch * h + ih as usize) * w + iw as usize];
                        if v > m {
                            m = v;
                        }
                    }
                }
                out[(ch * ho + oh) * wo + ow] = m;
            }
        }
    }
    Tensor { shape: vec![c, ho, wo], data: out }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::build_backbone;
    use crate::weights::init_weights;

    /// Direct output-element-major convolution, the order the kernel must match.
    fn conv_oracle(x: &Tensor, w: &[f32], in_ch: usize, out_ch: usize, k: usize, s: usize, p: usize) -> Vec<f32> {
        let (h, wd) = (x.shape[1], x.shape[2]);
        let (ho, wo) = (conv_out(h, k, s, p), conv_out(wd, k, s, p));
        let mut out = Vec::with_capacity(out_ch * ho * wo);
        for co in 0..out_ch {
            for oh in 0..ho {
                for ow in 0..wo {
                    let mut acc = 0f32;
                    for ci in 0..in_ch {
                        for kh in 0..k {
                            for kw in 0..k {
                                let ih = (oh * s + kh) as isize - p as isize;
                                let iw = (ow * s + kw) as isize - p as isize;
                                if ih < 0 || iw < 0 || ih >= h as isize || iw >= wd as isize {
                                    continue;
                                }
                                let xv = x.data[(ci * h + ih as usize) * wd + iw as usize];
                                acc += w[((co * in_ch + ci) * k + kh) * k + kw] * xv;
                            }
                        }
                    }
                    out.push(acc);
                }
            }
        }
        out
    }

    #[test]
    fn conv_matches_element_major_oracle_bitwise() {
        let cases = [
            (9, 3, 1, 1, 4),
            (10, 7, 2, 3, 9),
            (8, 1, 2, 0, 5),
            (7, 3, 2, 1, 4),
            (5, 3, 1, 0, 3),
            (12, 1, 1, 0, 8),
            (13, 3, 1, 1, 7),
        ];
        for &(h, k, s, p, cout) in &cases {
            let cin = 3;
            // Every third input is exactly zero, as after a ReLU.
            let x = Tensor {
                shape: vec![cin, h, h + 1],
                data: crate::weights::fill_param(5, h, k, cin * h * (h + 1))
                    .iter()
                    .enumerate()
                    .map(|(i, v)| if i % 3 == 0 { 0.0 } else { v * 37.0 })
                    .collect(),
            };
            let w = crate::weights::fill_param(6, h, k, cout * cin * k * k);
            let expected = conv_oracle(&x, &w, cin, cout, k, s, p);
            for mode in [Parallelism::Sequential, Parallelism::Parallel] {
                let got = conv2d(mode, &x, &w, cin, cout, k, s, p);
                let bits = |v: &[f32]| v.iter().map(|f| f.to_bits()).collect::<Vec<_>>();
                assert_eq!(bits(&got.data), bits(&expected), "h={h} k={k} s={s} p={p}");
            }
        }
    }

    #[test]
    fn valid_range_brute_force() {
        for size in 1..12 {
            for k in 1..8 {
                for stride in 1..3 {
                    for pad in 0..4 {
                        if size + 2 * pad < k {
                            continue;
                        }
                        let out = conv_out(size, k, stride, pad);
                        for kk in 0..k {
                            let (lo, hi) = valid_range(size, out, kk, stride, pad);
                            let brute: Vec<usize> = (0..out)
                                .filter(|o| {
                                    let i = (o * stride + kk) as isize - pad as isize;
                                    i >= 0 && i < size as isize
                                })
                                .collect();
                            assert_eq!((lo..hi).collect::<Vec<_>>(), brute, "{size} {k} {stride} {pad} {kk}");
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn preprocess_examples() {
        let t = preprocess(&Frame::filled(56, 56, 255), 56).unwrap();
        assert!(t.data.iter().all(|v| *v == 0.5));
        let t = preprocess(&Frame::filled(60, 57, 0), 56).unwrap();
        assert!(t.data.iter().all(|v| *v == -0.5));
        assert_eq!(t.shape, [3, 56, 56]);

        // 225 -> 224 crops at offset (0, 0) by the floor rule
        let mut f = Frame::filled(225, 225, 0);
        f.data[0] = 255; // (0,0) red
        let t = preprocess(&f, 224).unwrap();
        assert_eq!(t.data[0], 0.5);

        assert!(matches!(preprocess(&Frame::filled(55, 80, 0), 56), Err(Error::InvalidArgument(_))));
    }

    #[test]
    fn preprocess_is_channel_planar() {
        let mut f = Frame::filled(58, 58, 0);
        // pixel (1,1) -> crop offset 1 -> tensor (0,0); set its blue channel.
        f.data[(58 + 1) * 3 + 2] = 255;
        let t = preprocess(&f, 56).unwrap();
        assert_eq!(t.data[2 * 56 * 56], 0.5);
        assert_eq!(t.data[0], -0.5);
    }

    #[test]
    fn composition_is_bit_exact_at_56() {
        let g = build_backbone(56, 32).unwrap();
        let w = init_weights(&g, 42);
        let x = preprocess(&Frame::synthetic(7, 0, 56, 56), 56).unwrap();
        let full = run_full(&g, &w, &x).unwrap();
        for cut in Cut::all() {
            let mid = run_prefix(&g, &w, &x, cut).unwrap();
            assert_eq!(mid.shape, g.cut_shape(cut));
            let tail = run_suffix(&g, &w, &mid, cut).unwrap();
            assert_eq!(tail.to_bytes(), full.to_bytes(), "cut {cut}");
        }
        let seq = execute_with(Parallelism::Sequential, &g, &w, &x, Cut::NULL, Stop::End).unwrap();
        assert_eq!(seq, ExecOutput::Head(full));
        assert!(full.to_pose().unwrap().q.is_unit());
    }

    #[test]
    fn shape_mismatch_and_backwards_range() {
        let g = build_backbone(56, 16).unwrap();
        let w = init_weights(&g, 1);
        let x = Tensor::new(vec![3, 50, 50], vec![0.0; 7500]).unwrap();
        assert!(matches!(run_full(&g, &w, &x), Err(Error::Shape { .. })));
        let x = preprocess(&Frame::filled(56, 56, 3), 56).unwrap();
        let relu = Cut::from_name("relu").unwrap();
        let r = execute(&g, &w, &x, relu, Stop::Cut(Cut::NULL));
        assert!(matches!(r, Err(Error::InvalidArgument(_))));
    }

    #[test]
    fn non_finite_activation_names_layer() {
        let g = build_backbone(56, 16).unwrap();
        let mut w = init_weights(&g, 1);
        w.params[1][1][0] = f32::INFINITY; // bn1 shift
        let x = preprocess(&Frame::filled(56, 56, 3), 56).unwrap();
        match run_full(&g, &w, &x) {
            Err(Error::Numeric { layer }) => assert_eq!(layer, "bn1"),
            other => panic!("expected numeric error, got {other:?}"),
        }
    }
}
