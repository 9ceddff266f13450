//! Seeded stand-in parameters for the backbone.
//!
//! Parameter tensor `p` of layer `l` is filled element by element with
//! `unit_f32(stream_u64(stream_key(seed, l, p), i)) * 0.2 - 0.1` (all f32
//! arithmetic), giving values in `[-0.1, 0.1)`. Tensor order per layer kind:
//!
//! * conv: `[weight (Cout, Cin, K, K)]`
//! * batchnorm: `[gain (C), shift (C)]`, applied as `x * (1 + gain) + shift`
//! * residual block: conv_a, bn_a gain, bn_a shift, conv_b, bn_b gain, bn_b shift,
//!   then (downsample only) conv_d, bn_d gain, bn_d shift
//! * fully connected: `[weight (out, in), bias (out)]`
//! * relu / pooling: none

use crate::graph::{LayerGraph, LayerKind};
use crate::rng::{stream_key, stream_u64, unit_f32};

#[derive(Debug, Clone, PartialEq)]
pub struct WeightSet {
    pub seed: u64,
    /// `params[layer][param]`.
    pub params: Vec<Vec<Vec<f32>>>,
}

fn param_sizes(kind: &LayerKind) -> Vec<usize> {
    match *kind {
        LayerKind::Conv { in_ch, out_ch, kernel, .. } => vec![out_ch * in_ch * kernel * kernel],
        LayerKind::BatchNorm { channels } => vec![channels, channels],
        LayerKind::ResidualBlock { in_ch, out_ch, downsample, .. } => {
            let mut v = vec![out_ch * in_ch * 9, out_ch, out_ch, out_ch * out_ch * 9, out_ch, out_ch];
            if downsample {
                v.extend([out_ch * in_ch, out_ch, out_ch]);
            }
            v
        }
        LayerKind::FullyConnected { in_features, out_features } => vec![out_features * in_features, out_features],
        LayerKind::Relu | LayerKind::MaxPool { .. } | LayerKind::AvgPoolGlobal => Vec::new(),
    }
}

pub fn fill_param(seed: u64, layer: usize, param: usize, len: usize) -> Vec<f32> {
    let key = stream_key(seed, layer as u32, param as u32);
    (0..len as u64).map(|i| unit_f32(stream_u64(key, i)) * 0.2 - 0.1).collect()
}

pub fn init_weights(graph: &LayerGraph, seed: u64) -> WeightSet {
    let params = graph
        .layers
        .iter()
        .enumerate()
        .map(|(l, desc)| {
            param_sizes(&desc.kind).into_iter().enumerate().map(|(p, len)| fill_param(seed, l, p, len)).collect()
        })
        .collect();
    WeightSet { seed, params }
}

impl WeightSet {
    /// Little-endian bytes of one layer's parameters, in tensor order.
    pub fn layer_bytes(&self, layer: usize) -> Vec<u8> {
        self.params[layer].iter().flatten().flat_map(|v| v.to_le_bytes()).collect()
    }

    pub fn layer_crc32(&self, layer: usize) -> u32 {
        crc32fast::hash(&self.layer_bytes(layer))
    }
}
