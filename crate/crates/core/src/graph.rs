//! Layered model of the ResNet34 pose-regression backbone with named cut points.

use std::fmt;
use std::fmt::Write as _;

use crate::error::{Error, Result};

/// Cut names in network order. Index 0 (`null`) means nothing runs on the client.
pub const CUT_NAMES: [&str; 11] =
    ["null", "conv1", "bn1", "relu", "maxpool", "layer1", "layer2", "layer3", "layer4", "avgpool", "fc"];

pub const SUPPORTED_RESOLUTIONS: [usize; 3] = [56, 112, 224];
pub const DEFAULT_RESOLUTION: usize = 224;
pub const DEFAULT_FEATURE_DIM: usize = 2048;
pub const BYTES_PER_ELEMENT: u64 = 4;

/// Index into [`CUT_NAMES`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Cut(u8);

impl Cut {
    pub const NULL: Cut = Cut(0);
    pub const COUNT: usize = CUT_NAMES.len();

    pub fn from_index(index: u8) -> Result<Self> {
        if (index as usize) < Self::COUNT {
            Ok(Cut(index))
        } else {
            Err(Error::InvalidArgument(format!("cut index {index} out of range (0..{})", Self::COUNT)))
        }
    }

    pub fn from_name(name: &str) -> Result<Self> {
        CUT_NAMES
            .iter()
            .position(|n| *n == name)
            .map(|i| Cut(i as u8))
            .ok_or_else(|| Error::InvalidArgument(format!("unknown cut {name:?}; expected one of {CUT_NAMES:?}")))
    }

    pub fn index(self) -> u8 {
        self.0
    }

    pub fn name(self) -> &'static str {
        CUT_NAMES[self.0 as usize]
    }

    pub fn all() -> impl Iterator<Item = Cut> {
        (0..Self::COUNT as u8).map(Cut)
    }
}

impl fmt::Display for Cut {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Where an execution range stops.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stop {
    Cut(Cut),
    /// Through both regression heads.
    End,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LayerKind {
    Conv {
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
    },
    BatchNorm {
        channels: usize,
    },
    Relu,
    MaxPool {
        kernel: usize,
        stride: usize,
        padding: usize,
    },
    /// Basic ResNet block: conv3x3-bn-relu-conv3x3-bn, plus identity or
    /// 1x1-conv-bn shortcut, then add and relu.
    ResidualBlock {
        in_ch: usize,
        out_ch: usize,
        stride: usize,
        downsample: bool,
    },
    AvgPoolGlobal,
    FullyConnected {
        in_features: usize,
        out_features: usize,
    },
}

impl LayerKind {
    pub fn label(&self) -> &'static str {
        match self {
            LayerKind::Conv { .. } => "conv",
            LayerKind::BatchNorm { .. } => "batchnorm",
            LayerKind::Relu => "relu",
            LayerKind::MaxPool { .. } => "maxpool",
            LayerKind::ResidualBlock { .. } => "residual_block",
            LayerKind::AvgPoolGlobal => "avgpool_global",
            LayerKind::FullyConnected { .. } => "fully_connected",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerDescriptor {
    pub name: String,
    pub kind: LayerKind,
    pub in_shape: Vec<usize>,
    pub out_shape: Vec<usize>,
    pub flops: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerGraph {
    pub resolution: usize,
    pub feature_dim: usize,
    pub input_shape: Vec<usize>,
    pub layers: Vec<LayerDescriptor>,
    /// Layer index each cut maps to: layers `[0, idx)` run before the cut.
    cut_layer: [usize; Cut::COUNT],
    /// Index of the first regression head; both heads consume the same feature.
    head_start: usize,
}

pub fn conv_out(size: usize, kernel: usize, stride: usize, padding: usize) -> usize {
    (size + 2 * padding - kernel) / stride + 1
}

pub fn elements(shape: &[usize]) -> usize {
    shape.iter().product()
}

fn conv_flops(in_ch: usize, out_ch: usize, kernel: usize, ho: usize, wo: usize) -> u64 {
    2 * (out_ch * in_ch * kernel * kernel * ho * wo) as u64
}

struct Builder {
    layers: Vec<LayerDescriptor>,
    shape: Vec<usize>,
}

impl Builder {
    fn push(&mut self, name: impl Into<String>, kind: LayerKind) {
        let in_shape = self.shape.clone();
        let (out_shape, flops) = infer(&kind, &in_shape);
        self.shape = out_shape.clone();
        self.layers.push(LayerDescriptor { name: name.into(), kind, in_shape, out_shape, flops });
    }
}

/// Output shape and FLOPs of one layer. Conventions: conv `2·Cout·Cin·K²·Hout·Wout`,
/// fc `2·in·out`, batchnorm `2·elements`, relu `1·element`, maxpool `K²·elements_out`,
/// residual add `1·element`, global average pool `1·input element`.
fn infer(kind: &LayerKind, input: &[usize]) -> (Vec<usize>, u64) {
    match *kind {
        LayerKind::Conv { out_ch, in_ch, kernel, stride, padding } => {
            let (ho, wo) = (conv_out(input[1], kernel, stride, padding), conv_out(input[2], kernel, stride, padding));
            (vec![out_ch, ho, wo], conv_flops(in_ch, out_ch, kernel, ho, wo))
        }
        LayerKind::BatchNorm { .. } => (input.to_vec(), 2 * elements(input) as u64),
        LayerKind::Relu => (input.to_vec(), elements(input) as u64),
        LayerKind::MaxPool { kernel, stride, padding } => {
            let out = vec![
                input[0],
                conv_out(input[1], kernel, stride, padding),
                conv_out(input[2], kernel, stride, padding),
            ];
            let flops = (kernel * kernel * elements(&out)) as u64;
            (out, flops)
        }
        LayerKind::ResidualBlock { in_ch, out_ch, stride, downsample } => {
            let (ho, wo) = (conv_out(input[1], 3, stride, 1), conv_out(input[2], 3, stride, 1));
            let e = (out_ch * ho * wo) as u64;
            // conv_a + bn_a + relu_a + conv_b + bn_b + add + relu_out
            let mut flops =
                conv_flops(in_ch, out_ch, 3, ho, wo) + 2 * e + e + conv_flops(out_ch, out_ch, 3, ho, wo) + 2 * e;
            if downsample {
                flops += conv_flops(in_ch, out_ch, 1, ho, wo) + 2 * e;
            }
            flops += e + e;
            (vec![out_ch, ho, wo], flops)
        }
        LayerKind::AvgPoolGlobal => (vec![input[0]], elements(input) as u64),
        LayerKind::FullyConnected { in_features, out_features } => {
            (vec![out_features], 2 * (in_features * out_features) as u64)
        }
    }
}

/// Builds the ResNet34 backbone plus the pose-regression head
/// (`fc_feat` 512→feature_dim, relu, parallel `fc_xyz` and `fc_logq`).
pub fn build_backbone(resolution: usize, feature_dim: usize) -> Result<LayerGraph> {
    if !SUPPORTED_RESOLUTIONS.contains(&resolution) {
        return Err(Error::InvalidArgument(format!(
            "unsupported input resolution {resolution}; expected one of {SUPPORTED_RESOLUTIONS:?}"
        )));
    }
    if feature_dim < 8 {
        return Err(Error::InvalidArgument(format!("feature_dim {feature_dim} must be at least 8")));
    }
    let input_shape = vec![3, resolution, resolution];
    let mut b = Builder { layers: Vec::new(), shape: input_shape.clone() };
    let mut cut_layer = [0usize; Cut::COUNT];

    b.push("conv1", LayerKind::Conv { in_ch: 3, out_ch: 64, kernel: 7, stride: 2, padding: 3 });
    cut_layer[1] = b.layers.len();
    b.push("bn1", LayerKind::BatchNorm { channels: 64 });
    cut_layer[2] = b.layers.len();
    b.push("relu", LayerKind::Relu);
    cut_layer[3] = b.layers.len();
    b.push("maxpool", LayerKind::MaxPool { kernel: 3, stride: 2, padding: 1 });
    cut_layer[4] = b.layers.len();

    let stages = [("layer1", 3, 64, 1), ("layer2", 4, 128, 2), ("layer3", 6, 256, 2), ("layer4", 3, 512, 2)];
    let mut in_ch = 64;
    for (stage_idx, (stage, blocks, out_ch, stride)) in stages.into_iter().enumerate() {
        for blk in 0..blocks {
            let s = if blk == 0 { stride } else { 1 };
            let downsample = s != 1 || in_ch != out_ch;
            b.push(format!("{stage}.{blk}"), LayerKind::ResidualBlock { in_ch, out_ch, stride: s, downsample });
            in_ch = out_ch;
        }
        cut_layer[5 + stage_idx] = b.layers.len();
    }

    b.push("avgpool", LayerKind::AvgPoolGlobal);
    cut_layer[9] = b.layers.len();
    b.push("fc_feat", LayerKind::FullyConnected { in_features: 512, out_features: feature_dim });
    cut_layer[10] = b.layers.len();
    b.push("relu_feat", LayerKind::Relu);
    let head_start = b.layers.len();
    b.push("fc_xyz", LayerKind::FullyConnected { in_features: feature_dim, out_features: 3 });
    // The second head reads the shared feature, not fc_xyz's output.
    b.shape = vec![feature_dim];
    b.push("fc_logq", LayerKind::FullyConnected { in_features: feature_dim, out_features: 3 });

    Ok(LayerGraph { resolution, feature_dim, input_shape, layers: b.layers, cut_layer, head_start })
}

impl LayerGraph {
    pub fn cut_layer_index(&self, cut: Cut) -> usize {
        self.cut_layer[cut.0 as usize]
    }

    pub fn stop_layer_index(&self, stop: Stop) -> usize {
        match stop {
            Stop::Cut(c) => self.cut_layer_index(c),
            Stop::End => self.layers.len(),
        }
    }

    pub fn head_start(&self) -> usize {
        self.head_start
    }

    /// Cut names paired with their layer indices, in order.
    pub fn cut_points(&self) -> Vec<(&'static str, usize)> {
        Cut::all().map(|c| (c.name(), self.cut_layer_index(c))).collect()
    }

    /// Activation shape crossing the given cut.
    pub fn cut_shape(&self, cut: Cut) -> &[usize] {
        match self.cut_layer_index(cut) {
            0 => &self.input_shape,
            i => &self.layers[i - 1].out_shape,
        }
    }

    pub fn total_flops(&self) -> u64 {
        self.layers.iter().map(|l| l.flops).sum()
    }

    pub fn prefix_flops(&self, cut: Cut) -> u64 {
        self.layers[..self.cut_layer_index(cut)].iter().map(|l| l.flops).sum()
    }

    pub fn suffix_flops(&self, cut: Cut) -> u64 {
        self.total_flops() - self.prefix_flops(cut)
    }

    pub fn prefix_gflops(&self, cut: Cut) -> f64 {
        self.prefix_flops(cut) as f64 / 1e9
    }

    pub fn suffix_gflops(&self, cut: Cut) -> f64 {
        self.suffix_flops(cut) as f64 / 1e9
    }

    pub fn describe_csv(&self) -> String {
        let mut out = String::from("cut,layer_index,out_shape,payload_bytes,prefix_flops,suffix_flops\n");
        for cut in Cut::all() {
            let shape = self.cut_shape(cut).iter().map(|d| d.to_string()).collect::<Vec<_>>().join("x");
            let _ = writeln!(
                out,
                "{},{},{},{},{},{}",
                cut,
                self.cut_layer_index(cut),
                shape,
                cut_payload_bytes(self, cut),
                self.prefix_flops(cut),
                self.suffix_flops(cut)
            );
        }
        out
    }
}

/// Bytes of the f32 activation tensor crossing `cut`.
pub fn cut_payload_bytes(graph: &LayerGraph, cut: Cut) -> u64 {
    elements(graph.cut_shape(cut)) as u64 * BYTES_PER_ELEMENT
}

/// Per-layer FLOPs and their running totals.
#[derive(Debug, Clone, PartialEq)]
pub struct FlopCount {
    pub per_layer: Vec<u64>,
    pub cumulative: Vec<u64>,
    /// Prefix FLOPs at each cut, in [`CUT_NAMES`] order.
    pub per_cut_prefix: Vec<u64>,
    pub total: u64,
}

pub fn count_flops(graph: &LayerGraph) -> FlopCount {
    let per_layer: Vec<u64> = graph.layers.iter().map(|l| l.flops).collect();
    let cumulative: Vec<u64> = per_layer
        .iter()
        .scan(0u64, |acc, f| {
            *acc += f;
            Some(*acc)
        })
        .collect();
    let per_cut_prefix = Cut::all().map(|c| graph.prefix_flops(c)).collect();
    FlopCount { total: graph.total_flops(), per_layer, cumulative, per_cut_prefix }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cut_names_in_table_order() {
        let g = build_backbone(224, 2048).unwrap();
        let names: Vec<_> = g.cut_points().iter().map(|(n, _)| *n).collect();
        assert_eq!(
            names,
            ["null", "conv1", "bn1", "relu", "maxpool", "layer1", "layer2", "layer3", "layer4", "avgpool", "fc"]
        );
        let idx: Vec<_> = g.cut_points().iter().map(|(_, i)| *i).collect();
        assert!(idx.windows(2).all(|w| w[0] < w[1]));
        assert_eq!(idx[0], 0);
        assert_eq!(g.layers[idx[10] - 1].name, "fc_feat");
    }

    #[test]
    fn shapes_at_224() {
        let g = build_backbone(224, 2048).unwrap();
        let shape = |name: &str| g.cut_shape(Cut::from_name(name).unwrap()).to_vec();
        assert_eq!(shape("conv1"), [64, 112, 112]);
        assert_eq!(shape("maxpool"), [64, 56, 56]);
        assert_eq!(shape("layer4"), [512, 7, 7]);
        assert_eq!(shape("avgpool"), [512]);
        assert_eq!(shape("fc"), [2048]);
    }

    #[test]
    fn shapes_at_56() {
        let g = build_backbone(56, 64).unwrap();
        assert_eq!(g.cut_shape(Cut::from_name("conv1").unwrap()), [64, 28, 28]);
    }

    #[test]
    fn bad_config_rejected() {
        assert!(matches!(build_backbone(100, 2048), Err(Error::InvalidArgument(_))));
        assert!(matches!(build_backbone(224, 4), Err(Error::InvalidArgument(_))));
    }

    #[test]
    fn payload_examples() {
        let g = build_backbone(224, 2048).unwrap();
        let bytes = |n: &str| cut_payload_bytes(&g, Cut::from_name(n).unwrap());
        assert_eq!(bytes("null"), 602_112);
        assert_eq!(bytes("conv1"), 3_211_264);
        assert_eq!(bytes("avgpool"), 2048);
        assert_eq!(bytes("conv1") * 3, bytes("null") * 16);
        assert_eq!(bytes("bn1"), bytes("conv1"));
        assert_eq!(bytes("relu"), bytes("conv1"));
        assert_eq!(bytes("maxpool"), 802_816);
        assert!(bytes("conv1") > bytes("maxpool") && bytes("maxpool") > bytes("null"));
    }

    #[test]
    fn flop_examples() {
        let g = build_backbone(224, 2048).unwrap();
        assert_eq!(g.layers[0].flops, 236_027_904);
        let xyz = g.layers.iter().find(|l| l.name == "fc_xyz").unwrap();
        assert_eq!(xyz.flops, 12_288);
        let f = count_flops(&g);
        assert_eq!(f.per_cut_prefix[0], 0);
        assert!(f.per_cut_prefix.windows(2).all(|w| w[0] < w[1]));
        assert_eq!(*f.cumulative.last().unwrap(), f.total);
        assert!((f.total as f64 / 7.3e9 - 1.0).abs() < 0.05);
    }

    #[test]
    fn cut_lookup() {
        assert_eq!(Cut::from_name("layer3").unwrap().index(), 7);
        assert!(Cut::from_name("layer5").is_err());
        assert!(Cut::from_index(11).is_err());
        assert_eq!(Cut::from_index(10).unwrap().name(), "fc");
    }

    #[test]
    fn describe_has_one_row_per_cut() {
        let g = build_backbone(56, 64).unwrap();
        let csv = g.describe_csv();
        assert_eq!(csv.lines().count(), 12);
        assert!(csv.lines().nth(1).unwrap().starts_with("null,0,3x56x56,37632,0,"));
    }
}
