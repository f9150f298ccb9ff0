//! Subgraph builders for the L-Mobilenet bottleneck (both strides) and the
//! MobileNetV2 / ShuffleNetV2 baseline units.
//!
//! A [`BlockFragment`] uses local node ids: node 0 is an `Input` placeholder
//! standing for the block's entry tensor. [`crate::graph::GraphBuilder`]
//! splices fragments into a full graph.

use serde::{Deserialize, Serialize};

use crate::error::{config_err, Result};
use crate::graph::{BlockKind, NodeId, NodeKind, NodeSpec};
use crate::kernels::{ConvParams, LayerOp, PoolParams};

/// Presence of the batch-norm and ReLU that follow one site of a block.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct NormAct {
    pub norm: bool,
    pub relu: bool,
}

impl NormAct {
    pub const BOTH: NormAct = NormAct {
        norm: true,
        relu: true,
    };
    pub const NORM: NormAct = NormAct {
        norm: true,
        relu: false,
    };
    pub const NONE: NormAct = NormAct {
        norm: false,
        relu: false,
    };
}

/// Norm/activation placement for each site of an L-Mobilenet block.
///
/// The default assignment (ReLU everywhere except the stride-1 projection,
/// a standalone norm on the pooling branch, norm+ReLU after the stride-2
/// concat) yields 4 norms and 3 ReLUs per block of either stride.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(default)]
pub struct LmbNormAct {
    /// Branch A 1x1 of the stride-1 block (feature reuse).
    pub reuse: NormAct,
    /// Branch B 1x1 feeding the depthwise conv.
    pub expand: NormAct,
    pub depthwise: NormAct,
    /// Stride-1 projection back to the input width.
    pub project: NormAct,
    /// Pooling branch of the stride-2 block.
    pub pool_branch: NormAct,
    /// After the stride-2 concat.
    pub output: NormAct,
}

impl Default for LmbNormAct {
    fn default() -> Self {
        LmbNormAct {
            reuse: NormAct::BOTH,
            expand: NormAct::BOTH,
            depthwise: NormAct::BOTH,
            project: NormAct::NORM,
            pool_branch: NormAct::NORM,
            output: NormAct::BOTH,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PoolKind {
    #[default]
    Max,
    Avg,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct LmbConfig {
    pub in_channels: usize,
    pub stride: usize,
    /// Channel multiplier of each branch 1x1 at stride 1.
    pub branch_expand: usize,
    /// Concat width relative to the input at stride 1.
    pub block_expand: usize,
    /// Pooling used by the stride-2 shortcut branch.
    pub pool: PoolKind,
    pub norm_act: LmbNormAct,
}

impl LmbConfig {
    pub fn new(in_channels: usize, stride: usize) -> Self {
        LmbConfig {
            in_channels,
            stride,
            branch_expand: 2,
            block_expand: 4,
            pool: PoolKind::Max,
            norm_act: LmbNormAct::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.in_channels == 0 {
            return Err(config_err(
                "L-Mobilenet block needs at least one input channel",
            ));
        }
        if self.stride != 1 && self.stride != 2 {
            return Err(config_err(format!(
                "L-Mobilenet stride must be 1 or 2, got {}",
                self.stride
            )));
        }
        if self.branch_expand == 0 || 2 * self.branch_expand != self.block_expand {
            return Err(config_err(format!(
                "two branches of expand {} cannot concat to expand {}",
                self.branch_expand, self.block_expand
            )));
        }
        Ok(())
    }

    pub fn out_channels(&self) -> usize {
        if self.stride == 1 {
            self.in_channels
        } else {
            2 * self.in_channels
        }
    }
}

/// A block expressed as a small DAG with local ids.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlockFragment {
    pub kind: BlockKind,
    pub nodes: Vec<NodeSpec>,
    pub entry: NodeId,
    pub exit: NodeId,
    pub in_channels: usize,
    pub out_channels: usize,
    pub stride: usize,
    /// Spatial size divides by this factor.
    pub spatial_scale: usize,
}

impl BlockFragment {
    pub fn ops(&self) -> impl Iterator<Item = &LayerOp> {
        self.nodes.iter().filter_map(NodeSpec::op)
    }

    /// Weights of all conv / fully-connected nodes (norm affine excluded).
    pub fn weight_count(&self) -> usize {
        self.ops()
            .map(|op| match op {
                LayerOp::Conv(p) => p.weight_count() + if p.has_bias { p.out_channels } else { 0 },
                LayerOp::FullyConnected {
                    in_features,
                    out_features,
                } => in_features * out_features + out_features,
                _ => 0,
            })
            .sum()
    }

    /// Parallel paths leaving the entry, not counting a direct edge into a merge
    /// node (the identity shortcut of a residual add).
    pub fn parallel_branches(&self) -> usize {
        self.nodes
            .iter()
            .filter(|n| n.inputs.contains(&self.entry))
            .filter(|n| !matches!(n.op(), Some(LayerOp::Eltwise | LayerOp::Concat)))
            .count()
    }

    pub fn node(&self, name: &str) -> Option<&NodeSpec> {
        self.nodes.iter().find(|n| n.name == name)
    }
}

struct FragmentBuilder {
    nodes: Vec<NodeSpec>,
}

impl FragmentBuilder {
    fn new() -> Self {
        FragmentBuilder {
            nodes: vec![NodeSpec {
                id: NodeId(0),
                name: "in".into(),
                kind: NodeKind::Input,
                inputs: vec![],
            }],
        }
    }

    fn push(&mut self, name: impl Into<String>, op: LayerOp, inputs: &[NodeId]) -> NodeId {
        let id = NodeId(self.nodes.len());
        self.nodes.push(NodeSpec {
            id,
            name: name.into(),
            kind: NodeKind::Op(op),
            inputs: inputs.to_vec(),
        });
        id
    }

    /// Appends `op`, then the requested norm and ReLU.
    fn with_norm_act(
        &mut self,
        name: &str,
        op: LayerOp,
        channels: usize,
        input: NodeId,
        na: NormAct,
    ) -> NodeId {
        let mut last = self.push(name, op, &[input]);
        last = self.norm_act(name, channels, last, na);
        last
    }

    fn norm_act(&mut self, name: &str, channels: usize, mut last: NodeId, na: NormAct) -> NodeId {
        if na.norm {
            last = self.push(
                format!("{name}.bn"),
                LayerOp::BatchNorm { channels },
                &[last],
            );
        }
        if na.relu {
            last = self.push(format!("{name}.relu"), LayerOp::Relu, &[last]);
        }
        last
    }

    fn finish(
        self,
        kind: BlockKind,
        in_channels: usize,
        out_channels: usize,
        stride: usize,
    ) -> BlockFragment {
        let exit = NodeId(self.nodes.len() - 1);
        BlockFragment {
            kind,
            nodes: self.nodes,
            entry: NodeId(0),
            exit,
            in_channels,
            out_channels,
            stride,
            spatial_scale: stride,
        }
    }
}

const IN: NodeId = NodeId(0);

/// Stride-1 L-Mobilenet bottleneck: branch A is a 1x1 `C -> eC`, branch B a
/// 1x1 `C -> eC` followed by a 3x3 depthwise conv; the concat (`tC` channels)
/// is projected back to `C` and added to the block input.
pub fn make_lmb_s1(cfg: &LmbConfig) -> Result<BlockFragment> {
    cfg.validate()?;
    if cfg.stride != 1 {
        return Err(config_err(format!(
            "make_lmb_s1 requires stride 1, got {}",
            cfg.stride
        )));
    }
    let c = cfg.in_channels;
    let wide = cfg.branch_expand * c;
    let na = cfg.norm_act;
    let mut f = FragmentBuilder::new();
    let a = f.with_norm_act(
        "branch_a.conv1x1",
        LayerOp::Conv(ConvParams::pointwise(c, wide)),
        wide,
        IN,
        na.reuse,
    );
    let b = f.with_norm_act(
        "branch_b.conv1x1",
        LayerOp::Conv(ConvParams::pointwise(c, wide)),
        wide,
        IN,
        na.expand,
    );
    let b = f.with_norm_act(
        "branch_b.dw3x3",
        LayerOp::Conv(ConvParams::depthwise(wide, 3, 1, 1)),
        wide,
        b,
        na.depthwise,
    );
    let cat = f.push("concat", LayerOp::Concat, &[a, b]);
    let proj = f.with_norm_act(
        "project",
        LayerOp::Conv(ConvParams::pointwise(cfg.block_expand * c, c)),
        c,
        cat,
        na.project,
    );
    f.push("add", LayerOp::Eltwise, &[proj, IN]);
    Ok(f.finish(BlockKind::LmbStride1, c, c, 1))
}

/// Stride-2 L-Mobilenet bottleneck: branch A is a parameter-free 3x3 stride-2
/// pool, branch B a 1x1 `C -> C` followed by a 3x3 stride-2 depthwise conv;
/// the concat doubles the channels at half resolution.
pub fn make_lmb_s2(cfg: &LmbConfig) -> Result<BlockFragment> {
    cfg.validate()?;
    if cfg.stride != 2 {
        return Err(config_err(format!(
            "make_lmb_s2 requires stride 2, got {}",
            cfg.stride
        )));
    }
    let c = cfg.in_channels;
    let na = cfg.norm_act;
    let mut f = FragmentBuilder::new();
    let pool = PoolParams::new(3, 2, 1);
    let pool_op = match cfg.pool {
        PoolKind::Max => LayerOp::MaxPool(pool),
        PoolKind::Avg => LayerOp::AvgPool(pool),
    };
    let a = f.with_norm_act("branch_a.pool3x3", pool_op, c, IN, na.pool_branch);
    let b = f.with_norm_act(
        "branch_b.conv1x1",
        LayerOp::Conv(ConvParams::pointwise(c, c)),
        c,
        IN,
        na.expand,
    );
    let b = f.with_norm_act(
        "branch_b.dw3x3",
        LayerOp::Conv(ConvParams::depthwise(c, 3, 2, 1)),
        c,
        b,
        na.depthwise,
    );
    let cat = f.push("concat", LayerOp::Concat, &[a, b]);
    f.norm_act("concat", 2 * c, cat, na.output);
    Ok(f.finish(BlockKind::LmbStride2, c, 2 * c, 2))
}

pub fn make_lmb(cfg: &LmbConfig) -> Result<BlockFragment> {
    match cfg.stride {
        1 => make_lmb_s1(cfg),
        _ => make_lmb_s2(cfg),
    }
}

/// Norm/activation sites of an inverted-residual bottleneck.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(default)]
pub struct Mbv2NormAct {
    pub expand: NormAct,
    pub depthwise: NormAct,
    pub project: NormAct,
}

impl Default for Mbv2NormAct {
    fn default() -> Self {
        Mbv2NormAct {
            expand: NormAct::BOTH,
            depthwise: NormAct::BOTH,
            project: NormAct::NORM,
        }
    }
}

/// MobileNetV2 inverted residual: 1x1 expand, 3x3 depthwise, linear 1x1
/// projection; residual add when stride is 1 and widths match.
pub fn make_mbv2_bottleneck(
    in_ch: usize,
    out_ch: usize,
    stride: usize,
    expand: usize,
) -> Result<BlockFragment> {
    make_mbv2_bottleneck_with(in_ch, out_ch, stride, expand, Mbv2NormAct::default())
}

pub fn make_mbv2_bottleneck_with(
    in_ch: usize,
    out_ch: usize,
    stride: usize,
    expand: usize,
    na: Mbv2NormAct,
) -> Result<BlockFragment> {
    if stride != 1 && stride != 2 {
        return Err(config_err(format!(
            "MobileNetV2 bottleneck stride must be 1 or 2, got {stride}"
        )));
    }
    if expand == 0 || in_ch == 0 || out_ch == 0 {
        return Err(config_err(
            "MobileNetV2 bottleneck needs expand >= 1 and nonzero widths",
        ));
    }
    let hidden = expand * in_ch;
    let mut f = FragmentBuilder::new();
    let e = f.with_norm_act(
        "expand",
        LayerOp::Conv(ConvParams::pointwise(in_ch, hidden)),
        hidden,
        IN,
        na.expand,
    );
    let d = f.with_norm_act(
        "dw3x3",
        LayerOp::Conv(ConvParams::depthwise(hidden, 3, stride, 1)),
        hidden,
        e,
        na.depthwise,
    );
    let p = f.with_norm_act(
        "project",
        LayerOp::Conv(ConvParams::pointwise(hidden, out_ch)),
        out_ch,
        d,
        na.project,
    );
    if stride == 1 && in_ch == out_ch {
        f.push("add", LayerOp::Eltwise, &[p, IN]);
    }
    Ok(f.finish(BlockKind::Mbv2Bottleneck, in_ch, out_ch, stride))
}

/// ShuffleNetV2 unit shape.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Snv2Config {
    pub in_channels: usize,
    pub out_channels: usize,
    pub stride: usize,
    /// `true`: both branches convolutional (the downsampling form);
    /// `false`: half the channels pass through untouched.
    pub two_branch: bool,
}

/// ShuffleNetV2 unit with its conventional shape: stride 1 splits the channels
/// and keeps the width, stride 2 runs both branches and doubles it.
pub fn make_snv2_unit(in_ch: usize, stride: usize) -> Result<BlockFragment> {
    let cfg = match stride {
        1 => Snv2Config {
            in_channels: in_ch,
            out_channels: in_ch,
            stride,
            two_branch: false,
        },
        2 => Snv2Config {
            in_channels: in_ch,
            out_channels: 2 * in_ch,
            stride,
            two_branch: true,
        },
        s => {
            return Err(config_err(format!(
                "ShuffleNetV2 stride must be 1 or 2, got {s}"
            )))
        }
    };
    make_snv2_unit_with(&cfg)
}

pub fn make_snv2_unit_with(cfg: &Snv2Config) -> Result<BlockFragment> {
    let Snv2Config {
        in_channels: cin,
        out_channels: cout,
        stride,
        two_branch,
    } = *cfg;
    if stride != 1 && stride != 2 {
        return Err(config_err(format!(
            "ShuffleNetV2 stride must be 1 or 2, got {stride}"
        )));
    }
    if cout % 2 != 0 || cout == 0 {
        return Err(config_err(format!(
            "ShuffleNetV2 output width must be even, got {cout}"
        )));
    }
    let half = cout / 2;
    let mut f = FragmentBuilder::new();
    let (left, right_in, right_cin) = if two_branch {
        let l = f.with_norm_act(
            "branch1.dw3x3",
            LayerOp::Conv(ConvParams::depthwise(cin, 3, stride, 1)),
            cin,
            IN,
            NormAct::NORM,
        );
        let l = f.with_norm_act(
            "branch1.conv1x1",
            LayerOp::Conv(ConvParams::pointwise(cin, half)),
            half,
            l,
            NormAct::BOTH,
        );
        (l, IN, cin)
    } else {
        if stride != 1 || cin != cout {
            return Err(config_err(format!(
                "split ShuffleNetV2 unit needs stride 1 and equal widths, got {cin}->{cout} at stride {stride}"
            )));
        }
        if cin % 2 != 0 {
            return Err(config_err(format!(
                "split ShuffleNetV2 unit needs an even channel count, got {cin}"
            )));
        }
        let l = f.push(
            "split.left",
            LayerOp::ChannelSlice {
                start: 0,
                len: half,
            },
            &[IN],
        );
        let r = f.push(
            "split.right",
            LayerOp::ChannelSlice {
                start: half,
                len: half,
            },
            &[IN],
        );
        (l, r, half)
    };
    let r = f.with_norm_act(
        "branch2.conv1x1_a",
        LayerOp::Conv(ConvParams::pointwise(right_cin, half)),
        half,
        right_in,
        NormAct::BOTH,
    );
    let r = f.with_norm_act(
        "branch2.dw3x3",
        LayerOp::Conv(ConvParams::depthwise(half, 3, stride, 1)),
        half,
        r,
        NormAct::NORM,
    );
    let r = f.with_norm_act(
        "branch2.conv1x1_b",
        LayerOp::Conv(ConvParams::pointwise(half, half)),
        half,
        r,
        NormAct::BOTH,
    );
    let cat = f.push("concat", LayerOp::Concat, &[left, r]);
    f.push("shuffle", LayerOp::Shuffle { groups: 2 }, &[cat]);
    Ok(f.finish(BlockKind::Snv2Unit, cin, cout, stride))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kernels::OpKind;

    fn count(frag: &BlockFragment, kind: OpKind) -> usize {
        frag.ops().filter(|op| op.kind() == kind).count()
    }

    fn convs(frag: &BlockFragment) -> usize {
        count(frag, OpKind::Conv) + count(frag, OpKind::DepthwiseConv)
    }

    #[test]
    fn lmb_s1_structure_and_weights() {
        let f = make_lmb_s1(&LmbConfig::new(32, 1)).unwrap();
        assert_eq!(f.out_channels, 32);
        // 2*(32*64) + 9*64 + 128*32
        assert_eq!(f.weight_count(), 8768);
        assert_eq!(count(&f, OpKind::Eltwise), 1);
        assert_eq!(count(&f, OpKind::Concat), 1);
        assert_eq!(convs(&f), 4);
        assert_eq!(f.parallel_branches(), 2);
        let LayerOp::Conv(proj) = f.node("project").unwrap().op().unwrap() else {
            panic!()
        };
        assert_eq!(proj.in_channels, 128);
        assert_eq!(count(&f, OpKind::BatchNorm), 4);
        assert_eq!(count(&f, OpKind::Relu), 3);
    }

    #[test]
    fn lmb_s2_structure() {
        let f = make_lmb_s2(&LmbConfig::new(24, 2)).unwrap();
        assert_eq!((f.out_channels, f.spatial_scale), (48, 2));
        assert_eq!(count(&f, OpKind::Eltwise), 0);
        assert_eq!(count(&f, OpKind::Concat), 1);
        assert_eq!(count(&f, OpKind::MaxPool), 1);
        assert_eq!(convs(&f), 2);
        assert_eq!(f.parallel_branches(), 2);
        assert_eq!(count(&f, OpKind::BatchNorm), 4);
        assert_eq!(count(&f, OpKind::Relu), 3);
        let avg = make_lmb_s2(&LmbConfig {
            pool: PoolKind::Avg,
            ..LmbConfig::new(24, 2)
        })
        .unwrap();
        assert_eq!(count(&avg, OpKind::AvgPool), 1);
    }

    #[test]
    fn lmb_rejects_wrong_stride_and_expand() {
        assert!(matches!(
            make_lmb_s1(&LmbConfig::new(8, 2)),
            Err(crate::Error::Config(_))
        ));
        assert!(matches!(
            make_lmb_s2(&LmbConfig::new(8, 1)),
            Err(crate::Error::Config(_))
        ));
        assert!(make_lmb(&LmbConfig::new(8, 3)).is_err());
        let bad = LmbConfig {
            block_expand: 6,
            ..LmbConfig::new(8, 1)
        };
        assert!(make_lmb_s1(&bad).is_err());
    }

    #[test]
    fn mbv2_variants() {
        let r = make_mbv2_bottleneck(32, 32, 1, 6).unwrap();
        assert_eq!(count(&r, OpKind::Eltwise), 1);
        let d = make_mbv2_bottleneck(32, 64, 2, 6).unwrap();
        assert_eq!(count(&d, OpKind::Eltwise), 0);
        assert_eq!(d.out_channels, 64);
        let unit = make_mbv2_bottleneck(16, 16, 1, 1).unwrap();
        let LayerOp::Conv(e) = unit.node("expand").unwrap().op().unwrap() else {
            panic!()
        };
        assert_eq!((e.in_channels, e.out_channels), (16, 16));
        assert!(make_mbv2_bottleneck(16, 16, 3, 6).is_err());
    }

    #[test]
    fn snv2_variants() {
        let s1 = make_snv2_unit(48, 1).unwrap();
        assert_eq!(s1.out_channels, 48);
        assert_eq!(
            (count(&s1, OpKind::Concat), count(&s1, OpKind::Eltwise)),
            (1, 0)
        );
        assert_eq!(count(&s1, OpKind::Shuffle), 1);
        assert_eq!(s1.parallel_branches(), 2);
        let s2 = make_snv2_unit(48, 2).unwrap();
        assert_eq!(s2.out_channels, 96);
        assert_eq!(
            s2.ops()
                .filter(|op| matches!(op, LayerOp::Shuffle { groups: 2 }))
                .count(),
            1
        );
        assert!(matches!(
            make_snv2_unit(47, 1),
            Err(crate::Error::Config(_))
        ));
    }
}
