//! Declarative architecture tables: rows of `(operator, expand, c, n, s)`,
//! a classifier head and norm/activation placement flags.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::{GraphBuilder, ModelGraph, NodeId};
use crate::blocks::{
    make_lmb, make_mbv2_bottleneck_with, make_snv2_unit_with, LmbConfig, LmbNormAct, Mbv2NormAct,
    NormAct, PoolKind, Snv2Config,
};
use crate::error::{config_err, Error, Result};
use crate::kernels::{ConvParams, LayerOp};
use crate::tensor::Shape;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Operator {
    Conv3x3,
    Conv1x1,
    /// L-Mobilenet bottleneck.
    Lmb,
    /// MobileNetV2 inverted residual.
    Mbv2,
    /// ShuffleNetV2 unit.
    Snv2,
}

impl Operator {
    pub const ALL: [Operator; 5] = [
        Operator::Conv3x3,
        Operator::Conv1x1,
        Operator::Lmb,
        Operator::Mbv2,
        Operator::Snv2,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Operator::Conv3x3 => "conv3x3",
            Operator::Conv1x1 => "conv1x1",
            Operator::Lmb => "lmb",
            Operator::Mbv2 => "mbv2",
            Operator::Snv2 => "snv2",
        }
    }
}

impl fmt::Display for Operator {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Operator {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Operator::ALL
            .into_iter()
            .find(|o| o.as_str() == s)
            .ok_or_else(|| config_err(format!("unknown operator '{s}'")))
    }
}

/// One table row: `n` copies of `op` producing `c` channels, the first copy
/// with stride `s` and the rest with stride 1.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "RawRow")]
pub struct ArchRow {
    pub op: Operator,
    pub expand: usize,
    pub c: usize,
    pub n: usize,
    pub s: usize,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawRow {
    op: String,
    expand: usize,
    c: usize,
    n: usize,
    s: usize,
}

impl TryFrom<RawRow> for ArchRow {
    type Error = String;

    fn try_from(r: RawRow) -> std::result::Result<Self, String> {
        let op = Operator::ALL
            .into_iter()
            .find(|o| o.as_str() == r.op)
            .ok_or_else(|| format!("unknown operator '{}'", r.op))?;
        let row = ArchRow {
            op,
            expand: r.expand,
            c: r.c,
            n: r.n,
            s: r.s,
        };
        row.check().map(|()| row)
    }
}

impl ArchRow {
    pub fn new(op: Operator, expand: usize, c: usize, n: usize, s: usize) -> Self {
        ArchRow {
            op,
            expand,
            c,
            n,
            s,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.check().map_err(config_err)
    }

    fn check(&self) -> std::result::Result<(), String> {
        let op = self.op;
        if self.n == 0 {
            return Err(format!("{op} row: n must be >= 1"));
        }
        if self.s != 1 && self.s != 2 {
            return Err(format!("{op} row: s must be 1 or 2, got {}", self.s));
        }
        if self.expand == 0 {
            return Err(format!("{op} row: expand must be >= 1"));
        }
        if self.c == 0 {
            return Err(format!("{op} row: c must be >= 1"));
        }
        Ok(())
    }
}

/// Global average pool, optional norm/ReLU, fully-connected classifier.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HeadSpec {
    pub classes: usize,
    #[serde(default)]
    pub norm: bool,
    #[serde(default)]
    pub relu: bool,
}

/// Norm/activation placement per operator site.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NormActFlags {
    /// After each plain conv row.
    pub conv: NormAct,
    pub lmb: LmbNormAct,
    pub lmb_pool: PoolKind,
    pub mbv2: Mbv2NormAct,
}

impl Default for NormActFlags {
    fn default() -> Self {
        NormActFlags {
            conv: NormAct::BOTH,
            lmb: LmbNormAct::default(),
            lmb_pool: PoolKind::Max,
            mbv2: Mbv2NormAct::default(),
        }
    }
}

/// A complete architecture document.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArchConfig {
    pub name: String,
    /// Per-sample input `[c, h, w]`.
    pub input: [usize; 3],
    pub rows: Vec<ArchRow>,
    pub head: HeadSpec,
    #[serde(default)]
    pub flags: NormActFlags,
}

impl ArchConfig {
    /// Parses a JSON document; schema violations carry the line and column.
    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| config_err(format!("architecture config: {e}")))
    }

    pub fn from_file(path: impl AsRef<std::path::Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)?;
        serde_json::from_str(&text).map_err(|e| config_err(format!("{}: {e}", path.display())))
    }

    /// Pretty JSON with a trailing newline.
    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("config serializes");
        s.push('\n');
        s
    }

    pub fn input_shape(&self) -> Shape {
        Shape::new(1, self.input[0], self.input[1], self.input[2])
    }

    pub fn build(&self) -> Result<ModelGraph> {
        build_graph(
            &self.name,
            self.input_shape(),
            &self.rows,
            &self.head,
            &self.flags,
        )
    }
}

fn row_err(idx: usize, row: &ArchRow, msg: impl fmt::Display) -> Error {
    config_err(format!("row {idx} ({}): {msg}", row.op))
}

/// Expands each row into `n` blocks, then appends the classifier head.
pub fn build_graph(
    name: &str,
    input_shape: Shape,
    rows: &[ArchRow],
    head: &HeadSpec,
    flags: &NormActFlags,
) -> Result<ModelGraph> {
    if head.classes < 2 {
        return Err(config_err(format!(
            "head needs at least 2 classes, got {}",
            head.classes
        )));
    }
    let mut b = GraphBuilder::new();
    let mut last = b.input();
    let mut channels = input_shape.c;
    for (ri, row) in rows.iter().enumerate() {
        row.validate()?;
        for k in 0..row.n {
            let stride = if k == 0 { row.s } else { 1 };
            let prefix = format!("stage{}.{}", ri + 1, k + 1);
            last = match row.op {
                Operator::Conv3x3 | Operator::Conv1x1 => {
                    if row.expand != 1 {
                        return Err(row_err(ri, row, "plain conv rows take expand 1"));
                    }
                    let p = match row.op {
                        Operator::Conv3x3 => ConvParams::new(channels, row.c, 3, stride, 1),
                        _ => ConvParams::new(channels, row.c, 1, stride, 0),
                    };
                    push_conv(&mut b, &prefix, p, last, flags.conv)
                }
                Operator::Lmb => {
                    if row.expand % 2 != 0 {
                        return Err(row_err(
                            ri,
                            row,
                            "L-Mobilenet expand must be even (two equal branches)",
                        ));
                    }
                    let want = if stride == 2 { 2 * channels } else { channels };
                    if row.c != want {
                        return Err(row_err(
                            ri,
                            row,
                            format!("a stride-{stride} L-Mobilenet block maps {channels} channels to {want}, row asks for {}", row.c),
                        ));
                    }
                    let cfg = LmbConfig {
                        in_channels: channels,
                        stride,
                        branch_expand: row.expand / 2,
                        block_expand: row.expand,
                        pool: flags.lmb_pool,
                        norm_act: flags.lmb,
                    };
                    b.add_fragment(&prefix, &make_lmb(&cfg)?, last)
                }
                Operator::Mbv2 => {
                    let frag =
                        make_mbv2_bottleneck_with(channels, row.c, stride, row.expand, flags.mbv2)?;
                    b.add_fragment(&prefix, &frag, last)
                }
                Operator::Snv2 => {
                    let cfg = Snv2Config {
                        in_channels: channels,
                        out_channels: row.c,
                        stride,
                        two_branch: k == 0,
                    };
                    let frag = make_snv2_unit_with(&cfg).map_err(|e| row_err(ri, row, e))?;
                    b.add_fragment(&prefix, &frag, last)
                }
            };
            channels = row.c;
        }
    }
    last = b.add("head.gap", LayerOp::GlobalAvgPool, &[last]);
    if head.norm {
        last = b.add("head.bn", LayerOp::BatchNorm { channels }, &[last]);
    }
    if head.relu {
        last = b.add("head.relu", LayerOp::Relu, &[last]);
    }
    b.add(
        "head.fc",
        LayerOp::FullyConnected {
            in_features: channels,
            out_features: head.classes,
        },
        &[last],
    );
    b.finish(name, input_shape)
}

fn push_conv(
    b: &mut GraphBuilder,
    name: &str,
    p: ConvParams,
    input: NodeId,
    na: NormAct,
) -> NodeId {
    let channels = p.out_channels;
    let mut last = b.add(format!("{name}.conv"), LayerOp::Conv(p), &[input]);
    if na.norm {
        last = b.add(
            format!("{name}.bn"),
            LayerOp::BatchNorm { channels },
            &[last],
        );
    }
    if na.relu {
        last = b.add(format!("{name}.relu"), LayerOp::Relu, &[last]);
    }
    last
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::BlockKind;

    fn head(classes: usize) -> HeadSpec {
        HeadSpec {
            classes,
            norm: false,
            relu: false,
        }
    }

    #[test]
    fn head_only_graph() {
        let g = build_graph(
            "h",
            Shape::new(1, 3, 8, 8),
            &[],
            &head(4),
            &NormActFlags::default(),
        )
        .unwrap();
        assert_eq!(g.output_shape(), Shape::new(1, 4, 1, 1));
        assert_eq!(g.weighted_layer_count(), 1);
    }

    #[test]
    fn stage_expansion_strides_first_copy() {
        let rows = [ArchRow::new(Operator::Lmb, 4, 32, 2, 2)];
        let g = build_graph(
            "s",
            Shape::new(1, 16, 8, 8),
            &rows,
            &head(3),
            &NormActFlags::default(),
        )
        .unwrap();
        let kinds: Vec<_> = g.blocks().iter().map(|b| b.kind).collect();
        assert_eq!(kinds, [BlockKind::LmbStride2, BlockKind::LmbStride1]);
    }

    #[test]
    fn unknown_operator_and_bad_rows_report_lines() {
        let text = "{\n  \"name\": \"x\",\n  \"input\": [3, 8, 8],\n  \"rows\": [\n    {\"op\": \"conv5x5\", \"expand\": 1, \"c\": 4, \"n\": 1, \"s\": 1}\n  ],\n  \"head\": {\"classes\": 2}\n}\n";
        let err = ArchConfig::from_json(text).unwrap_err();
        assert!(matches!(err, Error::Config(_)));
        let msg = err.to_string();
        assert!(msg.contains("conv5x5") && msg.contains("line "), "{msg}");

        let text = "{\"name\": \"x\", \"input\": [3, 8, 8], \"rows\": [{\"op\": \"lmb\", \"expand\": 4, \"c\": 6, \"n\": 0, \"s\": 1}], \"head\": {\"classes\": 2}}";
        assert!(ArchConfig::from_json(text)
            .unwrap_err()
            .to_string()
            .contains("n must be"));
    }

    #[test]
    fn lmb_row_width_must_follow_stride() {
        let rows = [ArchRow::new(Operator::Lmb, 4, 48, 1, 2)];
        let err = build_graph(
            "s",
            Shape::new(1, 16, 8, 8),
            &rows,
            &head(3),
            &NormActFlags::default(),
        )
        .unwrap_err();
        assert!(matches!(err, Error::Config(_)));
    }
}
