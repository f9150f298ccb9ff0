use std::fmt;

use serde::{Deserialize, Serialize};

use crate::kernels::{LayerOp, OpKind};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct NodeId(pub usize);

impl fmt::Display for NodeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "#{}", self.0)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum NodeKind {
    /// The graph (or fragment) entry point.
    Input,
    Op(LayerOp),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NodeSpec {
    pub id: NodeId,
    /// Dotted path, e.g. `stage2.b1.branch_b.dw`.
    pub name: String,
    pub kind: NodeKind,
    pub inputs: Vec<NodeId>,
}

impl NodeSpec {
    pub fn op(&self) -> Option<&LayerOp> {
        match &self.kind {
            NodeKind::Op(op) => Some(op),
            NodeKind::Input => None,
        }
    }

    pub fn op_kind(&self) -> Option<OpKind> {
        self.op().map(LayerOp::kind)
    }

    pub fn kind_label(&self) -> &'static str {
        self.op_kind().map_or("input", OpKind::as_str)
    }
}

/// Which builder produced a block.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BlockKind {
    /// L-Mobilenet bottleneck, stride 1 (residual, two branches, projection).
    LmbStride1,
    /// L-Mobilenet bottleneck, stride 2 (pooling branch + depthwise branch).
    LmbStride2,
    Mbv2Bottleneck,
    Snv2Unit,
}

/// A block instance inside a built graph.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlockInfo {
    pub name: String,
    pub kind: BlockKind,
    pub stride: usize,
    pub in_channels: usize,
    pub out_channels: usize,
    /// Node ids owned by the block (excluding its entry, which belongs to the producer).
    pub nodes: Vec<NodeId>,
}
