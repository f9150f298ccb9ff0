//! Layer graphs: construction, validation, shape inference, parameters and
//! execution, plus the declarative architecture format and shipped presets.

mod config;
mod exec;
mod node;
pub mod presets;

pub use config::{build_graph, ArchConfig, ArchRow, HeadSpec, NormActFlags, Operator};
pub use exec::{Gradients, Trace};
pub use node::{BlockInfo, BlockKind, NodeId, NodeKind, NodeSpec};

use crate::blocks::BlockFragment;
use crate::error::{config_err, dim_err, Error, Result};
use crate::kernels::{LayerOp, LayerParams, OpKind};
use crate::tensor::{Scalar, Shape};
use crate::training::init::{xavier_init, xavier_init_conv};

/// A validated single-input, single-output DAG of layers with inferred
/// shapes and a parameter slot per weighted/normalizing node.
///
/// Nodes are stored in topological order; node 0 is the input. Shapes are
/// inferred for a batch of one.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelGraph<T = f32> {
    name: String,
    nodes: Vec<NodeSpec>,
    shapes: Vec<Shape>,
    params: Vec<Option<LayerParams<T>>>,
    blocks: Vec<BlockInfo>,
    initialized: bool,
}

impl<T: Scalar> ModelGraph<T> {
    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn nodes(&self) -> &[NodeSpec] {
        &self.nodes
    }

    pub fn node(&self, id: NodeId) -> &NodeSpec {
        &self.nodes[id.0]
    }

    pub fn find(&self, name: &str) -> Option<&NodeSpec> {
        self.nodes.iter().find(|n| n.name == name)
    }

    /// Per-sample input shape (`n = 1`).
    pub fn input_shape(&self) -> Shape {
        self.shapes[0]
    }

    pub fn output_shape(&self) -> Shape {
        *self.shapes.last().expect("graph has an input node")
    }

    pub fn output_id(&self) -> NodeId {
        NodeId(self.nodes.len() - 1)
    }

    /// Inferred per-sample output shape of each node.
    pub fn shapes(&self) -> &[Shape] {
        &self.shapes
    }

    pub fn shape_of(&self, id: NodeId) -> Shape {
        self.shapes[id.0]
    }

    pub fn input_shapes_of(&self, id: NodeId) -> Vec<Shape> {
        self.nodes[id.0]
            .inputs
            .iter()
            .map(|i| self.shapes[i.0])
            .collect()
    }

    pub fn blocks(&self) -> &[BlockInfo] {
        &self.blocks
    }

    pub fn params(&self, id: NodeId) -> Option<&LayerParams<T>> {
        self.params[id.0].as_ref()
    }

    pub fn params_mut(&mut self, id: NodeId) -> Option<&mut LayerParams<T>> {
        self.params[id.0].as_mut()
    }

    /// `(node, params)` for every node that owns parameters, in node order.
    pub fn param_entries(&self) -> impl Iterator<Item = (NodeId, &LayerParams<T>)> {
        self.params
            .iter()
            .enumerate()
            .filter_map(|(i, p)| p.as_ref().map(|p| (NodeId(i), p)))
    }

    pub fn param_entries_mut(&mut self) -> impl Iterator<Item = (NodeId, &mut LayerParams<T>)> {
        self.params
            .iter_mut()
            .enumerate()
            .filter_map(|(i, p)| p.as_mut().map(|p| (NodeId(i), p)))
    }

    pub fn is_initialized(&self) -> bool {
        self.initialized
    }

    /// Marks parameters as set by an external source (e.g. a checkpoint).
    pub fn mark_initialized(&mut self) {
        self.initialized = true;
    }

    /// Number of convolution and fully-connected nodes.
    pub fn weighted_layer_count(&self) -> usize {
        self.nodes
            .iter()
            .filter(|n| n.op_kind().is_some_and(OpKind::is_weighted))
            .count()
    }

    /// Xavier-uniform weights (seeded per node), zero biases, unit/zero norm
    /// affine with standard running statistics.
    pub fn initialize(&mut self, seed: u64) {
        for (i, slot) in self.params.iter_mut().enumerate() {
            let Some(op) = self.nodes[i].op() else {
                continue;
            };
            let node_seed = seed ^ (i as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
            *slot = LayerParams::allocate(op);
            match slot {
                Some(LayerParams::Conv { weight, .. }) => {
                    let LayerOp::Conv(p) = op else { unreachable!() };
                    *weight = xavier_init_conv(p, node_seed);
                }
                Some(LayerParams::Fc { weight, .. }) => {
                    let t = xavier_init(
                        Shape::new(1, 1, weight.rows, weight.cols),
                        weight.rows,
                        weight.cols,
                        node_seed,
                    );
                    weight.data = t.into_data();
                }
                _ => {}
            }
        }
        self.initialized = true;
    }

    /// Same graph with parameters converted to another scalar type.
    pub fn cast<U: Scalar>(&self) -> ModelGraph<U> {
        ModelGraph {
            name: self.name.clone(),
            nodes: self.nodes.clone(),
            shapes: self.shapes.clone(),
            params: self
                .params
                .iter()
                .map(|p| p.as_ref().map(LayerParams::cast))
                .collect(),
            blocks: self.blocks.clone(),
            initialized: self.initialized,
        }
    }

    /// Re-runs shape inference for a different per-sample input shape.
    pub fn with_input_shape(&self, input: Shape) -> Result<Self> {
        let shapes = shape_infer(&self.nodes, input.with_batch(1))?;
        for (i, p) in self.params.iter().enumerate() {
            if let Some(p) = p {
                check_param_shapes(&self.nodes[i], p)?;
            }
        }
        Ok(ModelGraph {
            shapes,
            ..self.clone()
        })
    }
}

fn check_param_shapes<T: Scalar>(node: &NodeSpec, params: &LayerParams<T>) -> Result<()> {
    let Some(op) = node.op() else { return Ok(()) };
    let Some(expected) = LayerParams::<T>::allocate(op) else {
        return Err(Error::State(format!(
            "node {} ({}) cannot own parameters",
            node.id, node.name
        )));
    };
    let a = expected.persisted();
    let b = params.persisted();
    let same = a.len() == b.len()
        && a.iter()
            .zip(&b)
            .all(|((n1, v1), (n2, v2))| n1 == n2 && v1.len() == v2.len());
    if !same {
        return Err(dim_err(format!(
            "parameters of node {} ({}) do not match its declared shape",
            node.id, node.name
        )));
    }
    Ok(())
}

/// Infers per-node output shapes, failing on the first inconsistency with an
/// error naming the node.
pub fn shape_infer(nodes: &[NodeSpec], input_shape: Shape) -> Result<Vec<Shape>> {
    input_shape.validate()?;
    let mut shapes: Vec<Shape> = Vec::with_capacity(nodes.len());
    for (i, node) in nodes.iter().enumerate() {
        let shape = match &node.kind {
            NodeKind::Input => input_shape,
            NodeKind::Op(op) => {
                let ins: Vec<Shape> = node.inputs.iter().map(|id| shapes[id.0]).collect();
                if matches!(op, LayerOp::Eltwise) && ins.len() == 2 && ins[0] != ins[1] {
                    let (a, b) = (&nodes[node.inputs[0].0], &nodes[node.inputs[1].0]);
                    return Err(dim_err(format!(
                        "node {} ({}): eltwise parents {} ({}) with shape {} and {} ({}) with shape {} differ",
                        NodeId(i),
                        node.name,
                        a.id,
                        a.name,
                        ins[0],
                        b.id,
                        b.name,
                        ins[1]
                    )));
                }
                op.output_shape(&ins).map_err(|e| match e {
                    Error::Dimension(m) => {
                        dim_err(format!("node {} ({}): {m}", NodeId(i), node.name))
                    }
                    Error::Config(m) => {
                        config_err(format!("node {} ({}): {m}", NodeId(i), node.name))
                    }
                    other => other,
                })?
            }
        };
        shapes.push(shape);
    }
    Ok(shapes)
}

/// Structural invariants: ids match positions, inputs point backwards, node 0
/// is the only input, every non-output node is consumed.
fn validate_structure(nodes: &[NodeSpec]) -> Result<()> {
    if nodes.is_empty() || nodes[0].kind != NodeKind::Input {
        return Err(config_err("graph must start with its input node"));
    }
    let mut consumed = vec![false; nodes.len()];
    for (i, node) in nodes.iter().enumerate() {
        if node.id != NodeId(i) {
            return Err(config_err(format!(
                "node {} stored at position {i}",
                node.id
            )));
        }
        match &node.kind {
            NodeKind::Input if i != 0 => {
                return Err(config_err(format!(
                    "node {} ({}) is a second input",
                    node.id, node.name
                )));
            }
            NodeKind::Input => {}
            NodeKind::Op(op) => {
                if node.inputs.is_empty() {
                    return Err(config_err(format!(
                        "node {} ({}) has no inputs",
                        node.id, node.name
                    )));
                }
                if let Some(a) = op.arity() {
                    if node.inputs.len() != a {
                        return Err(config_err(format!(
                            "node {} ({}) takes {a} input(s), wired to {}",
                            node.id,
                            node.name,
                            node.inputs.len()
                        )));
                    }
                }
            }
        }
        for input in &node.inputs {
            if input.0 >= i {
                return Err(config_err(format!(
                    "node {} ({}) reads {input}, which is not an earlier node",
                    node.id, node.name
                )));
            }
            consumed[input.0] = true;
        }
    }
    let last = nodes.len() - 1;
    if let Some(i) = (0..last).find(|&i| !consumed[i]) {
        return Err(config_err(format!(
            "node {} ({}) is never consumed; graphs have a single output",
            NodeId(i),
            nodes[i].name
        )));
    }
    Ok(())
}

/// Incrementally assembles a graph from single layers and block fragments.
#[derive(Debug, Clone)]
pub struct GraphBuilder {
    nodes: Vec<NodeSpec>,
    blocks: Vec<BlockInfo>,
}

impl Default for GraphBuilder {
    fn default() -> Self {
        Self::new()
    }
}

impl GraphBuilder {
    pub fn new() -> Self {
        GraphBuilder {
            nodes: vec![NodeSpec {
                id: NodeId(0),
                name: "input".into(),
                kind: NodeKind::Input,
                inputs: vec![],
            }],
            blocks: Vec::new(),
        }
    }

    pub fn input(&self) -> NodeId {
        NodeId(0)
    }

    pub fn last(&self) -> NodeId {
        NodeId(self.nodes.len() - 1)
    }

    pub fn add(&mut self, name: impl Into<String>, op: LayerOp, inputs: &[NodeId]) -> NodeId {
        let id = NodeId(self.nodes.len());
        self.nodes.push(NodeSpec {
            id,
            name: name.into(),
            kind: NodeKind::Op(op),
            inputs: inputs.to_vec(),
        });
        id
    }

    /// Splices `frag` after `from`, prefixing node names; returns the exit node.
    pub fn add_fragment(&mut self, prefix: &str, frag: &BlockFragment, from: NodeId) -> NodeId {
        let base = self.nodes.len();
        // Local id -> global id; the fragment input maps onto `from`.
        let mut map = vec![from; frag.nodes.len()];
        let mut owned = Vec::new();
        let mut next = base;
        for (local, node) in frag.nodes.iter().enumerate() {
            if node.kind == NodeKind::Input {
                continue;
            }
            map[local] = NodeId(next);
            next += 1;
        }
        for node in &frag.nodes {
            let NodeKind::Op(op) = &node.kind else {
                continue;
            };
            let id = map[node.id.0];
            owned.push(id);
            self.nodes.push(NodeSpec {
                id,
                name: format!("{prefix}.{}", node.name),
                kind: NodeKind::Op(op.clone()),
                inputs: node.inputs.iter().map(|i| map[i.0]).collect(),
            });
        }
        self.blocks.push(BlockInfo {
            name: prefix.to_string(),
            kind: frag.kind,
            stride: frag.stride,
            in_channels: frag.in_channels,
            out_channels: frag.out_channels,
            nodes: owned,
        });
        map[frag.exit.0]
    }

    /// Validates, infers shapes for `input_shape` (batch forced to 1) and
    /// allocates zeroed parameter slots.
    pub fn finish<T: Scalar>(
        self,
        name: impl Into<String>,
        input_shape: Shape,
    ) -> Result<ModelGraph<T>> {
        validate_structure(&self.nodes)?;
        let shapes = shape_infer(&self.nodes, input_shape.with_batch(1))?;
        let params = self
            .nodes
            .iter()
            .map(|n| n.op().and_then(LayerParams::allocate))
            .collect();
        Ok(ModelGraph {
            name: name.into(),
            nodes: self.nodes,
            shapes,
            params,
            blocks: self.blocks,
            initialized: false,
        })
    }
}

impl ModelGraph<f32> {
    /// Stand-alone graph made of one fragment.
    pub fn from_fragment(frag: &BlockFragment, input_shape: Shape) -> Result<Self> {
        let mut b = GraphBuilder::new();
        let from = b.input();
        b.add_fragment("block", frag, from);
        b.finish("fragment", input_shape)
    }
}
