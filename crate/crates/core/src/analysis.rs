//! Static analyzers: parameter count, multiply-accumulate count, the
//! memory-access-cost model and the node-kind census.
//!
//! Madds are multiply-accumulates per sample (not 2x FLOPs). Memory access
//! cost of a weighted node is `input reads + output writes + weight reads`,
//! which for a stride-1 1x1 conv is `h*w*(c1 + c2) + c1*c2`; every other node
//! costs its feature reads and writes.

use std::fmt;
use std::io::Write as _;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{config_err, Error, Result};
use crate::graph::ModelGraph;
use crate::kernels::{LayerOp, OpKind};
use crate::tensor::{Scalar, Shape};

/// Cost of one node for a single sample.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct NodeCostValues {
    pub params: u64,
    pub madds: u64,
    pub mac: u64,
}

pub fn node_params(op: &LayerOp) -> u64 {
    (match op {
        LayerOp::Conv(p) => p.weight_count() + if p.has_bias { p.out_channels } else { 0 },
        LayerOp::FullyConnected {
            in_features,
            out_features,
        } => in_features * out_features + out_features,
        LayerOp::BatchNorm { channels } => 2 * channels,
        _ => 0,
    }) as u64
}

pub fn node_madds(op: &LayerOp, out: Shape) -> u64 {
    (match op {
        LayerOp::Conv(p) => {
            out.h * out.w * p.kernel.0 * p.kernel.1 * p.in_per_group() * p.out_channels
        }
        LayerOp::FullyConnected {
            in_features,
            out_features,
        } => in_features * out_features,
        _ => 0,
    }) as u64
}

pub fn node_mac(op: &LayerOp, inputs: &[Shape], out: Shape) -> u64 {
    let reads: usize = inputs.iter().map(|s| s.per_sample()).sum();
    let writes = out.per_sample();
    let weights = match op {
        LayerOp::Conv(p) => p.kernel.0 * p.kernel.1 * p.in_per_group() * p.out_channels,
        LayerOp::FullyConnected {
            in_features,
            out_features,
        } => in_features * out_features,
        _ => 0,
    };
    (reads + writes + weights) as u64
}

pub fn node_cost(op: &LayerOp, inputs: &[Shape], out: Shape) -> NodeCostValues {
    NodeCostValues {
        params: node_params(op),
        madds: node_madds(op, out),
        mac: node_mac(op, inputs, out),
    }
}

/// Counts of node kinds. `pool` covers max, average and global-average pools.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct OpCensus {
    pub batch_norm: usize,
    pub relu: usize,
    pub eltwise: usize,
    pub concat: usize,
    pub conv: usize,
    pub depthwise_conv: usize,
    pub pool: usize,
    pub fc: usize,
}

impl OpCensus {
    const FIELDS: [&'static str; 8] = [
        "batch_norm",
        "relu",
        "eltwise",
        "concat",
        "conv",
        "depthwise_conv",
        "pool",
        "fc",
    ];

    pub fn add(&mut self, kind: OpKind) {
        match kind {
            OpKind::BatchNorm => self.batch_norm += 1,
            OpKind::Relu => self.relu += 1,
            OpKind::Eltwise => self.eltwise += 1,
            OpKind::Concat => self.concat += 1,
            OpKind::Conv => self.conv += 1,
            OpKind::DepthwiseConv => self.depthwise_conv += 1,
            OpKind::MaxPool | OpKind::AvgPool | OpKind::GlobalAvgPool => self.pool += 1,
            OpKind::FullyConnected => self.fc += 1,
            OpKind::Shuffle | OpKind::ChannelSlice => {}
        }
    }

    pub fn from_kinds(kinds: impl IntoIterator<Item = OpKind>) -> Self {
        let mut c = OpCensus::default();
        kinds.into_iter().for_each(|k| c.add(k));
        c
    }

    fn values(&self) -> [usize; 8] {
        [
            self.batch_norm,
            self.relu,
            self.eltwise,
            self.concat,
            self.conv,
            self.depthwise_conv,
            self.pool,
            self.fc,
        ]
    }

    fn values_mut(&mut self) -> [&mut usize; 8] {
        [
            &mut self.batch_norm,
            &mut self.relu,
            &mut self.eltwise,
            &mut self.concat,
            &mut self.conv,
            &mut self.depthwise_conv,
            &mut self.pool,
            &mut self.fc,
        ]
    }
}

impl fmt::Display for OpCensus {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "BN {} / ReLU {} / Eltwise {} / Concat {}",
            self.batch_norm, self.relu, self.eltwise, self.concat
        )
    }
}

pub fn op_census<T: Scalar>(graph: &ModelGraph<T>) -> OpCensus {
    OpCensus::from_kinds(graph.nodes().iter().filter_map(|n| n.op_kind()))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NodeCost {
    pub node_id: usize,
    pub kind: String,
    /// Per-sample output as `CxHxW`.
    pub out_shape: String,
    pub params: u64,
    pub madds: u64,
    pub mac: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Totals {
    pub params: u64,
    pub madds: u64,
    pub mac: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CostReport {
    pub model: String,
    /// `[c, h, w]`
    pub input_shape: [usize; 3],
    pub totals: Totals,
    pub census: OpCensus,
    pub nodes: Vec<NodeCost>,
}

fn chw(s: Shape) -> String {
    format!("{}x{}x{}", s.c, s.h, s.w)
}

/// Per-node costs for the graph's inferred shapes (one sample).
pub fn cost_report<T: Scalar>(graph: &ModelGraph<T>) -> CostReport {
    let mut nodes = Vec::new();
    let mut totals = Totals::default();
    for node in graph.nodes() {
        let Some(op) = node.op() else { continue };
        let c = node_cost(op, &graph.input_shapes_of(node.id), graph.shape_of(node.id));
        totals.params += c.params;
        totals.madds += c.madds;
        totals.mac += c.mac;
        nodes.push(NodeCost {
            node_id: node.id.0,
            kind: op.kind().as_str().to_string(),
            out_shape: chw(graph.shape_of(node.id)),
            params: c.params,
            madds: c.madds,
            mac: c.mac,
        });
    }
    let s = graph.input_shape();
    CostReport {
        model: graph.name().to_string(),
        input_shape: [s.c, s.h, s.w],
        totals,
        census: op_census(graph),
        nodes,
    }
}

pub fn count_params<T: Scalar>(graph: &ModelGraph<T>) -> u64 {
    graph
        .nodes()
        .iter()
        .filter_map(|n| n.op())
        .map(node_params)
        .sum()
}

pub fn count_madds<T: Scalar>(graph: &ModelGraph<T>) -> u64 {
    graph
        .nodes()
        .iter()
        .filter_map(|n| n.op().map(|op| node_madds(op, graph.shape_of(n.id))))
        .sum()
}

pub fn estimate_mac<T: Scalar>(graph: &ModelGraph<T>) -> u64 {
    graph
        .nodes()
        .iter()
        .filter_map(|n| {
            n.op()
                .map(|op| node_mac(op, &graph.input_shapes_of(n.id), graph.shape_of(n.id)))
        })
        .sum()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ReportFormat {
    #[default]
    Json,
    Csv,
}

impl FromStr for ReportFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "json" => Ok(ReportFormat::Json),
            "csv" => Ok(ReportFormat::Csv),
            other => Err(config_err(format!(
                "unknown report format '{other}' (json or csv)"
            ))),
        }
    }
}

impl fmt::Display for ReportFormat {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ReportFormat::Json => "json",
            ReportFormat::Csv => "csv",
        })
    }
}

const CSV_HEADER: &str = "node_id,kind,out_shape,params,madds,mac";

fn pretty_json<S: Serialize>(v: &S) -> Vec<u8> {
    let mut out = serde_json::to_vec_pretty(v).expect("report serializes");
    out.push(b'\n');
    out
}

/// JSON, or CSV with `#` metadata lines, one row per node and a totals row.
/// The census is not written to CSV; parsing recomputes it from node kinds.
pub fn serialize_report(report: &CostReport, format: ReportFormat) -> Vec<u8> {
    match format {
        ReportFormat::Json => pretty_json(report),
        ReportFormat::Csv => {
            let mut out = Vec::new();
            let [c, h, w] = report.input_shape;
            writeln!(out, "# model={}", report.model).unwrap();
            writeln!(out, "# input_shape={c}x{h}x{w}").unwrap();
            writeln!(out, "# madds are multiply-accumulates per sample").unwrap();
            writeln!(out, "{CSV_HEADER}").unwrap();
            for n in &report.nodes {
                writeln!(
                    out,
                    "{},{},{},{},{},{}",
                    n.node_id, n.kind, n.out_shape, n.params, n.madds, n.mac
                )
                .unwrap();
            }
            let t = report.totals;
            writeln!(out, "total,,,{},{},{}", t.params, t.madds, t.mac).unwrap();
            out
        }
    }
}

fn fmt_err(msg: impl fmt::Display) -> Error {
    Error::Format(msg.to_string())
}

fn parse_num<N: FromStr>(field: &str, what: &str, line: usize) -> Result<N> {
    field
        .parse()
        .map_err(|_| fmt_err(format!("line {line}: bad {what} '{field}'")))
}

pub fn parse_report(bytes: &[u8], format: ReportFormat) -> Result<CostReport> {
    match format {
        ReportFormat::Json => serde_json::from_slice(bytes).map_err(fmt_err),
        ReportFormat::Csv => {
            let text = std::str::from_utf8(bytes).map_err(fmt_err)?;
            let mut model = None;
            let mut input = None;
            let mut nodes = Vec::new();
            let mut totals = None;
            let mut header_seen = false;
            for (i, line) in text.lines().enumerate() {
                let ln = i + 1;
                if let Some(meta) = line.strip_prefix("# ") {
                    if let Some(m) = meta.strip_prefix("model=") {
                        model = Some(m.to_string());
                    } else if let Some(s) = meta.strip_prefix("input_shape=") {
                        let dims: Vec<usize> = s
                            .split('x')
                            .map(|d| parse_num(d, "input dimension", ln))
                            .collect::<Result<_>>()?;
                        let dims: [usize; 3] = dims
                            .try_into()
                            .map_err(|_| fmt_err(format!("line {ln}: input_shape needs 3 dims")))?;
                        input = Some(dims);
                    }
                    continue;
                }
                if !header_seen {
                    if line != CSV_HEADER {
                        return Err(fmt_err(format!(
                            "line {ln}: expected header '{CSV_HEADER}'"
                        )));
                    }
                    header_seen = true;
                    continue;
                }
                let f: Vec<&str> = line.split(',').collect();
                if f.len() != 6 {
                    return Err(fmt_err(format!(
                        "line {ln}: expected 6 fields, got {}",
                        f.len()
                    )));
                }
                if f[0] == "total" {
                    totals = Some(Totals {
                        params: parse_num(f[3], "params", ln)?,
                        madds: parse_num(f[4], "madds", ln)?,
                        mac: parse_num(f[5], "mac", ln)?,
                    });
                    continue;
                }
                nodes.push(NodeCost {
                    node_id: parse_num(f[0], "node_id", ln)?,
                    kind: f[1].to_string(),
                    out_shape: f[2].to_string(),
                    params: parse_num(f[3], "params", ln)?,
                    madds: parse_num(f[4], "madds", ln)?,
                    mac: parse_num(f[5], "mac", ln)?,
                });
            }
            let totals = totals.ok_or_else(|| fmt_err("missing totals row"))?;
            let kinds = nodes
                .iter()
                .map(|n| n.kind.parse::<OpKind>())
                .collect::<Result<Vec<_>>>()
                .map_err(fmt_err)?;
            Ok(CostReport {
                model: model.ok_or_else(|| fmt_err("missing '# model=' line"))?,
                input_shape: input.ok_or_else(|| fmt_err("missing '# input_shape=' line"))?,
                totals,
                census: OpCensus::from_kinds(kinds),
                nodes,
            })
        }
    }
}

pub fn serialize_census(census: &OpCensus, format: ReportFormat) -> Vec<u8> {
    match format {
        ReportFormat::Json => pretty_json(census),
        ReportFormat::Csv => {
            let mut out = b"kind,count\n".to_vec();
            for (k, v) in OpCensus::FIELDS.iter().zip(census.values()) {
                writeln!(out, "{k},{v}").unwrap();
            }
            out
        }
    }
}

pub fn parse_census(bytes: &[u8], format: ReportFormat) -> Result<OpCensus> {
    match format {
        ReportFormat::Json => serde_json::from_slice(bytes).map_err(fmt_err),
        ReportFormat::Csv => {
            let text = std::str::from_utf8(bytes).map_err(fmt_err)?;
            let mut lines = text.lines();
            if lines.next() != Some("kind,count") {
                return Err(fmt_err("line 1: expected header 'kind,count'"));
            }
            let mut census = OpCensus::default();
            let mut seen = [false; 8];
            for (i, line) in lines.enumerate() {
                let ln = i + 2;
                let (k, v) = line
                    .split_once(',')
                    .ok_or_else(|| fmt_err(format!("line {ln}: expected kind,count")))?;
                let idx = OpCensus::FIELDS
                    .iter()
                    .position(|f| *f == k)
                    .ok_or_else(|| fmt_err(format!("line {ln}: unknown kind '{k}'")))?;
                *census.values_mut()[idx] = parse_num(v, "count", ln)?;
                seen[idx] = true;
            }
            if let Some(i) = seen.iter().position(|s| !s) {
                return Err(fmt_err(format!(
                    "missing census row '{}'",
                    OpCensus::FIELDS[i]
                )));
            }
            Ok(census)
        }
    }
}
