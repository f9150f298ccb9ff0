//! Central finite-difference checks of the analytic backward pass.

use rand::seq::{IteratorRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::loss::softmax_xent;
use crate::blocks::{make_lmb_s1, make_lmb_s2, LmbConfig};
use crate::error::{Error, Result};
use crate::graph::{Gradients, GraphBuilder, ModelGraph, NodeId};
use crate::kernels::{ConvParams, KernelPath, LayerOp, Mode, PoolParams};
use crate::tensor::{Shape, Tensor};

/// Node, parameter tensor index, element index.
type Coord = (NodeId, usize, usize);

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradCheckConfig {
    pub step: f64,
    /// Coordinates sampled per parameter kind and for the input.
    pub samples_per_kind: usize,
    pub tolerance: f64,
    /// Lower bound of the relative-error denominator, so gradients that are
    /// zero up to round-off are judged by absolute error.
    pub floor: f64,
    pub seed: u64,
    /// Batch-norm mode during the check.
    pub mode: Mode,
    pub path: KernelPath,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        GradCheckConfig {
            step: 1e-5,
            samples_per_kind: 200,
            tolerance: 1e-4,
            floor: 1e-6,
            seed: 0,
            mode: Mode::Training,
            path: KernelPath::Naive,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KindCheck {
    /// Layer kind owning the checked parameters, or `input`.
    pub kind: String,
    pub checked: usize,
    pub max_rel_err: f64,
    /// Coordinate with the largest error.
    pub worst: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradCheckReport {
    pub entries: Vec<KindCheck>,
    pub max_rel_err: f64,
    pub tolerance: f64,
    pub passed: bool,
}

impl GradCheckReport {
    pub fn worst(&self) -> Option<&KindCheck> {
        self.entries
            .iter()
            .max_by(|a, b| a.max_rel_err.total_cmp(&b.max_rel_err))
    }
}

pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

fn loss_of(
    graph: &mut ModelGraph<f64>,
    input: &Tensor<f64>,
    labels: &[usize],
    cfg: &GradCheckConfig,
) -> Result<f64> {
    let logits = graph.forward(input, cfg.mode, cfg.path)?;
    let (loss, _) = softmax_xent(&logits, labels)?;
    if !loss.is_finite() {
        return Err(Error::Numeric(format!(
            "non-finite loss {loss} during gradient check"
        )));
    }
    Ok(loss)
}

/// Analytic gradients of the mean cross-entropy.
pub fn analytic_gradients(
    graph: &mut ModelGraph<f64>,
    input: &Tensor<f64>,
    labels: &[usize],
    cfg: &GradCheckConfig,
) -> Result<(f64, Gradients<f64>)> {
    let (logits, trace) = graph.forward_with_trace(input, cfg.mode, cfg.path)?;
    let (loss, dlogits) = softmax_xent(&logits, labels)?;
    if !loss.is_finite() {
        return Err(Error::Numeric(format!(
            "non-finite loss {loss} during gradient check"
        )));
    }
    Ok((loss, graph.backward(&trace, &dlogits, cfg.path)?))
}

/// Compares `analytic` against central differences on sampled coordinates.
pub fn compare_gradients(
    graph: &mut ModelGraph<f64>,
    input: &Tensor<f64>,
    labels: &[usize],
    analytic: &Gradients<f64>,
    cfg: &GradCheckConfig,
) -> Result<GradCheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut by_kind: Vec<(String, Vec<Coord>)> = Vec::new();
    let ids: Vec<NodeId> = graph.param_entries().map(|(id, _)| id).collect();
    for id in ids {
        let kind = graph.node(id).kind_label().to_string();
        let lens: Vec<usize> = graph
            .params(id)
            .unwrap()
            .trainable()
            .iter()
            .map(|(_, v)| v.len())
            .collect();
        let slot = match by_kind.iter().position(|(k, _)| *k == kind) {
            Some(i) => i,
            None => {
                by_kind.push((kind, Vec::new()));
                by_kind.len() - 1
            }
        };
        for (t, len) in lens.into_iter().enumerate() {
            by_kind[slot].1.extend((0..len).map(|e| (id, t, e)));
        }
    }

    let mut entries = Vec::new();
    for (kind, coords) in by_kind {
        let picked = coords
            .into_iter()
            .choose_multiple(&mut rng, cfg.samples_per_kind);
        let mut check = KindCheck {
            kind,
            checked: 0,
            max_rel_err: 0.0,
            worst: String::new(),
        };
        for (id, t, e) in picked {
            let a = analytic.params[id.0]
                .as_ref()
                .and_then(|p| p.get(t))
                .and_then(|v| v.get(e))
                .copied();
            let a = a.ok_or_else(|| Error::State(format!("no analytic gradient for node {id}")))?;
            let orig = graph.params_mut(id).unwrap().trainable_mut()[t].1[e];
            let eval = |g: &mut ModelGraph<f64>, v: f64| -> Result<f64> {
                g.params_mut(id).unwrap().trainable_mut()[t].1[e] = v;
                loss_of(g, input, labels, cfg)
            };
            let plus = eval(graph, orig + cfg.step);
            let minus = eval(graph, orig - cfg.step);
            graph.params_mut(id).unwrap().trainable_mut()[t].1[e] = orig;
            let n = (plus? - minus?) / (2.0 * cfg.step);
            let err = relative_error(a, n, cfg.floor);
            check.checked += 1;
            if err >= check.max_rel_err {
                let node = graph.node(id);
                let pname = graph.params(id).unwrap().trainable()[t].0;
                check.max_rel_err = err;
                check.worst = format!(
                    "{} ({}).{pname}[{e}]: analytic {a:.6e}, numeric {n:.6e}",
                    node.id, node.name
                );
            }
        }
        entries.push(check);
    }

    let mut coords: Vec<usize> = (0..input.len()).collect();
    coords.shuffle(&mut rng);
    coords.truncate(cfg.samples_per_kind);
    let mut check = KindCheck {
        kind: "input".into(),
        checked: 0,
        max_rel_err: 0.0,
        worst: String::new(),
    };
    let mut x = input.clone();
    for i in coords {
        let orig = x.data()[i];
        x.data_mut()[i] = orig + cfg.step;
        let plus = loss_of(graph, &x, labels, cfg)?;
        x.data_mut()[i] = orig - cfg.step;
        let minus = loss_of(graph, &x, labels, cfg)?;
        x.data_mut()[i] = orig;
        let n = (plus - minus) / (2.0 * cfg.step);
        let a = analytic.input.data()[i];
        let err = relative_error(a, n, cfg.floor);
        check.checked += 1;
        if err >= check.max_rel_err {
            check.max_rel_err = err;
            check.worst = format!("input[{i}]: analytic {a:.6e}, numeric {n:.6e}");
        }
    }
    entries.push(check);

    let max_rel_err = entries.iter().map(|e| e.max_rel_err).fold(0.0, f64::max);
    Ok(GradCheckReport {
        entries,
        max_rel_err,
        tolerance: cfg.tolerance,
        passed: max_rel_err < cfg.tolerance,
    })
}

/// Checks every parameter kind of `graph` and its input gradient.
pub fn grad_check(
    graph: &mut ModelGraph<f64>,
    input: &Tensor<f64>,
    labels: &[usize],
    cfg: &GradCheckConfig,
) -> Result<GradCheckReport> {
    let (_, analytic) = analytic_gradients(graph, input, labels, cfg)?;
    compare_gradients(graph, input, labels, &analytic, cfg)
}

/// A small graph exercising one layer kind, with a batch and labels.
#[derive(Debug, Clone)]
pub struct ToyCase {
    pub name: String,
    pub graph: ModelGraph<f64>,
    pub input: Tensor<f64>,
    pub labels: Vec<usize>,
}

/// Distinct values spread over `[-1, 1]` in random order, never closer than
/// `1/len` to each other or `0.5/len` to zero, so pooling ties and ReLU kinks
/// stay far outside the finite-difference step.
pub fn separated_input(shape: Shape, rng: &mut ChaCha8Rng) -> Tensor<f64> {
    let n = shape.numel();
    let mut ranks: Vec<usize> = (0..n).collect();
    ranks.shuffle(rng);
    let step = 2.0 / n as f64;
    // Jitter keeps values off a regular grid, where a channel mean can land
    // exactly on a sample and put a ReLU input at its kink.
    let data = ranks
        .into_iter()
        .map(|r| -1.0 + step * (r as f64 + rng.gen_range(0.25..0.75)))
        .collect();
    Tensor::new(shape, data).expect("sized to shape")
}

const TOY_CLASSES: usize = 3;

fn toy(
    name: &str,
    shape: Shape,
    seed: u64,
    body: impl FnOnce(&mut GraphBuilder, NodeId) -> (NodeId, usize),
) -> Result<ToyCase> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut b = GraphBuilder::new();
    let x = b.input();
    let (last, channels) = body(&mut b, x);
    let gap = b.add("gap", LayerOp::GlobalAvgPool, &[last]);
    b.add(
        "fc",
        LayerOp::FullyConnected {
            in_features: channels,
            out_features: TOY_CLASSES,
        },
        &[gap],
    );
    let mut graph = b.finish::<f32>(name, shape)?.cast::<f64>();
    graph.initialize(rng.gen());
    let input = separated_input(shape, &mut rng);
    let labels = (0..shape.n)
        .map(|_| rng.gen_range(0..TOY_CLASSES))
        .collect();
    Ok(ToyCase {
        name: name.into(),
        graph,
        input,
        labels,
    })
}

/// One toy graph per layer kind plus a stride-1 and a stride-2 L-Mobilenet
/// block; every graph ends in global average pooling and a classifier.
pub fn battery(seed: u64) -> Result<Vec<ToyCase>> {
    let s = |i: u64| seed.wrapping_mul(1000).wrapping_add(i);
    let conv =
        |c_in, c_out, k, stride, pad| LayerOp::Conv(ConvParams::new(c_in, c_out, k, stride, pad));
    Ok(vec![
        toy("conv", Shape::new(2, 4, 6, 6), s(0), |b, x| {
            (
                b.add(
                    "conv",
                    LayerOp::Conv(ConvParams::new(4, 6, 3, 2, 1).with_bias(true)),
                    &[x],
                ),
                6,
            )
        })?,
        toy("depthwise-conv", Shape::new(2, 24, 4, 4), s(1), |b, x| {
            (
                b.add(
                    "dw",
                    LayerOp::Conv(ConvParams::depthwise(24, 3, 1, 1)),
                    &[x],
                ),
                24,
            )
        })?,
        toy("maxpool", Shape::new(2, 4, 7, 7), s(2), |b, x| {
            (
                b.add("pool", LayerOp::MaxPool(PoolParams::new(3, 2, 1)), &[x]),
                4,
            )
        })?,
        toy("avgpool", Shape::new(2, 4, 7, 7), s(3), |b, x| {
            (
                b.add("pool", LayerOp::AvgPool(PoolParams::new(3, 2, 1)), &[x]),
                4,
            )
        })?,
        toy("global-avg-pool", Shape::new(2, 6, 5, 5), s(4), |_, x| {
            (x, 6)
        })?,
        toy("batch-norm", Shape::new(2, 100, 2, 2), s(5), |b, x| {
            (b.add("bn", LayerOp::BatchNorm { channels: 100 }, &[x]), 100)
        })?,
        toy("relu", Shape::new(2, 6, 6, 6), s(6), |b, x| {
            (b.add("relu", LayerOp::Relu, &[x]), 6)
        })?,
        toy("eltwise", Shape::new(2, 6, 5, 5), s(7), |b, x| {
            let c = b.add("conv", conv(6, 6, 1, 1, 0), &[x]);
            (b.add("add", LayerOp::Eltwise, &[c, x]), 6)
        })?,
        toy("concat", Shape::new(2, 6, 5, 5), s(8), |b, x| {
            let c = b.add("conv", conv(6, 4, 1, 1, 0), &[x]);
            (b.add("concat", LayerOp::Concat, &[x, c]), 10)
        })?,
        toy("shuffle", Shape::new(2, 8, 5, 5), s(9), |b, x| {
            let c = b.add("conv", conv(8, 8, 1, 1, 0), &[x]);
            (b.add("shuffle", LayerOp::Shuffle { groups: 2 }, &[c]), 8)
        })?,
        toy("channel-slice", Shape::new(2, 8, 5, 5), s(10), |b, x| {
            (
                b.add("slice", LayerOp::ChannelSlice { start: 2, len: 5 }, &[x]),
                5,
            )
        })?,
        toy("fully-connected", Shape::new(2, 84, 1, 1), s(11), |_, x| {
            (x, 84)
        })?,
        toy(
            "lmb-stride1-block",
            Shape::new(2, 8, 4, 4),
            s(12),
            |b, x| {
                (
                    b.add_fragment(
                        "block",
                        &make_lmb_s1(&LmbConfig::new(8, 1)).expect("valid"),
                        x,
                    ),
                    8,
                )
            },
        )?,
        toy(
            "lmb-stride2-block",
            Shape::new(2, 8, 6, 6),
            s(13),
            |b, x| {
                (
                    b.add_fragment(
                        "block",
                        &make_lmb_s2(&LmbConfig::new(8, 2)).expect("valid"),
                        x,
                    ),
                    16,
                )
            },
        )?,
    ])
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_conv_passes_and_sign_flip_fails() {
        let mut case = battery(1).unwrap().remove(0);
        let cfg = GradCheckConfig::default();
        let report = grad_check(&mut case.graph, &case.input, &case.labels, &cfg).unwrap();
        assert!(report.passed, "{report:?}");
        assert!(report
            .entries
            .iter()
            .any(|e| e.kind == "conv" && e.checked >= 200));

        let (_, mut g) =
            analytic_gradients(&mut case.graph, &case.input, &case.labels, &cfg).unwrap();
        for p in g.params.iter_mut().flatten().flatten() {
            p.iter_mut().for_each(|v| *v = -*v);
        }
        let report =
            compare_gradients(&mut case.graph, &case.input, &case.labels, &g, &cfg).unwrap();
        assert!(!report.passed);
    }

    #[test]
    fn separated_values_are_distinct() {
        let t = separated_input(Shape::new(2, 3, 4, 4), &mut ChaCha8Rng::seed_from_u64(0));
        let mut v = t.data().to_vec();
        v.sort_by(f64::total_cmp);
        assert!(v.windows(2).all(|w| w[1] - w[0] > 1e-3));
        assert!(v.iter().all(|x| x.abs() > 1e-3));
    }
}
