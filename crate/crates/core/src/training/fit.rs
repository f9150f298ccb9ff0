use std::fmt::Write as _;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::loss::{argmax_rows, softmax_xent};
use super::optim::{lr_at_epoch, nag_step, OptimConfig, OptimState};
use crate::dataio::Dataset;
use crate::error::{config_err, dim_err, Error, Result};
use crate::graph::ModelGraph;
use crate::kernels::{KernelPath, Mode};

/// One line of the training log; `epoch` is zero-based, as in the schedule.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub train_acc: f64,
    pub wall_time_s: f64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct TrainLog {
    pub records: Vec<EpochRecord>,
}

impl TrainLog {
    pub const CSV_HEADER: &'static str = "epoch,lr,train_loss,train_acc,wall_time_s";

    pub fn to_csv(&self) -> String {
        let mut out = format!("{}\n", Self::CSV_HEADER);
        for r in &self.records {
            writeln!(
                out,
                "{},{},{},{},{:.3}",
                r.epoch, r.lr, r.train_loss, r.train_acc, r.wall_time_s
            )
            .unwrap();
        }
        out
    }

    pub fn last(&self) -> Option<&EpochRecord> {
        self.records.last()
    }
}

/// Mini-batch training with the Nesterov optimizer and the step schedule.
pub fn fit(
    graph: &mut ModelGraph,
    data: &Dataset,
    cfg: &OptimConfig,
    epochs: usize,
    seed: u64,
    path: KernelPath,
) -> Result<TrainLog> {
    fit_with(graph, data, cfg, epochs, seed, path, |_| {})
}

/// [`fit`] with a callback after every epoch.
pub fn fit_with(
    graph: &mut ModelGraph,
    data: &Dataset,
    cfg: &OptimConfig,
    epochs: usize,
    seed: u64,
    path: KernelPath,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<TrainLog> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::Data("training set is empty".into()));
    }
    if !graph.is_initialized() {
        return Err(Error::State(format!(
            "graph '{}' has uninitialized parameters",
            graph.name()
        )));
    }
    if epochs > cfg.total_epochs {
        return Err(config_err(format!(
            "{epochs} epochs exceed the schedule's {}",
            cfg.total_epochs
        )));
    }
    check_classes(graph, data)?;
    let mut state = OptimState::new(graph);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut log = TrainLog::default();
    for epoch in 0..epochs {
        let start = Instant::now();
        let lr = lr_at_epoch(epoch, cfg)?;
        order.shuffle(&mut rng);
        let (mut loss_sum, mut correct) = (0.0f64, 0usize);
        for (step, idx) in order.chunks(cfg.batch_size).enumerate() {
            let (x, y) = data.batch(idx)?;
            let (logits, trace) = graph.forward_with_trace(&x, Mode::Training, path)?;
            let (loss, dlogits) = softmax_xent(&logits, &y)?;
            if !loss.is_finite() {
                return Err(Error::Numeric(format!(
                    "training diverged at epoch {epoch}, step {step}: loss {loss}"
                )));
            }
            loss_sum += loss * idx.len() as f64;
            correct += argmax_rows(&logits)
                .iter()
                .zip(&y)
                .filter(|(p, t)| p == t)
                .count();
            let grads = graph.backward(&trace, &dlogits, path)?;
            nag_step(graph, &grads, &mut state, cfg, lr)?;
        }
        state.epoch = epoch + 1;
        let record = EpochRecord {
            epoch,
            lr,
            train_loss: loss_sum / data.len() as f64,
            train_acc: correct as f64 / data.len() as f64,
            wall_time_s: start.elapsed().as_secs_f64(),
        };
        on_epoch(&record);
        log.records.push(record);
    }
    Ok(log)
}

fn check_classes(graph: &ModelGraph, data: &Dataset) -> Result<()> {
    let classes = graph.output_shape().c;
    if classes != data.class_count {
        return Err(dim_err(format!(
            "model predicts {classes} classes but the dataset has {}",
            data.class_count
        )));
    }
    let s = graph.input_shape();
    let d = data.images.shape();
    if (s.c, s.h, s.w) != (d.c, d.h, d.w) {
        return Err(dim_err(format!(
            "model takes {}x{}x{} images, dataset has {}x{}x{}",
            s.c, s.h, s.w, d.c, d.h, d.w
        )));
    }
    Ok(())
}

/// Top-1 accuracy in inference mode.
pub fn evaluate(
    graph: &ModelGraph,
    data: &Dataset,
    path: KernelPath,
    batch_size: usize,
) -> Result<f64> {
    check_classes(graph, data)?;
    if data.is_empty() {
        return Err(Error::Data("evaluation set is empty".into()));
    }
    let idx: Vec<usize> = (0..data.len()).collect();
    let mut correct = 0;
    for chunk in idx.chunks(batch_size.max(1)) {
        let (x, y) = data.batch(chunk)?;
        let logits = graph.infer(&x, path)?;
        correct += argmax_rows(&logits)
            .iter()
            .zip(&y)
            .filter(|(p, t)| p == t)
            .count();
    }
    Ok(correct as f64 / data.len() as f64)
}
