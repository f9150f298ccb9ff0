//! Per-node wall-clock profiling of the inference pass.

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{config_err, Error, Result};
use crate::graph::ModelGraph;
use crate::kernels::KernelPath;
use crate::tensor::{Shape, Tensor};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchConfig {
    pub reps: usize,
    pub warmup: usize,
    pub path: KernelPath,
    /// Worker threads for the GEMM path; `None` keeps the global pool.
    pub threads: Option<usize>,
    pub batch: usize,
    /// Seed of the fixed random input batch.
    pub seed: u64,
}

impl Default for BenchConfig {
    fn default() -> Self {
        BenchConfig {
            reps: 50,
            warmup: 5,
            path: KernelPath::Gemm,
            threads: None,
            batch: 8,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NodeTiming {
    pub node_id: usize,
    pub name: String,
    pub kind: String,
    pub mean_s: f64,
    pub std_s: f64,
    pub calls: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KindTiming {
    pub kind: String,
    pub nodes: usize,
    /// Sum of member node means.
    pub total_s: f64,
    /// Fraction of the summed node time.
    pub share: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub model: String,
    /// `[N, C, H, W]` of the timed batch.
    pub input_shape: [usize; 4],
    pub reps: usize,
    pub warmup: usize,
    pub kernel: KernelPath,
    pub threads: usize,
    pub nodes: Vec<NodeTiming>,
    pub kinds: Vec<KindTiming>,
    /// Sum of per-node mean times.
    pub total_s: f64,
    /// Mean wall time of a whole forward pass, measured around the same runs.
    pub end_to_end_s: f64,
}

impl BenchReport {
    pub fn kind(&self, kind: &str) -> Option<&KindTiming> {
        self.kinds.iter().find(|k| k.kind == kind)
    }

    /// `total_s / end_to_end_s`; 1 means the node timers account for everything.
    pub fn coverage(&self) -> f64 {
        if self.end_to_end_s > 0.0 {
            self.total_s / self.end_to_end_s
        } else {
            1.0
        }
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("report serializes");
        s.push('\n');
        s
    }
}

fn random_batch(shape: Shape, seed: u64) -> Tensor<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data = (0..shape.numel())
        .map(|_| rng.gen_range(-1.0f32..1.0))
        .collect();
    Tensor::new(shape, data).expect("sized to shape")
}

/// Times every node over `reps` inference passes after `warmup` untimed ones.
pub fn bench(graph: &ModelGraph, cfg: &BenchConfig) -> Result<BenchReport> {
    if cfg.reps == 0 {
        return Err(config_err("reps must be at least 1"));
    }
    if cfg.batch == 0 {
        return Err(config_err("batch must be at least 1"));
    }
    if !graph.is_initialized() {
        return Err(Error::State(format!(
            "graph '{}' has uninitialized parameters",
            graph.name()
        )));
    }
    match cfg.threads {
        Some(0) => Err(config_err("threads must be at least 1")),
        Some(t) => {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(t)
                .build()
                .map_err(|e| config_err(format!("cannot start {t} threads: {e}")))?;
            pool.install(|| run(graph, cfg, t))
        }
        None => run(graph, cfg, rayon::current_num_threads()),
    }
}

fn run(graph: &ModelGraph, cfg: &BenchConfig, threads: usize) -> Result<BenchReport> {
    let shape = graph.input_shape().with_batch(cfg.batch);
    let x = random_batch(shape, cfg.seed);
    for _ in 0..cfg.warmup {
        graph.infer(&x, cfg.path)?;
    }
    let n = graph.nodes().len();
    let mut sum = vec![0.0f64; n];
    let mut sum_sq = vec![0.0f64; n];
    let mut wall = 0.0f64;
    for _ in 0..cfg.reps {
        let start = Instant::now();
        let (_, times) = graph.infer_timed(&x, cfg.path)?;
        wall += start.elapsed().as_secs_f64();
        for (i, t) in times.iter().enumerate() {
            let t = t.as_secs_f64();
            sum[i] += t;
            sum_sq[i] += t * t;
        }
    }
    let reps = cfg.reps as f64;
    let mut nodes = Vec::with_capacity(n - 1);
    for node in &graph.nodes()[1..] {
        let i = node.id.0;
        let mean = sum[i] / reps;
        let var = (sum_sq[i] / reps - mean * mean).max(0.0);
        nodes.push(NodeTiming {
            node_id: i,
            name: node.name.clone(),
            kind: node.kind_label().to_string(),
            mean_s: mean,
            std_s: var.sqrt(),
            calls: cfg.reps,
        });
    }
    let total_s: f64 = nodes.iter().map(|t| t.mean_s).sum();
    let mut kinds: Vec<KindTiming> = Vec::new();
    for t in &nodes {
        match kinds.iter_mut().find(|k| k.kind == t.kind) {
            Some(k) => {
                k.nodes += 1;
                k.total_s += t.mean_s;
            }
            None => kinds.push(KindTiming {
                kind: t.kind.clone(),
                nodes: 1,
                total_s: t.mean_s,
                share: 0.0,
            }),
        }
    }
    for k in &mut kinds {
        k.share = if total_s > 0.0 {
            k.total_s / total_s
        } else {
            0.0
        };
    }
    kinds.sort_by(|a, b| {
        b.total_s
            .total_cmp(&a.total_s)
            .then_with(|| a.kind.cmp(&b.kind))
    });
    Ok(BenchReport {
        model: graph.name().to_string(),
        input_shape: [shape.n, shape.c, shape.h, shape.w],
        reps: cfg.reps,
        warmup: cfg.warmup,
        kernel: cfg.path,
        threads: if cfg.path == KernelPath::Naive {
            1
        } else {
            threads
        },
        nodes,
        kinds,
        total_s,
        end_to_end_s: wall / reps,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::presets;

    #[test]
    fn aggregates_match_members() {
        let mut g = presets::preset_lmobilenet_narrow(2).unwrap();
        g.initialize(0);
        let cfg = BenchConfig {
            reps: 3,
            warmup: 1,
            batch: 2,
            threads: Some(2),
            ..BenchConfig::default()
        };
        let r = bench(&g, &cfg).unwrap();
        assert_eq!(r.nodes.len(), g.nodes().len() - 1);
        assert!(r
            .nodes
            .iter()
            .all(|t| t.mean_s >= 0.0 && t.std_s >= 0.0 && t.calls == 3));
        for k in &r.kinds {
            let s: f64 = r
                .nodes
                .iter()
                .filter(|t| t.kind == k.kind)
                .map(|t| t.mean_s)
                .sum();
            assert!((s - k.total_s).abs() <= 1e-12 * s.max(1.0));
        }
        assert!(r.kind("batch-norm").is_some(), "{:?}", r.kinds);
        assert_eq!(r.threads, 2);
    }

    #[test]
    fn rejects_zero_reps() {
        let mut g = presets::preset_lmobilenet_narrow(2).unwrap();
        g.initialize(0);
        assert!(bench(
            &g,
            &BenchConfig {
                reps: 0,
                ..BenchConfig::default()
            }
        )
        .is_err());
    }
}
