use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use lmnet_core::analysis::{cost_report, serialize_report, ReportFormat};
use lmnet_core::dataio::{
    checkpoint_size, load_checkpoint, load_cifar, normalize_dataset, save_checkpoint, CifarKind,
    Dataset, NormStats,
};
use lmnet_core::graph::{presets, ArchConfig};
use lmnet_core::kernels::KernelPath;
use lmnet_core::profile::{bench, BenchConfig};
use lmnet_core::training::{battery, evaluate, fit_with, grad_check, GradCheckConfig, OptimConfig};

#[derive(Parser)]
#[command(
    name = "lmnet",
    version,
    about = "Build, analyze, train, evaluate and profile L-Mobilenet and its baselines"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Static cost report: parameters, multiply-adds, memory access cost, op census.
    Analyze(AnalyzeArgs),
    /// Train on CIFAR and write a checkpoint plus a per-epoch CSV log.
    Train(TrainArgs),
    /// Top-1 accuracy on the test split.
    Eval(EvalArgs),
    /// Per-node inference timings.
    Bench(BenchArgs),
    /// Finite-difference check of every layer kind's backward pass.
    Gradcheck(GradcheckArgs),
}

#[derive(Args)]
#[group(required = false, multiple = false)]
struct ModelSource {
    /// Named architecture.
    #[arg(long, value_parser = clap::builder::PossibleValuesParser::new(presets::NAMES))]
    preset: Option<String>,
    /// Architecture document (JSON).
    #[arg(long)]
    config: Option<PathBuf>,
}

impl ModelSource {
    fn resolve(&self, classes: Option<usize>, input: Option<[usize; 3]>) -> Result<ArchConfig> {
        let mut cfg = match (&self.preset, &self.config) {
            (_, Some(path)) => ArchConfig::from_file(path)?,
            (Some(name), None) => presets::preset_config(name, None)?,
            (None, None) => presets::preset_config(presets::L_MOBILENET, None)?,
        };
        if let Some(k) = classes {
            cfg.head.classes = k;
        }
        if let Some(i) = input {
            cfg.input = i;
        }
        Ok(cfg)
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum Format {
    Json,
    Csv,
}

#[derive(Clone, Copy, ValueEnum)]
enum Kernel {
    Naive,
    Gemm,
}

impl From<Kernel> for KernelPath {
    fn from(k: Kernel) -> Self {
        match k {
            Kernel::Naive => KernelPath::Naive,
            Kernel::Gemm => KernelPath::Gemm,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum DatasetArg {
    Cifar10,
    Cifar100,
}

impl From<DatasetArg> for CifarKind {
    fn from(d: DatasetArg) -> Self {
        match d {
            DatasetArg::Cifar10 => CifarKind::Cifar10,
            DatasetArg::Cifar100 => CifarKind::Cifar100,
        }
    }
}

fn parse_shape(s: &str) -> Result<[usize; 3], String> {
    let dims: Vec<usize> = s
        .split('x')
        .map(|d| {
            d.parse::<usize>()
                .map_err(|_| format!("'{s}' is not CxHxW"))
        })
        .collect::<Result<_, _>>()?;
    match dims[..] {
        [c, h, w] if c > 0 && h > 0 && w > 0 => Ok([c, h, w]),
        _ => Err(format!("'{s}' is not CxHxW with positive sizes")),
    }
}

#[derive(Args)]
struct AnalyzeArgs {
    #[command(flatten)]
    model: ModelSource,
    /// Per-sample input shape.
    #[arg(long, default_value = "3x32x32", value_parser = parse_shape)]
    input_shape: [usize; 3],
    #[arg(long)]
    classes: Option<usize>,
    #[arg(long, value_enum, default_value = "json")]
    format: Format,
    /// Report destination; the report goes to stdout when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    model: ModelSource,
    #[arg(long, value_enum, default_value = "cifar10")]
    dataset: DatasetArg,
    /// Directory with the CIFAR binaries.
    #[arg(long, env = "LMN_DATA_DIR")]
    data: PathBuf,
    #[arg(long, default_value_t = 320)]
    epochs: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Keep only the first K training images of each class.
    #[arg(long)]
    subset: Option<usize>,
    /// Keep only these classes (comma-separated), relabelled 0..n in the given order.
    #[arg(long, value_delimiter = ',')]
    only_classes: Vec<usize>,
    #[arg(long, default_value_t = 64)]
    batch_size: usize,
    #[arg(long, default_value_t = 0.1)]
    lr: f64,
    #[arg(long, value_enum, default_value = "gemm")]
    kernel: Kernel,
    /// Checkpoint path; the architecture sidecar goes to `<out>.json`.
    #[arg(long)]
    out: PathBuf,
    /// Training log; defaults to `<out>.log.csv`.
    #[arg(long)]
    log: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    /// Checkpoint written by `train`; without it a fresh initialization is scored.
    #[arg(long)]
    ckpt: Option<PathBuf>,
    /// Architecture, when the checkpoint has no sidecar.
    #[command(flatten)]
    model: ModelSource,
    #[arg(long, value_enum, default_value = "cifar10")]
    dataset: DatasetArg,
    #[arg(long, env = "LMN_DATA_DIR")]
    data: PathBuf,
    #[arg(long, value_delimiter = ',')]
    only_classes: Vec<usize>,
    /// Seed for the fresh initialization when no checkpoint is given.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 256)]
    batch_size: usize,
    #[arg(long, value_enum, default_value = "gemm")]
    kernel: Kernel,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct BenchArgs {
    #[command(flatten)]
    model: ModelSource,
    #[arg(long, default_value = "3x32x32", value_parser = parse_shape)]
    input_shape: [usize; 3],
    #[arg(long)]
    classes: Option<usize>,
    #[arg(long, default_value_t = 8)]
    batch: usize,
    #[arg(long, default_value_t = 50, value_parser = clap::value_parser!(u64).range(1..))]
    reps: u64,
    #[arg(long, default_value_t = 5)]
    warmup: usize,
    #[arg(long, value_enum, default_value = "gemm")]
    kernel: Kernel,
    /// Worker threads for the gemm path.
    #[arg(long, value_parser = clap::value_parser!(u64).range(1..))]
    threads: Option<u64>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, value_enum, default_value = "json")]
    format: BenchFormat,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum BenchFormat {
    Json,
}

#[derive(Args)]
struct GradcheckArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 1e-4)]
    tol: f64,
    /// Coordinates sampled per parameter kind.
    #[arg(long, default_value_t = 200)]
    samples: usize,
    /// Also write the per-case reports as JSON.
    #[arg(long)]
    out: Option<PathBuf>,
}

/// Written next to a checkpoint so `eval` can rebuild the model and its input pipeline.
#[derive(Serialize, Deserialize)]
struct Sidecar {
    arch: ArchConfig,
    dataset: String,
    classes: Vec<usize>,
    norm: NormStats,
}

fn sidecar_path(ckpt: &Path) -> PathBuf {
    let mut s = ckpt.as_os_str().to_owned();
    s.push(".json");
    PathBuf::from(s)
}

fn emit(out: Option<&Path>, bytes: &[u8]) -> Result<()> {
    match out {
        Some(p) => fs::write(p, bytes).with_context(|| format!("writing {}", p.display())),
        None => {
            use std::io::Write;
            std::io::stdout().write_all(bytes)?;
            Ok(())
        }
    }
}

fn millions(v: u64) -> String {
    format!("{:.2}M", v as f64 / 1e6)
}

fn analyze(a: &AnalyzeArgs) -> Result<()> {
    let cfg = a.model.resolve(a.classes, Some(a.input_shape))?;
    let graph = cfg.build()?;
    let report = cost_report(&graph);
    let format = match a.format {
        Format::Json => ReportFormat::Json,
        Format::Csv => ReportFormat::Csv,
    };
    emit(a.out.as_deref(), &serialize_report(&report, format))?;
    let t = &report.totals;
    let summary = format!(
        "{}: params {} ({}) madds {} ({}) mac {} census {} checkpoint {} bytes",
        report.model,
        t.params,
        millions(t.params),
        t.madds,
        millions(t.madds),
        t.mac,
        report.census,
        checkpoint_size(&graph)
    );
    if a.out.is_some() {
        println!("{summary}");
    } else {
        eprintln!("{summary}");
    }
    Ok(())
}

fn restrict(ds: &Dataset, classes: &[usize]) -> Result<Dataset> {
    Ok(if classes.is_empty() {
        ds.clone()
    } else {
        ds.filter_classes(classes)?
    })
}

fn train(a: &TrainArgs) -> Result<()> {
    let kind = CifarKind::from(a.dataset);
    let (train_set, _) = load_cifar(kind, &a.data)?;
    let mut train_set = restrict(&train_set, &a.only_classes)?;
    if let Some(k) = a.subset {
        train_set = train_set.subset_per_class(k)?;
    }
    let (train_set, norm) = normalize_dataset(&train_set, None)?;
    let s = train_set.images.shape();
    let arch = a
        .model
        .resolve(Some(train_set.class_count), Some([s.c, s.h, s.w]))?;
    let mut graph = arch.build()?;
    graph.initialize(a.seed);
    let cfg = OptimConfig {
        lr0: a.lr,
        batch_size: a.batch_size,
        ..OptimConfig::default()
    };
    eprintln!(
        "training {} on {} images, {} classes, {} epochs",
        arch.name,
        train_set.len(),
        train_set.class_count,
        a.epochs
    );
    let log = fit_with(
        &mut graph,
        &train_set,
        &cfg,
        a.epochs,
        a.seed,
        a.kernel.into(),
        |r| {
            eprintln!(
                "epoch {:>3}  lr {:<8} loss {:.4}  acc {:.4}  {:.1}s",
                r.epoch, r.lr, r.train_loss, r.train_acc, r.wall_time_s
            )
        },
    )?;
    let bytes = save_checkpoint(&graph, &a.out)?;
    let sidecar = Sidecar {
        arch,
        dataset: format!("{:?}", kind).to_lowercase(),
        classes: a.only_classes.clone(),
        norm,
    };
    fs::write(
        sidecar_path(&a.out),
        serde_json::to_string_pretty(&sidecar)? + "\n",
    )?;
    let log_path = a.log.clone().unwrap_or_else(|| {
        let mut p = a.out.as_os_str().to_owned();
        p.push(".log.csv");
        PathBuf::from(p)
    });
    fs::write(&log_path, log.to_csv())?;
    println!(
        "wrote {} ({bytes} bytes) and {}",
        a.out.display(),
        log_path.display()
    );
    Ok(())
}

#[derive(Serialize)]
struct EvalReport {
    model: String,
    dataset: String,
    split: &'static str,
    samples: usize,
    top1: f64,
    top1_error: f64,
}

fn eval(a: &EvalArgs) -> Result<()> {
    let kind = CifarKind::from(a.dataset);
    let sidecar: Option<Sidecar> = match &a.ckpt {
        Some(ckpt) if a.model.preset.is_none() && a.model.config.is_none() => {
            let path = sidecar_path(ckpt);
            let text = fs::read_to_string(&path).with_context(|| {
                format!(
                    "reading {} (pass --preset or --config to skip it)",
                    path.display()
                )
            })?;
            Some(
                serde_json::from_str(&text)
                    .with_context(|| format!("parsing {}", path.display()))?,
            )
        }
        _ => None,
    };
    let classes = if a.only_classes.is_empty() {
        sidecar
            .as_ref()
            .map(|s| s.classes.clone())
            .unwrap_or_default()
    } else {
        a.only_classes.clone()
    };
    let (train_set, test_set) = load_cifar(kind, &a.data)?;
    let test_set = restrict(&test_set, &classes)?;
    let norm = match &sidecar {
        Some(s) => s.norm.clone(),
        None => normalize_dataset(&restrict(&train_set, &classes)?, None)?.1,
    };
    let (test_set, _) = normalize_dataset(&test_set, Some(&norm))?;
    let arch = match sidecar {
        Some(s) => s.arch,
        None => a.model.resolve(Some(test_set.class_count), None)?,
    };
    let mut graph = arch.build()?;
    match &a.ckpt {
        Some(ckpt) => load_checkpoint(ckpt, &mut graph)?,
        None => graph.initialize(a.seed),
    }
    let top1 = evaluate(&graph, &test_set, a.kernel.into(), a.batch_size)?;
    let report = EvalReport {
        model: arch.name,
        dataset: format!("{:?}", kind).to_lowercase(),
        split: "test",
        samples: test_set.len(),
        top1,
        top1_error: 1.0 - top1,
    };
    emit(
        a.out.as_deref(),
        (serde_json::to_string_pretty(&report)? + "\n").as_bytes(),
    )?;
    eprintln!(
        "{}: top-1 {:.4} on {} test images",
        report.model, top1, report.samples
    );
    Ok(())
}

fn run_bench(a: &BenchArgs) -> Result<()> {
    let arch = a.model.resolve(a.classes, Some(a.input_shape))?;
    let mut graph = arch.build()?;
    graph.initialize(a.seed);
    let cfg = BenchConfig {
        reps: a.reps as usize,
        warmup: a.warmup,
        path: a.kernel.into(),
        threads: a.threads.map(|t| t as usize),
        batch: a.batch,
        seed: a.seed,
    };
    let report = bench(&graph, &cfg)?;
    match a.format {
        BenchFormat::Json => emit(a.out.as_deref(), report.to_json().as_bytes())?,
    }
    eprintln!(
        "{}: {:.3} ms per batch of {} ({} path, {} threads), node sum covers {:.1}%",
        report.model,
        report.end_to_end_s * 1e3,
        a.batch,
        report.kernel,
        report.threads,
        100.0 * report.coverage()
    );
    for k in &report.kinds {
        eprintln!(
            "  {:<16} {:>3} nodes {:>9.3} ms {:>6.1}%",
            k.kind,
            k.nodes,
            k.total_s * 1e3,
            100.0 * k.share
        );
    }
    Ok(())
}

#[derive(Serialize)]
struct CaseResult {
    case: String,
    report: lmnet_core::training::GradCheckReport,
}

fn gradcheck(a: &GradcheckArgs) -> Result<()> {
    let cfg = GradCheckConfig {
        tolerance: a.tol,
        samples_per_kind: a.samples,
        seed: a.seed,
        ..Default::default()
    };
    let mut results = Vec::new();
    let mut worst: Option<(String, f64, String)> = None;
    for mut case in battery(a.seed)? {
        let report = grad_check(&mut case.graph, &case.input, &case.labels, &cfg)?;
        let tag = if report.passed { "PASS" } else { "FAIL" };
        println!(
            "{tag} {:<20} max rel err {:.3e}",
            case.name, report.max_rel_err
        );
        if worst.as_ref().is_none_or(|w| report.max_rel_err > w.1) {
            let at = report.worst().map(|w| w.worst.clone()).unwrap_or_default();
            worst = Some((case.name.clone(), report.max_rel_err, at));
        }
        results.push(CaseResult {
            case: case.name,
            report,
        });
    }
    if let Some(out) = &a.out {
        fs::write(out, serde_json::to_string_pretty(&results)? + "\n")?;
    }
    let failed = results.iter().filter(|r| !r.report.passed).count();
    if failed > 0 {
        let (case, err, at) = worst.expect("at least one case");
        bail!(
            "{failed} of {} cases exceed tolerance {:e}; worst {case} ({err:.3e}) at {at}",
            results.len(),
            a.tol
        );
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Analyze(a) => analyze(a),
        Command::Train(a) => train(a),
        Command::Eval(a) => eval(a),
        Command::Bench(a) => run_bench(a),
        Command::Gradcheck(a) => gradcheck(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
