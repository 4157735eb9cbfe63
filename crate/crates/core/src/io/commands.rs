//! The work behind each CLI command, independent of argument parsing.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use log::info;
use sha2::{Digest, Sha256};

use crate::binio::{read_matrix, write_matrix};
use crate::dense::Matrix;
use crate::error::{Error, Result};
use crate::graph::normalize;
use crate::io::config::RunConfig;
use crate::io::dataset::{load_dataset, Dataset, EDGES_FILE, FEATURES_FILE};
use crate::io::report::{build_report, AttentionReport, DegreeBucket};
use crate::model::checkpoint::{checkpoint_dtype, load_checkpoint, save_checkpoint};
use crate::model::{attention_weights, predict};
use crate::propagation::{
    load_stack_expecting, persist_stack, propagate_features, stationary_feature, StackExpectation,
};
use crate::real::{DType, Real};
use crate::training::{evaluate, run_stages, EpochMetrics, Split, StageInputs, StageOutcome, EVAL_CHUNK};

pub const RESOLVED_CONFIG_FILE: &str = "config.resolved";
pub const METRICS_HEADER: &str = "stage,epoch,train_loss,ce,kl,train_acc,valid_acc,test_acc";

/// Where every artifact of a run lives under the output directory.
#[derive(Debug, Clone)]
pub struct Layout {
    pub root: PathBuf,
}

impl Layout {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn resolved_config(&self) -> PathBuf {
        self.root.join(RESOLVED_CONFIG_FILE)
    }

    pub fn stack(&self) -> PathBuf {
        self.root.join("preprocess").join("stack.bin")
    }

    pub fn x_inf(&self) -> PathBuf {
        self.root.join("preprocess").join("x_inf.bin")
    }

    pub fn fingerprint(&self) -> PathBuf {
        self.root.join("preprocess").join("fingerprint")
    }

    pub fn stage_dir(&self, stage: usize) -> PathBuf {
        self.root.join("train").join(format!("stage-{stage}"))
    }

    pub fn checkpoint(&self, stage: usize) -> PathBuf {
        self.stage_dir(stage).join("checkpoint.bin")
    }

    pub fn prediction(&self, stage: usize) -> PathBuf {
        self.stage_dir(stage).join("prediction.bin")
    }

    pub fn label_embedding(&self, stage: usize) -> PathBuf {
        self.stage_dir(stage).join("label_embedding.bin")
    }

    pub fn metrics(&self, stage: usize) -> PathBuf {
        self.stage_dir(stage).join("metrics.csv")
    }

    pub fn summary(&self) -> PathBuf {
        self.root.join("train").join("summary.csv")
    }

    pub fn attention_report(&self) -> PathBuf {
        self.root.join("attention_report.csv")
    }
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn require(path: &Path, command: &'static str) -> Result<()> {
    if path.exists() {
        Ok(())
    } else {
        Err(Error::MissingArtifact {
            path: path.to_path_buf(),
            command,
        })
    }
}

pub fn persist_resolved_config(config: &RunConfig) -> Result<()> {
    write_text(&Layout::new(&config.output_dir).resolved_config(), &config.to_text())
}

/// Identifies the inputs of preprocessing: dataset bytes, r, K and precision.
pub fn preprocess_fingerprint(config: &RunConfig) -> Result<String> {
    let mut h = Sha256::new();
    for name in [EDGES_FILE, FEATURES_FILE] {
        let p = config.dataset.join(name);
        let bytes = fs::read(&p).map_err(|e| Error::io(&p, e))?;
        h.update((bytes.len() as u64).to_le_bytes());
        h.update(&bytes);
    }
    h.update(config.r.to_le_bytes());
    h.update((config.hops as u64).to_le_bytes());
    h.update(config.precision.name().as_bytes());
    Ok(h.finalize().iter().fold(String::new(), |mut s, b| {
        let _ = write!(s, "{b:02x}");
        s
    }))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PreprocessStatus {
    Written,
    UpToDate,
}

/// Writes the propagated stack and the stationary feature matrix unless
/// artifacts with a matching fingerprint already exist.
pub fn preprocess(config: &RunConfig, force: bool) -> Result<PreprocessStatus> {
    persist_resolved_config(config)?;
    let layout = Layout::new(&config.output_dir);
    let fingerprint = preprocess_fingerprint(config)?;
    if !force
        && layout.stack().exists()
        && layout.x_inf().exists()
        && fs::read_to_string(layout.fingerprint()).ok().as_deref() == Some(fingerprint.as_str())
    {
        info!("preprocessed artifacts are up-to-date");
        return Ok(PreprocessStatus::UpToDate);
    }
    let dataset = load_dataset(&config.dataset)?;
    match config.precision {
        DType::F32 => preprocess_typed::<f32>(config, &dataset, &layout)?,
        DType::F64 => preprocess_typed::<f64>(config, &dataset, &layout)?,
    }
    write_text(&layout.fingerprint(), &fingerprint)?;
    Ok(PreprocessStatus::Written)
}

fn preprocess_typed<T: Real>(config: &RunConfig, dataset: &Dataset, layout: &Layout) -> Result<()> {
    let adj = normalize::<T>(&dataset.graph, config.r)?;
    let x: Matrix<T> = dataset.features.cast();
    let stack = propagate_features(&adj, &x, config.hops, config.memory_budget)?;
    persist_stack(&stack, &layout.stack())?;
    let (x_inf, _) = stationary_feature(&dataset.graph, config.r, &x)?;
    write_matrix(&layout.x_inf(), &x_inf)?;
    info!(
        "wrote {} steps of {}x{} to {}",
        config.hops + 1,
        x.rows(),
        x.cols(),
        layout.stack().display()
    );
    Ok(())
}

fn fmt_metric(v: f64) -> String {
    if v.is_nan() {
        "nan".into()
    } else {
        format!("{v:.6}")
    }
}

pub fn metrics_csv(metrics: &[EpochMetrics]) -> String {
    let mut out = format!("{METRICS_HEADER}\n");
    for m in metrics {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{}",
            m.stage,
            m.epoch,
            fmt_metric(m.train_loss),
            fmt_metric(m.ce),
            fmt_metric(m.kl),
            fmt_metric(m.train_acc),
            fmt_metric(m.valid_acc),
            fmt_metric(m.test_acc)
        );
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct StageSummary {
    pub stage: usize,
    pub best_epoch: usize,
    pub reliable_nodes: usize,
    pub train_acc: f64,
    pub valid_acc: f64,
    pub test_acc: f64,
}

pub fn summary_csv(stages: &[StageSummary]) -> String {
    let mut out = String::from("stage,best_epoch,reliable_nodes,train_acc,valid_acc,test_acc\n");
    for s in stages {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{}",
            s.stage,
            s.best_epoch,
            s.reliable_nodes,
            fmt_metric(s.train_acc),
            fmt_metric(s.valid_acc),
            fmt_metric(s.test_acc)
        );
    }
    out
}

fn check_fresh(config: &RunConfig, layout: &Layout) -> Result<()> {
    require(&layout.stack(), "preprocess")?;
    require(&layout.x_inf(), "preprocess")?;
    let stored = fs::read_to_string(layout.fingerprint()).unwrap_or_default();
    if stored != preprocess_fingerprint(config)? {
        return Err(Error::Config(format!(
            "preprocessed artifacts in {} do not match the dataset, r, hops or precision; run `propmlp preprocess` again",
            config.output_dir.display()
        )));
    }
    Ok(())
}

/// Runs every stage and persists checkpoints, predictions, label
/// embeddings, metrics and the summary.
pub fn train(config: &RunConfig) -> Result<Vec<StageSummary>> {
    persist_resolved_config(config)?;
    let layout = Layout::new(&config.output_dir);
    check_fresh(config, &layout)?;
    let dataset = load_dataset(&config.dataset)?;
    match config.precision {
        DType::F32 => train_typed::<f32>(config, &dataset, &layout),
        DType::F64 => train_typed::<f64>(config, &dataset, &layout),
    }
}

fn train_typed<T: Real>(config: &RunConfig, dataset: &Dataset, layout: &Layout) -> Result<Vec<StageSummary>> {
    let n = dataset.num_nodes();
    let d = dataset.feature_width();
    let stack = load_stack_expecting::<T>(
        &layout.stack(),
        StackExpectation {
            num_nodes: Some(n),
            feature_width: Some(d),
            k_max: Some(config.hops),
        },
    )?;
    let x_inf: Matrix<T> = read_matrix(&layout.x_inf())?;
    let adjacency = normalize::<T>(&dataset.graph, config.r)?;
    let inputs = StageInputs {
        stack: &stack,
        x_inf: Some(&x_inf),
        adjacency: &adjacency,
        labels: &dataset.labels,
        splits: &dataset.splits,
        num_classes: dataset.num_classes,
        k_label: config.label_hops,
    };
    let model = config.model_config(d, dataset.num_classes);
    let plan = config.stage_plan();
    let mut summaries = Vec::new();
    run_stages(&plan, &model, &inputs, |outcome: &StageOutcome<T>| {
        let m = outcome.stage;
        save_checkpoint(&layout.checkpoint(m), &outcome.params, config.seed, m as u64)?;
        write_matrix(&layout.prediction(m), &outcome.prediction.probabilities)?;
        write_matrix(&layout.label_embedding(m), &outcome.label_state.y_propagated)?;
        write_text(&layout.metrics(m), &metrics_csv(&outcome.metrics))?;
        let best = outcome.best_metrics();
        let summary = StageSummary {
            stage: m,
            best_epoch: outcome.best_epoch,
            reliable_nodes: outcome.reliable.len(),
            train_acc: best.train_acc,
            valid_acc: best.valid_acc,
            test_acc: best.test_acc,
        };
        info!(
            "stage {m}: best epoch {} valid {} test {}",
            summary.best_epoch,
            fmt_metric(summary.valid_acc),
            fmt_metric(summary.test_acc)
        );
        summaries.push(summary);
        Ok(())
    })?;
    write_text(&layout.summary(), &summary_csv(&summaries))?;
    Ok(summaries)
}

/// Last stage with a checkpoint on disk.
pub fn latest_stage(layout: &Layout) -> Result<usize> {
    (1..)
        .take_while(|&m| layout.checkpoint(m).exists())
        .last()
        .ok_or_else(|| Error::MissingArtifact {
            path: layout.checkpoint(1),
            command: "train",
        })
}

#[derive(Debug, Clone, PartialEq)]
pub struct Accuracy {
    pub split: Split,
    pub nodes: usize,
    pub accuracy: f64,
}

/// Accuracy of a stage's checkpoint on every non-empty split.
pub fn evaluate_stage(config: &RunConfig, stage: Option<usize>) -> Result<(usize, Vec<Accuracy>)> {
    let layout = Layout::new(&config.output_dir);
    check_fresh(config, &layout)?;
    let stage = match stage {
        Some(m) => m,
        None => latest_stage(&layout)?,
    };
    require(&layout.checkpoint(stage), "train")?;
    let dataset = load_dataset(&config.dataset)?;
    let acc = match config.precision {
        DType::F32 => evaluate_typed::<f32>(&dataset, &layout, stage)?,
        DType::F64 => evaluate_typed::<f64>(&dataset, &layout, stage)?,
    };
    Ok((stage, acc))
}

fn check_dtype<T: Real>(path: &Path) -> Result<()> {
    let dtype = checkpoint_dtype(path)?;
    if dtype != T::DTYPE {
        return Err(Error::Config(format!(
            "{} was trained in {}, the configured precision is {}",
            path.display(),
            dtype.name(),
            T::DTYPE.name()
        )));
    }
    Ok(())
}

fn evaluate_typed<T: Real>(dataset: &Dataset, layout: &Layout, stage: usize) -> Result<Vec<Accuracy>> {
    check_dtype::<T>(&layout.checkpoint(stage))?;
    let ckpt = load_checkpoint::<T>(&layout.checkpoint(stage))?;
    let stack = load_stack_expecting::<T>(
        &layout.stack(),
        StackExpectation {
            num_nodes: Some(dataset.num_nodes()),
            feature_width: Some(ckpt.params.config.feature_width),
            k_max: Some(ckpt.params.config.hops),
        },
    )?;
    let x_inf: Matrix<T> = read_matrix(&layout.x_inf())?;
    require(&layout.label_embedding(stage), "train")?;
    let y: Matrix<T> = read_matrix(&layout.label_embedding(stage))?;
    let pred = predict(&ckpt.params, stack.steps(), Some(&x_inf), &y, 1.0, EVAL_CHUNK)?;
    let mut out = Vec::new();
    for split in [Split::Train, Split::Valid, Split::Test] {
        let nodes = dataset.splits.get(split);
        if nodes.is_empty() {
            continue;
        }
        out.push(Accuracy {
            split,
            nodes: nodes.len(),
            accuracy: evaluate(&pred, &dataset.labels, nodes)?,
        });
    }
    Ok(out)
}

#[derive(Debug, Clone)]
pub struct InspectOptions {
    pub stage: Option<usize>,
    pub buckets: Vec<DegreeBucket>,
    pub max_nodes_per_bucket: usize,
    pub report_path: Option<PathBuf>,
}

/// Writes the per-degree-bucket attention report for a stage's checkpoint.
pub fn inspect_attention(config: &RunConfig, options: &InspectOptions) -> Result<(PathBuf, AttentionReport)> {
    let layout = Layout::new(&config.output_dir);
    check_fresh(config, &layout)?;
    let stage = match options.stage {
        Some(m) => m,
        None => latest_stage(&layout)?,
    };
    require(&layout.checkpoint(stage), "train")?;
    let dataset = load_dataset(&config.dataset)?;
    let report = match config.precision {
        DType::F32 => inspect_typed::<f32>(config, &dataset, &layout, stage, options)?,
        DType::F64 => inspect_typed::<f64>(config, &dataset, &layout, stage, options)?,
    };
    let path = options
        .report_path
        .clone()
        .unwrap_or_else(|| layout.attention_report());
    write_text(&path, &report.to_csv())?;
    Ok((path, report))
}

fn inspect_typed<T: Real>(
    config: &RunConfig,
    dataset: &Dataset,
    layout: &Layout,
    stage: usize,
    options: &InspectOptions,
) -> Result<AttentionReport> {
    check_dtype::<T>(&layout.checkpoint(stage))?;
    let ckpt = load_checkpoint::<T>(&layout.checkpoint(stage))?;
    let stack = load_stack_expecting::<T>(
        &layout.stack(),
        StackExpectation {
            num_nodes: Some(dataset.num_nodes()),
            feature_width: Some(ckpt.params.config.feature_width),
            k_max: Some(ckpt.params.config.hops),
        },
    )?;
    let x_inf: Matrix<T> = read_matrix(&layout.x_inf())?;
    let w = attention_weights(&ckpt.params, stack.steps(), Some(&x_inf), EVAL_CHUNK)?;
    build_report(
        &w,
        dataset.graph.degrees(),
        &options.buckets,
        options.max_nodes_per_bucket,
        config.seed,
    )
}
