use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use digest_core::analysis::{
    bound_report, convergence_slope, cross_check, dissimilarity, measure_staleness_eps, BoundReport, CostCheck,
    CostInputs, DissimilarityEstimate, Schedule,
};
use digest_core::engine::{train, train_full_graph, EpochRecord, Mode, ProbeRecord, RunMetrics, TrainConfig};
use digest_core::graph::{build_prop_matrix, generate_sbm, karate_club, load_edge_list, Graph};
use digest_core::nn::{save_checkpoint, GcnModel};
use digest_core::partition::{build_subgraphs, partition_graph, partition_stats, Partition, PartitionStats, Subgraph};
use digest_core::repstore::CounterSnapshot;
use serde::{Deserialize, Serialize};

use crate::spec::{DatasetSpec, ExperimentSpec};
use crate::CliError;

const DEFAULT_OUT: &str = "runs/latest";
const TARGET_SLACK: f64 = 1.05;

fn spec_err(e: impl std::fmt::Display) -> CliError {
    CliError::Spec(e.to_string())
}

pub fn load_graph(d: &DatasetSpec, seed: u64) -> Result<Graph, CliError> {
    match d {
        DatasetSpec::Karate {} => Ok(karate_club()),
        DatasetSpec::Sbm {
            blocks,
            nodes_per_block,
            p_in,
            p_out,
            feature_dim,
        } => generate_sbm(*blocks, *nodes_per_block, *p_in, *p_out, seed, *feature_dim).map_err(spec_err),
        DatasetSpec::Files {
            edges,
            features,
            labels,
            masks,
        } => load_edge_list(edges, features, labels, masks.as_deref()).map_err(spec_err),
    }
}

/// Graph, partition, subgraphs and initial model for a spec.
pub struct Setup {
    pub graph: Graph,
    pub partition: Partition,
    pub subs: Vec<Subgraph>,
    pub model0: GcnModel,
}

pub fn setup(spec: &ExperimentSpec) -> Result<Setup, CliError> {
    let graph = load_graph(&spec.dataset, spec.seed)?;
    let partition = match &spec.partition.file {
        Some(path) => {
            let p = Partition::from_csv(path, graph.num_nodes()).map_err(spec_err)?;
            if p.num_parts() != spec.partition.parts {
                return Err(CliError::Spec(format!(
                    "{} has {} parts, spec asks for {}",
                    path.display(),
                    p.num_parts(),
                    spec.partition.parts
                )));
            }
            p
        }
        None => partition_graph(&graph, spec.partition.parts, spec.partition.method, spec.seed).map_err(spec_err)?,
    };
    let subs = build_subgraphs(&graph, &build_prop_matrix(&graph), &partition).map_err(spec_err)?;
    let mut dims = vec![graph.feature_dim()];
    dims.extend_from_slice(&spec.model.hidden);
    dims.push(graph.num_classes());
    let model0 = GcnModel::new(&dims, spec.model.activation, spec.seed).map_err(spec_err)?;
    Ok(Setup {
        graph,
        partition,
        subs,
        model0,
    })
}

fn out_dir(spec: &ExperimentSpec) -> PathBuf {
    spec.out.clone().unwrap_or_else(|| PathBuf::from(DEFAULT_OUT))
}

fn create_out(dir: &Path) -> Result<(), CliError> {
    fs::create_dir_all(dir).map_err(|e| CliError::Spec(format!("cannot create {}: {e}", dir.display())))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), CliError> {
    let mut w = BufWriter::new(File::create(path)?);
    serde_json::to_writer_pretty(&mut w, value).map_err(|e| CliError::Failed(e.to_string()))?;
    w.write_all(b"\n")?;
    w.flush()?;
    Ok(())
}

fn write_lines(path: &Path, f: impl FnOnce(&mut BufWriter<File>) -> std::io::Result<()>) -> Result<(), CliError> {
    let mut w = BufWriter::new(File::create(path)?);
    f(&mut w)?;
    w.flush()?;
    Ok(())
}

fn read_jsonl<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>, CliError> {
    let file = File::open(path).map_err(|e| CliError::Spec(format!("{}: {e}", path.display())))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| CliError::Spec(format!("{}:{}: {e}", path.display(), i + 1)))?);
    }
    Ok(out)
}

/// The `summary.json` of a training run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub mode: Mode,
    pub seed: u64,
    pub epochs: usize,
    pub sync_interval: usize,
    pub num_parts: usize,
    pub num_nodes: usize,
    pub initial_loss: f64,
    pub final_loss: f64,
    pub final_train_f1: f64,
    pub final_val_f1: Option<f64>,
    pub final_test_f1: Option<f64>,
    pub simulated_time: f64,
    pub ps_updates: u64,
    pub max_staleness: Option<u64>,
    pub cold_reads: u64,
    /// Halo reads by age in epochs.
    pub staleness_histogram: BTreeMap<u64, u64>,
    pub counters: CounterSnapshot,
    pub cost_inputs: CostInputs,
    pub schedule: Schedule,
    pub partition: PartitionStats,
    pub wall_seconds: f64,
}

fn summarize(spec: &ExperimentSpec, s: &Setup, m: &RunMetrics) -> Result<RunSummary, CliError> {
    let first = m.records.first().ok_or_else(|| CliError::Failed("run produced no records".into()))?;
    let last = m.records.last().expect("non-empty");
    let dims = s.model0.dims();
    let layers = s.model0.num_layers();
    let width = dims[1..layers].iter().copied().max().unwrap_or(0);
    Ok(RunSummary {
        mode: spec.train.mode,
        seed: spec.seed,
        epochs: spec.train.epochs,
        sync_interval: spec.train.sync_interval,
        num_parts: s.subs.len(),
        num_nodes: s.graph.num_nodes(),
        initial_loss: first.train_loss,
        final_loss: last.train_loss,
        final_train_f1: last.train_f1,
        final_val_f1: last.val_f1,
        final_test_f1: last.test_f1,
        simulated_time: last.time,
        ps_updates: m.ps_updates,
        max_staleness: m.max_staleness(),
        cold_reads: m.cold_reads,
        staleness_histogram: m.age_histogram.clone(),
        counters: m.counters,
        cost_inputs: CostInputs::from_subgraphs(&s.subs, dims),
        schedule: Schedule::from(&spec.train),
        partition: partition_stats(&s.subs, layers, width).map_err(|e| CliError::Failed(e.to_string()))?,
        wall_seconds: m.wall_seconds,
    })
}

/// Partitions, trains and writes `spec.toml`, `partition.csv`,
/// `metrics.jsonl`, `probes.jsonl` (when probing), `checkpoint_init.bin`,
/// `checkpoint_final.bin` and `summary.json`.
pub fn cmd_train(spec: &ExperimentSpec) -> Result<RunSummary, CliError> {
    let dir = out_dir(spec);
    create_out(&dir)?;
    fs::write(dir.join("spec.toml"), spec.to_toml()?)?;
    let s = setup(spec)?;
    s.partition
        .write_csv(&dir.join("partition.csv"))
        .map_err(|e| CliError::Failed(e.to_string()))?;
    save_checkpoint(&s.model0, &dir.join("checkpoint_init.bin")).map_err(|e| CliError::Failed(e.to_string()))?;
    let (model, metrics) = train(&s.graph, &s.subs, &s.model0, &spec.train)?;
    write_lines(&dir.join("metrics.jsonl"), |w| metrics.write_jsonl(w))?;
    if !metrics.probes.is_empty() {
        write_lines(&dir.join("probes.jsonl"), |w| metrics.write_probes_jsonl(w))?;
    }
    save_checkpoint(&model, &dir.join("checkpoint_final.bin")).map_err(|e| CliError::Failed(e.to_string()))?;
    let summary = summarize(spec, &s, &metrics)?;
    write_json(&dir.join("summary.json"), &summary)?;
    Ok(summary)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodResult {
    pub name: String,
    pub final_loss: f64,
    pub final_train_f1: f64,
    pub final_val_f1: Option<f64>,
    pub simulated_time: f64,
    pub time_to_target: Option<f64>,
    pub counters: CounterSnapshot,
    #[serde(skip)]
    pub records: Vec<EpochRecord>,
}

/// The `compare.json` report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompareReport {
    pub target_loss: f64,
    pub methods: Vec<MethodResult>,
}

impl CompareReport {
    pub fn method(&self, name: &str) -> Option<&MethodResult> {
        self.methods.iter().find(|m| m.name == name)
    }
}

/// Full-graph, sync and async runs from the same data and seed, plus one
/// sync run per sweep interval. Writes `compare.json`, `series.csv` and
/// `time_to_target.csv`.
pub fn cmd_compare(spec: &ExperimentSpec) -> Result<CompareReport, CliError> {
    let dir = out_dir(spec);
    create_out(&dir)?;
    fs::write(dir.join("spec.toml"), spec.to_toml()?)?;
    let s = setup(spec)?;
    let base = TrainConfig {
        probe_epochs: Default::default(),
        ..spec.train.clone()
    };
    let mut runs: Vec<(String, RunMetrics)> = Vec::new();
    let (_, full) = train_full_graph(&s.graph, &build_prop_matrix(&s.graph), &s.model0, &base)?;
    runs.push(("full_graph".into(), full));
    for mode in [Mode::Sync, Mode::Async] {
        let cfg = TrainConfig { mode, ..base.clone() };
        let (_, m) = train(&s.graph, &s.subs, &s.model0, &cfg)?;
        runs.push((if mode == Mode::Sync { "sync" } else { "async" }.into(), m));
    }
    for &n in &spec.compare.sweep_intervals {
        let cfg = TrainConfig {
            mode: Mode::Sync,
            sync_interval: n,
            ..base.clone()
        };
        let (_, m) = train(&s.graph, &s.subs, &s.model0, &cfg)?;
        runs.push((format!("sync_n{n}"), m));
    }

    let final_loss = |m: &RunMetrics| m.last().map_or(f64::NAN, |r| r.train_loss);
    let target_loss = spec
        .compare
        .target_loss
        .unwrap_or_else(|| TARGET_SLACK * runs.iter().map(|(_, m)| final_loss(m)).fold(f64::MIN, f64::max));
    let methods: Vec<MethodResult> = runs
        .into_iter()
        .map(|(name, m)| {
            let last = m.last().expect("records").clone();
            MethodResult {
                name,
                final_loss: last.train_loss,
                final_train_f1: last.train_f1,
                final_val_f1: last.val_f1,
                simulated_time: last.time,
                time_to_target: m.time_to_loss(target_loss),
                counters: m.counters,
                records: m.records,
            }
        })
        .collect();
    let report = CompareReport { target_loss, methods };

    let mut series = csv::Writer::from_path(dir.join("series.csv")).map_err(|e| CliError::Failed(e.to_string()))?;
    series
        .write_record(["method", "epoch", "time", "train_loss", "train_f1", "val_f1"])
        .map_err(|e| CliError::Failed(e.to_string()))?;
    for m in &report.methods {
        for r in &m.records {
            series
                .write_record([
                    m.name.clone(),
                    r.epoch.to_string(),
                    r.time.to_string(),
                    r.train_loss.to_string(),
                    r.train_f1.to_string(),
                    r.val_f1.map(|v| v.to_string()).unwrap_or_default(),
                ])
                .map_err(|e| CliError::Failed(e.to_string()))?;
        }
    }
    series.flush()?;
    let mut ttt = csv::Writer::from_path(dir.join("time_to_target.csv")).map_err(|e| CliError::Failed(e.to_string()))?;
    ttt.write_record(["method", "target_loss", "time_to_target"])
        .map_err(|e| CliError::Failed(e.to_string()))?;
    for m in &report.methods {
        ttt.write_record([
            m.name.clone(),
            target_loss.to_string(),
            m.time_to_target.map(|t| t.to_string()).unwrap_or_default(),
        ])
        .map_err(|e| CliError::Failed(e.to_string()))?;
    }
    ttt.flush()?;
    write_json(&dir.join("compare.json"), &report)?;
    Ok(report)
}

/// The `analysis.json` report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnalysisReport {
    pub staleness_eps: Vec<f64>,
    pub bound: BoundReport,
    pub cost_check: CostCheck,
    pub dissimilarity: Vec<DissimilarityEstimate>,
    pub convergence_slope: Option<f64>,
    pub staleness_histogram: BTreeMap<u64, u64>,
}

/// Reads a finished run from `run_dir` and writes `analysis.json`,
/// `bound.csv`, `cost.csv` and `staleness_histogram.csv` into `out`
/// (default: the run directory).
pub fn cmd_analyze(run_dir: &Path, out: Option<&Path>) -> Result<AnalysisReport, CliError> {
    let summary_path = run_dir.join("summary.json");
    let summary: RunSummary = serde_json::from_reader(BufReader::new(
        File::open(&summary_path).map_err(|e| CliError::Spec(format!("{} is not a run directory: {e}", run_dir.display())))?,
    ))
    .map_err(|e| CliError::Spec(format!("{}: {e}", summary_path.display())))?;
    let probes_path = run_dir.join("probes.jsonl");
    if !probes_path.exists() {
        return Err(CliError::Spec(format!("{} has no probe data; set train.probe_epochs", run_dir.display())));
    }
    let probes: Vec<ProbeRecord> = read_jsonl(&probes_path)?;
    let records: Vec<EpochRecord> = read_jsonl(&run_dir.join("metrics.jsonl"))?;
    let analysis = |e: digest_core::analysis::AnalysisError| CliError::Spec(e.to_string());
    let report = AnalysisReport {
        staleness_eps: measure_staleness_eps(&probes).map_err(analysis)?,
        bound: bound_report(&probes).map_err(analysis)?,
        cost_check: cross_check(&summary.cost_inputs, &summary.schedule, summary.counters).map_err(analysis)?,
        dissimilarity: probes.iter().filter_map(dissimilarity).collect(),
        convergence_slope: convergence_slope(&records),
        staleness_histogram: summary.staleness_histogram.clone(),
    };

    let dir = out.unwrap_or(run_dir);
    create_out(dir)?;
    write_json(&dir.join("analysis.json"), &report)?;
    let csv_err = |e: csv::Error| CliError::Failed(e.to_string());
    let mut bound = csv::Writer::from_path(dir.join("bound.csv")).map_err(csv_err)?;
    bound
        .write_record(["epoch", "eps", "tau", "bound", "error_vs_fresh", "error_vs_full", "holds", "certified"])
        .map_err(csv_err)?;
    for c in &report.bound.checks {
        let eps: Vec<String> = c.eps.iter().map(f64::to_string).collect();
        bound
            .write_record([
                c.epoch.to_string(),
                eps.join(";"),
                c.constants.tau.to_string(),
                c.bound.to_string(),
                c.error_vs_fresh.to_string(),
                c.error_vs_full.to_string(),
                c.holds.to_string(),
                c.constants.certified.to_string(),
            ])
            .map_err(csv_err)?;
    }
    bound.flush()?;
    let mut cost = csv::Writer::from_path(dir.join("cost.csv")).map_err(csv_err)?;
    cost.write_record(["counter", "predicted", "observed"]).map_err(csv_err)?;
    let (p, o) = (&report.cost_check.predicted, &report.cost_check.observed);
    for (name, a, b) in [
        ("pull_ops", p.pull_ops, o.pull_ops),
        ("push_ops", p.push_ops, o.push_ops),
        ("pulled_values", p.pulled_values, o.pulled_values),
        ("pushed_values", p.pushed_values, o.pushed_values),
        ("pulled_bytes", p.pulled_bytes, o.pulled_bytes),
        ("pushed_bytes", p.pushed_bytes, o.pushed_bytes),
        ("param_sync_bytes", p.param_sync_bytes, o.param_sync_bytes),
    ] {
        cost.write_record([name.to_string(), a.to_string(), b.to_string()]).map_err(csv_err)?;
    }
    cost.flush()?;
    let mut hist = csv::Writer::from_path(dir.join("staleness_histogram.csv")).map_err(csv_err)?;
    hist.write_record(["age", "count"]).map_err(csv_err)?;
    for (age, count) in &report.staleness_histogram {
        hist.write_record([age.to_string(), count.to_string()]).map_err(csv_err)?;
    }
    hist.flush()?;
    Ok(report)
}
