//! Experiment spec files.
//!
//! A spec is a TOML document. `include = "base.toml"` (or a list of paths)
//! pulls in other specs first; keys in the including file win, tables merge
//! recursively. Relative paths resolve against the file that names them.
//!
//! ```toml
//! seed = 7
//!
//! [dataset]
//! kind = "sbm"
//! blocks = 4
//! nodes_per_block = 75
//! p_in = 0.2
//! p_out = 0.01
//! feature_dim = 8
//!
//! [model]
//! hidden = [16]
//! activation = "relu"
//!
//! [partition]
//! parts = 4
//! method = "bfs_greedy"
//!
//! [train]
//! epochs = 200
//! sync_interval = 5
//! ```

use std::fs;
use std::path::{Path, PathBuf};

use digest_core::engine::TrainConfig;
use digest_core::nn::Activation;
use digest_core::partition::PartitionMethod;
use serde::{Deserialize, Serialize};
use toml::{Table, Value};

use crate::CliError;

const MAX_INCLUDE_DEPTH: usize = 16;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentSpec {
    /// Seeds the dataset generator, partitioner, weight initialisation and delays.
    #[serde(default)]
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub out: Option<PathBuf>,
    pub dataset: DatasetSpec,
    #[serde(default)]
    pub model: ModelSpec,
    #[serde(default)]
    pub partition: PartitionSpec,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub compare: CompareSpec,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DatasetSpec {
    Karate {},
    Sbm {
        blocks: usize,
        nodes_per_block: usize,
        p_in: f64,
        p_out: f64,
        feature_dim: usize,
    },
    Files {
        edges: PathBuf,
        features: PathBuf,
        labels: PathBuf,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        masks: Option<PathBuf>,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSpec {
    pub hidden: Vec<usize>,
    pub activation: Activation,
}

impl Default for ModelSpec {
    fn default() -> Self {
        Self {
            hidden: vec![16],
            activation: Activation::Relu,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PartitionSpec {
    pub parts: usize,
    pub method: PartitionMethod,
    /// `node_id,part_id` CSV; overrides `method`.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub file: Option<PathBuf>,
}

impl Default for PartitionSpec {
    fn default() -> Self {
        Self {
            parts: 2,
            method: PartitionMethod::BfsGreedy,
            file: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CompareSpec {
    /// Loss the time-to-target table measures against. Defaults to 1.05 times
    /// the largest final loss among the compared runs.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub target_loss: Option<f64>,
    /// Extra sync runs, one per interval.
    pub sweep_intervals: Vec<usize>,
}

impl ExperimentSpec {
    pub fn validate(&self) -> Result<(), CliError> {
        if self.partition.parts == 0 {
            return Err(CliError::Spec("partition.parts must be ≥ 1".into()));
        }
        if self.model.hidden.contains(&0) {
            return Err(CliError::Spec("hidden widths must be ≥ 1".into()));
        }
        self.train.validate(self.partition.parts).map_err(|e| CliError::Spec(e.to_string()))?;
        if let Some(&n) = self.compare.sweep_intervals.iter().find(|&&n| n == 0) {
            return Err(CliError::Spec(format!("sweep interval {n}: sync_interval must be ≥ 1")));
        }
        Ok(())
    }

    pub fn to_toml(&self) -> Result<String, CliError> {
        toml::to_string(self).map_err(|e| CliError::Failed(format!("cannot serialise spec: {e}")))
    }
}

/// Command-line adjustments applied after includes.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    /// `dotted.key=value`, value parsed as TOML or taken as a string.
    pub pairs: Vec<String>,
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
}

/// Reads `path` with its includes, applies `overrides` and validates the result.
pub fn load_spec(path: &Path, overrides: &Overrides) -> Result<ExperimentSpec, CliError> {
    let mut table = read_table(path, 0)?;
    for pair in &overrides.pairs {
        apply_override(&mut table, pair)?;
    }
    if let Some(seed) = overrides.seed {
        table.insert("seed".into(), Value::Integer(seed as i64));
    }
    if let Some(out) = &overrides.out {
        table.insert("out".into(), Value::String(out.display().to_string()));
    }
    let mut spec: ExperimentSpec = Value::Table(table)
        .try_into()
        .map_err(|e: toml::de::Error| CliError::Spec(format!("{}: {}", path.display(), e.message())))?;
    spec.train.seed = spec.seed;
    spec.validate()?;
    Ok(spec)
}

pub fn parse_spec(text: &str) -> Result<ExperimentSpec, CliError> {
    let mut spec: ExperimentSpec = toml::from_str(text).map_err(|e| CliError::Spec(e.message().to_string()))?;
    spec.train.seed = spec.seed;
    spec.validate()?;
    Ok(spec)
}

fn read_table(path: &Path, depth: usize) -> Result<Table, CliError> {
    if depth > MAX_INCLUDE_DEPTH {
        return Err(CliError::Spec(format!("{}: includes nest too deeply", path.display())));
    }
    let text = fs::read_to_string(path).map_err(|e| CliError::Spec(format!("{}: {e}", path.display())))?;
    let mut table: Table = toml::from_str(&text).map_err(|e| CliError::Spec(format!("{}: {}", path.display(), e.message())))?;
    let dir = path.parent().unwrap_or(Path::new("."));
    rebase_paths(&mut table, dir);
    let includes = match table.remove("include") {
        None => Vec::new(),
        Some(Value::String(s)) => vec![s],
        Some(Value::Array(a)) => a
            .into_iter()
            .map(|v| match v {
                Value::String(s) => Ok(s),
                other => Err(CliError::Spec(format!("{}: include entries must be paths, got {other}", path.display()))),
            })
            .collect::<Result<_, _>>()?,
        Some(other) => return Err(CliError::Spec(format!("{}: include must be a path or list, got {other}", path.display()))),
    };
    let mut base = Table::new();
    for inc in includes {
        let inner = read_table(&dir.join(inc), depth + 1)?;
        merge(&mut base, inner);
    }
    merge(&mut base, table);
    Ok(base)
}

fn rebase_paths(table: &mut Table, dir: &Path) {
    let fields: [(&str, &[&str]); 2] = [("dataset", &["edges", "features", "labels", "masks"]), ("partition", &["file"])];
    for (section, keys) in fields {
        if let Some(Value::Table(t)) = table.get_mut(section) {
            for key in keys {
                if let Some(Value::String(p)) = t.get_mut(*key) {
                    if Path::new(p.as_str()).is_relative() {
                        *p = dir.join(p.as_str()).display().to_string();
                    }
                }
            }
        }
    }
}

fn merge(base: &mut Table, top: Table) {
    for (k, v) in top {
        match (base.get_mut(&k), v) {
            (Some(Value::Table(b)), Value::Table(t)) => merge(b, t),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

fn apply_override(table: &mut Table, pair: &str) -> Result<(), CliError> {
    let (key, raw) = pair
        .split_once('=')
        .ok_or_else(|| CliError::Spec(format!("override `{pair}` is not key=value")))?;
    let value = toml::from_str::<Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| Value::String(raw.to_string()));
    let parts: Vec<&str> = key.trim().split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(CliError::Spec(format!("override key `{key}` is malformed")));
    }
    let (last, path) = parts.split_last().expect("non-empty");
    let mut cur = table;
    for p in path {
        let entry = cur.entry(p.to_string()).or_insert_with(|| Value::Table(Table::new()));
        cur = match entry {
            Value::Table(t) => t,
            _ => return Err(CliError::Spec(format!("override `{key}`: `{p}` is not a table"))),
        };
    }
    cur.insert(last.to_string(), value);
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    const KARATE: &str = "seed = 3\n[dataset]\nkind = \"karate\"\n[train]\nepochs = 5\n";

    #[test]
    fn minimal_spec_uses_defaults() {
        let spec = parse_spec(KARATE).unwrap();
        assert_eq!(spec.dataset, DatasetSpec::Karate {});
        assert_eq!(spec.partition.parts, 2);
        assert_eq!(spec.train.epochs, 5);
        assert_eq!(spec.train.seed, 3);
        assert_eq!(spec.train.sync_interval, 10);
    }

    #[test]
    fn zero_interval_is_rejected() {
        let err = parse_spec(&format!("{KARATE}sync_interval = 0\n")).unwrap_err();
        assert!(err.to_string().contains("sync_interval must be ≥ 1"), "{err}");
        assert_eq!(err.exit_code(), 2);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(parse_spec(&format!("{KARATE}epoch = 3\n")).is_err());
        assert!(parse_spec("[dataset]\nkind = \"karate\"\ncolour = 1\n").is_err());
    }

    #[test]
    fn includes_overrides_and_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        fs::write(dir.path().join("base.toml"), "[train]\nepochs = 9\nlr = 0.5\n[partition]\nparts = 3\n").unwrap();
        fs::write(
            dir.path().join("run.toml"),
            "include = \"base.toml\"\n[dataset]\nkind = \"files\"\nedges = \"e.txt\"\nfeatures = \"x.csv\"\nlabels = \"y.csv\"\n[train]\nlr = 0.1\n",
        )
        .unwrap();
        let over = Overrides {
            pairs: vec!["train.sync_interval=4".into(), "train.mode=async".into(), "model.hidden=[8, 4]".into()],
            seed: Some(11),
            out: Some("runs/x".into()),
        };
        let spec = load_spec(&dir.path().join("run.toml"), &over).unwrap();
        assert_eq!(spec.train.epochs, 9);
        assert_eq!(spec.train.lr, 0.1);
        assert_eq!(spec.train.sync_interval, 4);
        assert_eq!(spec.train.mode, digest_core::engine::Mode::Async);
        assert_eq!(spec.model.hidden, vec![8, 4]);
        assert_eq!(spec.partition.parts, 3);
        assert_eq!(spec.seed, 11);
        assert_eq!(spec.out, Some(PathBuf::from("runs/x")));
        match &spec.dataset {
            DatasetSpec::Files { edges, .. } => assert_eq!(edges, &dir.path().join("e.txt")),
            other => panic!("{other:?}"),
        }
        let back = parse_spec(&spec.to_toml().unwrap()).unwrap();
        assert_eq!(back, spec);
    }

    #[test]
    fn include_cycles_stop() {
        let dir = tempfile::tempdir().unwrap();
        fs::write(dir.path().join("a.toml"), "include = \"a.toml\"\n").unwrap();
        let err = load_spec(&dir.path().join("a.toml"), &Overrides::default()).unwrap_err();
        assert!(err.to_string().contains("nest"));
    }

    #[test]
    fn bad_override_key() {
        let mut t = Table::new();
        assert!(apply_override(&mut t, "novalue").is_err());
        assert!(apply_override(&mut t, "a..b=1").is_err());
        apply_override(&mut t, "a=1").unwrap();
        assert!(apply_override(&mut t, "a.b=1").is_err());
    }
}
