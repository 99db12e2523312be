//! Experiment configuration files (TOML, unknown keys rejected).
//!
//! ```toml
//! out = "runs/blobs-kels"
//!
//! [model]
//! family = "small-vgg-bn"      # or: graph = "net.toml"
//! width = 16
//!
//! [data]
//! source = "blobs"
//! classes = 10
//! train_per_class = 50
//! eval_per_class = 50
//! shape = [3, 16, 16]
//!
//! [train]
//! generations = 3
//! technique = "kels"
//! split_rate = 0.5
//! loss = { kind = "smooth-ce", alpha = 0.1 }
//! ```
//!
//! Relative paths are resolved against the directory holding the config file.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{load_idx, load_manifest, synthetic_blobs, BlobsConfig, DataError, Dataset};
use crate::graph::{build_architecture_with, ArchOptions, Family, GraphDescription, GraphError, Head, NetworkGraph};
use crate::train::{Task, TrainConfig, TrainError};

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("{}: {source}", .path.display())]
    Read {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{0}")]
    Parse(String),
    #[error("override `{0}`: expected key=value")]
    OverrideSyntax(String),
    #[error("override `{key}`: `{segment}` is not a table")]
    OverridePath { key: String, segment: String },
    #[error("{0}")]
    Invalid(String),
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error(transparent)]
    Train(#[from] TrainError),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Output directory for checkpoints and reports.
    #[serde(default = "default_out")]
    pub out: PathBuf,
    pub model: ModelConfig,
    /// Optional for commands that never touch data (`profile`).
    #[serde(default)]
    pub data: Option<DataSource>,
    #[serde(default)]
    pub train: TrainConfig,
}

fn default_out() -> PathBuf {
    PathBuf::from("runs/default")
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    /// Built-in family name; exclusive with `graph`.
    #[serde(default)]
    pub family: Option<String>,
    /// Path to a graph description file; exclusive with `family`.
    #[serde(default)]
    pub graph: Option<PathBuf>,
    /// Output classes; defaults to the dataset's class count.
    #[serde(default)]
    pub classes: Option<usize>,
    /// Per-sample `[C, H, W]`; defaults to the dataset's sample shape.
    #[serde(default)]
    pub input: Option<[usize; 3]>,
    #[serde(default)]
    pub width: Option<usize>,
    #[serde(default)]
    pub hidden: Vec<usize>,
    /// Embedding width for retrieval losses.
    #[serde(default = "default_embedding_dim")]
    pub embedding_dim: usize,
}

fn default_embedding_dim() -> usize {
    64
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "kebab-case")]
pub enum DataSource {
    Blobs(BlobsConfig),
    Idx(IdxSource),
    Manifest(ManifestSource),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IdxSource {
    pub train_images: PathBuf,
    pub train_labels: PathBuf,
    pub eval_images: PathBuf,
    pub eval_labels: PathBuf,
    #[serde(default = "default_idx_classes")]
    pub classes: usize,
    /// Keep only the first `train_limit` training samples.
    #[serde(default)]
    pub train_limit: Option<usize>,
    #[serde(default)]
    pub eval_limit: Option<usize>,
}

fn default_idx_classes() -> usize {
    10
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestSource {
    pub path: PathBuf,
    pub shape: [usize; 3],
    pub classes: usize,
}

impl DataSource {
    pub fn classes(&self) -> usize {
        match self {
            DataSource::Blobs(b) => b.classes,
            DataSource::Idx(i) => i.classes,
            DataSource::Manifest(m) => m.classes,
        }
    }

    /// Known before loading for generated and manifest data.
    pub fn shape(&self) -> Option<[usize; 3]> {
        match self {
            DataSource::Blobs(b) => Some(b.shape),
            DataSource::Idx(_) => None,
            DataSource::Manifest(m) => Some(m.shape),
        }
    }

    fn resolve(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        match self {
            DataSource::Blobs(_) => {}
            DataSource::Idx(i) => {
                fix(&mut i.train_images);
                fix(&mut i.train_labels);
                fix(&mut i.eval_images);
                fix(&mut i.eval_labels);
            }
            DataSource::Manifest(m) => fix(&mut m.path),
        }
    }

    /// Returns the train and eval splits.
    pub fn load(&self) -> Result<(Dataset, Dataset), DataError> {
        match self {
            DataSource::Blobs(b) => synthetic_blobs(b),
            DataSource::Idx(i) => {
                let train = load_idx(&i.train_images, &i.train_labels, i.train_limit)?;
                let eval = load_idx(&i.eval_images, &i.eval_labels, i.eval_limit)?;
                for (split, d) in [("train", &train), ("eval", &eval)] {
                    if let Some(&bad) = d.labels().iter().find(|&&l| l >= i.classes) {
                        return Err(DataError::Invalid(format!(
                            "{split} label {bad} is out of range for {} classes",
                            i.classes
                        )));
                    }
                }
                Ok((relabel(train, i.classes)?, relabel(eval, i.classes)?))
            }
            DataSource::Manifest(m) => load_manifest(&m.path, m.shape, m.classes),
        }
    }
}

fn relabel(d: Dataset, classes: usize) -> Result<Dataset, DataError> {
    if d.classes() == classes {
        return Ok(d);
    }
    Dataset::new(d.sample_shape(), d.as_slice().to_vec(), d.labels().to_vec(), classes)
}

/// Parses `value` as a TOML value, falling back to a bare string.
fn parse_override_value(value: &str) -> toml::Value {
    toml::from_str::<toml::Table>(&format!("v = {value}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(value.to_string()))
}

/// Sets a dot-separated key such as `train.lr` in a TOML table.
pub fn apply_override(table: &mut toml::Table, assignment: &str) -> Result<(), ConfigError> {
    let (key, value) = assignment
        .split_once('=')
        .ok_or_else(|| ConfigError::OverrideSyntax(assignment.to_string()))?;
    let key = key.trim();
    let segments: Vec<&str> = key.split('.').collect();
    if segments.iter().any(|s| s.is_empty()) {
        return Err(ConfigError::OverrideSyntax(assignment.to_string()));
    }
    let (last, parents) = segments.split_last().expect("split yields a segment");
    let mut cur = table;
    for seg in parents {
        let entry = cur
            .entry(seg.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cur = entry.as_table_mut().ok_or_else(|| ConfigError::OverridePath {
            key: key.to_string(),
            segment: seg.to_string(),
        })?;
    }
    cur.insert(last.to_string(), parse_override_value(value.trim()));
    Ok(())
}

impl ExperimentConfig {
    /// Parses TOML text with `overrides` applied; relative paths resolve against `base`.
    pub fn from_toml(text: &str, overrides: &[String], base: &Path) -> Result<Self, ConfigError> {
        let mut table: toml::Table = toml::from_str(text).map_err(|e| ConfigError::Parse(e.to_string()))?;
        for o in overrides {
            apply_override(&mut table, o)?;
        }
        let mut cfg: Self = table
            .try_into()
            .map_err(|e: toml::de::Error| ConfigError::Parse(e.to_string()))?;
        if cfg.out.is_relative() {
            cfg.out = base.join(&cfg.out);
        }
        if let Some(g) = cfg.model.graph.as_mut() {
            if g.is_relative() {
                *g = base.join(&*g);
            }
        }
        if let Some(d) = cfg.data.as_mut() {
            d.resolve(base);
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path, overrides: &[String]) -> Result<Self, ConfigError> {
        let text = fs::read_to_string(path).map_err(|source| ConfigError::Read {
            path: path.to_path_buf(),
            source,
        })?;
        let base = path.parent().unwrap_or(Path::new(""));
        Self::from_toml(&text, overrides, base)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Static checks that do not need the dataset loaded.
    pub fn validate(&self) -> Result<(), ConfigError> {
        self.train.validate()?;
        match (&self.model.family, &self.model.graph) {
            (Some(_), Some(_)) => {
                return Err(ConfigError::Invalid(
                    "set only one of model.family and model.graph".into(),
                ))
            }
            (None, None) => return Err(ConfigError::Invalid("model.family or model.graph is required".into())),
            (Some(f), None) => {
                f.parse::<Family>()?;
            }
            (None, Some(_)) => {}
        }
        if self.model.embedding_dim == 0 {
            return Err(ConfigError::Invalid("model.embedding_dim must be positive".into()));
        }
        if let Some(d) = &self.data {
            if let DataSource::Blobs(b) = d {
                b.validate().map_err(|e| ConfigError::Invalid(format!("data: {e}")))?;
            }
            if let (Some(c), Task::Classification) = (self.model.classes, self.train.loss.task()) {
                if c != d.classes() {
                    return Err(ConfigError::Invalid(format!(
                        "model.classes = {c} but the data has {} classes",
                        d.classes()
                    )));
                }
            }
            if let (Some(a), Some(b)) = (self.model.input, d.shape()) {
                if a != b {
                    return Err(ConfigError::Invalid(format!(
                        "model.input = {a:?} but the data samples are {b:?}"
                    )));
                }
            }
        }
        if self.model.family.is_some() && self.input_shape().is_none() {
            return Err(ConfigError::Invalid(
                "model.input is required when the data source does not fix the sample shape".into(),
            ));
        }
        let graph = self.build_graph()?;
        if let Some(d) = &self.data {
            self.train.check_graph(&graph, d.classes())?;
        }
        Ok(())
    }

    pub fn input_shape(&self) -> Option<[usize; 3]> {
        self.model
            .input
            .or_else(|| self.data.as_ref().and_then(DataSource::shape))
    }

    fn head(&self) -> Head {
        match self.train.loss.task() {
            Task::Classification => Head::Classifier,
            Task::Retrieval => Head::Embedding,
        }
    }

    /// The dense network described by the `[model]` section.
    pub fn build_graph(&self) -> Result<NetworkGraph, ConfigError> {
        if let Some(path) = &self.model.graph {
            let text = fs::read_to_string(path).map_err(|source| ConfigError::Read {
                path: path.clone(),
                source,
            })?;
            let graph = GraphDescription::parse(&text)?.build()?;
            if let Some(input) = self.input_shape() {
                let s = graph.input_shape();
                if [s.channels, s.height, s.width] != input {
                    return Err(ConfigError::Invalid(format!(
                        "graph input is {:?} but the configuration expects {input:?}",
                        [s.channels, s.height, s.width]
                    )));
                }
            }
            return Ok(graph);
        }
        let family: Family = self.model.family.as_deref().unwrap_or_default().parse()?;
        let input = self
            .input_shape()
            .ok_or_else(|| ConfigError::Invalid("model.input is required".into()))?;
        let head = self.head();
        let outputs = match head {
            Head::Classifier => self
                .model
                .classes
                .or_else(|| self.data.as_ref().map(DataSource::classes))
                .ok_or_else(|| ConfigError::Invalid("model.classes is required without a data section".into()))?,
            Head::Embedding => self.model.embedding_dim,
        };
        let opts = ArchOptions {
            width: self.model.width,
            hidden: self.model.hidden.clone(),
            head,
        };
        Ok(build_architecture_with(family, outputs, input, &opts)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::split::Technique;
    use crate::train::LossKind;

    const BASE: &str = r#"
out = "runs/x"

[model]
family = "toy-resnet"

[data]
source = "blobs"
classes = 3
train_per_class = 4
eval_per_class = 2
shape = [3, 8, 8]

[train]
epochs = 2
technique = "wels"
split_rate = 0.8
loss = { kind = "ce" }
"#;

    fn parse(text: &str, overrides: &[&str]) -> Result<ExperimentConfig, ConfigError> {
        let o: Vec<String> = overrides.iter().map(|s| s.to_string()).collect();
        ExperimentConfig::from_toml(text, &o, Path::new("/base"))
    }

    #[test]
    fn parses_a_full_config() {
        let cfg = parse(BASE, &[]).unwrap();
        assert_eq!(cfg.out, PathBuf::from("/base/runs/x"));
        assert_eq!(cfg.train.technique, Technique::Wels);
        assert_eq!(cfg.train.split_rate, 0.8);
        assert_eq!(cfg.train.loss, LossKind::Ce {});
        assert_eq!(cfg.train.generations, TrainConfig::default().generations);
        assert_eq!(cfg.build_graph().unwrap().output_width(), 3);
    }

    #[test]
    fn unknown_keys_are_rejected_everywhere() {
        for (from, to) in [
            ("epochs = 2", "epochs = 2\nspilt_rate = 0.5"),
            ("family = \"toy-resnet\"", "family = \"toy-resnet\"\ndepth = 3"),
            ("shape = [3, 8, 8]", "shape = [3, 8, 8]\nsigma = 1"),
            ("out = \"runs/x\"", "out = \"runs/x\"\nverbose = true"),
            ("{ kind = \"ce\" }", "{ kind = \"ce\", alpha = 0.1 }"),
        ] {
            let text = BASE.replace(from, to);
            assert!(parse(&text, &[]).is_err(), "accepted: {to}");
        }
    }

    #[test]
    fn overrides_use_dot_paths() {
        let cfg = parse(
            BASE,
            &["train.split_rate=0.3", "train.technique=kels", "data.noise=2.5"],
        )
        .unwrap();
        assert_eq!(cfg.train.split_rate, 0.3);
        assert_eq!(cfg.train.technique, Technique::Kels);
        let Some(DataSource::Blobs(b)) = &cfg.data else {
            panic!()
        };
        assert_eq!(b.noise, 2.5);
        assert!(parse(BASE, &["train.nope=1"]).is_err());
        assert!(matches!(
            parse(BASE, &["train.lr"]),
            Err(ConfigError::OverrideSyntax(_))
        ));
        assert!(matches!(
            parse(BASE, &["out.x=1"]),
            Err(ConfigError::OverridePath { .. })
        ));
    }

    #[test]
    fn static_errors_surface_at_parse_time() {
        assert!(parse(BASE, &["train.split_rate=1.5"]).is_err());
        assert!(parse(BASE, &["model.family=resnet99"]).is_err());
        assert!(parse(BASE, &["model.classes=5"]).is_err());
        assert!(parse(BASE, &["train.mask_policy=resample", "train.technique=kels"]).is_err());
        assert!(parse(BASE, &["model.input=[1, 8, 8]"]).is_err());
    }

    #[test]
    fn profile_only_config_needs_no_data() {
        let text = "[model]\nfamily = \"resnet18\"\nclasses = 102\ninput = [3, 224, 224]\n";
        let cfg = parse(text, &[]).unwrap();
        assert!(cfg.data.is_none());
        assert_eq!(cfg.build_graph().unwrap().output_width(), 102);
    }

    #[test]
    fn echo_round_trips() {
        let cfg = parse(BASE, &[]).unwrap();
        let again = ExperimentConfig::from_toml(&cfg.to_toml(), &[], Path::new("/elsewhere")).unwrap();
        assert_eq!(again, cfg);
    }
}
