//! Run configuration: one JSON document with every knob of a training run.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use conformal_retrofit::baselines::StandardConfig;
use conformal_retrofit::data::SplitRatios;
use conformal_retrofit::layers::Architecture;
use conformal_retrofit::losses::{Conformality, LossConfig, Variant};
use conformal_retrofit::train::TrainConfig;
use conformal_retrofit::Manifold;
use serde::{Deserialize, Serialize};

use crate::error::{io_err, CliError, CliResult};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    /// Edge list, `child parent` per line.
    pub edges: PathBuf,
    /// GloVe-style text embeddings keyed by node name.
    pub embeddings: PathBuf,
    #[serde(default)]
    pub embedding_dim: Option<usize>,
    /// `node<TAB>split` file; generated from `split_ratios` and `split_seed`
    /// when absent.
    #[serde(default)]
    pub split_file: Option<PathBuf>,
    #[serde(default)]
    pub split_ratios: SplitRatios,
    #[serde(default)]
    pub split_seed: u64,
    /// Full chain such as `E50 -> E256 -> E256 -> S30xH30`; built from
    /// `hidden_width`, `depth` and `target` when absent.
    #[serde(default)]
    pub architecture: Option<Architecture>,
    #[serde(default = "default_width")]
    pub hidden_width: usize,
    #[serde(default = "default_depth")]
    pub depth: usize,
    #[serde(default)]
    pub target: Option<Manifold>,
    pub loss: LossConfig,
    /// Conformality given as a label from `conformality_labels` instead of a
    /// bound. Overrides `loss.conformality`.
    #[serde(default)]
    pub neg_log_conformality: Option<f64>,
    /// Label to bound table used by `neg_log_conformality`, for example
    /// `{"0": "inf", "1": 0.3679}`.
    #[serde(default)]
    pub conformality_labels: BTreeMap<String, Conformality>,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub standard: StandardConfig,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_out_dir")]
    pub out_dir: PathBuf,
}

fn default_width() -> usize {
    256
}
fn default_depth() -> usize {
    2
}
fn default_out_dir() -> PathBuf {
    PathBuf::from("runs/latest")
}

/// Looks `label` up in a label table; keys are compared as numbers.
pub fn conformality_from_label(label: f64, table: &BTreeMap<String, Conformality>) -> CliResult<Conformality> {
    let mut found = None;
    for (key, c) in table {
        let k: f64 = key
            .trim()
            .parse()
            .map_err(|_| CliError::Usage(format!("conformality label `{key}` is not a number")))?;
        if k == label {
            found = Some(*c);
        }
    }
    found.ok_or_else(|| CliError::Usage(format!("neg_log_conformality {label} has no entry in conformality_labels")))
}

impl RunConfig {
    pub fn load(path: &Path) -> CliResult<Self> {
        let text = fs::read_to_string(path).map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", path.display())))?;
        let mut cfg: RunConfig = serde_json::from_str(&text)?;
        let base = path.parent().unwrap_or(Path::new("."));
        cfg.edges = rebase(base, &cfg.edges);
        cfg.embeddings = rebase(base, &cfg.embeddings);
        cfg.split_file = cfg.split_file.map(|p| rebase(base, &p));
        cfg.out_dir = rebase(base, &cfg.out_dir);
        Ok(cfg)
    }

    /// Fills every derived field so the persisted copy is self-contained, and
    /// applies command-line overrides.
    pub fn resolve(mut self, seed: Option<u64>, out: Option<PathBuf>) -> CliResult<Self> {
        if let Some(s) = seed {
            self.seed = s;
        }
        if let Some(o) = out {
            self.out_dir = o;
        }
        for (what, p) in [("edges", &self.edges), ("embeddings", &self.embeddings)] {
            if !p.is_file() {
                return Err(CliError::Usage(format!("{what} file {} does not exist", p.display())));
            }
        }
        if let Some(p) = &self.split_file {
            if !p.is_file() {
                return Err(CliError::Usage(format!("split file {} does not exist", p.display())));
            }
        }
        if self.train.seed != 0 && self.train.seed != self.seed {
            return Err(CliError::Usage("set the seed at the top level, not in `train`".into()));
        }
        self.train.seed = self.seed;
        if let Some(label) = self.neg_log_conformality {
            self.loss.conformality = conformality_from_label(label, &self.conformality_labels)?;
        }
        let dim = match self.embedding_dim {
            Some(d) => d,
            None => infer_dim(&self.embeddings)?,
        };
        self.embedding_dim = Some(dim);
        let source = Manifold::Euclidean(dim);
        let arch = match self.architecture.take() {
            Some(a) => a,
            None => {
                let target = self.target.clone().unwrap_or_else(|| source.clone());
                Architecture::standard(source.clone(), self.hidden_width, self.depth, target)
            }
        };
        if arch.source() != &source {
            return Err(CliError::Usage(format!(
                "architecture source {} does not match embedding dimension {dim}",
                arch.source()
            )));
        }
        self.target = Some(arch.target().clone());
        self.architecture = Some(arch);
        self.split_ratios.validate()?;
        self.loss.validate()?;
        self.train.validate()?;
        if self.loss.variant == Variant::Explicit && !self.target.as_ref().is_some_and(|t| *t == source) {
            return Err(CliError::Usage(format!("explicit retrofitting needs target {source}")));
        }
        Ok(self)
    }

    pub fn architecture(&self) -> &Architecture {
        self.architecture.as_ref().expect("resolved config")
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes") + "\n"
    }
}

fn rebase(base: &Path, p: &Path) -> PathBuf {
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.join(p)
    }
}

/// Number of values on the first data line of an embedding file.
pub fn infer_dim(path: &Path) -> CliResult<usize> {
    let text = fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    text.lines()
        .map(str::trim)
        .find(|l| !l.is_empty() && !l.starts_with('#'))
        .map(|l| l.split_whitespace().count() - 1)
        .filter(|&d| d > 0)
        .ok_or_else(|| CliError::Data(format!("{}: no embedding rows", path.display())))
}
