//! Run configuration: a TOML document with named nested sections, any
//! leaf overridable from the command line as `path.to.field=value`.
//! Unknown fields are rejected; the fully resolved config is echoed into
//! the run directory so a run can be reproduced bit-identically.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context};
use serde::{Deserialize, Serialize};

use vl_core::data::Corpus;
use vl_core::engine::{AdamWHyper, TrainConfig};
use vl_core::models::{FreezeSpec, InitSource, ModelConfig, TaskKind};
use vl_core::pretrain::{ItmSpec, MlmSpec};

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub run_dir: PathBuf,
    pub data: DataSection,
    #[serde(default)]
    pub model: Option<ModelConfig>,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub optimizer: AdamWHyper,
    #[serde(default)]
    pub freeze: FreezeSpec,
    #[serde(default)]
    pub init: InitSource,
    #[serde(default)]
    pub pretrain: PretrainSection,
    #[serde(default)]
    pub task: Option<TaskSection>,
    #[serde(default)]
    pub evaluate: EvalSection,
    #[serde(default)]
    pub ablate: Option<AblateSection>,
    #[serde(default)]
    pub compare: Option<CompareSection>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataSection {
    /// Corpus directory (vocab.txt, manifest.jsonl, images/).
    pub corpus: PathBuf,
    #[serde(default = "default_max_text_len")]
    pub max_text_len: usize,
    /// Generation parameters, used by `gen-data` only.
    #[serde(default)]
    pub gen: Option<GenSection>,
}

fn default_max_text_len() -> usize {
    16
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GenSection {
    /// pretrain | snli_ve | nlvr2 | ref_res | vqa
    pub task: String,
    pub train: usize,
    pub dev: usize,
    #[serde(default)]
    pub seed: Option<u64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PretrainSection {
    pub mlm: MlmSpec,
    pub itm: ItmSpec,
}

impl Default for PretrainSection {
    fn default() -> Self {
        PretrainSection {
            mlm: MlmSpec::default(),
            itm: ItmSpec::default(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskSection {
    pub kind: TaskKind,
    /// Checkpoint to fine-tune from / evaluate.
    #[serde(default)]
    pub checkpoint: Option<PathBuf>,
    /// Optional hidden width for a two-layer head.
    #[serde(default)]
    pub head_hidden: Option<usize>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSection {
    pub split: String,
    pub chunk: usize,
    /// Write per-example prediction dumps next to the metrics.
    pub dump: bool,
    /// Gallery size for retrieval evaluation.
    pub gallery: usize,
}

impl Default for EvalSection {
    fn default() -> Self {
        EvalSection {
            split: "dev".into(),
            chunk: 32,
            dump: true,
            gallery: 20,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AblateSection {
    /// Task corpora to fine-tune and evaluate on, in report column order.
    pub tasks: Vec<TaskEntry>,
    /// Steps for each grid cell's pretrain (train.* supplies the rest).
    pub finetune_steps: usize,
    #[serde(default)]
    pub finetune_lr: Option<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskEntry {
    pub kind: TaskKind,
    pub corpus: PathBuf,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CompareSection {
    /// Checkpoint holding a text tower (text_embedding + text_encoder).
    pub text_checkpoint: PathBuf,
    /// Checkpoint holding a vision tower (patch_embedding + vision_encoder).
    pub vision_checkpoint: PathBuf,
    pub tasks: Vec<TaskEntry>,
    pub finetune_steps: usize,
    #[serde(default)]
    pub finetune_lr: Option<f64>,
}

/// Parse the config file, apply `path.to.field=value` overrides, and
/// deserialize strictly.
pub fn load_config(path: &Path, overrides: &[String]) -> anyhow::Result<RunConfig> {
    let text = fs::read_to_string(path)
        .with_context(|| format!("cannot read config {}", path.display()))?;
    let mut value: toml::Value = text
        .parse()
        .with_context(|| format!("config {} is not valid TOML", path.display()))?;
    for entry in overrides {
        apply_override(&mut value, entry)?;
    }
    let mut config: RunConfig = value
        .try_into()
        .map_err(|e| anyhow!("config validation failed: {e}"))?;
    // The model seed defaults to the run seed.
    if let Some(model) = config.model.as_mut() {
        if model.seed == 0 {
            model.seed = config.seed;
        }
    }
    if config.train.seed == 0 {
        config.train.seed = config.seed;
    }
    Ok(config)
}

fn apply_override(root: &mut toml::Value, entry: &str) -> anyhow::Result<()> {
    let (path, raw) = entry
        .split_once('=')
        .ok_or_else(|| anyhow!("override {entry:?} is not of the form path.to.field=value"))?;
    let segments: Vec<&str> = path.split('.').collect();
    if segments.iter().any(|s| s.is_empty()) {
        bail!("override path {path:?} has empty segments");
    }
    // Parse the value as TOML; fall back to a plain string.
    let parsed: toml::Value = format!("v = {raw}")
        .parse::<toml::Value>()
        .ok()
        .and_then(|doc| doc.get("v").cloned())
        .unwrap_or_else(|| toml::Value::String(raw.to_string()));

    let mut node = root;
    for segment in &segments[..segments.len() - 1] {
        node = node
            .as_table_mut()
            .ok_or_else(|| anyhow!("override {path:?}: {segment} is not a table"))?
            .entry(segment.to_string())
            .or_insert_with(|| toml::Value::Table(Default::default()));
    }
    let table = node
        .as_table_mut()
        .ok_or_else(|| anyhow!("override {path:?}: parent is not a table"))?;
    table.insert(segments[segments.len() - 1].to_string(), parsed);
    Ok(())
}

impl RunConfig {
    /// Model config with the vocabulary size resolved from the corpus
    /// when the config leaves it at zero.
    pub fn resolved_model(&self, corpus: &Corpus) -> anyhow::Result<ModelConfig> {
        let mut model = self
            .model
            .clone()
            .ok_or_else(|| anyhow!("config has no [model] section"))?;
        if model.vocab_size == 0 {
            model.vocab_size = corpus.vocab.len();
        } else if model.vocab_size != corpus.vocab.len() {
            bail!(
                "model.vocab_size {} does not match corpus vocabulary {}",
                model.vocab_size,
                corpus.vocab.len()
            );
        }
        model.validate().map_err(|e| anyhow!("{e}"))?;
        Ok(model)
    }

    pub fn image_geometry(&self) -> anyhow::Result<(usize, usize)> {
        let model = self
            .model
            .as_ref()
            .ok_or_else(|| anyhow!("config has no [model] section"))?;
        Ok((model.image.height, model.image.width))
    }

    /// Write the byte-exact resolved config into the run directory.
    pub fn echo(&self, dir: &Path) -> anyhow::Result<()> {
        fs::create_dir_all(dir)?;
        let text = toml::to_string_pretty(self).context("serializing resolved config")?;
        fs::write(dir.join("config.toml"), text)?;
        Ok(())
    }

    pub fn eval_split(&self) -> anyhow::Result<vl_core::data::Split> {
        match self.evaluate.split.as_str() {
            "train" => Ok(vl_core::data::Split::Train),
            "dev" => Ok(vl_core::data::Split::Dev),
            other => bail!("evaluate.split {other:?} must be train or dev"),
        }
    }
}
