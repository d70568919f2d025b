//! One-tower and two-tower vision-language encoders: configuration,
//! construction and initialization, forward passes, per-module freezing,
//! and parameter accounting.
//!
//! Every parameter has a unique hierarchical dot-separated name (for
//! example `text_encoder.block3.ffn.w1.weight`); that naming scheme is
//! part of the checkpoint contract.

use std::path::PathBuf;

use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::data::Batch;
use crate::engine::checkpoint;
use crate::error::{Error, Result};
use crate::layers::{
    encode, ClassifierHead, CrossModalBlock, EncoderBlock, Linear, PatchEmbedding, TextEmbedding,
};
use crate::rng::{name_hash, stream, Domain};
use crate::scalar::Scalar;
use crate::tensor::{Graph, IdMatrix, KeyMask, Tensor};

pub const INIT_STD: f64 = 0.02;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    OneTower,
    TwoTower,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ImageGeometry {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub patch: usize,
}

impl ImageGeometry {
    pub fn patch_count(&self) -> usize {
        (self.height / self.patch) * (self.width / self.patch)
    }

    /// Patch tokens plus the CLS token.
    pub fn vision_len(&self) -> usize {
        self.patch_count() + 1
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TowerConfig {
    pub hidden: usize,
    /// Embedding width; projected to `hidden` when they differ.
    pub embed: usize,
    pub intermediate: usize,
    pub heads: usize,
    pub layers: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VisionTowerConfig {
    pub hidden: usize,
    pub intermediate: usize,
    pub heads: usize,
    pub layers: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CrossConfig {
    /// Defaults to `max(text hidden, vision hidden)`.
    #[serde(default)]
    pub hidden: Option<usize>,
    pub heads: usize,
    pub layers: usize,
    /// Feed-forward width inside cross-modal blocks; defaults to 4x hidden.
    #[serde(default)]
    pub intermediate: Option<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    SnliVe,
    Nlvr2,
    RefRes,
    Retrieval,
    Vqa,
}

impl TaskKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            TaskKind::SnliVe => "snli_ve",
            TaskKind::Nlvr2 => "nlvr2",
            TaskKind::RefRes => "ref_res",
            TaskKind::Retrieval => "retrieval",
            TaskKind::Vqa => "vqa",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskHeadConfig {
    pub kind: TaskKind,
    /// Classes for classification heads; answer-vocabulary size for VQA;
    /// unused for retrieval and reference resolution.
    #[serde(default)]
    pub classes: usize,
    /// When set, the head is two linear layers with a GELU between.
    #[serde(default)]
    pub hidden: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub model_type: ModelKind,
    pub vocab_size: usize,
    pub text_max_len: usize,
    pub image: ImageGeometry,
    pub text: TowerConfig,
    pub vision: VisionTowerConfig,
    #[serde(default)]
    pub cross: Option<CrossConfig>,
    #[serde(default)]
    pub head: Option<TaskHeadConfig>,
    #[serde(default)]
    pub dropout: f64,
    #[serde(default)]
    pub seed: u64,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::Config(msg));
        if self.vocab_size < 5 {
            return fail(format!(
                "vocab_size {} leaves no room for the 5 reserved tokens",
                self.vocab_size
            ));
        }
        if self.image.height % self.image.patch != 0 || self.image.width % self.image.patch != 0 {
            return fail(format!(
                "image {}x{} not divisible by patch {}",
                self.image.height, self.image.width, self.image.patch
            ));
        }
        if self.text.hidden % self.text.heads != 0 {
            return fail(format!(
                "text hidden {} not divisible by {} heads",
                self.text.hidden, self.text.heads
            ));
        }
        match self.model_type {
            ModelKind::OneTower => {
                if self.cross.is_some() {
                    return fail("one-tower models have no cross-modal stack".into());
                }
            }
            ModelKind::TwoTower => {
                if self.vision.hidden % self.vision.heads != 0 {
                    return fail(format!(
                        "vision hidden {} not divisible by {} heads",
                        self.vision.hidden, self.vision.heads
                    ));
                }
                let cross = self
                    .cross
                    .as_ref()
                    .ok_or_else(|| Error::Config("two-tower models need a [model.cross] section".into()))?;
                if self.cross_hidden() % cross.heads != 0 {
                    return fail(format!(
                        "cross hidden {} not divisible by {} heads",
                        self.cross_hidden(),
                        cross.heads
                    ));
                }
            }
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return fail(format!("dropout {} outside [0, 1)", self.dropout));
        }
        Ok(())
    }

    pub fn cross_hidden(&self) -> usize {
        match &self.cross {
            Some(c) => c.hidden.unwrap_or_else(|| self.text.hidden.max(self.vision.hidden)),
            None => 0,
        }
    }

    pub fn cross_intermediate(&self) -> usize {
        match &self.cross {
            Some(c) => c.intermediate.unwrap_or_else(|| 4 * self.cross_hidden()),
            None => 0,
        }
    }

    /// Width of per-position text states as seen by the MLM head.
    pub fn text_state_dim(&self) -> usize {
        match self.model_type {
            ModelKind::OneTower => self.text.hidden,
            ModelKind::TwoTower => self.cross_hidden(),
        }
    }

    /// Width of per-position vision states as seen by region scorers.
    pub fn vision_state_dim(&self) -> usize {
        match self.model_type {
            ModelKind::OneTower => self.text.hidden,
            ModelKind::TwoTower => self.cross_hidden(),
        }
    }

    pub fn pooled_dim(&self) -> usize {
        match self.model_type {
            ModelKind::OneTower => self.text.hidden,
            ModelKind::TwoTower => 2 * self.cross_hidden(),
        }
    }
}

/// Per-module trainability flags. Freezing a tower also freezes its
/// matching embedding layer unless the embedding flag is set explicitly.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FreezeSpec {
    pub text_encoder: bool,
    pub vision_encoder: bool,
    pub cross_modal: bool,
    pub head: bool,
    pub text_embedding: Option<bool>,
    pub vision_embedding: Option<bool>,
}

impl FreezeSpec {
    pub fn none() -> Self {
        Self::default()
    }

    pub fn frozen_text_embedding(&self) -> bool {
        self.text_embedding.unwrap_or(self.text_encoder)
    }

    pub fn frozen_vision_embedding(&self) -> bool {
        self.vision_embedding.unwrap_or(self.vision_encoder)
    }

    pub fn any_frozen(&self) -> bool {
        self.text_encoder
            || self.vision_encoder
            || self.cross_modal
            || self.head
            || self.frozen_text_embedding()
            || self.frozen_vision_embedding()
    }

    pub fn is_frozen(&self, module: ModuleId) -> bool {
        match module {
            ModuleId::TextEmbedding => self.frozen_text_embedding(),
            ModuleId::TextEncoder => self.text_encoder,
            ModuleId::VisionEmbedding => self.frozen_vision_embedding(),
            ModuleId::VisionEncoder => self.vision_encoder,
            ModuleId::CrossModal => self.cross_modal,
            ModuleId::Head => self.head,
        }
    }
}

/// Module membership of a parameter, derived from its name prefix.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ModuleId {
    TextEmbedding,
    TextEncoder,
    VisionEmbedding,
    VisionEncoder,
    CrossModal,
    Head,
}

impl ModuleId {
    pub fn as_str(&self) -> &'static str {
        match self {
            ModuleId::TextEmbedding => "text_embedding",
            ModuleId::TextEncoder => "text_encoder",
            ModuleId::VisionEmbedding => "vision_embedding",
            ModuleId::VisionEncoder => "vision_encoder",
            ModuleId::CrossModal => "cross_modal",
            ModuleId::Head => "head",
        }
    }

    pub const ALL: [ModuleId; 6] = [
        ModuleId::TextEmbedding,
        ModuleId::TextEncoder,
        ModuleId::VisionEmbedding,
        ModuleId::VisionEncoder,
        ModuleId::CrossModal,
        ModuleId::Head,
    ];
}

pub fn module_of(name: &str) -> ModuleId {
    if name.starts_with("text_embedding.") {
        ModuleId::TextEmbedding
    } else if name.starts_with("text_encoder.") || name.starts_with("encoder.") {
        ModuleId::TextEncoder
    } else if name.starts_with("patch_embedding.") {
        ModuleId::VisionEmbedding
    } else if name.starts_with("vision_encoder.") {
        ModuleId::VisionEncoder
    } else if name.starts_with("cross_modal.") {
        ModuleId::CrossModal
    } else if name.starts_with("pooler.") || name.starts_with("head.") {
        ModuleId::Head
    } else {
        panic!("parameter name {name} matches no module prefix");
    }
}

/// Per-module initialization source. With no sources every parameter is
/// random; each source copies checkpoint parameters into model parameters
/// through its prefix remaps.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct InitSource {
    pub sources: Vec<CheckpointSource>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointSource {
    pub path: PathBuf,
    /// Pairs of (checkpoint prefix, model prefix); a model parameter
    /// `<model prefix><rest>` is copied from `<checkpoint prefix><rest>`.
    pub remap: Vec<(String, String)>,
}

impl InitSource {
    pub fn random() -> Self {
        Self::default()
    }

    pub fn from_checkpoint(path: impl Into<PathBuf>, remap: &[(&str, &str)]) -> Self {
        InitSource {
            sources: vec![CheckpointSource {
                path: path.into(),
                remap: remap.iter().map(|(a, b)| (a.to_string(), b.to_string())).collect(),
            }],
        }
    }
}

pub enum Arch<S: Scalar> {
    OneTower(OneTower<S>),
    TwoTower(TwoTower<S>),
}

/// Shared-stack encoder over `[CLS], text tokens, [SEP], image patch
/// tokens`; modality enters through the token-type embedding.
pub struct OneTower<S: Scalar> {
    pub text_embedding: TextEmbedding<S>,
    pub patch_embedding: PatchEmbedding<S>,
    pub encoder: Vec<EncoderBlock<S>>,
    pub pooler: Linear<S>,
}

/// Separate text and vision stacks meeting in bidirectional cross-modal
/// blocks; the streams interact nowhere else.
pub struct TwoTower<S: Scalar> {
    pub text_embedding: TextEmbedding<S>,
    pub text_encoder: Vec<EncoderBlock<S>>,
    pub patch_embedding: PatchEmbedding<S>,
    pub vision_encoder: Vec<EncoderBlock<S>>,
    pub text_projection: Linear<S>,
    pub vision_projection: Linear<S>,
    pub cross_modal: Vec<CrossModalBlock<S>>,
}

pub struct Heads<S: Scalar> {
    /// Vocabulary projection over text-position states.
    pub mlm: Linear<S>,
    /// Binary matched/mismatched head over the pooled state.
    pub itm: Linear<S>,
    pub task: Option<TaskHead<S>>,
}

pub struct TaskHead<S: Scalar> {
    pub kind: TaskKind,
    pub classifier: Option<ClassifierHead<S>>,
    /// Linear scorer over mean-pooled region states (reference resolution).
    pub region_scorer: Option<Linear<S>>,
}

pub struct Model<S: Scalar> {
    pub config: ModelConfig,
    pub arch: Arch<S>,
    pub heads: Heads<S>,
}

/// Forward output: per-position states for both modalities plus the
/// pooled vector heads consume.
pub struct Encoded<S: Scalar> {
    pub text_states: Tensor<S>,
    pub vision_states: Tensor<S>,
    pub pooled: Tensor<S>,
}

impl<S: Scalar> Model<S> {
    /// Allocate, zero-fill, then initialize: random N(0, 0.02) for weights
    /// and tables, zeros for biases/betas, ones for gammas, and verbatim
    /// copies from any checkpoint sources. Returns the model together with
    /// the names of parameters that stayed random although checkpoint
    /// sources were configured.
    pub fn build(config: &ModelConfig, init: &InitSource) -> Result<(Self, Vec<String>)> {
        config.validate()?;
        let dropout = config.dropout;
        let image = &config.image;
        let arch = match config.model_type {
            ModelKind::OneTower => Arch::OneTower(OneTower {
                text_embedding: TextEmbedding::new(
                    config.vocab_size,
                    config.text_max_len,
                    config.text.embed,
                    config.text.hidden,
                    dropout,
                ),
                patch_embedding: PatchEmbedding::new(
                    image.height,
                    image.width,
                    image.channels,
                    image.patch,
                    config.text.hidden,
                )?,
                encoder: (0..config.text.layers)
                    .map(|_| {
                        EncoderBlock::new(
                            config.text.hidden,
                            config.text.heads,
                            config.text.intermediate,
                            dropout,
                        )
                    })
                    .collect(),
                pooler: Linear::new(config.text.hidden, config.text.hidden),
            }),
            ModelKind::TwoTower => {
                let dx = config.cross_hidden();
                let ix = config.cross_intermediate();
                let cross = config.cross.as_ref().unwrap();
                Arch::TwoTower(TwoTower {
                    text_embedding: TextEmbedding::new(
                        config.vocab_size,
                        config.text_max_len,
                        config.text.embed,
                        config.text.hidden,
                        dropout,
                    ),
                    text_encoder: (0..config.text.layers)
                        .map(|_| {
                            EncoderBlock::new(
                                config.text.hidden,
                                config.text.heads,
                                config.text.intermediate,
                                dropout,
                            )
                        })
                        .collect(),
                    patch_embedding: PatchEmbedding::new(
                        image.height,
                        image.width,
                        image.channels,
                        image.patch,
                        config.vision.hidden,
                    )?,
                    vision_encoder: (0..config.vision.layers)
                        .map(|_| {
                            EncoderBlock::new(
                                config.vision.hidden,
                                config.vision.heads,
                                config.vision.intermediate,
                                dropout,
                            )
                        })
                        .collect(),
                    text_projection: Linear::new(config.text.hidden, dx),
                    vision_projection: Linear::new(config.vision.hidden, dx),
                    cross_modal: (0..cross.layers)
                        .map(|_| CrossModalBlock::new(dx, cross.heads, ix, dropout))
                        .collect(),
                })
            }
        };

        let heads = Heads {
            mlm: Linear::new(config.text_state_dim(), config.vocab_size),
            itm: Linear::new(config.pooled_dim(), 2),
            task: config.head.as_ref().map(|spec| TaskHead::new(config, spec)),
        };

        let model = Model {
            config: config.clone(),
            arch,
            heads,
        };
        model.random_init(config.seed);
        let warnings = model.apply_init_sources(init)?;
        model.apply_freeze(&FreezeSpec::none())?; // fresh models are fully trainable
        Ok((model, warnings))
    }

    fn random_init(&self, seed: u64) {
        let normal = Normal::new(0.0f64, INIT_STD).unwrap();
        for (name, param) in self.named_parameters() {
            if name.ends_with(".bias") || name.ends_with(".beta") {
                continue; // already zero
            }
            if name.ends_with(".gamma") {
                param.update_data(|d| d.fill(S::one()));
                continue;
            }
            let mut rng = stream(seed, Domain::Init, name_hash(&name), 0);
            param.update_data(|d| {
                for v in d.iter_mut() {
                    *v = S::from_f64_lossy(normal.sample(&mut rng));
                }
            });
        }
    }

    fn apply_init_sources(&self, init: &InitSource) -> Result<Vec<String>> {
        if init.sources.is_empty() {
            return Ok(Vec::new());
        }
        let mut copied: Vec<String> = Vec::new();
        for source in &init.sources {
            let bag = checkpoint::read_params(&source.path)?;
            for (name, param) in self.named_parameters() {
                for (from_prefix, to_prefix) in &source.remap {
                    let Some(rest) = name.strip_prefix(to_prefix.as_str()) else {
                        continue;
                    };
                    let source_name = format!("{from_prefix}{rest}");
                    let Some((shape, values)) = bag.get(&source_name) else {
                        continue;
                    };
                    if shape != param.shape() {
                        return Err(Error::ParamShapeMismatch {
                            name: name.clone(),
                            checkpoint: shape.to_vec(),
                            model: param.shape().to_vec(),
                        });
                    }
                    param.update_data(|d| {
                        for (dst, src) in d.iter_mut().zip(values) {
                            *dst = S::from_f64_lossy(*src as f64);
                        }
                    });
                    copied.push(name.clone());
                    break;
                }
            }
        }
        let warnings = self
            .named_parameters()
            .into_iter()
            .map(|(name, _)| name)
            .filter(|name| !copied.contains(name))
            .collect();
        Ok(warnings)
    }

    /// Every parameter with its hierarchical name, in a fixed order. The
    /// name-to-parameter map is a bijection.
    pub fn named_parameters(&self) -> Vec<(String, Tensor<S>)> {
        let mut out = Vec::new();
        match &self.arch {
            Arch::OneTower(m) => {
                m.text_embedding.collect("text_embedding", &mut out);
                m.patch_embedding.collect("patch_embedding", &mut out);
                for (i, block) in m.encoder.iter().enumerate() {
                    block.collect(&format!("encoder.block{i}"), &mut out);
                }
                m.pooler.collect("pooler", &mut out);
            }
            Arch::TwoTower(m) => {
                m.text_embedding.collect("text_embedding", &mut out);
                for (i, block) in m.text_encoder.iter().enumerate() {
                    block.collect(&format!("text_encoder.block{i}"), &mut out);
                }
                m.patch_embedding.collect("patch_embedding", &mut out);
                for (i, block) in m.vision_encoder.iter().enumerate() {
                    block.collect(&format!("vision_encoder.block{i}"), &mut out);
                }
                m.text_projection.collect("cross_modal.text_projection", &mut out);
                m.vision_projection.collect("cross_modal.vision_projection", &mut out);
                for (i, block) in m.cross_modal.iter().enumerate() {
                    block.collect(&format!("cross_modal.block{i}"), &mut out);
                }
            }
        }
        self.heads.mlm.collect("head.mlm", &mut out);
        self.heads.itm.collect("head.itm", &mut out);
        if let Some(task) = &self.heads.task {
            if let Some(classifier) = &task.classifier {
                classifier.collect("head.task", &mut out);
            }
            if let Some(scorer) = &task.region_scorer {
                scorer.collect("head.task.scorer", &mut out);
            }
        }
        out
    }

    pub fn trainable_parameters(&self) -> Vec<(String, Tensor<S>)> {
        self.named_parameters()
            .into_iter()
            .filter(|(_, p)| p.requires_grad())
            .collect()
    }

    /// Mark parameters trainable or frozen per the spec. Forward passes
    /// still flow gradients *through* frozen modules to any trainable
    /// parameters upstream.
    pub fn apply_freeze(&self, spec: &FreezeSpec) -> Result<()> {
        if self.config.model_type == ModelKind::OneTower && (spec.vision_encoder || spec.cross_modal) {
            return Err(Error::Config(
                "one-tower models have no vision_encoder or cross_modal module to freeze; \
                 the shared stack freezes via text_encoder"
                    .into(),
            ));
        }
        for (name, param) in self.named_parameters() {
            param.set_requires_grad(!spec.is_frozen(module_of(&name)));
        }
        Ok(())
    }

    pub fn forward(
        &self,
        g: &Graph<S>,
        ids: &IdMatrix,
        text_mask: &KeyMask,
        images: &Tensor<S>,
    ) -> Result<Encoded<S>> {
        match &self.arch {
            Arch::OneTower(m) => {
                let text = m.text_embedding.forward(g, ids, 0)?;
                let vision = m.patch_embedding.forward(g, images)?;
                let image_type = m.text_embedding.image_type_vector(g)?;
                let vision = g.add(&vision, &image_type)?;
                let vision_len = vision.shape()[1];
                let joint = g.concat(&[&text, &vision], 1)?;
                let mask = text_mask.concat(&KeyMask::all_valid(text_mask.batch, vision_len));
                let joint = encode(g, &m.encoder, &joint, Some(&mask))?;
                let text_states = g.slice(&joint, 1, 0, ids.len)?;
                let vision_states = g.slice(&joint, 1, ids.len, vision_len)?;
                let cls = g.reshape(
                    &g.slice(&joint, 1, 0, 1)?,
                    &[ids.batch, self.config.text.hidden],
                )?;
                let pooled = g.tanh(&m.pooler.forward(g, &cls)?)?;
                Ok(Encoded {
                    text_states,
                    vision_states,
                    pooled,
                })
            }
            Arch::TwoTower(m) => {
                let text = m.text_embedding.forward(g, ids, 0)?;
                let text = encode(g, &m.text_encoder, &text, Some(text_mask))?;
                let vision = m.patch_embedding.forward(g, images)?;
                let vision = encode(g, &m.vision_encoder, &vision, None)?;

                let mut t = m.text_projection.forward(g, &text)?;
                let mut v = m.vision_projection.forward(g, &vision)?;
                for block in &m.cross_modal {
                    let (nt, nv) = block.forward(g, &t, &v, Some(text_mask), None)?;
                    t = nt;
                    v = nv;
                }
                let dx = self.config.cross_hidden();
                let t0 = g.reshape(&g.slice(&t, 1, 0, 1)?, &[ids.batch, dx])?;
                let v0 = g.reshape(&g.slice(&v, 1, 0, 1)?, &[ids.batch, dx])?;
                let pooled = g.concat(&[&t0, &v0], 1)?;
                Ok(Encoded {
                    text_states: t,
                    vision_states: v,
                    pooled,
                })
            }
        }
    }

    pub fn forward_batch(&self, g: &Graph<S>, batch: &Batch<S>) -> Result<Encoded<S>> {
        self.forward(g, &batch.ids, &batch.text_mask, &batch.images)
    }

    pub fn param_report(&self) -> ParamReport {
        let mut rows: Vec<ParamReportRow> = ModuleId::ALL
            .iter()
            .map(|m| ParamReportRow {
                module: m.as_str().to_string(),
                total: 0,
                trainable: 0,
            })
            .collect();
        for (name, param) in self.named_parameters() {
            let module = module_of(&name);
            let idx = ModuleId::ALL.iter().position(|m| *m == module).unwrap();
            rows[idx].total += param.len() as u64;
            if param.requires_grad() {
                rows[idx].trainable += param.len() as u64;
            }
        }
        rows.retain(|r| r.total > 0);
        let total = rows.iter().map(|r| r.total).sum();
        let trainable = rows.iter().map(|r| r.trainable).sum();
        ParamReport {
            rows,
            total,
            trainable,
        }
    }
}

impl<S: Scalar> TaskHead<S> {
    fn new(config: &ModelConfig, spec: &TaskHeadConfig) -> Self {
        let pooled = config.pooled_dim();
        let classifier = match spec.kind {
            TaskKind::SnliVe => Some(ClassifierHead::new(pooled, spec.hidden, 3)),
            TaskKind::Nlvr2 => Some(ClassifierHead::new(2 * pooled, spec.hidden, 2)),
            TaskKind::Vqa => Some(ClassifierHead::new(pooled, spec.hidden, spec.classes)),
            TaskKind::RefRes | TaskKind::Retrieval => None,
        };
        let region_scorer = match spec.kind {
            TaskKind::RefRes => Some(Linear::new(config.vision_state_dim(), 1)),
            _ => None,
        };
        TaskHead {
            kind: spec.kind,
            classifier,
            region_scorer,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ParamReportRow {
    pub module: String,
    pub total: u64,
    pub trainable: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ParamReport {
    pub rows: Vec<ParamReportRow>,
    pub total: u64,
    pub trainable: u64,
}

impl ParamReport {
    pub fn trainable_fraction(&self) -> f64 {
        if self.total == 0 {
            0.0
        } else {
            self.trainable as f64 / self.total as f64
        }
    }

    pub fn render_table(&self) -> String {
        let mut out = String::new();
        out.push_str(&format!(
            "{:<18} {:>14} {:>14}\n",
            "module", "total", "trainable"
        ));
        for row in &self.rows {
            out.push_str(&format!(
                "{:<18} {:>14} {:>14}\n",
                row.module, row.total, row.trainable
            ));
        }
        out.push_str(&format!(
            "{:<18} {:>14} {:>14}  (fraction {:.4})\n",
            "all",
            self.total,
            self.trainable,
            self.trainable_fraction()
        ));
        out
    }
}
