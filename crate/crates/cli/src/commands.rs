//! Command implementations behind the CLI subcommands.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail};
use serde::Serialize;

use vl_core::data::{gen_synthetic, AnswerVocab, Corpus, GenTask, ManifestRecord, SplitCounts};
use vl_core::engine::{checkpoint, train, OptimizerState};
use vl_core::models::{
    FreezeSpec, InitSource, Model, ModelConfig, TaskHeadConfig, TaskKind,
};
use vl_core::pretrain::{evaluate_itm, evaluate_mlm, Pretrainer};
use vl_core::tasks::{evaluate_classification, retrieval_rank, Direction, TaskTrainer};

use crate::config::{RunConfig, TaskEntry};
use crate::report::{
    GridReport, ReportRow, FREEZE_REFERENCE, FREEZE_REFERENCE_BASE, INIT_REFERENCE, TASK_COLUMNS,
};

pub fn cmd_gen_data(config: &RunConfig) -> anyhow::Result<String> {
    let gen = config
        .data
        .gen
        .as_ref()
        .ok_or_else(|| anyhow!("gen-data needs a [data.gen] section"))?;
    let task = GenTask::parse(&gen.task).map_err(|e| anyhow!("{e}"))?;
    let digest = gen_synthetic(
        gen.seed.unwrap_or(config.seed),
        SplitCounts {
            train: gen.train,
            dev: gen.dev,
        },
        task,
        &config.data.corpus,
    )
    .map_err(|e| anyhow!("{e}"))?;
    println!(
        "generated {} corpus at {} (train {}, dev {})",
        gen.task,
        config.data.corpus.display(),
        gen.train,
        gen.dev
    );
    println!("digest: {digest}");
    Ok(digest)
}

fn load_corpus(config: &RunConfig) -> anyhow::Result<Corpus> {
    Corpus::load(&config.data.corpus)
        .map_err(|e| anyhow!("loading corpus {}: {e}", config.data.corpus.display()))
}

#[derive(Debug, Serialize)]
pub struct PretrainSummary {
    pub final_loss: f64,
    pub final_components: Vec<(String, f64)>,
    pub dev_mlm_loss: Option<f64>,
    pub dev_itm_accuracy: Option<f64>,
    pub checkpoint: PathBuf,
    pub trainable_params: u64,
    pub total_params: u64,
    pub optimizer_state_elements: u64,
}

/// Pretrain under the configured freeze spec; the run directory gets the
/// resolved config, metrics log, checkpoints, and a summary.
pub fn cmd_pretrain(config: &RunConfig) -> anyhow::Result<PretrainSummary> {
    let corpus = load_corpus(config)?;
    let model_config = config.resolved_model(&corpus)?;
    pretrain_into(config, &corpus, &model_config, &config.init, &config.freeze, &config.run_dir)
}

pub fn pretrain_into(
    config: &RunConfig,
    corpus: &Corpus,
    model_config: &ModelConfig,
    init: &InitSource,
    freeze: &FreezeSpec,
    run_dir: &Path,
) -> anyhow::Result<PretrainSummary> {
    let mut echoed = config.clone();
    echoed.model = Some(model_config.clone());
    echoed.run_dir = run_dir.to_path_buf();
    echoed.freeze = *freeze;
    echoed.init = init.clone();
    echoed.echo(run_dir)?;

    let (model, warnings) = Model::<f32>::build(model_config, init)?;
    if !init.sources.is_empty() && !warnings.is_empty() {
        println!(
            "note: {} parameters stayed random (not found in checkpoint sources), e.g. {}",
            warnings.len(),
            warnings.first().map(String::as_str).unwrap_or("")
        );
    }
    model.apply_freeze(freeze)?;
    let report = model.param_report();
    fs::write(
        run_dir.join("param_report.json"),
        serde_json::to_string_pretty(&report)?,
    )?;

    let trainer = Pretrainer::new(
        corpus,
        config.data.max_text_len,
        config.train.batch_size,
        config.train.seed,
        config.train.objectives,
        config.pretrain.mlm.clone(),
        config.pretrain.itm,
        (model_config.image.height, model_config.image.width),
    )?;
    let optimizer_elements =
        OptimizerState::new(&model, config.optimizer).element_count();
    let summary = train(
        &model,
        &trainer,
        &trainer,
        &config.train,
        config.optimizer,
        run_dir,
    )?;

    let geometry = (model_config.image.height, model_config.image.width);
    let dev_mlm = if config.train.objectives.mlm {
        Some(evaluate_mlm(
            &model,
            corpus,
            vl_core::data::Split::Dev,
            config.data.max_text_len,
            geometry,
            config.evaluate.chunk,
            &config.pretrain.mlm,
            config.seed,
        )?)
    } else {
        None
    };
    let dev_itm = if config.train.objectives.itm {
        Some(evaluate_itm(
            &model,
            corpus,
            vl_core::data::Split::Dev,
            config.data.max_text_len,
            geometry,
            config.evaluate.chunk,
        )?)
    } else {
        None
    };

    let out = PretrainSummary {
        final_loss: summary.final_loss,
        final_components: summary
            .final_components
            .iter()
            .map(|(k, v)| (k.to_string(), *v))
            .collect(),
        dev_mlm_loss: dev_mlm,
        dev_itm_accuracy: dev_itm,
        checkpoint: summary.final_checkpoint.clone(),
        trainable_params: report.trainable,
        total_params: report.total,
        optimizer_state_elements: optimizer_elements,
    };
    fs::write(
        run_dir.join("summary.json"),
        serde_json::to_string_pretty(&out)?,
    )?;
    if let Some(v) = out.dev_mlm_loss {
        println!("dev MLM loss: {v:.4}");
    }
    if let Some(v) = out.dev_itm_accuracy {
        println!("dev ITM accuracy: {v:.4}");
    }
    Ok(out)
}

#[derive(Debug, Serialize)]
pub struct FinetuneSummary {
    pub task: String,
    pub final_loss: f64,
    pub checkpoint: PathBuf,
}

/// Fine-tune a pretrained checkpoint on a task. Refuses a freeze spec
/// with any frozen module unless `allow_frozen` (published procedure
/// fine-tunes with no weights frozen).
pub fn cmd_finetune(config: &RunConfig, allow_frozen: bool) -> anyhow::Result<FinetuneSummary> {
    let task = config
        .task
        .as_ref()
        .ok_or_else(|| anyhow!("finetune needs a [task] section"))?;
    if config.freeze.any_frozen() && !allow_frozen {
        bail!(
            "finetune refuses a freeze spec with frozen modules: fine-tuning runs with no \
             model weights frozen. Pass --allow-frozen to override deliberately."
        );
    }
    let source = task
        .checkpoint
        .as_ref()
        .ok_or_else(|| anyhow!("finetune needs task.checkpoint (a pretrained checkpoint)"))?;
    if !source.exists() {
        bail!("pretrained checkpoint {} does not exist", source.display());
    }
    let corpus = load_corpus(config)?;
    finetune_into(config, &corpus, task.kind, task.head_hidden, source, allow_frozen, &config.run_dir)
}

pub fn finetune_into(
    config: &RunConfig,
    corpus: &Corpus,
    kind: TaskKind,
    head_hidden: Option<usize>,
    source: &Path,
    keep_freeze: bool,
    run_dir: &Path,
) -> anyhow::Result<FinetuneSummary> {
    let (header, _) = checkpoint::read_header_and_payload(source)?;
    let mut model_config = header.config.clone();
    if model_config.vocab_size != corpus.vocab.len() {
        bail!(
            "checkpoint vocabulary {} does not match task corpus vocabulary {}",
            model_config.vocab_size,
            corpus.vocab.len()
        );
    }
    let classes = match kind {
        TaskKind::SnliVe => 3,
        TaskKind::Nlvr2 => 2,
        TaskKind::Vqa => AnswerVocab::from_corpus(corpus)?.len(),
        TaskKind::RefRes | TaskKind::Retrieval => 0,
    };
    model_config.head = Some(TaskHeadConfig {
        kind,
        classes,
        hidden: head_hidden,
    });

    let mut echoed = config.clone();
    echoed.model = Some(model_config.clone());
    echoed.run_dir = run_dir.to_path_buf();
    echoed.echo(run_dir)?;

    // Identity remap: copy every checkpoint parameter; the fresh task
    // head stays randomly initialized.
    let init = InitSource::from_checkpoint(source, &[("", "")]);
    let (model, _) = Model::<f32>::build(&model_config, &init)?;
    let freeze = if keep_freeze { config.freeze } else { FreezeSpec::none() };
    model.apply_freeze(&freeze)?;

    let trainer = TaskTrainer::new(
        corpus,
        kind,
        config.data.max_text_len,
        config.train.batch_size,
        config.train.seed,
        (model_config.image.height, model_config.image.width),
    )?;
    let summary = train(
        &model,
        &trainer,
        &trainer,
        &config.train,
        config.optimizer,
        run_dir,
    )?;
    let out = FinetuneSummary {
        task: kind.as_str().to_string(),
        final_loss: summary.final_loss,
        checkpoint: summary.final_checkpoint.clone(),
    };
    fs::write(
        run_dir.join("summary.json"),
        serde_json::to_string_pretty(&out)?,
    )?;
    Ok(out)
}

#[derive(Debug, Serialize)]
pub struct EvaluateSummary {
    pub task: String,
    pub split: String,
    pub examples: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub accuracy: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub recall_at_1: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub recall_at_5: Option<f64>,
}

/// Evaluate a fine-tuned checkpoint on its task; emits metrics and
/// line-delimited prediction dumps.
pub fn cmd_evaluate(config: &RunConfig) -> anyhow::Result<EvaluateSummary> {
    let task = config
        .task
        .as_ref()
        .ok_or_else(|| anyhow!("evaluate needs a [task] section"))?;
    let source = task
        .checkpoint
        .as_ref()
        .ok_or_else(|| anyhow!("evaluate needs task.checkpoint"))?;
    if !source.exists() {
        bail!("checkpoint {} does not exist", source.display());
    }
    let corpus = load_corpus(config)?;
    let out = evaluate_into(config, &corpus, task.kind, source, &config.run_dir)?;
    Ok(out)
}

pub fn evaluate_into(
    config: &RunConfig,
    corpus: &Corpus,
    kind: TaskKind,
    source: &Path,
    run_dir: &Path,
) -> anyhow::Result<EvaluateSummary> {
    fs::create_dir_all(run_dir)?;
    let (model, header) = checkpoint::load::<f32>(source)?;
    let geometry = (header.config.image.height, header.config.image.width);
    let split = config.eval_split()?;

    let summary = if kind == TaskKind::Retrieval {
        let dev: Vec<&ManifestRecord> = corpus.split(split);
        let n = config.evaluate.gallery.min(dev.len());
        if n < 5 {
            bail!("retrieval gallery needs >= 5 records, have {n}");
        }
        let gallery = &dev[..n];
        let t2i = retrieval_rank(
            &model,
            corpus,
            gallery,
            gallery,
            Direction::TextToImage,
            config.data.max_text_len,
            geometry,
        )?;
        let i2t = retrieval_rank(
            &model,
            corpus,
            gallery,
            gallery,
            Direction::ImageToText,
            config.data.max_text_len,
            geometry,
        )?;
        fs::write(
            run_dir.join("eval_retrieval.json"),
            serde_json::to_string_pretty(&serde_json::json!({
                "text_to_image": { "recall_at_1": t2i.recall_at_1, "recall_at_5": t2i.recall_at_5 },
                "image_to_text": { "recall_at_1": i2t.recall_at_1, "recall_at_5": i2t.recall_at_5 },
            }))?,
        )?;
        EvaluateSummary {
            task: kind.as_str().into(),
            split: config.evaluate.split.clone(),
            examples: n,
            accuracy: None,
            recall_at_1: Some(t2i.recall_at_1),
            recall_at_5: Some(t2i.recall_at_5),
        }
    } else {
        let head_kind = header.config.head.as_ref().map(|h| h.kind);
        if head_kind != Some(kind) {
            bail!(
                "checkpoint head is {:?}, evaluation task is {}",
                head_kind.map(|k| k.as_str()),
                kind.as_str()
            );
        }
        let answers = match kind {
            TaskKind::Vqa => {
                let vocab = AnswerVocab::from_corpus(corpus)?;
                let head_classes = header.config.head.as_ref().map(|h| h.classes).unwrap_or(0);
                if vocab.len() != head_classes {
                    bail!(
                        "answer-vocab mismatch: checkpoint head has {head_classes} answers, \
                         evaluation corpus has {}",
                        vocab.len()
                    );
                }
                Some(vocab)
            }
            _ => None,
        };
        let dump = config
            .evaluate
            .dump
            .then(|| run_dir.join(format!("predictions_{}.jsonl", kind.as_str())));
        let metrics = evaluate_classification(
            &model,
            corpus,
            kind,
            split,
            config.data.max_text_len,
            geometry,
            config.evaluate.chunk,
            answers.as_ref(),
            dump.as_deref(),
        )?;
        fs::write(
            run_dir.join(format!("eval_{}.json", kind.as_str())),
            serde_json::to_string_pretty(&metrics)?,
        )?;
        EvaluateSummary {
            task: metrics.task,
            split: metrics.split,
            examples: metrics.examples,
            accuracy: metrics.accuracy,
            recall_at_1: None,
            recall_at_5: None,
        }
    };
    println!(
        "{} {}: accuracy {:?} recall@1 {:?}",
        summary.task, summary.split, summary.accuracy, summary.recall_at_1
    );
    Ok(summary)
}

/// Parameter accounting without training.
pub fn cmd_param_report(config: &RunConfig) -> anyhow::Result<String> {
    let mut model_config = config
        .model
        .clone()
        .ok_or_else(|| anyhow!("param-report needs a [model] section"))?;
    if model_config.vocab_size == 0 {
        let corpus = load_corpus(config)?;
        model_config.vocab_size = corpus.vocab.len();
    }
    model_config.validate()?;
    let (model, _) = Model::<f32>::build(&model_config, &InitSource::random())?;
    model.apply_freeze(&config.freeze)?;
    let report = model.param_report();
    let optimizer_elements = OptimizerState::new(&model, config.optimizer).element_count();
    let mut table = report.render_table();
    table.push_str(&format!("optimizer state elements: {optimizer_elements}\n"));
    fs::create_dir_all(&config.run_dir)?;
    fs::write(
        config.run_dir.join("param_report.json"),
        serde_json::to_string_pretty(&report)?,
    )?;
    print!("{table}");
    Ok(table)
}

fn finetune_and_evaluate_tasks(
    config: &RunConfig,
    tasks: &[TaskEntry],
    pretrained: &Path,
    cell_dir: &Path,
    finetune_steps: usize,
    finetune_lr: Option<f64>,
) -> anyhow::Result<Vec<Option<f64>>> {
    let mut accuracies = Vec::new();
    for entry in tasks {
        let task_dir = cell_dir.join(entry.kind.as_str());
        let eval_path = task_dir.join(format!("eval_{}.json", entry.kind.as_str()));
        if eval_path.exists() {
            // Resumable: reuse the finished cell.
            let text = fs::read_to_string(&eval_path)?;
            let value: serde_json::Value = serde_json::from_str(&text)?;
            accuracies.push(value.get("accuracy").and_then(|v| v.as_f64()));
            continue;
        }
        let corpus = Corpus::load(&entry.corpus)
            .map_err(|e| anyhow!("task corpus {}: {e}", entry.corpus.display()))?;
        let mut task_config = config.clone();
        task_config.train.steps = finetune_steps;
        if let Some(lr) = finetune_lr {
            task_config.train.peak_lr = lr;
        }
        task_config.data.corpus = entry.corpus.clone();
        let finetuned = finetune_into(
            &task_config,
            &corpus,
            entry.kind,
            None,
            pretrained,
            false,
            &task_dir,
        )?;
        let summary = evaluate_into(
            &task_config,
            &corpus,
            entry.kind,
            &finetuned.checkpoint,
            &task_dir,
        )?;
        accuracies.push(summary.accuracy);
    }
    Ok(accuracies)
}

/// The freeze-study grid: pretrain each of the four (text, vision)
/// freeze combinations, fine-tune unfrozen on each task, evaluate, and
/// emit one consolidated table alongside published reference values.
pub fn cmd_ablate_freeze(config: &RunConfig) -> anyhow::Result<GridReport> {
    let ablate = config
        .ablate
        .as_ref()
        .ok_or_else(|| anyhow!("ablate-freeze needs an [ablate] section"))?;
    let corpus = load_corpus(config)?;
    let model_config = config.resolved_model(&corpus)?;

    let grid = [
        ("unfrozen/unfrozen", false, false),
        ("frozen/unfrozen", true, false),
        ("unfrozen/frozen", false, true),
        ("frozen/frozen", true, true),
    ];
    let mut rows = Vec::new();
    for (i, (label, text_frozen, vision_frozen)) in grid.iter().enumerate() {
        let freeze = FreezeSpec {
            text_encoder: *text_frozen,
            vision_encoder: *vision_frozen,
            ..FreezeSpec::none()
        };
        let cell_dir = config.run_dir.join(format!("cell{i}_{}", label.replace('/', "_")));
        let pretrain_dir = cell_dir.join("pretrain");
        let final_ckpt = pretrain_dir.join("checkpoints").join("final.ckpt");
        let summary = if final_ckpt.exists() {
            println!("ablate: reusing pretrained cell {label}");
            None
        } else {
            println!("ablate: pretraining cell {label}");
            Some(pretrain_into(
                config,
                &corpus,
                &model_config,
                &config.init,
                &freeze,
                &pretrain_dir,
            )?)
        };
        // Counts come from a fresh freeze application either way.
        let (model, _) = Model::<f32>::build(&model_config, &InitSource::random())?;
        model.apply_freeze(&freeze)?;
        let report = model.param_report();
        let optimizer_elements = OptimizerState::new(&model, config.optimizer).element_count();
        drop(model);
        drop(summary);

        let desk = finetune_and_evaluate_tasks(
            config,
            &ablate.tasks,
            &final_ckpt,
            &cell_dir,
            ablate.finetune_steps,
            ablate.finetune_lr,
        )?;
        rows.push(ReportRow {
            label: label.to_string(),
            reference: FREEZE_REFERENCE[i].1.to_vec(),
            desk,
            trainable_params: report.trainable,
            optimizer_state_elements: optimizer_elements,
        });
    }
    // Published-scale context row (not run at desk scale).
    rows.push(ReportRow {
        label: FREEZE_REFERENCE_BASE.0.to_string(),
        reference: FREEZE_REFERENCE_BASE.1.to_vec(),
        desk: vec![None; TASK_COLUMNS.len()],
        trainable_params: 0,
        optimizer_state_elements: 0,
    });

    let report = GridReport {
        title: "freeze module study (reference columns: published dev accuracies)".into(),
        columns: TASK_COLUMNS.iter().map(|s| s.to_string()).collect(),
        rows,
    };
    write_report(&config.run_dir, &report)?;
    Ok(report)
}

/// Initialization-source study: one-tower models initialized randomly,
/// from a vision-encoder checkpoint, and from a text-encoder checkpoint;
/// each is pretrained, fine-tuned, and evaluated.
pub fn cmd_init_compare(config: &RunConfig) -> anyhow::Result<GridReport> {
    let compare = config
        .compare
        .as_ref()
        .ok_or_else(|| anyhow!("init-compare needs a [compare] section"))?;
    for source in [&compare.text_checkpoint, &compare.vision_checkpoint] {
        if !source.exists() {
            bail!(
                "source checkpoint {} does not exist (produce it with a prior desk run; \
                 see the bootstrap recipe in the README)",
                source.display()
            );
        }
    }
    let corpus = load_corpus(config)?;
    let model_config = config.resolved_model(&corpus)?;

    let variants: [(&str, InitSource); 3] = [
        ("random", InitSource::random()),
        (
            "vision_init",
            InitSource::from_checkpoint(
                &compare.vision_checkpoint,
                &[
                    ("vision_encoder.", "encoder."),
                    ("patch_embedding.", "patch_embedding."),
                ],
            ),
        ),
        (
            "text_init",
            InitSource::from_checkpoint(
                &compare.text_checkpoint,
                &[
                    ("text_encoder.", "encoder."),
                    ("text_embedding.", "text_embedding."),
                ],
            ),
        ),
    ];

    let mut rows = Vec::new();
    for (i, (label, init)) in variants.iter().enumerate() {
        let cell_dir = config.run_dir.join(format!("variant_{label}"));
        let pretrain_dir = cell_dir.join("pretrain");
        let final_ckpt = pretrain_dir.join("checkpoints").join("final.ckpt");
        if final_ckpt.exists() {
            println!("init-compare: reusing pretrained variant {label}");
        } else {
            println!("init-compare: pretraining variant {label}");
            pretrain_into(
                config,
                &corpus,
                &model_config,
                init,
                &FreezeSpec::none(),
                &pretrain_dir,
            )?;
        }
        let desk = finetune_and_evaluate_tasks(
            config,
            &compare.tasks,
            &final_ckpt,
            &cell_dir,
            compare.finetune_steps,
            compare.finetune_lr,
        )?;
        let (model, _) = Model::<f32>::build(&model_config, &InitSource::random())?;
        let report = model.param_report();
        rows.push(ReportRow {
            label: label.to_string(),
            reference: INIT_REFERENCE[i].1.to_vec(),
            desk,
            trainable_params: report.trainable,
            optimizer_state_elements: OptimizerState::new(&model, config.optimizer)
                .element_count(),
        });
    }
    let report = GridReport {
        title: "initialization source study (reference columns: published dev accuracies)"
            .into(),
        columns: TASK_COLUMNS.iter().map(|s| s.to_string()).collect(),
        rows,
    };
    write_report(&config.run_dir, &report)?;
    Ok(report)
}

fn write_report(run_dir: &Path, report: &GridReport) -> anyhow::Result<()> {
    fs::create_dir_all(run_dir)?;
    let text = report.render_text();
    fs::write(run_dir.join("report.txt"), &text)?;
    fs::write(run_dir.join("report.jsonl"), report.render_jsonl())?;
    print!("{text}");
    Ok(())
}

/// Exit-code category for an error: 2 config/validation, 3 missing
/// input or I/O, 4 runtime.
pub fn exit_code(err: &anyhow::Error) -> i32 {
    if let Some(core) = err.downcast_ref::<vl_core::Error>() {
        return match core {
            vl_core::Error::Config(_) | vl_core::Error::ShapeMismatch { .. } => 2,
            vl_core::Error::Io(_)
            | vl_core::Error::Data(_)
            | vl_core::Error::Checkpoint(_)
            | vl_core::Error::Json(_) => 3,
            _ => 4,
        };
    }
    let text = err.to_string();
    if text.contains("config") || text.contains("refuses") || text.contains("needs a [") {
        2
    } else if text.contains("does not exist") || text.contains("cannot read") {
        3
    } else {
        4
    }
}
