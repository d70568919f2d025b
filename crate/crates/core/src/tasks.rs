//! Downstream task heads, objectives, metrics, and evaluation for the
//! five fine-tuning task shapes.

use std::fs;
use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::data::{collate, AnswerVocab, Batch, Corpus, ManifestRecord, Split};
use crate::engine::{BatchSource, LossParts, Objective};
use crate::error::{Error, Result};
use crate::models::{Model, TaskKind};
use crate::rng::{stream, Domain};
use crate::scalar::Scalar;
use crate::tensor::{Graph, Tensor};

/// Parse a manifest label string into a class index for the given task.
pub fn class_label_index(
    task: TaskKind,
    record: &ManifestRecord,
    answers: Option<&AnswerVocab>,
) -> Result<i64> {
    let label = record
        .label
        .as_deref()
        .ok_or_else(|| Error::Data(format!("record {} has no label", record.id)))?;
    match task {
        TaskKind::SnliVe => match label {
            "entailment" => Ok(0),
            "neutral" => Ok(1),
            "contradiction" => Ok(2),
            other => Err(Error::Data(format!("bad snli_ve label {other:?}"))),
        },
        TaskKind::Nlvr2 => match label {
            "false" => Ok(0),
            "true" => Ok(1),
            other => Err(Error::Data(format!("bad nlvr2 label {other:?}"))),
        },
        TaskKind::RefRes => label
            .parse::<i64>()
            .map_err(|_| Error::Data(format!("bad ref_res label {label:?}"))),
        TaskKind::Vqa => {
            let vocab = answers.ok_or_else(|| Error::Data("vqa needs an answer vocabulary".into()))?;
            vocab.index(label).map(|i| i as i64).ok_or_else(|| {
                Error::Data(format!(
                    "answer-vocab mismatch: answer {label:?} not in the fixed answer vocabulary"
                ))
            })
        }
        TaskKind::Retrieval => Ok(1),
    }
}

/// Three-way entailment logits from the pooled state.
pub fn snli_ve_logits<S: Scalar>(g: &Graph<S>, model: &Model<S>, batch: &Batch<S>) -> Result<Tensor<S>> {
    let head = task_classifier(model, TaskKind::SnliVe)?;
    let encoded = model.forward_batch(g, batch)?;
    head.forward(g, &encoded.pooled)
}

/// Binary logits for a statement about an image pair: the model runs
/// twice with shared weights, once per image, and the pooled outputs are
/// concatenated into the head.
pub fn nlvr2_logits<S: Scalar>(g: &Graph<S>, model: &Model<S>, batch: &Batch<S>) -> Result<Tensor<S>> {
    let head = task_classifier(model, TaskKind::Nlvr2)?;
    let images_b = batch
        .images_b
        .as_ref()
        .ok_or_else(|| Error::Data("nlvr2 batch needs a second image per example".into()))?;
    let a = model.forward(g, &batch.ids, &batch.text_mask, &batch.images)?;
    let b = model.forward(g, &batch.ids, &batch.text_mask, images_b)?;
    let pooled = g.concat(&[&a.pooled, &b.pooled], 1)?;
    head.forward(g, &pooled)
}

/// Per-candidate logits: a linear scorer applied to the mean of each
/// candidate's image-position output states.
pub fn ref_res_logits<S: Scalar>(g: &Graph<S>, model: &Model<S>, batch: &Batch<S>) -> Result<Tensor<S>> {
    let scorer = model
        .heads
        .task
        .as_ref()
        .and_then(|t| t.region_scorer.as_ref())
        .ok_or_else(|| Error::Config("model has no region scorer head".into()))?;
    let regions = batch
        .regions
        .as_ref()
        .ok_or_else(|| Error::Data("ref_res batch needs candidate regions".into()))?;
    let encoded = model.forward_batch(g, batch)?;
    let states = &encoded.vision_states; // [B, N+1, D]
    let (batch_size, vision_len, dim) = (states.shape()[0], states.shape()[1], states.shape()[2]);
    let candidates = regions
        .first()
        .map(Vec::len)
        .ok_or_else(|| Error::Data("empty region batch".into()))?;

    let mut rows = Vec::with_capacity(batch_size);
    for (b, candidate_set) in regions.iter().enumerate() {
        if candidate_set.len() != candidates {
            return Err(Error::Data("ragged candidate counts within batch".into()));
        }
        // Averaging selector [K, N+1]: row k holds 1/|R_k| at each patch
        // position of candidate k (patch p sits at sequence position p+1).
        let mut selector = vec![S::zero(); candidates * vision_len];
        for (k, patches) in candidate_set.iter().enumerate() {
            if patches.is_empty() {
                return Err(Error::Data(format!("empty candidate {k} in example {b}")));
            }
            let w = S::from_f64_lossy(1.0 / patches.len() as f64);
            for &p in patches {
                if p + 1 >= vision_len {
                    return Err(Error::Data(format!(
                        "patch index {p} out of range for {} patches",
                        vision_len - 1
                    )));
                }
                selector[k * vision_len + p + 1] = w;
            }
        }
        let selector = Tensor::from_vec(vec![candidates, vision_len], selector)?;
        let example = g.reshape(&g.slice(states, 0, b, 1)?, &[vision_len, dim])?;
        let means = g.matmul(&selector, &example)?; // [K, D]
        let scores = scorer.forward(g, &means)?; // [K, 1]
        rows.push(g.reshape(&scores, &[1, candidates])?);
    }
    let refs: Vec<&Tensor<S>> = rows.iter().collect();
    g.concat(&refs, 0)
}

/// Closed-set answer logits from the pooled state.
pub fn vqa_logits<S: Scalar>(g: &Graph<S>, model: &Model<S>, batch: &Batch<S>) -> Result<Tensor<S>> {
    let head = task_classifier(model, TaskKind::Vqa)?;
    let encoded = model.forward_batch(g, batch)?;
    head.forward(g, &encoded.pooled)
}

fn task_classifier<S: Scalar>(
    model: &Model<S>,
    expected: TaskKind,
) -> Result<&crate::layers::ClassifierHead<S>> {
    let task = model
        .heads
        .task
        .as_ref()
        .ok_or_else(|| Error::Config("model has no task head".into()))?;
    if task.kind != expected {
        return Err(Error::Config(format!(
            "model head is {}, task asked for {}",
            task.kind.as_str(),
            expected.as_str()
        )));
    }
    task.classifier
        .as_ref()
        .ok_or_else(|| Error::Config("task head has no classifier".into()))
}

/// Dispatch to the logits function matching the model's task head.
pub fn task_logits<S: Scalar>(g: &Graph<S>, model: &Model<S>, batch: &Batch<S>) -> Result<Tensor<S>> {
    let kind = model
        .heads
        .task
        .as_ref()
        .map(|t| t.kind)
        .ok_or_else(|| Error::Config("model has no task head".into()))?;
    match kind {
        TaskKind::SnliVe => snli_ve_logits(g, model, batch),
        TaskKind::Nlvr2 => nlvr2_logits(g, model, batch),
        TaskKind::RefRes => ref_res_logits(g, model, batch),
        TaskKind::Vqa => vqa_logits(g, model, batch),
        TaskKind::Retrieval => Err(Error::Config(
            "retrieval scores pairs through the ITM head; use retrieval_rank".into(),
        )),
    }
}

/// Matched-class ITM logit for every (query, gallery) pair.
fn itm_score_matrix<S: Scalar>(
    model: &Model<S>,
    corpus: &Corpus,
    queries: &[&ManifestRecord],
    gallery: &[&ManifestRecord],
    direction: Direction,
    max_len: usize,
    geometry: (usize, usize),
) -> Result<Vec<Vec<f64>>> {
    let g = Graph::inference();
    let mut scores = Vec::with_capacity(queries.len());
    for query in queries {
        let mut row = Vec::with_capacity(gallery.len());
        for chunk in gallery.chunks(16) {
            // Pair the query's text with each gallery image (text->image)
            // or the query's image with each gallery text (image->text).
            let records: Vec<ManifestRecord> = chunk
                .iter()
                .map(|item| {
                    let mut pair = (*query).clone();
                    match direction {
                        Direction::TextToImage => pair.image = item.image.clone(),
                        Direction::ImageToText => pair.caption = item.caption.clone(),
                    }
                    pair
                })
                .collect();
            let refs: Vec<&ManifestRecord> = records.iter().collect();
            let batch = collate::<S>(&refs, corpus, max_len, Some(geometry))?;
            let encoded = model.forward_batch(&g, &batch)?;
            let logits = model.heads.itm.forward(&g, &encoded.pooled)?;
            let data = logits.data();
            for i in 0..refs.len() {
                row.push(data[i * 2 + 1].to_f64_lossy());
            }
        }
        scores.push(row);
    }
    Ok(scores)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    TextToImage,
    ImageToText,
}

#[derive(Debug, Clone, Serialize)]
pub struct RetrievalReport {
    pub direction: Direction,
    pub recall_at_1: f64,
    pub recall_at_5: f64,
    /// Gallery indices per query, best first; ties broken by lower index.
    pub ranked: Vec<Vec<usize>>,
}

/// Exhaustively score each query against the gallery with the ITM head
/// and rank. The true gallery item for a query is the one sharing its
/// image (text->image) or caption (image->text).
pub fn retrieval_rank<S: Scalar>(
    model: &Model<S>,
    corpus: &Corpus,
    queries: &[&ManifestRecord],
    gallery: &[&ManifestRecord],
    direction: Direction,
    max_len: usize,
    geometry: (usize, usize),
) -> Result<RetrievalReport> {
    if gallery.len() < 5 {
        return Err(Error::Data(format!(
            "retrieval gallery of {} is too small for recall@5",
            gallery.len()
        )));
    }
    let truth: Vec<usize> = queries
        .iter()
        .map(|q| {
            gallery
                .iter()
                .position(|item| match direction {
                    Direction::TextToImage => item.image == q.image,
                    Direction::ImageToText => item.caption == q.caption,
                })
                .ok_or_else(|| Error::Data(format!("query {} has no gallery match", q.id)))
        })
        .collect::<Result<_>>()?;
    let scores = itm_score_matrix(model, corpus, queries, gallery, direction, max_len, geometry)?;

    let mut ranked = Vec::with_capacity(queries.len());
    for row in &scores {
        let mut order: Vec<usize> = (0..row.len()).collect();
        order.sort_by(|&a, &b| {
            row[b].partial_cmp(&row[a]).unwrap_or(std::cmp::Ordering::Equal).then(a.cmp(&b))
        });
        ranked.push(order);
    }
    let recall_at = |k: usize| -> f64 {
        let hits = ranked
            .iter()
            .zip(&truth)
            .filter(|(order, t)| order[..k.min(order.len())].contains(t))
            .count();
        hits as f64 / ranked.len().max(1) as f64
    };
    Ok(RetrievalReport {
        direction,
        recall_at_1: recall_at(1),
        recall_at_5: recall_at(5),
        ranked,
    })
}

/// Fine-tuning driver for a downstream task: deterministic batch sampling
/// plus the task's loss. Retrieval fine-tunes the ITM head with in-batch
/// negatives (each example is also paired with the next example's image,
/// label 0).
pub struct TaskTrainer<'c> {
    pub corpus: &'c Corpus,
    pub task: TaskKind,
    pub max_len: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub geometry: (usize, usize),
    pub answers: Option<AnswerVocab>,
    train_records: Vec<usize>,
}

impl<'c> TaskTrainer<'c> {
    pub fn new(
        corpus: &'c Corpus,
        task: TaskKind,
        max_len: usize,
        batch_size: usize,
        seed: u64,
        geometry: (usize, usize),
    ) -> Result<Self> {
        let train_records: Vec<usize> = corpus
            .records
            .iter()
            .enumerate()
            .filter(|(_, r)| r.split == Split::Train)
            .map(|(i, _)| i)
            .collect();
        if train_records.is_empty() {
            return Err(Error::Data("corpus has no train split".into()));
        }
        let answers = match task {
            TaskKind::Vqa => Some(AnswerVocab::from_corpus(corpus)?),
            _ => None,
        };
        Ok(TaskTrainer {
            corpus,
            task,
            max_len,
            batch_size,
            seed,
            geometry,
            answers,
            train_records,
        })
    }
}

impl<S: Scalar> BatchSource<S> for TaskTrainer<'_> {
    fn batch(&self, step: usize) -> Result<Batch<S>> {
        let mut rng = stream(self.seed, Domain::BatchSample, step as u64, 0);
        let picked: Vec<usize> = (0..self.batch_size)
            .map(|_| *self.train_records.choose(&mut rng).unwrap())
            .collect();
        let records: Vec<&ManifestRecord> =
            picked.iter().map(|&i| &self.corpus.records[i]).collect();
        let mut batch = collate::<S>(&records, self.corpus, self.max_len, Some(self.geometry))?;
        if self.task != TaskKind::Retrieval {
            let labels: Vec<i64> = records
                .iter()
                .map(|r| class_label_index(self.task, r, self.answers.as_ref()))
                .collect::<Result<_>>()?;
            batch.class_labels = Some(labels);
        }
        Ok(batch)
    }
}

impl<S: Scalar> Objective<S> for TaskTrainer<'_> {
    fn loss(&self, g: &Graph<S>, model: &Model<S>, batch: &Batch<S>) -> Result<LossParts<S>> {
        if self.task == TaskKind::Retrieval {
            // In-batch negatives: positives as-is, negatives by rotating
            // the images one position within the batch.
            let b = batch.ids.batch;
            let pos = model.forward_batch(g, batch)?;
            let rotated = rotate_images(g, &batch.images)?;
            let neg = model.forward(g, &batch.ids, &batch.text_mask, &rotated)?;
            let pooled = g.concat(&[&pos.pooled, &neg.pooled], 0)?;
            let logits = model.heads.itm.forward(g, &pooled)?;
            let mut labels = vec![1i64; b];
            labels.extend(vec![0i64; b]);
            let loss = g.cross_entropy(&logits, &labels, -100)?;
            let value = loss.item().to_f64_lossy();
            return Ok(LossParts {
                total: loss,
                components: vec![("itm_inbatch", value)],
            });
        }
        let labels = batch
            .class_labels
            .as_ref()
            .ok_or_else(|| Error::Data("task batch has no class labels".into()))?;
        let logits = task_logits(g, model, batch)?;
        let loss = g.cross_entropy(&logits, labels, -100)?;
        let value = loss.item().to_f64_lossy();
        Ok(LossParts {
            total: loss,
            components: vec![(self.task.as_str(), value)],
        })
    }
}

fn rotate_images<S: Scalar>(g: &Graph<S>, images: &Tensor<S>) -> Result<Tensor<S>> {
    let b = images.shape()[0];
    if b < 2 {
        return Err(Error::Data("in-batch negatives need batch size >= 2".into()));
    }
    let head = g.slice(images, 0, 0, 1)?;
    let tail = g.slice(images, 0, 1, b - 1)?;
    g.concat(&[&tail, &head], 0)
}

/// Pure metrics over (predictions, labels).
pub fn accuracy(predictions: &[i64], labels: &[i64]) -> f64 {
    assert_eq!(predictions.len(), labels.len());
    if predictions.is_empty() {
        return 0.0;
    }
    let hits = predictions.iter().zip(labels).filter(|(p, l)| p == l).count();
    hits as f64 / predictions.len() as f64
}

#[derive(Debug, Clone, Serialize)]
pub struct PredictionRecord {
    pub id: u64,
    pub label: i64,
    pub prediction: i64,
    pub scores: Vec<f64>,
}

#[derive(Debug, Clone, Serialize)]
pub struct TaskMetrics {
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

/// Batched classification evaluation with optional line-delimited
/// prediction dumps.
pub fn evaluate_classification<S: Scalar>(
    model: &Model<S>,
    corpus: &Corpus,
    task: TaskKind,
    split: Split,
    max_len: usize,
    geometry: (usize, usize),
    chunk: usize,
    answers: Option<&AnswerVocab>,
    dump: Option<&Path>,
) -> Result<TaskMetrics> {
    let records = corpus.split(split);
    if records.is_empty() {
        return Err(Error::Data("no records in requested split".into()));
    }
    let g = Graph::inference();
    let mut predictions = Vec::with_capacity(records.len());
    let mut labels = Vec::with_capacity(records.len());
    let mut dump_file = dump.map(fs::File::create).transpose()?;

    for chunk_records in records.chunks(chunk.max(1)) {
        let mut batch = collate::<S>(chunk_records, corpus, max_len, Some(geometry))?;
        let chunk_labels: Vec<i64> = chunk_records
            .iter()
            .map(|r| class_label_index(task, r, answers))
            .collect::<Result<_>>()?;
        batch.class_labels = Some(chunk_labels.clone());
        let logits = task_logits(&g, model, &batch)?;
        let classes = *logits.shape().last().unwrap();
        let data = logits.data();
        for (i, record) in chunk_records.iter().enumerate() {
            let row = &data[i * classes..(i + 1) * classes];
            let mut best = 0usize;
            for (c, v) in row.iter().enumerate() {
                if *v > row[best] {
                    best = c;
                }
            }
            predictions.push(best as i64);
            labels.push(chunk_labels[i]);
            if let Some(f) = dump_file.as_mut() {
                let rec = PredictionRecord {
                    id: record.id,
                    label: chunk_labels[i],
                    prediction: best as i64,
                    scores: row.iter().map(|v| v.to_f64_lossy()).collect(),
                };
                serde_json::to_writer(&mut *f, &rec)?;
                f.write_all(b"\n")?;
            }
        }
    }
    Ok(TaskMetrics {
        task: task.as_str().to_string(),
        split: format!("{split:?}").to_lowercase(),
        examples: records.len(),
        accuracy: Some(accuracy(&predictions, &labels)),
        recall_at_1: None,
        recall_at_5: None,
    })
}
