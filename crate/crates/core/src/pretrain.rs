//! Pretraining objectives: multimodal masked language modeling and
//! image-text matching, individually or in conjunction (unit-weighted sum).

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::{collate_text, stack_images, tokenize, Batch, Corpus, ManifestRecord, Split};
use crate::engine::{BatchSource, LossParts, Objective, ObjectiveSet};
use crate::error::{Error, Result};
use crate::models::Model;
use crate::rng::{stream, Domain};
use crate::scalar::Scalar;
use crate::tensor::{Graph, IdMatrix};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MlmSpec {
    pub mask_prob: f64,
    /// Of the selected positions: fraction replaced by [MASK].
    pub mask_token_frac: f64,
    /// Of the selected positions: fraction replaced by a random token.
    pub random_frac: f64,
    pub ignore_label: i64,
    /// Token ids never selected for corruption.
    pub exclude: Vec<u32>,
}

impl Default for MlmSpec {
    fn default() -> Self {
        MlmSpec {
            mask_prob: 0.15,
            mask_token_frac: 0.8,
            random_frac: 0.1,
            ignore_label: -100,
            exclude: vec![
                crate::data::PAD,
                crate::data::CLS,
                crate::data::SEP,
                crate::data::MASK,
                crate::data::UNK,
            ],
        }
    }
}

impl MlmSpec {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.mask_prob) {
            return Err(Error::Config(format!(
                "mask_prob {} outside [0,1]",
                self.mask_prob
            )));
        }
        if self.mask_token_frac < 0.0
            || self.random_frac < 0.0
            || self.mask_token_frac + self.random_frac > 1.0
        {
            return Err(Error::Config(
                "mask/random/keep fractions must be nonnegative and sum to 1".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ItmSpec {
    pub negative_prob: f64,
}

impl Default for ItmSpec {
    fn default() -> Self {
        ItmSpec { negative_prob: 0.5 }
    }
}

impl ItmSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.negative_prob > 0.0 && self.negative_prob < 1.0) {
            return Err(Error::Config(format!(
                "negative_prob {} must be strictly inside (0, 1)",
                self.negative_prob
            )));
        }
        Ok(())
    }
}

/// 80/10/10 corruption of maskable positions. Labels carry the original id
/// at corrupted positions and the ignore sentinel elsewhere. Deterministic
/// per (seed, step, example row). A row with no maskable position yields
/// all-ignore labels.
pub fn apply_mlm_mask(
    ids: &IdMatrix,
    vocab_size: usize,
    spec: &MlmSpec,
    seed: u64,
    step: u64,
) -> (IdMatrix, Vec<i64>) {
    let mut corrupted = ids.data.clone();
    let mut labels = vec![spec.ignore_label; ids.data.len()];
    let first_regular = crate::data::RESERVED.len() as u32;
    for b in 0..ids.batch {
        let mut rng = stream(seed, Domain::MlmMask, step, b as u64);
        for t in 0..ids.len {
            let flat = b * ids.len + t;
            let id = ids.data[flat];
            if spec.exclude.contains(&id) {
                continue;
            }
            if rng.gen::<f64>() >= spec.mask_prob {
                continue;
            }
            labels[flat] = id as i64;
            let split = rng.gen::<f64>();
            if split < spec.mask_token_frac {
                corrupted[flat] = crate::data::MASK;
            } else if split < spec.mask_token_frac + spec.random_frac {
                if vocab_size > first_regular as usize {
                    corrupted[flat] = rng.gen_range(first_regular..vocab_size as u32);
                }
            } // else: keep the original token
        }
    }
    (IdMatrix::new(ids.batch, ids.len, corrupted), labels)
}

/// Independently negate each example with probability `negative_prob` by
/// substituting a uniformly chosen *different* image from the pool.
/// Returns the final image index per example and the binary labels
/// (1 = matched). The pool must contain at least two distinct images.
pub fn assign_itm_negatives(
    positives: &[usize],
    pool: &[usize],
    spec: &ItmSpec,
    seed: u64,
    step: u64,
) -> Result<(Vec<usize>, Vec<i64>)> {
    let mut distinct = pool.to_vec();
    distinct.sort_unstable();
    distinct.dedup();
    if distinct.len() < 2 {
        return Err(Error::Data(format!(
            "image-text matching needs >= 2 distinct images in the pool, got {}",
            distinct.len()
        )));
    }
    let mut images = Vec::with_capacity(positives.len());
    let mut labels = Vec::with_capacity(positives.len());
    for (e, &pos) in positives.iter().enumerate() {
        let mut rng = stream(seed, Domain::ItmNegative, step, e as u64);
        if rng.gen::<f64>() < spec.negative_prob {
            let neg = loop {
                let candidate = pool[rng.gen_range(0..pool.len())];
                if candidate != pos {
                    break candidate;
                }
            };
            images.push(neg);
            labels.push(0);
        } else {
            images.push(pos);
            labels.push(1);
        }
    }
    Ok((images, labels))
}

/// Forward once, then: MLM = mean cross-entropy of the vocabulary head over
/// text-position states at non-ignored labels; ITM = cross-entropy of the
/// binary head over the pooled state; total = unit-weighted sum of the
/// enabled components.
pub fn pretrain_loss<S: Scalar>(
    g: &Graph<S>,
    model: &Model<S>,
    batch: &Batch<S>,
    objectives: ObjectiveSet,
    ignore_label: i64,
) -> Result<LossParts<S>> {
    if !objectives.mlm && !objectives.itm {
        return Err(Error::Config(
            "enable at least one pretraining objective".into(),
        ));
    }
    let encoded = model.forward_batch(g, batch)?;
    let mut components = Vec::new();
    let mut total = None;

    if objectives.mlm {
        let labels = batch
            .mlm_labels
            .as_ref()
            .ok_or_else(|| Error::Config("batch carries no MLM labels".into()))?;
        let logits = model.heads.mlm.forward(g, &encoded.text_states)?;
        let loss = g.cross_entropy(&logits, labels, ignore_label)?;
        components.push(("mlm", loss.item().to_f64_lossy()));
        total = Some(loss);
    }
    if objectives.itm {
        let labels = batch
            .itm_labels
            .as_ref()
            .ok_or_else(|| Error::Config("batch carries no ITM labels".into()))?;
        let logits = model.heads.itm.forward(g, &encoded.pooled)?;
        let loss = g.cross_entropy(&logits, labels, ignore_label)?;
        components.push(("itm", loss.item().to_f64_lossy()));
        total = Some(match total {
            Some(prev) => g.add(&prev, &loss)?,
            None => loss,
        });
    }
    Ok(LossParts {
        total: total.unwrap(),
        components,
    })
}

/// Pretraining objective over a synthetic corpus: deterministic example
/// sampling, ITM image substitution, and MLM corruption per step.
pub struct Pretrainer<'c> {
    pub corpus: &'c Corpus,
    pub max_len: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub objectives: ObjectiveSet,
    pub mlm: MlmSpec,
    pub itm: ItmSpec,
    pub image_geometry: (usize, usize),
    train_records: Vec<usize>,
}

impl<'c> Pretrainer<'c> {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        corpus: &'c Corpus,
        max_len: usize,
        batch_size: usize,
        seed: u64,
        objectives: ObjectiveSet,
        mlm: MlmSpec,
        itm: ItmSpec,
        image_geometry: (usize, usize),
    ) -> Result<Self> {
        mlm.validate()?;
        itm.validate()?;
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
        Ok(Pretrainer {
            corpus,
            max_len,
            batch_size,
            seed,
            objectives,
            mlm,
            itm,
            image_geometry,
            train_records,
        })
    }

    fn records_for_step(&self, step: usize) -> Vec<usize> {
        let mut rng = stream(self.seed, Domain::BatchSample, step as u64, 0);
        (0..self.batch_size)
            .map(|_| *self.train_records.choose(&mut rng).unwrap())
            .collect()
    }

    /// Assemble the (possibly image-substituted, MLM-corrupted) batch for
    /// a step.
    pub fn build_batch<S: Scalar>(&self, step: usize) -> Result<Batch<S>> {
        let picked = self.records_for_step(step);
        let records: Vec<&ManifestRecord> =
            picked.iter().map(|&i| &self.corpus.records[i]).collect();

        let (image_indices, itm_labels) = if self.objectives.itm {
            let (images, labels) = assign_itm_negatives(
                &picked,
                &self.train_records,
                &self.itm,
                self.seed,
                step as u64,
            )?;
            (images, Some(labels))
        } else {
            (picked.clone(), None)
        };

        let token_rows: Vec<Vec<u32>> = records
            .iter()
            .map(|r| tokenize(&r.caption, &self.corpus.vocab))
            .collect();
        let (clean_ids, text_mask) = collate_text(&token_rows, self.max_len);
        let (ids, mlm_labels) = if self.objectives.mlm {
            let (ids, labels) = apply_mlm_mask(
                &clean_ids,
                self.corpus.vocab.len(),
                &self.mlm,
                self.seed,
                step as u64,
            );
            (ids, Some(labels))
        } else {
            (clean_ids, None)
        };

        let paths: Vec<&str> = image_indices
            .iter()
            .map(|&i| self.corpus.records[i].image.as_str())
            .collect();
        let images = stack_images(self.corpus, &paths, Some(self.image_geometry))?;

        Ok(Batch {
            ids,
            text_mask,
            images,
            images_b: None,
            mlm_labels,
            itm_labels,
            class_labels: None,
            regions: None,
            example_ids: records.iter().map(|r| r.id).collect(),
        })
    }
}

impl<S: Scalar> BatchSource<S> for Pretrainer<'_> {
    fn batch(&self, step: usize) -> Result<Batch<S>> {
        self.build_batch(step)
    }
}

impl<S: Scalar> Objective<S> for Pretrainer<'_> {
    fn loss(&self, g: &Graph<S>, model: &Model<S>, batch: &Batch<S>) -> Result<LossParts<S>> {
        pretrain_loss(g, model, batch, self.objectives, self.mlm.ignore_label)
    }
}

/// Matched/mismatched accuracy of the ITM head over a record set, with
/// deterministic alternating negatives (odd examples take a neighbouring
/// record's image).
pub fn evaluate_itm<S: Scalar>(
    model: &Model<S>,
    corpus: &Corpus,
    split: Split,
    max_len: usize,
    image_geometry: (usize, usize),
    chunk: usize,
) -> Result<f64> {
    let records = corpus.split(split);
    if records.len() < 2 {
        return Err(Error::Data("ITM evaluation needs >= 2 records".into()));
    }
    let mut correct = 0usize;
    let mut total = 0usize;
    for chunk_records in records.chunks(chunk.max(2)) {
        if chunk_records.len() < 2 {
            continue;
        }
        let token_rows: Vec<Vec<u32>> = chunk_records
            .iter()
            .map(|r| tokenize(&r.caption, &corpus.vocab))
            .collect();
        let (ids, text_mask) = collate_text(&token_rows, max_len);
        let paths: Vec<&str> = chunk_records
            .iter()
            .enumerate()
            .map(|(i, r)| {
                if i % 2 == 1 {
                    // Mismatch: neighbouring record's image.
                    chunk_records[(i + 1) % chunk_records.len()].image.as_str()
                } else {
                    r.image.as_str()
                }
            })
            .collect();
        let labels: Vec<i64> = (0..chunk_records.len())
            .map(|i| i64::from(i % 2 == 0))
            .collect();
        let images = stack_images::<S>(corpus, &paths, Some(image_geometry))?;
        let g = Graph::inference();
        let encoded = model.forward(&g, &ids, &text_mask, &images)?;
        let logits = model.heads.itm.forward(&g, &encoded.pooled)?;
        let data = logits.data();
        for (i, label) in labels.iter().enumerate() {
            let matched = data[i * 2 + 1] > data[i * 2];
            if i64::from(matched) == *label {
                correct += 1;
            }
            total += 1;
        }
    }
    Ok(correct as f64 / total as f64)
}

/// Mean MLM loss over a record set with deterministic corruption
/// (seed-keyed, step 0).
pub fn evaluate_mlm<S: Scalar>(
    model: &Model<S>,
    corpus: &Corpus,
    split: Split,
    max_len: usize,
    image_geometry: (usize, usize),
    chunk: usize,
    spec: &MlmSpec,
    seed: u64,
) -> Result<f64> {
    let records = corpus.split(split);
    if records.is_empty() {
        return Err(Error::Data("MLM evaluation needs records".into()));
    }
    let mut total = 0.0;
    let mut batches = 0usize;
    for chunk_records in records.chunks(chunk.max(1)) {
        let token_rows: Vec<Vec<u32>> = chunk_records
            .iter()
            .map(|r| tokenize(&r.caption, &corpus.vocab))
            .collect();
        let (clean_ids, text_mask) = collate_text(&token_rows, max_len);
        let (ids, labels) = apply_mlm_mask(&clean_ids, corpus.vocab.len(), spec, seed, 0);
        let paths: Vec<&str> = chunk_records.iter().map(|r| r.image.as_str()).collect();
        let images = stack_images::<S>(corpus, &paths, Some(image_geometry))?;
        let g = Graph::inference();
        let encoded = model.forward(&g, &ids, &text_mask, &images)?;
        let logits = model.heads.mlm.forward(&g, &encoded.text_states)?;
        let loss = g.cross_entropy(&logits, &labels, spec.ignore_label)?;
        total += loss.item().to_f64_lossy();
        batches += 1;
    }
    Ok(total / batches as f64)
}
