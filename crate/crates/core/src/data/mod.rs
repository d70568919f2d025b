//! Tokenizer, vocabulary, manifests, image decoding, synthetic corpus
//! generation, and batch collation.
//!
//! External formats: the vocabulary is one token per line (id = line
//! number), manifests are line-delimited JSON records, images are binary
//! PPM (P6).

pub mod ppm;
pub mod synth;

pub use ppm::{decode_image, read_ppm, write_ppm};
pub use synth::{gen_synthetic, GenTask, SplitCounts};

use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{IdMatrix, KeyMask, Tensor};

pub const PAD: u32 = 0;
pub const CLS: u32 = 1;
pub const SEP: u32 = 2;
pub const MASK: u32 = 3;
pub const UNK: u32 = 4;

pub const RESERVED: [&str; 5] = ["[PAD]", "[CLS]", "[SEP]", "[MASK]", "[UNK]"];

/// Ordered token list with the five reserved tokens pinned at ids 0..4.
#[derive(Debug, Clone)]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, u32>,
}

impl Vocab {
    /// Build from word tokens; reserved tokens are prepended.
    pub fn from_words<I: IntoIterator<Item = String>>(words: I) -> Result<Self> {
        let mut tokens: Vec<String> = RESERVED.iter().map(|s| s.to_string()).collect();
        tokens.extend(words);
        Self::from_tokens(tokens)
    }

    pub fn from_tokens(tokens: Vec<String>) -> Result<Self> {
        for (i, reserved) in RESERVED.iter().enumerate() {
            if tokens.get(i).map(String::as_str) != Some(*reserved) {
                return Err(Error::Data(format!(
                    "vocab: token {i} must be the reserved {reserved}"
                )));
            }
        }
        let mut index = HashMap::new();
        for (i, tok) in tokens.iter().enumerate() {
            if index.insert(tok.clone(), i as u32).is_some() {
                return Err(Error::Data(format!("vocab: duplicate token {tok:?}")));
            }
        }
        Ok(Vocab { tokens, index })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        Self::from_tokens(text.lines().map(str::to_string).collect())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut out = String::new();
        for tok in &self.tokens {
            out.push_str(tok);
            out.push('\n');
        }
        fs::write(path, out)?;
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> Option<u32> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: u32) -> &str {
        &self.tokens[id as usize]
    }
}

/// Lowercased whitespace tokenization; out-of-vocabulary words map to
/// `[UNK]`.
pub fn tokenize(text: &str, vocab: &Vocab) -> Vec<u32> {
    text.split_whitespace()
        .map(|w| vocab.id(&w.to_lowercase()).unwrap_or(UNK))
        .collect()
}

pub fn detokenize(ids: &[u32], vocab: &Vocab) -> String {
    ids.iter()
        .map(|id| vocab.token(*id))
        .collect::<Vec<_>>()
        .join(" ")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Dev,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShapeKind {
    Square,
    Circle,
    Triangle,
}

impl ShapeKind {
    pub const ALL: [ShapeKind; 3] = [ShapeKind::Square, ShapeKind::Circle, ShapeKind::Triangle];

    pub fn word(&self) -> &'static str {
        match self {
            ShapeKind::Square => "square",
            ShapeKind::Circle => "circle",
            ShapeKind::Triangle => "triangle",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ColorName {
    Red,
    Green,
    Blue,
    Yellow,
    Purple,
    Orange,
}

impl ColorName {
    pub const ALL: [ColorName; 6] = [
        ColorName::Red,
        ColorName::Green,
        ColorName::Blue,
        ColorName::Yellow,
        ColorName::Purple,
        ColorName::Orange,
    ];

    pub fn word(&self) -> &'static str {
        match self {
            ColorName::Red => "red",
            ColorName::Green => "green",
            ColorName::Blue => "blue",
            ColorName::Yellow => "yellow",
            ColorName::Purple => "purple",
            ColorName::Orange => "orange",
        }
    }

    pub fn rgb(&self) -> [u8; 3] {
        match self {
            ColorName::Red => [220, 40, 40],
            ColorName::Green => [40, 200, 40],
            ColorName::Blue => [40, 60, 220],
            ColorName::Yellow => [230, 220, 40],
            ColorName::Purple => [160, 40, 200],
            ColorName::Orange => [240, 140, 30],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SceneObject {
    pub row: usize,
    pub col: usize,
    pub shape: ShapeKind,
    pub color: ColorName,
}

/// Ground-truth scene description: a grid of cells over the canvas, one
/// object per occupied cell. Each cell renders into exactly one patch at
/// the default 32x32 / patch-8 geometry.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SceneDesc {
    pub grid: usize,
    pub objects: Vec<SceneObject>,
    pub background: [u8; 3],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestRecord {
    pub id: u64,
    pub split: Split,
    pub image: String,
    pub caption: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub image_b: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<String>,
    /// Per candidate: patch indices covering it (reference resolution).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub regions: Option<Vec<Vec<usize>>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub scene: Option<SceneDesc>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub scene_b: Option<SceneDesc>,
}

/// A corpus directory: vocab, manifest, images.
pub struct Corpus {
    pub dir: PathBuf,
    pub vocab: Vocab,
    pub records: Vec<ManifestRecord>,
}

impl Corpus {
    pub fn load(dir: &Path) -> Result<Self> {
        let vocab = Vocab::load(&dir.join("vocab.txt"))?;
        let manifest = fs::read_to_string(dir.join("manifest.jsonl"))?;
        let mut records = Vec::new();
        for (lineno, line) in manifest.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let record: ManifestRecord = serde_json::from_str(line).map_err(|e| {
                Error::Data(format!("manifest line {}: {e}", lineno + 1))
            })?;
            records.push(record);
        }
        if records.is_empty() {
            return Err(Error::Data(format!("empty manifest in {}", dir.display())));
        }
        Ok(Corpus {
            dir: dir.to_path_buf(),
            vocab,
            records,
        })
    }

    pub fn split(&self, split: Split) -> Vec<&ManifestRecord> {
        self.records.iter().filter(|r| r.split == split).collect()
    }

    pub fn image_path(&self, relative: &str) -> PathBuf {
        self.dir.join(relative)
    }

    pub fn decode_record_image<S: Scalar>(
        &self,
        relative: &str,
        expect: Option<(usize, usize)>,
    ) -> Result<Tensor<S>> {
        decode_image(&self.image_path(relative), expect)
    }
}

/// Collated model input plus whatever labels the objective needs.
pub struct Batch<S: Scalar> {
    pub ids: IdMatrix,
    pub text_mask: KeyMask,
    pub images: Tensor<S>,
    pub images_b: Option<Tensor<S>>,
    /// Original-token targets at corrupted positions, ignore elsewhere.
    pub mlm_labels: Option<Vec<i64>>,
    /// 1 = matched pair, 0 = mismatched.
    pub itm_labels: Option<Vec<i64>>,
    pub class_labels: Option<Vec<i64>>,
    pub regions: Option<Vec<Vec<Vec<usize>>>>,
    pub example_ids: Vec<u64>,
}

/// Pad a set of token sequences to the batch maximum (capped at `max_len`,
/// truncating longer ones), wrap with `[CLS]`/`[SEP]`, and emit the pad
/// mask. Truncation preserves the terminal `[SEP]`.
pub fn collate_text(token_rows: &[Vec<u32>], max_len: usize) -> (IdMatrix, KeyMask) {
    assert!(max_len >= 2, "max_len must fit [CLS] and [SEP]");
    let wrapped: Vec<Vec<u32>> = token_rows
        .iter()
        .map(|row| {
            let body = if row.len() + 2 > max_len {
                &row[..max_len - 2]
            } else {
                &row[..]
            };
            let mut ids = Vec::with_capacity(body.len() + 2);
            ids.push(CLS);
            ids.extend_from_slice(body);
            ids.push(SEP);
            ids
        })
        .collect();
    let width = wrapped.iter().map(Vec::len).max().unwrap_or(2);
    let batch = wrapped.len();
    let mut data = Vec::with_capacity(batch * width);
    let mut keep = Vec::with_capacity(batch * width);
    for row in &wrapped {
        for t in 0..width {
            if t < row.len() {
                data.push(row[t]);
                keep.push(true);
            } else {
                data.push(PAD);
                keep.push(false);
            }
        }
    }
    (
        IdMatrix::new(batch, width, data),
        KeyMask::new(batch, width, keep),
    )
}

/// Decode and stack record images into one `[B, H, W, C]` tensor.
pub fn stack_images<S: Scalar>(
    corpus: &Corpus,
    paths: &[&str],
    expect: Option<(usize, usize)>,
) -> Result<Tensor<S>> {
    let mut data = Vec::new();
    let mut shape: Option<Vec<usize>> = None;
    for path in paths {
        let img = corpus.decode_record_image::<S>(path, expect)?;
        match &shape {
            None => shape = Some(img.shape().to_vec()),
            Some(s) => {
                if img.shape() != &s[..] {
                    return Err(Error::Data(format!(
                        "image {path} geometry differs within batch"
                    )));
                }
            }
        }
        data.extend_from_slice(&img.data());
    }
    let s = shape.ok_or_else(|| Error::Data("empty image batch".into()))?;
    Tensor::from_vec(vec![paths.len(), s[0], s[1], s[2]], data)
}

/// Tokenize captions and collate the basic (ids, mask, images) triple.
pub fn collate<S: Scalar>(
    records: &[&ManifestRecord],
    corpus: &Corpus,
    max_len: usize,
    expect: Option<(usize, usize)>,
) -> Result<Batch<S>> {
    let token_rows: Vec<Vec<u32>> = records
        .iter()
        .map(|r| tokenize(&r.caption, &corpus.vocab))
        .collect();
    let (ids, text_mask) = collate_text(&token_rows, max_len);
    let paths: Vec<&str> = records.iter().map(|r| r.image.as_str()).collect();
    let images = stack_images(corpus, &paths, expect)?;
    let images_b = if records.iter().all(|r| r.image_b.is_some()) {
        let paths: Vec<&str> = records.iter().map(|r| r.image_b.as_deref().unwrap()).collect();
        Some(stack_images(corpus, &paths, expect)?)
    } else {
        None
    };
    Ok(Batch {
        ids,
        text_mask,
        images,
        images_b,
        mlm_labels: None,
        itm_labels: None,
        class_labels: None,
        regions: records
            .iter()
            .all(|r| r.regions.is_some())
            .then(|| records.iter().map(|r| r.regions.clone().unwrap()).collect()),
        example_ids: records.iter().map(|r| r.id).collect(),
    })
}

/// Answer vocabulary for closed-set VQA: sorted unique answers of the
/// train split, fixed at fine-tune time.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnswerVocab {
    pub answers: Vec<String>,
}

impl AnswerVocab {
    pub fn from_corpus(corpus: &Corpus) -> Result<Self> {
        let mut answers: Vec<String> = corpus
            .split(Split::Train)
            .iter()
            .filter_map(|r| r.label.clone())
            .collect();
        answers.sort();
        answers.dedup();
        if answers.is_empty() {
            return Err(Error::Data("no answers in train split".into()));
        }
        Ok(AnswerVocab { answers })
    }

    pub fn len(&self) -> usize {
        self.answers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.answers.is_empty()
    }

    pub fn index(&self, answer: &str) -> Option<usize> {
        self.answers.iter().position(|a| a == answer)
    }
}
