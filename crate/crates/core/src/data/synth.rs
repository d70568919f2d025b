//! Deterministic synthetic image-caption corpora.
//!
//! Scenes are grids of colored shapes rendered onto a small canvas; at the
//! default 32x32 canvas with patch size 8, every grid cell lands in
//! exactly one patch. Captions are templated descriptions whose truth
//! value against the scene is mechanically checkable, so task labels are
//! ground-truth consistent by construction.

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use crate::data::{
    write_ppm, ColorName, ManifestRecord, SceneDesc, SceneObject, ShapeKind, Split, Vocab,
    RESERVED,
};
use crate::error::{Error, Result};
use crate::rng::{stream, Domain};

pub const CANVAS: usize = 32;
pub const GRID: usize = 4;
pub const CELL: usize = CANVAS / GRID;
pub const BACKGROUND: [u8; 3] = [18, 18, 18];

const HEDGES: [&str; 3] = ["large", "small", "shiny"];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GenTask {
    Pretrain,
    SnliVe,
    Nlvr2,
    RefRes,
    Vqa,
}

impl GenTask {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "pretrain" => Ok(GenTask::Pretrain),
            "snli_ve" => Ok(GenTask::SnliVe),
            "nlvr2" => Ok(GenTask::Nlvr2),
            "ref_res" => Ok(GenTask::RefRes),
            "vqa" => Ok(GenTask::Vqa),
            other => Err(Error::Config(format!(
                "unknown data task {other:?} (pretrain|snli_ve|nlvr2|ref_res|vqa)"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct SplitCounts {
    pub train: usize,
    pub dev: usize,
}

/// The fixed word list every generated corpus uses. Well under the 64
/// token budget.
pub fn vocab_words() -> Vec<String> {
    let mut words: Vec<&str> = vec!["a", "the", "is", "are", "of"];
    words.extend(["left", "right", "above", "below"]);
    for c in ColorName::ALL {
        words.push(c.word());
    }
    for s in ShapeKind::ALL {
        words.push(s.word());
    }
    words.extend(HEDGES);
    words.extend(["what", "color", "how", "many", "shapes", "there"]);
    words.extend(["one", "two", "three"]);
    words.iter().map(|w| w.to_string()).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Relation {
    LeftOf,
    RightOf,
    Above,
    Below,
}

impl Relation {
    fn words(&self) -> &'static str {
        match self {
            Relation::LeftOf => "left of",
            Relation::RightOf => "right of",
            Relation::Above => "above",
            Relation::Below => "below",
        }
    }
}

fn true_relations(a: &SceneObject, b: &SceneObject) -> Vec<Relation> {
    let mut rels = Vec::new();
    if a.col < b.col {
        rels.push(Relation::LeftOf);
    }
    if a.col > b.col {
        rels.push(Relation::RightOf);
    }
    if a.row < b.row {
        rels.push(Relation::Above);
    }
    if a.row > b.row {
        rels.push(Relation::Below);
    }
    rels
}

fn pair_caption(a: &SceneObject, rel: Relation, b: &SceneObject) -> String {
    format!(
        "a {} {} {} a {} {}",
        a.color.word(),
        a.shape.word(),
        rel.words(),
        b.color.word(),
        b.shape.word()
    )
}

fn sample_cells(rng: &mut ChaCha8Rng, count: usize) -> Vec<(usize, usize)> {
    let mut cells: Vec<(usize, usize)> = (0..GRID * GRID).map(|i| (i / GRID, i % GRID)).collect();
    cells.shuffle(rng);
    cells.truncate(count);
    cells
}

/// Scene with `count` objects in distinct cells and pairwise-distinct
/// (color, shape) combinations.
fn sample_scene(rng: &mut ChaCha8Rng, count: usize) -> SceneDesc {
    let cells = sample_cells(rng, count);
    let mut used: Vec<(ColorName, ShapeKind)> = Vec::new();
    let objects = cells
        .into_iter()
        .map(|(row, col)| loop {
            let color = ColorName::ALL[rng.gen_range(0..ColorName::ALL.len())];
            let shape = ShapeKind::ALL[rng.gen_range(0..ShapeKind::ALL.len())];
            if !used.contains(&(color, shape)) {
                used.push((color, shape));
                break SceneObject {
                    row,
                    col,
                    shape,
                    color,
                };
            }
        })
        .collect();
    SceneDesc {
        grid: GRID,
        objects,
        background: BACKGROUND,
    }
}

/// A caption true of the scene: two of its objects plus one true relation.
fn true_caption(rng: &mut ChaCha8Rng, scene: &SceneDesc) -> String {
    let i = rng.gen_range(0..scene.objects.len());
    let j = loop {
        let j = rng.gen_range(0..scene.objects.len());
        if j != i {
            break j;
        }
    };
    let (a, b) = (&scene.objects[i], &scene.objects[j]);
    let rels = true_relations(a, b);
    let rel = rels[rng.gen_range(0..rels.len())];
    pair_caption(a, rel, b)
}

fn absent_color(rng: &mut ChaCha8Rng, scenes: &[&SceneDesc]) -> ColorName {
    let used: Vec<ColorName> = scenes
        .iter()
        .flat_map(|s| s.objects.iter().map(|o| o.color))
        .collect();
    let available: Vec<ColorName> = ColorName::ALL
        .iter()
        .copied()
        .filter(|c| !used.contains(c))
        .collect();
    available[rng.gen_range(0..available.len())]
}

/// A caption false of every given scene: its subject names a color absent
/// from all of them.
fn false_caption(rng: &mut ChaCha8Rng, scenes: &[&SceneDesc]) -> String {
    let base = scenes[0];
    let i = rng.gen_range(0..base.objects.len());
    let j = loop {
        let j = rng.gen_range(0..base.objects.len());
        if j != i {
            break j;
        }
    };
    let mut a = base.objects[i];
    a.color = absent_color(rng, scenes);
    let b = &base.objects[j];
    let rels = true_relations(&a, b);
    let rel = rels[rng.gen_range(0..rels.len())];
    pair_caption(&a, rel, b)
}

pub fn render_scene(scene: &SceneDesc) -> Vec<u8> {
    let mut rgb = Vec::with_capacity(CANVAS * CANVAS * 3);
    for _ in 0..CANVAS * CANVAS {
        rgb.extend_from_slice(&scene.background);
    }
    for obj in &scene.objects {
        let (top, left) = (obj.row * CELL, obj.col * CELL);
        let color = obj.color.rgb();
        for r in 0..CELL {
            for c in 0..CELL {
                let inside = match obj.shape {
                    ShapeKind::Square => (1..=6).contains(&r) && (1..=6).contains(&c),
                    ShapeKind::Circle => {
                        let dr = r as f64 + 0.5 - 4.0;
                        let dc = c as f64 + 0.5 - 4.0;
                        dr * dr + dc * dc <= 3.1 * 3.1
                    }
                    ShapeKind::Triangle => (1..=6).contains(&r) && (1..=r).contains(&c),
                };
                if inside {
                    let px = ((top + r) * CANVAS + left + c) * 3;
                    rgb[px..px + 3].copy_from_slice(&color);
                }
            }
        }
    }
    rgb
}

/// Patch index of a grid cell at the default geometry (patch size = cell).
pub fn cell_patch_index(row: usize, col: usize) -> usize {
    row * GRID + col
}

struct RecordBuilder {
    records: Vec<ManifestRecord>,
    images: Vec<(String, Vec<u8>)>,
    next_image: usize,
}

impl RecordBuilder {
    fn new() -> Self {
        RecordBuilder {
            records: Vec::new(),
            images: Vec::new(),
            next_image: 0,
        }
    }

    fn add_image(&mut self, scene: &SceneDesc) -> String {
        let name = format!("images/{:06}.ppm", self.next_image);
        self.next_image += 1;
        self.images.push((name.clone(), render_scene(scene)));
        name
    }
}

/// Generate a corpus: scene images, a manifest with ground-truth-consistent
/// task labels, and the vocabulary. Byte-identical for a given
/// (seed, counts, task). Returns the corpus digest.
pub fn gen_synthetic(seed: u64, counts: SplitCounts, task: GenTask, out_dir: &Path) -> Result<String> {
    if counts.train == 0 || counts.dev == 0 {
        return Err(Error::Config(format!(
            "split counts must be >= 1, got train={} dev={}",
            counts.train, counts.dev
        )));
    }
    let total = counts.train + counts.dev;
    let mut builder = RecordBuilder::new();

    for idx in 0..total {
        let split = if idx < counts.train { Split::Train } else { Split::Dev };
        let mut rng = stream(seed, Domain::DataGen, idx as u64, 0);
        let record = match task {
            GenTask::Pretrain => {
                let scene = sample_scene(&mut rng, 2);
                let caption = true_caption(&mut rng, &scene);
                let image = builder.add_image(&scene);
                ManifestRecord {
                    id: idx as u64,
                    split,
                    image,
                    caption,
                    image_b: None,
                    label: None,
                    regions: None,
                    scene: Some(scene),
                    scene_b: None,
                }
            }
            GenTask::SnliVe => {
                let scene = sample_scene(&mut rng, 2);
                let (caption, label) = match idx % 3 {
                    0 => (true_caption(&mut rng, &scene), "entailment"),
                    1 => {
                        // True skeleton plus an attribute the renderer never
                        // encodes, so its truth is undetermined.
                        let base = true_caption(&mut rng, &scene);
                        let hedge = HEDGES[rng.gen_range(0..HEDGES.len())];
                        (format!("a {hedge} {}", base.strip_prefix("a ").unwrap()), "neutral")
                    }
                    _ => (false_caption(&mut rng, &[&scene]), "contradiction"),
                };
                let image = builder.add_image(&scene);
                ManifestRecord {
                    id: idx as u64,
                    split,
                    image,
                    caption,
                    image_b: None,
                    label: Some(label.to_string()),
                    regions: None,
                    scene: Some(scene),
                    scene_b: None,
                }
            }
            GenTask::Nlvr2 => {
                let scene_a = sample_scene(&mut rng, 2);
                let scene_b = sample_scene(&mut rng, 2);
                let (caption, label) = if idx % 2 == 0 {
                    let about_a = rng.gen::<bool>();
                    let statement = if about_a {
                        true_caption(&mut rng, &scene_a)
                    } else {
                        true_caption(&mut rng, &scene_b)
                    };
                    (statement, "true")
                } else {
                    (false_caption(&mut rng, &[&scene_a, &scene_b]), "false")
                };
                let image = builder.add_image(&scene_a);
                let image_b = builder.add_image(&scene_b);
                ManifestRecord {
                    id: idx as u64,
                    split,
                    image,
                    caption,
                    image_b: Some(image_b),
                    label: Some(label.to_string()),
                    regions: None,
                    scene: Some(scene_a),
                    scene_b: Some(scene_b),
                }
            }
            GenTask::RefRes => {
                // Four objects with pairwise-distinct colors; the referring
                // expression picks one unambiguously.
                let cells = sample_cells(&mut rng, 4);
                let mut colors = ColorName::ALL.to_vec();
                colors.shuffle(&mut rng);
                let objects: Vec<SceneObject> = cells
                    .into_iter()
                    .zip(colors)
                    .map(|((row, col), color)| SceneObject {
                        row,
                        col,
                        shape: ShapeKind::ALL[rng.gen_range(0..ShapeKind::ALL.len())],
                        color,
                    })
                    .collect();
                let scene = SceneDesc {
                    grid: GRID,
                    objects,
                    background: BACKGROUND,
                };
                let target = rng.gen_range(0..scene.objects.len());
                let expr = format!(
                    "the {} {}",
                    scene.objects[target].color.word(),
                    scene.objects[target].shape.word()
                );
                let mut order: Vec<usize> = (0..scene.objects.len()).collect();
                order.shuffle(&mut rng);
                let regions: Vec<Vec<usize>> = order
                    .iter()
                    .map(|&k| {
                        let o = &scene.objects[k];
                        vec![cell_patch_index(o.row, o.col)]
                    })
                    .collect();
                let label = order.iter().position(|&k| k == target).unwrap();
                let image = builder.add_image(&scene);
                ManifestRecord {
                    id: idx as u64,
                    split,
                    image,
                    caption: expr,
                    image_b: None,
                    label: Some(label.to_string()),
                    regions: Some(regions),
                    scene: Some(scene),
                    scene_b: None,
                }
            }
            GenTask::Vqa => {
                let count = rng.gen_range(1..=3);
                let cells = sample_cells(&mut rng, count);
                let mut shapes = ShapeKind::ALL.to_vec();
                shapes.shuffle(&mut rng);
                let objects: Vec<SceneObject> = cells
                    .into_iter()
                    .zip(shapes)
                    .map(|((row, col), shape)| SceneObject {
                        row,
                        col,
                        shape,
                        color: ColorName::ALL[rng.gen_range(0..ColorName::ALL.len())],
                    })
                    .collect();
                let scene = SceneDesc {
                    grid: GRID,
                    objects,
                    background: BACKGROUND,
                };
                let (question, answer) = if idx % 2 == 0 {
                    let o = &scene.objects[rng.gen_range(0..scene.objects.len())];
                    (
                        format!("what color is the {}", o.shape.word()),
                        o.color.word().to_string(),
                    )
                } else {
                    let word = ["one", "two", "three"][scene.objects.len() - 1];
                    ("how many shapes are there".to_string(), word.to_string())
                };
                let image = builder.add_image(&scene);
                ManifestRecord {
                    id: idx as u64,
                    split,
                    image,
                    caption: question,
                    image_b: None,
                    label: Some(answer),
                    regions: None,
                    scene: Some(scene),
                    scene_b: None,
                }
            }
        };
        builder.records.push(record);
    }

    fs::create_dir_all(out_dir.join("images"))?;
    for (name, rgb) in &builder.images {
        write_ppm(&out_dir.join(name), CANVAS, CANVAS, rgb)?;
    }
    let mut manifest = String::new();
    for record in &builder.records {
        manifest.push_str(&serde_json::to_string(record)?);
        manifest.push('\n');
    }
    fs::write(out_dir.join("manifest.jsonl"), manifest)?;
    let vocab = Vocab::from_words(vocab_words())?;
    vocab.save(&out_dir.join("vocab.txt"))?;
    debug_assert!(vocab.len() <= 64);
    debug_assert_eq!(vocab.len(), RESERVED.len() + vocab_words().len());

    let digest = digest_corpus(out_dir)?;
    fs::write(out_dir.join("digest.txt"), format!("{digest}\n"))?;
    Ok(digest)
}

/// SHA-256 over every corpus file (sorted by relative path), excluding
/// digest.txt itself.
pub fn digest_corpus(dir: &Path) -> Result<String> {
    let mut paths: Vec<String> = Vec::new();
    collect_files(dir, dir, &mut paths)?;
    paths.retain(|p| p != "digest.txt");
    paths.sort();
    let mut hasher = Sha256::new();
    for rel in &paths {
        let content = fs::read(dir.join(rel))?;
        hasher.update(rel.as_bytes());
        hasher.update([0u8]);
        hasher.update((content.len() as u64).to_le_bytes());
        hasher.update(&content);
    }
    Ok(hex_string(&hasher.finalize()))
}

fn collect_files(root: &Path, dir: &Path, out: &mut Vec<String>) -> Result<()> {
    for entry in fs::read_dir(dir)? {
        let entry = entry?;
        let path = entry.path();
        if path.is_dir() {
            collect_files(root, &path, out)?;
        } else {
            let rel = path
                .strip_prefix(root)
                .expect("walked path under root")
                .to_string_lossy()
                .replace('\\', "/");
            out.push(rel);
        }
    }
    Ok(())
}

fn hex_string(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}
