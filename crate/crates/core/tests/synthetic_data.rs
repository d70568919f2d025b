//! Corpus generation and I/O. The scene interpreter here re-derives label
//! semantics from parsed captions, independently of the generator's
//! construction path, and must validate every generated triple.

use std::fs;

use tempfile::TempDir;
use vl_core::data::{
    collate_text, decode_image, gen_synthetic, read_ppm, tokenize, write_ppm, ColorName, Corpus,
    GenTask, ManifestRecord, SceneDesc, ShapeKind, Split, SplitCounts, Vocab, CLS, PAD, SEP, UNK,
};
use vl_core::data::synth::{cell_patch_index, vocab_words};
use vl_core::Error;

fn vocab() -> Vocab {
    Vocab::from_words(vocab_words()).unwrap()
}

fn gen(task: GenTask, seed: u64, train: usize, dev: usize) -> (TempDir, Corpus, String) {
    let dir = TempDir::new().unwrap();
    let digest = gen_synthetic(
        seed,
        SplitCounts { train, dev },
        task,
        dir.path(),
    )
    .unwrap();
    let corpus = Corpus::load(dir.path()).unwrap();
    (dir, corpus, digest)
}

// ---------------------------------------------------------------------
// Scene interpreter oracle: parse a caption, evaluate against the scene.

#[derive(Debug, PartialEq)]
enum Verdict {
    Entailment,
    Neutral,
    Contradiction,
}

struct ParsedObject {
    hedged: bool,
    color: ColorName,
    shape: ShapeKind,
}

struct ParsedCaption {
    subject: ParsedObject,
    relation: Option<(String, ParsedObject)>,
}

fn parse_color(w: &str) -> Option<ColorName> {
    ColorName::ALL.iter().copied().find(|c| c.word() == w)
}

fn parse_shape(w: &str) -> Option<ShapeKind> {
    ShapeKind::ALL.iter().copied().find(|s| s.word() == w)
}

fn is_hedge(w: &str) -> bool {
    matches!(w, "large" | "small" | "shiny")
}

/// Grammar: ("a"|"the") hedge? color shape [rel "a" hedge? color shape]
/// where rel is "left of" | "right of" | "above" | "below".
fn parse_caption(caption: &str) -> ParsedCaption {
    let words: Vec<&str> = caption.split_whitespace().collect();
    let mut pos = 0;
    let mut parse_object = |pos: &mut usize| -> ParsedObject {
        assert!(matches!(words[*pos], "a" | "the"), "determiner at {pos}: {caption}");
        *pos += 1;
        let hedged = is_hedge(words[*pos]);
        if hedged {
            *pos += 1;
        }
        let color = parse_color(words[*pos]).unwrap_or_else(|| panic!("color in {caption}"));
        *pos += 1;
        let shape = parse_shape(words[*pos]).unwrap_or_else(|| panic!("shape in {caption}"));
        *pos += 1;
        ParsedObject { hedged, color, shape }
    };
    let subject = parse_object(&mut pos);
    let relation = if pos < words.len() {
        let rel = match words[pos] {
            "left" | "right" => {
                let r = format!("{} {}", words[pos], words[pos + 1]);
                pos += 2;
                r
            }
            "above" | "below" => {
                let r = words[pos].to_string();
                pos += 1;
                r
            }
            other => panic!("relation {other:?} in {caption}"),
        };
        let object = parse_object(&mut pos);
        Some((rel, object))
    } else {
        None
    };
    assert_eq!(pos, words.len(), "trailing words in {caption}");
    ParsedCaption { subject, relation }
}

fn relation_holds(rel: &str, a: &(usize, usize), b: &(usize, usize)) -> bool {
    match rel {
        "left of" => a.1 < b.1,
        "right of" => a.1 > b.1,
        "above" => a.0 < b.0,
        "below" => a.0 > b.0,
        other => panic!("unknown relation {other}"),
    }
}

/// Does the caption's factual skeleton (colors, shapes, relation) hold?
fn skeleton_true(parsed: &ParsedCaption, scene: &SceneDesc) -> bool {
    let find = |o: &ParsedObject| -> Vec<(usize, usize)> {
        scene
            .objects
            .iter()
            .filter(|s| s.color == o.color && s.shape == o.shape)
            .map(|s| (s.row, s.col))
            .collect()
    };
    let subjects = find(&parsed.subject);
    match &parsed.relation {
        None => !subjects.is_empty(),
        Some((rel, object)) => {
            let objects = find(object);
            subjects.iter().any(|a| {
                objects
                    .iter()
                    .any(|b| a != b && relation_holds(rel, a, b))
            })
        }
    }
}

/// Oracle verdict: a false skeleton contradicts; a true skeleton with an
/// unverifiable attribute (size/sheen is never rendered) is neutral; a
/// plain true skeleton is entailed.
fn interpret(caption: &str, scene: &SceneDesc) -> Verdict {
    let parsed = parse_caption(caption);
    if !skeleton_true(&parsed, scene) {
        return Verdict::Contradiction;
    }
    let hedged = parsed.subject.hedged || parsed.relation.as_ref().is_some_and(|(_, o)| o.hedged);
    if hedged {
        Verdict::Neutral
    } else {
        Verdict::Entailment
    }
}

// ---------------------------------------------------------------------

#[test]
fn tokenize_round_trips_known_words() {
    let v = vocab();
    let ids = tokenize("a red square", &v);
    assert_eq!(ids.len(), 3);
    assert_eq!(vl_core::data::detokenize(&ids, &v), "a red square");

    assert_eq!(tokenize("a zebra", &v)[1], UNK);
    assert!(tokenize("", &v).is_empty());
    // Lowercasing happens before lookup.
    assert_eq!(tokenize("RED", &v), tokenize("red", &v));
}

#[test]
fn vocab_enforces_reserved_prefix_and_uniqueness() {
    assert!(Vocab::from_tokens(vec!["[PAD]".into(), "x".into()]).is_err());
    let dup: Vec<String> = ["[PAD]", "[CLS]", "[SEP]", "[MASK]", "[UNK]", "a", "a"]
        .iter()
        .map(|s| s.to_string())
        .collect();
    assert!(Vocab::from_tokens(dup).is_err());
    assert!(vocab().len() <= 64);
}

#[test]
fn ppm_standardization_and_errors() {
    let dir = TempDir::new().unwrap();
    let path = dir.path().join("img.ppm");

    write_ppm(&path, 4, 4, &[0u8; 48]).unwrap();
    let t = decode_image::<f64>(&path, Some((4, 4))).unwrap();
    assert!(t.to_vec().iter().all(|v| *v == -1.0));

    write_ppm(&path, 4, 4, &[255u8; 48]).unwrap();
    let t = decode_image::<f64>(&path, None).unwrap();
    assert!(t.to_vec().iter().all(|v| *v == 1.0));

    write_ppm(&path, 4, 4, &[128u8; 48]).unwrap();
    let t = decode_image::<f64>(&path, None).unwrap();
    let expected = (128.0 / 255.0 - 0.5) / 0.5;
    assert!((t.to_vec()[0] - expected).abs() < 1e-12);
    assert!((expected - 0.00392).abs() < 1e-5);

    // Wrong geometry is a structured error.
    assert!(matches!(
        decode_image::<f64>(&path, Some((8, 8))),
        Err(Error::Data(_))
    ));
    // Bad magic.
    fs::write(&path, b"P5\n4 4\n255\nxxxx").unwrap();
    assert!(read_ppm(&path).is_err());
    // Truncated payload.
    fs::write(&path, b"P6\n4 4\n255\nshort").unwrap();
    let msg = read_ppm(&path).unwrap_err().to_string();
    assert!(msg.contains("truncated"), "{msg}");
}

#[test]
fn collate_pads_and_truncates_with_terminal_sep() {
    // Content lengths 3 and 5 -> width 7 with [CLS]/[SEP], two pads on
    // the first row.
    let rows = vec![vec![10, 11, 12], vec![10, 11, 12, 13, 14]];
    let (ids, mask) = collate_text(&rows, 16);
    assert_eq!(ids.len, 7);
    assert_eq!(ids.row(0), &[CLS, 10, 11, 12, SEP, PAD, PAD]);
    assert_eq!(ids.row(1), &[CLS, 10, 11, 12, 13, 14, SEP]);
    assert_eq!(mask.row(0), &[true, true, true, true, true, false, false]);

    // Identical rows collate to identical mask rows.
    let (_, mask) = collate_text(&[vec![7, 8], vec![7, 8]], 16);
    assert_eq!(mask.row(0), mask.row(1));

    // Truncation at max_len preserves the terminal [SEP].
    let (ids, _) = collate_text(&[vec![9; 50]], 8);
    assert_eq!(ids.len, 8);
    assert_eq!(ids.row(0)[7], SEP);
    assert_eq!(ids.row(0)[0], CLS);
}

#[test]
fn generation_is_deterministic_and_digest_pinned_in_manifest() {
    let a = TempDir::new().unwrap();
    let b = TempDir::new().unwrap();
    let counts = SplitCounts { train: 12, dev: 6 };
    let da = gen_synthetic(3, counts, GenTask::Pretrain, a.path()).unwrap();
    let db = gen_synthetic(3, counts, GenTask::Pretrain, b.path()).unwrap();
    assert_eq!(da, db, "same seed must give identical digests");

    // Byte-identical corpora, file by file.
    for name in ["manifest.jsonl", "vocab.txt", "images/000000.ppm"] {
        assert_eq!(
            fs::read(a.path().join(name)).unwrap(),
            fs::read(b.path().join(name)).unwrap()
        );
    }
    // A different seed diverges.
    let c = TempDir::new().unwrap();
    let dc = gen_synthetic(4, counts, GenTask::Pretrain, c.path()).unwrap();
    assert_ne!(da, dc);
}

#[test]
fn zero_split_count_is_an_error() {
    let dir = TempDir::new().unwrap();
    let err = gen_synthetic(1, SplitCounts { train: 0, dev: 3 }, GenTask::Pretrain, dir.path());
    assert!(err.is_err());
}

#[test]
fn snli_labels_are_balanced_and_oracle_consistent() {
    let (_dir, corpus, _) = gen(GenTask::SnliVe, 11, 90, 30);
    for split in [Split::Train, Split::Dev] {
        let mut counts = [0usize; 3];
        for r in corpus.split(split) {
            match r.label.as_deref().unwrap() {
                "entailment" => counts[0] += 1,
                "neutral" => counts[1] += 1,
                "contradiction" => counts[2] += 1,
                other => panic!("bad label {other}"),
            }
        }
        let max = counts.iter().max().unwrap();
        let min = counts.iter().min().unwrap();
        assert!(max - min <= 1, "unbalanced: {counts:?}");
    }
    // Interpreter validates 100% of triples.
    for r in &corpus.records {
        let scene = r.scene.as_ref().unwrap();
        let expected = match r.label.as_deref().unwrap() {
            "entailment" => Verdict::Entailment,
            "neutral" => Verdict::Neutral,
            _ => Verdict::Contradiction,
        };
        assert_eq!(
            interpret(&r.caption, scene),
            expected,
            "record {}: {:?} / scene {:?}",
            r.id,
            r.caption,
            scene
        );
    }
}

#[test]
fn pretrain_captions_are_all_true_of_their_scenes() {
    let (_dir, corpus, _) = gen(GenTask::Pretrain, 12, 60, 20);
    for r in &corpus.records {
        let scene = r.scene.as_ref().unwrap();
        assert_eq!(interpret(&r.caption, scene), Verdict::Entailment, "{}", r.caption);
    }
}

#[test]
fn nlvr2_statements_match_their_pair_truth() {
    let (_dir, corpus, _) = gen(GenTask::Nlvr2, 13, 60, 20);
    for r in &corpus.records {
        let a = r.scene.as_ref().unwrap();
        let b = r.scene_b.as_ref().unwrap();
        let true_of_either = interpret(&r.caption, a) == Verdict::Entailment
            || interpret(&r.caption, b) == Verdict::Entailment;
        match r.label.as_deref().unwrap() {
            "true" => assert!(true_of_either, "{}", r.caption),
            "false" => assert!(!true_of_either, "{}", r.caption),
            other => panic!("bad label {other}"),
        }
        assert!(r.image_b.is_some());
    }
}

#[test]
fn ref_res_regions_point_at_the_referent() {
    let (_dir, corpus, _) = gen(GenTask::RefRes, 14, 60, 20);
    for r in &corpus.records {
        let scene = r.scene.as_ref().unwrap();
        let regions = r.regions.as_ref().unwrap();
        assert_eq!(regions.len(), 4);
        let label: usize = r.label.as_deref().unwrap().parse().unwrap();
        // Parse "the {color} {shape}" and find the unique referent.
        let parsed = parse_caption(&r.caption);
        let referent = scene
            .objects
            .iter()
            .find(|o| o.color == parsed.subject.color && o.shape == parsed.subject.shape)
            .expect("referent exists");
        assert_eq!(
            regions[label],
            vec![cell_patch_index(referent.row, referent.col)],
            "label region must cover the referent"
        );
        // Every candidate is non-empty with in-range patch indices.
        for region in regions {
            assert!(!region.is_empty());
            assert!(region.iter().all(|p| *p < 16));
        }
    }
}

#[test]
fn vqa_answers_match_scene_ground_truth() {
    let (_dir, corpus, _) = gen(GenTask::Vqa, 15, 60, 20);
    for r in &corpus.records {
        let scene = r.scene.as_ref().unwrap();
        let answer = r.label.as_deref().unwrap();
        let words: Vec<&str> = r.caption.split_whitespace().collect();
        if words[0] == "what" {
            // "what color is the {shape}"
            let shape = parse_shape(words[4]).unwrap();
            let object = scene.objects.iter().find(|o| o.shape == shape).unwrap();
            assert_eq!(answer, object.color.word());
        } else {
            // "how many shapes are there"
            let expected = ["one", "two", "three"][scene.objects.len() - 1];
            assert_eq!(answer, expected);
        }
    }
}

#[test]
fn every_record_decodes_and_collates() {
    let (_dir, corpus, _) = gen(GenTask::Pretrain, 16, 30, 10);
    let records: Vec<&ManifestRecord> = corpus.records.iter().collect();
    let batch = vl_core::data::collate::<f32>(&records, &corpus, 16, Some((32, 32))).unwrap();
    assert_eq!(batch.ids.batch, 40);
    assert_eq!(batch.images.shape()[0], 40);
    // All caption words are in vocabulary (no [UNK] leaks in).
    assert!(batch.ids.data.iter().all(|id| *id != UNK));
}
