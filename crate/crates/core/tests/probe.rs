// Temporary desk-scale probe; run with --ignored --nocapture.
mod common;

use std::time::Instant;

use tempfile::TempDir;
use vl_core::data::{gen_synthetic, Corpus, GenTask, Split, SplitCounts};
use vl_core::engine::{train, AdamWHyper, ObjectiveSet, TrainConfig};
use vl_core::models::{
    CrossConfig, ImageGeometry, InitSource, Model, ModelConfig, ModelKind, TowerConfig,
    VisionTowerConfig,
};
use vl_core::pretrain::{evaluate_itm, evaluate_mlm, ItmSpec, MlmSpec, Pretrainer};

fn desk_config(vocab: usize, dim: usize, layers: usize) -> ModelConfig {
    ModelConfig {
        model_type: ModelKind::TwoTower,
        vocab_size: vocab,
        text_max_len: 16,
        image: ImageGeometry { height: 32, width: 32, channels: 3, patch: 8 },
        text: TowerConfig { hidden: dim, embed: dim, intermediate: 2 * dim, heads: 4, layers },
        vision: VisionTowerConfig { hidden: dim, intermediate: 2 * dim, heads: 4, layers },
        cross: Some(CrossConfig { hidden: Some(dim), heads: 4, layers, intermediate: Some(2 * dim) }),
        head: None,
        dropout: 0.0,
        seed: 42,
    }
}

#[test]
#[ignore]
fn probe_desk_pretrain() {
    let steps: usize = std::env::var("PROBE_STEPS").map(|s| s.parse().unwrap()).unwrap_or(300);
    let dim: usize = std::env::var("PROBE_DIM").map(|s| s.parse().unwrap()).unwrap_or(64);
    let layers: usize = std::env::var("PROBE_LAYERS").map(|s| s.parse().unwrap()).unwrap_or(2);
    let lr: f64 = std::env::var("PROBE_LR").map(|s| s.parse().unwrap()).unwrap_or(1e-3);
    let batch: usize = std::env::var("PROBE_BATCH").map(|s| s.parse().unwrap()).unwrap_or(32);

    let data_dir = TempDir::new().unwrap();
    gen_synthetic(42, SplitCounts { train: 5000, dev: 500 }, GenTask::Pretrain, data_dir.path()).unwrap();
    let corpus = Corpus::load(data_dir.path()).unwrap();
    println!("vocab: {}", corpus.vocab.len());
    let ln_v = (corpus.vocab.len() as f64).ln();
    println!("ln V = {ln_v:.4}, 60% = {:.4}", 0.6 * ln_v);

    let config = desk_config(corpus.vocab.len(), dim, layers);
    let (model, _) = Model::<f32>::build(&config, &InitSource::random()).unwrap();
    println!("params: {}", model.param_report().total);

    let trainer = Pretrainer::new(
        &corpus, 16, batch, 42,
        ObjectiveSet { mlm: true, itm: true },
        MlmSpec::default(), ItmSpec::default(), (32, 32),
    ).unwrap();
    let cfg = TrainConfig {
        steps, batch_size: batch, peak_lr: lr, warmup_frac: 0.1, clip_norm: 1.0,
        seed: 42, eval_every: None, checkpoint_every: None,
        objectives: ObjectiveSet { mlm: true, itm: true }, log_every: 100,
    };
    let run_dir = TempDir::new().unwrap();
    let t0 = Instant::now();
    let summary = train(&model, &trainer, &trainer, &cfg, AdamWHyper::default(), run_dir.path()).unwrap();
    let secs = t0.elapsed().as_secs_f64();
    println!("{steps} steps in {secs:.1}s = {:.2} steps/s", steps as f64 / secs);
    println!("final components: {:?}", summary.final_components);

    let dev_mlm = evaluate_mlm(&model, &corpus, Split::Dev, 16, (32, 32), 64, &MlmSpec::default(), 7).unwrap();
    let dev_itm = evaluate_itm(&model, &corpus, Split::Dev, 16, (32, 32), 64).unwrap();
    println!("dev MLM loss: {dev_mlm:.4} (target < {:.4})", 0.6 * ln_v);
    println!("dev ITM accuracy: {dev_itm:.4} (target >= 0.90)");
}
