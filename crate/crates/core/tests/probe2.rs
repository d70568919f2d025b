// Temporary diagnostics; run with --ignored --nocapture.
mod common;

use tempfile::TempDir;
use vl_core::data::{gen_synthetic, Corpus, GenTask, Split, SplitCounts};
use vl_core::engine::{train, AdamWHyper, ObjectiveSet, TrainConfig};
use vl_core::models::{
    CrossConfig, ImageGeometry, InitSource, Model, ModelConfig, ModelKind, TowerConfig,
    VisionTowerConfig,
};
use vl_core::pretrain::{evaluate_itm, evaluate_mlm, ItmSpec, MlmSpec, Pretrainer};

fn env_usize(k: &str, d: usize) -> usize {
    std::env::var(k).map(|s| s.parse().unwrap()).unwrap_or(d)
}
fn env_f64(k: &str, d: f64) -> f64 {
    std::env::var(k).map(|s| s.parse().unwrap()).unwrap_or(d)
}

fn two_tower(vocab: usize, dim: usize, layers: usize, xlayers: usize) -> ModelConfig {
    ModelConfig {
        model_type: ModelKind::TwoTower,
        vocab_size: vocab,
        text_max_len: 16,
        image: ImageGeometry { height: 32, width: 32, channels: 3, patch: 8 },
        text: TowerConfig { hidden: dim, embed: dim, intermediate: 2 * dim, heads: 4, layers },
        vision: VisionTowerConfig { hidden: dim, intermediate: 2 * dim, heads: 4, layers },
        cross: Some(CrossConfig { hidden: Some(dim), heads: 4, layers: xlayers, intermediate: Some(2 * dim) }),
        head: None,
        dropout: 0.0,
        seed: 42,
    }
}

fn one_tower(vocab: usize, dim: usize, layers: usize) -> ModelConfig {
    ModelConfig {
        model_type: ModelKind::OneTower,
        vocab_size: vocab,
        text_max_len: 16,
        image: ImageGeometry { height: 32, width: 32, channels: 3, patch: 8 },
        text: TowerConfig { hidden: dim, embed: dim, intermediate: 2 * dim, heads: 4, layers },
        vision: VisionTowerConfig { hidden: dim, intermediate: 2 * dim, heads: 4, layers },
        cross: None,
        head: None,
        dropout: 0.0,
        seed: 42,
    }
}

#[test]
#[ignore]
fn probe_matrix() {
    let steps = env_usize("P_STEPS", 800);
    let dim = env_usize("P_DIM", 64);
    let layers = env_usize("P_LAYERS", 2);
    let xlayers = env_usize("P_XLAYERS", 2);
    let lr = env_f64("P_LR", 5e-3);
    let batch = env_usize("P_BATCH", 32);
    let clip = env_f64("P_CLIP", 1.0);
    let mlm_on = env_usize("P_MLM", 1) == 1;
    let itm_on = env_usize("P_ITM", 1) == 1;
    let tower = env_usize("P_ONETOWER", 0);

    let data_dir = TempDir::new().unwrap();
    gen_synthetic(42, SplitCounts { train: 5000, dev: 400 }, GenTask::Pretrain, data_dir.path()).unwrap();
    let corpus = Corpus::load(data_dir.path()).unwrap();
    let config = if tower == 1 {
        one_tower(corpus.vocab.len(), dim, layers)
    } else {
        two_tower(corpus.vocab.len(), dim, layers, xlayers)
    };
    let (model, _) = Model::<f32>::build(&config, &InitSource::random()).unwrap();
    println!("params: {}", model.param_report().total);

    let objectives = ObjectiveSet { mlm: mlm_on, itm: itm_on };
    let trainer = Pretrainer::new(
        &corpus, 16, batch, 42, objectives,
        MlmSpec::default(), ItmSpec::default(), (32, 32),
    ).unwrap();
    let cfg = TrainConfig {
        steps, batch_size: batch, peak_lr: lr, warmup_frac: 0.1, clip_norm: clip,
        seed: 42, eval_every: None, checkpoint_every: None, objectives, log_every: 200,
    };
    let run_dir = TempDir::new().unwrap();
    let summary = train(&model, &trainer, &trainer, &cfg, AdamWHyper::default(), run_dir.path()).unwrap();
    println!("final: {:?}", summary.final_components);
    if itm_on {
        let acc = evaluate_itm(&model, &corpus, Split::Dev, 16, (32, 32), 64).unwrap();
        println!("dev ITM accuracy: {acc:.4}");
    }
    if mlm_on {
        let mlm = evaluate_mlm(&model, &corpus, Split::Dev, 16, (32, 32), 64, &MlmSpec::default(), 7).unwrap();
        println!("dev MLM loss: {mlm:.4}");
    }
}
