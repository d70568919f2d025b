//! Shared test helpers: config builders and the independent
//! parameter-walk oracle (pure closed-form dimension arithmetic, no model
//! introspection).

#![allow(dead_code)]

use vl_core::models::{
    CrossConfig, ImageGeometry, ModelConfig, ModelKind, ModuleId, TaskHeadConfig, TowerConfig,
    VisionTowerConfig,
};

pub fn tiny_two_tower(vocab_size: usize) -> ModelConfig {
    ModelConfig {
        model_type: ModelKind::TwoTower,
        vocab_size,
        text_max_len: 16,
        image: ImageGeometry {
            height: 32,
            width: 32,
            channels: 3,
            patch: 8,
        },
        text: TowerConfig {
            hidden: 32,
            embed: 32,
            intermediate: 64,
            heads: 2,
            layers: 2,
        },
        vision: VisionTowerConfig {
            hidden: 24,
            intermediate: 48,
            heads: 2,
            layers: 2,
        },
        cross: Some(CrossConfig {
            hidden: Some(32),
            heads: 2,
            layers: 2,
            intermediate: Some(64),
        }),
        head: None,
        dropout: 0.0,
        seed: 7,
    }
}

pub fn tiny_one_tower(vocab_size: usize) -> ModelConfig {
    ModelConfig {
        model_type: ModelKind::OneTower,
        vocab_size,
        text_max_len: 16,
        image: ImageGeometry {
            height: 32,
            width: 32,
            channels: 3,
            patch: 8,
        },
        text: TowerConfig {
            hidden: 32,
            embed: 16,
            intermediate: 64,
            heads: 2,
            layers: 2,
        },
        vision: VisionTowerConfig {
            hidden: 32,
            intermediate: 64,
            heads: 2,
            layers: 2,
        },
        cross: None,
        head: None,
        dropout: 0.0,
        seed: 7,
    }
}

/// The two-tower shape of the first experiment at desk scale:
/// ELECTRA-Small-shaped text tower (256/128/1028 x 12), DeiT-Tiny-shaped
/// vision tower (192/768 x 12), cross-modal 256 wide, 4 heads, 6 blocks.
pub fn exp1_desk_config(vocab_size: usize) -> ModelConfig {
    ModelConfig {
        model_type: ModelKind::TwoTower,
        vocab_size,
        text_max_len: 32,
        image: ImageGeometry {
            height: 32,
            width: 32,
            channels: 3,
            patch: 8,
        },
        text: TowerConfig {
            hidden: 256,
            embed: 128,
            intermediate: 1028,
            heads: 4,
            layers: 12,
        },
        vision: VisionTowerConfig {
            hidden: 192,
            intermediate: 768,
            heads: 3,
            layers: 12,
        },
        cross: Some(CrossConfig {
            hidden: Some(256),
            heads: 4,
            layers: 6,
            intermediate: Some(256),
        }),
        head: None,
        dropout: 0.1,
        seed: 42,
    }
}

/// Base-shaped two-tower: BERT-Base-shaped text tower, ViT-Base-shaped
/// vision tower, cross-modal 256 wide with 10 blocks.
pub fn base_shaped_config() -> ModelConfig {
    ModelConfig {
        model_type: ModelKind::TwoTower,
        vocab_size: 30522,
        text_max_len: 512,
        image: ImageGeometry {
            height: 224,
            width: 224,
            channels: 3,
            patch: 16,
        },
        text: TowerConfig {
            hidden: 768,
            embed: 768,
            intermediate: 3072,
            heads: 12,
            layers: 12,
        },
        vision: VisionTowerConfig {
            hidden: 768,
            intermediate: 3072,
            heads: 12,
            layers: 12,
        },
        cross: Some(CrossConfig {
            hidden: Some(256),
            heads: 4,
            layers: 10,
            intermediate: None, // 4x hidden
        }),
        head: None,
        dropout: 0.1,
        seed: 1,
    }
}

fn linear(inp: u64, out: u64) -> u64 {
    inp * out + out
}

fn encoder_block(d: u64, i: u64) -> u64 {
    // 4D^2+4D attention, 2DI+D+I feed-forward, 4D layer norms.
    4 * d * d + 4 * d + 2 * d * i + d + i + 4 * d
}

fn cross_block(dx: u64, ix: u64) -> u64 {
    // One shared cross-attention + two self-attentions, two FFNs, six LNs.
    3 * (4 * dx * dx + 4 * dx) + 2 * (2 * dx * ix + dx + ix) + 12 * dx
}

fn text_embedding(config: &ModelConfig) -> u64 {
    let (v, l, e, d) = (
        config.vocab_size as u64,
        config.text_max_len as u64,
        config.text.embed as u64,
        config.text.hidden as u64,
    );
    let projection = if e != d { linear(e, d) } else { 0 };
    v * e + l * e + 2 * e + projection + 2 * e
}

fn patch_embedding(config: &ModelConfig, hidden: u64) -> u64 {
    let p = config.image.patch as u64;
    let c = config.image.channels as u64;
    let n = ((config.image.height / config.image.patch)
        * (config.image.width / config.image.patch)) as u64;
    linear(p * p * c, hidden) + hidden + (n + 1) * hidden + 2 * hidden
}

fn head_counts(config: &ModelConfig) -> u64 {
    let v = config.vocab_size as u64;
    let pooled = config.pooled_dim() as u64;
    let mut total = linear(config.text_state_dim() as u64, v) + linear(pooled, 2);
    if let Some(head) = &config.head {
        let body = |inp: u64, classes: u64| match head.hidden {
            Some(h) => linear(inp, h as u64) + linear(h as u64, classes),
            None => linear(inp, classes),
        };
        total += match head.kind {
            vl_core::models::TaskKind::SnliVe => body(pooled, 3),
            vl_core::models::TaskKind::Nlvr2 => body(2 * pooled, 2),
            vl_core::models::TaskKind::Vqa => body(pooled, head.classes as u64),
            vl_core::models::TaskKind::RefRes => linear(config.vision_state_dim() as u64, 1),
            vl_core::models::TaskKind::Retrieval => 0,
        };
    }
    total
}

/// Closed-form per-module parameter counts, fully independent of the
/// model implementation.
pub fn oracle_module_counts(config: &ModelConfig) -> Vec<(ModuleId, u64)> {
    let d_t = config.text.hidden as u64;
    let i_t = config.text.intermediate as u64;
    match config.model_type {
        ModelKind::OneTower => vec![
            (ModuleId::TextEmbedding, text_embedding(config)),
            (
                ModuleId::TextEncoder,
                config.text.layers as u64 * encoder_block(d_t, i_t),
            ),
            (ModuleId::VisionEmbedding, patch_embedding(config, d_t)),
            (
                ModuleId::Head,
                linear(d_t, d_t) + head_counts(config), // pooler + heads
            ),
        ],
        ModelKind::TwoTower => {
            let d_v = config.vision.hidden as u64;
            let i_v = config.vision.intermediate as u64;
            let dx = config.cross_hidden() as u64;
            let ix = config.cross_intermediate() as u64;
            let cross = config.cross.as_ref().unwrap();
            vec![
                (ModuleId::TextEmbedding, text_embedding(config)),
                (
                    ModuleId::TextEncoder,
                    config.text.layers as u64 * encoder_block(d_t, i_t),
                ),
                (ModuleId::VisionEmbedding, patch_embedding(config, d_v)),
                (
                    ModuleId::VisionEncoder,
                    config.vision.layers as u64 * encoder_block(d_v, i_v),
                ),
                (
                    ModuleId::CrossModal,
                    linear(d_t, dx) + linear(d_v, dx) + cross.layers as u64 * cross_block(dx, ix),
                ),
                (ModuleId::Head, head_counts(config)),
            ]
        }
    }
}

pub fn oracle_total(config: &ModelConfig) -> u64 {
    oracle_module_counts(config).iter().map(|(_, n)| n).sum()
}

/// Oracle total restricted to trainable modules under a freeze spec.
pub fn oracle_trainable(config: &ModelConfig, spec: &vl_core::models::FreezeSpec) -> u64 {
    oracle_module_counts(config)
        .iter()
        .filter(|(module, _)| !spec.is_frozen(*module))
        .map(|(_, n)| n)
        .sum()
}

pub fn head_spec(kind: vl_core::models::TaskKind, classes: usize) -> TaskHeadConfig {
    TaskHeadConfig {
        kind,
        classes,
        hidden: None,
    }
}
