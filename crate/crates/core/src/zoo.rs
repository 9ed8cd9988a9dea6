//! Named architecture presets.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{RevNet, Termination};
use crate::mvit::{build_rev_mvit, FusionStrategy, MViTConfig, StageConfig, StemConfig};
use crate::rev::Schedule;
use crate::tensor::Scalar;
use crate::vit::{build_rev_vit, ViTConfig};

/// Declarative model description, tagged by `arch`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "arch", rename_all = "snake_case")]
pub enum ModelConfig {
    RevVit(ViTConfig),
    RevMvit(MViTConfig),
    /// Rev-ViT weights trained with conventional cached backprop.
    CachedVit(ViTConfig),
}

impl ModelConfig {
    pub fn arch(&self) -> &'static str {
        match self {
            ModelConfig::RevVit(_) => "rev_vit",
            ModelConfig::RevMvit(_) => "rev_mvit",
            ModelConfig::CachedVit(_) => "cached_vit",
        }
    }

    pub fn schedule(&self) -> Schedule {
        match self {
            ModelConfig::CachedVit(_) => Schedule::Cached,
            _ => Schedule::Reversible,
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            ModelConfig::RevVit(c) | ModelConfig::CachedVit(c) => c.validate(),
            ModelConfig::RevMvit(c) => c.validate(),
        }
    }

    pub fn build<T: Scalar>(&self, seed: u64) -> Result<RevNet<T>> {
        match self {
            ModelConfig::RevVit(c) | ModelConfig::CachedVit(c) => build_rev_vit(c, seed),
            ModelConfig::RevMvit(c) => build_rev_mvit(c, seed),
        }
    }

    pub fn image_size(&self) -> usize {
        match self {
            ModelConfig::RevVit(c) | ModelConfig::CachedVit(c) => c.image_size,
            ModelConfig::RevMvit(c) => c.image_size,
        }
    }

    pub fn in_chans(&self) -> usize {
        match self {
            ModelConfig::RevVit(c) | ModelConfig::CachedVit(c) => c.in_chans,
            ModelConfig::RevMvit(c) => c.in_chans,
        }
    }

    pub fn num_classes(&self) -> usize {
        match self {
            ModelConfig::RevVit(c) | ModelConfig::CachedVit(c) => c.num_classes,
            ModelConfig::RevMvit(c) => c.num_classes,
        }
    }

    /// Total reversible blocks.
    pub fn depth(&self) -> usize {
        match self {
            ModelConfig::RevVit(c) | ModelConfig::CachedVit(c) => c.depth,
            ModelConfig::RevMvit(c) => c.num_blocks(),
        }
    }

    /// Width of the first stage.
    pub fn dim(&self) -> usize {
        match self {
            ModelConfig::RevVit(c) | ModelConfig::CachedVit(c) => c.embed_dim,
            ModelConfig::RevMvit(c) => c.stages[0].embed_dim,
        }
    }

    /// Same family at another total block count and first-stage width.
    ///
    /// Rev-MViT depth changes land on its deepest stage; widths scale every
    /// stage. Head counts that no longer divide the width fall back to one.
    pub fn resized(&self, depth: usize, dim: usize) -> Result<ModelConfig> {
        let heads = |h: usize, d: usize| if d.is_multiple_of(h) { h } else { 1 };
        let out = match self {
            ModelConfig::RevVit(c) | ModelConfig::CachedVit(c) => {
                let c = ViTConfig {
                    depth,
                    embed_dim: dim,
                    num_heads: heads(c.num_heads, dim),
                    ..c.clone()
                };
                match self {
                    ModelConfig::CachedVit(_) => ModelConfig::CachedVit(c),
                    _ => ModelConfig::RevVit(c),
                }
            }
            ModelConfig::RevMvit(c) => {
                let mut c = c.clone();
                let deepest = (0..c.stages.len())
                    .max_by_key(|&i| (c.stages[i].depth, i))
                    .expect("stages");
                let others: usize = c
                    .stages
                    .iter()
                    .enumerate()
                    .filter(|&(i, _)| i != deepest)
                    .map(|(_, s)| s.depth)
                    .sum();
                if depth < others {
                    return Err(Error::Config(format!(
                        "depth {depth} is below the {others} blocks outside the deepest stage"
                    )));
                }
                c.stages[deepest].depth = depth - others;
                for (i, s) in c.stages.iter_mut().enumerate() {
                    s.embed_dim = dim << i;
                    s.num_heads = heads(s.num_heads, s.embed_dim);
                }
                c.stem.out_chans = dim;
                ModelConfig::RevMvit(c)
            }
        };
        out.validate()?;
        Ok(out)
    }
}

fn vit(d: usize, depth: usize, heads: usize) -> ViTConfig {
    ViTConfig {
        image_size: 224,
        patch_size: 16,
        in_chans: 3,
        embed_dim: d,
        mlp_ratio: 4,
        depth,
        num_heads: heads,
        drop_path_rate: 0.0,
        num_classes: 1000,
    }
}

pub fn rev_vit_s() -> ViTConfig {
    vit(384, 12, 6)
}

pub fn rev_vit_b() -> ViTConfig {
    vit(768, 12, 12)
}

pub fn rev_vit_l() -> ViTConfig {
    vit(1024, 24, 16)
}

/// Small model for gradient and memory checks: `d = 32`, `D = 4`.
pub fn rev_vit_tiny() -> ViTConfig {
    ViTConfig {
        image_size: 16,
        patch_size: 4,
        in_chans: 3,
        embed_dim: 32,
        mlp_ratio: 4,
        depth: 4,
        num_heads: 2,
        drop_path_rate: 0.0,
        num_classes: 8,
    }
}

/// Small model for synthetic training: `d = 64`, `D = 4`.
pub fn rev_vit_tiny_train() -> ViTConfig {
    ViTConfig {
        embed_dim: 64,
        num_heads: 4,
        ..rev_vit_tiny()
    }
}

fn stage(embed_dim: usize, num_heads: usize, depth: usize, kv_pool_stride: usize) -> StageConfig {
    StageConfig {
        embed_dim,
        num_heads,
        depth,
        kv_pool_stride,
        q_pool_stride: 2,
        mlp_ratio: 4,
    }
}

pub fn rev_mvit_b() -> MViTConfig {
    MViTConfig {
        image_size: 224,
        in_chans: 3,
        stem: StemConfig {
            kernel: 7,
            stride: 4,
            padding: 3,
            out_chans: 96,
        },
        stages: vec![
            stage(96, 1, 1, 4),
            stage(192, 2, 1, 2),
            stage(384, 4, 10, 1),
            stage(768, 8, 1, 1),
        ],
        fusion: FusionStrategy::default(),
        termination: Termination::NormConcat,
        pool_kernel: 3,
        pool_norm: true,
        drop_path_rate: 0.0,
        num_classes: 1000,
    }
}

/// Two-stage model on a `8×8` grid.
pub fn rev_mvit_tiny() -> MViTConfig {
    MViTConfig {
        image_size: 32,
        stem: StemConfig {
            kernel: 7,
            stride: 4,
            padding: 3,
            out_chans: 16,
        },
        stages: vec![stage(16, 1, 1, 2), stage(32, 2, 1, 1)],
        num_classes: 8,
        ..rev_mvit_b()
    }
}

pub const PRESETS: &[&str] = &[
    "rev_vit_s",
    "rev_vit_b",
    "rev_vit_l",
    "rev_mvit_b",
    "rev_vit_tiny",
    "rev_vit_tiny_train",
    "rev_mvit_tiny",
];

pub fn preset(name: &str) -> Result<ModelConfig> {
    Ok(match name {
        "rev_vit_s" => ModelConfig::RevVit(rev_vit_s()),
        "rev_vit_b" => ModelConfig::RevVit(rev_vit_b()),
        "rev_vit_l" => ModelConfig::RevVit(rev_vit_l()),
        "rev_mvit_b" => ModelConfig::RevMvit(rev_mvit_b()),
        "rev_vit_tiny" => ModelConfig::RevVit(rev_vit_tiny()),
        "rev_vit_tiny_train" => ModelConfig::RevVit(rev_vit_tiny_train()),
        "rev_mvit_tiny" => ModelConfig::RevMvit(rev_mvit_tiny()),
        other => {
            return Err(Error::Config(format!(
                "unknown preset {other:?}; known presets: {}",
                PRESETS.join(", ")
            )))
        }
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_preset_validates() {
        for name in PRESETS {
            preset(name).unwrap().validate().unwrap();
        }
    }

    #[test]
    fn resized_keeps_family() {
        let m = preset("rev_mvit_tiny").unwrap().resized(6, 8).unwrap();
        assert_eq!(m.depth(), 6);
        assert_eq!(m.dim(), 8);
        assert_eq!(m.arch(), "rev_mvit");
        let v = ModelConfig::CachedVit(rev_vit_tiny())
            .resized(3, 48)
            .unwrap();
        assert_eq!((v.depth(), v.dim(), v.arch()), (3, 48, "cached_vit"));
        assert!(preset("rev_mvit_b").unwrap().resized(2, 96).is_err());
    }
}
