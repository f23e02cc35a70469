use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TextConfig {
    pub vocab_size: usize,
    pub context_len: usize,
    pub width: usize,
    pub heads: usize,
    pub layers: usize,
    pub ffn_hidden: usize,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ImageConfig {
    pub image_size: usize,
    pub patch_size: usize,
    #[serde(default = "one")]
    pub channels: usize,
    pub width: usize,
    pub heads: usize,
    pub layers: usize,
    pub ffn_hidden: usize,
}

fn one() -> usize {
    1
}

impl ImageConfig {
    pub fn num_patches(&self) -> usize {
        let side = self.image_size / self.patch_size;
        side * side
    }

    pub fn patch_dim(&self) -> usize {
        self.channels * self.patch_size * self.patch_size
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub text: TextConfig,
    pub image: ImageConfig,
    pub embed_dim: usize,
    pub has_pre_ln: bool,
    pub has_post_ln: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self::toy()
    }
}

impl ModelConfig {
    /// Minutes-scale CPU configuration.
    pub fn toy() -> Self {
        Self {
            text: TextConfig {
                vocab_size: 64,
                context_len: 16,
                width: 32,
                heads: 4,
                layers: 4,
                ffn_hidden: 128,
            },
            image: ImageConfig {
                image_size: 16,
                patch_size: 4,
                channels: 1,
                width: 32,
                heads: 4,
                layers: 4,
                ffn_hidden: 128,
            },
            embed_dim: 16,
            has_pre_ln: true,
            has_post_ln: true,
        }
    }

    /// CLIP ViT-B/16 dimensions. Only used for parameter counting.
    pub fn vit_b16_clip() -> Self {
        Self {
            text: TextConfig {
                vocab_size: 49_408,
                context_len: 77,
                width: 512,
                heads: 8,
                layers: 12,
                ffn_hidden: 2048,
            },
            image: ImageConfig {
                image_size: 224,
                patch_size: 16,
                channels: 3,
                width: 768,
                heads: 12,
                layers: 12,
                ffn_hidden: 3072,
            },
            embed_dim: 512,
            has_pre_ln: true,
            has_post_ln: true,
        }
    }

    pub fn preset(name: &str) -> Option<Self> {
        match name {
            "toy" => Some(Self::toy()),
            "vit_b16_clip" => Some(Self::vit_b16_clip()),
            _ => None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let t = &self.text;
        let i = &self.image;
        let checks: [(bool, String); 9] = [
            (t.vocab_size > super::vocab::FIRST_CLASS_TOKEN, format!("vocab_size {} leaves no class tokens", t.vocab_size)),
            (t.context_len >= 2, format!("context_len {} too short", t.context_len)),
            (t.heads > 0 && t.width % t.heads == 0, format!("text width {} not divisible by {} heads", t.width, t.heads)),
            (t.ffn_hidden >= t.width, format!("text ffn_hidden {} < width {}", t.ffn_hidden, t.width)),
            (i.patch_size > 0 && i.image_size % i.patch_size == 0, format!("image_size {} not divisible by patch_size {}", i.image_size, i.patch_size)),
            (i.heads > 0 && i.width % i.heads == 0, format!("image width {} not divisible by {} heads", i.width, i.heads)),
            (i.ffn_hidden >= i.width, format!("image ffn_hidden {} < width {}", i.ffn_hidden, i.width)),
            (i.channels > 0 && self.embed_dim > 0, "channels and embed_dim must be positive".to_string()),
            (t.layers > 0 && i.layers > 0, "both encoders need at least one layer".to_string()),
        ];
        for (ok, msg) in checks {
            if !ok {
                return Err(Error::Config(msg));
            }
        }
        Ok(())
    }
}
