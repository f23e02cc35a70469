//! Trainable-parameter counts from config arithmetic alone.

use super::strategy::Strategy;
use crate::model::{layout, ModelConfig};

/// Biases of one transformer block: qkv (3w), attention output (w), FFN
/// expansion (f) and projection (w), plus the two LayerNorm biases (2w).
fn block_biases(width: usize, hidden: usize) -> usize {
    7 * width + hidden
}

fn block_params(width: usize, hidden: usize) -> usize {
    let ln = 2 * 2 * width;
    let qkv = width * 3 * width + 3 * width;
    let out = width * width + width;
    let ffn = width * hidden + hidden + hidden * width + width;
    ln + qkv + out + ffn
}

fn image_ln_count(config: &ModelConfig) -> usize {
    let w = config.image.width;
    let outer = usize::from(config.has_pre_ln) + usize::from(config.has_post_ln);
    (2 * config.image.layers + outer) * 2 * w
}

/// Exact number of scalars `s` marks trainable on a model built from
/// `config`. Custom predicates are evaluated against the parameter layout.
pub fn count_trainable(config: &ModelConfig, s: &Strategy) -> usize {
    let t = &config.text;
    let i = &config.image;
    let text_bitfit = t.layers * block_biases(t.width, t.ffn_hidden);
    let outer_ln = usize::from(config.has_pre_ln) + usize::from(config.has_post_ln);
    let image_bitfit = i.layers * block_biases(i.width, i.ffn_hidden) + i.width + outer_ln * i.width;
    match s {
        Strategy::ZeroShot => 0,
        Strategy::FullFinetune => {
            let text = t.vocab_size * t.width
                + t.context_len * t.width
                + t.layers * block_params(t.width, t.ffn_hidden)
                + 2 * t.width
                + t.width * config.embed_dim;
            let image = i.patch_dim() * i.width
                + i.width
                + i.width
                + (i.num_patches() + 1) * i.width
                + outer_ln * 2 * i.width
                + i.layers * block_params(i.width, i.ffn_hidden)
                + i.width * config.embed_dim;
            text + image
        }
        Strategy::BitFitAll => text_bitfit + image_bitfit,
        Strategy::BitFitText => text_bitfit,
        Strategy::FfnBiasText => t.layers * (t.ffn_hidden + t.width),
        Strategy::ProjBiasText => t.layers * t.width,
        Strategy::LayerNormImage => image_ln_count(config),
        Strategy::ClipFit => t.layers * t.width + image_ln_count(config),
        Strategy::Custom(_) => layout(config)
            .iter()
            .filter(|p| s.selects(&p.name))
            .map(|p| p.numel())
            .sum(),
    }
}

/// One-decimal rendering in K or M units, as parameter tables print it.
pub fn humanize(count: usize) -> String {
    if count >= 100_000 {
        format!("{:.2}M", count as f64 / 1e6)
    } else if count >= 1000 {
        format!("{:.1}K", count as f64 / 1e3)
    } else {
        count.to_string()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::strategy::PRESETS;

    #[test]
    fn vit_b16_counts() {
        let cfg = ModelConfig::vit_b16_clip();
        assert_eq!(count_trainable(&cfg, &Strategy::ProjBiasText), 6_144);
        assert_eq!(count_trainable(&cfg, &Strategy::FfnBiasText), 30_720);
        assert_eq!(count_trainable(&cfg, &Strategy::ClipFit), 46_080);
        assert_eq!(count_trainable(&cfg, &Strategy::BitFitText), 67_584);
        assert_eq!(count_trainable(&cfg, &Strategy::BitFitAll), 171_264);
        assert_eq!(humanize(67_584), "67.6K");
        assert_eq!(humanize(171_264), "0.17M");
        assert_eq!(humanize(6_144), "6.1K");
    }

    #[test]
    fn analytic_matches_layout_enumeration() {
        for cfg in [ModelConfig::toy(), ModelConfig::vit_b16_clip()] {
            for s in PRESETS {
                let enumerated: usize = layout(&cfg)
                    .iter()
                    .filter(|p| s.selects(&p.name))
                    .map(|p| p.numel())
                    .sum();
                assert_eq!(count_trainable(&cfg, &s), enumerated, "{s}");
            }
        }
    }
}
