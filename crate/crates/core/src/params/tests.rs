use super::*;
use crate::error::Error;
use crate::model::{DualEncoder, ModelConfig};

fn toy() -> DualEncoder {
    DualEncoder::new(ModelConfig::toy(), 0).unwrap()
}

fn set(mask: &FreezeMask) -> Vec<String> {
    mask.trainable_names().map(|n| n.to_string()).collect()
}

#[test]
fn zero_shot_trains_nothing() {
    let mut m = toy();
    let mask = apply_strategy(&mut m, &Strategy::ZeroShot).unwrap();
    assert_eq!(mask.trainable_scalars(m.params()), 0);
    assert!(m.params().iter().all(|(_, _, t)| !t.requires_grad()));
}

#[test]
fn proj_bias_text_on_toy() {
    let mut m = toy();
    let mask = apply_strategy(&mut m, &Strategy::ProjBiasText).unwrap();
    assert_eq!(mask.trainable_scalars(m.params()), 4 * 32);
    assert_eq!(mask.trainable_tensors(), 4);
    assert!(m.params().by_name("text.block3.ffn.proj.bias").unwrap().requires_grad());
    assert!(!m.params().by_name("text.block3.ffn.fc.bias").unwrap().requires_grad());
}

#[test]
fn clipfit_membership() {
    let mut m = toy();
    let mask = apply_strategy(&mut m, &Strategy::ClipFit).unwrap();
    let names = set(&mask);
    assert!(names.contains(&"image.pre_ln.gain".to_string()));
    assert!(names.contains(&"image.post_ln.bias".to_string()));
    assert!(names.iter().all(|n| !(n.starts_with("text.") && n.contains("ln"))));
    assert!(!names.contains(&"logit_scale".to_string()));
}

#[test]
fn presets_are_nested_and_idempotent() {
    let mut m = toy();
    let chain = [
        Strategy::ProjBiasText,
        Strategy::FfnBiasText,
        Strategy::BitFitText,
        Strategy::BitFitAll,
    ];
    let sets: Vec<Vec<String>> = chain
        .iter()
        .map(|s| set(&apply_strategy(&mut m, s).unwrap()))
        .collect();
    for w in sets.windows(2) {
        assert!(w[0].len() < w[1].len());
        assert!(w[0].iter().all(|n| w[1].contains(n)));
    }
    let a = apply_strategy(&mut m, &Strategy::ClipFit).unwrap();
    let b = apply_strategy(&mut m, &Strategy::ClipFit).unwrap();
    assert_eq!(a, b);
}

#[test]
fn bitfit_includes_patch_and_attention_biases() {
    let mut m = toy();
    let names = set(&apply_strategy(&mut m, &Strategy::BitFitAll).unwrap());
    for n in ["image.patch_embed.bias", "image.block2.attn.qkv.bias", "text.block0.attn.out.bias"] {
        assert!(names.contains(&n.to_string()), "{n}");
    }
    assert!(!names.contains(&"text.ln_final.bias".to_string()));
    assert!(!names.contains(&"image.class_token".to_string()));
}

#[test]
fn counts_match_mask_enumeration_for_every_preset() {
    let mut configs = vec![ModelConfig::toy()];
    let mut small = ModelConfig::toy();
    small.has_pre_ln = false;
    small.text.layers = 2;
    small.image.layers = 3;
    small.image.ffn_hidden = 48;
    configs.push(small);
    for cfg in configs {
        let mut m = DualEncoder::new(cfg.clone(), 9).unwrap();
        for s in PRESETS {
            let mask = apply_strategy(&mut m, &s).unwrap();
            assert_eq!(mask.trainable_scalars(m.params()), count_trainable(&cfg, &s), "{s}");
        }
        let full = apply_strategy(&mut m, &Strategy::FullFinetune).unwrap();
        assert_eq!(full.trainable_scalars(m.params()) + 1, m.params().scalar_count());
    }
}

#[test]
fn custom_predicates() {
    let mut m = toy();
    let s: Strategy = "text.*.ffn.proj.bias".parse().unwrap();
    let mask = apply_strategy(&mut m, &s).unwrap();
    assert_eq!(set(&mask), set(&apply_strategy(&mut m, &Strategy::ProjBiasText).unwrap()));
    assert_eq!(count_trainable(m.config(), &s), 128);
    let none: Strategy = "audio.**".parse().unwrap();
    assert!(matches!(apply_strategy(&mut m, &none), Err(Error::EmptyMask(_))));
}

#[test]
fn diff_is_symmetric() {
    let a = toy();
    let b = DualEncoder::new(ModelConfig::toy(), 1).unwrap();
    let (sa, sb) = (snapshot(&a, 0), snapshot(&b, 0));
    assert_eq!(
        diff(&sa, &sb, Grouping::PerTensor).unwrap(),
        diff(&sb, &sa, Grouping::PerTensor).unwrap()
    );
}
