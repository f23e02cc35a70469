//! Parameter tree of the dual encoder, derived from the config alone.

use super::config::ModelConfig;
use crate::params::ParamName;

pub const INIT_STD: f64 = 0.02;
/// CLIP initializes the logit scale to 1/0.07.
pub const INIT_LOGIT_SCALE: f64 = 2.659_260_036_932_778;

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Init {
    Normal(f64),
    Zeros,
    Ones,
    Constant(f64),
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamSpec {
    pub name: ParamName,
    pub shape: Vec<usize>,
    pub init: Init,
}

impl ParamSpec {
    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }
}

struct Builder(Vec<ParamSpec>);

impl Builder {
    fn add(&mut self, name: String, shape: &[usize], init: Init) {
        self.0.push(ParamSpec {
            name: ParamName::new(name),
            shape: shape.to_vec(),
            init,
        });
    }

    fn layer_norm(&mut self, prefix: &str, width: usize) {
        self.add(format!("{prefix}.gain"), &[width], Init::Ones);
        self.add(format!("{prefix}.bias"), &[width], Init::Zeros);
    }

    fn linear(&mut self, prefix: &str, fan_in: usize, fan_out: usize) {
        self.add(format!("{prefix}.weight"), &[fan_in, fan_out], Init::Normal(INIT_STD));
        self.add(format!("{prefix}.bias"), &[fan_out], Init::Zeros);
    }

    fn block(&mut self, prefix: &str, width: usize, hidden: usize) {
        self.layer_norm(&format!("{prefix}.ln1"), width);
        self.linear(&format!("{prefix}.attn.qkv"), width, 3 * width);
        self.linear(&format!("{prefix}.attn.out"), width, width);
        self.layer_norm(&format!("{prefix}.ln2"), width);
        self.linear(&format!("{prefix}.ffn.fc"), width, hidden);
        self.linear(&format!("{prefix}.ffn.proj"), hidden, width);
    }
}

/// Every parameter of the model in canonical order.
pub fn layout(config: &ModelConfig) -> Vec<ParamSpec> {
    let t = &config.text;
    let i = &config.image;
    let mut b = Builder(Vec::new());

    b.add("text.token_embed".into(), &[t.vocab_size, t.width], Init::Normal(INIT_STD));
    b.add("text.pos_embed".into(), &[t.context_len, t.width], Init::Normal(INIT_STD));
    for l in 0..t.layers {
        b.block(&format!("text.block{l}"), t.width, t.ffn_hidden);
    }
    b.layer_norm("text.ln_final", t.width);
    b.add("text.projection".into(), &[t.width, config.embed_dim], Init::Normal(INIT_STD));

    b.linear("image.patch_embed", i.patch_dim(), i.width);
    b.add("image.class_token".into(), &[i.width], Init::Normal(INIT_STD));
    b.add(
        "image.pos_embed".into(),
        &[i.num_patches() + 1, i.width],
        Init::Normal(INIT_STD),
    );
    if config.has_pre_ln {
        b.layer_norm("image.pre_ln", i.width);
    }
    for l in 0..i.layers {
        b.block(&format!("image.block{l}"), i.width, i.ffn_hidden);
    }
    if config.has_post_ln {
        b.layer_norm("image.post_ln", i.width);
    }
    b.add("image.projection".into(), &[i.width, config.embed_dim], Init::Normal(INIT_STD));

    b.add("logit_scale".into(), &[], Init::Constant(INIT_LOGIT_SCALE));
    b.0
}
