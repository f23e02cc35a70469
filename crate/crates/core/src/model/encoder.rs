use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::config::ModelConfig;
use super::layout::{layout, Init};
use super::vocab;
use crate::autodiff::{Tape, Tensor, Var, DEFAULT_LN_EPS};
use crate::error::{Error, Result};
use crate::exec::ExecMode;
use crate::params::{ParamId, ParamStore};

/// Upper bound on the learned logit scale (τ ≥ 0.01), as in CLIP.
pub const MAX_LOGIT_SCALE: f64 = 4.605_170_185_988_091;

/// Rows per tape when embedding many inputs.
pub const INFERENCE_CHUNK: usize = 64;

#[derive(Clone, Debug)]
struct BlockIds {
    ln1: (ParamId, ParamId),
    qkv: (ParamId, ParamId),
    out: (ParamId, ParamId),
    ln2: (ParamId, ParamId),
    fc: (ParamId, ParamId),
    proj: (ParamId, ParamId),
}

#[derive(Clone, Debug)]
struct TextIds {
    token_embed: ParamId,
    pos_embed: ParamId,
    blocks: Vec<BlockIds>,
    ln_final: (ParamId, ParamId),
    projection: ParamId,
}

#[derive(Clone, Debug)]
struct ImageIds {
    patch: (ParamId, ParamId),
    class_token: ParamId,
    pos_embed: ParamId,
    pre_ln: Option<(ParamId, ParamId)>,
    blocks: Vec<BlockIds>,
    post_ln: Option<(ParamId, ParamId)>,
    projection: ParamId,
}

/// Miniature CLIP: a causal text transformer and a ViT sharing a joint
/// embedding space, plus a learned logit scale (`1/τ` in log space).
#[derive(Clone, Debug)]
pub struct DualEncoder {
    config: ModelConfig,
    params: ParamStore,
    text: TextIds,
    image: ImageIds,
    logit_scale: ParamId,
}

/// Per-tape cache mapping parameters to their leaf variables.
#[derive(Debug)]
pub struct Bindings {
    vars: Vec<Option<Var>>,
    frozen: bool,
}

impl Bindings {
    /// Parameters enter the tape as differentiable iff `requires_grad` is set.
    pub fn new(model: &DualEncoder) -> Self {
        Self {
            vars: vec![None; model.params.len()],
            frozen: false,
        }
    }

    /// Every parameter enters the tape as a constant.
    pub fn frozen(model: &DualEncoder) -> Self {
        Self {
            vars: vec![None; model.params.len()],
            frozen: true,
        }
    }

    /// Routes parameter `id` to an existing variable on the tape.
    pub fn insert(&mut self, id: ParamId, var: Var) {
        self.vars[id.0] = Some(var);
    }

    pub fn var(&mut self, tape: &mut Tape, params: &ParamStore, id: ParamId) -> Var {
        *self.vars[id.0].get_or_insert_with(|| {
            let t = params.get(id);
            if self.frozen {
                tape.constant(t)
            } else {
                tape.bind(t, id.0)
            }
        })
    }
}

impl DualEncoder {
    /// Freshly initialized model: N(0, 0.02) weights, zero biases, unit gains.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        for spec in layout(&config) {
            let n = spec.numel();
            let data = match spec.init {
                Init::Normal(std) => {
                    let dist = Normal::new(0.0, std).expect("positive std");
                    (0..n).map(|_| dist.sample(&mut rng)).collect()
                }
                Init::Zeros => vec![0.0; n],
                Init::Ones => vec![1.0; n],
                Init::Constant(v) => vec![v; n],
            };
            params.insert(spec.name, Tensor::new(spec.shape, data)?)?;
        }
        Self::from_params(config, params)
    }

    /// Wraps an existing parameter store; names and shapes must match the
    /// layout implied by `config`.
    pub fn from_params(config: ModelConfig, params: ParamStore) -> Result<Self> {
        config.validate()?;
        let specs = layout(&config);
        if specs.len() != params.len() {
            return Err(Error::Config(format!(
                "parameter tree has {} tensors, config implies {}",
                params.len(),
                specs.len()
            )));
        }
        for spec in &specs {
            let t = params.by_name(spec.name.as_str())?;
            if t.shape() != spec.shape.as_slice() {
                return Err(Error::dim(
                    "from_params",
                    format!("{} has shape {:?}, expected {:?}", spec.name, t.shape(), spec.shape),
                ));
            }
        }
        let id = |n: String| params.id(&n);
        let pair = |p: &str| -> Result<(ParamId, ParamId)> {
            Ok((params.id(&format!("{p}.gain")).or_else(|_| params.id(&format!("{p}.weight")))?, params.id(&format!("{p}.bias"))?))
        };
        let block = |p: String| -> Result<BlockIds> {
            Ok(BlockIds {
                ln1: pair(&format!("{p}.ln1"))?,
                qkv: pair(&format!("{p}.attn.qkv"))?,
                out: pair(&format!("{p}.attn.out"))?,
                ln2: pair(&format!("{p}.ln2"))?,
                fc: pair(&format!("{p}.ffn.fc"))?,
                proj: pair(&format!("{p}.ffn.proj"))?,
            })
        };
        let text = TextIds {
            token_embed: id("text.token_embed".into())?,
            pos_embed: id("text.pos_embed".into())?,
            blocks: (0..config.text.layers)
                .map(|l| block(format!("text.block{l}")))
                .collect::<Result<_>>()?,
            ln_final: pair("text.ln_final")?,
            projection: id("text.projection".into())?,
        };
        let image = ImageIds {
            patch: pair("image.patch_embed")?,
            class_token: id("image.class_token".into())?,
            pos_embed: id("image.pos_embed".into())?,
            pre_ln: config.has_pre_ln.then(|| pair("image.pre_ln")).transpose()?,
            blocks: (0..config.image.layers)
                .map(|l| block(format!("image.block{l}")))
                .collect::<Result<_>>()?,
            post_ln: config.has_post_ln.then(|| pair("image.post_ln")).transpose()?,
            projection: id("image.projection".into())?,
        };
        let logit_scale = id("logit_scale".into())?;
        Ok(Self {
            config,
            params,
            text,
            image,
            logit_scale,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn into_params(self) -> ParamStore {
        self.params
    }

    pub fn logit_scale_id(&self) -> ParamId {
        self.logit_scale
    }

    pub fn logit_scale(&self) -> f64 {
        self.params.get(self.logit_scale).item()
    }

    /// τ = exp(−logit_scale); always positive.
    pub fn temperature(&self) -> f64 {
        (-self.logit_scale()).exp()
    }

    /// Keeps the logit scale within `[0, MAX_LOGIT_SCALE]`.
    pub fn clamp_logit_scale(&mut self) {
        let t = self.params.get_mut(self.logit_scale);
        let v = t.data()[0].clamp(0.0, MAX_LOGIT_SCALE);
        t.data_mut()[0] = v;
    }

    fn block(
        &self,
        tape: &mut Tape,
        b: &mut Bindings,
        ids: &BlockIds,
        x: Var,
        seq: usize,
        heads: usize,
        causal: bool,
    ) -> Result<Var> {
        let p = &self.params;
        let ln = |tape: &mut Tape, b: &mut Bindings, x: Var, (g, bi): (ParamId, ParamId)| {
            let g = b.var(tape, p, g);
            let bi = b.var(tape, p, bi);
            tape.layer_norm(x, g, bi, DEFAULT_LN_EPS)
        };
        let linear = |tape: &mut Tape, b: &mut Bindings, x: Var, (w, bi): (ParamId, ParamId)| {
            let w = b.var(tape, p, w);
            let bi = b.var(tape, p, bi);
            let y = tape.matmul(x, w)?;
            tape.add_bias(y, bi)
        };

        let h = ln(tape, b, x, ids.ln1)?;
        let qkv = linear(tape, b, h, ids.qkv)?;
        let a = tape.attention(qkv, seq, heads, causal)?;
        let a = linear(tape, b, a, ids.out)?;
        let x = tape.add(x, a)?;

        let h = ln(tape, b, x, ids.ln2)?;
        let h = linear(tape, b, h, ids.fc)?;
        let h = tape.gelu(h);
        let h = linear(tape, b, h, ids.proj)?;
        tape.add(x, h)
    }

    fn layer_norm(&self, tape: &mut Tape, b: &mut Bindings, x: Var, (g, bi): (ParamId, ParamId)) -> Result<Var> {
        let g = b.var(tape, &self.params, g);
        let bi = b.var(tape, &self.params, bi);
        tape.layer_norm(x, g, bi, DEFAULT_LN_EPS)
    }

    /// Validates, pads, and flattens token sequences; returns ids and the
    /// pooling row of each sequence.
    pub fn prepare_tokens(&self, seqs: &[Vec<usize>]) -> Result<(Vec<usize>, Vec<usize>)> {
        let ctx = self.config.text.context_len;
        let vocab_size = self.config.text.vocab_size;
        let mut ids = Vec::with_capacity(seqs.len() * ctx);
        let mut pool = Vec::with_capacity(seqs.len());
        for (g, s) in seqs.iter().enumerate() {
            if let Some(&bad) = s.iter().find(|&&t| t >= vocab_size) {
                return Err(Error::Vocabulary {
                    token: bad,
                    vocab: vocab_size,
                });
            }
            let padded = vocab::pad_to(s, ctx);
            pool.push(g * ctx + vocab::end_position(&padded));
            ids.extend(padded);
        }
        Ok((ids, pool))
    }

    /// Text embeddings `[B×embed_dim]` (not normalized).
    pub fn text_features(&self, tape: &mut Tape, b: &mut Bindings, seqs: &[Vec<usize>]) -> Result<Var> {
        if seqs.is_empty() {
            return Err(Error::EmptyDataset("no token sequences".into()));
        }
        let cfg = &self.config.text;
        let (ids, pool) = self.prepare_tokens(seqs)?;
        let table = b.var(tape, &self.params, self.text.token_embed);
        let pos = b.var(tape, &self.params, self.text.pos_embed);
        let mut x = tape.embedding(table, &ids)?;
        x = tape.add_tiled(x, pos)?;
        for ids in &self.text.blocks {
            x = self.block(tape, b, ids, x, cfg.context_len, cfg.heads, true)?;
        }
        let pooled = tape.gather_rows(x, &pool)?;
        let pooled = self.layer_norm(tape, b, pooled, self.text.ln_final)?;
        let proj = b.var(tape, &self.params, self.text.projection);
        tape.matmul(pooled, proj)
    }

    /// Splits a `C×H×W` image into raster-ordered flattened patches.
    pub fn patchify(&self, image: &Tensor) -> Result<Vec<f64>> {
        let cfg = &self.config.image;
        let (c, s, p) = (cfg.channels, cfg.image_size, cfg.patch_size);
        if image.shape() != [c, s, s] {
            return Err(Error::dim(
                "encode_image",
                format!("expected image {:?}, got {:?}", [c, s, s], image.shape()),
            ));
        }
        let side = s / p;
        let data = image.data();
        let mut out = Vec::with_capacity(cfg.num_patches() * cfg.patch_dim());
        for py in 0..side {
            for px in 0..side {
                for ch in 0..c {
                    for y in 0..p {
                        let row = ch * s * s + (py * p + y) * s + px * p;
                        out.extend_from_slice(&data[row..row + p]);
                    }
                }
            }
        }
        Ok(out)
    }

    /// Image embeddings `[B×embed_dim]` (not normalized).
    pub fn image_features(&self, tape: &mut Tape, b: &mut Bindings, images: &[&Tensor]) -> Result<Var> {
        if images.is_empty() {
            return Err(Error::EmptyDataset("no images".into()));
        }
        let cfg = &self.config.image;
        let n_patches = cfg.num_patches();
        let mut patches = Vec::with_capacity(images.len() * n_patches * cfg.patch_dim());
        for img in images {
            patches.extend(self.patchify(img)?);
        }
        let patches = tape.constant(&Tensor::matrix(images.len() * n_patches, cfg.patch_dim(), patches)?);
        let (w, bias) = self.image.patch;
        let w = b.var(tape, &self.params, w);
        let bias = b.var(tape, &self.params, bias);
        let mut x = tape.matmul(patches, w)?;
        x = tape.add_bias(x, bias)?;
        let cls = b.var(tape, &self.params, self.image.class_token);
        x = tape.prepend_rows(x, cls, n_patches)?;
        let pos = b.var(tape, &self.params, self.image.pos_embed);
        x = tape.add_tiled(x, pos)?;
        if let Some(ln) = self.image.pre_ln {
            x = self.layer_norm(tape, b, x, ln)?;
        }
        let seq = n_patches + 1;
        for ids in &self.image.blocks {
            x = self.block(tape, b, ids, x, seq, cfg.heads, false)?;
        }
        let rows: Vec<usize> = (0..images.len()).map(|g| g * seq).collect();
        let mut c = tape.gather_rows(x, &rows)?;
        if let Some(ln) = self.image.post_ln {
            c = self.layer_norm(tape, b, c, ln)?;
        }
        let proj = b.var(tape, &self.params, self.image.projection);
        tape.matmul(c, proj)
    }

    pub fn encode_text(&self, tokens: &[usize]) -> Result<Tensor> {
        let mut tape = Tape::new();
        let mut b = Bindings::frozen(self);
        let f = self.text_features(&mut tape, &mut b, &[tokens.to_vec()])?;
        Ok(Tensor::vector(tape.value(f).to_vec()))
    }

    pub fn encode_image(&self, image: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let mut b = Bindings::frozen(self);
        let f = self.image_features(&mut tape, &mut b, &[image])?;
        Ok(Tensor::vector(tape.value(f).to_vec()))
    }

    /// Embeds many images without recording gradients, in order.
    pub fn embed_images(&self, images: &[&Tensor], exec: ExecMode) -> Result<Vec<Vec<f64>>> {
        let chunks: Vec<&[&Tensor]> = images.chunks(INFERENCE_CHUNK).collect();
        let parts = exec.map(&chunks, |chunk| -> Result<Vec<Vec<f64>>> {
            let mut tape = Tape::new();
            let mut b = Bindings::frozen(self);
            let f = self.image_features(&mut tape, &mut b, chunk)?;
            let e = self.config.embed_dim;
            Ok(tape.value(f).chunks(e).map(<[f64]>::to_vec).collect())
        });
        let mut out = Vec::with_capacity(images.len());
        for p in parts {
            out.extend(p?);
        }
        Ok(out)
    }

    /// Embeds token sequences without recording gradients.
    pub fn embed_texts(&self, seqs: &[Vec<usize>]) -> Result<Vec<Vec<f64>>> {
        let mut tape = Tape::new();
        let mut b = Bindings::frozen(self);
        let f = self.text_features(&mut tape, &mut b, seqs)?;
        Ok(tape
            .value(f)
            .chunks(self.config.embed_dim)
            .map(<[f64]>::to_vec)
            .collect())
    }
}
