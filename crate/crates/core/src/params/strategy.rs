use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use super::registry::{ParamName, ParamStore};
use crate::error::{Error, Result};
use crate::model::DualEncoder;

/// Glob over dotted parameter paths.
///
/// `*` matches within one segment, `**` matches across segments, `?` one
/// character. Terms are comma separated; a term prefixed with `!` removes
/// matches. Example: `text.*.ffn.proj.bias,image.**.gain,!image.post_ln.gain`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PathPredicate {
    source: String,
    include: Vec<String>,
    exclude: Vec<String>,
}

impl PathPredicate {
    pub fn parse(expr: &str) -> Result<Self> {
        let mut include = Vec::new();
        let mut exclude = Vec::new();
        for term in expr.split(',').map(str::trim).filter(|t| !t.is_empty()) {
            match term.strip_prefix('!') {
                Some(rest) if !rest.is_empty() => exclude.push(rest.to_string()),
                Some(_) => return Err(Error::Config(format!("empty exclusion in `{expr}`"))),
                None => include.push(term.to_string()),
            }
        }
        if include.is_empty() {
            return Err(Error::Config(format!("predicate `{expr}` has no inclusion term")));
        }
        Ok(Self {
            source: expr.to_string(),
            include,
            exclude,
        })
    }

    pub fn matches(&self, name: &str) -> bool {
        self.include.iter().any(|p| glob(p.as_bytes(), name.as_bytes()))
            && !self.exclude.iter().any(|p| glob(p.as_bytes(), name.as_bytes()))
    }

    pub fn as_str(&self) -> &str {
        &self.source
    }
}

fn glob(pat: &[u8], s: &[u8]) -> bool {
    match pat {
        [] => s.is_empty(),
        [b'*', b'*', rest @ ..] => (0..=s.len()).any(|i| glob(rest, &s[i..])),
        [b'*', rest @ ..] => {
            let seg = s.iter().position(|&c| c == b'.').unwrap_or(s.len());
            (0..=seg).any(|i| glob(rest, &s[i..]))
        }
        [b'?', rest @ ..] => !s.is_empty() && s[0] != b'.' && glob(rest, &s[1..]),
        [c, rest @ ..] => s.first() == Some(c) && glob(rest, &s[1..]),
    }
}

/// Which parameters a fine-tuning run may update.
///
/// Bias presets select parameters whose name ends in `.bias` inside either
/// encoder, except the text encoder's final LayerNorm, which sits outside
/// the transformer stack. The logit scale is never trainable.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Strategy {
    ZeroShot,
    FullFinetune,
    /// Every bias in both encoders.
    BitFitAll,
    /// Every bias in the text encoder.
    BitFitText,
    /// Expansion and projection biases of the text FFNs.
    FfnBiasText,
    /// Projection (second-layer) biases of the text FFNs.
    ProjBiasText,
    /// Every LayerNorm gain and bias in the image encoder.
    LayerNormImage,
    /// `ProjBiasText ∪ LayerNormImage`.
    ClipFit,
    Custom(PathPredicate),
}

pub const PRESETS: [Strategy; 8] = [
    Strategy::ZeroShot,
    Strategy::FullFinetune,
    Strategy::BitFitAll,
    Strategy::BitFitText,
    Strategy::FfnBiasText,
    Strategy::ProjBiasText,
    Strategy::LayerNormImage,
    Strategy::ClipFit,
];

const TEXT_FINAL_LN_BIAS: &str = "text.ln_final.bias";

fn in_encoder(name: &ParamName) -> bool {
    matches!(name.encoder(), "text" | "image")
}

fn is_text_ffn_bias(name: &ParamName, linear: &str) -> bool {
    name.encoder() == "text"
        && name.block().is_some()
        && name.as_str().ends_with(&format!(".ffn.{linear}.bias"))
}

impl Strategy {
    pub fn selects(&self, name: &ParamName) -> bool {
        let bias = || name.is_bias() && name.as_str() != TEXT_FINAL_LN_BIAS;
        match self {
            Strategy::ZeroShot => false,
            Strategy::FullFinetune => in_encoder(name),
            Strategy::BitFitAll => in_encoder(name) && bias(),
            Strategy::BitFitText => name.encoder() == "text" && bias(),
            Strategy::FfnBiasText => is_text_ffn_bias(name, "fc") || is_text_ffn_bias(name, "proj"),
            Strategy::ProjBiasText => is_text_ffn_bias(name, "proj"),
            Strategy::LayerNormImage => name.encoder() == "image" && name.is_layer_norm(),
            Strategy::ClipFit => {
                Strategy::ProjBiasText.selects(name) || Strategy::LayerNormImage.selects(name)
            }
            Strategy::Custom(p) => p.matches(name.as_str()),
        }
    }

    pub fn name(&self) -> &str {
        match self {
            Strategy::ZeroShot => "zero_shot",
            Strategy::FullFinetune => "full",
            Strategy::BitFitAll => "bitfit_all",
            Strategy::BitFitText => "bitfit_text",
            Strategy::FfnBiasText => "ffn_bias_text",
            Strategy::ProjBiasText => "proj_bias_text",
            Strategy::LayerNormImage => "layernorm_image",
            Strategy::ClipFit => "clipfit",
            Strategy::Custom(p) => p.as_str(),
        }
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Strategy {
    type Err = Error;

    /// Preset names, or otherwise a path predicate.
    fn from_str(s: &str) -> Result<Self> {
        if let Some(p) = PRESETS.iter().find(|p| p.name() == s) {
            return Ok(p.clone());
        }
        Ok(Strategy::Custom(PathPredicate::parse(s)?))
    }
}

impl Serialize for Strategy {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(self.name())
    }
}

impl<'de> Deserialize<'de> for Strategy {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// Trainability flag for every parameter, in registry order.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FreezeMask {
    entries: Vec<(ParamName, bool)>,
}

impl FreezeMask {
    pub fn from_strategy(params: &ParamStore, s: &Strategy) -> Self {
        Self {
            entries: params.names().iter().map(|n| (n.clone(), s.selects(n))).collect(),
        }
    }

    pub fn entries(&self) -> &[(ParamName, bool)] {
        &self.entries
    }

    pub fn is_trainable(&self, name: &ParamName) -> bool {
        self.entries.iter().any(|(n, t)| n == name && *t)
    }

    pub fn trainable_names(&self) -> impl Iterator<Item = &ParamName> {
        self.entries.iter().filter(|(_, t)| *t).map(|(n, _)| n)
    }

    pub fn trainable_tensors(&self) -> usize {
        self.trainable_names().count()
    }

    /// Number of trainable scalars under this mask.
    pub fn trainable_scalars(&self, params: &ParamStore) -> usize {
        self.entries
            .iter()
            .zip(params.iter())
            .filter(|((_, t), _)| *t)
            .map(|(_, (_, _, tensor))| tensor.len())
            .sum()
    }

    pub fn any_in_encoder(&self, encoder: &str) -> bool {
        self.trainable_names().any(|n| n.encoder() == encoder)
    }

    /// Keeps only trainable entries accepted by `keep`.
    pub fn restrict(&self, keep: impl Fn(&ParamName) -> bool) -> Self {
        Self {
            entries: self
                .entries
                .iter()
                .map(|(n, t)| (n.clone(), *t && keep(n)))
                .collect(),
        }
    }

    /// Sets `requires_grad` on every parameter to match the mask.
    pub fn apply(&self, model: &mut DualEncoder) -> Result<()> {
        let store = model.params_mut();
        if store.len() != self.entries.len() {
            return Err(Error::Config("mask does not cover the model".into()));
        }
        for (id, (name, trainable)) in store.ids().collect::<Vec<_>>().into_iter().zip(&self.entries) {
            if store.name(id) != name {
                return Err(Error::UnknownName(name.to_string()));
            }
            store.get_mut(id).set_requires_grad(*trainable);
        }
        Ok(())
    }
}

/// Builds the strategy's mask and applies it to `model`.
pub fn apply_strategy(model: &mut DualEncoder, s: &Strategy) -> Result<FreezeMask> {
    let mask = FreezeMask::from_strategy(model.params(), s);
    if let Strategy::Custom(p) = s {
        if mask.trainable_tensors() == 0 {
            return Err(Error::EmptyMask(format!("`{}` matches no parameter", p.as_str())));
        }
    }
    mask.apply(model)?;
    Ok(mask)
}
