use std::collections::HashMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::error::{Error, Result};

/// Dotted parameter path.
///
/// Grammar: `<encoder>.<module>[.<sub>...].<leaf>` where `<encoder>` is
/// `text` or `image` (or the bare `logit_scale`), block modules are
/// `block<i>`, and leaves are `weight`, `bias`, `gain` or a single name
/// such as `class_token`. Examples: `text.block3.ffn.proj.bias`,
/// `image.pre_ln.gain`, `image.block0.ln1.bias`.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ParamName(String);

impl ParamName {
    pub fn new(s: impl Into<String>) -> Self {
        Self(s.into())
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }

    pub fn segments(&self) -> impl Iterator<Item = &str> {
        self.0.split('.')
    }

    pub fn encoder(&self) -> &str {
        self.segments().next().unwrap_or("")
    }

    pub fn is_bias(&self) -> bool {
        self.0.ends_with(".bias")
    }

    /// Block index when the path contains a `block<i>` segment.
    pub fn block(&self) -> Option<usize> {
        self.segments()
            .find_map(|s| s.strip_prefix("block").and_then(|n| n.parse().ok()))
    }

    /// True for LayerNorm gains and biases (`ln1`, `ln2`, `pre_ln`, ...).
    pub fn is_layer_norm(&self) -> bool {
        let mut segs = self.0.rsplit('.');
        let leaf = segs.next();
        let module = segs.next().unwrap_or("");
        matches!(leaf, Some("gain" | "bias")) && (module.starts_with("ln") || module.ends_with("_ln"))
    }
}

impl fmt::Display for ParamName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl From<&str> for ParamName {
    fn from(s: &str) -> Self {
        Self::new(s)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub usize);

/// Ordered registry of named parameter tensors.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    names: Vec<ParamName>,
    tensors: Vec<Tensor>,
    index: HashMap<ParamName, ParamId>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: ParamName, tensor: Tensor) -> Result<ParamId> {
        if self.index.contains_key(&name) {
            return Err(Error::Config(format!("duplicate parameter `{name}`")));
        }
        let id = ParamId(self.names.len());
        self.index.insert(name.clone(), id);
        self.names.push(name);
        self.tensors.push(tensor);
        Ok(id)
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn id(&self, name: &str) -> Result<ParamId> {
        self.index
            .get(&ParamName::new(name))
            .copied()
            .ok_or_else(|| Error::UnknownName(name.to_string()))
    }

    pub fn name(&self, id: ParamId) -> &ParamName {
        &self.names[id.0]
    }

    pub fn names(&self) -> &[ParamName] {
        &self.names
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.tensors[id.0]
    }

    pub fn by_name(&self, name: &str) -> Result<&Tensor> {
        Ok(self.get(self.id(name)?))
    }

    pub fn by_name_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        let id = self.id(name)?;
        Ok(self.get_mut(id))
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &ParamName, &Tensor)> {
        self.names
            .iter()
            .zip(&self.tensors)
            .enumerate()
            .map(|(i, (n, t))| (ParamId(i), n, t))
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.names.len()).map(ParamId)
    }

    pub fn scalar_count(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    pub fn zero_grads(&mut self) {
        self.tensors.iter_mut().for_each(Tensor::zero_grad);
    }
}
