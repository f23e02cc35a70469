use serde::{Deserialize, Serialize};

use super::encoder::DualEncoder;
use crate::autodiff::Tensor;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    /// Built from the frozen pretrained model; the distillation target.
    Reference,
    /// Built from the model being fine-tuned.
    Live,
}

/// L2-normalized per-class text embeddings used as a linear classifier.
#[derive(Clone, Debug, PartialEq)]
pub struct ClassWeights {
    dim: usize,
    data: Vec<f64>,
    provenance: Provenance,
}

fn l2_normalize(v: &[f64], op: &'static str) -> Result<Vec<f64>> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if n == 0.0 || !n.is_finite() {
        return Err(Error::degenerate(op, format!("vector norm is {n}")));
    }
    Ok(v.iter().map(|x| x / n).collect())
}

impl ClassWeights {
    /// Normalizes each embedding.
    pub fn from_embeddings(embeddings: &[Vec<f64>], provenance: Provenance) -> Result<Self> {
        let dim = embeddings.first().ok_or(Error::EmptyClasses)?.len();
        let mut data = Vec::with_capacity(embeddings.len() * dim);
        for e in embeddings {
            if e.len() != dim {
                return Err(Error::dim("class_weights", format!("ragged embeddings {} vs {dim}", e.len())));
            }
            data.extend(l2_normalize(e, "class_weights")?);
        }
        Ok(Self { dim, data, provenance })
    }

    pub fn num_classes(&self) -> usize {
        self.data.len() / self.dim
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn provenance(&self) -> Provenance {
        self.provenance
    }

    pub fn as_tensor(&self) -> Tensor {
        Tensor::matrix(self.num_classes(), self.dim, self.data.clone()).expect("non-empty")
    }

    /// Mean cosine between matching rows of two weight sets.
    pub fn mean_cosine(&self, other: &ClassWeights) -> Result<f64> {
        if self.num_classes() != other.num_classes() || self.dim != other.dim {
            return Err(Error::dim(
                "mean_cosine",
                format!("{} vs {} classes", self.num_classes(), other.num_classes()),
            ));
        }
        let k = self.num_classes();
        Ok((0..k)
            .map(|i| self.row(i).iter().zip(other.row(i)).map(|(a, b)| a * b).sum::<f64>())
            .sum::<f64>()
            / k as f64)
    }

    /// Selects a subset of classes, in the given order.
    pub fn select(&self, classes: &[usize]) -> Result<Self> {
        let k = self.num_classes();
        let mut data = Vec::with_capacity(classes.len() * self.dim);
        for &c in classes {
            if c >= k {
                return Err(Error::Index { op: "select", index: c, bound: k });
            }
            data.extend_from_slice(self.row(c));
        }
        if data.is_empty() {
            return Err(Error::EmptyClasses);
        }
        Ok(Self { dim: self.dim, data, provenance: self.provenance })
    }
}

/// Encodes `k` prompts and normalizes them into class weights.
pub fn build_class_weights(
    model: &DualEncoder,
    prompts: &[Vec<usize>],
    k: usize,
    provenance: Provenance,
) -> Result<ClassWeights> {
    if k == 0 {
        return Err(Error::EmptyClasses);
    }
    if prompts.len() != k {
        return Err(Error::Config(format!("{} prompts for {k} classes", prompts.len())));
    }
    ClassWeights::from_embeddings(&model.embed_texts(prompts)?, provenance)
}

/// Cosine logits `cos(w_i, f) / τ`.
pub fn logits(f: &[f64], weights: &ClassWeights, tau: f64) -> Result<Vec<f64>> {
    if tau <= 0.0 || tau.is_nan() {
        return Err(Error::Config(format!("temperature must be positive, got {tau}")));
    }
    if f.len() != weights.dim() {
        return Err(Error::dim("classify", format!("feature of length {} vs weights of dim {}", f.len(), weights.dim())));
    }
    let f = l2_normalize(f, "classify")?;
    Ok((0..weights.num_classes())
        .map(|i| weights.row(i).iter().zip(&f).map(|(a, b)| a * b).sum::<f64>() / tau)
        .collect())
}

/// `p(y=i|x) = softmax_i(cos(w_i, f) / τ)`.
pub fn classify(f: &[f64], weights: &ClassWeights, tau: f64) -> Result<Vec<f64>> {
    let mut z = logits(f, weights, tau)?;
    let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for v in z.iter_mut() {
        *v = (*v - max).exp();
        total += *v;
    }
    z.iter_mut().for_each(|v| *v /= total);
    Ok(z)
}

/// Index of the largest logit; ties go to the lowest index.
pub fn predict(f: &[f64], weights: &ClassWeights, tau: f64) -> Result<usize> {
    let z = logits(f, weights, tau)?;
    let mut best = 0;
    for (i, &v) in z.iter().enumerate() {
        if v > z[best] {
            best = i;
        }
    }
    Ok(best)
}
