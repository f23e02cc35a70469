use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exec::ExecMode;
use crate::model::{build_class_weights, predict, vocab, ClassWeights, DualEncoder, Provenance};
use crate::synthdata::Example;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassAccuracy {
    pub class: usize,
    pub correct: usize,
    pub total: usize,
    /// Percent.
    pub accuracy: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitResult {
    /// Percent.
    pub accuracy: f64,
    pub correct: usize,
    pub total: usize,
    pub per_class: Vec<ClassAccuracy>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    pub base_acc: f64,
    pub new_acc: f64,
    pub hm: f64,
    pub per_class: Vec<ClassAccuracy>,
}

/// `2ab/(a+b)`, and 0 when either side is 0.
pub fn harmonic_mean(a: f64, b: f64) -> f64 {
    if a <= 0.0 || b <= 0.0 {
        return 0.0;
    }
    2.0 * a * b / (a + b)
}

impl EvalResult {
    pub fn from_splits(base: SplitResult, new: SplitResult) -> Self {
        let mut per_class = base.per_class;
        per_class.extend(new.per_class);
        Self {
            base_acc: base.accuracy,
            new_acc: new.accuracy,
            hm: harmonic_mean(base.accuracy, new.accuracy),
            per_class,
        }
    }
}

/// Class weights for `classes` from the model's own text encoder.
pub fn class_weights_for(model: &DualEncoder, classes: &[usize], provenance: Provenance) -> Result<ClassWeights> {
    let prompts: Vec<Vec<usize>> = classes.iter().map(|&c| vocab::prompt(c)).collect();
    build_class_weights(model, &prompts, classes.len(), provenance)
}

/// Accuracy of precomputed features classified among `classes`.
pub fn score_features(
    features: &[Vec<f64>],
    labels: &[usize],
    weights: &ClassWeights,
    classes: &[usize],
    tau: f64,
) -> Result<SplitResult> {
    if features.is_empty() {
        return Err(Error::EmptyDataset("evaluation split is empty".into()));
    }
    if weights.num_classes() != classes.len() {
        return Err(Error::dim("evaluate", format!("{} weights for {} classes", weights.num_classes(), classes.len())));
    }
    let mut correct = vec![0usize; classes.len()];
    let mut total = vec![0usize; classes.len()];
    for (f, &label) in features.iter().zip(labels) {
        let local = classes.iter().position(|&c| c == label).ok_or(Error::Index {
            op: "evaluate",
            index: label,
            bound: classes.len(),
        })?;
        total[local] += 1;
        if predict(f, weights, tau)? == local {
            correct[local] += 1;
        }
    }
    let pct = |c: usize, t: usize| if t == 0 { 0.0 } else { 100.0 * c as f64 / t as f64 };
    let per_class = classes
        .iter()
        .enumerate()
        .map(|(i, &class)| ClassAccuracy {
            class,
            correct: correct[i],
            total: total[i],
            accuracy: pct(correct[i], total[i]),
        })
        .collect();
    let (c, t) = (correct.iter().sum(), total.iter().sum());
    Ok(SplitResult {
        accuracy: pct(c, t),
        correct: c,
        total: t,
        per_class,
    })
}

/// Zero-shot style accuracy of `model` on `examples` among `classes`.
pub fn evaluate_split(model: &DualEncoder, examples: &[Example], classes: &[usize], exec: ExecMode) -> Result<SplitResult> {
    if examples.is_empty() {
        return Err(Error::EmptyDataset("evaluation split is empty".into()));
    }
    let weights = class_weights_for(model, classes, Provenance::Live)?;
    let images: Vec<_> = examples.iter().map(|e| &e.image).collect();
    let features = model.embed_images(&images, exec)?;
    let labels: Vec<usize> = examples.iter().map(|e| e.label).collect();
    score_features(&features, &labels, &weights, classes, model.temperature())
}

/// Base-to-new evaluation: each half is classified among its own classes.
pub fn evaluate(
    model: &DualEncoder,
    base_test: &[Example],
    new_test: &[Example],
    base_classes: &[usize],
    new_classes: &[usize],
    exec: ExecMode,
) -> Result<EvalResult> {
    if base_classes.iter().any(|c| new_classes.contains(c)) {
        return Err(Error::Config("base and new classes overlap".into()));
    }
    let base = evaluate_split(model, base_test, base_classes, exec)?;
    let new = evaluate_split(model, new_test, new_classes, exec)?;
    Ok(EvalResult::from_splits(base, new))
}
