//! Procedural image/caption benchmark with a pretrain/downstream
//! covariate shift, base/new class splits and stratified shot sampling.

mod io;

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::exec::ExecMode;
use crate::model::vocab;

pub use io::{load, save, DATA_FILE, MANIFEST_FILE};

/// Affine pixel transform `x -> scale·x + offset` applied to downstream images.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Shift {
    pub offset: f64,
    pub scale: f64,
}

impl Shift {
    pub const NONE: Shift = Shift { offset: 0.0, scale: 1.0 };

    pub fn apply(&self, x: f64) -> f64 {
        self.scale * x + self.offset
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetSpec {
    pub num_classes: usize,
    /// Classes `0..num_base` are base classes, the rest are new.
    pub num_base: usize,
    pub pretrain_per_class: usize,
    pub train_per_class: usize,
    pub test_per_class: usize,
    pub image_size: usize,
    #[serde(default = "one")]
    pub channels: usize,
    pub noise_std: f64,
    pub shift: Shift,
    pub seed: u64,
}

fn one() -> usize {
    1
}

impl Default for DatasetSpec {
    fn default() -> Self {
        Self::committed(1)
    }
}

impl DatasetSpec {
    /// The committed benchmark: 12 classes split 6/6, 16×16 single-channel
    /// images, σ = 0.3, shift `1.5·x + 0.5`, 200 test images per class.
    pub fn committed(seed: u64) -> Self {
        Self {
            num_classes: 12,
            num_base: 6,
            pretrain_per_class: 64,
            train_per_class: 16,
            test_per_class: 200,
            image_size: 16,
            channels: 1,
            noise_std: 0.3,
            shift: Shift { offset: 0.5, scale: 1.5 },
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Spec(m));
        if self.num_classes < 2 {
            return fail(format!("need at least 2 classes, got {}", self.num_classes));
        }
        if self.num_base == 0 || self.num_base >= self.num_classes {
            return fail(format!(
                "base split {} must leave both halves non-empty out of {}",
                self.num_base, self.num_classes
            ));
        }
        if !(self.noise_std >= 0.0 && self.noise_std.is_finite()) {
            return fail(format!("noise_std must be finite and >= 0, got {}", self.noise_std));
        }
        if !(self.shift.scale > 0.0 && self.shift.scale.is_finite() && self.shift.offset.is_finite()) {
            return fail(format!("shift scale must be positive, got {:?}", self.shift));
        }
        if self.image_size == 0 || self.channels == 0 {
            return fail("image dimensions must be positive".into());
        }
        if vocab::class_token(self.num_classes - 1) > u16::MAX as usize {
            return fail("too many classes for 16-bit token ids".into());
        }
        Ok(())
    }

    pub fn base_classes(&self) -> Vec<usize> {
        (0..self.num_base).collect()
    }

    pub fn new_classes(&self) -> Vec<usize> {
        (self.num_base..self.num_classes).collect()
    }

    pub fn all_classes(&self) -> Vec<usize> {
        (0..self.num_classes).collect()
    }

    fn pixels(&self) -> usize {
        self.channels * self.image_size * self.image_size
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Example {
    pub id: u64,
    pub image: Tensor,
    pub caption: Vec<usize>,
    pub label: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitKind {
    Pretrain,
    Train,
    BaseTest,
    NewTest,
}

impl SplitKind {
    pub const ALL: [SplitKind; 4] = [
        SplitKind::Pretrain,
        SplitKind::Train,
        SplitKind::BaseTest,
        SplitKind::NewTest,
    ];

    fn stream(self) -> u64 {
        self as u64
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticDataset {
    pub spec: DatasetSpec,
    pub pretrain: Vec<Example>,
    pub train: Vec<Example>,
    pub base_test: Vec<Example>,
    pub new_test: Vec<Example>,
}

impl SyntheticDataset {
    pub fn split(&self, kind: SplitKind) -> &[Example] {
        match kind {
            SplitKind::Pretrain => &self.pretrain,
            SplitKind::Train => &self.train,
            SplitKind::BaseTest => &self.base_test,
            SplitKind::NewTest => &self.new_test,
        }
    }

    /// Train examples of the base classes only.
    pub fn base_train(&self) -> Vec<Example> {
        self.train
            .iter()
            .filter(|e| e.label < self.spec.num_base)
            .cloned()
            .collect()
    }

    /// Prompt for every class, in class order.
    pub fn prompts(&self) -> Vec<Vec<usize>> {
        (0..self.spec.num_classes).map(vocab::prompt).collect()
    }
}

/// Per-class, per-split random stream, independent of generation order.
fn stream_rng(seed: u64, class: usize, split: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(1 + (class as u64) * 8 + split);
    rng
}

/// Class prototype: unit-variance blocks at patch-quarter granularity with
/// a finer per-pixel texture on top.
pub fn prototype(spec: &DatasetSpec, class: usize) -> Vec<f64> {
    let mut rng = stream_rng(spec.seed, class, 0);
    let s = spec.image_size;
    let cell = (s / 8).max(1);
    let cells = s.div_ceil(cell);
    let coarse_dist = Normal::new(0.0, 0.9).expect("valid");
    let fine_dist = Normal::new(0.0, 0.45).expect("valid");
    let mut out = Vec::with_capacity(spec.pixels());
    for _ in 0..spec.channels {
        let coarse: Vec<f64> = (0..cells * cells).map(|_| coarse_dist.sample(&mut rng)).collect();
        for y in 0..s {
            for x in 0..s {
                out.push(coarse[(y / cell) * cells + x / cell] + fine_dist.sample(&mut rng));
            }
        }
    }
    out
}

fn draw(spec: &DatasetSpec, proto: &[f64], shift: Shift, rng: &mut ChaCha8Rng) -> Tensor {
    let data = if spec.noise_std > 0.0 {
        let noise = Normal::new(0.0, spec.noise_std).expect("valid");
        proto.iter().map(|&p| shift.apply(p + noise.sample(rng))).collect()
    } else {
        proto.iter().map(|&p| shift.apply(p)).collect()
    };
    let s = spec.image_size;
    Tensor::new(vec![spec.channels, s, s], data).expect("shape matches pixel count")
}

fn split_plan(spec: &DatasetSpec, kind: SplitKind, class: usize) -> (usize, Shift) {
    let base = class < spec.num_base;
    match kind {
        SplitKind::Pretrain => (spec.pretrain_per_class, Shift::NONE),
        SplitKind::Train => (spec.train_per_class, spec.shift),
        SplitKind::BaseTest => (if base { spec.test_per_class } else { 0 }, spec.shift),
        SplitKind::NewTest => (if base { 0 } else { spec.test_per_class }, spec.shift),
    }
}

/// Generates all four splits. Example ids are unique across splits and
/// assigned in (split, class, index) order.
pub fn generate(spec: &DatasetSpec, exec: ExecMode) -> Result<SyntheticDataset> {
    spec.validate()?;
    let k = spec.num_classes;
    let per_class: Vec<BTreeMap<SplitKind, Vec<(Tensor, usize)>>> = exec.map_range(k, |class| {
        let proto = prototype(spec, class);
        SplitKind::ALL
            .iter()
            .map(|&kind| {
                let (n, shift) = split_plan(spec, kind, class);
                let mut rng = stream_rng(spec.seed, class, 1 + kind.stream());
                let images = (0..n).map(|_| (draw(spec, &proto, shift, &mut rng), class)).collect();
                (kind, images)
            })
            .collect()
    });

    let mut next_id = 0u64;
    let mut splits: BTreeMap<SplitKind, Vec<Example>> = BTreeMap::new();
    for kind in SplitKind::ALL {
        let out = splits.entry(kind).or_default();
        for class_map in &per_class {
            for (image, label) in &class_map[&kind] {
                out.push(Example {
                    id: next_id,
                    image: image.clone(),
                    caption: vocab::prompt(*label),
                    label: *label,
                });
                next_id += 1;
            }
        }
    }
    let mut take = |k| splits.remove(&k).unwrap_or_default();
    Ok(SyntheticDataset {
        spec: spec.clone(),
        pretrain: take(SplitKind::Pretrain),
        train: take(SplitKind::Train),
        base_test: take(SplitKind::BaseTest),
        new_test: take(SplitKind::NewTest),
    })
}

/// Exactly `n` examples of every class present in `examples`, drawn with
/// `seed`. Output keeps the input order.
pub fn sample_shots(examples: &[Example], n: usize, seed: u64) -> Result<Vec<Example>> {
    let mut by_class: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, e) in examples.iter().enumerate() {
        by_class.entry(e.label).or_default().push(i);
    }
    let mut chosen = Vec::with_capacity(n * by_class.len());
    for (&class, idx) in &by_class {
        if idx.len() < n {
            return Err(Error::Shots {
                class,
                available: idx.len(),
                requested: n,
            });
        }
        let mut rng = stream_rng(seed, class, 7);
        let mut pool = idx.clone();
        pool.shuffle(&mut rng);
        chosen.extend_from_slice(&pool[..n]);
    }
    chosen.sort_unstable();
    Ok(chosen.into_iter().map(|i| examples[i].clone()).collect())
}

#[cfg(test)]
mod tests;
