use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::batch::{forward_images, GradAccumulator};
use super::config::{Regularizer, TrainConfig};
use super::eval::class_weights_for;
use super::loss::{ce_loss, kd_loss, mse_bias_loss, total_loss};
use super::optim::{sgd_step, SgdState};
use crate::autodiff::{Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::exec::ExecMode;
use crate::model::{vocab, Bindings, ClassWeights, DualEncoder, Provenance};
use crate::params::{apply_strategy, diff, FreezeMask, GroupChange, Grouping, ParamId, ParamName, Snapshot, Strategy};
use crate::synthdata::Example;

#[derive(Clone, Debug)]
pub struct FinetuneOptions {
    pub exec: ExecMode,
    /// Groups whose drift from the initial values is recorded. `None`
    /// tracks every trainable group.
    pub tracked: Option<Vec<String>>,
    /// Drift is recorded every `log_every` steps and at the final step.
    pub log_every: usize,
    pub grouping: Grouping,
}

impl Default for FinetuneOptions {
    fn default() -> Self {
        Self {
            exec: ExecMode::default(),
            tracked: None,
            log_every: 1,
            grouping: Grouping::PerTensor,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChangeCurve {
    pub group: String,
    /// `‖p_0 − p_t‖²` at each entry of [`TrainReport::change_steps`].
    pub values: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroupValue {
    pub group: String,
    pub value: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub strategy: String,
    pub config: TrainConfig,
    pub classes: Vec<usize>,
    pub shots: usize,
    pub steps: usize,
    pub trainable_scalars: usize,
    pub trainable_groups: Vec<String>,
    /// Per-step total loss, cross-entropy part, regularizer part (before
    /// weighting) and learning rate.
    pub loss: Vec<f64>,
    pub ce: Vec<f64>,
    pub reg: Vec<f64>,
    pub lr: Vec<f64>,
    /// Squared norm of the whole trainable gradient at each step.
    pub grad_norm_sq: Vec<f64>,
    pub change_steps: Vec<usize>,
    pub change_curves: Vec<ChangeCurve>,
    /// `Σ_t ‖g_t‖²` per trainable group.
    pub gradient_sums: Vec<GroupValue>,
    /// `diff(initial, final)` for every group.
    pub final_changes: Vec<GroupChange>,
}

#[derive(Clone, Debug)]
pub struct FinetuneOutcome {
    pub model: DualEncoder,
    pub report: TrainReport,
    pub initial: Snapshot,
    pub final_snapshot: Snapshot,
    pub reference: ClassWeights,
}

impl FinetuneOutcome {
    /// Class weights of the fine-tuned model for the training classes.
    pub fn live_weights(&self) -> Result<ClassWeights> {
        class_weights_for(&self.model, &self.report.classes, Provenance::Live)
    }
}

/// Fine-tunes a copy of `pretrained` under `strategy`.
pub fn finetune(
    pretrained: &DualEncoder,
    shots: &[Example],
    classes: &[usize],
    strategy: &Strategy,
    config: &TrainConfig,
    options: &FinetuneOptions,
) -> Result<FinetuneOutcome> {
    let mut probe = pretrained.clone();
    let mask = apply_strategy(&mut probe, strategy)?;
    finetune_with_mask(pretrained, shots, classes, mask, strategy.name(), config, options)
}

struct Grouped {
    names: Vec<String>,
    members: Vec<Vec<ParamId>>,
}

fn group_params(model: &DualEncoder, mask: &FreezeMask, grouping: Grouping) -> Grouped {
    let mut g = Grouped {
        names: Vec::new(),
        members: Vec::new(),
    };
    for (id, name, _) in model.params().iter() {
        if !mask.is_trainable(name) {
            continue;
        }
        let group = grouping.group_of(name);
        match g.names.iter().position(|n| *n == group) {
            Some(i) => g.members[i].push(id),
            None => {
                g.names.push(group);
                g.members.push(vec![id]);
            }
        }
    }
    g
}

fn drift(model: &DualEncoder, initial: &Snapshot, ids: &[ParamId]) -> f64 {
    ids.iter()
        .map(|&id| {
            let now = model.params().get(id).data();
            let then = initial.values()[id.0].1.data();
            now.iter().zip(then).map(|(a, b)| (a - b) * (a - b)).sum::<f64>()
        })
        .sum()
}

/// Fine-tunes a copy of `pretrained` with an explicit mask.
pub fn finetune_with_mask(
    pretrained: &DualEncoder,
    shots: &[Example],
    classes: &[usize],
    mask: FreezeMask,
    label: &str,
    config: &TrainConfig,
    options: &FinetuneOptions,
) -> Result<FinetuneOutcome> {
    config.validate()?;
    if shots.is_empty() {
        return Err(Error::EmptyDataset("no few-shot training examples".into()));
    }
    if classes.is_empty() {
        return Err(Error::EmptyClasses);
    }
    let labels: Vec<usize> = shots
        .iter()
        .map(|e| {
            classes.iter().position(|&c| c == e.label).ok_or(Error::Index {
                op: "finetune",
                index: e.label,
                bound: classes.len(),
            })
        })
        .collect::<Result<_>>()?;

    let mut model = pretrained.clone();
    mask.apply(&mut model)?;
    let initial = Snapshot::capture(&model, 0);
    let reference = class_weights_for(pretrained, classes, Provenance::Reference)?;
    let tau = model.temperature();
    let e = model.config().embed_dim;
    let prompts: Vec<Vec<usize>> = classes.iter().map(|&c| vocab::prompt(c)).collect();

    let groups = group_params(&model, &mask, options.grouping);
    let tracked: Vec<usize> = match &options.tracked {
        None => (0..groups.names.len()).collect(),
        Some(list) => list
            .iter()
            .map(|g| {
                groups
                    .names
                    .iter()
                    .position(|n| n == g)
                    .ok_or_else(|| Error::UnknownName(format!("`{g}` is not a trainable group")))
            })
            .collect::<Result<_>>()?,
    };
    let text_trainable = mask.any_in_encoder("text");
    let image_trainable = mask.any_in_encoder("image");
    let live_text_biases: Vec<(ParamName, ParamId)> = mask
        .trainable_names()
        .filter(|n| n.encoder() == "text" && n.is_bias())
        .map(|n| Ok((n.clone(), model.params().id(n.as_str())?)))
        .collect::<Result<_>>()?;

    let cached_features: Option<Vec<f64>> = if image_trainable {
        None
    } else {
        let images: Vec<&Tensor> = shots.iter().map(|s| &s.image).collect();
        Some(model.embed_images(&images, options.exec)?.concat())
    };
    let reference_tensor = reference.as_tensor();

    let batches_per_epoch = shots.len().div_ceil(config.batch_size);
    let total_steps = if mask.trainable_tensors() == 0 {
        0
    } else {
        config.epochs * batches_per_epoch
    };
    let mut report = TrainReport {
        strategy: label.to_string(),
        config: config.clone(),
        classes: classes.to_vec(),
        shots: shots.len(),
        steps: total_steps,
        trainable_scalars: mask.trainable_scalars(model.params()),
        trainable_groups: groups.names.clone(),
        loss: Vec::with_capacity(total_steps),
        ce: Vec::with_capacity(total_steps),
        reg: Vec::with_capacity(total_steps),
        lr: Vec::with_capacity(total_steps),
        grad_norm_sq: Vec::with_capacity(total_steps),
        change_steps: vec![0],
        change_curves: tracked
            .iter()
            .map(|&g| ChangeCurve {
                group: groups.names[g].clone(),
                values: vec![0.0],
            })
            .collect(),
        gradient_sums: groups
            .names
            .iter()
            .map(|g| GroupValue {
                group: g.clone(),
                value: 0.0,
            })
            .collect(),
        final_changes: Vec::new(),
    };

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut sgd = SgdState::new(model.params());
    let mut order: Vec<usize> = (0..shots.len()).collect();
    let mut step = 0;
    while step < total_steps {
        order.shuffle(&mut rng);
        for batch in order.chunks(config.batch_size) {
            let batch_labels: Vec<usize> = batch.iter().map(|&i| labels[i]).collect();
            let pass = if image_trainable {
                let images: Vec<&Tensor> = batch.iter().map(|&i| &shots[i].image).collect();
                Some(forward_images(&model, &images, options.exec)?)
            } else {
                None
            };
            let feats: Vec<f64> = match (&pass, &cached_features) {
                (Some(p), _) => p.features.clone(),
                (None, Some(c)) => batch.iter().flat_map(|&i| c[i * e..(i + 1) * e].iter().copied()).collect(),
                (None, None) => unreachable!("features are either cached or recomputed"),
            };

            let mut tape = Tape::new();
            let mut b = Bindings::new(&model);
            let w: Var = if text_trainable {
                let t = model.text_features(&mut tape, &mut b, &prompts)?;
                tape.normalize_rows(t)?
            } else {
                tape.constant(&reference_tensor)
            };
            let f_tensor = Tensor::matrix(batch.len(), e, feats)?;
            let f = if image_trainable {
                tape.variable(&f_tensor)
            } else {
                tape.constant(&f_tensor)
            };
            let ce = ce_loss(&mut tape, f, w, &batch_labels, tau)?;
            let reg = match config.regularizer {
                Regularizer::None => None,
                Regularizer::Kd => Some(kd_loss(&mut tape, w, &reference, config.kd_form)?),
                Regularizer::MseBias => {
                    let live: Vec<(ParamName, Var)> = live_text_biases
                        .iter()
                        .map(|(n, id)| (n.clone(), b.var(&mut tape, model.params(), *id)))
                        .collect();
                    Some(mse_bias_loss(&mut tape, &live, &initial)?)
                }
            };
            let total = total_loss(&mut tape, config, ce, reg)?;
            let value = tape.item(total);
            if !value.is_finite() {
                return Err(Error::NonFinite { step, value });
            }

            let grads = tape.backward(total)?;
            let mut acc = GradAccumulator::new(model.params().len());
            acc.add_tape(&tape, &grads);
            if let Some(p) = &pass {
                let d_f = grads.wrt(f).expect("features are a variable").to_vec();
                p.backward(&d_f, options.exec, &mut acc)?;
            }
            let grads = acc.into_vec();

            let mut norm_sq = 0.0;
            for (gi, ids) in groups.members.iter().enumerate() {
                let s: f64 = grads
                    .iter()
                    .filter(|(id, _)| ids.contains(id))
                    .map(|(_, g)| g.iter().map(|v| v * v).sum::<f64>())
                    .sum();
                report.gradient_sums[gi].value += s;
                norm_sq += s;
            }
            let lr = config.schedule.lr_at(config.lr, step, total_steps);
            sgd_step(model.params_mut(), &mask, &grads, &mut sgd, config.momentum, lr)?;

            report.loss.push(value);
            report.ce.push(tape.item(ce));
            report.reg.push(reg.map(|r| tape.item(r)).unwrap_or(0.0));
            report.lr.push(lr);
            report.grad_norm_sq.push(norm_sq);
            step += 1;
            if step % options.log_every.max(1) == 0 || step == total_steps {
                report.change_steps.push(step);
                for (curve, &g) in report.change_curves.iter_mut().zip(&tracked) {
                    curve.values.push(drift(&model, &initial, &groups.members[g]));
                }
            }
            if step == total_steps {
                break;
            }
        }
    }

    let final_snapshot = Snapshot::capture(&model, step);
    report.final_changes = diff(&initial, &final_snapshot, options.grouping)?;
    Ok(FinetuneOutcome {
        model,
        report,
        initial,
        final_snapshot,
        reference,
    })
}
