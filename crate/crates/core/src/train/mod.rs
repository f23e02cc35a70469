//! Losses, optimizers, contrastive pretraining, few-shot fine-tuning and
//! base-to-new evaluation.

mod batch;
mod config;
mod eval;
mod finetune;
mod loss;
mod optim;
mod pretrain;

use std::path::Path;

pub use batch::IMAGE_CHUNK;
pub use config::{KdForm, PretrainConfig, Regularizer, Schedule, TrainConfig};
pub use eval::{
    class_weights_for, evaluate, evaluate_split, harmonic_mean, score_features, ClassAccuracy, EvalResult,
    SplitResult,
};
pub use finetune::{
    finetune, finetune_with_mask, ChangeCurve, FinetuneOptions, FinetuneOutcome, GroupValue, TrainReport,
};
pub use loss::{ce_loss, cosine_logits, kd_loss, mse_bias_loss, total_loss};
pub use optim::{sgd_step, Adam, SgdState};
pub use pretrain::{pretrain, PretrainReport};

use crate::error::Result;
use crate::report::write_csv;

impl TrainReport {
    /// `loss.csv` (per step) and `changes.csv` (per tracked group per
    /// logged step).
    pub fn write_csvs(&self, dir: &Path) -> Result<()> {
        write_csv(
            &dir.join("loss.csv"),
            "loss",
            &["step", "loss", "ce", "reg", "lr", "grad_norm_sq"],
            (0..self.loss.len()).map(|i| {
                vec![
                    i.to_string(),
                    self.loss[i].to_string(),
                    self.ce[i].to_string(),
                    self.reg[i].to_string(),
                    self.lr[i].to_string(),
                    self.grad_norm_sq[i].to_string(),
                ]
            }),
        )?;
        write_csv(
            &dir.join("changes.csv"),
            "changes",
            &["step", "group", "squared_change"],
            self.change_steps.iter().enumerate().flat_map(|(i, step)| {
                self.change_curves
                    .iter()
                    .map(move |c| vec![step.to_string(), c.group.clone(), c.values[i].to_string()])
            }),
        )
    }
}

impl EvalResult {
    /// `eval.csv`: one row per class plus summary rows.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let summary = [("base", self.base_acc), ("new", self.new_acc), ("hm", self.hm)];
        write_csv(
            path,
            "eval",
            &["row", "class", "correct", "total", "accuracy"],
            self.per_class
                .iter()
                .map(|c| {
                    vec![
                        "class".into(),
                        c.class.to_string(),
                        c.correct.to_string(),
                        c.total.to_string(),
                        c.accuracy.to_string(),
                    ]
                })
                .chain(summary.iter().map(|(k, v)| vec![k.to_string(), String::new(), String::new(), String::new(), v.to_string()])),
        )
    }
}
