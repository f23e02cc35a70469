//! The committed end-to-end benchmark: generate, pretrain, fine-tune under
//! several strategies, evaluate, and analyze, once per seed.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::analyze::{
    export_features, freeze_ablation, gradient_change_correlation, gradient_sums, track_changes, AblationSetup,
    ChangeReport, KeepSelector, ReportMeta,
};
use crate::error::Result;
use crate::exec::ExecMode;
use crate::model::{DualEncoder, ModelConfig, Provenance};
use crate::params::{diff, Grouping, Strategy};
use crate::synthdata::{generate, sample_shots, DatasetSpec};
use crate::train::{
    class_weights_for, evaluate, finetune, pretrain, EvalResult, FinetuneOptions, FinetuneOutcome, PretrainConfig,
    Regularizer, TrainConfig,
};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BenchConfig {
    pub seeds: Vec<u64>,
    pub shots: usize,
    pub model: ModelConfig,
    pub pretrain: PretrainConfig,
    pub finetune: TrainConfig,
    /// Group count for the most/least-changed freeze ablation.
    pub top_k: usize,
    pub exec: ExecMode,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self::committed()
    }
}

impl BenchConfig {
    pub fn committed() -> Self {
        Self {
            seeds: vec![1, 2, 3],
            shots: 4,
            model: ModelConfig::toy(),
            pretrain: PretrainConfig::default(),
            // The toy encoders see far larger bias gradients than the
            // preset step size tolerates; 3e-4 keeps SGD stable.
            finetune: TrainConfig {
                epochs: 100,
                lr: 3e-4,
                ..TrainConfig::base_to_new()
            },
            top_k: 3,
            exec: ExecMode::default(),
        }
    }

    pub fn dataset(&self, seed: u64) -> DatasetSpec {
        DatasetSpec::committed(seed)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageTimes {
    pub generate: f64,
    pub pretrain: f64,
    pub methods: f64,
    pub forensics: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeedOutcome {
    pub seed: u64,
    pub pretrain_final_loss: f64,
    pub zero_shot: EvalResult,
    pub clipfit_kd: EvalResult,
    pub clipfit_none: EvalResult,
    pub layernorm_image: EvalResult,
    pub proj_bias_text: EvalResult,
    /// Regularizer value at the first step of the KD run.
    pub kd_at_start: f64,
    /// Mean cosine of live to reference class weights over all classes.
    pub mean_cos_kd: f64,
    pub mean_cos_none: f64,
    pub changes: ChangeReport,
    pub gradient_change_spearman: f64,
    pub track_diff_max_error: f64,
    /// Every tracked drift curve ends above where it started.
    pub curves_grow: bool,
    pub top_k: EvalResult,
    pub bottom_k: EvalResult,
    pub top_groups: Vec<String>,
    pub bottom_groups: Vec<String>,
    pub fisher_zero_shot: f64,
    pub fisher_clipfit: f64,
    pub seconds: StageTimes,
}

pub fn median(xs: &[f64]) -> f64 {
    let mut v = xs.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n == 0 {
        return f64::NAN;
    }
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchSummary {
    pub config: BenchConfig,
    pub seeds: Vec<SeedOutcome>,
}

impl BenchSummary {
    fn med(&self, f: impl Fn(&SeedOutcome) -> f64) -> f64 {
        median(&self.seeds.iter().map(f).collect::<Vec<_>>())
    }

    /// Median over seeds of ClipFit (KD) base accuracy minus zero-shot.
    pub fn base_gain(&self) -> f64 {
        self.med(|s| s.clipfit_kd.base_acc - s.zero_shot.base_acc)
    }

    pub fn kd_hm_gain(&self) -> f64 {
        self.med(|s| s.clipfit_kd.hm - s.clipfit_none.hm)
    }

    pub fn layernorm_over_proj_bias(&self) -> f64 {
        self.med(|s| s.layernorm_image.hm - s.proj_bias_text.hm)
    }

    pub fn spearman(&self) -> f64 {
        self.med(|s| s.gradient_change_spearman)
    }

    pub fn top_over_bottom(&self) -> f64 {
        self.med(|s| s.top_k.hm - s.bottom_k.hm)
    }

    pub fn kd_cosine_gain(&self) -> f64 {
        self.med(|s| s.mean_cos_kd - s.mean_cos_none)
    }

    pub fn fisher_gain(&self) -> f64 {
        self.med(|s| s.fisher_clipfit - s.fisher_zero_shot)
    }

    pub fn track_diff_max_error(&self) -> f64 {
        self.seeds.iter().map(|s| s.track_diff_max_error).fold(0.0, f64::max)
    }
}

fn secs(t: Instant) -> f64 {
    t.elapsed().as_secs_f64()
}

/// Runs the whole pipeline for one seed.
pub fn run_seed(config: &BenchConfig, seed: u64) -> Result<SeedOutcome> {
    let exec = config.exec;
    let t = Instant::now();
    let spec = config.dataset(seed);
    let data = generate(&spec, exec)?;
    let generate_s = secs(t);

    let t = Instant::now();
    let pcfg = PretrainConfig {
        seed,
        ..config.pretrain.clone()
    };
    let (model, pre_report) = pretrain(DualEncoder::new(config.model.clone(), seed)?, &data.pretrain, &pcfg, exec)?;
    let pretrain_s = secs(t);

    let t = Instant::now();
    let (base, new, all) = (spec.base_classes(), spec.new_classes(), spec.all_classes());
    let shots = sample_shots(&data.base_train(), config.shots, seed)?;
    let opts = FinetuneOptions {
        exec,
        ..FinetuneOptions::default()
    };
    let kd_cfg = TrainConfig {
        seed,
        ..config.finetune.clone()
    };
    let none_cfg = TrainConfig {
        regularizer: Regularizer::None,
        ..kd_cfg.clone()
    };
    let eval = |m: &DualEncoder| evaluate(m, &data.base_test, &data.new_test, &base, &new, exec);
    let tune = |s: &Strategy, c: &TrainConfig| -> Result<FinetuneOutcome> { finetune(&model, &shots, &base, s, c, &opts) };

    let zero_shot = eval(&model)?;
    let kd_run = tune(&Strategy::ClipFit, &kd_cfg)?;
    let none_run = tune(&Strategy::ClipFit, &none_cfg)?;
    let ln_run = tune(&Strategy::LayerNormImage, &kd_cfg)?;
    let proj_run = tune(&Strategy::ProjBiasText, &kd_cfg)?;
    let reference = class_weights_for(&model, &all, Provenance::Reference)?;
    let mean_cos = |o: &FinetuneOutcome| class_weights_for(&o.model, &all, Provenance::Live)?.mean_cosine(&reference);
    let clipfit_kd = eval(&kd_run.model)?;
    let clipfit_none = eval(&none_run.model)?;
    let layernorm_image = eval(&ln_run.model)?;
    let proj_bias_text = eval(&proj_run.model)?;
    let methods_s = secs(t);

    let t = Instant::now();
    let meta = ReportMeta {
        strategy: Strategy::ClipFit.to_string(),
        dataset_id: format!("committed-{seed}"),
        seeds: vec![seed],
    };
    let changes = ChangeReport::from_train_report(&kd_run.report, meta.clone());
    let grads = gradient_sums(&kd_run.report, meta);
    let gradient_change_spearman = gradient_change_correlation(&grads, &changes)?;
    let drift = diff(&kd_run.initial, &kd_run.final_snapshot, Grouping::PerTensor)?;
    let groups: Vec<&str> = kd_run.report.trainable_groups.iter().map(String::as_str).collect();
    let mut track_diff_max_error = 0.0f64;
    let mut curves_grow = true;
    for curve in track_changes(&kd_run.report, &groups)? {
        let last = *curve.values.last().unwrap_or(&0.0);
        let direct = drift
            .iter()
            .find(|c| c.group == curve.group)
            .map_or(f64::INFINITY, |c| c.squared_change);
        track_diff_max_error = track_diff_max_error.max((last - direct).abs());
        curves_grow &= last > curve.values[0];
    }
    let setup = AblationSetup {
        pretrained: &model,
        shots: &shots,
        train_classes: &base,
        base_test: &data.base_test,
        new_test: &data.new_test,
        base_classes: &base,
        new_classes: &new,
        config: &kd_cfg,
        options: &opts,
    };
    let k = config.top_k;
    let ablation = freeze_ablation(&setup, &Strategy::ClipFit, &[KeepSelector::TopK(k), KeepSelector::BottomK(k)], &changes)?;
    let test: Vec<_> = data.base_test.iter().chain(&data.new_test).cloned().collect();
    let fisher_zero_shot = export_features(&model, &test, exec)?.fisher_ratio()?;
    let fisher_clipfit = export_features(&kd_run.model, &test, exec)?.fisher_ratio()?;
    let forensics_s = secs(t);

    Ok(SeedOutcome {
        seed,
        pretrain_final_loss: *pre_report.loss.last().unwrap_or(&f64::NAN),
        zero_shot,
        clipfit_kd,
        clipfit_none,
        layernorm_image,
        proj_bias_text,
        kd_at_start: kd_run.report.reg.first().copied().unwrap_or(f64::NAN),
        mean_cos_kd: mean_cos(&kd_run)?,
        mean_cos_none: mean_cos(&none_run)?,
        changes,
        gradient_change_spearman,
        track_diff_max_error,
        curves_grow,
        top_k: ablation[0].eval.clone(),
        bottom_k: ablation[1].eval.clone(),
        top_groups: ablation[0].groups.clone(),
        bottom_groups: ablation[1].groups.clone(),
        fisher_zero_shot,
        fisher_clipfit,
        seconds: StageTimes {
            generate: generate_s,
            pretrain: pretrain_s,
            methods: methods_s,
            forensics: forensics_s,
        },
    })
}

pub fn run(config: &BenchConfig) -> Result<BenchSummary> {
    let seeds = config
        .seeds
        .iter()
        .map(|&s| run_seed(config, s))
        .collect::<Result<Vec<_>>>()?;
    Ok(BenchSummary {
        config: config.clone(),
        seeds,
    })
}
