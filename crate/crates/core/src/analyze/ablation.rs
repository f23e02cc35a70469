use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use super::ChangeReport;
use crate::error::{Error, Result};
use crate::model::DualEncoder;
use crate::params::{FreezeMask, Strategy};
use crate::synthdata::Example;
use crate::train::{evaluate, finetune_with_mask, EvalResult, FinetuneOptions, TrainConfig};

/// Which of a strategy's trainable groups stay trainable.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum KeepSelector {
    All,
    /// Nothing trains: the pretrained model is evaluated as is.
    None,
    First,
    Last,
    /// The `k` groups that changed most in the reference run.
    TopK(usize),
    /// The `k` groups that changed least in the reference run.
    BottomK(usize),
}

impl fmt::Display for KeepSelector {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            KeepSelector::All => f.write_str("all"),
            KeepSelector::None => f.write_str("none"),
            KeepSelector::First => f.write_str("first"),
            KeepSelector::Last => f.write_str("last"),
            KeepSelector::TopK(k) => write!(f, "top{k}"),
            KeepSelector::BottomK(k) => write!(f, "bottom{k}"),
        }
    }
}

impl FromStr for KeepSelector {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let num = |rest: &str| {
            rest.parse::<usize>()
                .map_err(|_| Error::Config(format!("bad selector `{s}`")))
        };
        match s {
            "all" => Ok(KeepSelector::All),
            "none" => Ok(KeepSelector::None),
            "first" => Ok(KeepSelector::First),
            "last" => Ok(KeepSelector::Last),
            _ if s.starts_with("top") => Ok(KeepSelector::TopK(num(&s[3..])?)),
            _ if s.starts_with("bottom") => Ok(KeepSelector::BottomK(num(&s[6..])?)),
            _ => Err(Error::Config(format!("bad selector `{s}` (all|none|first|last|topK|bottomK)"))),
        }
    }
}

impl Serialize for KeepSelector {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(&self.to_string())
    }
}

impl<'de> Deserialize<'de> for KeepSelector {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        String::deserialize(d)?.parse().map_err(serde::de::Error::custom)
    }
}

/// Resolves a selector against the strategy's trainable groups (in model
/// order) and a change ranking from a prior unrestricted run.
pub fn select_groups(selector: KeepSelector, groups: &[String], ranking: &ChangeReport) -> Result<Vec<String>> {
    let ranked: Vec<String> = ranking.by_rank().into_iter().filter(|g| groups.contains(g)).collect();
    let picked: Vec<String> = match selector {
        KeepSelector::All => groups.to_vec(),
        KeepSelector::None => Vec::new(),
        KeepSelector::First => groups.first().cloned().into_iter().collect(),
        KeepSelector::Last => groups.last().cloned().into_iter().collect(),
        KeepSelector::TopK(k) => ranked.iter().take(k).cloned().collect(),
        KeepSelector::BottomK(k) => ranked.iter().rev().take(k).cloned().collect(),
    };
    if picked.is_empty() && selector != KeepSelector::None {
        return Err(Error::EmptyMask(format!("selector `{selector}` keeps no group")));
    }
    Ok(picked)
}

/// Everything an ablation run needs besides the selector.
pub struct AblationSetup<'a> {
    pub pretrained: &'a DualEncoder,
    pub shots: &'a [Example],
    pub train_classes: &'a [usize],
    pub base_test: &'a [Example],
    pub new_test: &'a [Example],
    pub base_classes: &'a [usize],
    pub new_classes: &'a [usize],
    pub config: &'a TrainConfig,
    pub options: &'a FinetuneOptions,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub selector: KeepSelector,
    pub groups: Vec<String>,
    pub eval: EvalResult,
}

/// Fine-tunes with each restricted mask and evaluates it.
pub fn freeze_ablation(
    setup: &AblationSetup<'_>,
    base: &Strategy,
    selectors: &[KeepSelector],
    ranking: &ChangeReport,
) -> Result<Vec<AblationRow>> {
    let full = FreezeMask::from_strategy(setup.pretrained.params(), base);
    let grouping = setup.options.grouping;
    let mut groups: Vec<String> = Vec::new();
    for n in full.trainable_names() {
        let g = grouping.group_of(n);
        if !groups.contains(&g) {
            groups.push(g);
        }
    }
    let eval = |model: &DualEncoder| {
        evaluate(
            model,
            setup.base_test,
            setup.new_test,
            setup.base_classes,
            setup.new_classes,
            setup.options.exec,
        )
    };
    selectors
        .iter()
        .map(|&selector| {
            let keep = select_groups(selector, &groups, ranking)?;
            let result = if keep.is_empty() {
                eval(setup.pretrained)?
            } else {
                let mask = full.restrict(|n| keep.contains(&grouping.group_of(n)));
                let label = format!("{base}[{selector}]");
                let out = finetune_with_mask(
                    setup.pretrained,
                    setup.shots,
                    setup.train_classes,
                    mask,
                    &label,
                    setup.config,
                    setup.options,
                )?;
                eval(&out.model)?
            };
            Ok(AblationRow {
                selector,
                groups: keep,
                eval: result,
            })
        })
        .collect()
}
