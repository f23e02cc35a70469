use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};

use super::registry::{ParamName, ParamStore};
use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::model::DualEncoder;

/// Deep copy of every parameter value at one training step.
#[derive(Clone, Debug, PartialEq)]
pub struct Snapshot {
    values: Vec<(ParamName, Tensor)>,
    pub step: usize,
    /// Seconds since the Unix epoch at capture. Not part of any report.
    pub wall_time: f64,
}

impl Snapshot {
    pub fn capture(model: &DualEncoder, step: usize) -> Self {
        let values = model
            .params()
            .iter()
            .map(|(_, n, t)| {
                let copy = Tensor::new(t.shape().to_vec(), t.data().to_vec()).expect("valid tensor");
                (n.clone(), copy)
            })
            .collect();
        let wall_time = SystemTime::now()
            .duration_since(UNIX_EPOCH)
            .map(|d| d.as_secs_f64())
            .unwrap_or(0.0);
        Self {
            values,
            step,
            wall_time,
        }
    }

    pub fn values(&self) -> &[(ParamName, Tensor)] {
        &self.values
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.values.iter().find(|(n, _)| n.as_str() == name).map(|(_, t)| t)
    }

    pub fn to_params(&self) -> Result<ParamStore> {
        let mut s = ParamStore::new();
        for (n, t) in &self.values {
            s.insert(n.clone(), t.clone())?;
        }
        Ok(s)
    }
}

/// Shorthand for [`Snapshot::capture`].
pub fn snapshot(model: &DualEncoder, step: usize) -> Snapshot {
    Snapshot::capture(model, step)
}

/// How parameters are pooled into reported groups.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Grouping {
    /// One group per tensor: each FFN projection bias, and each LayerNorm
    /// split into its gain and bias.
    #[default]
    PerTensor,
    /// One group per module (the path without its leaf).
    PerModule,
}

impl Grouping {
    pub fn group_of(self, name: &ParamName) -> String {
        match self {
            Grouping::PerTensor => name.as_str().to_string(),
            Grouping::PerModule => name
                .as_str()
                .rsplit_once('.')
                .map(|(m, _)| m.to_string())
                .unwrap_or_else(|| name.as_str().to_string()),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroupChange {
    pub group: String,
    pub squared_change: f64,
}

/// Per-group `Σ (post − pre)²`, groups in first-appearance order.
pub fn diff(pre: &Snapshot, post: &Snapshot, grouping: Grouping) -> Result<Vec<GroupChange>> {
    if pre.values.len() != post.values.len() {
        return Err(Error::IncompatibleSnapshot(format!(
            "{} vs {} tensors",
            pre.values.len(),
            post.values.len()
        )));
    }
    let mut out: Vec<GroupChange> = Vec::new();
    for ((na, ta), (nb, tb)) in pre.values.iter().zip(&post.values) {
        if na != nb || ta.shape() != tb.shape() {
            return Err(Error::IncompatibleSnapshot(format!("{na} {:?} vs {nb} {:?}", ta.shape(), tb.shape())));
        }
        let sq: f64 = ta.data().iter().zip(tb.data()).map(|(a, b)| (a - b) * (a - b)).sum();
        let group = grouping.group_of(na);
        match out.last_mut() {
            Some(last) if last.group == group => last.squared_change += sq,
            _ => match out.iter_mut().find(|g| g.group == group) {
                Some(g) => g.squared_change += sq,
                None => out.push(GroupChange { group, squared_change: sq }),
            },
        }
    }
    Ok(out)
}
