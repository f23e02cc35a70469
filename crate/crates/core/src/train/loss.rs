use crate::autodiff::{Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::model::ClassWeights;
use crate::params::{ParamName, Snapshot};

use super::config::{KdForm, Regularizer, TrainConfig};

/// `cos(w_i, f) / τ` for a batch of features `[B×E]` against unit-norm
/// class weights `[K×E]`.
pub fn cosine_logits(tape: &mut Tape, features: Var, weights: Var, tau: f64) -> Result<Var> {
    if !(tau > 0.0) {
        return Err(Error::Config(format!("temperature must be positive, got {tau}")));
    }
    let f = tape.normalize_rows(features)?;
    let wt = tape.transpose(weights)?;
    let z = tape.matmul(f, wt)?;
    Ok(tape.scale(z, 1.0 / tau))
}

/// Mean cross-entropy of the zero-shot probabilities.
pub fn ce_loss(tape: &mut Tape, features: Var, weights: Var, labels: &[usize], tau: f64) -> Result<Var> {
    let z = cosine_logits(tape, features, weights, tau)?;
    tape.softmax_cross_entropy(z, labels)
}

/// `(1/K) Σ (1 − cos(w_ref_i, w_i))`, or the plain mean cosine for
/// [`KdForm::RawCosine`]. The reference enters as a constant.
pub fn kd_loss(tape: &mut Tape, live: Var, reference: &ClassWeights, form: KdForm) -> Result<Var> {
    let expect = [reference.num_classes(), reference.dim()];
    if tape.shape(live) != expect {
        return Err(Error::dim(
            "kd_loss",
            format!("live weights {:?} vs reference {:?}", tape.shape(live), expect),
        ));
    }
    let r = tape.constant(&reference.as_tensor());
    let cos = tape.cosine_rows(live, r)?;
    let mean = tape.mean(cos);
    Ok(match form {
        KdForm::RawCosine => mean,
        KdForm::OneMinusCosine => {
            let one = tape.constant(&Tensor::scalar(1.0));
            tape.sub(one, mean)?
        }
    })
}

/// `(1/L) Σ ‖b_ref − b‖²` over the given live biases.
pub fn mse_bias_loss(tape: &mut Tape, live: &[(ParamName, Var)], reference: &Snapshot) -> Result<Var> {
    if live.is_empty() {
        return Ok(tape.constant(&Tensor::scalar(0.0)));
    }
    let mut total: Option<Var> = None;
    for (name, v) in live {
        let r = reference
            .get(name.as_str())
            .ok_or_else(|| Error::IncompatibleSnapshot(format!("reference has no `{name}`")))?;
        if r.shape() != tape.shape(*v) {
            return Err(Error::IncompatibleSnapshot(format!(
                "`{name}`: live {:?} vs reference {:?}",
                tape.shape(*v),
                r.shape()
            )));
        }
        let r = tape.constant(r);
        let d = tape.sub(*v, r)?;
        let sq = tape.square(d);
        let s = tape.sum(sq);
        total = Some(match total {
            Some(t) => tape.add(t, s)?,
            None => s,
        });
    }
    let total = total.expect("non-empty");
    Ok(tape.scale(total, 1.0 / live.len() as f64))
}

/// `ce + β·reg`, or `ce` when no regularizer is configured.
pub fn total_loss(tape: &mut Tape, config: &TrainConfig, ce: Var, reg: Option<Var>) -> Result<Var> {
    match (config.regularizer, reg) {
        (Regularizer::None, _) | (_, None) => Ok(ce),
        (_, Some(r)) => {
            let weighted = tape.scale(r, config.beta);
            tape.add(ce, weighted)
        }
    }
}
