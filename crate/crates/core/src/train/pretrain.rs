use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::batch::{forward_images, GradAccumulator};
use super::config::PretrainConfig;
use super::optim::Adam;
use crate::autodiff::{Tape, Tensor};
use crate::error::{Error, Result};
use crate::exec::ExecMode;
use crate::model::{Bindings, DualEncoder};
use crate::synthdata::Example;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PretrainReport {
    pub config: PretrainConfig,
    pub batch_size: usize,
    pub loss: Vec<f64>,
    pub temperature: Vec<f64>,
}

/// Symmetric InfoNCE over in-batch pairs; every batch holds distinct
/// classes so no caption appears twice. Trains every parameter including
/// the logit scale, which is clamped after each step.
pub fn pretrain(
    mut model: DualEncoder,
    corpus: &[Example],
    config: &PretrainConfig,
    exec: ExecMode,
) -> Result<(DualEncoder, PretrainReport)> {
    config.validate()?;
    if corpus.is_empty() {
        return Err(Error::EmptyDataset("pretraining corpus is empty".into()));
    }
    let mut by_class: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, e) in corpus.iter().enumerate() {
        by_class.entry(e.label).or_default().push(i);
    }
    let classes: Vec<usize> = by_class.keys().copied().collect();
    let batch = config.batch_size.min(classes.len());
    if batch < 2 {
        return Err(Error::ContrastiveDegenerate(batch));
    }

    let ids: Vec<_> = model.params().ids().collect();
    for &id in &ids {
        model.params_mut().get_mut(id).set_requires_grad(true);
    }
    let mut adam = Adam::new(model.params());
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let labels: Vec<usize> = (0..batch).collect();
    let mut report = PretrainReport {
        config: config.clone(),
        batch_size: batch,
        loss: Vec::with_capacity(config.steps),
        temperature: Vec::with_capacity(config.steps),
    };

    for step in 0..config.steps {
        let mut picked = classes.clone();
        picked.shuffle(&mut rng);
        let members: Vec<&Example> = picked[..batch]
            .iter()
            .map(|c| {
                let pool = &by_class[c];
                &corpus[pool[rng.gen_range(0..pool.len())]]
            })
            .collect();
        let images: Vec<&Tensor> = members.iter().map(|e| &e.image).collect();
        let captions: Vec<Vec<usize>> = members.iter().map(|e| e.caption.clone()).collect();

        let pass = forward_images(&model, &images, exec)?;
        let e = model.config().embed_dim;
        let mut tape = Tape::new();
        let mut b = Bindings::new(&model);
        let text = model.text_features(&mut tape, &mut b, &captions)?;
        let f = tape.variable(&Tensor::matrix(batch, e, pass.features.clone())?);
        let fi = tape.normalize_rows(f)?;
        let ft = tape.normalize_rows(text)?;
        let ftt = tape.transpose(ft)?;
        let z = tape.matmul(fi, ftt)?;
        let ls = b.var(&mut tape, model.params(), model.logit_scale_id());
        let scale = tape.exp(ls);
        let z = tape.mul_scalar(z, scale)?;
        let zt = tape.transpose(z)?;
        let li = tape.softmax_cross_entropy(z, &labels)?;
        let lt = tape.softmax_cross_entropy(zt, &labels)?;
        let sum = tape.add(li, lt)?;
        let loss = tape.scale(sum, 0.5);
        let value = tape.item(loss);
        if !value.is_finite() {
            return Err(Error::NonFinite { step, value });
        }

        let grads = tape.backward(loss)?;
        let mut acc = GradAccumulator::new(model.params().len());
        acc.add_tape(&tape, &grads);
        let d_f = grads.wrt(f).expect("features are a variable").to_vec();
        pass.backward(&d_f, exec, &mut acc)?;
        adam.step(model.params_mut(), &acc.into_vec(), config.lr_at(step));
        model.clamp_logit_scale();

        report.loss.push(value);
        report.temperature.push(model.temperature());
    }

    for &id in &ids {
        model.params_mut().get_mut(id).set_requires_grad(false);
    }
    Ok((model, report))
}
