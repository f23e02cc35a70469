//! Split-tape execution: image features are computed on independent
//! per-chunk tapes (in parallel when enabled), the loss head runs on its
//! own tape, and the feature gradients are pushed back chunk by chunk.
//! Gradients are reduced in chunk order, so results do not depend on the
//! execution mode.

use crate::autodiff::{Tape, Tensor, Var};
use crate::error::Result;
use crate::exec::ExecMode;
use crate::model::{Bindings, DualEncoder};
use crate::params::ParamId;

/// Images per tape. Fixed so that the reduction order never changes.
pub const IMAGE_CHUNK: usize = 8;

pub(crate) struct ImagePass {
    tapes: Vec<(Tape, Var)>,
    pub features: Vec<f64>,
    pub rows: usize,
}

pub(crate) fn forward_images(model: &DualEncoder, images: &[&Tensor], exec: ExecMode) -> Result<ImagePass> {
    let chunks: Vec<&[&Tensor]> = images.chunks(IMAGE_CHUNK).collect();
    let tapes = exec
        .map(&chunks, |chunk| -> Result<(Tape, Var)> {
            let mut tape = Tape::new();
            let mut b = Bindings::new(model);
            let f = model.image_features(&mut tape, &mut b, chunk)?;
            Ok((tape, f))
        })
        .into_iter()
        .collect::<Result<Vec<_>>>()?;
    let mut features = Vec::with_capacity(images.len() * model.config().embed_dim);
    for (tape, f) in &tapes {
        features.extend_from_slice(tape.value(*f));
    }
    Ok(ImagePass {
        tapes,
        features,
        rows: images.len(),
    })
}

impl ImagePass {
    /// Back-propagates `d_features` (`[rows×E]`) into the bound parameters.
    pub fn backward(&self, d_features: &[f64], exec: ExecMode, acc: &mut GradAccumulator) -> Result<()> {
        let e = self.features.len() / self.rows.max(1);
        let mut offsets = Vec::with_capacity(self.tapes.len());
        let mut start = 0;
        for (tape, f) in &self.tapes {
            let n = tape.value(*f).len();
            offsets.push(start);
            start += n;
        }
        debug_assert_eq!(start, self.rows * e);
        let idx: Vec<usize> = (0..self.tapes.len()).collect();
        let parts = exec.map(&idx, |&i| -> Result<Vec<(usize, Vec<f64>)>> {
            let (tape, f) = &self.tapes[i];
            let n = tape.value(*f).len();
            let seed = &d_features[offsets[i]..offsets[i] + n];
            let grads = tape.backward_seeded(&[(*f, seed)])?;
            Ok(tape
                .bound_gradients(&grads)
                .into_iter()
                .map(|(k, g)| (k, g.to_vec()))
                .collect())
        });
        for part in parts {
            for (k, g) in part? {
                acc.add(k, &g);
            }
        }
        Ok(())
    }
}

/// Sums gradients per parameter in arrival order.
#[derive(Debug)]
pub(crate) struct GradAccumulator {
    grads: Vec<Option<Vec<f64>>>,
}

impl GradAccumulator {
    pub fn new(num_params: usize) -> Self {
        Self {
            grads: vec![None; num_params],
        }
    }

    pub fn add(&mut self, key: usize, g: &[f64]) {
        match &mut self.grads[key] {
            Some(acc) => acc.iter_mut().zip(g).for_each(|(a, b)| *a += b),
            slot => *slot = Some(g.to_vec()),
        }
    }

    pub fn add_tape(&mut self, tape: &Tape, grads: &crate::autodiff::Gradients) {
        for (k, g) in tape.bound_gradients(grads) {
            self.add(k, g);
        }
    }

    pub fn into_vec(self) -> Vec<(ParamId, Vec<f64>)> {
        self.grads
            .into_iter()
            .enumerate()
            .filter_map(|(i, g)| Some((ParamId(i), g?)))
            .collect()
    }
}
