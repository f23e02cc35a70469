//! Central finite-difference gradient checking.
//!
//! The numeric side only evaluates forward values, so it stays independent
//! of every backward rule it is used to verify.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{Tape, Tensor, Var};
use crate::error::Result;

pub const DEFAULT_STEP: f64 = 1e-5;

/// Outcome of one gradient check: the worst norm-wise relative error over
/// all inputs, per input.
#[derive(Clone, Debug)]
pub struct GradCheck {
    pub per_input: Vec<f64>,
}

impl GradCheck {
    pub fn max_rel_error(&self) -> f64 {
        self.per_input.iter().copied().fold(0.0, f64::max)
    }
}

/// `‖a − n‖ / max(‖a‖, ‖n‖)`, zero when both vanish.
pub fn relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let diff = analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| (a - n) * (a - n))
        .sum::<f64>()
        .sqrt();
    let scale = norm(analytic).max(norm(numeric));
    if scale == 0.0 {
        0.0
    } else {
        diff / scale
    }
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Checks the gradient of `f` with respect to every input.
///
/// `f` may return a value of any shape; it is reduced to a scalar through a
/// fixed random projection drawn from `seed` so that no component of the
/// Jacobian is hidden by a plain sum.
pub fn check<F>(inputs: &[Tensor], seed: u64, step: f64, f: F) -> Result<GradCheck>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9_7f4a_7c15);
    let mut projection: Option<Vec<f64>> = None;

    let mut eval = |xs: &[Tensor], want_grads: bool| -> Result<(f64, Vec<Vec<f64>>)> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = xs.iter().map(|t| tape.variable(t)).collect();
        let out = f(&mut tape, &vars)?;
        let n = tape.value(out).len();
        let weights = projection
            .get_or_insert_with(|| (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect())
            .clone();
        let w = Tensor::new(tape.shape(out).to_vec(), weights)?;
        let w = tape.constant(&w);
        let prod = tape.mul(out, w)?;
        let loss = tape.sum(prod);
        let value = tape.item(loss);
        if !want_grads {
            return Ok((value, Vec::new()));
        }
        let grads = tape.backward(loss)?;
        let g = vars
            .iter()
            .zip(xs)
            .map(|(v, t)| grads.wrt(*v).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; t.len()]))
            .collect();
        Ok((value, g))
    };

    let (_, analytic) = eval(inputs, true)?;
    let mut per_input = Vec::with_capacity(inputs.len());
    let mut work: Vec<Tensor> = inputs.to_vec();
    for (idx, analytic_grad) in analytic.iter().enumerate() {
        let mut numeric = vec![0.0; inputs[idx].len()];
        for j in 0..numeric.len() {
            let orig = work[idx].data()[j];
            work[idx].data_mut()[j] = orig + step;
            let (plus, _) = eval(&work, false)?;
            work[idx].data_mut()[j] = orig - step;
            let (minus, _) = eval(&work, false)?;
            work[idx].data_mut()[j] = orig;
            numeric[j] = (plus - minus) / (2.0 * step);
        }
        per_input.push(relative_error(analytic_grad, &numeric));
    }
    Ok(GradCheck { per_input })
}

/// Random tensor with entries uniform in `[-scale, scale]`.
pub fn random_tensor(shape: &[usize], scale: f64, rng: &mut impl Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-scale..scale)).collect())
        .expect("positive shape")
}
