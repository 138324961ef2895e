//! Objective terms for the aging translator.
//!
//! The discriminator minimizes the negated adversarial term plus an R1
//! gradient penalty on real images. The generator never sees a log-D
//! term: it is trained by matching discriminator activations between the
//! target and the translated image, plus weighted cycle-reconstruction and
//! identity terms. Array-level functions score concrete tensors; the
//! `*_graph` builders assemble the same terms on a [`Tape`] for training.

use ndarray::{Array1, Array4};
use serde::{Deserialize, Serialize};

use crate::autodiff::{Scalar, Tape, Var};
use crate::dataset::AgeGroup;
use crate::error::{Error, Result};
use crate::networks::Discriminator;
use crate::stylestats::FeatureMap;

/// Floor inside logarithms.
pub const LOG_EPS: f64 = 1e-8;

/// Loss-term weights.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub lambda_rec: f64,
    pub lambda_id: f64,
    pub lambda_gp: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            lambda_rec: 0.01,
            lambda_id: 1e-4,
            lambda_gp: 10.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("lambda_rec", self.lambda_rec),
            ("lambda_id", self.lambda_id),
            ("lambda_gp", self.lambda_gp),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Config(format!(
                    "{name} must be finite and >= 0, got {v}"
                )));
            }
        }
        Ok(())
    }
}

/// All scalar terms of one training step.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub adv: f64,
    pub fm: f64,
    pub rec: f64,
    pub id: f64,
    pub gp: f64,
    pub total_g: f64,
    pub total_d: f64,
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Mean of log sigmoid(d_real) plus mean of log(1 - sigmoid(d_fake)),
/// with logits already selected for the relevant age group. Always <= 0;
/// both logarithms floored at 1e-8.
pub fn adversarial_loss(d_real: &Array1<f32>, d_fake: &Array1<f32>) -> f64 {
    let mean_log = |xs: &Array1<f32>, flip: bool| -> f64 {
        if xs.is_empty() {
            return 0.0;
        }
        xs.iter()
            .map(|&l| {
                let p = sigmoid(l as f64);
                let p = if flip { 1.0 - p } else { p };
                p.max(LOG_EPS).ln()
            })
            .sum::<f64>()
            / xs.len() as f64
    };
    mean_log(d_real, false) + mean_log(d_fake, true)
}

/// Sum over layers of the mean squared difference between target and
/// fake discriminator activations.
pub fn feature_matching_loss(
    d_target_acts: &[FeatureMap],
    d_fake_acts: &[FeatureMap],
) -> Result<f64> {
    if d_target_acts.len() != d_fake_acts.len() {
        return Err(Error::ShapeMismatch {
            expected: format!("{} activation layers", d_target_acts.len()),
            got: format!("{}", d_fake_acts.len()),
        });
    }
    let mut total = 0.0f64;
    for (t, f) in d_target_acts.iter().zip(d_fake_acts) {
        if t.values.dim() != f.values.dim() {
            return Err(Error::ShapeMismatch {
                expected: format!("{:?}", t.values.dim()),
                got: format!("{:?}", f.values.dim()),
            });
        }
        let n = t.values.len() as f64;
        total += t
            .values
            .iter()
            .zip(f.values.iter())
            .map(|(a, b)| ((a - b) as f64).powi(2))
            .sum::<f64>()
            / n;
    }
    Ok(total)
}

fn mean_abs_diff(a: &Array4<f32>, b: &Array4<f32>) -> Result<f64> {
    if a.dim() != b.dim() {
        return Err(Error::ShapeMismatch {
            expected: format!("{:?}", a.dim()),
            got: format!("{:?}", b.dim()),
        });
    }
    Ok(a.iter()
        .zip(b.iter())
        .map(|(x, y)| ((x - y) as f64).abs())
        .sum::<f64>()
        / a.len() as f64)
}

/// Mean absolute difference between the original and its cycled
/// reconstruction.
pub fn reconstruction_loss(x_a: &Array4<f32>, cycled: &Array4<f32>) -> Result<f64> {
    mean_abs_diff(x_a, cycled)
}

/// Mean absolute difference between the input and its own-age translation.
pub fn identity_loss(x_a: &Array4<f32>, x_tilde: &Array4<f32>) -> Result<f64> {
    mean_abs_diff(x_a, x_tilde)
}

/// R1 penalty: lambda times the batch mean of the squared pixel-gradient
/// norm of each sample's own-group logit.
pub fn r1_penalty(
    d: &Discriminator,
    x_real: &Array4<f32>,
    groups: &[AgeGroup],
    lambda_gp: f64,
) -> Result<f64> {
    if groups.len() != x_real.dim().0 {
        return Err(Error::ShapeMismatch {
            expected: format!("{} group labels", x_real.dim().0),
            got: format!("{}", groups.len()),
        });
    }
    if lambda_gp == 0.0 {
        return Ok(0.0);
    }
    let tape: Tape<f32> = Tape::new();
    let dvars = d.params.bind(&tape, false);
    let x = tape.param(x_real.clone().into_dyn());
    let (logits, _) = d.forward_graph(&tape, &dvars, x)?;
    let idx: Vec<usize> = groups.iter().map(|g| g.index()).collect();
    let selected = tape.select_per_row(logits, &idx);
    let total = tape.sum_all(selected);
    let gp = r1_graph(&tape, total, x, lambda_gp);
    Ok(tape.scalar_value(gp) as f64)
}

/// Combine parts into a report; every part must be finite.
pub fn compose(
    adv: f64,
    fm: f64,
    rec: f64,
    id: f64,
    gp: f64,
    w: &LossWeights,
) -> Result<LossReport> {
    for (term, value) in [
        ("adv", adv),
        ("fm", fm),
        ("rec", rec),
        ("id", id),
        ("gp", gp),
    ] {
        if !value.is_finite() {
            return Err(Error::NonFiniteLoss { term, value });
        }
    }
    Ok(LossReport {
        adv,
        fm,
        rec,
        id,
        gp,
        total_g: fm + w.lambda_rec * rec + w.lambda_id * id,
        total_d: -adv + gp,
    })
}

/// Graph form of [`adversarial_loss`]. Logit vars are (B,).
pub fn adversarial_loss_graph<T: Scalar>(tape: &Tape<T>, d_real: Var, d_fake: Var) -> Var {
    let eps = T::from_f64(LOG_EPS);
    let one = T::one();
    let real_term = tape.ln(tape.add_scalar(tape.sigmoid(d_real), eps));
    let fake_p = tape.sigmoid(d_fake);
    let fake_term = tape.ln(tape.add_scalar(tape.sub(tape.expand_like(one, fake_p), fake_p), eps));
    tape.add(tape.mean_all(real_term), tape.mean_all(fake_term))
}

/// Graph form of [`feature_matching_loss`].
pub fn feature_matching_graph<T: Scalar>(tape: &Tape<T>, target: &[Var], fake: &[Var]) -> Var {
    assert_eq!(target.len(), fake.len());
    let mut total = tape.scalar(T::zero());
    for (&t, &f) in target.iter().zip(fake) {
        let diff = tape.sub(t, f);
        total = tape.add(total, tape.mean_all(tape.square(diff)));
    }
    total
}

/// Graph mean absolute difference.
pub fn l1_graph<T: Scalar>(tape: &Tape<T>, a: Var, b: Var) -> Var {
    tape.mean_all(tape.abs(tape.sub(a, b)))
}

/// Graph R1 penalty: differentiates `logit_total` (the summed selected
/// logits) with respect to `x` on the same tape, so the result can itself
/// be differentiated for the parameter update.
pub fn r1_graph<T: Scalar>(tape: &Tape<T>, logit_total: Var, x: Var, lambda_gp: f64) -> Var {
    let b = tape.shape(x)[0];
    let grads = tape.grad(logit_total, &[x]);
    let g = grads[0].expect("logits depend on input pixels");
    let sq = tape.sum_all(tape.square(g));
    tape.scale(sq, T::from_f64(lambda_gp / b as f64))
}

impl<T: Scalar> Tape<T> {
    /// Constant tensor of `x` with the shape of `like`.
    fn expand_like(&self, x: T, like: Var) -> Var {
        let shape = self.shape(like);
        self.expand_scalar(self.scalar(x), &shape)
    }
}
