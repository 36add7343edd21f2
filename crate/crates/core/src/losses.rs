//! Pyramid L1 reconstruction loss, hinge adversarial losses and the joint
//! generator objective.

use serde::{Deserialize, Serialize};

use crate::autograd::Var;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Weights of the adversarial and pyramid terms in the generator objective.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Lambdas {
    pub adversarial: f64,
    pub pyramid: f64,
}

impl Default for Lambdas {
    fn default() -> Self {
        Lambdas {
            adversarial: 0.01,
            pyramid: 1.0,
        }
    }
}

impl Lambdas {
    pub fn validate(&self) -> Result<()> {
        if !(self.adversarial > 0.0 && self.pyramid > 0.0) {
            return Err(Error::config(format!(
                "loss weights must be positive, got {self:?}"
            )));
        }
        Ok(())
    }
}

/// Scalar values of one generator/discriminator evaluation.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossBundle {
    pub pyramid: f64,
    pub adv_g: f64,
    pub adv_d: f64,
    pub total_g: f64,
    pub lambdas: Lambdas,
}

/// Ground truth (`[N, 3, R, R]`) box-downscaled to each of `sizes`.
pub fn pyramid_targets(ground_truth: &Tensor, sizes: &[usize]) -> Result<Vec<Tensor>> {
    sizes.iter().map(|&s| ground_truth.downscale_to(s)).collect()
}

/// Sum over scales of the mean absolute error between each prediction and
/// the ground truth downscaled to its size.
pub fn pyramid_l1<'t>(outputs: &[Var<'t>], ground_truth: &Tensor) -> Result<Var<'t>> {
    let first = outputs
        .first()
        .ok_or_else(|| Error::shape("pyramid loss needs at least one scale"))?;
    let tape = first.tape();
    let mut total: Option<Var<'t>> = None;
    for out in outputs {
        let shape = out.shape();
        let gt_shape = ground_truth.shape();
        if shape.len() != 4 || shape[..2] != gt_shape[..2] {
            return Err(Error::shape(format!(
                "prediction {shape:?} does not match ground truth {gt_shape:?}"
            )));
        }
        let target = tape.constant(ground_truth.downscale_to(shape[2])?);
        let term = out.sub(target).abs().mean();
        total = Some(match total {
            Some(t) => t.add(term),
            None => term,
        });
    }
    Ok(total.expect("at least one scale"))
}

/// [`pyramid_l1`] with an explicit scale count check.
pub fn pyramid_l1_checked<'t>(
    outputs: &[Var<'t>],
    ground_truth: &Tensor,
    expected_scales: usize,
) -> Result<Var<'t>> {
    if outputs.len() != expected_scales {
        return Err(Error::shape(format!(
            "{} prediction scales, expected {expected_scales}",
            outputs.len()
        )));
    }
    pyramid_l1(outputs, ground_truth)
}

/// `mean(max(0, 1 − D(x))) + mean(max(0, 1 + D(z)))`.
pub fn hinge_d<'t>(real_logits: Var<'t>, fake_logits: Var<'t>) -> Var<'t> {
    let real = real_logits.scale(-1.0).add_scalar(1.0).relu().mean();
    let fake = fake_logits.add_scalar(1.0).relu().mean();
    real.add(fake)
}

/// `−mean(D(z))`.
pub fn hinge_g(fake_logits: Var<'_>) -> Var<'_> {
    fake_logits.mean().scale(-1.0)
}

/// `λ_G · adv_g + λ_pd · pyramid`.
pub fn total_objective<'t>(adv_g: Var<'t>, pyramid: Var<'t>, lambdas: Lambdas) -> Result<Var<'t>> {
    lambdas.validate()?;
    Ok(adv_g
        .scale(lambdas.adversarial)
        .add(pyramid.scale(lambdas.pyramid)))
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::autograd::{gradcheck, Tape};

    fn logits(tape: &Tape, v: f64) -> Var<'_> {
        tape.constant(Tensor::full(&[2, 1, 4, 4], v))
    }

    #[test]
    fn hinge_fixed_points() {
        let tape = Tape::new();
        assert_eq!(hinge_d(logits(&tape, 1.0), logits(&tape, -1.0)).value().item(), 0.0);
        assert_eq!(hinge_d(logits(&tape, 0.0), logits(&tape, 0.0)).value().item(), 2.0);
        assert_eq!(hinge_d(logits(&tape, 2.0), logits(&tape, -3.0)).value().item(), 0.0);
        assert_eq!(hinge_g(logits(&tape, 0.5)).value().item(), -0.5);
        assert_eq!(hinge_g(logits(&tape, 0.0)).value().item(), 0.0);
    }

    #[test]
    fn hinge_g_is_negative_mean() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let t = Tensor::randn(&[3, 1, 16, 16], 2.0, &mut rng);
        let tape = Tape::new();
        let got = hinge_g(tape.constant(t.clone())).value().item();
        let mut acc = 0.0;
        for v in t.data() {
            acc += v;
        }
        assert!((got + acc / t.numel() as f64).abs() < 1e-7);
    }

    #[test]
    fn total_objective_is_weighted_sum_with_lambda_gradients() {
        let tape = Tape::new();
        let adv = tape.leaf(Tensor::scalar(1.0));
        let pd = tape.leaf(Tensor::scalar(2.0));
        let unit = Lambdas {
            adversarial: 1.0,
            pyramid: 1.0,
        };
        assert_eq!(total_objective(adv, pd, unit).unwrap().value().item(), 3.0);
        let zero = total_objective(tape.leaf(Tensor::scalar(0.0)), tape.leaf(Tensor::scalar(0.0)), unit);
        assert_eq!(zero.unwrap().value().item(), 0.0);

        let lambdas = Lambdas {
            adversarial: 0.25,
            pyramid: 3.0,
        };
        let total = total_objective(adv, pd, lambdas).unwrap();
        let grads = tape.backward(total);
        assert_eq!(grads.get(adv).unwrap().item(), 0.25);
        assert_eq!(grads.get(pd).unwrap().item(), 3.0);

        let bad = Lambdas {
            adversarial: 0.0,
            pyramid: 1.0,
        };
        assert!(matches!(total_objective(adv, pd, bad), Err(Error::Config(_))));
    }

    #[test]
    fn pyramid_zero_for_downscaled_truth_and_constant_offset() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let gt = Tensor::uniform(&[2, 3, 32, 32], -1.0, 1.0, &mut rng);
        let sizes = [32, 16, 8, 4];
        let targets = pyramid_targets(&gt, &sizes).unwrap();
        let tape = Tape::new();
        let outs: Vec<Var> = targets.iter().map(|t| tape.constant(t.clone())).collect();
        assert_eq!(pyramid_l1(&outs, &gt).unwrap().value().item(), 0.0);

        let mut shifted = outs.clone();
        shifted[2] = tape.constant(targets[2].map(|v| v + 0.5));
        let loss = pyramid_l1(&shifted, &gt).unwrap().value().item();
        assert!((loss - 0.5).abs() < 1e-12);
    }

    #[test]
    fn pyramid_matches_elementwise_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let gt = Tensor::uniform(&[1, 3, 16, 16], -1.0, 1.0, &mut rng);
        let tape = Tape::new();
        let preds: Vec<Tensor> = [16, 8, 4]
            .iter()
            .map(|&s| Tensor::uniform(&[1, 3, s, s], -1.0, 1.0, &mut rng))
            .collect();
        let outs: Vec<Var> = preds.iter().map(|t| tape.constant(t.clone())).collect();
        let got = pyramid_l1_checked(&outs, &gt, 3).unwrap().value().item();

        // Independent route: explicit box averages over the full-resolution truth.
        let mut want = 0.0;
        for p in &preds {
            let s = p.shape()[2];
            let f = 16 / s;
            let mut acc = 0.0;
            for c in 0..3 {
                for y in 0..s {
                    for x in 0..s {
                        let mut avg = 0.0;
                        for dy in 0..f {
                            for dx in 0..f {
                                avg += gt.at4(0, c, y * f + dy, x * f + dx);
                            }
                        }
                        avg /= (f * f) as f64;
                        acc += (p.at4(0, c, y, x) - avg).abs();
                    }
                }
            }
            want += acc / (3 * s * s) as f64;
        }
        assert!((got - want).abs() < 1e-6);
        assert!(pyramid_l1_checked(&outs, &gt, 4).is_err());
    }

    #[test]
    fn loss_gradients_away_from_kinks() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        // Keep logits clear of ±1 and predictions clear of the targets.
        let real = Tensor::uniform(&[1, 1, 3, 3], -0.5, 0.5, &mut rng);
        let fake = Tensor::uniform(&[1, 1, 3, 3], -0.5, 0.5, &mut rng);
        let pred = Tensor::uniform(&[1, 3, 4, 4], 0.5, 0.9, &mut rng);
        let gt = Tensor::uniform(&[1, 3, 4, 4], -0.9, -0.5, &mut rng);
        gradcheck::check(
            &[real, fake, pred],
            move |_, v| {
                let d = hinge_d(v[0], v[1]);
                let g = total_objective(hinge_g(v[1]), pyramid_l1(&[v[2]], &gt).unwrap(), Lambdas::default())
                    .unwrap();
                d.add(g)
            },
            1e-6,
            1e-4,
        );
    }

    proptest! {
        #[test]
        fn hinge_d_nonnegative(real in proptest::collection::vec(-3.0f64..3.0, 4),
                               fake in proptest::collection::vec(-3.0f64..3.0, 4)) {
            let tape = Tape::inference();
            let r = tape.constant(Tensor::from_vec(&[1, 1, 2, 2], real.clone()));
            let f = tape.constant(Tensor::from_vec(&[1, 1, 2, 2], fake.clone()));
            let v = hinge_d(r, f).value().item();
            prop_assert!(v >= 0.0);
            let at_rest = real.iter().all(|&x| x >= 1.0) && fake.iter().all(|&x| x <= -1.0);
            prop_assert_eq!(v == 0.0, at_rest);
        }
    }
}
