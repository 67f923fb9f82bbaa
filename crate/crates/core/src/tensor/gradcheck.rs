use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use super::{Graph, Tensor, Var};
use crate::error::Error;

#[derive(Debug, Error)]
pub enum GradCheckError {
    #[error("step size {0} outside [1e-7, 1e-3]")]
    BadStep(f64),
    #[error("non-finite gradient for input {input} at coordinate {index}")]
    NonFinite { input: usize, index: usize },
    #[error(transparent)]
    Build(#[from] Error),
}

const PROJECTION_SEED: u64 = 0x5eed_9c4d;

/// Compares reverse-mode gradients with central differences.
///
/// `build` records a computation on a fresh graph, given one leaf per entry
/// of `inputs`. Non-scalar outputs are contracted with a fixed pseudo-random
/// weight tensor so every output coordinate participates. Returns the
/// largest `|analytic - numeric| / max(|analytic|, |numeric|, 1e-8)` over all
/// input coordinates.
pub fn grad_check<F>(inputs: &[Tensor<f64>], eps: f64, build: F) -> Result<f64, GradCheckError>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var, Error>,
{
    if !(1e-7..=1e-3).contains(&eps) {
        return Err(GradCheckError::BadStep(eps));
    }

    let evaluate = |values: &[Tensor<f64>], want_grad: bool| -> Result<(f64, Vec<Vec<f64>>), Error> {
        let mut g = Graph::new();
        let leaves: Vec<Var> = values.iter().map(|t| g.param(t.clone())).collect();
        let out = build(&mut g, &leaves)?;
        let loss = if g.value(out).len() == 1 {
            out
        } else {
            let mut rng = ChaCha8Rng::seed_from_u64(PROJECTION_SEED);
            let shape = g.shape(out).to_vec();
            let proj = Tensor::from_fn(&shape, |_| rng.random_range(-1.0..1.0));
            let p = g.constant(proj);
            let prod = g.mul(out, p)?;
            g.sum(prod)
        };
        let value = g.scalar(loss);
        let mut grads = Vec::new();
        if want_grad {
            g.backward(loss)?;
            for (leaf, t) in leaves.iter().zip(values) {
                grads.push(
                    g.grad(*leaf)
                        .map(<[f64]>::to_vec)
                        .unwrap_or_else(|| vec![0.0; t.len()]),
                );
            }
        }
        Ok((value, grads))
    };

    let (_, analytic) = evaluate(inputs, true)?;
    let mut worst = 0.0f64;
    let mut probe: Vec<Tensor<f64>> = inputs.to_vec();
    for (which, grads) in analytic.iter().enumerate() {
        for (index, &a) in grads.iter().enumerate() {
            if !a.is_finite() {
                return Err(GradCheckError::NonFinite {
                    input: which,
                    index,
                });
            }
            let original = probe[which].data()[index];
            probe[which].data_mut()[index] = original + eps;
            let (plus, _) = evaluate(&probe, false)?;
            probe[which].data_mut()[index] = original - eps;
            let (minus, _) = evaluate(&probe, false)?;
            probe[which].data_mut()[index] = original;
            let numeric = (plus - minus) / (2.0 * eps);
            if !numeric.is_finite() {
                return Err(GradCheckError::NonFinite {
                    input: which,
                    index,
                });
            }
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-8);
            worst = worst.max(rel);
        }
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_step_outside_range() {
        let x = Tensor::<f64>::zeros(&[1]);
        let r = grad_check(&[x], 1e-2, |g, v| Ok(g.sum(v[0])));
        assert!(matches!(r, Err(GradCheckError::BadStep(_))));
    }

    #[test]
    fn detects_wrong_gradient() {
        // relu composed with a non-smooth max at a kink: analytic picks one
        // branch, numeric averages both, so the check must notice.
        let x = Tensor::new(&[1, 2], vec![1.0, 1.0]).unwrap();
        let err = grad_check(&[x], 1e-5, |g, v| g.max_reduce(v[0], 1)).unwrap();
        assert!(err > 0.1);
    }
}
