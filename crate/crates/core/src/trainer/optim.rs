use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Sgd,
    Adam { beta1: f64, beta2: f64, eps: f64 },
}

impl OptimizerKind {
    pub const ADAM_DEFAULT: OptimizerKind = OptimizerKind::Adam {
        beta1: 0.9,
        beta2: 0.999,
        eps: 1e-8,
    };
}

impl Default for OptimizerKind {
    fn default() -> Self {
        Self::ADAM_DEFAULT
    }
}

/// First and second moment estimates, zero-initialized.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
    pub step: u64,
}

impl AdamState {
    pub fn new<'a>(params: impl IntoIterator<Item = &'a Tensor>) -> Self {
        let m: Vec<Tensor> = params.into_iter().map(|p| Tensor::zeros(p.shape())).collect();
        Self {
            v: m.clone(),
            m,
            step: 0,
        }
    }
}

fn check_shapes(params: &[&mut Tensor], grads: &[Tensor]) -> Result<()> {
    if params.len() != grads.len() {
        return Err(Error::Config(format!(
            "{} parameters but {} gradients",
            params.len(),
            grads.len()
        )));
    }
    for (p, g) in params.iter().zip(grads) {
        if p.shape() != g.shape() {
            return Err(Error::ShapeMismatch {
                op: "optimizer step",
                lhs: p.shape().to_vec(),
                rhs: g.shape().to_vec(),
            });
        }
    }
    Ok(())
}

/// `p ← p − lr · g`.
pub fn sgd_step(params: &mut [&mut Tensor], grads: &[Tensor], lr: f64) -> Result<()> {
    check_shapes(params, grads)?;
    for (p, g) in params.iter_mut().zip(grads) {
        for (w, &d) in p.data_mut().iter_mut().zip(g.data()) {
            *w -= lr * d;
        }
    }
    Ok(())
}

/// One bias-corrected Adam update.
pub fn adam_step(
    state: &mut AdamState,
    params: &mut [&mut Tensor],
    grads: &[Tensor],
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
) -> Result<()> {
    check_shapes(params, grads)?;
    if state.m.len() != params.len() {
        return Err(Error::Config("adam moments do not match parameter count".into()));
    }
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - beta1.powi(t);
    let c2 = 1.0 - beta2.powi(t);
    for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
        let m = state.m[i].data_mut();
        let v = state.v[i].data_mut();
        for (j, (w, &d)) in p.data_mut().iter_mut().zip(g.data()).enumerate() {
            m[j] = beta1 * m[j] + (1.0 - beta1) * d;
            v[j] = beta2 * v[j] + (1.0 - beta2) * d * d;
            let m_hat = m[j] / c1;
            let v_hat = v[j] / c2;
            *w -= lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
    Ok(())
}

/// Rescales `grads` in place so their global L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_global_norm(grads: &mut [Tensor], max_norm: f64) -> f64 {
    let norm = grads
        .iter()
        .flat_map(|g| g.data())
        .map(|x| x * x)
        .sum::<f64>()
        .sqrt();
    if norm > max_norm {
        let scale = max_norm / norm;
        for g in grads.iter_mut() {
            g.data_mut().iter_mut().for_each(|x| *x *= scale);
        }
    }
    norm
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Tape;

    #[test]
    fn sgd_on_sum_of_squares() {
        let mut w = Tensor::vector(vec![1.0]);
        let mut tape = Tape::new();
        let v = tape.leaf(w.clone());
        let sq = tape.mul(v, v).unwrap();
        let loss = tape.sum(sq);
        let g = tape.backward(loss).unwrap().get(v).unwrap().clone();
        sgd_step(&mut [&mut w], &[g], 0.1).unwrap();
        assert!((w.item() - 0.8).abs() < 1e-15);
    }

    #[test]
    fn adam_first_step_closed_form() {
        let (lr, eps) = (1e-3, 1e-8);
        for g in [0.5, -3.0, 1e-4] {
            let mut w = Tensor::scalar(2.0);
            let mut state = AdamState::new([&w]);
            adam_step(&mut state, &mut [&mut w], &[Tensor::scalar(g)], lr, 0.9, 0.999, eps).unwrap();
            let expected = 2.0 - lr * g / (g.abs() + eps);
            assert!((w.item() - expected).abs() < 1e-15, "g={g}");
        }
    }

    #[test]
    fn adam_zero_gradient_is_a_fixed_point() {
        let mut w = Tensor::vector(vec![0.3, -0.7]);
        let start = w.clone();
        let mut state = AdamState::new([&w]);
        for _ in 0..50 {
            adam_step(&mut state, &mut [&mut w], &[Tensor::zeros(&[2])], 0.1, 0.9, 0.999, 1e-8).unwrap();
        }
        assert!(w.bits_eq(&start));
    }

    #[test]
    fn adam_is_deterministic() {
        let run = || {
            let mut w = Tensor::vector(vec![1.0, 2.0, 3.0]);
            let mut state = AdamState::new([&w]);
            for step in 0..20 {
                let g = w.map(|x| x * (step as f64 + 1.0).sin());
                adam_step(&mut state, &mut [&mut w], &[g], 0.01, 0.9, 0.999, 1e-8).unwrap();
            }
            w
        };
        assert!(run().bits_eq(&run()));
    }

    #[test]
    fn shape_mismatch_rejected() {
        let mut w = Tensor::vector(vec![1.0, 2.0]);
        assert!(sgd_step(&mut [&mut w], &[Tensor::scalar(1.0)], 0.1).is_err());
    }

    #[test]
    fn clipping_bounds_the_norm() {
        let mut grads = vec![Tensor::vector(vec![3.0]), Tensor::vector(vec![4.0])];
        let before = clip_global_norm(&mut grads, 1.0);
        assert_eq!(before, 5.0);
        assert!((grads[0].item() - 0.6).abs() < 1e-15);
        assert!((grads[1].item() - 0.8).abs() < 1e-15);
        let mut small = vec![Tensor::vector(vec![0.1])];
        clip_global_norm(&mut small, 1.0);
        assert_eq!(small[0].item(), 0.1);
    }
}
