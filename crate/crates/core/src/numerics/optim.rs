use super::tensor::Tensor;
use crate::error::{Error, Result};

pub const DEFAULT_BETA1: f32 = 0.9;
pub const DEFAULT_BETA2: f32 = 0.999;
pub const DEFAULT_EPSILON: f32 = 1e-8;

/// Adam with bias correction. Moment buffers are kept per parameter, in the
/// same order as the parameter slice passed to [`AdamState::step`].
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub lr: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub epsilon: f32,
    step: u64,
    first: Vec<Vec<f32>>,
    second: Vec<Vec<f32>>,
}

impl AdamState {
    pub fn new(params: &[Tensor], lr: f32) -> Self {
        Self {
            lr,
            beta1: DEFAULT_BETA1,
            beta2: DEFAULT_BETA2,
            epsilon: DEFAULT_EPSILON,
            step: 0,
            first: params.iter().map(|p| vec![0.0; p.numel()]).collect(),
            second: params.iter().map(|p| vec![0.0; p.numel()]).collect(),
        }
    }

    /// Restores a saved state; `moments` holds `(first, second)` per parameter.
    pub fn from_parts(
        lr: f32,
        beta1: f32,
        beta2: f32,
        epsilon: f32,
        step: u64,
        moments: Vec<(Vec<f32>, Vec<f32>)>,
    ) -> Result<Self> {
        if moments.iter().any(|(m, v)| m.len() != v.len()) {
            return Err(Error::Usage("moment buffers differ in length".into()));
        }
        let (first, second) = moments.into_iter().unzip();
        Ok(Self {
            lr,
            beta1,
            beta2,
            epsilon,
            step,
            first,
            second,
        })
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn first_moments(&self) -> &[Vec<f32>] {
        &self.first
    }

    pub fn second_moments(&self) -> &[Vec<f32>] {
        &self.second
    }

    /// One update from the gradients stored on `params`. Gradients are left
    /// in place.
    pub fn step(&mut self, params: &mut [Tensor]) -> Result<()> {
        if params.len() != self.first.len() {
            return Err(Error::Usage(format!(
                "optimizer tracks {} parameters, got {}",
                self.first.len(),
                params.len()
            )));
        }
        for (i, p) in params.iter().enumerate() {
            match p.grad() {
                None => return Err(Error::Usage(format!("parameter {i} has no gradient"))),
                Some(g) if g.len() != self.first[i].len() => {
                    return Err(Error::Usage(format!(
                        "parameter {i}: gradient length {} vs moment length {}",
                        g.len(),
                        self.first[i].len()
                    )))
                }
                _ => {}
            }
        }
        self.step += 1;
        let t = self.step.min(i32::MAX as u64) as i32;
        let bc1 = (1.0 - (self.beta1 as f64).powi(t)) as f32;
        let bc2 = (1.0 - (self.beta2 as f64).powi(t)) as f32;
        let (b1, b2, lr, eps) = (self.beta1, self.beta2, self.lr, self.epsilon);
        for ((p, m), v) in params.iter_mut().zip(&mut self.first).zip(&mut self.second) {
            let g = p.grad().expect("checked above").to_vec();
            for (((w, m), v), g) in p.data_mut().iter_mut().zip(m).zip(v).zip(g) {
                *m = b1 * *m + (1.0 - b1) * g;
                *v = b2 * *v + (1.0 - b2) * g * g;
                let m_hat = *m / bc1;
                let v_hat = *v / bc2;
                *w -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}
