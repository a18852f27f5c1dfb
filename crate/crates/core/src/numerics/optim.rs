//! AdamW (decoupled weight decay) and SGD with optional momentum.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

use super::{Float, ParamStore};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum OptimizerKind {
    AdamW { beta1: f64, beta2: f64, eps: f64 },
    Sgd { momentum: f64 },
}

impl OptimizerKind {
    pub fn adamw() -> Self {
        OptimizerKind::AdamW {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    pub fn sgd(momentum: f64) -> Self {
        OptimizerKind::Sgd { momentum }
    }
}

/// Optimizer hyperparameters plus per-parameter moment buffers.
///
/// Buffers are laid out in the order of the store the state was built for;
/// the parameter names are kept so a state cannot silently be applied to a
/// different model.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState<T: Float = f32> {
    pub kind: OptimizerKind,
    pub weight_decay: f64,
    step_count: u64,
    param_names: Vec<String>,
    first: Vec<Vec<T>>,
    second: Vec<Vec<T>>,
}

impl<T: Float> OptimizerState<T> {
    pub fn new(kind: OptimizerKind, weight_decay: f64, params: &ParamStore<T>) -> Self {
        let zeros = || -> Vec<Vec<T>> {
            params
                .tensors()
                .iter()
                .map(|t| vec![T::zero(); t.numel()])
                .collect()
        };
        let second = match kind {
            OptimizerKind::AdamW { .. } => zeros(),
            OptimizerKind::Sgd { .. } => Vec::new(),
        };
        Self {
            kind,
            weight_decay,
            step_count: 0,
            param_names: params.iter().map(|(n, _)| n.to_string()).collect(),
            first: zeros(),
            second,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step_count
    }

    pub fn param_names(&self) -> &[String] {
        &self.param_names
    }

    pub fn first_moments(&self) -> &[Vec<T>] {
        &self.first
    }

    pub fn second_moments(&self) -> &[Vec<T>] {
        &self.second
    }

    /// Restores buffers read back from a checkpoint.
    pub fn restore(&mut self, step_count: u64, first: Vec<Vec<T>>, second: Vec<Vec<T>>) -> Result<()> {
        let fits = |bufs: &[Vec<T>], want: &[Vec<T>]| {
            bufs.len() == want.len() && bufs.iter().zip(want).all(|(a, b)| a.len() == b.len())
        };
        if !fits(&first, &self.first) || !fits(&second, &self.second) {
            return Err(Error::CheckpointShape("optimizer moment buffers".into()));
        }
        self.step_count = step_count;
        self.first = first;
        self.second = second;
        Ok(())
    }

    /// One update of every parameter in `params` from its gradient buffer.
    pub fn step(&mut self, params: &mut ParamStore<T>, lr: f64) -> Result<()> {
        if params.len() != self.param_names.len()
            || params.iter().zip(&self.param_names).any(|((n, _), m)| n != m)
        {
            return Err(Error::Contract(
                "optimizer state was built for a different parameter list".into(),
            ));
        }
        if let Some((name, _)) = params.iter().find(|(_, t)| t.grad().is_none()) {
            return Err(Error::Contract(format!("parameter {name} has no gradient")));
        }
        self.step_count += 1;
        let lr_t = T::lit(lr);
        let wd = T::lit(self.weight_decay);
        match self.kind {
            OptimizerKind::AdamW { beta1, beta2, eps } => {
                let t = self.step_count as i32;
                let bc1 = T::lit(1.0 - beta1.powi(t));
                let bc2 = T::lit(1.0 - beta2.powi(t));
                let (b1, b2, eps) = (T::lit(beta1), T::lit(beta2), T::lit(eps));
                for (i, p) in params.tensors_mut().iter_mut().enumerate() {
                    let g = p.grad().expect("checked above").to_vec();
                    let (m, v) = (&mut self.first[i], &mut self.second[i]);
                    for (j, w) in p.data_mut().iter_mut().enumerate() {
                        *w -= lr_t * wd * *w;
                        m[j] = b1 * m[j] + (T::one() - b1) * g[j];
                        v[j] = b2 * v[j] + (T::one() - b2) * g[j] * g[j];
                        let m_hat = m[j] / bc1;
                        let v_hat = v[j] / bc2;
                        *w -= lr_t * m_hat / (v_hat.sqrt() + eps);
                    }
                }
            }
            OptimizerKind::Sgd { momentum } => {
                let mu = T::lit(momentum);
                let first_step = self.step_count == 1;
                for (i, p) in params.tensors_mut().iter_mut().enumerate() {
                    let g = p.grad().expect("checked above").to_vec();
                    let buf = &mut self.first[i];
                    for (j, w) in p.data_mut().iter_mut().enumerate() {
                        let d = g[j] + wd * *w;
                        buf[j] = if first_step || momentum == 0.0 { d } else { mu * buf[j] + d };
                        *w -= lr_t * buf[j];
                    }
                }
            }
        }
        Ok(())
    }
}
