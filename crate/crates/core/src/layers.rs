//! Affine and normalization layers shared by the backbone and the heads.

use crate::error::Result;
use crate::numerics::{Binder, Float, ParamRef, ParamStore, Rng, Tensor, Var};

pub(crate) const INIT_STD: f64 = 0.02;
const NORM_EPS: f64 = 1e-6;

#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: ParamRef,
    pub bias: ParamRef,
}

impl Linear {
    /// Weight is stored `[in × out]`.
    pub fn new<T: Float>(
        store: &mut ParamStore<T>,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        rng: &mut Rng,
    ) -> Self {
        let weight = Tensor::from_fn(&[fan_in, fan_out], |_| T::lit(rng.trunc_normal(INIT_STD)));
        Self {
            weight: store.add(format!("{name}.weight"), weight),
            bias: store.add(format!("{name}.bias"), Tensor::zeros(&[fan_out])),
        }
    }

    pub fn forward<'t, T: Float>(&self, b: &Binder<'t, '_, T>, x: Var<'t, T>) -> Result<Var<'t, T>> {
        x.matmul_last(b.param(self.weight))?
            .add_broadcast(b.param(self.bias))
    }
}

#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub gamma: ParamRef,
    pub beta: ParamRef,
}

impl LayerNorm {
    pub fn new<T: Float>(store: &mut ParamStore<T>, name: &str, dim: usize) -> Self {
        Self {
            gamma: store.add(format!("{name}.gamma"), Tensor::full(&[dim], T::one())),
            beta: store.add(format!("{name}.beta"), Tensor::zeros(&[dim])),
        }
    }

    pub fn forward<'t, T: Float>(&self, b: &Binder<'t, '_, T>, x: Var<'t, T>) -> Result<Var<'t, T>> {
        x.layernorm(T::lit(NORM_EPS))?
            .mul_broadcast(b.param(self.gamma))?
            .add_broadcast(b.param(self.beta))
    }
}
