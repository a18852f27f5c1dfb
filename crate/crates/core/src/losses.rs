//! InfoNCE, its symmetric two-view form, and the global + local objective.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{Float, Tensor, Var};

const NORM_EPS: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossConfig {
    pub temperature: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self { temperature: 0.2 }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        check_tau(self.temperature)
    }
}

fn check_tau(tau: f64) -> Result<()> {
    if tau > 0.0 && tau.is_finite() {
        Ok(())
    } else {
        Err(Error::Config(format!("temperature {tau} must be positive")))
    }
}

/// Mean over rows of `−log softmax(q̂ k̂ᵀ / τ)ᵢᵢ`, rows L2-normalized first.
/// Row `i` of `k` is the positive for row `i` of `q`; every other row is a
/// negative.
pub fn info_nce<'t, T: Float>(q: Var<'t, T>, k: Var<'t, T>, tau: f64) -> Result<Var<'t, T>> {
    check_tau(tau)?;
    let (qs, ks) = (q.shape(), k.shape());
    if qs.len() != 2 || qs != ks || qs[0] == 0 {
        return Err(Error::Contract(format!(
            "info_nce needs matching [B, d] inputs, got {qs:?} and {ks:?}"
        )));
    }
    let eps = T::lit(NORM_EPS);
    let qn = q.l2_normalize(eps)?;
    let kn = k.l2_normalize(eps)?.permute(&[1, 0])?;
    let labels: Vec<usize> = (0..qs[0]).collect();
    qn.matmul(kn)?.scale(T::lit(1.0 / tau)).cross_entropy(&labels)
}

/// `2τ·L(q1, k2) + 2τ·L(q2, k1)`.
pub fn symmetric_loss<'t, T: Float>(
    q1: Var<'t, T>,
    q2: Var<'t, T>,
    k1: Var<'t, T>,
    k2: Var<'t, T>,
    tau: f64,
) -> Result<Var<'t, T>> {
    let a = info_nce(q1, k2, tau)?;
    let b = info_nce(q2, k1, tau)?;
    Ok(a.add(b)?.scale(T::lit(2.0 * tau)))
}

/// The representations of one training step. Keys are plain tensors, so they
/// cannot carry gradient back into the encoder that produced them.
pub struct BranchOutputs<'t, T: Float = f32> {
    pub z_q1: Var<'t, T>,
    pub z_q2: Var<'t, T>,
    pub z_k1: Tensor<T>,
    pub z_k2: Tensor<T>,
    /// Local keys from the masked views; absent when the local branch is off.
    pub local: Option<(Tensor<T>, Tensor<T>)>,
}

pub struct LossTerms<'t, T: Float = f32> {
    pub total: Var<'t, T>,
    pub global: Var<'t, T>,
    pub local: Option<Var<'t, T>>,
}

/// `ℒ = ℒ_G + ℒ_L` with both terms in the symmetric form.
pub fn total_loss<'t, T: Float>(b: BranchOutputs<'t, T>, tau: f64) -> Result<LossTerms<'t, T>> {
    let shape = b.z_q1.shape();
    let mut keys = vec![&b.z_k1, &b.z_k2];
    if let Some((l1, l2)) = &b.local {
        keys.extend([l1, l2]);
    }
    if b.z_q2.shape() != shape || keys.iter().any(|k| k.shape() != shape.as_slice()) {
        return Err(Error::Contract("branch outputs disagree on [B, d]".into()));
    }
    let tape = b.z_q1.tape();
    let k1 = tape.constant(b.z_k1);
    let k2 = tape.constant(b.z_k2);
    let global = symmetric_loss(b.z_q1, b.z_q2, k1, k2, tau)?;
    let (total, local) = match b.local {
        Some((l1, l2)) => {
            let local =
                symmetric_loss(b.z_q1, b.z_q2, tape.constant(l1), tape.constant(l2), tau)?;
            (global.add(local)?, Some(local))
        }
        None => (global, None),
    };
    Ok(LossTerms {
        total,
        global,
        local,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Tape;

    fn eye2(tape: &Tape<f64>) -> Var<'_, f64> {
        tape.constant(Tensor::new(&[2, 2], vec![1., 0., 0., 1.]).unwrap())
    }

    #[test]
    fn single_row_has_no_negatives() {
        let tape = Tape::<f32>::new();
        let q = tape.constant(Tensor::new(&[1, 3], vec![0.3, -1.0, 2.0]).unwrap());
        let k = tape.constant(Tensor::new(&[1, 3], vec![1.0, 0.5, 0.1]).unwrap());
        assert_eq!(info_nce(q, k, 0.2).unwrap().value().item(), 0.0);
        assert_eq!(symmetric_loss(q, q, k, k, 0.2).unwrap().value().item(), 0.0);
    }

    #[test]
    fn identity_rows_by_hand() {
        let tape = Tape::<f64>::new();
        let want = (1.0 + (-1.0f64).exp()).ln();
        let l = info_nce(eye2(&tape), eye2(&tape), 1.0).unwrap().value().item();
        assert!((l - want).abs() < 1e-12);
        assert!((want - 0.3133).abs() < 1e-4);
        let s = symmetric_loss(eye2(&tape), eye2(&tape), eye2(&tape), eye2(&tape), 1.0)
            .unwrap()
            .value()
            .item();
        assert!((s - 4.0 * want).abs() < 1e-12);
        assert!((s - 1.2533).abs() < 1e-3);
    }

    #[test]
    fn bad_inputs() {
        let tape = Tape::<f32>::new();
        let a = tape.constant(Tensor::zeros(&[2, 3]));
        let b = tape.constant(Tensor::zeros(&[3, 3]));
        assert!(matches!(info_nce(a, b, 0.2), Err(Error::Contract(_))));
        assert!(matches!(info_nce(a, a, 0.0), Err(Error::Config(_))));
        assert!(matches!(info_nce(a, a, -1.0), Err(Error::Config(_))));
    }

    #[test]
    fn local_equal_to_global_doubles_the_loss() {
        let tape = Tape::<f64>::new();
        let z = |s: f64| Tensor::from_fn(&[3, 4], |i| ((i as f64) * s).sin());
        let q1 = tape.constant(z(0.7));
        let q2 = tape.constant(z(1.3));
        let terms = total_loss(
            BranchOutputs {
                z_q1: q1,
                z_q2: q2,
                z_k1: z(0.4),
                z_k2: z(2.1),
                local: Some((z(0.4), z(2.1))),
            },
            0.2,
        )
        .unwrap();
        let g = terms.global.value().item();
        assert_eq!(terms.total.value().item(), 2.0 * g);
    }
}
