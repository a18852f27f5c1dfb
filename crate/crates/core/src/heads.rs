//! Projection/prediction heads, the query and momentum encoders, and the
//! momentum update.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layers::{LayerNorm, Linear};
use crate::numerics::{Binder, Float, ParamStore, Rng, Tape, Tensor, Var};
use crate::vit::{AttentionStack, Vit, VitConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct HeadConfig {
    pub hidden_dim: usize,
    pub out_dim: usize,
    pub projection_layers: usize,
    pub prediction_layers: usize,
}

impl Default for HeadConfig {
    fn default() -> Self {
        Self {
            hidden_dim: 256,
            out_dim: 64,
            projection_layers: 3,
            prediction_layers: 2,
        }
    }
}

impl HeadConfig {
    pub fn validate(&self) -> Result<()> {
        if self.out_dim == 0 || self.hidden_dim < self.out_dim {
            return Err(Error::Config(format!(
                "need hidden_dim ({}) >= out_dim ({}) >= 1",
                self.hidden_dim, self.out_dim
            )));
        }
        if self.projection_layers == 0 || self.prediction_layers == 0 {
            return Err(Error::Config("head depths must be at least 1".into()));
        }
        Ok(())
    }
}

/// `linear → layernorm → gelu` hidden layers followed by a bare linear layer.
#[derive(Debug, Clone)]
pub struct Mlp {
    hidden: Vec<(Linear, LayerNorm)>,
    last: Linear,
}

impl Mlp {
    pub fn new<T: Float>(
        store: &mut ParamStore<T>,
        name: &str,
        in_dim: usize,
        hidden_dim: usize,
        out_dim: usize,
        layers: usize,
        rng: &mut Rng,
    ) -> Self {
        let mut hidden = Vec::new();
        let mut dim = in_dim;
        for i in 0..layers.saturating_sub(1) {
            let lin = Linear::new(store, &format!("{name}.{i}.linear"), dim, hidden_dim, rng);
            let norm = LayerNorm::new(store, &format!("{name}.{i}.norm"), hidden_dim);
            hidden.push((lin, norm));
            dim = hidden_dim;
        }
        let last = Linear::new(store, &format!("{name}.{}.linear", layers - 1), dim, out_dim, rng);
        Self { hidden, last }
    }

    pub fn forward<'t, T: Float>(&self, b: &Binder<'t, '_, T>, mut x: Var<'t, T>) -> Result<Var<'t, T>> {
        for (lin, norm) in &self.hidden {
            x = norm.forward(b, lin.forward(b, x)?)?.gelu();
        }
        self.last.forward(b, x)
    }
}

/// Backbone + projector, plus a predictor on the query side.
///
/// Parameters are registered backbone first, then projector, then predictor,
/// so the key encoder's store is a prefix of the query encoder's.
#[derive(Debug, Clone)]
pub struct Encoder {
    backbone: Vit,
    projector: Mlp,
    predictor: Option<Mlp>,
    shared_len: usize,
}

impl Encoder {
    pub fn new<T: Float>(
        vit: &VitConfig,
        heads: &HeadConfig,
        store: &mut ParamStore<T>,
        rng: &mut Rng,
    ) -> Result<Self> {
        heads.validate()?;
        let backbone = Vit::new(vit, store, rng)?;
        let projector = Mlp::new(
            store,
            "projector",
            vit.embed_dim,
            heads.hidden_dim,
            heads.out_dim,
            heads.projection_layers,
            rng,
        );
        let shared_len = store.len();
        let predictor = Mlp::new(
            store,
            "predictor",
            heads.out_dim,
            heads.hidden_dim,
            heads.out_dim,
            heads.prediction_layers,
            rng,
        );
        Ok(Self {
            backbone,
            projector,
            predictor: Some(predictor),
            shared_len,
        })
    }

    pub fn backbone(&self) -> &Vit {
        &self.backbone
    }

    /// Number of leading parameters shared with the key encoder.
    pub fn shared_len(&self) -> usize {
        self.shared_len
    }

    /// Backbone class-token features, the heads left out.
    pub fn features<'t, T: Float>(&self, b: &Binder<'t, '_, T>, views: &Tensor<T>) -> Result<Var<'t, T>> {
        self.backbone.forward(b, views)
    }

    pub fn project<'t, T: Float>(&self, b: &Binder<'t, '_, T>, views: &Tensor<T>) -> Result<Var<'t, T>> {
        self.projector.forward(b, self.backbone.forward(b, views)?)
    }

    pub fn project_with_attention<'t, T: Float>(
        &self,
        b: &Binder<'t, '_, T>,
        views: &Tensor<T>,
    ) -> Result<(Var<'t, T>, AttentionStack<T>)> {
        let (emb, attn) = self.backbone.forward_with_attention(b, views)?;
        Ok((self.projector.forward(b, emb)?, attn))
    }

    /// Backbone → projector → predictor.
    pub fn predict<'t, T: Float>(&self, b: &Binder<'t, '_, T>, views: &Tensor<T>) -> Result<Var<'t, T>> {
        let z = self.project(b, views)?;
        match &self.predictor {
            Some(p) => p.forward(b, z),
            None => Err(Error::State("encoder has no predictor".into())),
        }
    }
}

/// Query encoder `f_q` and the momentum encoder `f_k`, which also serves as
/// the local-branch encoder.
#[derive(Debug, Clone)]
pub struct DualEncoder<T: Float = f32> {
    layout: Encoder,
    pub query: ParamStore<T>,
    pub key: ParamStore<T>,
    pub momentum: f64,
}

impl<T: Float> DualEncoder<T> {
    /// Builds `f_q` and initializes `f_k` as a copy of its backbone and
    /// projector.
    pub fn new(vit: &VitConfig, heads: &HeadConfig, momentum: f64, rng: &mut Rng) -> Result<Self> {
        if !(0.0..=1.0).contains(&momentum) {
            return Err(Error::Config(format!("momentum {momentum} outside [0, 1]")));
        }
        let mut query = ParamStore::new();
        let layout = Encoder::new(vit, heads, &mut query, rng)?;
        let key = query.prefix(layout.shared_len);
        Ok(Self {
            layout,
            query,
            key,
            momentum,
        })
    }

    pub fn layout(&self) -> &Encoder {
        &self.layout
    }

    pub fn vit_config(&self) -> &VitConfig {
        self.layout.backbone.config()
    }

    /// Prediction-head output of `f_q`, recorded on `b`'s tape.
    pub fn encode_query<'t>(&self, b: &Binder<'t, '_, T>, views: &Tensor<T>) -> Result<Var<'t, T>> {
        self.layout.predict(b, views)
    }

    /// Projection output of `f_k`, detached from any tape.
    pub fn encode_key(&self, views: &Tensor<T>) -> Result<Tensor<T>> {
        let tape = Tape::new();
        let b = Binder::frozen(&tape, &self.key);
        Ok(self.layout.project(&b, views)?.detach())
    }

    /// As [`Self::encode_key`], also returning the key encoder's attention.
    pub fn encode_key_with_attention(&self, views: &Tensor<T>) -> Result<(Tensor<T>, AttentionStack<T>)> {
        let tape = Tape::new();
        let b = Binder::frozen(&tape, &self.key);
        let (z, attn) = self.layout.project_with_attention(&b, views)?;
        Ok((z.detach(), attn))
    }

    /// Backbone features of `f_q` with no tape attached.
    pub fn query_features(&self, views: &Tensor<T>) -> Result<Tensor<T>> {
        let tape = Tape::new();
        let b = Binder::frozen(&tape, &self.query);
        Ok(self.layout.features(&b, views)?.detach())
    }

    /// `f_k ← β·f_k + (1−β)·f_q` over the shared backbone and projector.
    pub fn momentum_update(&mut self) -> Result<()> {
        momentum_update(&mut self.key, &self.query, self.momentum)
    }
}

/// Elementwise `key ← β·key + (1−β)·query` for each key parameter, matched
/// by position and checked by name and shape.
///
/// Written as `key + (1−β)(query − key)` so every result stays between the
/// old key value and the query value.
pub fn momentum_update<T: Float>(key: &mut ParamStore<T>, query: &ParamStore<T>, beta: f64) -> Result<()> {
    if key.len() > query.len() {
        return Err(Error::Contract(format!(
            "key encoder has {} params, query only {}",
            key.len(),
            query.len()
        )));
    }
    for ((kn, kt), (qn, qt)) in key.iter().zip(query.iter()) {
        if kn != qn || kt.shape() != qt.shape() {
            return Err(Error::Contract(format!(
                "misaligned parameters {kn} {:?} vs {qn} {:?}",
                kt.shape(),
                qt.shape()
            )));
        }
    }
    if beta == 1.0 {
        return Ok(());
    }
    let step = T::lit(1.0 - beta);
    for (kt, qt) in key.tensors_mut().iter_mut().zip(query.tensors()) {
        if beta == 0.0 {
            kt.data_mut().copy_from_slice(qt.data());
            continue;
        }
        for (k, &q) in kt.data_mut().iter_mut().zip(qt.data()) {
            *k += step * (q - *k);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy() -> (VitConfig, HeadConfig) {
        (
            VitConfig {
                image_size: 16,
                patch_size: 8,
                channels: 3,
                embed_dim: 16,
                layers: 2,
                heads: 2,
                mlp_ratio: 2.0,
            },
            HeadConfig {
                hidden_dim: 32,
                out_dim: 8,
                projection_layers: 3,
                prediction_layers: 2,
            },
        )
    }

    fn views(b: usize, seed: u64) -> Tensor<f32> {
        let mut rng = Rng::seed(seed);
        Tensor::from_fn(&[b, 3, 16, 16], |_| rng.normal() as f32)
    }

    #[test]
    fn scalar_momentum_by_hand() {
        let mut key = ParamStore::<f32>::new();
        key.add("w", Tensor::scalar(0.0));
        let mut query = ParamStore::<f32>::new();
        query.add("w", Tensor::scalar(1.0));
        momentum_update(&mut key, &query, 0.99).unwrap();
        assert!((key.tensors()[0].item() - 0.01).abs() < 1e-7);
    }

    #[test]
    fn misaligned_stores_rejected() {
        let mut key = ParamStore::<f32>::new();
        key.add("a", Tensor::scalar(0.0));
        let mut query = ParamStore::<f32>::new();
        query.add("b", Tensor::scalar(1.0));
        assert!(matches!(momentum_update(&mut key, &query, 0.5), Err(Error::Contract(_))));
    }

    #[test]
    fn key_store_is_query_prefix_without_predictor() {
        let (v, h) = toy();
        let dual = DualEncoder::<f32>::new(&v, &h, 0.99, &mut Rng::seed(0)).unwrap();
        assert!(dual.key.len() < dual.query.len());
        assert!(dual.key.iter().all(|(n, _)| !n.starts_with("predictor")));
        assert!(dual.query.iter().skip(dual.key.len()).all(|(n, _)| n.starts_with("predictor")));
    }

    #[test]
    fn output_shapes_and_duplicates() {
        let (v, h) = toy();
        let dual = DualEncoder::<f32>::new(&v, &h, 0.99, &mut Rng::seed(0)).unwrap();
        let one = views(1, 5);
        let mut pair = one.data().to_vec();
        pair.extend_from_slice(one.data());
        let pair = Tensor::new(&[2, 3, 16, 16], pair).unwrap();
        let tape = Tape::new();
        let q = dual.encode_query(&Binder::frozen(&tape, &dual.query), &pair).unwrap();
        assert_eq!(q.shape(), vec![2, 8]);
        let q = q.value();
        assert_eq!(q.data()[..8], q.data()[8..]);
        let k = dual.encode_key(&pair).unwrap();
        assert_eq!(k.shape(), &[2, 8]);
        assert_eq!(k.data()[..8], k.data()[8..]);
    }

    #[test]
    fn beta_zero_copies_query_projection() {
        let (v, h) = toy();
        let mut dual = DualEncoder::<f32>::new(&v, &h, 0.0, &mut Rng::seed(0)).unwrap();
        // Perturb f_q so the copy is observable.
        let mut rng = Rng::seed(9);
        for t in dual.query.tensors_mut() {
            t.data_mut().iter_mut().for_each(|x| *x += 0.01 * rng.normal() as f32);
        }
        dual.momentum_update().unwrap();
        let x = views(3, 2);
        let tape = Tape::new();
        let via_query = dual
            .layout()
            .project(&Binder::frozen(&tape, &dual.query), &x)
            .unwrap()
            .detach();
        assert_eq!(dual.encode_key(&x).unwrap(), via_query);
    }

    #[test]
    fn key_outputs_carry_no_gradient_to_query() {
        let (v, h) = toy();
        let mut dual = DualEncoder::<f32>::new(&v, &h, 0.99, &mut Rng::seed(0)).unwrap();
        let tape = Tape::new();
        let bq = Binder::trainable(&tape, &dual.query);
        let k = tape.constant(dual.encode_key(&views(2, 1)).unwrap());
        let loss = k.mul(k).unwrap().sum();
        let grads = tape.backward(loss).unwrap();
        let bindings = bq.into_bindings();
        dual.query.accumulate_grads(&bindings, &grads).unwrap();
        assert!(!dual.query.has_any_grad());
    }

    #[test]
    fn heads_do_not_collapse_at_init() {
        let (v, h) = toy();
        let dual = DualEncoder::<f32>::new(&v, &h, 0.99, &mut Rng::seed(4)).unwrap();
        let x = views(4, 8);
        let tape = Tape::new();
        let q = dual.encode_query(&Binder::frozen(&tape, &dual.query), &x).unwrap().detach();
        for z in [q, dual.encode_key(&x).unwrap()] {
            for row in z.data().chunks(8) {
                let n: f32 = row.iter().map(|v| v * v).sum::<f32>().sqrt();
                assert!(n.is_finite() && n > 0.0);
            }
        }
    }
}
