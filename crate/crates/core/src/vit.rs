//! A small pre-norm Vision Transformer that reports every layer's attention.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layers::{LayerNorm, Linear, INIT_STD};
use crate::numerics::{Binder, Float, ParamRef, ParamStore, Rng, Tensor, Var};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct VitConfig {
    pub image_size: usize,
    pub patch_size: usize,
    pub channels: usize,
    pub embed_dim: usize,
    pub layers: usize,
    pub heads: usize,
    pub mlp_ratio: f64,
}

impl Default for VitConfig {
    fn default() -> Self {
        Self {
            image_size: 32,
            patch_size: 8,
            channels: 3,
            embed_dim: 64,
            layers: 4,
            heads: 4,
            mlp_ratio: 4.0,
        }
    }
}

impl VitConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.patch_size == 0 || self.image_size == 0 || self.image_size % self.patch_size != 0 {
            return bad(format!(
                "image_size {} is not a multiple of patch_size {}",
                self.image_size, self.patch_size
            ));
        }
        if self.heads == 0 || self.embed_dim % self.heads != 0 {
            return bad(format!(
                "embed_dim {} is not divisible by heads {}",
                self.embed_dim, self.heads
            ));
        }
        if self.channels == 0 || self.layers == 0 {
            return bad("channels and layers must be positive".into());
        }
        if !(self.mlp_ratio > 0.0) {
            return bad(format!("mlp_ratio {} must be positive", self.mlp_ratio));
        }
        Ok(())
    }

    pub fn grid_side(&self) -> usize {
        self.image_size / self.patch_size
    }

    pub fn num_patches(&self) -> usize {
        self.grid_side() * self.grid_side()
    }

    pub fn tokens(&self) -> usize {
        self.num_patches() + 1
    }

    pub fn patch_dim(&self) -> usize {
        self.patch_size * self.patch_size * self.channels
    }

    pub fn head_dim(&self) -> usize {
        self.embed_dim / self.heads
    }

    pub fn mlp_dim(&self) -> usize {
        ((self.embed_dim as f64) * self.mlp_ratio).round() as usize
    }

    pub fn image_shape(&self) -> [usize; 3] {
        [self.channels, self.image_size, self.image_size]
    }
}

/// Post-softmax attention of every layer for one batch.
///
/// Layer `l` is stored `[B × H × (1+N) × (1+N)]`; token 0 is the class token.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionStack<T: Float = f32> {
    layers: Vec<Tensor<T>>,
}

impl<T: Float> AttentionStack<T> {
    pub fn new(layers: Vec<Tensor<T>>) -> Result<Self> {
        let Some(first) = layers.first() else {
            return Ok(Self { layers });
        };
        let shape = first.shape().to_vec();
        if shape.len() != 4 || shape[2] != shape[3] {
            return Err(Error::dim("attention stack", format!("layer shape {shape:?}")));
        }
        if layers.iter().any(|l| l.shape() != shape.as_slice()) {
            return Err(Error::dim("attention stack", "layers differ in shape"));
        }
        Ok(Self { layers })
    }

    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }

    pub fn layer(&self, l: usize) -> &Tensor<T> {
        &self.layers[l]
    }

    pub fn layers(&self) -> &[Tensor<T>] {
        &self.layers
    }

    fn dims(&self) -> (usize, usize, usize) {
        let s = self.layers[0].shape();
        (s[0], s[1], s[2])
    }

    pub fn batch(&self) -> usize {
        self.layers.first().map_or(0, |l| l.shape()[0])
    }

    pub fn heads(&self) -> usize {
        self.layers.first().map_or(0, |l| l.shape()[1])
    }

    pub fn tokens(&self) -> usize {
        self.layers.first().map_or(0, |l| l.shape()[2])
    }

    /// Head-averaged attention of layer `l`, `[B × (1+N) × (1+N)]`.
    pub fn head_average(&self, l: usize) -> Tensor<T> {
        let (b, h, t) = self.dims();
        let w = self.layers[l].data();
        let hf = T::lit(h as f64);
        let mut out = vec![T::zero(); b * t * t];
        for bi in 0..b {
            for hi in 0..h {
                let src = &w[(bi * h + hi) * t * t..(bi * h + hi + 1) * t * t];
                out[bi * t * t..(bi + 1) * t * t]
                    .iter_mut()
                    .zip(src)
                    .for_each(|(o, &v)| *o += v);
            }
        }
        out.iter_mut().for_each(|v| *v /= hf);
        Tensor::new(&[b, t, t], out).expect("shape from dims")
    }

    /// Head-averaged class-token row of layer `l` without its class→class
    /// entry, `[B × N]`.
    pub fn class_rows(&self, l: usize) -> Tensor<T> {
        let (b, _, t) = self.dims();
        let avg = self.head_average(l);
        let mut out = Vec::with_capacity(b * (t - 1));
        for bi in 0..b {
            out.extend_from_slice(&avg.data()[bi * t * t + 1..bi * t * t + t]);
        }
        Tensor::new(&[b, t - 1], out).expect("shape from dims")
    }
}

/// Splits one `[C × s × s]` image into `[N × p²C]` rows, patches in raster
/// order, each row the row-major flattening of its `[C × p × p]` block.
pub fn patchify<T: Float>(image: &Tensor<T>, cfg: &VitConfig) -> Result<Tensor<T>> {
    if image.shape() != cfg.image_shape() {
        return Err(Error::dim(
            "patchify",
            format!("image {:?}, config expects {:?}", image.shape(), cfg.image_shape()),
        ));
    }
    let mut out = Vec::with_capacity(image.numel());
    patchify_into(image.data(), cfg, &mut out);
    Tensor::new(&[cfg.num_patches(), cfg.patch_dim()], out)
}

fn patchify_into<T: Float>(img: &[T], cfg: &VitConfig, out: &mut Vec<T>) {
    let (s, p, g) = (cfg.image_size, cfg.patch_size, cfg.grid_side());
    for gy in 0..g {
        for gx in 0..g {
            for c in 0..cfg.channels {
                for y in 0..p {
                    let row = c * s * s + (gy * p + y) * s + gx * p;
                    out.extend_from_slice(&img[row..row + p]);
                }
            }
        }
    }
}

/// Batched [`patchify`]: `[B × C × s × s]` to `[B × N × p²C]`.
pub fn patchify_batch<T: Float>(images: &Tensor<T>, cfg: &VitConfig) -> Result<Tensor<T>> {
    let [c, s, _] = cfg.image_shape();
    let sh = images.shape();
    if sh.len() != 4 || sh[1..] != [c, s, s] {
        return Err(Error::dim(
            "patchify",
            format!("batch {sh:?}, config expects [B, {c}, {s}, {s}]"),
        ));
    }
    let per = c * s * s;
    let mut out = Vec::with_capacity(images.numel());
    for img in images.data().chunks(per) {
        patchify_into(img, cfg, &mut out);
    }
    Tensor::new(&[sh[0], cfg.num_patches(), cfg.patch_dim()], out)
}

#[derive(Debug, Clone)]
struct Block {
    norm1: LayerNorm,
    qkv: Linear,
    proj: Linear,
    norm2: LayerNorm,
    fc1: Linear,
    fc2: Linear,
}

/// Backbone parameters are registered into a caller-owned [`ParamStore`]; the
/// struct itself only holds indices, so one layout can drive several stores.
#[derive(Debug, Clone)]
pub struct Vit {
    cfg: VitConfig,
    patch_embed: Linear,
    cls_token: ParamRef,
    pos_embed: ParamRef,
    blocks: Vec<Block>,
    norm: LayerNorm,
}

impl Vit {
    pub fn new<T: Float>(cfg: &VitConfig, store: &mut ParamStore<T>, rng: &mut Rng) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.embed_dim;
        let patch_embed = Linear::new(store, "backbone.patch_embed", cfg.patch_dim(), d, rng);
        let cls = Tensor::from_fn(&[d], |_| T::lit(rng.trunc_normal(INIT_STD)));
        let cls_token = store.add("backbone.cls_token", cls);
        let pos = Tensor::from_fn(&[cfg.tokens(), d], |_| T::lit(rng.trunc_normal(INIT_STD)));
        let pos_embed = store.add("backbone.pos_embed", pos);
        let blocks = (0..cfg.layers)
            .map(|l| {
                let n = format!("backbone.blocks.{l}");
                Block {
                    norm1: LayerNorm::new(store, &format!("{n}.norm1"), d),
                    qkv: Linear::new(store, &format!("{n}.attn.qkv"), d, 3 * d, rng),
                    proj: Linear::new(store, &format!("{n}.attn.proj"), d, d, rng),
                    norm2: LayerNorm::new(store, &format!("{n}.norm2"), d),
                    fc1: Linear::new(store, &format!("{n}.mlp.fc1"), d, cfg.mlp_dim(), rng),
                    fc2: Linear::new(store, &format!("{n}.mlp.fc2"), cfg.mlp_dim(), d, rng),
                }
            })
            .collect();
        let norm = LayerNorm::new(store, "backbone.norm", d);
        Ok(Self {
            cfg: cfg.clone(),
            patch_embed,
            cls_token,
            pos_embed,
            blocks,
            norm,
        })
    }

    pub fn config(&self) -> &VitConfig {
        &self.cfg
    }

    /// Class-token embeddings `[B × D]` and the attention of every layer.
    pub fn forward_with_attention<'t, T: Float>(
        &self,
        b: &Binder<'t, '_, T>,
        views: &Tensor<T>,
    ) -> Result<(Var<'t, T>, AttentionStack<T>)> {
        let mut captured = Vec::with_capacity(self.blocks.len());
        let emb = self.run(b, views, Some(&mut captured))?;
        Ok((emb, AttentionStack::new(captured)?))
    }

    pub fn forward<'t, T: Float>(&self, b: &Binder<'t, '_, T>, views: &Tensor<T>) -> Result<Var<'t, T>> {
        self.run(b, views, None)
    }

    fn run<'t, T: Float>(
        &self,
        b: &Binder<'t, '_, T>,
        views: &Tensor<T>,
        mut capture: Option<&mut Vec<Tensor<T>>>,
    ) -> Result<Var<'t, T>> {
        let cfg = &self.cfg;
        let patches = patchify_batch(views, cfg)?;
        let bsz = patches.shape()[0];
        if bsz == 0 {
            return Err(Error::Contract("empty batch".into()));
        }
        let (n, d, t, h, dh) = (cfg.num_patches(), cfg.embed_dim, cfg.tokens(), cfg.heads, cfg.head_dim());
        let tape = b.tape();
        let x = self.patch_embed.forward(b, tape.constant(patches))?;
        let cls = b.param(self.cls_token).expand(&[bsz, 1, d])?;
        let mut x = Var::concat(&[cls, x], 1)?.add_broadcast(b.param(self.pos_embed))?;
        debug_assert_eq!(x.shape(), vec![bsz, n + 1, d]);
        let scale = T::lit(1.0 / (dh as f64).sqrt());
        for blk in &self.blocks {
            let y = blk.norm1.forward(b, x)?;
            let qkv = blk
                .qkv
                .forward(b, y)?
                .reshape(&[bsz, t, 3, h, dh])?
                .permute(&[2, 0, 3, 1, 4])?;
            let part = |i| qkv.narrow(0, i, 1)?.reshape(&[bsz * h, t, dh]);
            let (q, k, v) = (part(0)?, part(1)?, part(2)?);
            let attn = q.scale(scale).bmm(k, true)?.softmax()?;
            if let Some(cap) = capture.as_deref_mut() {
                cap.push(attn.detach().reshape(&[bsz, h, t, t])?);
            }
            let ctx = attn
                .bmm(v, false)?
                .reshape(&[bsz, h, t, dh])?
                .permute(&[0, 2, 1, 3])?
                .reshape(&[bsz, t, d])?;
            x = x.add(blk.proj.forward(b, ctx)?)?;
            let y = blk.norm2.forward(b, x)?;
            let y = blk.fc2.forward(b, blk.fc1.forward(b, y)?.gelu())?;
            x = x.add(y)?;
        }
        let x = self.norm.forward(b, x)?;
        x.narrow(1, 0, 1)?.reshape(&[bsz, d])
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Tape;

    #[test]
    fn patchify_raster_order() {
        let cfg = VitConfig {
            image_size: 4,
            patch_size: 2,
            channels: 1,
            embed_dim: 4,
            layers: 1,
            heads: 1,
            mlp_ratio: 1.0,
        };
        let img = Tensor::<f32>::from_fn(&[1, 4, 4], |i| i as f32);
        let p = patchify(&img, &cfg).unwrap();
        assert_eq!(p.shape(), &[4, 4]);
        assert_eq!(&p.data()[..4], &[0., 1., 4., 5.]);
        assert_eq!(&p.data()[4..8], &[2., 3., 6., 7.]);
        assert_eq!(&p.data()[12..], &[10., 11., 14., 15.]);
    }

    #[test]
    fn patchify_counts_and_constant_rows() {
        let cfg = VitConfig::default();
        let img = Tensor::<f32>::full(&cfg.image_shape(), 0.25);
        let p = patchify(&img, &cfg).unwrap();
        assert_eq!(p.shape(), &[16, 192]);
        assert!(p.data().iter().all(|&v| v == 0.25));
        let wrong = Tensor::<f32>::zeros(&[3, 16, 16]);
        assert!(matches!(patchify(&wrong, &cfg), Err(Error::Dimension { .. })));
    }

    #[test]
    fn config_rejects_bad_geometry() {
        let cfg = VitConfig {
            image_size: 30,
            ..VitConfig::default()
        };
        assert!(cfg.validate().is_err());
        let cfg = VitConfig {
            heads: 3,
            ..VitConfig::default()
        };
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn attention_rows_are_distributions() {
        let cfg = VitConfig {
            image_size: 16,
            ..VitConfig::default()
        };
        let mut store = ParamStore::<f32>::new();
        let vit = Vit::new(&cfg, &mut store, &mut Rng::seed(0)).unwrap();
        let mut rng = Rng::seed(1);
        let views = Tensor::from_fn(&[3, 3, 16, 16], |_| rng.normal() as f32);
        let tape = Tape::new();
        let (emb, attn) = vit.forward_with_attention(&Binder::frozen(&tape, &store), &views).unwrap();
        assert_eq!(emb.shape(), vec![3, 64]);
        assert_eq!(attn.num_layers(), 4);
        for l in attn.layers() {
            assert_eq!(l.shape(), &[3, 4, 5, 5]);
            for row in l.data().chunks(5) {
                let s: f32 = row.iter().sum();
                assert!((s - 1.0).abs() <= 1e-5);
                assert!(row.iter().all(|&v| v >= 0.0));
            }
        }
    }
}
