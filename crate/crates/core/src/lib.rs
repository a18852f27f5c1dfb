//! Global-local self-supervised contrastive learning on a small Vision
//! Transformer.
//!
//! A query encoder and a momentum key encoder are trained with a symmetric
//! InfoNCE loss on two augmented views (the global branch). The key encoder's
//! class-token attention, fused across layers, picks the most important
//! patches of each view; the rest are zeroed and the key encoder embeds the
//! masked views for a second, local contrastive loss.

pub mod checkpoint;
pub mod data;
pub mod error;
pub mod eval;
pub mod heads;
pub mod layers;
pub mod losses;
pub mod masking;
pub mod numerics;
pub mod pipeline;
pub mod vit;

pub use error::{Error, Result};
