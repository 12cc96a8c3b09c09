//! Slimmable VQA-style models.
//!
//! Two variants share the same slimmable blocks. The encoder-decoder
//! variant runs question tokens through self-attention encoder layers and
//! regions through decoder layers that also attend to the final question
//! encoding, then pools both streams with attentional reduction and fuses
//! them. The unified variant runs `[CLS] ⊕ question ⊕ regions` through one
//! encoder stack and classifies the `[CLS]` row.
//!
//! Embedders, the fusion norm and the classifier always run at full width;
//! `W_emb` bridges the embedding width to the active backbone width.

mod config;
mod model;
mod params;

pub use config::{ModelConfig, Variant};
pub use model::{AttentionKind, AttentionMap, AttentionSite, Batch, EmbInit, ForwardOutput, ForwardVars, Layout, SlimModel};
pub use params::{ParamEntry, ParamStore};
