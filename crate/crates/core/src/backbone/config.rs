use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{DstError, Result};
use crate::numerics::Rng;
use crate::slim_layers::{LayerDims, WidthMode};
use crate::slim_space::{
    depth_scores, ArchSpace, DepthGrid, DepthStrategy, Selection, WidthGrid, DEFAULT_DEPTH_RATIOS,
    DEFAULT_WIDTH_RATIOS,
};
use crate::synthdata;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Variant {
    #[default]
    EncoderDecoder,
    UnifiedEncoder,
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Variant::EncoderDecoder => "encoder-decoder",
            Variant::UnifiedEncoder => "unified-encoder",
        })
    }
}

impl FromStr for Variant {
    type Err = DstError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "encoder-decoder" => Ok(Variant::EncoderDecoder),
            "unified-encoder" => Ok(Variant::UnifiedEncoder),
            _ => Err(DstError::Config(format!("unknown variant '{s}'"))),
        }
    }
}

/// Reference dimensions, grids and slimming strategies of a model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub variant: Variant,
    /// Reference width `D`.
    pub d_model: usize,
    /// Reference head count `H`.
    pub heads: usize,
    /// Reference depth `L`.
    pub layers: usize,
    /// Per-head width `D_H`; `D / H` when absent.
    pub head_dim: Option<usize>,
    /// FFN hidden width; `4D` when absent.
    pub ffn_dim: Option<usize>,
    /// Width of the unslimmed embedders and classifier; `D` when absent.
    pub embed_dim: Option<usize>,
    pub vocab_size: usize,
    pub region_feat_dim: usize,
    pub num_answers: usize,
    /// Question length `m` used for cost accounting.
    pub question_len: usize,
    /// Region count `n` used for cost accounting.
    pub num_regions: usize,
    pub width_ratios: Vec<f64>,
    pub depth_ratios: Vec<f64>,
    pub depth_strategy: DepthStrategy,
    /// Seed of the permutation drawn by `slim-random`.
    pub depth_seed: u64,
    pub width_mode: WidthMode,
    pub selection: Selection,
    pub ln_eps: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self::toy()
    }
}

impl ModelConfig {
    /// Desk-scale encoder-decoder model for the synthetic task.
    pub fn toy() -> Self {
        Self {
            variant: Variant::EncoderDecoder,
            d_model: 64,
            heads: 4,
            layers: 6,
            head_dim: None,
            ffn_dim: None,
            embed_dim: None,
            vocab_size: synthdata::VOCAB_SIZE,
            region_feat_dim: synthdata::REGION_FEAT_DIM,
            num_answers: synthdata::NUM_ANSWERS,
            question_len: synthdata::QUESTION_LEN,
            num_regions: synthdata::NUM_REGIONS,
            width_ratios: DEFAULT_WIDTH_RATIOS.to_vec(),
            depth_ratios: DEFAULT_DEPTH_RATIOS.to_vec(),
            depth_strategy: DepthStrategy::SlimMiddle,
            depth_seed: 0,
            width_mode: WidthMode::SlimAll,
            selection: Selection::Triangle,
            ln_eps: 1e-6,
        }
    }

    /// Encoder-decoder at reference scale (D=512, H=8, L=6), 14 question
    /// tokens and 100 regions.
    pub fn encoder_decoder_reference() -> Self {
        Self {
            d_model: 512,
            heads: 8,
            layers: 6,
            question_len: 14,
            num_regions: 100,
            region_feat_dim: 2048,
            ..Self::toy()
        }
    }

    /// Unified encoder at reference scale (D=768, H=12, L=12).
    pub fn unified_reference() -> Self {
        Self {
            variant: Variant::UnifiedEncoder,
            d_model: 768,
            heads: 12,
            layers: 12,
            depth_ratios: vec![1.0 / 6.0, 1.0 / 3.0, 2.0 / 3.0, 1.0],
            question_len: 14,
            num_regions: 100,
            region_feat_dim: 2048,
            ..Self::toy()
        }
    }

    pub fn head_dim(&self) -> usize {
        self.head_dim.unwrap_or(self.d_model / self.heads.max(1))
    }

    pub fn ffn_dim(&self) -> usize {
        self.ffn_dim.unwrap_or(4 * self.d_model)
    }

    pub fn embed_dim(&self) -> usize {
        self.embed_dim.unwrap_or(self.d_model)
    }

    pub fn width_grid(&self) -> Result<WidthGrid> {
        WidthGrid::new(self.d_model, self.heads, &self.width_ratios)
    }

    pub fn depth_grid(&self) -> Result<DepthGrid> {
        DepthGrid::new(self.layers, &self.depth_ratios)
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("d_model", self.d_model),
            ("heads", self.heads),
            ("layers", self.layers),
            ("head_dim", self.head_dim()),
            ("ffn_dim", self.ffn_dim()),
            ("embed_dim", self.embed_dim()),
            ("vocab_size", self.vocab_size),
            ("region_feat_dim", self.region_feat_dim),
            ("num_answers", self.num_answers),
            ("question_len", self.question_len),
            ("num_regions", self.num_regions),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(DstError::Config(format!("{name} must be positive")));
        }
        if self.head_dim.is_none() && !self.d_model.is_multiple_of(self.heads) {
            return Err(DstError::Config(format!(
                "d_model {} is not divisible by {} heads",
                self.d_model, self.heads
            )));
        }
        if !(self.ln_eps > 0.0) {
            return Err(DstError::Config("ln_eps must be positive".into()));
        }
        let widths = self.width_grid()?;
        for &d in &widths.values {
            if !(self.ffn_dim() * d).is_multiple_of(self.d_model) {
                return Err(DstError::Config(format!("width {d} leaves a fractional FFN width")));
            }
        }
        self.depth_grid()?;
        Ok(())
    }

    pub fn layer_dims(&self) -> Result<LayerDims> {
        Ok(LayerDims {
            d_model: self.d_model,
            heads: self.heads,
            head_dim: self.head_dim(),
            ffn: self.ffn_dim(),
            widths: self.width_grid()?.values,
            ln_eps: self.ln_eps,
        })
    }

    pub fn arch_space(&self) -> Result<ArchSpace> {
        self.validate()?;
        let mut rng = Rng::new(self.depth_seed);
        let scores = depth_scores(self.depth_strategy, self.layers, &mut rng)?;
        ArchSpace::new(self.width_grid()?, self.depth_grid()?, scores, self.selection)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_are_valid() {
        for cfg in [ModelConfig::toy(), ModelConfig::encoder_decoder_reference(), ModelConfig::unified_reference()] {
            cfg.validate().unwrap();
            assert_eq!(cfg.arch_space().unwrap().selected().len(), 10);
        }
    }

    #[test]
    fn rejects_fractional_heads() {
        let cfg = ModelConfig {
            heads: 3,
            d_model: 48,
            ..ModelConfig::toy()
        };
        assert!(cfg.validate().is_err());
        let cfg = ModelConfig {
            depth_ratios: vec![0.25, 1.0],
            ..ModelConfig::toy()
        };
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn json_round_trip_and_defaults() {
        let cfg = ModelConfig::toy();
        let back = ModelConfig::from_json(&serde_json::to_string(&cfg).unwrap()).unwrap();
        assert_eq!(cfg, back);
        let partial = ModelConfig::from_json(r#"{"d_model": 32, "heads": 4, "depth_strategy": "slim-first"}"#).unwrap();
        assert_eq!(partial.d_model, 32);
        assert_eq!(partial.depth_strategy, DepthStrategy::SlimFirst);
        assert_eq!(partial.layers, 6);
        assert!(ModelConfig::from_json(r#"{"bogus": 1}"#).is_err());
    }
}
