use serde::{Deserialize, Serialize};

use crate::backbone::{AttentionMap, Batch, ModelConfig, SlimModel};
use crate::cost_model::{analyze, kept_layers_label};
use crate::error::{DstError, Result};
use crate::exec::{map_chunks, Execution};
use crate::numerics::Tensor;
use crate::slim_layers::slice_width;
use crate::slim_space::{ArchDescriptor, Selection};
use crate::synthdata::Sample;

/// Samples per evaluation batch.
pub const EVAL_CHUNK: usize = 64;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EvalResult {
    pub correct: usize,
    pub total: usize,
}

impl EvalResult {
    pub fn accuracy(&self) -> f64 {
        if self.total == 0 {
            0.0
        } else {
            self.correct as f64 / self.total as f64
        }
    }
}

/// Row-wise argmax; ties go to the lower index.
pub fn argmax_rows(logits: &Tensor) -> Vec<usize> {
    (0..logits.rows())
        .map(|i| {
            let row = logits.row(i);
            (1..row.len()).fold(0, |best, j| if row[j] > row[best] { j } else { best })
        })
        .collect()
}

pub fn evaluate(model: &SlimModel, arch: &ArchDescriptor, data: &[Sample], exec: Execution) -> Result<EvalResult> {
    if !model.space().contains(arch) {
        return Err(DstError::InvalidArch(format!("{arch} is not in the selected set")));
    }
    let counts = map_chunks(exec, data, EVAL_CHUNK, |_, chunk| -> Result<usize> {
        let batch = Batch::from_samples(&chunk.iter().collect::<Vec<_>>())?;
        let pred = argmax_rows(&model.logits(&batch, arch)?);
        Ok(pred.iter().zip(&batch.labels).filter(|(p, y)| p == y).count())
    });
    let mut correct = 0;
    for c in counts {
        correct += c?;
    }
    Ok(EvalResult {
        correct,
        total: data.len(),
    })
}

/// Master layer name for layer `j` (1-based) of an export keeping `kept`.
fn master_name(name: &str, kept: &[usize]) -> String {
    for stack in ["encoder.", "decoder."] {
        if let Some(rest) = name.strip_prefix(stack) {
            if let Some((idx, tail)) = rest.split_once('.') {
                if let Ok(j) = idx.parse::<usize>() {
                    return format!("{stack}{}.{tail}", kept[j - 1]);
                }
            }
        }
    }
    name.to_string()
}

/// Configuration of the standalone model equivalent to `arch`.
pub fn export_config(model: &SlimModel, arch: &ArchDescriptor) -> Result<ModelConfig> {
    let spec = model.spec(arch.width)?;
    let cfg = &model.config;
    Ok(ModelConfig {
        d_model: spec.model,
        heads: spec.heads,
        layers: arch.depth,
        head_dim: Some(spec.head_dim),
        ffn_dim: Some(spec.ffn),
        embed_dim: Some(cfg.embed_dim()),
        width_ratios: vec![1.0],
        depth_ratios: vec![1.0],
        selection: Selection::Triangle,
        ..cfg.clone()
    })
}

/// A self-contained model holding exactly the tensors `arch` touches; its
/// only architecture is the full one.
pub fn export_submodel(model: &SlimModel, arch: &ArchDescriptor) -> Result<SlimModel> {
    if !model.space().contains(arch) {
        return Err(DstError::InvalidArch(format!("{arch} is not in the selected set")));
    }
    let spec = model.spec(arch.width)?;
    let mut out = SlimModel::new(export_config(model, arch)?, 0)?;
    for id in 0..out.params.len() {
        let name = master_name(&out.params.entry(id).name, &arch.kept_layers);
        let src_id = model
            .params
            .id(&name)
            .ok_or_else(|| DstError::Checkpoint(format!("no master tensor '{name}'")))?;
        let src = model.params.entry(src_id);
        let block = src.tensor.leading_block(&slice_width(&src.axes, src.tensor.shape(), &spec))?;
        let dst = out.params.tensor_mut(id);
        if block.shape() != dst.shape() {
            return Err(DstError::Checkpoint(format!(
                "'{name}' slices to {:?}, export expects {:?}",
                block.shape(),
                dst.shape()
            )));
        }
        dst.data_mut().copy_from_slice(block.data());
    }
    Ok(out)
}

/// Attention maps of every kept layer and active head for one sample.
pub fn capture_attention(model: &SlimModel, arch: &ArchDescriptor, sample: &Sample) -> Result<Vec<AttentionMap>> {
    let batch = Batch::from_samples(&[sample])?;
    Ok(model.predict(&batch, arch, true)?.attention.unwrap_or_default())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub d_ratio: f64,
    pub l_ratio: f64,
    pub width: usize,
    pub depth: usize,
    pub kept_layers: String,
    pub accuracy: f64,
    pub correct: usize,
    pub total: usize,
    pub total_params: u64,
    pub backbone_params: u64,
    pub flops: u64,
    pub split: String,
    pub seed: u64,
}

/// Accuracy and cost of every selected architecture, ascending by FLOPs.
pub fn run_sweep(model: &SlimModel, data: &[Sample], split: &str, seed: u64, exec: Execution) -> Result<Vec<MetricsRow>> {
    let space = model.space();
    let mut rows = Vec::with_capacity(space.selected().len());
    for arch in space.selected() {
        let eval = evaluate(model, arch, data, exec)?;
        let cost = analyze(&model.config, arch)?;
        let (d_ratio, l_ratio) = space.ratios_of(arch).expect("selected archs lie on the grid");
        rows.push(MetricsRow {
            d_ratio,
            l_ratio,
            width: arch.width,
            depth: arch.depth,
            kept_layers: kept_layers_label(&arch.kept_layers),
            accuracy: eval.accuracy(),
            correct: eval.correct,
            total: eval.total,
            total_params: cost.total_params,
            backbone_params: cost.backbone_params,
            flops: cost.flops,
            split: split.into(),
            seed,
        });
    }
    rows.sort_by_key(|r| (r.flops, r.width, r.depth));
    Ok(rows)
}
