//! Synthetic two-modality QA task.
//!
//! Each sample shows six regions, each with a colour and a shape, and asks
//! either "what colour is the `s`-shaped region?" or "what shape is the
//! `c`-coloured region?". The queried value occurs in exactly one region,
//! so the answer can only be read off by attending from the question into
//! the regions.

use serde::{Deserialize, Serialize};

use crate::numerics::Rng;

pub const NUM_COLORS: usize = 4;
pub const NUM_SHAPES: usize = 4;
pub const NUM_REGIONS: usize = 6;
pub const QUESTION_LEN: usize = 8;
pub const NOISE_DIMS: usize = 8;
pub const REGION_FEAT_DIM: usize = NUM_COLORS + NUM_SHAPES + NOISE_DIMS;
pub const NUM_ANSWERS: usize = NUM_COLORS + NUM_SHAPES;
pub const VOCAB_SIZE: usize = 32;
pub const NOISE_AMPLITUDE: f64 = 0.1;

pub const PAD: usize = 0;
/// "What colour is the region with shape …?"
pub const ASK_COLOR: usize = 1;
/// "What shape is the region with colour …?"
pub const ASK_SHAPE: usize = 2;
pub const COLOR_TOKEN0: usize = 3;
pub const SHAPE_TOKEN0: usize = COLOR_TOKEN0 + NUM_COLORS;

const VAL_OFFSET: u64 = 1 << 40;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Split {
    Train,
    Val,
}

impl Split {
    pub fn first_index(self) -> u64 {
        match self {
            Split::Train => 0,
            Split::Val => VAL_OFFSET,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RegionAttrs {
    pub color: usize,
    pub shape: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub index: u64,
    /// `NUM_REGIONS × REGION_FEAT_DIM`, row-major.
    pub regions: Vec<f64>,
    pub question: Vec<usize>,
    pub answer: usize,
    pub latent: Vec<RegionAttrs>,
}

impl Sample {
    pub fn region(&self, r: usize) -> &[f64] {
        &self.regions[r * REGION_FEAT_DIM..(r + 1) * REGION_FEAT_DIM]
    }
}

/// Draws from `0..n` excluding `skip`.
fn below_except(rng: &mut Rng, n: usize, skip: usize) -> usize {
    let v = rng.below(n - 1);
    if v >= skip {
        v + 1
    } else {
        v
    }
}

pub fn generate_sample(seed: u64, index: u64) -> Sample {
    let mut rng = Rng::with_stream(seed, index);
    let ask_color = rng.below(2) == 0;
    let value = rng.below(if ask_color { NUM_SHAPES } else { NUM_COLORS });
    let target = rng.below(NUM_REGIONS);

    let mut latent = Vec::with_capacity(NUM_REGIONS);
    for r in 0..NUM_REGIONS {
        let (color, shape) = if ask_color {
            let shape = if r == target { value } else { below_except(&mut rng, NUM_SHAPES, value) };
            (rng.below(NUM_COLORS), shape)
        } else {
            let color = if r == target { value } else { below_except(&mut rng, NUM_COLORS, value) };
            (color, rng.below(NUM_SHAPES))
        };
        latent.push(RegionAttrs { color, shape });
    }

    let mut regions = vec![0.0; NUM_REGIONS * REGION_FEAT_DIM];
    for (r, a) in latent.iter().enumerate() {
        let row = &mut regions[r * REGION_FEAT_DIM..(r + 1) * REGION_FEAT_DIM];
        row[a.color] = 1.0;
        row[NUM_COLORS + a.shape] = 1.0;
        for v in &mut row[NUM_COLORS + NUM_SHAPES..] {
            *v = rng.uniform(-NOISE_AMPLITUDE, NOISE_AMPLITUDE);
        }
    }

    let mut question = vec![PAD; QUESTION_LEN];
    let answer;
    if ask_color {
        question[0] = ASK_COLOR;
        question[1] = SHAPE_TOKEN0 + value;
        answer = latent[target].color;
    } else {
        question[0] = ASK_SHAPE;
        question[1] = COLOR_TOKEN0 + value;
        answer = NUM_COLORS + latent[target].shape;
    }
    Sample {
        index,
        regions,
        question,
        answer,
        latent,
    }
}

pub fn generate_dataset(seed: u64, size: usize, split: Split) -> Vec<Sample> {
    let first = split.first_index();
    (0..size as u64).map(|i| generate_sample(seed, first + i)).collect()
}

/// The answer implied by a sample's question and latent attributes, or
/// `None` if the queried value is not unique.
pub fn derive_answer(question: &[usize], latent: &[RegionAttrs]) -> Option<usize> {
    let (kind, tok) = (question[0], question[1]);
    let hits: Vec<&RegionAttrs> = match kind {
        ASK_COLOR => latent.iter().filter(|a| SHAPE_TOKEN0 + a.shape == tok).collect(),
        ASK_SHAPE => latent.iter().filter(|a| COLOR_TOKEN0 + a.color == tok).collect(),
        _ => return None,
    };
    match hits.as_slice() {
        [a] if kind == ASK_COLOR => Some(a.color),
        [a] => Some(NUM_COLORS + a.shape),
        _ => None,
    }
}
