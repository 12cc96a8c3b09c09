//! The architecture space: candidate widths and depths, their combination
//! grid, triangle selection of deep-and-narrow submodels, and depth scoring.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{DstError, Result};
use crate::numerics::Rng;

const RATIO_TOL: f64 = 1e-6;

/// Layer-importance scoring used for depth slimming.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DepthStrategy {
    SlimRandom,
    SlimFirst,
    SlimLast,
    #[default]
    SlimMiddle,
}

impl DepthStrategy {
    pub const ALL: [DepthStrategy; 4] = [
        DepthStrategy::SlimMiddle,
        DepthStrategy::SlimFirst,
        DepthStrategy::SlimLast,
        DepthStrategy::SlimRandom,
    ];

    pub fn name(self) -> &'static str {
        match self {
            DepthStrategy::SlimRandom => "slim-random",
            DepthStrategy::SlimFirst => "slim-first",
            DepthStrategy::SlimLast => "slim-last",
            DepthStrategy::SlimMiddle => "slim-middle",
        }
    }
}

impl fmt::Display for DepthStrategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for DepthStrategy {
    type Err = DstError;

    fn from_str(s: &str) -> Result<Self> {
        DepthStrategy::ALL
            .into_iter()
            .find(|d| d.name() == s)
            .ok_or_else(|| DstError::Config(format!("unknown depth strategy '{s}'")))
    }
}

/// Which combinations of the grid are trained and served.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Selection {
    /// Keep width rank ≤ depth rank.
    #[default]
    Triangle,
    /// Keep every combination.
    Full,
}

fn resolve(reference: usize, ratio: f64, what: &str) -> Result<usize> {
    let exact = reference as f64 * ratio;
    let rounded = exact.round();
    if ratio <= 0.0 || ratio > 1.0 + RATIO_TOL || (exact - rounded).abs() > RATIO_TOL * reference as f64 || rounded < 1.0 {
        return Err(DstError::Config(format!(
            "{what} ratio {ratio} of {reference} is not a positive integer"
        )));
    }
    Ok(rounded as usize)
}

fn check_ascending(values: &[usize], what: &str) -> Result<()> {
    if values.is_empty() {
        return Err(DstError::Config(format!("empty {what} grid")));
    }
    if values.windows(2).any(|w| w[0] >= w[1]) {
        return Err(DstError::Config(format!("{what} grid {values:?} must be strictly ascending")));
    }
    Ok(())
}

/// Candidate widths as fractions of the reference width `D`.
#[derive(Clone, Debug, PartialEq)]
pub struct WidthGrid {
    pub reference: usize,
    pub ratios: Vec<f64>,
    pub values: Vec<usize>,
}

impl WidthGrid {
    /// Every width must be integral and give an integral head count `H·d/D`.
    pub fn new(reference: usize, heads: usize, ratios: &[f64]) -> Result<Self> {
        let values = ratios
            .iter()
            .map(|&r| resolve(reference, r, "width"))
            .collect::<Result<Vec<_>>>()?;
        check_ascending(&values, "width")?;
        for &d in &values {
            if !(heads * d).is_multiple_of(reference) {
                return Err(DstError::Config(format!(
                    "width {d} of {reference} leaves a fractional head count for {heads} heads"
                )));
            }
        }
        Ok(Self {
            reference,
            ratios: ratios.to_vec(),
            values,
        })
    }

    pub fn rank_of(&self, d: usize) -> Option<usize> {
        self.values.iter().position(|&v| v == d)
    }
}

/// Candidate depths as fractions of the reference depth `L`.
#[derive(Clone, Debug, PartialEq)]
pub struct DepthGrid {
    pub reference: usize,
    pub ratios: Vec<f64>,
    pub values: Vec<usize>,
}

impl DepthGrid {
    pub fn new(reference: usize, ratios: &[f64]) -> Result<Self> {
        let values = ratios
            .iter()
            .map(|&r| resolve(reference, r, "depth"))
            .collect::<Result<Vec<_>>>()?;
        check_ascending(&values, "depth")?;
        Ok(Self {
            reference,
            ratios: ratios.to_vec(),
            values,
        })
    }

    pub fn rank_of(&self, l: usize) -> Option<usize> {
        self.values.iter().position(|&v| v == l)
    }
}

/// The full combination set: every width paired with every depth.
#[derive(Clone, Debug, PartialEq)]
pub struct ArchGrid {
    pub widths: Vec<usize>,
    pub depths: Vec<usize>,
}

impl ArchGrid {
    /// `(width, depth)` pairs, width-major.
    pub fn pairs(&self) -> Vec<(usize, usize)> {
        self.widths
            .iter()
            .flat_map(|&d| self.depths.iter().map(move |&l| (d, l)))
            .collect()
    }

    pub fn len(&self) -> usize {
        self.widths.len() * self.depths.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

pub fn build_grid(widths: &WidthGrid, depths: &DepthGrid) -> ArchGrid {
    ArchGrid {
        widths: widths.values.clone(),
        depths: depths.values.clone(),
    }
}

/// Selection status; rows are widths ascending, columns depths ascending.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct IndicatorMatrix {
    rows: usize,
    cols: usize,
    bits: Vec<bool>,
}

impl IndicatorMatrix {
    pub fn ones(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            bits: vec![true; rows * cols],
        }
    }

    pub fn get(&self, width_rank: usize, depth_rank: usize) -> bool {
        self.bits[width_rank * self.cols + depth_rank]
    }

    pub fn set(&mut self, width_rank: usize, depth_rank: usize, v: bool) {
        self.bits[width_rank * self.cols + depth_rank] = v;
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn count(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }
}

/// Zero out the shallow-and-wide combinations: keep `(i, j)` iff `j ≥ i`.
pub fn triangle_select(grid: &ArchGrid) -> (IndicatorMatrix, Vec<(usize, usize)>) {
    let mut ind = IndicatorMatrix::ones(grid.widths.len(), grid.depths.len());
    let mut kept = Vec::new();
    for (i, &d) in grid.widths.iter().enumerate() {
        for (j, &l) in grid.depths.iter().enumerate() {
            if j >= i {
                kept.push((d, l));
            } else {
                ind.set(i, j, false);
            }
        }
    }
    (ind, kept)
}

/// Importance score per layer (index 0 holds layer 1).
///
/// `slim-random` draws one Fisher-Yates permutation of `1..=L` from `rng`;
/// the other strategies consume nothing.
pub fn depth_scores(strategy: DepthStrategy, layers: usize, rng: &mut Rng) -> Result<Vec<f64>> {
    if layers == 0 {
        return Err(DstError::Config("depth must be at least 1".into()));
    }
    let centre = (layers as f64 + 1.0) / 2.0;
    let scores = match strategy {
        DepthStrategy::SlimFirst => (1..=layers).map(|i| i as f64).collect(),
        DepthStrategy::SlimLast => (1..=layers).map(|i| (layers + 1 - i) as f64).collect(),
        DepthStrategy::SlimMiddle => (1..=layers).map(|i| (i as f64 - centre).abs()).collect(),
        DepthStrategy::SlimRandom => {
            let mut perm: Vec<f64> = (1..=layers).map(|i| i as f64).collect();
            rng.shuffle(&mut perm);
            perm
        }
    };
    Ok(scores)
}

/// The `l` highest-scoring layers (1-based), ascending. Equal scores
/// prefer the lower layer index.
pub fn select_layers(scores: &[f64], l: usize) -> Result<Vec<usize>> {
    if l == 0 || l > scores.len() {
        return Err(DstError::InvalidArch(format!(
            "depth {l} outside [1, {}]",
            scores.len()
        )));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    let mut kept: Vec<usize> = order[..l].iter().map(|i| i + 1).collect();
    kept.sort_unstable();
    Ok(kept)
}

/// One submodel architecture `a(d, l)` with its resolved layers.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ArchDescriptor {
    pub width: usize,
    pub depth: usize,
    /// 1-based indices into the reference stack, ascending.
    pub kept_layers: Vec<usize>,
}

impl fmt::Display for ArchDescriptor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "a({}, {})", self.width, self.depth)
    }
}

/// Widths, depths, layer scores and the selected architecture set.
#[derive(Clone, Debug)]
pub struct ArchSpace {
    pub widths: WidthGrid,
    pub depths: DepthGrid,
    pub scores: Vec<f64>,
    pub indicator: IndicatorMatrix,
    selected: Vec<ArchDescriptor>,
}

impl ArchSpace {
    pub fn new(widths: WidthGrid, depths: DepthGrid, scores: Vec<f64>, selection: Selection) -> Result<Self> {
        if scores.len() != depths.reference {
            return Err(DstError::Config(format!(
                "{} layer scores for a {}-layer reference",
                scores.len(),
                depths.reference
            )));
        }
        let grid = build_grid(&widths, &depths);
        let (indicator, pairs) = match selection {
            Selection::Triangle => triangle_select(&grid),
            Selection::Full => (IndicatorMatrix::ones(grid.widths.len(), grid.depths.len()), grid.pairs()),
        };
        let selected = pairs
            .into_iter()
            .map(|(d, l)| {
                Ok(ArchDescriptor {
                    width: d,
                    depth: l,
                    kept_layers: select_layers(&scores, l)?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            widths,
            depths,
            scores,
            indicator,
            selected,
        })
    }

    /// Selected architectures, width-major.
    pub fn selected(&self) -> &[ArchDescriptor] {
        &self.selected
    }

    /// `a_s`: minimum width and minimum depth.
    pub fn smallest(&self) -> &ArchDescriptor {
        self.selected
            .iter()
            .min_by_key(|a| (a.width, a.depth))
            .expect("selection is never empty")
    }

    /// `a_l`: maximum width and maximum depth.
    pub fn largest(&self) -> &ArchDescriptor {
        self.selected
            .iter()
            .max_by_key(|a| (a.width, a.depth))
            .expect("selection is never empty")
    }

    pub fn contains(&self, arch: &ArchDescriptor) -> bool {
        self.selected.contains(arch)
    }

    /// Selected architecture with width `d` and depth `l`.
    pub fn get(&self, d: usize, l: usize) -> Result<&ArchDescriptor> {
        self.selected
            .iter()
            .find(|a| a.width == d && a.depth == l)
            .ok_or_else(|| DstError::InvalidArch(format!("a({d}, {l}) is not in the selected set")))
    }

    /// Selected architecture closest to the requested ratios (within 1e-3).
    pub fn by_ratio(&self, width_ratio: f64, depth_ratio: f64) -> Result<&ArchDescriptor> {
        let pick = |ratios: &[f64], values: &[usize], want: f64, what: &str| {
            ratios
                .iter()
                .position(|r| (r - want).abs() < 1e-3)
                .map(|i| values[i])
                .ok_or_else(|| DstError::InvalidArch(format!("{what} ratio {want} is not a grid ratio {ratios:?}")))
        };
        let d = pick(&self.widths.ratios, &self.widths.values, width_ratio, "width")?;
        let l = pick(&self.depths.ratios, &self.depths.values, depth_ratio, "depth")?;
        self.get(d, l)
    }

    /// `(width ratio, depth ratio)` of a grid architecture.
    pub fn ratios_of(&self, arch: &ArchDescriptor) -> Option<(f64, f64)> {
        let i = self.widths.rank_of(arch.width)?;
        let j = self.depths.rank_of(arch.depth)?;
        Some((self.widths.ratios[i], self.depths.ratios[j]))
    }
}

pub const DEFAULT_WIDTH_RATIOS: [f64; 4] = [0.25, 0.5, 0.75, 1.0];
pub const DEFAULT_DEPTH_RATIOS: [f64; 4] = [1.0 / 6.0, 1.0 / 3.0, 2.0 / 3.0, 1.0];
