//! Saliency from hidden attention.
//!
//! A patch's relevance is the mean magnitude of its entry in the class
//! token's row, averaged over every layer, both scan directions and every
//! channel. Relevances are standardized and patches with `|z| ≥ 1.96` are
//! marked significant. The same aggregation over the final encoder's five
//! branch tokens ranks the feature groups.

use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};
use crate::model::{InterfacePairSample, PumbaModel, GROUP_NAMES};
use crate::ssm::HiddenAttentionStack;
use crate::tensor::{Element, Tensor};
use crate::vim::PatchGrid;

/// Two-sided 5% cutoff of the standard normal.
pub const Z_CUTOFF: f64 = 1.96;

/// Relevance of every non-class token for the class token at `class_index`,
/// in sequence order with the class position removed.
pub fn token_relevance<T: Element>(stack: &HiddenAttentionStack<T>, class_index: usize) -> Result<Vec<f64>> {
    let t = stack.token_count;
    if class_index >= t {
        return Err(Error::Contract(format!(
            "class index {class_index} outside a sequence of {t} tokens"
        )));
    }
    let (layers, channels) = (stack.layers(), stack.channels());
    let mut sums = vec![0.0f64; t];
    let data = stack.matrices.data();
    for block in 0..layers * 2 * channels {
        let row = &data[(block * t + class_index) * t..(block * t + class_index + 1) * t];
        for (s, v) in sums.iter_mut().zip(row) {
            *s += v.as_f64().abs();
        }
    }
    let n = (layers * 2 * channels) as f64;
    Ok(sums
        .into_iter()
        .enumerate()
        .filter(|&(j, _)| j != class_index)
        .map(|(_, s)| s / n)
        .collect())
}

/// Standardized values and their significance mask.
#[derive(Clone, Debug, PartialEq)]
pub struct ZScores {
    pub z: Vec<f64>,
    pub mask: Vec<bool>,
}

/// `z = (v − mean) / std` with the population standard deviation and
/// `mask = |z| ≥ cutoff`. Constant input gives zero scores and an empty mask.
pub fn zscore_threshold(values: &[f64], cutoff: f64) -> Result<ZScores> {
    if values.is_empty() {
        return Err(Error::Contract("z-scores of an empty set".into()));
    }
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::Contract("z-scores need finite values".into()));
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    let scale = values.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let std = var.sqrt();
    if std <= 1e-12 * scale.max(f64::MIN_POSITIVE) || std == 0.0 {
        return Ok(ZScores {
            z: vec![0.0; values.len()],
            mask: vec![false; values.len()],
        });
    }
    let z: Vec<f64> = values.iter().map(|v| (v - mean) / std).collect();
    let mask = z.iter().map(|v| v.abs() >= cutoff).collect();
    Ok(ZScores { z, mask })
}

/// Per-group importance read from the final encoder.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureImportance {
    /// Mean attention magnitude of each branch token, in group order.
    pub raw: Vec<f64>,
    /// `raw` standardized across the groups.
    pub z: Vec<f64>,
}

impl FeatureImportance {
    /// Index of the most important group (first on ties).
    pub fn top(&self) -> usize {
        let mut best = 0;
        for (i, &v) in self.z.iter().enumerate() {
            if v > self.z[best] {
                best = i;
            }
        }
        best
    }
}

pub fn feature_importance<T: Element>(stack: &HiddenAttentionStack<T>, class_index: usize) -> Result<FeatureImportance> {
    let raw = token_relevance(stack, class_index)?;
    let z = zscore_threshold(&raw, Z_CUTOFF)?.z;
    Ok(FeatureImportance { raw, z })
}

/// Patch relevances of one group laid out on the image.
#[derive(Clone, Debug, PartialEq)]
pub struct PixelAttentionMap {
    pub group: String,
    pub grid: PatchGrid,
    /// Raw relevance per patch, row-major over the patch grid.
    pub relevance: Vec<f64>,
    /// Z-score per pixel, `[a×a]`, constant over each patch.
    pub z: Tensor<f64>,
    /// `|z| ≥ cutoff` per pixel.
    pub mask: Vec<bool>,
}

impl PixelAttentionMap {
    pub fn new(group: impl Into<String>, grid: PatchGrid, relevance: Vec<f64>, cutoff: f64) -> Result<Self> {
        if relevance.len() != grid.tokens() {
            return Err(Error::dim("pixel map", &[relevance.len()], &[grid.tokens()]));
        }
        let scores = zscore_threshold(&relevance, cutoff)?;
        let (a, l, side) = (grid.image_size, grid.patch_size, grid.side());
        let patch_of = |i: usize| (i / a / l) * side + (i % a) / l;
        let z = Tensor::from_fn([a, a], |i| scores.z[patch_of(i)]);
        let mask = (0..a * a).map(|i| scores.mask[patch_of(i)]).collect();
        Ok(Self {
            group: group.into(),
            grid,
            relevance,
            z,
            mask,
        })
    }

    pub fn significant_patches(&self) -> usize {
        let l = self.grid.patch_size;
        self.mask.iter().filter(|&&m| m).count() / (l * l)
    }

    /// Sidecar CSV: `patch,row,col,relevance,z,significant`.
    pub fn to_csv(&self) -> String {
        let (side, l, a) = (self.grid.side(), self.grid.patch_size, self.grid.image_size);
        let mut s = String::from("patch,row,col,relevance,z,significant\n");
        for (p, r) in self.relevance.iter().enumerate() {
            let (row, col) = (p / side, p % side);
            let pixel = row * l * a + col * l;
            let _ = writeln!(
                s,
                "{p},{row},{col},{r},{},{}",
                self.z.data()[pixel],
                u8::from(self.mask[pixel])
            );
        }
        s
    }
}

/// Min-max scaled 8-bit gray levels of an `[a×a]` plane.
fn gray_levels(plane: &Tensor<f32>) -> Vec<u8> {
    let (lo, hi) = plane
        .data()
        .iter()
        .fold((f32::INFINITY, f32::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    let span = hi - lo;
    plane
        .data()
        .iter()
        .map(|&v| {
            if span > 0.0 && span.is_finite() {
                (((v - lo) / span) * 255.0).round() as u8
            } else {
                0
            }
        })
        .collect()
}

/// Binary graymap (`P5`) of an `[a×a]` plane.
pub fn encode_pgm(plane: &Tensor<f32>) -> Result<Vec<u8>> {
    let (h, w) = plane.dims2();
    let mut out = format!("P5\n{w} {h}\n255\n").into_bytes();
    out.extend(gray_levels(plane));
    Ok(out)
}

/// Binary pixmap (`P6`): the feature plane in gray with significant pixels
/// painted red.
pub fn encode_overlay(map: &PixelAttentionMap, plane: &Tensor<f32>) -> Result<Vec<u8>> {
    let a = map.grid.image_size;
    if plane.shape() != [a, a] {
        return Err(Error::dim("overlay", plane.shape(), &[a, a]));
    }
    let mut out = format!("P6\n{a} {a}\n255\n").into_bytes();
    for (g, &m) in gray_levels(plane).into_iter().zip(&map.mask) {
        if m {
            out.extend_from_slice(&[255, 0, 0]);
        } else {
            out.extend_from_slice(&[g, g, g]);
        }
    }
    Ok(out)
}

pub fn export_overlay(map: &PixelAttentionMap, plane: &Tensor<f32>, path: &Path) -> Result<()> {
    let bytes = encode_overlay(map, plane)?;
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Everything `explain` reports for one sample.
#[derive(Clone, Debug)]
pub struct Explanation {
    pub score: f32,
    pub importance: FeatureImportance,
    /// One map per group, in group order.
    pub maps: Vec<PixelAttentionMap>,
}

pub fn explain_sample(model: &PumbaModel, sample: &InterfacePairSample, cutoff: f64) -> Result<Explanation> {
    let att = model.attention(sample)?;
    let importance = feature_importance(&att.aggregator_stack, model.aggregator.class_index())?;
    let maps = att
        .branch_stacks
        .iter()
        .zip(&model.branches)
        .zip(GROUP_NAMES)
        .map(|((stack, branch), name)| {
            let rel = token_relevance(stack, att.branch_class_index)?;
            PixelAttentionMap::new(name, branch.encoder.grid, rel, cutoff)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Explanation {
        score: att.score,
        importance,
        maps,
    })
}
