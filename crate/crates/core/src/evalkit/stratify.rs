use serde::{Deserialize, Serialize};

use super::metrics::{ap_distance, match_class, Criterion};
use super::{Detection, EvalFrame};
use crate::error::Result;
use crate::scenegen::Box3D;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StratifyMode {
    /// BEV range from the ego origin: [0,20), [20,30), [30,∞) m.
    Distance,
    /// Longer footprint edge: [0,4), [4,∞) m.
    Size,
}

impl StratifyMode {
    pub fn edges(self) -> &'static [f64] {
        match self {
            StratifyMode::Distance => &[0.0, 20.0, 30.0],
            StratifyMode::Size => &[0.0, 4.0],
        }
    }

    fn key(self, b: &Box3D) -> f64 {
        match self {
            StratifyMode::Distance => b.range_from_origin(),
            StratifyMode::Size => b.longer_edge(),
        }
    }

    /// Half-open bin index of a box.
    pub fn bin_of(self, b: &Box3D) -> usize {
        let k = self.key(b);
        let edges = self.edges();
        edges.iter().rposition(|&e| k >= e).unwrap_or(0)
    }

    pub fn labels(self) -> Vec<String> {
        let edges = self.edges();
        (0..edges.len())
            .map(|i| match edges.get(i + 1) {
                Some(hi) => format!("[{}, {})", edges[i], hi),
                None => format!("[{}, inf)", edges[i]),
            })
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StratumResult {
    pub bin: String,
    /// Absent when the bin holds no ground truth.
    pub map: Option<f64>,
}

/// Splits frames per bin. Predictions follow the bin of the ground truth they match at
/// `match_threshold`; unmatched ones use their own bin.
pub fn split_by_bin(
    frames: &[EvalFrame],
    mode: StratifyMode,
    num_classes: usize,
    match_threshold: f64,
) -> Result<Vec<Vec<EvalFrame>>> {
    let nbins = mode.edges().len();
    let mut det_bin: Vec<Vec<usize>> = frames
        .iter()
        .map(|f| f.detections.iter().map(|d| mode.bin_of(&d.bbox)).collect())
        .collect();
    for c in 0..num_classes {
        let m = match_class(frames, c, Criterion::CenterDistance(match_threshold))?;
        for p in m.pairs {
            det_bin[p.frame][p.det] = mode.bin_of(&frames[p.frame].gts[p.gt]);
        }
    }
    Ok((0..nbins)
        .map(|bin| {
            frames
                .iter()
                .enumerate()
                .map(|(fi, f)| EvalFrame {
                    detections: f
                        .detections
                        .iter()
                        .zip(&det_bin[fi])
                        .filter(|(_, b)| **b == bin)
                        .map(|(d, _)| d.clone())
                        .collect::<Vec<Detection>>(),
                    gts: f.gts.iter().filter(|g| mode.bin_of(g) == bin).cloned().collect(),
                })
                .collect()
        })
        .collect())
}

/// Mean AP over classes and thresholds among the classes present in `frames`.
pub fn mean_ap(frames: &[EvalFrame], num_classes: usize, thresholds: &[f64]) -> Result<Option<f64>> {
    let mut vals = Vec::new();
    for c in 0..num_classes {
        for &t in thresholds {
            if let Some(ap) = ap_distance(frames, c, t)? {
                vals.push(ap);
            }
        }
    }
    Ok(if vals.is_empty() {
        None
    } else {
        Some(vals.iter().sum::<f64>() / vals.len() as f64)
    })
}

pub fn stratify(
    frames: &[EvalFrame],
    mode: StratifyMode,
    num_classes: usize,
    thresholds: &[f64],
    match_threshold: f64,
) -> Result<Vec<StratumResult>> {
    let bins = split_by_bin(frames, mode, num_classes, match_threshold)?;
    mode.labels()
        .into_iter()
        .zip(bins)
        .map(|(label, fs)| {
            Ok(StratumResult {
                bin: label,
                map: mean_ap(&fs, num_classes, thresholds)?,
            })
        })
        .collect()
}
