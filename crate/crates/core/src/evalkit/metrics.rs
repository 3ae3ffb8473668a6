use std::cmp::Ordering;
use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use super::iou::rotated_bev_iou;
use super::{Detection, EvalFrame};
use crate::error::Result;
use crate::scenegen::wrap_angle;

pub const RECALL_POINTS: usize = 101;
pub const MIN_RECALL: f64 = 0.1;
pub const MIN_PRECISION: f64 = 0.1;

/// A true-positive pairing: `(frame, detection index, ground-truth index)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct MatchedPair {
    pub frame: usize,
    pub det: usize,
    pub gt: usize,
}

/// Outcome of greedy score-ordered matching for one class.
#[derive(Clone, Debug, Default)]
pub struct ClassMatches {
    /// `(score, is_tp)` in descending score order.
    pub ranked: Vec<(f64, bool)>,
    pub pairs: Vec<MatchedPair>,
    pub num_gt: usize,
}

#[derive(Clone, Copy)]
pub enum Criterion {
    /// BEV centre distance ≤ threshold, nearest unclaimed GT wins.
    CenterDistance(f64),
    /// Rotated BEV IoU ≥ threshold, highest-IoU unclaimed GT wins.
    Iou(f64),
}

fn score_order(frames: &[EvalFrame], class_id: usize) -> Vec<(usize, usize)> {
    let mut dets: Vec<(usize, usize)> = frames
        .iter()
        .enumerate()
        .flat_map(|(f, fr)| {
            fr.detections
                .iter()
                .enumerate()
                .filter(move |(_, d)| d.bbox.class_id == class_id && d.score > 0.0)
                .map(move |(i, _)| (f, i))
        })
        .collect();
    // Stable sort keeps (frame, index) order among equal scores.
    dets.sort_by(|a, b| {
        let (sa, sb) = (frames[a.0].detections[a.1].score, frames[b.0].detections[b.1].score);
        sb.partial_cmp(&sa).unwrap_or(Ordering::Equal)
    });
    dets
}

/// Greedy matching in descending score order; each ground truth is claimed at most once.
/// Zero-score predictions are ignored.
pub fn match_class(frames: &[EvalFrame], class_id: usize, criterion: Criterion) -> Result<ClassMatches> {
    let mut claimed: Vec<Vec<bool>> = frames.iter().map(|f| vec![false; f.gts.len()]).collect();
    let num_gt = frames
        .iter()
        .map(|f| f.gts.iter().filter(|g| g.class_id == class_id).count())
        .sum();
    let mut out = ClassMatches {
        num_gt,
        ..Default::default()
    };
    for (f, i) in score_order(frames, class_id) {
        let det: &Detection = &frames[f].detections[i];
        let mut best: Option<(usize, f64)> = None;
        for (g, gt) in frames[f].gts.iter().enumerate() {
            if gt.class_id != class_id || claimed[f][g] {
                continue;
            }
            match criterion {
                Criterion::CenterDistance(thr) => {
                    let d = det.bbox.bev_distance(gt);
                    if d <= thr && best.is_none_or(|(_, bd)| d < bd) {
                        best = Some((g, d));
                    }
                }
                Criterion::Iou(thr) => {
                    let iou = rotated_bev_iou(&det.bbox, gt)?;
                    if iou >= thr && best.is_none_or(|(_, bi)| iou > bi) {
                        best = Some((g, iou));
                    }
                }
            }
        }
        if let Some((g, _)) = best {
            claimed[f][g] = true;
            out.pairs.push(MatchedPair { frame: f, det: i, gt: g });
        }
        out.ranked.push((det.score, best.is_some()));
    }
    Ok(out)
}

/// Linear interpolation with `numpy.interp` semantics (`left = fp[0]`, caller-chosen `right`).
fn interp(x: f64, xp: &[f64], fp: &[f64], right: f64) -> f64 {
    let n = xp.len();
    if x < xp[0] {
        return fp[0];
    }
    if x > xp[n - 1] {
        return right;
    }
    if x == xp[n - 1] {
        return fp[n - 1];
    }
    // largest j with xp[j] <= x
    let j = xp.partition_point(|&v| v <= x) - 1;
    let (x0, x1) = (xp[j], xp[j + 1]);
    if x1 == x0 {
        return fp[j];
    }
    fp[j] + (x - x0) * (fp[j + 1] - fp[j]) / (x1 - x0)
}

/// Cumulative precision/recall curve from a ranked TP list.
pub fn precision_recall(ranked: &[(f64, bool)], num_gt: usize) -> (Vec<f64>, Vec<f64>) {
    let (mut tp, mut fp) = (0.0, 0.0);
    let mut prec = Vec::with_capacity(ranked.len());
    let mut rec = Vec::with_capacity(ranked.len());
    for &(_, is_tp) in ranked {
        if is_tp {
            tp += 1.0;
        } else {
            fp += 1.0;
        }
        prec.push(tp / (tp + fp));
        rec.push(tp / num_gt as f64);
    }
    (prec, rec)
}

/// Area under the precision–recall curve sampled at 101 recall points, dropping recalls
/// ≤ 0.1 and subtracting a 0.1 precision floor, renormalised to [0, 1].
pub fn distance_ap(ranked: &[(f64, bool)], num_gt: usize) -> Option<f64> {
    if num_gt == 0 {
        return None;
    }
    if ranked.is_empty() {
        return Some(0.0);
    }
    let (prec, rec) = precision_recall(ranked, num_gt);
    let start = (100.0 * MIN_RECALL).round() as usize + 1;
    let kept: Vec<f64> = (start..RECALL_POINTS)
        .map(|i| {
            let r = i as f64 / (RECALL_POINTS - 1) as f64;
            ((interp(r, &rec, &prec, 0.0) - MIN_PRECISION) / (1.0 - MIN_PRECISION)).max(0.0)
        })
        .collect();
    Some((kept.iter().sum::<f64>() / kept.len() as f64).min(1.0))
}

/// 40-point interpolated AP (max precision at recall ≥ r for r = 1/40 … 1).
pub fn recall40_ap(ranked: &[(f64, bool)], num_gt: usize) -> Option<f64> {
    if num_gt == 0 {
        return None;
    }
    let (prec, rec) = precision_recall(ranked, num_gt);
    let mut total = 0.0;
    for i in 1..=40 {
        let r = i as f64 / 40.0;
        let best = rec
            .iter()
            .zip(&prec)
            .filter(|(rc, _)| **rc >= r - 1e-12)
            .map(|(_, p)| *p)
            .fold(0.0, f64::max);
        total += best;
    }
    Some(total / 40.0)
}

pub fn ap_distance(frames: &[EvalFrame], class_id: usize, threshold: f64) -> Result<Option<f64>> {
    let m = match_class(frames, class_id, Criterion::CenterDistance(threshold))?;
    Ok(distance_ap(&m.ranked, m.num_gt))
}

pub fn ap_iou(frames: &[EvalFrame], class_id: usize, threshold: f64) -> Result<Option<f64>> {
    let m = match_class(frames, class_id, Criterion::Iou(threshold))?;
    Ok(recall40_ap(&m.ranked, m.num_gt))
}

/// Mean true-positive errors. Each is 1.0 when there are no pairs.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TpErrors {
    pub ate: f64,
    pub ase: f64,
    pub aoe: f64,
    pub ave: f64,
}

impl TpErrors {
    pub const WORST: TpErrors = TpErrors {
        ate: 1.0,
        ase: 1.0,
        aoe: 1.0,
        ave: 1.0,
    };

    pub fn as_array(&self) -> [f64; 4] {
        [self.ate, self.ase, self.aoe, self.ave]
    }
}

/// 1 - IoU of two boxes after aligning their centres and headings.
pub fn aligned_scale_error(a: &[f64; 3], b: &[f64; 3]) -> f64 {
    let inter: f64 = (0..3).map(|i| a[i].min(b[i])).product();
    let va: f64 = a.iter().product();
    let vb: f64 = b.iter().product();
    1.0 - inter / (va + vb - inter)
}

/// Absolute heading difference wrapped to [0, π].
pub fn yaw_error(a: f64, b: f64) -> f64 {
    let d = wrap_angle(a - b).abs();
    d.min(PI)
}

pub fn tp_errors(frames: &[EvalFrame], pairs: &[MatchedPair]) -> TpErrors {
    if pairs.is_empty() {
        return TpErrors::WORST;
    }
    let n = pairs.len() as f64;
    let mut acc = [0.0; 4];
    for p in pairs {
        let d = &frames[p.frame].detections[p.det].bbox;
        let g = &frames[p.frame].gts[p.gt];
        acc[0] += d.bev_distance(g);
        acc[1] += aligned_scale_error(&d.size, &g.size);
        acc[2] += yaw_error(d.yaw, g.yaw);
        acc[3] += (d.velocity[0] - g.velocity[0]).hypot(d.velocity[1] - g.velocity[1]);
    }
    TpErrors {
        ate: acc[0] / n,
        ase: acc[1] / n,
        aoe: acc[2] / n,
        ave: acc[3] / n,
    }
}

/// Detection score without the attribute term: `(5·mAP + Σ (1 - min(1, err/norm))) / 9`.
pub fn nds_lite(map: f64, tp: &TpErrors, normalizers: &[f64; 4]) -> f64 {
    let tp_terms: f64 = tp
        .as_array()
        .iter()
        .zip(normalizers)
        .map(|(e, n)| 1.0 - (e / n).min(1.0))
        .sum();
    ((5.0 * map + tp_terms) / (5.0 + 4.0)).clamp(0.0, 1.0)
}
