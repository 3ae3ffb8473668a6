//! Detection metrics: rotated BEV IoU, distance- and IoU-threshold AP, true-positive
//! errors, the attribute-free detection score, and distance/size stratification.

pub mod iou;
pub mod metrics;
pub mod stratify;

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scenegen::Box3D;

pub use iou::rotated_bev_iou;
pub use metrics::{ap_distance, ap_iou, nds_lite, tp_errors, MatchedPair, TpErrors};
pub use stratify::{stratify, StratifyMode, StratumResult};

/// A scored predicted box.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub bbox: Box3D,
    pub score: f64,
}

/// Predictions and ground truth of one scene.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct EvalFrame {
    pub detections: Vec<Detection>,
    pub gts: Vec<Box3D>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalConfig {
    pub distance_thresholds: Vec<f64>,
    /// IoU threshold per class id.
    pub iou_thresholds: Vec<f64>,
    pub tp_threshold: f64,
    /// Normalisers for (ATE, ASE, AOE, AVE) in the detection score.
    pub nds_normalizers: [f64; 4],
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            distance_thresholds: vec![0.5, 1.0, 2.0, 4.0],
            iou_thresholds: vec![0.7, 0.5, 0.7],
            tp_threshold: 2.0,
            nds_normalizers: [1.0; 4],
        }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<()> {
        if self.distance_thresholds.windows(2).any(|w| w[1] < w[0]) {
            return Err(Error::Config("distance thresholds must be sorted ascending".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassReport {
    pub name: String,
    /// AP per distance threshold (same order as `distance_thresholds`); `None` if no ground truth.
    pub ap: Vec<Option<f64>>,
    pub iou_ap: Option<f64>,
    pub tp: TpErrors,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub num_frames: usize,
    pub distance_thresholds: Vec<f64>,
    pub classes: Vec<ClassReport>,
    /// Mean over present classes and all distance thresholds.
    pub map: f64,
    /// Mean over present classes at each threshold, keyed by the threshold in metres.
    pub map_at: BTreeMap<String, f64>,
    pub iou_map: f64,
    pub mate: f64,
    pub mase: f64,
    pub maoe: f64,
    pub mave: f64,
    pub nds: f64,
    pub by_distance: Vec<StratumResult>,
    pub by_size: Vec<StratumResult>,
}

impl EvalReport {
    pub fn map_at(&self, threshold: f64) -> Option<f64> {
        self.map_at.get(&threshold_key(threshold)).copied()
    }

    pub fn to_text(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serialises") + "\n"
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Format {
            path: path.to_path_buf(),
            msg: e.to_string(),
        })
    }
}

pub fn threshold_key(t: f64) -> String {
    format!("{t}")
}

fn mean(v: &[f64]) -> f64 {
    if v.is_empty() {
        0.0
    } else {
        v.iter().sum::<f64>() / v.len() as f64
    }
}

/// Full metric suite over a set of frames.
pub fn evaluate(frames: &[EvalFrame], class_names: &[String], cfg: &EvalConfig) -> Result<EvalReport> {
    cfg.validate()?;
    let nc = class_names.len();
    let mut classes = Vec::with_capacity(nc);
    let mut all_aps = Vec::new();
    let mut per_thr: Vec<Vec<f64>> = vec![Vec::new(); cfg.distance_thresholds.len()];
    let mut iou_aps = Vec::new();
    let mut tps = Vec::new();
    for (c, name) in class_names.iter().enumerate() {
        let mut ap = Vec::with_capacity(cfg.distance_thresholds.len());
        for (ti, &t) in cfg.distance_thresholds.iter().enumerate() {
            let v = ap_distance(frames, c, t)?;
            if let Some(v) = v {
                all_aps.push(v);
                per_thr[ti].push(v);
            }
            ap.push(v);
        }
        let iou_thr = cfg.iou_thresholds.get(c).copied().unwrap_or(0.5);
        let iou_ap = ap_iou(frames, c, iou_thr)?;
        iou_aps.extend(iou_ap);
        let m = metrics::match_class(frames, c, metrics::Criterion::CenterDistance(cfg.tp_threshold))?;
        let tp = tp_errors(frames, &m.pairs);
        if m.num_gt > 0 {
            tps.push(tp);
        }
        classes.push(ClassReport {
            name: name.clone(),
            ap,
            iou_ap,
            tp,
        });
    }
    let map = mean(&all_aps);
    let map_at = cfg
        .distance_thresholds
        .iter()
        .zip(&per_thr)
        .map(|(t, v)| (threshold_key(*t), mean(v)))
        .collect();
    let tp_mean = |f: fn(&TpErrors) -> f64| {
        if tps.is_empty() {
            1.0
        } else {
            tps.iter().map(f).sum::<f64>() / tps.len() as f64
        }
    };
    let tp = TpErrors {
        ate: tp_mean(|t| t.ate),
        ase: tp_mean(|t| t.ase),
        aoe: tp_mean(|t| t.aoe),
        ave: tp_mean(|t| t.ave),
    };
    Ok(EvalReport {
        num_frames: frames.len(),
        distance_thresholds: cfg.distance_thresholds.clone(),
        classes,
        map,
        map_at,
        iou_map: mean(&iou_aps),
        mate: tp.ate,
        mase: tp.ase,
        maoe: tp.aoe,
        mave: tp.ave,
        nds: nds_lite(map, &tp, &cfg.nds_normalizers),
        by_distance: stratify(frames, StratifyMode::Distance, nc, &cfg.distance_thresholds, cfg.tp_threshold)?,
        by_size: stratify(frames, StratifyMode::Size, nc, &cfg.distance_thresholds, cfg.tp_threshold)?,
    })
}
