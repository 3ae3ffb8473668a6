//! Set-to-set training objective: one-to-one matching, focal classification, L1 box
//! regression on every decoder layer, and a pseudo-label distillation term.

mod hungarian;

use serde::{Deserialize, Serialize};

pub use hungarian::{hungarian_match, MatchResult};

use crate::error::{Error, Result};
use crate::evalkit::Detection;
use crate::numcore::{Tape, Tensor, Var};
use crate::scenegen::{Box3D, PointCloudRange};
use crate::transformer::{encode_box, LayerPrediction, BOX_DIM};

/// Lower bound on the argument of every logarithm.
const LOG_FLOOR: f64 = 1e-12;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossConfig {
    pub lambda_cls: f64,
    pub lambda_reg: f64,
    pub alpha: f64,
    pub gamma: f64,
    /// Per-dimension weights of the L1 box term, used in matching and in the loss.
    pub code_weights: [f64; BOX_DIM],
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            lambda_cls: 2.0,
            lambda_reg: 0.25,
            alpha: 0.25,
            gamma: 2.0,
            code_weights: [1.0; BOX_DIM],
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = [self.lambda_cls, self.lambda_reg, self.gamma]
            .iter()
            .chain(&self.code_weights)
            .all(|v| v.is_finite() && *v >= 0.0)
            && (0.0..=1.0).contains(&self.alpha);
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid loss weights {self:?}")))
        }
    }
}

/// Scalar focal loss of one logit against a 0/1 target.
pub fn focal_loss(logit: f64, target: bool, alpha: f64, gamma: f64) -> f64 {
    let p = 1.0 / (1.0 + (-logit).exp());
    if target {
        -alpha * (1.0 - p).powf(gamma) * p.max(LOG_FLOOR).ln()
    } else {
        -(1.0 - alpha) * p.powf(gamma) * (1.0 - p).max(LOG_FLOOR).ln()
    }
}

/// Focal loss summed over every element of `logits` against a same-shaped 0/1 `targets`.
pub fn focal_loss_sum(tape: &mut Tape, logits: Var, targets: &Tensor, alpha: f64, gamma: f64) -> Result<Var> {
    if tape.shape(logits) != targets.shape() {
        return Err(Error::dim("focal_loss_sum", tape.shape(logits), targets.shape()));
    }
    let p = tape.sigmoid(logits);
    let np = tape.neg(p);
    let q = tape.add_scalar(np, 1.0);

    let lp = tape.clamp_min(p, LOG_FLOOR);
    let lp = tape.log(lp);
    let lq = tape.clamp_min(q, LOG_FLOOR);
    let lq = tape.log(lq);

    let qg = tape.powf(q, gamma);
    let pg = tape.powf(p, gamma);
    let pos = tape.mul(qg, lp)?;
    let neg = tape.mul(pg, lq)?;

    let t = targets.data();
    let wpos = Tensor::from_parts(targets.shape().to_vec(), t.iter().map(|&v| -alpha * v).collect());
    let wneg = Tensor::from_parts(targets.shape().to_vec(), t.iter().map(|&v| -(1.0 - alpha) * (1.0 - v)).collect());
    let wpos = tape.constant(wpos);
    let wneg = tape.constant(wneg);
    let pos = tape.mul(pos, wpos)?;
    let neg = tape.mul(neg, wneg)?;
    let all = tape.add(pos, neg)?;
    Ok(tape.sum(all))
}

/// `[M, N]` matching cost between ground truths and one layer's predictions, row-major.
/// `boxes: [N, 10]`, `logits: [N, K]` plain values.
pub fn match_cost(boxes: &Tensor, logits: &Tensor, gts: &[Box3D], range: &PointCloudRange, cfg: &LossConfig) -> Result<Vec<f64>> {
    let n = boxes.shape()[0];
    let k = logits.shape()[1];
    if boxes.shape() != [n, BOX_DIM] || logits.shape()[0] != n {
        return Err(Error::dim("match_cost", boxes.shape(), logits.shape()));
    }
    if let Some(g) = gts.iter().find(|g| g.class_id >= k) {
        return Err(Error::Data(format!("ground-truth class {} outside {k} classes", g.class_id)));
    }
    let mut cost = Vec::with_capacity(gts.len() * n);
    for g in gts {
        let target = encode_box(g, range);
        for p in 0..n {
            let logit = logits.data()[p * k + g.class_id];
            let cls = focal_loss(logit, true, cfg.alpha, cfg.gamma) - focal_loss(logit, false, cfg.alpha, cfg.gamma);
            let pb = &boxes.data()[p * BOX_DIM..(p + 1) * BOX_DIM];
            let l1: f64 = pb.iter().zip(&target).zip(&cfg.code_weights).map(|((a, b), w)| w * (a - b).abs()).sum();
            cost.push(cfg.lambda_cls * cls + cfg.lambda_reg * l1);
        }
    }
    Ok(cost)
}

/// Matches one layer's predictions to the ground truths.
pub fn match_layer(tape: &Tape, pred: &LayerPrediction, gts: &[Box3D], range: &PointCloudRange, cfg: &LossConfig) -> Result<MatchResult> {
    let n = tape.shape(pred.boxes)[0];
    let cost = match_cost(tape.value(pred.boxes), tape.value(pred.logits), gts, range, cfg)?;
    hungarian_match(&cost, gts.len(), n)
}

/// Unweighted `(cls, reg)` losses of one layer under a fixed assignment, each divided by
/// `max(M, 1)`.
pub fn layer_loss(
    tape: &mut Tape,
    pred: &LayerPrediction,
    gts: &[Box3D],
    matches: &MatchResult,
    range: &PointCloudRange,
    cfg: &LossConfig,
) -> Result<(Var, Var)> {
    let shape = tape.shape(pred.logits).to_vec();
    let k = shape[1];
    let norm = 1.0 / gts.len().max(1) as f64;
    let mut targets = Tensor::zeros(&shape);
    for &(p, g) in &matches.pairs {
        targets.data_mut()[p * k + gts[g].class_id] = 1.0;
    }
    let cls = focal_loss_sum(tape, pred.logits, &targets, cfg.alpha, cfg.gamma)?;
    let cls = tape.scale(cls, norm);

    let reg = if matches.pairs.is_empty() {
        tape.constant(Tensor::scalar(0.0))
    } else {
        let idx: Vec<isize> = matches.pairs.iter().map(|&(p, _)| p as isize).collect();
        let picked = tape.gather_rows(pred.boxes, &idx)?;
        let tgt: Vec<f64> = matches.pairs.iter().flat_map(|&(_, g)| encode_box(&gts[g], range)).collect();
        let tgt = tape.constant(Tensor::from_parts(vec![idx.len(), BOX_DIM], tgt));
        let diff = tape.sub(picked, tgt)?;
        let diff = tape.abs(diff);
        let w = tape.constant(Tensor::from_vec(cfg.code_weights.to_vec()));
        let diff = tape.mul(diff, w)?;
        let s = tape.sum(diff);
        tape.scale(s, norm)
    };
    Ok((cls, reg))
}

/// Plain values of a loss evaluation.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub total: f64,
    /// Unweighted `(cls, reg)` per decoder layer.
    pub layers: Vec<(f64, f64)>,
    pub lambda_cls: f64,
    pub lambda_reg: f64,
}

/// Differentiable loss with its breakdown and the per-layer assignments.
#[derive(Clone, Debug)]
pub struct LossOutput {
    pub total: Var,
    pub breakdown: LossBreakdown,
    pub matches: Vec<MatchResult>,
}

/// Sum over layers of `λ_cls·cls + λ_reg·reg`, matching each layer independently.
pub fn set_loss(tape: &mut Tape, layers: &[LayerPrediction], gts: &[Box3D], range: &PointCloudRange, cfg: &LossConfig) -> Result<LossOutput> {
    let matches = layers
        .iter()
        .map(|pred| match_layer(tape, pred, gts, range, cfg))
        .collect::<Result<Vec<_>>>()?;
    set_loss_with_matches(tape, layers, gts, &matches, range, cfg)
}

/// [`set_loss`] under given assignments.
pub fn set_loss_with_matches(
    tape: &mut Tape,
    layers: &[LayerPrediction],
    gts: &[Box3D],
    matches: &[MatchResult],
    range: &PointCloudRange,
    cfg: &LossConfig,
) -> Result<LossOutput> {
    if layers.is_empty() || layers.len() != matches.len() {
        return Err(Error::Contract(format!("{} layers with {} assignments", layers.len(), matches.len())));
    }
    let mut total: Option<Var> = None;
    let mut breakdown = LossBreakdown {
        lambda_cls: cfg.lambda_cls,
        lambda_reg: cfg.lambda_reg,
        ..Default::default()
    };
    for (pred, m) in layers.iter().zip(matches) {
        let (cls, reg) = layer_loss(tape, pred, gts, m, range, cfg)?;
        breakdown.layers.push((tape.value(cls).item(), tape.value(reg).item()));
        let a = tape.scale(cls, cfg.lambda_cls);
        let b = tape.scale(reg, cfg.lambda_reg);
        let l = tape.add(a, b)?;
        total = Some(match total {
            None => l,
            Some(t) => tape.add(t, l)?,
        });
    }
    let total = total.expect("at least one layer");
    breakdown.total = tape.value(total).item();
    if !breakdown.total.is_finite() {
        return Err(Error::Numeric(format!("set loss is {}", breakdown.total)));
    }
    Ok(LossOutput { total, breakdown, matches: matches.to_vec() })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct KdConfig {
    pub lambda_kd: f64,
    /// Teacher detections scoring above this become pseudo ground truth.
    pub score_floor: f64,
}

impl Default for KdConfig {
    fn default() -> Self {
        Self { lambda_kd: 0.5, score_floor: 0.3 }
    }
}

/// Teacher detections above the floor, highest score first, at most `max` of them.
pub fn pseudo_labels(teacher: &[Detection], score_floor: f64, max: usize) -> Vec<Box3D> {
    let mut kept: Vec<&Detection> = teacher.iter().filter(|d| d.score > score_floor).collect();
    kept.sort_by(|a, b| b.score.total_cmp(&a.score));
    kept.into_iter().take(max).map(|d| d.bbox.clone()).collect()
}

#[derive(Clone, Debug)]
pub struct KdOutput {
    pub total: Var,
    pub gt: LossBreakdown,
    /// `None` when there is no pseudo ground truth or `λ_kd = 0`.
    pub kd: Option<LossBreakdown>,
}

/// `set_loss(student, gts) + λ_kd · set_loss(student, pseudo)`.
pub fn kd_loss(
    tape: &mut Tape,
    layers: &[LayerPrediction],
    gts: &[Box3D],
    teacher: &[Detection],
    range: &PointCloudRange,
    cfg: &LossConfig,
    kd: &KdConfig,
) -> Result<KdOutput> {
    let base = set_loss(tape, layers, gts, range, cfg)?;
    let nq = layers.first().map_or(0, |l| tape.shape(l.boxes)[0]);
    let pseudo = pseudo_labels(teacher, kd.score_floor, nq);
    if kd.lambda_kd == 0.0 || pseudo.is_empty() {
        return Ok(KdOutput { total: base.total, gt: base.breakdown, kd: None });
    }
    let extra = set_loss(tape, layers, &pseudo, range, cfg)?;
    let w = tape.scale(extra.total, kd.lambda_kd);
    let total = tape.add(base.total, w)?;
    Ok(KdOutput {
        total,
        gt: base.breakdown,
        kd: Some(extra.breakdown),
    })
}
