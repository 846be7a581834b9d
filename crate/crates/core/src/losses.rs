//! Multi-task training objective.
//!
//! `L = [alpha * focal + sum_pos(beta * diou + element_mse)] / N+ + pcs_mse`
//!
//! Classification uses a sigmoid focal loss over every class of every valid
//! point, boundaries a 1-D distance-IoU loss and element scores a squared
//! error, the last two on positive points only. `N+` counts positives over
//! the whole batch so per-sample losses can be summed.

use serde::{Deserialize, Serialize};

use crate::backbone::NetVars;
use crate::heads::HeadOutputs;
use crate::targets::PointTargets;
use crate::tensor::kernels::sigmoid;
use crate::tensor::{Real, Tape, Var};
use crate::{Error, Result};

const P_CLAMP: f64 = 1e-7;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    pub alpha: f64,
    pub beta: f64,
    pub focal_alpha: f64,
    pub focal_gamma: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            alpha: 0.7,
            beta: 0.3,
            focal_alpha: 0.25,
            focal_gamma: 2.0,
        }
    }
}

/// Weighted, normalized components; `total` is their sum.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub focal: f64,
    pub diou: f64,
    pub element: f64,
    pub pcs: f64,
    pub total: f64,
    pub num_positive: usize,
}

impl LossBreakdown {
    pub fn accumulate(&mut self, other: &LossBreakdown) {
        self.focal += other.focal;
        self.diou += other.diou;
        self.element += other.element;
        self.pcs += other.pcs;
        self.total += other.total;
        self.num_positive += other.num_positive;
    }

    fn check(&self) -> Result<()> {
        for (name, v) in [
            ("focal", self.focal),
            ("diou", self.diou),
            ("element", self.element),
            ("pcs", self.pcs),
        ] {
            if !v.is_finite() {
                return Err(Error::numeric(name, format!("loss component is {v}")));
            }
        }
        Ok(())
    }
}

/// Sigmoid focal loss of one logit and its derivative with respect to the logit.
pub fn focal_loss(logit: f64, target: bool, alpha: f64, gamma: f64) -> (f64, f64) {
    let raw = sigmoid(logit);
    let p = raw.clamp(P_CLAMP, 1.0 - P_CLAMP);
    let clamped = p != raw;
    if target {
        let q = 1.0 - p;
        let value = -alpha * q.powf(gamma) * p.ln();
        let grad = if clamped { 0.0 } else { alpha * q.powf(gamma) * (gamma * p * p.ln() - q) };
        (value, grad)
    } else {
        let q = 1.0 - p;
        let value = -(1.0 - alpha) * p.powf(gamma) * q.ln();
        let grad = if clamped { 0.0 } else { (1.0 - alpha) * p.powf(gamma) * (p - gamma * q * q.ln()) };
        (value, grad)
    }
}

/// 1-D distance-IoU loss between intervals `[t - d_s, t + d_e]` given by
/// their `(d_s, d_e)` offsets from a shared anchor `t`. The target must have
/// positive length. Returns the loss and its gradient with respect to the
/// predicted offsets.
pub fn diou_loss(pred: [f64; 2], target: [f64; 2]) -> (f64, [f64; 2]) {
    let [ps, pe] = pred;
    let [ts, te] = target;
    let (inter_s, di_s) = if ps < ts { (ps, 1.0) } else { (ts, 0.0) };
    let (inter_e, di_e) = if pe < te { (pe, 1.0) } else { (te, 0.0) };
    let (inter, di_s, di_e) = if inter_s + inter_e > 0.0 {
        (inter_s + inter_e, di_s, di_e)
    } else {
        (0.0, 0.0, 0.0)
    };
    let union = ps + pe + ts + te - inter;
    let iou = inter / union;
    let (enc_s, dc_s) = if ps > ts { (ps, 1.0) } else { (ts, 0.0) };
    let (enc_e, dc_e) = if pe > te { (pe, 1.0) } else { (te, 0.0) };
    let c = enc_s + enc_e;
    let delta = (pe - ps) - (te - ts);
    let rho2 = delta * delta / 4.0;
    let value = 1.0 - iou + rho2 / (c * c);

    let grad = |di: f64, dc: f64, drho2: f64| {
        let du = 1.0 - di;
        let diou = (di * union - inter * du) / (union * union);
        -diou + drho2 / (c * c) - 2.0 * rho2 * dc / (c * c * c)
    };
    (value, [grad(di_s, dc_s, -delta / 2.0), grad(di_e, dc_e, delta / 2.0)])
}

/// Read-only view of one level's head values.
struct LevelView<'a, R> {
    logits: &'a [R],
    offsets: &'a [R],
    scores: &'a [R],
    len: usize,
    valid_len: usize,
}

struct SampleGrads {
    logits: Vec<Vec<f64>>,
    offsets: Vec<Vec<f64>>,
    scores: Vec<Vec<f64>>,
    pcs: f64,
}

/// Loss of one sample with `norm` as the positive count and `pcs_weight`
/// scaling the PCS term, plus gradients with respect to every head value.
fn sample_loss<R: Real>(
    levels: &[LevelView<'_, R>],
    pcs: f64,
    targets: &PointTargets,
    w: &LossWeights,
    norm: f64,
    pcs_weight: f64,
) -> Result<(LossBreakdown, SampleGrads)> {
    if levels.len() != targets.levels.len() {
        return Err(Error::Shape(format!(
            "{} prediction levels for {} target levels",
            levels.len(),
            targets.levels.len()
        )));
    }
    let mut b = LossBreakdown {
        num_positive: targets.num_positive(),
        ..LossBreakdown::default()
    };
    let mut g = SampleGrads {
        logits: Vec::new(),
        offsets: Vec::new(),
        scores: Vec::new(),
        pcs: 0.0,
    };
    let (mut focal, mut diou, mut element) = (0.0, 0.0, 0.0);
    for (lv, lt) in levels.iter().zip(&targets.levels) {
        if lt.len() != lv.len {
            return Err(Error::Shape(format!("level of {} points has {} targets", lv.len, lt.len())));
        }
        let classes = lv.logits.len() / lv.len;
        let mut gl = vec![0.0; lv.logits.len()];
        let mut go = vec![0.0; lv.offsets.len()];
        let mut gs = vec![0.0; lv.scores.len()];
        for i in 0..lv.valid_len {
            let cls = lt.class[i];
            for c in 0..classes {
                let k = c * lv.len + i;
                let (v, d) = focal_loss(lv.logits[k].f64(), cls == Some(c), w.focal_alpha, w.focal_gamma);
                focal += v;
                gl[k] = w.alpha * d / norm;
            }
            if cls.is_some() {
                let pred = [lv.offsets[i].f64(), lv.offsets[lv.len + i].f64()];
                let (v, d) = diou_loss(pred, lt.offsets[i]);
                diou += v;
                go[i] = w.beta * d[0] / norm;
                go[lv.len + i] = w.beta * d[1] / norm;
                let err = lv.scores[i].f64() - lt.scores[i];
                element += err * err;
                gs[i] = 2.0 * err / norm;
            }
        }
        g.logits.push(gl);
        g.offsets.push(go);
        g.scores.push(gs);
    }
    let err = pcs - targets.pcs;
    b.focal = w.alpha * focal / norm;
    b.diou = w.beta * diou / norm;
    b.element = element / norm;
    b.pcs = pcs_weight * err * err;
    g.pcs = pcs_weight * 2.0 * err;
    b.check()?;
    b.total = b.focal + b.diou + b.element + b.pcs;
    Ok((b, g))
}

/// Batch objective over materialized head outputs.
pub fn total_loss(batch: &[(&HeadOutputs, &PointTargets)], w: &LossWeights) -> Result<LossBreakdown> {
    let n_pos: usize = batch.iter().map(|(_, t)| t.num_positive()).sum();
    let norm = n_pos.max(1) as f64;
    let mut sum = LossBreakdown::default();
    for (out, t) in batch {
        let views: Vec<_> = out
            .levels
            .iter()
            .map(|l| LevelView {
                logits: l.logits.values(),
                offsets: l.offsets.values(),
                scores: l.scores.values(),
                len: l.mask.len(),
                valid_len: l.mask.valid_len(),
            })
            .collect();
        let (b, _) = sample_loss(&views, out.pcs as f64, t, w, norm, 1.0 / batch.len() as f64)?;
        sum.accumulate(&b);
    }
    Ok(sum)
}

/// Records one sample's share of the batch loss on `tape`.
///
/// `batch_positive` is the positive count of the whole batch and
/// `batch_size` scales the PCS term, so summing the returned losses over
/// the batch gives [`total_loss`].
pub fn record_sample_loss<R: Real>(
    tape: &mut Tape<'_, R>,
    vars: &NetVars,
    targets: &PointTargets,
    w: &LossWeights,
    batch_positive: usize,
    batch_size: usize,
) -> Result<(Var, LossBreakdown)> {
    let views: Vec<_> = vars
        .tes
        .iter()
        .zip(&vars.streams.video_levels)
        .map(|(lv, (_, mask))| LevelView {
            logits: tape.data(lv.logits),
            offsets: tape.data(lv.offsets),
            scores: tape.data(lv.scores),
            len: mask.len(),
            valid_len: mask.valid_len(),
        })
        .collect();
    let pcs = tape.scalar(vars.pcs).f64();
    let (b, g) = sample_loss(
        &views,
        pcs,
        targets,
        w,
        batch_positive.max(1) as f64,
        1.0 / batch_size.max(1) as f64,
    )?;
    let cast = |v: Vec<f64>| v.into_iter().map(R::of).collect::<Vec<R>>();
    let mut locals = Vec::new();
    for (((lv, gl), go), gs) in vars.tes.iter().zip(g.logits).zip(g.offsets).zip(g.scores) {
        locals.push((lv.logits, cast(gl)));
        locals.push((lv.offsets, cast(go)));
        locals.push((lv.scores, cast(gs)));
    }
    locals.push((vars.pcs, vec![R::of(g.pcs)]));
    let loss = tape.custom_scalar(R::of(b.total), locals)?;
    Ok((loss, b))
}
