//! From per-point head outputs to a short list of scored elements.

use std::cmp::Ordering;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::heads::HeadOutputs;
use crate::tensor::kernels::sigmoid;
use crate::{Error, Result};

/// A predicted action element.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Segment {
    pub start: f64,
    pub end: f64,
    pub class_id: usize,
    pub element_score: f64,
    pub confidence: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ProgramType {
    Short,
    Free,
}

impl ProgramType {
    /// Number of elements a program of this type contains.
    pub fn element_count(self) -> usize {
        match self {
            ProgramType::Short => 7,
            ProgramType::Free => 12,
        }
    }
}

impl FromStr for ProgramType {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "short" => Ok(ProgramType::Short),
            "free" => Ok(ProgramType::Free),
            other => Err(Error::Data(format!("unknown program type {other:?}"))),
        }
    }
}

impl fmt::Display for ProgramType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ProgramType::Short => "short",
            ProgramType::Free => "free",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DecodeConfig {
    pub score_threshold: f64,
    pub iou_threshold: f64,
    pub top_k: usize,
}

impl Default for DecodeConfig {
    fn default() -> Self {
        Self {
            score_threshold: 0.001,
            iou_threshold: 0.1,
            top_k: 100,
        }
    }
}

/// Temporal intersection over union.
pub fn tiou(a: (f64, f64), b: (f64, f64)) -> f64 {
    let inter = (a.1.min(b.1) - a.0.max(b.0)).max(0.0);
    let union = (a.1 - a.0) + (b.1 - b.0) - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

/// Higher confidence first; ties by earlier start, earlier end, lower class.
pub fn rank_order(a: &Segment, b: &Segment) -> Ordering {
    b.confidence
        .total_cmp(&a.confidence)
        .then(a.start.total_cmp(&b.start))
        .then(a.end.total_cmp(&b.end))
        .then(a.class_id.cmp(&b.class_id))
}

/// One candidate per valid point whose best class clears `score_threshold`,
/// clipped to the valid horizon.
pub fn decode_segments(outputs: &HeadOutputs, score_threshold: f64) -> Vec<Segment> {
    let horizon = outputs
        .levels
        .first()
        .map_or(0.0, |l| l.mask.valid_len() as f64 * l.stride);
    let mut out = Vec::new();
    for lv in &outputs.levels {
        let len = lv.mask.len();
        let classes = lv.logits.channels();
        for i in 0..lv.mask.valid_len() {
            let (class_id, logit) = (0..classes)
                .map(|c| (c, lv.logits.get(c, i)))
                .fold((0, f32::NEG_INFINITY), |best, cur| if cur.1 > best.1 { cur } else { best });
            let confidence = sigmoid(logit as f64);
            if !(confidence >= score_threshold) {
                continue;
            }
            let centre = i as f64 + 0.5;
            let start = ((centre - lv.offsets.get(0, i) as f64) * lv.stride).max(0.0);
            let end = ((centre + lv.offsets.get(1, i) as f64) * lv.stride).min(horizon);
            if !(end > start) {
                continue;
            }
            debug_assert!(i < len);
            out.push(Segment {
                start,
                end,
                class_id,
                element_score: lv.scores.get(0, i) as f64,
                confidence,
            });
        }
    }
    out
}

/// Class-agnostic linear soft-NMS.
///
/// Repeatedly keeps the most confident remaining candidate and scales every
/// other candidate overlapping it by more than `iou_threshold` by `1 - tIoU`.
pub fn soft_nms(candidates: &[Segment], iou_threshold: f64, top_k: usize) -> Vec<Segment> {
    let mut pool: Vec<Segment> = candidates.to_vec();
    let mut kept = Vec::with_capacity(top_k.min(pool.len()));
    while !pool.is_empty() && kept.len() < top_k {
        let best = (0..pool.len())
            .min_by(|&a, &b| rank_order(&pool[a], &pool[b]))
            .expect("pool is non-empty");
        let pick = pool.swap_remove(best);
        for other in &mut pool {
            let o = tiou((pick.start, pick.end), (other.start, other.end));
            if o > iou_threshold {
                other.confidence *= 1.0 - o;
            }
        }
        kept.push(pick);
    }
    kept.sort_by(rank_order);
    kept
}

/// The `7` (short) or `12` (free) most confident survivors.
pub fn select_elements(survivors: &[Segment], program: ProgramType) -> Vec<Segment> {
    let mut v = survivors.to_vec();
    v.sort_by(rank_order);
    v.truncate(program.element_count());
    v
}

pub fn aggregate_tes(selected: &[Segment]) -> f64 {
    selected.iter().map(|s| s.element_score).sum()
}

/// Decode, suppress, select and sum in one call.
pub fn predict_elements(outputs: &HeadOutputs, program: ProgramType, cfg: &DecodeConfig) -> (Vec<Segment>, f64) {
    let candidates = decode_segments(outputs, cfg.score_threshold);
    let survivors = soft_nms(&candidates, cfg.iou_threshold, cfg.top_k);
    let selected = select_elements(&survivors, program);
    let tes = aggregate_tes(&selected);
    (selected, tes)
}

/// Exported prediction for one sample.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SamplePrediction {
    pub id: String,
    pub program_type: ProgramType,
    pub segments: Vec<Segment>,
    pub tes: f64,
    pub pcs: f64,
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::ModelConfig;
    use crate::heads::LevelOutputs;
    use crate::targets::{generate_point_targets, GtSegment};
    use crate::tensor::{SeqTensor, ValidityMask};
    use proptest::prelude::*;

    fn seg(start: f64, end: f64, confidence: f64) -> Segment {
        Segment {
            start,
            end,
            class_id: 0,
            element_score: 1.0,
            confidence,
        }
    }

    fn outputs_from(logit: f32, len: usize, levels: usize, classes: usize) -> HeadOutputs {
        HeadOutputs {
            levels: (0..levels)
                .map(|l| {
                    let t = len >> l;
                    LevelOutputs {
                        logits: SeqTensor::from_fn(classes, t, |_, _| logit),
                        offsets: SeqTensor::from_fn(2, t, |_, _| 1.0),
                        scores: SeqTensor::from_fn(1, t, |_, _| 2.0),
                        mask: ValidityMask::all_valid(t),
                        stride: (1 << l) as f64,
                    }
                })
                .collect(),
            pcs: 0.0,
        }
    }

    #[test]
    fn decoding_substitutes_offsets() {
        let mut o = outputs_from(-30.0, 16, 1, 3);
        let lv = &mut o.levels[0];
        lv.logits.set(2, 5, 3.0);
        lv.offsets.set(0, 5, 2.0);
        lv.offsets.set(1, 5, 3.0);
        lv.scores.set(0, 5, 4.5);
        let s = decode_segments(&o, 0.01);
        assert_eq!(s.len(), 1);
        // Centre 5.5: start 5.5 - 2, end 5.5 + 3.
        assert_eq!((s[0].start, s[0].end, s[0].class_id, s[0].element_score), (3.5, 8.5, 2, 4.5));
        assert!((s[0].confidence - sigmoid(3.0)).abs() < 1e-12);
    }

    #[test]
    fn confident_nothing_decodes_to_nothing() {
        assert!(decode_segments(&outputs_from(-50.0, 288, 6, 22), 0.01).is_empty());
        assert_eq!(decode_segments(&outputs_from(0.0, 288, 6, 22), 0.01).len(), 567);
    }

    #[test]
    fn boundaries_are_clipped_to_valid_horizon() {
        let mut o = outputs_from(5.0, 8, 1, 1);
        o.levels[0].mask = ValidityMask::prefix(8, 6).unwrap();
        o.levels[0].offsets = SeqTensor::from_fn(2, 8, |_, _| 4.0);
        for s in decode_segments(&o, 0.5) {
            assert!(s.start >= 0.0 && s.end <= 6.0 && s.end > s.start);
        }
    }

    #[test]
    fn soft_nms_examples() {
        let one = [seg(1.0, 4.0, 0.7)];
        assert_eq!(soft_nms(&one, 0.1, 100), one);
        let twins = soft_nms(&[seg(0.0, 5.0, 0.8), seg(0.0, 5.0, 0.9)], 0.1, 100);
        assert_eq!(twins[0].confidence, 0.9);
        assert_eq!(twins[1].confidence, 0.0);
        let apart = [seg(0.0, 1.0, 0.3), seg(2.0, 3.0, 0.9), seg(4.0, 6.0, 0.5)];
        let kept = soft_nms(&apart, 0.1, 100);
        assert_eq!(kept.iter().map(|s| s.confidence).collect::<Vec<_>>(), vec![0.9, 0.5, 0.3]);
        assert_eq!(soft_nms(&apart, 0.1, 2).len(), 2);
    }

    #[test]
    fn selection_counts_and_ties() {
        let many: Vec<_> = (0..20).map(|i| seg(i as f64, i as f64 + 1.0, (i % 10) as f64 / 10.0)).collect();
        let short = select_elements(&many, ProgramType::Short);
        assert_eq!(short.len(), 7);
        assert!(short.iter().all(|s| s.confidence >= 0.6));
        // Equal confidences: earlier start first.
        assert_eq!((short[0].start, short[1].start), (9.0, 19.0));
        assert_eq!(select_elements(&many[..5], ProgramType::Free).len(), 5);
        assert!(matches!("long".parse::<ProgramType>(), Err(Error::Data(_))));
        assert_eq!("free".parse::<ProgramType>().unwrap(), ProgramType::Free);
    }

    #[test]
    fn tes_is_a_sum() {
        assert_eq!(aggregate_tes(&[]), 0.0);
        let mut a = seg(0.0, 1.0, 1.0);
        let mut b = a;
        a.element_score = 3.2;
        b.element_score = 4.1;
        assert!((aggregate_tes(&[a, b]) - 7.3).abs() < 1e-12);
        assert_eq!(aggregate_tes(&[a, b]), aggregate_tes(&[b, a]));
    }

    /// Direct transcription of the iterative procedure with explicit scans.
    fn reference_soft_nms(c: &[Segment], thr: f64, k: usize) -> Vec<Segment> {
        let mut alive: Vec<Option<Segment>> = c.iter().copied().map(Some).collect();
        let mut out = Vec::new();
        for _ in 0..k {
            let mut best: Option<usize> = None;
            for (i, s) in alive.iter().enumerate() {
                if let Some(s) = s {
                    let better = match best {
                        None => true,
                        Some(b) => {
                            let b = alive[b].unwrap();
                            s.confidence > b.confidence
                                || (s.confidence == b.confidence
                                    && (s.start, s.end, s.class_id) < (b.start, b.end, b.class_id))
                        }
                    };
                    if better {
                        best = Some(i);
                    }
                }
            }
            let Some(b) = best else { break };
            let pick = alive[b].take().unwrap();
            for s in alive.iter_mut().flatten() {
                let inter = (pick.end.min(s.end) - pick.start.max(s.start)).max(0.0);
                let iou = inter / ((pick.end - pick.start) + (s.end - s.start) - inter);
                if iou > thr {
                    s.confidence *= 1.0 - iou;
                }
            }
            out.push(pick);
        }
        out
    }

    fn candidates() -> impl Strategy<Value = Vec<Segment>> {
        prop::collection::vec((0u32..100, 1u32..30, 0u32..1000, 0usize..4), 0..40).prop_map(|v| {
            v.into_iter()
                .map(|(s, d, c, k)| Segment {
                    start: s as f64,
                    end: (s + d) as f64,
                    class_id: k,
                    element_score: 0.0,
                    confidence: (c as f64 + 1.0) / 1001.0,
                })
                .collect()
        })
    }

    proptest! {
        #[test]
        fn soft_nms_matches_reference(c in candidates(), k in 1usize..50) {
            let got = soft_nms(&c, 0.1, k);
            let mut want = reference_soft_nms(&c, 0.1, k);
            want.sort_by(rank_order);
            prop_assert_eq!(got, want);
        }

        #[test]
        fn high_threshold_only_sorts(c in candidates()) {
            let got = soft_nms(&c, 1.0, usize::MAX);
            let mut want = c.clone();
            want.sort_by(rank_order);
            prop_assert_eq!(got, want);
        }

        #[test]
        fn positive_confidence_scaling_preserves_order(c in candidates(), scale in 0.01f64..10.0) {
            let scaled: Vec<_> = c.iter().map(|s| Segment { confidence: s.confidence * scale, ..*s }).collect();
            let key = |v: Vec<Segment>| v.into_iter().map(|s| (s.start, s.end, s.class_id)).collect::<Vec<_>>();
            let a = soft_nms(&c, 0.1, 100);
            let b = soft_nms(&scaled, 0.1, 100);
            prop_assert_eq!(key(a.clone()), key(b.clone()));
            prop_assert_eq!(
                key(select_elements(&a, ProgramType::Short)),
                key(select_elements(&b, ProgramType::Short))
            );
        }

        #[test]
        fn exact_targets_decode_back_to_segments(
            raw in prop::collection::vec((0u32..20, 1u32..78), 1..8),
        ) {
            let mut t = 0;
            let mut gt = Vec::new();
            for (gap, dur) in raw {
                let (s, e) = (t + gap, t + gap + dur);
                if e > 288 { break; }
                gt.push(GtSegment { start: s as f64, end: e as f64, class_id: gt.len() % 22, score: 1.0 });
                t = e;
            }
            prop_assume!(!gt.is_empty());
            let cfg = ModelConfig::default();
            let targets = generate_point_targets(&gt, 50.0, &cfg).unwrap();
            let outputs = HeadOutputs {
                levels: targets.levels.iter().enumerate().map(|(l, lt)| {
                    let n = lt.len();
                    LevelOutputs {
                        logits: SeqTensor::from_fn(22, n, |c, i| if lt.class[i] == Some(c) { 10.0 } else { -10.0 }),
                        offsets: SeqTensor::from_fn(2, n, |k, i| lt.offsets[i][k] as f32),
                        scores: SeqTensor::from_fn(1, n, |_, i| lt.scores[i] as f32),
                        mask: ValidityMask::all_valid(n),
                        stride: cfg.level_stride(l),
                    }
                }).collect(),
                pcs: 0.0,
            };
            let decoded = decode_segments(&outputs, 0.5);
            prop_assert_eq!(decoded.len(), targets.num_positive());
            for d in &decoded {
                let g = gt.iter().find(|g| g.class_id == d.class_id).unwrap();
                // Integer boundaries and half-integer centres: exact in f32.
                prop_assert!((d.start - g.start).abs() < 1e-4 && (d.end - g.end).abs() < 1e-4);
            }
        }
    }
}
