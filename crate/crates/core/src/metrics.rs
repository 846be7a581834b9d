//! Rank correlation and detection mAP.

use serde::{Deserialize, Serialize};

use crate::decode::{tiou, SamplePrediction, Segment};
use crate::targets::GtSegment;
use crate::{Error, Result};

/// tIoU thresholds `0.50, 0.55, ..., 0.95`.
pub fn default_thresholds() -> Vec<f64> {
    (0..10).map(|i| (50 + 5 * i) as f64 / 100.0).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Spearman {
    pub rho: f64,
    /// Set when either series has no rank variance; `rho` is then 0.
    pub degenerate: bool,
}

/// Ranks starting at 1, ties sharing the mean of their positions.
pub fn average_ranks(x: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..x.len()).collect();
    idx.sort_by(|&a, &b| x[a].total_cmp(&x[b]));
    let mut ranks = vec![0.0; x.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i + 1;
        while j < idx.len() && x[idx[j]] == x[idx[i]] {
            j += 1;
        }
        let r = (i + j + 1) as f64 / 2.0;
        for &k in &idx[i..j] {
            ranks[k] = r;
        }
        i = j;
    }
    ranks
}

/// Pearson correlation of average ranks.
pub fn spearman(a: &[f64], b: &[f64]) -> Result<Spearman> {
    if a.len() != b.len() || a.len() < 2 {
        return Err(Error::Domain(format!(
            "spearman needs two equal-length series of at least 2, got {} and {}",
            a.len(),
            b.len()
        )));
    }
    if a.iter().chain(b).any(|v| !v.is_finite()) {
        return Err(Error::Domain("spearman input contains non-finite values".into()));
    }
    let (ra, rb) = (average_ranks(a), average_ranks(b));
    let n = a.len() as f64;
    let mean = (n + 1.0) / 2.0;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in ra.iter().zip(&rb) {
        let (dx, dy) = (x - mean, y - mean);
        sab += dx * dy;
        saa += dx * dx;
        sbb += dy * dy;
    }
    if saa == 0.0 || sbb == 0.0 {
        log::warn!("spearman correlation undefined: a series has constant rank");
        return Ok(Spearman {
            rho: 0.0,
            degenerate: true,
        });
    }
    Ok(Spearman {
        rho: (sab / (saa * sbb).sqrt()).clamp(-1.0, 1.0),
        degenerate: false,
    })
}

/// All-point interpolated area under the precision-recall curve.
fn interpolated_ap(precision: &[f64], recall: &[f64]) -> f64 {
    let mut p: Vec<f64> = std::iter::once(0.0).chain(precision.iter().copied()).chain([0.0]).collect();
    let r: Vec<f64> = std::iter::once(0.0).chain(recall.iter().copied()).chain([1.0]).collect();
    for i in (0..p.len() - 1).rev() {
        p[i] = p[i].max(p[i + 1]);
    }
    (1..r.len()).map(|i| (r[i] - r[i - 1]) * p[i]).sum()
}

/// Average precision of one class at one threshold.
fn class_ap(preds: &[(usize, Segment)], gts: &[(usize, GtSegment)], threshold: f64) -> f64 {
    if gts.is_empty() {
        return 0.0;
    }
    let mut order: Vec<usize> = (0..preds.len()).collect();
    order.sort_by(|&a, &b| {
        preds[b]
            .1
            .confidence
            .total_cmp(&preds[a].1.confidence)
            .then(preds[a].0.cmp(&preds[b].0))
            .then(preds[a].1.start.total_cmp(&preds[b].1.start))
    });
    let mut used = vec![false; gts.len()];
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut precision = Vec::with_capacity(preds.len());
    let mut recall = Vec::with_capacity(preds.len());
    for &k in &order {
        let (sample, p) = &preds[k];
        let best = gts
            .iter()
            .enumerate()
            .filter(|(g, (s, _))| s == sample && !used[*g])
            .map(|(g, (_, gt))| (g, tiou((p.start, p.end), (gt.start, gt.end))))
            .filter(|&(_, o)| o >= threshold)
            .max_by(|a, b| a.1.total_cmp(&b.1).then(b.0.cmp(&a.0)));
        match best {
            Some((g, _)) => {
                used[g] = true;
                tp += 1;
            }
            None => fp += 1,
        }
        precision.push(tp as f64 / (tp + fp) as f64);
        recall.push(tp as f64 / gts.len() as f64);
    }
    interpolated_ap(&precision, &recall)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MapReport {
    pub thresholds: Vec<f64>,
    pub map_per_threshold: Vec<f64>,
    pub avg_map: f64,
}

/// Per-class AP averaged over classes present in the ground truth, for each
/// threshold. `predictions[k]` and `ground_truth[k]` belong to sample `k`.
pub fn map_at_tiou(predictions: &[Vec<Segment>], ground_truth: &[Vec<GtSegment>], thresholds: &[f64]) -> Result<MapReport> {
    if predictions.len() != ground_truth.len() {
        return Err(Error::Domain(format!(
            "{} prediction lists for {} samples",
            predictions.len(),
            ground_truth.len()
        )));
    }
    let mut classes: Vec<usize> = ground_truth.iter().flatten().map(|g| g.class_id).collect();
    classes.sort_unstable();
    classes.dedup();
    if classes.is_empty() {
        return Err(Error::Domain("ground truth contains no segments".into()));
    }
    let map_per_threshold: Vec<f64> = thresholds
        .iter()
        .map(|&thr| {
            let total: f64 = classes
                .iter()
                .map(|&c| {
                    let preds: Vec<(usize, Segment)> = predictions
                        .iter()
                        .enumerate()
                        .flat_map(|(k, v)| v.iter().filter(|s| s.class_id == c).map(move |s| (k, *s)))
                        .collect();
                    let gts: Vec<(usize, GtSegment)> = ground_truth
                        .iter()
                        .enumerate()
                        .flat_map(|(k, v)| v.iter().filter(|g| g.class_id == c).map(move |g| (k, *g)))
                        .collect();
                    class_ap(&preds, &gts, thr)
                })
                .sum();
            total / classes.len() as f64
        })
        .collect();
    let avg_map = map_per_threshold.iter().sum::<f64>() / map_per_threshold.len().max(1) as f64;
    Ok(MapReport {
        thresholds: thresholds.to_vec(),
        map_per_threshold,
        avg_map,
    })
}

/// Evaluation summary, written as JSON by the CLI.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub spearman_tes: f64,
    pub spearman_pcs: f64,
    pub tes_degenerate: bool,
    pub pcs_degenerate: bool,
    pub thresholds: Vec<f64>,
    pub map_per_threshold: Vec<f64>,
    pub avg_map: f64,
    pub samples: Vec<SamplePrediction>,
}

/// Scores a set of predictions against ground truth `(segments, tes, pcs)`.
pub fn evaluate_predictions(
    predictions: Vec<SamplePrediction>,
    truth: &[(Vec<GtSegment>, f64, f64)],
) -> Result<EvalReport> {
    if predictions.len() != truth.len() {
        return Err(Error::Domain("prediction and ground-truth counts differ".into()));
    }
    let pred_tes: Vec<f64> = predictions.iter().map(|p| p.tes).collect();
    let pred_pcs: Vec<f64> = predictions.iter().map(|p| p.pcs).collect();
    let gt_tes: Vec<f64> = truth.iter().map(|t| t.1).collect();
    let gt_pcs: Vec<f64> = truth.iter().map(|t| t.2).collect();
    let st = spearman(&pred_tes, &gt_tes)?;
    let sp = spearman(&pred_pcs, &gt_pcs)?;
    let segs: Vec<Vec<Segment>> = predictions.iter().map(|p| p.segments.clone()).collect();
    let gts: Vec<Vec<GtSegment>> = truth.iter().map(|t| t.0.clone()).collect();
    let m = map_at_tiou(&segs, &gts, &default_thresholds())?;
    Ok(EvalReport {
        spearman_tes: st.rho,
        spearman_pcs: sp.rho,
        tes_degenerate: st.degenerate,
        pcs_degenerate: sp.degenerate,
        thresholds: m.thresholds,
        map_per_threshold: m.map_per_threshold,
        avg_map: m.avg_map,
        samples: predictions,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn gt(start: f64, end: f64, class_id: usize) -> GtSegment {
        GtSegment {
            start,
            end,
            class_id,
            score: 1.0,
        }
    }

    fn pred(start: f64, end: f64, class_id: usize, confidence: f64) -> Segment {
        Segment {
            start,
            end,
            class_id,
            element_score: 0.0,
            confidence,
        }
    }

    #[test]
    fn spearman_examples() {
        assert_eq!(spearman(&[1.0, 2.0, 3.0], &[10.0, 20.0, 30.0]).unwrap().rho, 1.0);
        assert_eq!(spearman(&[1.0, 2.0, 3.0], &[3.0, 2.0, 1.0]).unwrap().rho, -1.0);
        let r = spearman(&[1.0, 2.0, 3.0, 4.0], &[1.0, 3.0, 2.0, 4.0]).unwrap().rho;
        assert!((r - 0.8).abs() < 1e-12);
        let d = spearman(&[1.0, 1.0, 1.0], &[1.0, 2.0, 3.0]).unwrap();
        assert!(d.degenerate && d.rho == 0.0);
        assert!(matches!(spearman(&[1.0], &[2.0]), Err(Error::Domain(_))));
        assert!(matches!(spearman(&[1.0, 2.0], &[2.0]), Err(Error::Domain(_))));
    }

    /// Explicit rank construction: rank = 1 + #smaller + (#equal - 1) / 2.
    fn brute_force(a: &[f64], b: &[f64]) -> f64 {
        let rank = |x: &[f64]| -> Vec<f64> {
            x.iter()
                .map(|&v| {
                    let less = x.iter().filter(|&&w| w < v).count() as f64;
                    let eq = x.iter().filter(|&&w| w == v).count() as f64;
                    1.0 + less + (eq - 1.0) / 2.0
                })
                .collect()
        };
        let (ra, rb) = (rank(a), rank(b));
        let n = a.len() as f64;
        let (ma, mb) = (ra.iter().sum::<f64>() / n, rb.iter().sum::<f64>() / n);
        let cov: f64 = ra.iter().zip(&rb).map(|(x, y)| (x - ma) * (y - mb)).sum();
        let va: f64 = ra.iter().map(|x| (x - ma).powi(2)).sum();
        let vb: f64 = rb.iter().map(|y| (y - mb).powi(2)).sum();
        cov / (va * vb).sqrt()
    }

    #[test]
    fn spearman_matches_brute_force_on_random_instances() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut checked = 0;
        while checked < 1000 {
            let n = rng.gen_range(2..40);
            // Small integer ranges force plenty of ties.
            let hi = rng.gen_range(2..12);
            let a: Vec<f64> = (0..n).map(|_| rng.gen_range(0..hi) as f64).collect();
            let b: Vec<f64> = (0..n).map(|_| rng.gen_range(0..hi) as f64 * 0.5).collect();
            let s = spearman(&a, &b).unwrap();
            if s.degenerate {
                continue;
            }
            assert!((s.rho - brute_force(&a, &b)).abs() < 1e-9);
            checked += 1;
        }
    }

    #[test]
    fn map_examples() {
        let thr = default_thresholds();
        let g = vec![vec![gt(0.0, 10.0, 3)]];
        let m = map_at_tiou(&[vec![pred(0.0, 10.0, 3, 0.9)]], &g, &thr).unwrap();
        assert!(m.map_per_threshold.iter().all(|&v| v == 1.0));
        let m = map_at_tiou(&[vec![]], &g, &thr).unwrap();
        assert_eq!(m.avg_map, 0.0);
        // tIoU 0.6 at confidence 0.9 and tIoU 0.9 at confidence 0.5.
        let preds = vec![vec![pred(0.0, 6.0, 3, 0.9), pred(0.0, 9.0, 3, 0.5)]];
        let m = map_at_tiou(&preds, &g, &[0.75]).unwrap();
        assert!((m.avg_map - 0.5).abs() < 1e-12);
        assert!(matches!(map_at_tiou(&[vec![]], &[vec![]], &thr), Err(Error::Domain(_))));
    }

    #[test]
    fn matching_is_per_sample_and_per_class() {
        let g = vec![vec![gt(0.0, 10.0, 1)], vec![gt(20.0, 30.0, 2)]];
        // Right interval, wrong sample / wrong class.
        let preds = vec![vec![pred(20.0, 30.0, 2, 0.9), pred(0.0, 10.0, 2, 0.8)], vec![]];
        let m = map_at_tiou(&preds, &g, &[0.5]).unwrap();
        assert_eq!(m.avg_map, 0.0);
        // Classes absent from the ground truth do not enter the average.
        let preds = vec![vec![pred(0.0, 10.0, 1, 0.9), pred(40.0, 50.0, 7, 0.95)], vec![pred(20.0, 30.0, 2, 0.9)]];
        assert_eq!(map_at_tiou(&preds, &g, &[0.5]).unwrap().avg_map, 1.0);
    }

    fn detection_set() -> impl Strategy<Value = (Vec<Vec<Segment>>, Vec<Vec<GtSegment>>)> {
        let seg = (0u32..100, 1u32..20, 0usize..3);
        (
            prop::collection::vec(prop::collection::vec((seg.clone(), 0u32..100), 0..8), 3),
            prop::collection::vec(prop::collection::vec(seg, 1..4), 3),
        )
            .prop_map(|(p, g)| {
                let p = p
                    .into_iter()
                    .map(|v| {
                        v.into_iter()
                            .map(|((s, d, c), k)| pred(s as f64, (s + d) as f64, c, (k + 1) as f64 / 101.0))
                            .collect()
                    })
                    .collect();
                let g = g
                    .into_iter()
                    .map(|v| v.into_iter().map(|(s, d, c)| gt(s as f64, (s + d) as f64, c)).collect())
                    .collect();
                (p, g)
            })
    }

    proptest! {
        #[test]
        fn map_is_monotone_in_threshold((p, g) in detection_set()) {
            let m = map_at_tiou(&p, &g, &default_thresholds()).unwrap();
            for w in m.map_per_threshold.windows(2) {
                prop_assert!(w[1] <= w[0] + 1e-12);
            }
            let mean = m.map_per_threshold.iter().sum::<f64>() / 10.0;
            prop_assert!((m.avg_map - mean).abs() < 1e-12);
        }

        #[test]
        fn map_ignores_positive_confidence_scaling((p, g) in detection_set(), s in 0.01f64..50.0) {
            let scaled: Vec<Vec<Segment>> = p
                .iter()
                .map(|v| v.iter().map(|x| Segment { confidence: x.confidence * s, ..*x }).collect())
                .collect();
            let a = map_at_tiou(&p, &g, &default_thresholds()).unwrap();
            let b = map_at_tiou(&scaled, &g, &default_thresholds()).unwrap();
            prop_assert_eq!(a.map_per_threshold, b.map_per_threshold);
        }

        #[test]
        fn spearman_is_bounded(v in prop::collection::vec((-5i32..5, -5i32..5), 2..30)) {
            let a: Vec<f64> = v.iter().map(|x| x.0 as f64).collect();
            let b: Vec<f64> = v.iter().map(|x| x.1 as f64).collect();
            let s = spearman(&a, &b).unwrap();
            prop_assert!((-1.0..=1.0).contains(&s.rho));
        }
    }
}
