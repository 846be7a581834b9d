//! Point-label assignment on the feature pyramid.
//!
//! Grid point `i` of level `l` sits at time `(i + 0.5) * 2^l` seconds. A
//! point strictly inside an annotated segment is positive at level `l` when
//! its larger boundary distance falls in that level's regression range.

use serde::{Deserialize, Serialize};

use crate::backbone::{ModelConfig, RangeUnits};
use crate::{Error, Result};

/// An annotated action element.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GtSegment {
    #[serde(rename = "start_s")]
    pub start: f64,
    #[serde(rename = "end_s")]
    pub end: f64,
    pub class_id: usize,
    pub score: f64,
}

impl GtSegment {
    pub fn duration(&self) -> f64 {
        self.end - self.start
    }

    /// Checks the segment against a horizon of `horizon` seconds and `num_classes` classes.
    pub fn validate(&self, horizon: f64, num_classes: usize) -> Result<()> {
        let finite = self.start.is_finite() && self.end.is_finite() && self.score.is_finite();
        if !finite || self.end <= self.start {
            return Err(Error::Data(format!(
                "malformed segment [{}, {}) with score {}",
                self.start, self.end, self.score
            )));
        }
        if self.start < 0.0 || self.end > horizon {
            return Err(Error::Data(format!(
                "segment [{}, {}) outside [0, {horizon}]",
                self.start, self.end
            )));
        }
        if self.class_id >= num_classes {
            return Err(Error::Data(format!(
                "class {} outside [0, {num_classes})",
                self.class_id
            )));
        }
        if self.score < 0.0 {
            return Err(Error::Data(format!("negative element score {}", self.score)));
        }
        Ok(())
    }
}

/// Assignment for every grid point of one level.
#[derive(Debug, Clone, PartialEq)]
pub struct LevelTargets {
    /// Class of the assigned segment, `None` for negatives.
    pub class: Vec<Option<usize>>,
    /// `(d_s, d_e)` in grid units of this level; zero for negatives.
    pub offsets: Vec<[f64; 2]>,
    pub scores: Vec<f64>,
    pub stride: f64,
}

impl LevelTargets {
    pub fn len(&self) -> usize {
        self.class.len()
    }

    pub fn is_empty(&self) -> bool {
        self.class.is_empty()
    }

    pub fn is_positive(&self, i: usize) -> bool {
        self.class[i].is_some()
    }

    pub fn one_hot(&self, i: usize, num_classes: usize) -> Vec<f64> {
        let mut v = vec![0.0; num_classes];
        if let Some(c) = self.class[i] {
            v[c] = 1.0;
        }
        v
    }

    pub fn num_positive(&self) -> usize {
        self.class.iter().filter(|c| c.is_some()).count()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PointTargets {
    pub levels: Vec<LevelTargets>,
    pub pcs: f64,
    pub segments: Vec<GtSegment>,
}

impl PointTargets {
    pub fn num_positive(&self) -> usize {
        self.levels.iter().map(LevelTargets::num_positive).sum()
    }
}

/// Builds classification, offset and score targets for all pyramid levels.
///
/// Among segments that strictly contain a point and pass the level's range
/// test, the shortest wins and equal lengths go to the earlier start.
pub fn generate_point_targets(segments: &[GtSegment], pcs: f64, config: &ModelConfig) -> Result<PointTargets> {
    for s in segments {
        s.validate(config.t_max as f64, config.num_classes)?;
    }
    if !pcs.is_finite() {
        return Err(Error::Data(format!("non-finite pcs {pcs}")));
    }
    let levels = config
        .level_lengths()
        .into_iter()
        .enumerate()
        .map(|(l, len)| {
            let stride = config.level_stride(l);
            let [lo, hi] = config.regress_ranges[l];
            let unit = match config.range_units {
                RangeUnits::Seconds => stride,
                RangeUnits::LevelGrid => 1.0,
            };
            let mut lt = LevelTargets {
                class: vec![None; len],
                offsets: vec![[0.0; 2]; len],
                scores: vec![0.0; len],
                stride,
            };
            for i in 0..len {
                let t = (i as f64 + 0.5) * stride;
                let mut best: Option<(&GtSegment, [f64; 2])> = None;
                for seg in segments {
                    if !(seg.start < t && t < seg.end) {
                        continue;
                    }
                    let d = [(t - seg.start) / stride, (seg.end - t) / stride];
                    let reach = d[0].max(d[1]) * unit;
                    if !(lo <= reach && reach < hi) {
                        continue;
                    }
                    let better = match best {
                        None => true,
                        Some((b, _)) => {
                            (seg.duration(), seg.start) < (b.duration(), b.start)
                        }
                    };
                    if better {
                        best = Some((seg, d));
                    }
                }
                if let Some((seg, d)) = best {
                    lt.class[i] = Some(seg.class_id);
                    lt.offsets[i] = d;
                    lt.scores[i] = seg.score;
                }
            }
            lt
        })
        .collect();
    Ok(PointTargets {
        levels,
        pcs,
        segments: segments.to_vec(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::default_ranges;
    use proptest::prelude::*;

    fn seg(start: f64, end: f64, class_id: usize, score: f64) -> GtSegment {
        GtSegment {
            start,
            end,
            class_id,
            score,
        }
    }

    fn config(units: RangeUnits) -> ModelConfig {
        ModelConfig {
            range_units: units,
            ..ModelConfig::default()
        }
    }

    /// Exhaustive assignment in doubled integer time, written independently
    /// of the implementation: returns `(class, 2*d_s*stride, 2*d_e*stride, score)`.
    fn oracle(segments: &[(i64, i64, usize, f64)], cfg: &ModelConfig) -> Vec<Vec<Option<(usize, i64, i64, f64)>>> {
        let mut out = Vec::new();
        for l in 0..cfg.levels {
            let sigma = 1i64 << l;
            let [lo, hi] = cfg.regress_ranges[l];
            let n = (cfg.t_max as i64) / sigma;
            let mut level = Vec::new();
            for i in 0..n {
                let t2 = (2 * i + 1) * sigma;
                let mut pick: Option<(i64, i64, usize, i64, i64, f64)> = None;
                for &(s, e, c, r) in segments {
                    let (s2, e2) = (2 * s, 2 * e);
                    if t2 <= s2 || t2 >= e2 {
                        continue;
                    }
                    let far2 = (t2 - s2).max(e2 - t2);
                    let reach = match cfg.range_units {
                        RangeUnits::Seconds => far2 as f64 / 2.0,
                        RangeUnits::LevelGrid => far2 as f64 / (2 * sigma) as f64,
                    };
                    if reach < lo || reach >= hi {
                        continue;
                    }
                    let key = (e - s, s);
                    if pick.map_or(true, |p| key < (p.0, p.1)) {
                        pick = Some((e - s, s, c, t2 - s2, e2 - t2, r));
                    }
                }
                level.push(pick.map(|p| (p.2, p.3, p.4, p.5)));
            }
            out.push(level);
        }
        out
    }

    fn assert_matches_oracle(segments: &[(i64, i64, usize, f64)], cfg: &ModelConfig) {
        let gt: Vec<_> = segments.iter().map(|&(s, e, c, r)| seg(s as f64, e as f64, c, r)).collect();
        let targets = generate_point_targets(&gt, 50.0, cfg).unwrap();
        let expected = oracle(segments, cfg);
        for (l, (lt, ex)) in targets.levels.iter().zip(&expected).enumerate() {
            assert_eq!(lt.len(), ex.len());
            let sigma = (1i64 << l) as f64;
            for (i, want) in ex.iter().enumerate() {
                match want {
                    None => assert!(!lt.is_positive(i), "level {l} point {i}"),
                    Some((c, ds2, de2, r)) => {
                        assert_eq!(lt.class[i], Some(*c), "level {l} point {i}");
                        assert_eq!(lt.offsets[i], [*ds2 as f64 / (2.0 * sigma), *de2 as f64 / (2.0 * sigma)]);
                        assert_eq!(lt.scores[i], *r);
                    }
                }
            }
        }
    }

    #[test]
    fn worked_example_in_level_grid_units() {
        let cfg = config(RangeUnits::LevelGrid);
        let t = generate_point_targets(&[seg(10.0, 20.0, 3, 5.0)], 40.0, &cfg).unwrap();
        // t = 12.5 at level 0: offsets (2.5, 7.5), reach 7.5 outside [0, 4).
        assert!(!t.levels[0].is_positive(12));
        // t = 13 at level 1: offsets (1.5, 3.5) cells, outside [4, 8).
        assert_eq!(t.levels[1].offsets[6], [0.0, 0.0]);
        assert!(!t.levels[1].is_positive(6));
        // t = 17.5 at level 0: offsets (7.5, 2.5).
        assert!(!t.levels[0].is_positive(17));
        // Every level-0 point is at least 5 s from one boundary.
        assert!(t.levels[0].class.iter().all(|c| c.is_none()));
        assert_matches_oracle(&[(10, 20, 3, 5.0)], &cfg);
    }

    #[test]
    fn same_example_in_seconds() {
        let cfg = config(RangeUnits::Seconds);
        let t = generate_point_targets(&[seg(10.0, 20.0, 3, 5.0)], 40.0, &cfg).unwrap();
        // Level 1 point at 13 s reaches 7 s into the segment: inside [4, 8).
        assert!(t.levels[1].is_positive(6));
        assert_eq!(t.levels[1].offsets[6], [1.5, 3.5]);
        assert_eq!(t.levels[1].one_hot(6, 22).iter().sum::<f64>(), 1.0);
        assert_eq!(t.levels[1].one_hot(6, 22)[3], 1.0);
        assert_matches_oracle(&[(10, 20, 3, 5.0)], &cfg);
    }

    #[test]
    fn longest_segment_levels() {
        // Every interior point of a 77 s element is at least 38.5 s from one
        // boundary, so only the two coarsest levels see it; central points
        // land on the level below the open-ended one.
        let cfg = config(RangeUnits::Seconds);
        let t = generate_point_targets(&[seg(100.0, 177.0, 0, 9.0)], 40.0, &cfg).unwrap();
        let active: Vec<usize> = (0..6).filter(|&l| t.levels[l].num_positive() > 0).collect();
        assert_eq!(active, vec![4, 5]);
        assert_matches_oracle(&[(100, 177, 0, 9.0)], &cfg);
        let grid = config(RangeUnits::LevelGrid);
        let t = generate_point_targets(&[seg(100.0, 177.0, 0, 9.0)], 40.0, &grid).unwrap();
        assert_eq!(t.levels[5].num_positive(), 0);
        assert_matches_oracle(&[(100, 177, 0, 9.0)], &grid);
    }

    #[test]
    fn points_outside_segments_are_negative() {
        let t = generate_point_targets(&[seg(50.0, 60.0, 1, 2.0)], 40.0, &ModelConfig::default()).unwrap();
        for lt in &t.levels {
            for i in 0..lt.len() {
                let time = (i as f64 + 0.5) * lt.stride;
                if !(50.0 < time && time < 60.0) {
                    assert_eq!(lt.class[i], None);
                    assert!(lt.one_hot(i, 22).iter().all(|&v| v == 0.0));
                }
            }
        }
    }

    #[test]
    fn shorter_then_earlier_segment_wins() {
        let cfg = ModelConfig {
            regress_ranges: vec![[0.0, f64::INFINITY]],
            levels: 1,
            ..ModelConfig::default()
        };
        let cfg = ModelConfig {
            regress_ranges: default_ranges(1),
            ..cfg
        };
        let t = generate_point_targets(&[seg(0.0, 40.0, 1, 1.0), seg(10.0, 20.0, 2, 2.0)], 30.0, &cfg).unwrap();
        assert_eq!(t.levels[0].class[15], Some(2));
        assert_eq!(t.levels[0].class[5], Some(1));
        let t = generate_point_targets(&[seg(12.0, 22.0, 4, 1.0), seg(10.0, 20.0, 2, 2.0)], 30.0, &cfg).unwrap();
        assert_eq!(t.levels[0].class[15], Some(2));
    }

    #[test]
    fn malformed_segments_are_data_errors() {
        let cfg = ModelConfig::default();
        for bad in [
            seg(5.0, 5.0, 0, 1.0),
            seg(6.0, 5.0, 0, 1.0),
            seg(-1.0, 5.0, 0, 1.0),
            seg(280.0, 289.0, 0, 1.0),
            seg(1.0, 5.0, 22, 1.0),
            seg(1.0, 5.0, 0, -1.0),
            seg(1.0, f64::NAN, 0, 1.0),
        ] {
            assert!(matches!(generate_point_targets(&[bad], 30.0, &cfg), Err(Error::Data(_))), "{bad:?}");
        }
    }

    fn disjoint_segments() -> impl Strategy<Value = Vec<(i64, i64, usize, f64)>> {
        prop::collection::vec((0i64..30, 1i64..78, 0usize..22, 0.0f64..20.0), 1..12).prop_map(|raw| {
            let mut t = 0;
            let mut out = Vec::new();
            for (gap, dur, c, r) in raw {
                let s = t + gap;
                let e = s + dur;
                if e > 288 {
                    break;
                }
                out.push((s, e, c, r));
                t = e;
            }
            out
        })
    }

    proptest! {
        #[test]
        fn assignment_matches_brute_force(
            segs in prop::collection::vec((0i64..250, 1i64..78, 0usize..22, 0.0f64..20.0), 1..6),
            grid in any::<bool>(),
        ) {
            let segs: Vec<_> = segs.into_iter().map(|(s, d, c, r)| (s, (s + d).min(288), c, r)).collect();
            let cfg = config(if grid { RangeUnits::LevelGrid } else { RangeUnits::Seconds });
            assert_matches_oracle(&segs, &cfg);
        }

        #[test]
        fn positives_are_well_formed(segs in disjoint_segments()) {
            prop_assume!(!segs.is_empty());
            let gt: Vec<_> = segs.iter().map(|&(s, e, c, r)| seg(s as f64, e as f64, c, r)).collect();
            let cfg = ModelConfig::default();
            let t = generate_point_targets(&gt, 50.0, &cfg).unwrap();
            let horizon = segs.last().unwrap().1 as usize;
            for (l, lt) in t.levels.iter().enumerate() {
                // Valid length after `l` halvings under the window-coverage rule.
                let mut valid = horizon;
                for _ in 0..l {
                    valid = valid / 2 + 1;
                }
                for i in 0..lt.len() {
                    if let Some(c) = lt.class[i] {
                        prop_assert!(i < valid);
                        prop_assert_eq!(lt.one_hot(i, 22).iter().sum::<f64>(), 1.0);
                        prop_assert!(c < 22);
                        prop_assert!(lt.offsets[i][0] > 0.0 && lt.offsets[i][1] > 0.0);
                        let reach = lt.offsets[i][0].max(lt.offsets[i][1]) * lt.stride;
                        let [lo, hi] = cfg.regress_ranges[l];
                        prop_assert!(lo <= reach && reach < hi);
                    }
                }
            }
            // Every point strictly inside an element is positive at exactly one level
            // when ranges are measured in seconds and segments are disjoint.
            for &(s, e, _, _) in &segs {
                for l in 0..cfg.levels {
                    let sigma = (1usize << l) as f64;
                    for i in 0..t.levels[l].len() {
                        let time = (i as f64 + 0.5) * sigma;
                        if (s as f64) < time && time < e as f64 {
                            let positive_here = t.levels[l].is_positive(i);
                            let reach = (time - s as f64).max(e as f64 - time);
                            let [lo, hi] = cfg.regress_ranges[l];
                            prop_assert_eq!(positive_here, lo <= reach && reach < hi);
                        }
                    }
                }
            }
        }
    }
}
