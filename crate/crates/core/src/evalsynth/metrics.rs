//! Detection matching, precision-recall curves and pixel-set metrics.

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::image::Mask2D;
use crate::injsite::CellPoint;

/// Default match tolerance in pixels.
pub const DEFAULT_MATCH_RADIUS: f64 = 4.0;

#[derive(Debug, Clone, PartialEq, Default)]
pub struct MatchResult {
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
    /// `(prediction index, truth index)` pairs.
    pub pairs: Vec<(usize, usize)>,
}

impl MatchResult {
    /// 1 when nothing was predicted.
    pub fn precision(&self) -> f64 {
        if self.tp + self.fp == 0 {
            1.0
        } else {
            self.tp as f64 / (self.tp + self.fp) as f64
        }
    }

    /// 1 when there is nothing to find.
    pub fn recall(&self) -> f64 {
        if self.tp + self.fn_ == 0 {
            1.0
        } else {
            self.tp as f64 / (self.tp + self.fn_) as f64
        }
    }

    pub fn f1(&self) -> f64 {
        let d = 2 * self.tp + self.fp + self.fn_;
        if d == 0 {
            1.0
        } else {
            2.0 * self.tp as f64 / d as f64
        }
    }
}

/// Greedy matching: predictions in descending score order (ties by index)
/// each take the nearest unmatched truth point in the same slice within
/// `radius`.
pub fn match_detections(pred: &[CellPoint], truth: &[CellPoint], radius: f64) -> Result<MatchResult> {
    if !(radius > 0.0) {
        return Err(Error::param("radius", "must be > 0"));
    }
    let mut order: Vec<usize> = (0..pred.len()).collect();
    order.sort_by(|&a, &b| pred[b].score.total_cmp(&pred[a].score).then(a.cmp(&b)));
    let r2 = radius * radius;
    let mut taken = vec![false; truth.len()];
    let mut pairs = Vec::new();
    for &i in &order {
        let p = &pred[i];
        let mut best: Option<(f64, usize)> = None;
        for (j, t) in truth.iter().enumerate() {
            if taken[j] || t.z != p.z {
                continue;
            }
            let dx = p.x as f64 - t.x as f64;
            let dy = p.y as f64 - t.y as f64;
            let d2 = dx * dx + dy * dy;
            if d2 <= r2 && best.is_none_or(|(bd, _)| d2 < bd) {
                best = Some((d2, j));
            }
        }
        if let Some((_, j)) = best {
            taken[j] = true;
            pairs.push((i, j));
        }
    }
    let tp = pairs.len();
    Ok(MatchResult {
        tp,
        fp: pred.len() - tp,
        fn_: truth.len() - tp,
        pairs,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PrPoint {
    pub threshold: f64,
    pub precision: f64,
    pub recall: f64,
}

/// One point per threshold, using detections with score strictly above it.
pub fn precision_recall_curve(
    pred: &[CellPoint],
    truth: &[CellPoint],
    radius: f64,
    thresholds: &[f64],
) -> Result<Vec<PrPoint>> {
    if thresholds.windows(2).any(|w| !(w[0] <= w[1])) {
        return Err(Error::param("thresholds", "must be sorted ascending"));
    }
    let mut out = Vec::with_capacity(thresholds.len());
    for &t in thresholds {
        let kept: Vec<CellPoint> = pred.iter().copied().filter(|p| p.score > t).collect();
        let m = match_detections(&kept, truth, radius)?;
        out.push(PrPoint {
            threshold: t,
            precision: m.precision(),
            recall: m.recall(),
        });
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SegmentationMetrics {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub iou: f64,
}

/// Pixel-set precision, recall, F1 and IoU. Empty sets score 1 where the
/// ratio is undefined.
pub fn segmentation_metrics(pred: &Mask2D, truth: &Mask2D) -> Result<SegmentationMetrics> {
    if pred.dims() != truth.dims() {
        return Err(Error::shape(truth.dims(), pred.dims()));
    }
    let (mut inter, mut np, mut nt) = (0usize, 0usize, 0usize);
    for (&p, &t) in pred.data().iter().zip(truth.data()) {
        np += usize::from(p);
        nt += usize::from(t);
        inter += usize::from(p && t);
    }
    let ratio = |a: usize, b: usize| if b == 0 { 1.0 } else { a as f64 / b as f64 };
    let union = np + nt - inter;
    Ok(SegmentationMetrics {
        precision: ratio(inter, np),
        recall: ratio(inter, nt),
        f1: ratio(2 * inter, np + nt),
        iou: ratio(inter, union),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn pt(x: usize, y: usize, score: f64) -> CellPoint {
        CellPoint { x, y, z: 0, score }
    }

    #[test]
    fn exact_prediction_matches_all() {
        let truth = vec![pt(3, 4, 0.0), pt(20, 9, 0.0), pt(40, 40, 0.0)];
        let m = match_detections(&truth, &truth, 4.0).unwrap();
        assert_eq!((m.tp, m.fp, m.fn_), (3, 0, 0));
        let e = match_detections(&[], &truth, 4.0).unwrap();
        assert_eq!((e.tp, e.fp, e.fn_), (0, 0, 3));
        assert!(match_detections(&[], &truth, 0.0).is_err());
    }

    #[test]
    fn higher_scores_claim_first() {
        let truth = vec![pt(10, 10, 0.0)];
        let pred = vec![pt(12, 10, 0.3), pt(11, 10, 0.9)];
        let m = match_detections(&pred, &truth, 4.0).unwrap();
        assert_eq!(m.pairs, vec![(1, 0)]);
        assert_eq!(m.fp, 1);
    }

    #[test]
    fn different_slices_never_match() {
        let truth = vec![CellPoint { x: 5, y: 5, z: 1, score: 0.0 }];
        let m = match_detections(&[pt(5, 5, 1.0)], &truth, 4.0).unwrap();
        assert_eq!(m.tp, 0);
    }

    #[test]
    fn pr_conventions() {
        let truth = vec![pt(3, 3, 0.0), pt(30, 30, 0.0)];
        let pred = vec![pt(3, 3, 0.8), pt(30, 31, 0.6)];
        let c = precision_recall_curve(&pred, &truth, 4.0, &[0.0, 0.7, 0.9]).unwrap();
        assert_eq!((c[0].precision, c[0].recall), (1.0, 1.0));
        assert_eq!((c[1].precision, c[1].recall), (1.0, 0.5));
        assert_eq!((c[2].precision, c[2].recall), (1.0, 0.0));
        assert!(precision_recall_curve(&pred, &truth, 4.0, &[0.5, 0.1]).is_err());
    }

    #[test]
    fn segmentation_conventions() {
        let e = Mask2D::empty(4, 4);
        let m = segmentation_metrics(&e, &e).unwrap();
        assert_eq!((m.precision, m.recall, m.f1, m.iou), (1.0, 1.0, 1.0, 1.0));
        let t = Mask2D::from_fn(4, 4, |x, _| x == 0);
        assert_eq!(segmentation_metrics(&t, &t).unwrap().iou, 1.0);
        let r = segmentation_metrics(&e, &t).unwrap();
        assert_eq!((r.recall, r.f1, r.iou), (0.0, 0.0, 0.0));
        assert!(segmentation_metrics(&Mask2D::empty(3, 4), &t).is_err());
    }

    /// Maximum cardinality of a matching by exhaustive search.
    fn optimal_matches(pred: &[CellPoint], truth: &[CellPoint], r: f64) -> usize {
        fn go(i: usize, pred: &[CellPoint], truth: &[CellPoint], used: &mut Vec<bool>, r2: f64) -> usize {
            if i == pred.len() {
                return 0;
            }
            let mut best = go(i + 1, pred, truth, used, r2);
            for j in 0..truth.len() {
                let dx = pred[i].x as f64 - truth[j].x as f64;
                let dy = pred[i].y as f64 - truth[j].y as f64;
                if !used[j] && dx * dx + dy * dy <= r2 {
                    used[j] = true;
                    best = best.max(1 + go(i + 1, pred, truth, used, r2));
                    used[j] = false;
                }
            }
            best
        }
        go(0, pred, truth, &mut vec![false; truth.len()], r * r)
    }

    #[test]
    fn greedy_can_trail_optimal_by_two() {
        let pred = vec![pt(1, 10, 0.0), pt(6, 12, 0.8), pt(1, 14, 0.0), pt(2, 9, 0.6)];
        let truth = vec![pt(9, 10, 0.0), pt(0, 7, 0.0), pt(4, 12, 0.0), pt(2, 5, 0.0)];
        assert_eq!(match_detections(&pred, &truth, 4.0).unwrap().tp, 2);
        assert_eq!(optimal_matches(&pred, &truth, 4.0), 4);
    }

    #[test]
    fn greedy_is_within_one_of_optimal_on_sparse_instances() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(12);
        let (mut within, trials) = (0, 2000);
        for _ in 0..trials {
            let np = rng.random_range(0..=8);
            let nt = rng.random_range(0..=8);
            let pred: Vec<CellPoint> = (0..np)
                .map(|_| pt(rng.random_range(0..64), rng.random_range(0..64), rng.random()))
                .collect();
            let truth: Vec<CellPoint> = (0..nt)
                .map(|_| pt(rng.random_range(0..64), rng.random_range(0..64), 0.0))
                .collect();
            let m = match_detections(&pred, &truth, 4.0).unwrap();
            let opt = optimal_matches(&pred, &truth, 4.0);
            assert!(m.tp <= opt);
            within += usize::from(m.tp + 1 >= opt);
        }
        assert_eq!(within, trials);
    }

    proptest! {
        #[test]
        fn greedy_is_maximal_and_at_least_half_optimal(
            p in proptest::collection::vec((0usize..16, 0usize..16, 0.0f64..1.0), 0..8),
            t in proptest::collection::vec((0usize..16, 0usize..16), 0..8),
        ) {
            let pred: Vec<CellPoint> = p.iter().map(|&(x, y, s)| pt(x, y, s)).collect();
            let truth: Vec<CellPoint> = t.iter().map(|&(x, y)| pt(x, y, 0.0)).collect();
            let m = match_detections(&pred, &truth, 4.0).unwrap();
            let opt = optimal_matches(&pred, &truth, 4.0);
            prop_assert!(m.tp <= opt && 2 * m.tp >= opt);
            prop_assert_eq!(m.tp + m.fp, pred.len());
            prop_assert_eq!(m.tp + m.fn_, truth.len());
            // no unmatched prediction could still take an unmatched truth point
            let used_p: Vec<usize> = m.pairs.iter().map(|q| q.0).collect();
            let used_t: Vec<usize> = m.pairs.iter().map(|q| q.1).collect();
            for (i, a) in pred.iter().enumerate().filter(|(i, _)| !used_p.contains(i)) {
                for (_, b) in truth.iter().enumerate().filter(|(j, _)| !used_t.contains(j)) {
                    let (dx, dy) = (a.x as f64 - b.x as f64, a.y as f64 - b.y as f64);
                    prop_assert!(dx * dx + dy * dy > 16.0, "prediction {} left unmatched", i);
                }
            }
        }

        #[test]
        fn greedy_is_optimal_when_truth_is_well_separated(
            p in proptest::collection::vec((0usize..60, 0usize..60, 0.0f64..1.0), 0..8),
            t in proptest::collection::vec((0usize..6, 0usize..6), 0..8),
        ) {
            // truth on a 10-px lattice: no prediction is within 4 px of two
            let pred: Vec<CellPoint> = p.iter().map(|&(x, y, s)| pt(x, y, s)).collect();
            let mut truth: Vec<CellPoint> = t.iter().map(|&(i, j)| pt(5 + 10 * i, 5 + 10 * j, 0.0)).collect();
            truth.dedup_by_key(|c| (c.x, c.y));
            let m = match_detections(&pred, &truth, 4.0).unwrap();
            prop_assert_eq!(m.tp, optimal_matches(&pred, &truth, 4.0));
        }

        #[test]
        fn pr_curve_matches_recount(
            p in proptest::collection::vec((0usize..30, 0usize..30, 0.0f64..1.0), 0..15),
            t in proptest::collection::vec((0usize..30, 0usize..30), 1..10),
        ) {
            let pred: Vec<CellPoint> = p.iter().map(|&(x, y, s)| pt(x, y, s)).collect();
            let truth: Vec<CellPoint> = t.iter().map(|&(x, y)| pt(x, y, 0.0)).collect();
            let ths: Vec<f64> = (0..11).map(|i| i as f64 / 10.0).collect();
            let curve = precision_recall_curve(&pred, &truth, 4.0, &ths).unwrap();
            for (c, &th) in curve.iter().zip(&ths) {
                let kept: Vec<CellPoint> = pred.iter().copied().filter(|q| q.score > th).collect();
                let m = match_detections(&kept, &truth, 4.0).unwrap();
                let prec = if kept.is_empty() { 1.0 } else { m.tp as f64 / kept.len() as f64 };
                prop_assert_eq!(c.precision, prec);
                prop_assert_eq!(c.recall, m.tp as f64 / truth.len() as f64);
                prop_assert!((0.0..=1.0).contains(&c.precision));
            }
            for w in curve.windows(2) {
                prop_assert!(w[1].recall <= w[0].recall);
            }
        }

        #[test]
        fn segmentation_matches_set_counts(
            a in proptest::collection::vec(any::<bool>(), 64),
            b in proptest::collection::vec(any::<bool>(), 64),
        ) {
            let (p, t) = (Mask2D::from_vec(8, 8, a.clone()).unwrap(), Mask2D::from_vec(8, 8, b.clone()).unwrap());
            let m = segmentation_metrics(&p, &t).unwrap();
            let inter = (0..64).filter(|&i| a[i] && b[i]).count() as f64;
            let uni = (0..64).filter(|&i| a[i] || b[i]).count() as f64;
            let (np, nt) = (a.iter().filter(|&&v| v).count() as f64, b.iter().filter(|&&v| v).count() as f64);
            if np > 0.0 { prop_assert_eq!(m.precision, inter / np); }
            if nt > 0.0 { prop_assert_eq!(m.recall, inter / nt); }
            if uni > 0.0 {
                prop_assert_eq!(m.iou, inter / uni);
                prop_assert_eq!(m.f1, 2.0 * inter / (np + nt));
            }
        }
    }
}
