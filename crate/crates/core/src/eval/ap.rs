use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::detector::{iou, Detection};
use crate::synthdata::{BBox, Scene};

/// One annotated test object.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GtBox {
    pub scene_id: u64,
    #[serde(rename = "box")]
    pub bbox: BBox,
    pub label: usize,
    pub sounding: bool,
}

pub fn ground_truth(scenes: &[Scene]) -> Vec<GtBox> {
    scenes
        .iter()
        .flat_map(|s| {
            s.objects.iter().map(move |o| GtBox {
                scene_id: s.scene_id,
                bbox: o.bbox,
                label: o.class_id,
                sounding: o.sounding,
            })
        })
        .collect()
}

/// Per-detection outcome of greedy matching, in ranked order.
#[derive(Debug, Clone, PartialEq)]
pub struct MatchResult {
    /// Detection indices sorted by descending score (input order on ties).
    pub ranked: Vec<usize>,
    pub tp: Vec<bool>,
    /// For every ground-truth box, the ranked position of its match.
    pub gt_matched: Vec<Option<usize>>,
}

/// Each detection in score order takes the unmatched same-scene, same-class
/// ground truth with the highest IoU (first on ties) if that IoU reaches
/// `iou_thresh`.
pub fn greedy_match(detections: &[Detection], gt: &[GtBox], iou_thresh: f64) -> MatchResult {
    let mut ranked: Vec<usize> = (0..detections.len()).collect();
    ranked.sort_by(|&a, &b| detections[b].score.total_cmp(&detections[a].score).then(a.cmp(&b)));
    let mut by_key: BTreeMap<(u64, usize), Vec<usize>> = BTreeMap::new();
    for (g, b) in gt.iter().enumerate() {
        by_key.entry((b.scene_id, b.label)).or_default().push(g);
    }
    let mut gt_matched = vec![None; gt.len()];
    let mut tp = Vec::with_capacity(ranked.len());
    for (pos, &d) in ranked.iter().enumerate() {
        let det = &detections[d];
        let mut best: Option<(f64, usize)> = None;
        if let Some(cands) = by_key.get(&(det.scene_id, det.label)) {
            for &g in cands {
                if gt_matched[g].is_some() {
                    continue;
                }
                let v = iou(&det.bbox, &gt[g].bbox);
                if v >= iou_thresh && best.is_none_or(|(bv, _)| v > bv) {
                    best = Some((v, g));
                }
            }
        }
        match best {
            Some((_, g)) => {
                gt_matched[g] = Some(pos);
                tp.push(true);
            }
            None => tp.push(false),
        }
    }
    MatchResult {
        ranked,
        tp,
        gt_matched,
    }
}

/// `(recall, precision)` after each ranked detection.
pub fn pr_curve(detections: &[Detection], gt: &[GtBox], iou_thresh: f64) -> Vec<(f64, f64)> {
    let m = greedy_match(detections, gt, iou_thresh);
    let n_gt = gt.len().max(1) as f64;
    let mut hits = 0usize;
    m.tp
        .iter()
        .enumerate()
        .map(|(i, &t)| {
            hits += t as usize;
            (hits as f64 / n_gt, hits as f64 / (i + 1) as f64)
        })
        .collect()
}

/// All-point interpolated AP: area under the precision envelope. Defined as
/// 1 with no ground truth and no detections, 0 with detections only.
pub fn average_precision(detections: &[Detection], gt: &[GtBox], iou_thresh: f64) -> f64 {
    if gt.is_empty() {
        return if detections.is_empty() { 1.0 } else { 0.0 };
    }
    let curve = pr_curve(detections, gt, iou_thresh);
    let mut envelope: Vec<f64> = curve.iter().map(|&(_, p)| p).collect();
    for i in (0..envelope.len().saturating_sub(1)).rev() {
        envelope[i] = envelope[i].max(envelope[i + 1]);
    }
    let mut ap = 0.0;
    let mut prev_recall = 0.0;
    for (&(r, _), &p) in curve.iter().zip(&envelope) {
        ap += (r - prev_recall) * p;
        prev_recall = r;
    }
    ap.clamp(0.0, 1.0)
}

pub const COCO_THRESHOLDS: [f64; 10] = [0.5, 0.55, 0.6, 0.65, 0.7, 0.75, 0.8, 0.85, 0.9, 0.95];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassAp {
    pub ap30: f64,
    pub ap50: f64,
    pub ap_coco: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MapReport {
    pub per_class: BTreeMap<usize, ClassAp>,
    pub map30: f64,
    pub map50: f64,
    pub map_coco: f64,
}

fn only_class<T: Copy>(items: &[T], class: usize, label: impl Fn(&T) -> usize) -> Vec<T> {
    items.iter().copied().filter(|x| label(x) == class).collect()
}

/// Per-class AP at IoU 0.3, 0.5 and averaged over 0.5:0.95, and their
/// unweighted means over the classes present in `gt`.
pub fn mean_ap(detections: &[Detection], gt: &[GtBox]) -> MapReport {
    let classes: std::collections::BTreeSet<usize> = gt.iter().map(|g| g.label).collect();
    let per_class: BTreeMap<usize, ClassAp> = classes
        .iter()
        .map(|&c| {
            let d = only_class(detections, c, |d| d.label);
            let g = only_class(gt, c, |g| g.label);
            let coco = COCO_THRESHOLDS
                .iter()
                .map(|&t| average_precision(&d, &g, t))
                .sum::<f64>()
                / COCO_THRESHOLDS.len() as f64;
            (
                c,
                ClassAp {
                    ap30: average_precision(&d, &g, 0.3),
                    ap50: average_precision(&d, &g, 0.5),
                    ap_coco: coco,
                },
            )
        })
        .collect();
    let n = per_class.len().max(1) as f64;
    let mean = |f: fn(&ClassAp) -> f64| per_class.values().map(f).sum::<f64>() / n;
    MapReport {
        map30: mean(|a| a.ap30),
        map50: mean(|a| a.ap50),
        map_coco: mean(|a| a.ap_coco),
        per_class,
    }
}

/// Relabels everything to class 0.
pub fn class_agnostic(detections: &[Detection], gt: &[GtBox]) -> (Vec<Detection>, Vec<GtBox>) {
    (
        detections.iter().map(|d| Detection { label: 0, ..*d }).collect(),
        gt.iter().map(|g| GtBox { label: 0, ..*g }).collect(),
    )
}

/// Fraction of `gt` boxes (filtered by `keep`) hit by any detection of any
/// class at IoU ≥ `iou_thresh`.
pub fn recall(detections: &[Detection], gt: &[GtBox], iou_thresh: f64, keep: impl Fn(&GtBox) -> bool) -> f64 {
    let mut by_scene: BTreeMap<u64, Vec<&Detection>> = BTreeMap::new();
    for d in detections {
        by_scene.entry(d.scene_id).or_default().push(d);
    }
    let (mut hit, mut total) = (0usize, 0usize);
    for g in gt.iter().filter(|g| keep(g)) {
        total += 1;
        if by_scene
            .get(&g.scene_id)
            .is_some_and(|ds| ds.iter().any(|d| iou(&d.bbox, &g.bbox) >= iou_thresh))
        {
            hit += 1;
        }
    }
    if total == 0 {
        0.0
    } else {
        hit as f64 / total as f64
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn gt(scene: u64, b: [f64; 4], label: usize) -> GtBox {
        GtBox {
            scene_id: scene,
            bbox: b.into(),
            label,
            sounding: true,
        }
    }

    fn det(scene: u64, b: [f64; 4], label: usize, score: f64) -> Detection {
        Detection {
            scene_id: scene,
            bbox: b.into(),
            label,
            score,
        }
    }

    #[test]
    fn ap_examples() {
        let g = vec![gt(0, [0.0, 0.0, 4.0, 4.0], 0), gt(1, [2.0, 2.0, 6.0, 6.0], 0)];
        let perfect: Vec<Detection> = g.iter().map(|g| det(g.scene_id, g.bbox.corners(), 0, 0.9)).collect();
        assert_eq!(average_precision(&perfect, &g, 0.5), 1.0);
        assert_eq!(average_precision(&[], &g, 0.5), 0.0);
        let one = vec![gt(0, [0.0, 0.0, 4.0, 4.0], 0)];
        let ranked = vec![det(0, [0.0, 0.0, 4.0, 4.0], 0, 0.9), det(0, [10.0, 10.0, 12.0, 12.0], 0, 0.5)];
        assert_eq!(average_precision(&ranked, &one, 0.5), 1.0);
        assert_eq!(average_precision(&[], &[], 0.5), 1.0);
        assert_eq!(average_precision(&ranked, &[], 0.5), 0.0);
    }

    #[test]
    fn map_examples() {
        let g = vec![gt(0, [0.0, 0.0, 4.0, 4.0], 0), gt(0, [8.0, 8.0, 12.0, 12.0], 1)];
        let d = vec![det(0, [0.0, 0.0, 4.0, 4.0], 0, 0.9), det(0, [20.0, 20.0, 24.0, 24.0], 1, 0.9), det(0, [1.0, 1.0, 2.0, 2.0], 3, 0.9)];
        let r = mean_ap(&d, &g);
        assert_eq!(r.per_class.len(), 2);
        assert_eq!(r.per_class[&0], ClassAp { ap30: 1.0, ap50: 1.0, ap_coco: 1.0 });
        assert_eq!(r.map50, 0.5);
    }

    /// Independent formulation: mean over ground truths of the best
    /// precision attained at or after the rank where each is recalled.
    fn naive_ap(detections: &[Detection], gt: &[GtBox], t: f64) -> f64 {
        if gt.is_empty() {
            return if detections.is_empty() { 1.0 } else { 0.0 };
        }
        let mut order: Vec<usize> = (0..detections.len()).collect();
        order.sort_by(|&a, &b| detections[b].score.partial_cmp(&detections[a].score).unwrap().then(a.cmp(&b)));
        let mut used = vec![false; gt.len()];
        let mut flags = Vec::new();
        for &d in &order {
            let dd = &detections[d];
            let mut best = -1.0;
            let mut arg = None;
            for (g, gg) in gt.iter().enumerate() {
                if used[g] || gg.scene_id != dd.scene_id || gg.label != dd.label {
                    continue;
                }
                let v = iou(&dd.bbox, &gg.bbox);
                if v >= t && v > best {
                    best = v;
                    arg = Some(g);
                }
            }
            if let Some(g) = arg {
                used[g] = true;
            }
            flags.push(arg.is_some());
        }
        let prec: Vec<f64> = (0..flags.len())
            .map(|i| flags[..=i].iter().filter(|&&f| f).count() as f64 / (i + 1) as f64)
            .collect();
        let mut total = 0.0;
        for i in 0..flags.len() {
            if flags[i] {
                total += prec[i..].iter().cloned().fold(0.0, f64::max);
            }
        }
        total / gt.len() as f64
    }

    pub(crate) fn random_case(rng: &mut ChaCha8Rng) -> (Vec<Detection>, Vec<GtBox>) {
        let bx = |rng: &mut ChaCha8Rng| {
            let x = rng.random_range(0..24) as f64;
            let y = rng.random_range(0..24) as f64;
            [x, y, x + rng.random_range(2..9) as f64, y + rng.random_range(2..9) as f64]
        };
        let g: Vec<GtBox> = (0..rng.random_range(0..8))
            .map(|_| gt(rng.random_range(0..3), bx(rng), rng.random_range(0..2)))
            .collect();
        let mut d: Vec<Detection> = Vec::new();
        for _ in 0..rng.random_range(0..15) {
            if !g.is_empty() && rng.random::<f64>() < 0.5 {
                let t = g[rng.random_range(0..g.len())];
                let c = t.bbox.corners();
                let j = rng.random_range(-1.0..1.0);
                d.push(det(t.scene_id, [c[0] + j, c[1], c[2], c[3] + j], t.label, (rng.random_range(0..10) as f64) / 10.0));
            } else {
                d.push(det(rng.random_range(0..3), bx(rng), rng.random_range(0..2), (rng.random_range(0..10) as f64) / 10.0));
            }
        }
        (d, g)
    }

    #[test]
    fn ap_matches_naive_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        for _ in 0..100 {
            let (d, g) = random_case(&mut rng);
            for t in [0.3, 0.5, 0.75] {
                assert!((average_precision(&d, &g, t) - naive_ap(&d, &g, t)).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn recall_counts_any_class() {
        let g = vec![gt(0, [0.0, 0.0, 4.0, 4.0], 0), GtBox { sounding: false, ..gt(0, [8.0, 8.0, 12.0, 12.0], 1) }];
        let d = vec![det(0, [8.0, 8.0, 12.0, 12.0], 3, 0.5)];
        assert_eq!(recall(&d, &g, 0.5, |g| !g.sounding), 1.0);
        assert_eq!(recall(&d, &g, 0.5, |g| g.sounding), 0.0);
    }

    proptest! {
        #[test]
        fn ap_scale_invariant_and_monotone(seed in 0u64..10_000, scale in 0.01f64..100.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let (d, g) = random_case(&mut rng);
            let scaled: Vec<Detection> = d.iter().map(|x| Detection { score: x.score * scale, ..*x }).collect();
            let a = average_precision(&d, &g, 0.5);
            prop_assert!((a - average_precision(&scaled, &g, 0.5)).abs() < 1e-12);
            prop_assert!(a <= 1.0);
            let mut prev = f64::INFINITY;
            for t in [0.1, 0.3, 0.5, 0.7, 0.9] {
                let v = average_precision(&d, &g, t);
                prop_assert!(v <= prev + 1e-12);
                prev = v;
            }
        }
    }
}
