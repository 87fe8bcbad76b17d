use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use super::ap::{average_precision, class_agnostic, ground_truth, mean_ap, pr_curve, recall, ClassAp, GtBox};
use super::ciou::{auc_thresholds, binarized_ciou, localization_auc, success_rate};
use super::matching::{hungarian_match, kshot_match, purity, ClusterItem, ContingencyTable, Matching};
use crate::detector::{iou, nms, Detection};
use crate::error::{Error, Result};
use crate::pseudolabel::PseudoAnnotation;
use crate::ssl::LabelRecord;
use crate::synthdata::Scene;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatchingSummary {
    pub hungarian: Vec<Option<usize>>,
    pub accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KShotSummary {
    pub mapping: Vec<Option<usize>>,
    pub accuracy: f64,
    pub map50: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Diagnostics {
    pub n_test: usize,
    pub det_agnostic_ap50: f64,
    pub selfbox_agnostic_ap50: f64,
    pub recall_sounding: f64,
    pub recall_silent: f64,
    /// Single-object test scenes whose self-box reaches IoU 0.3 with the
    /// sounding object.
    pub selfbox_iou30_rate: f64,
    pub selfbox_iou30_scenes: usize,
}

/// Metric report. Detection metrics use Hungarian-matched labels; cIoU uses
/// the union of detections scoring at least `score_thresh` against the
/// union of all ground-truth objects, rasterized at pixel resolution.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub per_class_ap: BTreeMap<usize, ClassAp>,
    pub map30: f64,
    pub map50: f64,
    pub map_coco: f64,
    /// Matched mAP at each configured IoU threshold, keyed by the threshold.
    pub map_at: BTreeMap<String, f64>,
    pub ciou30_rate: f64,
    pub auc: f64,
    pub purity: f64,
    pub matching: MatchingSummary,
    pub kshot: BTreeMap<usize, KShotSummary>,
    pub diagnostics: Diagnostics,
}

pub struct EvalInputs<'a> {
    pub train: &'a [Scene],
    pub train_labels: &'a [LabelRecord],
    pub test: &'a [Scene],
    pub detections: &'a [Detection],
    /// Self-annotations extracted on the test scenes.
    pub self_boxes: &'a [PseudoAnnotation],
    pub k_pred: usize,
    pub k_true: usize,
    pub score_thresh: f64,
    /// Overlap threshold for suppressing duplicates once labels are dropped.
    pub agnostic_nms: f64,
    pub kshot_m: &'a [usize],
    pub iou_thresholds: &'a [f64],
}

fn cluster_items(train: &[Scene], labels: &[LabelRecord]) -> Result<Vec<ClusterItem>> {
    let by_id: BTreeMap<u64, &Scene> = train.iter().map(|s| (s.scene_id, s)).collect();
    labels
        .iter()
        .map(|l| {
            let s = by_id
                .get(&l.scene_id)
                .ok_or_else(|| Error::ConfigInvalid(format!("label for unknown scene {}", l.scene_id)))?;
            Ok(ClusterItem {
                cluster: l.label,
                strength: l.strength,
                label: s.sounding().class_id,
            })
        })
        .collect()
}

/// Renames cluster labels through `m`, dropping detections of unmapped clusters.
pub fn relabel(detections: &[Detection], m: &Matching) -> Vec<Detection> {
    detections
        .iter()
        .filter_map(|d| m.get(d.label).map(|c| Detection { label: c, ..*d }))
        .collect()
}

/// Drops labels and suppresses cross-class duplicates within each scene.
pub fn agnostic_detections(detections: &[Detection], nms_thresh: f64) -> Vec<Detection> {
    let mut by_scene: BTreeMap<u64, Vec<Detection>> = BTreeMap::new();
    for d in detections {
        by_scene.entry(d.scene_id).or_default().push(Detection { label: 0, ..*d });
    }
    by_scene.values().flat_map(|ds| nms(ds, nms_thresh)).collect()
}

pub fn self_box_detections(annotations: &[PseudoAnnotation]) -> Vec<Detection> {
    annotations
        .iter()
        .map(|a| Detection {
            scene_id: a.scene_id,
            bbox: a.bbox,
            label: a.label,
            score: a.confidence,
        })
        .collect()
}

pub fn per_scene_ciou(test: &[Scene], detections: &[Detection], score_thresh: f64) -> Vec<f64> {
    let mut by_scene: BTreeMap<u64, Vec<Detection>> = BTreeMap::new();
    for d in detections {
        by_scene.entry(d.scene_id).or_default().push(*d);
    }
    test.iter()
        .map(|s| {
            let gt: Vec<_> = s.objects.iter().map(|o| o.bbox).collect();
            let dets = by_scene.get(&s.scene_id).map_or(&[][..], |v| v.as_slice());
            binarized_ciou(dets, score_thresh, &gt, (s.height(), s.width()))
        })
        .collect()
}

fn selfbox_rate(test: &[Scene], self_boxes: &[PseudoAnnotation]) -> (f64, usize) {
    let mut by_scene: BTreeMap<u64, Vec<&PseudoAnnotation>> = BTreeMap::new();
    for a in self_boxes {
        by_scene.entry(a.scene_id).or_default().push(a);
    }
    let single: Vec<&Scene> = test.iter().filter(|s| s.objects.len() == 1).collect();
    if single.is_empty() {
        return (0.0, 0);
    }
    let hits = single
        .iter()
        .filter(|s| {
            let target = s.sounding().bbox;
            by_scene
                .get(&s.scene_id)
                .is_some_and(|anns| anns.iter().any(|a| iou(&a.bbox, &target) >= 0.3))
        })
        .count();
    (hits as f64 / single.len() as f64, single.len())
}

/// Unweighted mean over ground-truth classes of AP at `iou_thresh`.
pub fn map_at(detections: &[Detection], gt: &[GtBox], iou_thresh: f64) -> f64 {
    let classes: std::collections::BTreeSet<usize> = gt.iter().map(|g| g.label).collect();
    if classes.is_empty() {
        return 0.0;
    }
    classes
        .iter()
        .map(|&c| {
            let d: Vec<Detection> = detections.iter().filter(|d| d.label == c).copied().collect();
            let g: Vec<GtBox> = gt.iter().filter(|g| g.label == c).copied().collect();
            average_precision(&d, &g, iou_thresh)
        })
        .sum::<f64>()
        / classes.len() as f64
}

pub fn evaluate(inp: &EvalInputs<'_>) -> Result<EvalReport> {
    let items = cluster_items(inp.train, inp.train_labels)?;
    let table = ContingencyTable::from_pairs(inp.k_pred, inp.k_true, items.iter().map(|i| (i.cluster, i.label)))?;
    let hungarian = hungarian_match(&table);
    let gt: Vec<GtBox> = ground_truth(inp.test);

    let relabelled = relabel(inp.detections, &hungarian);
    let matched = mean_ap(&relabelled, &gt);
    let map_at = inp
        .iou_thresholds
        .iter()
        .map(|&t| (format!("{t}"), map_at(&relabelled, &gt, t)))
        .collect();
    let mut kshot = BTreeMap::new();
    for &m in inp.kshot_m {
        let mapping = kshot_match(&items, inp.k_pred, inp.k_true, m)?;
        kshot.insert(
            m,
            KShotSummary {
                accuracy: table.accuracy(&mapping),
                map50: mean_ap(&relabel(inp.detections, &mapping), &gt).map50,
                mapping: mapping.map,
            },
        );
    }

    let ciou = per_scene_ciou(inp.test, inp.detections, inp.score_thresh);
    let (dets_a, gt_a) = class_agnostic(&agnostic_detections(inp.detections, inp.agnostic_nms), &gt);
    let (self_a, _) = class_agnostic(&self_box_detections(inp.self_boxes), &gt);
    let kept: Vec<Detection> = inp.detections.iter().filter(|d| d.score >= inp.score_thresh).copied().collect();
    let (rate, scenes) = selfbox_rate(inp.test, inp.self_boxes);

    Ok(EvalReport {
        per_class_ap: matched.per_class,
        map30: matched.map30,
        map50: matched.map50,
        map_coco: matched.map_coco,
        map_at,
        ciou30_rate: success_rate(&ciou, 0.3),
        auc: localization_auc(&ciou, &auc_thresholds()),
        purity: purity(&table)?,
        matching: MatchingSummary {
            accuracy: table.accuracy(&hungarian),
            hungarian: hungarian.map,
        },
        kshot,
        diagnostics: Diagnostics {
            n_test: inp.test.len(),
            det_agnostic_ap50: mean_ap(&dets_a, &gt_a).map50,
            selfbox_agnostic_ap50: mean_ap(&self_a, &gt_a).map50,
            recall_sounding: recall(&kept, &gt, 0.5, |g| g.sounding),
            recall_silent: recall(&kept, &gt, 0.5, |g| !g.sounding),
            selfbox_iou30_rate: rate,
            selfbox_iou30_scenes: scenes,
        },
    })
}

/// Plain-text summary laid out as `method | mAP30 | mAP50 | mAP` followed by
/// per-class AP50 and the localisation columns.
pub fn text_table(r: &EvalReport) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "{:<16} {:>7} {:>7} {:>7}", "method", "mAP30", "mAP50", "mAP");
    let _ = writeln!(
        s,
        "{:<16} {:>7.1} {:>7.1} {:>7.1}",
        "detector",
        100.0 * r.map30,
        100.0 * r.map50,
        100.0 * r.map_coco
    );
    for (m, k) in &r.kshot {
        let _ = writeln!(s, "{:<16} {:>7} {:>7.1} {:>7}", format!("{m}-shot"), "", 100.0 * k.map50, "");
    }
    let _ = writeln!(s);
    let _ = writeln!(s, "{:<8} {:>7} {:>7} {:>7}", "class", "AP30", "AP50", "AP");
    for (c, a) in &r.per_class_ap {
        let _ = writeln!(
            s,
            "{:<8} {:>7.1} {:>7.1} {:>7.1}",
            c,
            100.0 * a.ap30,
            100.0 * a.ap50,
            100.0 * a.ap_coco
        );
    }
    let _ = writeln!(s);
    let _ = writeln!(s, "cIoU-0.3 {:.3}  AUC {:.3}", r.ciou30_rate, r.auc);
    let _ = writeln!(s, "cluster accuracy {:.3}  purity {:.3}", r.matching.accuracy, r.purity);
    let d = &r.diagnostics;
    let _ = writeln!(
        s,
        "class-agnostic AP50: detector {:.3}  self-boxes {:.3}",
        d.det_agnostic_ap50, d.selfbox_agnostic_ap50
    );
    let _ = writeln!(s, "recall@0.5: sounding {:.3}  silent {:.3}", d.recall_sounding, d.recall_silent);
    let _ = writeln!(
        s,
        "self-box IoU>=0.3 on single-object scenes: {:.3} ({} scenes)",
        d.selfbox_iou30_rate, d.selfbox_iou30_scenes
    );
    s
}

/// Per-class precision-recall points at IoU 0.5 as `recall\tprecision` rows.
pub fn pr_curves(detections: &[Detection], matching: &Matching, test: &[Scene]) -> BTreeMap<usize, String> {
    let dets = relabel(detections, matching);
    let gt = ground_truth(test);
    let classes: std::collections::BTreeSet<usize> = gt.iter().map(|g| g.label).collect();
    classes
        .into_iter()
        .map(|c| {
            let d: Vec<Detection> = dets.iter().filter(|d| d.label == c).copied().collect();
            let g: Vec<GtBox> = gt.iter().filter(|g| g.label == c).copied().collect();
            let mut out = String::from("recall\tprecision\n");
            for (r, p) in pr_curve(&d, &g, 0.5) {
                let _ = writeln!(out, "{r}\t{p}");
            }
            (c, out)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthdata::{generate_dataset, DatasetConfig};

    fn data() -> (Vec<Scene>, Vec<Scene>) {
        let d = generate_dataset(&DatasetConfig {
            n_train: 40,
            n_test: 20,
            ..DatasetConfig::default()
        })
        .unwrap();
        (d.train, d.test)
    }

    /// Ground truth relabelled through a cluster permutation.
    fn oracle_run(train: &[Scene], test: &[Scene], perm: &[usize]) -> (Vec<LabelRecord>, Vec<Detection>, Vec<PseudoAnnotation>) {
        let labels = train
            .iter()
            .map(|s| LabelRecord {
                scene_id: s.scene_id,
                label: perm[s.sounding().class_id],
                strength: 1.0,
            })
            .collect();
        let dets = test
            .iter()
            .flat_map(|s| {
                s.objects.iter().map(|o| Detection {
                    scene_id: s.scene_id,
                    bbox: o.bbox,
                    label: perm[o.class_id],
                    score: 0.9,
                })
            })
            .collect();
        let selfb = test
            .iter()
            .map(|s| PseudoAnnotation {
                scene_id: s.scene_id,
                bbox: s.sounding().bbox,
                label: perm[s.sounding().class_id],
                confidence: 1.0,
                beta: 0.8,
            })
            .collect();
        (labels, dets, selfb)
    }

    #[test]
    fn perfect_run_scores_one_under_any_permutation() {
        let (train, test) = data();
        for perm in [[0, 1, 2, 3], [2, 0, 3, 1]] {
            let (labels, dets, selfb) = oracle_run(&train, &test, &perm);
            let r = evaluate(&EvalInputs {
                train: &train,
                train_labels: &labels,
                test: &test,
                detections: &dets,
                self_boxes: &selfb,
                k_pred: 4,
                k_true: 4,
                score_thresh: 0.25,
                agnostic_nms: 0.5,
                kshot_m: &[1, 10],
                iou_thresholds: &[0.3, 0.5],
            })
            .unwrap();
            assert_eq!(r.map50, 1.0);
            assert_eq!(r.map_at["0.3"], 1.0);
            assert_eq!(r.map_coco, 1.0);
            assert_eq!(r.matching.accuracy, 1.0);
            assert_eq!(r.purity, 1.0);
            assert_eq!(r.kshot[&1].map50, 1.0);
            assert_eq!(r.auc, 1.0);
            assert_eq!(r.ciou30_rate, 1.0);
            assert_eq!(r.diagnostics.recall_silent, 1.0);
            assert_eq!(r.diagnostics.selfbox_iou30_rate, 1.0);
            assert_eq!(r.diagnostics.det_agnostic_ap50, 1.0);
            assert!(r.diagnostics.selfbox_agnostic_ap50 < 1.0 || test.iter().all(|s| s.objects.len() == 1));
            assert!(text_table(&r).contains("mAP50"));
        }
    }

    #[test]
    fn report_is_deterministic_json() {
        let (train, test) = data();
        let (labels, dets, selfb) = oracle_run(&train, &test, &[1, 0, 3, 2]);
        let inp = EvalInputs {
            train: &train,
            train_labels: &labels,
            test: &test,
            detections: &dets,
            self_boxes: &selfb,
            k_pred: 4,
            k_true: 4,
            score_thresh: 0.25,
            agnostic_nms: 0.5,
            kshot_m: &[1],
            iou_thresholds: &[0.5],
        };
        let a = serde_json::to_string(&evaluate(&inp).unwrap()).unwrap();
        let b = serde_json::to_string(&evaluate(&inp).unwrap()).unwrap();
        assert_eq!(a, b);
        let back: EvalReport = serde_json::from_str(&a).unwrap();
        assert_eq!(serde_json::to_string(&back).unwrap(), a);
    }

    #[test]
    fn pr_curve_files_have_headers() {
        let (train, test) = data();
        let (_, dets, _) = oracle_run(&train, &test, &[0, 1, 2, 3]);
        let curves = pr_curves(&dets, &Matching::identity(4), &test);
        assert!(!curves.is_empty());
        assert!(curves.values().all(|c| c.starts_with("recall\tprecision\n")));
    }

    #[test]
    fn unmapped_clusters_are_dropped() {
        let d = Detection {
            scene_id: 0,
            bbox: [0.0, 0.0, 1.0, 1.0].into(),
            label: 1,
            score: 0.5,
        };
        let m = Matching { map: vec![Some(0), None] };
        assert!(relabel(&[d], &m).is_empty());
        assert_eq!(relabel(&[Detection { label: 0, ..d }], &m)[0].label, 0);
    }

    #[test]
    fn agnostic_view_merges_cross_class_duplicates_per_scene() {
        let d = |scene_id, label, score| Detection {
            scene_id,
            bbox: [0.0, 0.0, 4.0, 4.0].into(),
            label,
            score,
        };
        let out = agnostic_detections(&[d(0, 1, 0.9), d(0, 2, 0.6), d(1, 2, 0.7)], 0.5);
        assert_eq!(out, vec![d(0, 0, 0.9), d(1, 0, 0.7)]);
    }
}
