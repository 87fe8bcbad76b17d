use serde::{Deserialize, Serialize};

use crate::synthdata::BBox;

/// Intersection over union of two corner boxes; 0 when the union is empty.
pub fn iou_corners(a: &[f64; 4], b: &[f64; 4]) -> f64 {
    let iw = a[2].min(b[2]) - a[0].max(b[0]);
    let ih = a[3].min(b[3]) - a[1].max(b[1]);
    if iw <= 0.0 || ih <= 0.0 {
        return 0.0;
    }
    let inter = iw * ih;
    let area = |c: &[f64; 4]| (c[2] - c[0]).max(0.0) * (c[3] - c[1]).max(0.0);
    let union = area(a) + area(b) - inter;
    if union <= 0.0 {
        0.0
    } else {
        (inter / union).clamp(0.0, 1.0)
    }
}

pub fn iou(a: &BBox, b: &BBox) -> f64 {
    iou_corners(&a.corners(), &b.corners())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Anchor {
    pub cx: f64,
    pub cy: f64,
    pub width: f64,
    pub height: f64,
}

impl Anchor {
    pub fn bbox(&self) -> BBox {
        BBox::new(
            self.cx - self.width / 2.0,
            self.cy - self.height / 2.0,
            self.cx + self.width / 2.0,
            self.cy + self.height / 2.0,
        )
    }
}

pub const ASPECT_RATIOS: [f64; 3] = [0.5, 1.0, 1.5];

/// Anchors centred on every cell of a `grid_h × grid_w` grid with cell size
/// `stride` pixels, cell-major then ratio. Ratio `r` gives width
/// `base·√r` and height `base/√r`.
pub fn generate_anchors(grid: (usize, usize), stride: f64, base: f64, ratios: &[f64]) -> Vec<Anchor> {
    let (gh, gw) = grid;
    let mut out = Vec::with_capacity(gh * gw * ratios.len());
    for i in 0..gh {
        for j in 0..gw {
            for &r in ratios {
                out.push(Anchor {
                    cx: (j as f64 + 0.5) * stride,
                    cy: (i as f64 + 0.5) * stride,
                    width: base * r.sqrt(),
                    height: base / r.sqrt(),
                });
            }
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub scene_id: u64,
    #[serde(rename = "box")]
    pub bbox: BBox,
    pub label: usize,
    pub score: f64,
}

/// Greedy per-class suppression. Candidates are visited by descending
/// score, then ascending area, then input order; a candidate is kept iff its
/// IoU with every kept box of the same class is below `iou_thresh`. Output
/// is in visiting order.
pub fn nms(detections: &[Detection], iou_thresh: f64) -> Vec<Detection> {
    let mut order: Vec<usize> = (0..detections.len()).collect();
    order.sort_by(|&a, &b| {
        let (da, db) = (&detections[a], &detections[b]);
        db.score
            .total_cmp(&da.score)
            .then(da.bbox.area().total_cmp(&db.bbox.area()))
            .then(a.cmp(&b))
    });
    let mut kept: Vec<Detection> = Vec::new();
    for i in order {
        let d = detections[i];
        if kept
            .iter()
            .all(|k| k.label != d.label || iou(&k.bbox, &d.bbox) < iou_thresh)
        {
            kept.push(d);
        }
    }
    kept
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Counts lattice points at spacing `res` (cell centres) inside each box.
    fn raster_iou(a: &BBox, b: &BBox, res: f64) -> f64 {
        let lo_x = a.x1.min(b.x1);
        let hi_x = a.x2.max(b.x2);
        let lo_y = a.y1.min(b.y1);
        let hi_y = a.y2.max(b.y2);
        let nx = ((hi_x - lo_x) / res).ceil() as usize;
        let ny = ((hi_y - lo_y) / res).ceil() as usize;
        let (mut inter, mut union) = (0u64, 0u64);
        for yi in 0..ny {
            let y = lo_y + (yi as f64 + 0.5) * res;
            for xi in 0..nx {
                let x = lo_x + (xi as f64 + 0.5) * res;
                let (ia, ib) = (a.contains_point(x, y), b.contains_point(x, y));
                inter += (ia && ib) as u64;
                union += (ia || ib) as u64;
            }
        }
        if union == 0 {
            0.0
        } else {
            inter as f64 / union as f64
        }
    }

    #[test]
    fn iou_examples() {
        let a = BBox::new(0.0, 0.0, 2.0, 2.0);
        assert_eq!(iou(&a, &a), 1.0);
        assert_eq!(iou(&a, &BBox::new(5.0, 5.0, 6.0, 6.0)), 0.0);
        let b = BBox::new(1.0, 1.0, 3.0, 3.0);
        assert!((iou(&a, &b) - 1.0 / 7.0).abs() < 1e-12);
        assert!((raster_iou(&a, &b, 0.001) - 1.0 / 7.0).abs() < 1e-6);
    }

    #[test]
    fn iou_matches_raster_on_integer_boxes() {
        // integer corners make unit-lattice counting exact
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..1000 {
            let mut r = || {
                let x1 = rng.random_range(0..20) as f64;
                let y1 = rng.random_range(0..20) as f64;
                BBox::new(x1, y1, x1 + rng.random_range(1..12) as f64, y1 + rng.random_range(1..12) as f64)
            };
            let (a, b) = (r(), r());
            assert!((iou(&a, &b) - raster_iou(&a, &b, 1.0)).abs() <= 1e-12);
        }
    }

    #[test]
    fn anchor_grid() {
        let a = generate_anchors((8, 8), 4.0, 8.0, &ASPECT_RATIOS);
        assert_eq!(a.len(), 192);
        let sq = a[1];
        assert_eq!((sq.cx, sq.cy, sq.width, sq.height), (2.0, 2.0, 8.0, 8.0));
        for an in &a {
            assert!(an.width > 0.0 && an.height > 0.0);
            assert!((an.width * an.height - 64.0).abs() < 1e-9);
        }
        assert_eq!(a, generate_anchors((8, 8), 4.0, 8.0, &ASPECT_RATIOS));
        assert!((a[0].width / a[0].height - 0.5).abs() < 1e-12);
    }

    fn det(b: [f64; 4], label: usize, score: f64) -> Detection {
        Detection {
            scene_id: 0,
            bbox: b.into(),
            label,
            score,
        }
    }

    #[test]
    fn nms_examples() {
        let one = vec![det([0.0, 0.0, 4.0, 4.0], 0, 0.3)];
        assert_eq!(nms(&one, 0.5), one);
        let two = vec![det([0.0, 0.0, 4.0, 4.0], 0, 0.8), det([0.0, 0.0, 4.0, 4.0], 0, 0.9)];
        let kept = nms(&two, 0.5);
        assert_eq!(kept.len(), 1);
        assert_eq!(kept[0].score, 0.9);
        let diff = vec![det([0.0, 0.0, 4.0, 4.0], 0, 0.8), det([0.0, 0.0, 4.0, 4.0], 1, 0.9)];
        assert_eq!(nms(&diff, 0.5).len(), 2);
    }

    #[test]
    fn nms_prefers_smaller_box_on_score_tie() {
        let d = vec![det([0.0, 0.0, 6.0, 6.0], 0, 0.5), det([0.0, 0.0, 5.0, 5.0], 0, 0.5)];
        let kept = nms(&d, 0.5);
        assert_eq!(kept.len(), 1);
        assert_eq!(kept[0].bbox, BBox::new(0.0, 0.0, 5.0, 5.0));
    }

    #[test]
    fn nms_kept_sets_are_not_nested_across_thresholds() {
        // X is suppressed by Y at 0.4 but survives at 0.5, where it then suppresses C
        let y = det([0.0, 0.0, 10.0, 1.0], 0, 0.9);
        let x = det([4.0, 0.0, 14.0, 1.0], 0, 0.8);
        let c = det([5.0, 0.0, 14.0, 1.0], 0, 0.7);
        let d = vec![y, x, c];
        assert_eq!(nms(&d, 0.4), vec![y, c]);
        assert_eq!(nms(&d, 0.5), vec![y, x]);
    }

    fn arb_box() -> impl Strategy<Value = BBox> {
        (0.0f64..20.0, 0.0f64..20.0, 0.5f64..10.0, 0.5f64..10.0)
            .prop_map(|(x, y, w, h)| BBox::new(x, y, x + w, y + h))
    }

    proptest! {
        #[test]
        fn iou_symmetric_and_bounded(a in arb_box(), b in arb_box()) {
            let v = iou(&a, &b);
            prop_assert_eq!(v, iou(&b, &a));
            prop_assert!((0.0..=1.0).contains(&v));
            prop_assert_eq!(iou(&a, &a), 1.0);
        }

        #[test]
        fn nms_output_is_valid_greedy_cover(
            boxes in prop::collection::vec((arb_box(), 0usize..3, 0.0f64..1.0), 0..25),
            t in 0.0f64..1.0,
        ) {
            let d: Vec<Detection> = boxes.iter().map(|&(b, l, s)| det(b.corners(), l, s)).collect();
            let kept = nms(&d, t);
            for (i, k) in kept.iter().enumerate() {
                prop_assert!(d.contains(k));
                for o in &kept[..i] {
                    prop_assert!(o.label != k.label || iou(&o.bbox, &k.bbox) < t);
                }
            }
            // every dropped box is covered by a kept box of its class
            for x in d.iter().filter(|x| !kept.contains(x)) {
                prop_assert!(kept.iter().any(|k| k.label == x.label && iou(&k.bbox, &x.bbox) >= t));
            }
            prop_assert_eq!(nms(&d, 1.0 + 1e-9).len(), d.len());
        }
    }
}
