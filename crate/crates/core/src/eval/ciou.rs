use crate::detector::Detection;
use crate::synthdata::BBox;

/// Pixel `(x, y)` belongs to a box when its centre `(x+½, y+½)` does.
pub fn rasterize(boxes: &[BBox], height: usize, width: usize) -> Vec<bool> {
    let mut map = vec![false; height * width];
    for b in boxes {
        let x0 = (b.x1 - 0.5).ceil().max(0.0) as usize;
        let y0 = (b.y1 - 0.5).ceil().max(0.0) as usize;
        let x1 = ((b.x2 - 0.5).ceil().max(0.0) as usize).min(width);
        let y1 = ((b.y2 - 0.5).ceil().max(0.0) as usize).min(height);
        for y in y0..y1 {
            map[y * width + x0.min(x1)..y * width + x1].iter_mut().for_each(|p| *p = true);
        }
    }
    map
}

fn counts(a: &[bool], b: &[bool]) -> (usize, usize) {
    a.iter()
        .zip(b)
        .fold((0, 0), |(i, u), (&x, &y)| (i + (x && y) as usize, u + (x || y) as usize))
}

/// IoU between the union of detections scoring at least `score_thresh` and
/// the union of ground-truth boxes, on the pixel grid. 1 when both are empty.
pub fn binarized_ciou(detections: &[Detection], score_thresh: f64, gt: &[BBox], dims: (usize, usize)) -> f64 {
    let kept: Vec<BBox> = detections
        .iter()
        .filter(|d| d.score >= score_thresh)
        .map(|d| d.bbox)
        .collect();
    let (inter, union) = counts(&rasterize(&kept, dims.0, dims.1), &rasterize(gt, dims.0, dims.1));
    if union == 0 {
        1.0
    } else {
        inter as f64 / union as f64
    }
}

/// Class-aware variant: intersections and unions are taken per class and
/// summed before dividing.
pub fn binarized_ciou_per_class(
    detections: &[Detection],
    score_thresh: f64,
    gt: &[(usize, BBox)],
    dims: (usize, usize),
) -> f64 {
    let classes: std::collections::BTreeSet<usize> = detections
        .iter()
        .filter(|d| d.score >= score_thresh)
        .map(|d| d.label)
        .chain(gt.iter().map(|g| g.0))
        .collect();
    let (mut inter, mut union) = (0, 0);
    for c in classes {
        let p: Vec<BBox> = detections
            .iter()
            .filter(|d| d.score >= score_thresh && d.label == c)
            .map(|d| d.bbox)
            .collect();
        let g: Vec<BBox> = gt.iter().filter(|g| g.0 == c).map(|g| g.1).collect();
        let (i, u) = counts(&rasterize(&p, dims.0, dims.1), &rasterize(&g, dims.0, dims.1));
        inter += i;
        union += u;
    }
    if union == 0 {
        1.0
    } else {
        inter as f64 / union as f64
    }
}

pub fn auc_thresholds() -> Vec<f64> {
    (0..=20).map(|i| i as f64 * 0.05).collect()
}

/// Mean over thresholds of the fraction of items with cIoU ≥ threshold.
pub fn localization_auc(ciou: &[f64], thresholds: &[f64]) -> f64 {
    if ciou.is_empty() || thresholds.is_empty() {
        return 0.0;
    }
    let n = ciou.len() as f64;
    thresholds
        .iter()
        .map(|&t| ciou.iter().filter(|&&c| c >= t).count() as f64 / n)
        .sum::<f64>()
        / thresholds.len() as f64
}

pub fn success_rate(ciou: &[f64], threshold: f64) -> f64 {
    if ciou.is_empty() {
        return 0.0;
    }
    ciou.iter().filter(|&&c| c >= threshold).count() as f64 / ciou.len() as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn det(b: [f64; 4], label: usize, score: f64) -> Detection {
        Detection {
            scene_id: 0,
            bbox: b.into(),
            label,
            score,
        }
    }

    /// Pixel-count oracle written against the centre rule directly.
    fn oracle(pred: &[BBox], gt: &[BBox], h: usize, w: usize) -> f64 {
        let (mut i, mut u) = (0, 0);
        for y in 0..h {
            for x in 0..w {
                let (cx, cy) = (x as f64 + 0.5, y as f64 + 0.5);
                let p = pred.iter().any(|b| b.contains_point(cx, cy));
                let g = gt.iter().any(|b| b.contains_point(cx, cy));
                i += (p && g) as usize;
                u += (p || g) as usize;
            }
        }
        if u == 0 {
            1.0
        } else {
            i as f64 / u as f64
        }
    }

    #[test]
    fn ciou_examples() {
        let g = [BBox::new(1.0, 1.0, 3.0, 3.0)];
        assert_eq!(binarized_ciou(&[det([1.0, 1.0, 3.0, 3.0], 0, 0.9)], 0.5, &g, (8, 8)), 1.0);
        assert_eq!(binarized_ciou(&[], 0.5, &g, (8, 8)), 0.0);
        assert_eq!(binarized_ciou(&[det([1.0, 1.0, 3.0, 3.0], 0, 0.1)], 0.5, &g, (8, 8)), 0.0);
        let v = binarized_ciou(&[det([0.0, 0.0, 2.0, 2.0], 0, 0.9)], 0.5, &g, (8, 8));
        assert_eq!(v, oracle(&[BBox::new(0.0, 0.0, 2.0, 2.0)], &g, 8, 8));
        assert_eq!(v, 1.0 / 7.0);
    }

    #[test]
    fn ciou_matches_pixel_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let rb = |rng: &mut ChaCha8Rng| {
            let x = rng.random_range(-4.0..30.0);
            let y = rng.random_range(-4.0..30.0);
            BBox::new(x, y, x + rng.random_range(0.5..14.0), y + rng.random_range(0.5..14.0))
        };
        for _ in 0..300 {
            let pred: Vec<BBox> = (0..rng.random_range(0..4)).map(|_| rb(&mut rng)).collect();
            let gt: Vec<BBox> = (0..rng.random_range(0..4)).map(|_| rb(&mut rng)).collect();
            let dets: Vec<Detection> = pred.iter().map(|b| det(b.corners(), 0, 1.0)).collect();
            assert_eq!(binarized_ciou(&dets, 0.5, &gt, (32, 32)), oracle(&pred, &gt, 32, 32));
        }
    }

    #[test]
    fn per_class_variant_separates_classes() {
        let g = [(0, BBox::new(0.0, 0.0, 4.0, 4.0))];
        let wrong = [det([0.0, 0.0, 4.0, 4.0], 1, 0.9)];
        assert_eq!(binarized_ciou_per_class(&wrong, 0.5, &g, (8, 8)), 0.0);
        assert_eq!(binarized_ciou(&wrong, 0.5, &[g[0].1], (8, 8)), 1.0);
    }

    #[test]
    fn auc_examples() {
        let t = auc_thresholds();
        assert_eq!(t.len(), 21);
        assert_eq!(localization_auc(&[1.0; 5], &t), 1.0);
        assert!((localization_auc(&[0.0; 5], &t) - 1.0 / 21.0).abs() < 1e-12);
        assert!((localization_auc(&[1.0, 0.0], &t) - 11.0 / 21.0).abs() < 1e-12);
        assert_eq!(success_rate(&[0.2, 0.3, 0.9], 0.3), 2.0 / 3.0);
    }
}
