//! Proposal and detection losses on image-normalised corner boxes.

use serde::{Deserialize, Serialize};

use super::boxes::iou_corners;
use crate::error::{Error, Result};
use crate::numerics::ops::{bce_with_logit, softmax_cross_entropy, softmax_cross_entropy_set};

pub type Corners = [f64; 4];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MatchConfig {
    pub tau_pos: f64,
    pub tau_bkg: f64,
}

impl Default for MatchConfig {
    fn default() -> Self {
        Self {
            tau_pos: 0.5,
            tau_bkg: 0.3,
        }
    }
}

impl MatchConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0 <= self.tau_bkg && self.tau_bkg <= self.tau_pos && self.tau_pos <= 1.0) {
            return Err(Error::ConfigInvalid(format!(
                "detector: need 0 <= tau_bkg ({}) <= tau_pos ({}) <= 1",
                self.tau_bkg, self.tau_pos
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Target {
    pub bbox: Corners,
    pub label: usize,
}

/// `Σ_c |a_c − b_c|` and its gradient w.r.t. `a`.
pub fn l1_corners(a: &Corners, b: &Corners) -> (f64, Corners) {
    let mut g = [0.0; 4];
    let mut loss = 0.0;
    for c in 0..4 {
        let d = a[c] - b[c];
        loss += d.abs();
        g[c] = if d > 0.0 {
            1.0
        } else if d < 0.0 {
            -1.0
        } else {
            0.0
        };
    }
    (loss, g)
}

/// Role of each candidate box relative to a set of targets.
#[derive(Debug, Clone, PartialEq)]
pub struct Assignment {
    /// `(candidate, target)` pairs trained towards the target.
    pub positives: Vec<(usize, usize)>,
    pub negatives: Vec<usize>,
}

/// Each target's best candidate (first on ties) is positive for it, as is
/// any other candidate whose best IoU reaches `tau_pos`. Candidates whose
/// best IoU is below `tau_bkg` and that are nobody's best are negatives;
/// the rest are ignored.
pub fn assign(candidates: &[Corners], targets: &[Target], m: &MatchConfig) -> Assignment {
    let n = candidates.len();
    let mut best_target = vec![(f64::NEG_INFINITY, 0usize); n];
    let mut is_best = vec![false; n];
    let mut positives = Vec::new();
    for (t, target) in targets.iter().enumerate() {
        let mut star = (f64::NEG_INFINITY, usize::MAX);
        for (i, c) in candidates.iter().enumerate() {
            let v = iou_corners(c, &target.bbox);
            if v > best_target[i].0 {
                best_target[i] = (v, t);
            }
            if v > star.0 {
                star = (v, i);
            }
        }
        if star.1 != usize::MAX {
            is_best[star.1] = true;
            positives.push((star.1, t));
        }
    }
    let mut negatives = Vec::new();
    for i in 0..n {
        if is_best[i] {
            continue;
        }
        let (v, t) = best_target[i];
        if targets.is_empty() || v < m.tau_bkg {
            negatives.push(i);
        } else if v >= m.tau_pos {
            positives.push((i, t));
        }
    }
    positives.sort_unstable();
    Assignment { positives, negatives }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RpnLoss {
    pub loss: f64,
    pub d_objectness: Vec<f64>,
    pub d_proposals: Vec<Corners>,
}

/// `L_reg(m(n*), t*) + L_obj(o(n*), 1) + Σ_{IoU(n, t*) < τ_bkg} L_obj(o(n), 0)`,
/// with matching done on the anchors.
pub fn rpn_losses(
    anchors: &[Corners],
    objectness: &[f64],
    proposals: &[Corners],
    targets: &[Target],
    m: &MatchConfig,
) -> Result<RpnLoss> {
    let n = anchors.len();
    if objectness.len() != n || proposals.len() != n {
        return Err(Error::shape(&[n], &[objectness.len(), proposals.len()]));
    }
    let a = assign(anchors, targets, m);
    let mut d_objectness = vec![0.0; n];
    let mut d_proposals = vec![[0.0; 4]; n];
    let mut loss = 0.0;
    for &(i, t) in &a.positives {
        let (lr, g) = l1_corners(&proposals[i], &targets[t].bbox);
        loss += lr;
        for c in 0..4 {
            d_proposals[i][c] += g[c];
        }
        let (lo, go) = bce_with_logit(objectness[i], 1.0);
        loss += lo;
        d_objectness[i] += go;
    }
    for &i in &a.negatives {
        let (lo, go) = bce_with_logit(objectness[i], 0.0);
        loss += lo;
        d_objectness[i] += go;
    }
    Ok(RpnLoss {
        loss,
        d_objectness,
        d_proposals,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct DetLoss {
    pub loss: f64,
    pub d_logits: Vec<Vec<f64>>,
    pub d_refined: Vec<Corners>,
}

/// `L_reg(t(m*), t*) + L_cls(y(m*), y*) + Σ_{IoU(m, t*) < τ_bkg} L_cls(y(m), bkg)`.
///
/// Logits have `K + 1` entries with background last. With
/// `class_agnostic` the positive term only asks for "some object class".
pub fn det_losses(
    proposals: &[Corners],
    class_logits: &[Vec<f64>],
    refined: &[Corners],
    targets: &[Target],
    m: &MatchConfig,
    class_agnostic: bool,
) -> Result<DetLoss> {
    let n = proposals.len();
    if class_logits.len() != n || refined.len() != n {
        return Err(Error::shape(&[n], &[class_logits.len(), refined.len()]));
    }
    let Some(width) = class_logits.first().map(Vec::len) else {
        return Ok(DetLoss {
            loss: 0.0,
            d_logits: Vec::new(),
            d_refined: Vec::new(),
        });
    };
    let bkg = width - 1;
    let objects: Vec<usize> = (0..bkg).collect();
    let a = assign(proposals, targets, m);
    let mut d_logits = vec![vec![0.0; width]; n];
    let mut d_refined = vec![[0.0; 4]; n];
    let mut loss = 0.0;
    for &(i, t) in &a.positives {
        let target = &targets[t];
        if target.label >= bkg {
            return Err(Error::IndexOutOfRange {
                index: target.label,
                len: bkg,
            });
        }
        let (lr, g) = l1_corners(&refined[i], &target.bbox);
        loss += lr;
        for c in 0..4 {
            d_refined[i][c] += g[c];
        }
        let (lc, gc) = if class_agnostic {
            softmax_cross_entropy_set(&class_logits[i], &objects)?
        } else {
            softmax_cross_entropy(&class_logits[i], target.label)?
        };
        loss += lc;
        for (d, g) in d_logits[i].iter_mut().zip(gc) {
            *d += g;
        }
    }
    for &i in &a.negatives {
        let (lc, gc) = softmax_cross_entropy(&class_logits[i], bkg)?;
        loss += lc;
        for (d, g) in d_logits[i].iter_mut().zip(gc) {
            *d += g;
        }
    }
    Ok(DetLoss {
        loss,
        d_logits,
        d_refined,
    })
}
