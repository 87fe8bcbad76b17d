use serde::{Deserialize, Serialize};

use super::boxes::{generate_anchors, nms, Detection, ASPECT_RATIOS};
use super::losses::Corners;
use crate::error::{Error, Result};
use crate::model::{VisualBackbone, VisualCache};
use crate::numerics::ops::softmax;
use crate::numerics::{GradSet, Mlp2, Mlp2Cache, ParamSet, Tensor};
use crate::rng::{stream, Domain};
use crate::synthdata::BBox;

/// Shape of the detector network.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DetectorArch {
    pub height: usize,
    pub width: usize,
    /// Number of object classes, background excluded.
    pub k: usize,
    pub patch: usize,
    pub backbone_dim: usize,
    pub head_hidden: usize,
    pub anchor_base: f64,
    pub proposals: usize,
}

impl DetectorArch {
    pub fn new(height: usize, width: usize, k: usize) -> Self {
        Self {
            height,
            width,
            k,
            patch: 4,
            backbone_dim: 32,
            head_hidden: 64,
            anchor_base: 8.0,
            proposals: 64,
        }
    }

    pub fn grid(&self) -> (usize, usize) {
        (self.height / self.patch, self.width / self.patch)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::ConfigInvalid(format!("detector: {m}")));
        if self.patch == 0 || self.height % self.patch != 0 || self.width % self.patch != 0 {
            return bad(format!("image {}x{} not divisible by patch {}", self.height, self.width, self.patch));
        }
        if self.k == 0 || self.backbone_dim == 0 || self.head_hidden == 0 || self.proposals == 0 {
            return bad("k, backbone_dim, head_hidden and proposals must be positive".into());
        }
        if !(self.anchor_base > 0.0) {
            return bad("anchor_base must be positive".into());
        }
        Ok(())
    }
}

const RPN_OUT: usize = 5;
const BINS: usize = 2;
/// The proposal head reads the `(2r+1) × (2r+1)` block of cells around each cell.
const CONTEXT: usize = 1;
const WINDOW: usize = (2 * CONTEXT + 1) * (2 * CONTEXT + 1);

/// Vision-only detector: patch backbone, per-anchor objectness and proposal
/// head, and a per-proposal classifier (`K` classes plus background, last)
/// with box refinement.
#[derive(Debug, Clone, PartialEq)]
pub struct DetectorModel {
    pub arch: DetectorArch,
    pub params: ParamSet,
    pub backbone: VisualBackbone,
    pub rpn: Mlp2,
    pub head: Mlp2,
    /// Anchor boxes in normalised image coordinates.
    pub anchors: Vec<Corners>,
}

/// Forward state for one image. Proposals and their pooling regions are
/// treated as constants by the backward pass.
#[derive(Debug, Clone)]
pub struct DetForward {
    pub visual: VisualCache,
    pub rpn_inputs: Vec<Vec<f64>>,
    pub rpn: Vec<Mlp2Cache>,
    pub objectness: Vec<f64>,
    pub proposals: Vec<Corners>,
    /// Indices into the anchor list of the kept proposals, best first.
    pub selected: Vec<usize>,
    /// Clipped boxes of the kept proposals.
    pub rois: Vec<Corners>,
    pub roi_inputs: Vec<Vec<f64>>,
    pub roi_cells: Vec<[Vec<usize>; BINS * BINS]>,
    pub heads: Vec<Mlp2Cache>,
}

impl DetForward {
    pub fn class_logits(&self, k: usize) -> Vec<Vec<f64>> {
        self.heads.iter().map(|h| h.out[..k + 1].to_vec()).collect()
    }

    pub fn refined(&self, k: usize) -> Vec<Corners> {
        self.rois
            .iter()
            .zip(&self.heads)
            .map(|(r, h)| {
                let d = &h.out[k + 1..k + 5];
                [r[0] + d[0], r[1] + d[1], r[2] + d[2], r[3] + d[3]]
            })
            .collect()
    }
}

/// Gradients w.r.t. the forward outputs of one image.
#[derive(Debug, Clone)]
pub struct DetGrad {
    pub objectness: Vec<f64>,
    pub proposals: Vec<Corners>,
    pub class_logits: Vec<Vec<f64>>,
    pub refined: Vec<Corners>,
}

fn clip_box(b: &Corners) -> Corners {
    let min = 1e-3;
    let x1 = b[0].clamp(0.0, 1.0 - min);
    let y1 = b[1].clamp(0.0, 1.0 - min);
    let x2 = b[2].clamp(x1 + min, 1.0);
    let y2 = b[3].clamp(y1 + min, 1.0);
    [x1, y1, x2, y2]
}

/// Cell indices of the window around `u`, `None` outside the grid.
fn window(u: usize, gh: usize, gw: usize) -> [Option<usize>; WINDOW] {
    let (i, j) = ((u / gw) as isize, (u % gw) as isize);
    let r = CONTEXT as isize;
    let mut out = [None; WINDOW];
    let mut n = 0;
    for di in -r..=r {
        for dj in -r..=r {
            let (y, x) = (i + di, j + dj);
            if y >= 0 && x >= 0 && (y as usize) < gh && (x as usize) < gw {
                out[n] = Some(y as usize * gw + x as usize);
            }
            n += 1;
        }
    }
    out
}

/// Cells whose extent overlaps `[lo, hi)` along one axis (grid units).
fn cell_span(lo: f64, hi: f64, n: usize) -> (usize, usize) {
    let a = (lo.floor().max(0.0) as usize).min(n - 1);
    let b = ((hi.ceil() as usize).max(a + 1)).min(n);
    (a, b.max(a + 1))
}

impl DetectorModel {
    pub fn new(arch: DetectorArch, seed: u64) -> Result<Self> {
        arch.validate()?;
        let mut rng = stream(seed, Domain::DetectorInit, 0);
        let mut params = ParamSet::new();
        let c = arch.backbone_dim;
        let backbone = VisualBackbone::register(&mut params, "det.backbone", arch.patch, c, &mut rng);
        let na = ASPECT_RATIOS.len();
        let rpn = Mlp2::register(&mut params, "det.rpn", (WINDOW * c, arch.head_hidden, na * RPN_OUT), 0.1, &mut rng);
        let head = Mlp2::register(
            &mut params,
            "det.head",
            (BINS * BINS * c + 4, arch.head_hidden, arch.k + 5),
            0.1,
            &mut rng,
        );
        let (w, h) = (arch.width as f64, arch.height as f64);
        let anchors = generate_anchors(arch.grid(), arch.patch as f64, arch.anchor_base, &ASPECT_RATIOS)
            .iter()
            .map(|a| {
                let b = a.bbox();
                [b.x1 / w, b.y1 / h, b.x2 / w, b.y2 / h]
            })
            .collect();
        Ok(Self {
            arch,
            params,
            backbone,
            rpn,
            head,
            anchors,
        })
    }

    pub fn k(&self) -> usize {
        self.arch.k
    }

    fn pool(&self, visual: &VisualCache, roi: &Corners) -> (Vec<f64>, [Vec<usize>; BINS * BINS]) {
        let (gh, gw) = (visual.grid_h, visual.grid_w);
        let c = self.arch.backbone_dim;
        let (x1, y1, x2, y2) = (roi[0] * gw as f64, roi[1] * gh as f64, roi[2] * gw as f64, roi[3] * gh as f64);
        let (xm, ym) = ((x1 + x2) / 2.0, (y1 + y2) / 2.0);
        let xs = [(x1, xm), (xm, x2)];
        let ys = [(y1, ym), (ym, y2)];
        let mut input = vec![0.0; BINS * BINS * c + 4];
        let mut cells: [Vec<usize>; BINS * BINS] = Default::default();
        for (bi, &(ya, yb)) in ys.iter().enumerate() {
            for (bj, &(xa, xb)) in xs.iter().enumerate() {
                let bin = bi * BINS + bj;
                let (r0, r1) = cell_span(ya, yb, gh);
                let (c0, c1) = cell_span(xa, xb, gw);
                let dst = &mut input[bin * c..(bin + 1) * c];
                for i in r0..r1 {
                    for j in c0..c1 {
                        let u = i * gw + j;
                        cells[bin].push(u);
                        for (d, f) in dst.iter_mut().zip(visual.feature(u)) {
                            *d += f;
                        }
                    }
                }
                let inv = 1.0 / cells[bin].len() as f64;
                dst.iter_mut().for_each(|v| *v *= inv);
            }
        }
        input[BINS * BINS * c..].copy_from_slice(roi);
        (input, cells)
    }

    pub fn forward(&self, image: &Tensor) -> Result<DetForward> {
        let p = &self.params;
        let visual = self.backbone.forward(p, image)?;
        let na = ASPECT_RATIOS.len();
        let c = self.arch.backbone_dim;
        let rpn_inputs: Vec<Vec<f64>> = (0..visual.cells())
            .map(|u| {
                let mut x = vec![0.0; WINDOW * c];
                for (n, v) in window(u, visual.grid_h, visual.grid_w).iter().enumerate() {
                    if let Some(v) = v {
                        x[n * c..(n + 1) * c].copy_from_slice(visual.feature(*v));
                    }
                }
                x
            })
            .collect();
        let rpn: Vec<Mlp2Cache> = rpn_inputs.iter().map(|x| self.rpn.forward(p, x)).collect();
        let mut objectness = Vec::with_capacity(self.anchors.len());
        let mut proposals = Vec::with_capacity(self.anchors.len());
        for (u, cache) in rpn.iter().enumerate() {
            for r in 0..na {
                let o = &cache.out[r * RPN_OUT..(r + 1) * RPN_OUT];
                let a = &self.anchors[u * na + r];
                objectness.push(o[0]);
                proposals.push([a[0] + o[1], a[1] + o[2], a[2] + o[3], a[3] + o[4]]);
            }
        }
        let mut order: Vec<usize> = (0..objectness.len()).collect();
        order.sort_by(|&a, &b| objectness[b].total_cmp(&objectness[a]).then(a.cmp(&b)));
        order.truncate(self.arch.proposals);
        let rois: Vec<Corners> = order.iter().map(|&n| clip_box(&proposals[n])).collect();
        Ok(self.finish(visual, rpn_inputs, rpn, objectness, proposals, order, rois))
    }

    /// Forward pass with the proposal selection and ROI boxes given, so the
    /// result is a smooth function of the parameters.
    pub fn forward_fixed(&self, image: &Tensor, selected: &[usize], rois: &[Corners]) -> Result<DetForward> {
        let mut f = self.forward(image)?;
        f.heads.clear();
        Ok(self.finish(f.visual, f.rpn_inputs, f.rpn, f.objectness, f.proposals, selected.to_vec(), rois.to_vec()))
    }

    fn finish(
        &self,
        visual: VisualCache,
        rpn_inputs: Vec<Vec<f64>>,
        rpn: Vec<Mlp2Cache>,
        objectness: Vec<f64>,
        proposals: Vec<Corners>,
        selected: Vec<usize>,
        rois: Vec<Corners>,
    ) -> DetForward {
        let mut roi_inputs = Vec::with_capacity(rois.len());
        let mut roi_cells = Vec::with_capacity(rois.len());
        let mut heads = Vec::with_capacity(rois.len());
        for roi in &rois {
            let (input, cells) = self.pool(&visual, roi);
            heads.push(self.head.forward(&self.params, &input));
            roi_inputs.push(input);
            roi_cells.push(cells);
        }
        DetForward {
            visual,
            rpn_inputs,
            rpn,
            objectness,
            proposals,
            selected,
            rois,
            roi_inputs,
            roi_cells,
            heads,
        }
    }

    pub fn backward(&self, fwd: &DetForward, g: &DetGrad, grads: &mut GradSet) {
        let p = &self.params;
        let c = self.arch.backbone_dim;
        let k = self.arch.k;
        let na = ASPECT_RATIOS.len();
        let mut dfeat = vec![0.0; fwd.visual.cells() * c];

        let mut dinput = vec![0.0; BINS * BINS * c + 4];
        let mut dout = vec![0.0; k + 5];
        for (r, head) in fwd.heads.iter().enumerate() {
            let dl = &g.class_logits[r];
            let dr = &g.refined[r];
            if dl.iter().all(|&v| v == 0.0) && dr.iter().all(|&v| v == 0.0) {
                continue;
            }
            dout[..k + 1].copy_from_slice(dl);
            dout[k + 1..].copy_from_slice(dr);
            dinput.iter_mut().for_each(|v| *v = 0.0);
            self.head
                .backward(p, &fwd.roi_inputs[r], head, &dout, Some(&mut dinput), grads);
            for (bin, cells) in fwd.roi_cells[r].iter().enumerate() {
                let inv = 1.0 / cells.len() as f64;
                let src = &dinput[bin * c..(bin + 1) * c];
                for &u in cells {
                    for (d, s) in dfeat[u * c..(u + 1) * c].iter_mut().zip(src) {
                        *d += s * inv;
                    }
                }
            }
        }

        let mut drpn = vec![0.0; na * RPN_OUT];
        let mut dctx = vec![0.0; WINDOW * c];
        let (gh, gw) = (fwd.visual.grid_h, fwd.visual.grid_w);
        for (u, cache) in fwd.rpn.iter().enumerate() {
            let mut any = false;
            for r in 0..na {
                let n = u * na + r;
                drpn[r * RPN_OUT] = g.objectness[n];
                drpn[r * RPN_OUT + 1..(r + 1) * RPN_OUT].copy_from_slice(&g.proposals[n]);
                any |= drpn[r * RPN_OUT..(r + 1) * RPN_OUT].iter().any(|&v| v != 0.0);
            }
            if !any {
                continue;
            }
            dctx.iter_mut().for_each(|v| *v = 0.0);
            self.rpn
                .backward(p, &fwd.rpn_inputs[u], cache, &drpn, Some(&mut dctx), grads);
            for (n, v) in window(u, gh, gw).iter().enumerate() {
                if let Some(v) = v {
                    for (d, s) in dfeat[v * c..(v + 1) * c].iter_mut().zip(&dctx[n * c..(n + 1) * c]) {
                        *d += s;
                    }
                }
            }
        }
        self.backbone.backward(p, &fwd.visual, &dfeat, grads);
    }

    /// Detections in pixel coordinates: per proposal, the most probable
    /// object class if its probability reaches `score_thresh`, then NMS.
    pub fn infer(&self, image: &Tensor, scene_id: u64, score_thresh: f64, nms_thresh: f64) -> Result<Vec<Detection>> {
        let fwd = self.forward(image)?;
        Ok(self.detections(&fwd, scene_id, score_thresh, nms_thresh))
    }

    pub fn detections(&self, fwd: &DetForward, scene_id: u64, score_thresh: f64, nms_thresh: f64) -> Vec<Detection> {
        let k = self.arch.k;
        let (w, h) = (self.arch.width as f64, self.arch.height as f64);
        let mut out = Vec::new();
        for (logits, refined) in fwd.class_logits(k).iter().zip(fwd.refined(k)) {
            let prob = softmax(logits);
            let mut label = 0;
            for c in 1..k {
                if prob[c] > prob[label] {
                    label = c;
                }
            }
            let score = prob[label].clamp(f64::MIN_POSITIVE, 1.0 - 1e-12);
            if score < score_thresh {
                continue;
            }
            let b = BBox::new(refined[0] * w, refined[1] * h, refined[2] * w, refined[3] * h).clip(w, h);
            if !b.is_valid() {
                continue;
            }
            out.push(Detection {
                scene_id,
                bbox: b,
                label,
                score,
            });
        }
        nms(&out, nms_thresh)
    }
}
