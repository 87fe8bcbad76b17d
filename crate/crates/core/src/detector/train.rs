use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::losses::{det_losses, rpn_losses, MatchConfig, Target};
use super::model::{DetGrad, DetectorArch, DetectorModel};
use crate::error::{Error, Result};
use crate::numerics::tensor::reduce_ordered;
use crate::numerics::optim::Sgd;
use crate::numerics::GradSet;
use crate::parallel;
use crate::pseudolabel::PseudoAnnotation;
use crate::rng::{stream, Domain};
use crate::synthdata::{BBox, Scene};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DetectorConfig {
    pub epochs: usize,
    /// Fraction of `epochs` trained class-agnostically.
    pub warmup_frac: f64,
    pub lr: f64,
    /// Fraction of `epochs` after which the learning rate drops tenfold.
    #[serde(default = "default_lr_drop")]
    pub lr_drop: f64,
    #[serde(default = "default_momentum")]
    pub momentum: f64,
    #[serde(default = "default_batch")]
    pub batch: usize,
    #[serde(default = "default_clip")]
    pub clip_norm: Option<f64>,
    pub nms: f64,
    pub score_thresh: f64,
    #[serde(default = "default_proposals")]
    pub proposals: usize,
    #[serde(default)]
    pub matching: MatchConfig,
}

fn default_lr_drop() -> f64 {
    0.75
}

fn default_momentum() -> f64 {
    0.9
}

fn default_batch() -> usize {
    16
}

fn default_clip() -> Option<f64> {
    Some(5.0)
}

fn default_proposals() -> usize {
    64
}

impl Default for DetectorConfig {
    fn default() -> Self {
        Self {
            epochs: 20,
            warmup_frac: 0.2,
            lr: 0.02,
            lr_drop: default_lr_drop(),
            momentum: default_momentum(),
            batch: default_batch(),
            clip_norm: default_clip(),
            nms: 0.5,
            score_thresh: 0.05,
            proposals: default_proposals(),
            matching: MatchConfig::default(),
        }
    }
}

impl DetectorConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::ConfigInvalid(format!("detector: {m}")));
        if !(0.0..=1.0).contains(&self.warmup_frac) {
            return bad("warmup_frac must lie in [0, 1]");
        }
        if !(0.0..=1.0).contains(&self.lr_drop) {
            return bad("lr_drop must lie in [0, 1]");
        }
        if !(self.lr > 0.0) || !(0.0..1.0).contains(&self.momentum) {
            return bad("lr must be positive and momentum in [0, 1)");
        }
        if self.batch == 0 || self.proposals == 0 {
            return bad("batch and proposals must be positive");
        }
        if !(0.0..=1.0).contains(&self.nms) || !(0.0..=1.0).contains(&self.score_thresh) {
            return bad("nms and score_thresh must lie in [0, 1]");
        }
        self.matching.validate()
    }

    pub fn warmup_epochs(&self) -> usize {
        (self.epochs as f64 * self.warmup_frac).round() as usize
    }

    pub fn lr_at(&self, epoch: usize) -> f64 {
        if epoch >= (self.epochs as f64 * self.lr_drop).round() as usize {
            self.lr * 0.1
        } else {
            self.lr
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DetEpochRecord {
    pub epoch: usize,
    pub class_agnostic: bool,
    pub loss_rpn: f64,
    pub loss_det: f64,
}

/// One training image with its boxes in normalised coordinates.
#[derive(Debug, Clone)]
pub struct TrainItem<'a> {
    pub scene: &'a Scene,
    pub targets: Vec<Target>,
}

pub fn normalise(b: &BBox, width: usize, height: usize) -> [f64; 4] {
    b.scale(1.0 / width as f64, 1.0 / height as f64).corners()
}

/// Groups annotations by scene; scenes without annotations are skipped.
pub fn items_from_annotations<'a>(annotations: &[PseudoAnnotation], scenes: &'a [Scene]) -> Result<Vec<TrainItem<'a>>> {
    let by_id: BTreeMap<u64, &Scene> = scenes.iter().map(|s| (s.scene_id, s)).collect();
    let mut grouped: BTreeMap<u64, Vec<Target>> = BTreeMap::new();
    for a in annotations {
        let scene = by_id
            .get(&a.scene_id)
            .ok_or_else(|| Error::ConfigInvalid(format!("annotation for unknown scene {}", a.scene_id)))?;
        grouped.entry(a.scene_id).or_default().push(Target {
            bbox: normalise(&a.bbox, scene.width(), scene.height()),
            label: a.label,
        });
    }
    Ok(grouped
        .into_iter()
        .map(|(id, targets)| TrainItem {
            scene: by_id[&id],
            targets,
        })
        .collect())
}

/// Ground-truth boxes of every object, labelled with `map(class_id)`.
pub fn items_from_ground_truth<'a>(scenes: &'a [Scene], map: impl Fn(usize) -> usize) -> Vec<TrainItem<'a>> {
    scenes
        .iter()
        .map(|s| TrainItem {
            scene: s,
            targets: s
                .objects
                .iter()
                .map(|o| Target {
                    bbox: normalise(&o.bbox, s.width(), s.height()),
                    label: map(o.class_id),
                })
                .collect(),
        })
        .collect()
}

fn item_loss(model: &DetectorModel, item: &TrainItem<'_>, cfg: &DetectorConfig, agnostic: bool) -> Result<(f64, f64, GradSet)> {
    let f = model.forward(&item.scene.image)?;
    let rpn = rpn_losses(&model.anchors, &f.objectness, &f.proposals, &item.targets, &cfg.matching)?;
    let k = model.k();
    let det = det_losses(&f.rois, &f.class_logits(k), &f.refined(k), &item.targets, &cfg.matching, agnostic)?;
    let mut grads = GradSet::zeros_like(&model.params);
    let g = DetGrad {
        objectness: rpn.d_objectness,
        proposals: rpn.d_proposals,
        class_logits: det.d_logits,
        refined: det.d_refined,
    };
    model.backward(&f, &g, &mut grads);
    Ok((rpn.loss, det.loss, grads))
}

/// Class-agnostic warm-up followed by class-aware training. Per-image
/// gradients may be computed in parallel but are summed in batch order, so
/// the result depends only on `seed`.
pub fn train_items(
    items: &[TrainItem<'_>],
    arch: DetectorArch,
    cfg: &DetectorConfig,
    seed: u64,
    mut on_epoch: impl FnMut(&DetEpochRecord),
) -> Result<DetectorModel> {
    cfg.validate()?;
    if items.is_empty() {
        return Err(Error::EmptyTrainingSet);
    }
    let k = arch.k;
    for t in items.iter().flat_map(|i| &i.targets) {
        if t.label >= k {
            return Err(Error::IndexOutOfRange { index: t.label, len: k });
        }
    }
    let mut model = DetectorModel::new(DetectorArch { proposals: cfg.proposals, ..arch }, seed)?;
    let mut opt = Sgd::new(&model.params, cfg.lr, cfg.momentum, cfg.clip_norm);
    let warmup = cfg.warmup_epochs();
    for epoch in 0..cfg.epochs {
        let agnostic = epoch < warmup;
        opt.lr = cfg.lr_at(epoch);
        let mut order: Vec<usize> = (0..items.len()).collect();
        order.shuffle(&mut stream(seed, Domain::DetectorShuffle, epoch as u64));
        let (mut sum_rpn, mut sum_det, mut seen) = (0.0, 0.0, 0usize);
        for chunk in order.chunks(cfg.batch) {
            let parts = parallel::map_slice(chunk, |&i| item_loss(&model, &items[i], cfg, agnostic));
            let mut grads = Vec::with_capacity(parts.len());
            for p in parts {
                let (lr, ld, g) = p?;
                sum_rpn += lr;
                sum_det += ld;
                grads.push(g);
            }
            seen += chunk.len();
            let mut total = reduce_ordered(grads, &model.params);
            total.scale(1.0 / chunk.len() as f64);
            model.params.zero_grad();
            model.params.accumulate(&total);
            opt.step(&mut model.params);
        }
        on_epoch(&DetEpochRecord {
            epoch,
            class_agnostic: agnostic,
            loss_rpn: sum_rpn / seen as f64,
            loss_det: sum_det / seen as f64,
        });
    }
    Ok(model)
}

/// Trains on self-annotations whose labels are cluster indices in `[0, k)`.
pub fn train_detector(
    annotations: &[PseudoAnnotation],
    scenes: &[Scene],
    k: usize,
    cfg: &DetectorConfig,
    seed: u64,
    on_epoch: impl FnMut(&DetEpochRecord),
) -> Result<DetectorModel> {
    let items = items_from_annotations(annotations, scenes)?;
    let first = scenes.first().ok_or(Error::EmptyTrainingSet)?;
    let arch = DetectorArch::new(first.height(), first.width(), k);
    train_items(&items, arch, cfg, seed, on_epoch)
}
