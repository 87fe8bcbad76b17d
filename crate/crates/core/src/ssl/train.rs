use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::losses::{forward_batch, joint_loss_and_grad, loss_nc, LossBreakdown};
use super::sinkhorn::{label_entropy, sinkhorn_labels, uniform_marginals, Assignment, SinkhornConfig};
use crate::error::{Error, Result};
use crate::model::{AvModel, ModelConfig};
use crate::numerics::ops::{log_softmax, softmax};
use crate::numerics::optim::Sgd;
use crate::parallel;
use crate::rng::{stream, Domain};
use crate::synthdata::Scene;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SslConfig {
    /// Number of clusters.
    pub k: usize,
    pub lambda: f64,
    /// Total epochs, warm-up included.
    pub epochs: usize,
    /// Leading epochs trained with the contrastive term only.
    pub warmup: usize,
    pub relabel_period: usize,
    pub lr: f64,
    pub momentum: f64,
    pub batch: usize,
    #[serde(default)]
    pub clip_norm: Option<f64>,
    #[serde(default = "default_sinkhorn")]
    pub sinkhorn: SinkhornConfig,
}

/// Trained posteriors are sharply peaked, so relabelling allows more
/// iterations than the standalone default.
fn default_sinkhorn() -> SinkhornConfig {
    SinkhornConfig {
        max_iters: 1000,
        ..SinkhornConfig::default()
    }
}

impl Default for SslConfig {
    fn default() -> Self {
        Self {
            k: 4,
            lambda: 0.5,
            epochs: 30,
            warmup: 10,
            relabel_period: 5,
            lr: 0.05,
            momentum: 0.9,
            batch: 32,
            clip_norm: Some(5.0),
            sinkhorn: default_sinkhorn(),
        }
    }
}

impl SslConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::ConfigInvalid(format!("ssl: {m}")));
        if self.k == 0 {
            return bad("k must be positive");
        }
        if !(0.0..=1.0).contains(&self.lambda) {
            return bad("lambda must lie in [0, 1]");
        }
        if self.warmup > self.epochs {
            return bad("warmup cannot exceed epochs");
        }
        if self.relabel_period == 0 {
            return bad("relabel_period must be positive");
        }
        if self.batch < 2 {
            return bad("batch must be at least 2");
        }
        if !(self.lr > 0.0) || !(0.0..1.0).contains(&self.momentum) {
            return bad("lr must be positive and momentum in [0, 1)");
        }
        Ok(())
    }
}

/// One line of the training log.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub loss_nc: f64,
    pub loss_clust: f64,
    pub loss_joint: f64,
    pub label_entropy: f64,
    pub marginal_error: f64,
}

/// Final cluster assignment of the training items.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabelRecord {
    pub scene_id: u64,
    pub label: usize,
    /// Classifier posterior of the assigned cluster.
    pub strength: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutput {
    pub model: AvModel,
    pub labels: Vec<LabelRecord>,
    pub log: Vec<EpochRecord>,
}

/// Per-item cluster log-posteriors `log p_v(k) + log p_a(k)`, row-major `n × K`.
pub fn log_posteriors(model: &AvModel, scenes: &[Scene]) -> Result<Vec<f64>> {
    let rows: Vec<Result<Vec<f64>>> = parallel::map_slice(scenes, |s| {
        let f = model.forward_pair(&s.image, &s.audio)?;
        let lv = log_softmax(f.visual_logits());
        let la = log_softmax(f.audio_logits());
        Ok(lv.iter().zip(&la).map(|(a, b)| a + b).collect())
    });
    let mut out = Vec::with_capacity(scenes.len() * model.config.k);
    for r in rows {
        out.extend(r?);
    }
    Ok(out)
}

pub fn relabel(model: &AvModel, scenes: &[Scene], sk: &SinkhornConfig) -> Result<(Assignment, Vec<f64>)> {
    let lp = log_posteriors(model, scenes)?;
    let a = sinkhorn_labels(&lp, scenes.len(), &uniform_marginals(model.config.k), sk)?;
    Ok((a, lp))
}

fn label_records(scenes: &[Scene], assignment: &Assignment, lp: &[f64]) -> Vec<LabelRecord> {
    let k = assignment.k;
    scenes
        .iter()
        .enumerate()
        .map(|(i, s)| {
            let label = assignment.labels[i];
            let post = softmax(&lp[i * k..(i + 1) * k]);
            LabelRecord {
                scene_id: s.scene_id,
                label,
                strength: post[label],
            }
        })
        .collect()
}

/// Alternates Sinkhorn relabelling with SGD on the joint loss after a
/// contrastive-only warm-up. Deterministic for a given `seed`.
pub fn train(
    scenes: &[Scene],
    model_config: ModelConfig,
    config: &SslConfig,
    seed: u64,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<TrainOutput> {
    config.validate()?;
    if scenes.is_empty() {
        return Err(Error::ConfigInvalid("ssl: training set is empty".into()));
    }
    let mut model = AvModel::new(model_config, seed)?;
    let mut opt = Sgd::new(&model.params, config.lr, config.momentum, config.clip_norm);
    let n = scenes.len();
    let mut labels: Option<Vec<usize>> = None;
    let mut marginal_error = 0.0;
    let mut log = Vec::with_capacity(config.epochs);

    for epoch in 0..config.epochs {
        let joint_phase = epoch >= config.warmup;
        if joint_phase && (epoch - config.warmup) % config.relabel_period == 0 {
            let (a, _) = relabel(&model, scenes, &config.sinkhorn)?;
            marginal_error = a.marginal_error;
            labels = Some(a.labels);
        }
        let lambda = if joint_phase { config.lambda } else { 1.0 };

        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut stream(seed, Domain::Shuffle, epoch as u64));

        let mut sum = LossBreakdown::default();
        let mut batches = 0usize;
        for chunk in order.chunks(config.batch) {
            if chunk.len() < 2 {
                continue;
            }
            let batch: Vec<&Scene> = chunk.iter().map(|&i| &scenes[i]).collect();
            let batch_labels: Option<Vec<usize>> =
                labels.as_ref().map(|l| chunk.iter().map(|&i| l[i]).collect());
            let (loss, grads) = joint_loss_and_grad(&model, &batch, batch_labels.as_deref(), lambda)?;
            model.params.zero_grad();
            model.params.accumulate(&grads);
            opt.step(&mut model.params);
            sum.nc += loss.nc;
            sum.clust += loss.clust;
            sum.joint += loss.joint;
            batches += 1;
        }
        let denom = batches.max(1) as f64;
        let record = EpochRecord {
            epoch,
            loss_nc: sum.nc / denom,
            loss_clust: sum.clust / denom,
            loss_joint: sum.joint / denom,
            label_entropy: labels.as_ref().map_or(0.0, |l| label_entropy(l, config.k)),
            marginal_error,
        };
        on_epoch(&record);
        log.push(record);
    }

    let (assignment, lp) = relabel(&model, scenes, &config.sinkhorn)?;
    let labels = label_records(scenes, &assignment, &lp);
    Ok(TrainOutput { model, labels, log })
}

/// Contrastive loss of the model on a fixed batch of scenes.
pub fn held_out_nc(model: &AvModel, scenes: &[Scene]) -> Result<f64> {
    let refs: Vec<&Scene> = scenes.iter().collect();
    let fwds = forward_batch(model, &refs)?;
    Ok(loss_nc(model, &fwds))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthdata::{generate_dataset, DatasetConfig};

    fn small_data() -> Vec<Scene> {
        generate_dataset(&DatasetConfig {
            n_train: 48,
            n_test: 0,
            ..DatasetConfig::default()
        })
        .unwrap()
        .train
    }

    fn short(epochs: usize, warmup: usize) -> SslConfig {
        SslConfig {
            epochs,
            warmup,
            relabel_period: 1,
            batch: 16,
            ..SslConfig::default()
        }
    }

    #[test]
    fn zero_epochs_leaves_model_unchanged() {
        let scenes = small_data();
        let out = train(&scenes, ModelConfig::default(), &short(0, 0), 3, |_| {}).unwrap();
        let fresh = AvModel::new(ModelConfig::default(), 3).unwrap();
        assert_eq!(out.model.params, fresh.params);
        assert_eq!(out.labels.len(), scenes.len());
        assert!(out.log.is_empty());
    }

    #[test]
    fn training_is_deterministic() {
        let scenes = small_data();
        let cfg = short(3, 1);
        let a = train(&scenes, ModelConfig::default(), &cfg, 7, |_| {}).unwrap();
        let b = parallel::with_workers(1, || train(&scenes, ModelConfig::default(), &cfg, 7, |_| {}).unwrap());
        assert_eq!(a.model.params, b.model.params);
        assert_eq!(a.labels, b.labels);
        assert_eq!(a.log, b.log);
        assert!(a.log.iter().all(|r| r.loss_joint.is_finite()));
        assert!(a.labels.iter().all(|l| l.label < 4 && l.strength > 0.0 && l.strength <= 1.0));
    }

    #[test]
    fn config_validation() {
        let mut c = SslConfig::default();
        c.warmup = c.epochs + 1;
        assert!(c.validate().is_err());
        let c = SslConfig {
            lambda: 1.5,
            ..SslConfig::default()
        };
        assert!(c.validate().is_err());
    }
}
