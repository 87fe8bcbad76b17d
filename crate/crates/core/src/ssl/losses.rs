//! Contrastive localisation loss, shared-label clustering loss, and their
//! convex combination, with gradients down to every model parameter.

use crate::error::Result;
use crate::model::{AvModel, PairForward, PairGrad};
use crate::numerics::ops::{logsumexp, softmax_cross_entropy};
use crate::numerics::GradSet;
use crate::parallel;
use crate::synthdata::Scene;

/// `B × B` correspondence scores `S(v, a)` (row = image, column = audio).
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreMatrix {
    pub b: usize,
    pub values: Vec<f64>,
    /// Maximising cell of each heatmap.
    pub argmax: Vec<usize>,
}

impl ScoreMatrix {
    pub fn at(&self, v: usize, a: usize) -> f64 {
        self.values[v * self.b + a]
    }
}

pub fn score_matrix(fwds: &[PairForward], inv_rho: f64) -> ScoreMatrix {
    let b = fwds.len();
    let rows: Vec<Vec<(f64, usize)>> = parallel::map_indexed(b, |v| {
        (0..b)
            .map(|a| {
                let (cos, u) = fwds[v].best_cell(&fwds[a].audio_embed.embedding);
                (cos * inv_rho, u)
            })
            .collect()
    });
    let mut values = Vec::with_capacity(b * b);
    let mut argmax = Vec::with_capacity(b * b);
    for row in rows {
        for (s, u) in row {
            values.push(s);
            argmax.push(u);
        }
    }
    ScoreMatrix { b, values, argmax }
}

/// Symmetric noise-contrastive loss on a score matrix and `dL/dS`.
pub fn contrastive_loss(scores: &[f64], b: usize) -> (f64, Vec<f64>) {
    assert_eq!(scores.len(), b * b);
    let mut grad = vec![0.0; b * b];
    if b == 0 {
        return (0.0, grad);
    }
    let inv_b = 1.0 / b as f64;
    let mut a_to_v = 0.0;
    for v in 0..b {
        let row = &scores[v * b..(v + 1) * b];
        let lse = logsumexp(row);
        a_to_v += lse - row[v];
        for a in 0..b {
            let p = (row[a] - lse).exp();
            grad[v * b + a] += 0.5 * inv_b * (p - if a == v { 1.0 } else { 0.0 });
        }
    }
    let mut v_to_a = 0.0;
    let mut col = vec![0.0; b];
    for a in 0..b {
        for v in 0..b {
            col[v] = scores[v * b + a];
        }
        let lse = logsumexp(&col);
        v_to_a += lse - col[a];
        for v in 0..b {
            let p = (col[v] - lse).exp();
            grad[v * b + a] += 0.5 * inv_b * (p - if a == v { 1.0 } else { 0.0 });
        }
    }
    let loss = (0.5 * inv_b * (a_to_v + v_to_a)).max(0.0);
    (loss, grad)
}

/// Mean cross-entropy of both classifier heads against shared labels, averaged
/// over modalities. Returns the loss and per-item logit gradients.
pub fn clustering_loss(
    visual_logits: &[&[f64]],
    audio_logits: &[&[f64]],
    labels: &[usize],
) -> Result<(f64, Vec<Vec<f64>>, Vec<Vec<f64>>)> {
    let b = labels.len();
    if b == 0 {
        return Ok((0.0, vec![], vec![]));
    }
    let scale = 0.5 / b as f64;
    let mut loss = 0.0;
    let mut dv = Vec::with_capacity(b);
    let mut da = Vec::with_capacity(b);
    for i in 0..b {
        let (lv, mut gv) = softmax_cross_entropy(visual_logits[i], labels[i])?;
        let (la, mut ga) = softmax_cross_entropy(audio_logits[i], labels[i])?;
        loss += scale * (lv + la);
        gv.iter_mut().for_each(|g| *g *= scale);
        ga.iter_mut().for_each(|g| *g *= scale);
        dv.push(gv);
        da.push(ga);
    }
    Ok((loss, dv, da))
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LossBreakdown {
    pub nc: f64,
    pub clust: f64,
    pub joint: f64,
}

pub fn forward_batch(model: &AvModel, scenes: &[&Scene]) -> Result<Vec<PairForward>> {
    parallel::map_slice(scenes, |s| model.forward_pair(&s.image, &s.audio))
        .into_iter()
        .collect()
}

pub fn loss_nc(model: &AvModel, fwds: &[PairForward]) -> f64 {
    let sm = score_matrix(fwds, model.inv_rho());
    contrastive_loss(&sm.values, sm.b).0
}

pub fn loss_clust(fwds: &[PairForward], labels: &[usize]) -> Result<f64> {
    let lv: Vec<&[f64]> = fwds.iter().map(|f| f.visual_logits()).collect();
    let la: Vec<&[f64]> = fwds.iter().map(|f| f.audio_logits()).collect();
    Ok(clustering_loss(&lv, &la, labels)?.0)
}

/// `λ · L_NC + (1 − λ) · L_clust` and its gradient.
///
/// `labels` may be `None` only when `λ = 1`. Per-item gradients are summed
/// in item order, so the result does not depend on the worker count.
pub fn joint_loss_and_grad(
    model: &AvModel,
    scenes: &[&Scene],
    labels: Option<&[usize]>,
    lambda: f64,
) -> Result<(LossBreakdown, GradSet)> {
    assert!((0.0..=1.0).contains(&lambda), "lambda must lie in [0, 1]");
    let fwds = forward_batch(model, scenes)?;
    let b = fwds.len();
    let inv_rho = model.inv_rho();
    let sm = score_matrix(&fwds, inv_rho);
    let (nc, dscores) = contrastive_loss(&sm.values, b);

    let (clust, dv, da) = match labels {
        Some(labels) if lambda < 1.0 => {
            let lv: Vec<&[f64]> = fwds.iter().map(|f| f.visual_logits()).collect();
            let la: Vec<&[f64]> = fwds.iter().map(|f| f.audio_logits()).collect();
            clustering_loss(&lv, &la, labels)?
        }
        Some(labels) => (loss_clust(&fwds, labels)?, vec![], vec![]),
        None => {
            assert!(lambda == 1.0, "labels are required when lambda < 1");
            (0.0, vec![], vec![])
        }
    };
    let joint = lambda * nc + (1.0 - lambda) * clust;

    let cfg = &model.config;
    let parts: Vec<GradSet> = parallel::map_indexed(b, |i| {
        let mut g = PairGrad::zeros(cfg);
        for a in 0..b {
            let coef = lambda * dscores[i * b + a] * inv_rho;
            if coef != 0.0 {
                let u = sm.argmax[i * b + a];
                crate::numerics::ops::axpy(coef, &fwds[a].audio_embed.embedding, &mut g.cell_embeddings[u]);
            }
        }
        for v in 0..b {
            let coef = lambda * dscores[v * b + i] * inv_rho;
            if coef != 0.0 {
                let u = sm.argmax[v * b + i];
                crate::numerics::ops::axpy(coef, &fwds[v].cells[u].embedding, &mut g.audio_embedding);
            }
        }
        if !dv.is_empty() {
            let w = 1.0 - lambda;
            g.visual_logits = dv[i].iter().map(|x| w * x).collect();
            g.audio_logits = da[i].iter().map(|x| w * x).collect();
        }
        let mut grads = GradSet::zeros_like(&model.params);
        model.backward_pair(&fwds[i], &g, &mut grads);
        grads
    });
    let mut total = GradSet::zeros_like(&model.params);
    for p in &parts {
        total.add_assign(p);
    }
    // d/d log ρ of S = cos · e^{−log ρ} is −S
    let dlog_rho: f64 = -lambda
        * dscores
            .iter()
            .zip(&sm.values)
            .map(|(d, s)| d * s)
            .sum::<f64>();
    total.buf_mut(model.temperature.log_rho)[0] += dlog_rho;

    Ok((LossBreakdown { nc, clust, joint }, total))
}
