//! Stage 2: turn heatmaps and cluster posteriors into box annotations.

use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::AvModel;
pub use crate::model::HeatMap;
use crate::numerics::ops::argmax;
use crate::parallel;
use crate::rng::{stream, Domain};
use crate::synthdata::{BBox, Scene};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PseudoAnnotation {
    pub scene_id: u64,
    #[serde(rename = "box")]
    pub bbox: BBox,
    pub label: usize,
    pub confidence: f64,
    pub beta: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExtractConfig {
    pub beta_range: [f64; 2],
    pub min_confidence: f64,
    #[serde(default)]
    pub multi: bool,
}

impl Default for ExtractConfig {
    fn default() -> Self {
        Self {
            beta_range: [0.7, 0.9],
            min_confidence: 0.0,
            multi: false,
        }
    }
}

impl ExtractConfig {
    pub fn validate(&self) -> Result<()> {
        let [lo, hi] = self.beta_range;
        if !(0.0 <= lo && lo <= hi && hi <= 1.0) {
            return Err(Error::ConfigInvalid(format!(
                "extract: beta_range [{lo}, {hi}] must satisfy 0 <= lo <= hi <= 1"
            )));
        }
        if self.min_confidence.is_nan() {
            return Err(Error::ConfigInvalid("extract: min_confidence is NaN".into()));
        }
        Ok(())
    }
}

/// `ε = β·max(h) + (1−β)·mean(h)`, never above `max(h)` so the peak cell
/// always passes.
pub fn threshold(h: &HeatMap, beta: f64) -> f64 {
    let max = h.max();
    (beta * max + (1.0 - beta) * h.mean()).min(max)
}

pub fn mask(h: &HeatMap, beta: f64) -> Vec<bool> {
    let eps = threshold(h, beta);
    h.values.iter().map(|&v| v >= eps).collect()
}

/// All 4-connected components of a row-major mask, each as sorted cell
/// indices, ordered by their smallest cell.
pub fn components(mask: &[bool], grid_h: usize, grid_w: usize) -> Vec<Vec<usize>> {
    assert_eq!(mask.len(), grid_h * grid_w);
    let mut seen = vec![false; mask.len()];
    let mut out = Vec::new();
    let mut stack = Vec::new();
    for start in 0..mask.len() {
        if !mask[start] || seen[start] {
            continue;
        }
        let mut comp = Vec::new();
        seen[start] = true;
        stack.push(start);
        while let Some(u) = stack.pop() {
            comp.push(u);
            let (i, j) = (u / grid_w, u % grid_w);
            let mut visit = |v: usize| {
                if mask[v] && !seen[v] {
                    seen[v] = true;
                    stack.push(v);
                }
            };
            if i > 0 {
                visit(u - grid_w);
            }
            if i + 1 < grid_h {
                visit(u + grid_w);
            }
            if j > 0 {
                visit(u - 1);
            }
            if j + 1 < grid_w {
                visit(u + 1);
            }
        }
        comp.sort_unstable();
        out.push(comp);
    }
    out
}

/// Largest 4-connected component; ties go to the one holding the earliest
/// cell in row-major order. Empty for an empty mask.
pub fn largest_component(mask: &[bool], grid_h: usize, grid_w: usize) -> Vec<usize> {
    let mut best: Vec<usize> = Vec::new();
    for c in components(mask, grid_h, grid_w) {
        if c.len() > best.len() {
            best = c;
        }
    }
    best
}

/// Pixel box spanned by a set of cells; cell `(i, j)` covers
/// `[j·s, (j+1)·s) × [i·s, (i+1)·s)`.
pub fn cells_to_box(cells: &[usize], grid_w: usize, patch: usize) -> Option<BBox> {
    let first = *cells.first()?;
    let (mut r0, mut r1, mut c0, mut c1) = (first / grid_w, first / grid_w, first % grid_w, first % grid_w);
    for &u in cells {
        let (i, j) = (u / grid_w, u % grid_w);
        r0 = r0.min(i);
        r1 = r1.max(i);
        c0 = c0.min(j);
        c1 = c1.max(j);
    }
    let s = patch as f64;
    Some(BBox::new(
        c0 as f64 * s,
        r0 as f64 * s,
        (c1 + 1) as f64 * s,
        (r1 + 1) as f64 * s,
    ))
}

/// Box around the largest component of `{u : h_u ≥ threshold(h, β)}`, in
/// image pixels.
pub fn extract_box(h: &HeatMap, beta: f64, patch: usize) -> Option<BBox> {
    let m = mask(h, beta);
    cells_to_box(&largest_component(&m, h.grid_h, h.grid_w), h.grid_w, patch)
}

/// Boxes around every component of the mask, largest first.
pub fn extract_boxes(h: &HeatMap, beta: f64, patch: usize) -> Vec<(BBox, f64)> {
    let m = mask(h, beta);
    let mut comps = components(&m, h.grid_h, h.grid_w);
    comps.sort_by(|a, b| b.len().cmp(&a.len()));
    comps
        .iter()
        .filter_map(|c| {
            let peak = c.iter().map(|&u| h.values[u]).fold(f64::NEG_INFINITY, f64::max);
            cells_to_box(c, h.grid_w, patch).map(|b| (b, peak))
        })
        .collect()
}

/// `argmax_y (g_v[y] + g_a[y])`, first index on ties.
pub fn class_label(visual_logits: &[f64], audio_logits: &[f64]) -> Result<usize> {
    if visual_logits.len() != audio_logits.len() || visual_logits.is_empty() {
        return Err(Error::shape(&[visual_logits.len()], &[audio_logits.len()]));
    }
    let sum: Vec<f64> = visual_logits.iter().zip(audio_logits).map(|(a, b)| a + b).collect();
    Ok(argmax(&sum))
}

pub fn sample_beta(range: [f64; 2], seed: u64, scene_id: u64) -> f64 {
    let [lo, hi] = range;
    if lo == hi {
        return lo;
    }
    stream(seed, Domain::Beta, scene_id).random_range(lo..=hi)
}

fn annotate_scene(model: &AvModel, scene: &Scene, config: &ExtractConfig, seed: u64) -> Result<Vec<PseudoAnnotation>> {
    let fwd = model.forward_pair(&scene.image, &scene.audio)?;
    let mut h = model.heatmap(&fwd);
    h.scene_id = Some(scene.scene_id);
    let confidence = h.max();
    if confidence < config.min_confidence {
        return Ok(Vec::new());
    }
    let label = class_label(fwd.visual_logits(), fwd.audio_logits())?;
    let beta = sample_beta(config.beta_range, seed, scene.scene_id);
    let patch = model.config.patch;
    let boxes = if config.multi {
        extract_boxes(&h, beta, patch)
    } else {
        extract_box(&h, beta, patch).map(|b| (b, confidence)).into_iter().collect()
    };
    Ok(boxes
        .into_iter()
        .map(|(bbox, conf)| PseudoAnnotation {
            scene_id: scene.scene_id,
            bbox,
            label,
            confidence: conf,
            beta,
        })
        .collect())
}

/// One annotation per scene (more with `multi`), in scene order. Each scene
/// draws its own β from a stream keyed by its id, so the output does not
/// depend on the worker count.
pub fn extract_annotations(
    scenes: &[Scene],
    model: &AvModel,
    config: &ExtractConfig,
    seed: u64,
) -> Result<Vec<PseudoAnnotation>> {
    config.validate()?;
    let per_scene = parallel::map_slice(scenes, |s| annotate_scene(model, s, config, seed));
    let mut out = Vec::with_capacity(scenes.len());
    for r in per_scene {
        out.extend(r?);
    }
    Ok(out)
}

pub fn write_jsonl(path: &Path, annotations: &[PseudoAnnotation]) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    let mut f = std::io::BufWriter::new(fs::File::create(path)?);
    for a in annotations {
        serde_json::to_writer(&mut f, a)?;
        f.write_all(b"\n")?;
    }
    f.flush()?;
    Ok(())
}

pub fn read_jsonl(path: &Path) -> Result<Vec<PseudoAnnotation>> {
    if !path.exists() {
        return Err(Error::MissingArtifact(path.to_path_buf()));
    }
    let reader = BufReader::new(fs::File::open(path)?);
    let mut out = Vec::new();
    for (n, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let a: PseudoAnnotation = serde_json::from_str(&line)
            .map_err(|e| Error::format(path, format!("line {}: {e}", n + 1)))?;
        out.push(a);
    }
    Ok(out)
}
