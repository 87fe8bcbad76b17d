//! Two-stream audio-visual network.
//!
//! Shared backbones (`VisualBackbone` per image patch, `AudioBackbone` per
//! audio vector) feed two kinds of heads each: a localisation head producing
//! unit-norm embeddings in a common space, and a classifier head producing
//! `K` cluster logits. The visual classifier sees the spatial mean of the
//! backbone grid.

pub mod checkpoint;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::linear::{Linear, Mlp2, Mlp2Cache};
use crate::numerics::ops::{
    argmax, dot, l2_normalize, l2_normalize_backward, norm, relu_backward_inplace, relu_inplace,
};
use crate::numerics::{GradSet, ParamSet, Parameter, Tensor};
use crate::rng::{stream, Domain};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub height: usize,
    pub width: usize,
    pub audio_dim: usize,
    pub k: usize,
    pub patch: usize,
    pub backbone_dim: usize,
    pub head_hidden: usize,
    pub embed_dim: usize,
    /// Initial value of `1/ρ`.
    pub inv_temperature: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            height: 32,
            width: 32,
            audio_dim: 16,
            k: 4,
            patch: 4,
            backbone_dim: 32,
            head_hidden: 64,
            embed_dim: 32,
            inv_temperature: 10.0,
        }
    }
}

impl ModelConfig {
    pub fn grid(&self) -> (usize, usize) {
        (self.height / self.patch, self.width / self.patch)
    }

    pub fn validate(&self) -> Result<()> {
        if self.patch == 0 || self.height % self.patch != 0 || self.width % self.patch != 0 {
            return Err(Error::ConfigInvalid(format!(
                "model: image {}x{} not divisible by patch {}",
                self.height, self.width, self.patch
            )));
        }
        if self.k == 0 || self.backbone_dim == 0 || self.embed_dim == 0 || self.head_hidden == 0 {
            return Err(Error::ConfigInvalid("model: dimensions must be positive".into()));
        }
        if !(self.inv_temperature > 0.0) {
            return Err(Error::ConfigInvalid("model: inv_temperature must be positive".into()));
        }
        Ok(())
    }
}

/// Patch encoder: each `s×s×3` patch goes through two ReLU stages.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct VisualBackbone {
    pub patch: usize,
    pub first: Linear,
    pub second: Linear,
}

#[derive(Debug, Clone, Default)]
pub struct VisualCache {
    pub grid_h: usize,
    pub grid_w: usize,
    /// cells × patch_dim
    pub patches: Vec<f64>,
    /// cells × C_b, post-ReLU
    pub hidden: Vec<f64>,
    /// cells × C_b, post-ReLU grid features
    pub features: Vec<f64>,
}

impl VisualCache {
    pub fn cells(&self) -> usize {
        self.grid_h * self.grid_w
    }

    pub fn feature(&self, cell: usize) -> &[f64] {
        let c = self.features.len() / self.cells();
        &self.features[cell * c..(cell + 1) * c]
    }

    pub fn pooled(&self) -> Vec<f64> {
        let cells = self.cells();
        let c = self.features.len() / cells;
        let mut out = vec![0.0; c];
        for cell in 0..cells {
            for (o, v) in out.iter_mut().zip(&self.features[cell * c..(cell + 1) * c]) {
                *o += v;
            }
        }
        out.iter_mut().for_each(|v| *v /= cells as f64);
        out
    }
}

impl VisualBackbone {
    pub fn register<R: Rng>(params: &mut ParamSet, name: &str, patch: usize, dim: usize, rng: &mut R) -> Self {
        let pd = patch * patch * 3;
        Self {
            patch,
            first: Linear::register(params, &format!("{name}.0"), pd, dim, 1.0, rng),
            second: Linear::register(params, &format!("{name}.1"), dim, dim, 1.0, rng),
        }
    }

    pub fn dim(&self) -> usize {
        self.second.out_dim
    }

    pub fn forward(&self, params: &ParamSet, image: &Tensor) -> Result<VisualCache> {
        let shape = image.shape();
        let s = self.patch;
        if shape.len() != 3 || shape[2] != 3 || shape[0] % s != 0 || shape[1] % s != 0 {
            return Err(Error::shape(&[s, s, 3], shape));
        }
        let (gh, gw) = (shape[0] / s, shape[1] / s);
        let width = shape[1];
        let pd = s * s * 3;
        let c = self.dim();
        let cells = gh * gw;
        let data = image.data();
        let mut patches = vec![0.0; cells * pd];
        for gi in 0..gh {
            for gj in 0..gw {
                let dst = &mut patches[(gi * gw + gj) * pd..(gi * gw + gj + 1) * pd];
                for dy in 0..s {
                    let row = ((gi * s + dy) * width + gj * s) * 3;
                    dst[dy * s * 3..(dy + 1) * s * 3].copy_from_slice(&data[row..row + s * 3]);
                }
            }
        }
        let mut hidden = vec![0.0; cells * c];
        let mut features = vec![0.0; cells * c];
        for cell in 0..cells {
            let h = &mut hidden[cell * c..(cell + 1) * c];
            self.first.forward(params, &patches[cell * pd..(cell + 1) * pd], h);
            relu_inplace(h);
            let f = &mut features[cell * c..(cell + 1) * c];
            self.second.forward(params, &hidden[cell * c..(cell + 1) * c], f);
            relu_inplace(f);
        }
        Ok(VisualCache {
            grid_h: gh,
            grid_w: gw,
            patches,
            hidden,
            features,
        })
    }

    /// `dfeatures` is `cells × C_b`, the gradient w.r.t. post-ReLU grid features.
    pub fn backward(&self, params: &ParamSet, cache: &VisualCache, dfeatures: &[f64], grads: &mut GradSet) {
        let c = self.dim();
        let pd = self.patch * self.patch * 3;
        let mut df = vec![0.0; c];
        let mut dh = vec![0.0; c];
        for cell in 0..cache.cells() {
            let src = &dfeatures[cell * c..(cell + 1) * c];
            if src.iter().all(|&v| v == 0.0) {
                continue;
            }
            df.copy_from_slice(src);
            relu_backward_inplace(&cache.features[cell * c..(cell + 1) * c], &mut df);
            dh.iter_mut().for_each(|v| *v = 0.0);
            let hidden = &cache.hidden[cell * c..(cell + 1) * c];
            self.second.backward(params, hidden, &df, Some(&mut dh), grads);
            relu_backward_inplace(hidden, &mut dh);
            self.first
                .backward(params, &cache.patches[cell * pd..(cell + 1) * pd], &dh, None, grads);
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AudioBackbone {
    pub first: Linear,
    pub second: Linear,
}

#[derive(Debug, Clone, Default)]
pub struct AudioCache {
    pub input: Vec<f64>,
    pub hidden: Vec<f64>,
    pub features: Vec<f64>,
}

impl AudioBackbone {
    pub fn register<R: Rng>(params: &mut ParamSet, name: &str, input: usize, dim: usize, rng: &mut R) -> Self {
        Self {
            first: Linear::register(params, &format!("{name}.0"), input, dim, 1.0, rng),
            second: Linear::register(params, &format!("{name}.1"), dim, dim, 1.0, rng),
        }
    }

    pub fn forward(&self, params: &ParamSet, audio: &[f64]) -> Result<AudioCache> {
        if audio.len() != self.first.in_dim {
            return Err(Error::shape(&[self.first.in_dim], &[audio.len()]));
        }
        let mut hidden = self.first.forward_vec(params, audio);
        relu_inplace(&mut hidden);
        let mut features = self.second.forward_vec(params, &hidden);
        relu_inplace(&mut features);
        Ok(AudioCache {
            input: audio.to_vec(),
            hidden,
            features,
        })
    }

    pub fn backward(&self, params: &ParamSet, cache: &AudioCache, dfeatures: &[f64], grads: &mut GradSet) {
        let mut df = dfeatures.to_vec();
        relu_backward_inplace(&cache.features, &mut df);
        let mut dh = vec![0.0; self.first.out_dim];
        self.second.backward(params, &cache.hidden, &df, Some(&mut dh), grads);
        relu_backward_inplace(&cache.hidden, &mut dh);
        self.first.backward(params, &cache.input, &dh, None, grads);
    }
}

/// Two-layer MLP followed by L2 normalisation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LocalizationHead {
    pub mlp: Mlp2,
}

#[derive(Debug, Clone, Default)]
pub struct EmbedCache {
    pub mlp: Mlp2Cache,
    pub norm: f64,
    pub embedding: Vec<f64>,
}

impl LocalizationHead {
    pub fn register<R: Rng>(params: &mut ParamSet, name: &str, dims: (usize, usize, usize), rng: &mut R) -> Self {
        let mlp = Mlp2::register(params, name, dims, 1.0, rng);
        for b in params.as_mut_slice()[mlp.second.b].value.data_mut() {
            *b = rng.random_range(-0.1..0.1);
        }
        Self { mlp }
    }

    pub fn forward(&self, params: &ParamSet, x: &[f64]) -> Result<EmbedCache> {
        let mlp = self.mlp.forward(params, x);
        let n = norm(&mlp.out);
        let embedding = l2_normalize(&mlp.out)?;
        Ok(EmbedCache { mlp, norm: n, embedding })
    }

    pub fn backward(
        &self,
        params: &ParamSet,
        x: &[f64],
        cache: &EmbedCache,
        dembedding: &[f64],
        dx: Option<&mut [f64]>,
        grads: &mut GradSet,
    ) {
        let dout = l2_normalize_backward(&cache.embedding, cache.norm, dembedding);
        self.mlp.backward(params, x, &cache.mlp, &dout, dx, grads);
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ClassifierHead {
    pub mlp: Mlp2,
}

impl ClassifierHead {
    pub fn register<R: Rng>(params: &mut ParamSet, name: &str, dims: (usize, usize, usize), rng: &mut R) -> Self {
        Self {
            mlp: Mlp2::register(params, name, dims, 0.5, rng),
        }
    }
}

/// `ρ`, stored as `log ρ`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Temperature {
    pub log_rho: usize,
}

impl Temperature {
    pub fn inv_rho(&self, params: &ParamSet) -> f64 {
        (-params.value(self.log_rho)[0]).exp()
    }
}

/// Scalar field over the feature grid.
#[derive(Debug, Clone, PartialEq)]
pub struct HeatMap {
    pub grid_h: usize,
    pub grid_w: usize,
    pub values: Vec<f64>,
    pub scene_id: Option<u64>,
}

impl HeatMap {
    pub fn new(grid_h: usize, grid_w: usize, values: Vec<f64>) -> Self {
        assert_eq!(values.len(), grid_h * grid_w);
        Self {
            grid_h,
            grid_w,
            values,
            scene_id: None,
        }
    }

    pub fn at(&self, i: usize, j: usize) -> f64 {
        self.values[i * self.grid_w + j]
    }

    pub fn max(&self) -> f64 {
        self.values.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn mean(&self) -> f64 {
        self.values.iter().sum::<f64>() / self.values.len() as f64
    }
}

/// `h_u = ⟨e_u, a⟩ · (1/ρ)` for unit-norm cell embeddings `e_u` and audio embedding `a`.
pub fn localize(cell_embeddings: &[Vec<f64>], audio_embedding: &[f64], inv_rho: f64, grid: (usize, usize)) -> HeatMap {
    let values = cell_embeddings
        .iter()
        .map(|e| dot(e, audio_embedding) * inv_rho)
        .collect();
    HeatMap::new(grid.0, grid.1, values)
}

/// `S = max_u h_u` and the first maximising cell.
pub fn score(h: &HeatMap) -> (f64, usize) {
    assert!(!h.values.is_empty(), "score of an empty heatmap");
    let u = argmax(&h.values);
    (h.values[u], u)
}

/// Complete forward state of one (image, audio) pair.
#[derive(Debug, Clone)]
pub struct PairForward {
    pub visual: VisualCache,
    pub cells: Vec<EmbedCache>,
    pub pooled: Vec<f64>,
    pub cls_v: Mlp2Cache,
    pub audio: AudioCache,
    pub audio_embed: EmbedCache,
    pub cls_a: Mlp2Cache,
}

impl PairForward {
    pub fn cell_embeddings(&self) -> Vec<Vec<f64>> {
        self.cells.iter().map(|c| c.embedding.clone()).collect()
    }

    pub fn visual_logits(&self) -> &[f64] {
        &self.cls_v.out
    }

    pub fn audio_logits(&self) -> &[f64] {
        &self.cls_a.out
    }

    /// Best cell for audio embedding `a` and its cosine (before temperature).
    pub fn best_cell(&self, a: &[f64]) -> (f64, usize) {
        let mut best = (f64::NEG_INFINITY, 0);
        for (u, c) in self.cells.iter().enumerate() {
            let v = dot(&c.embedding, a);
            if v > best.0 {
                best = (v, u);
            }
        }
        best
    }
}

/// Gradients flowing into one pair's outputs.
#[derive(Debug, Clone)]
pub struct PairGrad {
    pub cell_embeddings: Vec<Vec<f64>>,
    pub audio_embedding: Vec<f64>,
    pub visual_logits: Vec<f64>,
    pub audio_logits: Vec<f64>,
}

impl PairGrad {
    pub fn zeros(cfg: &ModelConfig) -> Self {
        let (gh, gw) = cfg.grid();
        Self {
            cell_embeddings: vec![vec![0.0; cfg.embed_dim]; gh * gw],
            audio_embedding: vec![0.0; cfg.embed_dim],
            visual_logits: vec![0.0; cfg.k],
            audio_logits: vec![0.0; cfg.k],
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AvModel {
    pub config: ModelConfig,
    pub params: ParamSet,
    pub visual: VisualBackbone,
    pub audio: AudioBackbone,
    pub loc_v: LocalizationHead,
    pub loc_a: LocalizationHead,
    pub cls_v: ClassifierHead,
    pub cls_a: ClassifierHead,
    pub temperature: Temperature,
}

impl AvModel {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = stream(seed, Domain::ModelInit, 0);
        let mut params = ParamSet::new();
        let c = config.backbone_dim;
        let visual = VisualBackbone::register(&mut params, "visual", config.patch, c, &mut rng);
        let audio = AudioBackbone::register(&mut params, "audio", config.audio_dim, c, &mut rng);
        let dims = (c, config.head_hidden, config.embed_dim);
        let loc_v = LocalizationHead::register(&mut params, "loc_v", dims, &mut rng);
        let loc_a = LocalizationHead::register(&mut params, "loc_a", dims, &mut rng);
        let cdims = (c, config.head_hidden, config.k);
        let cls_v = ClassifierHead::register(&mut params, "cls_v", cdims, &mut rng);
        let cls_a = ClassifierHead::register(&mut params, "cls_a", cdims, &mut rng);
        let log_rho = params.push(Parameter::new(
            "log_rho",
            Tensor::scalar(-config.inv_temperature.ln()),
        ));
        Ok(Self {
            config,
            params,
            visual,
            audio,
            loc_v,
            loc_a,
            cls_v,
            cls_a,
            temperature: Temperature { log_rho },
        })
    }

    pub fn inv_rho(&self) -> f64 {
        self.temperature.inv_rho(&self.params)
    }

    /// Grid features (`h×w×C_b`) and their spatial mean.
    pub fn forward_visual(&self, image: &Tensor) -> Result<(Tensor, Vec<f64>)> {
        let cache = self.visual.forward(&self.params, image)?;
        let pooled = cache.pooled();
        let grid = Tensor::from_vec(&[cache.grid_h, cache.grid_w, self.visual.dim()], cache.features)?;
        Ok((grid, pooled))
    }

    pub fn forward_pair(&self, image: &Tensor, audio: &[f64]) -> Result<PairForward> {
        let p = &self.params;
        let visual = self.visual.forward(p, image)?;
        let cells = (0..visual.cells())
            .map(|u| self.loc_v.forward(p, visual.feature(u)))
            .collect::<Result<Vec<_>>>()?;
        let pooled = visual.pooled();
        let cls_v = self.cls_v.mlp.forward(p, &pooled);
        let audio = self.audio.forward(p, audio)?;
        let audio_embed = self.loc_a.forward(p, &audio.features)?;
        let cls_a = self.cls_a.mlp.forward(p, &audio.features);
        Ok(PairForward {
            visual,
            cells,
            pooled,
            cls_v,
            audio,
            audio_embed,
            cls_a,
        })
    }

    pub fn heatmap(&self, fwd: &PairForward) -> HeatMap {
        let (gh, gw) = (fwd.visual.grid_h, fwd.visual.grid_w);
        let inv = self.inv_rho();
        let values = fwd
            .cells
            .iter()
            .map(|c| dot(&c.embedding, &fwd.audio_embed.embedding) * inv)
            .collect();
        HeatMap::new(gh, gw, values)
    }

    /// Accumulates parameter gradients for one pair (temperature excluded).
    pub fn backward_pair(&self, fwd: &PairForward, g: &PairGrad, grads: &mut GradSet) {
        let p = &self.params;
        let c = self.visual.dim();
        let cells = fwd.visual.cells();

        let mut dfeat = vec![0.0; cells * c];
        for u in 0..cells {
            let de = &g.cell_embeddings[u];
            if de.iter().all(|&v| v == 0.0) {
                continue;
            }
            self.loc_v.backward(
                p,
                fwd.visual.feature(u),
                &fwd.cells[u],
                de,
                Some(&mut dfeat[u * c..(u + 1) * c]),
                grads,
            );
        }
        if g.visual_logits.iter().any(|&v| v != 0.0) {
            let mut dpooled = vec![0.0; c];
            self.cls_v
                .mlp
                .backward(p, &fwd.pooled, &fwd.cls_v, &g.visual_logits, Some(&mut dpooled), grads);
            let share = 1.0 / cells as f64;
            for u in 0..cells {
                for (d, v) in dfeat[u * c..(u + 1) * c].iter_mut().zip(&dpooled) {
                    *d += v * share;
                }
            }
        }
        self.visual.backward(p, &fwd.visual, &dfeat, grads);

        let mut daudio = vec![0.0; c];
        self.loc_a.backward(
            p,
            &fwd.audio.features,
            &fwd.audio_embed,
            &g.audio_embedding,
            Some(&mut daudio),
            grads,
        );
        if g.audio_logits.iter().any(|&v| v != 0.0) {
            self.cls_a.mlp.backward(
                p,
                &fwd.audio.features,
                &fwd.cls_a,
                &g.audio_logits,
                Some(&mut daudio),
                grads,
            );
        }
        self.audio.backward(p, &fwd.audio, &daudio, grads);
    }
}
