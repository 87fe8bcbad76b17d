//! Synthetic audio-visual scenes: coloured shapes on a dark background, one
//! of which "sounds" and determines the paired audio vector.

mod bbox;
pub mod io;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

pub use bbox::BBox;

use crate::error::{Error, Result};
use crate::numerics::ops::{dot, l2_normalize};
use crate::numerics::Tensor;
use crate::parallel;
use crate::rng::{stream, Domain};

/// Per-prototype rejection budget.
pub const REJECTION_ROUNDS: usize = 10_000;
const MAX_AUDIO_COSINE: f64 = 0.5;
const MIN_COLOR_DISTANCE: f64 = 0.3;
const MAX_BOX_IOU: f64 = 0.3;
const MIN_VISIBLE_FRACTION: f64 = 0.6;
const BACKGROUND_MAX: f64 = 0.15;
const PLACEMENT_TRIES: usize = 200;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Shape {
    Rectangle,
    Disk,
    /// Isosceles triangle standing on a rectangular base (a "house" outline),
    /// so the shape still fills three quarters of its tight box.
    Triangle,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassPrototype {
    pub class_id: usize,
    pub color: [f64; 3],
    pub shape: Shape,
    pub audio: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneObject {
    pub class_id: usize,
    #[serde(rename = "box")]
    pub bbox: BBox,
    pub sounding: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    pub scene_id: u64,
    /// `H × W × 3`, channel-last, values in `[0, 1]`.
    pub image: Tensor,
    /// Back-to-front render order.
    pub objects: Vec<SceneObject>,
    pub audio: Vec<f64>,
}

impl Scene {
    pub fn height(&self) -> usize {
        self.image.shape()[0]
    }

    pub fn width(&self) -> usize {
        self.image.shape()[1]
    }

    pub fn sounding(&self) -> &SceneObject {
        self.objects
            .iter()
            .find(|o| o.sounding)
            .expect("every scene has a sounding object")
    }
}

fn default_object_size() -> [usize; 2] {
    [8, 14]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetConfig {
    pub k_true: usize,
    pub n_train: usize,
    pub n_test: usize,
    pub height: usize,
    pub width: usize,
    pub audio_dim: usize,
    pub sigma_a: f64,
    pub sigma_v: f64,
    pub p_multi: f64,
    pub max_objects: usize,
    pub seed: u64,
    /// Inclusive range of object side lengths in pixels.
    #[serde(default = "default_object_size")]
    pub object_size: [usize; 2],
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            k_true: 4,
            n_train: 4000,
            n_test: 500,
            height: 32,
            width: 32,
            audio_dim: 16,
            sigma_a: 0.1,
            sigma_v: 0.02,
            p_multi: 0.6,
            max_objects: 3,
            seed: 0,
            object_size: default_object_size(),
        }
    }
}

impl DatasetConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::ConfigInvalid(format!("data: {m}")));
        if self.k_true < 2 {
            return bad("k_true must be at least 2");
        }
        if self.height == 0 || self.width == 0 || self.audio_dim == 0 || self.max_objects == 0 {
            return bad("height, width, audio_dim and max_objects must be positive");
        }
        if !(0.0..=1.0).contains(&self.p_multi) {
            return bad("p_multi must lie in [0, 1]");
        }
        if !(self.sigma_a >= 0.0 && self.sigma_v >= 0.0) {
            return bad("noise scales must be non-negative");
        }
        let [lo, hi] = self.object_size;
        if lo < 2 || lo > hi || hi > self.height.min(self.width) {
            return bad("object_size must satisfy 2 <= min <= max <= image side");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub config: DatasetConfig,
    pub prototypes: Vec<ClassPrototype>,
    pub train: Vec<Scene>,
    pub test: Vec<Scene>,
}

pub fn make_prototypes<R: Rng>(config: &DatasetConfig, rng: &mut R) -> Result<Vec<ClassPrototype>> {
    let k = config.k_true;
    let mut audio: Vec<Vec<f64>> = Vec::with_capacity(k);
    for _ in 0..k {
        let mut accepted = None;
        for _ in 0..REJECTION_ROUNDS {
            let raw: Vec<f64> = (0..config.audio_dim)
                .map(|_| rng.sample(StandardNormal))
                .collect();
            let Ok(v) = l2_normalize(&raw) else { continue };
            if audio.iter().all(|a| dot(a, &v) <= MAX_AUDIO_COSINE) {
                accepted = Some(v);
                break;
            }
        }
        audio.push(accepted.ok_or(Error::PrototypeRejectionExhausted {
            rounds: REJECTION_ROUNDS,
        })?);
    }

    let mut colors: Vec<[f64; 3]> = Vec::with_capacity(k);
    for _ in 0..k {
        let mut accepted = None;
        for _ in 0..REJECTION_ROUNDS {
            let c: [f64; 3] = [rng.random(), rng.random(), rng.random()];
            // keep clear of the dark background range
            if c.iter().copied().fold(0.0, f64::max) < BACKGROUND_MAX + MIN_COLOR_DISTANCE + 0.05 {
                continue;
            }
            if colors.iter().all(|o| linf(o, &c) >= MIN_COLOR_DISTANCE) {
                accepted = Some(c);
                break;
            }
        }
        colors.push(accepted.ok_or(Error::PrototypeRejectionExhausted {
            rounds: REJECTION_ROUNDS,
        })?);
    }

    const SHAPES: [Shape; 3] = [Shape::Rectangle, Shape::Disk, Shape::Triangle];
    Ok(audio
        .into_iter()
        .zip(colors)
        .enumerate()
        .map(|(class_id, (audio, color))| ClassPrototype {
            class_id,
            color,
            shape: SHAPES[class_id % SHAPES.len()],
            audio,
        })
        .collect())
}

fn linf(a: &[f64; 3], b: &[f64; 3]) -> f64 {
    (0..3).map(|i| (a[i] - b[i]).abs()).fold(0.0, f64::max)
}

/// Whether pixel `(px, py)` lies on `shape` drawn inside `b`.
pub fn shape_covers(shape: Shape, b: &BBox, px: usize, py: usize) -> bool {
    let x = px as f64 + 0.5;
    let y = py as f64 + 0.5;
    if !b.contains_point(x, y) {
        return false;
    }
    let u = (x - b.x1) / b.width();
    let v = (y - b.y1) / b.height();
    match shape {
        Shape::Rectangle => true,
        Shape::Disk => {
            let dx = (u - 0.5) * 2.0;
            let dy = (v - 0.5) * 2.0;
            dx * dx + dy * dy <= 1.0
        }
        Shape::Triangle => v >= 0.5 || (u - 0.5).abs() <= v,
    }
}

/// Renders one scene with the given sounding class.
pub fn generate_scene<R: Rng>(
    prototypes: &[ClassPrototype],
    config: &DatasetConfig,
    scene_id: u64,
    sounding_class: usize,
    rng: &mut R,
) -> Scene {
    assert!(!prototypes.is_empty(), "prototypes must be non-empty");
    let k = prototypes.len();

    let mut classes = vec![sounding_class];
    if config.max_objects > 1 && k > 1 && rng.random::<f64>() < config.p_multi {
        let extra = rng.random_range(1..config.max_objects).min(k - 1);
        let mut others: Vec<usize> = (0..k).filter(|&c| c != sounding_class).collect();
        others.shuffle(rng);
        classes.extend(others.into_iter().take(extra));
    }
    classes.shuffle(rng);

    let background = rng.random_range(0.0..BACKGROUND_MAX);
    for _ in 0..PLACEMENT_TRIES {
        if let Some(scene) = try_place(prototypes, config, scene_id, sounding_class, &classes, background, rng) {
            return scene;
        }
    }
    // Crowded draw: keep the sounding object alone.
    loop {
        if let Some(scene) = try_place(prototypes, config, scene_id, sounding_class, &[sounding_class], background, rng) {
            return scene;
        }
    }
}

fn try_place<R: Rng>(
    prototypes: &[ClassPrototype],
    config: &DatasetConfig,
    scene_id: u64,
    sounding_class: usize,
    classes: &[usize],
    background: f64,
    rng: &mut R,
) -> Option<Scene> {
    let (h, w) = (config.height, config.width);
    let [lo, hi] = config.object_size;
    let mut boxes: Vec<BBox> = Vec::with_capacity(classes.len());
    for _ in classes {
        let bw = rng.random_range(lo..=hi);
        let bh = rng.random_range(lo..=hi);
        let x1 = rng.random_range(0..=w - bw);
        let y1 = rng.random_range(0..=h - bh);
        let b = BBox::new(x1 as f64, y1 as f64, (x1 + bw) as f64, (y1 + bh) as f64);
        if boxes.iter().any(|o| simple_iou(o, &b) > MAX_BOX_IOU) {
            return None;
        }
        boxes.push(b);
    }

    // noise-free label map: index of the topmost object covering each pixel
    let mut owner: Vec<Option<usize>> = vec![None; h * w];
    for (i, (&c, b)) in classes.iter().zip(&boxes).enumerate() {
        let shape = prototypes[c].shape;
        for py in b.y1 as usize..b.y2 as usize {
            for px in b.x1 as usize..b.x2 as usize {
                if shape_covers(shape, b, px, py) {
                    owner[py * w + px] = Some(i);
                }
            }
        }
    }
    for (i, b) in boxes.iter().enumerate() {
        let visible = (b.y1 as usize..b.y2 as usize)
            .flat_map(|py| (b.x1 as usize..b.x2 as usize).map(move |px| (px, py)))
            .filter(|&(px, py)| owner[py * w + px] == Some(i))
            .count();
        if (visible as f64) < MIN_VISIBLE_FRACTION * b.area() {
            return None;
        }
    }

    let mut pixels = vec![0.0; h * w * 3];
    for (p, o) in owner.iter().enumerate() {
        let base = match o {
            Some(i) => prototypes[classes[*i]].color,
            None => [background; 3],
        };
        for ch in 0..3 {
            let noise: f64 = rng.sample(StandardNormal);
            pixels[p * 3 + ch] = (base[ch] + config.sigma_v * noise).clamp(0.0, 1.0);
        }
    }
    let image = Tensor::from_vec(&[h, w, 3], pixels).expect("image extents");

    let objects: Vec<SceneObject> = classes
        .iter()
        .zip(&boxes)
        .map(|(&class_id, &bbox)| SceneObject {
            class_id,
            bbox,
            sounding: class_id == sounding_class,
        })
        .collect();
    if objects
        .iter()
        .any(|o| color_match_fraction(&image, &o.bbox, &prototypes[o.class_id].color, config.sigma_v) < MIN_VISIBLE_FRACTION)
    {
        return None;
    }

    let audio = loop {
        let raw: Vec<f64> = prototypes[sounding_class]
            .audio
            .iter()
            .map(|a| a + config.sigma_a * rng.sample::<f64, _>(StandardNormal))
            .collect();
        if let Ok(a) = l2_normalize(&raw) {
            break a;
        }
    };

    Some(Scene {
        scene_id,
        image,
        objects,
        audio,
    })
}

fn simple_iou(a: &BBox, b: &BBox) -> f64 {
    let inter = a.intersection_area(b);
    inter / (a.area() + b.area() - inter)
}

/// Fraction of pixels in `b` whose mean absolute channel deviation from
/// `color` is at most `2σ_v`.
pub fn color_match_fraction(image: &Tensor, b: &BBox, color: &[f64; 3], sigma_v: f64) -> f64 {
    let w = image.shape()[1];
    let data = image.data();
    let tol = 2.0 * sigma_v;
    let (mut hits, mut total) = (0usize, 0usize);
    for py in b.y1.max(0.0) as usize..b.y2 as usize {
        for px in b.x1.max(0.0) as usize..b.x2 as usize {
            let o = (py * w + px) * 3;
            let dev = (0..3).map(|c| (data[o + c] - color[c]).abs()).sum::<f64>() / 3.0;
            total += 1;
            if dev <= tol {
                hits += 1;
            }
        }
    }
    if total == 0 {
        0.0
    } else {
        hits as f64 / total as f64
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Split {
    Train = 0,
    Test = 1,
}

/// Sounding class of the `local`-th scene of a split: classes are dealt in
/// shuffled blocks of `k`, which keeps frequencies balanced to within one.
fn block_class(seed: u64, split: Split, local: usize, k: usize) -> usize {
    let block = (local / k) as u64;
    let mut perm: Vec<usize> = (0..k).collect();
    perm.shuffle(&mut stream(seed, Domain::ClassBlock, ((split as u64) << 40) | block));
    perm[local % k]
}

fn generate_split(
    prototypes: &[ClassPrototype],
    config: &DatasetConfig,
    split: Split,
    first_id: u64,
    count: usize,
) -> Vec<Scene> {
    parallel::map_indexed(count, |local| {
        let scene_id = first_id + local as u64;
        let class = block_class(config.seed, split, local, prototypes.len());
        let mut rng = stream(config.seed, Domain::Scene, scene_id);
        generate_scene(prototypes, config, scene_id, class, &mut rng)
    })
}

/// Train scenes take ids `0..n_train`, test scenes follow.
pub fn generate_dataset(config: &DatasetConfig) -> Result<Dataset> {
    config.validate()?;
    let prototypes = make_prototypes(config, &mut stream(config.seed, Domain::Prototypes, 0))?;
    let train = generate_split(&prototypes, config, Split::Train, 0, config.n_train);
    let test = generate_split(&prototypes, config, Split::Test, config.n_train as u64, config.n_test);
    Ok(Dataset {
        config: config.clone(),
        prototypes,
        train,
        test,
    })
}

/// Fraction of object instances that are not sounding.
pub fn silent_fraction(scenes: &[Scene]) -> f64 {
    let total: usize = scenes.iter().map(|s| s.objects.len()).sum();
    let silent: usize = scenes
        .iter()
        .map(|s| s.objects.iter().filter(|o| !o.sounding).count())
        .sum();
    if total == 0 {
        0.0
    } else {
        silent as f64 / total as f64
    }
}

pub fn sounding_counts(scenes: &[Scene], k: usize) -> Vec<usize> {
    let mut counts = vec![0; k];
    for s in scenes {
        counts[s.sounding().class_id] += 1;
    }
    counts
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn small(n_train: usize, n_test: usize) -> DatasetConfig {
        DatasetConfig {
            n_train,
            n_test,
            ..DatasetConfig::default()
        }
    }

    #[test]
    fn two_prototypes_are_separated() {
        let cfg = DatasetConfig {
            k_true: 2,
            audio_dim: 8,
            ..DatasetConfig::default()
        };
        let p = make_prototypes(&cfg, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        assert_eq!(p.len(), 2);
        assert!(dot(&p[0].audio, &p[1].audio) <= 0.5);
        assert!(linf(&p[0].color, &p[1].color) >= 0.3);
    }

    #[test]
    fn prototypes_deterministic() {
        let cfg = DatasetConfig::default();
        let a = make_prototypes(&cfg, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        let b = make_prototypes(&cfg, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn too_many_classes_for_audio_dim() {
        let cfg = DatasetConfig {
            k_true: 100,
            audio_dim: 2,
            ..DatasetConfig::default()
        };
        assert!(matches!(
            make_prototypes(&cfg, &mut ChaCha8Rng::seed_from_u64(0)),
            Err(Error::PrototypeRejectionExhausted { .. })
        ));
    }

    #[test]
    fn single_object_when_p_multi_zero() {
        let cfg = DatasetConfig {
            p_multi: 0.0,
            ..small(200, 0)
        };
        let d = generate_dataset(&cfg).unwrap();
        assert!(d.train.iter().all(|s| s.objects.len() == 1 && s.objects[0].sounding));
    }

    #[test]
    fn scene_is_pure_function_of_seed_and_id() {
        let cfg = DatasetConfig::default();
        let p = make_prototypes(&cfg, &mut stream(0, Domain::Prototypes, 0)).unwrap();
        let a = generate_scene(&p, &cfg, 17, 2, &mut stream(0, Domain::Scene, 17));
        let b = generate_scene(&p, &cfg, 17, 2, &mut stream(0, Domain::Scene, 17));
        assert_eq!(a, b);
    }

    #[test]
    fn scene_invariants_hold() {
        let cfg = small(300, 300);
        let d = generate_dataset(&cfg).unwrap();
        for s in d.train.iter().chain(&d.test) {
            assert_eq!(s.objects.iter().filter(|o| o.sounding).count(), 1);
            assert!(s.image.data().iter().all(|v| (0.0..=1.0).contains(v)));
            assert!((dot(&s.audio, &s.audio) - 1.0).abs() < 1e-12);
            for (i, o) in s.objects.iter().enumerate() {
                assert!(o.bbox.is_valid() && o.bbox.within(32.0, 32.0) && o.bbox.area() >= 4.0);
                let frac = color_match_fraction(&s.image, &o.bbox, &d.prototypes[o.class_id].color, cfg.sigma_v);
                assert!(frac >= 0.6, "scene {} object {i}: {frac}", s.scene_id);
                for o2 in &s.objects[i + 1..] {
                    assert!(simple_iou(&o.bbox, &o2.bbox) <= 0.3);
                    assert_ne!(o.class_id, o2.class_id);
                }
            }
        }
    }

    #[test]
    fn audio_tracks_the_sounding_prototype() {
        // Monte-Carlo oracle: cosine with the sounding prototype >= 0.7 in >= 99% of draws.
        let cfg = DatasetConfig::default();
        let p = make_prototypes(&cfg, &mut stream(5, Domain::Prototypes, 0)).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        let n = 10_000;
        let hits = (0..n)
            .filter(|&i| {
                let class = i % p.len();
                let raw: Vec<f64> = p[class]
                    .audio
                    .iter()
                    .map(|a| a + cfg.sigma_a * rng.sample::<f64, _>(StandardNormal))
                    .collect();
                let a = l2_normalize(&raw).unwrap();
                dot(&a, &p[class].audio) >= 0.7
            })
            .count();
        assert!(hits as f64 >= 0.99 * n as f64, "{hits}");
        // and the generator's own scenes agree
        let d = generate_dataset(&small(400, 0)).unwrap();
        let ok = d
            .train
            .iter()
            .filter(|s| dot(&s.audio, &d.prototypes[s.sounding().class_id].audio) >= 0.7)
            .count();
        assert!(ok as f64 >= 0.99 * 400.0);
    }

    #[test]
    fn empty_train_split() {
        let d = generate_dataset(&small(0, 20)).unwrap();
        assert!(d.train.is_empty());
        assert_eq!(d.test.len(), 20);
        assert_eq!(d.test[0].scene_id, 0);
    }

    #[test]
    fn class_frequencies_balanced() {
        let d = generate_dataset(&small(4000, 0)).unwrap();
        for c in sounding_counts(&d.train, 4) {
            assert!((900..=1100).contains(&c), "{c}");
        }
    }

    #[test]
    fn silent_objects_are_common_in_test() {
        let d = generate_dataset(&small(0, 500)).unwrap();
        assert!(silent_fraction(&d.test) >= 0.25, "{}", silent_fraction(&d.test));
    }

    #[test]
    fn validation_rejects_bad_probability() {
        let cfg = DatasetConfig {
            p_multi: 1.5,
            ..DatasetConfig::default()
        };
        assert!(matches!(cfg.validate(), Err(Error::ConfigInvalid(_))));
    }
}
