//! Stage orchestration with hashed, resumable artifacts.
//!
//! Every stage writes a stamp `<out>/<stage>/stage.json` holding a hash of
//! its own config section chained with the hash of its predecessor, so
//! editing an upstream setting invalidates everything downstream.

use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::detector::{self, train_detector, DetEpochRecord, Detection, DetectorArch, DetectorConfig, DetectorModel};
use crate::error::{Error, Result};
use crate::eval::report::{pr_curves, EvalInputs, EvalReport};
use crate::eval::{evaluate, text_table};
use crate::model::{checkpoint, AvModel, ModelConfig};
use crate::parallel;
use crate::pseudolabel::{self, extract_annotations, ExtractConfig};
use crate::ssl::{self, EpochRecord, LabelRecord, SslConfig};
use crate::synthdata::io::{read_dataset, write_dataset};
use crate::synthdata::{generate_dataset, Dataset, DatasetConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalConfig {
    /// Extra IoU thresholds reported as `map_at`.
    pub thresholds: Vec<f64>,
    pub kshot_m: Vec<usize>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            thresholds: vec![0.3, 0.5],
            kshot_m: vec![1, 10],
        }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<()> {
        if self.thresholds.iter().any(|t| !(0.0..=1.0).contains(t)) {
            return Err(Error::ConfigInvalid("eval: thresholds must lie in [0, 1]".into()));
        }
        if self.kshot_m.contains(&0) {
            return Err(Error::ConfigInvalid("eval: kshot_m entries must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PipelineConfig {
    pub seed: u64,
    pub out_dir: PathBuf,
    pub data: DatasetConfig,
    pub ssl: SslConfig,
    pub extract: ExtractConfig,
    pub detector: DetectorConfig,
    pub eval: EvalConfig,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            out_dir: PathBuf::from("runs/default"),
            data: DatasetConfig::default(),
            ssl: SslConfig::default(),
            extract: ExtractConfig::default(),
            detector: DetectorConfig::default(),
            eval: EvalConfig::default(),
        }
    }
}

impl PipelineConfig {
    /// TOML unless the extension is `.json`.
    pub fn load(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::MissingArtifact(path.to_path_buf()));
        }
        let text = fs::read_to_string(path)?;
        let cfg: Self = if path.extension().is_some_and(|e| e == "json") {
            serde_json::from_str(&text).map_err(|e| Error::ConfigInvalid(e.to_string()))?
        } else {
            toml::from_str(&text).map_err(|e| Error::ConfigInvalid(e.to_string()))?
        };
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serialises to TOML")
    }

    pub fn validate(&self) -> Result<()> {
        self.data.validate()?;
        self.ssl.validate()?;
        self.extract.validate()?;
        self.detector.validate()?;
        self.eval.validate()?;
        if self.ssl.sinkhorn.epsilon <= 0.0 {
            return Err(Error::ConfigInvalid("ssl: sinkhorn epsilon must be positive".into()));
        }
        self.model_config().validate()
    }

    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            height: self.data.height,
            width: self.data.width,
            audio_dim: self.data.audio_dim,
            k: self.ssl.k,
            ..ModelConfig::default()
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Stage {
    Synth,
    TrainSsl,
    Extract,
    TrainDet,
    Eval,
}

impl Stage {
    pub const ALL: [Stage; 5] = [Stage::Synth, Stage::TrainSsl, Stage::Extract, Stage::TrainDet, Stage::Eval];

    pub fn name(self) -> &'static str {
        match self {
            Stage::Synth => "synth",
            Stage::TrainSsl => "train-ssl",
            Stage::Extract => "extract",
            Stage::TrainDet => "train-det",
            Stage::Eval => "eval",
        }
    }

    fn dir(self) -> &'static str {
        match self {
            Stage::Synth => "data",
            Stage::TrainSsl => "ssl",
            Stage::Extract => "extract",
            Stage::TrainDet => "detector",
            Stage::Eval => "eval",
        }
    }

    fn predecessor(self) -> Option<Stage> {
        match self {
            Stage::Synth => None,
            Stage::TrainSsl => Some(Stage::Synth),
            Stage::Extract => Some(Stage::TrainSsl),
            Stage::TrainDet => Some(Stage::Extract),
            Stage::Eval => Some(Stage::TrainDet),
        }
    }
}

fn sha_hex(parts: &[&[u8]]) -> String {
    let mut h = Sha256::new();
    for p in parts {
        h.update((p.len() as u64).to_le_bytes());
        h.update(p);
    }
    hex::encode(h.finalize())
}

/// Hash of a stage: its own settings chained with its predecessor's hash.
pub fn stage_hash(cfg: &PipelineConfig, stage: Stage) -> String {
    let section = match stage {
        Stage::Synth => serde_json::to_vec(&cfg.data),
        Stage::TrainSsl => serde_json::to_vec(&(&cfg.ssl, cfg.seed)),
        Stage::Extract => serde_json::to_vec(&(&cfg.extract, cfg.seed)),
        Stage::TrainDet => serde_json::to_vec(&(&cfg.detector, cfg.seed)),
        Stage::Eval => serde_json::to_vec(&cfg.eval),
    }
    .expect("config serialises to JSON");
    let prev = stage.predecessor().map(|p| stage_hash(cfg, p)).unwrap_or_default();
    sha_hex(&[stage.name().as_bytes(), prev.as_bytes(), &section])
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Stamp {
    stage: String,
    hash: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    pub stage: String,
    pub hash: String,
    pub completed: bool,
    pub artifacts: Vec<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricSummary {
    pub map30: f64,
    pub map50: f64,
    pub map_coco: f64,
    pub cluster_accuracy: f64,
    pub auc: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub config_hash: String,
    pub stages: Vec<StageRecord>,
    pub metrics: Option<MetricSummary>,
}

/// What happened to a stage in one invocation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Outcome {
    Ran,
    Skipped,
}

pub fn write_jsonl<T: Serialize>(path: &Path, items: &[T]) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    let mut f = std::io::BufWriter::new(fs::File::create(path)?);
    for it in items {
        serde_json::to_writer(&mut f, it)?;
        f.write_all(b"\n")?;
    }
    f.flush()?;
    Ok(())
}

pub fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    if !path.exists() {
        return Err(Error::MissingArtifact(path.to_path_buf()));
    }
    let mut out = Vec::new();
    for (n, line) in BufReader::new(fs::File::open(path)?).lines().enumerate() {
        let line = line?;
        if !line.trim().is_empty() {
            out.push(serde_json::from_str(&line).map_err(|e| Error::format(path, format!("line {}: {e}", n + 1)))?);
        }
    }
    Ok(out)
}

pub fn save_av_model(path: &Path, model: &AvModel) -> Result<()> {
    checkpoint::save(path, &model.params, &model.config)
}

pub fn load_av_model(path: &Path) -> Result<AvModel> {
    let config: ModelConfig = checkpoint::load_manifest(path)?;
    let mut model = AvModel::new(config, 0)?;
    checkpoint::load_into(path, &mut model.params)?;
    Ok(model)
}

pub fn save_detector(path: &Path, model: &DetectorModel) -> Result<()> {
    checkpoint::save(path, &model.params, &model.arch)
}

pub fn load_detector(path: &Path) -> Result<DetectorModel> {
    let arch: DetectorArch = checkpoint::load_manifest(path)?;
    let mut model = DetectorModel::new(arch, 0)?;
    checkpoint::load_into(path, &mut model.params)?;
    Ok(model)
}

/// Artifact layout of one run directory.
pub struct Paths {
    pub root: PathBuf,
}

impl Paths {
    pub fn stage_dir(&self, s: Stage) -> PathBuf {
        self.root.join(s.dir())
    }
    fn stamp(&self, s: Stage) -> PathBuf {
        self.stage_dir(s).join("stage.json")
    }
    pub fn dataset(&self) -> PathBuf {
        self.stage_dir(Stage::Synth)
    }
    pub fn ssl_model(&self) -> PathBuf {
        self.stage_dir(Stage::TrainSsl).join("model.ckpt")
    }
    pub fn ssl_labels(&self) -> PathBuf {
        self.stage_dir(Stage::TrainSsl).join("labels.jsonl")
    }
    pub fn ssl_log(&self) -> PathBuf {
        self.stage_dir(Stage::TrainSsl).join("log.jsonl")
    }
    pub fn annotations(&self) -> PathBuf {
        self.stage_dir(Stage::Extract).join("annotations.jsonl")
    }
    pub fn test_self_boxes(&self) -> PathBuf {
        self.stage_dir(Stage::Extract).join("test_self_boxes.jsonl")
    }
    pub fn det_model(&self) -> PathBuf {
        self.stage_dir(Stage::TrainDet).join("model.ckpt")
    }
    pub fn det_log(&self) -> PathBuf {
        self.stage_dir(Stage::TrainDet).join("log.jsonl")
    }
    pub fn detections(&self) -> PathBuf {
        self.stage_dir(Stage::Eval).join("detections.jsonl")
    }
    pub fn report(&self) -> PathBuf {
        self.stage_dir(Stage::Eval).join("report.json")
    }
    pub fn report_text(&self) -> PathBuf {
        self.stage_dir(Stage::Eval).join("report.txt")
    }
    pub fn manifest(&self) -> PathBuf {
        self.root.join("manifest.json")
    }

    fn artifacts(&self, s: Stage) -> Vec<PathBuf> {
        match s {
            Stage::Synth => vec![self.dataset()],
            Stage::TrainSsl => vec![self.ssl_model(), self.ssl_labels(), self.ssl_log()],
            Stage::Extract => vec![self.annotations(), self.test_self_boxes()],
            Stage::TrainDet => vec![self.det_model(), self.det_log()],
            Stage::Eval => vec![self.report(), self.report_text(), self.detections()],
        }
    }
}

pub struct Pipeline {
    pub config: PipelineConfig,
    pub paths: Paths,
    pub force: bool,
    /// Progress lines go here; `None` keeps the run silent.
    pub log: Option<Box<dyn FnMut(&str) + Send>>,
}

impl Pipeline {
    pub fn new(config: PipelineConfig, force: bool) -> Result<Self> {
        config.validate()?;
        let paths = Paths {
            root: config.out_dir.clone(),
        };
        Ok(Self {
            config,
            paths,
            force,
            log: None,
        })
    }

    fn say(&mut self, msg: &str) {
        if let Some(f) = self.log.as_mut() {
            f(msg);
        }
    }

    fn read_stamp(&self, s: Stage) -> Result<Option<Stamp>> {
        let p = self.paths.stamp(s);
        if !p.exists() {
            return Ok(None);
        }
        Ok(Some(serde_json::from_slice(&fs::read(p)?)?))
    }

    fn is_current(&self, s: Stage) -> Result<bool> {
        Ok(self
            .read_stamp(s)?
            .is_some_and(|st| st.hash == stage_hash(&self.config, s))
            && self.paths.artifacts(s).iter().all(|p| p.exists()))
    }

    /// The predecessor must exist and match the current config.
    fn require_predecessor(&self, s: Stage) -> Result<()> {
        let Some(p) = s.predecessor() else {
            return Ok(());
        };
        let stamp = self
            .read_stamp(p)?
            .ok_or_else(|| Error::MissingArtifact(self.paths.stamp(p)))?;
        let expected = stage_hash(&self.config, p);
        if stamp.hash != expected {
            return Err(Error::StaleArtifact {
                stage: p.name().into(),
                expected,
                found: stamp.hash,
            });
        }
        if let Some(missing) = self.paths.artifacts(p).into_iter().find(|a| !a.exists()) {
            return Err(Error::MissingArtifact(missing));
        }
        Ok(())
    }

    /// Runs one stage unless an up-to-date result exists.
    pub fn run_stage(&mut self, s: Stage) -> Result<Outcome> {
        self.require_predecessor(s)?;
        if !self.force && self.is_current(s)? {
            self.say(&format!("{}: up to date, skipped", s.name()));
            self.write_manifest()?;
            return Ok(Outcome::Skipped);
        }
        let stamp = self.paths.stamp(s);
        if stamp.exists() {
            fs::remove_file(&stamp)?;
        }
        fs::create_dir_all(self.paths.stage_dir(s))?;
        match s {
            Stage::Synth => self.synth()?,
            Stage::TrainSsl => self.train_ssl()?,
            Stage::Extract => self.extract()?,
            Stage::TrainDet => self.train_det()?,
            Stage::Eval => self.eval()?,
        }
        let st = Stamp {
            stage: s.name().into(),
            hash: stage_hash(&self.config, s),
        };
        fs::write(stamp, serde_json::to_vec_pretty(&st)?)?;
        self.write_manifest()?;
        Ok(Outcome::Ran)
    }

    pub fn run_all(&mut self) -> Result<Vec<(Stage, Outcome)>> {
        Stage::ALL.iter().map(|&s| Ok((s, self.run_stage(s)?))).collect()
    }

    pub fn manifest(&self) -> Result<RunManifest> {
        let mut stages = Vec::new();
        for s in Stage::ALL {
            stages.push(StageRecord {
                stage: s.name().into(),
                hash: stage_hash(&self.config, s),
                completed: self.is_current(s)?,
                artifacts: self.paths.artifacts(s),
            });
        }
        let metrics = if self.is_current(Stage::Eval)? {
            let r: EvalReport = serde_json::from_slice(&fs::read(self.paths.report())?)?;
            Some(MetricSummary {
                map30: r.map30,
                map50: r.map50,
                map_coco: r.map_coco,
                cluster_accuracy: r.matching.accuracy,
                auc: r.auc,
            })
        } else {
            None
        };
        Ok(RunManifest {
            config_hash: sha_hex(&[&serde_json::to_vec(&self.config)?]),
            stages,
            metrics,
        })
    }

    fn write_manifest(&self) -> Result<()> {
        fs::create_dir_all(&self.paths.root)?;
        fs::write(self.paths.manifest(), serde_json::to_vec_pretty(&self.manifest()?)?)?;
        Ok(())
    }

    fn dataset(&self) -> Result<Dataset> {
        read_dataset(&self.paths.dataset())
    }

    fn synth(&mut self) -> Result<()> {
        let d = generate_dataset(&self.config.data)?;
        write_dataset(&self.paths.dataset(), &d)?;
        self.say(&format!("synth: {} train, {} test scenes", d.train.len(), d.test.len()));
        Ok(())
    }

    fn train_ssl(&mut self) -> Result<()> {
        let d = self.dataset()?;
        let mut log = Vec::new();
        let mut lines = Vec::new();
        let out = ssl::train(&d.train, self.config.model_config(), &self.config.ssl, self.config.seed, |r: &EpochRecord| {
            log.push(*r);
            lines.push(format!(
                "train-ssl: epoch {:>3} nc {:.4} clust {:.4} entropy {:.3}",
                r.epoch, r.loss_nc, r.loss_clust, r.label_entropy
            ));
        })?;
        for l in &lines {
            self.say(l);
        }
        save_av_model(&self.paths.ssl_model(), &out.model)?;
        write_jsonl(&self.paths.ssl_labels(), &out.labels)?;
        write_jsonl(&self.paths.ssl_log(), &log)?;
        Ok(())
    }

    fn extract(&mut self) -> Result<()> {
        let d = self.dataset()?;
        let model = load_av_model(&self.paths.ssl_model())?;
        let train = extract_annotations(&d.train, &model, &self.config.extract, self.config.seed)?;
        let test = extract_annotations(&d.test, &model, &self.config.extract, self.config.seed)?;
        pseudolabel::write_jsonl(&self.paths.annotations(), &train)?;
        pseudolabel::write_jsonl(&self.paths.test_self_boxes(), &test)?;
        self.say(&format!("extract: {} train annotations, {} test self-boxes", train.len(), test.len()));
        Ok(())
    }

    fn train_det(&mut self) -> Result<()> {
        let d = self.dataset()?;
        let anns = pseudolabel::read_jsonl(&self.paths.annotations())?;
        let mut log = Vec::new();
        let model = train_detector(&anns, &d.train, self.config.ssl.k, &self.config.detector, self.config.seed, |r: &DetEpochRecord| log.push(*r))?;
        for r in &log {
            let msg = format!("train-det: epoch {:>3} rpn {:.4} det {:.4}", r.epoch, r.loss_rpn, r.loss_det);
            self.say(&msg);
        }
        save_detector(&self.paths.det_model(), &model)?;
        write_jsonl(&self.paths.det_log(), &log)?;
        Ok(())
    }

    fn eval(&mut self) -> Result<()> {
        let d = self.dataset()?;
        let det = load_detector(&self.paths.det_model())?;
        let labels: Vec<LabelRecord> = read_jsonl(&self.paths.ssl_labels())?;
        let self_boxes = pseudolabel::read_jsonl(&self.paths.test_self_boxes())?;
        let cfg = &self.config.detector;
        let per_scene = parallel::map_slice(&d.test, |s| det.infer(&s.image, s.scene_id, cfg.score_thresh, cfg.nms));
        let mut detections: Vec<Detection> = Vec::new();
        for r in per_scene {
            detections.extend(r?);
        }
        let report = evaluate(&EvalInputs {
            train: &d.train,
            train_labels: &labels,
            test: &d.test,
            detections: &detections,
            self_boxes: &self_boxes,
            k_pred: self.config.ssl.k,
            k_true: self.config.data.k_true,
            score_thresh: cfg.score_thresh,
            agnostic_nms: cfg.nms,
            kshot_m: &self.config.eval.kshot_m,
            iou_thresholds: &self.config.eval.thresholds,
        })?;
        detector::write_detections(&self.paths.detections(), &detections)?;
        let dir = self.paths.stage_dir(Stage::Eval);
        fs::write(self.paths.report(), serde_json::to_vec_pretty(&report)?)?;
        let table = text_table(&report);
        fs::write(self.paths.report_text(), &table)?;
        let matching = crate::eval::Matching {
            map: report.matching.hungarian.clone(),
        };
        for (c, tsv) in pr_curves(&detections, &matching, &d.test) {
            fs::write(dir.join(format!("pr_class{c}.tsv")), tsv)?;
        }
        for line in table.lines() {
            self.say(line);
        }
        Ok(())
    }
}
