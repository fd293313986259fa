//! The staged pipeline over one config: prepare, train, explain, profile,
//! score, evaluate, repair, report.
//!
//! Each stage reads its inputs from the output directory, refuses artifacts
//! stamped with a different config digest, and writes plain CSV/JSON. Stages
//! are deterministic functions of the config and upstream artifacts.

mod artifacts;
mod config;
mod report;

use std::collections::{BTreeMap, HashMap};
use std::path::{Path, PathBuf};

use log::{info, warn};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::attribution::{
    kernel_shap, linear_shap, mean_vector, message_seed, sample_background, split_supports, Explained, KernelOptions,
    ShapVector,
};
use crate::classifiers::{
    train_logreg, train_nb, train_svm, LogRegConfig, Model, ModelKind, NbConfig, SvmConfig,
};
use crate::corpus::{default_stoplist, load_dataset, split, subsample_majority, Label, Message, Preprocessor, Split};
use crate::error::{Error, Result};
use crate::features::{Family, FeatureSpace};
use crate::profiling::{Polarity, TopicModel};
use crate::scoring::{
    calibrate_tau, evaluate_detector, js_divergence, reject_set, repair, DetectorReport, RejectedMessage, RepairReport,
};
use crate::sparse::SparseVec;
use crate::uncertainty::{
    evidence_scale, original, output_uq_score, topic_neighbors, OutputContext, OutputMethod, Representation,
    RepresentationContext,
};

pub use artifacts::{fmt_f64, fmt_opt, parse_opt, ArtifactDir};
pub use config::{
    AttributionConfig, ClassifierConfig, DatasetConfig, EvaluationConfig, LogRegSettings, NbSettings, PipelineConfig,
    PreprocessConfig, SvmSettings, UncertaintyConfig,
};
pub use report::render_report;

pub const STAGES: [&str; 8] = ["prepare", "train", "explain", "profile", "score", "evaluate", "repair", "report"];

pub const DATASET: &str = "dataset.jsonl";
pub const SPACE: &str = "space.json";
pub const VECTORS: &str = "vectors.csv";
pub const MODEL: &str = "model.json";
pub const PREDICTIONS: &str = "predictions.csv";
pub const SHAP_META: &str = "shap_meta.json";
pub const PROFILES: &str = "profiles.json";
pub const REPRESENTATIONS: &str = "representations.csv";
pub const SCORES: &str = "scores.csv";
pub const DETECTOR_REPORT: &str = "detector_report.json";
pub const REPAIR_REPORT: &str = "repair_report.json";
pub const REPORT: &str = "report.md";

pub fn shap_file(p: Polarity) -> String {
    format!("shap_{}.csv", p.name())
}

pub fn topics_file(p: Polarity) -> String {
    format!("topics_{}.json", p.name())
}

// Tags mixed into the global seed, one per consumer.
const SEED_SPLIT: u64 = 1;
const SEED_SUBSAMPLE: u64 = 2;
const SEED_CLASSIFIER: u64 = 3;
const SEED_BACKGROUND: u64 = 4;
const SEED_KERNEL: u64 = 5;
const SEED_TOPICS: [u64; 2] = [6, 7];

fn polarity_index(p: Polarity) -> usize {
    match p {
        Polarity::Pos => 0,
        Polarity::Neg => 1,
    }
}

fn split_name(s: Split) -> &'static str {
    match s {
        Split::Train => "train",
        Split::Test => "test",
    }
}

fn parse_split(s: &str) -> Result<Split> {
    match s {
        "train" => Ok(Split::Train),
        "test" => Ok(Split::Test),
        other => Err(Error::invalid(format!("unknown split {other:?}"))),
    }
}

fn parse_label(s: &str) -> Result<Label> {
    match s {
        "0" => Ok(Label::Negative),
        "1" => Ok(Label::Positive),
        other => Err(Error::invalid(format!("unknown label {other:?}"))),
    }
}

fn label_str(l: Label) -> &'static str {
    if l.is_positive() {
        "1"
    } else {
        "0"
    }
}

/// Prediction outcome against the gold label.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Outcome {
    TP,
    FP,
    TN,
    FN,
}

impl Outcome {
    pub fn of(label: Label, predicted: Label) -> Outcome {
        match (label.is_positive(), predicted.is_positive()) {
            (true, true) => Outcome::TP,
            (false, true) => Outcome::FP,
            (false, false) => Outcome::TN,
            (true, false) => Outcome::FN,
        }
    }

    /// The reliable group whose profile scores messages with this outcome.
    pub fn reference_group(self) -> Outcome {
        match self {
            Outcome::TP | Outcome::FP => Outcome::TP,
            Outcome::TN | Outcome::FN => Outcome::TN,
        }
    }
}

fn reliable_group(p: Polarity) -> Outcome {
    match p {
        Polarity::Pos => Outcome::TP,
        Polarity::Neg => Outcome::TN,
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PredictionRow {
    pub id: u64,
    pub split: Split,
    pub label: Label,
    pub predicted: Label,
    pub p_pos: f64,
    pub margin: f64,
}

impl PredictionRow {
    pub fn outcome(&self) -> Outcome {
        Outcome::of(self.label, self.predicted)
    }

    pub fn polarity(&self) -> Polarity {
        Polarity::of_prediction(self.predicted.is_positive())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainedModel {
    pub model: Model,
    pub seed: u64,
    pub settings: ClassifierConfig,
    /// Structural columns standardized (or min-max scaled) during training.
    pub transformed_columns: Vec<usize>,
    pub train_accuracy: f64,
    pub test_accuracy: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Explainer {
    /// Exact, margin space, training mean as background.
    Linear,
    /// Sampled or enumerated coalitions, probability space.
    Kernel,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShapEntry {
    pub id: u64,
    pub base_value: f64,
    pub output: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShapMeta {
    pub explainer: Explainer,
    pub seed: u64,
    /// Empty for the linear explainer, whose background is the training mean.
    pub background_ids: Vec<u64>,
    pub background_digest: String,
    pub kernel: Option<KernelOptions>,
    pub max_local_accuracy_gap: f64,
    pub messages: Vec<ShapEntry>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupSize {
    pub group: Outcome,
    pub n: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolarityContext {
    pub polarity: Polarity,
    pub reliable_group: Outcome,
    pub context: RepresentationContext,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProfileEntry {
    pub group: Outcome,
    pub polarity: Polarity,
    pub representation: Representation,
    /// `None` when the group is empty or carries no mass.
    pub vector: Option<Vec<f64>>,
    pub degenerate: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProfileSet {
    /// Reliable groups of the training split.
    pub groups: Vec<GroupSize>,
    pub contexts: Vec<PolarityContext>,
    pub profiles: Vec<ProfileEntry>,
}

impl ProfileSet {
    pub fn context(&self, p: Polarity) -> Result<&RepresentationContext> {
        self.contexts
            .iter()
            .find(|c| c.polarity == p)
            .map(|c| &c.context)
            .ok_or_else(|| Error::invalid(format!("profiles have no context for polarity {}", p.name())))
    }

    pub fn profile(&self, group: Outcome, p: Polarity, rep: Representation) -> Option<&[f64]> {
        self.profiles
            .iter()
            .find(|e| e.group == group && e.polarity == p && e.representation == rep)
            .and_then(|e| e.vector.as_deref())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScoreRow {
    pub id: u64,
    pub split: Split,
    pub label: Label,
    pub predicted: Label,
    pub p_pos: f64,
    /// In [`OutputMethod::ALL`] order.
    pub uq: Vec<f64>,
    /// In [`Representation::ALL`] order; `None` is written as `NA`.
    pub xmap: Vec<Option<f64>>,
}

impl ScoreRow {
    pub fn outcome(&self) -> Outcome {
        Outcome::of(self.label, self.predicted)
    }

    pub fn misclassified(&self) -> bool {
        self.label != self.predicted
    }

    pub fn uq_score(&self, m: OutputMethod) -> f64 {
        self.uq[OutputMethod::ALL.iter().position(|x| *x == m).expect("method listed")]
    }

    pub fn xmap_score(&self, r: Representation) -> Option<f64> {
        self.xmap[Representation::ALL.iter().position(|x| *x == r).expect("representation listed")]
    }
}

pub fn uq_column(m: OutputMethod) -> String {
    format!("uq_{}", m.name())
}

pub fn xmap_column(r: Representation) -> String {
    format!("xmap_{}", r.name())
}

fn score_header() -> Vec<String> {
    let mut h: Vec<String> = ["id", "split", "label", "predicted", "correct", "p_pos"]
        .iter()
        .map(|s| s.to_string())
        .collect();
    h.extend(OutputMethod::ALL.iter().map(|m| uq_column(*m)));
    h.extend(Representation::ALL.iter().map(|r| xmap_column(*r)));
    h
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub n: usize,
    pub mean: f64,
    /// Sample standard deviation; 0 for a single value.
    pub std: f64,
}

impl Summary {
    pub fn of(values: &[f64]) -> Option<Summary> {
        if values.is_empty() {
            return None;
        }
        let n = values.len();
        let mean = values.iter().sum::<f64>() / n as f64;
        let std = if n > 1 {
            (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
        } else {
            0.0
        };
        Some(Summary { n, mean, std })
    }
}

/// Divergence of each outcome group from its reference profile.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupDivergence {
    pub representation: Representation,
    pub tp_to_tp: Option<Summary>,
    pub fp_to_tp: Option<Summary>,
    pub tn_to_tn: Option<Summary>,
    pub fn_to_tn: Option<Summary>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluationReport {
    pub split: Split,
    pub trr_fix: f64,
    pub detectors: Vec<DetectorReport>,
    pub group_divergence: Vec<GroupDivergence>,
}

impl EvaluationReport {
    pub fn detector(&self, name: &str, subset: &str) -> Option<&DetectorReport> {
        self.detectors.iter().find(|d| d.detector == name && d.subset == subset)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RepairThreshold {
    pub representation: Representation,
    pub tau_pos: Option<f64>,
    pub tau_neg: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BaseRejection {
    pub detector: String,
    /// `None` when nothing is misclassified and nothing is rejected.
    pub threshold: Option<f64>,
    pub n_true_rejections: usize,
    pub n_false_rejections: usize,
}

/// How well a representation separates true from false rejections within
/// one base detector's reject set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RejectedDetection {
    pub base_detector: String,
    pub report: DetectorReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RepairSummary {
    pub split: Split,
    pub trr_fix: f64,
    pub thresholds: Vec<RepairThreshold>,
    pub base_rejections: Vec<BaseRejection>,
    pub repairs: Vec<RepairReport>,
    pub rejected_detection: Vec<RejectedDetection>,
}

pub const SUBSETS: [(&str, bool); 2] = [("positive", true), ("negative", false)];

fn in_stage<T>(stage: &'static str, r: Result<T>) -> Result<T> {
    r.map_err(|e| e.in_stage(stage))
}

fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// One configured run bound to its output directory.
#[derive(Debug, Clone)]
pub struct Pipeline {
    cfg: PipelineConfig,
    out: ArtifactDir,
}

impl Pipeline {
    pub fn new(cfg: PipelineConfig) -> Result<Self> {
        cfg.validate()?;
        let out = ArtifactDir::new(cfg.out_dir.clone(), cfg.digest());
        Ok(Pipeline { cfg, out })
    }

    pub fn config(&self) -> &PipelineConfig {
        &self.cfg
    }

    pub fn artifacts(&self) -> &ArtifactDir {
        &self.out
    }

    pub fn out_dir(&self) -> &Path {
        self.out.dir()
    }

    pub fn run_stage(&self, stage: &str) -> Result<()> {
        match stage {
            "prepare" => self.prepare(),
            "train" => self.train(),
            "explain" => self.explain(),
            "profile" => self.profile(),
            "score" => self.score(),
            "evaluate" => self.evaluate(),
            "repair" => self.repair(),
            "report" => self.report().map(|_| ()),
            other => Err(Error::invalid(format!("unknown stage {other:?}"))),
        }
    }

    pub fn run_all(&self) -> Result<()> {
        for s in STAGES {
            info!("stage {s}");
            self.run_stage(s)?;
        }
        Ok(())
    }

    fn seed(&self, tag: u64) -> u64 {
        message_seed(self.cfg.seed, tag)
    }

    // ---- loaders shared by the stages -------------------------------------

    pub fn load_dataset(&self) -> Result<Vec<Message>> {
        self.out.read_jsonl(DATASET, "prepare")
    }

    pub fn load_space(&self) -> Result<FeatureSpace> {
        let mut space: FeatureSpace = self.out.read_json(SPACE, "prepare")?;
        space.check()?;
        space.rebuild_index();
        Ok(space)
    }

    fn load_vectors(&self, ids: &[u64], dim: usize) -> Result<BTreeMap<u64, SparseVec>> {
        self.out.read_triplets(VECTORS, "prepare", ids, dim)
    }

    pub fn load_model(&self) -> Result<TrainedModel> {
        let m: TrainedModel = self.out.read_json(MODEL, "train")?;
        m.model.validate()?;
        Ok(m)
    }

    pub fn load_predictions(&self) -> Result<Vec<PredictionRow>> {
        let (p, mut r) = self.out.read_csv(
            PREDICTIONS,
            "train",
            &["id", "split", "label", "predicted", "p_pos", "margin"],
        )?;
        let mut out = Vec::new();
        for rec in r.records() {
            let rec = rec?;
            out.push(PredictionRow {
                id: artifacts::parse_field(&rec, 0, &p)?,
                split: parse_split(&rec[1])?,
                label: parse_label(&rec[2])?,
                predicted: parse_label(&rec[3])?,
                p_pos: artifacts::parse_field(&rec, 4, &p)?,
                margin: artifacts::parse_field(&rec, 5, &p)?,
            });
        }
        Ok(out)
    }

    /// Polarity supports of every explained message, indexed by polarity.
    fn load_supports(&self, ids: &[u64], dim: usize) -> Result<[BTreeMap<u64, SparseVec>; 2]> {
        Ok([
            self.out.read_triplets(&shap_file(Polarity::Pos), "explain", ids, dim)?,
            self.out.read_triplets(&shap_file(Polarity::Neg), "explain", ids, dim)?,
        ])
    }

    pub fn load_topics(&self, p: Polarity) -> Result<TopicModel> {
        let t: TopicModel = self.out.read_json(&topics_file(p), "profile")?;
        t.check()?;
        if t.polarity != p {
            return Err(Error::invalid(format!("{} holds the wrong polarity", topics_file(p))));
        }
        Ok(t)
    }

    pub fn load_profiles(&self) -> Result<ProfileSet> {
        self.out.read_json(PROFILES, "profile")
    }

    pub fn load_scores(&self) -> Result<Vec<ScoreRow>> {
        let header = score_header();
        let hdr: Vec<&str> = header.iter().map(String::as_str).collect();
        let (p, mut r) = self.out.read_csv(SCORES, "score", &hdr)?;
        let nu = OutputMethod::ALL.len();
        let mut out = Vec::new();
        for rec in r.records() {
            let rec = rec?;
            let mut uq = Vec::with_capacity(nu);
            for i in 0..nu {
                uq.push(artifacts::parse_field(&rec, 6 + i, &p)?);
            }
            let mut xmap = Vec::with_capacity(Representation::ALL.len());
            for i in 0..Representation::ALL.len() {
                xmap.push(parse_opt(&rec[6 + nu + i])?);
            }
            out.push(ScoreRow {
                id: artifacts::parse_field(&rec, 0, &p)?,
                split: parse_split(&rec[1])?,
                label: parse_label(&rec[2])?,
                predicted: parse_label(&rec[3])?,
                p_pos: artifacts::parse_field(&rec, 5, &p)?,
                uq,
                xmap,
            });
        }
        Ok(out)
    }

    pub fn load_evaluation(&self) -> Result<EvaluationReport> {
        self.out.read_json(DETECTOR_REPORT, "evaluate")
    }

    pub fn load_repair(&self) -> Result<RepairSummary> {
        self.out.read_json(REPAIR_REPORT, "repair")
    }

    // ---- stages -----------------------------------------------------------

    /// Loads and splits the corpus, fits the feature space on the training
    /// split and vectorizes every assigned message.
    pub fn prepare(&self) -> Result<()> {
        in_stage("prepare", self.prepare_inner())
    }

    fn prepare_inner(&self) -> Result<()> {
        let cfg = &self.cfg;
        let mut messages = load_dataset(&cfg.dataset.path, &cfg.dataset.format)?;
        let (train, test) = split(&messages, cfg.split_ratio, self.seed(SEED_SPLIT))?;
        let train = match cfg.preprocess.max_class_ratio {
            Some(r) => subsample_majority(&train, r, self.seed(SEED_SUBSAMPLE))?,
            None => train,
        };
        let assigned: HashMap<u64, Split> = train
            .iter()
            .map(|m| (m.id, Split::Train))
            .chain(test.iter().map(|m| (m.id, Split::Test)))
            .collect();
        for m in &mut messages {
            m.split = assigned.get(&m.id).copied();
        }
        messages.sort_by_key(|m| m.id);

        let pre = Preprocessor::fit(train.iter().map(|m| m.text.as_str()), default_stoplist(), cfg.preprocess.min_df);
        let space = FeatureSpace::fit(&train, pre, cfg.features);
        info!(
            "{} train / {} test messages, {} columns",
            train.len(),
            test.len(),
            space.dim()
        );
        let vectors: BTreeMap<u64, SparseVec> = messages
            .iter()
            .filter(|m| m.split.is_some())
            .map(|m| (m.id, space.vectorize(m).values))
            .collect();

        self.out.write_jsonl(DATASET, &messages)?;
        self.out.write_json(SPACE, &space)?;
        self.out.write_triplets(VECTORS, &vectors)
    }

    /// Fits the configured classifier on the training split and predicts
    /// every assigned message.
    pub fn train(&self) -> Result<()> {
        in_stage("train", self.train_inner())
    }

    fn train_inner(&self) -> Result<()> {
        let messages = self.load_dataset()?;
        let space = self.load_space()?;
        let dim = space.dim();
        let assigned: Vec<&Message> = messages.iter().filter(|m| m.split.is_some()).collect();
        let ids: Vec<u64> = assigned.iter().map(|m| m.id).collect();
        let vectors = self.load_vectors(&ids, dim)?;

        let (x, y): (Vec<SparseVec>, Vec<Label>) = assigned
            .iter()
            .filter(|m| m.split == Some(Split::Train))
            .map(|m| (vectors[&m.id].clone(), m.label))
            .unzip();
        let structural: Vec<usize> = space.columns_of(Family::Structural).collect();
        let settings = &self.cfg.classifier;
        let seed = self.seed(SEED_CLASSIFIER);
        let model = match settings.kind {
            ModelKind::Logreg => train_logreg(
                &x,
                &y,
                dim,
                &LogRegConfig {
                    l2_strength: settings.logreg.l2_strength,
                    epochs: settings.logreg.epochs,
                    grad_tol: settings.logreg.grad_tol,
                    standardize: structural.clone(),
                },
                seed,
            )?,
            ModelKind::Svm => train_svm(
                &x,
                &y,
                dim,
                &SvmConfig {
                    c: settings.svm.c,
                    epochs: settings.svm.epochs,
                    calibration_folds: settings.svm.calibration_folds,
                    standardize: structural.clone(),
                },
                seed,
            )?,
            ModelKind::Nb => train_nb(
                &x,
                &y,
                dim,
                &NbConfig {
                    alpha: settings.nb.alpha,
                    rescale: structural.clone(),
                },
            )?,
        };
        model.validate()?;

        let mut rows = Vec::with_capacity(assigned.len());
        let mut hits: [(usize, usize); 2] = [(0, 0); 2];
        for m in &assigned {
            let v = &vectors[&m.id];
            let margin = model.margin(v);
            let p_pos = model.proba_from_margin(margin);
            let predicted = Label::from_positive(p_pos >= crate::classifiers::DECISION_THRESHOLD);
            let split = m.split.expect("assigned");
            let slot = &mut hits[(split == Split::Test) as usize];
            slot.0 += (predicted == m.label) as usize;
            slot.1 += 1;
            rows.push(PredictionRow {
                id: m.id,
                split,
                label: m.label,
                predicted,
                p_pos,
                margin,
            });
        }
        let acc = |(h, n): (usize, usize)| if n > 0 { Some(h as f64 / n as f64) } else { None };
        let trained = TrainedModel {
            model,
            seed,
            settings: settings.clone(),
            transformed_columns: structural,
            train_accuracy: acc(hits[0]).unwrap_or(0.0),
            test_accuracy: acc(hits[1]),
        };
        info!(
            "train accuracy {:.4}, test accuracy {:?}",
            trained.train_accuracy, trained.test_accuracy
        );
        self.out.write_json(MODEL, &trained)?;
        self.out.write_csv(
            PREDICTIONS,
            &["id", "split", "label", "predicted", "p_pos", "margin"],
            rows.iter().map(|r| {
                vec![
                    r.id.to_string(),
                    split_name(r.split).to_string(),
                    label_str(r.label).to_string(),
                    label_str(r.predicted).to_string(),
                    fmt_f64(r.p_pos),
                    fmt_f64(r.margin),
                ]
            }),
        )
    }

    /// SHAP vectors of every assigned message, split into polarity supports.
    pub fn explain(&self) -> Result<()> {
        in_stage("explain", self.explain_inner())
    }

    fn explain_inner(&self) -> Result<()> {
        let messages = self.load_dataset()?;
        let space = self.load_space()?;
        let trained = self.load_model()?;
        let dim = space.dim();
        if trained.model.dim() != dim {
            return Err(Error::DimensionMismatch {
                expected: dim,
                found: trained.model.dim(),
            });
        }
        let assigned: Vec<&Message> = messages.iter().filter(|m| m.split.is_some()).collect();
        let ids: Vec<u64> = assigned.iter().map(|m| m.id).collect();
        let vectors = self.load_vectors(&ids, dim)?;
        let train: Vec<&Message> = assigned.iter().copied().filter(|m| m.split == Some(Split::Train)).collect();

        let att = &self.cfg.attribution;
        let linear = match trained.model.kind() {
            ModelKind::Logreg => true,
            ModelKind::Nb => att.nb_linear,
            ModelKind::Svm => false,
        };
        let seed = self.seed(SEED_KERNEL);
        let (explainer, background_ids, background_digest, kernel, shaps): (_, Vec<u64>, String, _, Vec<ShapVector>) =
            if linear {
                let rows: Vec<SparseVec> = train.iter().map(|m| vectors[&m.id].clone()).collect();
                let mu = mean_vector(&rows, dim);
                let text: String = mu.iter().map(|v| fmt_f64(*v) + ",").collect();
                let (w, b) = trained.model.linear_form();
                let shaps = assigned
                    .iter()
                    .map(|m| {
                        let mut s = linear_shap(w, b, &vectors[&m.id], &mu)?;
                        s.id = m.id;
                        Ok(s)
                    })
                    .collect::<Result<Vec<_>>>()?;
                (Explainer::Linear, Vec::new(), sha256_hex(text.as_bytes()), None, shaps)
            } else {
                let labels: Vec<Label> = train.iter().map(|m| m.label).collect();
                let picked = sample_background(&labels, att.background_size, self.seed(SEED_BACKGROUND));
                let bg_ids: Vec<u64> = picked.iter().map(|&i| train[i].id).collect();
                let background: Vec<SparseVec> = bg_ids.iter().map(|id| vectors[id].clone()).collect();
                let mut text = String::new();
                for (id, row) in bg_ids.iter().zip(&background) {
                    text.push_str(&id.to_string());
                    for (c, v) in row.iter() {
                        text.push_str(&format!(";{c}={}", fmt_f64(v)));
                    }
                    text.push('\n');
                }
                let opts = KernelOptions {
                    n_coalitions: att.n_coalitions,
                    full_enumeration_max: att.full_enumeration_max,
                };
                let explained = Explained::probability(&trained.model);
                let shaps = assigned
                    .par_iter()
                    .map(|m| {
                        let mut s = kernel_shap(&explained, &vectors[&m.id], &background, &opts, message_seed(seed, m.id))?;
                        s.id = m.id;
                        Ok(s)
                    })
                    .collect::<Result<Vec<_>>>()?;
                (Explainer::Kernel, bg_ids, sha256_hex(text.as_bytes()), Some(opts), shaps)
            };

        let mut plus = BTreeMap::new();
        let mut minus = BTreeMap::new();
        let mut entries = Vec::with_capacity(shaps.len());
        let mut max_gap: f64 = 0.0;
        for s in &shaps {
            max_gap = max_gap.max(s.local_accuracy_gap());
            let sup = split_supports(&s.phi);
            plus.insert(s.id, sup.plus);
            minus.insert(s.id, sup.minus);
            entries.push(ShapEntry {
                id: s.id,
                base_value: s.base_value,
                output: s.output,
            });
        }
        if max_gap > 1e-6 {
            warn!("largest local accuracy gap is {max_gap:e}");
        }
        drop(shaps);
        self.out.write_triplets(&shap_file(Polarity::Pos), &plus)?;
        self.out.write_triplets(&shap_file(Polarity::Neg), &minus)?;
        self.out.write_json(
            SHAP_META,
            &ShapMeta {
                explainer,
                seed,
                background_ids,
                background_digest,
                kernel,
                max_local_accuracy_gap: max_gap,
                messages: entries,
            },
        )
    }

    /// Topic models per polarity on the training split's reliable messages,
    /// then group profiles under every representation.
    pub fn profile(&self) -> Result<()> {
        in_stage("profile", self.profile_inner())
    }

    fn profile_inner(&self) -> Result<()> {
        let preds = self.load_predictions()?;
        let space = self.load_space()?;
        let ids: Vec<u64> = preds.iter().map(|p| p.id).collect();
        let supports = self.load_supports(&ids, space.dim())?;

        let reliable: Vec<&PredictionRow> = preds
            .iter()
            .filter(|p| p.split == Split::Train && p.label == p.predicted)
            .collect();
        let members = |g: Outcome| -> Vec<u64> { reliable.iter().filter(|p| p.outcome() == g).map(|p| p.id).collect() };
        let groups = [Outcome::TP, Outcome::TN];
        let group_ids: Vec<Vec<u64>> = groups.iter().map(|g| members(*g)).collect();

        let unc = &self.cfg.uncertainty;
        let mut contexts = Vec::new();
        let mut profiles = Vec::new();
        for pol in Polarity::BOTH {
            let pi = polarity_index(pol);
            let fit_rows: Vec<SparseVec> = reliable.iter().map(|p| supports[pi][&p.id].clone()).collect();
            let model = TopicModel::fit(
                pol,
                &fit_rows,
                &space.family,
                &self.cfg.profiling,
                self.seed(SEED_TOPICS[pi]),
            )?;
            let tc_of = |ids: &[u64]| -> Vec<Vec<f64>> {
                ids.iter().map(|id| model.contributions(&supports[pi][id])).collect()
            };

            let own = reliable_group(pol);
            let own_tc = tc_of(&group_ids[groups.iter().position(|g| *g == own).expect("listed")]);
            let totals: Vec<f64> = own_tc.iter().map(|t| t.iter().sum()).collect();
            let reference: Vec<Vec<f64>> = own_tc
                .iter()
                .map(|t| original(t))
                .filter(|r| !r.degenerate)
                .map(|r| r.values)
                .collect();
            let ctx = RepresentationContext {
                scale: evidence_scale(&totals),
                neighbors: topic_neighbors(&model.h, unc.aleatory_k)?,
                temperature: unc.temperature,
                k_nn: unc.k_nn,
                reference,
            };

            for (g, gids) in groups.iter().zip(&group_ids) {
                let tcs = tc_of(gids);
                let mean = mean_contribution(&tcs);
                for rep in Representation::ALL {
                    let v = mean.as_ref().and_then(|m| ctx.represent(m, rep));
                    profiles.push(ProfileEntry {
                        group: *g,
                        polarity: pol,
                        representation: rep,
                        degenerate: v.as_ref().is_some_and(|v| v.degenerate),
                        vector: v.map(|v| v.values),
                    });
                }
            }
            contexts.push(PolarityContext {
                polarity: pol,
                reliable_group: own,
                context: ctx,
            });
            self.out.write_json(&topics_file(pol), &model)?;
        }
        let set = ProfileSet {
            groups: groups
                .iter()
                .zip(&group_ids)
                .map(|(g, ids)| GroupSize { group: *g, n: ids.len() })
                .collect(),
            contexts,
            profiles,
        };
        self.out.write_json(PROFILES, &set)
    }

    /// Per-message representations and divergence scores, plus the
    /// output-level uncertainty scores.
    pub fn score(&self) -> Result<()> {
        in_stage("score", self.score_inner())
    }

    fn score_inner(&self) -> Result<()> {
        let preds = self.load_predictions()?;
        let space = self.load_space()?;
        let profiles = self.load_profiles()?;
        let models = [self.load_topics(Polarity::Pos)?, self.load_topics(Polarity::Neg)?];
        let ids: Vec<u64> = preds.iter().map(|p| p.id).collect();
        let supports = self.load_supports(&ids, space.dim())?;
        let out_ctx = OutputContext {
            temperature: self.cfg.uncertainty.temperature,
            prior_strength: self.cfg.uncertainty.prior_strength,
        };

        let mut rep_rows: Vec<Vec<String>> = Vec::new();
        let mut score_rows: Vec<Vec<String>> = Vec::with_capacity(preds.len());
        for p in &preds {
            let pol = p.polarity();
            let pi = polarity_index(pol);
            let ctx = profiles.context(pol)?;
            let tc = models[pi].contributions(&supports[pi][&p.id]);
            let mut row = vec![
                p.id.to_string(),
                split_name(p.split).to_string(),
                label_str(p.label).to_string(),
                label_str(p.predicted).to_string(),
                ((p.label == p.predicted) as u8).to_string(),
                fmt_f64(p.p_pos),
            ];
            row.extend(
                OutputMethod::ALL
                    .iter()
                    .map(|m| fmt_f64(output_uq_score(p.p_pos, *m, &out_ctx))),
            );
            for rep in Representation::ALL {
                let v = ctx.represent(&tc, rep);
                let reference = profiles.profile(reliable_group(pol), pol, rep);
                let score = match (&v, reference) {
                    (Some(v), Some(q)) => Some(js_divergence(&v.values, q)?),
                    _ => None,
                };
                if let Some(v) = &v {
                    for (t, x) in v.values.iter().enumerate() {
                        rep_rows.push(vec![
                            p.id.to_string(),
                            pol.name().to_string(),
                            rep.name().to_string(),
                            t.to_string(),
                            fmt_f64(*x),
                            (v.degenerate as u8).to_string(),
                        ]);
                    }
                }
                row.push(fmt_opt(score));
            }
            score_rows.push(row);
        }
        self.out.write_csv(
            REPRESENTATIONS,
            &["id", "polarity", "representation", "topic", "value", "degenerate"],
            rep_rows,
        )?;
        let header = score_header();
        let hdr: Vec<&str> = header.iter().map(String::as_str).collect();
        self.out.write_csv(SCORES, &hdr, score_rows)
    }

    /// Detector quality on the test split, per prediction subset, and the
    /// divergence of each outcome group from its reference profile.
    pub fn evaluate(&self) -> Result<()> {
        in_stage("evaluate", self.evaluate_inner())
    }

    fn evaluate_inner(&self) -> Result<()> {
        let rows = self.load_scores()?;
        let test: Vec<&ScoreRow> = rows.iter().filter(|r| r.split == Split::Test).collect();
        let trr = self.cfg.evaluation.trr_fix;
        let mut detectors = Vec::new();
        for (subset, positive) in SUBSETS {
            let sub: Vec<&ScoreRow> = test
                .iter()
                .copied()
                .filter(|r| r.predicted.is_positive() == positive)
                .collect();
            let mis: Vec<bool> = sub.iter().map(|r| r.misclassified()).collect();
            for m in OutputMethod::ALL {
                let s: Vec<Option<f64>> = sub.iter().map(|r| Some(r.uq_score(m))).collect();
                detectors.push(evaluate_detector(&uq_column(m), subset, &s, &mis, trr));
            }
            for rep in Representation::ALL {
                let s: Vec<Option<f64>> = sub.iter().map(|r| r.xmap_score(rep)).collect();
                detectors.push(evaluate_detector(&xmap_column(rep), subset, &s, &mis, trr));
            }
        }
        let group_divergence = Representation::ALL
            .iter()
            .map(|&rep| {
                let of = |o: Outcome| {
                    let v: Vec<f64> = test
                        .iter()
                        .filter(|r| r.outcome() == o)
                        .filter_map(|r| r.xmap_score(rep))
                        .collect();
                    Summary::of(&v)
                };
                GroupDivergence {
                    representation: rep,
                    tp_to_tp: of(Outcome::TP),
                    fp_to_tp: of(Outcome::FP),
                    tn_to_tn: of(Outcome::TN),
                    fn_to_tn: of(Outcome::FN),
                }
            })
            .collect();
        self.out.write_json(
            DETECTOR_REPORT,
            &EvaluationReport {
                split: Split::Test,
                trr_fix: trr,
                detectors,
                group_divergence,
            },
        )
    }

    /// Rejects test messages with each output-level detector at the fixed
    /// TRR, then re-accepts those whose divergence is within a threshold
    /// calibrated on the training split.
    pub fn repair(&self) -> Result<()> {
        in_stage("repair", self.repair_inner())
    }

    fn repair_inner(&self) -> Result<()> {
        let rows = self.load_scores()?;
        let ev = &self.cfg.evaluation;
        let train: Vec<&ScoreRow> = rows.iter().filter(|r| r.split == Split::Train).collect();
        let test: Vec<&ScoreRow> = rows.iter().filter(|r| r.split == Split::Test).collect();

        let thresholds: Vec<RepairThreshold> = Representation::ALL
            .iter()
            .map(|&rep| {
                let tau = |positive: bool| {
                    let (s, m): (Vec<f64>, Vec<bool>) = train
                        .iter()
                        .filter(|r| r.predicted.is_positive() == positive)
                        .filter_map(|r| r.xmap_score(rep).map(|s| (s, r.misclassified())))
                        .unzip();
                    calibrate_tau(&s, &m, ev.trr_fix, ev.tau_fallback_quantile)
                };
                RepairThreshold {
                    representation: rep,
                    tau_pos: tau(true),
                    tau_neg: tau(false),
                }
            })
            .collect();

        let ids: Vec<u64> = test.iter().map(|r| r.id).collect();
        let mis: Vec<bool> = test.iter().map(|r| r.misclassified()).collect();
        let by_id: HashMap<u64, &ScoreRow> = test.iter().map(|r| (r.id, *r)).collect();
        let mut base_rejections = Vec::new();
        let mut repairs = Vec::new();
        let mut rejected_detection = Vec::new();
        for m in OutputMethod::ALL {
            let name = uq_column(m);
            let scores: Vec<f64> = test.iter().map(|r| r.uq_score(m)).collect();
            let set = reject_set(&ids, &scores, &mis, ev.trr_fix)?;
            base_rejections.push(BaseRejection {
                detector: name.clone(),
                threshold: set.threshold.is_finite().then_some(set.threshold),
                n_true_rejections: set.true_rejections.len(),
                n_false_rejections: set.false_rejections.len(),
            });
            let mut rejected_ids: Vec<u64> = set.true_rejections.iter().chain(&set.false_rejections).copied().collect();
            rejected_ids.sort_unstable();
            for th in &thresholds {
                let rep = th.representation;
                let rejected: Vec<RejectedMessage> = rejected_ids
                    .iter()
                    .map(|id| {
                        let r = by_id[id];
                        RejectedMessage {
                            id: *id,
                            misclassified: r.misclassified(),
                            positive_prediction: r.predicted.is_positive(),
                            score: r.xmap_score(rep),
                        }
                    })
                    .collect();
                repairs.push(repair(&name, &xmap_column(rep), &rejected, th.tau_pos, th.tau_neg));
                for (subset, positive) in SUBSETS {
                    let sub: Vec<&RejectedMessage> =
                        rejected.iter().filter(|r| r.positive_prediction == positive).collect();
                    let s: Vec<Option<f64>> = sub.iter().map(|r| r.score).collect();
                    let mm: Vec<bool> = sub.iter().map(|r| r.misclassified).collect();
                    rejected_detection.push(RejectedDetection {
                        base_detector: name.clone(),
                        report: evaluate_detector(&xmap_column(rep), subset, &s, &mm, ev.trr_fix),
                    });
                }
            }
        }
        self.out.write_json(
            REPAIR_REPORT,
            &RepairSummary {
                split: Split::Test,
                trr_fix: ev.trr_fix,
                thresholds,
                base_rejections,
                repairs,
                rejected_detection,
            },
        )
    }

    /// Renders the evaluation and repair reports as markdown tables, writes
    /// `report.md` and returns its text.
    pub fn report(&self) -> Result<String> {
        in_stage("report", self.report_inner())
    }

    fn report_inner(&self) -> Result<String> {
        let ev = self.load_evaluation()?;
        let rep = self.load_repair()?;
        let md = render_report(&ev, &rep, &self.cfg.digest());
        let p = self.out.path(REPORT);
        std::fs::write(&p, &md).map_err(|e| Error::io(&p, e))?;
        Ok(md)
    }

    pub fn artifact_path(&self, name: &str) -> PathBuf {
        self.out.path(name)
    }
}

/// Mean topic contribution; `None` for an empty group or zero mass.
fn mean_contribution(tcs: &[Vec<f64>]) -> Option<Vec<f64>> {
    let first = tcs.first()?;
    let mut mean = vec![0.0; first.len()];
    for t in tcs {
        for (m, v) in mean.iter_mut().zip(t) {
            *m += v;
        }
    }
    let n = tcs.len() as f64;
    mean.iter_mut().for_each(|m| *m /= n);
    (mean.iter().sum::<f64>() > 0.0).then_some(mean)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn outcome_and_reference_group() {
        let (p, n) = (Label::Positive, Label::Negative);
        assert_eq!(Outcome::of(p, p), Outcome::TP);
        assert_eq!(Outcome::of(n, p), Outcome::FP);
        assert_eq!(Outcome::of(n, n), Outcome::TN);
        assert_eq!(Outcome::of(p, n), Outcome::FN);
        assert_eq!(Outcome::FP.reference_group(), Outcome::TP);
        assert_eq!(Outcome::FN.reference_group(), Outcome::TN);
    }

    #[test]
    fn summary_uses_sample_std() {
        let s = Summary::of(&[1.0, 3.0]).unwrap();
        assert_eq!((s.n, s.mean), (2, 2.0));
        assert!((s.std - 2f64.sqrt()).abs() < 1e-15);
        assert_eq!(Summary::of(&[4.0]).unwrap().std, 0.0);
        assert!(Summary::of(&[]).is_none());
    }

    #[test]
    fn mean_contribution_handles_empty_and_zero_groups() {
        assert!(mean_contribution(&[]).is_none());
        assert!(mean_contribution(&[vec![0.0, 0.0]]).is_none());
        assert_eq!(mean_contribution(&[vec![1.0, 0.0], vec![3.0, 2.0]]).unwrap(), vec![2.0, 1.0]);
    }

    #[test]
    fn score_header_lists_every_detector() {
        let h = score_header();
        assert_eq!(h.len(), 6 + 7 + 8);
        assert_eq!(h[6], "uq_entropy");
        assert_eq!(h[h.len() - 1], "xmap_rel_u");
    }
}
