use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::classifiers::ModelKind;
use crate::corpus::DatasetFormat;
use crate::error::{Error, Result};
use crate::features::VocabQuotas;
use crate::profiling::ProfilingConfig;

/// One JSON document drives every stage. Missing fields take defaults, so
/// `{}` is a complete config.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub dataset: DatasetConfig,
    /// Share of messages in the training split.
    pub split_ratio: f64,
    /// Every stage seed is derived from this one.
    pub seed: u64,
    pub preprocess: PreprocessConfig,
    pub features: VocabQuotas,
    pub classifier: ClassifierConfig,
    pub attribution: AttributionConfig,
    pub profiling: ProfilingConfig,
    pub uncertainty: UncertaintyConfig,
    pub evaluation: EvaluationConfig,
    /// Not part of the digest.
    pub out_dir: PathBuf,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            dataset: DatasetConfig::default(),
            split_ratio: 0.5,
            seed: 0,
            preprocess: PreprocessConfig::default(),
            features: VocabQuotas::default(),
            classifier: ClassifierConfig::default(),
            attribution: AttributionConfig::default(),
            profiling: ProfilingConfig::default(),
            uncertainty: UncertaintyConfig::default(),
            evaluation: EvaluationConfig::default(),
            out_dir: PathBuf::from("out"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetConfig {
    pub path: PathBuf,
    pub format: DatasetFormat,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        DatasetConfig {
            path: PathBuf::from("data/sms_spam.tsv"),
            format: DatasetFormat::SmsTsv,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PreprocessConfig {
    pub min_df: usize,
    /// Caps the majority/minority ratio of the training split.
    pub max_class_ratio: Option<f64>,
}

impl Default for PreprocessConfig {
    fn default() -> Self {
        PreprocessConfig {
            min_df: 2,
            max_class_ratio: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ClassifierConfig {
    pub kind: ModelKind,
    pub logreg: LogRegSettings,
    pub svm: SvmSettings,
    pub nb: NbSettings,
}

impl Default for ClassifierConfig {
    fn default() -> Self {
        ClassifierConfig {
            kind: ModelKind::Logreg,
            logreg: LogRegSettings::default(),
            svm: SvmSettings::default(),
            nb: NbSettings::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LogRegSettings {
    pub l2_strength: f64,
    pub epochs: usize,
    pub grad_tol: f64,
}

impl Default for LogRegSettings {
    fn default() -> Self {
        LogRegSettings {
            l2_strength: 1.0,
            epochs: 1000,
            grad_tol: 1e-5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SvmSettings {
    pub c: f64,
    pub epochs: usize,
    pub calibration_folds: usize,
}

impl Default for SvmSettings {
    fn default() -> Self {
        SvmSettings {
            c: 1.0,
            epochs: 40,
            calibration_folds: 5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NbSettings {
    pub alpha: f64,
}

impl Default for NbSettings {
    fn default() -> Self {
        NbSettings { alpha: 1.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AttributionConfig {
    pub background_size: usize,
    /// Coalitions per background row game; `None` means `2 * players + 2048`.
    pub n_coalitions: Option<usize>,
    pub full_enumeration_max: usize,
    /// Explain naive Bayes exactly on its log-odds instead of with the
    /// kernel estimator on its probability.
    pub nb_linear: bool,
}

impl Default for AttributionConfig {
    fn default() -> Self {
        AttributionConfig {
            background_size: 50,
            n_coalitions: None,
            full_enumeration_max: 12,
            nb_linear: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct UncertaintyConfig {
    /// Neighbor topics per topic for the aleatory representation.
    pub aleatory_k: usize,
    /// ODIN temperature, shared by the topic and output levels.
    pub temperature: f64,
    /// Reference neighbors for REL-U.
    pub k_nn: usize,
    /// Evidence per unit probability for output-level vacuity and dissonance.
    pub prior_strength: f64,
}

impl Default for UncertaintyConfig {
    fn default() -> Self {
        UncertaintyConfig {
            aleatory_k: 2,
            temperature: 1000.0,
            k_nn: 25,
            prior_strength: 2.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvaluationConfig {
    pub trr_fix: f64,
    /// Quantile of correct training scores used as the repair threshold when
    /// the training split has no misclassified messages of a polarity.
    pub tau_fallback_quantile: f64,
}

impl Default for EvaluationConfig {
    fn default() -> Self {
        EvaluationConfig {
            trr_fix: 0.95,
            tau_fallback_quantile: 0.95,
        }
    }
}

impl PipelineConfig {
    pub fn from_json(raw: &str) -> Result<Self> {
        let cfg: PipelineConfig = serde_json::from_str(raw)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let raw = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&raw)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::invalid(m));
        if !(self.split_ratio > 0.0 && self.split_ratio < 1.0) {
            return bad(format!("split_ratio must lie in (0, 1), got {}", self.split_ratio));
        }
        if !(self.evaluation.trr_fix > 0.0 && self.evaluation.trr_fix <= 1.0) {
            return bad(format!("trr_fix must lie in (0, 1], got {}", self.evaluation.trr_fix));
        }
        let q = self.evaluation.tau_fallback_quantile;
        if !(0.0..=1.0).contains(&q) {
            return bad(format!("tau_fallback_quantile must lie in [0, 1], got {q}"));
        }
        if self.attribution.background_size == 0 {
            return bad("background_size must be positive".into());
        }
        if self.uncertainty.aleatory_k >= self.profiling.topics {
            return bad(format!(
                "aleatory_k ({}) must be smaller than the number of topics ({})",
                self.uncertainty.aleatory_k, self.profiling.topics
            ));
        }
        if !(self.uncertainty.temperature > 0.0) || self.uncertainty.k_nn == 0 {
            return bad("temperature and k_nn must be positive".into());
        }
        Ok(())
    }

    /// SHA-256 of the canonical JSON form, with the output directory left out.
    pub fn digest(&self) -> String {
        let mut v = serde_json::to_value(self).expect("config serializes");
        if let Some(obj) = v.as_object_mut() {
            obj.remove("out_dir");
        }
        let canonical = serde_json::to_vec(&v).expect("value serializes");
        hex::encode(Sha256::digest(&canonical))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_document_gives_defaults() {
        let cfg = PipelineConfig::from_json("{}").unwrap();
        assert_eq!(cfg, PipelineConfig::default());
        assert_eq!(cfg.profiling.k, 200);
        assert_eq!(cfg.profiling.tau_p, 0.05);
        assert_eq!(cfg.profiling.rho, [0.65, 0.3, 0.05]);
        assert_eq!(cfg.profiling.topics, 10);
        assert_eq!(cfg.uncertainty.aleatory_k, 2);
        assert_eq!(cfg.evaluation.trr_fix, 0.95);
        assert_eq!((cfg.features.word, cfg.features.phrase), (7000, 3000));
    }

    #[test]
    fn partial_sections_keep_other_defaults() {
        let cfg = PipelineConfig::from_json(r#"{"classifier": {"kind": "svm"}, "profiling": {"k": 50}}"#).unwrap();
        assert_eq!(cfg.classifier.kind, ModelKind::Svm);
        assert_eq!(cfg.classifier.svm, SvmSettings::default());
        assert_eq!(cfg.profiling.k, 50);
        assert_eq!(cfg.profiling.topics, 10);
    }

    #[test]
    fn unknown_fields_and_bad_values_are_rejected() {
        assert!(PipelineConfig::from_json(r#"{"sed": 1}"#).is_err());
        assert!(PipelineConfig::from_json(r#"{"split_ratio": 1.0}"#).is_err());
        assert!(PipelineConfig::from_json(r#"{"uncertainty": {"aleatory_k": 10}}"#).is_err());
    }

    #[test]
    fn digest_ignores_out_dir_only() {
        let a = PipelineConfig::default();
        let mut b = a.clone();
        b.out_dir = PathBuf::from("elsewhere");
        assert_eq!(a.digest(), b.digest());
        b.seed = 1;
        assert_ne!(a.digest(), b.digest());
        assert_eq!(a.digest().len(), 64);
    }
}
