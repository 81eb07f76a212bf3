//! Pipeline configuration shared by every subcommand, stored as TOML.
//!
//! Command-line flags override file values; the global seed, when set,
//! replaces the per-stage seeds so one number pins the whole run.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::bench::{MIN_TIMED, MIN_WARMUP};
use crate::error::{RegenError, Result};
use crate::features::{ExtractorPaths, REGISTERED, TOY_FIXED, TOY_PATCH};
use crate::metrics::KID_NUM_SUBSETS;
use crate::patch::{DEFAULT_K, DEFAULT_PATCH_SIZE, DEFAULT_THRESHOLD};
use crate::student::TrainConfig;
use crate::teacher::OracleParams;

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PathsConfig {
    pub source_manifest: Option<PathBuf>,
    pub target_manifest: Option<PathBuf>,
    pub pairs: Option<PathBuf>,
    pub out_dir: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum TeacherConfig {
    Oracle {
        #[serde(flatten)]
        params: OracleParams,
    },
    /// Enhanced frames produced elsewhere, named `<source id>.<ext>`.
    External { enhanced_dir: PathBuf },
}

impl Default for TeacherConfig {
    fn default() -> Self {
        TeacherConfig::Oracle {
            params: OracleParams::photoreal_grade(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MetricsConfig {
    pub extractor: String,
    pub kid_subset_size: Option<usize>,
    pub kid_num_subsets: usize,
    pub inception_onnx: Option<PathBuf>,
    pub vgg16_onnx: Option<PathBuf>,
    pub seed: u64,
}

impl Default for MetricsConfig {
    fn default() -> Self {
        MetricsConfig {
            extractor: TOY_FIXED.into(),
            kid_subset_size: None,
            kid_num_subsets: KID_NUM_SUBSETS,
            inception_onnx: None,
            vgg16_onnx: None,
            seed: 0,
        }
    }
}

impl MetricsConfig {
    pub fn extractor_paths(&self) -> ExtractorPaths {
        ExtractorPaths {
            inception: self.inception_onnx.clone(),
            vgg16: self.vgg16_onnx.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PatchConfig {
    pub patch_size: usize,
    pub per_image: usize,
    pub k: usize,
    pub threshold: f64,
    pub extractor: String,
    /// Use the inverted-file index instead of the exhaustive scan.
    pub approximate: bool,
    pub seed: u64,
}

impl Default for PatchConfig {
    fn default() -> Self {
        PatchConfig {
            patch_size: DEFAULT_PATCH_SIZE,
            per_image: 4,
            k: DEFAULT_K,
            threshold: DEFAULT_THRESHOLD,
            extractor: TOY_PATCH.into(),
            approximate: false,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BenchConfig {
    /// `(width, height)`.
    pub resolution: (usize, usize),
    pub warmup: usize,
    pub iters: usize,
}

impl Default for BenchConfig {
    fn default() -> Self {
        BenchConfig {
            resolution: crate::bench::DEFAULT_RESOLUTION,
            warmup: 20,
            iters: 200,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PipelineConfig {
    pub seed: Option<u64>,
    pub paths: PathsConfig,
    pub teacher: TeacherConfig,
    pub train: TrainConfig,
    pub metrics: MetricsConfig,
    pub patches: PatchConfig,
    pub bench: BenchConfig,
}

/// Prefix a nested validation error's field with its section.
fn within(section: &str, e: RegenError) -> RegenError {
    match e {
        RegenError::Config { field, message } => RegenError::Config {
            field: format!("{section}.{field}"),
            message,
        },
        other => RegenError::Config {
            field: section.into(),
            message: other.to_string(),
        },
    }
}

impl PipelineConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| RegenError::io(path, e))?;
        Self::from_toml(&text)
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| {
            let field = e
                .span()
                .map(|s| format!("bytes {}..{}", s.start, s.end))
                .unwrap_or_else(|| "<document>".into());
            RegenError::config(field, e.message().to_string())
        })
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    /// Copy the global seed, if any, into every stage.
    pub fn propagate_seed(&mut self) {
        if let Some(seed) = self.seed {
            self.train.seed = seed;
            self.metrics.seed = seed;
            self.patches.seed = seed;
            if let TeacherConfig::Oracle { params } = &mut self.teacher {
                params.seed = seed;
            }
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.train.validate().map_err(|e| within("train", e))?;
        if let TeacherConfig::Oracle { params } = &self.teacher {
            params.validate()?;
        }
        for (field, id) in [
            ("metrics.extractor", &self.metrics.extractor),
            ("patches.extractor", &self.patches.extractor),
        ] {
            if !REGISTERED.contains(&id.as_str()) {
                return Err(RegenError::config(
                    field,
                    format!("unknown extractor {id:?}; registered: {}", REGISTERED.join(", ")),
                ));
            }
        }
        if self.metrics.kid_num_subsets < 1 {
            return Err(RegenError::config("metrics.kid_num_subsets", "must be at least 1"));
        }
        if matches!(self.metrics.kid_subset_size, Some(s) if s < 2) {
            return Err(RegenError::config("metrics.kid_subset_size", "must be at least 2"));
        }
        let p = &self.patches;
        if p.patch_size == 0 {
            return Err(RegenError::config("patches.patch_size", "must be positive"));
        }
        if p.k < 1 {
            return Err(RegenError::config("patches.k", "must be at least 1"));
        }
        if !(-1.0..=1.0).contains(&p.threshold) {
            return Err(RegenError::config("patches.threshold", "must lie in [-1, 1]"));
        }
        let b = &self.bench;
        if b.warmup < MIN_WARMUP {
            return Err(RegenError::config("bench.warmup", format!("must be at least {MIN_WARMUP}")));
        }
        if b.iters < MIN_TIMED {
            return Err(RegenError::config("bench.iters", format!("must be at least {MIN_TIMED}")));
        }
        if b.resolution.0 == 0 || b.resolution.1 == 0 {
            return Err(RegenError::config("bench.resolution", "both sides must be positive"));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_round_trips_through_toml() {
        let c = PipelineConfig::default();
        c.validate().unwrap();
        assert_eq!(PipelineConfig::from_toml(&c.to_toml()).unwrap(), c);
    }

    #[test]
    fn partial_file_fills_defaults() {
        let c = PipelineConfig::from_toml(
            r#"
            seed = 42
            [train]
            resolution = [128, 128]
            epochs = 2
            [teacher]
            kind = "external"
            enhanced_dir = "enhanced"
            "#,
        )
        .unwrap();
        assert_eq!(c.train.epochs, 2);
        assert_eq!(c.train.learning_rate, 2e-4);
        assert!(matches!(c.teacher, TeacherConfig::External { .. }));

        let c = PipelineConfig::from_toml("[teacher]\nkind = \"oracle\"\ngrain_sigma = 0.0\n").unwrap();
        let expected = OracleParams {
            grain_sigma: 0.0,
            ..OracleParams::photoreal_grade()
        };
        assert_eq!(c.teacher, TeacherConfig::Oracle { params: expected });
        assert!(PipelineConfig::from_toml("[teacher]\nkind = \"oracle\"\ngrain = 0.0\n").is_err());
    }

    #[test]
    fn seed_reaches_every_stage() {
        let mut c = PipelineConfig {
            seed: Some(99),
            ..PipelineConfig::default()
        };
        c.propagate_seed();
        assert_eq!((c.train.seed, c.metrics.seed, c.patches.seed), (99, 99, 99));
        assert!(matches!(c.teacher, TeacherConfig::Oracle { ref params } if params.seed == 99));
    }

    #[test]
    fn errors_carry_field_paths() {
        let mut c = PipelineConfig::default();
        c.train.resolution = (100, 100);
        assert!(matches!(c.validate(), Err(RegenError::Config { field, .. }) if field == "train.resolution"));
        let mut c = PipelineConfig::default();
        c.metrics.extractor = "nope".into();
        assert!(matches!(c.validate(), Err(RegenError::Config { field, .. }) if field == "metrics.extractor"));
        let mut c = PipelineConfig::default();
        c.bench.iters = 10;
        assert!(matches!(c.validate(), Err(RegenError::Config { field, .. }) if field == "bench.iters"));
    }

    #[test]
    fn unknown_keys_rejected() {
        assert!(PipelineConfig::from_toml("[train]\nepochz = 3\n").is_err());
    }
}
