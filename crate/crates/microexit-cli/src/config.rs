//! Pipeline configuration: one TOML file, every section optional, every
//! field defaulted. Command-line flags override the file, the file
//! overrides the built-in defaults.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use microexit::engine::CostProfile;
use microexit::obp::{ClassWeighting, TreeParams};
use microexit::synth::{ClassArchetype, SyntheticSpec};
use microexit::trainer::TrainConfig;
use microexit::{Error, Result};

#[derive(Debug, Clone, Default, serde::Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    /// Seed for every seeded component; `--seed` wins over this.
    pub seed: Option<u64>,
    /// Artifact and report directory; `--out` wins over this.
    pub out: Option<PathBuf>,
    pub synth: SynthSection,
    pub preprocess: PreprocessSection,
    pub train: TrainSection,
    pub obp: ObpSection,
    pub evaluate: EvaluateSection,
    pub cost: CostSection,
    pub cdln: CdlnSection,
}

#[derive(Debug, Clone, serde::Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthSection {
    pub classes: usize,
    pub segments_per_class: usize,
    pub channels: usize,
    pub segment_len: usize,
    pub noise: f64,
    /// Explicit per-class archetypes; when absent they are derived from
    /// `classes` with disjoint frequency bands.
    pub archetypes: Option<Vec<ClassArchetype>>,
}

impl Default for SynthSection {
    fn default() -> Self {
        SynthSection {
            classes: 4,
            segments_per_class: 200,
            channels: 7,
            segment_len: 32,
            noise: 0.1,
            archetypes: None,
        }
    }
}

impl SynthSection {
    pub fn to_spec(&self, seed: u64) -> SyntheticSpec {
        let mut spec = SyntheticSpec::classes(self.classes);
        spec.segments_per_class = self.segments_per_class;
        spec.channels = self.channels;
        spec.segment_len = self.segment_len;
        spec.noise = self.noise;
        spec.seed = seed;
        if let Some(archetypes) = &self.archetypes {
            spec.archetypes = archetypes.clone();
        }
        spec
    }
}

#[derive(Debug, Clone, Default, serde::Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PreprocessSection {
    /// Dataset profile name (`opportunity` or `whar`); `--profile` wins.
    pub profile: Option<String>,
    /// Raw recording CSV.
    pub input: Option<PathBuf>,
    /// Vendor column names, keyed by the profile's channel names, for CSV
    /// files whose headers do not match the profile.
    pub columns: BTreeMap<String, String>,
}

/// Training hyperparameters plus how to split the segments. The fields
/// mirror the trainer's configuration except for the seed, which always
/// comes from the global seed so one knob controls the whole pipeline.
#[derive(Debug, Clone, serde::Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub w_early: f64,
    pub w_base: f64,
    pub folds: usize,
    pub val_fraction: f64,
    /// Which fold acts as the test set.
    pub fold: usize,
}

impl Default for TrainSection {
    fn default() -> Self {
        let config = TrainConfig::default();
        TrainSection {
            epochs: config.epochs,
            learning_rate: config.learning_rate,
            batch_size: config.batch_size,
            beta1: config.beta1,
            beta2: config.beta2,
            eps: config.eps,
            w_early: config.w_early,
            w_base: config.w_base,
            folds: 5,
            val_fraction: 0.15,
            fold: 0,
        }
    }
}

impl TrainSection {
    pub fn to_config(&self, seed: u64) -> TrainConfig {
        TrainConfig {
            epochs: self.epochs,
            learning_rate: self.learning_rate,
            batch_size: self.batch_size,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.eps,
            w_early: self.w_early,
            w_base: self.w_base,
            seed,
        }
    }
}

/// Exit-tree growth limits; the recorded seed comes from the global seed.
#[derive(Debug, Clone, serde::Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ObpSection {
    pub max_depth: usize,
    pub min_leaf: usize,
    pub class_weighting: ClassWeighting,
}

impl Default for ObpSection {
    fn default() -> Self {
        let params = TreeParams::default();
        ObpSection {
            max_depth: params.max_depth,
            min_leaf: params.min_leaf,
            class_weighting: params.class_weighting,
        }
    }
}

impl ObpSection {
    pub fn to_params(&self, seed: u64) -> TreeParams {
        TreeParams {
            max_depth: self.max_depth,
            min_leaf: self.min_leaf,
            class_weighting: self.class_weighting,
            seed,
        }
    }
}

#[derive(Debug, Clone, serde::Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvaluateSection {
    /// `test` scores the held-out fold, `all` scores every segment.
    pub scope: String,
}

impl Default for EvaluateSection {
    fn default() -> Self {
        EvaluateSection { scope: "test".into() }
    }
}

#[derive(Debug, Clone, Default, serde::Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CostSection {
    /// Shipped profile name; `--profile` wins. Ignored when `calibration`
    /// is given.
    pub profile: Option<String>,
    /// Full explicit cost table instead of a shipped profile.
    pub calibration: Option<CostProfile>,
    /// Explicit routing counts; when absent the counts come from routing
    /// the segment artifact through the model and tree.
    pub n_early: Option<u64>,
    pub n_base: Option<u64>,
}

#[derive(Debug, Clone, serde::Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CdlnSection {
    pub thresholds: Vec<f64>,
}

impl Default for CdlnSection {
    fn default() -> Self {
        CdlnSection {
            thresholds: vec![0.5, 0.6, 0.7, 0.8, 0.9],
        }
    }
}

impl PipelineConfig {
    /// Reads and parses the file; any problem is a configuration error.
    pub fn load(path: &Path) -> Result<(Self, Vec<u8>)> {
        let bytes = std::fs::read(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        let text = std::str::from_utf8(&bytes)
            .map_err(|e| Error::Config(format!("config {} is not UTF-8: {e}", path.display())))?;
        let config: PipelineConfig = toml::from_str(text)
            .map_err(|e| Error::Config(format!("bad config {}: {e}", path.display())))?;
        Ok((config, bytes))
    }

    pub fn validate(&self) -> Result<()> {
        if let Some(profile) = &self.preprocess.profile {
            microexit::preprocess::DatasetProfile::named(profile)?;
        }
        if let Some(profile) = &self.cost.profile {
            CostProfile::named(profile)?;
        }
        if let Some(calibration) = &self.cost.calibration {
            calibration.validate()?;
        }
        if !matches!(self.evaluate.scope.as_str(), "test" | "all") {
            return Err(Error::Config(format!(
                "evaluate.scope {:?} must be \"test\" or \"all\"",
                self.evaluate.scope
            )));
        }
        for &th in &self.cdln.thresholds {
            if !(th > 0.0 && th <= 1.0) {
                return Err(Error::Config(format!("cdln threshold {th} must be in (0, 1]")));
            }
        }
        match (self.cost.n_early, self.cost.n_base) {
            (Some(_), Some(_)) | (None, None) => Ok(()),
            _ => Err(Error::Config(
                "cost.n_early and cost.n_base must be given together".into(),
            )),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_config_is_all_defaults() {
        let config: PipelineConfig = toml::from_str("").unwrap();
        config.validate().unwrap();
        assert_eq!(config.train.to_config(42), TrainConfig::default());
        assert_eq!(config.train.folds, 5);
        assert_eq!(config.cdln.thresholds, vec![0.5, 0.6, 0.7, 0.8, 0.9]);
        assert_eq!(config.synth.classes, 4);
    }

    #[test]
    fn sections_override_single_fields() {
        let config: PipelineConfig = toml::from_str(
            "seed = 7\n\
             [train]\n\
             epochs = 3\n\
             folds = 4\n\
             [obp]\n\
             max_depth = 2\n\
             class_weighting = \"uniform\"\n\
             [synth]\n\
             noise = 0.5\n",
        )
        .unwrap();
        assert_eq!(config.seed, Some(7));
        assert_eq!(config.train.epochs, 3);
        assert_eq!(config.train.batch_size, 32);
        assert_eq!(config.train.folds, 4);
        assert_eq!(config.obp.max_depth, 2);
        assert_eq!(config.obp.class_weighting, ClassWeighting::Uniform);
        assert_eq!(config.synth.noise, 0.5);
        assert_eq!(config.synth.classes, 4);
    }

    #[test]
    fn unknown_keys_and_bad_values_are_config_errors() {
        assert!(toml::from_str::<PipelineConfig>("[synth]\nnois = 0.5\n").is_err());
        let config: PipelineConfig = toml::from_str("[evaluate]\nscope = \"half\"\n").unwrap();
        assert!(config.validate().is_err());
        let config: PipelineConfig = toml::from_str("[cost]\nn_early = 10\n").unwrap();
        assert!(config.validate().is_err());
        let config: PipelineConfig = toml::from_str("[cdln]\nthresholds = [0.5, 1.5]\n").unwrap();
        assert!(config.validate().is_err());
    }

    #[test]
    fn synth_section_builds_the_spec() {
        let config: PipelineConfig =
            toml::from_str("[synth]\nclasses = 3\nsegments_per_class = 10\nnoise = 0.2\n").unwrap();
        let spec = config.synth.to_spec(9);
        assert_eq!(spec.n_classes(), 3);
        assert_eq!(spec.segments_per_class, 10);
        assert_eq!(spec.noise, 0.2);
        assert_eq!(spec.seed, 9);
        spec.validate().unwrap();
    }
}
