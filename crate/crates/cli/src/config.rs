//! Experiment configuration: one TOML file with a section per command.
//! Values resolve as command-line flag, then file, then built-in default.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use anyhow::Context as _;
use serde::{Deserialize, Serialize};

use plasma_views::augbase::AugSpec;
use plasma_views::evaluation::AlarmConfig;
use plasma_views::models::{ClassifierSpec, ClassifierTrainConfig};
use plasma_views::pipeline::{ImportConfig, PreprocessConfig, SynthConfig};
use plasma_views::viewmaker::{EncoderConfig, TrainConfig, ViewmakerConfig};
use plasma_views::{Error, Machine, Rng, SplitCase};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    None,
    Tsaug,
    Viewmaker,
}

impl Strategy {
    pub const ALL: [Strategy; 3] = [Strategy::None, Strategy::Tsaug, Strategy::Viewmaker];

    pub fn as_str(self) -> &'static str {
        match self {
            Strategy::None => "none",
            Strategy::Tsaug => "tsaug",
            Strategy::Viewmaker => "viewmaker",
        }
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self, Error> {
        match s.trim().to_ascii_lowercase().as_str() {
            "none" | "no-aug" | "noaug" => Ok(Strategy::None),
            "tsaug" => Ok(Strategy::Tsaug),
            "viewmaker" | "views" | "view" => Ok(Strategy::Viewmaker),
            other => Err(Error::Config(format!("unknown augmentation strategy `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthSection {
    pub shots_per_machine: usize,
    pub machines: Vec<Machine>,
    pub disruptive_fraction: f64,
    pub generator: SynthConfig,
}

impl Default for SynthSection {
    fn default() -> Self {
        Self {
            shots_per_machine: 200,
            machines: Machine::ALL.to_vec(),
            disruptive_fraction: 0.1,
            generator: SynthConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PreprocessSection {
    pub case: SplitCase,
    pub new_machine: Machine,
    pub few_shot_count: usize,
    pub holdout_fraction: f64,
    pub steps: PreprocessConfig,
    pub import: ImportConfig,
}

impl Default for PreprocessSection {
    fn default() -> Self {
        Self {
            case: SplitCase::ManyShot,
            new_machine: Machine::DIIID,
            few_shot_count: 20,
            holdout_fraction: 0.5,
            steps: PreprocessConfig::default(),
            import: ImportConfig::default(),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ViewmakerSection {
    pub model: ViewmakerConfig,
    pub encoder: EncoderConfig,
    pub train: TrainConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentSection {
    pub strategy: Strategy,
    pub copies: usize,
    pub tsaug: AugSpec,
}

impl Default for AugmentSection {
    fn default() -> Self {
        Self {
            strategy: Strategy::Viewmaker,
            copies: 1,
            tsaug: AugSpec::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ClassifierSection {
    pub model: ClassifierSpec,
    pub train: ClassifierTrainConfig,
    /// Step between training windows.
    pub stride: usize,
    /// Strategies trained and evaluated by `run`.
    pub strategies: Vec<Strategy>,
}

impl Default for ClassifierSection {
    fn default() -> Self {
        Self {
            model: ClassifierSpec::default(),
            train: ClassifierTrainConfig::default(),
            stride: 4,
            strategies: Strategy::ALL.to_vec(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvaluateSection {
    pub alarm: AlarmConfig,
    /// Number of thresholds in the AUC sweep.
    pub auc_grid: usize,
}

impl Default for EvaluateSection {
    fn default() -> Self {
        Self {
            alarm: AlarmConfig::default(),
            auc_grid: 99,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CompareSection {
    pub samples: usize,
    pub band: Option<usize>,
}

impl Default for CompareSection {
    fn default() -> Self {
        Self {
            samples: 250,
            band: None,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Root of every random stream in the experiment.
    pub seed: u64,
    pub synth: SynthSection,
    pub preprocess: PreprocessSection,
    pub viewmaker: ViewmakerSection,
    pub augment: AugmentSection,
    pub classifier: ClassifierSection,
    pub evaluate: EvaluateSection,
    pub compare_dtw: CompareSection,
}

impl ExperimentConfig {
    /// Reads a TOML config, or the config snapshot stored in a manifest when
    /// the file ends in `.json`.
    pub fn load(path: &Path) -> anyhow::Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Io {
            path: path.into(),
            source: e,
        })?;
        if path.extension().is_some_and(|e| e == "json") {
            let manifest: crate::manifest::Manifest = serde_json::from_str(&text)
                .map_err(|e| Error::Config(format!("{}: not a manifest: {e}", path.display())))?;
            return Ok(manifest.config);
        }
        let cfg: Self = toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> anyhow::Result<String> {
        toml::to_string_pretty(self).context("serializing config")
    }

    /// Seed of the named random stream, independent of every other name.
    pub fn stream_seed(&self, name: &str) -> u64 {
        Rng::new(self.seed).substream(name).next_u64()
    }

    pub fn validate(&self) -> Result<(), Error> {
        self.synth.generator.validate()?;
        if !(0.0..=1.0).contains(&self.synth.disruptive_fraction) {
            return Err(Error::Config(format!(
                "disruptive_fraction must be in [0, 1], got {}",
                self.synth.disruptive_fraction
            )));
        }
        self.preprocess.steps.validate()?;
        self.viewmaker.model.validate()?;
        self.viewmaker.train.validate()?;
        self.augment.tsaug.validate()?;
        self.classifier.model.validate()?;
        self.classifier.train.validate()?;
        if self.classifier.stride == 0 {
            return Err(Error::Config("classifier stride must be positive".into()));
        }
        self.evaluate.alarm.validate()?;
        if self.evaluate.auc_grid == 0 {
            return Err(Error::Config("auc_grid must be positive".into()));
        }
        Ok(())
    }
}
