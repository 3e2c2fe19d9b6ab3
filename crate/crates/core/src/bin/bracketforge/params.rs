//! Resolved parameter records. A run's manifest stores one of these and
//! `--config` reads it back.

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use bracketforge::consistency::CostWeights;
use bracketforge::guidance::{GuidanceForm, LambdaMode, DEFAULT_EVS, DEFAULT_LAMBDA_CONSTANT, DEFAULT_LAMBDA_QUADRATIC};
use bracketforge::merge::{MergeWeightSpec, WeightKind};
use bracketforge::score::toy::{ToySceneSpec, TrainOptions};
use bracketforge::score::ScheduleKind;
use bracketforge::{Error, Result};

/// Seed, determinism switch and the command's own parameters.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig<P> {
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub serial: bool,
    #[serde(default)]
    pub params: P,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SamplingParams {
    pub model: Option<String>,
    pub evs: Vec<f64>,
    pub steps: Option<usize>,
    pub lambda_mode: LambdaMode,
    /// Filled from the mode when absent.
    pub lambda0: Option<f64>,
    pub form: GuidanceForm,
    pub crf: String,
    pub weights: CostWeights,
    pub prompt: Option<String>,
    pub stem: String,
    /// Canvas width for tiled sampling; the model width when absent.
    pub width: Option<usize>,
    pub overlap: Option<usize>,
    pub merge: MergeWeightSpec,
    /// Exposure multiplier of the tone-mapped preview.
    pub exposure: f64,
}

impl Default for SamplingParams {
    fn default() -> Self {
        Self {
            model: None,
            evs: DEFAULT_EVS.to_vec(),
            steps: None,
            lambda_mode: LambdaMode::TimeQuadratic,
            lambda0: None,
            form: GuidanceForm::Estimate,
            crf: "gamma:2.2".into(),
            weights: CostWeights::default(),
            prompt: None,
            stem: "sample".into(),
            width: None,
            overlap: None,
            merge: MergeWeightSpec::default(),
            exposure: 1.0,
        }
    }
}

impl SamplingParams {
    pub fn resolve_lambda(&mut self) {
        if self.lambda0.is_none() {
            self.lambda0 = Some(match self.lambda_mode {
                LambdaMode::Constant => DEFAULT_LAMBDA_CONSTANT,
                LambdaMode::TimeQuadratic => DEFAULT_LAMBDA_QUADRATIC,
            });
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GenerateParams {
    pub sampling: SamplingParams,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SizeMismatch {
    #[default]
    Error,
    Resize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ReconstructParams {
    pub sampling: SamplingParams,
    pub input: Option<String>,
    pub on_size_mismatch: SizeMismatch,
}

impl Default for ReconstructParams {
    fn default() -> Self {
        Self {
            sampling: SamplingParams {
                lambda_mode: LambdaMode::Constant,
                stem: "recon".into(),
                ..Default::default()
            },
            input: None,
            on_size_mismatch: SizeMismatch::Error,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct HistParams {
    pub sampling: SamplingParams,
    pub histogram: Option<String>,
    pub from_image: Option<String>,
    pub saturated_frac: Option<f64>,
    pub bins: usize,
    /// Soft-histogram kernel half-width; half a bin when absent.
    pub bandwidth: Option<f64>,
}

impl Default for HistParams {
    fn default() -> Self {
        Self {
            sampling: SamplingParams {
                stem: "hist".into(),
                ..Default::default()
            },
            histogram: None,
            from_image: None,
            saturated_frac: None,
            bins: bracketforge::histogram::DEFAULT_BINS,
            bandwidth: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MergeParams {
    pub brackets: Option<String>,
    pub stem: Option<String>,
    pub crf: String,
    pub weights: MergeWeightSpec,
    pub preview: bool,
    pub exposure: f64,
}

impl Default for MergeParams {
    fn default() -> Self {
        Self {
            brackets: None,
            stem: None,
            crf: "gamma:2.2".into(),
            weights: MergeWeightSpec::default(),
            preview: false,
            exposure: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ConsistencyParams {
    pub brackets: Option<String>,
    pub stem: Option<String>,
    pub crf: String,
}

impl Default for ConsistencyParams {
    fn default() -> Self {
        Self {
            brackets: None,
            stem: None,
            crf: "gamma:2.2".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CropsParams {
    pub brackets: Option<String>,
    pub stem: Option<String>,
    pub count: usize,
    pub size: usize,
}

impl Default for CropsParams {
    fn default() -> Self {
        Self {
            brackets: None,
            stem: None,
            count: 100,
            size: 64,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExtractParams {
    pub hdr: Option<String>,
    pub evs: Vec<f64>,
    pub crf: String,
    /// Shift the radiance by the auto-exposure rule before rendering.
    pub auto_ev0: bool,
    pub stem: String,
}

impl Default for ExtractParams {
    fn default() -> Self {
        Self {
            hdr: None,
            evs: DEFAULT_EVS.to_vec(),
            crf: "gamma:2.2".into(),
            auto_ev0: true,
            stem: "scene".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainParams {
    pub scenes: usize,
    pub scene: ToySceneSpec,
    pub train: TrainOptions,
    pub schedule: ScheduleKind,
    pub schedule_steps: usize,
}

impl Default for TrainParams {
    fn default() -> Self {
        Self {
            scenes: 2000,
            scene: ToySceneSpec::default(),
            train: TrainOptions {
                epochs: 10,
                holdout: 64,
                ..Default::default()
            },
            schedule: ScheduleKind::LinearBeta,
            schedule_steps: 1000,
        }
    }
}

/// Parses a snake_case enum name the same way the config files spell it.
pub fn parse_name<T: DeserializeOwned>(what: &str, s: &str) -> Result<T> {
    serde_json::from_value(serde_json::Value::String(s.replace('-', "_")))
        .map_err(|_| Error::Config(format!("unknown {what} '{s}'")))
}

pub fn parse_weight_kind(s: &str) -> Result<WeightKind> {
    parse_name("merge weight", s)
}
