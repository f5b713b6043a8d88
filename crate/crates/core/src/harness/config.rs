use std::path::PathBuf;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::diffusion::{NoiseSchedule, ToyDistribution};
use crate::error::{Error, Result};
use crate::errorlab::ScalingConfig;
use crate::net::train::TrainConfig;
use crate::net::NetConfig;
use crate::samplers::{SamplerKind, Spacing};
use crate::saquant::{BitConfig, PairingDirection, QLoRAObjective, ReconConfig, SAQLoRAConfig};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RunKind {
    /// Train the full-precision noise predictor.
    Train,
    /// Dual-order calibration followed by layer-wise rounding reconstruction.
    CalibratePtq,
    /// Adapter fine-tuning of a quantized model over the mixstep schedule.
    FinetuneQlora,
    /// Draw sample trajectories from one model.
    #[default]
    Sample,
    /// Error-bound scaling sweeps on the analytic evaluator.
    AnalyzeError,
    /// Compare a model against the full-precision network.
    Evaluate,
    /// Fine-tune one initial quantized model under several objectives.
    Ablate,
}

impl RunKind {
    pub fn label(&self) -> &'static str {
        match self {
            RunKind::Train => "train",
            RunKind::CalibratePtq => "calibrate-ptq",
            RunKind::FinetuneQlora => "finetune-qlora",
            RunKind::Sample => "sample",
            RunKind::AnalyzeError => "analyze-error",
            RunKind::Evaluate => "evaluate",
            RunKind::Ablate => "ablate",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        serde_json::from_value(Value::String(s.into())).map_err(|_| Error::Config(format!("unknown experiment kind `{s}`")))
    }
}

/// Data distribution, tagged by `kind`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DistributionSpec {
    /// `modes` equal-weight isotropic components on a circle in 2-D.
    Circle { modes: usize, radius: f64, std: f64 },
    Gaussian { mean: Vec<f64>, std: f64 },
    Mixture {
        weights: Vec<f64>,
        means: Vec<Vec<f64>>,
        stds: Vec<f64>,
    },
}

impl Default for DistributionSpec {
    fn default() -> Self {
        DistributionSpec::Circle {
            modes: 8,
            radius: 4.0,
            std: 0.3,
        }
    }
}

impl DistributionSpec {
    pub fn build(&self) -> Result<ToyDistribution> {
        match self {
            DistributionSpec::Circle { modes, radius, std } => ToyDistribution::circle(*modes, *radius, *std),
            DistributionSpec::Gaussian { mean, std } => ToyDistribution::gaussian(mean.clone(), *std),
            DistributionSpec::Mixture { weights, means, stds } => {
                ToyDistribution::new(weights.clone(), means.clone(), stds.clone())
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GridSpec {
    pub steps: usize,
    pub spacing: Spacing,
}

impl Default for GridSpec {
    fn default() -> Self {
        Self {
            steps: 20,
            spacing: Spacing::UniformLambda,
        }
    }
}

/// Which network a `sample` or `evaluate` run draws from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelSource {
    /// Closed-form optimal predictor of the configured distribution.
    Analytic,
    /// Full-precision network (`base_checkpoint`, or trained in the run).
    #[default]
    Net,
    /// Quantized model from `quant_checkpoint`.
    Quant,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PtqPairing {
    /// Calibration pairs across first- and second-order trajectories.
    #[default]
    MixedOrder,
    /// Both branches on the first-order points.
    SamePoint,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CalibrationSpec {
    /// Step count of the dual-order calibration trajectories.
    pub steps: usize,
    /// Chains per calibration trajectory.
    pub chains: usize,
    /// Independent calibration trajectories (each from its own `x_T`).
    pub trajectories: usize,
    pub pairing: PtqPairing,
}

impl Default for CalibrationSpec {
    fn default() -> Self {
        Self {
            steps: 20,
            chains: 64,
            trajectories: 1,
            pairing: PtqPairing::MixedOrder,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSpec {
    /// Chains sampled per batch for metrics.
    pub chains: usize,
    /// Data samples in the energy-distance reference set.
    pub reference_samples: usize,
    /// Chains written to `trajectories.csv`.
    pub trajectory_chains: usize,
    /// Independent batch pairs used for the energy-distance noise floor.
    pub noise_floor_pairs: usize,
}

impl Default for EvalSpec {
    fn default() -> Self {
        Self {
            chains: 4096,
            reference_samples: 4096,
            trajectory_chains: 64,
            noise_floor_pairs: 4,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AblationVariant {
    pub name: String,
    pub objective: QLoRAObjective,
    pub w_cos: f64,
    pub w_mota: f64,
    #[serde(default)]
    pub direction: PairingDirection,
    /// Overrides `qlora.epochs` for this variant.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub epochs: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AblateSpec {
    pub variants: Vec<AblationVariant>,
}

impl Default for AblateSpec {
    fn default() -> Self {
        let v = |name: &str, objective, w_cos, w_mota| AblationVariant {
            name: name.into(),
            objective,
            w_cos,
            w_mota,
            direction: PairingDirection::CaseStudy,
            epochs: None,
        };
        Self {
            variants: vec![
                v("sa-qlora", QLoRAObjective::Mota, 1.0, 1.0),
                v("plain-qlora", QLoRAObjective::Plain, 0.0, 1.0),
                v("cos-only", QLoRAObjective::Mota, 1.0, 0.0),
                v("mota-only", QLoRAObjective::Mota, 0.0, 1.0),
            ],
        }
    }
}

/// Complete description of one run. Every field has a default; unknown keys
/// are rejected.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Must equal [`SCHEMA_VERSION`].
    pub schema_version: u32,
    /// Default `sample`.
    pub kind: RunKind,
    /// Root seed; every stage derives its own sub-seed from it. Default 0.
    pub seed: u64,
    /// VP schedule, default `beta_min 0.1, beta_max 20, T 1, t_min 1e-4`.
    pub schedule: NoiseSchedule,
    /// Sampling grid, default 20 steps uniform in log-SNR.
    pub grid: GridSpec,
    /// Default DPM-Solver-2.
    pub sampler: SamplerKind,
    /// Default: 8 modes on a circle of radius 4, std 0.3.
    pub distribution: DistributionSpec,
    /// Default 2 -> 64 -> 64 -> 2 with a 16-wide time embedding.
    pub net: NetConfig,
    pub train: TrainConfig,
    /// Default W8A8.
    pub quant: BitConfig,
    pub calibration: CalibrationSpec,
    pub ptq: ReconConfig,
    pub qlora: SAQLoRAConfig,
    pub error: ScalingConfig,
    pub eval: EvalSpec,
    pub ablate: AblateSpec,
    /// Default `net`.
    pub model: ModelSource,
    /// Full-precision checkpoint manifest; when absent the network is trained
    /// in the run.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub base_checkpoint: Option<PathBuf>,
    /// Quantized-model sidecar (`*.quant.json`) for `model = quant`.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub quant_checkpoint: Option<PathBuf>,
    /// Default `runs/out`.
    pub output_dir: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            schema_version: SCHEMA_VERSION,
            kind: RunKind::default(),
            seed: 0,
            schedule: NoiseSchedule::default(),
            grid: GridSpec::default(),
            sampler: SamplerKind::Dpm2,
            distribution: DistributionSpec::default(),
            net: NetConfig::default(),
            train: TrainConfig::default(),
            quant: BitConfig::default(),
            calibration: CalibrationSpec::default(),
            ptq: ReconConfig::default(),
            qlora: SAQLoRAConfig::default(),
            error: ScalingConfig::default(),
            eval: EvalSpec::default(),
            ablate: AblateSpec::default(),
            model: ModelSource::default(),
            base_checkpoint: None,
            quant_checkpoint: None,
            output_dir: PathBuf::from("runs/out"),
        }
    }
}

impl RunConfig {
    pub fn from_json(s: &str) -> Result<Self> {
        let cfg: RunConfig = serde_json::from_str(s).map_err(|e| Error::Config(e.to_string()))?;
        Ok(cfg)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// Applies `key.path=value` overrides to `base` (a config as JSON) and
    /// parses the result. Values parse as JSON, falling back to a string.
    pub fn with_overrides(base: Value, overrides: &[String]) -> Result<Self> {
        let mut v = base;
        for o in overrides {
            let (path, raw) = o
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("override `{o}` is not key=value")))?;
            let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.into()));
            set_path(&mut v, path, value)?;
        }
        serde_json::from_value(v).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        let cfg = |e: Error| match e {
            Error::Config(m) => Error::Config(m),
            other => Error::Config(other.to_string()),
        };
        if self.schema_version != SCHEMA_VERSION {
            return Err(Error::Config(format!(
                "schema_version {} is not supported (expected {SCHEMA_VERSION})",
                self.schema_version
            )));
        }
        self.schedule.validate().map_err(cfg)?;
        self.net.validate().map_err(cfg)?;
        let dist = self.distribution.build().map_err(cfg)?;
        if dist.dim() != self.net.input_dim {
            return Err(Error::Config(format!(
                "distribution dimension {} differs from net.input_dim {}",
                dist.dim(),
                self.net.input_dim
            )));
        }
        if self.grid.steps == 0 || self.calibration.steps == 0 {
            return Err(Error::Config("grid and calibration steps must be positive".into()));
        }
        if self.calibration.chains == 0 || self.calibration.trajectories == 0 {
            return Err(Error::Config("calibration chains and trajectories must be positive".into()));
        }
        if self.eval.chains == 0 || self.eval.reference_samples == 0 {
            return Err(Error::Config("eval chains and reference samples must be positive".into()));
        }
        if let SamplerKind::Plms { max_order } = self.sampler {
            if !(1..=4).contains(&max_order) {
                return Err(Error::Config(format!("plms max_order {max_order} outside 1..=4")));
            }
        }
        if self.train.steps == 0 || self.train.batch_size == 0 {
            return Err(Error::Config("train steps and batch_size must be positive".into()));
        }
        self.quant.validate().map_err(cfg)?;
        self.ptq.validate().map_err(cfg)?;
        self.qlora.validate().map_err(cfg)?;
        self.error.validate().map_err(cfg)?;
        if self.kind == RunKind::Ablate && self.ablate.variants.is_empty() {
            return Err(Error::Config("ablate needs at least one variant".into()));
        }
        if self.model == ModelSource::Quant && self.quant_checkpoint.is_none() {
            return Err(Error::Config("model = quant needs quant_checkpoint".into()));
        }
        if self.kind == RunKind::AnalyzeError && dist.means.len() != 1 {
            return Err(Error::Config("analyze-error needs a single-Gaussian distribution".into()));
        }
        Ok(())
    }
}

fn set_path(v: &mut Value, path: &str, value: Value) -> Result<()> {
    let mut cur = v;
    let keys: Vec<&str> = path.split('.').collect();
    for (i, k) in keys.iter().enumerate() {
        let obj = cur
            .as_object_mut()
            .ok_or_else(|| Error::Config(format!("override path `{path}` crosses a non-object")))?;
        if i + 1 == keys.len() {
            obj.insert((*k).to_string(), value);
            return Ok(());
        }
        cur = obj.entry(*k).or_insert_with(|| Value::Object(Default::default()));
    }
    Err(Error::Config("empty override path".into()))
}
