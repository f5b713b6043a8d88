//! Deterministic orchestration of end-to-end experiments.
//!
//! A run validates its [`RunConfig`] before touching the filesystem, then
//! executes the stages of its kind in order. Each stage draws randomness only
//! from sub-seeds derived from the root seed, and each derivation is listed
//! in the manifest. Outputs land in `output_dir`:
//!
//! | file | content |
//! |---|---|
//! | `manifest.json` | resolved config, build id, stage status, sub-seeds, artifact hashes |
//! | `metrics.csv` | long format `stage,series,index,metric,value` |
//! | `trajectories.csv` | per-chain states (and intermediate points) |
//! | `error_report.json` | error-bound scaling report (`analyze-error`) |
//! | `*.bin`, `*.json`, `*.masks`, `*.quant.json` | checkpoints |
//!
//! Seed fields inside the stage configs (`train.seed`, `ptq.seed`,
//! `qlora.seed`, `error.seed`) are replaced by the derived sub-seeds.

mod config;
mod manifest;

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

pub use config::{
    AblateSpec, AblationVariant, CalibrationSpec, DistributionSpec, EvalSpec, GridSpec, ModelSource, PtqPairing,
    RunConfig, RunKind, SCHEMA_VERSION,
};
pub use manifest::{build_id, sha256_hex, Artifact, Failure, RunManifest, StageRecord, StageStatus, SubSeed};

use crate::diffusion::ToyDistribution;
use crate::error::{Error, Result};
use crate::errorlab::fit_scaling_laws;
use crate::metrics::{energy_distance, trajectory_mse};
use crate::net::checkpoint;
use crate::net::train::{denoising_loss, loss_floor, train_denoiser, TrainConfig};
use crate::net::Parameters;
use crate::rng::{derive_seed, rng_from_seed, standard_normal, SeededRng};
use crate::samplers::{
    csv_header, sample, AnalyticEvaluator, DirectionalEvaluator, NetEvaluator, TimeGrid, Trajectory,
};
use crate::saquant::{
    self, collect_dual_trajectories, init_qlora_model, layer_output_mse, ptq_all_layers, sa_qlora_train,
    CalibrationSet, QuantEvaluator, QuantModel, ReconConfig, SAQLoRAConfig,
};
use crate::tensor::Tensor;

#[derive(Debug, thiserror::Error)]
pub enum RunError {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("stage `{stage}` failed: {source}")]
    Stage {
        stage: String,
        source: Error,
        manifest: Box<RunManifest>,
    },

    #[error("could not write run outputs: {0}")]
    Output(Error),
}

impl RunError {
    pub fn config(e: Error) -> Self {
        match e {
            Error::Config(m) => RunError::Config(m),
            other => RunError::Config(other.to_string()),
        }
    }

    /// 2 configuration, 3 stage failure, 4 divergence.
    pub fn exit_code(&self) -> i32 {
        match self {
            RunError::Config(_) => 2,
            RunError::Stage { source, .. } if source.is_divergence() => 4,
            RunError::Stage { .. } | RunError::Output(_) => 3,
        }
    }
}

struct Metrics {
    out: String,
}

impl Metrics {
    fn new() -> Self {
        Self {
            out: String::from("stage,series,index,metric,value\n"),
        }
    }

    fn push(&mut self, stage: &str, series: &str, index: Option<usize>, metric: &str, value: impl MetricValue) {
        let idx = index.map(|i| i.to_string()).unwrap_or_default();
        self.out.push_str(&format!(
            "{},{},{idx},{},{}\n",
            csv_field(stage),
            csv_field(series),
            csv_field(metric),
            value.render()
        ));
    }
}

trait MetricValue {
    fn render(&self) -> String;
}

impl MetricValue for f64 {
    fn render(&self) -> String {
        format!("{self:?}")
    }
}

impl MetricValue for usize {
    fn render(&self) -> String {
        self.to_string()
    }
}

impl MetricValue for bool {
    fn render(&self) -> String {
        self.to_string()
    }
}

impl MetricValue for &str {
    fn render(&self) -> String {
        csv_field(self)
    }
}

impl MetricValue for String {
    fn render(&self) -> String {
        csv_field(self)
    }
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

struct Runner<'a> {
    cfg: &'a RunConfig,
    out: PathBuf,
    stages: Vec<StageRecord>,
    seeds: Vec<SubSeed>,
    written: Vec<PathBuf>,
    metrics: Metrics,
    trajectories: Option<String>,
    failed_stage: Option<String>,
}

impl<'a> Runner<'a> {
    fn seed(&mut self, stage: &str, index: u64) -> u64 {
        let seed = derive_seed(self.cfg.seed, stage, index);
        log::info!("sub-seed {stage}[{index}] = {seed:#018x} (root {})", self.cfg.seed);
        self.seeds.push(SubSeed {
            stage: stage.into(),
            index,
            seed,
        });
        seed
    }

    fn rng(&mut self, stage: &str, index: u64) -> SeededRng {
        rng_from_seed(self.seed(stage, index))
    }

    fn stage<T>(&mut self, name: &str, f: impl FnOnce(&mut Self) -> Result<T>) -> Result<T> {
        log::info!("stage {name}");
        let start = Instant::now();
        let result = f(self);
        let seconds = start.elapsed().as_secs_f64();
        match &result {
            Ok(_) => self.stages.push(StageRecord {
                name: name.into(),
                status: StageStatus::Ok,
                seconds,
                error: None,
            }),
            Err(e) => {
                self.stages.push(StageRecord {
                    name: name.into(),
                    status: StageStatus::Failed,
                    seconds,
                    error: Some(e.to_string()),
                });
                if self.failed_stage.is_none() {
                    self.failed_stage = Some(name.into());
                }
            }
        }
        result
    }

    fn write(&mut self, name: &str, bytes: &[u8]) -> Result<()> {
        let path = self.out.join(name);
        fs::write(&path, bytes)?;
        self.written.push(path);
        Ok(())
    }

    fn track(&mut self, paths: impl IntoIterator<Item = PathBuf>) {
        self.written.extend(paths);
    }

    fn distribution(&self) -> Result<ToyDistribution> {
        self.cfg.distribution.build()
    }

    fn grid(&self, steps: usize) -> Result<TimeGrid> {
        TimeGrid::build(&self.cfg.schedule, steps, self.cfg.grid.spacing)
    }

    fn add_trajectories(&mut self, traj: &Trajectory, series_offset: usize) {
        let n = self.cfg.eval.trajectory_chains.min(traj.states[0].rows());
        if n == 0 {
            return;
        }
        let out = self
            .trajectories
            .get_or_insert_with(|| csv_header(traj.states[0].cols()));
        head_chains(traj, n).append_csv(out, series_offset);
    }

    /// Loads `base_checkpoint`, or trains and saves `fp.*`.
    fn base(&mut self) -> Result<Parameters> {
        if let Some(path) = self.cfg.base_checkpoint.clone() {
            return self.stage("load-base", |_| {
                let (p, _) = checkpoint::load(&path)?;
                Ok(p)
            });
        }
        self.train_stage()
    }

    fn train_stage(&mut self) -> Result<Parameters> {
        let params = self.stage("train", |r| {
            let dist = r.distribution()?;
            let tc = TrainConfig {
                seed: r.seed("train", 0),
                ..r.cfg.train.clone()
            };
            let outcome = train_denoiser(&r.cfg.net, &dist, &r.cfg.schedule, &tc)?;
            let window = (tc.steps / 50).max(1);
            for (i, v) in outcome.smoothed(window).into_iter().enumerate() {
                r.metrics.push("train", "loss", Some(i * window), "mean_loss", v);
            }
            let mut rng = r.rng("train/eval", 0);
            let held_out = denoising_loss(&outcome.params, &dist, &r.cfg.schedule, 16384, &mut rng)?;
            let mut rng = r.rng("train/floor", 0);
            let floor = loss_floor(&dist, &r.cfg.schedule, 16384, &mut rng)?;
            r.metrics.push("train", "final", None, "held_out_loss", held_out);
            r.metrics.push("train", "final", None, "loss_floor", floor);
            Ok(outcome.params)
        })?;
        self.stage("checkpoint", |r| {
            let (bin, manifest) = checkpoint::save(&params, None, &r.out, "fp")?;
            r.track([bin, manifest]);
            Ok(())
        })?;
        Ok(params)
    }

    fn calibration(&mut self, fp: &Parameters) -> Result<CalibrationSet> {
        self.stage("calibrate", |r| {
            let spec = r.cfg.calibration.clone();
            let grid = r.grid(spec.steps)?;
            let seeds: Vec<u64> = (0..spec.trajectories as u64).map(|k| r.seed("calibration", k)).collect();
            let calib = collect_dual_trajectories(
                &mut NetEvaluator::new(fp),
                &r.cfg.schedule,
                &grid,
                &seeds,
                spec.chains,
                fp.config.input_dim,
            )?;
            calib.check_integrity()?;
            r.metrics.push("calibrate", "set", None, "pairs", calib.len());
            r.metrics.push("calibrate", "set", None, "rows", calib.rows());
            Ok(calib)
        })
    }

    fn init_qlora(&mut self, fp: &Parameters) -> Result<QuantModel> {
        self.stage("init-quant", |r| {
            let seed = r.seed("qlora/init", 0);
            let qm = init_qlora_model(
                fp,
                r.cfg.quant,
                &mut NetEvaluator::new(fp),
                &r.cfg.schedule,
                r.cfg.calibration.steps,
                r.cfg.calibration.chains,
                r.cfg.qlora.rank,
                seed,
            )?;
            r.metrics.push("init-quant", "model", None, "hash", saquant::checkpoint::model_hash(&qm)?);
            Ok(qm)
        })
    }

    fn finetune(&mut self, qm: &mut QuantModel, fp: &Parameters, series: &str, cfg: SAQLoRAConfig) -> Result<()> {
        let stage = format!("finetune/{series}");
        self.stage(&stage, |r| {
            let cfg = SAQLoRAConfig {
                seed: r.seed(&format!("qlora/{series}"), 0),
                ..cfg
            };
            let outcome = sa_qlora_train(qm, &mut NetEvaluator::new(fp), &r.cfg.schedule, &cfg)?;
            for (i, rec) in outcome.records.iter().enumerate() {
                r.metrics.push("finetune", series, Some(i), "l_cos", rec.l_cos);
                r.metrics.push("finetune", series, Some(i), "l_mota", rec.l_mota);
                r.metrics.push("finetune", series, Some(i), "total", rec.total);
            }
            r.metrics.push("finetune", series, None, "hash", saquant::checkpoint::model_hash(qm)?);
            Ok(())
        })
    }

    fn save_quant(&mut self, qm: &QuantModel, stem: &str) -> Result<()> {
        self.stage(&format!("checkpoint/{stem}"), |r| {
            let paths = saquant::checkpoint::save(qm, &r.out, stem)?;
            r.track(paths);
            Ok(())
        })
    }

    /// Shared evaluation inputs: `x_T` batch and data reference set.
    fn eval_inputs(&mut self, index: u64) -> Result<(Tensor, Tensor)> {
        let dist = self.distribution()?;
        let chains = self.cfg.eval.chains;
        let x_t = standard_normal(chains, dist.dim(), &mut self.rng("eval/x_T", index));
        let reference = dist.sample(self.cfg.eval.reference_samples, &mut self.rng("eval/reference", index));
        Ok((x_t, reference))
    }

    /// Runs `model` and the full-precision network from the same `x_T` and
    /// records endpoint MSE and energy distances to the data.
    fn compare(&mut self, model: &mut dyn DirectionalEvaluator, fp: &Parameters, series: &str) -> Result<Trajectory> {
        let stage = format!("evaluate/{series}");
        self.stage(&stage, |r| {
            let (x_t, reference) = r.eval_inputs(0)?;
            let grid = r.grid(r.cfg.grid.steps)?;
            let fp_traj = sample(&mut NetEvaluator::new(fp), &r.cfg.schedule, &grid, &x_t, r.cfg.sampler)?;
            let traj = sample(model, &r.cfg.schedule, &grid, &x_t, r.cfg.sampler)?;
            let mse = trajectory_mse(&fp_traj, &traj)?;
            for (i, v) in mse.per_step.iter().enumerate() {
                r.metrics.push("evaluate", series, Some(i), "trajectory_mse", *v);
            }
            r.metrics.push("evaluate", series, None, "endpoint_mse", mse.endpoint);
            if let Some(step) = traj.diverged_at {
                return Err(Error::SamplerDiverged { step });
            }
            let ed = energy_distance(traj.endpoint(), &reference)?;
            let ed_fp = energy_distance(fp_traj.endpoint(), &reference)?;
            r.metrics.push("evaluate", series, None, "energy_distance", ed);
            r.metrics.push("evaluate", series, None, "fp_energy_distance", ed_fp);
            Ok(traj)
        })
    }

    fn finish(self, start: Instant, failure: Option<Failure>) -> std::result::Result<RunManifest, RunError> {
        let mut written = self.written;
        let metrics = self.out.join("metrics.csv");
        fs::write(&metrics, self.metrics.out.as_bytes()).map_err(|e| RunError::Output(e.into()))?;
        written.push(metrics);
        if let Some(t) = &self.trajectories {
            let path = self.out.join("trajectories.csv");
            fs::write(&path, t.as_bytes()).map_err(|e| RunError::Output(e.into()))?;
            written.push(path);
        }
        let artifacts = hash_artifacts(&self.out, &written).map_err(RunError::Output)?;
        let manifest = RunManifest {
            schema_version: SCHEMA_VERSION,
            kind: self.cfg.kind,
            build: build_id(),
            config: self.cfg.clone(),
            wall_clock_seconds: start.elapsed().as_secs_f64(),
            stages: self.stages,
            sub_seeds: self.seeds,
            artifacts,
            failure,
        };
        manifest.write_atomic(&self.out).map_err(RunError::Output)?;
        Ok(manifest)
    }
}

fn hash_artifacts(dir: &Path, paths: &[PathBuf]) -> Result<Vec<Artifact>> {
    let mut out = Vec::new();
    for p in paths {
        let bytes = fs::read(p)?;
        let rel = p.strip_prefix(dir).unwrap_or(p).to_string_lossy().into_owned();
        if out.iter().any(|a: &Artifact| a.path == rel) {
            continue;
        }
        out.push(Artifact {
            path: rel,
            sha256: sha256_hex(&bytes),
            bytes: bytes.len() as u64,
        });
    }
    out.sort_by(|a, b| a.path.cmp(&b.path));
    Ok(out)
}

/// The first `n` chains of a trajectory.
pub fn head_chains(traj: &Trajectory, n: usize) -> Trajectory {
    let cut = |t: &Tensor| {
        let n = n.min(t.rows());
        Tensor::matrix(n, t.cols(), t.data()[..n * t.cols()].to_vec())
    };
    Trajectory {
        kind: traj.kind,
        times: traj.times.clone(),
        states: traj.states.iter().map(cut).collect(),
        evals: Vec::new(),
        intermediates: traj
            .intermediates
            .iter()
            .map(|i| {
                i.as_ref().map(|i| crate::samplers::Intermediate {
                    s: i.s,
                    u: cut(&i.u),
                    eps: cut(&i.eps),
                })
            })
            .collect(),
        diverged_at: traj.diverged_at,
    }
}

/// Executes `config` and writes its outputs. Configuration errors are
/// reported before anything is written; a failing stage still produces a
/// manifest naming the failure point.
pub fn run(config: &RunConfig) -> std::result::Result<RunManifest, RunError> {
    config.validate().map_err(RunError::config)?;
    let start = Instant::now();
    fs::create_dir_all(&config.output_dir).map_err(|e| RunError::Output(e.into()))?;
    let mut r = Runner {
        cfg: config,
        out: config.output_dir.clone(),
        stages: Vec::new(),
        seeds: Vec::new(),
        written: Vec::new(),
        metrics: Metrics::new(),
        trajectories: None,
        failed_stage: None,
    };
    match execute(&mut r) {
        Ok(()) => r.finish(start, None),
        Err(source) => {
            let stage = r.failed_stage.clone().unwrap_or_else(|| "run".into());
            let failure = Failure {
                stage: stage.clone(),
                error: source.to_string(),
                exit_code: if source.is_divergence() { 4 } else { 3 },
            };
            let manifest = r.finish(start, Some(failure))?;
            Err(RunError::Stage {
                stage,
                source,
                manifest: Box::new(manifest),
            })
        }
    }
}

fn execute(r: &mut Runner) -> Result<()> {
    match r.cfg.kind {
        RunKind::Train => {
            r.train_stage()?;
        }
        RunKind::CalibratePtq => {
            let fp = r.base()?;
            let calib = r.calibration(&fp)?;
            let mut qm = r.stage("quantize", |r| {
                let mut qm = QuantModel::new(fp.clone(), r.cfg.quant)?;
                let pts: Vec<(&Tensor, &[f64])> = calib
                    .pairs
                    .iter()
                    .map(|p| (&p.first.x, std::slice::from_ref(&p.first.t)))
                    .collect();
                qm.calibrate_activations(&pts)?;
                Ok(qm)
            })?;
            r.stage("reconstruct", |r| {
                let cfg = ReconConfig {
                    seed: r.seed("ptq", 0),
                    ..r.cfg.ptq.clone()
                };
                let set = match r.cfg.calibration.pairing {
                    PtqPairing::MixedOrder => calib.clone(),
                    PtqPairing::SamePoint => calib.same_point(),
                };
                let same = calib.same_point();
                let before: Vec<f64> = (0..qm.depth())
                    .map(|l| layer_output_mse(&qm, l, &same))
                    .collect::<Result<_>>()?;
                let reports = ptq_all_layers(&mut qm, &set, &cfg)?;
                for (rep, b) in reports.iter().zip(before) {
                    let series = Parameters::layer_name(rep.layer);
                    r.metrics.push("reconstruct", &series, None, "initial_loss", rep.initial_loss);
                    r.metrics.push("reconstruct", &series, None, "final_loss", rep.final_loss);
                    r.metrics.push("reconstruct", &series, None, "accepted", rep.accepted);
                    r.metrics.push("reconstruct", &series, None, "flipped", rep.flipped);
                    r.metrics.push("reconstruct", &series, None, "output_mse_before", b);
                    let after = layer_output_mse(&qm, rep.layer, &same)?;
                    r.metrics.push("reconstruct", &series, None, "output_mse_after", after);
                }
                r.metrics.push("reconstruct", "model", None, "hash", saquant::checkpoint::model_hash(&qm)?);
                Ok(())
            })?;
            r.save_quant(&qm, "quant")?;
            r.compare(&mut QuantEvaluator(&qm), &fp, "quant")?;
        }
        RunKind::FinetuneQlora => {
            let fp = r.base()?;
            let mut qm = r.init_qlora(&fp)?;
            let cfg = r.cfg.qlora.clone();
            r.finetune(&mut qm, &fp, "qlora", cfg)?;
            r.save_quant(&qm, "quant")?;
            r.compare(&mut QuantEvaluator(&qm), &fp, "quant")?;
        }
        RunKind::Sample => {
            let dist = r.distribution()?;
            let (fp, qm) = load_model(r)?;
            r.stage("sample", |r| {
                let (x_t, reference) = r.eval_inputs(0)?;
                let grid = r.grid(r.cfg.grid.steps)?;
                let traj = match (&qm, &fp) {
                    (Some(q), _) => sample(&mut QuantEvaluator(q), &r.cfg.schedule, &grid, &x_t, r.cfg.sampler)?,
                    (None, Some(p)) => sample(&mut NetEvaluator::new(p), &r.cfg.schedule, &grid, &x_t, r.cfg.sampler)?,
                    (None, None) => sample(
                        &mut AnalyticEvaluator::new(dist.clone(), r.cfg.schedule),
                        &r.cfg.schedule,
                        &grid,
                        &x_t,
                        r.cfg.sampler,
                    )?,
                };
                r.add_trajectories(&traj, 0);
                if let Some(step) = traj.diverged_at {
                    return Err(Error::SamplerDiverged { step });
                }
                let ed = energy_distance(traj.endpoint(), &reference)?;
                r.metrics.push("sample", &r.cfg.sampler.label(), None, "energy_distance", ed);
                Ok(())
            })?;
        }
        RunKind::AnalyzeError => {
            r.stage("analyze-error", |r| {
                let dist = r.distribution()?;
                let mut cfg = r.cfg.error.clone();
                cfg.seed = r.seed("error-lab", 0);
                let report = fit_scaling_laws(&r.cfg.schedule, &dist, &cfg)?;
                for p in &report.delta_sweep {
                    let series = format!("{}/delta={:?}", p.sampler, p.delta);
                    r.metrics.push("delta-sweep", &series, Some(p.steps), "endpoint_deviation", p.endpoint_deviation);
                }
                for p in &report.h_sweep {
                    let series = format!("{}/delta={:?}", p.sampler, p.delta);
                    r.metrics.push("h-sweep", &series, Some(p.steps), "quant_local", p.quant_local);
                    if let Some(d) = p.disc_local {
                        r.metrics.push("h-sweep", &series, Some(p.steps), "disc_local", d);
                    }
                }
                for f in report.delta_slopes.iter().chain(&report.h_slopes) {
                    let series = match f.delta {
                        Some(d) => format!("{}/delta={d:?}", f.sampler),
                        None => f.sampler.clone(),
                    };
                    let stage = if f.delta.is_some() { "h-slope" } else { "delta-slope" };
                    r.metrics.push(stage, &series, None, "slope", f.fit.slope);
                    r.metrics.push(stage, &series, None, "ci_low", f.fit.ci_low);
                    r.metrics.push(stage, &series, None, "ci_high", f.fit.ci_high);
                }
                for c in &report.bound_constants {
                    r.metrics.push("bound-constant", &c.sampler, None, "c", c.c);
                    r.metrics.push("bound-constant", &c.sampler, None, "stable", c.stable);
                }
                r.write("error_report.json", report.to_json()?.as_bytes())?;
                r.write("error_steps.csv", report.steps_csv().as_bytes())?;
                Ok(())
            })?;
        }
        RunKind::Evaluate => {
            let (fp, qm) = load_model(r)?;
            let analytic = fp.is_none();
            let fp = match fp {
                Some(p) => p,
                None => r.base()?,
            };
            let dist = r.distribution()?;
            let mut model: Box<dyn DirectionalEvaluator + '_> = match &qm {
                Some(q) => Box::new(QuantEvaluator(q)),
                None if analytic => Box::new(AnalyticEvaluator::new(dist, r.cfg.schedule)),
                None => Box::new(NetEvaluator::new(&fp)),
            };
            let traj = r.compare(model.as_mut(), &fp, "model")?;
            r.add_trajectories(&traj, 0);
            r.stage("self-consistency", |r| {
                let (x_b, _) = r.eval_inputs(1)?;
                let grid = r.grid(r.cfg.grid.steps)?;
                let other = sample(model.as_mut(), &r.cfg.schedule, &grid, &x_b, r.cfg.sampler)?;
                let self_distance = energy_distance(traj.endpoint(), other.endpoint())?;
                let dist = r.distribution()?;
                let n = r.cfg.eval.chains;
                let mut floors = Vec::new();
                for k in 0..r.cfg.eval.noise_floor_pairs as u64 {
                    let a = dist.sample(n, &mut r.rng("eval/floor-a", k));
                    let b = dist.sample(n, &mut r.rng("eval/floor-b", k));
                    floors.push(energy_distance(&a, &b)?);
                }
                let floor = noise_floor(&floors);
                r.metrics.push("self-consistency", "model", None, "self_distance", self_distance);
                r.metrics.push("self-consistency", "data", None, "noise_floor", floor);
                Ok(())
            })?;
        }
        RunKind::Ablate => {
            let fp = r.base()?;
            let init = r.init_qlora(&fp)?;
            for v in r.cfg.ablate.variants.clone() {
                let mut qm = init.clone();
                let cfg = SAQLoRAConfig {
                    objective: v.objective,
                    w_cos: v.w_cos,
                    w_mota: v.w_mota,
                    direction: v.direction,
                    epochs: v.epochs.unwrap_or(r.cfg.qlora.epochs),
                    ..r.cfg.qlora.clone()
                };
                r.finetune(&mut qm, &fp, &v.name, cfg)?;
                r.save_quant(&qm, &format!("ablate-{}", v.name))?;
                r.compare(&mut QuantEvaluator(&qm), &fp, &v.name)?;
            }
        }
    }
    Ok(())
}

/// `mean + 3 sd` of independent same-distribution energy distances; with
/// fewer than two values, twice the single value.
fn noise_floor(values: &[f64]) -> f64 {
    match values.len() {
        0 => 0.0,
        1 => 2.0 * values[0],
        n => {
            let mean = values.iter().sum::<f64>() / n as f64;
            let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
            mean + 3.0 * var.sqrt()
        }
    }
}

/// Model for `sample`/`evaluate`: `(full precision, quantized)`; both `None`
/// selects the analytic predictor.
fn load_model(r: &mut Runner) -> Result<(Option<Parameters>, Option<QuantModel>)> {
    match r.cfg.model {
        ModelSource::Analytic => Ok((None, None)),
        ModelSource::Net => Ok((Some(r.base()?), None)),
        ModelSource::Quant => {
            let path = r.cfg.quant_checkpoint.clone().expect("validated");
            let qm = r.stage("load-quant", |_| saquant::checkpoint::load(&path))?;
            let fp = qm.base.clone();
            Ok((Some(fp), Some(qm)))
        }
    }
}

/// Reads a config file (or starts from defaults) and applies CLI-style
/// overrides.
pub fn resolve_config(path: Option<&Path>, overrides: &[String]) -> std::result::Result<RunConfig, RunError> {
    let base = match path {
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|e| RunError::Config(format!("{}: {e}", p.display())))?;
            RunConfig::from_json(&text).map_err(RunError::config)?
        }
        None => RunConfig::default(),
    };
    let value = serde_json::to_value(&base).map_err(|e| RunError::Config(e.to_string()))?;
    RunConfig::with_overrides(value, overrides).map_err(RunError::config)
}
