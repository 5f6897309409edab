//! End-to-end experiment plumbing shared by the command-line tool and the
//! acceptance suite: benchmark simulation, emulator fitting, pretraining,
//! training and evaluation driven by one [`ExperimentConfig`].

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::autodiff::ParamStore;
use crate::emulator::{
    error_report, fit_emulator, fluorescence_signal, simulate_training_set, EmulatorInputs, EmulatorModel, ErrorReport,
    FitStats,
};
use crate::forward::{make_scene, AtmosModelParams, SceneCube, SceneRanges, SceneSpec};
use crate::metrics::{BinConfig, EvalReport};
use crate::sfmnn::{
    finit_dataset, infer_scene, train_finit, train_with, AncillaryMode, ArchConfig, EpochLoss, FeatureStats,
    FinitReport, FinitSchedule, LossWeights, SceneMaps, Schedule, SfmnnModel, TrainReport,
};
use crate::spectral::SensorModel;
use crate::{Error, Result};

/// Band layout of the simulated instrument.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SensorSpec {
    pub first_center: f64,
    pub ssi: f64,
    pub n_bands: usize,
    pub fwhm: f64,
    pub highres_step: f64,
    pub margin: f64,
}

impl Default for SensorSpec {
    fn default() -> Self {
        Self {
            first_center: 700.35,
            ssi: 2.55,
            n_bands: 40,
            fwhm: 3.55,
            highres_step: 0.05,
            margin: 10.0,
        }
    }
}

impl SensorSpec {
    pub fn build(&self, across_track_width: usize) -> Result<SensorModel> {
        SensorModel::new(
            self.first_center,
            self.ssi,
            self.n_bands,
            self.fwhm,
            across_track_width,
            self.highres_step,
            self.margin,
        )
    }
}

/// Synthetic benchmark layout.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ScenesConfig {
    pub n_train: usize,
    pub n_held_out: usize,
    pub size: usize,
    pub patch_size: usize,
    /// Distinct acquisition identifiers; scene i uses i mod n_acquisitions.
    pub n_acquisitions: usize,
    pub seed: u64,
}

impl ScenesConfig {
    pub fn train_seed(&self, i: usize) -> u64 {
        self.seed + i as u64
    }

    pub fn held_out_seed(&self, j: usize) -> u64 {
        self.seed + 1000 + j as u64
    }

    /// Acquisition identifier of the i-th scene of either split.
    pub fn acquisition(&self, i: usize) -> u32 {
        (i % self.n_acquisitions) as u32
    }
}

impl Default for ScenesConfig {
    fn default() -> Self {
        Self {
            n_train: 4,
            n_held_out: 1,
            size: 120,
            patch_size: 30,
            n_acquisitions: 4,
            seed: 100,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EmulatorConfig {
    pub degree: usize,
    pub n_samples: usize,
    pub n_holdout: usize,
    pub seed: u64,
    /// Largest accepted held-out mean relative error.
    pub max_mean_rel: f64,
}

impl Default for EmulatorConfig {
    fn default() -> Self {
        Self {
            degree: 4,
            n_samples: 10_000,
            n_holdout: 2_000,
            seed: 1,
            max_mean_rel: 0.005,
        }
    }
}

/// Simulated scenes for the supervised initial predictor. Small patches give
/// many independent atmospheres per scene.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PretrainConfig {
    pub n_scenes: usize,
    pub size: usize,
    pub patch_size: usize,
    pub seed: u64,
    pub schedule: FinitSchedule,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            n_scenes: 4,
            size: 120,
            patch_size: 5,
            seed: 300,
            schedule: FinitSchedule::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub sensor: SensorSpec,
    pub atmosphere: AtmosModelParams,
    pub ranges: SceneRanges,
    pub scenes: ScenesConfig,
    pub emulator: EmulatorConfig,
    pub pretrain: PretrainConfig,
    /// `desk` or `paper`.
    pub preset: String,
    pub ancillary_mode: AncillaryMode,
    pub weights: LossWeights,
    pub schedule: Schedule,
    pub model_seed: u64,
    pub bins: BinConfig,
    pub out_dir: String,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            sensor: SensorSpec::default(),
            atmosphere: AtmosModelParams::default(),
            ranges: SceneRanges::default(),
            scenes: ScenesConfig::default(),
            emulator: EmulatorConfig::default(),
            pretrain: PretrainConfig::default(),
            preset: "desk".into(),
            ancillary_mode: AncillaryMode::Regularized,
            weights: LossWeights::default(),
            schedule: Schedule::default(),
            model_seed: 1,
            bins: BinConfig::default(),
            out_dir: "o2sif-run".into(),
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        self.ranges.validate()?;
        self.atmosphere.validate()?;
        self.weights.validate()?;
        ArchConfig::preset(&self.preset)?.validate()?;
        self.sensor.build(self.scenes.size)?;
        let s = &self.scenes;
        if s.patch_size == 0 || s.size % s.patch_size != 0 {
            return Err(Error::InvalidArgument(format!(
                "scene size {} is not a multiple of patch size {}",
                s.size, s.patch_size
            )));
        }
        if s.n_train == 0 || s.n_acquisitions == 0 {
            return Err(Error::InvalidArgument("need at least one training scene and acquisition".into()));
        }
        let p = &self.pretrain;
        if p.patch_size == 0 || p.size % p.patch_size != 0 || p.n_scenes == 0 {
            return Err(Error::InvalidArgument("pretraining scenes need a positive patch size dividing the size".into()));
        }
        if self.emulator.degree == 0 || !(self.emulator.max_mean_rel > 0.0) {
            return Err(Error::InvalidArgument("emulator degree and threshold must be positive".into()));
        }
        Ok(())
    }

    /// Derives every seed from one value: scenes from `seed`, emulator
    /// samples from `seed + 1`, pretraining scenes from `seed + 2000`, and the
    /// network initialization and training streams from `seed`.
    pub fn reseed(&mut self, seed: u64) {
        self.scenes.seed = seed;
        self.emulator.seed = seed + 1;
        self.pretrain.seed = seed + 2000;
        self.pretrain.schedule.seed = seed;
        self.model_seed = seed;
        self.schedule.seed = seed;
    }

    pub fn arch(&self) -> Result<ArchConfig> {
        ArchConfig::preset(&self.preset)
    }

    pub fn sensor_model(&self) -> Result<SensorModel> {
        self.sensor.build(self.scenes.size)
    }

    pub fn scene(&self, seed: u64, acquisition: u32, size: usize, patch_size: usize) -> Result<SceneCube> {
        let spec = SceneSpec {
            height: size,
            width: size,
            patch_size,
            seed,
            acquisition,
        };
        make_scene(&spec, &self.ranges, &self.atmosphere, &self.sensor.build(size)?)
    }
}

/// Training and held-out scenes of a benchmark.
#[derive(Debug, Clone)]
pub struct Benchmark {
    pub train: Vec<SceneCube>,
    pub held_out: Vec<SceneCube>,
}

/// Both splits cycle through the acquisitions from 0.
pub fn simulate_benchmark(cfg: &ExperimentConfig) -> Result<Benchmark> {
    let s = &cfg.scenes;
    let train = (0..s.n_train)
        .map(|i| cfg.scene(s.train_seed(i), s.acquisition(i), s.size, s.patch_size))
        .collect::<Result<Vec<_>>>()?;
    let held_out = (0..s.n_held_out)
        .map(|j| cfg.scene(s.held_out_seed(j), s.acquisition(j), s.size, s.patch_size))
        .collect::<Result<Vec<_>>>()?;
    Ok(Benchmark { train, held_out })
}

/// Fitted emulator with its training statistics and held-out error report.
#[derive(Debug, Clone)]
pub struct EmulatorFit {
    pub model: EmulatorModel,
    pub stats: FitStats,
    pub report: ErrorReport,
}

impl EmulatorFit {
    pub fn passes(&self, max_mean_rel: f64) -> bool {
        self.report.mean_rel <= max_mean_rel
    }
}

pub fn fit_experiment_emulator(cfg: &ExperimentConfig) -> Result<EmulatorFit> {
    let sensor = cfg.sensor_model()?;
    let inputs = EmulatorInputs::from_ranges(&cfg.ranges);
    let e = &cfg.emulator;
    let train = simulate_training_set(&sensor, &cfg.atmosphere, &cfg.ranges, &inputs, e.n_samples, e.seed)?;
    let held = simulate_training_set(&sensor, &cfg.atmosphere, &cfg.ranges, &inputs, e.n_holdout, e.seed + 1)?;
    let (model, stats) = fit_emulator(&train, &inputs, e.degree, &sensor.out_band_centers())?;
    let signal = fluorescence_signal(&sensor, &cfg.atmosphere, &cfg.ranges, &inputs)?;
    let report = error_report(&model, &held, &signal)?;
    Ok(EmulatorFit { model, stats, report })
}

/// Untrained model with feature statistics of the training scenes.
pub fn build_model(cfg: &ExperimentConfig, emulator: Arc<EmulatorModel>, train: &[SceneCube]) -> Result<SfmnnModel> {
    let stats = FeatureStats::from_scenes(train, cfg.ancillary_mode)?;
    let sensor = cfg.sensor_model()?;
    SfmnnModel::new(
        cfg.arch()?,
        cfg.ancillary_mode,
        cfg.weights.clone(),
        emulator,
        stats,
        cfg.scenes.n_acquisitions,
        sensor.out_band_indices.clone(),
        cfg.model_seed,
    )
}

/// Simulates the pretraining scenes and fits the initial predictor in place.
pub fn pretrain(cfg: &ExperimentConfig, model: &mut SfmnnModel) -> Result<FinitReport> {
    let p = &cfg.pretrain;
    let scenes = (0..p.n_scenes)
        .map(|i| cfg.scene(p.seed + i as u64, cfg.scenes.acquisition(i), p.size, p.patch_size))
        .collect::<Result<Vec<_>>>()?;
    let (x, y) = finit_dataset(&scenes, model.mode, &model.stats);
    train_finit(&mut model.finit, &x, &y, &p.schedule)
}

pub fn train_model<F: FnMut(&EpochLoss)>(
    cfg: &ExperimentConfig,
    model: &mut SfmnnModel,
    train: &[SceneCube],
    on_epoch: F,
) -> Result<TrainReport> {
    train_with(model, train, &cfg.schedule, on_epoch)
}

/// Metrics of the refined and the initial fluorescence on one scene.
#[derive(Debug, Clone)]
pub struct SceneEvaluation {
    pub maps: SceneMaps,
    pub full: EvalReport,
    pub initial: EvalReport,
    pub mean_rel_reconstruction: f64,
    /// Mean |f740| over pixels with NDVI at or below the threshold.
    pub bare_mean_abs_f: f64,
}

pub fn evaluate_scene(model: &SfmnnModel, scene: &SceneCube, bins: &BinConfig, label: &str) -> Result<SceneEvaluation> {
    let maps = infer_scene(model, scene)?;
    let full = EvalReport::compute(label, &maps.comparison(scene, false)?, bins);
    let initial = EvalReport::compute(&format!("{label}_f_init"), &maps.comparison(scene, true)?, bins);
    Ok(SceneEvaluation {
        mean_rel_reconstruction: maps.mean_rel_error(),
        bare_mean_abs_f: maps.bare_mean_abs_f(scene, model.weights.tau),
        maps,
        full,
        initial,
    })
}

/// Mean relative reconstruction error over several scenes.
pub fn mean_reconstruction(model: &SfmnnModel, scenes: &[SceneCube]) -> Result<f64> {
    if scenes.is_empty() {
        return Err(Error::Empty("scenes"));
    }
    let total = scenes
        .iter()
        .map(|s| infer_scene(model, s).map(|m| m.mean_rel_error()))
        .sum::<Result<f64>>()?;
    Ok(total / scenes.len() as f64)
}

/// Everything produced by one full training run.
#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub model: SfmnnModel,
    pub finit: FinitReport,
    pub training: TrainReport,
    pub train_reconstruction: f64,
    pub held_out: Vec<SceneEvaluation>,
}

/// Pretrains, trains and evaluates one model on a simulated benchmark.
pub fn run_experiment<F: FnMut(&EpochLoss)>(
    cfg: &ExperimentConfig,
    emulator: Arc<EmulatorModel>,
    bench: &Benchmark,
    on_epoch: F,
) -> Result<RunOutcome> {
    cfg.validate()?;
    let mut model = build_model(cfg, emulator, &bench.train)?;
    let finit = pretrain(cfg, &mut model)?;
    let training = train_model(cfg, &mut model, &bench.train, on_epoch)?;
    let train_reconstruction = mean_reconstruction(&model, &bench.train)?;
    let held_out = bench
        .held_out
        .iter()
        .enumerate()
        .map(|(i, s)| evaluate_scene(&model, s, &cfg.bins, &format!("held_out_{i}")))
        .collect::<Result<Vec<_>>>()?;
    Ok(RunOutcome {
        model,
        finit,
        training,
        train_reconstruction,
        held_out,
    })
}

/// Trainable and frozen parameters of a model; pair with its manifest.
pub fn checkpoint(model: &SfmnnModel) -> ParamStore {
    model.all_params()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> ExperimentConfig {
        let mut cfg = ExperimentConfig::default();
        cfg.scenes = ScenesConfig {
            n_train: 2,
            n_held_out: 1,
            size: 20,
            patch_size: 10,
            n_acquisitions: 2,
            seed: 5,
        };
        cfg.pretrain = PretrainConfig {
            n_scenes: 1,
            size: 20,
            patch_size: 5,
            seed: 9,
            schedule: FinitSchedule {
                epochs: 2,
                ..Default::default()
            },
        };
        cfg
    }

    #[test]
    fn benchmark_layout() {
        let cfg = small();
        let b = simulate_benchmark(&cfg).unwrap();
        assert_eq!(b.train.len(), 2);
        assert_eq!(b.held_out.len(), 1);
        assert_eq!(b.train[1].u, 1);
        assert_eq!(b.held_out[0].u, 0);
        assert_ne!(b.train[0].radiance, b.held_out[0].radiance);
        assert_eq!(simulate_benchmark(&cfg).unwrap().train[0], b.train[0]);
    }

    #[test]
    fn config_validation() {
        let mut cfg = small();
        assert!(cfg.validate().is_ok());
        cfg.preset = "huge".into();
        assert!(cfg.validate().is_err());
        let mut cfg = small();
        cfg.scenes.patch_size = 7;
        assert!(cfg.validate().is_err());
        let mut cfg = small();
        cfg.weights.gamma_n = -1.0;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn reseed_changes_scenes_only_through_seed() {
        let mut a = small();
        a.reseed(42);
        let mut b = small();
        b.reseed(42);
        assert_eq!(a, b);
        assert_eq!(a.scenes.seed, 42);
        assert_ne!(a.pretrain.seed, a.scenes.seed);
    }

    #[test]
    fn config_toml_round_trip() {
        let cfg = ExperimentConfig::default();
        let text = toml::to_string(&cfg).unwrap();
        let back: ExperimentConfig = toml::from_str(&text).unwrap();
        assert_eq!(back, cfg);
        let partial: ExperimentConfig = toml::from_str("preset = \"paper\"\n[scenes]\nn_train = 2\n").unwrap();
        assert_eq!(partial.preset, "paper");
        assert_eq!(partial.scenes.n_train, 2);
        assert_eq!(partial.scenes.size, 120);
    }
}
