//! Python module `o2sif`: scene simulation, emulator fitting, model training,
//! inference and validation metrics.

use std::collections::HashMap;
use std::path::PathBuf;
use std::sync::Arc;

use o2sif::emulator::{EmulatorModel, ErrorReport};
use o2sif::forward::SceneCube;
use o2sif::metrics::{self, ComparisonSet, EvalReport};
use o2sif::pipeline;
use o2sif::sfmnn::{EpochLoss, SfmnnModel};
use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;

fn err(e: o2sif::Error) -> PyErr {
    match e {
        o2sif::Error::InvalidArgument(_) | o2sif::Error::Shape { .. } | o2sif::Error::MissingAncillary => {
            PyValueError::new_err(e.to_string())
        }
        other => PyRuntimeError::new_err(other.to_string()),
    }
}

/// Experiment configuration; construct from TOML text or use the defaults.
#[pyclass(name = "ExperimentConfig", module = "o2sif")]
pub struct PyConfig {
    inner: pipeline::ExperimentConfig,
}

#[pymethods]
impl PyConfig {
    #[new]
    fn new() -> Self {
        Self {
            inner: pipeline::ExperimentConfig::default(),
        }
    }

    #[staticmethod]
    fn from_toml(text: &str) -> PyResult<Self> {
        let inner: pipeline::ExperimentConfig = toml::from_str(text).map_err(|e| PyValueError::new_err(e.to_string()))?;
        inner.validate().map_err(err)?;
        Ok(Self { inner })
    }

    fn to_toml(&self) -> PyResult<String> {
        toml::to_string(&self.inner).map_err(|e| PyValueError::new_err(e.to_string()))
    }

    fn reseed(&mut self, seed: u64) {
        self.inner.reseed(seed);
    }

    #[getter]
    fn epochs(&self) -> usize {
        self.inner.schedule.epochs
    }

    #[setter]
    fn set_epochs(&mut self, epochs: usize) {
        self.inner.schedule.epochs = epochs;
    }

    #[getter]
    fn gamma_c(&self) -> f64 {
        self.inner.weights.gamma_c
    }

    #[setter]
    fn set_gamma_c(&mut self, v: f64) {
        self.inner.weights.gamma_c = v;
    }

    #[getter]
    fn ancillary_mode(&self) -> String {
        match self.inner.ancillary_mode {
            o2sif::sfmnn::AncillaryMode::Regularized => "regularized".into(),
            o2sif::sfmnn::AncillaryMode::AsInput => "as-input".into(),
        }
    }

    #[setter]
    fn set_ancillary_mode(&mut self, mode: &str) -> PyResult<()> {
        self.inner.ancillary_mode = mode.parse().map_err(err)?;
        Ok(())
    }
}

/// Simulated scene with its ground truth.
#[pyclass(name = "Scene", module = "o2sif")]
pub struct PyScene {
    inner: Arc<SceneCube>,
}

#[pymethods]
impl PyScene {
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Self {
            inner: Arc::new(SceneCube::load(&path).map_err(err)?),
        })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        self.inner.save(&path).map_err(err)
    }

    #[getter]
    fn height(&self) -> usize {
        self.inner.height
    }

    #[getter]
    fn width(&self) -> usize {
        self.inner.width
    }

    #[getter]
    fn patch_size(&self) -> usize {
        self.inner.patch_size
    }

    #[getter]
    fn acquisition(&self) -> u32 {
        self.inner.u
    }

    #[getter]
    fn band_centers(&self) -> Vec<f64> {
        self.inner.band_centers.clone()
    }

    /// Band radiances of one pixel (row-major index).
    fn pixel_radiance(&self, pixel: usize) -> PyResult<Vec<f32>> {
        if pixel >= self.inner.n_pixels() {
            return Err(PyValueError::new_err(format!("pixel {pixel} out of range")));
        }
        Ok(self.inner.pixel_radiance(pixel).to_vec())
    }

    fn truth_f740(&self) -> Vec<f64> {
        self.inner.truth_f740()
    }
}

fn scene_list(scenes: Vec<SceneCube>) -> Vec<PyScene> {
    scenes.into_iter().map(|s| PyScene { inner: Arc::new(s) }).collect()
}

fn collect_scenes(scenes: &[PyRef<'_, PyScene>]) -> Vec<SceneCube> {
    scenes.iter().map(|s| (*s.inner).clone()).collect()
}

/// Simulates the training and held-out scenes of a configuration.
#[pyfunction]
fn simulate_benchmark(config: &PyConfig) -> PyResult<(Vec<PyScene>, Vec<PyScene>)> {
    let b = pipeline::simulate_benchmark(&config.inner).map_err(err)?;
    Ok((scene_list(b.train), scene_list(b.held_out)))
}

fn report_dict(r: &ErrorReport) -> HashMap<&'static str, f64> {
    HashMap::from([
        ("n_samples", r.n_samples as f64),
        ("mean_rel", r.mean_rel),
        ("p95_rel", r.p95_rel),
        ("mean_abs", r.mean_abs),
        ("fluorescence_signal", r.fluorescence_signal),
        ("signal_ratio", r.signal_ratio),
    ])
}

/// Polynomial emulator of the output-window band radiances.
#[pyclass(name = "Emulator", module = "o2sif")]
pub struct PyEmulator {
    inner: Arc<EmulatorModel>,
    report: Option<HashMap<&'static str, f64>>,
}

#[pymethods]
impl PyEmulator {
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Self {
            inner: Arc::new(EmulatorModel::load(&path).map_err(err)?),
            report: None,
        })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        self.inner.save(&path).map_err(err)
    }

    /// Band radiances for one physical input vector.
    fn emulate(&self, inputs: Vec<f64>) -> PyResult<Vec<f64>> {
        if inputs.len() != self.inner.input_names.len() {
            return Err(PyValueError::new_err(format!(
                "expected {} inputs, got {}",
                self.inner.input_names.len(),
                inputs.len()
            )));
        }
        Ok(self.inner.emulate(&inputs))
    }

    #[getter]
    fn input_names(&self) -> Vec<String> {
        self.inner.input_names.clone()
    }

    #[getter]
    fn n_monomials(&self) -> usize {
        self.inner.basis.len()
    }

    #[getter]
    fn band_centers(&self) -> Vec<f64> {
        self.inner.out_band_centers.clone()
    }

    /// Held-out error statistics of the fit, when fitted in this session.
    #[getter]
    fn report(&self) -> Option<HashMap<&'static str, f64>> {
        self.report.clone()
    }

    fn summary(&self) -> String {
        self.inner.summary(None)
    }
}

/// Fits the emulator on freshly simulated samples.
#[pyfunction]
fn fit_emulator(config: &PyConfig) -> PyResult<PyEmulator> {
    let fit = pipeline::fit_experiment_emulator(&config.inner).map_err(err)?;
    Ok(PyEmulator {
        report: Some(report_dict(&fit.report)),
        inner: Arc::new(fit.model),
    })
}

fn loss_dict(l: &EpochLoss) -> HashMap<&'static str, f64> {
    let v = &l.values;
    HashMap::from([
        ("epoch", l.epoch as f64),
        ("res", v.res),
        ("res_f", v.res_f),
        ("m", v.m),
        ("df", v.df),
        ("n", v.n),
        ("c", v.c),
        ("total", v.total),
        ("rel_recon", v.rel_recon),
    ])
}

fn eval_dict(r: &EvalReport) -> HashMap<&'static str, f64> {
    HashMap::from([
        ("n", r.n as f64),
        ("r2", r.r2),
        ("mad", r.mad),
        ("r2_bias_corrected", r.r2_bc),
        ("mad_bias_corrected", r.mad_bc),
        ("r2_reflectance_constrained", r.r2_a),
        ("mae_b_signed", r.mae_b_signed),
        ("mae_b_abs", r.mae_b_abs),
    ])
}

/// Retrieval network with its frozen initial predictor.
#[pyclass(name = "Model", module = "o2sif")]
pub struct PyModel {
    inner: SfmnnModel,
}

#[pymethods]
impl PyModel {
    #[new]
    fn new(config: &PyConfig, emulator: &PyEmulator, train: Vec<PyRef<'_, PyScene>>) -> PyResult<Self> {
        let scenes = collect_scenes(&train);
        Ok(Self {
            inner: pipeline::build_model(&config.inner, emulator.inner.clone(), &scenes).map_err(err)?,
        })
    }

    /// Fits the initial predictor; returns its RMSE statistics.
    fn pretrain(&mut self, config: &PyConfig) -> PyResult<HashMap<&'static str, f64>> {
        let r = pipeline::pretrain(&config.inner, &mut self.inner).map_err(err)?;
        Ok(HashMap::from([
            ("train_rmse", r.train_rmse),
            ("validation_rmse", r.validation_rmse),
            ("label_std", r.label_std),
        ]))
    }

    /// Trains on the given scenes; returns the per-epoch loss terms.
    fn train(&mut self, config: &PyConfig, scenes: Vec<PyRef<'_, PyScene>>) -> PyResult<Vec<HashMap<&'static str, f64>>> {
        let scenes = collect_scenes(&scenes);
        let report = pipeline::train_model(&config.inner, &mut self.inner, &scenes, |_| {}).map_err(err)?;
        Ok(report.history.iter().map(loss_dict).collect())
    }

    /// Per-pixel retrieval layers keyed by name.
    fn infer(&self, scene: &PyScene) -> PyResult<HashMap<&'static str, Vec<f64>>> {
        let maps = o2sif::sfmnn::infer_scene(&self.inner, &scene.inner).map_err(err)?;
        Ok(maps.layers().into_iter().map(|(k, v)| (k, v.to_vec())).collect())
    }

    /// Validation metrics of the refined (`f740`) and initial (`f_init`)
    /// estimates against the scene truth.
    fn evaluate(&self, config: &PyConfig, scene: &PyScene) -> PyResult<HashMap<&'static str, HashMap<&'static str, f64>>> {
        let ev = pipeline::evaluate_scene(&self.inner, &scene.inner, &config.inner.bins, "scene").map_err(err)?;
        let mut full = eval_dict(&ev.full);
        full.insert("mean_rel_reconstruction", ev.mean_rel_reconstruction);
        full.insert("bare_mean_abs_f", ev.bare_mean_abs_f);
        Ok(HashMap::from([("f740", full), ("f_init", eval_dict(&ev.initial))]))
    }

    /// Writes the parameter checkpoint.
    fn save_params(&self, path: PathBuf) -> PyResult<()> {
        self.inner.all_params().save(&path).map_err(err)
    }

    #[getter]
    fn n_parameters(&self) -> usize {
        self.inner.all_params().n_scalars()
    }
}

fn comparison(reference: Vec<f64>, prediction: Vec<f64>) -> PyResult<ComparisonSet> {
    ComparisonSet::new(reference, prediction, None).map_err(err)
}

/// Coefficient of determination about the reference mean.
#[pyfunction]
fn r2(reference: Vec<f64>, prediction: Vec<f64>) -> PyResult<f64> {
    Ok(metrics::r2(&comparison(reference, prediction)?))
}

/// Mean absolute difference.
#[pyfunction]
fn mad(reference: Vec<f64>, prediction: Vec<f64>) -> PyResult<f64> {
    Ok(metrics::mad(&comparison(reference, prediction)?))
}

#[pymodule]
#[pyo3(name = "o2sif")]
fn o2sif_module(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyConfig>()?;
    m.add_class::<PyScene>()?;
    m.add_class::<PyEmulator>()?;
    m.add_class::<PyModel>()?;
    m.add_function(wrap_pyfunction!(simulate_benchmark, m)?)?;
    m.add_function(wrap_pyfunction!(fit_emulator, m)?)?;
    m.add_function(wrap_pyfunction!(r2, m)?)?;
    m.add_function(wrap_pyfunction!(mad, m)?)?;
    Ok(())
}
