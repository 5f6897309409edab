//! Output directory layout and artifact loading.

use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use o2sif::autodiff::ParamStore;
use o2sif::emulator::EmulatorModel;
use o2sif::forward::SceneCube;
use o2sif::pipeline::ExperimentConfig;
use o2sif::sfmnn::{ModelManifest, SfmnnModel};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{CliError, CliResult};

#[derive(Debug, Clone)]
pub struct Layout {
    pub root: PathBuf,
}

/// One simulated scene file and its truth statistics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneEntry {
    pub file: String,
    pub role: String,
    pub seed: u64,
    pub acquisition: u32,
    pub height: usize,
    pub width: usize,
    pub patch_size: usize,
    pub mean_f740: f64,
    pub std_f740: f64,
    pub min_f740: f64,
    pub max_f740: f64,
    /// Fraction of pixels with zero true fluorescence.
    pub fraction_zero_f740: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenesManifest {
    pub scenes: Vec<SceneEntry>,
}

/// Structured-text companion of a parameter checkpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub stage: String,
    pub params_file: String,
    pub emulator_file: String,
    pub emulator_sha256: String,
    pub epochs: usize,
    pub model: ModelManifest,
}

pub fn sha256_hex(path: &Path) -> CliResult<String> {
    let bytes = fs::read(path).map_err(|e| CliError::io(path, e))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

fn require(path: &Path, producer: &str) -> CliResult<()> {
    if path.exists() {
        Ok(())
    } else {
        Err(CliError::Config(format!(
            "missing {}; run `o2sif {producer}` with the same --out first",
            path.display()
        )))
    }
}

impl Layout {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn scenes_dir(&self) -> PathBuf {
        self.root.join("scenes")
    }

    pub fn scenes_manifest(&self) -> PathBuf {
        self.scenes_dir().join("manifest.toml")
    }

    pub fn emulator_dir(&self) -> PathBuf {
        self.root.join("emulator")
    }

    pub fn emulator_file(&self) -> PathBuf {
        self.emulator_dir().join("emulator.sife")
    }

    pub fn stage_dir(&self, stage: &str) -> PathBuf {
        self.root.join(stage)
    }

    pub fn eval_dir(&self) -> PathBuf {
        self.root.join("eval")
    }

    pub fn gridsearch_dir(&self) -> PathBuf {
        self.root.join("gridsearch")
    }

    pub fn prepare(&self) -> CliResult<()> {
        fs::create_dir_all(&self.root).map_err(|e| CliError::io(&self.root, e))
    }

    pub fn write_config(&self, cfg: &ExperimentConfig) -> CliResult<()> {
        let text = toml::to_string(cfg).map_err(|e| CliError::Config(e.to_string()))?;
        write_text(&self.root.join("config.toml"), &text)
    }

    pub fn load_scenes(&self) -> CliResult<(ScenesManifest, Vec<SceneCube>)> {
        let path = self.scenes_manifest();
        require(&path, "simulate")?;
        let manifest: ScenesManifest = read_toml(&path)?;
        let scenes = manifest
            .scenes
            .iter()
            .map(|e| {
                let p = self.scenes_dir().join(&e.file);
                require(&p, "simulate")?;
                Ok(SceneCube::load(&p)?)
            })
            .collect::<CliResult<Vec<_>>>()?;
        Ok((manifest, scenes))
    }

    /// Training and held-out scenes.
    pub fn load_split(&self) -> CliResult<(Vec<(String, SceneCube)>, Vec<(String, SceneCube)>)> {
        let (manifest, scenes) = self.load_scenes()?;
        let mut train = Vec::new();
        let mut held = Vec::new();
        for (e, s) in manifest.scenes.into_iter().zip(scenes) {
            let label = e.file.trim_end_matches(".sifc").to_string();
            if e.role == "train" {
                train.push((label, s));
            } else {
                held.push((label, s));
            }
        }
        if train.is_empty() {
            return Err(CliError::Config("scene manifest lists no training scenes".into()));
        }
        Ok((train, held))
    }

    pub fn load_emulator(&self) -> CliResult<(Arc<EmulatorModel>, String)> {
        let path = self.emulator_file();
        require(&path, "fit-emulator")?;
        Ok((Arc::new(EmulatorModel::load(&path)?), sha256_hex(&path)?))
    }

    pub fn save_checkpoint(&self, dir: &Path, stage: &str, model: &SfmnnModel, epochs: usize) -> CliResult<()> {
        fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
        model.all_params().save(&dir.join("model.sifp"))?;
        let manifest = CheckpointManifest {
            stage: stage.into(),
            params_file: "model.sifp".into(),
            emulator_file: self.emulator_file().display().to_string(),
            emulator_sha256: sha256_hex(&self.emulator_file())?,
            epochs,
            model: model.manifest(),
        };
        let text = toml::to_string(&manifest).map_err(|e| CliError::Config(e.to_string()))?;
        write_text(&dir.join("manifest.toml"), &text)
    }

    /// Loads a checkpoint and checks it against the current emulator file.
    pub fn load_checkpoint(&self, dir: &Path, producer: &str) -> CliResult<(CheckpointManifest, SfmnnModel)> {
        let mpath = dir.join("manifest.toml");
        require(&mpath, producer)?;
        let manifest: CheckpointManifest = read_toml(&mpath)?;
        let (emulator, hash) = self.load_emulator()?;
        if hash != manifest.emulator_sha256 {
            return Err(CliError::Config(format!(
                "{} was trained against a different emulator; rerun `o2sif {producer}`",
                dir.display()
            )));
        }
        let params = ParamStore::load(&dir.join(&manifest.params_file))?;
        let model = SfmnnModel::from_parts(&manifest.model, &params, emulator)?;
        Ok((manifest, model))
    }
}

pub fn write_text(path: &Path, text: &str) -> CliResult<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
    }
    fs::write(path, text).map_err(|e| CliError::io(path, e))
}

pub fn read_toml<T: serde::de::DeserializeOwned>(path: &Path) -> CliResult<T> {
    let text = fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    toml::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
}
