//! Self-supervised fluorescence retrieval network.
//!
//! An encoder maps standardized pixel features to a latent code. Decoders
//! predict the surface state per pixel, the atmospheric state per patch and
//! the instrument drift per across-track column; a frozen supervised
//! predictor supplies an initial fluorescence estimate that a residual module
//! refines. All predictions pass through the polynomial emulator, and the
//! network is trained to reproduce the observed radiances.

use std::collections::HashMap;
use std::sync::Arc;

use ndarray::{Array2, Axis};
use rand::{seq::SliceRandom, Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{
    clip_grad_norm, mlp_stack, sigmoid, Activation, Adam, Bound, Graph, MlpStackConfig, ParamStore, Var,
};
use crate::emulator::{self, EmulatorModel, INPUT_NAMES};
use crate::forward::SceneCube;
use crate::metrics::ComparisonSet;
use crate::spectral::AtmoGeoState;
use crate::{Error, Result};

/// How ancillary AOT and water-vapour products enter the model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AncillaryMode {
    /// Predicted per patch and regressed onto the ancillary values.
    Regularized,
    /// Appended to the pixel features and fed to the emulator directly.
    AsInput,
}

impl std::str::FromStr for AncillaryMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "regularized" => Ok(Self::Regularized),
            "as-input" | "as_input" => Ok(Self::AsInput),
            other => Err(Error::InvalidArgument(format!("unknown ancillary mode `{other}`"))),
        }
    }
}

/// Weights of the five loss terms.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossWeights {
    pub gamma_f: f64,
    pub gamma_df: f64,
    pub gamma_h2o: f64,
    pub gamma_n: f64,
    pub gamma_aot: f64,
    pub gamma_c: f64,
    /// NDVI at or below which pixels are treated as non-vegetated.
    pub tau: f64,
    /// Spectral weights on the output window; empty selects the default bump.
    pub w_lambda: Vec<f64>,
    pub n_perturb: usize,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            gamma_f: 1.0,
            gamma_df: 5.0,
            gamma_h2o: 1.0,
            gamma_n: 10.0,
            gamma_aot: 100.0,
            gamma_c: 5e3,
            tau: 0.15,
            w_lambda: Vec::new(),
            n_perturb: 4,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let g = [self.gamma_f, self.gamma_df, self.gamma_h2o, self.gamma_n, self.gamma_aot, self.gamma_c];
        if g.iter().any(|v| !(*v >= 0.0) || !v.is_finite()) {
            return Err(Error::InvalidArgument("loss weights must be finite and nonnegative".into()));
        }
        if self.w_lambda.iter().any(|v| !(*v >= 0.0)) {
            return Err(Error::InvalidArgument("spectral weights must be nonnegative".into()));
        }
        if !(self.tau > -1.0 && self.tau < 1.0) {
            return Err(Error::InvalidArgument("tau must lie in (-1, 1)".into()));
        }
        Ok(())
    }

    /// Spectral weights resolved against the output band centres.
    pub fn spectral_weights(&self, out_centers: &[f64]) -> Result<Vec<f64>> {
        if self.w_lambda.is_empty() {
            return Ok(default_spectral_weights(out_centers));
        }
        if self.w_lambda.len() != out_centers.len() {
            return Err(Error::InvalidArgument(format!(
                "{} spectral weights for {} output bands",
                self.w_lambda.len(),
                out_centers.len()
            )));
        }
        Ok(self.w_lambda.clone())
    }
}

/// Gaussian bump at 760.6 nm (σ = 4 nm) scaled to a maximum of 1.
pub fn default_spectral_weights(out_centers: &[f64]) -> Vec<f64> {
    let w: Vec<f64> = out_centers.iter().map(|c| (-0.5 * ((c - 760.6) / 4.0).powi(2)).exp()).collect();
    let max = w.iter().copied().fold(0.0, f64::max);
    w.into_iter().map(|v| v / max).collect()
}

/// Network sizes of every module.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArchConfig {
    pub encoder: MlpStackConfig,
    /// Shared by the pixel, patch and sensor decoders.
    pub decoder: MlpStackConfig,
    pub dfres: MlpStackConfig,
    pub finit: MlpStackConfig,
    pub u_dim: usize,
}

impl ArchConfig {
    pub fn desk() -> Self {
        Self {
            encoder: MlpStackConfig::new(&[100, 50, 20, 16], &[2, 3, 3, 3], &[0.05, 0.01, 0.01, 0.01], Activation::Relu),
            decoder: MlpStackConfig::new(&[16, 8, 8, 8], &[3, 2, 2, 2], &[0.001, 0.001, 0.0], Activation::Tanh),
            dfres: MlpStackConfig::new(&[100, 20, 16, 8, 8, 8], &[2, 3, 3, 3, 3, 1], &[0.05, 0.005, 0.001], Activation::Tanh),
            finit: MlpStackConfig::new(&[64, 32, 16], &[2, 2, 2], &[], Activation::Tanh),
            u_dim: 8,
        }
    }

    pub fn paper() -> Self {
        Self {
            encoder: MlpStackConfig::new(
                &[1000, 500, 200, 100, 50, 50, 50, 30],
                &[2, 3, 3, 3, 3, 3, 3, 3],
                &[0.05, 0.01, 0.01, 0.01, 0.005, 0.001],
                Activation::Relu,
            ),
            decoder: MlpStackConfig::new(&[100, 50, 50, 50], &[3, 2, 2, 2], &[0.001, 0.001, 0.0], Activation::Tanh),
            dfres: MlpStackConfig::new(
                &[1000, 200, 100, 50, 50, 50],
                &[2, 3, 3, 3, 3, 1],
                &[0.05, 0.005, 0.001],
                Activation::Tanh,
            ),
            finit: MlpStackConfig::new(&[200, 100, 50], &[2, 2, 2], &[], Activation::Tanh),
            u_dim: 8,
        }
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "desk" => Ok(Self::desk()),
            "paper" => Ok(Self::paper()),
            other => Err(Error::InvalidArgument(format!("unknown preset `{other}`"))),
        }
    }

    pub fn validate(&self) -> Result<()> {
        for c in [&self.encoder, &self.decoder, &self.dfres, &self.finit] {
            c.validate()?;
        }
        if self.u_dim == 0 {
            return Err(Error::InvalidArgument("u_dim must be at least 1".into()));
        }
        Ok(())
    }
}

/// Number of non-radiance, non-reflectance features: cos sza, raa, ta, h_gnd.
pub const N_GEO_FEATURES: usize = 4;

/// Unstandardized feature vector of one pixel.
pub fn raw_pixel_features(
    radiance: &[f64],
    l2a: &[f64],
    atmo: &AtmoGeoState,
    ancillary: Option<(f64, f64)>,
) -> Vec<f64> {
    let mut f = Vec::with_capacity(radiance.len() + l2a.len() + N_GEO_FEATURES + 2);
    f.extend_from_slice(radiance);
    f.extend_from_slice(l2a);
    f.push(atmo.sza.to_radians().cos());
    f.push(atmo.raa / 180.0);
    f.push(atmo.ta / 90.0);
    f.push(atmo.h_gnd / 10.0);
    if let Some((a, h)) = ancillary {
        f.push(a);
        f.push(h);
    }
    f
}

fn scene_pixel_features(scene: &SceneCube, px: usize, mode: AncillaryMode) -> Vec<f64> {
    let (row, col) = (px / scene.width, px % scene.width);
    let patch = scene.patch_of(row, col);
    let atmo = &scene.truth_atmo[patch];
    let rad: Vec<f64> = scene.pixel_radiance(px).iter().map(|&v| v as f64).collect();
    let l2a: Vec<f64> = scene.pixel_l2a(px).iter().map(|&v| v as f64).collect();
    let anc = (mode == AncillaryMode::AsInput).then(|| (scene.ancillary_aot[patch] as f64, scene.ancillary_h2o[patch] as f64));
    raw_pixel_features(&rad, &l2a, atmo, anc)
}

/// Affine standardization of pixel features.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl FeatureStats {
    /// Moments over every pixel of the given scenes; constant features get
    /// unit scale.
    pub fn from_scenes(scenes: &[SceneCube], mode: AncillaryMode) -> Result<Self> {
        let rows: Vec<Vec<f64>> = scenes
            .iter()
            .flat_map(|s| (0..s.n_pixels()).map(move |px| scene_pixel_features(s, px, mode)))
            .collect();
        Self::from_rows(&rows)
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let n = rows.len();
        let Some(first) = rows.first() else {
            return Err(Error::Empty("feature rows"));
        };
        let d = first.len();
        let mut mean = vec![0.0; d];
        for r in rows {
            mean.iter_mut().zip(r).for_each(|(m, v)| *m += v / n as f64);
        }
        let mut var = vec![0.0; d];
        for r in rows {
            var.iter_mut().zip(r.iter().zip(&mean)).for_each(|(s, (v, m))| *s += (v - m).powi(2) / n as f64);
        }
        let std = var.into_iter().map(|v| if v.sqrt() > 1e-12 { v.sqrt() } else { 1.0 }).collect();
        Ok(Self { mean, std })
    }

    pub fn len(&self) -> usize {
        self.mean.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mean.is_empty()
    }

    pub fn standardize(&self, raw: &[f64]) -> Vec<f64> {
        raw.iter().zip(self.mean.iter().zip(&self.std)).map(|(v, (m, s))| (v - m) / s).collect()
    }
}

/// Model inputs of (a subset of) one patch.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchInputs {
    pub u: u32,
    pub width: usize,
    pub pixels: Vec<usize>,
    pub columns: Vec<usize>,
    /// Standardized features [n × n_features].
    pub features: Array2<f64>,
    /// Observed radiance of all sensor bands [n × n_bands].
    pub radiance: Array2<f64>,
    pub cos_sza: f64,
    pub ndvi: Vec<f64>,
    pub rho780: Vec<f64>,
    /// Ancillary (aot550, h2o) broadcast to pixels [n × 2].
    pub ancillary: Array2<f64>,
    /// Ancillary (aot550, h2o) of the patch.
    pub ancillary_patch: [f64; 2],
}

/// Builds model inputs for one patch, optionally restricted to `subset`.
pub fn build_inputs(
    scene: &SceneCube,
    patch: usize,
    mode: AncillaryMode,
    stats: &FeatureStats,
    subset: Option<&[usize]>,
) -> Result<PatchInputs> {
    if patch >= scene.n_patches() {
        return Err(Error::InvalidArgument(format!("patch {patch} outside scene with {} patches", scene.n_patches())));
    }
    if mode == AncillaryMode::AsInput && (scene.ancillary_aot.len() != scene.n_patches() || scene.ancillary_h2o.len() != scene.n_patches()) {
        return Err(Error::MissingAncillary);
    }
    let all = scene.patch_pixels(patch);
    let pixels: Vec<usize> = match subset {
        Some(s) => s.iter().map(|&i| all[i]).collect(),
        None => all,
    };
    let n = pixels.len();
    let n_feat = stats.len();
    let mut features = Array2::zeros((n, n_feat));
    for (i, &px) in pixels.iter().enumerate() {
        let raw = scene_pixel_features(scene, px, mode);
        if raw.len() != n_feat {
            return Err(Error::Shape {
                op: "build_inputs",
                detail: format!("{} features, statistics for {n_feat}", raw.len()),
            });
        }
        features.row_mut(i).assign(&ndarray::Array1::from(stats.standardize(&raw)));
    }
    let nb = scene.n_bands();
    let radiance = Array2::from_shape_fn((n, nb), |(i, b)| scene.pixel_radiance(pixels[i])[b] as f64);
    let anc = |v: &[f32]| v.get(patch).copied().unwrap_or(f32::NAN) as f64;
    let ancillary_patch = [anc(&scene.ancillary_aot), anc(&scene.ancillary_h2o)];
    let ancillary = Array2::from_shape_fn((n, 2), |(_, k)| ancillary_patch[k]);
    Ok(PatchInputs {
        u: scene.u,
        width: scene.width,
        columns: pixels.iter().map(|&p| p % scene.width).collect(),
        features,
        radiance,
        cos_sza: scene.truth_atmo[patch].sza.to_radians().cos(),
        ndvi: pixels.iter().map(|&p| scene.pixel_ndvi(p)).collect(),
        rho780: pixels.iter().map(|&p| scene.pixel_rho780(p)).collect(),
        ancillary,
        ancillary_patch,
        pixels,
    })
}

/// Several patches stacked into one forward pass.
#[derive(Debug, Clone)]
pub struct Batch {
    pub features: Array2<f64>,
    pub radiance: Array2<f64>,
    pub cos_sza: Array2<f64>,
    pub ndvi: Vec<f64>,
    pub ancillary: Array2<f64>,
    pub ancillary_patch: Array2<f64>,
    pub patch_of: Vec<usize>,
    /// Row-stochastic [n_patches × n_pixels] averaging matrix.
    pub pool: Array2<f64>,
    /// (u, normalized across-track position) of each distinct column.
    pub column_keys: Vec<(u32, f64)>,
    pub column_of: Vec<usize>,
}

impl Batch {
    pub fn new(patches: &[PatchInputs]) -> Result<Self> {
        if patches.is_empty() || patches.iter().any(|p| p.pixels.is_empty()) {
            return Err(Error::Empty("batch patches"));
        }
        let views: Vec<_> = patches.iter().map(|p| p.features.view()).collect();
        let features = ndarray::concatenate(Axis(0), &views).map_err(|e| Error::Shape {
            op: "Batch",
            detail: e.to_string(),
        })?;
        let views: Vec<_> = patches.iter().map(|p| p.radiance.view()).collect();
        let radiance = ndarray::concatenate(Axis(0), &views).map_err(|e| Error::Shape {
            op: "Batch",
            detail: e.to_string(),
        })?;
        let views: Vec<_> = patches.iter().map(|p| p.ancillary.view()).collect();
        let ancillary = ndarray::concatenate(Axis(0), &views).expect("two columns each");
        let n: usize = patches.iter().map(|p| p.pixels.len()).sum();
        let mut pool = Array2::zeros((patches.len(), n));
        let mut patch_of = Vec::with_capacity(n);
        let mut cos = Vec::with_capacity(n);
        let mut keys: Vec<(u32, f64)> = Vec::new();
        let mut key_index: HashMap<(u32, usize, usize), usize> = HashMap::new();
        let mut column_of = Vec::with_capacity(n);
        let mut start = 0;
        for (k, p) in patches.iter().enumerate() {
            let m = p.pixels.len();
            pool.slice_mut(ndarray::s![k, start..start + m]).fill(1.0 / m as f64);
            start += m;
            for &c in &p.columns {
                patch_of.push(k);
                cos.push(p.cos_sza);
                let idx = *key_index.entry((p.u, c, p.width)).or_insert_with(|| {
                    let x = if p.width > 1 { c as f64 / (p.width - 1) as f64 } else { 0.0 };
                    keys.push((p.u, x));
                    keys.len() - 1
                });
                column_of.push(idx);
            }
        }
        Ok(Self {
            features,
            radiance,
            cos_sza: Array2::from_shape_vec((n, 1), cos).expect("one per pixel"),
            ndvi: patches.iter().flat_map(|p| p.ndvi.iter().copied()).collect(),
            ancillary,
            ancillary_patch: Array2::from_shape_fn((patches.len(), 2), |(k, j)| patches[k].ancillary_patch[j]),
            patch_of,
            pool,
            column_keys: keys,
            column_of,
        })
    }

    pub fn n_pixels(&self) -> usize {
        self.features.nrows()
    }

    pub fn n_patches(&self) -> usize {
        self.pool.nrows()
    }
}

/// Supervised fluorescence predictor producing a logit per pixel.
#[derive(Debug, Clone, PartialEq)]
pub struct FinitNet {
    pub config: MlpStackConfig,
    pub params: ParamStore,
    pub f_lo: f64,
    pub f_hi: f64,
}

impl FinitNet {
    pub fn new<R: Rng>(config: MlpStackConfig, n_features: usize, f_lo: f64, f_hi: f64, rng: &mut R) -> Result<Self> {
        let mut params = ParamStore::new();
        params.init_mlp_stack("finit", &config, n_features, rng)?;
        params.init_affine("finit.head", config.out_dim(), 1, 1.0, rng);
        Ok(Self {
            config,
            params,
            f_lo,
            f_hi,
        })
    }

    /// Fluorescence from a logit; shared by the network head and constants.
    pub fn f_from_logit(&self, a: f64) -> f64 {
        sigmoid(a) * (self.f_hi - self.f_lo) + self.f_lo
    }

    fn logit_graph(&self, g: &mut Graph, b: &Bound, x: Var) -> Result<Var> {
        let h = mlp_stack(g, &self.config, b, "finit", x)?;
        g.affine(h, b.get("finit.head.w")?, b.get("finit.head.b")?)
    }

    /// Logits [n × 1] of standardized features, without dropout.
    pub fn logits(&self, features: &Array2<f64>) -> Result<Array2<f64>> {
        let mut g = Graph::new(0);
        let b = self.params.bind(&mut g, false);
        let x = g.constant2(features.clone());
        let out = self.logit_graph(&mut g, &b, x)?;
        Ok(g.value(out).clone().into_dimensionality().expect("2-d"))
    }

    pub fn predict(&self, features: &Array2<f64>) -> Result<Vec<f64>> {
        Ok(self.logits(features)?.iter().map(|&a| self.f_from_logit(a)).collect())
    }
}

/// Optimization settings of the supervised predictor.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FinitSchedule {
    pub epochs: usize,
    pub lr: f64,
    pub batch: usize,
    pub validation_fraction: f64,
    pub seed: u64,
}

impl Default for FinitSchedule {
    fn default() -> Self {
        Self {
            epochs: 30,
            lr: 2e-3,
            batch: 256,
            validation_fraction: 0.1,
            seed: 11,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FinitReport {
    pub train_rmse: f64,
    pub validation_rmse: f64,
    pub label_std: f64,
    pub history: Vec<f64>,
}

/// Trains the predictor on (standardized features, f740) pairs by mean
/// squared error.
pub fn train_finit(net: &mut FinitNet, features: &Array2<f64>, target: &[f64], sched: &FinitSchedule) -> Result<FinitReport> {
    if features.nrows() != target.len() {
        return Err(Error::Shape {
            op: "train_finit",
            detail: format!("{} rows for {} labels", features.nrows(), target.len()),
        });
    }
    if target.len() < 2 {
        return Err(Error::Empty("training pixels"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(sched.seed);
    let mut order: Vec<usize> = (0..target.len()).collect();
    order.shuffle(&mut rng);
    let n_val = ((target.len() as f64 * sched.validation_fraction).round() as usize).clamp(1, target.len() - 1);
    let (val_idx, train_idx) = order.split_at(n_val);
    let (val_idx, mut train_idx) = (val_idx.to_vec(), train_idx.to_vec());
    let mut adam = Adam::new(&net.params, sched.lr);
    let span = net.f_hi - net.f_lo;
    let mut history = Vec::with_capacity(sched.epochs);
    for epoch in 0..sched.epochs {
        train_idx.shuffle(&mut rng);
        let mut total = 0.0;
        for chunk in train_idx.chunks(sched.batch.max(1)) {
            let x = features.select(Axis(0), chunk);
            let y = Array2::from_shape_fn((chunk.len(), 1), |(i, _)| target[chunk[i]]);
            let mut g = Graph::with_mode(rng.random(), true);
            let b = net.params.bind(&mut g, true);
            let xv = g.constant2(x);
            let a = net.logit_graph(&mut g, &b, xv)?;
            let s = g.sigmoid(a);
            let s = g.scale(s, span);
            let f = g.shift(s, net.f_lo);
            let yv = g.constant2(y);
            let d = g.sub(f, yv)?;
            let sq = g.square(d);
            let loss = g.mean_all(sq)?;
            let lv = g.scalar(loss);
            if !lv.is_finite() {
                return Err(Error::Diverged { epoch });
            }
            total += lv * chunk.len() as f64;
            let grads = g.backward(loss)?;
            let mut gs = net.params.collect_grads(&g, &b, &grads);
            clip_grad_norm(&mut gs, 10.0);
            adam.step(&mut net.params, &gs)?;
        }
        history.push(total / train_idx.len() as f64);
    }
    let rmse = |idx: &[usize]| -> Result<f64> {
        let pred = net.predict(&features.select(Axis(0), idx))?;
        Ok((idx.iter().zip(&pred).map(|(&i, p)| (p - target[i]).powi(2)).sum::<f64>() / idx.len() as f64).sqrt())
    };
    let mean = target.iter().sum::<f64>() / target.len() as f64;
    let label_std = (target.iter().map(|t| (t - mean).powi(2)).sum::<f64>() / target.len() as f64).sqrt();
    Ok(FinitReport {
        train_rmse: rmse(&train_idx)?,
        validation_rmse: rmse(&val_idx)?,
        label_std,
        history,
    })
}

/// Standardized features and true f740 of every pixel of the given scenes.
pub fn finit_dataset(scenes: &[SceneCube], mode: AncillaryMode, stats: &FeatureStats) -> (Array2<f64>, Vec<f64>) {
    let n: usize = scenes.iter().map(|s| s.n_pixels()).sum();
    let mut x = Array2::zeros((n, stats.len()));
    let mut y = Vec::with_capacity(n);
    let mut i = 0;
    for s in scenes {
        for px in 0..s.n_pixels() {
            let f = stats.standardize(&scene_pixel_features(s, px, mode));
            x.row_mut(i).assign(&ndarray::Array1::from(f));
            y.push(s.truth_surface[px].f740);
            i += 1;
        }
    }
    (x, y)
}

/// Optimization settings of the retrieval network.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Schedule {
    pub lr: f64,
    pub epochs: usize,
    pub batch_patches: usize,
    /// Pixels drawn per patch for each step; all pixels when unset.
    pub pixels_per_patch: Option<usize>,
    pub clip_norm: f64,
    /// Learning rate of the last epoch relative to `lr`; decays geometrically.
    pub lr_final_ratio: f64,
    pub seed: u64,
}

impl Schedule {
    pub fn lr_at(&self, epoch: usize) -> f64 {
        if self.epochs <= 1 {
            return self.lr;
        }
        self.lr * self.lr_final_ratio.powf(epoch as f64 / (self.epochs - 1) as f64)
    }
}

impl Default for Schedule {
    fn default() -> Self {
        Self {
            lr: 3e-3,
            epochs: 150,
            batch_patches: 2,
            pixels_per_patch: Some(32),
            clip_norm: 100.0,
            lr_final_ratio: 0.03,
            seed: 3,
        }
    }
}

/// Loss terms of one evaluation, unweighted by batch size.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossValues {
    pub res: f64,
    pub res_f: f64,
    pub m: f64,
    pub df: f64,
    pub n: f64,
    pub c: f64,
    pub total: f64,
    /// Mean |L − L̂| / L over pixels and output bands.
    pub rel_recon: f64,
}

impl LossValues {
    fn add_scaled(&mut self, o: &LossValues, w: f64) {
        self.res += w * o.res;
        self.res_f += w * o.res_f;
        self.m += w * o.m;
        self.df += w * o.df;
        self.n += w * o.n;
        self.c += w * o.c;
        self.total += w * o.total;
        self.rel_recon += w * o.rel_recon;
    }
}

/// Graph nodes of one forward pass.
#[derive(Debug, Clone)]
pub struct ForwardVars {
    pub latent: Var,
    /// (ρ₇₄₀, s, e) [n × 3].
    pub surface: Var,
    pub f_init: Var,
    pub delta_f: Var,
    pub f740: Var,
    /// (aot550, h2o) per patch [n_patches × 2], regularized mode only.
    pub atmo_patch: Option<Var>,
    /// (aot550, h2o) per pixel [n × 2].
    pub atmo: Var,
    /// (Δλ, Δσ) per pixel [n × 2].
    pub sensor: Var,
    /// Emulator inputs [n × 9].
    pub inputs: Var,
    /// Emulated output-window radiance [n × n_out].
    pub reconstructed: Var,
}

#[derive(Debug, Clone)]
pub struct LossVars {
    pub res: Var,
    pub res_f: Var,
    pub m: Option<Var>,
    pub df: Var,
    pub n: Var,
    pub c: Option<Var>,
    pub total: Var,
}

/// Serializable description of a trained model; parameters go to SIFP.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelManifest {
    pub arch: ArchConfig,
    pub mode: AncillaryMode,
    pub weights: LossWeights,
    pub n_acquisitions: usize,
    pub out_band_indices: Vec<usize>,
    pub feature_mean: Vec<f64>,
    pub feature_std: Vec<f64>,
    pub f_range: (f64, f64),
}

#[derive(Debug, Clone)]
pub struct SfmnnModel {
    pub arch: ArchConfig,
    pub mode: AncillaryMode,
    pub weights: LossWeights,
    pub params: ParamStore,
    pub finit: FinitNet,
    pub emulator: Arc<EmulatorModel>,
    pub stats: FeatureStats,
    pub n_acquisitions: usize,
    pub out_band_indices: Vec<usize>,
}

fn bounds(em: &EmulatorModel, idx: &[usize]) -> (Vec<f64>, Vec<f64>) {
    (idx.iter().map(|&i| em.input_lo[i]).collect(), idx.iter().map(|&i| em.input_hi[i]).collect())
}

/// Emulator input columns of each part passed to
/// [`SfmnnModel::fluorescence_residual`].
pub const SURFACE_IDX: [usize; 3] = [emulator::RHO740, emulator::SLOPE, emulator::CURVATURE];
pub const ATMO_IDX: [usize; 2] = [emulator::AOT550, emulator::H2O];
pub const SENSOR_IDX: [usize; 2] = [emulator::DLAMBDA, emulator::DSIGMA];

impl SfmnnModel {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        arch: ArchConfig,
        mode: AncillaryMode,
        weights: LossWeights,
        emulator: Arc<EmulatorModel>,
        stats: FeatureStats,
        n_acquisitions: usize,
        out_band_indices: Vec<usize>,
        seed: u64,
    ) -> Result<Self> {
        arch.validate()?;
        weights.validate()?;
        if emulator.input_names.iter().map(String::as_str).ne(INPUT_NAMES) {
            return Err(Error::InvalidArgument(format!(
                "emulator inputs {:?} differ from the expected {INPUT_NAMES:?}",
                emulator.input_names
            )));
        }
        if out_band_indices.len() != emulator.n_out() {
            return Err(Error::Shape {
                op: "SfmnnModel",
                detail: format!("{} output bands, emulator has {}", out_band_indices.len(), emulator.n_out()),
            });
        }
        weights.spectral_weights(&emulator.out_band_centers)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n_feat = stats.len();
        let latent = arch.encoder.out_dim();
        let dec = arch.decoder.out_dim();
        let mut p = ParamStore::new();
        p.init_mlp_stack("enc", &arch.encoder, n_feat, &mut rng)?;
        p.init_mlp_stack("dpx", &arch.decoder, latent, &mut rng)?;
        p.init_affine("dpx.head", dec, 3, 1.0, &mut rng);
        if mode == AncillaryMode::Regularized {
            p.init_mlp_stack("dpatch", &arch.decoder, latent, &mut rng)?;
            p.init_affine("dpatch.head", dec, 2, 1.0, &mut rng);
        }
        p.init_mlp_stack("q", &arch.decoder, arch.u_dim + 1, &mut rng)?;
        p.init_affine("q.head", dec, 2, 1.0, &mut rng);
        let table = Array2::from_shape_simple_fn((n_acquisitions.max(1), arch.u_dim), || rng.random_range(-0.1..0.1));
        p.insert("u_table", table.into_dyn());
        p.init_mlp_stack("dfres", &arch.dfres, n_feat + latent, &mut rng)?;
        p.init_affine("dfres.head", arch.dfres.out_dim(), 1, 0.1, &mut rng);
        let (f_lo, f_hi) = (emulator.input_lo[emulator::F740], emulator.input_hi[emulator::F740]);
        let finit = FinitNet::new(arch.finit.clone(), n_feat, f_lo, f_hi, &mut rng)?;
        Ok(Self {
            arch,
            mode,
            weights,
            params: p,
            finit,
            emulator,
            stats,
            n_acquisitions: n_acquisitions.max(1),
            out_band_indices,
        })
    }

    pub fn manifest(&self) -> ModelManifest {
        ModelManifest {
            arch: self.arch.clone(),
            mode: self.mode,
            weights: self.weights.clone(),
            n_acquisitions: self.n_acquisitions,
            out_band_indices: self.out_band_indices.clone(),
            feature_mean: self.stats.mean.clone(),
            feature_std: self.stats.std.clone(),
            f_range: (self.finit.f_lo, self.finit.f_hi),
        }
    }

    /// Trainable and frozen parameters in one store.
    pub fn all_params(&self) -> ParamStore {
        let mut all = self.params.clone();
        all.extend_prefixed("", &self.finit.params);
        all
    }

    pub fn from_parts(manifest: &ModelManifest, params: &ParamStore, emulator: Arc<EmulatorModel>) -> Result<Self> {
        let stats = FeatureStats {
            mean: manifest.feature_mean.clone(),
            std: manifest.feature_std.clone(),
        };
        let mut model = Self::new(
            manifest.arch.clone(),
            manifest.mode,
            manifest.weights.clone(),
            emulator,
            stats,
            manifest.n_acquisitions,
            manifest.out_band_indices.clone(),
            0,
        )?;
        for store in [&mut model.params, &mut model.finit.params] {
            let names = store.names().to_vec();
            for name in names {
                let v = params.get(&name).ok_or_else(|| Error::Format(format!("checkpoint lacks `{name}`")))?;
                if v.shape() != store.get(&name).expect("own name").shape() {
                    return Err(Error::Format(format!("checkpoint tensor `{name}` has shape {:?}", v.shape())));
                }
                store.insert(&name, v.clone());
            }
        }
        Ok(model)
    }

    fn range_head(&self, g: &mut Graph, b: &Bound, name: &str, h: Var, lo: &[f64], hi: &[f64]) -> Result<Var> {
        let z = g.affine(h, b.get(&format!("{name}.w"))?, b.get(&format!("{name}.b"))?)?;
        let s = g.sigmoid(z);
        let span = g.constant2(Array2::from_shape_fn((1, lo.len()), |(_, j)| hi[j] - lo[j]));
        let lo = g.constant2(Array2::from_shape_fn((1, lo.len()), |(_, j)| lo[j]));
        let scaled = g.mul(s, span)?;
        g.add(scaled, lo)
    }

    /// Emulator as a graph layer on physical inputs [n × 9].
    pub fn emulate_graph(&self, g: &mut Graph, inputs: Var) -> Result<Var> {
        let em = &self.emulator;
        let k = em.n_inputs();
        let lo = g.constant2(Array2::from_shape_fn((1, k), |(_, j)| em.input_lo[j]));
        let inv = g.constant2(Array2::from_shape_fn((1, k), |(_, j)| 1.0 / (em.input_hi[j] - em.input_lo[j])));
        let c = g.sub(inputs, lo)?;
        let z = g.mul(c, inv)?;
        let feats = g.poly_features(z, em.basis.clone())?;
        let coeffs = g.constant2(em.coeffs.clone());
        g.matmul(feats, coeffs)
    }

    /// Encoder, pixel and patch decoders and the fluorescence path on given
    /// features; the sensor module is not involved.
    fn retrieval_core(&self, g: &mut Graph, b: &Bound, batch: &Batch, features: &Array2<f64>) -> Result<(Var, Var, Var, Var, Var, Option<Var>, Var)> {
        let logits = self.finit.logits(features)?;
        let x = g.constant2(features.clone());
        let latent = mlp_stack(g, &self.arch.encoder, b, "enc", x)?;
        let h = mlp_stack(g, &self.arch.decoder, b, "dpx", latent)?;
        let (lo, hi) = bounds(&self.emulator, &SURFACE_IDX);
        let surface = self.range_head(g, b, "dpx.head", h, &lo, &hi)?;
        let (lo, hi) = bounds(&self.emulator, &ATMO_IDX);
        let (atmo_patch, atmo) = match self.mode {
            AncillaryMode::Regularized => {
                let pool = g.constant2(batch.pool.clone());
                let pooled = g.matmul(pool, latent)?;
                let hp = mlp_stack(g, &self.arch.decoder, b, "dpatch", pooled)?;
                let ap = self.range_head(g, b, "dpatch.head", hp, &lo, &hi)?;
                let apx = g.gather_rows(ap, &batch.patch_of)?;
                (Some(ap), apx)
            }
            AncillaryMode::AsInput => {
                let anc = Array2::from_shape_fn(batch.ancillary.raw_dim(), |(i, j)| batch.ancillary[[i, j]].clamp(lo[j], hi[j]));
                (None, g.constant2(anc))
            }
        };
        let din = g.concat(&[x, latent], 1)?;
        let hd = mlp_stack(g, &self.arch.dfres, b, "dfres", din)?;
        let z = g.affine(hd, b.get("dfres.head.w")?, b.get("dfres.head.b")?)?;
        let a = g.constant2(logits.clone());
        let za = g.add(z, a)?;
        let s = g.sigmoid(za);
        let s = g.scale(s, self.finit.f_hi - self.finit.f_lo);
        let f_shifted = g.shift(s, self.finit.f_lo);
        let f_init = g.constant2(logits.mapv(|v| self.finit.f_from_logit(v)));
        let delta_f = g.sub(f_shifted, f_init)?;
        let f740 = g.add(f_init, delta_f)?;
        Ok((latent, surface, f_init, delta_f, f740, atmo_patch, atmo))
    }

    fn sensor_module(&self, g: &mut Graph, b: &Bound, batch: &Batch) -> Result<Var> {
        let rows: Vec<usize> = batch
            .column_keys
            .iter()
            .map(|&(u, _)| (u as usize).min(self.n_acquisitions - 1))
            .collect();
        let emb = g.gather_rows(b.get("u_table")?, &rows)?;
        let x = g.constant2(Array2::from_shape_fn((rows.len(), 1), |(i, _)| batch.column_keys[i].1));
        let qin = g.concat(&[emb, x], 1)?;
        let h = mlp_stack(g, &self.arch.decoder, b, "q", qin)?;
        let (lo, hi) = bounds(&self.emulator, &SENSOR_IDX);
        let per_col = self.range_head(g, b, "q.head", h, &lo, &hi)?;
        g.gather_rows(per_col, &batch.column_of)
    }

    /// Full forward pass of a batch.
    pub fn forward(&self, g: &mut Graph, b: &Bound, batch: &Batch) -> Result<ForwardVars> {
        let (latent, surface, f_init, delta_f, f740, atmo_patch, atmo) = self.retrieval_core(g, b, batch, &batch.features)?;
        let sensor = self.sensor_module(g, b, batch)?;
        let cos = g.constant2(batch.cos_sza.clone());
        let inputs = g.concat(&[surface, f740, atmo, cos, sensor], 1)?;
        let reconstructed = self.emulate_graph(g, inputs)?;
        Ok(ForwardVars {
            latent,
            surface,
            f_init,
            delta_f,
            f740,
            atmo_patch,
            atmo,
            sensor,
            inputs,
            reconstructed,
        })
    }

    /// Observed radiance of the output-window bands, [pixels × bands].
    pub fn observed_out(&self, batch: &Batch) -> Array2<f64> {
        batch.radiance.select(Axis(1), &self.out_band_indices)
    }

    /// Five-term loss of a batch. `seed` drives the consistency perturbations.
    pub fn loss(&self, g: &mut Graph, b: &Bound, batch: &Batch, seed: u64) -> Result<(ForwardVars, LossVars)> {
        let w = &self.weights;
        let fw = self.forward(g, b, batch)?;
        let obs = g.constant2(self.observed_out(batch));

        let r = g.sub(obs, fw.reconstructed)?;
        let r2 = g.square(r);
        let res = g.mean_all(r2)?;

        let surf_d = g.stop_gradient(fw.surface);
        let atmo_d = g.stop_gradient(fw.atmo);
        let sensor_d = g.stop_gradient(fw.sensor);
        let cos = g.constant2(batch.cos_sza.clone());
        let res_f = self.fluorescence_residual(g, obs, [surf_d, fw.f740, atmo_d, cos, sensor_d])?;

        let m = match (self.mode, fw.atmo_patch) {
            (AncillaryMode::Regularized, Some(ap)) => {
                let labels = g.constant2(batch.ancillary_patch.clone());
                let d = g.sub(ap, labels)?;
                let d2 = g.square(d);
                let gw = g.constant2(Array2::from_shape_vec((1, 2), vec![w.gamma_aot, w.gamma_h2o]).expect("1×2"));
                let wd = g.mul(d2, gw)?;
                let per_patch = g.sum_over(wd, &[1])?;
                Some(g.mean_all(per_patch)?)
            }
            _ => None,
        };

        let df2 = g.square(fw.delta_f);
        let df_mean = g.mean_all(df2)?;
        let df = g.scale(df_mean, w.gamma_df);

        let mask = g.constant2(Array2::from_shape_fn((batch.n_pixels(), 1), |(i, _)| {
            if batch.ndvi[i] <= w.tau {
                1.0
            } else {
                0.0
            }
        }));
        let fm = g.mul(fw.f740, mask)?;
        let fm_mean = g.mean_all(fm)?;
        let n = g.scale(fm_mean, w.gamma_n);

        let c = if w.gamma_c > 0.0 && w.n_perturb > 0 {
            Some(self.consistency(g, b, batch, &fw, surf_d, atmo_d, sensor_d, seed)?)
        } else {
            None
        };

        let mut total = g.add(res, res_f)?;
        for t in [m, Some(df), Some(n), c].into_iter().flatten() {
            total = g.add(total, t)?;
        }
        Ok((
            fw,
            LossVars {
                res,
                res_f,
                m,
                df,
                n,
                c,
                total,
            },
        ))
    }

    /// Spectrally weighted residual (γ_f/|W|)·⟨Σ w (L − L̂)²⟩ whose gradient
    /// reaches only the fluorescence column. `parts` are surface [n×3],
    /// f740 [n×1], atmosphere [n×2], cos sza [n×1] and sensor [n×2];
    /// everything except f740 is detached here.
    pub fn fluorescence_residual(&self, g: &mut Graph, observed: Var, parts: [Var; 5]) -> Result<Var> {
        let n_out = self.emulator.n_out();
        let [surf, f, atmo, cos, sensor] = parts;
        let detached = [surf, atmo, cos, sensor].map(|v| g.stop_gradient(v));
        let inputs = g.concat(&[detached[0], f, detached[1], detached[2], detached[3]], 1)?;
        let recon = self.emulate_graph(g, inputs)?;
        let r = g.sub(observed, recon)?;
        let r2 = g.square(r);
        let wl = self.weights.spectral_weights(&self.emulator.out_band_centers)?;
        let wv = g.constant2(Array2::from_shape_fn((1, n_out), |(_, j)| wl[j]));
        let weighted = g.mul(r2, wv)?;
        let per_px = row_sums(g, weighted, n_out)?;
        let mean_px = g.mean_all(per_px)?;
        Ok(g.scale(mean_px, self.weights.gamma_f / n_out as f64))
    }

    /// Radiance change caused by moving f740 by `delta_f` per pixel, from
    /// detached emulator inputs [n × 9].
    pub fn perturbation_radiance(&self, inputs: &Array2<f64>, delta_f: &[f64]) -> Array2<f64> {
        let mut moved = inputs.clone();
        for (i, d) in delta_f.iter().enumerate() {
            moved[[i, emulator::F740]] += d;
        }
        self.emulator.emulate_batch(moved.view()) - self.emulator.emulate_batch(inputs.view())
    }

    /// Observed radiances with `delta_l` added on the output-window bands.
    pub fn perturb_radiance(&self, radiance: &Array2<f64>, delta_l: &Array2<f64>) -> Array2<f64> {
        let mut out = radiance.clone();
        for (k, &band) in self.out_band_indices.iter().enumerate() {
            let mut col = out.column_mut(band);
            col += &delta_l.column(k);
        }
        out
    }

    /// Fluorescence re-predicted from substituted radiances, dropout off.
    pub fn predict_f_with_radiance(&self, batch: &Batch, radiance: &Array2<f64>) -> Result<Vec<f64>> {
        let feats = self.features_with_radiance(batch, radiance);
        let mut g = Graph::new(0);
        let b = self.params.bind(&mut g, false);
        let (_, _, _, _, f, _, _) = self.retrieval_core(&mut g, &b, batch, &feats)?;
        Ok(g.value(f).iter().copied().collect())
    }

    /// Detached emulator inputs [n × 9] of a batch, dropout off.
    pub fn predicted_inputs(&self, batch: &Batch) -> Result<Array2<f64>> {
        let mut g = Graph::new(0);
        let b = self.params.bind(&mut g, false);
        let fw = self.forward(&mut g, &b, batch)?;
        Ok(g.value(fw.inputs).clone().into_dimensionality().expect("2-d"))
    }

    /// Standardized features with the radiance entries replaced.
    fn features_with_radiance(&self, batch: &Batch, radiance: &Array2<f64>) -> Array2<f64> {
        let mut f = batch.features.clone();
        for b in 0..radiance.ncols() {
            let (m, s) = (self.stats.mean[b], self.stats.std[b]);
            f.column_mut(b).zip_mut_with(&radiance.column(b), |dst, &l| *dst = (l - m) / s);
        }
        f
    }

    #[allow(clippy::too_many_arguments)]
    fn consistency(
        &self,
        g: &mut Graph,
        b: &Bound,
        batch: &Batch,
        fw: &ForwardVars,
        surf_d: Var,
        atmo_d: Var,
        sensor_d: Var,
        seed: u64,
    ) -> Result<Var> {
        let w = &self.weights;
        let f_d = g.stop_gradient(fw.f740);
        let n = batch.n_pixels();
        let f_hat: Vec<f64> = g.value(f_d).iter().copied().collect();
        let mut det = Array2::zeros((n, emulator::N_INPUTS));
        {
            let cols = [
                (g.value(surf_d), 0usize),
                (g.value(f_d), 3),
                (g.value(atmo_d), 4),
                (&batch.cos_sza.clone().into_dyn(), 6),
                (g.value(sensor_d), 7),
            ];
            for (arr, off) in cols {
                let a2 = arr.view().into_dimensionality::<ndarray::Ix2>().expect("2-d");
                det.slice_mut(ndarray::s![.., off..off + a2.ncols()]).assign(&a2);
            }
        }
        let (f_lo, f_hi) = (self.finit.f_lo, self.finit.f_hi);
        let (slo, shi) = bounds(&self.emulator, &SURFACE_IDX);
        let (alo, ahi) = bounds(&self.emulator, &ATMO_IDX);
        let inv_s = g.constant2(Array2::from_shape_fn((1, 3), |(_, j)| 1.0 / (shi[j] - slo[j])));
        let inv_a = g.constant2(Array2::from_shape_fn((1, 2), |(_, j)| 1.0 / (ahi[j] - alo[j])));
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut acc: Option<Var> = None;
        for _ in 0..w.n_perturb {
            let delta: Vec<f64> = f_hat
                .iter()
                .map(|&f| {
                    let lo = (f_lo - f).max(-f);
                    let hi = f_hi - f;
                    if hi > lo {
                        rng.random_range(lo..hi)
                    } else {
                        0.0
                    }
                })
                .collect();
            let dl = self.perturbation_radiance(&det, &delta);
            let rad = self.perturb_radiance(&batch.radiance, &dl);
            let feats = self.features_with_radiance(batch, &rad);
            let (_, surf2, _, _, f2, _, atmo2) = self.retrieval_core(g, b, batch, &feats)?;
            let target = g.constant2(Array2::from_shape_fn((n, 1), |(i, _)| f_hat[i] + delta[i]));
            let ef = g.sub(f2, target)?;
            let ef = g.scale(ef, 1.0 / (f_hi - f_lo));
            let ef2 = g.square(ef);
            let es = g.sub(surf2, surf_d)?;
            let es = g.mul(es, inv_s)?;
            let es2 = g.square(es);
            let es_sum = row_sums(g, es2, 3)?;
            let mut per_px = g.add(ef2, es_sum)?;
            if self.mode == AncillaryMode::Regularized {
                let ea = g.sub(atmo2, atmo_d)?;
                let ea = g.mul(ea, inv_a)?;
                let ea2 = g.square(ea);
                let ea_sum = row_sums(g, ea2, 2)?;
                per_px = g.add(per_px, ea_sum)?;
            }
            let m = g.mean_all(per_px)?;
            acc = Some(match acc {
                Some(a) => g.add(a, m)?,
                None => m,
            });
        }
        let sum = acc.expect("at least one perturbation");
        Ok(g.scale(sum, w.gamma_c / w.n_perturb as f64))
    }

    /// Loss values without building gradients for a batch.
    pub fn loss_values(&self, g: &Graph, lv: &LossVars, fw: &ForwardVars, batch: &Batch) -> LossValues {
        let obs = self.observed_out(batch);
        let rec = g.value(fw.reconstructed);
        let rel = obs
            .iter()
            .zip(rec.iter())
            .map(|(o, r)| ((o - r) / o).abs())
            .filter(|v| v.is_finite())
            .sum::<f64>()
            / obs.len() as f64;
        LossValues {
            res: g.scalar(lv.res),
            res_f: g.scalar(lv.res_f),
            m: lv.m.map_or(0.0, |v| g.scalar(v)),
            df: g.scalar(lv.df),
            n: g.scalar(lv.n),
            c: lv.c.map_or(0.0, |v| g.scalar(v)),
            total: g.scalar(lv.total),
            rel_recon: rel,
        }
    }
}

/// Row sums of an [n × k] node as [n × 1].
fn row_sums(g: &mut Graph, x: Var, k: usize) -> Result<Var> {
    let ones = g.constant2(Array2::ones((k, 1)));
    g.matmul(x, ones)
}

/// Per-epoch mean loss terms.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLoss {
    pub epoch: usize,
    #[serde(flatten)]
    pub values: LossValues,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub history: Vec<EpochLoss>,
    pub steps: usize,
}

/// Trains every trainable module with Adam; the supervised predictor stays
/// frozen. On divergence the parameters of the last finite step are kept.
pub fn train(model: &mut SfmnnModel, scenes: &[SceneCube], sched: &Schedule) -> Result<TrainReport> {
    train_with(model, scenes, sched, |_| {})
}

/// [`train`] with a callback after every epoch.
pub fn train_with<F: FnMut(&EpochLoss)>(
    model: &mut SfmnnModel,
    scenes: &[SceneCube],
    sched: &Schedule,
    mut on_epoch: F,
) -> Result<TrainReport> {
    if scenes.is_empty() {
        return Err(Error::Empty("training scenes"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(sched.seed);
    let mut units: Vec<(usize, usize)> = scenes
        .iter()
        .enumerate()
        .flat_map(|(s, sc)| (0..sc.n_patches()).map(move |p| (s, p)))
        .collect();
    let mut adam = Adam::new(&model.params, sched.lr);
    let mut history = Vec::with_capacity(sched.epochs);
    let mut steps = 0;
    for epoch in 0..sched.epochs {
        adam.lr = sched.lr_at(epoch);
        units.shuffle(&mut rng);
        let mut sum = LossValues::default();
        let mut count = 0usize;
        for chunk in units.chunks(sched.batch_patches.max(1)) {
            let mut patches = Vec::with_capacity(chunk.len());
            for &(s, p) in chunk {
                let size = scenes[s].patch_size * scenes[s].patch_size;
                let subset: Option<Vec<usize>> = sched.pixels_per_patch.filter(|&k| k < size).map(|k| {
                    let mut idx = rand::seq::index::sample(&mut rng, size, k).into_vec();
                    idx.sort_unstable();
                    idx
                });
                patches.push(build_inputs(&scenes[s], p, model.mode, &model.stats, subset.as_deref())?);
            }
            let batch = Batch::new(&patches)?;
            let mut g = Graph::with_mode(rng.random(), true);
            let bound = model.params.bind(&mut g, true);
            let (fw, lv) = model.loss(&mut g, &bound, &batch, rng.random())?;
            let vals = model.loss_values(&g, &lv, &fw, &batch);
            if !vals.total.is_finite() {
                return Err(Error::Diverged { epoch });
            }
            let grads = g.backward(lv.total)?;
            let mut gs = model.params.collect_grads(&g, &bound, &grads);
            clip_grad_norm(&mut gs, sched.clip_norm);
            adam.step(&mut model.params, &gs).map_err(|e| match e {
                Error::NonFiniteGradient(_) => Error::Diverged { epoch },
                other => other,
            })?;
            sum.add_scaled(&vals, 1.0);
            count += 1;
            steps += 1;
        }
        let mut mean = LossValues::default();
        mean.add_scaled(&sum, 1.0 / count.max(1) as f64);
        let rec = EpochLoss { epoch, values: mean };
        on_epoch(&rec);
        history.push(rec);
    }
    Ok(TrainReport { history, steps })
}

/// Full-resolution retrieval maps of one scene, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct SceneMaps {
    pub height: usize,
    pub width: usize,
    pub f740: Vec<f64>,
    pub f_init: Vec<f64>,
    pub delta_f: Vec<f64>,
    pub rho740: Vec<f64>,
    pub slope: Vec<f64>,
    pub curvature: Vec<f64>,
    pub aot550: Vec<f64>,
    pub h2o: Vec<f64>,
    pub dlambda: Vec<f64>,
    pub dsigma: Vec<f64>,
    /// Mean relative reconstruction error over the output window.
    pub rel_error: Vec<f64>,
}

impl SceneMaps {
    /// Named maps in a fixed order.
    pub fn layers(&self) -> Vec<(&'static str, &[f64])> {
        vec![
            ("f740", &self.f740),
            ("f_init", &self.f_init),
            ("delta_f", &self.delta_f),
            ("rho740", &self.rho740),
            ("slope", &self.slope),
            ("curvature", &self.curvature),
            ("aot550", &self.aot550),
            ("h2o", &self.h2o),
            ("dlambda", &self.dlambda),
            ("dsigma", &self.dsigma),
            ("rel_error", &self.rel_error),
        ]
    }

    /// Truth-versus-prediction set with L2A ρ₇₈₀; `initial` selects f_init.
    pub fn comparison(&self, scene: &SceneCube, initial: bool) -> Result<ComparisonSet> {
        let pred = if initial { &self.f_init } else { &self.f740 };
        ComparisonSet::new(
            scene.truth_f740(),
            pred.clone(),
            Some((0..scene.n_pixels()).map(|p| scene.pixel_rho780(p)).collect()),
        )
    }

    pub fn mean_rel_error(&self) -> f64 {
        self.rel_error.iter().sum::<f64>() / self.rel_error.len() as f64
    }

    /// Mean |f740| over pixels whose L2A NDVI is at or below `tau`.
    pub fn bare_mean_abs_f(&self, scene: &SceneCube, tau: f64) -> f64 {
        let v: Vec<f64> = (0..scene.n_pixels()).filter(|&p| scene.pixel_ndvi(p) <= tau).map(|p| self.f740[p].abs()).collect();
        if v.is_empty() {
            f64::NAN
        } else {
            v.iter().sum::<f64>() / v.len() as f64
        }
    }
}

/// Tiled inference over every patch with dropout off.
pub fn infer_scene(model: &SfmnnModel, scene: &SceneCube) -> Result<SceneMaps> {
    if scene.n_bands() != model.stats.len() - scene.n_l2a() - N_GEO_FEATURES - if model.mode == AncillaryMode::AsInput { 2 } else { 0 } {
        return Err(Error::Shape {
            op: "infer_scene",
            detail: format!("scene has {} bands, model expects a different layout", scene.n_bands()),
        });
    }
    if model.out_band_indices.iter().any(|&b| b >= scene.n_bands()) {
        return Err(Error::Shape {
            op: "infer_scene",
            detail: "output band indices exceed scene bands".into(),
        });
    }
    let n = scene.n_pixels();
    let mut maps = SceneMaps {
        height: scene.height,
        width: scene.width,
        f740: vec![0.0; n],
        f_init: vec![0.0; n],
        delta_f: vec![0.0; n],
        rho740: vec![0.0; n],
        slope: vec![0.0; n],
        curvature: vec![0.0; n],
        aot550: vec![0.0; n],
        h2o: vec![0.0; n],
        dlambda: vec![0.0; n],
        dsigma: vec![0.0; n],
        rel_error: vec![0.0; n],
    };
    for patch in 0..scene.n_patches() {
        let inputs = build_inputs(scene, patch, model.mode, &model.stats, None)?;
        let batch = Batch::new(std::slice::from_ref(&inputs))?;
        let mut g = Graph::new(0);
        let b = model.params.bind(&mut g, false);
        let fw = model.forward(&mut g, &b, &batch)?;
        let obs = model.observed_out(&batch);
        let rec = g.value(fw.reconstructed).clone().into_dimensionality::<ndarray::Ix2>().expect("2-d");
        let col = |v: Var, j: usize, g: &Graph| -> Vec<f64> {
            let a = g.value(v);
            let w = a.shape()[1];
            a.iter().skip(j).step_by(w).copied().collect()
        };
        let fields: [(&mut Vec<f64>, Vec<f64>); 10] = [
            (&mut maps.f740, col(fw.f740, 0, &g)),
            (&mut maps.f_init, col(fw.f_init, 0, &g)),
            (&mut maps.delta_f, col(fw.delta_f, 0, &g)),
            (&mut maps.rho740, col(fw.surface, 0, &g)),
            (&mut maps.slope, col(fw.surface, 1, &g)),
            (&mut maps.curvature, col(fw.surface, 2, &g)),
            (&mut maps.aot550, col(fw.atmo, 0, &g)),
            (&mut maps.h2o, col(fw.atmo, 1, &g)),
            (&mut maps.dlambda, col(fw.sensor, 0, &g)),
            (&mut maps.dsigma, col(fw.sensor, 1, &g)),
        ];
        for (dst, vals) in fields {
            for (&px, v) in inputs.pixels.iter().zip(vals) {
                dst[px] = v;
            }
        }
        let nb = obs.ncols();
        for (i, &px) in inputs.pixels.iter().enumerate() {
            let e: f64 = (0..nb).map(|k| ((obs[[i, k]] - rec[[i, k]]) / obs[[i, k]]).abs()).sum();
            maps.rel_error[px] = e / nb as f64;
        }
    }
    Ok(maps)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::{grad_check, GradCheckOptions};
    use crate::emulator::{EmulatorInputs, MonomialBasis};
    use crate::forward::{make_scene, simulate_bands, AtmosModelParams, SceneRanges, SceneSpec};
    use crate::spectral::{SensorModel, SensorState, SurfaceState};
    use ndarray::ArrayD;

    fn toy_emulator(sensor: &SensorModel) -> Arc<EmulatorModel> {
        let inputs = EmulatorInputs::from_ranges(&SceneRanges::default());
        let basis = Arc::new(MonomialBasis::new(emulator::N_INPUTS, 2));
        let n_out = sensor.out_band_indices.len();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut coeffs = Array2::from_shape_simple_fn((basis.len(), n_out), || rng.random_range(-2.0..2.0));
        coeffs.row_mut(0).fill(60.0);
        coeffs.row_mut(1 + emulator::RHO740).fill(80.0);
        coeffs.row_mut(1 + emulator::F740).fill(6.0);
        Arc::new(EmulatorModel {
            input_names: inputs.names,
            input_lo: inputs.lo,
            input_hi: inputs.hi,
            degree: 2,
            basis,
            coeffs,
            out_band_centers: sensor.out_band_centers(),
        })
    }

    fn scene(seed: u64, ranges: &SceneRanges) -> SceneCube {
        let sensor = SensorModel::desis_window(20);
        let spec = SceneSpec {
            height: 20,
            width: 20,
            patch_size: 10,
            seed,
            acquisition: 1,
        };
        make_scene(&spec, ranges, &AtmosModelParams::default(), &sensor).unwrap()
    }

    fn tiny_arch() -> ArchConfig {
        ArchConfig {
            encoder: MlpStackConfig::new(&[12, 6], &[2, 1], &[0.0, 0.0], Activation::Relu),
            decoder: MlpStackConfig::new(&[6, 4], &[1, 1], &[], Activation::Tanh),
            dfres: MlpStackConfig::new(&[8, 4], &[1, 1], &[], Activation::Tanh),
            finit: MlpStackConfig::new(&[8], &[1], &[], Activation::Tanh),
            u_dim: 3,
        }
    }

    fn model(arch: ArchConfig, mode: AncillaryMode, scenes: &[SceneCube]) -> SfmnnModel {
        let sensor = SensorModel::desis_window(20);
        let stats = FeatureStats::from_scenes(scenes, mode).unwrap();
        SfmnnModel::new(arch, mode, LossWeights::default(), toy_emulator(&sensor), stats, 4, sensor.out_band_indices.clone(), 9).unwrap()
    }

    fn batch_of(m: &SfmnnModel, s: &SceneCube, subset: Option<&[usize]>) -> Batch {
        let patches: Vec<PatchInputs> = (0..s.n_patches())
            .map(|p| build_inputs(s, p, m.mode, &m.stats, subset).unwrap())
            .collect();
        Batch::new(&patches).unwrap()
    }

    #[test]
    fn feature_layout_and_standardization() {
        let s = scene(1, &SceneRanges::default());
        let reg = FeatureStats::from_scenes(std::slice::from_ref(&s), AncillaryMode::Regularized).unwrap();
        let asi = FeatureStats::from_scenes(std::slice::from_ref(&s), AncillaryMode::AsInput).unwrap();
        assert_eq!(reg.len() + 2, asi.len());
        assert_eq!(reg.len(), s.n_bands() + s.n_l2a() + N_GEO_FEATURES);
        let n = s.n_pixels() as f64;
        let rows: Vec<Vec<f64>> = (0..s.n_pixels()).map(|p| asi.standardize(&scene_pixel_features(&s, p, AncillaryMode::AsInput))).collect();
        for j in 0..asi.len() {
            let mean = rows.iter().map(|r| r[j]).sum::<f64>() / n;
            let var = rows.iter().map(|r| (r[j] - mean).powi(2)).sum::<f64>() / n;
            assert!(mean.abs() < 1e-9, "feature {j} mean {mean}");
            assert!((var - 1.0).abs() < 1e-9 || var < 1e-20, "feature {j} var {var}");
        }
    }

    #[test]
    fn identical_pixels_identical_features() {
        let mut s = scene(2, &SceneRanges::default());
        let nb = s.n_bands();
        let nl = s.n_l2a();
        let src: Vec<f32> = s.radiance[..nb].to_vec();
        s.radiance[nb..2 * nb].copy_from_slice(&src);
        let l2a: Vec<f32> = s.l2a_reflectance[..nl].to_vec();
        s.l2a_reflectance[nl..2 * nl].copy_from_slice(&l2a);
        let stats = FeatureStats::from_scenes(std::slice::from_ref(&s), AncillaryMode::Regularized).unwrap();
        let inp = build_inputs(&s, 0, AncillaryMode::Regularized, &stats, Some(&[0, 1])).unwrap();
        assert_eq!(inp.features.row(0), inp.features.row(1));
    }

    #[test]
    fn as_input_requires_ancillary() {
        let mut s = scene(3, &SceneRanges::default());
        let stats = FeatureStats::from_scenes(std::slice::from_ref(&s), AncillaryMode::AsInput).unwrap();
        s.ancillary_aot.clear();
        assert!(matches!(build_inputs(&s, 0, AncillaryMode::AsInput, &stats, None), Err(Error::MissingAncillary)));
        assert!(build_inputs(&s, 99, AncillaryMode::Regularized, &stats, None).is_err());
    }

    #[test]
    fn zero_residual_head_reproduces_initial_estimate() {
        let s = scene(4, &SceneRanges::default());
        let mut m = model(tiny_arch(), AncillaryMode::Regularized, std::slice::from_ref(&s));
        for name in ["dfres.head.w", "dfres.head.b"] {
            m.params.get_mut(name).unwrap().fill(0.0);
        }
        let maps = infer_scene(&m, &s).unwrap();
        assert!(maps.delta_f.iter().all(|&d| d == 0.0));
        assert_eq!(maps.f740, maps.f_init);
    }

    #[test]
    fn maps_respect_structure() {
        let s = scene(5, &SceneRanges::default());
        let m = model(tiny_arch(), AncillaryMode::Regularized, std::slice::from_ref(&s));
        let maps = infer_scene(&m, &s).unwrap();
        for px in 0..s.n_pixels() {
            assert_eq!(maps.f740[px], maps.f_init[px] + maps.delta_f[px]);
        }
        for p in 0..s.n_patches() {
            let px = s.patch_pixels(p);
            assert!(px.iter().all(|&i| maps.aot550[i] == maps.aot550[px[0]] && maps.h2o[i] == maps.h2o[px[0]]));
        }
        for col in 0..s.width {
            for row in 1..s.height {
                let (a, b) = (col, row * s.width + col);
                assert_eq!(maps.dlambda[a], maps.dlambda[b]);
                assert_eq!(maps.dsigma[a], maps.dsigma[b]);
            }
        }
        let em = &m.emulator;
        let inside = |v: &[f64], i: usize| v.iter().all(|&x| x >= em.input_lo[i] && x <= em.input_hi[i]);
        assert!(inside(&maps.rho740, emulator::RHO740) && inside(&maps.f740, emulator::F740));
        assert!(inside(&maps.aot550, emulator::AOT550) && inside(&maps.dsigma, emulator::DSIGMA));
        assert_eq!(maps, infer_scene(&m, &s).unwrap());
    }

    #[test]
    fn equal_columns_share_sensor_state() {
        let s = scene(6, &SceneRanges::default());
        let m = model(tiny_arch(), AncillaryMode::AsInput, std::slice::from_ref(&s));
        let a = build_inputs(&s, 0, m.mode, &m.stats, None).unwrap();
        let b = build_inputs(&s, 2, m.mode, &m.stats, None).unwrap();
        let batch = Batch::new(&[a, b]).unwrap();
        assert_eq!(batch.column_keys.len(), 10);
        let mut g = Graph::new(0);
        let bound = m.params.bind(&mut g, false);
        let fw = m.forward(&mut g, &bound, &batch).unwrap();
        let sensor = g.value(fw.sensor).clone().into_dimensionality::<ndarray::Ix2>().unwrap();
        for i in 0..batch.n_pixels() {
            for j in 0..batch.n_pixels() {
                if batch.column_of[i] == batch.column_of[j] {
                    assert_eq!(sensor.row(i), sensor.row(j));
                }
            }
        }
        assert!(fw.atmo_patch.is_none());
    }

    fn loss_of(m: &SfmnnModel, batch: &Batch) -> (LossValues, Graph, ForwardVars, LossVars) {
        let mut g = Graph::new(0);
        let b = m.params.bind(&mut g, false);
        let (fw, lv) = m.loss(&mut g, &b, batch, 1).unwrap();
        (m.loss_values(&g, &lv, &fw, batch), g, fw, lv)
    }

    #[test]
    fn loss_terms_match_definitions() {
        let s = scene(7, &SceneRanges::default());
        let m = model(tiny_arch(), AncillaryMode::Regularized, std::slice::from_ref(&s));
        let batch = batch_of(&m, &s, Some(&[0, 3, 17, 42, 99]));
        let (v, g, fw, _) = loss_of(&m, &batch);
        let col = |x: Var| g.value(x).iter().copied().collect::<Vec<f64>>();
        let f = col(fw.f740);
        let df = col(fw.delta_f);
        let n = f.len() as f64;
        let w = &m.weights;
        let expect_df = w.gamma_df * df.iter().map(|d| d * d).sum::<f64>() / n;
        assert!((v.df - expect_df).abs() <= 1e-12 * expect_df.max(1.0));
        let expect_n = w.gamma_n * f.iter().zip(&batch.ndvi).map(|(f, &nd)| if nd <= w.tau { *f } else { 0.0 }).sum::<f64>() / n;
        assert!((v.n - expect_n).abs() <= 1e-12 * expect_n.max(1.0));
        let ap = g.value(fw.atmo_patch.unwrap()).clone();
        let expect_m = (0..batch.n_patches())
            .map(|k| {
                w.gamma_aot * (ap[[k, 0]] - batch.ancillary_patch[[k, 0]]).powi(2)
                    + w.gamma_h2o * (ap[[k, 1]] - batch.ancillary_patch[[k, 1]]).powi(2)
            })
            .sum::<f64>()
            / batch.n_patches() as f64;
        assert!((v.m - expect_m).abs() <= 1e-12 * expect_m.max(1.0));
        let rec = g.value(fw.reconstructed);
        let obs = m.observed_out(&batch);
        let expect_res = obs.iter().zip(rec.iter()).map(|(o, r)| (o - r).powi(2)).sum::<f64>() / obs.len() as f64;
        assert!((v.res - expect_res).abs() <= 1e-12 * expect_res);
        let wl = default_spectral_weights(&m.emulator.out_band_centers);
        let k = wl.len();
        let expect_f = w.gamma_f / k as f64
            * (0..obs.nrows()).map(|i| (0..k).map(|j| wl[j] * (obs[[i, j]] - rec[[i, j]]).powi(2)).sum::<f64>()).sum::<f64>()
            / obs.nrows() as f64;
        assert!((v.res_f - expect_f).abs() <= 1e-12 * expect_f);
        let sum = v.res + v.res_f + v.m + v.df + v.n + v.c;
        assert!((v.total - sum).abs() <= 1e-12 * sum);
        assert!(v.total >= 0.0 && v.c >= 0.0);
    }

    #[test]
    fn loss_weight_scaling() {
        let s = scene(8, &SceneRanges::default());
        let mut m = model(tiny_arch(), AncillaryMode::Regularized, std::slice::from_ref(&s));
        let batch = batch_of(&m, &s, Some(&[1, 2, 3, 4]));
        let base = loss_of(&m, &batch).0;
        m.weights.gamma_aot *= 2.0;
        m.weights.gamma_h2o *= 2.0;
        m.weights.gamma_c = 0.0;
        let doubled = loss_of(&m, &batch).0;
        assert!((doubled.m - 2.0 * base.m).abs() <= 1e-12 * base.m);
        assert_eq!(doubled.c, 0.0);
        let four = doubled.res + doubled.res_f + doubled.m + doubled.df + doubled.n;
        assert!((doubled.total - four).abs() <= 1e-12 * four);
        m.weights.gamma_f = 0.0;
        assert_eq!(loss_of(&m, &batch).0.res_f, 0.0);
    }

    #[test]
    fn as_input_mode_has_no_ancillary_term() {
        let s = scene(9, &SceneRanges::default());
        let m = model(tiny_arch(), AncillaryMode::AsInput, std::slice::from_ref(&s));
        assert!(m.params.names().iter().all(|n| !n.starts_with("dpatch")));
        let batch = batch_of(&m, &s, Some(&[5, 6]));
        let (v, _, _, lv) = loss_of(&m, &batch);
        assert!(lv.m.is_none());
        assert_eq!(v.m, 0.0);
    }

    #[test]
    fn fluorescence_residual_gradient_reaches_only_f() {
        let s = scene(10, &SceneRanges::default());
        let m = model(tiny_arch(), AncillaryMode::Regularized, std::slice::from_ref(&s));
        let batch = batch_of(&m, &s, Some(&[0, 1, 2]));
        let obs = m.observed_out(&batch).into_dyn();
        let em = &m.emulator;
        let n = batch.n_pixels();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut mid = |i: usize| em.input_lo[i] + rng.random_range(0.3..0.7) * (em.input_hi[i] - em.input_lo[i]);
        let mut draw = |idx: &[usize]| ArrayD::from_shape_fn(ndarray::IxDyn(&[n, idx.len()]), |d| mid(idx[d[1]]));
        let point = vec![
            draw(&SURFACE_IDX),
            draw(&[emulator::F740]),
            draw(&ATMO_IDX),
            draw(&[emulator::COS_SZA]),
            draw(&SENSOR_IDX),
        ];
        let build = |g: &mut Graph, v: &[Var]| {
            let o = g.constant(obs.clone());
            m.fluorescence_residual(g, o, [v[0], v[1], v[2], v[3], v[4]])
        };
        let mut g = Graph::new(0);
        let vars: Vec<Var> = point.iter().map(|p| g.leaf(p.clone())).collect();
        let out = build(&mut g, &vars).unwrap();
        let grads = g.backward(out).unwrap();
        for (i, &v) in vars.iter().enumerate() {
            let gr = grads.get_or_zeros(&g, v);
            if i == 1 {
                assert!(gr.iter().all(|&x| x != 0.0));
            } else {
                assert!(gr.iter().all(|&x| x == 0.0));
            }
        }
        let rep = grad_check(build, &point, &GradCheckOptions::default()).unwrap();
        assert!(rep.max_rel_err < 1e-5, "{rep:?}");
    }

    #[test]
    fn zero_perturbation_is_identity() {
        let s = scene(11, &SceneRanges::default());
        let m = model(tiny_arch(), AncillaryMode::Regularized, std::slice::from_ref(&s));
        let batch = batch_of(&m, &s, Some(&[0, 1, 2, 3]));
        let n = batch.n_pixels();
        let em = &m.emulator;
        let p = Array2::from_shape_fn((n, 9), |(i, j)| em.input_lo[j] + (0.2 + 0.1 * i as f64 / n as f64) * (em.input_hi[j] - em.input_lo[j]));
        let dl = m.perturbation_radiance(&p, &vec![0.0; n]);
        assert!(dl.iter().all(|&v| v == 0.0));
        assert_eq!(m.perturb_radiance(&batch.radiance, &dl), batch.radiance);
        let dl = m.perturbation_radiance(&p, &vec![0.5; n]);
        let moved = m.perturb_radiance(&batch.radiance, &dl);
        for b in 0..batch.radiance.ncols() {
            let same = moved.column(b) == batch.radiance.column(b);
            assert_eq!(same, !m.out_band_indices.contains(&b), "band {b}");
        }
    }

    #[test]
    fn full_loss_gradient_check() {
        let s = scene(12, &SceneRanges::default());
        let m = model(ArchConfig::desk(), AncillaryMode::Regularized, std::slice::from_ref(&s));
        let batch = batch_of(&m, &s, Some(&[4, 27, 63]));
        let names = m.params.names().to_vec();
        let point = m.params.values().to_vec();
        let build = |g: &mut Graph, v: &[Var]| {
            let b = Bound::from_vars(&names, v.to_vec());
            Ok(m.loss(g, &b, &batch, 17)?.1.total)
        };
        let opts = GradCheckOptions {
            max_per_input: Some(3),
            ..Default::default()
        };
        let rep = grad_check(build, &point, &opts).unwrap();
        assert!(rep.max_rel_err < 1e-4, "{rep:?} at {}", names[rep.worst.0]);
    }

    fn train_setup() -> (SfmnnModel, Vec<SceneCube>, Schedule) {
        let scenes = vec![scene(13, &SceneRanges::default())];
        let m = model(tiny_arch(), AncillaryMode::Regularized, &scenes);
        let sched = Schedule {
            epochs: 2,
            batch_patches: 2,
            pixels_per_patch: Some(8),
            ..Default::default()
        };
        (m, scenes, sched)
    }

    #[test]
    fn zero_epochs_leave_parameters() {
        let (mut m, scenes, mut sched) = train_setup();
        sched.epochs = 0;
        let before = m.params.clone();
        let rep = train(&mut m, &scenes, &sched).unwrap();
        assert!(rep.history.is_empty());
        assert_eq!(m.params, before);
    }

    #[test]
    fn training_is_reproducible_and_keeps_finit_frozen() {
        let (mut a, scenes, sched) = train_setup();
        let mut b = a.clone();
        let finit = a.finit.params.clone();
        let ra = train(&mut a, &scenes, &sched).unwrap();
        let rb = train(&mut b, &scenes, &sched).unwrap();
        assert_eq!(ra, rb);
        assert_eq!(a.params, b.params);
        assert_eq!(a.finit.params, finit);
        assert_eq!(ra.steps, 4);
    }

    #[test]
    fn checkpoint_round_trip() {
        let (m, scenes, _) = train_setup();
        let mut buf = Vec::new();
        m.all_params().write_to(&mut buf).unwrap();
        let params = ParamStore::read_from(&mut buf.as_slice()).unwrap();
        let back = SfmnnModel::from_parts(&m.manifest(), &params, m.emulator.clone()).unwrap();
        assert_eq!(infer_scene(&back, &scenes[0]).unwrap(), infer_scene(&m, &scenes[0]).unwrap());
    }

    fn f_only_dataset(n: usize, seed: u64) -> (Vec<Vec<f64>>, Vec<f64>) {
        let sensor = SensorModel::desis_window(1);
        let params = AtmosModelParams::default();
        let atmo = AtmoGeoState {
            aot550: 0.2,
            h2o: 1.5,
            sza: 35.0,
            raa: 90.0,
            ta: 2.0,
            h_gnd: 0.0,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|_| {
                let f = rng.random_range(0.0..4.0);
                let surf = SurfaceState {
                    rho740: 0.3,
                    s: 2e-3,
                    e: 0.0,
                    f740: f,
                };
                let rad = simulate_bands(&surf, &atmo, &SensorState::nominal(), &sensor, &params, None, &mut rng).unwrap();
                (raw_pixel_features(&rad, &[], &atmo, None), f)
            })
            .unzip()
    }

    #[test]
    fn finit_learns_identifiable_case() {
        let (rows, y) = f_only_dataset(1000, 1);
        let stats = FeatureStats::from_rows(&rows).unwrap();
        let x = Array2::from_shape_fn((rows.len(), stats.len()), |(i, j)| (rows[i][j] - stats.mean[j]) / stats.std[j]);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let cfg = MlpStackConfig::new(&[16], &[1], &[], Activation::Tanh);
        let mut net = FinitNet::new(cfg.clone(), stats.len(), 0.0, 4.0, &mut rng).unwrap();
        let sched = FinitSchedule {
            epochs: 60,
            batch: 50,
            lr: 5e-3,
            ..Default::default()
        };
        let rep = train_finit(&mut net, &x, &y, &sched).unwrap();
        assert!(rep.validation_rmse < 0.05, "{rep:?}");

        let mut shuffled = y.clone();
        shuffled.shuffle(&mut ChaCha8Rng::seed_from_u64(9));
        let mut net = FinitNet::new(cfg, stats.len(), 0.0, 4.0, &mut rng).unwrap();
        let rep = train_finit(&mut net, &x, &shuffled, &FinitSchedule { epochs: 10, ..sched }).unwrap();
        assert!((rep.validation_rmse / rep.label_std - 1.0).abs() < 0.25, "{rep:?}");
    }

    #[test]
    fn spectral_weights_peak_in_trough() {
        let centers = SensorModel::desis_window(1).out_band_centers();
        let w = default_spectral_weights(&centers);
        assert_eq!(w.iter().copied().fold(0.0, f64::max), 1.0);
        let peak = centers[w.iter().position(|&v| v == 1.0).unwrap()];
        assert!((peak - 760.6).abs() < 2.55);
        let bad = LossWeights {
            w_lambda: vec![1.0; 3],
            ..Default::default()
        };
        assert!(bad.spectral_weights(&centers).is_err());
        assert!(LossWeights { tau: 1.0, ..Default::default() }.validate().is_err());
        assert!(LossWeights { gamma_c: -1.0, ..Default::default() }.validate().is_err());
    }
}
