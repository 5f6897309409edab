//! Surrogate at-sensor radiance simulator for the O2-A window and synthetic
//! scene generation with ground truth.
//!
//! The at-sensor radiance on the high-resolution grid is
//!
//! ```text
//! L(λ) = [E0(λ) cos(sza) T↓(λ) ρ(λ) / π + f740 φ(λ)] T↑(λ)
//! ```
//!
//! with Beer-Lambert transmittances built from five Lorentzian O2 lines, an
//! Ångström aerosol term and a weak water-vapour continuum.

use std::f64::consts::PI;
use std::io::{Read, Write};

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::spectral::{
    fluorescence_shape, isrf_convolve, ndvi, reflectance_at, reflectance_curve, AtmoGeoState,
    SensorModel, SensorState, SurfaceState, NDVI_NIR_NM, NDVI_RED_NM,
    REFERENCE_NM,
};
use crate::{Error, Result};

/// Scale height used to thin the O2 column with ground elevation (km).
const O2_SCALE_HEIGHT_KM: f64 = 8.0;

/// Smallest accepted cosine of the sun zenith or view angle.
const MIN_COS: f64 = 0.05;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AtmosModelParams {
    pub o2_line_centers: Vec<f64>,
    /// Peak optical depth of each line at airmass 1.
    pub o2_line_strengths: Vec<f64>,
    /// Half width at half maximum of each line (nm).
    pub o2_line_widths: Vec<f64>,
    pub k_aer_ref: f64,
    pub angstrom_exp: f64,
    pub k_h2o: f64,
    /// E0(λ) = c0 + c1 (λ − 750) + c2 (λ − 750)².
    pub e0_coeffs: [f64; 3],
}

impl Default for AtmosModelParams {
    fn default() -> Self {
        Self {
            o2_line_centers: vec![759.4, 760.5, 761.6, 763.4, 765.9],
            o2_line_strengths: vec![0.7, 1.1, 0.8, 0.4, 0.2],
            o2_line_widths: vec![0.7, 0.9, 0.9, 1.1, 1.3],
            k_aer_ref: 1.0,
            angstrom_exp: 1.3,
            k_h2o: 1.0,
            e0_coeffs: [1250.0, -1.8, 0.0],
        }
    }
}

impl AtmosModelParams {
    pub fn validate(&self) -> Result<()> {
        let n = self.o2_line_centers.len();
        if self.o2_line_strengths.len() != n || self.o2_line_widths.len() != n {
            return Err(Error::InvalidArgument("O2 line tables differ in length".into()));
        }
        let nonneg = self
            .o2_line_strengths
            .iter()
            .chain(&self.o2_line_widths)
            .chain([&self.k_aer_ref, &self.k_h2o])
            .all(|&v| v >= 0.0);
        if !nonneg {
            return Err(Error::InvalidArgument("absorber strengths must be nonnegative".into()));
        }
        let in_band = self
            .o2_line_centers
            .iter()
            .filter(|&&c| (757.0..=768.0).contains(&c))
            .count();
        if in_band < 3 {
            return Err(Error::InvalidArgument("need at least 3 O2 lines in [757, 768] nm".into()));
        }
        Ok(())
    }

    pub fn solar_irradiance(&self, wavelength: f64) -> f64 {
        let d = wavelength - 750.0;
        self.e0_coeffs[0] + self.e0_coeffs[1] * d + self.e0_coeffs[2] * d * d
    }

    /// O2 optical depth at airmass 1 and sea level.
    pub fn o2_depth(&self, wavelength: f64) -> f64 {
        self.o2_line_centers
            .iter()
            .zip(&self.o2_line_strengths)
            .zip(&self.o2_line_widths)
            .map(|((&c, &s), &w)| {
                let z = (wavelength - c) / w;
                s / (1.0 + z * z)
            })
            .sum()
    }
}

/// Weak water-vapour absorption profile (per g cm⁻²).
pub fn water_profile(wavelength: f64) -> f64 {
    let z = (wavelength - 725.0) / 10.0;
    0.02 * (-z * z).exp() + 0.003
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Path {
    Down,
    Up,
}

/// Beer-Lambert transmittance along the illumination or viewing path.
pub fn transmittance(
    grid: &[f64],
    atmo: &AtmoGeoState,
    params: &AtmosModelParams,
    path: Path,
) -> Result<Vec<f64>> {
    let angle = match path {
        Path::Down => atmo.sza,
        Path::Up => atmo.ta,
    };
    let cos = angle.to_radians().cos();
    if cos <= MIN_COS {
        return Err(Error::GrazingAngle { cos });
    }
    let airmass = 1.0 / cos;
    let o2_scale = (-atmo.h_gnd / O2_SCALE_HEIGHT_KM).exp();
    Ok(grid
        .iter()
        .map(|&l| {
            let tau = params.o2_depth(l) * o2_scale
                + params.k_aer_ref * (l / 550.0).powf(-params.angstrom_exp) * atmo.aot550
                + params.k_h2o * atmo.h2o * water_profile(l);
            (-airmass * tau).exp()
        })
        .collect())
}

/// Path terms of one atmospheric state on a fixed grid, reusable across the
/// pixels of a patch.
#[derive(Debug, Clone)]
pub struct PathTerms {
    /// E0 cos(sza) T↓ T↑ / π: multiplies reflectance.
    pub reflected: Vec<f64>,
    /// φ T↑: multiplies f740.
    pub emitted: Vec<f64>,
}

impl PathTerms {
    pub fn new(grid: &[f64], atmo: &AtmoGeoState, params: &AtmosModelParams) -> Result<Self> {
        let down = transmittance(grid, atmo, params, Path::Down)?;
        let up = transmittance(grid, atmo, params, Path::Up)?;
        let cos_sza = atmo.sza.to_radians().cos();
        let phi = fluorescence_shape(grid);
        let reflected = grid
            .iter()
            .zip(down.iter().zip(&up))
            .map(|(&l, (d, u))| params.solar_irradiance(l) * cos_sza * d * u / PI)
            .collect();
        let emitted = phi.iter().zip(&up).map(|(p, u)| p * u).collect();
        Ok(Self { reflected, emitted })
    }

    pub fn radiance(&self, surf: &SurfaceState, grid: &[f64]) -> Vec<f64> {
        grid.iter()
            .zip(self.reflected.iter().zip(&self.emitted))
            .map(|(&l, (r, e))| (r * reflectance_at(surf, l) + surf.f740 * e).max(0.0))
            .collect()
    }
}

pub fn simulate_highres(
    surf: &SurfaceState,
    atmo: &AtmoGeoState,
    params: &AtmosModelParams,
    grid: &[f64],
) -> Result<Vec<f64>> {
    let down = transmittance(grid, atmo, params, Path::Down)?;
    let up = transmittance(grid, atmo, params, Path::Up)?;
    let rho = reflectance_curve(surf, grid);
    let phi = fluorescence_shape(grid);
    let cos_sza = atmo.sza.to_radians().cos();
    Ok((0..grid.len())
        .map(|i| {
            let reflected = params.solar_irradiance(grid[i]) * cos_sza * down[i] * rho[i] / PI;
            ((reflected + surf.f740 * phi[i]) * up[i]).max(0.0)
        })
        .collect())
}

/// Adds zero-mean Gaussian noise with per-band standard deviation value/snr.
/// An infinite SNR adds nothing.
pub fn add_noise<R: Rng>(bands: &mut [f64], snr: f64, rng: &mut R) {
    if !snr.is_finite() {
        return;
    }
    for v in bands.iter_mut() {
        let z: f64 = rng.sample(rand_distr::StandardNormal);
        *v += z * *v / snr;
    }
}

pub fn simulate_bands<R: Rng>(
    surf: &SurfaceState,
    atmo: &AtmoGeoState,
    sensor_state: &SensorState,
    sensor: &SensorModel,
    params: &AtmosModelParams,
    noise_snr: Option<f64>,
    rng: &mut R,
) -> Result<Vec<f64>> {
    let hr = simulate_highres(surf, atmo, params, &sensor.highres_grid)?;
    let mut bands = isrf_convolve(&hr, sensor, sensor_state)?;
    if let Some(snr) = noise_snr {
        add_noise(&mut bands, snr, rng);
    }
    Ok(bands)
}

/// Closed sampling interval.
pub type Range = (f64, f64);

/// Sampling ranges and noise levels for synthetic scenes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SceneRanges {
    pub rho740: Range,
    pub s: Range,
    pub e: Range,
    pub f740: Range,
    pub aot550: Range,
    pub h2o: Range,
    pub sza: Range,
    pub raa: Range,
    pub ta: Range,
    pub h_gnd: Range,
    pub dlambda: Range,
    pub dsigma: Range,
    /// Fraction of bare-soil pixels (f740 = 0, NDVI below `ndvi_tau`).
    pub fraction_bare: f64,
    pub ndvi_tau: f64,
    /// Vegetated pixels keep NDVI above tau + margin, bare ones below tau − margin.
    pub ndvi_margin: f64,
    /// Weight in [0, 1] tying vegetated f740 to ρ780; 0 samples them independently.
    pub confound: f64,
    pub snr: f64,
    pub ancillary_aot_std: f64,
    pub ancillary_h2o_std: f64,
    pub l2a_std: f64,
    /// Seed of the per-acquisition ISRF drift; combined with the acquisition id.
    pub drift_seed: u64,
}

impl Default for SceneRanges {
    fn default() -> Self {
        Self {
            rho740: (0.05, 0.6),
            s: (-2e-3, 4e-3),
            e: (-4e-5, 4e-5),
            f740: (0.0, 4.0),
            aot550: (0.05, 0.6),
            h2o: (0.5, 3.5),
            sza: (20.0, 50.0),
            raa: (0.0, 180.0),
            ta: (0.0, 5.0),
            h_gnd: (0.0, 0.05),
            dlambda: (-0.3, 0.3),
            dsigma: (-0.15, 0.15),
            fraction_bare: 0.2,
            ndvi_tau: 0.15,
            ndvi_margin: 0.05,
            confound: 0.0,
            snr: 200.0,
            ancillary_aot_std: 0.05,
            ancillary_h2o_std: 0.2,
            l2a_std: 0.005,
            drift_seed: 7,
        }
    }
}

impl SceneRanges {
    pub fn validate(&self) -> Result<()> {
        let named = [
            ("rho740", self.rho740),
            ("s", self.s),
            ("e", self.e),
            ("f740", self.f740),
            ("aot550", self.aot550),
            ("h2o", self.h2o),
            ("sza", self.sza),
            ("raa", self.raa),
            ("ta", self.ta),
            ("h_gnd", self.h_gnd),
            ("dlambda", self.dlambda),
            ("dsigma", self.dsigma),
        ];
        for (name, (lo, hi)) in named {
            if !(lo <= hi) || !lo.is_finite() || !hi.is_finite() {
                return Err(Error::InvalidArgument(format!("range for {name} is invalid: [{lo}, {hi}]")));
            }
        }
        if self.rho740.0 < 0.0 || self.rho740.1 > 1.0 || self.f740.0 < 0.0 {
            return Err(Error::InvalidArgument("reflectance or fluorescence range out of bounds".into()));
        }
        if self.aot550.0 < 0.0 || self.h2o.0 < 0.0 || self.h_gnd.0 < 0.0 {
            return Err(Error::InvalidArgument("atmospheric ranges must be nonnegative".into()));
        }
        if self.sza.0 < 0.0 || self.sza.1 > 80.0 || self.ta.0 < 0.0 || self.ta.1 > 80.0 {
            return Err(Error::InvalidArgument("angles must lie in [0, 80] deg".into()));
        }
        if !(0.0..=1.0).contains(&self.fraction_bare) || !(0.0..=1.0).contains(&self.confound) {
            return Err(Error::InvalidArgument("fraction_bare and confound must lie in [0, 1]".into()));
        }
        if !(self.snr > 0.0) {
            return Err(Error::InvalidArgument("snr must be positive".into()));
        }
        if self.ancillary_aot_std < 0.0 || self.ancillary_h2o_std < 0.0 || self.l2a_std < 0.0 {
            return Err(Error::InvalidArgument("noise levels must be nonnegative".into()));
        }
        Ok(())
    }
}

fn uniform<R: Rng>(rng: &mut R, (lo, hi): Range) -> f64 {
    if hi > lo {
        rng.random_range(lo..hi)
    } else {
        lo
    }
}

fn round32(v: f64) -> f64 {
    v as f32 as f64
}

/// True NDVI proxy of a surface from the red and NIR proxy wavelengths.
pub fn surface_ndvi(surf: &SurfaceState) -> f64 {
    let red = reflectance_at(surf, NDVI_RED_NM);
    let nir = reflectance_at(surf, NDVI_NIR_NM);
    ndvi(red, nir).unwrap_or(0.0)
}

/// Reflectance bounds a sampled surface must respect over the sensor span.
pub const SURFACE_RHO_MIN: f64 = 0.01;
pub const SURFACE_RHO_MAX: f64 = 0.95;

/// True if the unclamped reflectance curve stays inside
/// [SURFACE_RHO_MIN, SURFACE_RHO_MAX] on [lo_nm, hi_nm].
pub fn surface_in_range(surf: &SurfaceState, lo_nm: f64, hi_nm: f64) -> bool {
    let raw = |wl: f64| {
        let d = wl - REFERENCE_NM;
        surf.rho740 + surf.s * d + surf.e * d * d
    };
    let mut probes = vec![lo_nm, hi_nm];
    if surf.e != 0.0 {
        let vertex = REFERENCE_NM - surf.s / (2.0 * surf.e);
        if vertex > lo_nm && vertex < hi_nm {
            probes.push(vertex);
        }
    }
    probes.into_iter().map(raw).all(|r| (SURFACE_RHO_MIN..=SURFACE_RHO_MAX).contains(&r))
}

/// Wavelength span checked by [`surface_in_range`] during sampling.
pub const SURFACE_SPAN_NM: (f64, f64) = (700.0, 800.0);

/// Samples one pixel's surface; bare pixels carry no fluorescence.
pub fn sample_surface<R: Rng>(rng: &mut R, ranges: &SceneRanges, bare: bool) -> Result<SurfaceState> {
    for _ in 0..10_000 {
        let mut surf = SurfaceState {
            rho740: uniform(rng, ranges.rho740),
            s: uniform(rng, ranges.s),
            e: uniform(rng, ranges.e),
            f740: 0.0,
        };
        if !surface_in_range(&surf, SURFACE_SPAN_NM.0, SURFACE_SPAN_NM.1) {
            continue;
        }
        let v = surface_ndvi(&surf);
        let accept = if bare {
            v < ranges.ndvi_tau - ranges.ndvi_margin
        } else {
            v > ranges.ndvi_tau + ranges.ndvi_margin
        };
        if !accept {
            continue;
        }
        if !bare {
            let independent = uniform(rng, ranges.f740);
            let rho780 = reflectance_at(&surf, NDVI_NIR_NM);
            let t = ((rho780 - ranges.rho740.0) / (ranges.rho740.1 + 0.2 - ranges.rho740.0)).clamp(0.0, 1.0);
            let tied = ranges.f740.0 + t * (ranges.f740.1 - ranges.f740.0);
            surf.f740 = ranges.confound * tied + (1.0 - ranges.confound) * independent;
        }
        return Ok(surf);
    }
    Err(Error::InvalidArgument(format!(
        "surface ranges cannot produce {} pixels",
        if bare { "bare" } else { "vegetated" }
    )))
}

pub fn sample_atmo<R: Rng>(rng: &mut R, ranges: &SceneRanges) -> AtmoGeoState {
    AtmoGeoState {
        aot550: uniform(rng, ranges.aot550),
        h2o: uniform(rng, ranges.h2o),
        sza: uniform(rng, ranges.sza),
        raa: uniform(rng, ranges.raa),
        ta: uniform(rng, ranges.ta),
        h_gnd: uniform(rng, ranges.h_gnd),
    }
}

/// ISRF drift of acquisition `u`: a quadratic in the across-track position,
/// confined to the configured Δλ and Δσ ranges.
pub fn acquisition_drift(u: u32, width: usize, ranges: &SceneRanges) -> Vec<SensorState> {
    let mut rng = ChaCha8Rng::seed_from_u64(ranges.drift_seed.wrapping_mul(0x9E37_79B9).wrapping_add(u as u64));
    let mut poly = |(lo, hi): Range| {
        let mid = 0.5 * (lo + hi);
        let half = 0.5 * (hi - lo);
        let a0: f64 = rng.random_range(-0.5..=0.5);
        let a1: f64 = rng.random_range(-0.3..=0.3);
        let a2: f64 = rng.random_range(-0.2..=0.2);
        (mid, half * a0, half * a1, half * a2)
    };
    let dl = poly(ranges.dlambda);
    let ds = poly(ranges.dsigma);
    (0..width)
        .map(|x| {
            let t = if width > 1 { 2.0 * x as f64 / (width - 1) as f64 - 1.0 } else { 0.0 };
            let eval = |(m, a0, a1, a2): (f64, f64, f64, f64)| m + a0 + a1 * t + a2 * t * t;
            SensorState {
                dlambda: round32(eval(dl)),
                dsigma: round32(eval(ds)),
                u,
                x,
            }
        })
        .collect()
}

/// A synthetic acquisition with ground truth. Numeric planes are stored at
/// 32-bit precision so that the SIFC file round trip is exact.
#[derive(Debug, Clone, PartialEq)]
pub struct SceneCube {
    pub height: usize,
    pub width: usize,
    pub patch_size: usize,
    /// Acquisition identifier shared by scenes of the same date.
    pub u: u32,
    pub band_centers: Vec<f64>,
    /// Row-major pixels, band-contiguous: `[(row * width + col) * bands + b]`.
    pub radiance: Vec<f32>,
    pub truth_surface: Vec<SurfaceState>,
    /// Row-major patch grid.
    pub truth_atmo: Vec<AtmoGeoState>,
    /// One entry per across-track column.
    pub truth_sensor: Vec<SensorState>,
    pub l2a_wavelengths: Vec<f64>,
    /// `[(row * width + col) * n_l2a + k]`.
    pub l2a_reflectance: Vec<f32>,
    pub ancillary_aot: Vec<f32>,
    pub ancillary_h2o: Vec<f32>,
}

impl SceneCube {
    pub fn n_bands(&self) -> usize {
        self.band_centers.len()
    }

    pub fn n_pixels(&self) -> usize {
        self.height * self.width
    }

    pub fn n_l2a(&self) -> usize {
        self.l2a_wavelengths.len()
    }

    pub fn patches_across(&self) -> usize {
        self.width / self.patch_size
    }

    pub fn n_patches(&self) -> usize {
        (self.height / self.patch_size) * (self.width / self.patch_size)
    }

    pub fn patch_of(&self, row: usize, col: usize) -> usize {
        (row / self.patch_size) * self.patches_across() + col / self.patch_size
    }

    /// Pixel indices (row-major) of one patch.
    pub fn patch_pixels(&self, patch: usize) -> Vec<usize> {
        let pr = patch / self.patches_across();
        let pc = patch % self.patches_across();
        let ps = self.patch_size;
        (0..ps)
            .flat_map(|r| (0..ps).map(move |c| (pr * ps + r) * self.width + pc * ps + c))
            .collect()
    }

    pub fn pixel_radiance(&self, pixel: usize) -> &[f32] {
        let b = self.n_bands();
        &self.radiance[pixel * b..(pixel + 1) * b]
    }

    pub fn pixel_l2a(&self, pixel: usize) -> &[f32] {
        let k = self.n_l2a();
        &self.l2a_reflectance[pixel * k..(pixel + 1) * k]
    }

    /// NDVI from the L2A red and NIR proxy reflectances.
    pub fn pixel_ndvi(&self, pixel: usize) -> f64 {
        let l2a = self.pixel_l2a(pixel);
        let k = l2a.len();
        ndvi(l2a[k - 2] as f64, l2a[k - 1] as f64).unwrap_or(0.0)
    }

    /// L2A reflectance at 780 nm.
    pub fn pixel_rho780(&self, pixel: usize) -> f64 {
        let l2a = self.pixel_l2a(pixel);
        l2a[l2a.len() - 1] as f64
    }

    pub fn truth_f740(&self) -> Vec<f64> {
        self.truth_surface.iter().map(|s| s.f740).collect()
    }

    pub fn write_to<W: Write>(&self, w: &mut W) -> Result<()> {
        w.write_all(SIFC_MAGIC)?;
        w.write_u16::<LittleEndian>(SIFC_VERSION)?;
        for d in [self.height, self.width, self.n_bands(), self.patch_size] {
            w.write_u32::<LittleEndian>(d as u32)?;
        }
        w.write_u32::<LittleEndian>(self.u)?;
        w.write_u32::<LittleEndian>(self.n_l2a() as u32)?;
        let mut put = |vals: &mut dyn Iterator<Item = f64>| -> Result<()> {
            for v in vals {
                w.write_f32::<LittleEndian>(v as f32)?;
            }
            Ok(())
        };
        put(&mut self.band_centers.iter().copied())?;
        put(&mut self.l2a_wavelengths.iter().copied())?;
        put(&mut self.radiance.iter().map(|&v| v as f64))?;
        put(&mut self.truth_surface.iter().map(|s| s.rho740))?;
        put(&mut self.truth_surface.iter().map(|s| s.s))?;
        put(&mut self.truth_surface.iter().map(|s| s.e))?;
        put(&mut self.truth_surface.iter().map(|s| s.f740))?;
        put(&mut self.truth_atmo.iter().map(|a| a.aot550))?;
        put(&mut self.truth_atmo.iter().map(|a| a.h2o))?;
        put(&mut self.truth_atmo.iter().map(|a| a.sza))?;
        put(&mut self.truth_atmo.iter().map(|a| a.raa))?;
        put(&mut self.truth_atmo.iter().map(|a| a.ta))?;
        put(&mut self.truth_atmo.iter().map(|a| a.h_gnd))?;
        put(&mut self.truth_sensor.iter().map(|s| s.dlambda))?;
        put(&mut self.truth_sensor.iter().map(|s| s.dsigma))?;
        put(&mut self.l2a_reflectance.iter().map(|&v| v as f64))?;
        put(&mut self.ancillary_aot.iter().map(|&v| v as f64))?;
        put(&mut self.ancillary_h2o.iter().map(|&v| v as f64))?;
        Ok(())
    }

    pub fn read_from<R: Read>(r: &mut R) -> Result<Self> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != SIFC_MAGIC {
            return Err(Error::Format("not a SIFC scene file".into()));
        }
        let version = r.read_u16::<LittleEndian>()?;
        if version != SIFC_VERSION {
            return Err(Error::Format(format!("unsupported SIFC version {version}")));
        }
        let mut dims = [0usize; 6];
        for d in dims.iter_mut() {
            *d = r.read_u32::<LittleEndian>()? as usize;
        }
        let [height, width, bands, patch_size, u, n_l2a] = dims;
        if patch_size == 0 || height % patch_size != 0 || width % patch_size != 0 {
            return Err(Error::Format("scene dimensions are not multiples of the patch size".into()));
        }
        let n_px = height * width;
        let n_patch = (height / patch_size) * (width / patch_size);
        let mut get = |n: usize| -> Result<Vec<f32>> {
            let mut v = vec![0f32; n];
            r.read_f32_into::<LittleEndian>(&mut v)?;
            Ok(v)
        };
        let wide = |v: Vec<f32>| -> Vec<f64> { v.into_iter().map(f64::from).collect() };
        let band_centers = wide(get(bands)?);
        let l2a_wavelengths = wide(get(n_l2a)?);
        let radiance = get(n_px * bands)?;
        let rho = wide(get(n_px)?);
        let s = wide(get(n_px)?);
        let e = wide(get(n_px)?);
        let f = wide(get(n_px)?);
        let aot = wide(get(n_patch)?);
        let h2o = wide(get(n_patch)?);
        let sza = wide(get(n_patch)?);
        let raa = wide(get(n_patch)?);
        let ta = wide(get(n_patch)?);
        let h_gnd = wide(get(n_patch)?);
        let dl = wide(get(width)?);
        let ds = wide(get(width)?);
        let l2a_reflectance = get(n_px * n_l2a)?;
        let ancillary_aot = get(n_patch)?;
        let ancillary_h2o = get(n_patch)?;
        Ok(Self {
            height,
            width,
            patch_size,
            u: u as u32,
            band_centers,
            radiance,
            truth_surface: (0..n_px)
                .map(|i| SurfaceState {
                    rho740: rho[i],
                    s: s[i],
                    e: e[i],
                    f740: f[i],
                })
                .collect(),
            truth_atmo: (0..n_patch)
                .map(|i| AtmoGeoState {
                    aot550: aot[i],
                    h2o: h2o[i],
                    sza: sza[i],
                    raa: raa[i],
                    ta: ta[i],
                    h_gnd: h_gnd[i],
                })
                .collect(),
            truth_sensor: (0..width)
                .map(|x| SensorState {
                    dlambda: dl[x],
                    dsigma: ds[x],
                    u: u as u32,
                    x,
                })
                .collect(),
            l2a_wavelengths,
            l2a_reflectance,
            ancillary_aot,
            ancillary_h2o,
        })
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
        self.write_to(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let mut r = std::io::BufReader::new(std::fs::File::open(path)?);
        Self::read_from(&mut r)
    }
}

pub const SIFC_MAGIC: &[u8; 4] = b"SIFC";
pub const SIFC_VERSION: u16 = 1;

/// Geometry and identity of a synthetic scene.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub height: usize,
    pub width: usize,
    pub patch_size: usize,
    pub seed: u64,
    pub acquisition: u32,
}

pub fn make_scene(
    spec: &SceneSpec,
    ranges: &SceneRanges,
    params: &AtmosModelParams,
    sensor: &SensorModel,
) -> Result<SceneCube> {
    let SceneSpec {
        height,
        width,
        patch_size,
        seed,
        acquisition,
    } = *spec;
    if patch_size == 0 || height == 0 || width == 0 || height % patch_size != 0 || width % patch_size != 0 {
        return Err(Error::InvalidArgument(format!(
            "scene {height}x{width} is not a multiple of patch size {patch_size}"
        )));
    }
    ranges.validate()?;
    params.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let grid = &sensor.highres_grid;
    let n_px = height * width;
    let n_bands = sensor.n_bands();
    let l2a_wavelengths = sensor.l2a_wavelengths();
    let n_l2a = l2a_wavelengths.len();
    let patches_across = width / patch_size;
    let n_patch = (height / patch_size) * patches_across;

    let truth_sensor = acquisition_drift(acquisition, width, ranges);
    let truth_atmo: Vec<AtmoGeoState> = (0..n_patch)
        .map(|_| {
            let a = sample_atmo(&mut rng, ranges);
            AtmoGeoState {
                aot550: round32(a.aot550),
                h2o: round32(a.h2o),
                sza: round32(a.sza),
                raa: round32(a.raa),
                ta: round32(a.ta),
                h_gnd: round32(a.h_gnd),
            }
        })
        .collect();
    let terms = truth_atmo
        .iter()
        .map(|a| PathTerms::new(grid, a, params))
        .collect::<Result<Vec<_>>>()?;

    let mut truth_surface = Vec::with_capacity(n_px);
    for _ in 0..n_px {
        let bare = rng.random::<f64>() < ranges.fraction_bare;
        let s = sample_surface(&mut rng, ranges, bare)?;
        truth_surface.push(SurfaceState {
            rho740: round32(s.rho740),
            s: round32(s.s),
            e: round32(s.e),
            f740: round32(s.f740),
        });
    }

    let mut radiance = Vec::with_capacity(n_px * n_bands);
    let mut l2a_reflectance = Vec::with_capacity(n_px * n_l2a);
    let l2a_noise = Normal::new(0.0, ranges.l2a_std.max(0.0)).expect("finite std");
    for row in 0..height {
        for col in 0..width {
            let px = row * width + col;
            let patch = (row / patch_size) * patches_across + col / patch_size;
            let surf = &truth_surface[px];
            let hr = terms[patch].radiance(surf, grid);
            let mut bands = isrf_convolve(&hr, sensor, &truth_sensor[col])?;
            add_noise(&mut bands, ranges.snr, &mut rng);
            radiance.extend(bands.iter().map(|&v| v.max(0.0) as f32));
            for &l in &l2a_wavelengths {
                let v = reflectance_at(surf, l) + l2a_noise.sample(&mut rng);
                l2a_reflectance.push(v.clamp(0.0, 1.0) as f32);
            }
        }
    }

    let aot_noise = Normal::new(0.0, ranges.ancillary_aot_std).expect("finite std");
    let h2o_noise = Normal::new(0.0, ranges.ancillary_h2o_std).expect("finite std");
    let ancillary_aot = truth_atmo
        .iter()
        .map(|a| (a.aot550 + aot_noise.sample(&mut rng)).max(0.0) as f32)
        .collect();
    let ancillary_h2o = truth_atmo
        .iter()
        .map(|a| (a.h2o + h2o_noise.sample(&mut rng)).max(0.0) as f32)
        .collect();

    Ok(SceneCube {
        height,
        width,
        patch_size,
        u: acquisition,
        band_centers: sensor.band_centers.iter().map(|&c| round32(c)).collect(),
        radiance,
        truth_surface,
        truth_atmo,
        truth_sensor,
        l2a_wavelengths: l2a_wavelengths.iter().map(|&c| round32(c)).collect(),
        l2a_reflectance,
        ancillary_aot,
        ancillary_h2o,
    })
}
