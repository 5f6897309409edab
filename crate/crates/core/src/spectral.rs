//! Spectral grids, the Gaussian instrument spectral response function (ISRF),
//! surface reflectance and fluorescence shapes.
//!
//! Wavelengths are in nm, radiances in mW nm⁻¹ sr⁻¹ m⁻².

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Conversion factor between the FWHM of a Gaussian and its standard deviation.
pub const FWHM_PER_SIGMA: f64 = 2.355;

/// Lower and upper edge of the emulator output window.
pub const OUT_WINDOW: (f64, f64) = (740.0, 780.0);

/// Reference wavelength of the surface and fluorescence parameterization.
pub const REFERENCE_NM: f64 = 740.0;

/// Width of the fixed Gaussian fluorescence emission shape.
pub const FLUORESCENCE_SIGMA_NM: f64 = 25.0;

/// Red and near-infrared wavelengths used for the NDVI proxy.
pub const NDVI_RED_NM: f64 = 700.35;
pub const NDVI_NIR_NM: f64 = 780.0;

/// Half width of the ISRF support in units of its standard deviation.
pub const ISRF_TRUNCATION: f64 = 4.0;

/// The imaging spectrometer: band grid, nominal ISRF and output window.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SensorModel {
    pub band_centers: Vec<f64>,
    pub ssi: f64,
    pub fwhm: f64,
    pub out_band_indices: Vec<usize>,
    pub across_track_width: usize,
    pub highres_grid: Vec<f64>,
}

impl SensorModel {
    /// Regular band grid starting at `first_center` with `n_bands` bands spaced
    /// by `ssi`, and a high-resolution grid of step `highres_step` that covers
    /// every band's truncated ISRF with `margin` nm to spare.
    pub fn new(
        first_center: f64,
        ssi: f64,
        n_bands: usize,
        fwhm: f64,
        across_track_width: usize,
        highres_step: f64,
        margin: f64,
    ) -> Result<Self> {
        if n_bands == 0 || ssi <= 0.0 || fwhm <= 0.0 || highres_step <= 0.0 {
            return Err(Error::InvalidArgument(
                "sensor needs positive band count, ssi, fwhm and grid step".into(),
            ));
        }
        let band_centers: Vec<f64> = (0..n_bands).map(|i| first_center + ssi * i as f64).collect();
        let out_band_indices = band_centers
            .iter()
            .enumerate()
            .filter(|(_, &c)| c >= OUT_WINDOW.0 && c <= OUT_WINDOW.1)
            .map(|(i, _)| i)
            .collect();
        let lo = band_centers[0] - margin;
        let hi = band_centers[n_bands - 1] + margin;
        let n_hr = ((hi - lo) / highres_step).round() as usize + 1;
        let highres_grid = (0..n_hr).map(|i| lo + highres_step * i as f64).collect();
        let sensor = Self {
            band_centers,
            ssi,
            fwhm,
            out_band_indices,
            across_track_width,
            highres_grid,
        };
        sensor.validate()?;
        Ok(sensor)
    }

    /// DESIS sampling (SSI 2.55 nm, FWHM 3.55 nm) restricted to the
    /// 700-800 nm retrieval window: 40 bands from 700.35 nm.
    pub fn desis_window(across_track_width: usize) -> Self {
        Self::new(700.35, 2.55, 40, 3.55, across_track_width, 0.05, 10.0)
            .expect("default sensor is valid")
    }

    pub fn validate(&self) -> Result<()> {
        for w in self.band_centers.windows(2) {
            if ((w[1] - w[0]) - self.ssi).abs() > 1e-9 {
                return Err(Error::InvalidArgument(format!(
                    "band spacing {} differs from ssi {}",
                    w[1] - w[0],
                    self.ssi
                )));
            }
        }
        for (i, &c) in self.band_centers.iter().enumerate() {
            let inside = c >= OUT_WINDOW.0 && c <= OUT_WINDOW.1;
            if inside != self.out_band_indices.contains(&i) {
                return Err(Error::InvalidArgument(format!(
                    "band {i} at {c} nm inconsistent with the output window"
                )));
            }
        }
        let max_step = self
            .highres_grid
            .windows(2)
            .map(|w| w[1] - w[0])
            .fold(0.0, f64::max);
        if max_step > self.ssi / 10.0 + 1e-12 {
            return Err(Error::InvalidArgument(format!(
                "high-resolution step {max_step} exceeds ssi/10"
            )));
        }
        Ok(())
    }

    pub fn n_bands(&self) -> usize {
        self.band_centers.len()
    }

    pub fn n_out(&self) -> usize {
        self.out_band_indices.len()
    }

    pub fn out_band_centers(&self) -> Vec<f64> {
        self.out_band_indices.iter().map(|&i| self.band_centers[i]).collect()
    }

    /// Nominal ISRF standard deviation.
    pub fn sigma(&self) -> f64 {
        self.fwhm / FWHM_PER_SIGMA
    }

    /// Wavelengths carried by the L2A reflectance layer: the output-window
    /// bands followed by the red and NIR NDVI proxies.
    pub fn l2a_wavelengths(&self) -> Vec<f64> {
        let mut w = self.out_band_centers();
        w.push(NDVI_RED_NM);
        w.push(NDVI_NIR_NM);
        w
    }
}

/// Surface reflectance and fluorescence at one pixel.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SurfaceState {
    pub rho740: f64,
    /// Reflectance slope (nm⁻¹).
    pub s: f64,
    /// Reflectance curvature (nm⁻²).
    pub e: f64,
    pub f740: f64,
}

/// Atmospheric and geometric state, constant over a patch.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AtmoGeoState {
    pub aot550: f64,
    /// Column water vapour (g cm⁻²).
    pub h2o: f64,
    /// Sun zenith angle (deg).
    pub sza: f64,
    /// Relative azimuth angle (deg).
    pub raa: f64,
    /// Tilt (view) angle (deg).
    pub ta: f64,
    /// Ground elevation (km).
    pub h_gnd: f64,
}

impl AtmoGeoState {
    pub fn validate(&self) -> Result<()> {
        let ok = self.aot550 >= 0.0
            && self.h2o >= 0.0
            && (0.0..=80.0).contains(&self.sza)
            && self.h_gnd >= 0.0
            && self.sza.to_radians().cos() > 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidArgument(format!("atmospheric state out of range: {self:?}")))
        }
    }
}

/// ISRF perturbation of one across-track column of one acquisition.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct SensorState {
    pub dlambda: f64,
    pub dsigma: f64,
    pub u: u32,
    pub x: usize,
}

impl SensorState {
    pub fn nominal() -> Self {
        Self::default()
    }

    pub fn shifted(dlambda: f64, dsigma: f64) -> Self {
        Self {
            dlambda,
            dsigma,
            ..Self::default()
        }
    }
}

/// Reflectance at one wavelength: quadratic in (λ − 740) clamped to [0, 1].
pub fn reflectance_at(surf: &SurfaceState, wavelength: f64) -> f64 {
    let d = wavelength - REFERENCE_NM;
    (surf.rho740 + surf.s * d + surf.e * d * d).clamp(0.0, 1.0)
}

pub fn reflectance_curve(surf: &SurfaceState, grid: &[f64]) -> Vec<f64> {
    grid.iter().map(|&l| reflectance_at(surf, l)).collect()
}

/// Unit fluorescence emission shape φ(λ); φ(740) = 1.
pub fn fluorescence_at(wavelength: f64) -> f64 {
    let z = (wavelength - REFERENCE_NM) / FLUORESCENCE_SIGMA_NM;
    (-0.5 * z * z).exp()
}

pub fn fluorescence_shape(grid: &[f64]) -> Vec<f64> {
    grid.iter().map(|&l| fluorescence_at(l)).collect()
}

/// Discrete ISRF weights of one band: the grid index of the first weight and
/// the weights themselves, normalized to sum to one.
pub fn isrf_weights(grid: &[f64], center: f64, sigma: f64) -> (usize, Vec<f64>) {
    let lo = center - ISRF_TRUNCATION * sigma;
    let hi = center + ISRF_TRUNCATION * sigma;
    let start = grid.partition_point(|&l| l < lo);
    let end = grid.partition_point(|&l| l <= hi);
    let mut w: Vec<f64> = grid[start..end]
        .iter()
        .map(|&l| {
            let z = (l - center) / sigma;
            (-0.5 * z * z).exp()
        })
        .collect();
    let total: f64 = w.iter().sum();
    w.iter_mut().for_each(|v| *v /= total);
    (start, w)
}

/// Convolves a high-resolution spectrum sampled on `sensor.highres_grid`
/// with the (shifted, widened) Gaussian ISRF of every band.
pub fn isrf_convolve(spectrum_hr: &[f64], sensor: &SensorModel, state: &SensorState) -> Result<Vec<f64>> {
    isrf_convolve_on(spectrum_hr, &sensor.highres_grid, &sensor.band_centers, sensor.sigma(), state)
}

/// Same as [`isrf_convolve`] on an explicit grid and band list.
pub fn isrf_convolve_on(
    spectrum_hr: &[f64],
    grid: &[f64],
    band_centers: &[f64],
    nominal_sigma: f64,
    state: &SensorState,
) -> Result<Vec<f64>> {
    if spectrum_hr.len() != grid.len() {
        return Err(Error::Shape {
            op: "isrf_convolve",
            detail: format!("spectrum has {} samples, grid {}", spectrum_hr.len(), grid.len()),
        });
    }
    let sigma = nominal_sigma + state.dsigma;
    if sigma <= 0.0 {
        return Err(Error::InvalidArgument(format!("non-positive ISRF width {sigma}")));
    }
    let (g0, g1) = match (grid.first(), grid.last()) {
        (Some(&a), Some(&b)) => (a, b),
        _ => return Err(Error::Empty("high-resolution grid")),
    };
    band_centers
        .iter()
        .enumerate()
        .map(|(band, &bc)| {
            let center = bc + state.dlambda;
            let need_lo = center - ISRF_TRUNCATION * sigma;
            let need_hi = center + ISRF_TRUNCATION * sigma;
            if need_lo < g0 || need_hi > g1 {
                return Err(Error::InsufficientCoverage {
                    band,
                    center,
                    need_lo,
                    need_hi,
                });
            }
            let (start, w) = isrf_weights(grid, center, sigma);
            Ok(w.iter().zip(&spectrum_hr[start..]).map(|(a, b)| a * b).sum())
        })
        .collect()
}

pub fn ndvi(red: f64, nir: f64) -> Result<f64> {
    let total = nir + red;
    if total == 0.0 {
        return Err(Error::InvalidArgument("ndvi of zero reflectance".into()));
    }
    Ok((nir - red) / total)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn surf(rho740: f64, s: f64, e: f64) -> SurfaceState {
        SurfaceState { rho740, s, e, f740: 0.0 }
    }

    #[test]
    fn reflectance_examples() {
        assert_eq!(reflectance_curve(&surf(0.5, 0.0, 0.0), &[760.0]), vec![0.5]);
        assert!((reflectance_at(&surf(0.5, 0.01, 0.0), 750.0) - 0.6).abs() < 1e-12);
        assert_eq!(reflectance_at(&surf(0.99, 0.01, 0.0), 780.0), 1.0);
        assert_eq!(reflectance_at(&surf(0.01, -0.01, 0.0), 780.0), 0.0);
    }

    #[test]
    fn fluorescence_examples() {
        assert_eq!(fluorescence_at(740.0), 1.0);
        assert!((fluorescence_at(765.0) - (-0.5f64).exp()).abs() < 1e-15);
        let z: f64 = 20.6 / 25.0;
        assert!((fluorescence_at(760.6) - (-0.5 * z * z).exp()).abs() < 1e-15);
    }

    #[test]
    fn default_sensor_layout() {
        let s = SensorModel::desis_window(30);
        assert_eq!(s.n_bands(), 40);
        assert_eq!(s.n_out(), 16);
        assert!((s.band_centers[39] - 799.8).abs() < 1e-9);
        for &i in &s.out_band_indices {
            assert!((740.0..=780.0).contains(&s.band_centers[i]));
        }
        assert_eq!(s.l2a_wavelengths().len(), 18);
    }

    #[test]
    fn convolve_constant_and_linear() {
        let s = SensorModel::desis_window(1);
        let c = vec![3.25; s.highres_grid.len()];
        for v in isrf_convolve(&c, &s, &SensorState::nominal()).unwrap() {
            assert!((v - 3.25).abs() <= 1e-12 * 3.25);
        }
        let lin = s.highres_grid.clone();
        let delta = 0.4;
        let out = isrf_convolve(&lin, &s, &SensorState::shifted(delta, 0.0)).unwrap();
        for (v, c) in out.iter().zip(&s.band_centers) {
            assert!((v - (c + delta)).abs() < 1e-6, "{v} vs {}", c + delta);
        }
    }

    #[test]
    fn convolve_rejects_short_grid() {
        let s = SensorModel::desis_window(1);
        let grid: Vec<f64> = (0..200).map(|i| 740.0 + 0.05 * i as f64).collect();
        let spec = vec![1.0; grid.len()];
        let err = isrf_convolve_on(&spec, &grid, &s.band_centers, s.sigma(), &SensorState::nominal());
        assert!(matches!(err, Err(Error::InsufficientCoverage { band: 0, .. })));
        let err = isrf_convolve(&spec, &s, &SensorState::nominal());
        assert!(matches!(err, Err(Error::Shape { .. })));
        let bad = SensorState::shifted(0.0, -2.0);
        assert!(isrf_convolve(&vec![1.0; s.highres_grid.len()], &s, &bad).is_err());
    }

    // Oracle: the same Gaussian convolution evaluated on a 0.001 nm grid.
    fn dense_band(center: f64, sigma: f64, line: impl Fn(f64) -> f64) -> f64 {
        let (mut num, mut den) = (0.0, 0.0);
        let n = (8.0 * sigma / 0.001) as usize;
        for i in 0..=n {
            let l = center - 4.0 * sigma + 0.001 * i as f64;
            let z = (l - center) / sigma;
            let w = (-0.5 * z * z).exp();
            num += w * line(l);
            den += w;
        }
        num / den
    }

    #[test]
    fn wider_isrf_fills_narrow_line() {
        let s = SensorModel::desis_window(1);
        let line = |l: f64| 1.0 - 0.9 / (1.0 + ((l - 761.55) / 0.2).powi(2));
        let spec: Vec<f64> = s.highres_grid.iter().map(|&l| line(l)).collect();
        let b = 24; // 761.55 nm
        let center = [s.band_centers[b]];
        let conv = |st: SensorState| isrf_convolve_on(&spec, &s.highres_grid, &center, s.sigma(), &st).unwrap()[0];
        let nominal = conv(SensorState::nominal());
        let wide = conv(SensorState::shifted(0.0, s.sigma()));
        let oracle_nominal = dense_band(761.55, s.sigma(), line);
        let oracle_wide = dense_band(761.55, 2.0 * s.sigma(), line);
        assert!(wide > nominal, "doubled width must give a shallower band");
        assert!(oracle_wide > oracle_nominal);
        assert!((nominal - oracle_nominal).abs() < 2e-3);
        assert!((wide - oracle_wide).abs() < 2e-3);
    }

    #[test]
    fn ndvi_examples() {
        assert_eq!(ndvi(0.3, 0.3).unwrap(), 0.0);
        assert!((ndvi(0.05, 0.45).unwrap() - 0.8).abs() < 1e-12);
        assert!((ndvi(0.45, 0.05).unwrap() + 0.8).abs() < 1e-12);
        assert!(ndvi(0.0, 0.0).is_err());
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn reflectance_in_unit_interval(r in 0.0..1.0f64, s in -0.02..0.02f64, e in -1e-3..1e-3f64, l in 700.0..800.0f64) {
                let v = reflectance_at(&surf(r, s, e), l);
                prop_assert!((0.0..=1.0).contains(&v));
            }

            #[test]
            fn ndvi_antisymmetric(r in 0.001..1.0f64, n in 0.001..1.0f64) {
                prop_assert!((ndvi(r, n).unwrap() + ndvi(n, r).unwrap()).abs() < 1e-15);
            }

            #[test]
            fn convolution_is_linear(a in -3.0..3.0f64, b in -3.0..3.0f64, k in 0.0..1.0f64, dl in -1.2..1.2f64) {
                let s = SensorModel::desis_window(1);
                let l1: Vec<f64> = s.highres_grid.iter().map(|&l| (l * 0.1 * (1.0 + k)).sin()).collect();
                let l2: Vec<f64> = s.highres_grid.iter().map(|&l| 1e-3 * (l - 750.0).powi(2)).collect();
                let mix: Vec<f64> = l1.iter().zip(&l2).map(|(x, y)| a * x + b * y).collect();
                let st = SensorState::shifted(dl, 0.1);
                let c1 = isrf_convolve(&l1, &s, &st).unwrap();
                let c2 = isrf_convolve(&l2, &s, &st).unwrap();
                let cm = isrf_convolve(&mix, &s, &st).unwrap();
                for i in 0..cm.len() {
                    prop_assert!((cm[i] - (a * c1[i] + b * c2[i])).abs() < 1e-10);
                }
            }
        }
    }
}
