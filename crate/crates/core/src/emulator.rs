//! Degree-4 polynomial emulator of band radiances in the output window.
//!
//! Inputs are normalized to [0, 1] with recorded bounds and expanded into the
//! full monomial basis of total degree ≤ 4; the coefficient matrix maps that
//! basis linearly to every output band. Because the emulator is linear in its
//! coefficients it can sit inside the retrieval network as a fixed layer.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::io::{Read, Write};
use std::path::Path;
use std::sync::Arc;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use nalgebra::DMatrix;
use ndarray::{Array2, ArrayView2};
use rand::{seq::SliceRandom, Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::forward::{simulate_bands, surface_in_range, AtmosModelParams, SceneRanges, SURFACE_SPAN_NM};
use crate::spectral::{AtmoGeoState, SensorModel, SensorState, SurfaceState};
use crate::{Error, Result};

/// Emulator inputs in order.
pub const INPUT_NAMES: [&str; 9] = [
    "rho740", "s", "e", "f740", "aot550", "h2o", "cos_sza", "dlambda", "dsigma",
];
pub const RHO740: usize = 0;
pub const SLOPE: usize = 1;
pub const CURVATURE: usize = 2;
pub const F740: usize = 3;
pub const AOT550: usize = 4;
pub const H2O: usize = 5;
pub const COS_SZA: usize = 6;
pub const DLAMBDA: usize = 7;
pub const DSIGMA: usize = 8;
pub const N_INPUTS: usize = 9;

pub const DEFAULT_DEGREE: usize = 4;

/// Binomial coefficient C(n, k).
pub fn binomial(n: usize, k: usize) -> usize {
    let k = k.min(n - k.min(n));
    (0..k).fold(1usize, |acc, i| acc * (n - i) / (i + 1))
}

/// All monomials of total degree ≤ `degree` in `n_inputs` variables.
///
/// Ordering is graded: by total degree, then with the exponent of the first
/// variable descending (1, a, b, a², ab, b², ...).
#[derive(Debug, Clone, PartialEq)]
pub struct MonomialBasis {
    n_inputs: usize,
    degree: usize,
    exponents: Vec<Vec<u8>>,
    /// For k > 0: (k', j) with monomial k = monomial k' · x_j.
    parent: Vec<(usize, usize)>,
    /// For each k: (j, e_kj, index of k with e_kj decremented).
    derivs: Vec<Vec<(usize, f64, usize)>>,
}

fn compositions(total: usize, parts: usize, prefix: &mut Vec<u8>, out: &mut Vec<Vec<u8>>) {
    if parts == 1 {
        prefix.push(total as u8);
        out.push(prefix.clone());
        prefix.pop();
        return;
    }
    for first in (0..=total).rev() {
        prefix.push(first as u8);
        compositions(total - first, parts - 1, prefix, out);
        prefix.pop();
    }
}

impl MonomialBasis {
    pub fn new(n_inputs: usize, degree: usize) -> Self {
        let mut exponents = Vec::new();
        for d in 0..=degree {
            compositions(d, n_inputs, &mut Vec::new(), &mut exponents);
        }
        Self::from_exponents(n_inputs, exponents).expect("generated basis is closed")
    }

    /// Rebuilds a basis from an exponent table, which must be closed under
    /// lowering any exponent by one.
    pub fn from_exponents(n_inputs: usize, exponents: Vec<Vec<u8>>) -> Result<Self> {
        let index: HashMap<&[u8], usize> = exponents.iter().enumerate().map(|(k, e)| (e.as_slice(), k)).collect();
        let mut parent = Vec::with_capacity(exponents.len());
        let mut derivs = Vec::with_capacity(exponents.len());
        let mut degree = 0;
        let zeros = exponents.iter().filter(|e| e.iter().all(|&x| x == 0)).count();
        if zeros != 1 {
            return Err(Error::Format("basis must contain the constant term exactly once".into()));
        }
        for e in &exponents {
            if e.len() != n_inputs {
                return Err(Error::Format("exponent tuple of wrong length".into()));
            }
            degree = degree.max(e.iter().map(|&x| x as usize).sum());
            let mut d = Vec::new();
            let mut lowered = e.clone();
            for j in 0..n_inputs {
                if e[j] == 0 {
                    continue;
                }
                lowered[j] -= 1;
                let k2 = *index
                    .get(lowered.as_slice())
                    .ok_or_else(|| Error::Format("exponent table not closed".into()))?;
                lowered[j] += 1;
                d.push((j, e[j] as f64, k2));
            }
            parent.push(d.first().map(|&(j, _, k2)| (k2, j)).unwrap_or((0, 0)));
            derivs.push(d);
        }
        Ok(Self {
            n_inputs,
            degree,
            exponents,
            parent,
            derivs,
        })
    }

    pub fn len(&self) -> usize {
        self.exponents.len()
    }

    pub fn is_empty(&self) -> bool {
        self.exponents.is_empty()
    }

    pub fn n_inputs(&self) -> usize {
        self.n_inputs
    }

    pub fn degree(&self) -> usize {
        self.degree
    }

    pub fn exponents(&self) -> &[Vec<u8>] {
        &self.exponents
    }

    /// Index of monomial k' with monomial k = monomial k' · x_j, for k > 0.
    pub fn parent(&self, k: usize) -> (usize, usize) {
        self.parent[k]
    }

    /// Partial-derivative table of monomial k: (j, exponent, lowered index).
    pub fn derivs(&self, k: usize) -> &[(usize, f64, usize)] {
        &self.derivs[k]
    }

    /// Monomial features of one (normalized) input vector.
    pub fn features(&self, p: &[f64]) -> Vec<f64> {
        let mut f = vec![0.0; self.len()];
        self.features_into(p, &mut f);
        f
    }

    pub fn features_into(&self, p: &[f64], out: &mut [f64]) {
        // The ordering is graded, so every parent precedes its child.
        out[0] = 1.0;
        for k in 1..self.len() {
            let (k2, j) = self.parent[k];
            out[k] = out[k2] * p[j];
        }
    }

    /// Row-wise monomial features of a batch of normalized inputs.
    pub fn feature_matrix(&self, p: ArrayView2<f64>) -> Array2<f64> {
        let mut out = Array2::zeros((p.nrows(), self.len()));
        let mut buf = vec![0.0; self.n_inputs];
        for (row, mut dst) in p.rows().into_iter().zip(out.rows_mut()) {
            buf.iter_mut().zip(row.iter()).for_each(|(b, &v)| *b = v);
            self.features_into(&buf, dst.as_slice_mut().expect("standard layout"));
        }
        out
    }

    /// ∂features/∂p as a [n_monomials × n_inputs] matrix at one point.
    pub fn feature_jacobian(&self, p: &[f64]) -> Array2<f64> {
        let f = self.features(p);
        let mut jac = Array2::zeros((self.len(), self.n_inputs));
        for k in 0..self.len() {
            for &(j, e, k2) in &self.derivs[k] {
                jac[[k, j]] = e * f[k2];
            }
        }
        jac
    }
}

/// Residual statistics of a fit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitStats {
    pub n_samples: usize,
    pub rms_per_band: Vec<f64>,
    pub mean_abs: f64,
    pub mean_rel: f64,
    pub max_abs: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EmulatorModel {
    pub input_names: Vec<String>,
    pub input_lo: Vec<f64>,
    pub input_hi: Vec<f64>,
    pub degree: usize,
    pub basis: Arc<MonomialBasis>,
    /// [n_monomials × n_out_bands].
    pub coeffs: Array2<f64>,
    pub out_band_centers: Vec<f64>,
}

/// Result of evaluating the emulator, flagging inputs outside the bounds.
#[derive(Debug, Clone, PartialEq)]
pub struct Emulated {
    pub radiance: Vec<f64>,
    pub extrapolated: bool,
}

impl EmulatorModel {
    pub fn n_inputs(&self) -> usize {
        self.input_names.len()
    }

    pub fn n_out(&self) -> usize {
        self.out_band_centers.len()
    }

    pub fn exponents(&self) -> &[Vec<u8>] {
        self.basis.exponents()
    }

    pub fn normalize(&self, p: &[f64]) -> Vec<f64> {
        p.iter()
            .zip(self.input_lo.iter().zip(&self.input_hi))
            .map(|(&v, (&lo, &hi))| (v - lo) / (hi - lo))
            .collect()
    }

    pub fn denormalize(&self, z: &[f64]) -> Vec<f64> {
        z.iter()
            .zip(self.input_lo.iter().zip(&self.input_hi))
            .map(|(&v, (&lo, &hi))| lo + v * (hi - lo))
            .collect()
    }

    /// Band radiances for physical inputs ordered as `input_names`.
    pub fn emulate(&self, p: &[f64]) -> Vec<f64> {
        self.emulate_checked(p).radiance
    }

    pub fn emulate_checked(&self, p: &[f64]) -> Emulated {
        let z = self.normalize(p);
        let extrapolated = z.iter().any(|&v| !(0.0..=1.0).contains(&v));
        let f = self.basis.features(&z);
        let radiance = (0..self.n_out())
            .map(|b| f.iter().zip(self.coeffs.column(b)).map(|(a, c)| a * c).sum())
            .collect();
        Emulated {
            radiance,
            extrapolated,
        }
    }

    /// Emulates a batch of physical inputs [n × n_inputs] → [n × n_out].
    pub fn emulate_batch(&self, p: ArrayView2<f64>) -> Array2<f64> {
        let lo = ndarray::ArrayView1::from(&self.input_lo[..]);
        let span: ndarray::Array1<f64> = self.input_hi.iter().zip(&self.input_lo).map(|(h, l)| h - l).collect();
        let z = (&p - &lo) / &span;
        self.basis.feature_matrix(z.view()).dot(&self.coeffs)
    }

    /// Analytic Jacobian [n_out × n_inputs] with respect to physical inputs.
    pub fn emulate_grad(&self, p: &[f64]) -> Array2<f64> {
        let z = self.normalize(p);
        let dfeat = self.basis.feature_jacobian(&z);
        let mut jac = self.coeffs.t().dot(&dfeat);
        for (j, mut col) in jac.columns_mut().into_iter().enumerate() {
            col /= self.input_hi[j] - self.input_lo[j];
        }
        jac
    }

    pub fn summary(&self, stats: Option<&FitStats>) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "polynomial emulator");
        let _ = writeln!(s, "degree: {}", self.degree);
        let _ = writeln!(s, "monomials: {}", self.basis.len());
        let _ = writeln!(s, "output bands: {}", self.n_out());
        let _ = writeln!(
            s,
            "band centers (nm): {}",
            self.out_band_centers.iter().map(|c| format!("{c:.2}")).collect::<Vec<_>>().join(" ")
        );
        let _ = writeln!(s, "inputs:");
        for ((n, lo), hi) in self.input_names.iter().zip(&self.input_lo).zip(&self.input_hi) {
            let _ = writeln!(s, "  {n:<8} [{lo}, {hi}]");
        }
        if let Some(st) = stats {
            let _ = writeln!(s, "training samples: {}", st.n_samples);
            let _ = writeln!(s, "training mean abs residual: {:.6e}", st.mean_abs);
            let _ = writeln!(s, "training mean rel residual: {:.6e}", st.mean_rel);
            let _ = writeln!(s, "training max abs residual: {:.6e}", st.max_abs);
        }
        s
    }

    pub fn write_to<W: Write>(&self, w: &mut W) -> Result<()> {
        w.write_all(SIFE_MAGIC)?;
        w.write_u16::<LittleEndian>(SIFE_VERSION)?;
        w.write_u32::<LittleEndian>(self.n_inputs() as u32)?;
        w.write_u32::<LittleEndian>(self.degree as u32)?;
        w.write_u32::<LittleEndian>(self.basis.len() as u32)?;
        w.write_u32::<LittleEndian>(self.n_out() as u32)?;
        for name in &self.input_names {
            w.write_u32::<LittleEndian>(name.len() as u32)?;
            w.write_all(name.as_bytes())?;
        }
        for &v in self.input_lo.iter().chain(&self.input_hi) {
            w.write_f64::<LittleEndian>(v)?;
        }
        for e in self.basis.exponents() {
            w.write_all(e)?;
        }
        for &c in &self.out_band_centers {
            w.write_f64::<LittleEndian>(c)?;
        }
        for &c in self.coeffs.iter() {
            w.write_f64::<LittleEndian>(c)?;
        }
        Ok(())
    }

    pub fn read_from<R: Read>(r: &mut R) -> Result<Self> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != SIFE_MAGIC {
            return Err(Error::Format("not a SIFE emulator file".into()));
        }
        let version = r.read_u16::<LittleEndian>()?;
        if version != SIFE_VERSION {
            return Err(Error::Format(format!("unsupported SIFE version {version}")));
        }
        let n_inputs = r.read_u32::<LittleEndian>()? as usize;
        let degree = r.read_u32::<LittleEndian>()? as usize;
        let n_mono = r.read_u32::<LittleEndian>()? as usize;
        let n_out = r.read_u32::<LittleEndian>()? as usize;
        let mut input_names = Vec::with_capacity(n_inputs);
        for _ in 0..n_inputs {
            let len = r.read_u32::<LittleEndian>()? as usize;
            let mut buf = vec![0u8; len];
            r.read_exact(&mut buf)?;
            input_names.push(String::from_utf8(buf).map_err(|e| Error::Format(e.to_string()))?);
        }
        let mut read_f64s = |n: usize| -> Result<Vec<f64>> {
            let mut v = vec![0.0; n];
            r.read_f64_into::<LittleEndian>(&mut v)?;
            Ok(v)
        };
        let input_lo = read_f64s(n_inputs)?;
        let input_hi = read_f64s(n_inputs)?;
        let mut exponents = Vec::with_capacity(n_mono);
        for _ in 0..n_mono {
            let mut e = vec![0u8; n_inputs];
            r.read_exact(&mut e)?;
            exponents.push(e);
        }
        let mut v = vec![0.0; n_out];
        r.read_f64_into::<LittleEndian>(&mut v)?;
        let out_band_centers = v;
        let mut c = vec![0.0; n_mono * n_out];
        r.read_f64_into::<LittleEndian>(&mut c)?;
        let basis = MonomialBasis::from_exponents(n_inputs, exponents)?;
        if basis.degree() > degree {
            return Err(Error::Format("exponent table exceeds declared degree".into()));
        }
        Ok(Self {
            input_names,
            input_lo,
            input_hi,
            degree,
            basis: Arc::new(basis),
            coeffs: Array2::from_shape_vec((n_mono, n_out), c).map_err(|e| Error::Format(e.to_string()))?,
            out_band_centers,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
        self.write_to(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut r = std::io::BufReader::new(std::fs::File::open(path)?);
        Self::read_from(&mut r)
    }
}

pub const SIFE_MAGIC: &[u8; 4] = b"SIFE";
pub const SIFE_VERSION: u16 = 1;

/// Input layout and bounds of an emulator to be fitted.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmulatorInputs {
    pub names: Vec<String>,
    pub lo: Vec<f64>,
    pub hi: Vec<f64>,
}

impl EmulatorInputs {
    /// Default nine inputs with bounds taken from scene sampling ranges.
    pub fn from_ranges(r: &SceneRanges) -> Self {
        let cos_lo = r.sza.1.to_radians().cos();
        let cos_hi = r.sza.0.to_radians().cos();
        let bounds = [r.rho740, r.s, r.e, r.f740, r.aot550, r.h2o, (cos_lo, cos_hi), r.dlambda, r.dsigma];
        Self {
            names: INPUT_NAMES.iter().map(|s| s.to_string()).collect(),
            lo: bounds.iter().map(|b| b.0).collect(),
            hi: bounds.iter().map(|b| b.1).collect(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.names.len() != self.lo.len() || self.lo.len() != self.hi.len() {
            return Err(Error::InvalidArgument("input names and bounds differ in length".into()));
        }
        for ((n, lo), hi) in self.names.iter().zip(&self.lo).zip(&self.hi) {
            if !(lo < hi) {
                return Err(Error::InvalidArgument(format!("input `{n}` needs lo < hi, got [{lo}, {hi}]")));
            }
        }
        Ok(())
    }
}

/// Ordinary least-squares fit of the polynomial emulator.
///
/// `samples` holds (physical inputs, band radiances) pairs. All output bands
/// share one Householder QR factorization of the design matrix.
pub fn fit_emulator(
    samples: &[(Vec<f64>, Vec<f64>)],
    inputs: &EmulatorInputs,
    degree: usize,
    out_band_centers: &[f64],
) -> Result<(EmulatorModel, FitStats)> {
    inputs.validate()?;
    let n_in = inputs.names.len();
    let basis = MonomialBasis::new(n_in, degree);
    let k = basis.len();
    let n_out = out_band_centers.len();
    if samples.len() < 2 * k {
        return Err(Error::InvalidArgument(format!(
            "need at least {} samples for {k} monomials, got {}",
            2 * k,
            samples.len()
        )));
    }
    for (p, l) in samples {
        if p.len() != n_in || l.len() != n_out {
            return Err(Error::Shape {
                op: "fit_emulator",
                detail: format!("sample has {} inputs and {} bands", p.len(), l.len()),
            });
        }
    }
    let m = samples.len();
    let mut x = DMatrix::<f64>::zeros(m, k);
    let mut y = DMatrix::<f64>::zeros(m, n_out);
    let mut feat = vec![0.0; k];
    for (i, (p, l)) in samples.iter().enumerate() {
        let z: Vec<f64> = p
            .iter()
            .zip(inputs.lo.iter().zip(&inputs.hi))
            .map(|(&v, (&lo, &hi))| (v - lo) / (hi - lo))
            .collect();
        basis.features_into(&z, &mut feat);
        for (j, &f) in feat.iter().enumerate() {
            x[(i, j)] = f;
        }
        for (b, &v) in l.iter().enumerate() {
            y[(i, b)] = v;
        }
    }
    let qr = x.clone().qr();
    let r = qr.r();
    let max_diag = (0..k).map(|j| r[(j, j)].abs()).fold(0.0, f64::max);
    let tol = max_diag * (m.max(k) as f64) * f64::EPSILON * 1e3;
    if let Some(j) = (0..k).find(|&j| r[(j, j)].abs() <= tol) {
        let var = basis.exponents()[j].iter().position(|&e| e > 0).unwrap_or(0);
        return Err(Error::RankDeficient {
            monomial: j,
            input: inputs.names[var].clone(),
        });
    }
    let mut qty = y.clone();
    qr.q_tr_mul(&mut qty);
    let rhs = qty.rows(0, k).into_owned();
    let sol = r
        .solve_upper_triangular(&rhs)
        .ok_or_else(|| Error::RankDeficient {
            monomial: 0,
            input: inputs.names[0].clone(),
        })?;
    let coeffs = Array2::from_shape_fn((k, n_out), |(i, b)| sol[(i, b)]);
    let pred = &x * &sol;
    let resid = &y - &pred;
    let rms_per_band = (0..n_out)
        .map(|b| (resid.column(b).iter().map(|v| v * v).sum::<f64>() / m as f64).sqrt())
        .collect();
    let mean_abs = resid.iter().map(|v| v.abs()).sum::<f64>() / (m * n_out) as f64;
    let mean_rel = resid
        .iter()
        .zip(y.iter())
        .map(|(r, v)| (r / v).abs())
        .filter(|v| v.is_finite())
        .sum::<f64>()
        / (m * n_out) as f64;
    let max_abs = resid.iter().map(|v| v.abs()).fold(0.0, f64::max);
    let model = EmulatorModel {
        input_names: inputs.names.clone(),
        input_lo: inputs.lo.clone(),
        input_hi: inputs.hi.clone(),
        degree,
        basis: Arc::new(basis),
        coeffs,
        out_band_centers: out_band_centers.to_vec(),
    };
    Ok((
        model,
        FitStats {
            n_samples: m,
            rms_per_band,
            mean_abs,
            mean_rel,
            max_abs,
        },
    ))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BandError {
    pub center: f64,
    pub mean_abs: f64,
    pub p95_abs: f64,
    pub mean_rel: f64,
    pub p95_rel: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorReport {
    pub n_samples: usize,
    pub per_band: Vec<BandError>,
    pub mean_abs: f64,
    pub p95_abs: f64,
    pub mean_rel: f64,
    pub p95_rel: f64,
    /// Mean band-convolved at-sensor signal of f740 = 1.
    pub fluorescence_signal: f64,
    /// mean_abs / fluorescence_signal.
    pub signal_ratio: f64,
}

fn percentile(values: &mut [f64], q: f64) -> f64 {
    values.sort_by(f64::total_cmp);
    let idx = ((values.len() - 1) as f64 * q).round() as usize;
    values[idx]
}

/// Compares the emulator against independent oracle samples.
///
/// `fluorescence_signal` is the per-band at-sensor signal of f740 = 1 used to
/// express the error relative to a typical fluorescence contribution.
pub fn error_report(
    model: &EmulatorModel,
    oracle: &[(Vec<f64>, Vec<f64>)],
    fluorescence_signal: &[f64],
) -> Result<ErrorReport> {
    if oracle.is_empty() {
        return Err(Error::Empty("oracle samples"));
    }
    let n_out = model.n_out();
    let mut abs = vec![Vec::with_capacity(oracle.len()); n_out];
    let mut rel = vec![Vec::with_capacity(oracle.len()); n_out];
    for (p, truth) in oracle {
        let pred = model.emulate(p);
        for b in 0..n_out {
            let d = (pred[b] - truth[b]).abs();
            abs[b].push(d);
            rel[b].push(if truth[b] != 0.0 { d / truth[b].abs() } else { d });
        }
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let per_band = (0..n_out)
        .map(|b| BandError {
            center: model.out_band_centers[b],
            mean_abs: mean(&abs[b]),
            p95_abs: percentile(&mut abs[b].clone(), 0.95),
            mean_rel: mean(&rel[b]),
            p95_rel: percentile(&mut rel[b].clone(), 0.95),
        })
        .collect();
    let mut all_abs: Vec<f64> = abs.concat();
    let mut all_rel: Vec<f64> = rel.concat();
    let mean_abs = mean(&all_abs);
    let mean_rel = mean(&all_rel);
    let signal = if fluorescence_signal.is_empty() {
        f64::NAN
    } else {
        mean(fluorescence_signal)
    };
    Ok(ErrorReport {
        n_samples: oracle.len(),
        per_band,
        mean_abs,
        p95_abs: percentile(&mut all_abs, 0.95),
        mean_rel,
        p95_rel: percentile(&mut all_rel, 0.95),
        fluorescence_signal: signal,
        signal_ratio: mean_abs / signal,
    })
}

/// Latin-hypercube sample of `n` points in [0, 1]^dims.
pub fn latin_hypercube<R: Rng>(n: usize, dims: usize, rng: &mut R) -> Vec<Vec<f64>> {
    let mut pts = vec![vec![0.0; dims]; n];
    let mut perm: Vec<usize> = (0..n).collect();
    for d in 0..dims {
        perm.shuffle(rng);
        for (i, &slot) in perm.iter().enumerate() {
            pts[i][d] = (slot as f64 + rng.random::<f64>()) / n as f64;
        }
    }
    pts
}

/// States behind one emulator input vector. Inputs outside the emulator
/// (view angle, elevation, azimuth) are drawn from the scene ranges.
fn states_for<R: Rng>(
    p: &[f64],
    ranges: &SceneRanges,
    rng: &mut R,
) -> (SurfaceState, AtmoGeoState, SensorState) {
    let mut draw = |(lo, hi): (f64, f64)| if hi > lo { rng.random_range(lo..hi) } else { lo };
    let surf = SurfaceState {
        rho740: p[RHO740],
        s: p[SLOPE],
        e: p[CURVATURE],
        f740: p[F740],
    };
    let atmo = AtmoGeoState {
        aot550: p[AOT550],
        h2o: p[H2O],
        sza: p[COS_SZA].clamp(-1.0, 1.0).acos().to_degrees(),
        raa: draw(ranges.raa),
        ta: draw(ranges.ta),
        h_gnd: draw(ranges.h_gnd),
    };
    (surf, atmo, SensorState::shifted(p[DLAMBDA], p[DSIGMA]))
}

/// Noise-free forward simulations at `n` Latin-hypercube points of the
/// emulator domain, restricted to the output-window bands.
///
/// Points whose reflectance curve leaves the physical range over the sensor
/// span are discarded and replaced from further hypercube rounds.
pub fn simulate_training_set(
    sensor: &SensorModel,
    params: &AtmosModelParams,
    ranges: &SceneRanges,
    inputs: &EmulatorInputs,
    n: usize,
    seed: u64,
) -> Result<Vec<(Vec<f64>, Vec<f64>)>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let surface_idx = [RHO740, SLOPE, CURVATURE].map(|i| inputs.names.iter().position(|n| n == INPUT_NAMES[i]));
    let mut out = Vec::with_capacity(n);
    for _ in 0..50 {
        if out.len() >= n {
            break;
        }
        for z in latin_hypercube(n, inputs.names.len(), &mut rng) {
            if out.len() >= n {
                break;
            }
            let p: Vec<f64> = z
                .iter()
                .zip(inputs.lo.iter().zip(&inputs.hi))
                .map(|(&v, (&lo, &hi))| lo + v * (hi - lo))
                .collect();
            if let [Some(r), Some(s), Some(e)] = surface_idx {
                let surf = SurfaceState {
                    rho740: p[r],
                    s: p[s],
                    e: p[e],
                    f740: 0.0,
                };
                if !surface_in_range(&surf, SURFACE_SPAN_NM.0, SURFACE_SPAN_NM.1) {
                    continue;
                }
            }
            let bands = simulate_point(&p, sensor, params, ranges, &mut rng)?;
            out.push((p, bands));
        }
    }
    if out.len() < n {
        return Err(Error::InvalidArgument("emulator domain contains too few physical surfaces".into()));
    }
    Ok(out)
}

/// Noise-free forward simulation of one emulator input vector.
pub fn simulate_point<R: Rng>(
    p: &[f64],
    sensor: &SensorModel,
    params: &AtmosModelParams,
    ranges: &SceneRanges,
    rng: &mut R,
) -> Result<Vec<f64>> {
    let (surf, atmo, state) = states_for(p, ranges, rng);
    let all = simulate_bands(&surf, &atmo, &state, sensor, params, None, rng)?;
    Ok(sensor.out_band_indices.iter().map(|&i| all[i]).collect())
}

/// Band-convolved at-sensor signal of f740 = 1 at the centre of the domain.
pub fn fluorescence_signal(
    sensor: &SensorModel,
    params: &AtmosModelParams,
    ranges: &SceneRanges,
    inputs: &EmulatorInputs,
) -> Result<Vec<f64>> {
    let mut p: Vec<f64> = inputs.lo.iter().zip(&inputs.hi).map(|(l, h)| 0.5 * (l + h)).collect();
    let mid = |(lo, hi): (f64, f64)| 0.5 * (lo + hi);
    let fixed = SceneRanges {
        raa: (mid(ranges.raa), mid(ranges.raa)),
        ta: (mid(ranges.ta), mid(ranges.ta)),
        h_gnd: (mid(ranges.h_gnd), mid(ranges.h_gnd)),
        ..ranges.clone()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    p[F740] = 0.0;
    let dark = simulate_point(&p, sensor, params, &fixed, &mut rng)?;
    p[F740] = 1.0;
    let lit = simulate_point(&p, sensor, params, &fixed, &mut rng)?;
    Ok(lit.iter().zip(&dark).map(|(a, b)| a - b).collect())
}
