//! Evaluation statistics and spatial alignment utilities.
//!
//! All fluorescence quantities are in mW nm⁻¹ sr⁻¹ m⁻².

use std::io::Write;
use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Paired reference and predicted fluorescence values.
#[derive(Debug, Clone, PartialEq)]
pub struct ComparisonSet {
    pub reference: Vec<f64>,
    pub prediction: Vec<f64>,
    pub rho780: Option<Vec<f64>>,
}

impl ComparisonSet {
    pub fn new(reference: Vec<f64>, prediction: Vec<f64>, rho780: Option<Vec<f64>>) -> Result<Self> {
        if reference.len() != prediction.len() || rho780.as_ref().is_some_and(|r| r.len() != reference.len()) {
            return Err(Error::Shape {
                op: "ComparisonSet",
                detail: "series lengths differ".into(),
            });
        }
        if reference.is_empty() {
            return Err(Error::Empty("comparison set"));
        }
        let all = reference.iter().chain(&prediction).chain(rho780.iter().flatten());
        if all.into_iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument("comparison set contains non-finite values".into()));
        }
        Ok(Self {
            reference,
            prediction,
            rho780,
        })
    }

    pub fn len(&self) -> usize {
        self.reference.len()
    }

    pub fn is_empty(&self) -> bool {
        self.reference.is_empty()
    }

    /// Subset at the given indices.
    pub fn subset(&self, idx: &[usize]) -> Self {
        let pick = |v: &[f64]| idx.iter().map(|&i| v[i]).collect::<Vec<_>>();
        Self {
            reference: pick(&self.reference),
            prediction: pick(&self.prediction),
            rho780: self.rho780.as_deref().map(pick),
        }
    }
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

fn centered(v: &[f64]) -> Vec<f64> {
    let m = mean(v);
    v.iter().map(|x| x - m).collect()
}

fn r2_of(reference: &[f64], prediction: &[f64]) -> f64 {
    let m = mean(reference);
    let ss_tot: f64 = reference.iter().map(|r| (r - m).powi(2)).sum();
    let ss_res: f64 = reference.iter().zip(prediction).map(|(r, p)| (r - p).powi(2)).sum();
    1.0 - ss_res / ss_tot
}

fn mad_of(reference: &[f64], prediction: &[f64]) -> f64 {
    reference.iter().zip(prediction).map(|(r, p)| (p - r).abs()).sum::<f64>() / reference.len() as f64
}

/// Coefficient of determination about the reference mean; NaN when the
/// reference is constant.
pub fn r2(set: &ComparisonSet) -> f64 {
    r2_of(&set.reference, &set.prediction)
}

/// Mean absolute difference.
pub fn mad(set: &ComparisonSet) -> f64 {
    mad_of(&set.reference, &set.prediction)
}

/// (R², ⟨Δf⟩′) after removing the mean of each series.
pub fn bias_corrected(set: &ComparisonSet) -> (f64, f64) {
    let (r, p) = (centered(&set.reference), centered(&set.prediction));
    (r2_of(&r, &p), mad_of(&r, &p))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BinConfig {
    pub drho: f64,
    pub min_members: usize,
}

impl Default for BinConfig {
    fn default() -> Self {
        Self {
            drho: 0.02,
            min_members: 20,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReflectanceBin {
    pub center: f64,
    pub members: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct BinSet {
    pub bins: Vec<ReflectanceBin>,
    /// (center, member count) of bins below the population threshold.
    pub dropped: Vec<(f64, usize)>,
}

/// True if `rho` belongs to the bin at `center`.
pub fn in_bin(rho: f64, center: f64, drho: f64) -> bool {
    (rho - center).abs() < drho
}

/// Overlapping reflectance bins: centres k·drho between the grid points
/// nearest the smallest and largest ρ₇₈₀, members within drho of a centre.
pub fn reflectance_bins(set: &ComparisonSet, cfg: &BinConfig) -> Result<BinSet> {
    let rho = set.rho780.as_ref().ok_or(Error::InvalidArgument("reflectance bins need rho780".into()))?;
    if !(cfg.drho > 0.0) {
        return Err(Error::InvalidArgument("drho must be positive".into()));
    }
    let lo = rho.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = rho.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let (k_lo, k_hi) = ((lo / cfg.drho).floor() as i64, (hi / cfg.drho).ceil() as i64);
    let mut out = BinSet::default();
    for k in k_lo..=k_hi {
        let center = k as f64 * cfg.drho;
        let members: Vec<usize> = (0..rho.len()).filter(|&i| in_bin(rho[i], center, cfg.drho)).collect();
        if members.len() >= cfg.min_members {
            out.bins.push(ReflectanceBin { center, members });
        } else {
            out.dropped.push((center, members.len()));
        }
    }
    Ok(out)
}

/// Mean bias-corrected R² over populated bins whose reference varies.
pub fn reflectance_constrained_r2(set: &ComparisonSet, cfg: &BinConfig) -> Result<f64> {
    let bins = reflectance_bins(set, cfg)?;
    let vals: Vec<f64> = bins
        .bins
        .iter()
        .map(|b| bias_corrected(&set.subset(&b.members)).0)
        .filter(|v| v.is_finite())
        .collect();
    if vals.is_empty() {
        return Err(Error::Empty("populated reflectance bins"));
    }
    Ok(mean(&vals))
}

/// Ordinary least-squares line y = slope·x + bias.
pub fn line_fit(x: &[f64], y: &[f64]) -> (f64, f64) {
    let (mx, my) = (mean(x), mean(y));
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let sxx: f64 = x.iter().map(|a| (a - mx).powi(2)).sum();
    let slope = sxy / sxx;
    (slope, my - slope * mx)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BinFit {
    pub center: f64,
    pub n: usize,
    pub r2_bc: f64,
    pub slope: f64,
    pub bias: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BinwiseFits {
    pub bins: Vec<BinFit>,
    /// Mean of the signed per-bin biases.
    pub mae_b_signed: f64,
    /// Mean of the absolute per-bin biases.
    pub mae_b_abs: f64,
}

/// Per-bin least-squares line reference → prediction.
pub fn binwise_linefit(set: &ComparisonSet, cfg: &BinConfig) -> Result<BinwiseFits> {
    let bins = reflectance_bins(set, cfg)?;
    let fits: Vec<BinFit> = bins
        .bins
        .iter()
        .map(|b| {
            let sub = set.subset(&b.members);
            let (slope, bias) = line_fit(&sub.reference, &sub.prediction);
            BinFit {
                center: b.center,
                n: b.members.len(),
                r2_bc: bias_corrected(&sub).0,
                slope,
                bias,
            }
        })
        .collect();
    let biases: Vec<f64> = fits.iter().map(|f| f.bias).filter(|b| b.is_finite()).collect();
    let (signed, abs) = if biases.is_empty() {
        (f64::NAN, f64::NAN)
    } else {
        (mean(&biases), biases.iter().map(|b| b.abs()).sum::<f64>() / biases.len() as f64)
    };
    Ok(BinwiseFits {
        bins: fits,
        mae_b_signed: signed,
        mae_b_abs: abs,
    })
}

/// Normalized Gaussian kernel truncated at ±4σ; a single tap when σ is ~0.
pub fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    if sigma < 1e-6 {
        return vec![1.0];
    }
    let r = (4.0 * sigma).ceil() as i64;
    let w: Vec<f64> = (-r..=r).map(|i| (-0.5 * (i as f64 / sigma).powi(2)).exp()).collect();
    let s: f64 = w.iter().sum();
    w.into_iter().map(|v| v / s).collect()
}

/// Reflective index (…c b a | a b c …) into 0..n.
pub fn reflect_index(i: i64, n: usize) -> usize {
    let n = n as i64;
    let period = 2 * n;
    let m = i.rem_euclid(period);
    (if m < n { m } else { period - 1 - m }) as usize
}

fn blur_axis(map: &Array2<f64>, kernel: &[f64], axis: usize) -> Array2<f64> {
    let r = (kernel.len() / 2) as i64;
    let (h, w) = map.dim();
    let n = if axis == 0 { h } else { w };
    Array2::from_shape_fn((h, w), |(i, j)| {
        let pos = if axis == 0 { i } else { j } as i64;
        kernel
            .iter()
            .enumerate()
            .map(|(t, &k)| {
                let q = reflect_index(pos + t as i64 - r, n);
                k * if axis == 0 { map[[q, j]] } else { map[[i, q]] }
            })
            .sum()
    })
}

/// Separable Gaussian blur with reflective borders.
pub fn gaussian_blur(map: &Array2<f64>, sigma_px: f64) -> Array2<f64> {
    let k = gaussian_kernel(sigma_px);
    if k.len() == 1 {
        return map.clone();
    }
    blur_axis(&blur_axis(map, &k, 0), &k, 1)
}

/// Blur with σ = `sigma_px` (default factor/2), then average factor×factor blocks.
pub fn downscale(map: &Array2<f64>, sigma_px: Option<f64>, factor: usize) -> Result<Array2<f64>> {
    let (h, w) = map.dim();
    if factor == 0 || h % factor != 0 || w % factor != 0 {
        return Err(Error::InvalidArgument(format!("factor {factor} does not divide {h}×{w}")));
    }
    let blurred = gaussian_blur(map, sigma_px.unwrap_or(factor as f64 / 2.0));
    let area = (factor * factor) as f64;
    Ok(Array2::from_shape_fn((h / factor, w / factor), |(i, j)| {
        blurred
            .slice(ndarray::s![i * factor..(i + 1) * factor, j * factor..(j + 1) * factor])
            .sum()
            / area
    }))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DiscMean {
    pub mean: f64,
    pub count: usize,
}

/// Mean of map pixels within `radius_px` of each (row, col) centre.
pub fn disc_match(map: &Array2<f64>, centers: &[(f64, f64)], radius_px: f64) -> Vec<DiscMean> {
    let (h, w) = map.dim();
    let r2 = radius_px * radius_px;
    centers
        .iter()
        .map(|&(cr, cc)| {
            let rows = ((cr - radius_px).floor().max(0.0) as usize)..=((cr + radius_px).ceil().max(0.0) as usize).min(h.saturating_sub(1));
            let cols = ((cc - radius_px).floor().max(0.0) as usize)..=((cc + radius_px).ceil().max(0.0) as usize).min(w.saturating_sub(1));
            let (mut sum, mut count) = (0.0, 0usize);
            for i in rows {
                for j in cols.clone() {
                    if (i as f64 - cr).powi(2) + (j as f64 - cc).powi(2) <= r2 {
                        sum += map[[i, j]];
                        count += 1;
                    }
                }
            }
            DiscMean {
                mean: if count > 0 { sum / count as f64 } else { f64::NAN },
                count,
            }
        })
        .collect()
}

/// All statistics of one comparison.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub label: String,
    pub n: usize,
    pub r2: f64,
    pub mad: f64,
    pub r2_bc: f64,
    pub mad_bc: f64,
    pub r2_a: f64,
    pub mae_b_signed: f64,
    pub mae_b_abs: f64,
    pub bins: Vec<BinFit>,
}

/// Column header of [`EvalReport::write_csv`].
pub const EVAL_CSV_HEADER: [&str; 5] = ["label", "metric", "bin_center", "n", "value"];

impl EvalReport {
    /// Computes every metric; bin-based fields are NaN without ρ₇₈₀ or
    /// populated bins.
    pub fn compute(label: &str, set: &ComparisonSet, cfg: &BinConfig) -> Self {
        let (r2_bc, mad_bc) = bias_corrected(set);
        let fits = if set.rho780.is_some() { binwise_linefit(set, cfg).ok() } else { None };
        Self {
            label: label.to_string(),
            n: set.len(),
            r2: r2(set),
            mad: mad(set),
            r2_bc,
            mad_bc,
            r2_a: reflectance_constrained_r2(set, cfg).unwrap_or(f64::NAN),
            mae_b_signed: fits.as_ref().map_or(f64::NAN, |f| f.mae_b_signed),
            mae_b_abs: fits.as_ref().map_or(f64::NAN, |f| f.mae_b_abs),
            bins: fits.map(|f| f.bins).unwrap_or_default(),
        }
    }

    /// One row per scalar metric, then three rows (R², slope, bias) per bin.
    pub fn rows(&self) -> Vec<[String; 5]> {
        let row = |metric: &str, center: Option<f64>, n: usize, v: f64| {
            [
                self.label.clone(),
                metric.to_string(),
                center.map(|c| c.to_string()).unwrap_or_default(),
                n.to_string(),
                v.to_string(),
            ]
        };
        let mut rows = vec![
            row("r2", None, self.n, self.r2),
            row("mad", None, self.n, self.mad),
            row("r2_bias_corrected", None, self.n, self.r2_bc),
            row("mad_bias_corrected", None, self.n, self.mad_bc),
            row("r2_reflectance_constrained", None, self.bins.len(), self.r2_a),
            row("mae_b_signed", None, self.bins.len(), self.mae_b_signed),
            row("mae_b_abs", None, self.bins.len(), self.mae_b_abs),
        ];
        for b in &self.bins {
            rows.push(row("bin_r2_bias_corrected", Some(b.center), b.n, b.r2_bc));
            rows.push(row("bin_slope", Some(b.center), b.n, b.slope));
            rows.push(row("bin_bias", Some(b.center), b.n, b.bias));
        }
        rows
    }

    pub fn write_csv<W: Write>(reports: &[EvalReport], w: W) -> Result<()> {
        let mut wr = csv::Writer::from_writer(w);
        wr.write_record(EVAL_CSV_HEADER)?;
        for r in reports {
            for row in r.rows() {
                wr.write_record(&row)?;
            }
        }
        wr.flush()?;
        Ok(())
    }

    pub fn save_csv(reports: &[EvalReport], path: &Path) -> Result<()> {
        Self::write_csv(reports, std::fs::File::create(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn set(r: &[f64], p: &[f64]) -> ComparisonSet {
        ComparisonSet::new(r.to_vec(), p.to_vec(), None).unwrap()
    }

    #[test]
    fn r2_and_mad_examples() {
        let r = [1.0, 2.0, 4.0, 7.0];
        assert_eq!(r2(&set(&r, &r)), 1.0);
        assert_eq!(r2(&set(&r, &[3.5; 4])), 0.0);
        assert_eq!(mad(&set(&r, &r)), 0.0);
        let shifted: Vec<f64> = r.iter().map(|v| v - 0.5).collect();
        assert!((mad(&set(&r, &shifted)) - 0.5).abs() < 1e-15);
    }

    #[test]
    fn bias_corrected_examples() {
        let r = [1.0, 2.0, 4.0, 7.0];
        let plus5: Vec<f64> = r.iter().map(|v| v + 5.0).collect();
        let (rr, m) = bias_corrected(&set(&r, &plus5));
        assert!((rr - 1.0).abs() < 1e-12 && m < 1e-12);
        let (rr, _) = bias_corrected(&set(&r, &r));
        assert_eq!(rr, r2(&set(&r, &r)));
        let anti: Vec<f64> = r.iter().map(|v| -(v - 3.5) + 2.0).collect();
        assert!(bias_corrected(&set(&r, &anti)).0 < 0.0);
    }

    #[test]
    fn invalid_sets() {
        assert!(ComparisonSet::new(vec![1.0], vec![1.0, 2.0], None).is_err());
        assert!(ComparisonSet::new(vec![f64::NAN], vec![1.0], None).is_err());
        assert!(ComparisonSet::new(vec![], vec![], None).is_err());
        assert!(reflectance_bins(&set(&[1.0], &[1.0]), &BinConfig::default()).is_err());
    }

    fn random_set(n: usize, seed: u64) -> ComparisonSet {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let reference: Vec<f64> = (0..n).map(|_| rng.random_range(0.0..4.0)).collect();
        let prediction = reference.iter().map(|r| 0.8 * r + rng.random_range(-0.5..0.5)).collect();
        let rho = (0..n).map(|_| rng.random_range(0.05..0.6)).collect();
        ComparisonSet::new(reference, prediction, Some(rho)).unwrap()
    }

    #[test]
    fn bins_match_brute_force() {
        let s = random_set(1000, 1);
        let cfg = BinConfig::default();
        let bins = reflectance_bins(&s, &cfg).unwrap();
        let rho = s.rho780.as_ref().unwrap();
        for b in &bins.bins {
            let brute: Vec<usize> = (0..rho.len()).filter(|&i| (rho[i] - b.center).abs() < 0.02).collect();
            assert_eq!(b.members, brute);
        }
        for &(c, n) in &bins.dropped {
            assert_eq!(rho.iter().filter(|r| (*r - c).abs() < 0.02).count(), n);
            assert!(n < 20);
        }
        assert!(bins.bins.iter().all(|b| (b.center / 0.02 - (b.center / 0.02).round()).abs() < 1e-9));
    }

    #[test]
    fn bin_examples() {
        let r: Vec<f64> = (0..50).map(|i| i as f64 * 0.1).collect();
        let s = ComparisonSet::new(r.clone(), r.clone(), Some(vec![0.31; 50])).unwrap();
        let bins = reflectance_bins(&s, &BinConfig::default()).unwrap();
        // 0.31 lies between centres 0.30 and 0.32; both windows hold it.
        assert_eq!(bins.bins.len(), 2);
        assert!(bins.bins.iter().all(|b| b.members.len() == 50));
        assert_eq!(reflectance_constrained_r2(&s, &BinConfig::default()).unwrap(), 1.0);

        let mut rho = vec![0.1; 30];
        rho.extend(vec![0.5; 30]);
        let r: Vec<f64> = (0..60).map(|i| i as f64).collect();
        let s = ComparisonSet::new(r.clone(), r, Some(rho)).unwrap();
        let bins = reflectance_bins(&s, &BinConfig::default()).unwrap();
        let groups = 1 + bins.bins.windows(2).filter(|w| w[1].center - w[0].center > 0.03).count();
        assert_eq!(groups, 2);
        assert!(bins.bins.iter().all(|b| (b.center - 0.1).abs() <= 0.021 || (b.center - 0.5).abs() <= 0.021));
    }

    #[test]
    fn single_bin_equals_plain_bias_corrected() {
        let mut s = random_set(200, 5);
        s.rho780 = Some(vec![0.3; 200]);
        let a = reflectance_constrained_r2(&s, &BinConfig::default()).unwrap();
        assert_eq!(a, bias_corrected(&s).0);
    }

    #[test]
    fn confounded_prediction_has_no_within_bin_skill() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let n = 4000;
        let rho: Vec<f64> = (0..n).map(|_| rng.random_range(0.1..0.5)).collect();
        let reference: Vec<f64> = (0..n).map(|_| rng.random_range(0.0..4.0)).collect();
        let prediction: Vec<f64> = rho.iter().map(|r| 8.0 * r + rng.random_range(-0.3..0.3)).collect();
        let s = ComparisonSet::new(reference, prediction, Some(rho)).unwrap();
        assert!(reflectance_constrained_r2(&s, &BinConfig::default()).unwrap() < 0.05);
    }

    #[test]
    fn line_fits_match_normal_equations() {
        let s = random_set(1000, 3);
        let fits = binwise_linefit(&s, &BinConfig::default()).unwrap();
        let rho = s.rho780.as_ref().unwrap();
        for f in &fits.bins {
            let idx: Vec<usize> = (0..rho.len()).filter(|&i| (rho[i] - f.center).abs() < 0.02).collect();
            // 2×2 normal equations [Σx² Σx; Σx n][s b]ᵀ = [Σxy Σy]ᵀ by Cramer's rule.
            let (mut sx, mut sy, mut sxx, mut sxy) = (0.0, 0.0, 0.0, 0.0);
            for &i in &idx {
                let (x, y) = (s.reference[i], s.prediction[i]);
                sx += x;
                sy += y;
                sxx += x * x;
                sxy += x * y;
            }
            let n = idx.len() as f64;
            let det = sxx * n - sx * sx;
            let slope = (sxy * n - sx * sy) / det;
            let bias = (sxx * sy - sx * sxy) / det;
            assert!((f.slope - slope).abs() <= 1e-10 * slope.abs().max(1.0));
            assert!((f.bias - bias).abs() <= 1e-10 * bias.abs().max(1.0));
        }

        let r: Vec<f64> = (0..40).map(|i| (i % 7) as f64).collect();
        let p: Vec<f64> = r.iter().map(|v| 2.0 * v + 1.0).collect();
        let s = ComparisonSet::new(r, p, Some(vec![0.2; 40])).unwrap();
        let f = binwise_linefit(&s, &BinConfig::default()).unwrap();
        assert!((f.bins[0].slope - 2.0).abs() < 1e-12 && (f.bins[0].bias - 1.0).abs() < 1e-12);
        let s = ComparisonSet::new(s.reference.clone(), s.reference.clone(), Some(vec![0.2; 40])).unwrap();
        let f = binwise_linefit(&s, &BinConfig::default()).unwrap();
        assert_eq!((f.bins[0].slope, f.bins[0].bias, f.mae_b_abs), (1.0, 0.0, 0.0));
    }

    fn dense_blur(map: &Array2<f64>, sigma: f64) -> Array2<f64> {
        let k = gaussian_kernel(sigma);
        let r = (k.len() / 2) as i64;
        let (h, w) = map.dim();
        Array2::from_shape_fn((h, w), |(i, j)| {
            let mut acc = 0.0;
            for a in -r..=r {
                for b in -r..=r {
                    let wgt = k[(a + r) as usize] * k[(b + r) as usize];
                    acc += wgt * map[[reflect_index(i as i64 + a, h), reflect_index(j as i64 + b, w)]];
                }
            }
            acc
        })
    }

    #[test]
    fn downscale_matches_dense_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let map = Array2::from_shape_fn((40, 40), |_| rng.random_range(0.0..3.0));
        let fast = downscale(&map, Some(2.0), 4).unwrap();
        let dense = dense_blur(&map, 2.0);
        for i in 0..10 {
            for j in 0..10 {
                let block = dense.slice(ndarray::s![i * 4..i * 4 + 4, j * 4..j * 4 + 4]).mean().unwrap();
                assert!((fast[[i, j]] - block).abs() <= 1e-10 * block.abs());
            }
        }
        let (m0, m1) = (map.mean().unwrap(), fast.mean().unwrap());
        assert!((m0 - m1).abs() / m0 < 0.01);
    }

    #[test]
    fn downscale_basics() {
        let c = Array2::from_elem((12, 8), 2.5);
        let d = downscale(&c, None, 4).unwrap();
        assert!(d.iter().all(|&v| (v - 2.5).abs() < 1e-12));
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let m = Array2::from_shape_fn((6, 6), |_| rng.random::<f64>());
        assert_eq!(downscale(&m, Some(0.0), 1).unwrap(), m);
        let scaled = downscale(&(&m * 3.0), Some(1.0), 2).unwrap();
        let base = downscale(&m, Some(1.0), 2).unwrap() * 3.0;
        assert!(scaled.iter().zip(base.iter()).all(|(a, b)| (a - b).abs() < 1e-12));
        assert!(downscale(&m, None, 4).is_err());
    }

    #[test]
    fn reflective_indexing() {
        let got: Vec<usize> = (-3..7).map(|i| reflect_index(i, 4)).collect();
        assert_eq!(got, vec![2, 1, 0, 0, 1, 2, 3, 3, 2, 1]);
    }

    #[test]
    fn disc_match_examples_and_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let map = Array2::from_shape_fn((30, 25), |_| rng.random_range(0.0..5.0));
        let all = disc_match(&map, &[(15.0, 12.0)], 100.0);
        assert_eq!(all[0].count, 750);
        assert!((all[0].mean - map.mean().unwrap()).abs() < 1e-12);
        let one = disc_match(&map, &[(4.0, 7.0)], 0.5);
        assert_eq!((one[0].count, one[0].mean), (1, map[[4, 7]]));

        let centers: Vec<(f64, f64)> = (0..1000).map(|_| (rng.random_range(-2.0..32.0), rng.random_range(-2.0..27.0))).collect();
        let radius = 4.3;
        let got = disc_match(&map, &centers, radius);
        for (c, d) in centers.iter().zip(&got) {
            let members: Vec<f64> = map
                .indexed_iter()
                .filter(|((i, j), _)| (*i as f64 - c.0).powi(2) + (*j as f64 - c.1).powi(2) <= radius * radius)
                .map(|(_, &v)| v)
                .collect();
            assert_eq!(d.count, members.len());
            if !members.is_empty() {
                assert!((d.mean - members.iter().sum::<f64>() / members.len() as f64).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn eval_report_csv_round_trip() {
        let s = random_set(500, 8);
        let rep = EvalReport::compute("model", &s, &BinConfig::default());
        let mut buf = Vec::new();
        EvalReport::write_csv(std::slice::from_ref(&rep), &mut buf).unwrap();
        let mut rd = csv::Reader::from_reader(buf.as_slice());
        assert_eq!(rd.headers().unwrap().iter().collect::<Vec<_>>(), EVAL_CSV_HEADER);
        let rows: Vec<csv::StringRecord> = rd.records().map(|r| r.unwrap()).collect();
        assert_eq!(rows.len(), 7 + 3 * rep.bins.len());
        assert_eq!(rows[0][4].parse::<f64>().unwrap(), rep.r2);
        assert_eq!(rows[4][4].parse::<f64>().unwrap(), rep.r2_a);
        let truth = EvalReport::compute("truth", &ComparisonSet::new(s.reference.clone(), s.reference.clone(), None).unwrap(), &BinConfig::default());
        assert_eq!(truth.r2, 1.0);
        assert!(truth.r2_a.is_nan());
    }

    proptest! {
        #[test]
        fn offsets_do_not_change_bias_corrected(c in -5.0f64..5.0, seed in 0u64..1000) {
            let s = random_set(50, seed);
            let shifted = ComparisonSet::new(s.reference.clone(), s.prediction.iter().map(|p| p + c).collect(), None).unwrap();
            let (a, b) = (bias_corrected(&s), bias_corrected(&shifted));
            prop_assert!((a.0 - b.0).abs() < 1e-9 && (a.1 - b.1).abs() < 1e-9);
            prop_assert_eq!(r2(&set(&s.reference, &s.reference)), 1.0);
        }

        #[test]
        fn disc_match_permutation_invariant(seed in 0u64..500) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let map = Array2::from_shape_fn((8, 8), |_| rng.random::<f64>());
            let centers = [(3.2, 4.1), (0.0, 7.0)];
            let a = disc_match(&map, &centers, 2.5);
            let rev: Vec<_> = centers.iter().rev().copied().collect();
            let mut b = disc_match(&map, &rev, 2.5);
            b.reverse();
            prop_assert_eq!(a, b);
        }
    }
}
