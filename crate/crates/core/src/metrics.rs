//! Image-similarity metrics: PSNR, MAE, patch chi-square with its spatial
//! error map, FID, and paired differences between evaluation reports.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::acoustics::percentile_sorted;
use crate::error::{Error, Result};

/// Peak value of the 8-bit scale PSNR and MAE are reported on.
pub const PEAK: f64 = 255.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PsnrForm {
    /// `10 log10(peak^2 / MSE)`.
    #[default]
    SquaredPeak,
    /// `10 log10(peak / MSE)`, the form without the square.
    LinearPeak,
}

fn check_same(a: &[f64], b: &[f64]) -> Result<()> {
    if a.len() != b.len() {
        return Err(Error::Metric(format!("image sizes differ: {} vs {} pixels", a.len(), b.len())));
    }
    Ok(())
}

/// PSNR in dB of images on the `[0, 255]` scale. Identical images give `+inf`.
pub fn psnr(y: &[f64], y_hat: &[f64], form: PsnrForm) -> Result<f64> {
    check_same(y, y_hat)?;
    if y.is_empty() {
        return Err(Error::Metric("empty image".into()));
    }
    let mse = y.iter().zip(y_hat).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / y.len() as f64;
    if mse == 0.0 {
        return Ok(f64::INFINITY);
    }
    let peak = match form {
        PsnrForm::SquaredPeak => PEAK * PEAK,
        PsnrForm::LinearPeak => PEAK,
    };
    Ok(10.0 * (peak / mse).log10())
}

/// Mean absolute difference over mask pixels (all pixels without a mask).
pub fn mae(y: &[f64], y_hat: &[f64], mask: Option<&[bool]>) -> Result<f64> {
    check_same(y, y_hat)?;
    let (mut sum, mut n) = (0.0, 0usize);
    for (i, (a, b)) in y.iter().zip(y_hat).enumerate() {
        if mask.is_none_or(|m| m[i]) {
            sum += (a - b).abs();
            n += 1;
        }
    }
    if n == 0 {
        return Err(Error::Metric("mask selects no pixels".into()));
    }
    Ok(sum / n as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct HistogramSpec {
    pub bins: usize,
    pub patch: usize,
}

impl Default for HistogramSpec {
    fn default() -> Self {
        Self { bins: 50, patch: 20 }
    }
}

impl HistogramSpec {
    pub fn validate(&self) -> Result<()> {
        if self.bins < 2 || self.patch < 2 {
            return Err(Error::Metric(format!("histogram needs >= 2 bins and patch >= 2, got {self:?}")));
        }
        Ok(())
    }

    /// Unit-mass histogram of values in `[0, 1]`; out-of-range values are clamped.
    pub fn histogram(&self, values: impl IntoIterator<Item = f64>) -> Vec<f64> {
        let mut h = vec![0.0; self.bins];
        let mut n = 0usize;
        for v in values {
            let b = ((v.clamp(0.0, 1.0) * self.bins as f64) as usize).min(self.bins - 1);
            h[b] += 1.0;
            n += 1;
        }
        if n > 0 {
            h.iter_mut().for_each(|x| *x /= n as f64);
        }
        h
    }
}

/// `1/2 sum (a - b)^2 / (a + b)` over bins; empty bin pairs contribute 0.
pub fn chi2_hist(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::Metric(format!("histograms have {} and {} bins", a.len(), b.len())));
    }
    let mut acc = 0.0;
    for (&x, &y) in a.iter().zip(b) {
        if x < 0.0 || y < 0.0 {
            return Err(Error::Metric("negative histogram count".into()));
        }
        if x + y > 0.0 {
            acc += (x - y).powi(2) / (x + y);
        }
    }
    Ok(0.5 * acc)
}

/// Per-tile chi-square values; `None` marks tiles skipped as fully outside the mask.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PatchMap {
    pub rows: usize,
    pub cols: usize,
    pub patch: usize,
    pub values: Vec<Option<f64>>,
}

impl PatchMap {
    /// Expands to a `height x width` image; skipped tiles and trailing pixels are 0.
    pub fn to_image(&self, height: usize, width: usize) -> Vec<f64> {
        let mut out = vec![0.0; height * width];
        for r in 0..self.rows * self.patch {
            for c in 0..self.cols * self.patch {
                out[r * width + c] = self.values[(r / self.patch) * self.cols + c / self.patch].unwrap_or(0.0);
            }
        }
        out
    }
}

/// Patch chi-square of `[0, 1]` images: RMS over non-overlapping tiles of the
/// histogram chi-square. Trailing partial tiles are dropped; with a mask,
/// tiles containing no mask pixel are skipped.
pub fn patch_chi2(y: &[f64], y_hat: &[f64], height: usize, width: usize, spec: &HistogramSpec, mask: Option<&[bool]>) -> Result<(f64, PatchMap)> {
    spec.validate()?;
    check_same(y, y_hat)?;
    if y.len() != height * width {
        return Err(Error::Metric(format!("{} pixels for a {height}x{width} image", y.len())));
    }
    let p = spec.patch;
    if height < p || width < p {
        return Err(Error::Metric(format!("{height}x{width} image is smaller than one {p}x{p} patch")));
    }
    let (rows, cols) = (height / p, width / p);
    let mut values = Vec::with_capacity(rows * cols);
    let (mut sq, mut n) = (0.0, 0usize);
    for tr in 0..rows {
        for tc in 0..cols {
            let idx: Vec<usize> = (tr * p..(tr + 1) * p).flat_map(|r| (tc * p..(tc + 1) * p).map(move |c| r * width + c)).collect();
            if let Some(m) = mask {
                if !idx.iter().any(|&i| m[i]) {
                    values.push(None);
                    continue;
                }
            }
            let v = chi2_hist(&spec.histogram(idx.iter().map(|&i| y[i])), &spec.histogram(idx.iter().map(|&i| y_hat[i])))?;
            sq += v * v;
            n += 1;
            values.push(Some(v));
        }
    }
    if n == 0 {
        return Err(Error::Metric("no tile overlaps the mask".into()));
    }
    Ok(((sq / n as f64).sqrt(), PatchMap { rows, cols, patch: p, values }))
}

pub const FID_CENTER: usize = 512;
pub const FID_CROP: usize = 299;

/// Four overlapping corner crops of the central 512x512 window, row-major.
pub fn fid_crops(img: &[f64], height: usize, width: usize) -> Result<Vec<Vec<f64>>> {
    if height < FID_CENTER || width < FID_CENTER || img.len() != height * width {
        return Err(Error::Metric(format!("FID crops need at least {FID_CENTER}x{FID_CENTER}, got {height}x{width}")));
    }
    let (top, left) = ((height - FID_CENTER) / 2, (width - FID_CENTER) / 2);
    let off = FID_CENTER - FID_CROP;
    Ok([(0, 0), (0, off), (off, 0), (off, off)]
        .iter()
        .map(|&(r0, c0)| (0..FID_CROP).flat_map(|r| img[(top + r0 + r) * width + left + c0..][..FID_CROP].iter().copied()).collect())
        .collect())
}

/// Centre crop at `(top, left)` used by [`fid_crops`].
pub fn fid_center_offset(height: usize, width: usize) -> (usize, usize) {
    ((height.saturating_sub(FID_CENTER)) / 2, (width.saturating_sub(FID_CENTER)) / 2)
}

fn gaussian_fit(features: &[Vec<f64>]) -> Result<(DVector<f64>, DMatrix<f64>)> {
    let n = features.len();
    if n < 2 {
        return Err(Error::Metric(format!("fitting a Gaussian needs at least 2 feature vectors, got {n}")));
    }
    let d = features[0].len();
    if d == 0 || features.iter().any(|f| f.len() != d) {
        return Err(Error::Metric("feature vectors must share a positive dimension".into()));
    }
    if features.iter().flatten().any(|v| !v.is_finite()) {
        return Err(Error::Metric("non-finite feature value".into()));
    }
    let x = DMatrix::from_fn(n, d, |i, j| features[i][j]);
    let mean = x.row_mean().transpose();
    let centered = DMatrix::from_fn(n, d, |i, j| x[(i, j)] - mean[j]);
    let cov = centered.transpose() * &centered / (n as f64 - 1.0);
    Ok((mean, cov))
}

/// Symmetric PSD square root; eigenvalues down to `-1e-6` (relative) are clamped to 0.
fn psd_sqrt(m: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let sym = (m + m.transpose()) * 0.5;
    let eig = sym.symmetric_eigen();
    let scale = eig.eigenvalues.iter().fold(1.0f64, |a, v| a.max(v.abs()));
    let mut roots = eig.eigenvalues.clone();
    for v in roots.iter_mut() {
        if *v < -1e-6 * scale {
            return Err(Error::Metric(format!("matrix is not positive semidefinite (eigenvalue {v})")));
        }
        *v = v.max(0.0).sqrt();
    }
    Ok(&eig.eigenvectors * DMatrix::from_diagonal(&roots) * eig.eigenvectors.transpose())
}

/// Frechet distance between Gaussians fitted to two feature sets.
pub fn fid(real: &[Vec<f64>], generated: &[Vec<f64>]) -> Result<f64> {
    let (m1, s1) = gaussian_fit(real)?;
    let (m2, s2) = gaussian_fit(generated)?;
    if m1.len() != m2.len() {
        return Err(Error::Metric("feature dimensions differ".into()));
    }
    // Tr sqrt(S1 S2) = Tr sqrt(S1^1/2 S2 S1^1/2), which is symmetric
    let r1 = psd_sqrt(&s1)?;
    let cross = psd_sqrt(&(&r1 * &s2 * &r1))?.trace();
    let value = (&m1 - &m2).norm_squared() + s1.trace() + s2.trace() - 2.0 * cross;
    Ok(value.max(0.0))
}

/// Maps a `[0, 1]` image crop (299x299 under the standard protocol) to a feature vector.
pub trait FeatureExtractor {
    fn name(&self) -> &str;
    fn features(&self, crop: &[f64], height: usize, width: usize) -> Vec<f64>;
}

/// Deterministic stand-in for a pretrained classifier embedding: a 4x4 grid
/// of local means and standard deviations plus a 32-bin intensity histogram.
#[derive(Debug, Clone, Copy, Default)]
pub struct StatisticsExtractor;

impl FeatureExtractor for StatisticsExtractor {
    fn name(&self) -> &str {
        "grid-statistics-64"
    }

    fn features(&self, crop: &[f64], height: usize, width: usize) -> Vec<f64> {
        let g = 4;
        let mut out = Vec::with_capacity(2 * g * g + 32);
        let mut stds = Vec::with_capacity(g * g);
        for gr in 0..g {
            for gc in 0..g {
                let (r0, r1) = (gr * height / g, (gr + 1) * height / g);
                let (c0, c1) = (gc * width / g, (gc + 1) * width / g);
                let vals: Vec<f64> = (r0..r1).flat_map(|r| crop[r * width + c0..r * width + c1].iter().copied()).collect();
                let n = vals.len().max(1) as f64;
                let mean = vals.iter().sum::<f64>() / n;
                out.push(mean);
                stds.push((vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt());
            }
        }
        out.extend(stds);
        out.extend(HistogramSpec { bins: 32, patch: 2 }.histogram(crop.iter().copied()));
        out
    }
}

/// FID over the four sub-crops of each image. Images smaller than the
/// 512x512 centre window contribute one feature vector of the whole image.
pub fn fid_images(extractor: &dyn FeatureExtractor, real: &[(&[f64], usize, usize)], generated: &[(&[f64], usize, usize)]) -> Result<f64> {
    let feats = |set: &[(&[f64], usize, usize)]| -> Result<Vec<Vec<f64>>> {
        let mut out = Vec::new();
        for &(img, h, w) in set {
            if img.len() != h * w {
                return Err(Error::Metric(format!("{} pixels for a {h}x{w} image", img.len())));
            }
            if h < FID_CENTER || w < FID_CENTER {
                out.push(extractor.features(img, h, w));
                continue;
            }
            for crop in fid_crops(img, h, w)? {
                out.push(extractor.features(&crop, FID_CROP, FID_CROP));
            }
        }
        Ok(out)
    };
    fid(&feats(real)?, &feats(generated)?)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageMetrics {
    pub id: String,
    pub psnr: f64,
    pub mae: f64,
    pub pchi2: f64,
    /// Mean brightness error inside the oracle's shadow band, when the frame has one.
    pub shadow_error: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    pub std: f64,
    pub n: usize,
}

impl MeanStd {
    /// Population statistics over finite values; all zero when there are none.
    pub fn of(values: impl IntoIterator<Item = f64>) -> Self {
        let v: Vec<f64> = values.into_iter().filter(|x| x.is_finite()).collect();
        let n = v.len();
        if n == 0 {
            return Self { mean: 0.0, std: 0.0, n };
        }
        let mean = v.iter().sum::<f64>() / n as f64;
        let std = (v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n as f64).sqrt();
        Self { mean, std, n }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub psnr: MeanStd,
    pub mae: MeanStd,
    pub pchi2: MeanStd,
    /// Absent when no evaluated frame has a shadow band.
    pub shadow_error: Option<MeanStd>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub variant: String,
    pub checkpoint: String,
    pub dataset: String,
    pub params: usize,
    pub per_image: Vec<ImageMetrics>,
    pub aggregate: Aggregate,
    pub fid: Option<f64>,
    pub fid_extractor: Option<String>,
}

impl MetricReport {
    pub fn new(variant: String, checkpoint: String, dataset: String, params: usize, per_image: Vec<ImageMetrics>) -> Self {
        let aggregate = aggregate(&per_image);
        Self { variant, checkpoint, dataset, params, per_image, aggregate, fid: None, fid_extractor: None }
    }
}

pub fn aggregate(per_image: &[ImageMetrics]) -> Aggregate {
    Aggregate {
        psnr: MeanStd::of(per_image.iter().map(|m| m.psnr)),
        mae: MeanStd::of(per_image.iter().map(|m| m.mae)),
        pchi2: MeanStd::of(per_image.iter().map(|m| m.pchi2)),
        shadow_error: Some(MeanStd::of(per_image.iter().filter_map(|m| m.shadow_error))).filter(|s| s.n > 0),
    }
}

/// Five-number summary with Tukey whiskers (1.5 IQR, clipped to the data).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoxStats {
    pub min: f64,
    pub q1: f64,
    pub median: f64,
    pub q3: f64,
    pub max: f64,
    pub whisker_low: f64,
    pub whisker_high: f64,
}

impl BoxStats {
    pub fn of(values: &[f64]) -> Option<Self> {
        let mut v: Vec<f64> = values.iter().copied().filter(|x| x.is_finite()).collect();
        if v.is_empty() {
            return None;
        }
        v.sort_by(f64::total_cmp);
        let (q1, median, q3) = (percentile_sorted(&v, 0.25), percentile_sorted(&v, 0.5), percentile_sorted(&v, 0.75));
        let iqr = q3 - q1;
        let whisker_low = v.iter().copied().find(|&x| x >= q1 - 1.5 * iqr).unwrap_or(v[0]);
        let whisker_high = v.iter().rev().copied().find(|&x| x <= q3 + 1.5 * iqr).unwrap_or(v[v.len() - 1]);
        Some(Self { min: v[0], q1, median, q3, max: v[v.len() - 1], whisker_low, whisker_high })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairedDifferences {
    pub a: String,
    pub b: String,
    pub ids: Vec<String>,
    pub psnr: Vec<f64>,
    pub mae: Vec<f64>,
    pub pchi2: Vec<f64>,
    pub psnr_box: Option<BoxStats>,
    pub mae_box: Option<BoxStats>,
    pub pchi2_box: Option<BoxStats>,
}

/// Per-image `a - b` for each metric, matched by image id.
pub fn paired_differences(a: &MetricReport, b: &MetricReport) -> Result<PairedDifferences> {
    let ids_a: Vec<&str> = a.per_image.iter().map(|m| m.id.as_str()).collect();
    let ids_b: Vec<&str> = b.per_image.iter().map(|m| m.id.as_str()).collect();
    if ids_a != ids_b {
        return Err(Error::Metric(format!("reports `{}` and `{}` cover different image sets", a.variant, b.variant)));
    }
    let delta = |f: fn(&ImageMetrics) -> f64| -> Vec<f64> { a.per_image.iter().zip(&b.per_image).map(|(x, y)| f(x) - f(y)).collect() };
    let (psnr, mae, pchi2) = (delta(|m| m.psnr), delta(|m| m.mae), delta(|m| m.pchi2));
    Ok(PairedDifferences {
        a: a.variant.clone(),
        b: b.variant.clone(),
        ids: ids_a.iter().map(|s| s.to_string()).collect(),
        psnr_box: BoxStats::of(&psnr),
        mae_box: BoxStats::of(&mae),
        pchi2_box: BoxStats::of(&pchi2),
        psnr,
        mae,
        pchi2,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};

    fn rng(seed: u64) -> rand_chacha::ChaCha8Rng {
        rand_chacha::ChaCha8Rng::seed_from_u64(seed)
    }

    #[test]
    fn psnr_cases() {
        let y = vec![100.0; 64];
        assert_eq!(psnr(&y, &y, PsnrForm::SquaredPeak).unwrap(), f64::INFINITY);
        let off: Vec<f64> = y.iter().map(|v| v + 10.0).collect();
        assert!((psnr(&y, &off, PsnrForm::SquaredPeak).unwrap() - 28.1308).abs() < 0.01);
        assert!((psnr(&y, &off, PsnrForm::LinearPeak).unwrap() - 10.0 * 2.55f64.log10()).abs() < 1e-12);
        let mut r = rng(1);
        let base: Vec<f64> = (0..4096).map(|_| r.random_range(50.0..200.0)).collect();
        let mut last = f64::INFINITY;
        for sigma in [1.0, 4.0, 16.0] {
            let noisy: Vec<f64> = base.iter().map(|v| v + sigma * (r.random::<f64>() - 0.5) * 3.46).collect();
            let p = psnr(&base, &noisy, PsnrForm::SquaredPeak).unwrap();
            assert!(p < last);
            last = p;
        }
        assert!(psnr(&y, &y[..3], PsnrForm::SquaredPeak).is_err());
    }

    #[test]
    fn mae_cases() {
        let y: Vec<f64> = (0..64).map(|i| i as f64).collect();
        assert_eq!(mae(&y, &y, None).unwrap(), 0.0);
        let off: Vec<f64> = y.iter().map(|v| v - 2.5).collect();
        assert!((mae(&y, &off, None).unwrap() - 2.5).abs() < 1e-12);
        let mut r = rng(2);
        let a: Vec<f64> = (0..64).map(|_| r.random()).collect();
        let b: Vec<f64> = (0..64).map(|_| r.random()).collect();
        let m: Vec<bool> = (0..64).map(|_| r.random_bool(0.5)).collect();
        let (mut s, mut n) = (0.0, 0.0);
        for i in 0..64 {
            if m[i] {
                s += (a[i] - b[i]).abs();
                n += 1.0;
            }
        }
        assert!((mae(&a, &b, Some(&m)).unwrap() - s / n).abs() < 1e-12);
    }

    #[test]
    fn chi2_cases() {
        let h = vec![0.25, 0.25, 0.5, 0.0];
        assert_eq!(chi2_hist(&h, &h).unwrap(), 0.0);
        assert!((chi2_hist(&[0.5, 0.5, 0.0, 0.0], &[0.0, 0.0, 0.3, 0.7]).unwrap() - 1.0).abs() < 1e-15);
        assert!(chi2_hist(&[-0.1, 1.1], &[0.5, 0.5]).is_err());
        assert!(chi2_hist(&[1.0], &[0.5, 0.5]).is_err());
    }

    #[test]
    fn patch_chi2_tiling() {
        let mut r = rng(3);
        let y: Vec<f64> = (0..1600).map(|_| r.random()).collect();
        let (v, map) = patch_chi2(&y, &y, 40, 40, &HistogramSpec::default(), None).unwrap();
        assert_eq!(v, 0.0);
        assert!(map.values.iter().all(|t| *t == Some(0.0)));

        let other: Vec<f64> = (0..1600).map(|_| r.random()).collect();
        let (v, map) = patch_chi2(&y, &other, 40, 40, &HistogramSpec::default(), None).unwrap();
        assert_eq!(map.values.len(), 4);
        let rms = (map.values.iter().map(|t| t.unwrap().powi(2)).sum::<f64>() / 4.0).sqrt();
        assert!((v - rms).abs() < 1e-15);

        // disjoint tiles: all-black against all-white
        let (v, _) = patch_chi2(&vec![0.0; 1600], &vec![1.0; 1600], 40, 40, &HistogramSpec::default(), None).unwrap();
        assert!((v - 1.0).abs() < 1e-9);

        // trailing partial tiles are dropped
        let (_, map) = patch_chi2(&vec![0.0; 45 * 52], &vec![0.0; 45 * 52], 45, 52, &HistogramSpec::default(), None).unwrap();
        assert_eq!((map.rows, map.cols), (2, 2));
        assert!(patch_chi2(&[0.0; 100], &[0.0; 100], 10, 10, &HistogramSpec::default(), None).is_err());
    }

    #[test]
    fn patch_chi2_skips_tiles_outside_mask() {
        let mut r = rng(4);
        let y: Vec<f64> = (0..1600).map(|_| r.random()).collect();
        let g: Vec<f64> = (0..1600).map(|_| r.random()).collect();
        let mask: Vec<bool> = (0..1600).map(|i| i / 40 < 20).collect();
        let (v, map) = patch_chi2(&y, &g, 40, 40, &HistogramSpec::default(), Some(&mask)).unwrap();
        assert_eq!(map.values.iter().filter(|t| t.is_none()).count(), 2);
        let (_, full) = patch_chi2(&y, &g, 40, 40, &HistogramSpec::default(), None).unwrap();
        let rms = ((full.values[0].unwrap().powi(2) + full.values[1].unwrap().powi(2)) / 2.0).sqrt();
        assert!((v - rms).abs() < 1e-15);
        assert_eq!(map.to_image(40, 40)[39 * 40], 0.0);
    }

    #[test]
    fn patch_chi2_is_invariant_to_in_tile_permutation() {
        let mut r = rng(5);
        let y: Vec<f64> = (0..1600).map(|_| r.random()).collect();
        let g: Vec<f64> = (0..1600).map(|_| r.random::<f64>().powi(2)).collect();
        let mut shuffled = g.clone();
        for tr in 0..2 {
            for tc in 0..2 {
                let idx: Vec<usize> = (tr * 20..tr * 20 + 20).flat_map(|row| (tc * 20..tc * 20 + 20).map(move |c| row * 40 + c)).collect();
                let mut vals: Vec<f64> = idx.iter().map(|&i| g[i]).collect();
                vals.reverse();
                vals.rotate_left(37);
                for (&i, v) in idx.iter().zip(vals) {
                    shuffled[i] = v;
                }
            }
        }
        let (_, a) = patch_chi2(&y, &g, 40, 40, &HistogramSpec::default(), None).unwrap();
        let (_, b) = patch_chi2(&y, &shuffled, 40, 40, &HistogramSpec::default(), None).unwrap();
        for (x, z) in a.values.iter().zip(&b.values) {
            assert!((x.unwrap() - z.unwrap()).abs() < 1e-15);
        }
    }

    #[test]
    fn fid_crop_geometry() {
        assert_eq!(512 - 299, 213);
        let img: Vec<f64> = (0..512 * 512).map(|i| i as f64).collect();
        let crops = fid_crops(&img, 512, 512).unwrap();
        assert_eq!(crops.len(), 4);
        let corner = |k: usize| crops[k][0] as usize;
        assert_eq!([corner(0), corner(1), corner(2), corner(3)], [0, 213, 213 * 512, 213 * 512 + 213]);
        assert!(crops.iter().all(|c| c.len() == 299 * 299));
        assert_eq!(fid_center_offset(1000, 1386), (244, 437));
        let big: Vec<f64> = (0..1000 * 1386).map(|i| i as f64).collect();
        assert_eq!(fid_crops(&big, 1000, 1386).unwrap()[0][0] as usize, 244 * 1386 + 437);
        assert!(fid_crops(&vec![0.0; 298 * 298], 298, 298).is_err());
    }

    #[test]
    fn fid_closed_forms() {
        let a = std::f64::consts::FRAC_1_SQRT_2;
        let x = vec![vec![-a], vec![a]];
        let shifted = vec![vec![1.0 - a], vec![1.0 + a]];
        let wide = vec![vec![-2f64.sqrt()], vec![2f64.sqrt()]];
        assert!(fid(&x, &x).unwrap() < 1e-6);
        assert!((fid(&x, &shifted).unwrap() - 1.0).abs() < 1e-6);
        assert!((fid(&x, &wide).unwrap() - 1.0).abs() < 1e-6);
        assert!(fid(&x[..1], &x).is_err());
        assert!(fid(&[vec![f64::NAN], vec![0.0]], &x).is_err());
    }

    fn gaussian_set(seed: u64, n: usize, d: usize, shift: f64) -> Vec<Vec<f64>> {
        let mut r = rng(seed);
        (0..n).map(|_| (0..d).map(|j| shift * j as f64 + r.random_range(-1.0..1.0) * (1.0 + j as f64 * 0.2)).collect()).collect()
    }

    #[test]
    fn fid_symmetry_and_rotation_invariance() {
        let x = gaussian_set(1, 200, 5, 0.0);
        let y = gaussian_set(2, 150, 5, 0.3);
        let f = fid(&x, &y).unwrap();
        assert!(f > 0.0);
        assert!((f - fid(&y, &x).unwrap()).abs() < 1e-6);
        assert!(fid(&x, &x).unwrap() < 1e-6);
        let q = DMatrix::from_fn(5, 5, |i, j| ((i * 7 + j * 3) as f64).sin()).qr().q();
        let rot = |set: &[Vec<f64>]| -> Vec<Vec<f64>> { set.iter().map(|v| (&q * DVector::from_column_slice(v)).iter().copied().collect()).collect() };
        assert!((fid(&rot(&x), &rot(&y)).unwrap() - f).abs() < 1e-5);
    }

    #[test]
    fn stand_in_extractor_is_deterministic() {
        let mut r = rng(6);
        let crop: Vec<f64> = (0..299 * 299).map(|_| r.random()).collect();
        let e = StatisticsExtractor;
        assert_eq!(e.features(&crop, 299, 299), e.features(&crop, 299, 299));
        assert_eq!(e.features(&crop, 299, 299).len(), 64);
        let img: Vec<f64> = (0..512 * 512).map(|_| r.random()).collect();
        let same = fid_images(&e, &[(&img, 512, 512), (&img, 512, 512)], &[(&img, 512, 512), (&img, 512, 512)]).unwrap();
        assert!(same < 1e-6);
    }

    fn report(name: &str, rows: &[(&str, f64, f64, f64)]) -> MetricReport {
        let per = rows.iter().map(|&(id, p, m, c)| ImageMetrics { id: id.into(), psnr: p, mae: m, pchi2: c, shadow_error: None }).collect();
        MetricReport::new(name.into(), "ckpt".into(), "data".into(), 0, per)
    }

    #[test]
    fn paired_difference_cases() {
        let a = report("a", &[("x", 30.0, 5.0, 0.2), ("y", 25.0, 8.0, 0.3), ("z", 27.0, 6.0, 0.1)]);
        let b = report("b", &[("x", 28.0, 6.0, 0.25), ("y", 26.0, 7.0, 0.3), ("z", 20.0, 9.0, 0.4)]);
        let d = paired_differences(&a, &b).unwrap();
        assert_eq!(d.psnr, vec![2.0, -1.0, 7.0]);
        assert_eq!(d.mae, vec![-1.0, 1.0, -3.0]);
        assert!((d.pchi2[0] + 0.05).abs() < 1e-12 && d.pchi2[1] == 0.0 && (d.pchi2[2] + 0.3).abs() < 1e-12);
        assert_eq!(d.psnr_box.unwrap().median, 2.0);

        let same = paired_differences(&a, &a).unwrap();
        assert!(same.psnr.iter().chain(&same.mae).chain(&same.pchi2).all(|&v| v == 0.0));

        let reorder = |r: &MetricReport| {
            let mut r = r.clone();
            r.per_image.swap(0, 2);
            r
        };
        let d2 = paired_differences(&reorder(&a), &reorder(&b)).unwrap();
        assert_eq!(d2.psnr_box.unwrap().median, d.psnr_box.unwrap().median);

        let c = report("c", &[("x", 1.0, 1.0, 1.0)]);
        assert!(paired_differences(&a, &c).is_err());
    }

    #[test]
    fn aggregate_recomputes_from_per_image() {
        let a = report("a", &[("x", 30.0, 5.0, 0.2), ("y", 26.0, 7.0, 0.4)]);
        assert_eq!(a.aggregate.psnr.mean, 28.0);
        assert_eq!(a.aggregate.psnr.std, 2.0);
        assert!((a.aggregate.pchi2.mean - 0.3).abs() < 1e-15);
        assert_eq!(aggregate(&a.per_image), a.aggregate);
    }

    fn histogram() -> impl Strategy<Value = Vec<f64>> {
        prop::collection::vec(0.0f64..1.0, 50).prop_map(|v| {
            let s: f64 = v.iter().sum::<f64>().max(1e-12);
            v.iter().map(|x| x / s).collect()
        })
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(1000))]
        #[test]
        fn chi2_is_symmetric_and_bounded(a in histogram(), b in histogram()) {
            let ab = chi2_hist(&a, &b).unwrap();
            prop_assert!((ab - chi2_hist(&b, &a).unwrap()).abs() < 1e-15);
            prop_assert!(chi2_hist(&a, &a).unwrap() == 0.0);
            prop_assert!((-1e-12..=1.0 + 1e-12).contains(&ab));
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]
        #[test]
        fn pchi2_stays_in_unit_interval(seed in 0u64..10_000, h in 20usize..60, w in 20usize..60) {
            let mut r = rng(seed);
            let a: Vec<f64> = (0..h * w).map(|_| r.random()).collect();
            let b: Vec<f64> = (0..h * w).map(|_| r.random::<f64>().powi(3)).collect();
            let (v, map) = patch_chi2(&a, &b, h, w, &HistogramSpec::default(), None).unwrap();
            prop_assert!((0.0..=1.0).contains(&v));
            prop_assert!(map.values.iter().all(|t| (0.0..=1.0).contains(&t.unwrap())));
        }

        #[test]
        fn psnr_and_mae_match_brute_force(seed in 0u64..10_000, n in 1usize..100) {
            let mut r = rng(seed);
            let a: Vec<f64> = (0..n).map(|_| r.random_range(0.0..255.0)).collect();
            let b: Vec<f64> = (0..n).map(|_| r.random_range(0.0..255.0)).collect();
            let mut se = 0.0;
            let mut ae = 0.0;
            for i in 0..n {
                se += (a[i] - b[i]) * (a[i] - b[i]);
                ae += (a[i] - b[i]).abs();
            }
            let want = 10.0 * (255.0 * 255.0 / (se / n as f64)).log10();
            prop_assert!((psnr(&a, &b, PsnrForm::SquaredPeak).unwrap() - want).abs() < 1e-9);
            prop_assert!((mae(&a, &b, None).unwrap() - ae / n as f64).abs() < 1e-9);
        }
    }
}
