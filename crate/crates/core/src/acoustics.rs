//! Tissue acoustics, integral attenuation maps and convex-probe scan conversion.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scene::{FanGrid, FanTissueMap, ScanGeometry, TissueIndex};

/// Acoustic and speckle parameters of one tissue class.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tissue {
    pub name: String,
    /// Attenuation coefficient in dB / cm / MHz.
    pub mu_db_cm_mhz: f64,
    pub scatter_mean: f64,
    pub scatter_std: f64,
    pub echogenicity: f64,
    /// Acoustic impedance in MRayl; drives boundary echo strength.
    pub impedance: f64,
}

/// Property table indexed by tissue label.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TissueProperties {
    pub tissues: Vec<Tissue>,
}

impl TissueProperties {
    pub fn len(&self) -> usize {
        self.tissues.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tissues.is_empty()
    }

    pub fn get(&self, t: TissueIndex) -> Result<&Tissue> {
        self.tissues.get(t as usize).ok_or(Error::MissingTissue(t as usize))
    }

    pub fn validate(&self) -> Result<()> {
        for (i, t) in self.tissues.iter().enumerate() {
            let finite = [t.mu_db_cm_mhz, t.scatter_mean, t.scatter_std, t.echogenicity, t.impedance].iter().all(|v| v.is_finite());
            if !finite || t.mu_db_cm_mhz < 0.0 || t.scatter_std < 0.0 || t.echogenicity < 0.0 || t.impedance <= 0.0 {
                return Err(Error::Tissue(format!("tissue {i} ({}) has invalid parameters", t.name)));
            }
        }
        Ok(())
    }

    /// Errors with the first index in `0..n_tissues` the table does not cover.
    pub fn check_covers(&self, n_tissues: usize) -> Result<()> {
        if n_tissues > self.len() {
            return Err(Error::MissingTissue(self.len()));
        }
        Ok(())
    }

    /// Table matching [`crate::scene::default_phantom_spec`].
    pub fn default_fetal() -> Self {
        let t = |name: &str, mu, echo, z| Tissue { name: name.into(), mu_db_cm_mhz: mu, scatter_mean: 0.0, scatter_std: 1.0, echogenicity: echo, impedance: z };
        Self {
            tissues: vec![
                t("gel", 0.0, 0.0, 1.50),
                t("skin", 0.12, 0.9, 1.60),
                t("fat", 0.08, 0.55, 1.38),
                t("muscle", 0.11, 0.8, 1.70),
                t("maternal soft tissue", 0.09, 0.7, 1.63),
                t("amniotic fluid", 0.003, 0.0, 1.50),
                t("fetal soft tissue", 0.08, 0.75, 1.60),
                t("brain", 0.07, 0.45, 1.58),
                t("bone", 10.0, 1.2, 7.80),
            ],
        }
    }
}

/// Per-sample natural-log attenuation `mu[t]` for every tissue index.
pub fn attenuation_lut(props: &TissueProperties, geom: &ScanGeometry) -> Result<Vec<f64>> {
    props.validate()?;
    let factor = geom.freq_mhz * geom.axial_step_cm() * std::f64::consts::LN_10 / 20.0;
    Ok(props.tissues.iter().map(|t| t.mu_db_cm_mhz * factor).collect())
}

/// Same conversion for an explicit step, for callers without a geometry.
pub fn attenuation_per_sample(mu_db_cm_mhz: f64, freq_mhz: f64, step_cm: f64) -> f64 {
    mu_db_cm_mhz * freq_mhz * step_cm * std::f64::consts::LN_10 / 20.0
}

pub type FanAttenuationMap = FanGrid<f64>;

/// `a[z] = exp(-sum_{i<=z} mu[s[i]])` independently along every scanline.
pub fn integrate_attenuation(s: &FanTissueMap, lut: &[f64]) -> Result<FanAttenuationMap> {
    let mut out = FanGrid::filled(s.n_scanlines, s.n_axial, 0.0);
    for i in 0..s.n_scanlines {
        let mut acc = 0.0;
        for (o, &t) in out.column_mut(i).iter_mut().zip(s.column(i)) {
            acc += *lut.get(t as usize).ok_or(Error::MissingTissue(t as usize))?;
            *o = (-acc).exp();
        }
    }
    Ok(out)
}

pub const NORMALIZATION_PERCENTILE: f64 = 0.98;

/// Percentile with linear interpolation between order statistics at rank `q * (n - 1)`.
pub fn percentile(values: &[f64], q: f64) -> f64 {
    assert!(!values.is_empty(), "percentile of an empty slice");
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    percentile_sorted(&sorted, q)
}

pub fn percentile_sorted(sorted: &[f64], q: f64) -> f64 {
    let rank = q * (sorted.len() - 1) as f64;
    let lo = rank.floor() as usize;
    let hi = (lo + 1).min(sorted.len() - 1);
    let f = rank - lo as f64;
    sorted[lo] + f * (sorted[hi] - sorted[lo])
}

/// Scales the map so that its 98th percentile becomes 1, then clips to `[0, 1]`.
///
/// The divisor is the order statistic just below the interpolated 98th
/// percentile rank. Every value from that rank upward saturates at 1 after
/// clipping, so the interpolated 98th percentile of the result is exactly 1.
/// Dividing by the interpolated value itself would leave the result's
/// percentile slightly below 1 whenever the two bracketing order statistics
/// differ.
pub fn normalize_attenuation(a: &FanAttenuationMap) -> Result<FanAttenuationMap> {
    let scale = normalization_scale(&a.data)?;
    Ok(a.map(|v| (v / scale).clamp(0.0, 1.0)))
}

/// Divisor used by [`normalize_attenuation`].
pub fn normalization_scale(values: &[f64]) -> Result<f64> {
    if values.is_empty() {
        return Err(Error::Shape("attenuation map is empty".into()));
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let rank = NORMALIZATION_PERCENTILE * (sorted.len() - 1) as f64;
    let scale = sorted[rank.floor() as usize];
    if !(scale > 0.0) {
        return Err(Error::DegenerateAttenuation);
    }
    Ok(scale)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Interp {
    Nearest,
    Bilinear,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ValueRange {
    /// Intensities in `[0, 1]`.
    Unit,
    /// Network-space intensities in `[-1, 1]`.
    Signed,
    /// Integer tissue labels stored as floats.
    Labels,
}

/// Row-major display image with its imaging mask.
#[derive(Debug, Clone, PartialEq)]
pub struct CartesianImage {
    pub height: usize,
    pub width: usize,
    pub pixels: Vec<f64>,
    pub mask: Vec<bool>,
    pub range: ValueRange,
}

impl CartesianImage {
    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.pixels[r * self.width + c]
    }

    pub fn mask_f64(&self) -> Vec<f64> {
        self.mask.iter().map(|&m| m as u8 as f64).collect()
    }

    pub fn with_pixels(&self, pixels: Vec<f64>, range: ValueRange) -> Self {
        assert_eq!(pixels.len(), self.pixels.len());
        Self { height: self.height, width: self.width, pixels, mask: self.mask.clone(), range }
    }

    /// Zeroes every pixel outside the mask.
    pub fn apply_mask(&mut self) {
        for (p, &m) in self.pixels.iter_mut().zip(&self.mask) {
            if !m {
                *p = 0.0;
            }
        }
    }

    /// Labels rounded back to integers.
    pub fn labels(&self) -> Vec<TissueIndex> {
        self.pixels.iter().map(|&v| v.round().clamp(0.0, 255.0) as TissueIndex).collect()
    }
}

/// Cartesian pixel grid covering the fan sector with square pixels.
///
/// Pixel `(row, col)` has its centre at probe-plane coordinates
/// `(x0 + (col + 0.5) * spacing, z0 + (row + 0.5) * spacing)` in mm, `z` measured
/// from the transducer face along the central beam.
#[derive(Debug, Clone)]
pub struct ScanConverter {
    geom: ScanGeometry,
    pub x0: f64,
    pub z0: f64,
    pub spacing: f64,
    /// Continuous fan coordinates `(scanline, sample)` per pixel inside the sector.
    coords: Vec<Option<(f64, f64)>>,
}

impl ScanConverter {
    pub fn new(geom: &ScanGeometry) -> Result<Self> {
        geom.validate()?;
        let (h, w) = geom.cart_size;
        let half = geom.half_fov_rad();
        let (r0, r1) = (geom.probe_radius_mm(), geom.probe_radius_mm() + geom.depth_mm());
        let (xmin, xmax) = (-r1 * half.sin(), r1 * half.sin());
        let (zmin, zmax) = (r0 * half.cos() - r0, geom.depth_mm());
        let spacing = ((xmax - xmin) / w as f64).max((zmax - zmin) / h as f64);
        let x0 = 0.5 * (xmin + xmax) - 0.5 * spacing * w as f64;
        let z0 = 0.5 * (zmin + zmax) - 0.5 * spacing * h as f64;
        let mut coords = Vec::with_capacity(h * w);
        for row in 0..h {
            for col in 0..w {
                let x = x0 + (col as f64 + 0.5) * spacing;
                let z = z0 + (row as f64 + 0.5) * spacing + r0;
                let r = x.hypot(z);
                let theta = x.atan2(z);
                let inside = r >= r0 && r <= r1 && theta.abs() <= half;
                coords.push(inside.then(|| {
                    let u = (theta + half) / (2.0 * half) * (geom.n_scanlines - 1) as f64;
                    let v = (r - r0) / (r1 - r0) * (geom.n_axial - 1) as f64;
                    (u, v)
                }));
            }
        }
        Ok(Self { geom: *geom, x0, z0, spacing, coords })
    }

    pub fn geometry(&self) -> &ScanGeometry {
        &self.geom
    }

    pub fn mask(&self) -> Vec<bool> {
        self.coords.iter().map(Option::is_some).collect()
    }

    /// Continuous fan coordinates of pixel `(row, col)`, if it lies in the sector.
    pub fn fan_coords(&self, row: usize, col: usize) -> Option<(f64, f64)> {
        self.coords[row * self.geom.cart_size.1 + col]
    }

    pub fn convert(&self, fan: &FanGrid<f64>, interp: Interp, range: ValueRange) -> Result<CartesianImage> {
        if !fan.matches(&self.geom) {
            return Err(Error::Shape(format!(
                "fan image is {}x{}, geometry expects {}x{}",
                fan.n_scanlines, fan.n_axial, self.geom.n_scanlines, self.geom.n_axial
            )));
        }
        let pixels = self
            .coords
            .iter()
            .map(|c| match *c {
                None => 0.0,
                Some((u, v)) => match interp {
                    Interp::Nearest => fan.get(u.round() as usize, v.round() as usize),
                    Interp::Bilinear => bilinear_fan(fan, u, v),
                },
            })
            .collect();
        let (height, width) = self.geom.cart_size;
        Ok(CartesianImage { height, width, pixels, mask: self.mask(), range })
    }

    pub fn convert_labels(&self, s: &FanTissueMap) -> Result<CartesianImage> {
        self.convert(&s.map(f64::from), Interp::Nearest, ValueRange::Labels)
    }

    /// Resamples a Cartesian image back onto the fan grid.
    ///
    /// Bilinear weights are renormalised over in-mask neighbours so that the
    /// sector border does not pull values towards zero.
    pub fn inverse(&self, cart: &CartesianImage, interp: Interp) -> Result<FanGrid<f64>> {
        let (h, w) = self.geom.cart_size;
        if cart.height != h || cart.width != w {
            return Err(Error::Shape(format!("image is {}x{}, geometry expects {h}x{w}", cart.height, cart.width)));
        }
        let geom = &self.geom;
        let mut fan = FanGrid::for_geometry(geom, 0.0);
        for i in 0..geom.n_scanlines {
            for j in 0..geom.n_axial {
                let (x, z) = geom.fan_point_mm(i, j);
                let pc = (x - self.x0) / self.spacing - 0.5;
                let pr = (z - self.z0) / self.spacing - 0.5;
                let value = match interp {
                    Interp::Nearest => nearest_masked(cart, pr, pc),
                    Interp::Bilinear => bilinear_masked(cart, pr, pc).unwrap_or_else(|| nearest_masked(cart, pr, pc)),
                };
                fan.set(i, j, value);
            }
        }
        Ok(fan)
    }
}

fn bilinear_fan(fan: &FanGrid<f64>, u: f64, v: f64) -> f64 {
    let (iu, iv) = ((u.floor() as usize).min(fan.n_scanlines - 2), (v.floor() as usize).min(fan.n_axial - 2));
    let (fu, fv) = (u - iu as f64, v - iv as f64);
    let a = fan.get(iu, iv) * (1.0 - fv) + fan.get(iu, iv + 1) * fv;
    let b = fan.get(iu + 1, iv) * (1.0 - fv) + fan.get(iu + 1, iv + 1) * fv;
    a * (1.0 - fu) + b * fu
}

fn bilinear_masked(cart: &CartesianImage, pr: f64, pc: f64) -> Option<f64> {
    let (r0, c0) = (pr.floor(), pc.floor());
    let (fr, fc) = (pr - r0, pc - c0);
    let (mut acc, mut wsum) = (0.0, 0.0);
    for (dr, wr) in [(0.0, 1.0 - fr), (1.0, fr)] {
        for (dc, wc) in [(0.0, 1.0 - fc), (1.0, fc)] {
            let (r, c) = (r0 + dr, c0 + dc);
            if r < 0.0 || c < 0.0 || r >= cart.height as f64 || c >= cart.width as f64 {
                continue;
            }
            let idx = r as usize * cart.width + c as usize;
            if cart.mask[idx] && wr * wc > 0.0 {
                acc += wr * wc * cart.pixels[idx];
                wsum += wr * wc;
            }
        }
    }
    (wsum > 1e-12).then(|| acc / wsum)
}

/// Value of the closest in-mask pixel within a small window, or 0.
fn nearest_masked(cart: &CartesianImage, pr: f64, pc: f64) -> f64 {
    let (rc, cc) = (pr.round() as i64, pc.round() as i64);
    let mut best: Option<(f64, f64)> = None;
    for r in rc - 2..=rc + 2 {
        for c in cc - 2..=cc + 2 {
            if r < 0 || c < 0 || r >= cart.height as i64 || c >= cart.width as i64 {
                continue;
            }
            let idx = r as usize * cart.width + c as usize;
            if !cart.mask[idx] {
                continue;
            }
            let d = (r as f64 - pr).powi(2) + (c as f64 - pc).powi(2);
            if best.is_none_or(|(bd, _)| d < bd) {
                best = Some((d, cart.pixels[idx]));
            }
        }
    }
    best.map_or(0.0, |(_, v)| v)
}

pub fn scan_convert(fan: &FanGrid<f64>, geom: &ScanGeometry, interp: Interp) -> Result<CartesianImage> {
    ScanConverter::new(geom)?.convert(fan, interp, ValueRange::Unit)
}

pub fn inverse_scan_convert(cart: &CartesianImage, geom: &ScanGeometry, interp: Interp) -> Result<FanGrid<f64>> {
    ScanConverter::new(geom)?.inverse(cart, interp)
}

/// Binary convex-sector mask at the geometry's Cartesian size.
pub fn imaging_mask(geom: &ScanGeometry) -> Result<Vec<bool>> {
    Ok(ScanConverter::new(geom)?.mask())
}
