//! Simplified B-mode simulator used as the data-generating oracle.
//!
//! Speckle is a 2D convolution of a Gaussian scatterer field with a
//! depth-dependent Gabor point-spread function, computed in fan coordinates and
//! weighted by the integral attenuation map. Boundary echoes make impedance
//! transitions (bone surfaces in particular) hyperechoic.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::acoustics::{self, CartesianImage, FanAttenuationMap, Interp, ScanConverter, TissueProperties, ValueRange};
use crate::error::{Error, Result};
use crate::scene::{self, FanGrid, FanTissueMap, Phantom3D, ProbePose, ScanGeometry};
use crate::seed;

/// Separable point-spread function: Gabor along the beam, Gaussian across it.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PsfSpec {
    /// Axial envelope width in samples.
    pub axial_sigma: f64,
    /// Lateral width at the transducer face, in scanlines.
    pub lateral_sigma: f64,
    /// Carrier frequency in cycles per axial sample.
    pub axial_freq: f64,
    /// Fractional lateral width increase per cm of depth.
    pub lateral_growth: f64,
}

impl Default for PsfSpec {
    fn default() -> Self {
        Self { axial_sigma: 1.2, lateral_sigma: 0.7, axial_freq: 0.22, lateral_growth: 0.08 }
    }
}

impl PsfSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.axial_sigma > 0.0 && self.lateral_sigma > 0.0) {
            return Err(Error::Config("PSF sigmas must be positive".into()));
        }
        if !(self.axial_freq > 0.0 && self.axial_freq < 0.5) {
            return Err(Error::Config(format!("PSF carrier {} must lie in (0, 0.5) cycles/sample", self.axial_freq)));
        }
        if !(self.lateral_growth >= 0.0) {
            return Err(Error::Config("lateral growth must be non-negative".into()));
        }
        Ok(())
    }

    /// Gabor taps for offsets `-r..=r`.
    pub fn axial_kernel(&self) -> Vec<f64> {
        let r = (3.0 * self.axial_sigma).ceil() as i64;
        (-r..=r)
            .map(|k| {
                let k = k as f64;
                (-k * k / (2.0 * self.axial_sigma * self.axial_sigma)).exp() * (std::f64::consts::TAU * self.axial_freq * k).cos()
            })
            .collect()
    }

    pub fn lateral_sigma_at(&self, depth_cm: f64) -> f64 {
        self.lateral_sigma * (1.0 + self.lateral_growth * depth_cm)
    }

    /// Gaussian taps for offsets `-r..=r`, scaled to unit energy so that
    /// speckle variance does not change with depth.
    pub fn lateral_kernel(&self, depth_cm: f64) -> Vec<f64> {
        let sigma = self.lateral_sigma_at(depth_cm);
        let r = (3.0 * sigma).ceil() as i64;
        let taps: Vec<f64> = (-r..=r).map(|k| (-((k * k) as f64) / (2.0 * sigma * sigma)).exp()).collect();
        let norm = taps.iter().map(|t| t * t).sum::<f64>().sqrt();
        taps.into_iter().map(|t| t / norm).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum QualityTag {
    High,
    Low,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RenderQuality {
    pub tag: QualityTag,
    /// Fraction of scatterer sites kept; kept amplitudes are scaled by `1/sqrt(density)`.
    pub scatterer_density_scale: f64,
    pub psf_enabled: bool,
    /// Envelope is block-averaged over this many axial samples and re-expanded.
    pub axial_downsample: usize,
}

impl RenderQuality {
    pub fn high() -> Self {
        Self { tag: QualityTag::High, scatterer_density_scale: 1.0, psf_enabled: true, axial_downsample: 1 }
    }

    pub fn low() -> Self {
        Self { tag: QualityTag::Low, scatterer_density_scale: 0.3, psf_enabled: true, axial_downsample: 4 }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.scatterer_density_scale > 0.0 && self.scatterer_density_scale <= 1.0) {
            return Err(Error::Config("scatterer density must lie in (0, 1]".into()));
        }
        if self.axial_downsample == 0 {
            return Err(Error::Config("axial downsample must be >= 1".into()));
        }
        if self.tag == QualityTag::Low && *self == (Self { tag: QualityTag::Low, ..Self::high() }) {
            return Err(Error::Config("low quality must differ from high quality in at least one setting".into()));
        }
        Ok(())
    }
}

/// Everything the oracle needs besides the scene and pose.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OracleConfig {
    pub psf: PsfSpec,
    pub tgc_db_per_cm: f64,
    pub dynamic_range_db: f64,
    /// Multiplies the reflection coefficient `|Z1 - Z2| / (Z1 + Z2)`.
    pub boundary_gain: f64,
    /// Tissues at or above this attenuation (dB/cm/MHz) cast the shadow band.
    pub shadow_mu_threshold: f64,
    /// Also render the low-quality image `L` with these settings.
    pub low_quality: Option<RenderQuality>,
}

impl Default for OracleConfig {
    fn default() -> Self {
        Self {
            psf: PsfSpec::default(),
            tgc_db_per_cm: 0.7,
            dynamic_range_db: 60.0,
            boundary_gain: 6.0,
            shadow_mu_threshold: 5.0,
            low_quality: Some(RenderQuality::low()),
        }
    }
}

impl OracleConfig {
    pub fn validate(&self) -> Result<()> {
        self.psf.validate()?;
        if let Some(q) = &self.low_quality {
            q.validate()?;
        }
        if !(self.dynamic_range_db > 0.0) || !self.tgc_db_per_cm.is_finite() || !(self.boundary_gain >= 0.0) {
            return Err(Error::Config("invalid post-processing parameters".into()));
        }
        Ok(())
    }
}

/// Gaussian scatterer amplitudes, `N(mean[t], std[t]) * echogenicity[t]` per fan cell.
pub fn scatterer_field(s: &FanTissueMap, props: &TissueProperties, seed: u64) -> Result<FanGrid<f64>> {
    scatterer_field_with_density(s, props, seed, 1.0)
}

/// As [`scatterer_field`], keeping each site with probability `density`.
///
/// The Gaussian draws do not depend on `density`, so renders of the same seed
/// at different densities share their surviving scatterers.
pub fn scatterer_field_with_density(s: &FanTissueMap, props: &TissueProperties, seed: u64, density: f64) -> Result<FanGrid<f64>> {
    let mut amp_rng = seed::rng(seed::derive_named(seed, "scatterers"));
    let mut keep_rng = seed::rng(seed::derive_named(seed, "density"));
    let scale = 1.0 / density.sqrt();
    let mut out = FanGrid::filled(s.n_scanlines, s.n_axial, 0.0);
    for (o, &t) in out.data.iter_mut().zip(&s.data) {
        let tissue = props.get(t)?;
        let z: f64 = StandardNormal.sample(&mut amp_rng);
        let amp = (tissue.scatter_mean + tissue.scatter_std * z) * tissue.echogenicity;
        *o = if density >= 1.0 {
            amp
        } else if keep_rng.random::<f64>() < density {
            amp * scale
        } else {
            0.0
        };
    }
    Ok(out)
}

/// Reflection strength at tissue transitions: gradient magnitude of the
/// per-pair reflection coefficients, times `gain`.
pub fn boundary_echoes(s: &FanTissueMap, props: &TissueProperties, gain: f64) -> Result<FanGrid<f64>> {
    let z: Vec<f64> = props.tissues.iter().map(|t| t.impedance).collect();
    let coef = |a: u8, b: u8| -> Result<f64> {
        if a == b {
            return Ok(0.0);
        }
        let (za, zb) = (*z.get(a as usize).ok_or(Error::MissingTissue(a as usize))?, *z.get(b as usize).ok_or(Error::MissingTissue(b as usize))?);
        Ok((za - zb).abs() / (za + zb))
    };
    let mut out = FanGrid::filled(s.n_scanlines, s.n_axial, 0.0);
    for i in 0..s.n_scanlines {
        for j in 0..s.n_axial {
            let t = s.get(i, j);
            let gz = if j > 0 { coef(s.get(i, j - 1), t)? } else { 0.0 };
            let gx = if i > 0 { coef(s.get(i - 1, j), t)? } else { 0.0 };
            out.set(i, j, gain * gz.hypot(gx));
        }
    }
    Ok(out)
}

/// `RF = PSF * (field + boundaries)`, then weighted by the attenuation map.
///
/// Each output sample at depth `j` uses the lateral kernel of depth `j`, so
/// the response to an impulse at `(i0, j0)` is `lat_j(i - i0) * ax(j - j0)`.
pub fn render_rf(field: &FanGrid<f64>, boundaries: &FanGrid<f64>, psf: Option<&PsfSpec>, a: &FanAttenuationMap, geom: &ScanGeometry) -> Result<FanGrid<f64>> {
    for (name, g) in [("field", field), ("boundaries", boundaries), ("attenuation", a)] {
        if !g.matches(geom) {
            return Err(Error::Shape(format!("{name} is {}x{}, geometry expects {}x{}", g.n_scanlines, g.n_axial, geom.n_scanlines, geom.n_axial)));
        }
    }
    let (ns, na) = (geom.n_scanlines, geom.n_axial);
    let src: Vec<f64> = field.data.iter().zip(&boundaries.data).map(|(f, b)| f + b).collect();
    let mut rf = FanGrid { n_scanlines: ns, n_axial: na, data: src };
    if let Some(psf) = psf {
        psf.validate()?;
        let ax = psf.axial_kernel();
        let r = (ax.len() / 2) as i64;
        let mut axial = FanGrid::filled(ns, na, 0.0);
        for i in 0..ns {
            let col = rf.column(i);
            for (j, out) in axial.column_mut(i).iter_mut().enumerate() {
                let mut acc = 0.0;
                for (k, &w) in ax.iter().enumerate() {
                    let jj = j as i64 - (k as i64 - r);
                    if jj >= 0 && (jj as usize) < na {
                        acc += w * col[jj as usize];
                    }
                }
                *out = acc;
            }
        }
        let mut lateral = FanGrid::filled(ns, na, 0.0);
        for j in 0..na {
            let lat = psf.lateral_kernel(geom.sample_depth_cm(j));
            let r = (lat.len() / 2) as i64;
            for i in 0..ns {
                let mut acc = 0.0;
                for (k, &w) in lat.iter().enumerate() {
                    let ii = i as i64 - (k as i64 - r);
                    if ii >= 0 && (ii as usize) < ns {
                        acc += w * axial.get(ii as usize, j);
                    }
                }
                lateral.set(i, j, acc);
            }
        }
        rf = lateral;
    }
    for (v, &att) in rf.data.iter_mut().zip(&a.data) {
        *v *= att;
    }
    Ok(rf)
}

/// Width (in samples) of the Gaussian window used for envelope detection.
/// Taps extend to three sigmas; the window passes about +-0.08 cycles/sample
/// around the carrier at half power.
pub const ENVELOPE_SIGMA: f64 = 2.0;

/// Envelope by a windowed quadrature fit at the carrier frequency.
///
/// For each sample the amplitudes of `cos` and `sin` at `carrier` are fitted
/// by weighted least squares over a Gaussian window; the envelope is the
/// magnitude of the fitted pair. In the interior this equals a complex
/// demodulation followed by a Gaussian low-pass; near the column ends the
/// truncated window stays exact for a pure carrier.
pub fn envelope(rf: &FanGrid<f64>, carrier: f64) -> FanGrid<f64> {
    let r = (3.0 * ENVELOPE_SIGMA).ceil() as i64;
    let weights: Vec<f64> = (-r..=r).map(|k| (-((k * k) as f64) / (2.0 * ENVELOPE_SIGMA * ENVELOPE_SIGMA)).exp()).collect();
    let n = rf.n_axial as i64;
    let phase: Vec<(f64, f64)> = (0..n).map(|j| (std::f64::consts::TAU * carrier * j as f64).sin_cos()).collect();
    let mut out = FanGrid::filled(rf.n_scanlines, rf.n_axial, 0.0);
    for i in 0..rf.n_scanlines {
        let col = rf.column(i);
        for (j, o) in out.column_mut(i).iter_mut().enumerate() {
            let (mut scc, mut sss, mut scs, mut bx, mut by) = (0.0, 0.0, 0.0, 0.0, 0.0);
            for (k, &w) in weights.iter().enumerate() {
                let jj = j as i64 + k as i64 - r;
                if jj < 0 || jj >= n {
                    continue;
                }
                let (sn, cs) = phase[jj as usize];
                let x = col[jj as usize];
                scc += w * cs * cs;
                sss += w * sn * sn;
                scs += w * cs * sn;
                bx += w * x * cs;
                by += w * x * sn;
            }
            let det = scc * sss - scs * scs;
            *o = if det.abs() > 1e-12 * (scc + sss).powi(2) {
                let a = (sss * bx - scs * by) / det;
                let b = (scc * by - scs * bx) / det;
                a.hypot(b)
            } else {
                // degenerate window (carrier aliased onto the sample grid)
                (bx.powi(2) + by.powi(2)).sqrt() / (0.5 * (scc + sss)).max(1e-300)
            };
        }
    }
    out
}

fn block_average_axial(env: &mut FanGrid<f64>, factor: usize) {
    if factor <= 1 {
        return;
    }
    let n = env.n_axial;
    for i in 0..env.n_scanlines {
        let col = env.column_mut(i);
        let means: Vec<f64> = col.chunks(factor).map(|c| c.iter().sum::<f64>() / c.len() as f64).collect();
        let centre = |b: usize| (b * factor) as f64 + (factor.min(n - b * factor) as f64 - 1.0) / 2.0;
        let last = means.len() - 1;
        // linear re-expansion between block centres, constant beyond the outer ones
        for (j, v) in col.iter_mut().enumerate() {
            let pos = j as f64;
            *v = if last == 0 || pos <= centre(0) {
                means[0]
            } else if pos >= centre(last) {
                means[last]
            } else {
                let k = (((pos - centre(0)) / factor as f64).floor() as usize).min(last - 1);
                let f = ((pos - centre(k)) / (centre(k + 1) - centre(k))).clamp(0.0, 1.0);
                means[k] * (1.0 - f) + means[k + 1] * f
            };
        }
    }
}

/// Log-compressed intensity in `[0, 1]` from an envelope, after TGC.
pub fn log_compress(env: &FanGrid<f64>, geom: &ScanGeometry, tgc_db_per_cm: f64, dynamic_range_db: f64) -> FanGrid<f64> {
    let mut g = env.clone();
    for i in 0..g.n_scanlines {
        for (j, v) in g.column_mut(i).iter_mut().enumerate() {
            *v *= 10f64.powf(tgc_db_per_cm * geom.sample_depth_cm(j) / 20.0);
        }
    }
    let max = g.data.iter().copied().fold(0.0, f64::max);
    if !(max > 0.0) {
        return g.map(|_| 0.0);
    }
    g.map(|v| {
        let db = if v > 0.0 { 20.0 * (v / max).log10() } else { -dynamic_range_db };
        (db.clamp(-dynamic_range_db, 0.0) + dynamic_range_db) / dynamic_range_db
    })
}

/// Envelope detection, TGC, log compression and scan conversion.
/// `carrier` is the RF centre frequency in cycles per axial sample.
pub fn postprocess_bmode(rf: &FanGrid<f64>, geom: &ScanGeometry, carrier: f64, tgc_db_per_cm: f64, dynamic_range_db: f64) -> Result<CartesianImage> {
    postprocess_with(rf, &ScanConverter::new(geom)?, carrier, tgc_db_per_cm, dynamic_range_db, 1)
}

fn postprocess_with(rf: &FanGrid<f64>, conv: &ScanConverter, carrier: f64, tgc: f64, dr: f64, axial_downsample: usize) -> Result<CartesianImage> {
    if rf.data.iter().any(|v| !v.is_finite()) {
        return Err(Error::Shape("RF image contains non-finite values".into()));
    }
    let mut env = envelope(rf, carrier);
    block_average_axial(&mut env, axial_downsample);
    let bmode = log_compress(&env, conv.geometry(), tgc, dr);
    let mut img = conv.convert(&bmode, Interp::Bilinear, ValueRange::Unit)?;
    img.apply_mask();
    Ok(img)
}

/// One training tuple. All images share the Cartesian grid and `mask`.
#[derive(Debug, Clone, PartialEq)]
pub struct Frame {
    /// Tissue labels (nearest-neighbour scan conversion).
    pub s: CartesianImage,
    /// Normalised integral attenuation in `[0, 1]`.
    pub a: CartesianImage,
    /// Low-quality render, when requested.
    pub low: Option<CartesianImage>,
    /// High-quality target in `[0, 1]`.
    pub y: CartesianImage,
    pub mask: Vec<bool>,
    /// Pixels distal to a strongly attenuating tissue on the same scanline.
    pub shadow: Vec<bool>,
    pub pose: ProbePose,
    pub seed: u64,
}

impl Frame {
    pub fn height(&self) -> usize {
        self.y.height
    }

    pub fn width(&self) -> usize {
        self.y.width
    }
}

/// Fan cells lying beyond a tissue with `mu >= threshold` on their scanline,
/// excluding the attenuating tissue itself.
pub fn shadow_band(s: &FanTissueMap, props: &TissueProperties, threshold: f64) -> Result<FanGrid<bool>> {
    let mut out = FanGrid::filled(s.n_scanlines, s.n_axial, false);
    for i in 0..s.n_scanlines {
        let mut seen = false;
        for j in 0..s.n_axial {
            let hard = props.get(s.get(i, j))?.mu_db_cm_mhz >= threshold;
            out.set(i, j, seen && !hard);
            seen |= hard;
        }
    }
    Ok(out)
}

/// Reusable per-geometry state for rendering many frames.
pub struct Renderer {
    conv: ScanConverter,
    props: TissueProperties,
    cfg: OracleConfig,
    lut: Vec<f64>,
}

impl Renderer {
    pub fn new(geom: &ScanGeometry, props: &TissueProperties, cfg: &OracleConfig) -> Result<Self> {
        cfg.validate()?;
        let lut = acoustics::attenuation_lut(props, geom)?;
        Ok(Self { conv: ScanConverter::new(geom)?, props: props.clone(), cfg: cfg.clone(), lut })
    }

    pub fn geometry(&self) -> &ScanGeometry {
        self.conv.geometry()
    }

    pub fn converter(&self) -> &ScanConverter {
        &self.conv
    }

    fn render_image(&self, s: &FanTissueMap, a_raw: &FanAttenuationMap, boundaries: &FanGrid<f64>, q: &RenderQuality, seed: u64) -> Result<CartesianImage> {
        let field = scatterer_field_with_density(s, &self.props, seed, q.scatterer_density_scale)?;
        let rf = render_rf(&field, boundaries, q.psf_enabled.then_some(&self.cfg.psf), a_raw, self.geometry())?;
        postprocess_with(&rf, &self.conv, self.cfg.psf.axial_freq, self.cfg.tgc_db_per_cm, self.cfg.dynamic_range_db, q.axial_downsample)
    }

    pub fn render_slice(&self, s: &FanTissueMap, pose: ProbePose, seed: u64) -> Result<Frame> {
        self.props.check_covers(s.data.iter().copied().max().map_or(0, |m| m as usize + 1))?;
        let a_raw = acoustics::integrate_attenuation(s, &self.lut)?;
        let a_norm = acoustics::normalize_attenuation(&a_raw)?;
        let boundaries = boundary_echoes(s, &self.props, self.cfg.boundary_gain)?;
        let y = self.render_image(s, &a_raw, &boundaries, &RenderQuality::high(), seed)?;
        let low = match &self.cfg.low_quality {
            Some(q) => Some(self.render_image(s, &a_raw, &boundaries, q, seed)?),
            None => None,
        };
        let s_img = self.conv.convert_labels(s)?;
        let mut a = self.conv.convert(&a_norm, Interp::Bilinear, ValueRange::Unit)?;
        a.apply_mask();
        let shadow_fan = shadow_band(s, &self.props, self.cfg.shadow_mu_threshold)?;
        let shadow_img = self.conv.convert(&shadow_fan.map(|b| b as u8 as f64), Interp::Nearest, ValueRange::Unit)?;
        let shadow = shadow_img.pixels.iter().map(|&v| v > 0.5).collect();
        Ok(Frame { mask: y.mask.clone(), s: s_img, a, low, y, shadow, pose, seed })
    }

    pub fn render(&self, phantom: &Phantom3D, pose: &ProbePose, seed: u64) -> Result<Frame> {
        pose.validate()?;
        let s = scene::slice_tissue_map(phantom, pose, self.geometry());
        self.render_slice(&s, *pose, seed)
    }
}

/// Renders one frame: slice, attenuation, speckle, post-processing.
pub fn render_frame(
    phantom: &Phantom3D,
    pose: &ProbePose,
    geom: &ScanGeometry,
    props: &TissueProperties,
    cfg: &OracleConfig,
    seed: u64,
) -> Result<Frame> {
    Renderer::new(geom, props, cfg)?.render(phantom, pose, seed)
}
