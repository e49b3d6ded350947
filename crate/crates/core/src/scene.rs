//! Analytic phantoms, probe poses, and fan-shaped tissue slices.
//!
//! World coordinates are millimetres: `x` lateral, `y` elevational and `z`
//! depth (positive into the body). The world box spans
//! `[-ex/2, ex/2] x [-ey/2, ey/2] x [0, ez]`; queries outside it are background.
//!
//! The probe frame has `x` along the transducer face, `y` normal to the
//! imaging plane and `z` along the beam. Scanlines fan out from a virtual apex
//! located `probe_radius` behind the face centre.

use nalgebra::{Unit, UnitQuaternion, Vector3};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seed;

/// Tissue label. Index 0 is the coupling medium / background.
pub type TissueIndex = u8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "shape", rename_all = "lowercase")]
pub enum Primitive {
    /// Axis-aligned solid ellipsoid.
    Ellipsoid { center_mm: [f64; 3], radii_mm: [f64; 3], tissue: TissueIndex },
    /// Finite solid cylinder around `axis` through `center_mm`.
    Cylinder { center_mm: [f64; 3], axis: [f64; 3], radius_mm: f64, half_length_mm: f64, tissue: TissueIndex },
    /// Axis-aligned ellipsoidal shell of the given wall thickness.
    Shell { center_mm: [f64; 3], radii_mm: [f64; 3], thickness_mm: f64, tissue: TissueIndex },
}

fn ellipsoid_level(p: &Vector3<f64>, c: &[f64; 3], r: &[f64; 3]) -> f64 {
    (0..3).map(|k| ((p[k] - c[k]) / r[k]).powi(2)).sum()
}

impl Primitive {
    pub fn tissue(&self) -> TissueIndex {
        match self {
            Primitive::Ellipsoid { tissue, .. } | Primitive::Cylinder { tissue, .. } | Primitive::Shell { tissue, .. } => *tissue,
        }
    }

    pub fn contains(&self, p: &Vector3<f64>) -> bool {
        match self {
            Primitive::Ellipsoid { center_mm, radii_mm, .. } => ellipsoid_level(p, center_mm, radii_mm) <= 1.0,
            Primitive::Shell { center_mm, radii_mm, thickness_mm, .. } => {
                if ellipsoid_level(p, center_mm, radii_mm) > 1.0 {
                    return false;
                }
                let inner = radii_mm.map(|r| r - thickness_mm);
                ellipsoid_level(p, center_mm, &inner) > 1.0
            }
            Primitive::Cylinder { center_mm, axis, radius_mm, half_length_mm, .. } => {
                let a = Vector3::from(*axis).normalize();
                let d = p - Vector3::from(*center_mm);
                let t = d.dot(&a);
                t.abs() <= *half_length_mm && (d - a * t).norm_squared() <= radius_mm * radius_mm
            }
        }
    }

    fn validate(&self) -> Result<()> {
        let positive = |v: f64| v.is_finite() && v > 0.0;
        let ok = match self {
            Primitive::Ellipsoid { radii_mm, .. } => radii_mm.iter().all(|&r| positive(r)),
            Primitive::Shell { radii_mm, thickness_mm, .. } => {
                radii_mm.iter().all(|&r| positive(r)) && positive(*thickness_mm) && radii_mm.iter().all(|&r| r > *thickness_mm)
            }
            Primitive::Cylinder { axis, radius_mm, half_length_mm, .. } => {
                positive(*radius_mm) && positive(*half_length_mm) && Vector3::from(*axis).norm() > 1e-12
            }
        };
        if ok {
            Ok(())
        } else {
            Err(Error::Phantom(format!("degenerate primitive {self:?}")))
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhantomSpec {
    /// Painted in order; later primitives win where they overlap.
    pub primitives: Vec<Primitive>,
    pub world_extent_mm: [f64; 3],
    #[serde(default)]
    pub seed: u64,
}

/// Evaluable implicit scene built from a validated [`PhantomSpec`].
#[derive(Debug, Clone)]
pub struct Phantom3D {
    primitives: Vec<Primitive>,
    extent: [f64; 3],
    n_tissues: usize,
}

/// Validates `spec` and builds the implicit scene.
pub fn build_phantom(spec: &PhantomSpec) -> Result<Phantom3D> {
    if spec.primitives.is_empty() {
        return Err(Error::Phantom("no primitives".into()));
    }
    if !spec.world_extent_mm.iter().all(|e| e.is_finite() && *e > 0.0) {
        return Err(Error::Phantom(format!("world extent {:?} must be positive", spec.world_extent_mm)));
    }
    for p in &spec.primitives {
        p.validate()?;
    }
    let max = spec.primitives.iter().map(Primitive::tissue).max().unwrap_or(0);
    let mut used = vec![false; max as usize + 1];
    used[0] = true;
    for p in &spec.primitives {
        used[p.tissue() as usize] = true;
    }
    if let Some(missing) = used.iter().position(|u| !u) {
        return Err(Error::Phantom(format!("tissue indices must be dense in 0..{}; index {missing} is unused", max as usize + 1)));
    }
    Ok(Phantom3D { primitives: spec.primitives.clone(), extent: spec.world_extent_mm, n_tissues: max as usize + 1 })
}

impl Phantom3D {
    /// Number of tissue labels `T` (indices `0..T`).
    pub fn n_tissues(&self) -> usize {
        self.n_tissues
    }

    pub fn extent(&self) -> [f64; 3] {
        self.extent
    }

    pub fn in_world(&self, p: &Vector3<f64>) -> bool {
        p.x.abs() <= self.extent[0] / 2.0 && p.y.abs() <= self.extent[1] / 2.0 && p.z >= 0.0 && p.z <= self.extent[2]
    }

    /// Tissue at a world point; painter's order, background 0.
    pub fn query(&self, p: &Vector3<f64>) -> TissueIndex {
        if !self.in_world(p) {
            return 0;
        }
        self.primitives.iter().rev().find(|prim| prim.contains(p)).map_or(0, Primitive::tissue)
    }

    /// Depth of the first non-background point below `(x, y)`, or 0.
    pub fn surface_depth(&self, x: f64, y: f64) -> f64 {
        const STEP: f64 = 0.5;
        let steps = (self.extent[2] / STEP).ceil() as usize;
        let hit = (0..=steps).map(|k| (k as f64 * STEP).min(self.extent[2])).find(|&z| self.query(&Vector3::new(x, y, z)) != 0);
        let Some(z_hit) = hit else { return 0.0 };
        if z_hit == 0.0 {
            return 0.0;
        }
        let (mut lo, mut hi) = (z_hit - STEP, z_hit);
        for _ in 0..40 {
            let mid = 0.5 * (lo + hi);
            if self.query(&Vector3::new(x, y, mid)) != 0 {
                hi = mid;
            } else {
                lo = mid;
            }
        }
        hi
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProbePose {
    pub origin_mm: [f64; 3],
    /// Unit quaternion `(w, x, y, z)` rotating the probe frame into the world.
    pub orientation: [f64; 4],
    /// Rotation about the imaging-plane normal, applied before `orientation`.
    pub in_plane_rad: f64,
}

impl ProbePose {
    pub fn identity_at(origin_mm: [f64; 3]) -> Self {
        Self { origin_mm, orientation: [1.0, 0.0, 0.0, 0.0], in_plane_rad: 0.0 }
    }

    pub fn validate(&self) -> Result<()> {
        let norm = self.orientation.iter().map(|v| v * v).sum::<f64>().sqrt();
        if (norm - 1.0).abs() > 1e-9 || !self.in_plane_rad.is_finite() {
            return Err(Error::Geometry(format!("orientation {:?} is not a unit quaternion", self.orientation)));
        }
        Ok(())
    }

    fn rotation(&self) -> UnitQuaternion<f64> {
        let [w, x, y, z] = self.orientation;
        let q = UnitQuaternion::new_unchecked(nalgebra::Quaternion::new(w, x, y, z));
        q * UnitQuaternion::from_axis_angle(&Vector3::y_axis(), self.in_plane_rad)
    }

    /// Maps a probe-plane point (lateral, axial) in mm to world coordinates.
    pub fn to_world(&self, lateral_mm: f64, axial_mm: f64) -> Vector3<f64> {
        Vector3::from(self.origin_mm) + self.rotation() * Vector3::new(lateral_mm, 0.0, axial_mm)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ScanGeometry {
    pub fov_deg: f64,
    pub depth_m: f64,
    pub probe_radius_m: f64,
    pub n_scanlines: usize,
    pub n_axial: usize,
    /// Cartesian display size `(height, width)`.
    pub cart_size: (usize, usize),
    pub freq_mhz: f64,
}

impl Default for ScanGeometry {
    fn default() -> Self {
        Self { fov_deg: 70.0, depth_m: 0.15, probe_radius_m: 0.06, n_scanlines: 128, n_axial: 256, cart_size: (256, 256), freq_mhz: 8.0 }
    }
}

impl ScanGeometry {
    pub fn validate(&self) -> Result<()> {
        if !(self.fov_deg > 0.0 && self.fov_deg < 180.0) {
            return Err(Error::Geometry(format!("fov {} deg outside (0, 180)", self.fov_deg)));
        }
        if !(self.depth_m > 0.0 && self.depth_m.is_finite()) {
            return Err(Error::Geometry(format!("depth {} m must be positive", self.depth_m)));
        }
        if !(self.probe_radius_m >= 0.0 && self.probe_radius_m.is_finite()) {
            return Err(Error::Geometry(format!("probe radius {} m must be non-negative", self.probe_radius_m)));
        }
        if self.n_scanlines < 2 || self.n_axial < 2 {
            return Err(Error::Geometry("need at least 2 scanlines and 2 axial samples".into()));
        }
        if self.cart_size.0 < 2 || self.cart_size.1 < 2 {
            return Err(Error::Geometry("Cartesian image must be at least 2x2".into()));
        }
        if !(self.freq_mhz > 0.0) {
            return Err(Error::Geometry("frequency must be positive".into()));
        }
        Ok(())
    }

    pub fn half_fov_rad(&self) -> f64 {
        self.fov_deg.to_radians() / 2.0
    }

    pub fn probe_radius_mm(&self) -> f64 {
        self.probe_radius_m * 1e3
    }

    pub fn depth_mm(&self) -> f64 {
        self.depth_m * 1e3
    }

    /// Spacing between axial samples in cm.
    pub fn axial_step_cm(&self) -> f64 {
        self.depth_m * 100.0 / (self.n_axial - 1) as f64
    }

    /// Depth of axial sample `j` below the transducer face, in cm.
    pub fn sample_depth_cm(&self, j: usize) -> f64 {
        j as f64 * self.axial_step_cm()
    }

    pub fn scanline_angle(&self, i: usize) -> f64 {
        -self.half_fov_rad() + 2.0 * self.half_fov_rad() * i as f64 / (self.n_scanlines - 1) as f64
    }

    /// Range from the virtual apex of axial sample `j`, in mm.
    pub fn sample_range_mm(&self, j: usize) -> f64 {
        self.probe_radius_mm() + self.depth_mm() * j as f64 / (self.n_axial - 1) as f64
    }

    /// Probe-plane position (lateral, axial below the face centre) of fan cell `(i, j)`.
    pub fn fan_point_mm(&self, i: usize, j: usize) -> (f64, f64) {
        let theta = self.scanline_angle(i);
        let r = self.sample_range_mm(j);
        (r * theta.sin(), r * theta.cos() - self.probe_radius_mm())
    }
}

/// Scanline-major grid in fan coordinates: `n_scanlines` columns of `n_axial` samples.
#[derive(Debug, Clone, PartialEq)]
pub struct FanGrid<T> {
    pub n_scanlines: usize,
    pub n_axial: usize,
    pub data: Vec<T>,
}

impl<T: Copy> FanGrid<T> {
    pub fn filled(n_scanlines: usize, n_axial: usize, value: T) -> Self {
        Self { n_scanlines, n_axial, data: vec![value; n_scanlines * n_axial] }
    }

    pub fn for_geometry(geom: &ScanGeometry, value: T) -> Self {
        Self::filled(geom.n_scanlines, geom.n_axial, value)
    }

    pub fn get(&self, scanline: usize, sample: usize) -> T {
        self.data[scanline * self.n_axial + sample]
    }

    pub fn set(&mut self, scanline: usize, sample: usize, v: T) {
        self.data[scanline * self.n_axial + sample] = v;
    }

    pub fn column(&self, scanline: usize) -> &[T] {
        &self.data[scanline * self.n_axial..(scanline + 1) * self.n_axial]
    }

    pub fn column_mut(&mut self, scanline: usize) -> &mut [T] {
        &mut self.data[scanline * self.n_axial..(scanline + 1) * self.n_axial]
    }

    pub fn map<U: Copy>(&self, f: impl Fn(T) -> U) -> FanGrid<U> {
        FanGrid { n_scanlines: self.n_scanlines, n_axial: self.n_axial, data: self.data.iter().map(|&v| f(v)).collect() }
    }

    pub fn matches(&self, geom: &ScanGeometry) -> bool {
        self.n_scanlines == geom.n_scanlines && self.n_axial == geom.n_axial && self.data.len() == self.n_scanlines * self.n_axial
    }
}

pub type FanTissueMap = FanGrid<TissueIndex>;

/// Samples the phantom on the fan grid of `geom` for the given pose.
pub fn slice_tissue_map(phantom: &Phantom3D, pose: &ProbePose, geom: &ScanGeometry) -> FanTissueMap {
    let mut grid = FanGrid::for_geometry(geom, 0);
    for i in 0..geom.n_scanlines {
        for j in 0..geom.n_axial {
            let (lat, ax) = geom.fan_point_mm(i, j);
            grid.set(i, j, phantom.query(&pose.to_world(lat, ax)));
        }
    }
    grid
}

/// Probe poses on a regular `grid_nx x grid_ny` lattice over the central 60%
/// of the phantom's top face, each with `orientations_per_pos` stratified yaw
/// angles plus small random elevational tilt and in-plane rotation.
pub fn sample_probe_poses(phantom: &Phantom3D, grid_nx: usize, grid_ny: usize, orientations_per_pos: usize, seed: u64) -> Vec<ProbePose> {
    assert!(grid_nx >= 1 && grid_ny >= 1 && orientations_per_pos >= 1, "grid counts must be >= 1");
    const SPAN: f64 = 0.6;
    const MAX_TILT_DEG: f64 = 15.0;
    const MAX_IN_PLANE_DEG: f64 = 10.0;
    let lattice = |n: usize, extent: f64| -> Vec<f64> {
        if n == 1 {
            return vec![0.0];
        }
        let half = SPAN * extent / 2.0;
        (0..n).map(|k| -half + 2.0 * half * k as f64 / (n - 1) as f64).collect()
    };
    let [ex, ey, _] = phantom.extent();
    let mut rng = seed::rng(seed);
    let mut poses = Vec::with_capacity(grid_nx * grid_ny * orientations_per_pos);
    for x in lattice(grid_nx, ex) {
        for y in lattice(grid_ny, ey) {
            let z = phantom.surface_depth(x, y);
            for k in 0..orientations_per_pos {
                let yaw = std::f64::consts::PI * (k as f64 + rng.random::<f64>()) / orientations_per_pos as f64;
                let tilt = rng.random_range(-MAX_TILT_DEG..=MAX_TILT_DEG).to_radians();
                let in_plane = rng.random_range(-MAX_IN_PLANE_DEG..=MAX_IN_PLANE_DEG).to_radians();
                let q = UnitQuaternion::from_axis_angle(&Vector3::z_axis(), yaw)
                    * UnitQuaternion::from_axis_angle(&Unit::new_normalize(Vector3::x()), tilt);
                let c = q.into_inner().coords; // (i, j, k, w)
                poses.push(ProbePose { origin_mm: [x, y, z], orientation: [c[3], c[0], c[1], c[2]], in_plane_rad: in_plane });
            }
        }
    }
    poses
}

/// Desk-scale "fetal-like" phantom: layered abdominal wall, an anechoic
/// fluid sac, a fetal body with rib-like bone cylinders and a head with a
/// strongly attenuating skull shell.
///
/// Tissue indices: 0 gel, 1 skin, 2 fat, 3 muscle, 4 maternal soft tissue,
/// 5 amniotic fluid, 6 fetal soft tissue, 7 brain, 8 bone.
pub fn default_phantom_spec() -> PhantomSpec {
    use Primitive::*;
    let wall = |inset: f64, tissue| Ellipsoid { center_mm: [0.0, 0.0, 300.0], radii_mm: [380.0 - inset, 380.0 - inset, 300.0 - inset], tissue };
    let mut primitives = vec![
        wall(0.0, 1),
        wall(3.0, 2),
        wall(16.0, 3),
        wall(28.0, 4),
        Ellipsoid { center_mm: [0.0, 0.0, 95.0], radii_mm: [120.0, 110.0, 58.0], tissue: 5 },
        Ellipsoid { center_mm: [30.0, 0.0, 100.0], radii_mm: [50.0, 32.0, 30.0], tissue: 6 },
        Ellipsoid { center_mm: [-52.0, 0.0, 92.0], radii_mm: [30.0, 26.0, 28.0], tissue: 7 },
        Shell { center_mm: [-52.0, 0.0, 92.0], radii_mm: [30.0, 26.0, 28.0], thickness_mm: 3.0, tissue: 8 },
    ];
    for k in 0..5 {
        let x = 8.0 + 11.0 * k as f64;
        primitives.push(Cylinder { center_mm: [x, 0.0, 82.0], axis: [0.0, 1.0, 0.0], radius_mm: 2.5, half_length_mm: 26.0, tissue: 8 });
    }
    PhantomSpec { primitives, world_extent_mm: [320.0, 320.0, 220.0], seed: 0 }
}
