//! Synthetic beating-LV studies with analytically known deformation.
//!
//! The phantom is a thick-walled half-ellipsoid shell (myocardium between an
//! endocardial and an epicardial ellipsoid, cavity inside, truncated at a
//! basal plane through the center). The forward motion of a material point
//! `q` (millimetres, relative to the LV center) at frame `t` composes three
//! invertible factors, written in coordinates normalized by the epicardial
//! semi-axes (`u = q / epi_radii`, `r = |u|`):
//!
//! ```text
//! 1. radial contraction   u -> u * f_t(r)/r
//!      f_t(r) = c_t * r                      r <= r_en   (cavity)
//!      f_t(r) = (r^3 + (c_t^3 - 1) r_en^3)^(1/3)  else   (wall, far field)
//!      c_t = 1 - A*sin^2(pi*t/T)
//! 2. isochoric stretch    diag(1/sqrt(l_t), 1/sqrt(l_t), l_t)
//!      l_t = 1 - B*sin^2(pi*t/T)
//! 3. twist                rotate (x, y) by Theta*sin^2(pi*t/T) * z/c_ep
//! ```
//!
//! The cavity contracts uniformly (volume factor `c_t^3`, which produces the
//! volume curve and a healthy ejection fraction) while the wall branch of
//! `f_t` satisfies `f^3 = r^3 + k`, the incompressible radial flow, so
//! myocardial volume is preserved; the wall thickens as it contracts, the
//! way real myocardium does. The stretch and twist factors have unit
//! Jacobian determinant, so the composite never folds.
//!
//! Every factor inverts in closed form, so frame images and labels are exact
//! pull-backs of frame 0 and the backward ground-truth field is
//! `phi_t(p) = A_t^{-1}(p) - p` in voxel units. Having the true field makes
//! end-point-error evaluation possible, which real acquisitions never offer.

use crate::error::{Error, Result};
use crate::grid::{
    DisplacementField, GridDims, LabelVolume, ScalarVolume, Spacing, LABEL_BACKGROUND,
    LABEL_CAVITY, LABEL_MYOCARDIUM,
};
use crate::multiview::{extract_edge_map, PlaneId, PlaneMask, PlaneSet, PlaneSpec};
use crate::rng::Rng;
use serde::{Deserialize, Serialize};

const INTENSITY_MYOCARDIUM: f64 = 1.0;
const INTENSITY_CAVITY: f64 = 0.5;
const INTENSITY_BACKGROUND: f64 = 0.05;
/// Width of the smooth intensity transition in implicit-surface units.
const PROFILE_WIDTH: f64 = 0.12;
/// Width of the smooth basal intensity transition in millimetres.
const BASAL_WIDTH_MM: f64 = 3.0;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PhantomConfig {
    pub dims: [usize; 3],
    pub spacing_mm: [f64; 3],
    /// Endocardial semi-axes (a, b, c) in millimetres.
    pub endo_radii_mm: [f64; 3],
    /// Epicardial semi-axes; must exceed the endocardial ones componentwise.
    pub epi_radii_mm: [f64; 3],
    pub center_mm: [f64; 3],
    pub frames: usize,
    /// Radial contraction amplitude A in [0, 0.5).
    pub contraction: f64,
    /// Longitudinal shortening amplitude B in [0, 0.5).
    pub shortening: f64,
    /// Twist amplitude in radians (apex-to-base), default 0.
    pub twist: f64,
    /// Additive Gaussian image noise (intensity units).
    pub noise_sigma: f64,
    /// Slice misalignment amplitude in millimetres, default 0.
    pub misalignment_mm: f64,
    pub seed: u64,
}

impl Default for PhantomConfig {
    fn default() -> Self {
        PhantomConfig {
            dims: [64, 64, 32],
            spacing_mm: [1.25, 1.25, 2.0],
            // Proportional radii keep the endocardium a ball in normalized
            // coordinates, which makes wall-volume preservation exact.
            endo_radii_mm: [14.3, 14.3, 18.2],
            epi_radii_mm: [22.0, 22.0, 28.0],
            center_mm: [40.0, 40.0, 42.0],
            frames: 20,
            contraction: 0.15,
            shortening: 0.10,
            twist: 0.0,
            noise_sigma: 0.03,
            misalignment_mm: 0.0,
            seed: 42,
        }
    }
}

impl PhantomConfig {
    pub fn validate(&self) -> Result<(GridDims, Spacing)> {
        let dims = GridDims::new(self.dims[0], self.dims[1], self.dims[2])?;
        let spacing = Spacing::new(self.spacing_mm[0], self.spacing_mm[1], self.spacing_mm[2])?;
        if dims.d < 10 {
            return Err(Error::InvalidArgument(
                "phantom needs at least 10 z-slices for the 9-slice SAX band".into(),
            ));
        }
        for a in 0..3 {
            if !(self.endo_radii_mm[a] > 0.0) {
                return Err(Error::InvalidArgument(format!(
                    "endo_radii_mm[{a}] must be positive"
                )));
            }
            if self.epi_radii_mm[a] <= self.endo_radii_mm[a] {
                return Err(Error::InvalidArgument(format!(
                    "epi_radii_mm[{a}] must exceed endo_radii_mm[{a}]"
                )));
            }
        }
        if self.frames < 2 {
            return Err(Error::InvalidArgument("frames must be >= 2".into()));
        }
        if !(0.0..0.5).contains(&self.contraction) {
            return Err(Error::InvalidArgument(
                "contraction must lie in [0, 0.5)".into(),
            ));
        }
        if !(0.0..0.5).contains(&self.shortening) {
            return Err(Error::InvalidArgument(
                "shortening must lie in [0, 0.5)".into(),
            ));
        }
        if self.noise_sigma < 0.0 {
            return Err(Error::InvalidArgument("noise_sigma must be >= 0".into()));
        }
        if self.misalignment_mm < 0.0 {
            return Err(Error::InvalidArgument(
                "misalignment_mm must be >= 0".into(),
            ));
        }
        Ok((dims, spacing))
    }

    /// End-systolic frame index of the analytic cycle.
    pub fn es_index(&self) -> usize {
        (self.frames as f64 / 2.0).round() as usize
    }
}

/// A generated study: per-frame images, clean labels and ground-truth fields,
/// one clean 3D myocardial edge volume per frame, and the plane complement.
///
/// Per-plane 2D edge maps are derived on demand by masking the 3D edge
/// volume; under slice misalignment the SAX-plane maps are shifted in-plane
/// together with their image slabs while the LAX maps stay clean.
#[derive(Debug, Clone)]
pub struct PhantomStudy {
    pub config: PhantomConfig,
    pub dims: GridDims,
    pub spacing: Spacing,
    pub images: Vec<ScalarVolume>,
    pub labels: Vec<LabelVolume>,
    pub gt_fields: Vec<DisplacementField>,
    pub edges: Vec<ScalarVolume>,
    pub planes: PlaneSet,
    /// Per z-slice in-plane offsets in millimetres; all zero when no
    /// misalignment was applied.
    pub slice_offsets_mm: Vec<[f64; 2]>,
}

struct Deformation {
    /// Cavity contraction factor c_t.
    cavity_scale: f64,
    /// Longitudinal stretch l_t; the in-plane factor 1/sqrt(l_t) keeps the
    /// stretch volume-preserving.
    long_scale: f64,
    /// Twist angle at unit normalized depth, radians.
    twist: f64,
    /// Epicardial semi-axes used as the coordinate normalization.
    norm: [f64; 3],
    /// Normalized radius of the uniformly contracting core; the wall must
    /// lie outside this ball for exact volume preservation.
    blend_radius: f64,
}

impl Deformation {
    fn at_frame(config: &PhantomConfig, t: usize) -> Self {
        let phase = (std::f64::consts::PI * t as f64 / config.frames as f64).sin();
        let s = phase * phase;
        let blend_radius = (0..3)
            .map(|a| config.endo_radii_mm[a] / config.epi_radii_mm[a])
            .fold(0.0f64, f64::max);
        Deformation {
            cavity_scale: 1.0 - config.contraction * s,
            long_scale: 1.0 - config.shortening * s,
            twist: config.twist * s,
            norm: config.epi_radii_mm,
            blend_radius,
        }
    }

    fn radial_forward(&self, r: f64) -> f64 {
        let c = self.cavity_scale;
        let rb = self.blend_radius;
        if r <= rb {
            c * r
        } else {
            let k = (c * c * c - 1.0) * rb * rb * rb;
            (r * r * r + k).cbrt()
        }
    }

    fn radial_inverse(&self, rho: f64) -> f64 {
        let c = self.cavity_scale;
        let rb = self.blend_radius;
        if rho <= c * rb {
            rho / c
        } else {
            let k = (c * c * c - 1.0) * rb * rb * rb;
            (rho * rho * rho - k).cbrt()
        }
    }

    /// Forward motion of a material point (mm, relative to center).
    fn forward(&self, q: [f64; 3]) -> [f64; 3] {
        let mut u = [q[0] / self.norm[0], q[1] / self.norm[1], q[2] / self.norm[2]];
        let r = (u[0] * u[0] + u[1] * u[1] + u[2] * u[2]).sqrt();
        if r > 0.0 {
            let scale = self.radial_forward(r) / r;
            for c in u.iter_mut() {
                *c *= scale;
            }
        }
        let g = 1.0 / self.long_scale.sqrt();
        let p = [
            u[0] * g * self.norm[0],
            u[1] * g * self.norm[1],
            u[2] * self.long_scale * self.norm[2],
        ];
        let theta = self.twist * p[2] / self.norm[2];
        let (ct, st) = (theta.cos(), theta.sin());
        [ct * p[0] - st * p[1], st * p[0] + ct * p[1], p[2]]
    }

    /// Closed-form inverse: the twist preserves z, which fixes its angle;
    /// the two remaining factors invert directly.
    fn inverse(&self, y: [f64; 3]) -> [f64; 3] {
        let theta = self.twist * y[2] / self.norm[2];
        let (ct, st) = (theta.cos(), theta.sin());
        let p = [ct * y[0] + st * y[1], -st * y[0] + ct * y[1], y[2]];
        let g = 1.0 / self.long_scale.sqrt();
        let mut u = [
            p[0] / (g * self.norm[0]),
            p[1] / (g * self.norm[1]),
            p[2] / (self.long_scale * self.norm[2]),
        ];
        let rho = (u[0] * u[0] + u[1] * u[1] + u[2] * u[2]).sqrt();
        if rho > 0.0 {
            let scale = self.radial_inverse(rho) / rho;
            for c in u.iter_mut() {
                *c *= scale;
            }
        }
        [u[0] * self.norm[0], u[1] * self.norm[1], u[2] * self.norm[2]]
    }
}

fn ellipsoid_level(q: [f64; 3], radii: [f64; 3]) -> f64 {
    let a = q[0] / radii[0];
    let b = q[1] / radii[1];
    let c = q[2] / radii[2];
    a * a + b * b + c * c
}

fn smoothstep(t: f64) -> f64 {
    let t = t.clamp(0.0, 1.0);
    t * t * (3.0 - 2.0 * t)
}

impl PhantomConfig {
    /// Hard label of a material point (mm, relative to center).
    fn label_at(&self, q: [f64; 3]) -> u8 {
        if q[2] > 0.0 {
            return LABEL_BACKGROUND;
        }
        if ellipsoid_level(q, self.endo_radii_mm) < 1.0 {
            return LABEL_CAVITY;
        }
        if ellipsoid_level(q, self.epi_radii_mm) <= 1.0 {
            return LABEL_MYOCARDIUM;
        }
        LABEL_BACKGROUND
    }

    /// Smooth noiseless intensity of a material point.
    fn intensity_at(&self, q: [f64; 3]) -> f64 {
        // Soft memberships of the epicardial and endocardial interiors and
        // of the half-space below the basal plane.
        let e_ep = ellipsoid_level(q, self.epi_radii_mm).sqrt();
        let e_en = ellipsoid_level(q, self.endo_radii_mm).sqrt();
        let m_ep = smoothstep((1.0 - e_ep) / PROFILE_WIDTH + 0.5);
        let m_en = smoothstep((1.0 - e_en) / PROFILE_WIDTH + 0.5);
        let m_base = smoothstep(-q[2] / BASAL_WIDTH_MM + 0.5);
        INTENSITY_BACKGROUND
            + (INTENSITY_MYOCARDIUM - INTENSITY_BACKGROUND) * m_ep * m_base
            - (INTENSITY_MYOCARDIUM - INTENSITY_CAVITY) * m_en * m_base
    }
}

/// Build the 9 SAX slice planes centered on the mid z-slice plus the 2CH
/// plane (x-z through the LV center) and the 4CH plane (the 2CH plane
/// rotated 60 degrees about the long axis).
pub fn phantom_planes(config: &PhantomConfig) -> Result<Vec<PlaneSpec>> {
    let (dims, spacing) = config.validate()?;
    let mid = dims.d / 2;
    if mid < 4 || mid + 4 >= dims.d {
        return Err(Error::InvalidArgument(
            "grid too shallow to center 9 SAX slices on the mid-slice".into(),
        ));
    }
    let full_extent = [
        2.0 * dims.w as f64 * spacing.x,
        2.0 * dims.h as f64 * spacing.y,
    ];
    let mut specs = Vec::with_capacity(11);
    for (i, k) in ((mid - 4)..=(mid + 4)).enumerate() {
        specs.push(PlaneSpec {
            id: PlaneId::Sax(i as u8),
            origin_mm: [config.center_mm[0], config.center_mm[1], k as f64 * spacing.z],
            axis_u: [1.0, 0.0, 0.0],
            axis_v: [0.0, 1.0, 0.0],
            extent_mm: full_extent,
        });
    }
    let lax_extent = [
        2.0 * dims.w as f64 * spacing.x,
        2.0 * dims.d as f64 * spacing.z,
    ];
    specs.push(PlaneSpec {
        id: PlaneId::TwoChamber,
        origin_mm: config.center_mm,
        axis_u: [1.0, 0.0, 0.0],
        axis_v: [0.0, 0.0, 1.0],
        extent_mm: lax_extent,
    });
    let angle = 60.0f64.to_radians();
    specs.push(PlaneSpec {
        id: PlaneId::FourChamber,
        origin_mm: config.center_mm,
        axis_u: [angle.cos(), angle.sin(), 0.0],
        axis_v: [0.0, 0.0, 1.0],
        extent_mm: lax_extent,
    });
    Ok(specs)
}

/// Generate a study. Deterministic given (config, seed): voxels are visited
/// in linear order and noise comes from the pinned generator.
pub fn generate(config: &PhantomConfig) -> Result<PhantomStudy> {
    let (dims, spacing) = config.validate()?;
    let specs = phantom_planes(config)?;
    let planes = PlaneSet::from_specs(&specs, dims, spacing)?;
    let mut rng = Rng::seed_from_u64(config.seed);

    let mut images = Vec::with_capacity(config.frames);
    let mut labels = Vec::with_capacity(config.frames);
    let mut gt_fields = Vec::with_capacity(config.frames);
    let mut edges = Vec::with_capacity(config.frames);

    for t in 0..config.frames {
        let deform = Deformation::at_frame(config, t);
        let mut image = ScalarVolume::zeros(dims, spacing);
        let mut label = LabelVolume::zeros(dims, spacing);
        let mut field = DisplacementField::zeros(dims, spacing);
        let mut i = 0;
        for z in 0..dims.d {
            for y in 0..dims.h {
                for x in 0..dims.w {
                    let p_mm = [
                        x as f64 * spacing.x,
                        y as f64 * spacing.y,
                        z as f64 * spacing.z,
                    ];
                    let q = [
                        p_mm[0] - config.center_mm[0],
                        p_mm[1] - config.center_mm[1],
                        p_mm[2] - config.center_mm[2],
                    ];
                    let source = deform.inverse(q);
                    label.data[i] = config.label_at(source);
                    image.data[i] =
                        config.intensity_at(source) + config.noise_sigma * rng.normal();
                    // Backward field: where frame 0 content now at p came from.
                    field.data[i] = [
                        (source[0] - q[0]) / spacing.x,
                        (source[1] - q[1]) / spacing.y,
                        (source[2] - q[2]) / spacing.z,
                    ];
                    i += 1;
                }
            }
        }
        if t == 0 {
            // The identity frame; keep the field exactly zero.
            field = DisplacementField::zeros(dims, spacing);
        }
        edges.push(extract_edge_map(&label, LABEL_MYOCARDIUM).map);
        images.push(image);
        labels.push(label);
        gt_fields.push(field);
    }

    let mut study = PhantomStudy {
        config: config.clone(),
        dims,
        spacing,
        images,
        labels,
        gt_fields,
        edges,
        planes,
        slice_offsets_mm: vec![[0.0, 0.0]; dims.d],
    };
    if config.misalignment_mm > 0.0 {
        let salt = config.seed ^ MISALIGNMENT_SEED_SALT;
        study = apply_misalignment(&study, config.misalignment_mm, salt)?;
    }
    Ok(study)
}

// Keeps the misalignment offset stream distinct from the image noise stream.
const MISALIGNMENT_SEED_SALT: u64 = 0x9e37_79b9_7f4a_7c15;

/// Shift one z-slab of a volume in-plane by (dx, dy) voxels using bilinear
/// interpolation with border clamping.
fn shift_slab(vol: &mut ScalarVolume, z: usize, dx_vox: f64, dy_vox: f64) {
    let d = vol.dims;
    let mut slab = vec![0.0; d.w * d.h];
    for y in 0..d.h {
        for x in 0..d.w {
            slab[x + d.w * y] = vol.at(x, y, z);
        }
    }
    let sample = |cx: f64, cy: f64| -> f64 {
        let cx = cx.clamp(0.0, (d.w - 1) as f64);
        let cy = cy.clamp(0.0, (d.h - 1) as f64);
        let x0 = cx.floor() as usize;
        let y0 = cy.floor() as usize;
        let x1 = (x0 + 1).min(d.w - 1);
        let y1 = (y0 + 1).min(d.h - 1);
        let fx = cx - x0 as f64;
        let fy = cy - y0 as f64;
        let v00 = slab[x0 + d.w * y0];
        let v10 = slab[x1 + d.w * y0];
        let v01 = slab[x0 + d.w * y1];
        let v11 = slab[x1 + d.w * y1];
        (v00 + fx * (v10 - v00)) * (1.0 - fy) + (v01 + fx * (v11 - v01)) * fy
    };
    for y in 0..d.h {
        for x in 0..d.w {
            // Content moves by +offset: sample the source at p - offset.
            vol.set(x, y, z, sample(x as f64 - dx_vox, y as f64 - dy_vox));
        }
    }
}

/// Translate every SAX z-slab in-plane by a per-slice offset drawn uniformly
/// from [-m, m] mm per component, fixed across frames (breath-hold
/// misalignment is per acquisition, and one slice is acquired per
/// breath-hold). Labels, ground-truth fields and the clean edge volumes are
/// left untouched; SAX-plane edge targets pick up the shift through
/// [`PhantomStudy::plane_edge_map`], while 2CH/4CH targets stay clean.
pub fn apply_misalignment(study: &PhantomStudy, amplitude_mm: f64, seed: u64) -> Result<PhantomStudy> {
    if amplitude_mm < 0.0 {
        return Err(Error::InvalidArgument(
            "misalignment amplitude must be >= 0".into(),
        ));
    }
    let mut out = study.clone();
    if amplitude_mm == 0.0 {
        return Ok(out);
    }
    let mut rng = Rng::seed_from_u64(seed);
    let offsets: Vec<[f64; 2]> = (0..study.dims.d)
        .map(|_| {
            [
                rng.uniform_range(-amplitude_mm, amplitude_mm),
                rng.uniform_range(-amplitude_mm, amplitude_mm),
            ]
        })
        .collect();
    for image in &mut out.images {
        for (z, off) in offsets.iter().enumerate() {
            shift_slab(image, z, off[0] / study.spacing.x, off[1] / study.spacing.y);
        }
    }
    for (acc, off) in out.slice_offsets_mm.iter_mut().zip(&offsets) {
        acc[0] += off[0];
        acc[1] += off[1];
    }
    Ok(out)
}

impl PhantomStudy {
    pub fn frames(&self) -> usize {
        self.images.len()
    }

    pub fn es_index(&self) -> usize {
        self.config.es_index()
    }

    /// Slice any volume onto a plane. SAX planes additionally carry their
    /// slice's misalignment shift, mirroring per-slice maps derived from the
    /// misaligned acquisition; LAX planes never shift.
    pub fn plane_slice(
        &self,
        vol: &ScalarVolume,
        spec: &PlaneSpec,
        mask: &PlaneMask,
    ) -> Result<ScalarVolume> {
        let mut sliced = crate::multiview::slice_volume(vol, mask)?;
        if let PlaneId::Sax(_) = spec.id {
            let z = ((spec.origin_mm[2] / self.spacing.z).round() as usize).min(self.dims.d - 1);
            let off = self.slice_offsets_mm[z];
            if off[0] != 0.0 || off[1] != 0.0 {
                shift_slab(&mut sliced, z, off[0] / self.spacing.x, off[1] / self.spacing.y);
            }
        }
        Ok(sliced)
    }

    /// Ground-truth 2D edge map of one plane at frame `t` (binary up to the
    /// misalignment shift of SAX slices).
    pub fn plane_edge_map(&self, t: usize, spec: &PlaneSpec, mask: &PlaneMask) -> Result<ScalarVolume> {
        self.plane_slice(&self.edges[t], spec, mask)
    }

    /// Copy of a volume with the plane's misalignment shift applied to its
    /// SAX slab (no slicing). LAX planes return the volume unchanged.
    pub fn shifted_for_plane(&self, vol: &ScalarVolume, spec: &PlaneSpec) -> ScalarVolume {
        let mut out = vol.clone();
        if let PlaneId::Sax(_) = spec.id {
            let z = ((spec.origin_mm[2] / self.spacing.z).round() as usize).min(self.dims.d - 1);
            let off = self.slice_offsets_mm[z];
            if off[0] != 0.0 || off[1] != 0.0 {
                shift_slab(&mut out, z, off[0] / self.spacing.x, off[1] / self.spacing.y);
            }
        }
        out
    }

    pub fn cavity_volume_voxels(&self, t: usize) -> usize {
        self.labels[t].count_label(LABEL_CAVITY)
    }
}
