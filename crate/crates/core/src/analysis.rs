//! Clinical derived quantities: LV volume curve, ejection fraction, wall
//! thickness and thickening, and global strains.
//!
//! Strains need the forward (material) displacement on the ED grid while the
//! tracker produces backward fields, so [`invert_field`] provides the
//! fixed-point inverse.

use crate::error::{Error, Result};
use crate::grid::{
    sample_field, warp_labels, DisplacementField, LabelVolume, LABEL_CAVITY, LABEL_MYOCARDIUM,
};
use crate::phantom::PhantomStudy;
use serde::{Deserialize, Serialize};

/// Grid axis used as the LV long axis.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Axis {
    X,
    Y,
    Z,
}

impl Axis {
    fn index(self) -> usize {
        match self {
            Axis::X => 0,
            Axis::Y => 1,
            Axis::Z => 2,
        }
    }

    fn unit(self) -> [f64; 3] {
        let mut u = [0.0; 3];
        u[self.index()] = 1.0;
        u
    }
}

/// The LV long axis: a line through `origin_mm` along a grid axis. Known
/// for phantom studies; a required input for anything else.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct LvAxis {
    pub origin_mm: [f64; 3],
    pub axis: Axis,
}

/// Per-frame LV cavity volume, absolute and ED-normalized.
#[derive(Debug, Clone)]
pub struct VolumeCurve {
    pub ml: Vec<f64>,
    pub normalized: Vec<f64>,
}

/// Cavity volume per frame from warping the ED segmentation by each frame's
/// field, in millilitres.
pub fn lv_volume_curve(study: &PhantomStudy, fields: &[DisplacementField]) -> Result<VolumeCurve> {
    if fields.len() != study.frames() {
        return Err(Error::InvalidArgument(format!(
            "expected {} fields, got {}",
            study.frames(),
            fields.len()
        )));
    }
    let voxel_ml = study.spacing.voxel_volume_mm3() / 1000.0;
    let mut ml = Vec::with_capacity(fields.len());
    for field in fields {
        let warped = warp_labels(&study.labels[0], field)?;
        ml.push(warped.count_label(LABEL_CAVITY) as f64 * voxel_ml);
    }
    if ml[0] <= 0.0 {
        return Err(Error::InvalidArgument("ED cavity volume is zero".into()));
    }
    let normalized = ml.iter().map(|&v| v / ml[0]).collect();
    Ok(VolumeCurve { ml, normalized })
}

/// Global ejection fraction in percent plus the per-frame EF curve
/// `(V_ED - V_t) / V_ED * 100`.
pub fn ejection_fraction(curve_ml: &[f64]) -> Result<(f64, Vec<f64>)> {
    if curve_ml.is_empty() {
        return Err(Error::InvalidArgument("empty volume curve".into()));
    }
    let v_ed = curve_ml[0];
    if !(v_ed > 0.0) {
        return Err(Error::InvalidArgument("ED volume must be positive".into()));
    }
    let v_min = curve_ml.iter().cloned().fold(f64::INFINITY, f64::min);
    let ef_curve = curve_ml.iter().map(|&v| (v_ed - v) / v_ed * 100.0).collect();
    Ok(((v_ed - v_min) / v_ed * 100.0, ef_curve))
}

/// Global wall thickness result, millimetres.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct WallThickness {
    pub global_mm: f64,
    pub slices_used: usize,
    /// Slices that intersect myocardium but lack a closed ring around a
    /// cavity centroid; excluded from the mean.
    pub slices_skipped: usize,
}

const THICKNESS_RAYS: usize = 36;

/// Global myocardial wall thickness: per slice orthogonal to the LV axis,
/// cast 36 equiangular rays from the cavity centroid and measure the
/// endocardial-to-epicardial crossing distance; the global value averages
/// over rays and slices with a closed ring.
pub fn wall_thickness_global(seg: &LabelVolume, lv_axis: Axis) -> Result<WallThickness> {
    let d = seg.dims;
    let ax = lv_axis.index();
    let (pa, pb) = match lv_axis {
        Axis::Z => (0usize, 1usize),
        Axis::X => (1, 2),
        Axis::Y => (0, 2),
    };
    let spacing = seg.spacing.as_array();
    let step = 0.25 * spacing[pa].min(spacing[pb]);
    let max_dist = d.w as f64 * spacing[0] + d.h as f64 * spacing[1] + d.d as f64 * spacing[2];

    let mut thicknesses = Vec::new();
    let mut used = 0usize;
    let mut skipped = 0usize;
    let label_at = |co: [usize; 3]| seg.data[d.index(co[0], co[1], co[2])];

    for slice in 0..d.axis(ax) {
        // Cavity centroid of this slice, in-plane millimetres.
        let mut sum = [0.0f64; 2];
        let mut ncav = 0usize;
        let mut has_myo = false;
        for b in 0..d.axis(pb) {
            for a in 0..d.axis(pa) {
                let mut co = [0usize; 3];
                co[ax] = slice;
                co[pa] = a;
                co[pb] = b;
                match label_at(co) {
                    LABEL_CAVITY => {
                        sum[0] += a as f64 * spacing[pa];
                        sum[1] += b as f64 * spacing[pb];
                        ncav += 1;
                    }
                    LABEL_MYOCARDIUM => has_myo = true,
                    _ => {}
                }
            }
        }
        if ncav == 0 {
            if has_myo {
                skipped += 1;
            }
            continue;
        }
        let centroid = [sum[0] / ncav as f64, sum[1] / ncav as f64];

        let mut slice_rays = Vec::with_capacity(THICKNESS_RAYS);
        let mut ring_closed = true;
        'rays: for k in 0..THICKNESS_RAYS {
            let angle = 2.0 * std::f64::consts::PI * k as f64 / THICKNESS_RAYS as f64;
            let dir = [angle.cos(), angle.sin()];
            let mut endo: Option<f64> = None;
            let mut t = 0.0;
            loop {
                t += step;
                if t > max_dist {
                    ring_closed = false;
                    break 'rays;
                }
                let ai = ((centroid[0] + t * dir[0]) / spacing[pa]).round();
                let bi = ((centroid[1] + t * dir[1]) / spacing[pb]).round();
                if ai < 0.0 || bi < 0.0 || ai as usize >= d.axis(pa) || bi as usize >= d.axis(pb) {
                    ring_closed = false;
                    break 'rays;
                }
                let mut co = [0usize; 3];
                co[ax] = slice;
                co[pa] = ai as usize;
                co[pb] = bi as usize;
                match (label_at(co), endo) {
                    (LABEL_MYOCARDIUM, None) => endo = Some(t),
                    (l, None) if l != LABEL_CAVITY => {
                        // Background before any myocardium: broken ring.
                        ring_closed = false;
                        break 'rays;
                    }
                    (l, Some(t_endo)) if l != LABEL_MYOCARDIUM => {
                        slice_rays.push(t - t_endo);
                        break;
                    }
                    _ => {}
                }
            }
        }
        if ring_closed && slice_rays.len() == THICKNESS_RAYS {
            thicknesses.extend(slice_rays);
            used += 1;
        } else {
            skipped += 1;
        }
    }

    if thicknesses.is_empty() {
        return Err(Error::InvalidArgument(
            "no slice with a closed myocardial ring".into(),
        ));
    }
    Ok(WallThickness {
        global_mm: thicknesses.iter().sum::<f64>() / thicknesses.len() as f64,
        slices_used: used,
        slices_skipped: skipped,
    })
}

/// Fractional wall thickening `(ES - ED) / ED * 100`.
pub fn fractional_wall_thickening(ed_mm: f64, es_mm: f64) -> Result<f64> {
    if !(ed_mm > 0.0) {
        return Err(Error::InvalidArgument(
            "ED wall thickness must be positive".into(),
        ));
    }
    Ok((es_mm - ed_mm) / ed_mm * 100.0)
}

fn cross(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

/// Global Lagrangian strains in percent: (radial, circumferential,
/// longitudinal), averaged over the masked voxels.
///
/// `forward_field` is the material displacement on the reference grid (use
/// [`invert_field`] on a tracked backward field). At each voxel the strain
/// tensor is `E = (F^T F - I)/2` with `F = I + grad u` in physical
/// coordinates, projected onto the local radial / circumferential /
/// longitudinal frame around the LV axis. Voxels on the axis itself have no
/// radial direction and are skipped.
pub fn global_strains(
    forward_field: &DisplacementField,
    mask: &LabelVolume,
    label: u8,
    lv_axis: &LvAxis,
) -> Result<[f64; 3]> {
    if forward_field.dims != mask.dims {
        return Err(Error::DimensionMismatch("global_strains".into()));
    }
    let d = forward_field.dims;
    let sp = forward_field.spacing.as_array();

    // du_mm[c][a] per voxel: derivative of the c-th displacement component
    // (mm) along the a-th physical axis (mm).
    let mut jac: Vec<Vec<f64>> = Vec::with_capacity(9);
    for c in 0..3 {
        for a in 0..3 {
            let mut der = crate::grid::field_derivative(forward_field, c, a);
            let scale = sp[c] / sp[a];
            for v in der.iter_mut() {
                *v *= scale;
            }
            jac.push(der);
        }
    }

    let e_l = lv_axis.axis.unit();
    let mut acc = [0.0f64; 3];
    let mut n = 0usize;
    let mut i = 0;
    for z in 0..d.d {
        for y in 0..d.h {
            for x in 0..d.w {
                let idx = i;
                i += 1;
                if mask.data[idx] != label {
                    continue;
                }
                let p_mm = [x as f64 * sp[0], y as f64 * sp[1], z as f64 * sp[2]];
                let mut r = [
                    p_mm[0] - lv_axis.origin_mm[0],
                    p_mm[1] - lv_axis.origin_mm[1],
                    p_mm[2] - lv_axis.origin_mm[2],
                ];
                let along = r[0] * e_l[0] + r[1] * e_l[1] + r[2] * e_l[2];
                for c in 0..3 {
                    r[c] -= along * e_l[c];
                }
                let rn = (r[0] * r[0] + r[1] * r[1] + r[2] * r[2]).sqrt();
                if rn < 1e-9 {
                    continue;
                }
                let e_r = [r[0] / rn, r[1] / rn, r[2] / rn];
                let e_c = cross(e_l, e_r);
                debug_assert!({
                    let dot_rl: f64 = (0..3).map(|k| e_r[k] * e_l[k]).sum();
                    let nc: f64 = e_c.iter().map(|v| v * v).sum::<f64>().sqrt();
                    dot_rl.abs() < 1e-9 && (nc - 1.0).abs() < 1e-9
                });

                let mut f = [[0.0f64; 3]; 3];
                for c in 0..3 {
                    for a in 0..3 {
                        f[c][a] = jac[c * 3 + a][idx] + if c == a { 1.0 } else { 0.0 };
                    }
                }
                let mut e = [[0.0f64; 3]; 3];
                for a in 0..3 {
                    for b in 0..3 {
                        let mut ftf = 0.0;
                        for k in 0..3 {
                            ftf += f[k][a] * f[k][b];
                        }
                        e[a][b] = 0.5 * (ftf - if a == b { 1.0 } else { 0.0 });
                    }
                }
                let project = |v: [f64; 3]| {
                    let mut ev = [0.0f64; 3];
                    for a in 0..3 {
                        for b in 0..3 {
                            ev[a] += e[a][b] * v[b];
                        }
                    }
                    v[0] * ev[0] + v[1] * ev[1] + v[2] * ev[2]
                };
                acc[0] += project(e_r);
                acc[1] += project(e_c);
                acc[2] += project(e_l);
                n += 1;
            }
        }
    }
    if n < 10 {
        return Err(Error::InvalidArgument(format!(
            "strain needs at least 10 masked voxels off the axis, got {n}"
        )));
    }
    Ok([
        acc[0] / n as f64 * 100.0,
        acc[1] / n as f64 * 100.0,
        acc[2] / n as f64 * 100.0,
    ])
}

/// Invert a backward displacement field by fixed-point iteration
/// `v_{k+1}(p) = -phi(p + v_k(p))`, returning the forward field. Runs at
/// most 20 iterations or until the largest update drops below 1e-3 voxel;
/// errors out if the update grows over 5 consecutive iterations.
pub fn invert_field(backward: &DisplacementField) -> Result<DisplacementField> {
    let d = backward.dims;
    let mut v = DisplacementField::zeros(d, backward.spacing);
    let mut prev_update = f64::INFINITY;
    let mut growth_streak = 0usize;
    for _ in 0..20 {
        let mut max_update = 0.0f64;
        let mut next = DisplacementField::zeros(d, backward.spacing);
        let mut i = 0;
        for z in 0..d.d {
            for y in 0..d.h {
                for x in 0..d.w {
                    let cur = v.data[i];
                    let p = [x as f64 + cur[0], y as f64 + cur[1], z as f64 + cur[2]];
                    let s = sample_field(backward, p);
                    let nv = [-s[0], -s[1], -s[2]];
                    for c in 0..3 {
                        max_update = max_update.max((nv[c] - cur[c]).abs());
                    }
                    next.data[i] = nv;
                    i += 1;
                }
            }
        }
        v = next;
        if max_update < 1e-3 {
            return Ok(v);
        }
        if max_update > prev_update {
            growth_streak += 1;
            if growth_streak >= 5 {
                return Err(Error::Optimization(format!(
                    "field inversion diverged: update grew to {max_update}"
                )));
            }
        } else {
            growth_streak = 0;
        }
        prev_update = max_update;
    }
    Ok(v)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::{DisplacementField, GridDims, Spacing};
    use crate::phantom::{generate, PhantomConfig, PhantomStudy};

    fn sp(x: f64, y: f64, z: f64) -> Spacing {
        Spacing::new(x, y, z).unwrap()
    }

    fn small_study(seed: u64) -> (PhantomConfig, PhantomStudy) {
        let c = PhantomConfig {
            dims: [32, 32, 16],
            spacing_mm: [2.0, 2.0, 2.5],
            endo_radii_mm: [10.0, 10.0, 11.25],
            epi_radii_mm: [16.0, 16.0, 18.0],
            center_mm: [32.0, 32.0, 26.0],
            frames: 8,
            contraction: 0.25,
            shortening: 0.1,
            twist: 0.0,
            noise_sigma: 0.01,
            misalignment_mm: 0.0,
            seed,
        };
        let s = generate(&c).unwrap();
        (c, s)
    }

    #[test]
    fn volume_curve_flat_for_zero_fields() {
        let (c, study) = small_study(1);
        let zero = DisplacementField::zeros(study.dims, study.spacing);
        let fields = vec![zero; c.frames];
        let curve = lv_volume_curve(&study, &fields).unwrap();
        assert_eq!(curve.normalized[0], 1.0);
        for t in 0..c.frames {
            assert_eq!(curve.ml[t], curve.ml[0]);
            assert_eq!(curve.normalized[t], 1.0);
        }
        let (ef, ef_curve) = ejection_fraction(&curve.ml).unwrap();
        assert_eq!(ef, 0.0);
        assert_eq!(ef_curve[0], 0.0);
    }

    #[test]
    fn volume_curve_minimum_at_es_with_gt_fields() {
        let (c, study) = small_study(2);
        let curve = lv_volume_curve(&study, &study.gt_fields).unwrap();
        let es = c.es_index();
        for t in 0..c.frames {
            if t != es {
                assert!(
                    curve.ml[es] < curve.ml[t],
                    "frame {t}: {} vs es {}",
                    curve.ml[t],
                    curve.ml[es]
                );
            }
        }
        let (ef, ef_curve) = ejection_fraction(&curve.ml).unwrap();
        assert!(ef > 10.0, "ef {ef}");
        assert_eq!(ef_curve[0], 0.0);
        // EF arithmetic: V_ED = 100, min = 40 -> 60%.
        let (ef2, _) = ejection_fraction(&[100.0, 80.0, 40.0, 70.0]).unwrap();
        assert!((ef2 - 60.0).abs() < 1e-12);
    }

    #[test]
    fn curve_errors() {
        let (_, study) = small_study(3);
        assert!(lv_volume_curve(&study, &study.gt_fields[..2]).is_err());
        assert!(ejection_fraction(&[]).is_err());
        assert!(ejection_fraction(&[0.0, 1.0]).is_err());
    }

    #[test]
    fn wall_thickness_of_known_shell() {
        // Proportional shell with an 8 mm in-plane gap at the equator. The
        // measurement keeps basal slices only (spherical caps excluded).
        let c = PhantomConfig {
            dims: [64, 64, 40],
            spacing_mm: [1.0, 1.0, 1.5],
            endo_radii_mm: [16.0, 16.0, 24.0],
            epi_radii_mm: [24.0, 24.0, 36.0],
            center_mm: [32.0, 32.0, 45.0],
            frames: 2,
            contraction: 0.0,
            shortening: 0.0,
            twist: 0.0,
            noise_sigma: 0.0,
            misalignment_mm: 0.0,
            seed: 4,
        };
        let study = generate(&c).unwrap();
        let mut cropped = study.labels[0].clone();
        let d = cropped.dims;
        for z in 0..d.d {
            let zmm = z as f64 * 1.5;
            if !(37.0..=45.0).contains(&zmm) {
                for y in 0..d.h {
                    for x in 0..d.w {
                        cropped.data[d.index(x, y, z)] = 0;
                    }
                }
            }
        }
        let wt = wall_thickness_global(&cropped, Axis::Z).unwrap();
        assert!(wt.slices_used >= 3, "used {}", wt.slices_used);
        assert!(
            (wt.global_mm - 8.0).abs() <= 0.5,
            "thickness {} mm",
            wt.global_mm
        );
    }

    #[test]
    fn wall_thickness_positive_and_thickening_formula() {
        let (_, study) = small_study(5);
        let wt = wall_thickness_global(&study.labels[0], Axis::Z).unwrap();
        assert!(wt.global_mm > 0.0);

        assert_eq!(fractional_wall_thickening(6.6, 6.6).unwrap(), 0.0);
        let ft = fractional_wall_thickening(6.6, 10.1).unwrap();
        assert!((ft - 53.03030303030303).abs() < 1e-9);
        // ES thinner than ED gives a negative value.
        assert!(fractional_wall_thickening(10.0, 8.0).unwrap() < 0.0);
        assert!(fractional_wall_thickening(0.0, 8.0).is_err());
    }

    #[test]
    fn strains_zero_field_and_uniform_contraction() {
        let (c, study) = small_study(6);
        let axis = LvAxis {
            origin_mm: c.center_mm,
            axis: Axis::Z,
        };
        let zero = DisplacementField::zeros(study.dims, study.spacing);
        let s = global_strains(&zero, &study.labels[0], crate::grid::LABEL_MYOCARDIUM, &axis)
            .unwrap();
        assert_eq!(s, [0.0, 0.0, 0.0]);

        // Pure in-plane contraction u_mm = (scale-1) * (x-ax, y-ay, 0):
        // every in-plane direction strains by (scale^2-1)/2, z by 0.
        let scale = 0.9;
        let d = study.dims;
        let spm = study.spacing.as_array();
        let mut data = vec![[0.0; 3]; d.len()];
        let mut i = 0;
        for _z in 0..d.d {
            for y in 0..d.h {
                for x in 0..d.w {
                    let px = x as f64 * spm[0] - c.center_mm[0];
                    let py = y as f64 * spm[1] - c.center_mm[1];
                    data[i] = [
                        (scale - 1.0) * px / spm[0],
                        (scale - 1.0) * py / spm[1],
                        0.0,
                    ];
                    i += 1;
                }
            }
        }
        let field = DisplacementField::new(d, study.spacing, data).unwrap();
        let s = global_strains(&field, &study.labels[0], crate::grid::LABEL_MYOCARDIUM, &axis)
            .unwrap();
        let expect = 0.5 * (scale * scale - 1.0) * 100.0;
        assert!((s[0] - expect).abs() < 0.5, "radial {} vs {expect}", s[0]);
        assert!((s[1] - expect).abs() < 0.5, "circ {} vs {expect}", s[1]);
        assert!(s[2].abs() < 1e-9, "long {}", s[2]);
    }

    #[test]
    fn strain_needs_enough_voxels() {
        let dgrid = GridDims::new(4, 4, 4).unwrap();
        let mask = LabelVolume::zeros(dgrid, sp(1.0, 1.0, 1.0));
        let field = DisplacementField::zeros(dgrid, sp(1.0, 1.0, 1.0));
        let axis = LvAxis {
            origin_mm: [2.0, 2.0, 2.0],
            axis: Axis::Z,
        };
        assert!(global_strains(&field, &mask, crate::grid::LABEL_MYOCARDIUM, &axis).is_err());
    }

    #[test]
    fn invert_zero_and_constant_fields() {
        let d = GridDims::new(6, 6, 6).unwrap();
        let zero = DisplacementField::zeros(d, sp(1.0, 1.0, 1.0));
        let inv = invert_field(&zero).unwrap();
        assert!(inv.data.iter().all(|v| v == &[0.0; 3]));

        let c = [0.7, -0.3, 0.2];
        let constant = DisplacementField::new(d, sp(1.0, 1.0, 1.0), vec![c; d.len()]).unwrap();
        let inv = invert_field(&constant).unwrap();
        for v in &inv.data {
            for k in 0..3 {
                assert!((v[k] + c[k]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn invert_phantom_field_composes_to_identity() {
        let (c, study) = small_study(7);
        let es = c.es_index();
        let backward = &study.gt_fields[es];
        let forward = invert_field(backward).unwrap();
        // Residual of the composition v(p) + phi(p + v(p)) over myocardium.
        let d = study.dims;
        let mut sum = 0.0;
        let mut n = 0usize;
        let mut i = 0;
        for z in 0..d.d {
            for y in 0..d.h {
                for x in 0..d.w {
                    if study.labels[0].data[i] == crate::grid::LABEL_MYOCARDIUM {
                        let v = forward.data[i];
                        let p = [x as f64 + v[0], y as f64 + v[1], z as f64 + v[2]];
                        let b = sample_field(backward, p);
                        let r = [v[0] + b[0], v[1] + b[1], v[2] + b[2]];
                        sum += (r[0] * r[0] + r[1] * r[1] + r[2] * r[2]).sqrt();
                        n += 1;
                    }
                    i += 1;
                }
            }
        }
        let mean = sum / n as f64;
        assert!(mean < 0.05, "composition residual {mean}");
    }
}
