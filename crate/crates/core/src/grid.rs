//! Grid types, trilinear sampling, warping, gradients and Jacobians.
//!
//! Volumes are dense x-fastest arrays: linear index `x + W*(y + H*z)`.
//! Displacement fields are backward (pull-back) fields in voxel units:
//! warping writes `out(p) = src(p + phi(p))`. Out-of-grid samples clamp to
//! the border, which avoids injecting artificial zero intensities into the
//! similarity term near volume edges.

use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};

pub const LABEL_BACKGROUND: u8 = 0;
pub const LABEL_MYOCARDIUM: u8 = 1;
pub const LABEL_CAVITY: u8 = 2;
pub const LABEL_SET: [u8; 3] = [LABEL_BACKGROUND, LABEL_MYOCARDIUM, LABEL_CAVITY];

/// Grid extent in voxels.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct GridDims {
    pub w: usize,
    pub h: usize,
    pub d: usize,
}

impl GridDims {
    pub fn new(w: usize, h: usize, d: usize) -> Result<Self> {
        if w < 2 || h < 2 || d < 2 {
            return Err(Error::InvalidArgument(format!(
                "grid dims must be >= 2 per axis, got {w}x{h}x{d}"
            )));
        }
        Ok(GridDims { w, h, d })
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.w * self.h * self.d
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    #[inline]
    pub fn index(&self, x: usize, y: usize, z: usize) -> usize {
        x + self.w * (y + self.h * z)
    }

    pub fn as_array(&self) -> [usize; 3] {
        [self.w, self.h, self.d]
    }

    pub fn axis(&self, a: usize) -> usize {
        match a {
            0 => self.w,
            1 => self.h,
            _ => self.d,
        }
    }
}

/// Physical voxel spacing in millimetres per voxel.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Spacing {
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

impl Spacing {
    pub fn new(x: f64, y: f64, z: f64) -> Result<Self> {
        if !(x > 0.0 && y > 0.0 && z > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "spacing must be strictly positive, got ({x}, {y}, {z})"
            )));
        }
        Ok(Spacing { x, y, z })
    }

    pub fn as_array(&self) -> [f64; 3] {
        [self.x, self.y, self.z]
    }

    /// Volume of one voxel in cubic millimetres.
    pub fn voxel_volume_mm3(&self) -> f64 {
        self.x * self.y * self.z
    }
}

/// Dense 3D scalar grid (images, edge maps).
#[derive(Debug, Clone, PartialEq)]
pub struct ScalarVolume {
    pub dims: GridDims,
    pub spacing: Spacing,
    pub data: Vec<f64>,
}

impl ScalarVolume {
    pub fn new(dims: GridDims, spacing: Spacing, data: Vec<f64>) -> Result<Self> {
        if data.len() != dims.len() {
            return Err(Error::DimensionMismatch(format!(
                "scalar volume data length {} does not match dims {:?}",
                data.len(),
                dims
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument(
                "scalar volume contains non-finite values".into(),
            ));
        }
        Ok(ScalarVolume { dims, spacing, data })
    }

    pub fn zeros(dims: GridDims, spacing: Spacing) -> Self {
        ScalarVolume {
            dims,
            spacing,
            data: vec![0.0; dims.len()],
        }
    }

    #[inline]
    pub fn at(&self, x: usize, y: usize, z: usize) -> f64 {
        self.data[self.dims.index(x, y, z)]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, z: usize, v: f64) {
        let i = self.dims.index(x, y, z);
        self.data[i] = v;
    }
}

/// Dense 3D label grid over {background, myocardium, cavity}.
#[derive(Debug, Clone, PartialEq)]
pub struct LabelVolume {
    pub dims: GridDims,
    pub spacing: Spacing,
    pub data: Vec<u8>,
}

impl LabelVolume {
    pub fn new(dims: GridDims, spacing: Spacing, data: Vec<u8>) -> Result<Self> {
        if data.len() != dims.len() {
            return Err(Error::DimensionMismatch(format!(
                "label volume data length {} does not match dims {:?}",
                data.len(),
                dims
            )));
        }
        if data.iter().any(|l| !LABEL_SET.contains(l)) {
            return Err(Error::InvalidArgument(
                "label volume contains labels outside {0,1,2}".into(),
            ));
        }
        Ok(LabelVolume { dims, spacing, data })
    }

    pub fn zeros(dims: GridDims, spacing: Spacing) -> Self {
        LabelVolume {
            dims,
            spacing,
            data: vec![0u8; dims.len()],
        }
    }

    #[inline]
    pub fn at(&self, x: usize, y: usize, z: usize) -> u8 {
        self.data[self.dims.index(x, y, z)]
    }

    pub fn count_label(&self, label: u8) -> usize {
        self.data.iter().filter(|&&l| l == label).count()
    }
}

/// Dense backward displacement field, components in voxel units.
#[derive(Debug, Clone, PartialEq)]
pub struct DisplacementField {
    pub dims: GridDims,
    pub spacing: Spacing,
    pub data: Vec<[f64; 3]>,
}

impl DisplacementField {
    pub fn new(dims: GridDims, spacing: Spacing, data: Vec<[f64; 3]>) -> Result<Self> {
        if data.len() != dims.len() {
            return Err(Error::DimensionMismatch(format!(
                "field data length {} does not match dims {:?}",
                data.len(),
                dims
            )));
        }
        if data.iter().any(|v| v.iter().any(|c| !c.is_finite())) {
            return Err(Error::InvalidArgument(
                "displacement field contains non-finite values".into(),
            ));
        }
        Ok(DisplacementField { dims, spacing, data })
    }

    pub fn zeros(dims: GridDims, spacing: Spacing) -> Self {
        DisplacementField {
            dims,
            spacing,
            data: vec![[0.0; 3]; dims.len()],
        }
    }

    #[inline]
    pub fn at(&self, x: usize, y: usize, z: usize) -> [f64; 3] {
        self.data[self.dims.index(x, y, z)]
    }

    pub fn mean_norm_voxels(&self) -> f64 {
        let sum: f64 = self
            .data
            .iter()
            .map(|v| (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt())
            .sum();
        sum / self.data.len() as f64
    }
}

#[inline]
fn clamp_coord(c: f64, n: usize) -> (f64, bool) {
    let max = (n - 1) as f64;
    if c < 0.0 {
        (0.0, true)
    } else if c > max {
        (max, true)
    } else {
        (c, false)
    }
}

/// Corner indices and fractional offset for one clamped axis coordinate.
#[inline]
fn axis_cell(c: f64, n: usize) -> (usize, usize, f64, bool) {
    let (cc, clamped) = clamp_coord(c, n);
    let i0 = cc.floor() as usize;
    let i1 = (i0 + 1).min(n - 1);
    (i0, i1, cc - i0 as f64, clamped)
}

/// Trilinear sample at a continuous voxel coordinate, clamping to the border.
pub fn sample_trilinear(vol: &ScalarVolume, p: [f64; 3]) -> f64 {
    sample_trilinear_with_grad(vol, p).0
}

/// Trilinear sample plus the derivative of the interpolant with respect to
/// the (unclamped) input coordinate. Clamped axes have zero derivative.
pub fn sample_trilinear_with_grad(vol: &ScalarVolume, p: [f64; 3]) -> (f64, [f64; 3]) {
    let d = vol.dims;
    let (x0, x1, fx, cx) = axis_cell(p[0], d.w);
    let (y0, y1, fy, cy) = axis_cell(p[1], d.h);
    let (z0, z1, fz, cz) = axis_cell(p[2], d.d);

    let v000 = vol.data[d.index(x0, y0, z0)];
    let v100 = vol.data[d.index(x1, y0, z0)];
    let v010 = vol.data[d.index(x0, y1, z0)];
    let v110 = vol.data[d.index(x1, y1, z0)];
    let v001 = vol.data[d.index(x0, y0, z1)];
    let v101 = vol.data[d.index(x1, y0, z1)];
    let v011 = vol.data[d.index(x0, y1, z1)];
    let v111 = vol.data[d.index(x1, y1, z1)];

    // Collapse x first, then y, then z.
    let c00 = v000 + fx * (v100 - v000);
    let c10 = v010 + fx * (v110 - v010);
    let c01 = v001 + fx * (v101 - v001);
    let c11 = v011 + fx * (v111 - v011);
    let c0 = c00 + fy * (c10 - c00);
    let c1 = c01 + fy * (c11 - c01);
    let value = c0 + fz * (c1 - c0);

    // d/dx: difference of x-corner pairs interpolated over y, z.
    let dx00 = v100 - v000;
    let dx10 = v110 - v010;
    let dx01 = v101 - v001;
    let dx11 = v111 - v011;
    let gx = {
        let a = dx00 + fy * (dx10 - dx00);
        let b = dx01 + fy * (dx11 - dx01);
        a + fz * (b - a)
    };
    let gy = {
        let a = c10 - c00;
        let b = c11 - c01;
        a + fz * (b - a)
    };
    let gz = c1 - c0;

    let grad = [
        if cx { 0.0 } else { gx },
        if cy { 0.0 } else { gy },
        if cz { 0.0 } else { gz },
    ];
    (value, grad)
}

/// Trilinear sample of a field component volume; used when composing fields.
pub fn sample_field(field: &DisplacementField, p: [f64; 3]) -> [f64; 3] {
    let d = field.dims;
    let (x0, x1, fx, _) = axis_cell(p[0], d.w);
    let (y0, y1, fy, _) = axis_cell(p[1], d.h);
    let (z0, z1, fz, _) = axis_cell(p[2], d.d);
    let mut out = [0.0; 3];
    let idx = [
        (d.index(x0, y0, z0), (1.0 - fx) * (1.0 - fy) * (1.0 - fz)),
        (d.index(x1, y0, z0), fx * (1.0 - fy) * (1.0 - fz)),
        (d.index(x0, y1, z0), (1.0 - fx) * fy * (1.0 - fz)),
        (d.index(x1, y1, z0), fx * fy * (1.0 - fz)),
        (d.index(x0, y0, z1), (1.0 - fx) * (1.0 - fy) * fz),
        (d.index(x1, y0, z1), fx * (1.0 - fy) * fz),
        (d.index(x0, y1, z1), (1.0 - fx) * fy * fz),
        (d.index(x1, y1, z1), fx * fy * fz),
    ];
    for (i, w) in idx {
        let v = field.data[i];
        out[0] += w * v[0];
        out[1] += w * v[1];
        out[2] += w * v[2];
    }
    out
}

fn check_dims(a: GridDims, b: GridDims, what: &str) -> Result<()> {
    if a != b {
        return Err(Error::DimensionMismatch(format!(
            "{what}: {a:?} vs {b:?}"
        )));
    }
    Ok(())
}

/// Backward warp: `out(p) = src(p + phi(p))`.
pub fn warp_scalar(src: &ScalarVolume, field: &DisplacementField) -> Result<ScalarVolume> {
    check_dims(src.dims, field.dims, "warp_scalar")?;
    let d = src.dims;
    let mut out = ScalarVolume::zeros(d, src.spacing);
    let mut i = 0;
    for z in 0..d.d {
        for y in 0..d.h {
            for x in 0..d.w {
                let u = field.data[i];
                let p = [x as f64 + u[0], y as f64 + u[1], z as f64 + u[2]];
                out.data[i] = sample_trilinear(src, p);
                i += 1;
            }
        }
    }
    Ok(out)
}

/// Label warp through per-label one-hot channels and argmax.
///
/// Ties break toward the smaller label id, which makes the result
/// deterministic and keeps the output alphabet inside the input alphabet.
pub fn warp_labels(src: &LabelVolume, field: &DisplacementField) -> Result<LabelVolume> {
    check_dims(src.dims, field.dims, "warp_labels")?;
    let d = src.dims;
    let spacing = src.spacing;
    let mut channels = Vec::with_capacity(LABEL_SET.len());
    for &label in LABEL_SET.iter() {
        let data: Vec<f64> = src
            .data
            .iter()
            .map(|&l| if l == label { 1.0 } else { 0.0 })
            .collect();
        let vol = ScalarVolume {
            dims: d,
            spacing,
            data,
        };
        channels.push(warp_scalar(&vol, field)?);
    }
    let mut out = LabelVolume::zeros(d, spacing);
    for i in 0..d.len() {
        let mut best = LABEL_SET[0];
        let mut best_v = channels[0].data[i];
        for (k, &label) in LABEL_SET.iter().enumerate().skip(1) {
            let v = channels[k].data[i];
            if v > best_v {
                best_v = v;
                best = label;
            }
        }
        out.data[i] = best;
    }
    Ok(out)
}

/// Forward-difference spatial gradient; the last index along an axis gets 0.
pub fn spatial_gradient(vol: &ScalarVolume) -> [ScalarVolume; 3] {
    let d = vol.dims;
    let mut gx = ScalarVolume::zeros(d, vol.spacing);
    let mut gy = ScalarVolume::zeros(d, vol.spacing);
    let mut gz = ScalarVolume::zeros(d, vol.spacing);
    for z in 0..d.d {
        for y in 0..d.h {
            for x in 0..d.w {
                let i = d.index(x, y, z);
                let v = vol.data[i];
                if x + 1 < d.w {
                    gx.data[i] = vol.data[d.index(x + 1, y, z)] - v;
                }
                if y + 1 < d.h {
                    gy.data[i] = vol.data[d.index(x, y + 1, z)] - v;
                }
                if z + 1 < d.d {
                    gz.data[i] = vol.data[d.index(x, y, z + 1)] - v;
                }
            }
        }
    }
    [gx, gy, gz]
}

/// Central-difference gradient (one-sided at the boundary), in voxel units.
pub fn central_gradient(vol: &ScalarVolume) -> [ScalarVolume; 3] {
    let d = vol.dims;
    let mut out = [
        ScalarVolume::zeros(d, vol.spacing),
        ScalarVolume::zeros(d, vol.spacing),
        ScalarVolume::zeros(d, vol.spacing),
    ];
    for z in 0..d.d {
        for y in 0..d.h {
            for x in 0..d.w {
                let i = d.index(x, y, z);
                let p = [x, y, z];
                for a in 0..3 {
                    let n = d.axis(a);
                    let mut lo = p;
                    let mut hi = p;
                    let (scale, ok_lo, ok_hi) = if p[a] == 0 {
                        (1.0, false, true)
                    } else if p[a] == n - 1 {
                        (1.0, true, false)
                    } else {
                        (0.5, true, true)
                    };
                    if ok_lo {
                        lo[a] -= 1;
                    }
                    if ok_hi {
                        hi[a] += 1;
                    }
                    let vl = vol.data[d.index(lo[0], lo[1], lo[2])];
                    let vh = vol.data[d.index(hi[0], hi[1], hi[2])];
                    out[a].data[i] = scale * (vh - vl);
                }
            }
        }
    }
    out
}

/// Per-voxel derivative of field component `c` along axis `a`:
/// central differences in the interior, one-sided at the boundary.
pub(crate) fn field_derivative(field: &DisplacementField, c: usize, a: usize) -> Vec<f64> {
    let d = field.dims;
    let mut out = vec![0.0; d.len()];
    for z in 0..d.d {
        for y in 0..d.h {
            for x in 0..d.w {
                let i = d.index(x, y, z);
                let p = [x, y, z];
                let n = d.axis(a);
                let (scale, lo_off, hi_off): (f64, isize, isize) = if p[a] == 0 {
                    (1.0, 0, 1)
                } else if p[a] == n - 1 {
                    (1.0, -1, 0)
                } else {
                    (0.5, -1, 1)
                };
                let mut lo = p;
                let mut hi = p;
                lo[a] = (lo[a] as isize + lo_off) as usize;
                hi[a] = (hi[a] as isize + hi_off) as usize;
                let vl = field.data[d.index(lo[0], lo[1], lo[2])][c];
                let vh = field.data[d.index(hi[0], hi[1], hi[2])][c];
                out[i] = scale * (vh - vl);
            }
        }
    }
    out
}

/// Determinant of the spatial map `p -> p + phi(p)` at every voxel:
/// `det(I + grad u)` with central differences (one-sided at the boundary),
/// all in voxel units. Negative values indicate folding.
pub fn jacobian_determinant(field: &DisplacementField) -> ScalarVolume {
    let d = field.dims;
    // jac[c][a] = d(u_c)/d(axis a)
    let mut jac: Vec<Vec<f64>> = Vec::with_capacity(9);
    for c in 0..3 {
        for a in 0..3 {
            jac.push(field_derivative(field, c, a));
        }
    }
    let mut out = ScalarVolume::zeros(d, field.spacing);
    for i in 0..d.len() {
        let m = |c: usize, a: usize| jac[c * 3 + a][i] + if c == a { 1.0 } else { 0.0 };
        let det = m(0, 0) * (m(1, 1) * m(2, 2) - m(1, 2) * m(2, 1))
            - m(0, 1) * (m(1, 0) * m(2, 2) - m(1, 2) * m(2, 0))
            + m(0, 2) * (m(1, 0) * m(2, 1) - m(1, 1) * m(2, 0));
        out.data[i] = det;
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;

    pub(crate) fn dims(w: usize, h: usize, d: usize) -> GridDims {
        GridDims::new(w, h, d).unwrap()
    }

    pub(crate) fn unit_spacing() -> Spacing {
        Spacing::new(1.0, 1.0, 1.0).unwrap()
    }

    fn random_volume(d: GridDims, rng: &mut Rng) -> ScalarVolume {
        let data = (0..d.len()).map(|_| rng.uniform()).collect();
        ScalarVolume::new(d, unit_spacing(), data).unwrap()
    }

    /// Independent 8-corner weighted sum with explicit clamping.
    fn oracle_trilinear(vol: &ScalarVolume, p: [f64; 3]) -> f64 {
        let d = vol.dims;
        let n = [d.w, d.h, d.d];
        let mut c = [0.0; 3];
        for a in 0..3 {
            c[a] = p[a].max(0.0).min((n[a] - 1) as f64);
        }
        let base = [c[0].floor() as usize, c[1].floor() as usize, c[2].floor() as usize];
        let f = [c[0] - base[0] as f64, c[1] - base[1] as f64, c[2] - base[2] as f64];
        let mut acc = 0.0;
        for dz in 0..2usize {
            for dy in 0..2usize {
                for dx in 0..2usize {
                    let xi = (base[0] + dx).min(n[0] - 1);
                    let yi = (base[1] + dy).min(n[1] - 1);
                    let zi = (base[2] + dz).min(n[2] - 1);
                    let w = (if dx == 1 { f[0] } else { 1.0 - f[0] })
                        * (if dy == 1 { f[1] } else { 1.0 - f[1] })
                        * (if dz == 1 { f[2] } else { 1.0 - f[2] });
                    acc += w * vol.at(xi, yi, zi);
                }
            }
        }
        acc
    }

    #[test]
    fn trilinear_midpoint_of_two_voxel_line() {
        let d = dims(2, 2, 2);
        let mut vol = ScalarVolume::zeros(d, unit_spacing());
        vol.set(1, 0, 0, 1.0);
        let v = sample_trilinear(&vol, [0.5, 0.0, 0.0]);
        assert_eq!(v, 0.5);
    }

    #[test]
    fn trilinear_reproduces_stored_values_at_voxel_centers() {
        let d = dims(4, 5, 3);
        let mut rng = Rng::seed_from_u64(1);
        let vol = random_volume(d, &mut rng);
        for z in 0..d.d {
            for y in 0..d.h {
                for x in 0..d.w {
                    let v = sample_trilinear(&vol, [x as f64, y as f64, z as f64]);
                    assert_eq!(v, vol.at(x, y, z));
                }
            }
        }
    }

    #[test]
    fn trilinear_matches_corner_oracle() {
        let d = dims(4, 4, 4);
        let mut rng = Rng::seed_from_u64(2);
        let vol = random_volume(d, &mut rng);
        for _ in 0..20 {
            let p = [
                rng.uniform_range(0.0, 3.0),
                rng.uniform_range(0.0, 3.0),
                rng.uniform_range(0.0, 3.0),
            ];
            let got = sample_trilinear(&vol, p);
            let want = oracle_trilinear(&vol, p);
            assert!((got - want).abs() < 1e-12, "{got} vs {want} at {p:?}");
        }
    }

    #[test]
    fn trilinear_clamps_outside_grid() {
        let d = dims(3, 3, 3);
        let mut rng = Rng::seed_from_u64(3);
        let vol = random_volume(d, &mut rng);
        assert_eq!(sample_trilinear(&vol, [-5.0, 0.0, 0.0]), vol.at(0, 0, 0));
        assert_eq!(sample_trilinear(&vol, [10.0, 2.0, 2.0]), vol.at(2, 2, 2));
        let oracle = oracle_trilinear(&vol, [3.5, -0.2, 1.3]);
        assert!((sample_trilinear(&vol, [3.5, -0.2, 1.3]) - oracle).abs() < 1e-12);
    }

    #[test]
    fn sample_gradient_matches_finite_differences() {
        let d = dims(5, 5, 5);
        let mut rng = Rng::seed_from_u64(4);
        let vol = random_volume(d, &mut rng);
        let h = 1e-6;
        for _ in 0..50 {
            // Stay away from cell faces so the interpolant is smooth at p.
            let p = [
                rng.uniform_range(0.0, 3.0).floor() + rng.uniform_range(0.1, 0.9),
                rng.uniform_range(0.0, 3.0).floor() + rng.uniform_range(0.1, 0.9),
                rng.uniform_range(0.0, 3.0).floor() + rng.uniform_range(0.1, 0.9),
            ];
            let (_, g) = sample_trilinear_with_grad(&vol, p);
            for a in 0..3 {
                let mut pp = p;
                let mut pm = p;
                pp[a] += h;
                pm[a] -= h;
                let fd = (sample_trilinear(&vol, pp) - sample_trilinear(&vol, pm)) / (2.0 * h);
                assert!((g[a] - fd).abs() < 1e-6, "axis {a}: {} vs {fd}", g[a]);
            }
        }
    }

    #[test]
    fn warp_zero_field_is_identity() {
        let d = dims(4, 3, 5);
        let mut rng = Rng::seed_from_u64(5);
        let vol = random_volume(d, &mut rng);
        let field = DisplacementField::zeros(d, unit_spacing());
        let out = warp_scalar(&vol, &field).unwrap();
        assert_eq!(out.data, vol.data);
    }

    #[test]
    fn warp_recovers_constant_shift() {
        // shifted(x) = base(x+1): content moved one voxel toward -x. Warping
        // with the constant backward field (-1, 0, 0) restores base away from
        // the x = 0 border the field points across.
        let d = dims(6, 4, 4);
        let mut rng = Rng::seed_from_u64(6);
        let base = random_volume(d, &mut rng);
        let mut shifted = ScalarVolume::zeros(d, unit_spacing());
        for z in 0..d.d {
            for y in 0..d.h {
                for x in 0..d.w {
                    shifted.set(x, y, z, base.at((x + 1).min(d.w - 1), y, z));
                }
            }
        }
        let field = DisplacementField::new(
            d,
            unit_spacing(),
            vec![[-1.0, 0.0, 0.0]; d.len()],
        )
        .unwrap();
        let out = warp_scalar(&shifted, &field).unwrap();
        for z in 0..d.d {
            for y in 0..d.h {
                for x in 1..d.w {
                    assert!(
                        (out.at(x, y, z) - base.at(x, y, z)).abs() < 1e-12,
                        "interior voxel ({x},{y},{z})"
                    );
                }
            }
        }
    }

    #[test]
    fn warp_output_stays_in_source_range() {
        let d = dims(5, 5, 5);
        let mut rng = Rng::seed_from_u64(7);
        let vol = random_volume(d, &mut rng);
        let field_data: Vec<[f64; 3]> = (0..d.len())
            .map(|_| {
                [
                    rng.uniform_range(-3.0, 3.0),
                    rng.uniform_range(-3.0, 3.0),
                    rng.uniform_range(-3.0, 3.0),
                ]
            })
            .collect();
        let field = DisplacementField::new(d, unit_spacing(), field_data).unwrap();
        let out = warp_scalar(&vol, &field).unwrap();
        let lo = vol.data.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = vol.data.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        for &v in &out.data {
            assert!(v.is_finite() && v >= lo - 1e-12 && v <= hi + 1e-12);
        }
    }

    #[test]
    fn warp_dimension_mismatch_is_error() {
        let vol = ScalarVolume::zeros(dims(4, 4, 4), unit_spacing());
        let field = DisplacementField::zeros(dims(4, 4, 5), unit_spacing());
        assert!(warp_scalar(&vol, &field).is_err());
    }

    #[test]
    fn warp_labels_zero_field_identity_and_integer_shift() {
        let d = dims(6, 6, 6);
        let mut lab = LabelVolume::zeros(d, unit_spacing());
        for z in 2..5 {
            for y in 2..5 {
                for x in 2..5 {
                    lab.data[d.index(x, y, z)] = if x == 3 && y == 3 && z == 3 {
                        LABEL_CAVITY
                    } else {
                        LABEL_MYOCARDIUM
                    };
                }
            }
        }
        let zero = DisplacementField::zeros(d, unit_spacing());
        assert_eq!(warp_labels(&lab, &zero).unwrap().data, lab.data);

        let shift = DisplacementField::new(d, unit_spacing(), vec![[1.0, 0.0, 0.0]; d.len()])
            .unwrap();
        let out = warp_labels(&lab, &shift).unwrap();
        for z in 0..d.d {
            for y in 0..d.h {
                for x in 0..d.w - 1 {
                    assert_eq!(out.at(x, y, z), lab.at(x + 1, y, z));
                }
            }
        }
    }

    #[test]
    fn warp_labels_preserves_alphabet() {
        let d = dims(5, 5, 5);
        let mut rng = Rng::seed_from_u64(8);
        let data: Vec<u8> = (0..d.len()).map(|_| (rng.next_u64() % 2) as u8).collect();
        let lab = LabelVolume::new(d, unit_spacing(), data).unwrap();
        let field_data: Vec<[f64; 3]> = (0..d.len())
            .map(|_| {
                [
                    rng.uniform_range(-1.5, 1.5),
                    rng.uniform_range(-1.5, 1.5),
                    rng.uniform_range(-1.5, 1.5),
                ]
            })
            .collect();
        let field = DisplacementField::new(d, unit_spacing(), field_data).unwrap();
        let out = warp_labels(&lab, &field).unwrap();
        // Input uses labels {0,1} only; cavity must not appear.
        assert!(out.data.iter().all(|&l| l <= 1));
    }

    #[test]
    fn spatial_gradient_constant_and_ramp() {
        let d = dims(4, 4, 4);
        let constant = ScalarVolume::new(d, unit_spacing(), vec![3.7; d.len()]).unwrap();
        let g = spatial_gradient(&constant);
        for a in 0..3 {
            assert!(g[a].data.iter().all(|&v| v == 0.0));
        }

        let mut ramp = ScalarVolume::zeros(d, unit_spacing());
        for z in 0..d.d {
            for y in 0..d.h {
                for x in 0..d.w {
                    ramp.set(x, y, z, x as f64);
                }
            }
        }
        let g = spatial_gradient(&ramp);
        for z in 0..d.d {
            for y in 0..d.h {
                for x in 0..d.w {
                    let want = if x + 1 < d.w { 1.0 } else { 0.0 };
                    assert_eq!(g[0].at(x, y, z), want);
                }
            }
        }
    }

    #[test]
    fn spatial_gradient_matches_subtraction_oracle() {
        let d = dims(5, 5, 5);
        let mut rng = Rng::seed_from_u64(9);
        let vol = random_volume(d, &mut rng);
        let g = spatial_gradient(&vol);
        for z in 0..d.d {
            for y in 0..d.h {
                for x in 0..d.w {
                    let gx = if x + 1 < d.w {
                        vol.at(x + 1, y, z) - vol.at(x, y, z)
                    } else {
                        0.0
                    };
                    let gy = if y + 1 < d.h {
                        vol.at(x, y + 1, z) - vol.at(x, y, z)
                    } else {
                        0.0
                    };
                    let gz = if z + 1 < d.d {
                        vol.at(x, y, z + 1) - vol.at(x, y, z)
                    } else {
                        0.0
                    };
                    assert_eq!(g[0].at(x, y, z), gx);
                    assert_eq!(g[1].at(x, y, z), gy);
                    assert_eq!(g[2].at(x, y, z), gz);
                }
            }
        }
    }

    #[test]
    fn jacobian_of_zero_field_is_one() {
        let d = dims(4, 4, 4);
        let field = DisplacementField::zeros(d, unit_spacing());
        let det = jacobian_determinant(&field);
        assert!(det.data.iter().all(|&v| v == 1.0));
    }

    #[test]
    fn jacobian_of_constant_field_is_one() {
        let d = dims(4, 4, 4);
        let field =
            DisplacementField::new(d, unit_spacing(), vec![[0.3, -1.2, 0.7]; d.len()]).unwrap();
        let det = jacobian_determinant(&field);
        assert!(det.data.iter().all(|&v| (v - 1.0).abs() < 1e-12));
    }

    #[test]
    fn jacobian_of_linear_expansion_and_folding() {
        let d = dims(6, 6, 6);
        let mut grow = DisplacementField::zeros(d, unit_spacing());
        let mut fold = DisplacementField::zeros(d, unit_spacing());
        for z in 0..d.d {
            for y in 0..d.h {
                for x in 0..d.w {
                    let i = d.index(x, y, z);
                    grow.data[i] = [0.1 * x as f64, 0.0, 0.0];
                    fold.data[i] = [-2.0 * x as f64, 0.0, 0.0];
                }
            }
        }
        let dg = jacobian_determinant(&grow);
        let df = jacobian_determinant(&fold);
        for z in 1..d.d - 1 {
            for y in 1..d.h - 1 {
                for x in 1..d.w - 1 {
                    assert!((dg.at(x, y, z) - 1.1).abs() < 1e-12);
                    assert!((df.at(x, y, z) + 1.0).abs() < 1e-12);
                    assert!(df.at(x, y, z) < 0.0);
                }
            }
        }
    }

    #[test]
    fn invalid_constructions_rejected() {
        assert!(GridDims::new(1, 4, 4).is_err());
        assert!(Spacing::new(0.0, 1.0, 1.0).is_err());
        let d = dims(2, 2, 2);
        assert!(ScalarVolume::new(d, unit_spacing(), vec![0.0; 7]).is_err());
        assert!(ScalarVolume::new(d, unit_spacing(), vec![f64::NAN; 8]).is_err());
        assert!(LabelVolume::new(d, unit_spacing(), vec![5u8; 8]).is_err());
    }
}
