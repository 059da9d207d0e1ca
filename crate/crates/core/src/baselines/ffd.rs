//! B-spline free-form deformation registration.
//!
//! The displacement field is a tensor-product cubic B-spline over a uniform
//! control lattice. Registration minimizes mean squared error plus a
//! bending-energy penalty (squared second derivatives of the dense field,
//! the thin-plate term) by adaptive gradient descent on the control points.
//! A coarse-to-fine schedule halves both the image resolution factor and the
//! physical knot spacing per level; lattices move to the next level by cubic
//! B-spline subdivision, which reproduces the represented field exactly.

use crate::error::{Error, Result};
use crate::filter::downsample_box;
use crate::grid::{sample_trilinear_with_grad, DisplacementField, GridDims, ScalarVolume};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FfdConfig {
    /// Knot spacing in voxels per axis at the finest level; must be >= 2.
    pub knot_spacing_voxels: [f64; 3],
    /// Weight of the bending-energy penalty.
    pub bending_weight: f64,
    /// Optimizer iterations per level.
    pub iterations: usize,
    /// Pyramid levels; level k uses image factor 2^(levels-1-k) and knot
    /// spacing refined accordingly.
    pub levels: usize,
    /// Adam step size on control points, voxels.
    pub step_voxels: f64,
}

impl Default for FfdConfig {
    fn default() -> Self {
        FfdConfig {
            knot_spacing_voxels: [8.0, 8.0, 4.0],
            bending_weight: 1e-3,
            iterations: 60,
            levels: 2,
            step_voxels: 0.25,
        }
    }
}

impl FfdConfig {
    pub fn validate(&self) -> Result<()> {
        if self.knot_spacing_voxels.iter().any(|&s| s < 2.0) {
            return Err(Error::InvalidArgument(
                "knot spacing must be >= 2 voxels per axis".into(),
            ));
        }
        if self.iterations == 0 || self.levels == 0 {
            return Err(Error::InvalidArgument(
                "iterations and levels must be >= 1".into(),
            ));
        }
        if !(self.step_voxels > 0.0) {
            return Err(Error::InvalidArgument("step_voxels must be positive".into()));
        }
        if self.bending_weight < 0.0 {
            return Err(Error::InvalidArgument("bending_weight must be >= 0".into()));
        }
        Ok(())
    }
}

/// Uniform cubic B-spline basis at parameter `s` in [0, 1).
pub fn bspline_weights(s: f64) -> [f64; 4] {
    let s2 = s * s;
    let s3 = s2 * s;
    [
        (1.0 - s) * (1.0 - s) * (1.0 - s) / 6.0,
        (3.0 * s3 - 6.0 * s2 + 4.0) / 6.0,
        (-3.0 * s3 + 3.0 * s2 + 3.0 * s + 1.0) / 6.0,
        s3 / 6.0,
    ]
}

/// Control lattice for one image grid. Control point at stored index `s`
/// sits at lattice coordinate `s - 1` (one ring of controls outside the
/// grid on the low side, two on the high side, as cubic support needs).
#[derive(Debug, Clone)]
pub struct Lattice {
    pub image_dims: GridDims,
    pub spacing_voxels: [f64; 3],
    pub counts: [usize; 3],
    pub data: Vec<[f64; 3]>,
}

impl Lattice {
    pub fn new(image_dims: GridDims, spacing_voxels: [f64; 3]) -> Result<Self> {
        let mut counts = [0usize; 3];
        for a in 0..3 {
            let n = image_dims.axis(a);
            if spacing_voxels[a] >= n as f64 {
                return Err(Error::InvalidArgument(format!(
                    "knot spacing {} exceeds grid extent {} on axis {a}",
                    spacing_voxels[a], n
                )));
            }
            let imax = ((n - 1) as f64 / spacing_voxels[a]).floor() as usize;
            counts[a] = imax + 4;
        }
        Ok(Lattice {
            image_dims,
            spacing_voxels,
            counts,
            data: vec![[0.0; 3]; counts[0] * counts[1] * counts[2]],
        })
    }

    #[inline]
    fn index(&self, i: usize, j: usize, k: usize) -> usize {
        i + self.counts[0] * (j + self.counts[1] * k)
    }

    /// Cell index and local parameter per axis for a continuous position.
    #[inline]
    fn locate(&self, axis: usize, x: f64) -> (isize, f64) {
        let t = x / self.spacing_voxels[axis];
        let i = t.floor() as isize;
        (i, t - i as f64)
    }

    /// Control value at lattice coordinate (may address the stored halo).
    #[inline]
    fn control(&self, li: isize, lj: isize, lk: isize) -> [f64; 3] {
        let si = li + 1;
        let sj = lj + 1;
        let sk = lk + 1;
        if si < 0
            || sj < 0
            || sk < 0
            || si >= self.counts[0] as isize
            || sj >= self.counts[1] as isize
            || sk >= self.counts[2] as isize
        {
            return [0.0; 3];
        }
        self.data[self.index(si as usize, sj as usize, sk as usize)]
    }

    /// Displacement at a continuous voxel coordinate.
    pub fn displacement_at(&self, p: [f64; 3]) -> [f64; 3] {
        let (ix, sx) = self.locate(0, p[0]);
        let (iy, sy) = self.locate(1, p[1]);
        let (iz, sz) = self.locate(2, p[2]);
        let wx = bspline_weights(sx);
        let wy = bspline_weights(sy);
        let wz = bspline_weights(sz);
        let mut out = [0.0; 3];
        for (dk, &wk) in wz.iter().enumerate() {
            for (dj, &wj) in wy.iter().enumerate() {
                for (di, &wi) in wx.iter().enumerate() {
                    let c = self.control(
                        ix - 1 + di as isize,
                        iy - 1 + dj as isize,
                        iz - 1 + dk as isize,
                    );
                    let w = wi * wj * wk;
                    out[0] += w * c[0];
                    out[1] += w * c[1];
                    out[2] += w * c[2];
                }
            }
        }
        out
    }

    /// Dense displacement field over the whole image grid.
    pub fn dense_field(&self, spacing: crate::grid::Spacing) -> DisplacementField {
        let d = self.image_dims;
        let mut out = DisplacementField::zeros(d, spacing);
        let mut i = 0;
        for z in 0..d.d {
            for y in 0..d.h {
                for x in 0..d.w {
                    out.data[i] = self.displacement_at([x as f64, y as f64, z as f64]);
                    i += 1;
                }
            }
        }
        out
    }

    /// Scatter a per-voxel gradient of the dense field back onto the control
    /// points (the adjoint of `dense_field`).
    fn scatter_gradient(&self, voxel_grad: &[[f64; 3]]) -> Vec<[f64; 3]> {
        let d = self.image_dims;
        let mut out = vec![[0.0; 3]; self.data.len()];
        let mut i = 0;
        for z in 0..d.d {
            for y in 0..d.h {
                for x in 0..d.w {
                    let g = voxel_grad[i];
                    i += 1;
                    if g == [0.0; 3] {
                        continue;
                    }
                    let (ix, sx) = self.locate(0, x as f64);
                    let (iy, sy) = self.locate(1, y as f64);
                    let (iz, sz) = self.locate(2, z as f64);
                    let wx = bspline_weights(sx);
                    let wy = bspline_weights(sy);
                    let wz = bspline_weights(sz);
                    for (dk, &wk) in wz.iter().enumerate() {
                        for (dj, &wj) in wy.iter().enumerate() {
                            for (di, &wi) in wx.iter().enumerate() {
                                let li = ix - 1 + di as isize + 1;
                                let lj = iy - 1 + dj as isize + 1;
                                let lk = iz - 1 + dk as isize + 1;
                                if li < 0
                                    || lj < 0
                                    || lk < 0
                                    || li >= self.counts[0] as isize
                                    || lj >= self.counts[1] as isize
                                    || lk >= self.counts[2] as isize
                                {
                                    continue;
                                }
                                let w = wi * wj * wk;
                                let idx = self.index(li as usize, lj as usize, lk as usize);
                                out[idx][0] += w * g[0];
                                out[idx][1] += w * g[1];
                                out[idx][2] += w * g[2];
                            }
                        }
                    }
                }
            }
        }
        out
    }

    /// Halve the physical knot spacing by cubic B-spline subdivision. With
    /// the same `image_dims` this refines in place (same dense field, half
    /// the spacing). When the image dims change across a pyramid level the
    /// spacing and control values are re-expressed in the new voxel units:
    /// refined control `j` sits at `j * spacing/2` in old voxel coordinates
    /// either way, which is what the subdivision masks assume.
    pub fn subdivide(&self, image_dims: GridDims, value_scale: [f64; 3]) -> Result<Lattice> {
        let ratios = [
            image_dims.w as f64 / self.image_dims.w as f64,
            image_dims.h as f64 / self.image_dims.h as f64,
            image_dims.d as f64 / self.image_dims.d as f64,
        ];
        let new_spacing = [
            self.spacing_voxels[0] / 2.0 * ratios[0],
            self.spacing_voxels[1] / 2.0 * ratios[1],
            self.spacing_voxels[2] / 2.0 * ratios[2],
        ];
        let mut refined = Lattice::new(image_dims, new_spacing)?;
        for sk in 0..refined.counts[2] {
            let lk = sk as isize - 1;
            for sj in 0..refined.counts[1] {
                let lj = sj as isize - 1;
                for si in 0..refined.counts[0] {
                    let li = si as isize - 1;
                    let v = self.refined_control(li, lj, lk);
                    let idx = refined.index(si, sj, sk);
                    refined.data[idx] = [
                        v[0] * value_scale[0],
                        v[1] * value_scale[1],
                        v[2] * value_scale[2],
                    ];
                }
            }
        }
        Ok(refined)
    }

    /// Value of the refined control at refined lattice coordinate, computed
    /// from the coarse lattice by the tensor-product subdivision masks
    /// (even: (1, 6, 1)/8, odd: (1, 1)/2), applied per axis.
    fn refined_control(&self, li: isize, lj: isize, lk: isize) -> [f64; 3] {
        // Per axis: list of (coarse lattice coord, weight).
        fn taps(l: isize) -> Vec<(isize, f64)> {
            if l.rem_euclid(2) == 0 {
                let i = l / 2;
                vec![(i - 1, 1.0 / 8.0), (i, 6.0 / 8.0), (i + 1, 1.0 / 8.0)]
            } else {
                let i = (l - 1).div_euclid(2);
                vec![(i, 0.5), (i + 1, 0.5)]
            }
        }
        let tx = taps(li);
        let ty = taps(lj);
        let tz = taps(lk);
        let mut out = [0.0; 3];
        for (ck, wk) in &tz {
            for (cj, wj) in &ty {
                for (ci, wi) in &tx {
                    let c = self.control(*ci, *cj, *ck);
                    let w = wi * wj * wk;
                    out[0] += w * c[0];
                    out[1] += w * c[1];
                    out[2] += w * c[2];
                }
            }
        }
        out
    }
}

/// Bending energy of a dense field (mean over voxels of squared second
/// differences, mixed terms doubled) and its gradient with respect to the
/// per-voxel displacements.
fn bending_energy_and_gradient(field: &DisplacementField) -> (f64, Vec<[f64; 3]>) {
    let d = field.dims;
    let n = d.len() as f64;
    let mut energy = 0.0;
    let mut grad = vec![[0.0; 3]; d.len()];
    let idx = |x: usize, y: usize, z: usize| d.index(x, y, z);
    for z in 0..d.d {
        for y in 0..d.h {
            for x in 0..d.w {
                let i = idx(x, y, z);
                for (a, (n_a, pos)) in [(d.w, x), (d.h, y), (d.d, z)].into_iter().enumerate() {
                    if pos == 0 || pos + 1 >= n_a {
                        continue;
                    }
                    let (lo, hi) = match a {
                        0 => (idx(x - 1, y, z), idx(x + 1, y, z)),
                        1 => (idx(x, y - 1, z), idx(x, y + 1, z)),
                        _ => (idx(x, y, z - 1), idx(x, y, z + 1)),
                    };
                    for c in 0..3 {
                        let second =
                            field.data[hi][c] - 2.0 * field.data[i][c] + field.data[lo][c];
                        energy += second * second / n;
                        let s = 2.0 * second / n;
                        grad[hi][c] += s;
                        grad[i][c] -= 2.0 * s;
                        grad[lo][c] += s;
                    }
                }
                // Mixed second derivatives, doubled in the thin-plate sum.
                let pairs = [(0usize, 1usize), (0, 2), (1, 2)];
                for (a, b) in pairs {
                    let p = [x, y, z];
                    let (na, nb) = (d.axis(a), d.axis(b));
                    if p[a] == 0 || p[a] + 1 >= na || p[b] == 0 || p[b] + 1 >= nb {
                        continue;
                    }
                    let mut pp = p;
                    let mut pm = p;
                    let mut mp = p;
                    let mut mm = p;
                    pp[a] += 1;
                    pp[b] += 1;
                    pm[a] += 1;
                    pm[b] -= 1;
                    mp[a] -= 1;
                    mp[b] += 1;
                    mm[a] -= 1;
                    mm[b] -= 1;
                    let (ipp, ipm, imp, imm) = (
                        idx(pp[0], pp[1], pp[2]),
                        idx(pm[0], pm[1], pm[2]),
                        idx(mp[0], mp[1], mp[2]),
                        idx(mm[0], mm[1], mm[2]),
                    );
                    for c in 0..3 {
                        let mixed = (field.data[ipp][c] - field.data[ipm][c]
                            - field.data[imp][c]
                            + field.data[imm][c])
                            / 4.0;
                        energy += 2.0 * mixed * mixed / n;
                        let s = 2.0 * 2.0 * mixed / (4.0 * n);
                        grad[ipp][c] += s;
                        grad[ipm][c] -= s;
                        grad[imp][c] -= s;
                        grad[imm][c] += s;
                    }
                }
            }
        }
    }
    (energy, grad)
}

/// Register `moving` onto `fixed` with a multi-level B-spline lattice; the
/// returned backward field satisfies `warp(moving, field) ~ fixed`.
pub fn register_ffd(
    fixed: &ScalarVolume,
    moving: &ScalarVolume,
    cfg: &FfdConfig,
) -> Result<DisplacementField> {
    cfg.validate()?;
    if fixed.dims != moving.dims {
        return Err(Error::DimensionMismatch("register_ffd".into()));
    }
    // Validate the finest-level lattice up front.
    Lattice::new(fixed.dims, cfg.knot_spacing_voxels)?;

    let mut lattice: Option<Lattice> = None;
    for level in 0..cfg.levels {
        let factor = 1usize << (cfg.levels - 1 - level);
        let f = downsample_box(fixed, factor);
        let m = downsample_box(moving, factor);
        let dims = f.dims;
        let mut lat = match lattice {
            None => Lattice::new(dims, cfg.knot_spacing_voxels)?,
            // Halving the knot spacing while the image dims double keeps the
            // spacing constant in the new level's voxels; values double with
            // the voxel-unit change.
            Some(prev) => prev.subdivide_to(dims)?,
        };

        let n_ctrl = lat.data.len();
        let mut mom = vec![[0.0f64; 3]; n_ctrl];
        let mut vel = vec![[0.0f64; 3]; n_ctrl];
        let nvox = dims.len() as f64;
        for iter in 0..cfg.iterations {
            let dense = lat.dense_field(f.spacing);
            // MSE term.
            let mut voxel_grad = vec![[0.0; 3]; dims.len()];
            let mut i = 0;
            for z in 0..dims.d {
                for y in 0..dims.h {
                    for x in 0..dims.w {
                        let u = dense.data[i];
                        let p = [x as f64 + u[0], y as f64 + u[1], z as f64 + u[2]];
                        let (w, g) = sample_trilinear_with_grad(&m, p);
                        let r = w - f.data[i];
                        let s = 2.0 / nvox * r;
                        voxel_grad[i] = [s * g[0], s * g[1], s * g[2]];
                        i += 1;
                    }
                }
            }
            if cfg.bending_weight > 0.0 {
                let (_, bend_grad) = bending_energy_and_gradient(&dense);
                for (vg, bg) in voxel_grad.iter_mut().zip(&bend_grad) {
                    for c in 0..3 {
                        vg[c] += cfg.bending_weight * bg[c];
                    }
                }
            }
            let ctrl_grad = lat.scatter_gradient(&voxel_grad);
            if ctrl_grad.iter().any(|g| g.iter().any(|c| !c.is_finite())) {
                return Err(Error::Optimization("non-finite FFD gradient".into()));
            }
            let t = (iter + 1) as f64;
            let bc1 = 1.0 - 0.9f64.powf(t);
            let bc2 = 1.0 - 0.999f64.powf(t);
            for j in 0..n_ctrl {
                for c in 0..3 {
                    let g = ctrl_grad[j][c];
                    mom[j][c] = 0.9 * mom[j][c] + 0.1 * g;
                    vel[j][c] = 0.999 * vel[j][c] + 0.001 * g * g;
                    let mhat = mom[j][c] / bc1;
                    let vhat = vel[j][c] / bc2;
                    lat.data[j][c] -= cfg.step_voxels * mhat / (vhat.sqrt() + 1e-12);
                }
            }
        }
        lattice = Some(lat);
    }
    let lat = lattice.expect("at least one level");
    Ok(lat.dense_field(fixed.spacing))
}

impl Lattice {
    /// Subdivision across a pyramid boundary: the image dims change and
    /// control displacements are rescaled per axis into the new voxel units.
    fn subdivide_to(self, image_dims: GridDims) -> Result<Lattice> {
        let scale = [
            image_dims.w as f64 / self.image_dims.w as f64,
            image_dims.h as f64 / self.image_dims.h as f64,
            image_dims.d as f64 / self.image_dims.d as f64,
        ];
        self.subdivide(image_dims, scale)
    }
}
