//! Separable Gaussian smoothing and pyramid resampling helpers.

use crate::error::Result;
use crate::grid::{DisplacementField, GridDims, ScalarVolume, Spacing};

/// Border handling for 1D convolution.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Border {
    /// Samples outside the grid contribute zero.
    Zero,
    /// Samples outside the grid replicate the nearest voxel. Keeps constant
    /// inputs exactly constant, which field smoothing relies on.
    Replicate,
}

/// Normalized Gaussian kernel truncated at 3 sigma. `sigma = 0` gives `[1]`.
pub fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    if sigma <= 0.0 {
        return vec![1.0];
    }
    let radius = (3.0 * sigma).ceil() as isize;
    let mut k = Vec::with_capacity((2 * radius + 1) as usize);
    for i in -radius..=radius {
        let x = i as f64;
        k.push((-0.5 * x * x / (sigma * sigma)).exp());
    }
    let sum: f64 = k.iter().sum();
    for v in &mut k {
        *v /= sum;
    }
    k
}

fn convolve_axis(data: &mut Vec<f64>, dims: GridDims, axis: usize, kernel: &[f64], border: Border) {
    if kernel.len() == 1 {
        return;
    }
    let radius = (kernel.len() / 2) as isize;
    let n = dims.axis(axis) as isize;
    let mut out = vec![0.0; data.len()];
    let mut line = vec![0.0; n as usize];
    // Iterate over all lines along `axis`.
    let (na, nb) = match axis {
        0 => (dims.h, dims.d),
        1 => (dims.w, dims.d),
        _ => (dims.w, dims.h),
    };
    for b in 0..nb {
        for a in 0..na {
            let index = |i: usize| match axis {
                0 => dims.index(i, a, b),
                1 => dims.index(a, i, b),
                _ => dims.index(a, b, i),
            };
            for (i, slot) in line.iter_mut().enumerate() {
                *slot = data[index(i)];
            }
            for i in 0..n {
                let mut acc = 0.0;
                for (k, &w) in kernel.iter().enumerate() {
                    let j = i + (k as isize - radius);
                    let v = if j < 0 || j >= n {
                        match border {
                            Border::Zero => 0.0,
                            Border::Replicate => line[j.clamp(0, n - 1) as usize],
                        }
                    } else {
                        line[j as usize]
                    };
                    acc += w * v;
                }
                out[index(i as usize)] = acc;
            }
        }
    }
    *data = out;
}

/// Separable Gaussian blur of a scalar volume.
pub fn gaussian_blur(vol: &ScalarVolume, sigma: f64, border: Border) -> ScalarVolume {
    let kernel = gaussian_kernel(sigma);
    let mut data = vol.data.clone();
    for axis in 0..3 {
        convolve_axis(&mut data, vol.dims, axis, &kernel, border);
    }
    ScalarVolume {
        dims: vol.dims,
        spacing: vol.spacing,
        data,
    }
}

/// Componentwise Gaussian blur of a displacement field (replicate border).
pub fn gaussian_blur_field(field: &DisplacementField, sigma: f64) -> DisplacementField {
    if sigma <= 0.0 {
        return field.clone();
    }
    let kernel = gaussian_kernel(sigma);
    let mut out = field.clone();
    for c in 0..3 {
        let mut data: Vec<f64> = field.data.iter().map(|v| v[c]).collect();
        for axis in 0..3 {
            convolve_axis(&mut data, field.dims, axis, &kernel, Border::Replicate);
        }
        for (slot, v) in out.data.iter_mut().zip(data) {
            slot[c] = v;
        }
    }
    out
}

fn coarse_dims(dims: GridDims, factor: usize) -> GridDims {
    let c = |n: usize| ((n + factor - 1) / factor).max(2);
    GridDims {
        w: c(dims.w),
        h: c(dims.h),
        d: c(dims.d),
    }
}

fn coarse_spacing(spacing: Spacing, factor: usize) -> Spacing {
    Spacing {
        x: spacing.x * factor as f64,
        y: spacing.y * factor as f64,
        z: spacing.z * factor as f64,
    }
}

/// Box-mean downsampling by an integer factor; partial boxes at the far
/// border average whatever voxels they cover.
pub fn downsample_box(vol: &ScalarVolume, factor: usize) -> ScalarVolume {
    if factor <= 1 {
        return vol.clone();
    }
    let cd = coarse_dims(vol.dims, factor);
    let mut out = ScalarVolume::zeros(cd, coarse_spacing(vol.spacing, factor));
    for z in 0..cd.d {
        for y in 0..cd.h {
            for x in 0..cd.w {
                let mut acc = 0.0;
                let mut count = 0usize;
                for dz in 0..factor {
                    let sz = z * factor + dz;
                    if sz >= vol.dims.d {
                        break;
                    }
                    for dy in 0..factor {
                        let sy = y * factor + dy;
                        if sy >= vol.dims.h {
                            break;
                        }
                        for dx in 0..factor {
                            let sx = x * factor + dx;
                            if sx >= vol.dims.w {
                                break;
                            }
                            acc += vol.at(sx, sy, sz);
                            count += 1;
                        }
                    }
                }
                out.set(x, y, z, acc / count as f64);
            }
        }
    }
    out
}

/// Any-voxel downsampling for binary masks: coarse voxel is set when any
/// covered fine voxel is set.
pub fn downsample_mask_any(mask: &[bool], dims: GridDims, factor: usize) -> (Vec<bool>, GridDims) {
    if factor <= 1 {
        return (mask.to_vec(), dims);
    }
    let cd = coarse_dims(dims, factor);
    let mut out = vec![false; cd.len()];
    for z in 0..dims.d {
        for y in 0..dims.h {
            for x in 0..dims.w {
                if mask[dims.index(x, y, z)] {
                    let cx = (x / factor).min(cd.w - 1);
                    let cy = (y / factor).min(cd.h - 1);
                    let cz = (z / factor).min(cd.d - 1);
                    out[cd.index(cx, cy, cz)] = true;
                }
            }
        }
    }
    (out, cd)
}

/// Downsample a displacement field: box-mean per component, values rescaled
/// into coarse voxel units.
pub fn downsample_field(field: &DisplacementField, factor: usize) -> DisplacementField {
    if factor <= 1 {
        return field.clone();
    }
    let cd = coarse_dims(field.dims, factor);
    let ratios = [
        cd.w as f64 / field.dims.w as f64,
        cd.h as f64 / field.dims.h as f64,
        cd.d as f64 / field.dims.d as f64,
    ];
    let mut out = DisplacementField::zeros(cd, coarse_spacing(field.spacing, factor));
    for z in 0..cd.d {
        for y in 0..cd.h {
            for x in 0..cd.w {
                let mut acc = [0.0; 3];
                let mut count = 0usize;
                for dz in 0..factor {
                    let sz = z * factor + dz;
                    if sz >= field.dims.d {
                        break;
                    }
                    for dy in 0..factor {
                        let sy = y * factor + dy;
                        if sy >= field.dims.h {
                            break;
                        }
                        for dx in 0..factor {
                            let sx = x * factor + dx;
                            if sx >= field.dims.w {
                                break;
                            }
                            let v = field.at(sx, sy, sz);
                            acc[0] += v[0];
                            acc[1] += v[1];
                            acc[2] += v[2];
                            count += 1;
                        }
                    }
                }
                let i = cd.index(x, y, z);
                for c in 0..3 {
                    out.data[i][c] = acc[c] / count as f64 * ratios[c];
                }
            }
        }
    }
    out
}

/// Upsample a displacement field to `target` dims: trilinear interpolation of
/// components with box-center alignment, values rescaled into fine voxel
/// units.
pub fn upsample_field(
    field: &DisplacementField,
    target: GridDims,
    target_spacing: Spacing,
) -> Result<DisplacementField> {
    let ratios = [
        target.w as f64 / field.dims.w as f64,
        target.h as f64 / field.dims.h as f64,
        target.d as f64 / field.dims.d as f64,
    ];
    let mut out = DisplacementField::zeros(target, target_spacing);
    for z in 0..target.d {
        for y in 0..target.h {
            for x in 0..target.w {
                let p = [
                    (x as f64 + 0.5) / ratios[0] - 0.5,
                    (y as f64 + 0.5) / ratios[1] - 0.5,
                    (z as f64 + 0.5) / ratios[2] - 0.5,
                ];
                let v = crate::grid::sample_field(field, p);
                let i = target.index(x, y, z);
                for c in 0..3 {
                    out.data[i][c] = v[c] * ratios[c];
                }
            }
        }
    }
    Ok(out)
}
