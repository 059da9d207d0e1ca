//! Diffeomorphic demons registration.
//!
//! Per iteration the demons force
//!
//! ```text
//! u(p) = (F(p) - M(phi(p))) * grad(M o phi)(p)
//!        / (|grad(M o phi)(p)|^2 + (F - M o phi)^2 / kappa)
//! ```
//!
//! is smoothed by the fluid kernel `sigma_fluid` and accumulated into a
//! stationary velocity field, which is then smoothed by the diffusion kernel
//! `sigma_diffusion`; the transformation is the exponential of the velocity,
//! computed by scaling and squaring. Keeping the displacement an exponential
//! of a smoothed velocity is what keeps the map (near-)diffeomorphic.
//!
//! The returned field is a backward field in the repo convention: warping
//! the moving image by it reproduces the fixed image.

use crate::error::{Error, Result};
use crate::filter::{downsample_box, gaussian_blur_field, upsample_field};
use crate::grid::{central_gradient, sample_field, warp_scalar, DisplacementField, ScalarVolume};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DemonsConfig {
    /// Downsampling factor per pyramid level, coarsest first.
    pub level_factors: Vec<usize>,
    /// Iterations per level, same length as `level_factors`.
    pub level_iters: Vec<usize>,
    /// Fluid smoothing of the force, voxels.
    pub sigma_fluid: f64,
    /// Diffusion smoothing of the accumulated velocity, voxels.
    pub sigma_diffusion: f64,
    /// Force normalization constant.
    pub kappa: f64,
    /// Scaling-and-squaring steps for the velocity exponential.
    pub ss_steps: u32,
}

impl Default for DemonsConfig {
    fn default() -> Self {
        DemonsConfig {
            level_factors: vec![4, 2, 1],
            level_iters: vec![40, 40, 30],
            sigma_fluid: 2.0,
            sigma_diffusion: 1.0,
            kappa: 1.0,
            ss_steps: 6,
        }
    }
}

impl DemonsConfig {
    pub fn validate(&self) -> Result<()> {
        if self.level_factors.is_empty() || self.level_factors.len() != self.level_iters.len() {
            return Err(Error::InvalidArgument(
                "level_factors and level_iters must be non-empty and equal length".into(),
            ));
        }
        if self.sigma_fluid < 0.0 || self.sigma_diffusion < 0.0 {
            return Err(Error::InvalidArgument("smoothing sigmas must be >= 0".into()));
        }
        if !(self.kappa > 0.0) {
            return Err(Error::InvalidArgument("kappa must be positive".into()));
        }
        if self.ss_steps == 0 {
            return Err(Error::InvalidArgument("ss_steps must be >= 1".into()));
        }
        Ok(())
    }
}

/// Exponential of a stationary velocity field by scaling and squaring:
/// divide by 2^K, then compose the result with itself K times.
pub fn exp_velocity(velocity: &DisplacementField, steps: u32) -> DisplacementField {
    let mut phi = velocity.clone();
    let scale = 1.0 / (1u64 << steps) as f64;
    for v in phi.data.iter_mut() {
        for c in v.iter_mut() {
            *c *= scale;
        }
    }
    for _ in 0..steps {
        phi = compose(&phi, &phi);
    }
    phi
}

/// Composition of backward displacement fields: (a ∘ b)(p) = b(p) + a(p + b(p)).
fn compose(a: &DisplacementField, b: &DisplacementField) -> DisplacementField {
    let d = b.dims;
    let mut out = DisplacementField::zeros(d, b.spacing);
    let mut i = 0;
    for z in 0..d.d {
        for y in 0..d.h {
            for x in 0..d.w {
                let vb = b.data[i];
                let p = [x as f64 + vb[0], y as f64 + vb[1], z as f64 + vb[2]];
                let va = sample_field(a, p);
                out.data[i] = [vb[0] + va[0], vb[1] + va[1], vb[2] + va[2]];
                i += 1;
            }
        }
    }
    out
}

/// Register `moving` onto `fixed`; the returned backward field satisfies
/// `warp(moving, field) ~ fixed`.
pub fn register_demons(
    fixed: &ScalarVolume,
    moving: &ScalarVolume,
    cfg: &DemonsConfig,
) -> Result<DisplacementField> {
    cfg.validate()?;
    if fixed.dims != moving.dims {
        return Err(Error::DimensionMismatch("register_demons".into()));
    }
    let levels = cfg.level_factors.len();
    let mut velocity: Option<DisplacementField> = None;

    for level in 0..levels {
        let factor = cfg.level_factors[level];
        let f = downsample_box(fixed, factor);
        let m = downsample_box(moving, factor);
        let dims = f.dims;
        let mut v = match velocity {
            None => DisplacementField::zeros(dims, f.spacing),
            Some(prev) => upsample_field(&prev, dims, f.spacing)?,
        };

        for _ in 0..cfg.level_iters[level] {
            let phi = exp_velocity(&v, cfg.ss_steps);
            let warped = warp_scalar(&m, &phi)?;
            let grad = central_gradient(&warped);
            let mut force = DisplacementField::zeros(dims, f.spacing);
            for i in 0..dims.len() {
                let diff = f.data[i] - warped.data[i];
                let g = [grad[0].data[i], grad[1].data[i], grad[2].data[i]];
                let g2 = g[0] * g[0] + g[1] * g[1] + g[2] * g[2];
                let denom = g2 + diff * diff / cfg.kappa;
                if denom > 1e-12 {
                    let s = diff / denom;
                    force.data[i] = [s * g[0], s * g[1], s * g[2]];
                }
            }
            if force.data.iter().any(|u| u.iter().any(|c| !c.is_finite())) {
                return Err(Error::Optimization("non-finite demons force".into()));
            }
            let force = gaussian_blur_field(&force, cfg.sigma_fluid);
            for (vv, fu) in v.data.iter_mut().zip(&force.data) {
                for c in 0..3 {
                    vv[c] += fu[c];
                }
            }
            // Diffusion-like regularization of the accumulated (stationary)
            // velocity field the exponential is taken of.
            v = gaussian_blur_field(&v, cfg.sigma_diffusion);
        }
        velocity = Some(v);
    }
    Ok(exp_velocity(&velocity.expect("at least one level"), cfg.ss_steps))
}
