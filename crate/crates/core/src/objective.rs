//! The tracking objective and its analytic gradient.
//!
//! For a backward field `phi` on the target frame's grid the total cost is
//!
//! ```text
//! total = L_sim + lambda * L_smooth + beta * L_shape
//! L_sim    = mean over all voxels of (I_t(p) - I_0(p + phi(p)))^2
//! L_smooth = sqrt(eps + sum over voxels, components and axes of
//!                 forward-difference(phi)^2)          (last index -> 0)
//! L_shape  = CE_sax + CE_2ch + CE_4ch, each CE a per-masked-voxel mean
//!            cross-entropy between the warped softened ED edge map
//!            (clamped to [delta, 1-delta]) and the view's target edge map;
//!            the SAX term averages the 9 per-slice CEs.
//! ```
//!
//! The gradient is assembled by explicit chain rule: the similarity and
//! shape terms go through the trilinear-warp adjoint (the derivative of the
//! interpolant at the displaced coordinate, zero where the coordinate is
//! clamped at the border), the smoothness term through the adjoint of the
//! forward-difference operator divided by the square-root envelope.
//!
//! All reductions run in a fixed voxel order so results are bit-reproducible.

use crate::error::{Error, Result};
use crate::grid::{sample_trilinear_with_grad, DisplacementField, ScalarVolume};
use crate::multiview::PlaneMask;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct LossWeights {
    /// Smoothness weight lambda.
    pub lambda: f64,
    /// Shape weight beta.
    pub beta: f64,
    /// Huber constant inside the square root.
    pub epsilon: f64,
    /// Probability clamp applied before the cross-entropy logarithms.
    pub delta: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            lambda: 0.005,
            beta: 5.0,
            epsilon: 0.01,
            delta: 1e-6,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if self.lambda < 0.0 || self.beta < 0.0 {
            return Err(Error::InvalidArgument(
                "loss weights must be non-negative".into(),
            ));
        }
        if !(self.epsilon > 0.0) {
            return Err(Error::InvalidArgument("epsilon must be positive".into()));
        }
        if !(self.delta > 0.0 && self.delta < 0.5) {
            return Err(Error::InvalidArgument(
                "delta must lie in (0, 0.5)".into(),
            ));
        }
        Ok(())
    }
}

/// One view plane: its rasterized mask and the target edge map.
///
/// `target_edge` is stored as a full 3D volume; the loss reads it only at
/// mask voxels. Keeping it unsliced matters for the pyramid: box-mean
/// downsampling a pre-sliced map would blend plane values with off-plane
/// zeros and skew coarse-level targets against the warped prediction.
#[derive(Debug, Clone)]
pub struct ViewTarget {
    pub mask: PlaneMask,
    pub target_edge: ScalarVolume,
}

/// Everything a pairwise tracking problem needs besides the field.
#[derive(Debug, Clone)]
pub struct ObjectiveContext {
    /// ED-frame SAX volume (warp source).
    pub source: ScalarVolume,
    /// Target-frame SAX volume.
    pub target: ScalarVolume,
    /// Softened 3D edge map of the ED myocardium (warped by the field).
    pub soft_edge: ScalarVolume,
    /// SAX slice views; the shape term averages their per-slice CEs.
    pub sax_views: Vec<ViewTarget>,
    /// Long-axis views (2CH/4CH), each contributing its own CE.
    pub lax_views: Vec<ViewTarget>,
}

impl ObjectiveContext {
    pub fn validate(&self) -> Result<()> {
        let dims = self.source.dims;
        if self.target.dims != dims || self.soft_edge.dims != dims {
            return Err(Error::DimensionMismatch(
                "context volumes must share dims".into(),
            ));
        }
        for v in self.sax_views.iter().chain(&self.lax_views) {
            if v.mask.dims != dims || v.target_edge.dims != dims {
                return Err(Error::DimensionMismatch(
                    "view mask/edge dims must match context".into(),
                ));
            }
            if v.target_edge.data.iter().any(|&e| !(0.0..=1.0).contains(&e)) {
                return Err(Error::InvalidArgument(
                    "target edge maps must lie in [0,1]".into(),
                ));
            }
        }
        if self.soft_edge.data.iter().any(|&e| !(0.0..=1.0).contains(&e)) {
            return Err(Error::InvalidArgument(
                "softened edge map must lie in [0,1]".into(),
            ));
        }
        Ok(())
    }

    /// True when a whole anatomical view is absent or empty; the shape term
    /// then silently skips it and callers may want to warn.
    pub fn missing_views(&self) -> bool {
        self.sax_views.is_empty()
            || self.sax_views.iter().any(|v| v.mask.count() == 0)
            || self.lax_views.len() < 2
    }

    /// Downsampled context for one pyramid level: images and edges by
    /// box-mean, masks by the any-voxel rule.
    pub fn downsample(&self, factor: usize) -> ObjectiveContext {
        if factor <= 1 {
            return self.clone();
        }
        let down_view = |v: &ViewTarget| {
            let (data, dims) =
                crate::filter::downsample_mask_any(&v.mask.data, v.mask.dims, factor);
            ViewTarget {
                mask: PlaneMask { dims, data },
                target_edge: crate::filter::downsample_box(&v.target_edge, factor),
            }
        };
        ObjectiveContext {
            source: crate::filter::downsample_box(&self.source, factor),
            target: crate::filter::downsample_box(&self.target, factor),
            soft_edge: crate::filter::downsample_box(&self.soft_edge, factor),
            sax_views: self.sax_views.iter().map(down_view).collect(),
            lax_views: self.lax_views.iter().map(down_view).collect(),
        }
    }
}

/// Per-term loss values; `total` is always the exact linear combination.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossBreakdown {
    pub sim: f64,
    pub smooth: f64,
    pub shape: f64,
    pub total: f64,
}

fn displaced(p: [usize; 3], u: [f64; 3]) -> [f64; 3] {
    [
        p[0] as f64 + u[0],
        p[1] as f64 + u[1],
        p[2] as f64 + u[2],
    ]
}

/// Mean squared error between the target and the warped source.
pub fn loss_sim(ctx: &ObjectiveContext, field: &DisplacementField) -> Result<f64> {
    if field.dims != ctx.source.dims {
        return Err(Error::DimensionMismatch("loss_sim field dims".into()));
    }
    let d = ctx.source.dims;
    let mut acc = 0.0;
    let mut i = 0;
    for z in 0..d.d {
        for y in 0..d.h {
            for x in 0..d.w {
                let p = displaced([x, y, z], field.data[i]);
                let (w, _) = sample_trilinear_with_grad(&ctx.source, p);
                let r = ctx.target.data[i] - w;
                acc += r * r;
                i += 1;
            }
        }
    }
    Ok(acc / d.len() as f64)
}

/// Square root of (epsilon + sum of squared forward differences of all field
/// components along all axes); the difference at the last index of an axis
/// is zero.
pub fn loss_smooth(field: &DisplacementField, epsilon: f64) -> f64 {
    let d = field.dims;
    let mut acc = 0.0;
    for z in 0..d.d {
        for y in 0..d.h {
            for x in 0..d.w {
                let i = d.index(x, y, z);
                let v = field.data[i];
                if x + 1 < d.w {
                    let n = field.data[d.index(x + 1, y, z)];
                    for c in 0..3 {
                        let diff = n[c] - v[c];
                        acc += diff * diff;
                    }
                }
                if y + 1 < d.h {
                    let n = field.data[d.index(x, y + 1, z)];
                    for c in 0..3 {
                        let diff = n[c] - v[c];
                        acc += diff * diff;
                    }
                }
                if z + 1 < d.d {
                    let n = field.data[d.index(x, y, z + 1)];
                    for c in 0..3 {
                        let diff = n[c] - v[c];
                        acc += diff * diff;
                    }
                }
            }
        }
    }
    (epsilon + acc).sqrt()
}

fn view_cross_entropy(
    ctx: &ObjectiveContext,
    field: &DisplacementField,
    view: &ViewTarget,
    delta: f64,
) -> f64 {
    let d = ctx.source.dims;
    let count = view.mask.count();
    if count == 0 {
        return 0.0;
    }
    let mut acc = 0.0;
    for z in 0..d.d {
        for y in 0..d.h {
            for x in 0..d.w {
                let i = d.index(x, y, z);
                if !view.mask.data[i] {
                    continue;
                }
                let p = displaced([x, y, z], field.data[i]);
                let (raw, _) = sample_trilinear_with_grad(&ctx.soft_edge, p);
                let c = raw.clamp(delta, 1.0 - delta);
                let e = view.target_edge.data[i];
                acc -= e * c.ln() + (1.0 - e) * (1.0 - c).ln();
            }
        }
    }
    acc / count as f64
}

/// Multi-view cross-entropy between the warped softened ED edge map and the
/// per-view target edge maps. Returns the loss and a flag set when some view
/// was empty and contributed zero.
pub fn loss_shape(ctx: &ObjectiveContext, field: &DisplacementField, delta: f64) -> Result<(f64, bool)> {
    if field.dims != ctx.source.dims {
        return Err(Error::DimensionMismatch("loss_shape field dims".into()));
    }
    let mut missing = false;
    let mut total = 0.0;
    if ctx.sax_views.is_empty() {
        missing = true;
    } else {
        let mut sax_acc = 0.0;
        for v in &ctx.sax_views {
            if v.mask.count() == 0 {
                missing = true;
                continue;
            }
            sax_acc += view_cross_entropy(ctx, field, v, delta);
        }
        total += sax_acc / ctx.sax_views.len() as f64;
    }
    for v in &ctx.lax_views {
        if v.mask.count() == 0 {
            missing = true;
            continue;
        }
        total += view_cross_entropy(ctx, field, v, delta);
    }
    Ok((total, missing))
}

/// Assemble the three terms; summation order is fixed, so results are
/// bit-stable across runs.
pub fn total_loss(
    ctx: &ObjectiveContext,
    field: &DisplacementField,
    weights: &LossWeights,
) -> Result<LossBreakdown> {
    weights.validate()?;
    let sim = loss_sim(ctx, field)?;
    let smooth = loss_smooth(field, weights.epsilon);
    let (shape, _) = loss_shape(ctx, field, weights.delta)?;
    Ok(LossBreakdown {
        sim,
        smooth,
        shape,
        total: sim + weights.lambda * smooth + weights.beta * shape,
    })
}

/// Analytic gradient of the total loss with respect to every field
/// component, plus the loss breakdown of the evaluated field.
pub fn total_loss_gradient(
    ctx: &ObjectiveContext,
    field: &DisplacementField,
    weights: &LossWeights,
) -> Result<(LossBreakdown, DisplacementField)> {
    weights.validate()?;
    if field.dims != ctx.source.dims {
        return Err(Error::DimensionMismatch(
            "total_loss_gradient field dims".into(),
        ));
    }
    let d = field.dims;
    let n = d.len() as f64;
    let mut grad = DisplacementField::zeros(d, field.spacing);

    // Similarity: d/dphi (1/N) sum (I_t - W)^2 = (2/N)(W - I_t) * dW/dphi.
    let mut sim = 0.0;
    {
        let mut i = 0;
        for z in 0..d.d {
            for y in 0..d.h {
                for x in 0..d.w {
                    let p = displaced([x, y, z], field.data[i]);
                    let (w, g) = sample_trilinear_with_grad(&ctx.source, p);
                    let r = w - ctx.target.data[i];
                    sim += r * r;
                    let scale = 2.0 / n * r;
                    grad.data[i][0] += scale * g[0];
                    grad.data[i][1] += scale * g[1];
                    grad.data[i][2] += scale * g[2];
                    i += 1;
                }
            }
        }
        sim /= n;
    }

    // Smoothness: dL/dphi = (1/(2L)) dS/dphi, with dS through the
    // forward-difference adjoint: each difference d = phi(q+e) - phi(q)
    // contributes -2d at q and +2d at q+e.
    let smooth = loss_smooth(field, weights.epsilon);
    {
        let envelope = weights.lambda / (2.0 * smooth);
        for z in 0..d.d {
            for y in 0..d.h {
                for x in 0..d.w {
                    let i = d.index(x, y, z);
                    let v = field.data[i];
                    let mut neighbors = [(0usize, false); 3];
                    neighbors[0] = (if x + 1 < d.w { d.index(x + 1, y, z) } else { 0 }, x + 1 < d.w);
                    neighbors[1] = (if y + 1 < d.h { d.index(x, y + 1, z) } else { 0 }, y + 1 < d.h);
                    neighbors[2] = (if z + 1 < d.d { d.index(x, y, z + 1) } else { 0 }, z + 1 < d.d);
                    for (j, ok) in neighbors {
                        if !ok {
                            continue;
                        }
                        for c in 0..3 {
                            let diff = field.data[j][c] - v[c];
                            grad.data[i][c] -= envelope * 2.0 * diff;
                            grad.data[j][c] += envelope * 2.0 * diff;
                        }
                    }
                }
            }
        }
    }

    // Shape: per masked voxel, dCE/dc * dc/dvalue * d(warped soft edge)/dphi.
    let mut shape = 0.0;
    {
        let delta = weights.delta;
        let sax_count = ctx.sax_views.len().max(1) as f64;
        let mut sax_acc = 0.0;
        for (vi, view) in ctx.sax_views.iter().chain(ctx.lax_views.iter()).enumerate() {
            let is_sax = vi < ctx.sax_views.len();
            let count = view.mask.count();
            if count == 0 {
                continue;
            }
            let norm = if is_sax {
                1.0 / (sax_count * count as f64)
            } else {
                1.0 / count as f64
            };
            let mut acc = 0.0;
            for z in 0..d.d {
                for y in 0..d.h {
                    for x in 0..d.w {
                        let i = d.index(x, y, z);
                        if !view.mask.data[i] {
                            continue;
                        }
                        let p = displaced([x, y, z], field.data[i]);
                        let (raw, g) = sample_trilinear_with_grad(&ctx.soft_edge, p);
                        let c = raw.clamp(delta, 1.0 - delta);
                        let e = view.target_edge.data[i];
                        acc -= e * c.ln() + (1.0 - e) * (1.0 - c).ln();
                        // The clamp kills the derivative outside (delta, 1-delta).
                        if raw > delta && raw < 1.0 - delta {
                            let dce = -(e / c) + (1.0 - e) / (1.0 - c);
                            let scale = weights.beta * norm * dce;
                            grad.data[i][0] += scale * g[0];
                            grad.data[i][1] += scale * g[1];
                            grad.data[i][2] += scale * g[2];
                        }
                    }
                }
            }
            if is_sax {
                sax_acc += acc / count as f64;
            } else {
                shape += acc / count as f64;
            }
        }
        if !ctx.sax_views.is_empty() {
            shape += sax_acc / sax_count;
        }
    }

    let breakdown = LossBreakdown {
        sim,
        smooth,
        shape,
        total: sim + weights.lambda * smooth + weights.beta * shape,
    };
    Ok((breakdown, grad))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::{GridDims, Spacing};
    use crate::rng::Rng;

    fn dims(n: usize) -> GridDims {
        GridDims::new(n, n, n).unwrap()
    }

    fn sp() -> Spacing {
        Spacing::new(1.0, 1.0, 1.0).unwrap()
    }

    fn full_mask(d: GridDims) -> PlaneMask {
        PlaneMask {
            dims: d,
            data: vec![true; d.len()],
        }
    }

    fn slab_mask(d: GridDims, z: usize) -> PlaneMask {
        let mut data = vec![false; d.len()];
        for y in 0..d.h {
            for x in 0..d.w {
                data[d.index(x, y, z)] = true;
            }
        }
        PlaneMask { dims: d, data }
    }

    /// Random context whose soft edge lives in [0.1, 0.9] so the probability
    /// clamp never engages; gradient checks then probe a smooth function.
    pub(crate) fn random_context(n: usize, rng: &mut Rng) -> ObjectiveContext {
        let d = dims(n);
        let vol = |rng: &mut Rng| {
            ScalarVolume::new(d, sp(), (0..d.len()).map(|_| rng.uniform()).collect()).unwrap()
        };
        let soft = ScalarVolume::new(
            d,
            sp(),
            (0..d.len()).map(|_| rng.uniform_range(0.1, 0.9)).collect(),
        )
        .unwrap();
        let view = |rng: &mut Rng, mask: PlaneMask| ViewTarget {
            target_edge: ScalarVolume::new(
                d,
                sp(),
                (0..d.len())
                    .map(|_| if rng.uniform() < 0.3 { 1.0 } else { 0.0 })
                    .collect(),
            )
            .unwrap(),
            mask,
        };
        ObjectiveContext {
            source: vol(rng),
            target: vol(rng),
            soft_edge: soft,
            sax_views: (0..2).map(|z| view(rng, slab_mask(d, z))).collect(),
            lax_views: vec![view(rng, slab_mask(d, n - 1))],
        }
    }

    /// Field whose displaced coordinates stay away from cell faces and the
    /// probability clamp, keeping the objective differentiable at the probe.
    pub(crate) fn random_smooth_field(d: GridDims, rng: &mut Rng) -> DisplacementField {
        let data = (0..d.len())
            .map(|_| {
                let mut v = [0.0; 3];
                for c in v.iter_mut() {
                    let mag = rng.uniform_range(0.08, 0.42);
                    *c = if rng.uniform() < 0.5 { -mag } else { mag };
                }
                v
            })
            .collect();
        DisplacementField::new(d, sp(), data).unwrap()
    }

    #[test]
    fn sim_zero_for_identical_and_constant_offset() {
        let mut rng = Rng::seed_from_u64(1);
        let mut ctx = random_context(4, &mut rng);
        ctx.target = ctx.source.clone();
        let zero = DisplacementField::zeros(ctx.source.dims, sp());
        assert_eq!(loss_sim(&ctx, &zero).unwrap(), 0.0);

        // Constant residual c gives exactly c^2.
        let c = 0.37;
        for (t, s) in ctx.target.data.iter_mut().zip(&ctx.source.data) {
            *t = s + c;
        }
        let got = loss_sim(&ctx, &zero).unwrap();
        assert!((got - c * c).abs() < 1e-12);
    }

    #[test]
    fn sim_matches_brute_force_oracle() {
        let mut rng = Rng::seed_from_u64(2);
        let ctx = random_context(6, &mut rng);
        let field = random_smooth_field(ctx.source.dims, &mut rng);
        let got = loss_sim(&ctx, &field).unwrap();
        // Independent warp + per-voxel summation.
        let warped = crate::grid::warp_scalar(&ctx.source, &field).unwrap();
        let mut acc = 0.0;
        for i in 0..warped.data.len() {
            let r = ctx.target.data[i] - warped.data[i];
            acc += r * r;
        }
        let want = acc / warped.data.len() as f64;
        assert!((got - want).abs() < 1e-10, "{got} vs {want}");
    }

    #[test]
    fn smooth_closed_forms() {
        let d = dims(5);
        let zero = DisplacementField::zeros(d, sp());
        assert_eq!(loss_smooth(&zero, 0.01), 0.1);

        let constant =
            DisplacementField::new(d, sp(), vec![[1.0, -2.0, 0.5]; d.len()]).unwrap();
        assert_eq!(loss_smooth(&constant, 0.01), 0.1);

        // u_x = x: (n-1)*n^2 unit forward differences.
        let n = 5usize;
        let mut ramp = DisplacementField::zeros(d, sp());
        for z in 0..n {
            for y in 0..n {
                for x in 0..n {
                    ramp.data[d.index(x, y, z)] = [x as f64, 0.0, 0.0];
                }
            }
        }
        let want = (0.01 + (n * n * (n - 1)) as f64).sqrt();
        assert!((loss_smooth(&ramp, 0.01) - want).abs() < 1e-12);
    }

    #[test]
    fn shape_uniform_half_is_ln2_per_view() {
        let mut rng = Rng::seed_from_u64(3);
        let mut ctx = random_context(4, &mut rng);
        let d = ctx.source.dims;
        // Soft edge uniformly 0.5: CE = ln 2 per view regardless of targets.
        ctx.soft_edge = ScalarVolume::new(d, sp(), vec![0.5; d.len()]).unwrap();
        let zero = DisplacementField::zeros(d, sp());
        let (shape, missing) = loss_shape(&ctx, &zero, 1e-6).unwrap();
        assert!(!missing);
        // 2 SAX slices average to ln2, plus one LAX view at ln2.
        let ln2 = std::f64::consts::LN_2;
        assert!((shape - 2.0 * ln2).abs() < 1e-9, "{shape}");
    }

    #[test]
    fn shape_perfect_prediction_is_near_zero() {
        let d = dims(4);
        let mut rng = Rng::seed_from_u64(4);
        let mut ctx = random_context(4, &mut rng);
        // Make prediction equal the binary target everywhere on the masks.
        let target = ScalarVolume::new(
            d,
            sp(),
            (0..d.len())
                .map(|_| if rng.uniform() < 0.5 { 1.0 } else { 0.0 })
                .collect(),
        )
        .unwrap();
        ctx.soft_edge = target.clone();
        for v in ctx.sax_views.iter_mut().chain(ctx.lax_views.iter_mut()) {
            v.target_edge = target.clone();
        }
        let zero = DisplacementField::zeros(d, sp());
        let delta = 1e-6;
        let (shape, _) = loss_shape(&ctx, &zero, delta).unwrap();
        // Perfect up to the clamp: per view at most -ln(1-delta) ~ delta.
        let views = 2.0;
        assert!(shape >= 0.0 && shape <= views * 2.0 * delta, "{shape}");
    }

    #[test]
    fn shape_matches_masked_oracle() {
        let mut rng = Rng::seed_from_u64(5);
        let ctx = random_context(8, &mut rng);
        let field = random_smooth_field(ctx.source.dims, &mut rng);
        let delta = 1e-6;
        let (got, _) = loss_shape(&ctx, &field, delta).unwrap();

        // Brute force: warp the whole soft edge volume, then masked sums.
        let warped = crate::grid::warp_scalar(&ctx.soft_edge, &field).unwrap();
        let ce = |view: &ViewTarget| {
            let mut acc = 0.0;
            let mut count = 0usize;
            for (i, &m) in view.mask.data.iter().enumerate() {
                if !m {
                    continue;
                }
                let c = warped.data[i].clamp(delta, 1.0 - delta);
                let e = view.target_edge.data[i];
                acc -= e * c.ln() + (1.0 - e) * (1.0 - c).ln();
                count += 1;
            }
            acc / count as f64
        };
        let mut want = 0.0;
        for v in &ctx.sax_views {
            want += ce(v) / ctx.sax_views.len() as f64;
        }
        for v in &ctx.lax_views {
            want += ce(v);
        }
        assert!((got - want).abs() < 1e-10, "{got} vs {want}");
    }

    #[test]
    fn empty_view_contributes_zero_with_flag() {
        let mut rng = Rng::seed_from_u64(6);
        let mut ctx = random_context(4, &mut rng);
        let d = ctx.source.dims;
        ctx.lax_views[0].mask = PlaneMask {
            dims: d,
            data: vec![false; d.len()],
        };
        let zero = DisplacementField::zeros(d, sp());
        let (with_empty, missing) = loss_shape(&ctx, &zero, 1e-6).unwrap();
        assert!(missing);
        ctx.lax_views.clear();
        let (without, _) = loss_shape(&ctx, &zero, 1e-6).unwrap();
        assert_eq!(with_empty, without);
    }

    #[test]
    fn breakdown_identity_and_weight_limits() {
        let mut rng = Rng::seed_from_u64(7);
        let ctx = random_context(5, &mut rng);
        let field = random_smooth_field(ctx.source.dims, &mut rng);
        let weights = LossWeights::default();
        let b = total_loss(&ctx, &field, &weights).unwrap();
        let expect = b.sim + weights.lambda * b.smooth + weights.beta * b.shape;
        assert!((b.total - expect).abs() <= 1e-12 * expect.abs().max(1.0));
        assert!(b.sim >= 0.0);
        assert!(b.smooth >= weights.epsilon.sqrt());
        assert!(b.shape >= 0.0);

        let only_sim = LossWeights {
            lambda: 0.0,
            beta: 0.0,
            ..weights
        };
        let b2 = total_loss(&ctx, &field, &only_sim).unwrap();
        assert_eq!(b2.total, b2.sim);
    }

    #[test]
    fn zero_field_identical_frames_flat_edges() {
        let mut rng = Rng::seed_from_u64(8);
        let mut ctx = random_context(4, &mut rng);
        ctx.target = ctx.source.clone();
        let d = ctx.source.dims;
        let zero = DisplacementField::zeros(d, sp());
        let weights = LossWeights::default();
        let (b, g) = total_loss_gradient(&ctx, &zero, &weights).unwrap();
        assert_eq!(b.sim, 0.0);
        // Smoothness is stationary at a constant field; shape gradient may be
        // nonzero, but the similarity part contributes exactly nothing. Check
        // via beta = 0.
        let no_shape = LossWeights {
            beta: 0.0,
            ..weights
        };
        let (b2, g2) = total_loss_gradient(&ctx, &zero, &no_shape).unwrap();
        assert_eq!(b2.sim, 0.0);
        assert!(g2.data.iter().all(|v| v.iter().all(|&c| c == 0.0)));
        let _ = (b, g);
    }

    #[test]
    fn gradient_of_smooth_term_vanishes_at_constant_field() {
        let mut rng = Rng::seed_from_u64(9);
        let ctx = random_context(4, &mut rng);
        let d = ctx.source.dims;
        let constant =
            DisplacementField::new(d, sp(), vec![[0.2, -0.1, 0.3]; d.len()]).unwrap();
        let weights = LossWeights {
            lambda: 1.0,
            beta: 0.0,
            ..LossWeights::default()
        };
        // Isolate smoothness by comparing against the lambda = 0 gradient.
        let (_, g_full) = total_loss_gradient(&ctx, &constant, &weights).unwrap();
        let (_, g_sim) = total_loss_gradient(
            &ctx,
            &constant,
            &LossWeights {
                lambda: 0.0,
                beta: 0.0,
                ..LossWeights::default()
            },
        )
        .unwrap();
        for (a, b) in g_full.data.iter().zip(&g_sim.data) {
            for c in 0..3 {
                assert!((a[c] - b[c]).abs() < 1e-15);
            }
        }
    }

    /// Central finite differences over every component.
    pub(crate) fn finite_difference_gradient(
        ctx: &ObjectiveContext,
        field: &DisplacementField,
        weights: &LossWeights,
        h: f64,
    ) -> DisplacementField {
        let mut out = DisplacementField::zeros(field.dims, field.spacing);
        let mut probe = field.clone();
        for i in 0..field.data.len() {
            for c in 0..3 {
                let orig = field.data[i][c];
                probe.data[i][c] = orig + h;
                let plus = total_loss(ctx, &probe, weights).unwrap().total;
                probe.data[i][c] = orig - h;
                let minus = total_loss(ctx, &probe, weights).unwrap().total;
                probe.data[i][c] = orig;
                out.data[i][c] = (plus - minus) / (2.0 * h);
            }
        }
        out
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let weights = LossWeights::default();
        for seed in 0..3u64 {
            let mut rng = Rng::seed_from_u64(100 + seed);
            let ctx = random_context(5, &mut rng);
            let field = random_smooth_field(ctx.source.dims, &mut rng);
            let (_, analytic) = total_loss_gradient(&ctx, &field, &weights).unwrap();
            let numeric = finite_difference_gradient(&ctx, &field, &weights, 1e-3);
            let mut worst = 0.0f64;
            for i in 0..field.data.len() {
                for c in 0..3 {
                    let a = analytic.data[i][c];
                    let f = numeric.data[i][c];
                    if a.abs() > 1e-8 {
                        worst = worst.max((a - f).abs() / a.abs());
                    }
                }
            }
            assert!(worst < 1e-4, "seed {seed}: max rel err {worst}");
        }
    }

    #[test]
    fn descent_step_does_not_increase_total() {
        let weights = LossWeights::default();
        for seed in 0..10u64 {
            let mut rng = Rng::seed_from_u64(200 + seed);
            let ctx = random_context(5, &mut rng);
            let field = random_smooth_field(ctx.source.dims, &mut rng);
            let (before, grad) = total_loss_gradient(&ctx, &field, &weights).unwrap();
            let step = 1e-6;
            let mut next = field.clone();
            for (v, g) in next.data.iter_mut().zip(&grad.data) {
                for c in 0..3 {
                    v[c] -= step * g[c];
                }
            }
            let after = total_loss(&ctx, &next, &weights).unwrap();
            assert!(
                after.total <= before.total + 1e-12,
                "seed {seed}: {} -> {}",
                before.total,
                after.total
            );
        }
    }
}
