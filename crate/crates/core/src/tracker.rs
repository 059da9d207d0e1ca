//! Multi-resolution first-order tracker.
//!
//! Fields are parameterized directly per voxel (no model in between), so
//! every gradient the optimizer sees is the objective's exact analytic
//! gradient. A coarse-to-fine pyramid handles the large displacements:
//! images and edges are box-mean downsampled, masks use the any-voxel rule,
//! and fields move between levels by trilinear upsampling with rescaled
//! components. Each level runs an adaptive-moment (Adam) update with a step
//! size in voxels, halved per finer level.
//!
//! Everything is deterministic: no randomness, fixed reduction order, and a
//! best-field guard at the finest level so the returned field never scores
//! worse than its initialization.

use crate::error::{Error, Result};
use crate::filter::{downsample_field, upsample_field};
use crate::grid::DisplacementField;
use crate::objective::{total_loss, total_loss_gradient, LossBreakdown, LossWeights, ObjectiveContext};
use crate::phantom::PhantomStudy;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrackerConfig {
    pub weights: LossWeights,
    /// Downsampling factor per pyramid level, coarsest first; the last
    /// entry is normally 1 (full resolution).
    pub level_factors: Vec<usize>,
    /// Adam iterations per level, same length as `level_factors`.
    pub level_iters: Vec<usize>,
    /// Step size in voxels at the coarsest level; halved per finer level.
    pub step_voxels: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    /// Relative denominator floor: each component's RMS-gradient denominator
    /// is floored at this multiple of the field-wide RMS gradient. Without
    /// it the sign-normalized update takes full-size steps on noise-scale
    /// gradients and the background drifts to fit image noise.
    pub adam_rel_floor: f64,
    /// Stop a level early when the relative total-loss decrease over
    /// `converge_window` iterations falls below this.
    pub converge_rel: f64,
    pub converge_window: usize,
    /// Initialize each frame from the previous frame's field instead of zero.
    pub warm_start: bool,
    /// Gaussian sigma (voxels) for softening the ED edge map.
    pub edge_softening_sigma: f64,
}

impl Default for TrackerConfig {
    fn default() -> Self {
        TrackerConfig {
            weights: LossWeights::default(),
            level_factors: vec![4, 2, 1],
            level_iters: vec![100, 100, 150],
            step_voxels: 0.25,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            adam_rel_floor: 1.0,
            converge_rel: 1e-5,
            converge_window: 10,
            warm_start: false,
            edge_softening_sigma: 1.0,
        }
    }
}

impl TrackerConfig {
    pub fn validate(&self) -> Result<()> {
        self.weights.validate()?;
        if self.level_factors.is_empty() || self.level_factors.len() != self.level_iters.len() {
            return Err(Error::InvalidArgument(
                "level_factors and level_iters must be non-empty and equal length".into(),
            ));
        }
        if self.level_factors.iter().any(|&f| f == 0) || self.level_iters.iter().any(|&i| i == 0) {
            return Err(Error::InvalidArgument(
                "pyramid factors and iteration counts must be >= 1".into(),
            ));
        }
        if !(self.step_voxels > 0.0) {
            return Err(Error::InvalidArgument("step_voxels must be positive".into()));
        }
        if self.adam_rel_floor < 0.0 {
            return Err(Error::InvalidArgument(
                "adam_rel_floor must be >= 0".into(),
            ));
        }
        if self.edge_softening_sigma < 0.0 {
            return Err(Error::InvalidArgument(
                "edge_softening_sigma must be >= 0".into(),
            ));
        }
        Ok(())
    }
}

/// One objective evaluation during optimization.
#[derive(Debug, Clone, Copy)]
pub struct TraceRow {
    pub level: usize,
    pub iter: usize,
    pub sim: f64,
    pub smooth: f64,
    pub shape: f64,
    pub total: f64,
}

/// Full-sequence tracking output. `fields[0]` is always the zero field.
#[derive(Debug, Clone)]
pub struct TrackingResult {
    pub fields: Vec<DisplacementField>,
    pub traces: Vec<Vec<TraceRow>>,
    pub iterations: Vec<usize>,
    pub wall_secs: Vec<f64>,
    /// Per-frame failure messages; `None` for frames that tracked fine.
    pub failures: Vec<Option<String>>,
}

fn check_finite(b: &LossBreakdown) -> Result<()> {
    if !b.total.is_finite() {
        return Err(Error::Optimization(format!(
            "non-finite loss: sim={} smooth={} shape={}",
            b.sim, b.smooth, b.shape
        )));
    }
    Ok(())
}

/// Minimize the objective over the pyramid schedule for one frame pair.
/// `init` optionally warm-starts the coarsest level (the field is
/// downsampled internally).
pub fn track_pair_from(
    ctx: &ObjectiveContext,
    cfg: &TrackerConfig,
    init: Option<&DisplacementField>,
) -> Result<(DisplacementField, Vec<TraceRow>)> {
    cfg.validate()?;
    ctx.validate()?;
    let levels = cfg.level_factors.len();
    let mut trace = Vec::new();
    let mut field: Option<DisplacementField> = None;

    for level in 0..levels {
        let factor = cfg.level_factors[level];
        let lctx = ctx.downsample(factor);
        let dims = lctx.source.dims;
        let spacing = lctx.source.spacing;
        let mut phi = match &field {
            None => match init {
                Some(f) => downsample_field(f, factor),
                None => DisplacementField::zeros(dims, spacing),
            },
            Some(prev) => upsample_field(prev, dims, spacing)?,
        };

        let eta = cfg.step_voxels / (1u64 << level) as f64;
        let n = phi.data.len();
        let mut m = vec![[0.0f64; 3]; n];
        let mut v = vec![[0.0f64; 3]; n];
        let is_finest = level == levels - 1;
        let mut best: Option<(f64, DisplacementField)> = None;
        let mut recent: Vec<f64> = Vec::new();
        let mut steps = 0usize;

        for iter in 0..cfg.level_iters[level] {
            let (breakdown, grad) = total_loss_gradient(&lctx, &phi, &cfg.weights)?;
            check_finite(&breakdown)?;
            trace.push(TraceRow {
                level,
                iter,
                sim: breakdown.sim,
                smooth: breakdown.smooth,
                shape: breakdown.shape,
                total: breakdown.total,
            });
            if is_finest && best.as_ref().map_or(true, |(b, _)| breakdown.total < *b) {
                best = Some((breakdown.total, phi.clone()));
            }
            recent.push(breakdown.total);
            if recent.len() > cfg.converge_window {
                let prev = recent[recent.len() - 1 - cfg.converge_window];
                let rel = (prev - breakdown.total) / prev.abs().max(1e-30);
                if rel < cfg.converge_rel {
                    break;
                }
            }

            steps += 1;
            let t = steps as f64;
            let bc1 = 1.0 - cfg.beta1.powf(t);
            let bc2 = 1.0 - cfg.beta2.powf(t);
            let mut vhat_sum = 0.0;
            for i in 0..n {
                for c in 0..3 {
                    let g = grad.data[i][c];
                    m[i][c] = cfg.beta1 * m[i][c] + (1.0 - cfg.beta1) * g;
                    v[i][c] = cfg.beta2 * v[i][c] + (1.0 - cfg.beta2) * g * g;
                    vhat_sum += v[i][c] / bc2;
                }
            }
            let rms = (vhat_sum / (3.0 * n as f64)).sqrt();
            let floor = cfg.adam_rel_floor * rms + cfg.adam_eps;
            for i in 0..n {
                for c in 0..3 {
                    let mhat = m[i][c] / bc1;
                    let vhat = v[i][c] / bc2;
                    phi.data[i][c] -= eta * mhat / (vhat.sqrt() + floor);
                }
            }
        }

        if is_finest {
            // Score the final iterate too, then keep the best seen.
            let final_loss = total_loss(&lctx, &phi, &cfg.weights)?;
            check_finite(&final_loss)?;
            field = match best {
                Some((b, best_phi)) if final_loss.total > b => Some(best_phi),
                _ => Some(phi),
            };
        } else {
            field = Some(phi);
        }
    }
    Ok((field.expect("at least one pyramid level"), trace))
}

pub fn track_pair(
    ctx: &ObjectiveContext,
    cfg: &TrackerConfig,
) -> Result<(DisplacementField, Vec<TraceRow>)> {
    track_pair_from(ctx, cfg, None)
}

/// Which anatomical views feed the shape term.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ViewSelection {
    SaxAndLax,
    SaxOnly,
}

/// Assemble the pairwise objective context for frame `t` of a study:
/// source and target images, the softened ED edge map, and per-plane target
/// edge maps behind their masks.
///
/// The target edge maps are softened with the same kernel as the warped ED
/// map. With a direct per-voxel field and binary targets the cross-entropy
/// optimum would lie at fields that sharpen the warped soft map rather than
/// align it; softening both sides puts the optimum at alignment, where the
/// warped map reproduces the target map.
pub fn build_context(
    study: &PhantomStudy,
    t: usize,
    cfg: &TrackerConfig,
    views: ViewSelection,
) -> Result<ObjectiveContext> {
    if t >= study.frames() {
        return Err(Error::InvalidArgument(format!(
            "frame {t} out of range (study has {})",
            study.frames()
        )));
    }
    let soft_edge = crate::multiview::soften_edges(&study.edges[0], cfg.edge_softening_sigma)?;
    let soft_target = crate::multiview::soften_edges(&study.edges[t], cfg.edge_softening_sigma)?;
    let mut sax_views = Vec::with_capacity(study.planes.sax.len());
    for (spec, mask) in &study.planes.sax {
        // Targets stay full 3D volumes (only mask voxels are read); SAX
        // slices carry their acquisition's misalignment shift.
        sax_views.push(crate::objective::ViewTarget {
            target_edge: study.shifted_for_plane(&soft_target, spec),
            mask: mask.clone(),
        });
    }
    let mut lax_views = Vec::new();
    if views == ViewSelection::SaxAndLax {
        for entry in [&study.planes.two_ch, &study.planes.four_ch].into_iter().flatten() {
            let (spec, mask) = entry;
            lax_views.push(crate::objective::ViewTarget {
                target_edge: soft_target.clone(),
                mask: mask.clone(),
            });
        }
    }
    Ok(ObjectiveContext {
        source: study.images[0].clone(),
        target: study.images[t].clone(),
        soft_edge,
        sax_views,
        lax_views,
    })
}

/// Track every frame of a study against the ED frame (frame 0 is the
/// reference and gets the zero field). Per-frame failures are recorded and
/// the sequence continues.
pub fn track_sequence(study: &PhantomStudy, cfg: &TrackerConfig) -> Result<TrackingResult> {
    cfg.validate()?;
    let frames = study.frames();
    if frames < 2 {
        return Err(Error::InvalidArgument("study needs at least 2 frames".into()));
    }
    let mut fields = Vec::with_capacity(frames);
    let mut traces = Vec::with_capacity(frames);
    let mut iterations = Vec::with_capacity(frames);
    let mut wall_secs = Vec::with_capacity(frames);
    let mut failures = Vec::with_capacity(frames);

    fields.push(DisplacementField::zeros(study.dims, study.spacing));
    traces.push(Vec::new());
    iterations.push(0);
    wall_secs.push(0.0);
    failures.push(None);

    for t in 1..frames {
        let started = std::time::Instant::now();
        let ctx = build_context(study, t, cfg, ViewSelection::SaxAndLax)?;
        let init = if cfg.warm_start && t > 1 {
            Some(&fields[t - 1])
        } else {
            None
        };
        match track_pair_from(&ctx, cfg, init) {
            Ok((field, trace)) => {
                fields.push(field);
                iterations.push(trace.len());
                traces.push(trace);
                failures.push(None);
            }
            Err(e) => {
                fields.push(DisplacementField::zeros(study.dims, study.spacing));
                iterations.push(0);
                traces.push(Vec::new());
                failures.push(Some(e.to_string()));
            }
        }
        wall_secs.push(started.elapsed().as_secs_f64());
    }
    Ok(TrackingResult {
        fields,
        traces,
        iterations,
        wall_secs,
        failures,
    })
}

/// ES-frame estimate: the frame with the least intensity similarity to the
/// ED frame (largest MSE). Ties resolve to the smallest index.
#[derive(Debug, Clone, Copy)]
pub struct EsEstimate {
    pub index: usize,
    pub max_mse: f64,
    /// Set when even the most dissimilar frame differs from ED by less than
    /// twice the noise variance, i.e. there is no real motion to find.
    pub low_confidence: bool,
}

pub fn find_es_frame(study: &PhantomStudy) -> Result<EsEstimate> {
    let frames = study.frames();
    if frames < 2 {
        return Err(Error::InvalidArgument("study needs at least 2 frames".into()));
    }
    let ed = &study.images[0];
    let mut best_t = 1usize;
    let mut best_mse = f64::NEG_INFINITY;
    for t in 1..frames {
        let img = &study.images[t];
        let mut acc = 0.0;
        for (a, b) in ed.data.iter().zip(&img.data) {
            let r = a - b;
            acc += r * r;
        }
        let mse = acc / ed.data.len() as f64;
        if mse > best_mse {
            best_mse = mse;
            best_t = t;
        }
    }
    let sigma = study.config.noise_sigma;
    Ok(EsEstimate {
        index: best_t,
        max_mse: best_mse,
        low_confidence: best_mse < 2.0 * sigma * sigma,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::{warp_labels, LABEL_MYOCARDIUM};
    use crate::metrics::{dice, end_point_error};
    use crate::phantom::{generate, PhantomConfig};

    fn quick_cfg() -> TrackerConfig {
        TrackerConfig {
            level_iters: vec![60, 60, 80],
            ..TrackerConfig::default()
        }
    }

    fn small_phantom(seed: u64) -> PhantomConfig {
        PhantomConfig {
            dims: [32, 32, 16],
            spacing_mm: [2.0, 2.0, 2.5],
            endo_radii_mm: [10.0, 10.0, 11.25],
            epi_radii_mm: [16.0, 16.0, 18.0],
            center_mm: [32.0, 32.0, 26.0],
            frames: 6,
            contraction: 0.12,
            shortening: 0.08,
            twist: 0.0,
            noise_sigma: 0.02,
            misalignment_mm: 0.0,
            seed,
        }
    }

    #[test]
    fn config_validation() {
        let mut cfg = TrackerConfig::default();
        cfg.level_iters.pop();
        assert!(cfg.validate().is_err());
        let cfg = TrackerConfig {
            step_voxels: 0.0,
            ..TrackerConfig::default()
        };
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn identical_frames_give_near_zero_field() {
        let mut study = generate(&small_phantom(3)).unwrap();
        // Make the pair literally identical.
        study.images[1] = study.images[0].clone();
        study.labels[1] = study.labels[0].clone();
        study.edges[1] = study.edges[0].clone();
        let cfg = quick_cfg();
        let ctx = build_context(&study, 1, &cfg, ViewSelection::SaxAndLax).unwrap();
        let (field, trace) = track_pair(&ctx, &cfg).unwrap();
        assert!(!trace.is_empty());
        assert!(
            field.mean_norm_voxels() < 0.05,
            "mean norm {}",
            field.mean_norm_voxels()
        );
        let warped = warp_labels(&study.labels[0], &field).unwrap();
        let d = dice(&warped, &study.labels[0], LABEL_MYOCARDIUM).unwrap();
        assert!(d >= 0.99, "self dice {d}");
    }

    #[test]
    fn recovers_integer_translation() {
        // Pure translation pair: target(x) = source(x - 2), so the backward
        // field that restores the source is the constant (-2, 0, 0).
        let c = small_phantom(4);
        let study = generate(&c).unwrap();
        let mut shifted = study.clone();
        let d = study.dims;
        let src = &study.images[0];
        let mut img = src.clone();
        for z in 0..d.d {
            for y in 0..d.h {
                for x in 0..d.w {
                    let sx = x.saturating_sub(2);
                    img.set(x, y, z, src.at(sx, y, z));
                }
            }
        }
        shifted.images[1] = img;
        let mut lab = study.labels[0].clone();
        for z in 0..d.d {
            for y in 0..d.h {
                for x in 0..d.w {
                    let sx = x.saturating_sub(2);
                    lab.data[d.index(x, y, z)] = study.labels[0].at(sx, y, z);
                }
            }
        }
        shifted.edges[1] = crate::multiview::extract_edge_map(&lab, LABEL_MYOCARDIUM).map;
        shifted.labels[1] = lab;

        let cfg = quick_cfg();
        let ctx = build_context(&shifted, 1, &cfg, ViewSelection::SaxAndLax).unwrap();
        let (field, _) = track_pair(&ctx, &cfg).unwrap();
        // Average recovered displacement over the target myocardium.
        let mut mean = [0.0f64; 3];
        let mut n = 0usize;
        for (i, &l) in shifted.labels[1].data.iter().enumerate() {
            if l == LABEL_MYOCARDIUM {
                for c in 0..3 {
                    mean[c] += field.data[i][c];
                }
                n += 1;
            }
        }
        for c in mean.iter_mut() {
            *c /= n as f64;
        }
        assert!(
            (mean[0] + 2.0).abs() < 0.5 && mean[1].abs() < 0.5 && mean[2].abs() < 0.5,
            "recovered mean {mean:?}"
        );
    }

    #[test]
    fn phantom_pair_recovery_beats_zero_field() {
        let c = small_phantom(5);
        let study = generate(&c).unwrap();
        let es = study.es_index();
        let cfg = quick_cfg();
        let ctx = build_context(&study, es, &cfg, ViewSelection::SaxAndLax).unwrap();
        let (field, trace) = track_pair(&ctx, &cfg).unwrap();

        // Never worse than doing nothing.
        let zero = DisplacementField::zeros(study.dims, study.spacing);
        let zero_loss = total_loss(&ctx, &zero, &cfg.weights).unwrap().total;
        let final_loss = total_loss(&ctx, &field, &cfg.weights).unwrap().total;
        assert!(final_loss <= zero_loss, "{final_loss} vs zero {zero_loss}");
        assert!(trace.last().unwrap().total <= trace[0].total);

        // And it should actually track: warped ED labels overlap ES labels
        // better than unwarped, and EPE beats the zero field.
        let warped = warp_labels(&study.labels[0], &field).unwrap();
        let d_tracked = dice(&warped, &study.labels[es], LABEL_MYOCARDIUM).unwrap();
        let d_zero = dice(&study.labels[0], &study.labels[es], LABEL_MYOCARDIUM).unwrap();
        assert!(d_tracked > d_zero, "dice {d_tracked} vs baseline {d_zero}");

        let epe = end_point_error(&field, &study.gt_fields[es], &study.labels[es], LABEL_MYOCARDIUM)
            .unwrap();
        let epe_zero =
            end_point_error(&zero, &study.gt_fields[es], &study.labels[es], LABEL_MYOCARDIUM)
                .unwrap();
        assert!(epe.mean_mm < epe_zero.mean_mm);
    }

    #[test]
    fn sequence_zero_motion_and_determinism() {
        let mut c = small_phantom(6);
        c.contraction = 0.0;
        c.shortening = 0.0;
        c.frames = 3;
        let study = generate(&c).unwrap();
        let cfg = TrackerConfig {
            level_iters: vec![30, 30, 30],
            ..TrackerConfig::default()
        };
        let result = track_sequence(&study, &cfg).unwrap();
        assert_eq!(result.fields.len(), 3);
        assert!(result.fields[0].data.iter().all(|v| v == &[0.0; 3]));
        for t in 1..3 {
            assert!(result.failures[t].is_none());
            assert!(
                result.fields[t].mean_norm_voxels() < 0.05,
                "frame {t}: {}",
                result.fields[t].mean_norm_voxels()
            );
        }
        // Bit-identical on rerun.
        let again = track_sequence(&study, &cfg).unwrap();
        for t in 0..3 {
            assert_eq!(result.fields[t].data, again.fields[t].data);
        }
    }

    #[test]
    fn two_frame_study_has_one_nontrivial_field() {
        let mut c = small_phantom(7);
        c.frames = 2;
        let study = generate(&c).unwrap();
        let cfg = TrackerConfig {
            level_iters: vec![20, 20, 20],
            ..TrackerConfig::default()
        };
        let result = track_sequence(&study, &cfg).unwrap();
        assert_eq!(result.fields.len(), 2);
        assert!(result.fields[0].data.iter().all(|v| v == &[0.0; 3]));
        assert!(result.fields[1].mean_norm_voxels() > 0.0);
    }

    #[test]
    fn es_frame_detection() {
        let mut c = small_phantom(8);
        c.frames = 20;
        let study = generate(&c).unwrap();
        let es = find_es_frame(&study).unwrap();
        assert_eq!(es.index, 10);
        assert!(!es.low_confidence);

        // Zero motion: the flag logic must match the threshold exactly.
        let mut cz = small_phantom(9);
        cz.contraction = 0.0;
        cz.shortening = 0.0;
        cz.frames = 5;
        let noisy = generate(&cz).unwrap();
        let es = find_es_frame(&noisy).unwrap();
        assert_eq!(
            es.low_confidence,
            es.max_mse < 2.0 * cz.noise_sigma * cz.noise_sigma
        );

        // A constructed sequence where the last frame differs most.
        let mut cm = small_phantom(10);
        cm.frames = 4;
        cm.noise_sigma = 0.0;
        let mut mono = generate(&cm).unwrap();
        for t in 1..4 {
            let offset = 0.1 * t as f64;
            let base = mono.images[0].clone();
            for (i, v) in mono.images[t].data.iter_mut().enumerate() {
                *v = base.data[i] + offset;
            }
        }
        let es = find_es_frame(&mono).unwrap();
        assert_eq!(es.index, 3);
    }

    #[test]
    fn warm_start_tracks_comparably() {
        let mut c = small_phantom(11);
        c.frames = 4;
        let study = generate(&c).unwrap();
        let cold = TrackerConfig {
            level_iters: vec![40, 40, 50],
            ..TrackerConfig::default()
        };
        let warm = TrackerConfig {
            warm_start: true,
            ..cold.clone()
        };
        let rc = track_sequence(&study, &cold).unwrap();
        let rw = track_sequence(&study, &warm).unwrap();
        for t in 1..4 {
            let dc = dice(
                &warp_labels(&study.labels[0], &rc.fields[t]).unwrap(),
                &study.labels[t],
                LABEL_MYOCARDIUM,
            )
            .unwrap();
            let dw = dice(
                &warp_labels(&study.labels[0], &rw.fields[t]).unwrap(),
                &study.labels[t],
                LABEL_MYOCARDIUM,
            )
            .unwrap();
            assert!((dc - dw).abs() < 0.02, "frame {t}: {dc} vs {dw}");
        }
    }
}
