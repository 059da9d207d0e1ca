//! Segmentation-overlap and field-error metrics.

use crate::error::{Error, Result};
use crate::grid::{jacobian_determinant, DisplacementField, LabelVolume, Spacing};

/// Dice overlap of one label: `2|A∩B| / (|A|+|B|)`. Two empty sets score 1.0
/// by convention.
pub fn dice(a: &LabelVolume, b: &LabelVolume, label: u8) -> Result<f64> {
    if a.dims != b.dims {
        return Err(Error::DimensionMismatch("dice".into()));
    }
    let mut na = 0usize;
    let mut nb = 0usize;
    let mut inter = 0usize;
    for (&la, &lb) in a.data.iter().zip(&b.data) {
        let ia = la == label;
        let ib = lb == label;
        na += ia as usize;
        nb += ib as usize;
        inter += (ia && ib) as usize;
    }
    if na + nb == 0 {
        return Ok(1.0);
    }
    Ok(2.0 * inter as f64 / (na + nb) as f64)
}

/// Boundary voxel centers of a label in millimetres (6-neighborhood
/// boundary; off-grid neighbors count as background).
fn boundary_points(seg: &LabelVolume, label: u8, spacing: Spacing) -> Vec<[f64; 3]> {
    let edge = crate::multiview::extract_edge_map(seg, label);
    let d = seg.dims;
    let mut points = Vec::new();
    for z in 0..d.d {
        for y in 0..d.h {
            for x in 0..d.w {
                if edge.map.at(x, y, z) > 0.0 {
                    points.push([
                        x as f64 * spacing.x,
                        y as f64 * spacing.y,
                        z as f64 * spacing.z,
                    ]);
                }
            }
        }
    }
    points
}

fn directed_hausdorff(from: &[[f64; 3]], to: &[[f64; 3]]) -> f64 {
    let mut worst = 0.0f64;
    for a in from {
        let mut best = f64::INFINITY;
        for b in to {
            let dx = a[0] - b[0];
            let dy = a[1] - b[1];
            let dz = a[2] - b[2];
            let d2 = dx * dx + dy * dy + dz * dz;
            if d2 < best {
                best = d2;
                // Cannot raise the running maximum any more.
                if best <= worst {
                    break;
                }
            }
        }
        worst = worst.max(best);
    }
    worst.sqrt()
}

/// Exact (100th percentile) symmetric Hausdorff distance between the label
/// boundaries of two segmentations, in millimetres.
pub fn hausdorff_mm(a: &LabelVolume, b: &LabelVolume, label: u8, spacing: Spacing) -> Result<f64> {
    if a.dims != b.dims {
        return Err(Error::DimensionMismatch("hausdorff".into()));
    }
    let pa = boundary_points(a, label, spacing);
    let pb = boundary_points(b, label, spacing);
    if pa.is_empty() || pb.is_empty() {
        return Err(Error::InvalidArgument(
            "hausdorff needs both label sets nonempty".into(),
        ));
    }
    Ok(directed_hausdorff(&pa, &pb).max(directed_hausdorff(&pb, &pa)))
}

/// Percentile variant of the symmetric Hausdorff distance (e.g. 95).
pub fn hausdorff_percentile_mm(
    a: &LabelVolume,
    b: &LabelVolume,
    label: u8,
    spacing: Spacing,
    percentile: f64,
) -> Result<f64> {
    if a.dims != b.dims {
        return Err(Error::DimensionMismatch("hausdorff".into()));
    }
    if !(0.0..=100.0).contains(&percentile) {
        return Err(Error::InvalidArgument("percentile out of range".into()));
    }
    let pa = boundary_points(a, label, spacing);
    let pb = boundary_points(b, label, spacing);
    if pa.is_empty() || pb.is_empty() {
        return Err(Error::InvalidArgument(
            "hausdorff needs both label sets nonempty".into(),
        ));
    }
    let nearest = |from: &[[f64; 3]], to: &[[f64; 3]]| -> Vec<f64> {
        from.iter()
            .map(|a| {
                to.iter()
                    .map(|b| {
                        let dx = a[0] - b[0];
                        let dy = a[1] - b[1];
                        let dz = a[2] - b[2];
                        (dx * dx + dy * dy + dz * dz).sqrt()
                    })
                    .fold(f64::INFINITY, f64::min)
            })
            .collect()
    };
    let mut dists = nearest(&pa, &pb);
    dists.extend(nearest(&pb, &pa));
    dists.sort_by(|x, y| x.partial_cmp(y).unwrap());
    let rank = ((percentile / 100.0) * (dists.len() - 1) as f64).round() as usize;
    Ok(dists[rank])
}

/// Volume difference in percent: `|V(a) - V(b)| / V(a) * 100` for one label.
pub fn volume_difference_pct(reference: &LabelVolume, warped: &LabelVolume, label: u8) -> Result<f64> {
    if reference.dims != warped.dims {
        return Err(Error::DimensionMismatch("volume_difference".into()));
    }
    let va = reference.count_label(label);
    if va == 0 {
        return Err(Error::InvalidArgument(
            "volume difference needs a nonempty reference".into(),
        ));
    }
    let vb = warped.count_label(label);
    Ok((va as f64 - vb as f64).abs() / va as f64 * 100.0)
}

/// Percentage of mask voxels whose Jacobian determinant is negative.
pub fn negative_jacobian_fraction_pct(
    field: &DisplacementField,
    mask: &LabelVolume,
    label: u8,
) -> Result<f64> {
    if field.dims != mask.dims {
        return Err(Error::DimensionMismatch("negative_jacobian".into()));
    }
    let total = mask.count_label(label);
    if total == 0 {
        return Err(Error::InvalidArgument(
            "negative-Jacobian fraction needs a nonempty mask".into(),
        ));
    }
    let det = jacobian_determinant(field);
    let mut neg = 0usize;
    for (i, &l) in mask.data.iter().enumerate() {
        if l == label && det.data[i] < 0.0 {
            neg += 1;
        }
    }
    Ok(100.0 * neg as f64 / total as f64)
}

/// End-point error in millimetres: mean Euclidean error over the mask plus
/// per-axis means of absolute differences.
pub struct EndPointError {
    pub mean_mm: f64,
    pub per_axis_mm: [f64; 3],
}

pub fn end_point_error(
    estimated: &DisplacementField,
    truth: &DisplacementField,
    mask: &LabelVolume,
    label: u8,
) -> Result<EndPointError> {
    if estimated.dims != truth.dims || estimated.dims != mask.dims {
        return Err(Error::DimensionMismatch("end_point_error".into()));
    }
    let sp = estimated.spacing;
    let scale = [sp.x, sp.y, sp.z];
    let mut n = 0usize;
    let mut sum = 0.0;
    let mut axis = [0.0; 3];
    for (i, &l) in mask.data.iter().enumerate() {
        if l != label {
            continue;
        }
        let e = estimated.data[i];
        let t = truth.data[i];
        let mut d2 = 0.0;
        for c in 0..3 {
            let dmm = (e[c] - t[c]) * scale[c];
            d2 += dmm * dmm;
            axis[c] += dmm.abs();
        }
        sum += d2.sqrt();
        n += 1;
    }
    if n == 0 {
        return Err(Error::InvalidArgument(
            "end-point error needs a nonempty mask".into(),
        ));
    }
    Ok(EndPointError {
        mean_mm: sum / n as f64,
        per_axis_mm: [axis[0] / n as f64, axis[1] / n as f64, axis[2] / n as f64],
    })
}
