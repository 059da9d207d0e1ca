//! Acquisition-plane geometry: rasterized 3D plane masks over the SAX grid,
//! slicing of volumes onto planes, and myocardial edge-map construction.

use crate::error::{Error, Result};
use crate::filter::{gaussian_blur, Border};
use crate::grid::{GridDims, LabelVolume, ScalarVolume, Spacing};
use serde::{Deserialize, Serialize};

/// Identity of an acquisition plane.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum PlaneId {
    /// One slice of the short-axis stack, indexed 0..9 within the band.
    Sax(u8),
    TwoChamber,
    FourChamber,
}

impl PlaneId {
    pub fn as_string(&self) -> String {
        match self {
            PlaneId::Sax(k) => format!("sax_{k}"),
            PlaneId::TwoChamber => "2ch".into(),
            PlaneId::FourChamber => "4ch".into(),
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        if let Some(rest) = s.strip_prefix("sax_") {
            let k: u8 = rest
                .parse()
                .map_err(|_| Error::Format(format!("bad plane id {s:?}")))?;
            return Ok(PlaneId::Sax(k));
        }
        match s {
            "2ch" => Ok(PlaneId::TwoChamber),
            "4ch" => Ok(PlaneId::FourChamber),
            _ => Err(Error::Format(format!("bad plane id {s:?}"))),
        }
    }
}

impl Serialize for PlaneId {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(&self.as_string())
    }
}

impl<'de> Deserialize<'de> for PlaneId {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        PlaneId::parse(&s).map_err(serde::de::Error::custom)
    }
}

/// Geometric definition of an acquisition plane in millimetre space.
///
/// The plane passes through `origin_mm` and is spanned by the orthonormal
/// in-plane axes `axis_u` / `axis_v`; the rectangular extent is centered on
/// the origin.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PlaneSpec {
    pub id: PlaneId,
    pub origin_mm: [f64; 3],
    pub axis_u: [f64; 3],
    pub axis_v: [f64; 3],
    pub extent_mm: [f64; 2],
}

fn dot(a: [f64; 3], b: [f64; 3]) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

fn cross(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

impl PlaneSpec {
    pub fn validate(&self) -> Result<()> {
        let nu = dot(self.axis_u, self.axis_u).sqrt();
        let nv = dot(self.axis_v, self.axis_v).sqrt();
        if (nu - 1.0).abs() > 1e-9 || (nv - 1.0).abs() > 1e-9 {
            return Err(Error::Geometry(format!(
                "plane {} axes are not unit length",
                self.id.as_string()
            )));
        }
        if dot(self.axis_u, self.axis_v).abs() > 1e-9 {
            return Err(Error::Geometry(format!(
                "plane {} axes are not orthogonal",
                self.id.as_string()
            )));
        }
        if self.extent_mm[0] <= 0.0 || self.extent_mm[1] <= 0.0 {
            return Err(Error::Geometry("plane extent must be positive".into()));
        }
        Ok(())
    }

    pub fn normal(&self) -> [f64; 3] {
        cross(self.axis_u, self.axis_v)
    }
}

/// Rasterized binary plane mask over the SAX grid.
#[derive(Debug, Clone, PartialEq)]
pub struct PlaneMask {
    pub dims: GridDims,
    pub data: Vec<bool>,
}

impl PlaneMask {
    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&b| b).count()
    }

    pub fn voxel_indices(&self) -> impl Iterator<Item = usize> + '_ {
        self.data
            .iter()
            .enumerate()
            .filter_map(|(i, &b)| if b { Some(i) } else { None })
    }
}

/// Rasterize a plane: a voxel belongs to the mask when its center lies closer
/// to the plane (along the normal) than half the voxel diagonal projected on
/// the normal, and its in-plane coordinates fall inside the extent.
pub fn rasterize_plane(spec: &PlaneSpec, dims: GridDims, spacing: Spacing) -> Result<PlaneMask> {
    spec.validate()?;
    let n = spec.normal();
    let threshold =
        0.5 * (spacing.x * n[0].abs() + spacing.y * n[1].abs() + spacing.z * n[2].abs());
    let half_u = spec.extent_mm[0] / 2.0;
    let half_v = spec.extent_mm[1] / 2.0;
    let mut data = vec![false; dims.len()];
    let mut any = false;
    for z in 0..dims.d {
        for y in 0..dims.h {
            for x in 0..dims.w {
                let p = [
                    x as f64 * spacing.x - spec.origin_mm[0],
                    y as f64 * spacing.y - spec.origin_mm[1],
                    z as f64 * spacing.z - spec.origin_mm[2],
                ];
                let dist = dot(p, n).abs();
                if dist < threshold {
                    let u = dot(p, spec.axis_u);
                    let v = dot(p, spec.axis_v);
                    if u.abs() <= half_u && v.abs() <= half_v {
                        data[dims.index(x, y, z)] = true;
                        any = true;
                    }
                }
            }
        }
    }
    if !any {
        return Err(Error::Geometry(format!(
            "plane {} does not intersect the grid",
            spec.id.as_string()
        )));
    }
    Ok(PlaneMask { dims, data })
}

/// The standard plane complement: 9 adjacent SAX slices centered on the
/// mid-slice plus the 2CH and 4CH long-axis views. LAX planes may be absent
/// when a study was acquired (or degraded) without them.
#[derive(Debug, Clone)]
pub struct PlaneSet {
    pub sax: Vec<(PlaneSpec, PlaneMask)>,
    pub two_ch: Option<(PlaneSpec, PlaneMask)>,
    pub four_ch: Option<(PlaneSpec, PlaneMask)>,
}

impl PlaneSet {
    pub fn from_specs(specs: &[PlaneSpec], dims: GridDims, spacing: Spacing) -> Result<Self> {
        let mut sax = Vec::new();
        let mut two_ch = None;
        let mut four_ch = None;
        for spec in specs {
            let mask = rasterize_plane(spec, dims, spacing)?;
            match spec.id {
                PlaneId::Sax(_) => sax.push((spec.clone(), mask)),
                PlaneId::TwoChamber => two_ch = Some((spec.clone(), mask)),
                PlaneId::FourChamber => four_ch = Some((spec.clone(), mask)),
            }
        }
        sax.sort_by_key(|(s, _)| match s.id {
            PlaneId::Sax(k) => k,
            _ => 0,
        });
        let set = PlaneSet { sax, two_ch, four_ch };
        set.validate()?;
        Ok(set)
    }

    pub fn validate(&self) -> Result<()> {
        if self.sax.len() != 9 {
            return Err(Error::Geometry(format!(
                "expected exactly 9 SAX planes, got {}",
                self.sax.len()
            )));
        }
        Ok(())
    }

    pub fn specs(&self) -> Vec<PlaneSpec> {
        let mut out: Vec<PlaneSpec> = self.sax.iter().map(|(s, _)| s.clone()).collect();
        if let Some((s, _)) = &self.two_ch {
            out.push(s.clone());
        }
        if let Some((s, _)) = &self.four_ch {
            out.push(s.clone());
        }
        out
    }

    pub fn has_lax(&self) -> bool {
        self.two_ch.is_some() || self.four_ch.is_some()
    }
}

/// Zero a volume everywhere off the plane mask.
pub fn slice_volume(vol: &ScalarVolume, mask: &PlaneMask) -> Result<ScalarVolume> {
    if vol.dims != mask.dims {
        return Err(Error::DimensionMismatch(format!(
            "slice_volume: {:?} vs {:?}",
            vol.dims, mask.dims
        )));
    }
    let data = vol
        .data
        .iter()
        .zip(&mask.data)
        .map(|(&v, &m)| if m { v } else { 0.0 })
        .collect();
    Ok(ScalarVolume {
        dims: vol.dims,
        spacing: vol.spacing,
        data,
    })
}

/// Binary edge map of one label: a voxel is an edge voxel when it carries the
/// label and at least one 6-neighbor does not (out-of-grid counts as not).
pub struct EdgeMap {
    pub map: ScalarVolume,
    /// Set when the requested label does not occur in the segmentation; the
    /// returned map is then empty.
    pub label_missing: bool,
}

pub fn extract_edge_map(seg: &LabelVolume, label: u8) -> EdgeMap {
    let d = seg.dims;
    let mut map = ScalarVolume::zeros(d, seg.spacing);
    let mut present = false;
    for z in 0..d.d {
        for y in 0..d.h {
            for x in 0..d.w {
                if seg.at(x, y, z) != label {
                    continue;
                }
                present = true;
                // A volume-border voxel has an off-grid neighbor, which
                // counts as background.
                let at_border = x == 0
                    || x + 1 == d.w
                    || y == 0
                    || y + 1 == d.h
                    || z == 0
                    || z + 1 == d.d;
                let boundary = at_border
                    || seg.at(x - 1, y, z) != label
                    || seg.at(x + 1, y, z) != label
                    || seg.at(x, y - 1, z) != label
                    || seg.at(x, y + 1, z) != label
                    || seg.at(x, y, z - 1) != label
                    || seg.at(x, y, z + 1) != label;
                if boundary {
                    map.set(x, y, z, 1.0);
                }
            }
        }
    }
    EdgeMap {
        map,
        label_missing: !present,
    }
}

/// Gaussian-soften a binary edge map: separable blur (zero border),
/// renormalized so the maximum over the original edge voxels is 1, then
/// clamped to [0, 1]. Gives the cross-entropy term usable gradients off the
/// exact edge voxels.
pub fn soften_edges(edge: &ScalarVolume, sigma: f64) -> Result<ScalarVolume> {
    if sigma < 0.0 {
        return Err(Error::InvalidArgument("blur sigma must be >= 0".into()));
    }
    if sigma == 0.0 {
        return Ok(edge.clone());
    }
    let blurred = gaussian_blur(edge, sigma, Border::Zero);
    let mut peak = 0.0f64;
    for (i, &e) in edge.data.iter().enumerate() {
        if e > 0.0 {
            peak = peak.max(blurred.data[i]);
        }
    }
    let scale = if peak > 0.0 { 1.0 / peak } else { 1.0 };
    let data = blurred
        .data
        .iter()
        .map(|&v| (v * scale).clamp(0.0, 1.0))
        .collect();
    Ok(ScalarVolume {
        dims: edge.dims,
        spacing: edge.spacing,
        data,
    })
}
