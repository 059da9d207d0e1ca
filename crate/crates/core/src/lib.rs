//! Dense 3D myocardial motion estimation from multi-view 2D cine stacks.
//!
//! The library estimates a per-voxel 3D displacement field between the
//! end-diastolic (ED) frame of a short-axis (SAX) image stack and any other
//! frame, by directly minimizing an objective made of an image similarity
//! term, a Huber smoothness term and a multi-view shape regularization term.
//! Long-axis (2CH/4CH) views enter through the shape term only: they pin down
//! the longitudinal silhouette of the myocardium that SAX stacks resolve
//! poorly.
//!
//! Displacement fields use the backward (pull-back) convention throughout:
//! warping samples the source volume at `p + phi(p)`, so `phi` lives on the
//! grid of the *target* frame. Field components are stored in voxel units;
//! the per-axis spacing kept in every volume header converts to millimetres
//! where metrics need physical distances.
//!
//! Besides the tracker itself the crate ships a synthetic beating-LV phantom
//! with an analytically invertible deformation (so end-point errors against
//! ground truth are available), classical demons/FFD baselines restricted to
//! SAX input, the usual segmentation-overlap metric suite and clinical
//! analyses (volume curve, ejection fraction, wall thickness, strains).

pub mod analysis;
pub mod baselines;
pub mod cli;
pub mod error;
pub mod filter;
pub mod grid;
pub mod io;
pub mod metrics;
pub mod multiview;
pub mod objective;
pub mod phantom;
pub mod rng;
pub mod study;
pub mod tracker;

pub use error::{Error, Result};
pub use grid::{DisplacementField, GridDims, LabelVolume, ScalarVolume, Spacing};
