//! Two-stage intra-/inter-person relation network for top-down multi-person
//! pose estimation, built on a small reverse-mode tensor core.
//!
//! Stage one ([`intra`]) encodes each person patch independently. Stage two
//! ([`inter`]) pools every person's features to a coarse grid, concatenates
//! the persons of a group into one token sequence and runs masked
//! self-attention across them before upsampling back and fusing with the
//! stage-one features.

pub mod eval;
pub mod heatmap;
pub mod inter;
pub mod intra;
mod layers;
pub mod model;
pub mod numcore;
pub mod predict;
pub mod scenes;
pub mod train;
