//! Two-view geometry estimation from putative correspondences with an
//! order-aware inlier classification network and a differentiable weighted
//! eight-point solver.

pub mod diffengine;
pub mod epipolar;
pub mod evalbench;
pub mod gradcheck;
pub mod kvconfig;
pub mod losses;
pub mod oanet;
pub mod ransac;
pub mod synthdata;
pub mod train;
pub mod weighted8pt;
