//! Synthetic task construction: Long ListOps, Pathfinder / Path-X, and
//! pixel sequences.

pub mod listops;
pub mod pathfinder;
pub mod pixels;

pub use listops::{eval_listops, gen_listops, parse_listops, ListOp, ListOpsConfig, ListOpsExpr, ListOpsSample};
pub use pathfinder::{gen_pathfinder, PathfinderConfig, PathfinderScene, PathfinderSidecar};
pub use pixels::{image_to_sequence, PixelSequence};
