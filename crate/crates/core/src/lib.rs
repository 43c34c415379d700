pub mod geometry;
pub mod image;
pub mod photometric;
pub mod robust;

/// Keyframe identifier, assigned in creation order.
pub type KeyframeId = usize;
/// Map point identifier.
pub type PointId = usize;
pub mod lmcw;
pub mod map;
pub mod synthetic;
pub mod pba;
pub mod frontend;
pub mod eval;
pub mod io;
pub mod config;
pub mod system;
