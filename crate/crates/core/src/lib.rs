//! 3D multi-object tracking with learned point-patch appearance and a
//! size-normalized geometric gate.

pub mod assoc;
pub mod dataio;
pub mod geom;
pub mod kalman;
pub mod lgpenc;
pub mod moteval;
#[cfg(any(test, feature = "oracles"))]
pub mod oracles;
pub mod simkit;
pub mod tracker;
pub mod utcl;
