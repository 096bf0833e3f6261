//! 3D electrical impedance tomography toolkit.
//!
//! Forward modeling uses the complete electrode model (CEM) discretized with
//! piecewise linear finite elements on tetrahedral meshes. Reconstruction
//! runs sequential linearizations with an edge-preferring prior: each outer
//! step solves a whitened, projected linear system by a priorconditioned
//! Krylov iteration with Morozov stopping, then recovers the contact
//! resistances in closed form.

pub mod error;
pub mod fem_cem;
pub mod jacobian;
pub mod linsolve;
pub mod prior;
pub mod mesh;
pub mod phantom;
pub mod sparse;
pub mod textio;

pub use error::{EitError, Result};
