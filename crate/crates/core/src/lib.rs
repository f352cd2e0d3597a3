//! Economic MPC for an islanded/grid-connected microgrid, an exact MIQP
//! expert, and imitation-learned neural surrogates of that expert.

pub mod empc;
pub mod error;
pub mod grid;
pub mod harness;
pub mod imitation;
pub mod miqp;
pub mod neural;
pub mod scenario;

pub use error::{Error, Result};
