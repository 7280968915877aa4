//! Finite-stage workbench for Cantor minimal systems: clopen algebra,
//! Kakutani–Rokhlin towers, ample groups and orbit-equivalence constructions.

pub mod absorption;
pub mod ample;
pub mod balance;
pub mod cancel;
pub mod clopen;
pub mod dynamics;
pub mod error;
pub mod gw;
pub mod krieger;
pub mod kr;
pub mod measure;
pub mod moves;
pub mod registry;
pub mod report;

pub use error::{Error, Result};
