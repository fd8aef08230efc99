//! Desk-scale laboratory for temporal self-rewarding preference optimization.
//!
//! A synthetic [`world`] supplies prompts and a true quality function, a
//! [`judge`] scores responses, [`policy`] holds the two trainable model
//! families, [`dpo`] trains them, [`curation`] builds preference datasets,
//! [`diagnostics`] measures collapse and [`harness`] runs experiments.

pub mod curation;
pub mod diagnostics;
pub mod dpo;
pub mod error;
pub mod harness;
pub mod judge;
pub mod linalg;
pub mod policy;
pub mod rng;
pub mod verify;
pub mod world;

pub use error::{LabError, Result};
