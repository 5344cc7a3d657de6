//! Robust representation learning for partial label learning with
//! unreliable candidate sets.

pub mod cli;
pub mod datagen;
pub mod emcheck;
pub mod losses;
pub mod model;
pub mod numerics;
pub mod par;
pub mod refinement;
pub mod rng;
pub mod trainer;
