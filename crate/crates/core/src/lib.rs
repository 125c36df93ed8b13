//! Two-stage referring multi-object tracking: an external tracker supplies
//! trajectories and this crate scores every (expression, trajectory) pair.

pub mod checkpoint;
pub mod chook;
pub mod config;
pub mod domain;
pub mod encoders;
pub mod evalkit;
pub mod ingest;
pub mod layers;
pub mod model;
pub mod objective;
pub mod pcd;
pub mod synthdata;
pub mod temporal;
pub mod trainer;
