pub mod budget;
pub mod config;
pub mod env;
pub mod eval;
pub mod pipeline;
pub mod policy;
pub mod protocol;
pub mod rng;
pub mod scenes;
pub mod trainer;
