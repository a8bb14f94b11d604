pub mod autodiff;
pub mod dst;
pub mod error;
pub mod fusion_ops;
pub mod genotype;
pub mod metrics;
pub mod params;
pub mod search_space;
pub mod tensor;
pub mod data;
pub mod pipeline;
pub mod planted;
pub mod rng;
pub mod config;
pub mod search;
pub mod checkpoint;
pub mod cli;
