pub mod bev;
pub mod config;
pub mod diffusion;
pub mod encoder;
pub mod metrics;
pub mod model;
pub mod pipeline;
pub mod rng;
pub mod runtime;
pub mod scenario;
pub mod trajectory;
