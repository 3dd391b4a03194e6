pub mod dataset;
pub mod mask;
pub mod model;
pub mod nn;
pub mod pixels;
pub mod training;
pub mod synthetic;
pub mod engine;
pub mod eval;
