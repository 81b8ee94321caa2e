pub mod acquisition;
pub mod detection;
pub mod geo;
pub mod metrics;
pub mod par;
pub mod pipeline;
pub mod render;
pub mod synth;
