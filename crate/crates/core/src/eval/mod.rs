pub mod checkpoint;
pub mod experiment;
pub mod metrics;
pub mod pipeline;
