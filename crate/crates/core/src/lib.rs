pub mod cli;
pub mod distill;
pub mod fixtures;
pub mod mechanism;
pub mod metrics;
pub mod pipeline;
pub mod protocol;
pub mod vocab;
