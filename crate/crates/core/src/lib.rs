pub mod diff;
pub mod instructions;
pub mod scene;
pub mod dataset;
pub mod metrics;
pub mod editor;
pub mod encoder;
pub mod explainer;
pub mod train;
pub mod cli;
pub mod experiment;
