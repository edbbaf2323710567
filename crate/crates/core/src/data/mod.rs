pub mod dataset;
pub mod prompts;
pub mod shapes;
pub mod synth;
