pub mod cli;
pub mod encoder;
pub mod evaluation;
pub mod inject;
pub mod objective;
mod par;
pub mod synthetic;
pub mod tensor;
pub mod tgraph;
pub mod trainer;
