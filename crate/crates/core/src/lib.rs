pub mod analyze;
pub mod cli;
pub mod graph;
pub mod surgery;
pub mod tensor;
pub mod train;
