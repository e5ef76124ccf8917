pub mod codec;
pub mod complexity;
pub mod csi;
pub mod model;
pub mod nn;
pub mod planner;
pub mod tensor;
pub mod train;
