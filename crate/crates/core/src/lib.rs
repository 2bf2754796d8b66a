pub mod checkpoint;
pub mod config;
pub mod data;
pub mod gradcheck;
pub mod model;
pub mod optim;
pub mod tasks;
pub mod tensor;
pub mod train;
pub mod viz;
pub mod weighting;
