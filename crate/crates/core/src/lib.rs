pub mod numerics;
pub mod audio;
pub mod codec;
pub mod nn;
pub mod conditioners;
pub mod triattn;
pub mod flow;
pub mod scenarios;
pub mod eval;
pub mod experiment;
pub mod config;
