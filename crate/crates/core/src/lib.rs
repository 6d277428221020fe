pub mod backend;
pub mod catalog;
pub mod cli;
pub mod dataset;
pub mod embedder;
pub mod policy;
pub mod provision;
pub mod reward;
pub mod topology;
