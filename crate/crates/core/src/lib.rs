//! Neural architecture transformation: a graph-convolutional policy that
//! rewrites the operations of a cell without increasing its cost.

pub mod archgraph;
pub mod evaluator;
pub mod gcnpolicy;
pub mod numkernel;
pub mod opspace;
pub mod trainer;
