//! Sharding propagation and SPMD partitioning for a small tensor IR.

pub mod ir;
pub mod sharding;
pub mod tensor;
pub mod simulator;
pub mod propagation;
pub mod partitioner;
pub mod pipeline;
