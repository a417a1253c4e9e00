//! Tensor program compiler built on task mappings.

pub mod compute_ir;
pub mod expr;
pub mod fusion;
pub mod mapping;
pub mod program_ir;
pub mod scheduler;
pub mod syntax;
pub mod tensor;
pub mod tuner;
pub mod vm;

pub use compute_ir::{ComputeDag, DType};
pub use mapping::{MappingError, TaskMapping, TaskShape};
pub use tensor::Tensor;
