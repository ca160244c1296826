pub mod boxes;
pub mod experiments;
pub mod minidet;
pub mod maskpool;
pub mod metrics;
pub mod scenegen;
pub mod tensor;
