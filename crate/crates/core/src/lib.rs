pub mod checkpoint;
pub mod data;
pub mod distill;
pub mod eval;
pub mod surgery;
pub mod tensor;
pub mod tokenizer;
pub mod transformer;
