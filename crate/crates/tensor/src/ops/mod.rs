pub mod conv;
pub mod elementwise;
pub mod filter;
pub mod loss;
pub mod matmul;
pub mod norm;
pub mod reduce;
pub mod shape;
