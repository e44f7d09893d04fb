//! Raw numeric kernels over contiguous slices. The autodiff graph wraps these.

pub mod conv;
pub mod loss;
pub mod matmul;
pub mod norm;
pub mod reduce;
pub mod shape;
pub mod spatial;
