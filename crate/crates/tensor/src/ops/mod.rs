pub mod elementwise;
pub mod linalg;
pub mod reduce;
pub mod sampling;
pub mod shape;
