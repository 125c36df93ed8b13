mod elementwise;
mod linalg;
mod nn;
mod reduce;
pub(crate) mod shape;
