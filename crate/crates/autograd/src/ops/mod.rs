pub mod conv;
mod elementwise;
pub mod loss;
mod norm;
