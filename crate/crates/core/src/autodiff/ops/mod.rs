pub mod attention;
pub mod conv;
pub mod elementwise;
pub mod linear;
pub mod norm;
