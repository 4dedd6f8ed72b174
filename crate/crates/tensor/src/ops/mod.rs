pub mod conv;
pub mod elementwise;
pub mod layout;
pub mod reduce;
pub mod sample;
