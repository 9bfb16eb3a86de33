pub mod http;
pub mod lifecycle;
