pub mod masks;
pub mod oracle;
pub mod suite;
