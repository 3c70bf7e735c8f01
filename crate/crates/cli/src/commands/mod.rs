pub mod codecs;
pub mod diag;
pub mod eval;
pub mod train;
