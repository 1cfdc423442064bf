pub mod bsa;
pub mod config;
pub mod diagnostics;
pub mod error;
pub mod grid;
pub mod healpix;
pub mod interp;
pub mod model;
pub mod msgt;
pub mod nn;
pub mod synth;
pub mod tensor;
pub mod training;
