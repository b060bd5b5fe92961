//! File formats, evaluation sweeps, and benchmark plumbing around the
//! lever-arm calibration core.

pub mod eval;
pub mod io;
