//! Synthetic activation traces and the line-delimited trace file format.

mod generate;
mod io;

pub use generate::{generate_trace, TraceGenConfig};
pub use io::{load_trace, read_trace, save_trace, write_trace};
