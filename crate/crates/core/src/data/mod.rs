//! Deterministic synthetic translation task in which every target semantic
//! token expands into several discrete units.

mod io;
mod task;

pub use io::{read_dataset, read_samples, write_dataset, write_samples, TASK_FILE};
pub use task::{collapse_units, generate_dataset, Dataset, Sample, TaskSpec};
