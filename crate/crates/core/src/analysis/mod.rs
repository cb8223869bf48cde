//! Prediction entropy, CTC first-occurrence forward shift, corpus BLEU and
//! report rendering over decode dumps.

mod bleu;
mod entropy;
mod report;
mod shift;

pub use bleu::corpus_bleu;
pub use entropy::{
    entropy, entropy_delta_from_values, entropy_delta_histogram, median, EntropyDelta, EntropyHistogram, ENTROPY_BINS,
};
pub use report::{records_bleu, render_reports, summarize, RunDumps, Summary, VariantSummary, BASELINE_VARIANT};
pub use shift::{first_occurrence_stat, FirstOccurrence, ShiftReport};
