//! Taint-aware memory and plan–trajectory alignment.

mod alignment;
mod memory;

pub use alignment::{
    check_alignment, content_words, AlignmentVerdict, DriftDetector, KeywordOverlap, OpKind, PlannedAction, Trajectory,
};
pub use memory::{CellId, CognitionError, MemoryCell, MemoryStore, Origin, SinkVerdict, Source, TaintTag};
