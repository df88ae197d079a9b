//! Batch layout, ingestion and emission of datasets.

mod batch;
mod encode;
mod io;

pub use batch::{BatchTree, Layout};
pub(crate) use batch::expand_rows;
pub use encode::{check_records, Encodings, RecordIssue, Vocab, UNUSED_SYMBOL};
pub use io::{
    emit, ingest, ingest_records, join, read_csv, read_jsonl, read_records, transform, write_records, Dataset, Format,
};
