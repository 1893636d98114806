//! Battery table ingestion, normalization and windowing.

pub mod fixture;
pub mod normalize;
pub mod prepare;
pub mod table;
pub mod windows;

pub use fixture::{sine_fade, CYCLE_LEN};
pub use normalize::{normalize, ColumnNorm, NormKind, NormalizationSpec};
pub use prepare::{prepare, PrepConfig, PreparedData};
pub use table::{load_csv, read_csv, Column, CsvOptions, Provenance, SchemaMap, SeriesTable, Target, CYCLE_ID};
pub use windows::{
    make_windows, split, split_counts, split_indices, time_covariates, Covariates, SplitIndices, WindowSample,
    WindowSpec, AUX_COLUMNS,
};
