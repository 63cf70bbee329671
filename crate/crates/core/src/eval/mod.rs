//! Synthetic evaluation assets: passkey corpora, exact attention-cell
//! accounting and wall-clock benchmarks.

pub mod bench;
pub mod cells;
pub mod passkey;

pub use bench::{bench_run, write_bench_csv, BenchOptions, BenchRow, MemoryProbe};
pub use cells::{count_cells, growth_ratio, mesa_cells, CellCountReport, CellParams, CellRow, Method};
pub use passkey::{gen_corpus, gen_passkey, score_retrieval, PasskeySample};
