//! Benchmark-only package; see `benches/pipeline.rs`. Run with
//! `cargo bench -p tenorsel-bench`.
