//! Benchmarks live in benches/; nothing to export.
