//! Criterion benchmarks for the positioning pipeline; see `benches/`.
