//! Criterion benchmarks for the decomposition engine live in `benches/`.
