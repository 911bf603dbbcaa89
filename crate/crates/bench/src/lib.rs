//! Criterion benchmarks for the `hetseg` forward passes and metrics; see `benches/`.
