//! Criterion benchmarks for `stgp-core` live under `benches/`.
