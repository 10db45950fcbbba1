//! Criterion benchmarks for the octuplet kernels; see `benches/kernels.rs`.
