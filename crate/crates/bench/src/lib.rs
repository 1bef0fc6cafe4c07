//! Criterion benchmarks for the restdyn kernels live in `benches/`.
