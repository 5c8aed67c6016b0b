//! Criterion benchmarks for the MLP kernels and the learner step live in `benches/`.
