//! Criterion benchmarks for the tensor core, the student forward pass and masking. See `benches/`.
