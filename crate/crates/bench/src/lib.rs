//! Criterion benchmarks for the core kernels and a full training step.
//! Run with `cargo bench -p lgd-bench`.
