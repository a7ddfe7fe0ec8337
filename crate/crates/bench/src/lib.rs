//! Criterion benchmarks for the tensor, attention, expert-routing and training kernels; see `benches/`.
