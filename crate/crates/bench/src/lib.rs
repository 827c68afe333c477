//! No library code; the criterion benchmarks live under benches/.
