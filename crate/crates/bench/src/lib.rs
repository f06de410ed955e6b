//! Criterion benchmarks of the scenario engine live in `benches/`.
