//! Criterion benchmarks for the relgraph workspace live in `benches/`.
