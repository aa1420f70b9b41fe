// SPDX-License-Identifier: MIT OR Apache-2.0

//! Criterion benchmarks for expert scoring and alignment; see `benches/`.
