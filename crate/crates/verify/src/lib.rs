//! Holds no code; the acceptance checks live in `tests/acceptance.rs`.
