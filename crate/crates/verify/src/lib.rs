//! Intentionally empty; the acceptance suite lives in `tests/acceptance.rs`.
