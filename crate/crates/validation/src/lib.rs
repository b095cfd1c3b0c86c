//! Holds the workspace acceptance suite in `tests/acceptance.rs`; run it with
//! `cargo test -p subpop-validation --test acceptance`.
