//! Holds the `acceptance` test target, which reproduces the published
//! simulation results at desk scale. Run it with
//! `cargo test -p funcbreak-validation --test acceptance`.
