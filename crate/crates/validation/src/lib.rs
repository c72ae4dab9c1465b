//! Hosts the `acceptance` test target, which checks coverage, bias, solver
//! certificates and determinism of `dpme-core` at full Monte Carlo size.
//!
//! Run a subset with `DPME_ACCEPTANCE_ONLY=name1,name2 cargo test -p dpme-validation`.
