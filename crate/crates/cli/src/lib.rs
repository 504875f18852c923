//! Table formats shared by the `ccopf` binary and its tests.

pub mod output;
