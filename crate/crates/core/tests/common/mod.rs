//! Oracles and measurement routines shared by the integration tests and the
//! acceptance runner.
#![allow(dead_code)]

pub mod gradients;
pub mod oracle;
pub mod suites;
