//! Checks shared by these tests and the acceptance runner. Each one panics
//! with a description on the first mismatch.
#![allow(dead_code)]

pub mod corpus;
pub mod oracles;
pub mod repair;
pub mod scripts;
