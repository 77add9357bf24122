//! Independent reference implementations shared by integration tests.
#![allow(dead_code)]

pub mod attention;
pub mod eval;
pub mod structure;
