#![allow(dead_code)]

#[path = "../../../core/tests/support/mod.rs"]
pub mod core;
pub mod walkthrough;
pub mod http;
