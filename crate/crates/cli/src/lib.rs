//! Library surface backing the `gkd` binary; the acceptance suite drives
//! these entry points directly.

pub mod artifacts;
pub mod commands;
pub mod error;
pub mod evaluate;
pub mod report;
