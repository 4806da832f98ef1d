//! File-backed pipeline stages and settings for the `tsadv` command.

pub mod config;
pub mod stages;
