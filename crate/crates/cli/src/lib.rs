// SPDX-License-Identifier: MIT OR Apache-2.0

//! Run-directory driver for the knowledge-bank laboratory: configuration,
//! the pipeline stages and their report files.

pub mod commands;
pub mod config;
pub mod lab;
