//! Runs the guide's code listings as doc-tests. Each chapter is its own
//! module so a failure points at the chapter it came from.

#[doc = include_str!("../../../book/src/introduction.md")]
pub mod introduction {}
#[doc = include_str!("../../../book/src/blocks.md")]
pub mod blocks {}
#[doc = include_str!("../../../book/src/lip-numbers.md")]
pub mod lip_numbers {}
#[doc = include_str!("../../../book/src/limit-architectures.md")]
pub mod limit_architectures {}
#[doc = include_str!("../../../book/src/scaling-laws.md")]
pub mod scaling_laws {}
#[doc = include_str!("../../../book/src/covering.md")]
pub mod covering {}
#[doc = include_str!("../../../book/src/probes.md")]
pub mod probes {}
#[doc = include_str!("../../../book/src/weight-files.md")]
pub mod weight_files {}
#[doc = include_str!("../../../book/src/command-line.md")]
pub mod command_line {}
