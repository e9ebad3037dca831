//! Code listings of the guide in `book/`, compiled and run as doctests.
//!
//! mdbook cannot resolve crate dependencies when testing, so each chapter is
//! pulled in as the docs of an empty module instead.

#[doc = include_str!("../../../book/src/introduction.md")]
pub mod introduction {}
#[doc = include_str!("../../../book/src/autodiff.md")]
pub mod autodiff {}
#[doc = include_str!("../../../book/src/selective-scan.md")]
pub mod selective_scan {}
#[doc = include_str!("../../../book/src/vision-encoder.md")]
pub mod vision_encoder {}
#[doc = include_str!("../../../book/src/model.md")]
pub mod model {}
#[doc = include_str!("../../../book/src/training.md")]
pub mod training {}
#[doc = include_str!("../../../book/src/evaluation.md")]
pub mod evaluation {}
#[doc = include_str!("../../../book/src/explain.md")]
pub mod explain {}
#[doc = include_str!("../../../book/src/data-cli.md")]
pub mod data_cli {}
