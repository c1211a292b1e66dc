//! The guide in `book/` cannot see the workspace crates when mdbook tests
//! it, so its chapters are pulled in here and their samples run as
//! doc-tests with `cargo test`.

#[doc = include_str!("../../../book/src/introduction.md")]
pub mod introduction {}

#[doc = include_str!("../../../book/src/tn-nodes.md")]
pub mod tn_nodes {}

#[doc = include_str!("../../../book/src/nptn-layer.md")]
pub mod nptn_layer {}

#[doc = include_str!("../../../book/src/training.md")]
pub mod training {}

#[doc = include_str!("../../../book/src/gradcheck.md")]
pub mod gradcheck {}

#[doc = include_str!("../../../book/src/reproducibility.md")]
pub mod reproducibility {}

#[doc = include_str!("../../../book/src/cli.md")]
pub mod cli {}
