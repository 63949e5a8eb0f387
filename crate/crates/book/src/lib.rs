//! Compiles the guide's code listings as doctests, so `cargo test` keeps the
//! book and the crate in sync. One module per chapter, so a failure names the
//! chapter it came from.

#[doc = include_str!("../../../book/src/introduction.md")]
pub mod introduction {}
#[doc = include_str!("../../../book/src/patches.md")]
pub mod patches {}
#[doc = include_str!("../../../book/src/network.md")]
pub mod network {}
#[doc = include_str!("../../../book/src/embeddings.md")]
pub mod embeddings {}
#[doc = include_str!("../../../book/src/classification.md")]
pub mod classification {}
#[doc = include_str!("../../../book/src/evaluation.md")]
pub mod evaluation {}
#[doc = include_str!("../../../book/src/tsne.md")]
pub mod tsne {}
#[doc = include_str!("../../../book/src/pipeline.md")]
pub mod pipeline {}
