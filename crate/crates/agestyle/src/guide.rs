//! The book, compiled.
//!
//! Every chapter of the guide in `book/` is included here as module
//! documentation, so `cargo test --doc` runs each of its code snippets.
//! If a chapter drifts out of sync with the crate, the build says so.

#[doc = include_str!("../../../book/src/introduction.md")]
pub mod introduction {}

#[doc = include_str!("../../../book/src/manifests.md")]
pub mod manifests {}

#[doc = include_str!("../../../book/src/toy_corpus.md")]
pub mod toy_corpus {}

#[doc = include_str!("../../../book/src/diversity.md")]
pub mod diversity {}

#[doc = include_str!("../../../book/src/style.md")]
pub mod style {}

#[doc = include_str!("../../../book/src/networks.md")]
pub mod networks {}

#[doc = include_str!("../../../book/src/losses.md")]
pub mod losses {}

#[doc = include_str!("../../../book/src/training.md")]
pub mod training {}

#[doc = include_str!("../../../book/src/augmentation.md")]
pub mod augmentation {}
