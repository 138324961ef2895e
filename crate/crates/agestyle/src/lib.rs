//! Style-based face aging for dataset diversity enhancement.
//!
//! This crate trains a style-conditioned generator that translates a face
//! image into a target age group by borrowing the age-discriminative feature
//! statistics of a real target image, and ships the surrounding tooling:
//! manifest handling, a synthetic ring-pattern corpus with an analytic age
//! oracle, diversity audits (Shannon and Simpson indices), an augmentation
//! protocol that evens out the age distribution, and a batch CLI.
//!
//! The numerical core is a small reverse-mode autodiff tape over `ndarray`
//! (see [`autodiff`]) that supports gradients of gradients, which the R1
//! regularizer needs during discriminator updates.
//!
//! A narrative guide lives in `book/`; its code blocks are compiled and run
//! as doc-tests through the [`guide`] module.

pub mod augment;
pub mod autodiff;
pub mod checkpoint;
pub mod cli;
pub mod dataset;
pub mod diversity;
pub mod error;
pub mod guide;
pub mod losses;
pub mod networks;
pub mod stylestats;
pub mod trainer;

pub use error::{Error, Result};
