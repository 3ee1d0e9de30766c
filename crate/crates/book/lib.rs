//! Runs every Rust listing of the guide in `book/src` as a doc-test, so the
//! book cannot drift from the library.

#[doc = include_str!("../../book/src/introduction.md")]
pub mod introduction {}
#[doc = include_str!("../../book/src/ingestion.md")]
pub mod ingestion {}
#[doc = include_str!("../../book/src/pair-probabilities.md")]
pub mod pair_probabilities {}
#[doc = include_str!("../../book/src/dot-plots.md")]
pub mod dot_plots {}
#[doc = include_str!("../../book/src/datasets.md")]
pub mod datasets {}
#[doc = include_str!("../../book/src/network.md")]
pub mod network {}
#[doc = include_str!("../../book/src/training.md")]
pub mod training {}
#[doc = include_str!("../../book/src/cli.md")]
pub mod cli {}
