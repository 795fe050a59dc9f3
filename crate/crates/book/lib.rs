//! The guide in `book/src`, compiled so its snippets run as doc-tests.

#[doc = include_str!("../../book/src/introduction.md")]
pub mod introduction {}

#[doc = include_str!("../../book/src/networks.md")]
pub mod networks {}

#[doc = include_str!("../../book/src/models.md")]
pub mod models {}

#[doc = include_str!("../../book/src/policies.md")]
pub mod policies {}

#[doc = include_str!("../../book/src/sampling.md")]
pub mod sampling {}

#[doc = include_str!("../../book/src/estimators.md")]
pub mod estimators {}

#[doc = include_str!("../../book/src/pushsum.md")]
pub mod pushsum {}

#[doc = include_str!("../../book/src/training.md")]
pub mod training {}

#[doc = include_str!("../../book/src/oracle.md")]
pub mod oracle {}

#[doc = include_str!("../../book/src/cli.md")]
pub mod cli {}
