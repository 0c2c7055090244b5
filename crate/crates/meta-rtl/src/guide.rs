//! The user guide, one module per chapter of `book/`.
//!
//! Each module's documentation *is* the corresponding chapter file, so
//! `cargo test --doc` compiles and runs every code snippet in the book and
//! the two can never drift apart. Render the same content as HTML with
//! `mdbook build book`.

#[doc = include_str!("../../../book/src/introduction.md")]
pub mod introduction {}

#[doc = include_str!("../../../book/src/gradients.md")]
pub mod gradients {}

#[doc = include_str!("../../../book/src/models.md")]
pub mod models {}

#[doc = include_str!("../../../book/src/tasks.md")]
pub mod tasks {}

#[doc = include_str!("../../../book/src/meta.md")]
pub mod meta {}

#[doc = include_str!("../../../book/src/weighting.md")]
pub mod weighting {}

#[doc = include_str!("../../../book/src/experiments.md")]
pub mod experiments {}
