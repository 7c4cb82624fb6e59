//! The guide under `book/`, compiled so its Rust blocks run as doctests.
#![doc = include_str!("../../../book/src/introduction.md")]

#[doc = include_str!("../../../book/src/problems.md")]
pub mod problems {}

#[doc = include_str!("../../../book/src/solver.md")]
pub mod solver {}

#[doc = include_str!("../../../book/src/gradients.md")]
pub mod gradients {}

#[doc = include_str!("../../../book/src/open_loop.md")]
pub mod open_loop {}

#[doc = include_str!("../../../book/src/closed_loop.md")]
pub mod closed_loop {}

#[doc = include_str!("../../../book/src/ioc.md")]
pub mod ioc {}

#[doc = include_str!("../../../book/src/cli.md")]
pub mod cli {}

#[doc = include_str!("../../../book/src/testing.md")]
pub mod testing {}
