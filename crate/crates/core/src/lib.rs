//! Partitioned GCN training where workers exchange halo representations
//! through a shared store only every few epochs.
//!
//! The guide in `book/` walks through the modules in order; its listings run
//! as doctests of this crate.

pub mod analysis;
pub mod engine;
pub mod graph;
pub mod nn;
pub mod partition;
pub mod repstore;

#[cfg(doctest)]
pub mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    pub mod introduction {}
    #[doc = include_str!("../../../book/src/graphs.md")]
    pub mod chapter1 {}
    #[doc = include_str!("../../../book/src/partitions.md")]
    pub mod chapter2 {}
    #[doc = include_str!("../../../book/src/model.md")]
    pub mod chapter3 {}
    #[doc = include_str!("../../../book/src/store.md")]
    pub mod chapter4 {}
    #[doc = include_str!("../../../book/src/training.md")]
    pub mod chapter5 {}
    #[doc = include_str!("../../../book/src/analysis.md")]
    pub mod chapter6 {}
    #[doc = include_str!("../../../book/src/experiments.md")]
    pub mod chapter7 {}
}
