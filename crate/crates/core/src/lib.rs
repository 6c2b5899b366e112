pub mod checkpoint;
pub mod collective;
pub mod config;
pub mod data;
pub mod dct;
pub mod models;
pub mod optim;
pub mod report;
pub mod rng;
pub mod selftest;
pub mod tensor;
pub mod trainer;

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/tensors.md")]
    mod tensors {}
    #[doc = include_str!("../../../book/src/dct.md")]
    mod dct {}
    #[doc = include_str!("../../../book/src/topk.md")]
    mod topk {}
    #[doc = include_str!("../../../book/src/outer.md")]
    mod outer {}
    #[doc = include_str!("../../../book/src/collectives.md")]
    mod collectives {}
    #[doc = include_str!("../../../book/src/experiments.md")]
    mod experiments {}
}
