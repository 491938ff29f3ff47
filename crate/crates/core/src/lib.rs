pub mod asset;
pub mod bitstream;
pub mod config;
pub mod entropy;
pub mod error;
pub mod losses;
pub mod rng;
pub mod rollout;
pub mod stream;
pub mod toyscene;
pub mod verify;

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/layers.md")]
    mod layers {}
    #[doc = include_str!("../../../book/src/rate.md")]
    mod rate {}
    #[doc = include_str!("../../../book/src/training.md")]
    mod training {}
    #[doc = include_str!("../../../book/src/container.md")]
    mod container {}
    #[doc = include_str!("../../../book/src/streaming.md")]
    mod streaming {}
    #[doc = include_str!("../../../book/src/cli.md")]
    mod cli {}
}
