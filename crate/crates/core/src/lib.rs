pub mod autograd;
mod binio;
pub mod losses;
pub mod model;
pub mod retrieval;
pub mod synthdata;
pub mod training;

pub use binio::Truncated;

#[cfg(doctest)]
mod guide {
    #[doc = include_str!("../../../book/src/synthdata.md")]
    struct Synthdata;
    #[doc = include_str!("../../../book/src/autograd.md")]
    struct Autograd;
    #[doc = include_str!("../../../book/src/model.md")]
    struct Model;
    #[doc = include_str!("../../../book/src/losses.md")]
    struct Losses;
    #[doc = include_str!("../../../book/src/training.md")]
    struct Training;
    #[doc = include_str!("../../../book/src/retrieval.md")]
    struct Retrieval;
}
