pub mod aggregate;
pub mod chart;
pub mod datagen;
pub mod eval;
pub mod ensemble;
pub mod error;
pub mod io;
pub mod lasso;
pub mod matrix;
pub mod norms;
pub mod protocol;
pub mod seed;
pub mod site;
pub mod threshold;

pub use error::{Error, Result};
pub use matrix::{Matrix, NormKind};

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/intro.md")]
    mod intro {}
    #[doc = include_str!("../../../book/src/local-estimation.md")]
    mod local_estimation {}
    #[doc = include_str!("../../../book/src/thresholding.md")]
    mod thresholding {}
    #[doc = include_str!("../../../book/src/heat.md")]
    mod heat {}
    #[doc = include_str!("../../../book/src/iteheat.md")]
    mod iteheat {}
    #[doc = include_str!("../../../book/src/simulation.md")]
    mod simulation {}
    #[doc = include_str!("../../../book/src/cli.md")]
    mod cli {}
    #[doc = include_str!("../../../book/src/formats.md")]
    mod formats {}
}
