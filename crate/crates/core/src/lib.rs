pub mod config;
pub mod corpus;
pub mod error;
pub mod eval;
pub mod model;
pub mod numerics;
pub mod pipeline;
pub mod pruning;
pub mod recovery;
pub mod train;

pub use error::{Error, Result};

#[cfg(doctest)]
mod booktest {
    macro_rules! booktest {
        ($($name:ident),* $(,)?) => {$(
            #[doc = include_str!(concat!("../../../book/src/", stringify!($name), ".md"))]
            mod $name {}
        )*};
    }
    booktest!(
        ch01_overview,
        ch02_autodiff,
        ch03_model,
        ch04_importance,
        ch05_recovery,
        ch06_pipeline,
        ch07_evaluation,
        ch08_cli,
        ch09_checkpoints,
    );
}
