//! A desk-scale laboratory for cooperative multi-agent LiDAR perception.
//!
//! The crate covers the full loop: synthetic V2X scene generation
//! ([`sim`]), early fusion of multi-agent point clouds ([`fusion`]),
//! BEV-guided masking ([`bev`]), a small reverse-mode tensor engine
//! ([`nn`]), masked point-cloud reconstruction pretraining
//! ([`pretrain`]), and a detection/evaluation harness ([`eval`]).
//!
//! See the `book/` directory for a guided tour; every code snippet in
//! the book compiles and runs as a doctest of this crate.

pub mod bev;
pub mod config;
pub mod eval;
pub mod fusion;
pub mod geometry;
pub mod nn;
pub mod pretrain;
pub mod seed;
pub mod sim;

mod error;

pub use error::Error;

/// Book snippets double as doctests so the guide can never drift from
/// the library API.
#[cfg(doctest)]
mod booktest {
    macro_rules! booktest {
        ($name:ident, $path:literal) => {
            #[doc = include_str!(concat!("../../../book/src/", $path))]
            mod $name {}
        };
    }
    booktest!(introduction, "introduction.md");
    booktest!(geometry, "geometry.md");
    booktest!(simulator, "simulator.md");
    booktest!(fusion, "fusion.md");
    booktest!(bev_masking, "bev-masking.md");
    booktest!(tensor_engine, "tensor-engine.md");
    booktest!(pretraining, "pretraining.md");
    booktest!(detection, "detection.md");
    booktest!(experiments, "experiments.md");
    booktest!(file_formats, "file-formats.md");
}
