//! promptlab: a desk-scale prompt-tuning laboratory.
//!
//! A miniature dual encoder (patch-transformer image branch, token-transformer
//! text branch) is pretrained contrastively on synthetic shapes, then frozen
//! and adapted through learnable prompts. Training combines cross-entropy with
//! attention-guided input masking, a triplet-angle topology loss, and two-level
//! logit distillation, and is evaluated on a base-to-novel split designed to
//! expose shortcut overfitting.

// Every code block in the guide compiles and runs as a doc-test, so the
// book cannot drift from the library.
#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/autodiff.md")]
    mod autodiff {}
    #[doc = include_str!("../../../book/src/dual-encoder.md")]
    mod dual_encoder {}
    #[doc = include_str!("../../../book/src/masking.md")]
    mod masking {}
    #[doc = include_str!("../../../book/src/topology.md")]
    mod topology {}
    #[doc = include_str!("../../../book/src/distillation.md")]
    mod distillation {}
    #[doc = include_str!("../../../book/src/benchmark.md")]
    mod benchmark {}
    #[doc = include_str!("../../../book/src/cli.md")]
    mod cli {}
}

pub mod bench;
pub mod data;
pub mod distill;
pub mod gradcheck;
pub mod masking;
pub mod metrics;
pub mod model;
pub mod optim;
pub mod report;
pub mod runcfg;
pub mod tensor;
pub mod topology;
pub mod train;
