//! Structure propagation for transductive zero-shot classification.
//!
//! Seen-class classifiers are synthesized as convex combinations of one
//! "phantom" vector per unseen class, with combination weights taken from
//! seen-to-unseen similarity graphs in one or more semantic spaces and in
//! image space. Phantoms and graph weights are fit by alternating
//! minimization; the image graph is then rebuilt from the unseen-class means
//! implied by the current predictions, and the whole fit repeats.
//!
//! ```
//! use structprop::{generate, propagate, evaluate, FusionSpec, Hyperparams, SolverSettings, SynthParams};
//!
//! let data = generate(&SynthParams::default()).unwrap();
//! let spec = FusionSpec::parse("att", true).unwrap();
//! let hyper = Hyperparams { lambda: 1e-3, gamma: 1e-3, ..Default::default() };
//! let test = data.dataset.test_features();
//! let state = propagate(&data.dataset, test.view(), &spec, &hyper, &SolverSettings::default()).unwrap();
//! let report = evaluate(&state.predicted, &data.truth, data.dataset.unseen()).unwrap();
//! assert!(report.mean_accuracy > 0.5);
//! ```
//!
//! The `book/` directory at the repository root walks through each piece;
//! its code listings are compiled and run as doctests of this crate.

pub mod crossval;
pub mod data;
pub mod error;
pub mod fusion;
pub mod graph;
pub mod model;
pub mod optimizer;
pub mod propagation;
pub mod synth;

pub use crossval::{read_tune_table, split_seen_classes, tune, write_tune_table, CvResult, GridSpec, TuneRow};
pub use data::{class_prototypes, load_dataset, load_test_truth, save_dataset, ClassId, ClassPrototypes, Dataset, IngestConfig, Space};
pub use error::{Error, Result};
pub use fusion::{build_fused_objective, fused_semantic_weight, semantic_graphs, FusionSpec};
pub use graph::{scaled_distance, similarity_graph, zero_graph, SimilarityGraph};
pub use model::{predict, synthesize, ModelState};
pub use optimizer::{alternate, solve_beta, solve_v, HingeKind, Objective, SolverSettings};
pub use propagation::{evaluate, propagate, EvalReport, Hyperparams, PropagationState, TrainingSet};
pub use synth::{generate, write_synthetic, SynthParams, SyntheticData};

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/intro.md")]
    mod intro {}
    #[doc = include_str!("../../../book/src/data.md")]
    mod data {}
    #[doc = include_str!("../../../book/src/graphs.md")]
    mod graphs {}
    #[doc = include_str!("../../../book/src/synthesis.md")]
    mod synthesis {}
    #[doc = include_str!("../../../book/src/optimization.md")]
    mod optimization {}
    #[doc = include_str!("../../../book/src/propagation.md")]
    mod propagation {}
    #[doc = include_str!("../../../book/src/fusion.md")]
    mod fusion {}
    #[doc = include_str!("../../../book/src/tuning.md")]
    mod tuning {}
    #[doc = include_str!("../../../book/src/cli.md")]
    mod cli {}
}
