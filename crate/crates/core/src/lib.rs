//! Training-free checkpoint merging for detectors that share one label space.
//!
//! The crate covers named-tensor archives and task vectors ([`tensor`]),
//! the dense SVD kernel ([`linalg`]), five closed-form merge rules including
//! Real-aware residual merging ([`merge`]), AUC-based evaluation ([`metrics`]),
//! a synthetic harness for the recovery and alignment guarantees ([`theory`])
//! and a desk-scale end-to-end protocol ([`toy`]).

// Negated comparisons are how NaN gets rejected alongside out-of-range values.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod error;
pub mod linalg;
pub mod merge;
pub mod metrics;
pub mod tensor;
pub mod theory;
pub mod toy;

pub use error::{Error, Result};
pub use linalg::{Matrix, Projector, SvdResult};
pub use merge::{
    average_head, average_heads, merge_archives, merge_cart, merge_ta, merge_ties, merge_update,
    merge_wa, r2m_core, r2m_merge, r2m_norm_match, r2m_residuals, ties_trim, CoreDecomposition,
    CoreSummary, EtaVariant, HeadSet, MergeConfig, MergeOutcome, Method,
};
pub use metrics::{
    auc, auc_counts, drop, drop_max, feature_similarity, gain_unseen, render_table, ClassTag,
    EvalReport, FeatureMap, ScoreSet, Similarity,
};
pub use tensor::{
    apply_update, classify_slices, load_archive, save_archive, task_vector, task_vectors, vaxpy,
    vdot, vnorm, LayerSlice, Layout, Role, TaskVector, Tensor, TensorArchive,
};
pub use theory::{
    run_theory, LinearFeatureModel, LinearModelConfig, SyntheticTaskSpec, TheoryConfig,
    TheoryReport, TheoryRun, Verdicts,
};
pub use toy::{
    evaluate_in_dir, incremental_remerge, run_protocol, write_protocol_outputs, ProtocolConfig,
    ProtocolResult, ToyGeneratorFamily, ToyNet, ToyShape, TrainOptions,
};

/// Runs `f` on a dedicated pool of `threads` workers, or on the global pool
/// when `None`. Every parallel reduction in the crate is order-fixed, so the
/// thread count affects speed only.
pub fn with_threads<T: Send>(threads: Option<usize>, f: impl FnOnce() -> T + Send) -> Result<T> {
    match threads {
        None => Ok(f()),
        Some(0) => Err(Error::InvalidArgument(
            "thread count must be at least 1".into(),
        )),
        Some(n) => rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build()
            .map(|pool| pool.install(f))
            .map_err(|e| Error::InvalidArgument(format!("cannot build thread pool: {e}"))),
    }
}
