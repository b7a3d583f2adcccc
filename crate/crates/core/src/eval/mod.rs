//! Evaluation and diagnostics: ranking and calibration metrics, the three
//! downstream classification protocols, embedding-geometry analysis, and
//! cross-modal retrieval with its permutation test.

pub mod metrics;
pub mod probes;
pub mod retrieval;
pub mod uniformity;

pub use metrics::{auc, ece, ReliabilityBins};
pub use probes::{
    fine_tune, linear_eval, linear_probe, FineTuneOutcome, FtConfig, HeadConfig, HeadOutcome,
    LogisticFit, LpConfig, ProbeResult, Protocol,
};
pub use retrieval::{
    manifestation_estimate, manifestation_metrics, report_retrieve, retrieval_permutation_test,
    ConfusionMatrix, EstimationMetrics, PermutationOutcome, RetrievalConfig,
};
pub use uniformity::{alignment_uniformity, AngularDensity, KdeConfig, UniformityReport};
