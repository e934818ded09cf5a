//! Series neural networks trained simple-to-complex.
//!
//! A series network is a DAG whose directed edges are conv-bn blocks and
//! whose nodes are elementwise-add junctions followed by relu (except the
//! output junction, which feeds the classifier head directly). Training
//! starts from a shallow plain chain and repeatedly grows the network by
//! attaching a two-layer residual path in parallel with every newest-stage
//! edge; zero-initializing the second batch norm's gamma makes each growth
//! exactly function-preserving, so optimization resumes where it left off.
//!
//! Crate layout mirrors that pipeline:
//! - [`tensor`], [`rng`]: the numeric substrate (dual precision, seeded).
//! - [`layers`]: conv / batch-norm / relu / add / head forward + backward.
//! - [`graph`]: the DAG, whole-network passes, receptive-field checking,
//!   and the checkpoint container.
//! - [`growth`]: growth planning, function-preserving application, and the
//!   gamma-based stopping rule.
//! - [`optim`]: momentum SGD, the two-phase lr schedule, EMA shadows.
//! - [`data`]: CIFAR-10 binary ingestion, normalization, batching, and a
//!   synthetic dataset for fast tests.
//! - [`harness`]: the s2c and e2e training regimes plus CSV reporting.

pub mod data;
pub mod error;
pub mod graph;
pub mod growth;
pub mod harness;
pub mod layers;
pub mod optim;
pub mod rng;
pub mod tensor;

pub use error::{CheckpointError, Error, Result};
pub use graph::{
    checkpoint::Checkpoint, default_channel_plan, forward, receptive_field_check, LayerName,
    LayerPlan, ParamKey, SeriesNetwork,
};
pub use growth::{
    apply_growth, apply_growth_standard_init, growth_stop_criterion, plan_growth,
    verify_preservation, GrowthDecision, GrowthPlan,
};
pub use harness::{config::TrainConfig, run_e2e, run_s2c, DataBundle};
pub use rng::SeededRng;
pub use tensor::{channel_moments, map_binary, BinaryOp, Element, Fill, Tensor};
