//! Fine-grained bimodal retrieval engine over local feature matrices.
//!
//! Items are represented by per-unit features (audio frames, text words) in
//! a shared space; similarity keeps the units separate until query time and
//! pools them through an attention-weighted local-to-global pipeline. On
//! top of the scoring kernel sit the contrastive and similarity-consistency
//! training objectives, a tape-based reverse-mode differentiator to train
//! the projection heads, binary feature-pack and checkpoint formats, a
//! synthetic-event benchmark generator, and recall-at-K evaluation.

pub mod autograd;
pub mod data;
pub mod error;
pub mod eval;
pub mod kernel;
pub mod losses;
pub mod matrix;
pub mod model;
pub mod numeric;

pub use error::{Error, PackErrorKind, Result};
pub use kernel::{AggregationMode, Modality, ScoreMatrix, ScoringConfig};
pub use losses::{LossBreakdown, LossConfig, LossFlags, MatchLabels};
pub use matrix::{FeatureMatrix, Mat};

pub use data::{
    generate_synthetic, load_checkpoint, load_dataset, read_pack_file, save_checkpoint,
    write_pack_file, FeaturePack, Manifest, ManifestPair, RetrievalDataset, Split, SyntheticConfig,
};
pub use eval::{evaluate, rank_of, AlignmentDump, Direction, DirectionMode, RetrievalResult};
pub use model::{
    init_heads, project, train, Adam, EpochMetrics, ProjectionHead, TrainConfig, TrainOutput,
};
