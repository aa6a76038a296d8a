//! Latent-tree recursive visual grounding.
//!
//! An expression is composed bottom-up into a binary tree whose merges are
//! chosen by a learned policy; grounding scores over image regions are then
//! accumulated along that tree. Everything runs on a small reverse-mode
//! autodiff tape over `f64`.

pub mod audit;
pub mod dataio;
pub mod diffcore;
pub mod encoders;
pub mod error;
pub mod grounding;
pub mod model;
pub mod training;
pub mod treebuilder;
pub mod viz;

pub use dataio::{Dataset, Expression, Scene, Vocabulary};
pub use diffcore::{Gradients, GumbelSampler, ParamId, ParameterStore, Tape, Tensor, Var};
pub use error::{Error, Result};
pub use grounding::{BBox, FeatureChild, GroundingTrace, Region, ScoreTerms};
pub use model::{AblationVariant, Model, ModelConfig, PreparedExample};
pub use training::{RunConfig, TrainConfig};
pub use treebuilder::{BinaryTree, ExpertTree, RvGTree, Span};
