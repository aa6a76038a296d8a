//! Parameter registry for the whole model and the per-example forward pass.

use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::dataio::{Dataset, Scene, Vocabulary};
use crate::diffcore::{ops, GumbelSampler, ParameterStore, Tape, Var};
use crate::encoders::{bilstm_leaf_states, embed_tokens, EmbeddingTable, EncoderDims, RecurrentParams, SentenceTokens};
use crate::error::{Error, Result};
use crate::grounding::{
    chain_ground, recursive_ground, GroundingInput, GroundingParams, GroundingTrace, RegionSet, RoleMode, ScoreTerms,
};
use crate::treebuilder::{build_tree, BuildMode, ExpertTree, MergePolicyParams, RvGTree};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    /// Word embedding width.
    pub embed: usize,
    /// Per-direction LSTM width.
    pub hidden: usize,
    /// Pruned expressions are truncated to this many tokens.
    pub max_len: usize,
    pub min_freq: usize,
    /// Optional word-vector file used to initialize embeddings.
    pub word_vectors: Option<String>,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            embed: 64,
            hidden: 64,
            max_len: 10,
            min_freq: crate::dataio::DEFAULT_MIN_FREQ,
            word_vectors: None,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        for (key, v) in [("embed", self.embed), ("hidden", self.hidden), ("max_len", self.max_len), ("min_freq", self.min_freq)] {
            if v == 0 {
                return Err(Error::Config {
                    key: format!("model.{key}"),
                    msg: "must be at least 1".into(),
                });
            }
        }
        Ok(())
    }
}

/// Model variants compared in ablation studies.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AblationVariant {
    Full,
    Chain,
    Fix,
    Scratch,
    NoNode,
    NoS,
    NoF,
}

/// Where the tree comes from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum TreeSource {
    Latent,
    Expert,
    None,
}

/// Model wiring implied by a variant.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct AblationConfig {
    pub variant: AblationVariant,
    pub terms: ScoreTerms,
    pub tree: TreeSource,
    pub pretrain: bool,
}

impl AblationVariant {
    pub const ALL: [AblationVariant; 7] = [
        AblationVariant::Full,
        AblationVariant::Chain,
        AblationVariant::Fix,
        AblationVariant::Scratch,
        AblationVariant::NoNode,
        AblationVariant::NoS,
        AblationVariant::NoF,
    ];

    pub fn name(self) -> &'static str {
        match self {
            AblationVariant::Full => "full",
            AblationVariant::Chain => "chain",
            AblationVariant::Fix => "fix",
            AblationVariant::Scratch => "scratch",
            AblationVariant::NoNode => "nonode",
            AblationVariant::NoS => "nos",
            AblationVariant::NoF => "nof",
        }
    }

    /// Names of the parameters a training forward pass reads.
    pub fn parameter_subset(self) -> BTreeSet<&'static str> {
        let mut s: BTreeSet<&'static str> = [
            "embedding",
            "lstm_fwd.w",
            "lstm_fwd.b",
            "lstm_bwd.w",
            "lstm_bwd.b",
            "heads.single.proj",
            "heads.single.out",
        ]
        .into_iter()
        .collect();
        let cfg = configure_ablation(self);
        if cfg.tree != TreeSource::None {
            s.extend(["treelstm.w", "treelstm.b", "roles.query"]);
        }
        if cfg.tree == TreeSource::Latent {
            s.insert("merge.query");
        }
        if cfg.tree == TreeSource::None || cfg.terms.in_node {
            s.insert("attention.single");
        }
        if cfg.tree != TreeSource::None && cfg.terms.in_node && cfg.terms.pairwise {
            s.extend(["attention.pair", "heads.pair.proj", "heads.pair.out"]);
        }
        s
    }
}

impl fmt::Display for AblationVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for AblationVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let lower = s.to_ascii_lowercase();
        AblationVariant::ALL
            .into_iter()
            .find(|v| v.name() == lower)
            .ok_or_else(|| Error::Invalid(format!("unknown variant `{s}` (expected one of full, chain, fix, scratch, nonode, nos, nof)")))
    }
}

pub fn configure_ablation(variant: AblationVariant) -> AblationConfig {
    let full = AblationConfig {
        variant,
        terms: ScoreTerms::FULL,
        tree: TreeSource::Latent,
        pretrain: true,
    };
    match variant {
        AblationVariant::Full => full,
        AblationVariant::Chain => AblationConfig {
            tree: TreeSource::None,
            ..full
        },
        AblationVariant::Fix => AblationConfig {
            tree: TreeSource::Expert,
            ..full
        },
        AblationVariant::Scratch => AblationConfig { pretrain: false, ..full },
        AblationVariant::NoNode => AblationConfig {
            terms: ScoreTerms {
                in_node: false,
                pairwise: false,
                accumulate: true,
            },
            ..full
        },
        AblationVariant::NoS => AblationConfig {
            terms: ScoreTerms {
                accumulate: false,
                ..ScoreTerms::FULL
            },
            ..full
        },
        AblationVariant::NoF => AblationConfig {
            terms: ScoreTerms {
                pairwise: false,
                ..ScoreTerms::FULL
            },
            ..full
        },
    }
}

/// Handles to every parameter group.
#[derive(Debug, Clone, Copy)]
pub struct Model {
    pub dims: EncoderDims,
    pub feature_dim: usize,
    pub table: EmbeddingTable,
    pub recurrent: RecurrentParams,
    pub merge: MergePolicyParams,
    pub grounding: GroundingParams,
}

impl Model {
    pub fn register<R: Rng>(
        store: &mut ParameterStore,
        vocab_size: usize,
        cfg: &ModelConfig,
        feature_dim: usize,
        rng: &mut R,
    ) -> Result<Self> {
        cfg.validate()?;
        if feature_dim == 0 {
            return Err(Error::Invalid("region features must have positive width".into()));
        }
        let dims = EncoderDims {
            vocab: vocab_size,
            embed: cfg.embed,
            hidden: cfg.hidden,
        };
        let table = EmbeddingTable::register(store, vocab_size, cfg.embed, rng)?;
        let recurrent = RecurrentParams::register(store, dims, rng)?;
        let merge = MergePolicyParams::register(store, dims.node_width(), rng)?;
        let grounding = GroundingParams::register(store, dims.node_width(), cfg.embed, feature_dim, rng)?;
        Ok(Model {
            dims,
            feature_dim,
            table,
            recurrent,
            merge,
            grounding,
        })
    }
}

/// An expression encoded against a vocabulary, ready for the model.
#[derive(Debug, Clone, PartialEq)]
pub struct PreparedExample {
    pub id: String,
    pub tokens: SentenceTokens,
    pub scene: usize,
    pub gt: usize,
    pub expert: Option<ExpertTree>,
}

/// Prunes, encodes and truncates every expression. Expert trees are dropped
/// (with a warning) when truncation cuts their leaves.
pub fn prepare_examples(ds: &Dataset, vocab: &Vocabulary, max_len: usize) -> Result<Vec<PreparedExample>> {
    let index = ds.scene_index();
    ds.expressions
        .iter()
        .map(|e| {
            let words = e.pruned()?;
            let ids = vocab.encode(&words);
            let tokens = SentenceTokens::new(ids, words, Some(max_len), None)?;
            let scene = *index
                .get(e.scene_id.as_str())
                .ok_or_else(|| Error::Validation(format!("unknown scene `{}`", e.scene_id)))?;
            let expert = ds.experts.get(&e.id).and_then(|t| {
                if t.check_leaves(tokens.words()).is_ok() {
                    Some(t.clone())
                } else {
                    log::warn!("expert tree for `{}` dropped after truncation", e.id);
                    None
                }
            });
            Ok(PreparedExample {
                id: e.id.clone(),
                tokens,
                scene,
                gt: e.gt,
                expert,
            })
        })
        .collect()
}

/// How trees and roles are chosen in one forward pass.
pub enum Policy<'a> {
    /// Gumbel straight-through trees and roles.
    Sample(&'a mut GumbelSampler),
    /// Expert trees, sampled roles; the tree loss is available.
    Expert(&'a mut GumbelSampler),
    /// Greedy trees and roles with constant selections.
    Greedy,
    /// Expert trees with constant, given roles (indexed by internal node).
    Frozen(&'a [crate::grounding::FeatureChild]),
}

pub struct ForwardOutput {
    pub scores: Var,
    pub tree_loss: Option<Var>,
    pub tree: Option<RvGTree>,
    pub trace: Option<GroundingTrace>,
}

impl ForwardOutput {
    pub fn prediction(&self, tape: &Tape) -> Result<usize> {
        ops::argmax(tape.value(self.scores), None)
    }
}

fn expert_of(ex: &PreparedExample) -> Result<&ExpertTree> {
    ex.expert
        .as_ref()
        .ok_or_else(|| Error::Validation(format!("no expert tree for `{}`", ex.id)))
}

/// Scores every region of `scene` for one expression.
pub fn forward(
    tape: &mut Tape,
    model: &Model,
    ablation: &AblationConfig,
    ex: &PreparedExample,
    scene: &Scene,
    policy: Policy,
) -> Result<ForwardOutput> {
    let embedded = embed_tokens(tape, &ex.tokens, &model.table)?;
    let states = bilstm_leaf_states(tape, &embedded, &model.recurrent)?;
    let m = ex.tokens.real_len();
    let leaves = &states[..m];
    let embeddings = &embedded.vectors[..m];
    let regions = RegionSet::new(tape, &scene.regions, &model.grounding.heads)?;

    if ablation.tree == TreeSource::None {
        let scores = chain_ground(tape, leaves, embeddings, &regions, &model.grounding)?;
        return Ok(ForwardOutput {
            scores,
            tree_loss: None,
            tree: None,
            trace: None,
        });
    }

    let unk: Vec<bool> = (0..m).map(|i| ex.tokens.is_unk(i)).collect();
    let expert_tree = ablation.tree == TreeSource::Expert;
    let want_tree_loss = matches!(policy, Policy::Expert(_)) && ablation.tree == TreeSource::Latent;
    let (built, roles) = match policy {
        Policy::Sample(sampler) => {
            let mode = if expert_tree {
                BuildMode::Fixed(expert_of(ex)?)
            } else {
                BuildMode::Train(&mut *sampler)
            };
            let built = build_tree(tape, leaves, &unk, &model.merge, &model.recurrent, mode)?;
            (built, RoleMode::Sample(sampler))
        }
        Policy::Expert(sampler) => {
            let mode = if expert_tree {
                BuildMode::Fixed(expert_of(ex)?)
            } else {
                BuildMode::Expert(expert_of(ex)?)
            };
            let built = build_tree(tape, leaves, &unk, &model.merge, &model.recurrent, mode)?;
            (built, RoleMode::Sample(sampler))
        }
        Policy::Greedy => {
            let mode = if expert_tree {
                BuildMode::Fixed(expert_of(ex)?)
            } else {
                BuildMode::Eval
            };
            let built = build_tree(tape, leaves, &unk, &model.merge, &model.recurrent, mode)?;
            (built, RoleMode::Argmax)
        }
        Policy::Frozen(roles) => {
            let mode = BuildMode::Fixed(expert_of(ex)?);
            let built = build_tree(tape, leaves, &unk, &model.merge, &model.recurrent, mode)?;
            (built, RoleMode::Fixed(roles))
        }
    };
    let tree_loss = if want_tree_loss {
        built.tree_loss(tape)?
    } else {
        None
    };
    let input = GroundingInput {
        tree: &built.tree,
        node_states: &built.states,
        leaf_states: leaves,
        embeddings,
    };
    let g = recursive_ground(tape, &input, &regions, &model.grounding, ablation.terms, roles)?;
    Ok(ForwardOutput {
        scores: g.scores,
        tree_loss,
        tree: Some(built.tree),
        trace: Some(g.trace),
    })
}
