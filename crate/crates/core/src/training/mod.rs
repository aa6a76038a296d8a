//! Losses, the optimizer, batched training steps and evaluation.
//!
//! Every example in a batch runs on its own tape (in parallel when a rayon
//! pool with several threads is active). Gradients are gathered in example
//! order before summation, so results do not depend on the thread count.

pub mod checkpoint;
pub mod config;

pub use checkpoint::{load_checkpoint, save_checkpoint, values_checksum, Checkpoint, Restored};
pub use config::{RunConfig, TrainConfig};

use std::fmt;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataio::Scene;
use crate::diffcore::{Gradients, GumbelSampler, ParameterStore, Tape, Var};
use crate::error::{Error, Result};
use crate::grounding::iou;
use crate::model::{forward, AblationConfig, Model, Policy, PreparedExample, TreeSource};

/// Negative log-likelihood of the ground-truth region under a softmax over
/// region scores.
pub fn grounding_loss(tape: &mut Tape, scores: Var, gt: usize) -> Result<Var> {
    tape.cross_entropy(scores, None, gt)
}

/// One bias-corrected Adam update from the stored gradients, which are then
/// cleared. Fails without touching any value if a gradient is not finite.
pub fn adam_step(store: &mut ParameterStore, cfg: &TrainConfig) -> Result<()> {
    let ids: Vec<_> = store.ids().collect();
    for &id in &ids {
        if store.tensor(id).grad().iter().any(|g| !g.is_finite()) {
            let name = store.name(id).to_string();
            store.zero_grad();
            return Err(Error::NonFiniteGradient(name));
        }
    }
    let t = store.step() + 1;
    let c1 = 1.0 - cfg.beta1.powi(t as i32);
    let c2 = 1.0 - cfg.beta2.powi(t as i32);
    for id in ids {
        let (tensor, moments) = store.slot_mut(id);
        let grads = tensor.grad().to_vec();
        let values = tensor.values_mut();
        for (k, g) in grads.into_iter().enumerate() {
            let m = cfg.beta1 * moments.first[k] + (1.0 - cfg.beta1) * g;
            let v = cfg.beta2 * moments.second[k] + (1.0 - cfg.beta2) * g * g;
            moments.first[k] = m;
            moments.second[k] = v;
            values[k] -= cfg.lr * (m / c1) / ((v / c2).sqrt() + cfg.eps);
        }
    }
    store.set_step(t);
    store.zero_grad();
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Phase {
    /// Expert trees with the tree loss added.
    Pretrain,
    /// Latent trees learned from the grounding loss alone.
    Finetune,
}

impl fmt::Display for Phase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Phase::Pretrain => "pretrain",
            Phase::Finetune => "finetune",
        })
    }
}

/// How discrete choices are made while fine-tuning.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Selection {
    StraightThrough,
    /// Greedy choices with no gradient through them.
    Hard,
}

/// Immutable pieces shared by every step of a run.
#[derive(Clone, Copy)]
pub struct TrainContext<'a> {
    pub model: &'a Model,
    pub ablation: AblationConfig,
    pub cfg: &'a TrainConfig,
    pub scenes: &'a [Scene],
    pub seed: u64,
}

#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct StepStats {
    /// Mean grounding loss over the examples used.
    pub loss: f64,
    /// Mean tree loss (zero outside pretraining).
    pub tree_loss: f64,
    pub correct: usize,
    pub used: usize,
    /// Examples skipped for lack of an expert tree.
    pub skipped: usize,
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d4_9bb1_33b1_11eb);
    z ^ (z >> 31)
}

/// Seed for the sampler of example `index` at optimizer step `step`.
pub fn example_seed(seed: u64, step: u64, index: usize) -> u64 {
    splitmix(splitmix(seed ^ splitmix(step)) ^ index as u64)
}

struct ExampleResult {
    grads: Gradients,
    loss: f64,
    tree_loss: f64,
    correct: bool,
}

fn needs_expert(ctx: &TrainContext, phase: Phase) -> bool {
    match ctx.ablation.tree {
        TreeSource::Expert => true,
        TreeSource::Latent => phase == Phase::Pretrain,
        TreeSource::None => false,
    }
}

fn example_gradients(
    store: &ParameterStore,
    ctx: &TrainContext,
    ex: &PreparedExample,
    phase: Phase,
    selection: Selection,
    seed: u64,
) -> Result<ExampleResult> {
    let scene = ctx
        .scenes
        .get(ex.scene)
        .ok_or(Error::OutOfRange {
            what: "scene",
            index: ex.scene,
            len: ctx.scenes.len(),
        })?;
    let mut sampler = GumbelSampler::new(ctx.cfg.tau, ctx.cfg.noise, seed)?;
    let mut tape = Tape::new(store);
    let policy = match (phase, selection) {
        (Phase::Pretrain, _) => Policy::Expert(&mut sampler),
        (Phase::Finetune, Selection::StraightThrough) => Policy::Sample(&mut sampler),
        (Phase::Finetune, Selection::Hard) => Policy::Greedy,
    };
    let out = forward(&mut tape, ctx.model, &ctx.ablation, ex, scene, policy)?;
    let predicted = out.prediction(&tape)?;
    let ground = grounding_loss(&mut tape, out.scores, ex.gt)?;
    let loss = tape.value(ground)[0];
    let (total, tree_loss) = match out.tree_loss {
        Some(t) => {
            let tree_loss = tape.value(t)[0];
            let weighted = tape.scale(t, ctx.cfg.tree_loss_weight)?;
            (tape.add(ground, weighted)?, tree_loss)
        }
        None => (ground, 0.0),
    };
    let grads = tape.backward(total)?;
    Ok(ExampleResult {
        grads,
        loss,
        tree_loss,
        correct: is_correct(scene, predicted, ex.gt),
    })
}

/// Mean gradients over a batch, without applying them.
pub fn batch_gradients(
    store: &ParameterStore,
    ctx: &TrainContext,
    batch: &[&PreparedExample],
    phase: Phase,
    selection: Selection,
) -> Result<(Gradients, StepStats)> {
    let step = store.step();
    let results: Vec<Option<Result<ExampleResult>>> = batch
        .par_iter()
        .enumerate()
        .map(|(i, ex)| {
            if needs_expert(ctx, phase) && ex.expert.is_none() {
                return None;
            }
            let seed = example_seed(ctx.seed, step, i);
            Some(example_gradients(store, ctx, ex, phase, selection, seed))
        })
        .collect();
    let mut grads = Gradients::for_store(store);
    let mut stats = StepStats::default();
    for r in results {
        match r {
            None => stats.skipped += 1,
            Some(r) => {
                let r = r?;
                grads.add_assign(&r.grads);
                stats.loss += r.loss;
                stats.tree_loss += r.tree_loss;
                stats.correct += usize::from(r.correct);
                stats.used += 1;
            }
        }
    }
    if stats.used > 0 {
        let k = 1.0 / stats.used as f64;
        grads.scale(k);
        stats.loss *= k;
        stats.tree_loss *= k;
    }
    Ok((grads, stats))
}

/// Computes batch gradients and applies one optimizer update.
pub fn train_step(
    store: &mut ParameterStore,
    ctx: &TrainContext,
    batch: &[&PreparedExample],
    phase: Phase,
    selection: Selection,
) -> Result<StepStats> {
    let (grads, stats) = batch_gradients(store, ctx, batch, phase, selection)?;
    if stats.used == 0 {
        return Ok(stats);
    }
    store.accumulate(&grads);
    adam_step(store, ctx.cfg)?;
    Ok(stats)
}

/// One pretraining update; returns `(tree loss, grounding loss)`.
pub fn pretrain_step(store: &mut ParameterStore, ctx: &TrainContext, batch: &[&PreparedExample]) -> Result<(f64, f64)> {
    let s = train_step(store, ctx, batch, Phase::Pretrain, Selection::StraightThrough)?;
    Ok((s.tree_loss, s.loss))
}

/// One fine-tuning update; returns the grounding loss.
pub fn finetune_step(
    store: &mut ParameterStore,
    ctx: &TrainContext,
    batch: &[&PreparedExample],
    selection: Selection,
) -> Result<f64> {
    Ok(train_step(store, ctx, batch, Phase::Finetune, selection)?.loss)
}

/// A prediction counts as correct when it is the ground-truth region or,
/// with boxes available, overlaps it with IoU above one half.
pub fn is_correct(scene: &Scene, predicted: usize, gt: usize) -> bool {
    if predicted == gt {
        return true;
    }
    match (scene.regions.get(predicted), scene.regions.get(gt)) {
        (Some(p), Some(g)) => match (&p.bbox, &g.bbox) {
            (Some(a), Some(b)) => iou(a, b).is_ok_and(|v| v > 0.5),
            _ => false,
        },
        _ => false,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub id: String,
    pub predicted: usize,
    pub gt: usize,
    pub correct: bool,
    pub scores: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub correct: usize,
    pub total: usize,
    pub accuracy: f64,
    pub predictions: Vec<Prediction>,
}

/// Greedy decoding over `examples`. Examples the variant cannot run (no
/// expert tree for an expert-tree variant) count as wrong.
pub fn evaluate(
    store: &ParameterStore,
    model: &Model,
    ablation: &AblationConfig,
    examples: &[PreparedExample],
    scenes: &[Scene],
) -> Result<EvalReport> {
    let predictions: Vec<Prediction> = examples
        .par_iter()
        .map(|ex| {
            let scene = scenes.get(ex.scene).ok_or(Error::OutOfRange {
                what: "scene",
                index: ex.scene,
                len: scenes.len(),
            })?;
            if ablation.tree == TreeSource::Expert && ex.expert.is_none() {
                log::warn!("`{}` has no expert tree; counted as wrong", ex.id);
                return Ok(Prediction {
                    id: ex.id.clone(),
                    predicted: usize::MAX,
                    gt: ex.gt,
                    correct: false,
                    scores: Vec::new(),
                });
            }
            let mut tape = Tape::new(store);
            let out = forward(&mut tape, model, ablation, ex, scene, Policy::Greedy)?;
            let predicted = out.prediction(&tape)?;
            Ok(Prediction {
                id: ex.id.clone(),
                predicted,
                gt: ex.gt,
                correct: is_correct(scene, predicted, ex.gt),
                scores: tape.value(out.scores).to_vec(),
            })
        })
        .collect::<Result<_>>()?;
    let correct = predictions.iter().filter(|p| p.correct).count();
    let total = predictions.len();
    Ok(EvalReport {
        correct,
        total,
        accuracy: if total == 0 { 0.0 } else { correct as f64 / total as f64 },
        predictions,
    })
}

/// One progress record, emitted after every optimizer step.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LogLine {
    pub step: u64,
    pub phase: Phase,
    pub epoch: usize,
    pub loss: f64,
    pub tree_loss: f64,
    /// Training accuracy so far in this epoch.
    pub accuracy: f64,
}

impl fmt::Display for LogLine {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "step={} phase={} epoch={} loss={:.4} tree_loss={:.4} acc={:.4}",
            self.step, self.phase, self.epoch, self.loss, self.tree_loss, self.accuracy
        )
    }
}

/// Runs `epochs` passes over `examples`, reshuffled each epoch from the
/// run seed.
pub fn run_phase(
    store: &mut ParameterStore,
    ctx: &TrainContext,
    examples: &[PreparedExample],
    phase: Phase,
    epochs: usize,
    log: &mut dyn FnMut(&LogLine),
) -> Result<()> {
    let phase_tag = match phase {
        Phase::Pretrain => 1u64,
        Phase::Finetune => 2u64,
    };
    for epoch in 0..epochs {
        let mut order: Vec<usize> = (0..examples.len()).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(ctx.seed);
        rng.set_stream(phase_tag << 32 | epoch as u64);
        order.shuffle(&mut rng);
        let (mut correct, mut seen) = (0usize, 0usize);
        for chunk in order.chunks(ctx.cfg.batch_size) {
            let batch: Vec<&PreparedExample> = chunk.iter().map(|&i| &examples[i]).collect();
            let stats = train_step(store, ctx, &batch, phase, Selection::StraightThrough)?;
            if stats.used == 0 {
                continue;
            }
            correct += stats.correct;
            seen += stats.used;
            log(&LogLine {
                step: store.step(),
                phase,
                epoch,
                loss: stats.loss,
                tree_loss: stats.tree_loss,
                accuracy: correct as f64 / seen as f64,
            });
        }
    }
    Ok(())
}

/// Pretraining (when the variant uses it) followed by fine-tuning.
pub fn train_model(
    store: &mut ParameterStore,
    ctx: &TrainContext,
    examples: &[PreparedExample],
    log: &mut dyn FnMut(&LogLine),
) -> Result<()> {
    if ctx.ablation.pretrain && ctx.ablation.tree != TreeSource::None {
        run_phase(store, ctx, examples, Phase::Pretrain, ctx.cfg.pretrain_epochs, log)?;
    }
    run_phase(store, ctx, examples, Phase::Finetune, ctx.cfg.finetune_epochs, log)
}
