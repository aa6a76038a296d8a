use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use log::info;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use rvg_core::audit::gradient_case;
use rvg_core::dataio::{
    build_vocab, generate_corpus, load_dataset, load_word_vectors, split_paths, summarize, write_atomic,
    write_dataset, Dataset, DatasetManifest,
};
use rvg_core::diffcore::{ParameterStore, Tape};
use rvg_core::model::{configure_ablation, forward, prepare_examples, Policy, TreeSource};
use rvg_core::training::{
    evaluate, run_phase, save_checkpoint, train_model, Checkpoint, EvalReport, LogLine, Phase, TrainContext,
};
use rvg_core::viz::{tree_to_dot, RoleFrequency};
use rvg_core::{AblationVariant, Error, Model, RunConfig, Vocabulary};

use crate::manifest::RunManifest;
use crate::{CliError, Common};

type CmdResult = Result<(), CliError>;

fn io_err(path: &Path, e: std::io::Error) -> Error {
    Error::Io {
        path: path.to_path_buf(),
        source: e,
    }
}

/// Built-in defaults, then the config file, then command-line flags.
pub fn effective_config(common: &Common) -> Result<RunConfig, CliError> {
    let mut cfg = match &common.config {
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| io_err(p, e))?;
            RunConfig::from_toml(&text)?
        }
        None => RunConfig::default(),
    };
    if let Some(s) = common.seed {
        cfg.seed = s;
    }
    if let Some(v) = common.variant {
        cfg.train.variant = v;
    }
    if let Some(t) = common.tau {
        cfg.train.tau = t;
    }
    if common.no_noise {
        cfg.train.noise = false;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), Error> {
    let mut json = serde_json::to_vec_pretty(value)?;
    json.push(b'\n');
    write_atomic(path, &json)
}

fn split_inputs(data: &Path, split: &str) -> Vec<PathBuf> {
    let (s, e, t) = split_paths(data, split);
    vec![s, e, t]
}

fn load_vocab(data: &Path, train: &Dataset, min_freq: usize) -> Result<Vocabulary, Error> {
    let path = data.join("vocab.json");
    if path.exists() {
        let text = std::fs::read_to_string(&path).map_err(|e| io_err(&path, e))?;
        return Ok(serde_json::from_str(&text)?);
    }
    log::warn!("{} not found; building the vocabulary from the training split", path.display());
    let tokens = train.pruned_tokens()?;
    build_vocab(train.expressions.iter().map(|e| tokens[&e.id].as_slice()), min_freq)
}

fn feature_dim(ds: &Dataset) -> Result<usize, Error> {
    ds.feature_dim()
        .ok_or_else(|| Error::Validation("dataset has no regions".into()))
}

fn fresh_model(cfg: &RunConfig, vocab: &Vocabulary, dim: usize) -> Result<(ParameterStore, Model), Error> {
    let mut store = ParameterStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let model = Model::register(&mut store, vocab.len(), &cfg.model, dim, &mut rng)?;
    if let Some(path) = &cfg.model.word_vectors {
        let vectors = load_word_vectors(Path::new(path), vocab, cfg.model.embed)?;
        let n = model.table.warm_start(&mut store, &vectors)?;
        info!("initialized {n} embedding rows from {path}");
    }
    Ok((store, model))
}

/// Collects log lines for the run log and reports the last line of each
/// epoch.
struct Progress {
    lines: Vec<String>,
    last: Option<LogLine>,
}

impl Progress {
    fn new() -> Self {
        Progress {
            lines: Vec::new(),
            last: None,
        }
    }

    fn record(&mut self, line: &LogLine) {
        if let Some(prev) = self.last {
            if prev.epoch != line.epoch || prev.phase != line.phase {
                info!("{prev}");
            }
        }
        self.lines.push(line.to_string());
        self.last = Some(*line);
    }

    fn finish(self, path: &Path) -> Result<(), Error> {
        if let Some(l) = self.last {
            info!("{l}");
        }
        let mut text = self.lines.join("\n");
        text.push('\n');
        write_atomic(path, text.as_bytes())
    }
}

pub fn gen(common: &Common) -> CmdResult {
    let cfg = effective_config(common)?;
    let corpus = generate_corpus(cfg.seed, &cfg.corpus)?;
    let out = &common.out;
    let mut manifest = RunManifest::new("gen", &cfg, &[])?;
    let tokens = corpus.train.pruned_tokens()?;
    let vocab = build_vocab(
        corpus.train.expressions.iter().map(|e| tokens[&e.id].as_slice()),
        cfg.model.min_freq,
    )?;
    let mut splits = std::collections::BTreeMap::new();
    for (name, ds) in [("train", &corpus.train), ("val", &corpus.val), ("test", &corpus.test)] {
        write_dataset(out, name, ds)?;
        for p in split_inputs(out, name) {
            manifest.output(&p);
        }
        splits.insert(name.to_string(), summarize(ds));
        info!("{name}: {} scenes, {} expressions", ds.scenes.len(), ds.expressions.len());
    }
    let vocab_path = out.join("vocab.json");
    write_json(&vocab_path, &vocab)?;
    manifest.output(&vocab_path);
    let ds_manifest = DatasetManifest {
        seed: cfg.seed,
        feature_dim: cfg.corpus.feature_dim,
        splits,
        vocab_size: vocab.len(),
        vocab_checksum: vocab.checksum(),
        corpus: cfg.corpus.clone(),
    };
    let ds_path = out.join("dataset.json");
    write_json(&ds_path, &ds_manifest)?;
    manifest.output(&ds_path);
    manifest.write(out)?;
    info!("vocabulary of {} tokens written to {}", vocab.len(), out.display());
    Ok(())
}

struct Loaded {
    cfg: RunConfig,
    train: Dataset,
    vocab: Vocabulary,
    store: ParameterStore,
    model: Model,
    inputs: Vec<PathBuf>,
}

fn load_for_training(common: &Common, data: &Path, init: Option<&Path>, require_experts: bool) -> Result<Loaded, CliError> {
    let mut cfg = effective_config(common)?;
    let train = load_dataset(data, "train", require_experts)?;
    let dim = feature_dim(&train)?;
    let mut inputs = split_inputs(data, "train");
    inputs.push(data.join("vocab.json"));
    if let Some(cfg_path) = &common.config {
        inputs.push(cfg_path.clone());
    }
    let (store, model, vocab) = match init {
        Some(path) => {
            let restored = rvg_core::training::load_checkpoint(path)?;
            inputs.push(path.to_path_buf());
            if restored.model.feature_dim != dim {
                return Err(Error::Validation(format!(
                    "checkpoint expects {}-wide region features, dataset has {dim}",
                    restored.model.feature_dim
                ))
                .into());
            }
            if restored.variant != cfg.train.variant {
                if common.variant.is_none() && common.config.is_none() {
                    info!("using variant `{}` from the checkpoint", restored.variant);
                    cfg.train.variant = restored.variant;
                } else {
                    log::warn!("checkpoint was trained as `{}`, continuing as `{}`", restored.variant, cfg.train.variant);
                }
            }
            cfg.model = restored.config;
            (restored.store, restored.model, restored.vocab)
        }
        None => {
            let vocab = load_vocab(data, &train, cfg.model.min_freq)?;
            let (store, model) = fresh_model(&cfg, &vocab, dim)?;
            (store, model, vocab)
        }
    };
    Ok(Loaded {
        cfg,
        train,
        vocab,
        store,
        model,
        inputs,
    })
}

fn train_phase(common: &Common, data: &Path, init: Option<&Path>, phase: Phase) -> CmdResult {
    let mut l = load_for_training(common, data, init, phase == Phase::Pretrain)?;
    let ablation = configure_ablation(l.cfg.train.variant);
    if phase == Phase::Pretrain && ablation.tree == TreeSource::None {
        log::warn!("variant `{}` has no tree; pretraining trains grounding only", ablation.variant);
    }
    let examples = prepare_examples(&l.train, &l.vocab, l.cfg.model.max_len)?;
    let epochs = match phase {
        Phase::Pretrain => l.cfg.train.pretrain_epochs,
        Phase::Finetune => l.cfg.train.finetune_epochs,
    };
    let ctx = TrainContext {
        model: &l.model,
        ablation,
        cfg: &l.cfg.train,
        scenes: &l.train.scenes,
        seed: l.cfg.seed,
    };
    let mut progress = Progress::new();
    run_phase(&mut l.store, &ctx, &examples, phase, epochs, &mut |line| progress.record(line))?;
    let out = &common.out;
    let mut manifest = RunManifest::new(&phase.to_string(), &l.cfg, &l.inputs)?;
    let log_path = out.join("train.log");
    progress.finish(&log_path)?;
    let ck = Checkpoint::capture(&l.store, &l.cfg.model, l.model.feature_dim, l.cfg.train.variant, &l.vocab);
    let ck_path = out.join("checkpoint.json");
    save_checkpoint(&ck_path, &ck)?;
    manifest.output(&log_path);
    manifest.output(&ck_path);
    manifest.write(out)?;
    info!("checkpoint written to {}", ck_path.display());
    Ok(())
}

pub fn pretrain(common: &Common, data: &Path, init: Option<&Path>) -> CmdResult {
    train_phase(common, data, init, Phase::Pretrain)
}

pub fn finetune(common: &Common, data: &Path, init: Option<&Path>) -> CmdResult {
    train_phase(common, data, init, Phase::Finetune)
}

#[derive(Serialize)]
struct EvalSummary<'a> {
    checkpoint: String,
    split: &'a str,
    variant: AblationVariant,
    correct: usize,
    total: usize,
    accuracy: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    predictions: Option<&'a [rvg_core::training::Prediction]>,
}

pub fn eval(common: &Common, checkpoint: &Path, data: &Path, split: &str, predictions: bool) -> CmdResult {
    let cfg = effective_config(common)?;
    let restored = rvg_core::training::load_checkpoint(checkpoint)?;
    let ds = load_dataset(data, split, false)?;
    let dim = feature_dim(&ds)?;
    if dim != restored.model.feature_dim {
        return Err(Error::Validation(format!(
            "checkpoint expects {}-wide region features, dataset has {dim}",
            restored.model.feature_dim
        ))
        .into());
    }
    let ablation = configure_ablation(restored.variant);
    let examples = prepare_examples(&ds, &restored.vocab, restored.config.max_len)?;
    let report: EvalReport = evaluate(&restored.store, &restored.model, &ablation, &examples, &ds.scenes)?;
    let out = &common.out;
    let mut inputs = split_inputs(data, split);
    inputs.push(checkpoint.to_path_buf());
    let mut manifest = RunManifest::new("eval", &cfg, &inputs)?;
    let summary = EvalSummary {
        checkpoint: checkpoint.display().to_string(),
        split,
        variant: restored.variant,
        correct: report.correct,
        total: report.total,
        accuracy: report.accuracy,
        predictions: predictions.then_some(report.predictions.as_slice()),
    };
    let path = out.join("eval.json");
    write_json(&path, &summary)?;
    manifest.output(&path);
    manifest.write(out)?;
    println!("accuracy={:.4} correct={} total={}", report.accuracy, report.correct, report.total);
    Ok(())
}

#[derive(Serialize)]
struct AblationRow {
    variant: AblationVariant,
    accuracy: f64,
    correct: usize,
    total: usize,
}

pub fn ablate(common: &Common, data: &Path, variants: &[AblationVariant]) -> CmdResult {
    let cfg = effective_config(common)?;
    let variants: Vec<AblationVariant> = if variants.is_empty() {
        AblationVariant::ALL.to_vec()
    } else {
        variants.to_vec()
    };
    let train = load_dataset(data, "train", false)?;
    let test = load_dataset(data, "test", false)?;
    let dim = feature_dim(&train)?;
    let vocab = load_vocab(data, &train, cfg.model.min_freq)?;
    let train_ex = prepare_examples(&train, &vocab, cfg.model.max_len)?;
    let test_ex = prepare_examples(&test, &vocab, cfg.model.max_len)?;
    let mut rows = Vec::new();
    for v in variants {
        let mut run_cfg = cfg.clone();
        run_cfg.train.variant = v;
        let (mut store, model) = fresh_model(&run_cfg, &vocab, dim)?;
        let ablation = configure_ablation(v);
        let ctx = TrainContext {
            model: &model,
            ablation,
            cfg: &run_cfg.train,
            scenes: &train.scenes,
            seed: run_cfg.seed,
        };
        info!("training variant `{v}`");
        let mut progress = Progress::new();
        train_model(&mut store, &ctx, &train_ex, &mut |l| progress.record(l))?;
        progress.finish(&common.out.join(format!("train-{v}.log")))?;
        let report = evaluate(&store, &model, &ablation, &test_ex, &test.scenes)?;
        info!("{v}: accuracy {:.4}", report.accuracy);
        rows.push(AblationRow {
            variant: v,
            accuracy: report.accuracy,
            correct: report.correct,
            total: report.total,
        });
    }
    let out = &common.out;
    let mut inputs: Vec<PathBuf> = ["train", "test"].iter().flat_map(|s| split_inputs(data, s)).collect();
    inputs.push(data.join("vocab.json"));
    let mut manifest = RunManifest::new("ablate", &cfg, &inputs)?;
    let mut table = String::from("variant\taccuracy\tcorrect\ttotal\n");
    for r in &rows {
        writeln!(table, "{}\t{:.4}\t{}\t{}", r.variant, r.accuracy, r.correct, r.total).unwrap();
        manifest.output(&out.join(format!("train-{}.log", r.variant)));
    }
    let tsv = out.join("metrics.tsv");
    write_atomic(&tsv, table.as_bytes())?;
    let json = out.join("metrics.json");
    write_json(&json, &rows)?;
    manifest.output(&tsv);
    manifest.output(&json);
    manifest.write(out)?;
    print!("{table}");
    Ok(())
}

#[derive(Serialize)]
struct GradcheckRow {
    seed: u64,
    words: usize,
    regions: usize,
    variant: AblationVariant,
    entries: usize,
    max_rel_error: f64,
    passed: bool,
}

pub fn gradcheck(common: &Common, configs: u64, dim: usize, tol: f64) -> CmdResult {
    let cfg = effective_config(common)?;
    if dim == 0 || !(tol > 0.0) {
        return Err(CliError::Usage("--dim and --tol must be positive".into()));
    }
    let mut rows = Vec::new();
    for i in 0..configs {
        let case = gradient_case(cfg.seed.wrapping_add(i), dim, tol, Some(24))?;
        let row = GradcheckRow {
            seed: case.seed,
            words: case.words,
            regions: case.regions,
            variant: case.variant,
            entries: case.report.entries_checked(),
            max_rel_error: case.report.max_rel_error(),
            passed: case.report.passed(),
        };
        println!(
            "seed={} words={} regions={} variant={} entries={} max_rel_error={:.3e} {}",
            row.seed,
            row.words,
            row.regions,
            row.variant,
            row.entries,
            row.max_rel_error,
            if row.passed { "ok" } else { "FAILED" }
        );
        rows.push(row);
    }
    let out = &common.out;
    let mut manifest = RunManifest::new("gradcheck", &cfg, &[])?;
    let path = out.join("gradcheck.json");
    write_json(&path, &rows)?;
    manifest.output(&path);
    manifest.write(out)?;
    let failed = rows.iter().filter(|r| !r.passed).count();
    if failed > 0 {
        return Err(CliError::Numeric(format!(
            "{failed} of {configs} configurations exceed tolerance {tol}"
        )));
    }
    Ok(())
}

fn safe_name(id: &str) -> String {
    id.chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' { c } else { '_' })
        .collect()
}

pub fn viz(
    common: &Common,
    checkpoint: &Path,
    data: &Path,
    split: &str,
    exprs: &[String],
    limit: Option<usize>,
) -> CmdResult {
    let cfg = effective_config(common)?;
    let restored = rvg_core::training::load_checkpoint(checkpoint)?;
    let ablation = configure_ablation(restored.variant);
    if ablation.tree == TreeSource::None {
        return Err(CliError::Usage(format!("variant `{}` builds no tree to draw", restored.variant)));
    }
    let ds = load_dataset(data, split, false)?;
    let examples = prepare_examples(&ds, &restored.vocab, restored.config.max_len)?;
    let wanted: Vec<&str> = if exprs.is_empty() {
        examples.first().map(|e| e.id.as_str()).into_iter().collect()
    } else {
        exprs.iter().map(String::as_str).collect()
    };
    for id in &wanted {
        if !examples.iter().any(|e| e.id == *id) {
            return Err(Error::Validation(format!("no expression `{id}` in split `{split}`")).into());
        }
    }
    let out = &common.out;
    let mut inputs = split_inputs(data, split);
    inputs.push(checkpoint.to_path_buf());
    let mut manifest = RunManifest::new("viz", &cfg, &inputs)?;
    let mut roles = RoleFrequency::default();
    let n = limit.unwrap_or(examples.len()).min(examples.len());
    for (i, ex) in examples.iter().enumerate() {
        let in_table = i < n;
        let drawn = wanted.contains(&ex.id.as_str());
        if !in_table && !drawn {
            continue;
        }
        if ablation.tree == TreeSource::Expert && ex.expert.is_none() {
            log::warn!("`{}` has no expert tree; skipped", ex.id);
            continue;
        }
        let mut tape = Tape::new(&restored.store);
        let scene = &ds.scenes[ex.scene];
        let fwd = forward(&mut tape, &restored.model, &ablation, ex, scene, Policy::Greedy)?;
        let (Some(tree), Some(trace)) = (fwd.tree, fwd.trace) else {
            continue;
        };
        let words = ex.tokens.real_words();
        if in_table {
            roles.add(&tree, &trace, words)?;
        }
        if drawn {
            let dot = tree_to_dot(&ex.id, &tree, &trace, words)?;
            let path = out.join(format!("{}.dot", safe_name(&ex.id)));
            write_atomic(&path, dot.as_bytes())?;
            manifest.output(&path);
            print!("{dot}");
        }
    }
    let table_path = out.join("roles.tsv");
    write_atomic(&table_path, roles.to_table().as_bytes())?;
    manifest.output(&table_path);
    manifest.write(out)?;
    info!("role table over {} leaves written to {}", roles.total(), table_path.display());
    Ok(())
}
