//! Fixtures shared by the benchmarks.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use rvg_core::dataio::{build_vocab, generate_corpus, CorpusConfig};
use rvg_core::model::prepare_examples;
use rvg_core::{Model, ModelConfig, ParameterStore, PreparedExample, Scene};

pub struct Fixture {
    pub store: ParameterStore,
    pub model: Model,
    pub examples: Vec<PreparedExample>,
    pub scenes: Vec<Scene>,
}

/// A freshly initialized model over a small synthetic training split.
pub fn fixture(hidden: usize, n_scenes: usize) -> Fixture {
    let corpus_cfg = CorpusConfig {
        n_scenes,
        ..CorpusConfig::default()
    };
    let corpus = generate_corpus(1, &corpus_cfg).expect("corpus");
    let tokens = corpus.train.pruned_tokens().expect("tokens");
    let vocab = build_vocab(corpus.train.expressions.iter().map(|e| tokens[&e.id].as_slice()), 1).expect("vocab");
    let cfg = ModelConfig {
        embed: hidden,
        hidden,
        ..ModelConfig::default()
    };
    let mut store = ParameterStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let model = Model::register(&mut store, vocab.len(), &cfg, corpus_cfg.feature_dim, &mut rng).expect("model");
    let examples = prepare_examples(&corpus.train, &vocab, cfg.max_len).expect("examples");
    Fixture {
        store,
        model,
        examples,
        scenes: corpus.train.scenes,
    }
}
