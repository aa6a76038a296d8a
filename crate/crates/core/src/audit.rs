//! Finite-difference audits of the complete one-example loss.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::dataio::Scene;
use crate::diffcore::{check_gradients, GradCheckOptions, GradCheckReport, ParameterStore};
use crate::encoders::SentenceTokens;
use crate::error::Result;
use crate::grounding::{FeatureChild, Region};
use crate::model::{configure_ablation, forward, AblationVariant, Model, ModelConfig, Policy, PreparedExample};
use crate::training::grounding_loss;
use crate::treebuilder::{ExpertTree, RvGTree};

const VARIANTS: [AblationVariant; 5] = [
    AblationVariant::Full,
    AblationVariant::NoNode,
    AblationVariant::NoS,
    AblationVariant::NoF,
    AblationVariant::Chain,
];

#[derive(Debug, Clone)]
pub struct AuditCase {
    pub seed: u64,
    pub words: usize,
    pub regions: usize,
    pub variant: AblationVariant,
    pub report: GradCheckReport,
}

/// Checks the grounding loss of one random expression (1 to 6 words, 2 to
/// 5 regions) with a fixed random tree and fixed random roles. All widths
/// are `dim`. At most `max_entries` entries per tensor are perturbed.
pub fn gradient_case(seed: u64, dim: usize, tol: f64, max_entries: Option<usize>) -> Result<AuditCase> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let vocab = 10;
    let m = rng.random_range(1..=6);
    let n = rng.random_range(2..=5);
    let variant = VARIANTS[(seed % VARIANTS.len() as u64) as usize];
    let mut store = ParameterStore::new();
    let cfg = ModelConfig {
        embed: dim,
        hidden: dim,
        ..ModelConfig::default()
    };
    let model = Model::register(&mut store, vocab, &cfg, dim, &mut rng)?;

    let ids: Vec<usize> = (0..m).map(|_| rng.random_range(1..vocab)).collect();
    let words: Vec<String> = ids.iter().map(|i| format!("w{i}")).collect();
    let merges: Vec<usize> = (0..m - 1).map(|t| rng.random_range(0..m - 1 - t)).collect();
    let tree = RvGTree::from_merges(m, &merges)?;
    let expert = ExpertTree::new(tree.to_binary(&words)?);
    let ex = PreparedExample {
        id: format!("audit{seed}"),
        tokens: SentenceTokens::new(ids, words, None, None)?,
        scene: 0,
        gt: rng.random_range(0..n),
        expert: Some(expert),
    };
    let scene = Scene {
        id: "audit".into(),
        regions: (0..n)
            .map(|_| Region::new((0..dim).map(|_| rng.random_range(-1.0..1.0)).collect()))
            .collect(),
    };
    let roles: Vec<FeatureChild> = (0..m - 1)
        .map(|_| if rng.random_bool(0.5) { FeatureChild::Left } else { FeatureChild::Right })
        .collect();
    let ablation = configure_ablation(variant);
    let params: Vec<_> = store.ids().collect();
    let opts = GradCheckOptions {
        eps: 1e-5,
        tol,
        max_entries,
    };
    let report = check_gradients(&mut store, &params, opts, |t| {
        let out = forward(t, &model, &ablation, &ex, &scene, Policy::Frozen(&roles))?;
        grounding_loss(t, out.scores, ex.gt)
    })?;
    Ok(AuditCase {
        seed,
        words: m,
        regions: n,
        variant,
        report,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn small_cases_pass() {
        for seed in 0..5 {
            let case = gradient_case(seed, 4, 1e-3, Some(6)).unwrap();
            assert!(case.report.passed(), "{case:?}");
            assert!(case.report.entries_checked() > 0);
        }
    }
}
