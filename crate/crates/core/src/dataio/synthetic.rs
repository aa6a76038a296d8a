//! A synthetic compositional grounding corpus with an exact oracle.
//!
//! Scenes place objects on distinct cells of a grid. Expressions follow
//! `det? size? color? noun (relation det? size? color? noun)?` and are kept
//! only when the oracle finds exactly one referent.

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{Dataset, Expression, Scene};
use crate::error::{Error, Result};
use crate::grounding::{BBox, Region};
use crate::treebuilder::{binarize_constituency, prune_sentence, ConstituencyTree, ExpertTree};

pub const CATEGORIES: [&str; 6] = ["dog", "cat", "tree", "car", "table", "chair"];
pub const COLORS: [&str; 4] = ["red", "blue", "green", "black"];
pub const SIZES: [&str; 2] = ["small", "big"];
pub const DETERMINERS: [&str; 3] = ["a", "the", "that"];

/// Pixel size of one grid cell when boxes are emitted.
pub const CELL_PIXELS: f64 = 100.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Relation {
    LeftOf,
    RightOf,
    On,
    Under,
}

impl Relation {
    pub const ALL: [Relation; 4] = [Relation::LeftOf, Relation::RightOf, Relation::On, Relation::Under];

    pub fn words(self) -> &'static [&'static str] {
        match self {
            Relation::LeftOf => &["left", "of"],
            Relation::RightOf => &["right", "of"],
            Relation::On => &["on"],
            Relation::Under => &["under"],
        }
    }

    /// Cells are `(column, row)` with rows counted downward.
    pub fn holds(self, subject: (usize, usize), context: (usize, usize)) -> bool {
        match self {
            Relation::LeftOf => subject.0 < context.0,
            Relation::RightOf => subject.0 > context.0,
            Relation::On => subject.0 == context.0 && subject.1 < context.1,
            Relation::Under => subject.0 == context.0 && subject.1 > context.1,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SymbolicObject {
    pub category: usize,
    pub color: usize,
    pub size: usize,
    pub cell: (usize, usize),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SymbolicScene {
    pub id: String,
    pub objects: Vec<SymbolicObject>,
    pub grid: (usize, usize),
}

/// A noun phrase: the noun plus optional attributes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Description {
    pub category: usize,
    pub color: Option<usize>,
    pub size: Option<usize>,
}

impl Description {
    pub fn matches(&self, o: &SymbolicObject) -> bool {
        o.category == self.category && self.color.is_none_or(|c| c == o.color) && self.size.is_none_or(|s| s == o.size)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParsedExpression {
    pub subject: Description,
    pub relation: Option<(Relation, Description)>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum OracleAnswer {
    Unique(usize),
    Ambiguous(Vec<usize>),
    NoMatch,
}

fn parse_description(tokens: &[&str]) -> Result<Description> {
    let mut color = None;
    let mut size = None;
    let mut category = None;
    for (i, t) in tokens.iter().enumerate() {
        if DETERMINERS.contains(t) && i == 0 {
            continue;
        }
        if let Some(c) = COLORS.iter().position(|w| w == t) {
            if color.replace(c).is_some() || category.is_some() {
                return Err(out_of_grammar(tokens));
            }
        } else if let Some(s) = SIZES.iter().position(|w| w == t) {
            if size.replace(s).is_some() || category.is_some() {
                return Err(out_of_grammar(tokens));
            }
        } else if let Some(c) = CATEGORIES.iter().position(|w| w == t) {
            if category.replace(c).is_some() {
                return Err(out_of_grammar(tokens));
            }
        } else {
            return Err(out_of_grammar(tokens));
        }
    }
    match (category, tokens.last()) {
        (Some(category), Some(last)) if CATEGORIES.contains(last) => Ok(Description { category, color, size }),
        _ => Err(out_of_grammar(tokens)),
    }
}

fn out_of_grammar(tokens: &[&str]) -> Error {
    Error::Invalid(format!("expression outside the grammar: `{}`", tokens.join(" ")))
}

/// Parses raw or pruned expression tokens.
pub fn parse_expression<S: AsRef<str>>(tokens: &[S]) -> Result<ParsedExpression> {
    let toks: Vec<&str> = tokens.iter().map(AsRef::as_ref).collect();
    for rel in Relation::ALL {
        let words = rel.words();
        for start in 1..toks.len() {
            if toks[start..].starts_with(words) {
                let subject = parse_description(&toks[..start])?;
                let context = parse_description(&toks[start + words.len()..])?;
                return Ok(ParsedExpression {
                    subject,
                    relation: Some((rel, context)),
                });
            }
        }
    }
    Ok(ParsedExpression {
        subject: parse_description(&toks)?,
        relation: None,
    })
}

/// Exhaustive evaluation of an expression over a symbolic scene. With a
/// relation, an object qualifies when some other object matches the context
/// phrase and the relation holds between them.
pub fn oracle_referent<S: AsRef<str>>(scene: &SymbolicScene, tokens: &[S]) -> Result<OracleAnswer> {
    let parsed = parse_expression(tokens)?;
    Ok(evaluate(scene, &parsed))
}

pub fn evaluate(scene: &SymbolicScene, e: &ParsedExpression) -> OracleAnswer {
    let hits: Vec<usize> = scene
        .objects
        .iter()
        .enumerate()
        .filter(|(i, o)| {
            e.subject.matches(o)
                && e.relation.is_none_or(|(rel, ctx)| {
                    scene
                        .objects
                        .iter()
                        .enumerate()
                        .any(|(j, c)| j != *i && ctx.matches(c) && rel.holds(o.cell, c.cell))
                })
        })
        .map(|(i, _)| i)
        .collect();
    match hits.len() {
        0 => OracleAnswer::NoMatch,
        1 => OracleAnswer::Unique(hits[0]),
        _ => OracleAnswer::Ambiguous(hits),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CorpusConfig {
    pub n_scenes: usize,
    pub objects_per_scene: usize,
    pub expressions_per_scene: usize,
    pub feature_dim: usize,
    pub grid_cols: usize,
    pub grid_rows: usize,
    pub noise_std: f64,
    /// Probability of trying a relational expression first.
    pub relation_prob: f64,
    pub train_frac: f64,
    pub val_frac: f64,
    pub emit_boxes: bool,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        CorpusConfig {
            n_scenes: 1000,
            objects_per_scene: 5,
            expressions_per_scene: 2,
            feature_dim: 32,
            grid_cols: 4,
            grid_rows: 4,
            noise_std: 0.05,
            relation_prob: 0.5,
            train_frac: 0.7,
            val_frac: 0.15,
            emit_boxes: true,
        }
    }
}

impl CorpusConfig {
    /// Width of the attribute and position blocks of a region feature.
    pub fn encoded_width() -> usize {
        CATEGORIES.len() + COLORS.len() + SIZES.len() + 2
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |key: &str, msg: &str| {
            Err(Error::Config {
                key: format!("corpus.{key}"),
                msg: msg.into(),
            })
        };
        if self.n_scenes == 0 {
            return bad("n_scenes", "must be at least 1");
        }
        if self.objects_per_scene < 2 {
            return bad("objects_per_scene", "must be at least 2");
        }
        if self.objects_per_scene > self.grid_cols * self.grid_rows {
            return bad("objects_per_scene", "exceeds the number of grid cells");
        }
        if self.expressions_per_scene == 0 || self.expressions_per_scene > self.objects_per_scene {
            return bad("expressions_per_scene", "must be between 1 and objects_per_scene");
        }
        if self.feature_dim < Self::encoded_width() {
            return bad("feature_dim", &format!("must be at least {}", Self::encoded_width()));
        }
        if !(self.noise_std >= 0.0 && self.noise_std.is_finite()) {
            return bad("noise_std", "must be a non-negative number");
        }
        if !(0.0..=1.0).contains(&self.relation_prob) {
            return bad("relation_prob", "must lie in [0, 1]");
        }
        if !(self.train_frac > 0.0 && self.val_frac >= 0.0 && self.train_frac + self.val_frac <= 1.0) {
            return bad("train_frac", "train_frac and val_frac must be non-negative and sum to at most 1");
        }
        Ok(())
    }

    /// Scene counts `(train, val, test)`.
    pub fn split_sizes(&self) -> (usize, usize, usize) {
        let n = self.n_scenes as f64;
        let train = ((n * self.train_frac).round() as usize).min(self.n_scenes);
        let val = ((n * self.val_frac).round() as usize).min(self.n_scenes - train);
        (train, val, self.n_scenes - train - val)
    }
}

/// A generated corpus split by scene.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticCorpus {
    pub train: Dataset,
    pub val: Dataset,
    pub test: Dataset,
    pub symbolic: Vec<SymbolicScene>,
}

/// Deterministic feature encoding plus Gaussian noise.
pub fn encode_object<R: Rng>(o: &SymbolicObject, grid: (usize, usize), dim: usize, noise: &Normal<f64>, rng: &mut R) -> Vec<f64> {
    let mut v = vec![0.0; dim];
    v[o.category] = 1.0;
    v[CATEGORIES.len() + o.color] = 1.0;
    v[CATEGORIES.len() + COLORS.len() + o.size] = 1.0;
    let pos = CATEGORIES.len() + COLORS.len() + SIZES.len();
    v[pos] = (o.cell.0 as f64 + 0.5) / grid.0 as f64;
    v[pos + 1] = (o.cell.1 as f64 + 0.5) / grid.1 as f64;
    v.iter_mut().for_each(|x| *x += noise.sample(rng));
    v
}

fn object_box(o: &SymbolicObject) -> BBox {
    let (c, r) = (o.cell.0 as f64, o.cell.1 as f64);
    BBox {
        x1: c * CELL_PIXELS + 10.0,
        y1: r * CELL_PIXELS + 10.0,
        x2: c * CELL_PIXELS + 90.0,
        y2: r * CELL_PIXELS + 90.0,
    }
}

fn random_scene<R: Rng>(id: String, cfg: &CorpusConfig, rng: &mut R) -> SymbolicScene {
    let cells: Vec<(usize, usize)> = (0..cfg.grid_cols)
        .flat_map(|c| (0..cfg.grid_rows).map(move |r| (c, r)))
        .collect();
    let chosen: Vec<(usize, usize)> = cells.choose_multiple(rng, cfg.objects_per_scene).copied().collect();
    let objects = chosen
        .into_iter()
        .map(|cell| SymbolicObject {
            category: rng.random_range(0..CATEGORIES.len()),
            color: rng.random_range(0..COLORS.len()),
            size: rng.random_range(0..SIZES.len()),
            cell,
        })
        .collect();
    SymbolicScene {
        id,
        objects,
        grid: (cfg.grid_cols, cfg.grid_rows),
    }
}

fn describe<R: Rng>(o: &SymbolicObject, rng: &mut R) -> Description {
    Description {
        category: o.category,
        color: rng.random_bool(0.5).then_some(o.color),
        size: rng.random_bool(0.4).then_some(o.size),
    }
}

fn phrase_words<R: Rng>(d: &Description, rng: &mut R) -> Vec<String> {
    let mut w = Vec::new();
    if rng.random_bool(0.5) {
        w.push(DETERMINERS.choose(rng).expect("non-empty").to_string());
    }
    if let Some(s) = d.size {
        w.push(SIZES[s].to_string());
    }
    if let Some(c) = d.color {
        w.push(COLORS[c].to_string());
    }
    w.push(CATEGORIES[d.category].to_string());
    w
}

/// Constituency parse of pruned phrase words: one flat node per noun phrase.
fn phrase_tree(words: &[String]) -> ConstituencyTree {
    if words.len() == 1 {
        ConstituencyTree::Leaf(words[0].clone())
    } else {
        ConstituencyTree::Node(words.iter().cloned().map(ConstituencyTree::Leaf).collect())
    }
}

/// Multi-branch parse `(NP (rel… NP))` of an expression, over pruned tokens.
pub fn constituency_parse(subject: &[String], relation: Option<(Relation, &[String])>) -> Result<ConstituencyTree> {
    let subj = phrase_tree(&prune_sentence(subject)?);
    let Some((rel, ctx)) = relation else {
        return Ok(subj);
    };
    let mut pp: Vec<ConstituencyTree> = rel.words().iter().map(|w| ConstituencyTree::Leaf(w.to_string())).collect();
    pp.push(phrase_tree(&prune_sentence(ctx)?));
    Ok(ConstituencyTree::Node(vec![subj, ConstituencyTree::Node(pp)]))
}

/// A uniquely-referring expression for `target`, or `None` after the retry
/// budget.
fn refer<R: Rng>(scene: &SymbolicScene, target: usize, cfg: &CorpusConfig, rng: &mut R) -> Option<(Vec<String>, ExpertTree)> {
    let o = scene.objects[target];
    for attempt in 0..40 {
        let relational = if attempt < 20 {
            rng.random_bool(cfg.relation_prob)
        } else {
            attempt % 2 == 0
        };
        let subject = describe(&o, rng);
        let relation = if relational {
            let others: Vec<usize> = (0..scene.objects.len()).filter(|j| *j != target).collect();
            let j = *others.choose(rng).expect("at least two objects");
            let c = scene.objects[j];
            let rels: Vec<Relation> = Relation::ALL.into_iter().filter(|r| r.holds(o.cell, c.cell)).collect();
            let Some(rel) = rels.choose(rng).copied() else { continue };
            Some((rel, describe(&c, rng)))
        } else {
            None
        };
        let parsed = ParsedExpression { subject, relation };
        if evaluate(scene, &parsed) != OracleAnswer::Unique(target) {
            continue;
        }
        let subj_words = phrase_words(&subject, rng);
        let mut tokens = subj_words.clone();
        let mut ctx_words = Vec::new();
        if let Some((rel, ctx)) = relation {
            tokens.extend(rel.words().iter().map(|w| w.to_string()));
            ctx_words = phrase_words(&ctx, rng);
            tokens.extend(ctx_words.iter().cloned());
        }
        let tree = constituency_parse(&subj_words, relation.map(|(r, _)| (r, ctx_words.as_slice()))).ok()?;
        let expert = ExpertTree::new(binarize_constituency(&tree).ok()?);
        return Some((tokens, expert));
    }
    None
}

/// Generates scenes and uniquely-referring expressions, split by scene.
pub fn generate_corpus(seed: u64, cfg: &CorpusConfig) -> Result<SyntheticCorpus> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = Normal::new(0.0, cfg.noise_std).map_err(|e| Error::Config {
        key: "corpus.noise_std".into(),
        msg: e.to_string(),
    })?;
    let mut datasets = Vec::with_capacity(cfg.n_scenes);
    let mut symbolic = Vec::with_capacity(cfg.n_scenes);
    let max_attempts = 50;
    for s in 0..cfg.n_scenes {
        let id = format!("s{s:05}");
        let mut found = None;
        for _ in 0..max_attempts {
            let scene = random_scene(id.clone(), cfg, &mut rng);
            let mut targets: Vec<usize> = (0..scene.objects.len()).collect();
            targets.shuffle(&mut rng);
            let mut exprs = Vec::new();
            for t in targets {
                if exprs.len() == cfg.expressions_per_scene {
                    break;
                }
                if let Some((tokens, tree)) = refer(&scene, t, cfg, &mut rng) {
                    exprs.push((t, tokens, tree));
                }
            }
            if exprs.len() == cfg.expressions_per_scene {
                found = Some((scene, exprs));
                break;
            }
        }
        let (scene, exprs) = found.ok_or_else(|| {
            Error::Invalid(format!(
                "could not generate {} unique expressions for a scene in {max_attempts} attempts",
                cfg.expressions_per_scene
            ))
        })?;
        let regions = scene
            .objects
            .iter()
            .map(|o| Region {
                feature: encode_object(o, scene.grid, cfg.feature_dim, &noise, &mut rng),
                bbox: cfg.emit_boxes.then(|| object_box(o)),
            })
            .collect();
        let mut ds = Dataset::default();
        ds.scenes.push(Scene {
            id: id.clone(),
            regions,
        });
        for (k, (gt, tokens, tree)) in exprs.into_iter().enumerate() {
            let eid = format!("{id}_e{k}");
            ds.experts.insert(eid.clone(), tree);
            ds.expressions.push(Expression {
                id: eid,
                scene_id: id.clone(),
                gt,
                tokens,
            });
        }
        datasets.push(ds);
        symbolic.push(scene);
    }
    let (n_train, n_val, _) = cfg.split_sizes();
    let mut it = datasets.into_iter();
    let train = Dataset::concat(it.by_ref().take(n_train));
    let val = Dataset::concat(it.by_ref().take(n_val));
    let test = Dataset::concat(it);
    Ok(SyntheticCorpus {
        train,
        val,
        test,
        symbolic,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn obj(category: &str, color: &str, size: &str, cell: (usize, usize)) -> SymbolicObject {
        SymbolicObject {
            category: CATEGORIES.iter().position(|c| *c == category).unwrap(),
            color: COLORS.iter().position(|c| *c == color).unwrap(),
            size: SIZES.iter().position(|c| *c == size).unwrap(),
            cell,
        }
    }

    fn scene(objects: Vec<SymbolicObject>) -> SymbolicScene {
        SymbolicScene {
            id: "t".into(),
            objects,
            grid: (4, 4),
        }
    }

    #[test]
    fn attribute_oracle() {
        let s = scene(vec![obj("dog", "black", "big", (0, 0)), obj("dog", "red", "big", (1, 0))]);
        assert_eq!(oracle_referent(&s, &["black", "dog"]).unwrap(), OracleAnswer::Unique(0));
        assert_eq!(oracle_referent(&s, &["dog"]).unwrap(), OracleAnswer::Ambiguous(vec![0, 1]));
        assert_eq!(oracle_referent(&s, &["cat"]).unwrap(), OracleAnswer::NoMatch);
        let one = scene(vec![obj("dog", "red", "big", (0, 0)), obj("cat", "red", "big", (1, 0))]);
        assert_eq!(oracle_referent(&one, &["a", "dog"]).unwrap(), OracleAnswer::Unique(0));
        let twins = scene(vec![obj("dog", "black", "big", (0, 0)), obj("dog", "black", "big", (1, 0))]);
        assert!(matches!(oracle_referent(&twins, &["black", "dog"]).unwrap(), OracleAnswer::Ambiguous(_)));
    }

    #[test]
    fn relation_oracle() {
        let s = scene(vec![obj("dog", "red", "big", (1, 2)), obj("tree", "green", "big", (3, 2))]);
        assert_eq!(oracle_referent(&s, &["dog", "left", "of", "tree"]).unwrap(), OracleAnswer::Unique(0));
        assert_eq!(oracle_referent(&s, &["dog", "right", "of", "tree"]).unwrap(), OracleAnswer::NoMatch);
        let t = scene(vec![
            obj("cat", "red", "small", (2, 0)),
            obj("table", "blue", "big", (2, 1)),
            obj("cat", "red", "big", (0, 0)),
            obj("cat", "blue", "small", (3, 3)),
        ]);
        assert_eq!(oracle_referent(&t, &["small", "cat", "on", "table"]).unwrap(), OracleAnswer::Unique(0));
        assert_eq!(oracle_referent(&t, &["table", "under", "the", "small", "cat"]).unwrap(), OracleAnswer::Unique(1));
        // A context phrase never matches the subject itself.
        let u = scene(vec![obj("dog", "red", "big", (0, 0)), obj("cat", "red", "big", (1, 0))]);
        assert_eq!(oracle_referent(&u, &["dog", "left", "of", "dog"]).unwrap(), OracleAnswer::NoMatch);
    }

    #[test]
    fn out_of_grammar_is_an_error() {
        let s = scene(vec![obj("dog", "red", "big", (0, 0))]);
        for bad in [&["purple", "dog"][..], &["dog", "red"], &["left", "of", "dog"], &[]] {
            assert!(oracle_referent(&s, bad).is_err(), "{bad:?}");
        }
    }

    fn small_config() -> CorpusConfig {
        CorpusConfig {
            n_scenes: 40,
            ..CorpusConfig::default()
        }
    }

    #[test]
    fn generated_records_agree_with_the_oracle() {
        let c = generate_corpus(7, &small_config()).unwrap();
        let all = [&c.train, &c.val, &c.test];
        assert_eq!(all.iter().map(|d| d.scenes.len()).sum::<usize>(), 40);
        assert_eq!((c.train.scenes.len(), c.val.scenes.len(), c.test.scenes.len()), (28, 6, 6));
        for ds in all {
            ds.validate().unwrap();
            for e in &ds.expressions {
                let sym = c.symbolic.iter().find(|s| s.id == e.scene_id).unwrap();
                assert_eq!(oracle_referent(sym, &e.tokens).unwrap(), OracleAnswer::Unique(e.gt));
                let pruned = prune_sentence(&e.tokens).unwrap();
                ds.experts[&e.id].check_leaves(&pruned).unwrap();
                assert!(pruned.len() <= 10);
            }
        }
    }

    #[test]
    fn generation_is_deterministic() {
        let a = generate_corpus(3, &small_config()).unwrap();
        let b = generate_corpus(3, &small_config()).unwrap();
        assert_eq!(a, b);
        let c = generate_corpus(4, &small_config()).unwrap();
        assert_ne!(a.train.expressions, c.train.expressions);
    }

    #[test]
    fn relational_expressions_are_common() {
        let c = generate_corpus(5, &small_config()).unwrap();
        let rel = c
            .train
            .expressions
            .iter()
            .filter(|e| parse_expression(&e.tokens).unwrap().relation.is_some())
            .count();
        assert!(rel * 4 >= c.train.expressions.len(), "{rel}");
    }

    #[test]
    fn config_errors_name_the_key() {
        let bad = CorpusConfig {
            objects_per_scene: 1,
            ..CorpusConfig::default()
        };
        match generate_corpus(1, &bad) {
            Err(Error::Config { key, .. }) => assert_eq!(key, "corpus.objects_per_scene"),
            other => panic!("{other:?}"),
        }
        let split = CorpusConfig {
            n_scenes: 3000,
            train_frac: 2.0 / 3.0,
            val_frac: 0.0,
            ..CorpusConfig::default()
        };
        assert_eq!(split.split_sizes(), (2000, 0, 1000));
    }

    #[test]
    fn five_word_noun_phrase_binarizes_like_a_flat_constituent() {
        let words: Vec<String> = ["big", "red", "dog"].map(String::from).to_vec();
        let ctx: Vec<String> = ["the", "tree"].map(String::from).to_vec();
        let t = constituency_parse(&words, Some((Relation::LeftOf, &ctx))).unwrap();
        let b = binarize_constituency(&t).unwrap();
        assert_eq!(b.to_string(), "(((big red) dog) ((left of) (the tree)))");
    }
}
