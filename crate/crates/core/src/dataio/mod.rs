//! Datasets and their on-disk formats.
//!
//! * scene file: `scene <id> <n> <d>` followed by `n` lines of `d` reals,
//!   optionally followed by four box coordinates;
//! * expression file: `expr_id \t scene_id \t gt \t tokens`;
//! * expert-tree file: `expr_id \t (bracketed tree)`;
//! * manifest: JSON summary with counts, widths and a vocabulary checksum;
//! * word vectors: `token v1 … vb` per line.

mod synthetic;
mod vocab;

pub use synthetic::{
    constituency_parse, encode_object, evaluate, generate_corpus, oracle_referent, parse_expression, CorpusConfig,
    Description, OracleAnswer, ParsedExpression, Relation, SymbolicObject, SymbolicScene, SyntheticCorpus,
    CATEGORIES, CELL_PIXELS, COLORS, DETERMINERS, SIZES,
};
pub use vocab::{build_vocab, count_tokens, Vocabulary, DEFAULT_MIN_FREQ, PAD, UNK};

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grounding::{BBox, Region};
use crate::treebuilder::{format_expert_line, load_expert_trees, prune_sentence, ExpertTree};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scene {
    pub id: String,
    pub regions: Vec<Region>,
}

impl Scene {
    pub fn feature_dim(&self) -> Option<usize> {
        self.regions.first().map(|r| r.feature.len())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Expression {
    pub id: String,
    pub scene_id: String,
    pub gt: usize,
    /// Raw tokens, before pruning.
    pub tokens: Vec<String>,
}

impl Expression {
    pub fn pruned(&self) -> Result<Vec<String>> {
        prune_sentence(&self.tokens)
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Dataset {
    pub scenes: Vec<Scene>,
    pub expressions: Vec<Expression>,
    pub experts: BTreeMap<String, ExpertTree>,
}

impl Dataset {
    pub fn concat<I: IntoIterator<Item = Dataset>>(parts: I) -> Dataset {
        let mut out = Dataset::default();
        for p in parts {
            out.scenes.extend(p.scenes);
            out.expressions.extend(p.expressions);
            out.experts.extend(p.experts);
        }
        out
    }

    pub fn scene_index(&self) -> HashMap<&str, usize> {
        self.scenes.iter().enumerate().map(|(i, s)| (s.id.as_str(), i)).collect()
    }

    /// Region-feature width shared by every scene.
    pub fn feature_dim(&self) -> Option<usize> {
        self.scenes.first().and_then(Scene::feature_dim)
    }

    /// Pruned tokens per expression id.
    pub fn pruned_tokens(&self) -> Result<HashMap<String, Vec<String>>> {
        self.expressions.iter().map(|e| Ok((e.id.clone(), e.pruned()?))).collect()
    }

    /// Checks widths, ground-truth ranges, references and expert leaves.
    pub fn validate(&self) -> Result<()> {
        let d = self.feature_dim();
        let mut seen = HashMap::new();
        for s in &self.scenes {
            if s.regions.is_empty() {
                return Err(Error::Validation(format!("scene `{}` has no regions", s.id)));
            }
            for (i, r) in s.regions.iter().enumerate() {
                if Some(r.feature.len()) != d {
                    return Err(Error::Validation(format!(
                        "scene `{}` region {i} has width {} (expected {})",
                        s.id,
                        r.feature.len(),
                        d.unwrap_or(0)
                    )));
                }
                if r.feature.iter().any(|v| !v.is_finite()) {
                    return Err(Error::Validation(format!("scene `{}` region {i} is not finite", s.id)));
                }
                if let Some(b) = &r.bbox {
                    b.validate()?;
                }
            }
            if seen.insert(s.id.as_str(), s.regions.len()).is_some() {
                return Err(Error::Validation(format!("duplicate scene id `{}`", s.id)));
            }
        }
        for e in &self.expressions {
            let n = *seen
                .get(e.scene_id.as_str())
                .ok_or_else(|| Error::Validation(format!("expression `{}` refers to unknown scene `{}`", e.id, e.scene_id)))?;
            if e.gt >= n {
                return Err(Error::Validation(format!(
                    "expression `{}` has gt {} but scene has {n} regions",
                    e.id, e.gt
                )));
            }
            if let Some(t) = self.experts.get(&e.id) {
                t.check_leaves(&e.pruned()?)?;
            }
        }
        Ok(())
    }
}

fn located(path: &Path, line: usize, msg: impl Into<String>) -> Error {
    Error::Parse {
        path: path.display().to_string(),
        line,
        msg: msg.into(),
    }
}

fn read(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

/// Writes `contents` to a temporary sibling and renames it into place.
pub fn write_atomic(path: &Path, contents: &[u8]) -> Result<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let name = path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
    let tmp = dir.join(format!(".{name}.tmp{}", std::process::id()));
    std::fs::write(&tmp, contents).map_err(|e| Error::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn format_scenes(scenes: &[Scene]) -> String {
    let mut out = String::new();
    for s in scenes {
        let d = s.feature_dim().unwrap_or(0);
        let _ = writeln!(out, "scene {} {} {d}", s.id, s.regions.len());
        for r in &s.regions {
            let mut vals: Vec<String> = r.feature.iter().map(|v| v.to_string()).collect();
            if let Some(b) = &r.bbox {
                vals.extend([b.x1, b.y1, b.x2, b.y2].iter().map(|v| v.to_string()));
            }
            let _ = writeln!(out, "{}", vals.join(" "));
        }
    }
    out
}

fn parse_reals(path: &Path, line: usize, text: &str) -> Result<Vec<f64>> {
    text.split_whitespace()
        .map(|t| {
            t.parse::<f64>()
                .ok()
                .filter(|v| v.is_finite())
                .ok_or_else(|| located(path, line, format!("not a finite number: `{t}`")))
        })
        .collect()
}

pub fn parse_scenes(path: &Path, text: &str) -> Result<Vec<Scene>> {
    let mut scenes = Vec::new();
    let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l)).filter(|(_, l)| !l.trim().is_empty());
    while let Some((lineno, header)) = lines.next() {
        let parts: Vec<&str> = header.split_whitespace().collect();
        let [tag, id, n, d] = parts[..] else {
            return Err(located(path, lineno, "expected `scene <id> <n> <d>`"));
        };
        if tag != "scene" {
            return Err(located(path, lineno, "expected `scene <id> <n> <d>`"));
        }
        let n: usize = n.parse().map_err(|_| located(path, lineno, format!("bad region count `{n}`")))?;
        let d: usize = d.parse().map_err(|_| located(path, lineno, format!("bad width `{d}`")))?;
        if n == 0 {
            return Err(located(path, lineno, "scene has no regions"));
        }
        let mut regions = Vec::with_capacity(n);
        for k in 0..n {
            let (ln, row) = lines
                .next()
                .ok_or_else(|| located(path, lineno, format!("scene `{id}` ends after {k} of {n} regions")))?;
            let vals = parse_reals(path, ln, row)?;
            let bbox = if vals.len() == d + 4 {
                let b = BBox {
                    x1: vals[d],
                    y1: vals[d + 1],
                    x2: vals[d + 2],
                    y2: vals[d + 3],
                };
                b.validate().map_err(|e| located(path, ln, e.to_string()))?;
                Some(b)
            } else if vals.len() == d {
                None
            } else {
                return Err(located(
                    path,
                    ln,
                    format!("region has {} values (expected {d} or {})", vals.len(), d + 4),
                ));
            };
            regions.push(Region {
                feature: vals[..d].to_vec(),
                bbox,
            });
        }
        scenes.push(Scene {
            id: id.to_string(),
            regions,
        });
    }
    Ok(scenes)
}

pub fn load_scenes(path: &Path) -> Result<Vec<Scene>> {
    parse_scenes(path, &read(path)?)
}

pub fn format_expressions(exprs: &[Expression]) -> String {
    let mut out = String::new();
    for e in exprs {
        let _ = writeln!(out, "{}\t{}\t{}\t{}", e.id, e.scene_id, e.gt, e.tokens.join(" "));
    }
    out
}

pub fn parse_expressions(path: &Path, text: &str) -> Result<Vec<Expression>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let lineno = i + 1;
        if line.trim().is_empty() || line.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        let [id, scene_id, gt, tokens] = fields[..] else {
            return Err(located(path, lineno, "expected `expr_id\\tscene_id\\tgt\\ttokens`"));
        };
        let gt = gt
            .trim()
            .parse()
            .map_err(|_| located(path, lineno, format!("bad ground-truth index `{gt}`")))?;
        let tokens: Vec<String> = tokens.split_whitespace().map(str::to_string).collect();
        if tokens.is_empty() {
            return Err(located(path, lineno, "expression has no tokens"));
        }
        out.push(Expression {
            id: id.trim().to_string(),
            scene_id: scene_id.trim().to_string(),
            gt,
            tokens,
        });
    }
    Ok(out)
}

pub fn load_expressions(path: &Path) -> Result<Vec<Expression>> {
    parse_expressions(path, &read(path)?)
}

pub fn format_experts(experts: &BTreeMap<String, ExpertTree>) -> String {
    experts.iter().map(|(id, t)| format_expert_line(id, t) + "\n").collect()
}

/// File names of one split inside a dataset directory.
pub fn split_paths(dir: &Path, split: &str) -> (std::path::PathBuf, std::path::PathBuf, std::path::PathBuf) {
    (
        dir.join(format!("{split}.scenes")),
        dir.join(format!("{split}.exprs")),
        dir.join(format!("{split}.trees")),
    )
}

pub fn write_dataset(dir: &Path, split: &str, ds: &Dataset) -> Result<()> {
    let (s, e, t) = split_paths(dir, split);
    write_atomic(&s, format_scenes(&ds.scenes).as_bytes())?;
    write_atomic(&e, format_expressions(&ds.expressions).as_bytes())?;
    write_atomic(&t, format_experts(&ds.experts).as_bytes())
}

/// Reads one split. Expert trees are optional unless `require_experts`.
pub fn load_dataset(dir: &Path, split: &str, require_experts: bool) -> Result<Dataset> {
    let (s, e, t) = split_paths(dir, split);
    let scenes = load_scenes(&s)?;
    let expressions = load_expressions(&e)?;
    let mut ds = Dataset {
        scenes,
        expressions,
        experts: BTreeMap::new(),
    };
    if t.exists() || require_experts {
        let pruned = ds.pruned_tokens()?;
        ds.experts = load_expert_trees(&t, Some(&pruned))?;
    }
    ds.validate()?;
    Ok(ds)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitSummary {
    pub scenes: usize,
    pub expressions: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub seed: u64,
    pub feature_dim: usize,
    pub splits: BTreeMap<String, SplitSummary>,
    pub vocab_size: usize,
    pub vocab_checksum: String,
    pub corpus: CorpusConfig,
}

impl DatasetManifest {
    pub fn load(path: &Path) -> Result<Self> {
        Ok(serde_json::from_str(&read(path)?)?)
    }
}

pub fn summarize(ds: &Dataset) -> SplitSummary {
    SplitSummary {
        scenes: ds.scenes.len(),
        expressions: ds.expressions.len(),
    }
}

/// Reads a word-vector text file, keeping rows for tokens in `vocab`.
/// Returns `(row id, vector)` pairs in file order.
pub fn load_word_vectors(path: &Path, vocab: &Vocabulary, dim: usize) -> Result<Vec<(usize, Vec<f64>)>> {
    parse_word_vectors(path, &read(path)?, vocab, dim)
}

pub fn parse_word_vectors(path: &Path, text: &str, vocab: &Vocabulary, dim: usize) -> Result<Vec<(usize, Vec<f64>)>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let Some((token, rest)) = line.trim().split_once(char::is_whitespace) else {
            continue;
        };
        let vals = parse_reals(path, i + 1, rest)?;
        if vals.len() != dim {
            return Err(located(path, i + 1, format!("vector has {} values (expected {dim})", vals.len())));
        }
        if vocab.contains(token) && token != PAD && token != UNK {
            out.push((vocab.id(token), vals));
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy() -> Dataset {
        let mut ds = Dataset::default();
        ds.scenes.push(Scene {
            id: "s1".into(),
            regions: vec![
                Region {
                    feature: vec![0.1, -2.5e-3, 1.0 / 3.0],
                    bbox: Some(BBox::new(0.0, 0.0, 10.0, 20.0).unwrap()),
                },
                Region::new(vec![1.0, 2.0, 3.0]),
            ],
        });
        ds.expressions.push(Expression {
            id: "e1".into(),
            scene_id: "s1".into(),
            gt: 1,
            tokens: vec!["a".into(), "black".into(), "dog".into()],
        });
        ds.experts.insert("e1".into(), ExpertTree::parse("(black dog)").unwrap());
        ds
    }

    #[test]
    fn round_trip_is_identity() {
        let dir = tempfile::tempdir().unwrap();
        let ds = toy();
        write_dataset(dir.path(), "train", &ds).unwrap();
        let back = load_dataset(dir.path(), "train", true).unwrap();
        assert_eq!(back, ds);
    }

    #[test]
    fn gt_out_of_range_is_rejected() {
        let mut ds = toy();
        ds.expressions[0].gt = 2;
        assert!(matches!(ds.validate(), Err(Error::Validation(_))));
    }

    #[test]
    fn width_mismatch_is_rejected() {
        let mut ds = toy();
        ds.scenes[0].regions[1].feature.pop();
        assert!(ds.validate().is_err());
        let path = Path::new("x.scenes");
        let err = parse_scenes(path, "scene s 2 3\n1 2 3\n1 2\n").unwrap_err();
        assert!(matches!(err, Error::Parse { line: 3, .. }), "{err}");
        let err = parse_scenes(path, "scene s 2 3\n1 2 3\n").unwrap_err();
        assert!(matches!(err, Error::Parse { line: 1, .. }), "{err}");
        assert!(parse_scenes(path, "scene s 1 2\n1 nan\n").is_err());
    }

    #[test]
    fn expression_records_report_lines() {
        let p = Path::new("x.exprs");
        let err = parse_expressions(p, "e1\ts1\t0\tdog\ne2\ts1\tx\tcat\n").unwrap_err();
        assert!(matches!(err, Error::Parse { line: 2, .. }));
        assert!(parse_expressions(p, "e1\ts1\t0\n").is_err());
    }

    #[test]
    fn missing_expert_file_names_the_path() {
        let dir = tempfile::tempdir().unwrap();
        let mut ds = toy();
        ds.experts.clear();
        let (s, e, _) = split_paths(dir.path(), "train");
        write_atomic(&s, format_scenes(&ds.scenes).as_bytes()).unwrap();
        write_atomic(&e, format_expressions(&ds.expressions).as_bytes()).unwrap();
        assert!(load_dataset(dir.path(), "train", false).is_ok());
        let err = load_dataset(dir.path(), "train", true).unwrap_err();
        assert!(err.to_string().contains("train.trees"), "{err}");
    }

    #[test]
    fn word_vectors() {
        let corpus = vec![vec!["dog".to_string(); 5]];
        let vocab = build_vocab(corpus.iter().map(Vec::as_slice), 5).unwrap();
        let p = Path::new("vec.txt");
        let got = parse_word_vectors(p, "dog 1 2\ncat 3 4\n\n", &vocab, 2).unwrap();
        assert_eq!(got, vec![(2, vec![1.0, 2.0])]);
        assert!(parse_word_vectors(p, "dog 1 2 3\n", &vocab, 2).is_err());
    }
}
