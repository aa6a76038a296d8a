use crate::error::{Error, Result};

/// Determiners dropped before tree construction.
pub const STOP_WORDS: [&str; 9] = ["a", "an", "another", "any", "both", "each", "either", "those", "that"];

fn is_punctuation(token: &str) -> bool {
    !token.is_empty() && token.chars().all(|c| c.is_ascii_punctuation())
}

/// Lowercases and splits on whitespace, detaching leading and trailing ASCII
/// punctuation into tokens of their own.
pub fn tokenize(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    for raw in text.split_whitespace() {
        let word = raw.to_lowercase();
        let start = word.find(|c: char| !c.is_ascii_punctuation());
        let Some(start) = start else {
            out.extend(word.chars().map(String::from));
            continue;
        };
        let end = word.rfind(|c: char| !c.is_ascii_punctuation()).map_or(word.len(), |i| {
            i + word[i..].chars().next().map_or(1, char::len_utf8)
        });
        out.extend(word[..start].chars().map(String::from));
        out.push(word[start..end].to_string());
        out.extend(word[end..].chars().map(String::from));
    }
    out
}

/// Removes stop-list determiners and punctuation tokens, keeping order.
pub fn prune_sentence<S: AsRef<str>>(tokens: &[S]) -> Result<Vec<String>> {
    let kept: Vec<String> = tokens
        .iter()
        .map(AsRef::as_ref)
        .filter(|t| !STOP_WORDS.contains(t) && !is_punctuation(t))
        .map(str::to_string)
        .collect();
    if kept.is_empty() {
        return Err(Error::Unparseable);
    }
    Ok(kept)
}
