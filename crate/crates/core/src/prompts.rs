//! Prompt templates, the medium × adjective prompt bank, and encoding with
//! tracked shape/EOS token positions.

use std::collections::HashSet;
use std::io::Write;
use std::ops::RangeInclusive;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::backends::{PromptEmbedding, TextEncoder};
use crate::error::{Error, Result};

pub const SHAPE_PLACEHOLDER: &str = "[SHAPE-ID]";
pub const DEFAULT_BANK_PATTERN: &str = "a {adjective} {medium} of a [SHAPE-ID]";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptTemplate {
    pub id: String,
    pub text: String,
}

impl PromptTemplate {
    pub fn new(id: impl Into<String>, text: impl Into<String>) -> Result<Self> {
        let text = text.into();
        check_single_placeholder(&text)?;
        Ok(Self { id: id.into(), text })
    }

    pub fn expand(&self, category_label: &str) -> Result<String> {
        expand_template(&self.text, category_label)
    }
}

fn check_single_placeholder(text: &str) -> Result<()> {
    match text.matches(SHAPE_PLACEHOLDER).count() {
        1 => Ok(()),
        0 => Err(Error::invalid(
            "template",
            format!("`{text}` has no {SHAPE_PLACEHOLDER} placeholder"),
        )),
        n => Err(Error::invalid(
            "template",
            format!("`{text}` has {n} {SHAPE_PLACEHOLDER} placeholders"),
        )),
    }
}

/// Replaces the single `[SHAPE-ID]` in `template` with `category_label`.
pub fn expand_template(template: &str, category_label: &str) -> Result<String> {
    check_single_placeholder(template)?;
    if category_label.trim().is_empty() {
        return Err(Error::invalid("category", "category label is empty"));
    }
    Ok(template.replacen(SHAPE_PLACEHOLDER, category_label, 1))
}

/// Where the shape word and EOS token landed in the encoded prompt.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenLayout {
    /// First token of the shape word.
    pub shape_start: usize,
    /// Last token of the shape word (inclusive).
    pub shape_end: usize,
    pub eos_index: usize,
    /// Non-padding slots, begin marker and EOS included.
    pub content_length: usize,
}

impl TokenLayout {
    pub fn new(shape_start: usize, shape_end: usize, eos_index: usize) -> Result<Self> {
        let layout = Self {
            shape_start,
            shape_end,
            eos_index,
            content_length: eos_index + 1,
        };
        layout.validate(crate::backends::MAX_TOKENS)?;
        Ok(layout)
    }

    pub fn shape_span(&self) -> RangeInclusive<usize> {
        self.shape_start..=self.shape_end
    }

    pub fn validate(&self, rows: usize) -> Result<()> {
        if self.shape_start == 0 {
            return Err(Error::invalid("layout", "shape span may not include slot 0"));
        }
        if self.shape_start > self.shape_end {
            return Err(Error::invalid("layout", "shape span is empty"));
        }
        if self.shape_end >= self.eos_index {
            return Err(Error::invalid("layout", "shape span must precede the EOS token"));
        }
        if self.eos_index >= rows {
            return Err(Error::invalid(
                "layout",
                format!("eos index {} outside {rows} rows", self.eos_index),
            ));
        }
        Ok(())
    }
}

/// Encodes `text` and locates the tokens of `shape_word` inside it.
pub fn encode_prompt(encoder: &dyn TextEncoder, text: &str, shape_word: &str) -> Result<(PromptEmbedding, TokenLayout)> {
    let word_tokens = encoder.tokenize(shape_word)?;
    if word_tokens.is_empty() {
        return Err(Error::invalid("shape_word", "shape word has no tokens"));
    }
    let content = encoder.tokenize(text)?;
    if content.len() + 2 > encoder.max_tokens() {
        return Err(Error::invalid(
            "text",
            format!(
                "{} tokens exceed the {}-slot context",
                content.len() + 2,
                encoder.max_tokens()
            ),
        ));
    }
    let encoded = encoder.encode(text)?;
    let eos = encoded.eos_index;
    let body = encoded
        .tokens
        .get(1..eos)
        .ok_or_else(|| Error::invalid("text", "encoder returned inconsistent token list"))?;
    let hits: Vec<usize> = body
        .windows(word_tokens.len())
        .enumerate()
        .filter(|(_, w)| *w == word_tokens.as_slice())
        .map(|(i, _)| i + 1)
        .collect();
    match hits.as_slice() {
        [start] => {
            let layout = TokenLayout::new(*start, start + word_tokens.len() - 1, eos)?;
            Ok((encoded.embedding, layout))
        }
        [] => Err(Error::invalid(
            "shape_word",
            format!("`{shape_word}` does not occur in `{text}`"),
        )),
        _ => Err(Error::invalid(
            "shape_word",
            format!("`{shape_word}` occurs {} times in `{text}`", hits.len()),
        )),
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BankPrompt {
    pub id: String,
    pub text: String,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PromptBank {
    pub mediums: Vec<String>,
    pub adjectives: Vec<String>,
    pub prompts: Vec<BankPrompt>,
}

fn check_unique(field: &str, items: &[String]) -> Result<()> {
    if items.is_empty() {
        return Err(Error::invalid(field, "list is empty"));
    }
    let mut seen = HashSet::new();
    for item in items {
        if !seen.insert(item) {
            return Err(Error::invalid(field, format!("duplicate entry `{item}`")));
        }
    }
    Ok(())
}

/// Cartesian product of mediums and adjectives, rendered through `pattern`
/// (`{medium}` and `{adjective}` are substituted). Ordered medium-major.
pub fn build_prompt_bank(mediums: &[String], adjectives: &[String], pattern: &str) -> Result<PromptBank> {
    check_unique("mediums", mediums)?;
    check_unique("adjectives", adjectives)?;
    check_single_placeholder(pattern)?;
    let mut prompts = Vec::with_capacity(mediums.len() * adjectives.len());
    let mut seen = HashSet::with_capacity(prompts.capacity());
    for medium in mediums {
        for adjective in adjectives {
            let text = pattern.replace("{medium}", medium).replace("{adjective}", adjective);
            if !seen.insert(text.clone()) {
                return Err(Error::invalid(
                    "pattern",
                    format!("pattern renders duplicate prompt `{text}`"),
                ));
            }
            prompts.push(BankPrompt {
                id: format!("p{:05}", prompts.len()),
                text,
            });
        }
    }
    Ok(PromptBank {
        mediums: mediums.to_vec(),
        adjectives: adjectives.to_vec(),
        prompts,
    })
}

impl PromptBank {
    pub fn len(&self) -> usize {
        self.prompts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.prompts.is_empty()
    }

    /// Writes one `{id, text}` JSON record per line.
    pub fn export_jsonl(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut out = std::io::BufWriter::new(std::fs::File::create(path).map_err(|e| Error::io(path, e))?);
        for p in &self.prompts {
            serde_json::to_writer(&mut out, p)?;
            out.write_all(b"\n").map_err(|e| Error::io(path, e))?;
        }
        out.flush().map_err(|e| Error::io(path, e))
    }

    /// Reads a bank previously written by [`PromptBank::export_jsonl`].
    pub fn load_jsonl(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut prompts = Vec::new();
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let p: BankPrompt = serde_json::from_str(line).map_err(|e| Error::Parse {
                source_name: path.display().to_string(),
                line: i + 1,
                message: e.to_string(),
            })?;
            check_single_placeholder(&p.text)?;
            prompts.push(p);
        }
        Ok(Self {
            mediums: Vec::new(),
            adjectives: Vec::new(),
            prompts,
        })
    }
}

/// One entry per nonblank line, trimmed.
pub fn load_word_list(path: impl AsRef<Path>) -> Result<Vec<String>> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(text
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty())
        .map(String::from)
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backends::toy::ToyTextEncoder;

    fn words(prefix: &str, n: usize) -> Vec<String> {
        (0..n).map(|i| format!("{prefix}{i}")).collect()
    }

    #[test]
    fn expands_templates() {
        assert_eq!(
            expand_template("a photo of a [SHAPE-ID]", "chair").unwrap(),
            "a photo of a chair"
        );
        assert_eq!(
            expand_template("a [SHAPE-ID] under a tree", "lamp").unwrap(),
            "a lamp under a tree"
        );
        assert_eq!(expand_template("[SHAPE-ID]", "car").unwrap(), "car");
    }

    #[test]
    fn rejects_bad_templates() {
        assert!(expand_template("a photo", "chair").is_err());
        assert!(expand_template("[SHAPE-ID] and [SHAPE-ID]", "chair").is_err());
        assert!(expand_template("a [SHAPE-ID]", "  ").is_err());
        assert!(PromptTemplate::new("t", "no placeholder").is_err());
    }

    #[test]
    fn bank_counts() {
        let bank = build_prompt_bank(&words("m", 127), &words("a", 108), DEFAULT_BANK_PATTERN).unwrap();
        assert_eq!(bank.len(), 13716);
        let one = build_prompt_bank(&words("m", 1), &words("a", 1), DEFAULT_BANK_PATTERN).unwrap();
        assert_eq!(one.prompts[0].text, "a a0 m0 of a [SHAPE-ID]");
        let small = build_prompt_bank(&words("m", 3), &words("a", 4), DEFAULT_BANK_PATTERN).unwrap();
        let set: HashSet<_> = small.prompts.iter().map(|p| &p.text).collect();
        assert_eq!(set.len(), 12);
    }

    #[test]
    fn bank_rejects_duplicates() {
        let dup = vec!["oil".to_string(), "oil".to_string()];
        assert!(build_prompt_bank(&dup, &words("a", 2), DEFAULT_BANK_PATTERN).is_err());
        assert!(build_prompt_bank(&words("m", 2), &words("a", 2), "a {medium} [SHAPE-ID]").is_err());
    }

    #[test]
    fn bank_jsonl_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let bank = build_prompt_bank(&words("m", 2), &words("a", 3), DEFAULT_BANK_PATTERN).unwrap();
        let path = dir.path().join("bank.jsonl");
        bank.export_jsonl(&path).unwrap();
        assert_eq!(PromptBank::load_jsonl(&path).unwrap().prompts, bank.prompts);
    }

    #[test]
    fn encode_prompt_layouts() {
        let enc = ToyTextEncoder::new(16, 0);
        let (t, l) = encode_prompt(&enc, "a chair", "chair").unwrap();
        assert_eq!(t.dim(), (77, 16));
        assert_eq!((l.shape_start, l.shape_end, l.eos_index), (2, 2, 3));
        let (_, l) = encode_prompt(&enc, "chair", "chair").unwrap();
        assert_eq!((l.shape_start, l.shape_end, l.eos_index), (1, 1, 2));
        let (_, l) = encode_prompt(&enc, "a dining table by the sea", "dining table").unwrap();
        assert_eq!((l.shape_start, l.shape_end, l.eos_index), (2, 3, 7));
    }

    #[test]
    fn encode_prompt_errors() {
        let enc = ToyTextEncoder::new(16, 0);
        assert!(encode_prompt(&enc, "a lamp", "chair").is_err());
        assert!(encode_prompt(&enc, "a chair and a chair", "chair").is_err());
        let long = format!("{} chair", vec!["w"; 80].join(" "));
        assert!(encode_prompt(&enc, &long, "chair").is_err());
    }

    #[test]
    fn shape_span_round_trips_to_category() {
        let enc = ToyTextEncoder::new(16, 0);
        for cat in ["chair", "coffee table", "lamp"] {
            let text = expand_template("a pixelated sketch of a [SHAPE-ID] at night", cat).unwrap();
            let (_, layout) = encode_prompt(&enc, &text, cat).unwrap();
            let tokens = enc.encode(&text).unwrap().tokens;
            assert_eq!(tokens[layout.shape_span()].join(" "), cat);
        }
    }
}
