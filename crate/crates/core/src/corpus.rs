//! Synthetic multilingual parallel data and the corpus TSV format.
//!
//! Every artificial language renders a shared base sentence by applying a
//! word-order transform and then a substitution cipher over the content
//! vocabulary. All splits are multi-parallel: each base sentence appears in
//! every ordered language direction.

use std::collections::HashSet;
use std::fmt::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::vocab::{Vocab, EOS};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Transform {
    Identity,
    Reverse,
    /// Move the first word to the end.
    Rotate,
}

impl Transform {
    pub fn apply<T: Clone>(self, words: &[T]) -> Vec<T> {
        let mut out = words.to_vec();
        match self {
            Transform::Identity => {}
            Transform::Reverse => out.reverse(),
            Transform::Rotate => {
                if !out.is_empty() {
                    out.rotate_left(1)
                }
            }
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LanguageSpec {
    pub code: String,
    /// Seed of the substitution cipher; absent means the identity cipher.
    #[serde(default)]
    pub cipher_seed: Option<u64>,
    pub transform: Transform,
    /// Label used to bucket directions in evaluation reports.
    #[serde(default = "default_group")]
    pub group: String,
}

fn default_group() -> String {
    "all".to_string()
}

impl LanguageSpec {
    pub fn cipher(&self, content_size: usize) -> Vec<usize> {
        let mut perm: Vec<usize> = (0..content_size).collect();
        if let Some(seed) = self.cipher_seed {
            perm.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        }
        perm
    }

    /// Surface form of a base sentence in this language.
    pub fn render(&self, base: &[usize], content_size: usize) -> Vec<usize> {
        let perm = self.cipher(content_size);
        self.transform.apply(base).into_iter().map(|w| perm[w]).collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitSizes {
    pub train: usize,
    pub valid: usize,
    pub test: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    pub languages: Vec<LanguageSpec>,
    pub content_vocab: usize,
    pub min_len: usize,
    pub max_len: usize,
    /// Base sentences per split; each is rendered in every direction.
    pub sizes: SplitSizes,
}

impl DataConfig {
    /// Four languages: identity, two ciphers with plain word order, and a
    /// cipher with reversed word order.
    pub fn toy() -> Self {
        let lang = |code: &str, seed: Option<u64>, transform, group: &str| LanguageSpec {
            code: code.into(),
            cipher_seed: seed,
            transform,
            group: group.into(),
        };
        Self {
            languages: vec![
                lang("aa", None, Transform::Identity, "plain"),
                lang("bb", Some(11), Transform::Identity, "plain"),
                lang("cc", Some(23), Transform::Identity, "plain"),
                lang("dd", Some(37), Transform::Reverse, "reordered"),
            ],
            content_vocab: 64,
            min_len: 3,
            max_len: 8,
            sizes: SplitSizes {
                train: 600,
                valid: 40,
                test: 40,
            },
        }
    }

    pub fn validate(&self) -> Result<()> {
        let mut seen = HashSet::new();
        for l in &self.languages {
            if !seen.insert(l.code.as_str()) {
                return Err(Error::Invalid(format!("duplicate language code `{}`", l.code)));
            }
            if l.code.is_empty() || l.code.contains(char::is_whitespace) {
                return Err(Error::Invalid(format!("bad language code `{}`", l.code)));
            }
        }
        if self.languages.len() < 2 {
            return Err(Error::Invalid("need at least two languages".into()));
        }
        if self.sizes.train == 0 || self.sizes.valid == 0 || self.sizes.test == 0 {
            return Err(Error::Invalid("corpus sizes must be positive".into()));
        }
        if self.content_vocab == 0 || self.min_len == 0 || self.min_len > self.max_len {
            return Err(Error::Invalid("bad vocabulary size or length range".into()));
        }
        let possible = (self.content_vocab as f64).powi(self.max_len as i32);
        let needed = (self.sizes.train + self.sizes.valid + self.sizes.test) as f64;
        if possible < 2.0 * needed {
            return Err(Error::Invalid(
                "too few distinct sentences for the requested sizes".into(),
            ));
        }
        Ok(())
    }

    pub fn vocab(&self) -> Vocab {
        Vocab::new(
            self.languages.iter().map(|l| l.code.clone()).collect(),
            self.content_vocab,
        )
    }

    pub fn language(&self, code: &str) -> Result<&LanguageSpec> {
        self.languages
            .iter()
            .find(|l| l.code == code)
            .ok_or_else(|| Error::UnknownLanguage(code.to_string()))
    }

    /// All ordered pairs of distinct languages.
    pub fn directions(&self) -> Vec<(String, String)> {
        let mut out = Vec::new();
        for a in &self.languages {
            for b in &self.languages {
                if a.code != b.code {
                    out.push((a.code.clone(), b.code.clone()));
                }
            }
        }
        out
    }
}

/// One line of a corpus file.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ParallelLine {
    pub src_lang: String,
    pub tgt_lang: String,
    pub src_text: String,
    pub tgt_text: String,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Corpora {
    pub train: Vec<ParallelLine>,
    pub valid: Vec<ParallelLine>,
    pub test: Vec<ParallelLine>,
}

fn words_text(words: &[usize]) -> String {
    words.iter().map(|w| format!("w{w}")).collect::<Vec<_>>().join(" ")
}

/// Generates disjoint train/valid/test splits from `seed`.
pub fn generate(config: &DataConfig, seed: u64) -> Result<Corpora> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut seen = HashSet::new();
    let mut draw = |n: usize| -> Vec<Vec<usize>> {
        let mut out = Vec::with_capacity(n);
        while out.len() < n {
            let len = rng.random_range(config.min_len..=config.max_len);
            let s: Vec<usize> = (0..len).map(|_| rng.random_range(0..config.content_vocab)).collect();
            if seen.insert(s.clone()) {
                out.push(s);
            }
        }
        out
    };
    let bases = [
        draw(config.sizes.train),
        draw(config.sizes.valid),
        draw(config.sizes.test),
    ];
    let render = |base: &[Vec<usize>]| -> Vec<ParallelLine> {
        let mut lines = Vec::new();
        for (a, b) in config.directions() {
            let la = config.language(&a).expect("known");
            let lb = config.language(&b).expect("known");
            for s in base {
                lines.push(ParallelLine {
                    src_lang: a.clone(),
                    tgt_lang: b.clone(),
                    src_text: words_text(&la.render(s, config.content_vocab)),
                    tgt_text: words_text(&lb.render(s, config.content_vocab)),
                });
            }
        }
        lines
    };
    Ok(Corpora {
        train: render(&bases[0]),
        valid: render(&bases[1]),
        test: render(&bases[2]),
    })
}

pub fn to_tsv(lines: &[ParallelLine]) -> String {
    let mut out = String::new();
    for l in lines {
        writeln!(out, "{}\t{}\t{}\t{}", l.src_lang, l.tgt_lang, l.src_text, l.tgt_text).unwrap();
    }
    out
}

pub fn parse_tsv(text: &str) -> Result<Vec<ParallelLine>> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.is_empty())
        .map(|(i, l)| {
            let f: Vec<&str> = l.split('\t').collect();
            if f.len() != 4 {
                return Err(Error::parse(
                    "corpus",
                    i + 1,
                    format!("expected 4 fields, found {}", f.len()),
                ));
            }
            Ok(ParallelLine {
                src_lang: f[0].into(),
                tgt_lang: f[1].into(),
                src_text: f[2].into(),
                tgt_text: f[3].into(),
            })
        })
        .collect()
}

pub fn read_tsv(path: &Path) -> Result<Vec<ParallelLine>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_tsv(&text)
}

/// Tokenized training/decoding example.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CorpusSample {
    pub src_lang: String,
    pub tgt_lang: String,
    /// Source language tag, words, end-of-sequence.
    pub src_tokens: Vec<usize>,
    /// Target language tag followed by the words.
    pub tgt_tokens: Vec<usize>,
}

impl CorpusSample {
    pub fn from_line(line: &ParallelLine, vocab: &Vocab) -> Result<Self> {
        let mut src_tokens = vec![vocab.lang_id(&line.src_lang)?];
        src_tokens.extend(vocab.encode_text(&line.src_text)?);
        src_tokens.push(EOS);
        let mut tgt_tokens = vec![vocab.lang_id(&line.tgt_lang)?];
        tgt_tokens.extend(vocab.encode_text(&line.tgt_text)?);
        for &t in src_tokens[1..src_tokens.len() - 1].iter().chain(&tgt_tokens[1..]) {
            if t == EOS || vocab.is_lang_id(t) {
                return Err(Error::Invalid(format!(
                    "special token `{}` inside sentence text",
                    vocab.token(t)
                )));
            }
        }
        Ok(Self {
            src_lang: line.src_lang.clone(),
            tgt_lang: line.tgt_lang.clone(),
            src_tokens,
            tgt_tokens,
        })
    }

    /// Decoder input: the target tags and words.
    pub fn decoder_input(&self) -> &[usize] {
        &self.tgt_tokens
    }

    /// Decoder output: the words then end-of-sequence.
    pub fn decoder_output(&self) -> Vec<usize> {
        let mut out = self.tgt_tokens[1..].to_vec();
        out.push(EOS);
        out
    }

    /// Number of source words, excluding tag and end-of-sequence.
    pub fn source_words(&self) -> usize {
        self.src_tokens.len() - 2
    }
}

pub fn tokenize(lines: &[ParallelLine], vocab: &Vocab) -> Result<Vec<CorpusSample>> {
    lines.iter().map(|l| CorpusSample::from_line(l, vocab)).collect()
}
