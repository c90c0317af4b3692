//! Tokenization, vocabulary, `[CLS]`-prefixed encoding and fixed-size chunking.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

pub const PAD: &str = "[PAD]";
pub const UNK: &str = "[UNK]";
pub const CLS: &str = "[CLS]";

pub const PAD_ID: u32 = 0;
pub const UNK_ID: u32 = 1;
pub const CLS_ID: u32 = 2;

/// Default number of content tokens per chunk during feature extraction.
pub const DEFAULT_CHUNK_SIZE: usize = 50;

/// Splits raw text into tokens. Downstream modules only see token strings, so a
/// subword tokenizer can be dropped in here.
pub trait Tokenizer: Send + Sync {
    fn tokenize(&self, text: &str) -> Vec<String>;
}

/// Lowercasing whitespace tokenizer that detaches punctuation.
///
/// An apostrophe between two alphanumerics stays inside the word (`can't`).
#[derive(Debug, Clone, Copy, Default)]
pub struct BasicTokenizer;

fn is_apostrophe(c: char) -> bool {
    c == '\'' || c == '\u{2019}'
}

impl Tokenizer for BasicTokenizer {
    fn tokenize(&self, text: &str) -> Vec<String> {
        let mut tokens = Vec::new();
        for piece in text.split_whitespace() {
            let chars: Vec<char> = piece.chars().collect();
            let mut word = String::new();
            for (i, &c) in chars.iter().enumerate() {
                let inner_apostrophe = is_apostrophe(c)
                    && !word.is_empty()
                    && chars.get(i + 1).is_some_and(|n| n.is_alphanumeric());
                if c.is_alphanumeric() || inner_apostrophe {
                    word.extend(c.to_lowercase());
                } else {
                    if !word.is_empty() {
                        tokens.push(std::mem::take(&mut word));
                    }
                    tokens.push(c.to_lowercase().collect());
                }
            }
            if !word.is_empty() {
                tokens.push(word);
            }
        }
        tokens
    }
}

pub fn tokenize(text: &str) -> Vec<String> {
    BasicTokenizer.tokenize(text)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, u32>,
}

impl Vocab {
    fn from_tokens(tokens: Vec<String>) -> Result<Self> {
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if index.insert(t.clone(), i as u32).is_some() {
                return Err(Error::invalid(format!("vocabulary token `{t}` appears twice")));
            }
        }
        if tokens.len() < 3 || tokens[0] != PAD || tokens[1] != UNK || tokens[2] != CLS {
            return Err(Error::invalid("vocabulary must start with [PAD], [UNK], [CLS]"));
        }
        Ok(Vocab { tokens, index })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> u32 {
        self.index.get(token).copied().unwrap_or(UNK_ID)
    }

    pub fn token(&self, id: u32) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    /// One token per line; the line number is the id.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut body = self.tokens.join("\n");
        body.push('\n');
        fs::write(path, body).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let body = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_tokens(body.lines().map(str::to_string).collect())
    }
}

/// Specials first, then every token seen at least `min_count` times ordered by
/// descending frequency with lexicographic tiebreak.
pub fn build_vocab<S: AsRef<str>>(corpus: &[S], min_count: usize, tokenizer: &dyn Tokenizer) -> Result<Vocab> {
    if corpus.is_empty() {
        return Err(Error::invalid("cannot build a vocabulary from an empty corpus"));
    }
    let mut counts: HashMap<String, usize> = HashMap::new();
    for text in corpus {
        for tok in tokenizer.tokenize(text.as_ref()) {
            *counts.entry(tok).or_default() += 1;
        }
    }
    let mut ranked: Vec<(String, usize)> = counts
        .into_iter()
        .filter(|(t, c)| *c >= min_count.max(1) && t != PAD && t != UNK && t != CLS)
        .collect();
    ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));

    let tokens = [PAD, UNK, CLS]
        .into_iter()
        .map(str::to_string)
        .chain(ranked.into_iter().map(|(t, _)| t))
        .collect();
    Vocab::from_tokens(tokens)
}

/// Encoded ids; position 0 is always `[CLS]`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenSeq {
    pub ids: Vec<u32>,
}

impl TokenSeq {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

pub fn encode<S: AsRef<str>>(tokens: &[S], vocab: &Vocab, max_len: usize) -> Result<TokenSeq> {
    if max_len < 2 {
        return Err(Error::invalid(format!("max_len must be at least 2, got {max_len}")));
    }
    let mut ids = Vec::with_capacity(max_len.min(tokens.len() + 1));
    ids.push(CLS_ID);
    ids.extend(tokens.iter().take(max_len - 1).map(|t| vocab.id(t.as_ref())));
    Ok(TokenSeq { ids })
}

/// Contiguous non-overlapping slices of content tokens (no `[CLS]`).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ChunkSet {
    pub chunks: Vec<Vec<String>>,
    pub chunk_size: usize,
}

impl ChunkSet {
    pub fn len(&self) -> usize {
        self.chunks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.chunks.is_empty()
    }

    pub fn encode(&self, vocab: &Vocab, max_len: usize) -> Result<Vec<TokenSeq>> {
        self.chunks.iter().map(|c| encode(c, vocab, max_len)).collect()
    }

    pub fn flatten(&self) -> Vec<String> {
        self.chunks.concat()
    }
}

pub fn chunk(tokens: &[String], chunk_size: usize) -> Result<ChunkSet> {
    if chunk_size < 1 {
        return Err(Error::invalid("chunk_size must be at least 1"));
    }
    let chunks = if tokens.is_empty() {
        vec![Vec::new()]
    } else {
        tokens.chunks(chunk_size).map(<[String]>::to_vec).collect()
    };
    Ok(ChunkSet { chunks, chunk_size })
}
