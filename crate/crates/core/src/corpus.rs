//! Documents, vocabulary and word-level tokenization.
//!
//! Text is lowercased and split into maximal runs of alphanumeric characters;
//! everything else (whitespace, punctuation) is a separator and is dropped.
//! Four reserved ids come first: PAD, UNK, BOS, EOS.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type TokenId = u32;

pub const PAD: TokenId = 0;
pub const UNK: TokenId = 1;
pub const BOS: TokenId = 2;
pub const EOS: TokenId = 3;
pub const RESERVED: [&str; 4] = ["<pad>", "<unk>", "<bos>", "<eos>"];

/// Number of reserved ids at the bottom of every vocabulary.
pub const NUM_RESERVED: usize = RESERVED.len();

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Document {
    pub id: String,
    pub text: String,
}

impl Document {
    pub fn new(id: impl Into<String>, text: impl Into<String>) -> Self {
        Self {
            id: id.into(),
            text: text.into(),
        }
    }
}

/// Ordered collection of documents with unique, nonempty ids.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct DocumentStore {
    docs: Vec<Document>,
    by_id: HashMap<String, usize>,
}

impl DocumentStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_documents(docs: impl IntoIterator<Item = Document>) -> Result<Self> {
        let mut store = Self::new();
        for doc in docs {
            store.push(doc)?;
        }
        Ok(store)
    }

    pub fn push(&mut self, doc: Document) -> Result<()> {
        if doc.id.is_empty() {
            return Err(Error::InvalidInput("document id must be nonempty".into()));
        }
        if self.by_id.contains_key(&doc.id) {
            return Err(Error::DuplicateId(doc.id));
        }
        self.by_id.insert(doc.id.clone(), self.docs.len());
        self.docs.push(doc);
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.docs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.docs.is_empty()
    }

    pub fn get(&self, index: usize) -> Option<&Document> {
        self.docs.get(index)
    }

    pub fn index_of(&self, id: &str) -> Option<usize> {
        self.by_id.get(id).copied()
    }

    pub fn by_id(&self, id: &str) -> Option<&Document> {
        self.index_of(id).map(|i| &self.docs[i])
    }

    pub fn iter(&self) -> std::slice::Iter<'_, Document> {
        self.docs.iter()
    }

    pub fn documents(&self) -> &[Document] {
        &self.docs
    }

    /// Load a JSONL corpus: one `{"id": ..., "text": ...}` object per line.
    /// Blank lines are skipped; line numbers in errors are 1-based.
    pub fn ingest_jsonl(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        Self::read_jsonl(BufReader::new(file))
    }

    pub fn read_jsonl<R: Read>(reader: R) -> Result<Self> {
        let mut store = Self::new();
        for (idx, line) in BufReader::new(reader).lines().enumerate() {
            let lineno = idx + 1;
            let line = line.map_err(|e| Error::Parse {
                line: lineno,
                msg: e.to_string(),
            })?;
            if line.trim().is_empty() {
                continue;
            }
            let doc: Document = serde_json::from_str(&line).map_err(|e| Error::Parse {
                line: lineno,
                msg: e.to_string(),
            })?;
            store.push(doc)?;
        }
        Ok(store)
    }

    pub fn write_jsonl(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(file);
        for doc in &self.docs {
            serde_json::to_writer(&mut w, doc)?;
            w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }
}

impl<'a> IntoIterator for &'a DocumentStore {
    type Item = &'a Document;
    type IntoIter = std::slice::Iter<'a, Document>;

    fn into_iter(self) -> Self::IntoIter {
        self.docs.iter()
    }
}

/// Lowercased alphanumeric runs of `text`.
pub fn split_words(text: &str) -> impl Iterator<Item = String> + '_ {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|w| !w.is_empty())
        .map(|w| w.to_lowercase())
}

/// An ordered list of token ids. Sequences produced by [`Vocabulary::tokenize`]
/// always end in [`EOS`].
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct TokenSequence(Vec<TokenId>);

impl TokenSequence {
    pub fn new(ids: Vec<TokenId>) -> Self {
        Self(ids)
    }

    pub fn ids(&self) -> &[TokenId] {
        &self.0
    }

    pub fn into_ids(self) -> Vec<TokenId> {
        self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn ends_with_eos(&self) -> bool {
        self.0.last() == Some(&EOS)
    }

    /// Ids without the trailing EOS, if there is one.
    pub fn content(&self) -> &[TokenId] {
        match self.0.split_last() {
            Some((&EOS, rest)) => rest,
            _ => &self.0,
        }
    }

    /// Keep the first `max_len - 1` content ids and re-append EOS. Sequences
    /// that already fit are returned unchanged.
    pub fn truncate(&self, max_len: usize) -> TokenSequence {
        truncate(self, max_len)
    }

    /// `prefix ++ self`, used to attach instruction prefixes.
    pub fn with_prefix(&self, prefix: &[TokenId]) -> TokenSequence {
        let mut ids = Vec::with_capacity(prefix.len() + self.0.len());
        ids.extend_from_slice(prefix);
        ids.extend_from_slice(&self.0);
        TokenSequence(ids)
    }
}

pub fn truncate(seq: &TokenSequence, max_len: usize) -> TokenSequence {
    let max_len = max_len.max(1);
    if seq.len() <= max_len {
        return seq.clone();
    }
    let mut ids = seq.0[..max_len - 1].to_vec();
    ids.push(EOS);
    TokenSequence(ids)
}

/// Bidirectional token/id map. Reserved tokens occupy ids 0..4.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    ids: HashMap<String, TokenId>,
}

impl Vocabulary {
    /// Reserved tokens followed by `words` in the given order (duplicates and
    /// reserved names skipped).
    pub fn from_tokens<S: AsRef<str>>(words: impl IntoIterator<Item = S>) -> Self {
        let mut vocab = Self {
            tokens: Vec::new(),
            ids: HashMap::new(),
        };
        for r in RESERVED {
            vocab.insert(r);
        }
        for w in words {
            vocab.insert(w.as_ref());
        }
        vocab
    }

    fn insert(&mut self, token: &str) {
        if !self.ids.contains_key(token) {
            self.ids.insert(token.to_string(), self.tokens.len() as TokenId);
            self.tokens.push(token.to_string());
        }
    }

    /// Most frequent surface tokens with count ≥ `min_freq`, ties broken
    /// lexicographically, capped so the total size is ≤ `max_size`.
    pub fn build(store: &DocumentStore, max_size: usize, min_freq: usize) -> Result<Self> {
        Self::build_with(store, max_size, min_freq, &[])
    }

    /// Like [`Vocabulary::build`], but `forced` words (e.g. instruction
    /// prefixes) are placed right after the reserved tokens regardless of
    /// frequency.
    pub fn build_with(
        store: &DocumentStore,
        max_size: usize,
        min_freq: usize,
        forced: &[&str],
    ) -> Result<Self> {
        if max_size < NUM_RESERVED {
            return Err(Error::InvalidInput(format!(
                "max_size must be at least {NUM_RESERVED}, got {max_size}"
            )));
        }
        if min_freq == 0 {
            return Err(Error::InvalidInput("min_freq must be positive".into()));
        }
        let mut counts: HashMap<String, usize> = HashMap::new();
        for doc in store {
            for w in split_words(&doc.text) {
                *counts.entry(w).or_default() += 1;
            }
        }
        let forced: Vec<String> = forced.iter().flat_map(|f| split_words(f)).collect();
        let mut ranked: Vec<(String, usize)> = counts
            .into_iter()
            .filter(|(w, c)| *c >= min_freq && !forced.contains(w))
            .collect();
        ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));

        let mut vocab = Self::from_tokens(forced.iter().take(max_size - NUM_RESERVED));
        for (w, _) in ranked {
            if vocab.len() >= max_size {
                break;
            }
            vocab.insert(&w);
        }
        Ok(vocab)
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> Option<TokenId> {
        self.ids.get(token).copied()
    }

    pub fn token(&self, id: TokenId) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    /// Word ids of `text` without the trailing EOS.
    pub fn encode_words(&self, text: &str) -> Vec<TokenId> {
        split_words(text)
            .map(|w| self.id(&w).unwrap_or(UNK))
            .collect()
    }

    pub fn tokenize(&self, text: &str) -> TokenSequence {
        let mut ids = self.encode_words(text);
        ids.push(EOS);
        TokenSequence(ids)
    }

    /// Space-joined tokens, with reserved tokens other than UNK dropped.
    pub fn detokenize(&self, seq: &TokenSequence) -> String {
        seq.ids()
            .iter()
            .filter(|&&id| id == UNK || id as usize >= NUM_RESERVED)
            .map(|&id| self.token(id).unwrap_or(RESERVED[UNK as usize]))
            .collect::<Vec<_>>()
            .join(" ")
    }

    /// One token per line; line number is the id.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(file);
        for t in &self.tokens {
            writeln!(w, "{t}").map_err(|e| Error::io(path, e))?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        let mut tokens = Vec::new();
        for (i, line) in BufReader::new(file).lines().enumerate() {
            let line = line.map_err(|e| Error::io(path, e))?;
            tokens.push(line);
            if i < NUM_RESERVED && tokens[i] != RESERVED[i] {
                return Err(Error::Parse {
                    line: i + 1,
                    msg: format!("expected reserved token {}", RESERVED[i]),
                });
            }
        }
        if tokens.len() < NUM_RESERVED {
            return Err(Error::Format("vocabulary is missing reserved tokens".into()));
        }
        let mut ids = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if ids.insert(t.clone(), i as TokenId).is_some() {
                return Err(Error::Parse {
                    line: i + 1,
                    msg: format!("duplicate token {t:?}"),
                });
            }
        }
        Ok(Self { tokens, ids })
    }
}

/// Free-function form of [`Vocabulary::tokenize`].
pub fn tokenize(text: &str, vocab: &Vocabulary) -> TokenSequence {
    vocab.tokenize(text)
}
