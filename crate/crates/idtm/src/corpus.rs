//! Epoch-organized bag-of-words corpora.
//!
//! On-disk format is UTF-8 JSON lines: the first line is a header object
//! `{"vocab":[...]}`, every following line is `{"epoch":<int>,"words":[<int>...]}`
//! with word ids indexing into the vocabulary. Documents are stored as token
//! sequences because the sampler assigns a table per token occurrence.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Vocabulary {
    symbols: Vec<String>,
}

impl Vocabulary {
    pub fn new(symbols: Vec<String>) -> Result<Self> {
        if symbols.len() < 2 {
            return Err(Error::Config("vocabulary must contain at least 2 symbols".into()));
        }
        let mut seen = std::collections::HashSet::new();
        for s in &symbols {
            if !seen.insert(s.as_str()) {
                return Err(Error::Config(format!("duplicate vocabulary symbol {s:?}")));
            }
        }
        Ok(Vocabulary { symbols })
    }

    /// Anonymous vocabulary `w0..w{n-1}`, for synthetic corpora.
    pub fn anonymous(size: usize) -> Self {
        Vocabulary { symbols: (0..size).map(|w| format!("w{w}")).collect() }
    }

    pub fn size(&self) -> usize {
        self.symbols.len()
    }

    pub fn symbols(&self) -> &[String] {
        &self.symbols
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Document {
    pub epoch: usize,
    pub words: Vec<u32>,
}

#[derive(Debug, Clone)]
pub struct Corpus {
    vocab: Vocabulary,
    epochs: Vec<Vec<Document>>,
}

/// Load diagnostics: per-epoch token totals plus any warnings.
#[derive(Debug, Clone, Default)]
pub struct LoadReport {
    pub tokens_per_epoch: Vec<usize>,
    pub warnings: Vec<String>,
}

impl Corpus {
    pub fn new(vocab: Vocabulary, documents: Vec<Document>) -> Result<(Self, LoadReport)> {
        let w = vocab.size();
        let t_max = documents.iter().map(|d| d.epoch).max().unwrap_or(0);
        let mut epochs: Vec<Vec<Document>> = vec![Vec::new(); t_max + 1];
        for doc in documents {
            if doc.words.is_empty() {
                return Err(Error::Config("empty document".into()));
            }
            if let Some(&bad) = doc.words.iter().find(|&&x| x as usize >= w) {
                return Err(Error::Config(format!("word id {bad} >= vocabulary size {w}")));
            }
            epochs[doc.epoch].push(doc);
        }
        let mut report = LoadReport::default();
        for (t, docs) in epochs.iter().enumerate() {
            report.tokens_per_epoch.push(docs.iter().map(|d| d.words.len()).sum());
            if docs.is_empty() {
                report.warnings.push(format!("epoch {t} has no documents"));
            }
        }
        Ok((Corpus { vocab, epochs }, report))
    }

    pub fn vocab(&self) -> &Vocabulary {
        &self.vocab
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab.size()
    }

    /// Number of epoch slots T.
    pub fn num_epochs(&self) -> usize {
        self.epochs.len()
    }

    pub fn docs_at(&self, t: usize) -> &[Document] {
        &self.epochs[t]
    }

    pub fn num_docs(&self) -> usize {
        self.epochs.iter().map(|e| e.len()).sum()
    }

    pub fn num_tokens(&self) -> usize {
        self.epochs.iter().flatten().map(|d| d.words.len()).sum()
    }

    pub fn iter_docs(&self) -> impl Iterator<Item = &Document> {
        self.epochs.iter().flatten()
    }

    /// Uniform split into a training and test corpus, test fraction drawn
    /// uniformly across epochs.
    pub fn split(&self, test_fraction: f64, rng: &mut impl rand::Rng) -> Result<(Corpus, Corpus)> {
        let mut train = Vec::new();
        let mut test = Vec::new();
        for docs in &self.epochs {
            let mut idx: Vec<usize> = (0..docs.len()).collect();
            // Fisher-Yates so the choice is seed-stable.
            for i in (1..idx.len()).rev() {
                idx.swap(i, rng.random_range(0..=i));
            }
            let n_test = (docs.len() as f64 * test_fraction).round() as usize;
            for (j, &i) in idx.iter().enumerate() {
                if j < n_test {
                    test.push(docs[i].clone());
                } else {
                    train.push(docs[i].clone());
                }
            }
        }
        let (train, _) = Corpus::new(self.vocab.clone(), train)?;
        let (test, _) = Corpus::new(self.vocab.clone(), test)?;
        Ok((train, test))
    }
}

#[derive(Serialize, Deserialize)]
struct Header {
    vocab: Vec<String>,
}

#[derive(Serialize, Deserialize)]
struct DocLine {
    epoch: usize,
    words: Vec<u32>,
}

pub fn load_corpus(path: impl AsRef<Path>) -> Result<(Corpus, LoadReport)> {
    read_corpus(BufReader::new(File::open(path)?))
}

pub fn read_corpus(reader: impl Read) -> Result<(Corpus, LoadReport)> {
    let reader = BufReader::new(reader);
    let mut lines = reader.lines();
    let header_line = lines
        .next()
        .ok_or_else(|| Error::corpus(1, "missing header line"))??;
    let header: Header = serde_json::from_str(&header_line)
        .map_err(|e| Error::corpus(1, format!("malformed header: {e}")))?;
    let vocab = Vocabulary::new(header.vocab)?;
    let w = vocab.size();

    let mut docs = Vec::new();
    for (i, line) in lines.enumerate() {
        let lineno = i + 2;
        let line = line?;
        if line.trim().is_empty() {
            return Err(Error::corpus(lineno, "blank lines are not permitted"));
        }
        let doc: DocLine = serde_json::from_str(&line)
            .map_err(|e| Error::corpus(lineno, format!("malformed line: {e}")))?;
        if doc.words.is_empty() {
            return Err(Error::corpus(lineno, "empty document"));
        }
        if let Some(&bad) = doc.words.iter().find(|&&x| x as usize >= w) {
            return Err(Error::corpus(lineno, format!("word id {bad} >= vocabulary size {w}")));
        }
        docs.push(Document { epoch: doc.epoch, words: doc.words });
    }
    Corpus::new(vocab, docs)
}

/// Canonical serialization; `write_corpus(load_corpus(p))` is byte-identical
/// for canonically formatted input.
pub fn write_corpus(corpus: &Corpus, writer: impl Write) -> Result<()> {
    let mut w = BufWriter::new(writer);
    let header = Header { vocab: corpus.vocab.symbols.clone() };
    serde_json::to_writer(&mut w, &header)?;
    w.write_all(b"\n")?;
    for doc in corpus.iter_docs() {
        let line = DocLine { epoch: doc.epoch, words: doc.words.clone() };
        serde_json::to_writer(&mut w, &line)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn save_corpus(corpus: &Corpus, path: impl AsRef<Path>) -> Result<()> {
    write_corpus(corpus, File::create(path)?)
}

/// Smoothed empirical word frequencies at epoch `t`. Additive smoothing
/// `eps = 1/W` is applied before normalization so the KL diagnostics are
/// defined even when a word is unseen in the epoch.
pub fn epoch_unigram(corpus: &Corpus, t: usize) -> Result<Vec<f64>> {
    if t >= corpus.num_epochs() {
        return Err(Error::Config(format!("epoch {t} out of range")));
    }
    if corpus.docs_at(t).is_empty() {
        return Err(Error::Config(format!("epoch {t} is empty")));
    }
    let w = corpus.vocab_size();
    let eps = 1.0 / w as f64;
    let mut counts = vec![eps; w];
    let mut total = eps * w as f64;
    for doc in corpus.docs_at(t) {
        for &word in &doc.words {
            counts[word as usize] += 1.0;
            total += 1.0;
        }
    }
    for c in &mut counts {
        *c /= total;
    }
    Ok(counts)
}

/// Symmetrized KL divergence between two distributions over the same support.
pub fn symmetrized_kl(p: &[f64], q: &[f64]) -> f64 {
    assert_eq!(p.len(), q.len());
    let mut acc = 0.0;
    for (&a, &b) in p.iter().zip(q) {
        if a > 0.0 && b > 0.0 {
            acc += (a - b) * (a / b).ln();
        }
    }
    0.5 * acc
}
