//! Per-word input features for the contextual encoder: pre-trained word
//! vectors, character indices for the character CNN, and a fixed vector of
//! local morphological flags.

use std::collections::{BTreeMap, HashMap};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const UNK: &str = "<UNK>";
pub const NIL: &str = "<NIL>";
pub const UNK_ROW: usize = 0;
pub const NIL_ROW: usize = 1;

pub const LOCAL_FEATURES: usize = 13;
pub const DEFAULT_MAX_CHARS: usize = 24;

#[derive(Debug, Error)]
pub enum FeatureError {
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("empty corpus")]
    EmptyCorpus,
    #[error("embedding dimension must be at least 1")]
    ZeroDimension,
    #[error("local features need a non-empty token")]
    EmptyToken,
    #[error("malformed embedding table at line {line}: {reason}")]
    Malformed { line: usize, reason: String },
}

/// Word vectors with two reserved rows: `<UNK>` (row 0) and `<NIL>` (row 1).
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingTable {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
    dim: usize,
    vectors: Vec<f64>,
}

impl EmbeddingTable {
    /// Builds a table from rows. The first two rows must be `<UNK>` and `<NIL>`.
    pub fn from_rows(tokens: Vec<String>, dim: usize, vectors: Vec<f64>) -> Result<Self, String> {
        if dim == 0 {
            return Err("dimension must be at least 1".into());
        }
        if tokens.len() < 2 || tokens[UNK_ROW] != UNK || tokens[NIL_ROW] != NIL {
            return Err("first rows must be <UNK> and <NIL>".into());
        }
        if vectors.len() != tokens.len() * dim {
            return Err(format!(
                "expected {} values, found {}",
                tokens.len() * dim,
                vectors.len()
            ));
        }
        if vectors.iter().any(|v| !v.is_finite()) {
            return Err("non-finite vector entry".into());
        }
        let mut index = HashMap::with_capacity(tokens.len());
        for (row, tok) in tokens.iter().enumerate() {
            if tok.is_empty() || tok.chars().any(char::is_whitespace) {
                return Err(format!("invalid token {tok:?}"));
            }
            if index.insert(tok.clone(), row).is_some() {
                return Err(format!("duplicate token {tok:?}"));
            }
        }
        Ok(EmbeddingTable {
            tokens,
            index,
            dim,
            vectors,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Number of rows, including the two reserved rows.
    pub fn rows(&self) -> usize {
        self.tokens.len()
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn row_of(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied()
    }

    pub fn contains(&self, token: &str) -> bool {
        self.index.contains_key(token)
    }

    pub fn row(&self, row: usize) -> &[f64] {
        &self.vectors[row * self.dim..(row + 1) * self.dim]
    }

    /// Vector for a token; unseen tokens fall back to `<UNK>`.
    pub fn embed_word(&self, token: &str) -> &[f64] {
        self.row(self.row_of(token).unwrap_or(UNK_ROW))
    }

    pub fn nil(&self) -> &[f64] {
        self.row(NIL_ROW)
    }

    pub fn cosine(&self, a: &str, b: &str) -> f64 {
        cosine(self.embed_word(a), self.embed_word(b))
    }

    pub fn write_to<W: Write>(&self, mut w: W) -> Result<(), FeatureError> {
        writeln!(w, "d={} n={}", self.dim, self.rows())?;
        for (row, tok) in self.tokens.iter().enumerate() {
            write!(w, "{tok}")?;
            for v in self.row(row) {
                // Display for f64 is the shortest string that parses back exactly.
                write!(w, " {v}")?;
            }
            writeln!(w)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<(), FeatureError> {
        self.write_to(BufWriter::new(File::create(path)?))
    }

    pub fn read_from<R: BufRead>(reader: R) -> Result<Self, FeatureError> {
        let mut lines = reader.lines();
        let header = lines.next().transpose()?.ok_or(FeatureError::Malformed {
            line: 1,
            reason: "missing header".into(),
        })?;
        let (dim, rows) = parse_table_header(&header).ok_or_else(|| FeatureError::Malformed {
            line: 1,
            reason: format!("bad header {header:?}"),
        })?;
        let mut tokens = Vec::with_capacity(rows);
        let mut vectors = Vec::with_capacity(rows * dim);
        for (idx, line) in lines.enumerate() {
            let line_no = idx + 2;
            let line = line?;
            if line.is_empty() {
                continue;
            }
            let mut parts = line.split(' ');
            let tok = parts.next().unwrap_or_default().to_string();
            let before = vectors.len();
            for p in parts {
                let v: f64 = p.parse().map_err(|_| FeatureError::Malformed {
                    line: line_no,
                    reason: format!("bad float {p:?}"),
                })?;
                vectors.push(v);
            }
            if vectors.len() - before != dim {
                return Err(FeatureError::Malformed {
                    line: line_no,
                    reason: format!("expected {dim} values, found {}", vectors.len() - before),
                });
            }
            tokens.push(tok);
        }
        if tokens.len() != rows {
            return Err(FeatureError::Malformed {
                line: rows + 1,
                reason: format!("header promises {rows} rows, found {}", tokens.len()),
            });
        }
        EmbeddingTable::from_rows(tokens, dim, vectors)
            .map_err(|reason| FeatureError::Malformed { line: 1, reason })
    }

    pub fn load(path: &Path) -> Result<Self, FeatureError> {
        Self::read_from(BufReader::new(File::open(path)?))
    }
}

fn parse_table_header(header: &str) -> Option<(usize, usize)> {
    let mut it = header.split_whitespace();
    let dim = it.next()?.strip_prefix("d=")?.parse().ok()?;
    let rows = it.next()?.strip_prefix("n=")?.parse().ok()?;
    if it.next().is_some() {
        return None;
    }
    Some((dim, rows))
}

pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na * nb)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct SkipGramConfig {
    pub dim: usize,
    pub epochs: usize,
    pub window: usize,
    pub negatives: usize,
    pub min_count: usize,
    pub learning_rate: f64,
    pub seed: u64,
}

impl Default for SkipGramConfig {
    fn default() -> Self {
        SkipGramConfig {
            dim: 100,
            epochs: 10,
            window: 5,
            negatives: 5,
            min_count: 1,
            learning_rate: 0.025,
            seed: 42,
        }
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Trains skip-gram vectors with negative sampling.
///
/// Vocabulary rows are ordered by descending frequency, ties broken
/// lexicographically, so the table layout is independent of hash order.
pub fn train_skipgram(
    corpus: &[Vec<String>],
    cfg: &SkipGramConfig,
) -> Result<EmbeddingTable, FeatureError> {
    if cfg.dim == 0 {
        return Err(FeatureError::ZeroDimension);
    }
    let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
    for sentence in corpus {
        for tok in sentence {
            *counts.entry(tok.as_str()).or_default() += 1;
        }
    }
    counts.retain(|tok, c| *c >= cfg.min_count.max(1) && *tok != UNK && *tok != NIL);
    if counts.is_empty() {
        return Err(FeatureError::EmptyCorpus);
    }
    let mut vocab: Vec<(&str, usize)> = counts.into_iter().collect();
    vocab.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(b.0)));
    let index: HashMap<&str, usize> = vocab
        .iter()
        .enumerate()
        .map(|(i, (t, _))| (*t, i))
        .collect();

    let dim = cfg.dim;
    let n = vocab.len();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let scale = 0.5 / dim as f64;
    let mut input: Vec<f64> = (0..n * dim)
        .map(|_| rng.random_range(-scale..scale))
        .collect();
    let mut output = vec![0.0; n * dim];

    let sentences: Vec<Vec<usize>> = corpus
        .iter()
        .map(|s| {
            s.iter()
                .filter_map(|t| index.get(t.as_str()).copied())
                .collect()
        })
        .collect();
    let total_steps = (cfg.epochs * sentences.iter().map(Vec::len).sum::<usize>()).max(1);
    let noise = WeightedIndex::new(vocab.iter().map(|(_, c)| (*c as f64).powf(0.75)))
        .expect("vocabulary is non-empty with positive counts");

    let mut step = 0usize;
    let mut grad_in = vec![0.0; dim];
    for _ in 0..cfg.epochs {
        for sentence in &sentences {
            for (pos, &center) in sentence.iter().enumerate() {
                let lr = (cfg.learning_rate * (1.0 - step as f64 / total_steps as f64))
                    .max(cfg.learning_rate * 1e-4);
                step += 1;
                let lo = pos.saturating_sub(cfg.window);
                let hi = (pos + cfg.window + 1).min(sentence.len());
                for ctx_pos in lo..hi {
                    if ctx_pos == pos {
                        continue;
                    }
                    let context = sentence[ctx_pos];
                    grad_in.iter_mut().for_each(|g| *g = 0.0);
                    let centre_vec = center * dim;
                    for k in 0..=cfg.negatives {
                        let (target, label) = if k == 0 {
                            (context, 1.0)
                        } else {
                            let t = noise.sample(&mut rng);
                            if t == context {
                                continue;
                            }
                            (t, 0.0)
                        };
                        let out_vec = target * dim;
                        let dot: f64 = (0..dim)
                            .map(|d| input[centre_vec + d] * output[out_vec + d])
                            .sum();
                        let g = lr * (label - sigmoid(dot));
                        for d in 0..dim {
                            grad_in[d] += g * output[out_vec + d];
                            output[out_vec + d] += g * input[centre_vec + d];
                        }
                    }
                    for d in 0..dim {
                        input[centre_vec + d] += grad_in[d];
                    }
                }
            }
        }
    }

    let mut tokens = Vec::with_capacity(n + 2);
    tokens.push(UNK.to_string());
    tokens.push(NIL.to_string());
    tokens.extend(vocab.iter().map(|(t, _)| t.to_string()));
    let mut vectors = vec![0.0; (n + 2) * dim];
    for d in 0..dim {
        vectors[d] = (0..n).map(|r| input[r * dim + d]).sum::<f64>() / n as f64;
    }
    vectors[2 * dim..].copy_from_slice(&input);
    Ok(EmbeddingTable::from_rows(tokens, dim, vectors).expect("trained table is well formed"))
}

/// Thirteen local shape features; see [`local_features`] for the order.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LocalFeatureVector(pub [f64; LOCAL_FEATURES]);

impl LocalFeatureVector {
    pub const ALL_ALPHABETIC: usize = 0;
    pub const ALL_DIGIT: usize = 1;
    pub const MIXED_ALPHANUMERIC: usize = 2;
    pub const CONTAINS_DIGIT: usize = 3;
    pub const CONTAINS_UNDERSCORE: usize = 4;
    pub const CONTAINS_HYPHEN: usize = 5;
    pub const CONTAINS_DOT: usize = 6;
    pub const CONTAINS_SLASH: usize = 7;
    pub const CONTAINS_COLON: usize = 8;
    pub const HEX_LIKE: usize = 9;
    pub const INITIAL_CAPITAL: usize = 10;
    pub const ALL_CAPS: usize = 11;
    pub const LENGTH: usize = 12;

    pub fn values(&self) -> &[f64] {
        &self.0
    }
}

/// Computes the local morphological features of a token.
///
/// Order: all-alphabetic, all-digit, mixed-alphanumeric, contains-digit,
/// contains `_`, `-`, `.`, `/`, `:`, hex-like, initial capital, all caps,
/// and `min(len, 20) / 20`.
pub fn local_features(token: &str) -> Result<LocalFeatureVector, FeatureError> {
    if token.is_empty() {
        return Err(FeatureError::EmptyToken);
    }
    let flag = |b: bool| if b { 1.0 } else { 0.0 };
    let has_alpha = token.chars().any(char::is_alphabetic);
    let has_digit = token.chars().any(|c| c.is_ascii_digit());
    let len = token.chars().count();
    let first = token.chars().next().expect("non-empty");
    let mut v = [0.0; LOCAL_FEATURES];
    v[0] = flag(token.chars().all(char::is_alphabetic));
    v[1] = flag(token.chars().all(|c| c.is_ascii_digit()));
    v[2] = flag(has_alpha && has_digit);
    v[3] = flag(has_digit);
    v[4] = flag(token.contains('_'));
    v[5] = flag(token.contains('-'));
    v[6] = flag(token.contains('.'));
    v[7] = flag(token.contains('/'));
    v[8] = flag(token.contains(':'));
    v[9] = flag(token.chars().all(|c| c.is_ascii_hexdigit()) && has_digit && len >= 4);
    v[10] = flag(first.is_uppercase());
    v[11] = flag(
        has_alpha
            && token
                .chars()
                .filter(|c| c.is_alphabetic())
                .all(char::is_uppercase),
    );
    v[12] = len.min(20) as f64 / 20.0;
    Ok(LocalFeatureVector(v))
}

/// Character vocabulary for the character CNN. The unknown-character slot is
/// always the last index.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CharAlphabet {
    chars: BTreeMap<char, usize>,
    unk: usize,
}

impl CharAlphabet {
    /// Printable ASCII characters observed in `tokens`, sorted, plus `<UNKC>`.
    pub fn from_tokens<'a, I: IntoIterator<Item = &'a str>>(tokens: I) -> Self {
        let mut seen: Vec<char> = Vec::new();
        for tok in tokens {
            for c in tok.chars() {
                if c.is_ascii_graphic() && !seen.contains(&c) {
                    seen.push(c);
                }
            }
        }
        seen.sort_unstable();
        Self::from_chars(&seen.into_iter().collect::<String>())
    }

    /// Alphabet with the characters of `chars` in the given order.
    pub fn from_chars(chars: &str) -> Self {
        let mut map = BTreeMap::new();
        for c in chars.chars() {
            let next = map.len();
            map.entry(c).or_insert(next);
        }
        let unk = map.len();
        CharAlphabet { chars: map, unk }
    }

    /// Known characters in index order (serialized form).
    pub fn as_string(&self) -> String {
        let mut v: Vec<(usize, char)> = self.chars.iter().map(|(&c, &i)| (i, c)).collect();
        v.sort_unstable();
        v.into_iter().map(|(_, c)| c).collect()
    }

    /// Size including `<UNKC>`.
    pub fn size(&self) -> usize {
        self.unk + 1
    }

    pub fn unk(&self) -> usize {
        self.unk
    }

    pub fn index_of(&self, c: char) -> usize {
        self.chars.get(&c).copied().unwrap_or(self.unk)
    }
}

/// Maps a token to character indices, truncated to `max_chars`.
pub fn char_indices(token: &str, alphabet: &CharAlphabet, max_chars: usize) -> Vec<usize> {
    token
        .chars()
        .take(max_chars)
        .map(|c| alphabet.index_of(c))
        .collect()
}
