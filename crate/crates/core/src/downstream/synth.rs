//! Synthetic annotated logs grouped into labelled sessions.
//!
//! A generator spec is a TOML document:
//!
//! ```toml
//! name = "demo"
//! prefix = "[request] {req->request}"
//!
//! [session]
//! sessions = 100
//! mean_len = 6.9
//! min_len = 2
//! anomaly_rate = 0.05
//!
//! [pools.req]
//! kind = "ident"
//! prefix = "r-"
//! digits = 6
//! scope = "session"
//! unique = true
//!
//! [pools.status]
//! kind = "choice"
//! values = ["200", "204"]
//!
//! [[templates]]
//! text = "handled with [status] {status->status}"
//! position = "last"
//!
//! [[failures]]
//! name = "server-error"
//! pool = "status"
//! values = ["500"]
//! ```
//!
//! Template skeletons are whitespace-separated canonical tokens. `[word]`
//! marks a concept, `{pool}` an instance drawn from `pool`, and
//! `{pool->word}` an instance paired with the nearest `[word]` concept of the
//! same skeleton. Everything else is literal text: `a|b|c` picks one of the
//! alternatives uniformly and a trailing `?` makes a literal optional.
//!
//! Each session runs its `first` templates, then a Poisson-distributed number
//! of weighted `body` templates, then its `last` templates. Failing sessions
//! draw their failure's pool from the failure's signature values instead of
//! the pool's own, so failures differ from normal sessions only in instance
//! values.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::Poisson;
use serde::{Deserialize, Serialize};

use super::DownstreamError;
use crate::logio::{tokenize, write_annotations_to, AnnotatedMessage, Category};

/// Leading columns of every generated raw log line (`<line> INFO`).
pub const RAW_HEADER_COLUMNS: usize = 2;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GeneratorSpec {
    pub name: String,
    /// Skeleton prepended to every message.
    #[serde(default)]
    pub prefix: Option<String>,
    pub session: SessionSpec,
    pub pools: BTreeMap<String, PoolSpec>,
    pub templates: Vec<TemplateSpec>,
    #[serde(default)]
    pub failures: Vec<FailureSpec>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SessionSpec {
    pub sessions: usize,
    pub mean_len: f64,
    #[serde(default = "one")]
    pub min_len: usize,
    #[serde(default)]
    pub anomaly_rate: f64,
    /// Concept whose paired instance names the session.
    #[serde(default = "request")]
    pub key_concept: String,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Scope {
    /// One value per session, reused by every message of the session.
    Session,
    /// A fresh value per message.
    #[default]
    Message,
}

/// A value pool. `kind` is one of `hex` (`len`), `ident` (`prefix`,
/// `digits`), `int` (`min`, `max`) or `choice` (`values`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PoolSpec {
    pub kind: String,
    #[serde(default)]
    pub len: Option<usize>,
    #[serde(default)]
    pub prefix: Option<String>,
    #[serde(default)]
    pub digits: Option<usize>,
    #[serde(default)]
    pub min: Option<i64>,
    #[serde(default)]
    pub max: Option<i64>,
    #[serde(default)]
    pub values: Option<Vec<String>>,
    #[serde(default)]
    pub scope: Scope,
    /// Never repeat a value across the whole corpus.
    #[serde(default)]
    pub unique: bool,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Position {
    First,
    #[default]
    Body,
    Last,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TemplateSpec {
    pub text: String,
    #[serde(default = "unit_weight")]
    pub weight: f64,
    #[serde(default)]
    pub position: Position,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FailureSpec {
    pub name: String,
    pub pool: String,
    pub values: Vec<String>,
}

fn one() -> usize {
    1
}

fn unit_weight() -> f64 {
    1.0
}

fn request() -> String {
    "request".into()
}

impl GeneratorSpec {
    pub fn from_toml_str(text: &str) -> Result<Self, DownstreamError> {
        let spec: GeneratorSpec =
            toml::from_str(text).map_err(|e| DownstreamError::InvalidSpec(e.to_string()))?;
        compile(&spec)?;
        Ok(spec)
    }

    pub fn load(path: &Path) -> Result<Self, DownstreamError> {
        Self::from_toml_str(&fs::read_to_string(path)?)
    }
}

/// One generated session: a contiguous run of messages.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SynthSession {
    pub key: String,
    /// Index of the session's first message in the corpus.
    pub start: usize,
    pub len: usize,
    pub anomalous: bool,
    /// Failure class index, for failing sessions.
    pub class: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SynthCorpus {
    pub name: String,
    pub messages: Vec<AnnotatedMessage>,
    pub sessions: Vec<SynthSession>,
    /// Failure class names, indexed by class.
    pub classes: Vec<String>,
}

#[derive(Debug, Clone)]
enum Piece {
    Literal {
        alternatives: Vec<String>,
        optional: bool,
    },
    Concept(String),
    Instance {
        pool: usize,
        partner: Option<usize>,
    },
}

#[derive(Debug, Clone)]
struct Template {
    pieces: Vec<Piece>,
}

#[derive(Debug, Clone)]
enum Draw {
    Hex(usize),
    Ident(String, usize),
    Int(i64, i64),
    Choice(Vec<String>),
}

#[derive(Debug, Clone)]
struct Pool {
    draw: Draw,
    scope: Scope,
    unique: bool,
}

struct Compiled {
    pools: Vec<Pool>,
    prefix: Vec<Piece>,
    first: Vec<Template>,
    body: Vec<Template>,
    body_weights: Vec<f64>,
    last: Vec<Template>,
    /// `(pool index, signature values)` per failure class.
    failures: Vec<(usize, Draw)>,
}

fn invalid(msg: impl Into<String>) -> DownstreamError {
    DownstreamError::InvalidSpec(msg.into())
}

fn check_token(tok: &str, what: &str) -> Result<(), DownstreamError> {
    if tokenize(tok) != [tok] {
        return Err(invalid(format!(
            "{what} {tok:?} is not a single canonical token"
        )));
    }
    Ok(())
}

fn compile_skeleton(
    text: &str,
    pool_ids: &HashMap<&str, usize>,
) -> Result<Vec<Piece>, DownstreamError> {
    let mut pieces = Vec::new();
    let mut wanted: Vec<(usize, String)> = Vec::new();
    for raw in text.split_whitespace() {
        if let Some(word) = raw.strip_prefix('[').and_then(|r| r.strip_suffix(']')) {
            check_token(word, "concept")?;
            pieces.push(Piece::Concept(word.to_string()));
        } else if let Some(inner) = raw.strip_prefix('{').and_then(|r| r.strip_suffix('}')) {
            let (pool, partner) = match inner.split_once("->") {
                Some((p, c)) => (p, Some(c)),
                None => (inner, None),
            };
            let id = *pool_ids
                .get(pool)
                .ok_or_else(|| invalid(format!("template {text:?} uses unknown pool {pool:?}")))?;
            if let Some(c) = partner {
                wanted.push((pieces.len(), c.to_string()));
            }
            pieces.push(Piece::Instance {
                pool: id,
                partner: None,
            });
        } else {
            let (body, optional) = match raw.strip_suffix('?') {
                Some(b) if !b.is_empty() => (b, true),
                _ => (raw, false),
            };
            let alternatives: Vec<String> = if body.len() > 1 && body.contains('|') {
                body.split('|').map(str::to_string).collect()
            } else {
                vec![body.to_string()]
            };
            for a in &alternatives {
                check_token(a, "literal")?;
            }
            pieces.push(Piece::Literal {
                alternatives,
                optional,
            });
        }
    }
    if pieces.is_empty() {
        return Err(invalid("empty template"));
    }
    for (at, concept) in wanted {
        let partner = pieces
            .iter()
            .enumerate()
            .filter(|(_, p)| matches!(p, Piece::Concept(w) if *w == concept))
            .min_by_key(|(k, _)| (k.abs_diff(at), *k))
            .map(|(k, _)| k)
            .ok_or_else(|| {
                invalid(format!(
                    "template {text:?} pairs with missing concept [{concept}]"
                ))
            })?;
        if let Piece::Instance { partner: p, .. } = &mut pieces[at] {
            *p = Some(partner);
        }
    }
    Ok(pieces)
}

fn compile_draw(name: &str, p: &PoolSpec) -> Result<Draw, DownstreamError> {
    let need = |what: &str| invalid(format!("pool {name:?} of kind {:?} needs `{what}`", p.kind));
    let draw = match p.kind.as_str() {
        "hex" => Draw::Hex(p.len.ok_or_else(|| need("len"))?),
        "ident" => Draw::Ident(
            p.prefix.clone().unwrap_or_default(),
            p.digits.ok_or_else(|| need("digits"))?,
        ),
        "int" => {
            let (lo, hi) = (
                p.min.ok_or_else(|| need("min"))?,
                p.max.ok_or_else(|| need("max"))?,
            );
            if lo > hi {
                return Err(invalid(format!("pool {name:?} has min > max")));
            }
            Draw::Int(lo, hi)
        }
        "choice" => {
            let values = p.values.clone().ok_or_else(|| need("values"))?;
            if values.is_empty() {
                return Err(need("values"));
            }
            for v in &values {
                check_token(v, "pool value")?;
            }
            Draw::Choice(values)
        }
        other => return Err(invalid(format!("pool {name:?} has unknown kind {other:?}"))),
    };
    match &draw {
        Draw::Hex(0) | Draw::Ident(_, 0) => {
            return Err(invalid(format!("pool {name:?} draws empty values")))
        }
        Draw::Ident(prefix, _) if !prefix.is_empty() => {
            check_token(&format!("{prefix}0"), "pool prefix")?
        }
        _ => {}
    }
    Ok(draw)
}

fn compile(spec: &GeneratorSpec) -> Result<Compiled, DownstreamError> {
    let s = &spec.session;
    if !(s.mean_len.is_finite() && s.mean_len >= s.min_len as f64) {
        return Err(invalid(
            "session.mean_len must be finite and at least min_len",
        ));
    }
    if !(0.0..=1.0).contains(&s.anomaly_rate) {
        return Err(invalid("session.anomaly_rate must be in [0, 1]"));
    }
    let names: Vec<&str> = spec.pools.keys().map(String::as_str).collect();
    let pool_ids: HashMap<&str, usize> = names.iter().enumerate().map(|(i, n)| (*n, i)).collect();
    let pools = spec
        .pools
        .iter()
        .map(|(name, p)| {
            Ok(Pool {
                draw: compile_draw(name, p)?,
                scope: p.scope,
                unique: p.unique,
            })
        })
        .collect::<Result<Vec<_>, DownstreamError>>()?;
    let prefix = match &spec.prefix {
        Some(text) => compile_skeleton(text, &pool_ids)?,
        None => Vec::new(),
    };
    let (mut first, mut body, mut body_weights, mut last) =
        (Vec::new(), Vec::new(), Vec::new(), Vec::new());
    for t in &spec.templates {
        let compiled = Template {
            pieces: compile_skeleton(&t.text, &pool_ids)?,
        };
        match t.position {
            Position::First => first.push(compiled),
            Position::Last => last.push(compiled),
            Position::Body => {
                if !(t.weight.is_finite() && t.weight > 0.0) {
                    return Err(invalid(format!(
                        "template {:?} needs a positive weight",
                        t.text
                    )));
                }
                body.push(compiled);
                body_weights.push(t.weight);
            }
        }
    }
    if body.is_empty() && s.mean_len > (first.len() + last.len()) as f64 {
        return Err(invalid(
            "sessions longer than their fixed templates need body templates",
        ));
    }
    let uses = |ts: &[Template], pool: usize| {
        ts.iter().any(|t| {
            t.pieces
                .iter()
                .any(|p| matches!(p, Piece::Instance { pool: q, .. } if *q == pool))
        })
    };
    let mut failures = Vec::new();
    for f in &spec.failures {
        let pool = *pool_ids.get(f.pool.as_str()).ok_or_else(|| {
            invalid(format!(
                "failure {:?} names unknown pool {:?}",
                f.name, f.pool
            ))
        })?;
        let prefix_uses = prefix
            .iter()
            .any(|p| matches!(p, Piece::Instance { pool: q, .. } if *q == pool));
        if !(prefix_uses || uses(&first, pool) || uses(&last, pool)) {
            return Err(invalid(format!(
                "failure {:?}: pool {:?} must appear in a first or last template so every failing session shows it",
                f.name, f.pool
            )));
        }
        if f.values.is_empty() {
            return Err(invalid(format!(
                "failure {:?} has no signature values",
                f.name
            )));
        }
        for v in &f.values {
            check_token(v, "signature value")?;
            if let Draw::Choice(normal) = &pools[pool].draw {
                if normal.contains(v) {
                    return Err(invalid(format!(
                        "signature value {v:?} of {:?} is also a normal value",
                        f.name
                    )));
                }
            }
        }
        failures.push((pool, Draw::Choice(f.values.clone())));
    }
    if s.anomaly_rate > 0.0 && failures.is_empty() {
        return Err(invalid(
            "a positive anomaly_rate needs at least one failure class",
        ));
    }
    Ok(Compiled {
        pools,
        prefix,
        first,
        body,
        body_weights,
        last,
        failures,
    })
}

fn draw_value<R: Rng>(draw: &Draw, rng: &mut R) -> String {
    const HEX: &[u8] = b"0123456789abcdef";
    match draw {
        Draw::Hex(len) => (0..*len)
            .map(|_| HEX[rng.random_range(0..16)] as char)
            .collect(),
        Draw::Ident(prefix, digits) => {
            let mut s = prefix.clone();
            s.extend((0..*digits).map(|_| char::from(b'0' + rng.random_range(0..10u8))));
            s
        }
        Draw::Int(lo, hi) => rng.random_range(*lo..=*hi).to_string(),
        Draw::Choice(values) => values[rng.random_range(0..values.len())].clone(),
    }
}

struct SessionState<'a> {
    failure: Option<&'a (usize, Draw)>,
    session_values: HashMap<usize, String>,
}

struct Generator<'a> {
    c: &'a Compiled,
    rng: ChaCha8Rng,
    used: HashMap<usize, HashSet<String>>,
}

impl Generator<'_> {
    fn value(
        &mut self,
        pool: usize,
        state: &mut SessionState,
        message_values: &mut HashMap<usize, String>,
    ) -> Result<String, DownstreamError> {
        let spec = &self.c.pools[pool];
        let cache = match spec.scope {
            Scope::Session => &mut state.session_values,
            Scope::Message => message_values,
        };
        if let Some(v) = cache.get(&pool) {
            return Ok(v.clone());
        }
        let draw = match state.failure {
            Some((p, signature)) if *p == pool => signature,
            _ => &spec.draw,
        };
        let mut v = draw_value(draw, &mut self.rng);
        if spec.unique {
            let used = self.used.entry(pool).or_default();
            let mut attempts = 0;
            while used.contains(&v) {
                attempts += 1;
                if attempts > 10_000 {
                    return Err(invalid("unique pool exhausted; widen it"));
                }
                v = draw_value(draw, &mut self.rng);
            }
            used.insert(v.clone());
        }
        cache.insert(pool, v.clone());
        Ok(v)
    }

    fn render(
        &mut self,
        template: &Template,
        state: &mut SessionState,
        line: usize,
    ) -> Result<AnnotatedMessage, DownstreamError> {
        let pieces: Vec<&Piece> = self.c.prefix.iter().chain(&template.pieces).collect();
        let offset = self.c.prefix.len();
        let mut message_values = HashMap::new();
        let mut tokens = Vec::with_capacity(pieces.len());
        let mut cats = Vec::with_capacity(pieces.len());
        let mut pairs = Vec::new();
        // token position of each piece; optional literals may be skipped
        let mut at = vec![usize::MAX; pieces.len()];
        for (k, piece) in pieces.iter().enumerate() {
            match piece {
                Piece::Literal {
                    alternatives,
                    optional,
                } => {
                    if *optional && self.rng.random_bool(0.5) {
                        continue;
                    }
                    let w = match alternatives.len() {
                        1 => &alternatives[0],
                        n => &alternatives[self.rng.random_range(0..n)],
                    };
                    tokens.push(w.clone());
                    cats.push(Category::None);
                }
                Piece::Concept(w) => {
                    tokens.push(w.clone());
                    cats.push(Category::Concept);
                }
                Piece::Instance { pool, .. } => {
                    tokens.push(self.value(*pool, state, &mut message_values)?);
                    cats.push(Category::Instance);
                }
            }
            at[k] = tokens.len() - 1;
        }
        for (k, piece) in pieces.iter().enumerate() {
            if let Piece::Instance {
                partner: Some(p), ..
            } = piece
            {
                // partners index within their own skeleton
                let base = if k < offset { 0 } else { offset };
                pairs.push((at[base + p], at[k]));
            }
        }
        AnnotatedMessage::new(tokens, cats, pairs, line).map_err(invalid)
    }
}

/// Generates a corpus; identical specs and seeds give identical corpora.
pub fn generate(spec: &GeneratorSpec, seed: u64) -> Result<SynthCorpus, DownstreamError> {
    let c = compile(spec)?;
    let s = &spec.session;
    let mut gen = Generator {
        c: &c,
        rng: ChaCha8Rng::seed_from_u64(seed),
        used: HashMap::new(),
    };
    let n_anomalous = ((s.anomaly_rate * s.sessions as f64).round() as usize).min(s.sessions);
    let anomalous: HashSet<usize> = sample(&mut gen.rng, s.sessions, n_anomalous)
        .into_iter()
        .collect();
    let extra = s.mean_len - s.min_len as f64;
    let poisson = if extra > 0.0 {
        Some(Poisson::new(extra).map_err(|e| invalid(e.to_string()))?)
    } else {
        None
    };
    let body_pick = if c.body.is_empty() {
        None
    } else {
        Some(WeightedIndex::new(&c.body_weights).map_err(|e| invalid(e.to_string()))?)
    };
    let fixed = c.first.len() + c.last.len();

    let mut messages = Vec::new();
    let mut sessions = Vec::with_capacity(s.sessions);
    for sid in 0..s.sessions {
        let class = anomalous
            .contains(&sid)
            .then(|| gen.rng.random_range(0..c.failures.len()));
        let len = s.min_len
            + poisson
                .as_ref()
                .map_or(0, |p| p.sample(&mut gen.rng) as usize);
        let n_body = if body_pick.is_some() {
            len.saturating_sub(fixed)
        } else {
            0
        };
        let mut plan: Vec<&Template> = c.first.iter().collect();
        for _ in 0..n_body {
            let k = body_pick.as_ref().map_or(0, |w| w.sample(&mut gen.rng));
            plan.push(&c.body[k]);
        }
        plan.extend(&c.last);
        let mut state = SessionState {
            failure: class.map(|k| &c.failures[k]),
            session_values: HashMap::new(),
        };
        let start = messages.len();
        for t in plan {
            let line = messages.len() + 1;
            messages.push(gen.render(t, &mut state, line)?);
        }
        let key = messages[start..]
            .iter()
            .find_map(|m| {
                m.gold_pairs
                    .iter()
                    .find(|&&(ci, _)| m.tokens()[ci] == s.key_concept)
                    .map(|&(_, ii)| m.tokens()[ii].clone())
            })
            .unwrap_or_else(|| format!("session-{sid}"));
        sessions.push(SynthSession {
            key,
            start,
            len: messages.len() - start,
            anomalous: class.is_some(),
            class,
        });
    }
    Ok(SynthCorpus {
        name: spec.name.clone(),
        messages,
        sessions,
        classes: spec.failures.iter().map(|f| f.name.clone()).collect(),
    })
}

#[derive(Serialize)]
struct SessionRecord<'a> {
    key: &'a str,
    start_line: usize,
    messages: usize,
    anomalous: bool,
    class: Option<usize>,
    class_name: Option<&'a str>,
}

impl SynthCorpus {
    /// Raw log line for message `idx`, with its header columns.
    pub fn raw_line(&self, idx: usize) -> String {
        format!("{:07} INFO {}", idx + 1, self.messages[idx].message.raw)
    }

    /// Writes `raw.log`, `annotations.jsonl` and `sessions.jsonl` into `dir`.
    pub fn write_to_dir(&self, dir: &Path) -> Result<Vec<PathBuf>, DownstreamError> {
        fs::create_dir_all(dir)?;
        let raw = dir.join("raw.log");
        let mut w = BufWriter::new(File::create(&raw)?);
        for idx in 0..self.messages.len() {
            writeln!(w, "{}", self.raw_line(idx))?;
        }
        w.flush()?;
        let ann = dir.join("annotations.jsonl");
        write_annotations_to(BufWriter::new(File::create(&ann)?), &self.messages)?;
        let labels = dir.join("sessions.jsonl");
        let mut w = BufWriter::new(File::create(&labels)?);
        for s in &self.sessions {
            let record = SessionRecord {
                key: &s.key,
                start_line: s.start + 1,
                messages: s.len,
                anomalous: s.anomalous,
                class: s.class,
                class_name: s.class.map(|k| self.classes[k].as_str()),
            };
            serde_json::to_writer(&mut w, &record).map_err(std::io::Error::from)?;
            writeln!(w)?;
        }
        w.flush()?;
        Ok(vec![raw, ann, labels])
    }

    pub fn session_messages(&self, s: &SynthSession) -> &[AnnotatedMessage] {
        &self.messages[s.start..s.start + s.len]
    }
}

/// A session label read back from `sessions.jsonl`.
#[derive(Debug, Clone, PartialEq, Eq, Deserialize)]
pub struct SessionLabel {
    pub key: String,
    pub anomalous: bool,
    pub class: Option<usize>,
}

pub fn read_session_labels(path: &Path) -> Result<Vec<SessionLabel>, DownstreamError> {
    let text = fs::read_to_string(path)?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| {
                DownstreamError::Misaligned(format!("{} line {}: {e}", path.display(), i + 1))
            })
        })
        .collect()
}
