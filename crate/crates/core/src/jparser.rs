//! Joint parser: implicit-semantics discovery against the knowledge base,
//! conceptualized templates, and the per-message structured output.
//!
//! A pair is *superior* when one member is a concept token and the other an
//! instance token. Only superior pairs enter the knowledge base and drive
//! template substitution; other explicit pairs are reported but otherwise
//! inert.

use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::features::EmbeddingTable;
use crate::knowledge::{KbError, KnowledgeBase};
use crate::logio::{Category, LogMessage};
use crate::miner::{MinerError, MinerModel, MinerOutput};

/// Template token for an instance with no known concept.
pub const ORPHAN_SLOT: &str = "<*>";

#[derive(Debug, Error)]
pub enum ParseError {
    #[error("miner output covers {output} tokens but the message has {message}")]
    Misaligned { output: usize, message: usize },
    #[error("pair ({0}, {1}) refers to a token outside the message")]
    IndexOutOfRange(usize, usize),
    #[error("parse output line {line}: {reason}")]
    Malformed { line: usize, reason: String },
    #[error(transparent)]
    Knowledge(#[from] KbError),
    #[error(transparent)]
    Miner(#[from] MinerError),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum PairSource {
    /// Explicit pair of one concept and one instance token.
    Superior,
    /// Concept recovered from the knowledge base for an orphan instance.
    Implicit,
    /// Explicit pair whose members are not one concept and one instance.
    Other,
}

/// One entry of the final pair list.
///
/// For [`PairSource::Other`] the "concept" side is the earlier token and the
/// "instance" side the later one.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FoundPair {
    pub concept: String,
    pub instance: String,
    /// Position of the concept token; `None` for implicit pairs.
    pub concept_pos: Option<usize>,
    pub instance_pos: usize,
    pub source: PairSource,
}

/// Outcome of implicit discovery for one message.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Discovery {
    /// Implicit pairs in instance order, then every explicit pair in miner order.
    pub pairs: Vec<FoundPair>,
    /// Recovered concepts followed by the unpaired concept words.
    pub concepts: Vec<String>,
    /// Positions of instances left without a concept.
    pub orphan_instances: Vec<usize>,
    /// Positions of concepts not consumed by a superior pair.
    pub orphan_concepts: Vec<usize>,
}

/// Structured parse of one message.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParseResult {
    pub template: Vec<String>,
    pub ci_pairs: Vec<(String, String)>,
    pub orphan_concepts: Vec<String>,
    pub orphan_instances: Vec<String>,
}

/// Template token naming the concept of a substituted instance.
pub fn concept_slot(concept: &str) -> String {
    format!("<*{concept}*>")
}

/// Classifies a template token: `None` for a literal, `Some(None)` for the
/// orphan slot, `Some(Some(concept))` for a concept slot.
pub fn parse_slot(token: &str) -> Option<Option<&str>> {
    if token == ORPHAN_SLOT {
        return Some(None);
    }
    token
        .strip_prefix("<*")
        .and_then(|t| t.strip_suffix("*>"))
        .filter(|c| !c.is_empty())
        .map(Some)
}

/// Resolves instances against the knowledge base, adding every superior
/// explicit pair to it first.
pub fn discover_implicit(
    output: &MinerOutput,
    message: &LogMessage,
    kb: &mut KnowledgeBase,
) -> Result<Discovery, ParseError> {
    let tokens = &message.tokens;
    let n = tokens.len();
    if output.categories.len() != n {
        return Err(ParseError::Misaligned {
            output: output.categories.len(),
            message: n,
        });
    }
    if let Some(&(a, b)) = output
        .explicit_pairs
        .iter()
        .find(|&&(a, b)| a >= n || b >= n)
    {
        return Err(ParseError::IndexOutOfRange(a, b));
    }
    let cats = &output.categories;
    let mut instance_open: Vec<bool> = cats.iter().map(|&c| c == Category::Instance).collect();
    let mut concept_open: Vec<bool> = cats.iter().map(|&c| c == Category::Concept).collect();

    let mut explicit = Vec::with_capacity(output.explicit_pairs.len());
    for &(a, b) in &output.explicit_pairs {
        let roles = match (cats[a], cats[b]) {
            (Category::Concept, Category::Instance) => Some((a, b)),
            (Category::Instance, Category::Concept) => Some((b, a)),
            _ => None,
        };
        explicit.push(match roles {
            Some((c, i)) => {
                kb.add(&tokens[c], &tokens[i])?;
                instance_open[i] = false;
                concept_open[c] = false;
                FoundPair {
                    concept: tokens[c].clone(),
                    instance: tokens[i].clone(),
                    concept_pos: Some(c),
                    instance_pos: i,
                    source: PairSource::Superior,
                }
            }
            None => FoundPair {
                concept: tokens[a].clone(),
                instance: tokens[b].clone(),
                concept_pos: Some(a),
                instance_pos: b,
                source: PairSource::Other,
            },
        });
    }

    let mut pairs = Vec::new();
    let mut concepts = Vec::new();
    for i in 0..n {
        if !instance_open[i] {
            continue;
        }
        if let Some(found) = kb.lookup(&tokens[i]) {
            pairs.push(FoundPair {
                concept: found.to_string(),
                instance: tokens[i].clone(),
                concept_pos: None,
                instance_pos: i,
                source: PairSource::Implicit,
            });
            concepts.push(found.to_string());
            instance_open[i] = false;
        }
    }
    let orphan_instances: Vec<usize> = (0..n).filter(|&i| instance_open[i]).collect();
    let orphan_concepts: Vec<usize> = (0..n).filter(|&i| concept_open[i]).collect();
    concepts.extend(orphan_concepts.iter().map(|&c| tokens[c].clone()));
    pairs.extend(explicit);
    Ok(Discovery {
        pairs,
        concepts,
        orphan_instances,
        orphan_concepts,
    })
}

/// Replaces paired instances by `<*concept*>` and orphan instances by `<*>`.
///
/// Only superior and implicit pairs substitute; when several pairs name the
/// same instance position, the first one wins.
pub fn conceptualize(
    message: &LogMessage,
    pairs: &[FoundPair],
    orphan_instances: &[usize],
) -> Vec<String> {
    let mut template = message.tokens.clone();
    let mut filled = vec![false; template.len()];
    for p in pairs {
        if p.source == PairSource::Other
            || p.instance_pos >= template.len()
            || filled[p.instance_pos]
        {
            continue;
        }
        template[p.instance_pos] = concept_slot(&p.concept);
        filled[p.instance_pos] = true;
    }
    for &i in orphan_instances {
        if i < template.len() && !filled[i] {
            template[i] = ORPHAN_SLOT.to_string();
        }
    }
    template
}

/// Discovery, templating and output assembly for one message with a known
/// miner output.
pub fn assemble(
    output: &MinerOutput,
    message: &LogMessage,
    kb: &mut KnowledgeBase,
) -> Result<ParseResult, ParseError> {
    let found = discover_implicit(output, message, kb)?;
    let template = conceptualize(message, &found.pairs, &found.orphan_instances);
    Ok(ParseResult {
        template,
        ci_pairs: found
            .pairs
            .into_iter()
            .map(|p| (p.concept, p.instance))
            .collect(),
        orphan_concepts: found
            .orphan_concepts
            .iter()
            .map(|&c| message.tokens[c].clone())
            .collect(),
        orphan_instances: found
            .orphan_instances
            .iter()
            .map(|&i| message.tokens[i].clone())
            .collect(),
    })
}

/// Parses messages in order, threading the knowledge base through them.
pub fn parse_stream(
    messages: &[LogMessage],
    model: &MinerModel,
    table: &EmbeddingTable,
    kb: &mut KnowledgeBase,
) -> Result<Vec<ParseResult>, ParseError> {
    messages
        .iter()
        .map(|m| {
            let output = if m.is_empty() {
                MinerOutput::empty()
            } else {
                model.infer_message(m, table)?
            };
            assemble(&output, m, kb)
        })
        .collect()
}

/// Writes one JSON object per line.
pub fn write_parse_results<W: Write>(mut w: W, results: &[ParseResult]) -> Result<(), ParseError> {
    for r in results {
        serde_json::to_writer(&mut w, r).map_err(std::io::Error::from)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_parse_results<R: BufRead>(r: R) -> Result<Vec<ParseResult>, ParseError> {
    let mut out = Vec::new();
    for (idx, line) in r.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(
            serde_json::from_str(&line).map_err(|e| ParseError::Malformed {
                line: idx + 1,
                reason: e.to_string(),
            })?,
        );
    }
    Ok(out)
}
