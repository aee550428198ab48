use crate::features::EmbeddingTable;
use crate::jparser::{parse_slot, ParseResult};

use super::DownstreamError;

/// Messages sharing one request identifier, in stream order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Session {
    pub key: String,
    /// Stream positions of the member messages.
    pub indices: Vec<usize>,
    pub results: Vec<ParseResult>,
    pub label: Option<usize>,
}

/// Result of grouping a parsed stream.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Sessions {
    /// Keyed sessions in order of first appearance.
    pub keyed: Vec<Session>,
    /// Stream positions of messages without a key pair; excluded from evaluation.
    pub unkeyed: Vec<usize>,
}

/// Groups parse results by the instance paired with `key_concept`.
pub fn build_sessions(results: &[ParseResult], key_concept: &str) -> Sessions {
    let mut out = Sessions::default();
    let mut slot_of = std::collections::HashMap::new();
    for (idx, r) in results.iter().enumerate() {
        let Some((_, key)) = r.ci_pairs.iter().find(|(c, _)| c == key_concept) else {
            out.unkeyed.push(idx);
            continue;
        };
        let slot = *slot_of.entry(key.clone()).or_insert_with(|| {
            out.keyed.push(Session {
                key: key.clone(),
                indices: Vec::new(),
                results: Vec::new(),
                label: None,
            });
            out.keyed.len() - 1
        });
        out.keyed[slot].indices.push(idx);
        out.keyed[slot].results.push(r.clone());
    }
    out
}

/// One element of a session's feature sequence.
#[derive(Debug, Clone, PartialEq)]
pub enum Unit {
    /// `[emb_template; emb_concept; emb_instance]`.
    Pair(Vec<f64>),
    /// Message boundary; the classifier supplies the vector.
    Sep,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SessionFeatures {
    pub units: Vec<Unit>,
    /// Length of every `Pair` vector.
    pub dim: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum FeatureMode {
    /// Template, concept and instance embeddings.
    #[default]
    Full,
    /// Template embedding only; concept and instance slots are zero.
    TemplateOnly,
}

fn template_embedding(template: &[String], table: &EmbeddingTable) -> Vec<f64> {
    let mut acc = vec![0.0; table.dim()];
    for tok in template {
        let v = match parse_slot(tok) {
            Some(Some(concept)) => table.embed_word(concept),
            Some(None) => table.nil(),
            None => table.embed_word(tok),
        };
        acc.iter_mut().zip(v).for_each(|(a, b)| *a += b);
    }
    if !template.is_empty() {
        let n = template.len() as f64;
        acc.iter_mut().for_each(|a| *a /= n);
    }
    acc
}

/// Feature units for a sequence of parsed messages: one unit per CI pair
/// (a message without pairs contributes one unit with `<NIL>` concept and
/// instance), and a separator between consecutive messages.
pub fn extract_features(
    results: &[ParseResult],
    table: &EmbeddingTable,
    mode: FeatureMode,
) -> Result<SessionFeatures, DownstreamError> {
    if results.is_empty() {
        return Err(DownstreamError::EmptySession);
    }
    let d = table.dim();
    let mut units = Vec::new();
    for (k, r) in results.iter().enumerate() {
        if k > 0 {
            units.push(Unit::Sep);
        }
        let template = template_embedding(&r.template, table);
        let unit = |concept: &[f64], instance: &[f64]| {
            let mut x = Vec::with_capacity(3 * d);
            x.extend_from_slice(&template);
            match mode {
                FeatureMode::Full => {
                    x.extend_from_slice(concept);
                    x.extend_from_slice(instance);
                }
                FeatureMode::TemplateOnly => x.resize(3 * d, 0.0),
            }
            Unit::Pair(x)
        };
        if r.ci_pairs.is_empty() {
            units.push(unit(table.nil(), table.nil()));
        }
        for (c, i) in &r.ci_pairs {
            units.push(unit(table.embed_word(c), table.embed_word(i)));
        }
    }
    Ok(SessionFeatures { units, dim: 3 * d })
}
