//! The semantic miner: a contextual encoder over word, character and local
//! features, a pair matcher that points every token at the earlier token it
//! describes (or at the dummy `<TMP>` slot), and a word scorer that labels
//! tokens as concept, instance or neither. Both heads share the encoder and
//! are trained on the sum of their cross-entropy losses.
//!
//! Index conventions: token positions are 0-based. The pair-target space for
//! token `i` has `i + 1` slots; slot 0 is `<TMP>` and slot `j > 0` is token
//! `j - 1`.

mod model;
mod train;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::features::FeatureError;
use crate::logio::{AnnotatedMessage, Category};
use crate::neuralcore::NnError;

pub use model::{interval_context, EncodedMessage, MinerModel};
pub use train::{miner_gradient_check, train_miner, MinerCheckpoint};

#[derive(Debug, Error)]
pub enum MinerError {
    #[error("message has no tokens")]
    EmptyMessage,
    #[error("gold annotation does not align with the message: {0}")]
    Misaligned(String),
    #[error("interval context needs j < i, got i={i} j={j}")]
    IntervalOrder { i: usize, j: usize },
    #[error("embedding dimension {table} does not match model word dimension {model}")]
    DimensionMismatch { table: usize, model: usize },
    #[error("non-finite loss on training message {index}")]
    NonFiniteLoss { index: usize },
    #[error("empty training corpus")]
    EmptyCorpus,
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Feature(#[from] FeatureError),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

/// Component switches for ablation runs. The default enables everything.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Ablation {
    /// Zero the character-CNN features.
    pub no_char: bool,
    /// Zero the local morphological features.
    pub no_local: bool,
    /// Replace the bi-LSTM by a linear projection of its input.
    pub no_lstm: bool,
    /// Zero the interval context between candidate pairs.
    pub no_context: bool,
}

impl Ablation {
    pub fn name(&self) -> &'static str {
        match (self.no_char, self.no_local, self.no_lstm, self.no_context) {
            (false, false, false, false) => "full",
            (true, false, false, false) => "w/o char",
            (false, true, false, false) => "w/o local",
            (false, false, true, false) => "w/o lstm",
            (false, false, false, true) => "w/o context",
            _ => "custom",
        }
    }

    /// The four single-component ablations.
    pub fn singles() -> [Ablation; 4] {
        let off = Ablation::default();
        [
            Ablation {
                no_char: true,
                ..off
            },
            Ablation {
                no_local: true,
                ..off
            },
            Ablation {
                no_lstm: true,
                ..off
            },
            Ablation {
                no_context: true,
                ..off
            },
        ]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct MinerConfig {
    pub word_dim: usize,
    pub char_dim: usize,
    pub char_filters: usize,
    pub char_window: usize,
    pub max_chars: usize,
    pub local_features: usize,
    pub hidden: usize,
    pub layers: usize,
    pub pair_hidden: usize,
    pub ablation: Ablation,
}

impl Default for MinerConfig {
    fn default() -> Self {
        MinerConfig {
            word_dim: 100,
            char_dim: 30,
            char_filters: 30,
            char_window: 3,
            max_chars: crate::features::DEFAULT_MAX_CHARS,
            local_features: crate::features::LOCAL_FEATURES,
            hidden: 128,
            layers: 2,
            pair_hidden: 128,
            ablation: Ablation::default(),
        }
    }
}

impl MinerConfig {
    pub fn input_dim(&self) -> usize {
        self.word_dim + self.char_filters + self.local_features
    }

    pub fn context_dim(&self) -> usize {
        2 * self.hidden
    }

    pub fn validate(&self) -> Result<(), MinerError> {
        let positive = [
            ("word_dim", self.word_dim),
            ("char_dim", self.char_dim),
            ("char_filters", self.char_filters),
            ("char_window", self.char_window),
            ("max_chars", self.max_chars),
            ("hidden", self.hidden),
            ("layers", self.layers),
            ("pair_hidden", self.pair_hidden),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(NnError::InvalidConfig(format!("{name} must be positive")).into());
        }
        if self.local_features != crate::features::LOCAL_FEATURES {
            return Err(NnError::InvalidConfig(format!(
                "local feature length {} unsupported",
                self.local_features
            ))
            .into());
        }
        Ok(())
    }
}

/// Per-message miner predictions.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MinerOutput {
    pub categories: Vec<Category>,
    /// Chosen pair-target slot per token (0 = `<TMP>`).
    pub pair_targets: Vec<usize>,
    /// `(earlier, later)` token positions for every non-`<TMP>` target.
    pub explicit_pairs: Vec<(usize, usize)>,
    /// Softmax over `[Concept, Instance, None]` per token.
    pub category_scores: Vec<[f64; 3]>,
    /// Softmax over the `i + 1` pair slots of token `i`.
    pub pair_scores: Vec<Vec<f64>>,
}

impl MinerOutput {
    pub fn empty() -> Self {
        MinerOutput {
            categories: Vec::new(),
            pair_targets: Vec::new(),
            explicit_pairs: Vec::new(),
            category_scores: Vec::new(),
            pair_scores: Vec::new(),
        }
    }

    /// Builds an output from hard decisions only (scores are one-hot).
    pub fn from_decisions(categories: Vec<Category>, pair_targets: Vec<usize>) -> Self {
        let explicit_pairs = pair_targets
            .iter()
            .enumerate()
            .filter(|(_, &t)| t > 0)
            .map(|(i, &t)| (t - 1, i))
            .collect();
        let category_scores = categories
            .iter()
            .map(|c| {
                let mut row = [0.0; 3];
                row[c.index()] = 1.0;
                row
            })
            .collect();
        let pair_scores = pair_targets
            .iter()
            .enumerate()
            .map(|(i, &t)| {
                let mut row = vec![0.0; i + 1];
                row[t.min(i)] = 1.0;
                row
            })
            .collect();
        MinerOutput {
            categories,
            pair_targets,
            explicit_pairs,
            category_scores,
            pair_scores,
        }
    }

    /// Explicit pairs oriented as `(concept, instance)` using the predicted
    /// categories; pairs whose roles are not one concept and one instance
    /// keep their `(earlier, later)` order.
    pub fn oriented_pairs(&self) -> Vec<(usize, usize)> {
        self.explicit_pairs
            .iter()
            .map(
                |&(a, b)| match (self.categories.get(a), self.categories.get(b)) {
                    (Some(Category::Instance), Some(Category::Concept)) => (b, a),
                    _ => (a, b),
                },
            )
            .collect()
    }
}

/// Index of the maximum entry; ties resolve to the lowest index.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Pair-target slot the gold annotation assigns to each token. A token that
/// is the later member of a gold pair points at the earlier member; with
/// several such pairs the nearest earlier member wins.
pub fn gold_pair_targets(gold: &AnnotatedMessage) -> Vec<usize> {
    let n = gold.categories.len();
    let mut targets = vec![0usize; n];
    let mut seen = vec![0usize; n];
    for &(c, i) in &gold.gold_pairs {
        let (earlier, later) = if c < i { (c, i) } else { (i, c) };
        if later >= n {
            continue;
        }
        seen[later] += 1;
        targets[later] = targets[later].max(earlier + 1);
    }
    if let Some(pos) = seen.iter().position(|&s| s > 1) {
        log::warn!(
            "token {pos} of line {} is the later member of {} gold pairs; nearest earlier member used",
            gold.message.source_line,
            seen[pos]
        );
    }
    targets
}
