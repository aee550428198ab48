use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{MinerConfig, MinerError, MinerModel};
use crate::features::{CharAlphabet, EmbeddingTable};
use crate::logio::AnnotatedMessage;
use crate::neuralcore::{
    gradient_check_terms, read_checkpoint, restore_params, sgd_step, write_checkpoint,
    GradCheckConfig, GradCheckReport, Parameterized, TrainConfig,
};

const CHECKPOINT_KIND: &str = "semlog-miner";

/// A trained (or initialized) miner with its training record.
#[derive(Debug, Clone, PartialEq)]
pub struct MinerCheckpoint {
    pub model: MinerModel,
    pub train: TrainConfig,
    /// Mean per-message loss of each epoch, in order.
    pub loss_history: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct Header {
    miner: MinerConfig,
    alphabet: String,
    train: TrainConfig,
    loss_history: Vec<f64>,
    init: String,
    optimizer: String,
}

impl MinerCheckpoint {
    pub fn final_loss(&self) -> Option<f64> {
        self.loss_history.last().copied()
    }

    pub fn write_to<W: Write>(&self, w: W) -> Result<(), MinerError> {
        let header = Header {
            miner: self.model.config,
            alphabet: self.model.alphabet.as_string(),
            train: self.train,
            loss_history: self.loss_history.clone(),
            init: "glorot-uniform; lstm forget-gate bias 1.0; biases 0".into(),
            optimizer: "sgd; batch 1; per-epoch shuffle; lr0/(1+decay*epoch)".into(),
        };
        let header =
            serde_json::to_string(&header).map_err(|e| MinerError::Checkpoint(e.to_string()))?;
        write_checkpoint(w, CHECKPOINT_KIND, &header, &self.model.header_tensors())?;
        Ok(())
    }

    pub fn read_from<R: Read>(r: R) -> Result<Self, MinerError> {
        let raw = read_checkpoint(r)?;
        if raw.kind != CHECKPOINT_KIND {
            return Err(MinerError::Checkpoint(format!(
                "expected a miner checkpoint, found {:?}",
                raw.kind
            )));
        }
        let header: Header = serde_json::from_str(&raw.header)
            .map_err(|e| MinerError::Checkpoint(format!("bad header: {e}")))?;
        let alphabet = CharAlphabet::from_chars(&header.alphabet);
        // Initialization values are overwritten; any seed will do.
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut model = MinerModel::new(header.miner, alphabet, &mut rng)?;
        restore_params(model.params_mut(), &raw.tensors)?;
        Ok(MinerCheckpoint {
            model,
            train: header.train,
            loss_history: header.loss_history,
        })
    }

    pub fn save(&self, path: &Path) -> Result<(), MinerError> {
        self.write_to(BufWriter::new(File::create(path)?))
    }

    pub fn load(path: &Path) -> Result<Self, MinerError> {
        Self::read_from(BufReader::new(File::open(path)?))
    }
}

/// Trains the miner on annotated messages by SGD on the joint loss.
///
/// With `base`, training continues from the base model (fine-tuning) and
/// keeps its architecture and character alphabet; `miner_cfg` is ignored.
pub fn train_miner(
    corpus: &[AnnotatedMessage],
    table: &EmbeddingTable,
    cfg: &TrainConfig,
    miner_cfg: &MinerConfig,
    base: Option<&MinerCheckpoint>,
) -> Result<MinerCheckpoint, MinerError> {
    cfg.validate(true)?;
    if corpus.is_empty() {
        return Err(MinerError::EmptyCorpus);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut model = match base {
        Some(b) => b.model.clone(),
        None => {
            let mut cfg = *miner_cfg;
            cfg.word_dim = table.dim();
            let alphabet = CharAlphabet::from_tokens(
                corpus
                    .iter()
                    .flat_map(|m| m.tokens().iter().map(String::as_str)),
            );
            MinerModel::new(cfg, alphabet, &mut rng)?
        }
    };
    if model.config.word_dim != table.dim() {
        return Err(MinerError::DimensionMismatch {
            table: table.dim(),
            model: model.config.word_dim,
        });
    }
    model.zero_grad();
    let mut order: Vec<usize> = (0..corpus.len()).collect();
    let mut loss_history = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for &idx in &order {
            let loss = model.loss_and_backward(&corpus[idx], table)?;
            if !loss.is_finite() {
                return Err(MinerError::NonFiniteLoss { index: idx });
            }
            total += loss;
            sgd_step(&mut model.params_mut(), epoch, cfg)?;
        }
        let mean = total / corpus.len() as f64;
        log::info!(
            "miner epoch {}/{}: mean loss {mean:.5}",
            epoch + 1,
            cfg.epochs
        );
        loss_history.push(mean);
    }
    Ok(MinerCheckpoint {
        model,
        train: *cfg,
        loss_history,
    })
}

/// Finite-difference check of the full joint-loss gradient over a batch.
///
/// Analytic gradients come from the training path; the numeric side
/// re-evaluates the loss through the literal pair-scoring path.
pub fn miner_gradient_check(
    model: &mut MinerModel,
    batch: &[AnnotatedMessage],
    table: &EmbeddingTable,
    cfg: &GradCheckConfig,
) -> Result<GradCheckReport, MinerError> {
    let mut failure = None;
    let report = gradient_check_terms(
        model,
        |m| {
            let mut total = 0.0;
            for msg in batch {
                match m.loss_and_backward(msg, table) {
                    Ok(l) => total += l,
                    Err(e) => failure = Some(e),
                }
            }
            total
        },
        |m| {
            batch
                .iter()
                .flat_map(|msg| {
                    m.encode_context(&msg.message, table)
                        .and_then(|enc| m.miner_loss_terms(&enc, msg))
                        .unwrap_or_else(|_| vec![f64::NAN])
                })
                .collect()
        },
        cfg,
    )?;
    if let Some(e) = failure {
        return Err(e);
    }
    if !report.max_rel_error.is_finite() {
        return Err(MinerError::Misaligned(
            "loss evaluation failed during gradient check".into(),
        ));
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::features::{train_skipgram, SkipGramConfig};
    use crate::logio::Category;
    use crate::miner::Ablation;

    fn corpus() -> Vec<AnnotatedMessage> {
        let rows: [(&str, &str, &[(usize, usize)]); 4] = [
            ("Listing instance in cell 949e1227", "OOOCI", &[(3, 4)]),
            ("attempt_1 TaskAttempt Transitioned", "ICO", &[(1, 0)]),
            ("state : 500 returned", "COIO", &[(0, 2)]),
            ("Active base files", "OOO", &[]),
        ];
        rows.iter()
            .map(|(text, cats, pairs)| {
                let cats = cats
                    .chars()
                    .map(|c| match c {
                        'C' => Category::Concept,
                        'I' => Category::Instance,
                        _ => Category::None,
                    })
                    .collect();
                AnnotatedMessage::new(
                    text.split(' ').map(String::from).collect(),
                    cats,
                    pairs.to_vec(),
                    1,
                )
                .unwrap()
            })
            .collect()
    }

    fn table() -> EmbeddingTable {
        let sentences: Vec<Vec<String>> = corpus().iter().map(|m| m.tokens().to_vec()).collect();
        train_skipgram(
            &sentences,
            &SkipGramConfig {
                dim: 5,
                epochs: 3,
                ..Default::default()
            },
        )
        .unwrap()
    }

    fn tiny() -> MinerConfig {
        MinerConfig {
            char_dim: 3,
            char_filters: 4,
            hidden: 3,
            layers: 2,
            pair_hidden: 5,
            ..MinerConfig::default()
        }
    }

    #[test]
    fn zero_epochs_returns_initialization() {
        let t = table();
        let cfg = TrainConfig {
            epochs: 0,
            ..Default::default()
        };
        let a = train_miner(&corpus(), &t, &cfg, &tiny(), None).unwrap();
        let b = train_miner(&corpus(), &t, &cfg, &tiny(), None).unwrap();
        assert!(a.loss_history.is_empty());
        assert_eq!(a, b);
    }

    #[test]
    fn training_reduces_loss_and_is_reproducible() {
        let t = table();
        let cfg = TrainConfig {
            epochs: 15,
            lr0: 0.05,
            ..Default::default()
        };
        let a = train_miner(&corpus(), &t, &cfg, &tiny(), None).unwrap();
        assert_eq!(a.loss_history.len(), 15);
        assert!(a.final_loss().unwrap() < a.loss_history[0]);
        let b = train_miner(&corpus(), &t, &cfg, &tiny(), None).unwrap();
        let (mut ba, mut bb) = (Vec::new(), Vec::new());
        a.write_to(&mut ba).unwrap();
        b.write_to(&mut bb).unwrap();
        assert_eq!(ba, bb);
    }

    #[test]
    fn fine_tune_continues_from_base() {
        let t = table();
        let base = train_miner(
            &corpus(),
            &t,
            &TrainConfig {
                epochs: 2,
                ..Default::default()
            },
            &tiny(),
            None,
        )
        .unwrap();
        let tuned = train_miner(
            &corpus()[..2],
            &t,
            &TrainConfig {
                epochs: 1,
                ..Default::default()
            },
            &MinerConfig::default(),
            Some(&base),
        )
        .unwrap();
        assert_eq!(tuned.model.config, base.model.config);
        assert_ne!(tuned.model, base.model);
    }

    #[test]
    fn checkpoint_round_trip_is_exact() {
        let t = table();
        for ablation in [
            Ablation::default(),
            Ablation {
                no_lstm: true,
                ..Default::default()
            },
        ] {
            let cfg = MinerConfig { ablation, ..tiny() };
            let mut ck = train_miner(
                &corpus(),
                &t,
                &TrainConfig {
                    epochs: 2,
                    ..Default::default()
                },
                &cfg,
                None,
            )
            .unwrap();
            // values whose shortest decimal form needs correctly rounded parsing
            ck.loss_history = vec![11.965674509491903, 3.7116405391037914];
            let mut buf = Vec::new();
            ck.write_to(&mut buf).unwrap();
            let back = MinerCheckpoint::read_from(buf.as_slice()).unwrap();
            assert_eq!(back, ck);
            let mut again = Vec::new();
            back.write_to(&mut again).unwrap();
            assert_eq!(buf, again);
        }
    }

    #[test]
    fn empty_corpus_is_rejected() {
        assert!(matches!(
            train_miner(&[], &table(), &TrainConfig::default(), &tiny(), None),
            Err(MinerError::EmptyCorpus)
        ));
    }

    #[test]
    fn gradients_pass_finite_difference_check_for_every_variant() {
        let t = table();
        let mut variants = vec![Ablation::default()];
        variants.extend(Ablation::singles());
        for ablation in variants {
            let cfg = MinerConfig { ablation, ..tiny() };
            let mut ck = train_miner(
                &corpus(),
                &t,
                &TrainConfig {
                    epochs: 1,
                    ..Default::default()
                },
                &cfg,
                None,
            )
            .unwrap();
            let report =
                miner_gradient_check(&mut ck.model, &corpus(), &t, &GradCheckConfig::default())
                    .unwrap();
            assert!(
                report.max_rel_error <= 1e-4,
                "{}: {report:?}",
                ablation.name()
            );
        }
    }
}
