use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{DownstreamError, SessionFeatures, Unit};
use crate::neuralcore::{
    read_checkpoint, restore_params, sgd_step, softmax, softmax_cross_entropy, write_checkpoint,
    Activation, Dense, Lstm, Param, Parameterized, TrainConfig,
};

const CHECKPOINT_KIND: &str = "semlog-session-classifier";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ClassifierKind {
    /// Unidirectional LSTM; the last hidden state feeds the output layer.
    Lstm,
    /// Mean of the units feeds the output layer directly.
    MeanPool,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClassifierConfig {
    pub kind: ClassifierKind,
    pub hidden: usize,
    /// Draw training sessions class-uniformly (with replacement) each epoch
    /// instead of a plain shuffle; keeps rare classes visible.
    pub balanced: bool,
    /// Sessions drawn per epoch; defaults to the training-set size.
    pub samples_per_epoch: Option<usize>,
    /// Global gradient-norm cap applied before every step.
    pub clip_norm: f64,
    pub train: TrainConfig,
}

impl Default for ClassifierConfig {
    fn default() -> Self {
        ClassifierConfig {
            kind: ClassifierKind::Lstm,
            hidden: 64,
            balanced: true,
            samples_per_epoch: None,
            clip_norm: 5.0,
            train: TrainConfig {
                epochs: 5,
                ..TrainConfig::default()
            },
        }
    }
}

/// A labelled feature sequence.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub features: SessionFeatures,
    pub label: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SessionClassifier {
    pub config: ClassifierConfig,
    pub input_dim: usize,
    pub classes: usize,
    pub loss_history: Vec<f64>,
    sep: Param,
    lstm: Option<Lstm>,
    out: Dense,
}

#[derive(Serialize, Deserialize)]
struct Header {
    config: ClassifierConfig,
    input_dim: usize,
    classes: usize,
    loss_history: Vec<f64>,
}

enum Trace {
    Lstm(crate::neuralcore::LstmTrace),
    Mean,
}

impl SessionClassifier {
    pub fn new<R: Rng>(
        config: ClassifierConfig,
        input_dim: usize,
        classes: usize,
        rng: &mut R,
    ) -> Result<Self, DownstreamError> {
        if classes < 2 {
            return Err(DownstreamError::TooFewClasses(classes));
        }
        if input_dim == 0 || config.hidden == 0 {
            return Err(crate::neuralcore::NnError::InvalidConfig(
                "dimensions must be positive".into(),
            )
            .into());
        }
        let sep = Param::glorot("sep", input_dim, 1, rng);
        let (lstm, out_in) = match config.kind {
            ClassifierKind::Lstm => (
                Some(Lstm::new("session.lstm", input_dim, config.hidden, rng)),
                config.hidden,
            ),
            ClassifierKind::MeanPool => (None, input_dim),
        };
        let out = Dense::new("session.out", out_in, classes, Activation::None, rng);
        Ok(SessionClassifier {
            config,
            input_dim,
            classes,
            loss_history: Vec::new(),
            sep,
            lstm,
            out,
        })
    }

    fn inputs(&self, f: &SessionFeatures) -> Result<Vec<Vec<f64>>, DownstreamError> {
        if f.units.is_empty() {
            return Err(DownstreamError::EmptySession);
        }
        f.units
            .iter()
            .map(|u| match u {
                Unit::Pair(x) if x.len() == self.input_dim => Ok(x.clone()),
                Unit::Pair(x) => Err(DownstreamError::FeatureDimension {
                    expected: self.input_dim,
                    found: x.len(),
                }),
                Unit::Sep => Ok(self.sep.value.clone()),
            })
            .collect()
    }

    fn forward(&self, xs: &[Vec<f64>]) -> Result<(Vec<f64>, Vec<f64>, Trace), DownstreamError> {
        let (summary, trace) = match &self.lstm {
            Some(lstm) => {
                let (hs, trace) = lstm.forward(xs)?;
                (hs.last().cloned().unwrap_or_default(), Trace::Lstm(trace))
            }
            None => {
                let mut mean = vec![0.0; self.input_dim];
                for x in xs {
                    mean.iter_mut().zip(x).for_each(|(m, v)| *m += v);
                }
                let n = xs.len() as f64;
                mean.iter_mut().for_each(|m| *m /= n);
                (mean, Trace::Mean)
            }
        };
        let logits = self.out.forward(&summary)?;
        Ok((summary, logits, trace))
    }

    /// Class probabilities for one session.
    pub fn predict_proba(&self, f: &SessionFeatures) -> Result<Vec<f64>, DownstreamError> {
        let xs = self.inputs(f)?;
        Ok(softmax(&self.forward(&xs)?.1))
    }

    /// Classes by descending probability, ties by ascending index.
    pub fn predict_topk(
        &self,
        f: &SessionFeatures,
        k: usize,
    ) -> Result<Vec<usize>, DownstreamError> {
        if k == 0 || k > self.classes {
            return Err(DownstreamError::BadK {
                k,
                classes: self.classes,
            });
        }
        Ok(rank(&self.predict_proba(f)?, k))
    }

    pub fn predict(&self, f: &SessionFeatures) -> Result<usize, DownstreamError> {
        Ok(self.predict_topk(f, 1)?[0])
    }

    /// Cross-entropy of one sample; accumulates parameter gradients.
    pub fn loss_and_backward(&mut self, sample: &Sample) -> Result<f64, DownstreamError> {
        if sample.label >= self.classes {
            return Err(DownstreamError::ClassOutOfRange {
                class: sample.label,
                classes: self.classes,
            });
        }
        let xs = self.inputs(&sample.features)?;
        let (summary, logits, trace) = self.forward(&xs)?;
        let (loss, dlogits) = softmax_cross_entropy(&logits, sample.label)?;
        let dsummary = self.out.backward(&summary, &logits, &dlogits);
        let dxs = match (&mut self.lstm, trace) {
            (Some(lstm), Trace::Lstm(trace)) => {
                let mut dhs = vec![vec![0.0; self.config.hidden]; xs.len()];
                *dhs.last_mut().expect("non-empty") = dsummary;
                lstm.backward(&trace, &dhs)
            }
            _ => {
                let n = xs.len() as f64;
                let dx: Vec<f64> = dsummary.iter().map(|d| d / n).collect();
                vec![dx; xs.len()]
            }
        };
        for (u, dx) in sample.features.units.iter().zip(&dxs) {
            if matches!(u, Unit::Sep) {
                self.sep.grad.iter_mut().zip(dx).for_each(|(g, d)| *g += d);
            }
        }
        Ok(loss)
    }

    /// Cross-entropy of one sample without touching gradients.
    pub fn loss(&self, sample: &Sample) -> Result<f64, DownstreamError> {
        let xs = self.inputs(&sample.features)?;
        let logits = self.forward(&xs)?.1;
        Ok(softmax_cross_entropy(&logits, sample.label)?.0)
    }

    pub fn write_to<W: Write>(&self, w: W) -> Result<(), DownstreamError> {
        let header = Header {
            config: self.config,
            input_dim: self.input_dim,
            classes: self.classes,
            loss_history: self.loss_history.clone(),
        };
        let header = serde_json::to_string(&header)
            .map_err(|e| DownstreamError::Checkpoint(e.to_string()))?;
        write_checkpoint(w, CHECKPOINT_KIND, &header, &self.params())?;
        Ok(())
    }

    pub fn read_from<R: Read>(r: R) -> Result<Self, DownstreamError> {
        let raw = read_checkpoint(r)?;
        if raw.kind != CHECKPOINT_KIND {
            return Err(DownstreamError::Checkpoint(format!(
                "expected a session classifier, found {:?}",
                raw.kind
            )));
        }
        let header: Header = serde_json::from_str(&raw.header)
            .map_err(|e| DownstreamError::Checkpoint(format!("bad header: {e}")))?;
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut model =
            SessionClassifier::new(header.config, header.input_dim, header.classes, &mut rng)?;
        restore_params(model.params_mut(), &raw.tensors)?;
        model.loss_history = header.loss_history;
        Ok(model)
    }

    pub fn save(&self, path: &Path) -> Result<(), DownstreamError> {
        self.write_to(BufWriter::new(File::create(path)?))
    }

    pub fn load(path: &Path) -> Result<Self, DownstreamError> {
        Self::read_from(BufReader::new(File::open(path)?))
    }
}

impl Parameterized for SessionClassifier {
    fn params(&self) -> Vec<&Param> {
        let mut v = vec![&self.sep];
        if let Some(l) = &self.lstm {
            v.extend(l.params());
        }
        v.extend(self.out.params());
        v
    }

    fn params_mut(&mut self) -> Vec<&mut Param> {
        let mut v = vec![&mut self.sep];
        if let Some(l) = &mut self.lstm {
            v.extend(l.params_mut());
        }
        v.extend(self.out.params_mut());
        v
    }
}

/// Indices of the `k` largest probabilities; equal values keep index order.
fn rank(probs: &[f64], k: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..probs.len()).collect();
    order.sort_by(|&a, &b| probs[b].total_cmp(&probs[a]).then(a.cmp(&b)));
    order.truncate(k);
    order
}

fn clip_gradients(params: &mut [&mut Param], max_norm: f64) {
    if !(max_norm > 0.0) {
        return;
    }
    let norm = params
        .iter()
        .flat_map(|p| p.grad.iter())
        .map(|g| g * g)
        .sum::<f64>()
        .sqrt();
    if norm > max_norm {
        let scale = max_norm / norm;
        for p in params.iter_mut() {
            p.grad.iter_mut().for_each(|g| *g *= scale);
        }
    }
}

/// Trains a session classifier by SGD on softmax cross-entropy.
pub fn train_session_classifier(
    samples: &[Sample],
    classes: usize,
    cfg: &ClassifierConfig,
) -> Result<SessionClassifier, DownstreamError> {
    cfg.train.validate(false)?;
    if samples.is_empty() {
        return Err(DownstreamError::NoTrainingData);
    }
    if let Some(s) = samples.iter().find(|s| s.label >= classes) {
        return Err(DownstreamError::ClassOutOfRange {
            class: s.label,
            classes,
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.train.seed);
    let mut model = SessionClassifier::new(*cfg, samples[0].features.dim, classes, &mut rng)?;
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); classes];
    for (i, s) in samples.iter().enumerate() {
        by_class[s.label].push(i);
    }
    let present: Vec<&Vec<usize>> = by_class.iter().filter(|v| !v.is_empty()).collect();
    let per_epoch = cfg.samples_per_epoch.unwrap_or(samples.len()).max(1);
    let mut order: Vec<usize> = (0..samples.len()).collect();
    model.zero_grad();
    for epoch in 0..cfg.train.epochs {
        let picks: Vec<usize> = if cfg.balanced {
            (0..per_epoch)
                .map(|_| {
                    let class = present[rng.random_range(0..present.len())];
                    class[rng.random_range(0..class.len())]
                })
                .collect()
        } else {
            order.shuffle(&mut rng);
            order.iter().copied().cycle().take(per_epoch).collect()
        };
        let mut total = 0.0;
        for idx in picks {
            total += model.loss_and_backward(&samples[idx])?;
            let mut params = model.params_mut();
            clip_gradients(&mut params, cfg.clip_norm);
            sgd_step(&mut params, epoch, &cfg.train)?;
        }
        let mean = total / per_epoch as f64;
        log::info!(
            "classifier epoch {}/{}: mean loss {mean:.5}",
            epoch + 1,
            cfg.train.epochs
        );
        model.loss_history.push(mean);
    }
    Ok(model)
}

/// Splits item indices per class: each class's members are shuffled and the
/// first `floor(train_fraction * n)` go to training. Both halves keep class
/// order, then shuffle order within the class.
pub fn stratified_split(
    labels: &[usize],
    train_fraction: f64,
    seed: u64,
) -> (Vec<usize>, Vec<usize>) {
    let classes = labels.iter().max().map_or(0, |m| m + 1);
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); classes];
    for (i, &y) in labels.iter().enumerate() {
        by_class[y].push(i);
    }
    let fraction = train_fraction.clamp(0.0, 1.0);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut train, mut test) = (Vec::new(), Vec::new());
    for mut members in by_class {
        members.shuffle(&mut rng);
        let cut = (fraction * members.len() as f64).floor() as usize;
        train.extend_from_slice(&members[..cut]);
        test.extend_from_slice(&members[cut..]);
    }
    (train, test)
}
