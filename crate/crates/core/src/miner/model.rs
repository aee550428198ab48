use rand::Rng;

use super::{argmax, gold_pair_targets, MinerConfig, MinerError, MinerOutput};
use crate::features::{char_indices, local_features, CharAlphabet, EmbeddingTable};
use crate::logio::{AnnotatedMessage, Category, LogMessage};
use crate::neuralcore::linalg::{axpy, dot, matvec_add, matvec_t_add, outer_add};
use crate::neuralcore::{
    dense_forward, softmax, softmax_cross_entropy, Activation, BiLstm, BiLstmTrace, CharCnn,
    CnnTrace, Dense, Param, Parameterized,
};

/// Contextual encoding of one message.
#[derive(Debug, Clone, PartialEq)]
pub struct EncodedMessage {
    /// One `2 · hidden` vector per token.
    pub contextual: Vec<Vec<f64>>,
    /// Learned stand-in for the dummy `<TMP>` word.
    pub tmp_vector: Vec<f64>,
    /// Pre-trained word vectors, kept for the interval context.
    pub word_embs: Vec<Vec<f64>>,
}

/// Mean word vector strictly between pair-target slots `j` and `i` (both in
/// slot space, `j < i`). Empty intervals and `j = 0` give the zero vector.
pub fn interval_context(
    word_embs: &[Vec<f64>],
    i: usize,
    j: usize,
) -> Result<Vec<f64>, MinerError> {
    if j >= i {
        return Err(MinerError::IntervalOrder { i, j });
    }
    let dim = word_embs.first().map_or(0, Vec::len);
    let mut out = vec![0.0; dim];
    if j == 0 || i - j < 2 {
        return Ok(out);
    }
    let between = &word_embs[j..i - 1];
    for e in between {
        axpy(1.0, e, &mut out);
    }
    let n = between.len() as f64;
    out.iter_mut().for_each(|v| *v /= n);
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
enum Encoder {
    BiLstm(BiLstm),
    Projection(Dense),
}

#[derive(Debug, Clone, PartialEq)]
pub struct MinerModel {
    pub config: MinerConfig,
    pub alphabet: CharAlphabet,
    char_emb: Param,
    cnn: CharCnn,
    encoder: Encoder,
    tmp: Param,
    /// FFNN_a first layer over `[m_i; m_j; contx]` (tanh units).
    pair_w1: Param,
    pair_b1: Param,
    /// FFNN_a output row. It has no bias: a constant added to every
    /// candidate's score cancels in the softmax.
    pair_w2: Param,
    /// FFNN_b over `m_i`.
    scorer: Dense,
}

struct CharTrace {
    indices: Vec<usize>,
    embs: Vec<f64>,
    cnn: CnnTrace,
}

enum EncoderTrace {
    BiLstm(BiLstmTrace),
    Projection,
}

/// Everything the backward pass needs for one message.
struct Trace {
    word_embs: Vec<Vec<f64>>,
    chars: Vec<Option<CharTrace>>,
    inputs: Vec<Vec<f64>>,
    encoder: EncoderTrace,
    contextual: Vec<Vec<f64>>,
    /// Post-tanh pair hidden layer, `(t + 1) × pair_hidden` per token.
    pair_hidden: Vec<Vec<f64>>,
    pair_logits: Vec<Vec<f64>>,
    word_logits: Vec<Vec<f64>>,
}

impl MinerModel {
    pub fn new<R: Rng>(
        config: MinerConfig,
        alphabet: CharAlphabet,
        rng: &mut R,
    ) -> Result<Self, MinerError> {
        config.validate()?;
        let h2 = config.context_dim();
        let input = config.input_dim();
        let char_emb = Param::glorot("char.embedding", alphabet.size(), config.char_dim, rng);
        let cnn = CharCnn::new(
            "char.cnn",
            config.char_dim,
            config.char_filters,
            config.char_window,
            rng,
        );
        let encoder = if config.ablation.no_lstm {
            Encoder::Projection(Dense::new(
                "encoder.projection",
                input,
                h2,
                Activation::None,
                rng,
            ))
        } else {
            Encoder::BiLstm(BiLstm::new(
                "encoder.bilstm",
                input,
                config.hidden,
                config.layers,
                rng,
            ))
        };
        let tmp = Param::glorot("pair.tmp", h2, 1, rng);
        let pair_in = 2 * h2 + config.word_dim;
        let pair_w1 = Param::glorot("pair.ffnn.l0.weight", config.pair_hidden, pair_in, rng);
        let pair_b1 = Param::zeros("pair.ffnn.l0.bias", config.pair_hidden, 1);
        let pair_w2 = Param::glorot("pair.ffnn.l1.weight", 1, config.pair_hidden, rng);
        let scorer = Dense::new("word.ffnn", h2, 3, Activation::None, rng);
        Ok(MinerModel {
            config,
            alphabet,
            char_emb,
            cnn,
            encoder,
            tmp,
            pair_w1,
            pair_b1,
            pair_w2,
            scorer,
        })
    }

    fn check_table(&self, table: &EmbeddingTable) -> Result<(), MinerError> {
        if table.dim() != self.config.word_dim {
            return Err(MinerError::DimensionMismatch {
                table: table.dim(),
                model: self.config.word_dim,
            });
        }
        Ok(())
    }

    fn token_input(
        &self,
        token: &str,
        word: &[f64],
    ) -> Result<(Vec<f64>, Option<CharTrace>), MinerError> {
        let cfg = &self.config;
        let mut x = Vec::with_capacity(cfg.input_dim());
        x.extend_from_slice(word);
        let char_trace = if cfg.ablation.no_char {
            x.extend(std::iter::repeat(0.0).take(cfg.char_filters));
            None
        } else {
            let indices = char_indices(token, &self.alphabet, cfg.max_chars);
            let mut embs = Vec::with_capacity(indices.len() * cfg.char_dim);
            for &c in &indices {
                embs.extend_from_slice(self.char_emb.row(c));
            }
            let cnn = self.cnn.forward(&embs)?;
            x.extend_from_slice(&cnn.output);
            Some(CharTrace { indices, embs, cnn })
        };
        if cfg.ablation.no_local {
            x.extend(std::iter::repeat(0.0).take(cfg.local_features));
        } else {
            x.extend_from_slice(local_features(token)?.values());
        }
        Ok((x, char_trace))
    }

    fn encode_tokens(
        &self,
        tokens: &[String],
        table: &EmbeddingTable,
    ) -> Result<
        (
            Vec<Vec<f64>>,
            Vec<Option<CharTrace>>,
            Vec<Vec<f64>>,
            EncoderTrace,
            Vec<Vec<f64>>,
        ),
        MinerError,
    > {
        if tokens.is_empty() {
            return Err(MinerError::EmptyMessage);
        }
        self.check_table(table)?;
        let word_embs: Vec<Vec<f64>> = tokens
            .iter()
            .map(|t| table.embed_word(t).to_vec())
            .collect();
        let mut inputs = Vec::with_capacity(tokens.len());
        let mut chars = Vec::with_capacity(tokens.len());
        for (tok, word) in tokens.iter().zip(&word_embs) {
            let (x, c) = self.token_input(tok, word)?;
            inputs.push(x);
            chars.push(c);
        }
        let (contextual, enc_trace) = match &self.encoder {
            Encoder::BiLstm(net) => {
                let (out, trace) = net.forward(&inputs)?;
                (out, EncoderTrace::BiLstm(trace))
            }
            Encoder::Projection(proj) => {
                let out = inputs
                    .iter()
                    .map(|x| proj.forward(x))
                    .collect::<Result<Vec<_>, _>>()?;
                (out, EncoderTrace::Projection)
            }
        };
        Ok((word_embs, chars, inputs, enc_trace, contextual))
    }

    /// Runs the contextual encoder over a message.
    pub fn encode_context(
        &self,
        message: &LogMessage,
        table: &EmbeddingTable,
    ) -> Result<EncodedMessage, MinerError> {
        let (word_embs, _, _, _, contextual) = self.encode_tokens(&message.tokens, table)?;
        Ok(EncodedMessage {
            contextual,
            tmp_vector: self.tmp.value.clone(),
            word_embs,
        })
    }

    /// Unnormalized pair scores for token `i` over `{<TMP>, token 0, …, token i-1}`,
    /// computed literally as FFNN_a on the concatenated pair features.
    pub fn score_pairs(&self, enc: &EncodedMessage, i: usize) -> Result<Vec<f64>, MinerError> {
        let m_i = &enc.contextual[i];
        let mut scores = Vec::with_capacity(i + 1);
        for slot in 0..=i {
            let m_j = if slot == 0 {
                &enc.tmp_vector
            } else {
                &enc.contextual[slot - 1]
            };
            let contx = if self.config.ablation.no_context {
                vec![0.0; self.config.word_dim]
            } else {
                interval_context(&enc.word_embs, i + 1, slot)?
            };
            let features: Vec<f64> = m_i.iter().chain(m_j).chain(&contx).copied().collect();
            let hidden = dense_forward(&self.pair_w1, &self.pair_b1, &features, Activation::Tanh)?;
            scores.push(dot(&self.pair_w2.value, &hidden));
        }
        Ok(scores)
    }

    /// Unnormalized `[Concept, Instance, None]` scores per token.
    pub fn score_words(&self, enc: &EncodedMessage) -> Result<Vec<[f64; 3]>, MinerError> {
        enc.contextual
            .iter()
            .map(|m| {
                let s = self.scorer.forward(m)?;
                Ok([s[0], s[1], s[2]])
            })
            .collect()
    }

    /// Joint loss of a gold annotation under an encoding: pair-target
    /// cross-entropy plus category cross-entropy, summed over tokens.
    pub fn miner_loss(
        &self,
        enc: &EncodedMessage,
        gold: &AnnotatedMessage,
    ) -> Result<f64, MinerError> {
        Ok(self.miner_loss_terms(enc, gold)?.iter().sum())
    }

    /// The summands of [`MinerModel::miner_loss`]: for each token, its pair
    /// cross-entropy followed by its category cross-entropy.
    pub fn miner_loss_terms(
        &self,
        enc: &EncodedMessage,
        gold: &AnnotatedMessage,
    ) -> Result<Vec<f64>, MinerError> {
        let n = enc.contextual.len();
        if gold.categories.len() != n {
            return Err(MinerError::Misaligned(format!(
                "{} gold categories for {n} tokens",
                gold.categories.len()
            )));
        }
        let targets = gold_pair_targets(gold);
        let words = self.score_words(enc)?;
        let mut terms = Vec::with_capacity(2 * n);
        for i in 0..n {
            let pairs = self.score_pairs(enc, i)?;
            terms.push(softmax_cross_entropy(&pairs, targets[i])?.0);
            terms.push(softmax_cross_entropy(&words[i], gold.categories[i].index())?.0);
        }
        Ok(terms)
    }

    fn forward(&self, tokens: &[String], table: &EmbeddingTable) -> Result<Trace, MinerError> {
        let (word_embs, chars, inputs, encoder, contextual) = self.encode_tokens(tokens, table)?;
        let n = tokens.len();
        let ph = self.config.pair_hidden;
        let h2 = self.config.context_dim();
        let stride = self.pair_w1.cols;
        let w1 = &self.pair_w1.value;

        let mut own = Vec::with_capacity(n);
        let mut as_target = Vec::with_capacity(n);
        for m in &contextual {
            let mut a = self.pair_b1.value.clone();
            matvec_add(w1, stride, 0, m, &mut a);
            own.push(a);
            let mut b = vec![0.0; ph];
            matvec_add(w1, stride, h2, m, &mut b);
            as_target.push(b);
        }
        let mut tmp_target = vec![0.0; ph];
        matvec_add(w1, stride, h2, &self.tmp.value, &mut tmp_target);
        let prefix = self.context_prefix(&word_embs);

        let w2 = &self.pair_w2.value;
        let mut pair_hidden = Vec::with_capacity(n);
        let mut pair_logits = Vec::with_capacity(n);
        let mut ctx = vec![0.0; ph];
        for t in 0..n {
            let mut hidden = Vec::with_capacity((t + 1) * ph);
            let mut logits = Vec::with_capacity(t + 1);
            for slot in 0..=t {
                let target = if slot == 0 {
                    &tmp_target
                } else {
                    &as_target[slot - 1]
                };
                let has_ctx = self.interval_mean(&prefix, t, slot, &mut ctx);
                let start = hidden.len();
                for k in 0..ph {
                    let mut v = own[t][k] + target[k];
                    if has_ctx {
                        v += ctx[k];
                    }
                    hidden.push(v.tanh());
                }
                logits.push(dot(w2, &hidden[start..]));
            }
            pair_hidden.push(hidden);
            pair_logits.push(logits);
        }
        let word_logits = contextual
            .iter()
            .map(|m| self.scorer.forward(m))
            .collect::<Result<Vec<_>, _>>()?;
        Ok(Trace {
            word_embs,
            chars,
            inputs,
            encoder,
            contextual,
            pair_hidden,
            pair_logits,
            word_logits,
        })
    }

    /// Prefix sums of `W1_contx · e_k`; empty when interval context is off.
    fn context_prefix(&self, word_embs: &[Vec<f64>]) -> Vec<Vec<f64>> {
        if self.config.ablation.no_context {
            return Vec::new();
        }
        let ph = self.config.pair_hidden;
        let offset = 2 * self.config.context_dim();
        let mut prefix = Vec::with_capacity(word_embs.len() + 1);
        prefix.push(vec![0.0; ph]);
        for e in word_embs {
            let mut next = prefix.last().expect("non-empty").clone();
            matvec_add(&self.pair_w1.value, self.pair_w1.cols, offset, e, &mut next);
            prefix.push(next);
        }
        prefix
    }

    /// Projected interval mean for token `t` against `slot`; false when the
    /// context is empty (or disabled).
    fn interval_mean(&self, prefix: &[Vec<f64>], t: usize, slot: usize, out: &mut [f64]) -> bool {
        if prefix.is_empty() || slot == 0 {
            return false;
        }
        let earlier = slot - 1;
        let count = t - earlier - 1;
        if count == 0 {
            return false;
        }
        let inv = 1.0 / count as f64;
        for (k, o) in out.iter_mut().enumerate() {
            *o = (prefix[t][k] - prefix[earlier + 1][k]) * inv;
        }
        true
    }

    /// Joint loss of one annotated message with gradients accumulated into
    /// the model parameters.
    pub fn loss_and_backward(
        &mut self,
        gold: &AnnotatedMessage,
        table: &EmbeddingTable,
    ) -> Result<f64, MinerError> {
        let trace = self.forward(gold.tokens(), table)?;
        let n = trace.contextual.len();
        if gold.categories.len() != n {
            return Err(MinerError::Misaligned(format!(
                "{} gold categories for {n} tokens",
                gold.categories.len()
            )));
        }
        let targets = gold_pair_targets(gold);
        let ph = self.config.pair_hidden;
        let h2 = self.config.context_dim();
        let d = self.config.word_dim;
        let use_ctx = !self.config.ablation.no_context;

        let mut loss = 0.0;
        let mut d_own = vec![vec![0.0; ph]; n];
        let mut d_target = vec![vec![0.0; ph]; n];
        let mut d_tmp_target = vec![0.0; ph];
        // Difference array over tokens for the context gradient.
        let mut d_ctx_diff = vec![vec![0.0; ph]; n + 1];
        let mut dm = vec![vec![0.0; h2]; n];
        let mut dh = vec![0.0; ph];

        for t in 0..n {
            let (l, dlogits) = softmax_cross_entropy(&trace.pair_logits[t], targets[t])?;
            loss += l;
            let hidden = &trace.pair_hidden[t];
            for (slot, &g) in dlogits.iter().enumerate() {
                if g == 0.0 {
                    continue;
                }
                let h = &hidden[slot * ph..(slot + 1) * ph];
                axpy(g, h, &mut self.pair_w2.grad);
                for k in 0..ph {
                    dh[k] = g * self.pair_w2.value[k] * (1.0 - h[k] * h[k]);
                }
                axpy(1.0, &dh, &mut d_own[t]);
                if slot == 0 {
                    axpy(1.0, &dh, &mut d_tmp_target);
                } else {
                    axpy(1.0, &dh, &mut d_target[slot - 1]);
                    let earlier = slot - 1;
                    let count = t - earlier - 1;
                    if use_ctx && count > 0 {
                        let inv = 1.0 / count as f64;
                        axpy(inv, &dh, &mut d_ctx_diff[earlier + 1]);
                        axpy(-inv, &dh, &mut d_ctx_diff[t]);
                    }
                }
            }

            let (l, dwords) =
                softmax_cross_entropy(&trace.word_logits[t], gold.categories[t].index())?;
            loss += l;
            let dm_t = self
                .scorer
                .backward(&trace.contextual[t], &trace.word_logits[t], &dwords);
            axpy(1.0, &dm_t, &mut dm[t]);
        }

        let stride = self.pair_w1.cols;
        for t in 0..n {
            let m = &trace.contextual[t];
            axpy(1.0, &d_own[t], &mut self.pair_b1.grad);
            outer_add(&mut self.pair_w1.grad, stride, 0, &d_own[t], m);
            matvec_t_add(&self.pair_w1.value, stride, 0, &d_own[t], &mut dm[t]);
            outer_add(&mut self.pair_w1.grad, stride, h2, &d_target[t], m);
            matvec_t_add(&self.pair_w1.value, stride, h2, &d_target[t], &mut dm[t]);
        }
        outer_add(
            &mut self.pair_w1.grad,
            stride,
            h2,
            &d_tmp_target,
            &self.tmp.value,
        );
        matvec_t_add(
            &self.pair_w1.value,
            stride,
            h2,
            &d_tmp_target,
            &mut self.tmp.grad,
        );
        if use_ctx {
            let mut running = vec![0.0; ph];
            for k in 0..n {
                axpy(1.0, &d_ctx_diff[k], &mut running);
                outer_add(
                    &mut self.pair_w1.grad,
                    stride,
                    2 * h2,
                    &running,
                    &trace.word_embs[k][..d],
                );
            }
        }

        let dinputs = match (&mut self.encoder, &trace.encoder) {
            (Encoder::BiLstm(net), EncoderTrace::BiLstm(t)) => net.backward(t, &dm),
            (Encoder::Projection(proj), EncoderTrace::Projection) => trace
                .inputs
                .iter()
                .zip(&trace.contextual)
                .zip(&dm)
                .map(|((x, y), g)| proj.backward(x, y, g))
                .collect(),
            _ => unreachable!("encoder and trace variants always match"),
        };

        let char_offset = self.config.word_dim;
        let cdim = self.config.char_dim;
        for (dx, ct) in dinputs.iter().zip(&trace.chars) {
            if let Some(ct) = ct {
                let dout = &dx[char_offset..char_offset + self.config.char_filters];
                let dembs = self.cnn.backward(&ct.embs, &ct.cnn, dout)?;
                for (pos, &c) in ct.indices.iter().enumerate() {
                    axpy(
                        1.0,
                        &dembs[pos * cdim..(pos + 1) * cdim],
                        &mut self.char_emb.grad[c * cdim..(c + 1) * cdim],
                    );
                }
            }
        }
        Ok(loss)
    }

    /// Joint loss computed with the same fast path as training, without
    /// touching gradients.
    pub fn message_loss(
        &self,
        gold: &AnnotatedMessage,
        table: &EmbeddingTable,
    ) -> Result<f64, MinerError> {
        let trace = self.forward(gold.tokens(), table)?;
        if gold.categories.len() != trace.contextual.len() {
            return Err(MinerError::Misaligned("category count".into()));
        }
        let targets = gold_pair_targets(gold);
        let mut loss = 0.0;
        for t in 0..trace.contextual.len() {
            loss += softmax_cross_entropy(&trace.pair_logits[t], targets[t])?.0;
            loss += softmax_cross_entropy(&trace.word_logits[t], gold.categories[t].index())?.0;
        }
        Ok(loss)
    }

    /// Per-token category and pair decisions for a message.
    pub fn infer_message(
        &self,
        message: &LogMessage,
        table: &EmbeddingTable,
    ) -> Result<MinerOutput, MinerError> {
        if message.tokens.is_empty() {
            return Ok(MinerOutput::empty());
        }
        let trace = self.forward(&message.tokens, table)?;
        let categories = trace
            .word_logits
            .iter()
            .map(|l| Category::from_index(argmax(l)).expect("three classes"))
            .collect();
        let pair_targets = trace.pair_logits.iter().map(|l| argmax(l)).collect();
        let mut out = MinerOutput::from_decisions(categories, pair_targets);
        out.category_scores = trace
            .word_logits
            .iter()
            .map(|l| {
                let p = softmax(l);
                [p[0], p[1], p[2]]
            })
            .collect();
        out.pair_scores = trace.pair_logits.iter().map(|l| softmax(l)).collect();
        Ok(out)
    }

    /// Raw pair logits from the fast path (used to cross-check [`Self::score_pairs`]).
    pub fn fast_pair_logits(
        &self,
        tokens: &[String],
        table: &EmbeddingTable,
    ) -> Result<Vec<Vec<f64>>, MinerError> {
        Ok(self.forward(tokens, table)?.pair_logits)
    }

    pub(crate) fn header_tensors(&self) -> Vec<&Param> {
        self.params()
    }
}

impl Parameterized for MinerModel {
    fn params(&self) -> Vec<&Param> {
        let mut v: Vec<&Param> = vec![&self.char_emb, &self.cnn.filters, &self.cnn.bias];
        match &self.encoder {
            Encoder::BiLstm(net) => v.extend(net.params()),
            Encoder::Projection(p) => v.extend(p.params()),
        }
        v.extend([&self.tmp, &self.pair_w1, &self.pair_b1, &self.pair_w2]);
        v.extend(self.scorer.params());
        v
    }

    fn params_mut(&mut self) -> Vec<&mut Param> {
        let mut v: Vec<&mut Param> = vec![
            &mut self.char_emb,
            &mut self.cnn.filters,
            &mut self.cnn.bias,
        ];
        match &mut self.encoder {
            Encoder::BiLstm(net) => v.extend(net.params_mut()),
            Encoder::Projection(p) => v.extend(p.params_mut()),
        }
        v.extend([
            &mut self.tmp,
            &mut self.pair_w1,
            &mut self.pair_b1,
            &mut self.pair_w2,
        ]);
        v.extend(self.scorer.params_mut());
        v
    }
}
