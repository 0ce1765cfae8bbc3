use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Array, Gradients, Graph, Params, Var};
use crate::cohort::PatientHistory;
use crate::error::{Error, Result};
use crate::graph::CodeVocabulary;
use crate::metrics::Prediction;
use crate::model::{fit, init_lstm, uniform, BnStats, Binder, Fitted, TrainOptions, Trainable, GATES};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SequenceKind {
    Rnn,
    Lstm,
}

impl SequenceKind {
    pub fn as_str(self) -> &'static str {
        match self {
            SequenceKind::Rnn => "rnn",
            SequenceKind::Lstm => "lstm",
        }
    }
}

impl fmt::Display for SequenceKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for SequenceKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "rnn" => Ok(SequenceKind::Rnn),
            "lstm" => Ok(SequenceKind::Lstm),
            _ => Err(Error::Config(format!("unknown sequence model '{s}', expected rnn or lstm"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SequenceConfig {
    pub kind: SequenceKind,
    pub embedding_dim: usize,
    pub hidden: usize,
    /// Most recent events kept per patient.
    pub max_events: usize,
    pub lr: f64,
    /// Squared-weight penalty over every parameter.
    pub lambda2: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub seed: u64,
}

impl Default for SequenceConfig {
    fn default() -> Self {
        SequenceConfig {
            kind: SequenceKind::Lstm,
            embedding_dim: 16,
            hidden: 32,
            max_events: 100,
            lr: 1e-3,
            lambda2: 1e-4,
            batch_size: 32,
            max_epochs: 50,
            patience: 10,
            seed: 0,
        }
    }
}

impl SequenceConfig {
    fn validate(&self) -> Result<()> {
        if self.embedding_dim == 0 || self.hidden == 0 || self.max_events == 0 || self.batch_size == 0 {
            return Err(Error::Config("sequence model sizes must be positive".into()));
        }
        if !(self.lr > 0.0) || !(self.lambda2 >= 0.0) {
            return Err(Error::Config("sequence model needs lr > 0 and lambda2 >= 0".into()));
        }
        Ok(())
    }
}

impl From<&SequenceConfig> for TrainOptions {
    fn from(c: &SequenceConfig) -> Self {
        TrainOptions {
            lr: c.lr,
            batch_size: c.batch_size,
            max_epochs: c.max_epochs,
            patience: c.patience,
            seed: c.seed,
        }
    }
}

/// A patient's in-vocabulary events as vocabulary indices.
#[derive(Debug, Clone, PartialEq)]
pub struct CodeSequence {
    pub patient_id: String,
    pub codes: Vec<u32>,
    pub label: bool,
}

/// Events in visit order, codes within a visit in lexicographic order,
/// keeping only the last `max_events`. No timing information survives.
pub fn code_sequence(history: &PatientHistory, vocab: &CodeVocabulary, max_events: usize) -> Vec<u32> {
    let all: Vec<u32> = history
        .visits
        .iter()
        .flat_map(|v| v.codes.iter())
        .filter_map(|c| vocab.index_of(c).map(|i| i as u32))
        .collect();
    all[all.len().saturating_sub(max_events)..].to_vec()
}

pub fn encode_sequences(histories: &[PatientHistory], vocab: &CodeVocabulary, max_events: usize) -> Vec<CodeSequence> {
    histories
        .iter()
        .map(|h| CodeSequence {
            patient_id: h.patient_id.clone(),
            codes: code_sequence(h, vocab, max_events),
            label: h.label,
        })
        .collect()
}

/// Embedding, a tanh RNN or LSTM over the code sequence, and a logistic
/// output on the final hidden state.
#[derive(Debug, Clone, PartialEq)]
pub struct SequenceModel {
    pub config: SequenceConfig,
    pub n_codes: usize,
    pub params: Params,
}

impl SequenceModel {
    pub fn init(config: &SequenceConfig, n_codes: usize) -> Result<Self> {
        config.validate()?;
        if n_codes == 0 {
            return Err(Error::Config("sequence model needs a non-empty vocabulary".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let (e, h) = (config.embedding_dim, config.hidden);
        let mut params = Params::new();
        params.insert("embedding", uniform(&mut rng, &[n_codes, e], 1));
        match config.kind {
            SequenceKind::Rnn => {
                params.insert("rnn.wx", uniform(&mut rng, &[e, h], e));
                params.insert("rnn.wh", uniform(&mut rng, &[h, h], h));
                params.insert("rnn.b", Array::zeros(&[h]));
            }
            SequenceKind::Lstm => init_lstm(&mut params, &mut rng, "lstm", e, h),
        }
        params.insert("output.w", uniform(&mut rng, &[h, 1], h));
        params.insert("output.b", Array::zeros(&[1]));
        Ok(SequenceModel {
            config: config.clone(),
            n_codes,
            params,
        })
    }

    /// Sequences of different lengths are front-padded and masked, so a
    /// sample's logit does not depend on the rest of its batch.
    fn forward<'a>(&'a self, g: &mut Graph<'a>, b: &mut Binder<'a>, batch: &[&CodeSequence]) -> Result<Var> {
        let n = batch.len();
        let (v, h) = (self.n_codes, self.config.hidden);
        let steps = batch.iter().map(|s| s.codes.len()).max().unwrap_or(0).max(1);
        let mut onehot = vec![0.0; steps * n * v];
        let mut active = vec![vec![false; n]; steps];
        for (r, s) in batch.iter().enumerate() {
            let offset = steps - s.codes.len();
            for (k, &code) in s.codes.iter().enumerate() {
                let code = code as usize;
                if code >= v {
                    return Err(Error::Shape(format!("code index {code} outside vocabulary of {v}")));
                }
                onehot[((offset + k) * n + r) * v + code] = 1.0;
                active[offset + k][r] = true;
            }
        }
        let onehot = g.constant(Array::matrix(steps * n, v, onehot));
        let emb = b.get(g, "embedding")?;
        let xs = g.matmul(onehot, emb);
        let zeros = || Array::zeros(&[n, h]);
        let mut state = Recurrent {
            h: g.constant(zeros()),
            c: g.constant(zeros()),
        };
        match self.config.kind {
            SequenceKind::Rnn => {
                let wx = b.get(g, "rnn.wx")?;
                let wh = b.get(g, "rnn.wh")?;
                let bias = b.get(g, "rnn.b")?;
                let z = g.matmul(xs, wx);
                let pre = g.add_bias(z, bias);
                for (t, mask) in active.iter().enumerate() {
                    if mask.iter().all(|a| !a) {
                        continue;
                    }
                    let x = g.slice_rows(pre, t * n, (t + 1) * n);
                    let r = g.matmul(state.h, wh);
                    let z = g.add(x, r);
                    let next = g.tanh(z);
                    state.h = masked(g, mask, h, next, state.h);
                }
            }
            SequenceKind::Lstm => {
                let mut pre = Vec::with_capacity(4);
                let mut wh = Vec::with_capacity(4);
                for gate in GATES {
                    let wx = b.get(g, &format!("lstm.wx_{gate}"))?;
                    let bias = b.get(g, &format!("lstm.b_{gate}"))?;
                    let z = g.matmul(xs, wx);
                    pre.push(g.add_bias(z, bias));
                    wh.push(b.get(g, &format!("lstm.wh_{gate}"))?);
                }
                for (t, mask) in active.iter().enumerate() {
                    if mask.iter().all(|a| !a) {
                        continue;
                    }
                    let mut gates = Vec::with_capacity(4);
                    for k in 0..4 {
                        let x = g.slice_rows(pre[k], t * n, (t + 1) * n);
                        let r = g.matmul(state.h, wh[k]);
                        gates.push(g.add(x, r));
                    }
                    let i = g.sigmoid(gates[0]);
                    let f = g.sigmoid(gates[1]);
                    let cand = g.tanh(gates[2]);
                    let o = g.sigmoid(gates[3]);
                    let fc = g.mul(f, state.c);
                    let ig = g.mul(i, cand);
                    let c = g.add(fc, ig);
                    let tc = g.tanh(c);
                    let next_h = g.mul(o, tc);
                    state.c = masked(g, mask, h, c, state.c);
                    state.h = masked(g, mask, h, next_h, state.h);
                }
            }
        }
        let w = b.get(g, "output.w")?;
        let ob = b.get(g, "output.b")?;
        let z = g.matmul(state.h, w);
        let logits = g.add_bias(z, ob);
        if !g.value(logits).all_finite() {
            return Err(Error::NonFinite {
                layer: format!("{}.output", self.config.kind),
            });
        }
        Ok(logits)
    }

    /// Inference-mode predictions sorted by patient id.
    pub fn predict(&self, samples: &[CodeSequence]) -> Result<Vec<Prediction>> {
        self.predict_samples(samples)
    }
}

struct Recurrent {
    h: Var,
    c: Var,
}

/// Rows flagged in `mask` take `next`, the others keep `prev`.
fn masked(g: &mut Graph<'_>, mask: &[bool], width: usize, next: Var, prev: Var) -> Var {
    if mask.iter().all(|&a| a) {
        return next;
    }
    let keep: Vec<f64> = mask
        .iter()
        .flat_map(|&a| std::iter::repeat_n(f64::from(u8::from(a)), width))
        .collect();
    let hold: Vec<f64> = keep.iter().map(|k| 1.0 - k).collect();
    let n = mask.len();
    let keep = g.constant(Array::matrix(n, width, keep));
    let hold = g.constant(Array::matrix(n, width, hold));
    let a = g.mul(keep, next);
    let p = g.mul(hold, prev);
    g.add(a, p)
}

impl Trainable for SequenceModel {
    type Sample = CodeSequence;

    fn params_mut(&mut self) -> &mut Params {
        &mut self.params
    }

    fn sample_label(s: &CodeSequence) -> bool {
        s.label
    }

    fn sample_id(s: &CodeSequence) -> &str {
        &s.patient_id
    }

    fn train_step(&self, batch: &[&CodeSequence], _rng: &mut ChaCha8Rng) -> Result<(f64, Gradients, BnStats)> {
        let mut g = Graph::new();
        let mut b = Binder::new(&self.params);
        let logits = self.forward(&mut g, &mut b, batch)?;
        let labels: Vec<f64> = batch.iter().map(|s| f64::from(u8::from(s.label))).collect();
        let mut loss = g.bce(logits, &labels);
        if self.config.lambda2 > 0.0 {
            for name in self.params.names() {
                let w = b.get(&mut g, name)?;
                let sq = g.l2_norm(w);
                let term = g.scale(sq, self.config.lambda2);
                loss = g.add(loss, term);
            }
        }
        let value = g.value(loss).item();
        Ok((value, g.backward(loss)?, Vec::new()))
    }

    fn logits(&self, batch: &[&CodeSequence]) -> Result<Vec<f64>> {
        let mut g = Graph::new();
        let mut b = Binder::new(&self.params);
        let logits = self.forward(&mut g, &mut b, batch)?;
        Ok(g.value(logits).data().to_vec())
    }

    fn penalty(&self) -> f64 {
        self.config.lambda2 * self.params.iter().flat_map(|(_, a)| a.data()).map(|v| v * v).sum::<f64>()
    }
}

/// Fits a sequence baseline on encoded sequences with the shared minibatch
/// loop and early stopping.
pub fn train_sequence_model(
    train: &[CodeSequence],
    val: &[CodeSequence],
    n_codes: usize,
    config: &SequenceConfig,
) -> Result<Fitted<SequenceModel>> {
    let model = SequenceModel::init(config, n_codes)?;
    fit(model, train, val, &TrainOptions::from(config))
}

/// Encodes the histories against `vocab` and fits a sequence baseline.
pub fn sequence_baseline_train(
    train: &[PatientHistory],
    val: &[PatientHistory],
    vocab: &CodeVocabulary,
    config: &SequenceConfig,
) -> Result<Fitted<SequenceModel>> {
    let t = encode_sequences(train, vocab, config.max_events);
    let v = encode_sequences(val, vocab, config.max_events);
    train_sequence_model(&t, &v, vocab.len(), config)
}
