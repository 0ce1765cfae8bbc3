use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::config::ModelConfig;
use super::network::{cross_entropy, penalty_graph, penalty_value, BnStats, Binder, EncodedPatient, TgcnnModel};
use crate::autodiff::{adam_step, AdamConfig, AdamState, Gradients, Graph, Params};
use crate::error::{Error, Result};
use crate::metrics::{accuracy, auroc, calibration_slope_intercept, Prediction};

/// Rows per inference pass.
const INFER_CHUNK: usize = 256;

/// Optimisation settings shared by every trainable model.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainOptions {
    pub lr: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    /// Epochs without validation improvement before stopping.
    pub patience: usize,
    pub seed: u64,
}

impl From<&ModelConfig> for TrainOptions {
    fn from(c: &ModelConfig) -> Self {
        TrainOptions {
            lr: c.lr,
            batch_size: c.batch_size,
            max_epochs: c.max_epochs,
            patience: c.patience,
            seed: c.seed,
        }
    }
}

/// One row of the training history. Epoch 0 describes the initial
/// parameters. Losses include the regularisation terms; undefined metrics
/// are NaN.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub train_acc: f64,
    pub val_acc: f64,
    pub train_auroc: f64,
    pub val_auroc: f64,
    pub val_cslope: f64,
}

pub const HISTORY_HEADER: &str = "epoch,train_loss,val_loss,train_acc,val_acc,train_auroc,val_auroc,val_cslope";

pub fn history_csv(history: &[EpochRecord]) -> String {
    let mut out = format!("{HISTORY_HEADER}\n");
    for r in history {
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{}\n",
            r.epoch, r.train_loss, r.val_loss, r.train_acc, r.val_acc, r.train_auroc, r.val_auroc, r.val_cslope
        ));
    }
    out
}

pub fn parse_history_csv(text: &str) -> Result<Vec<EpochRecord>> {
    let mut lines = text.lines();
    if lines.next() != Some(HISTORY_HEADER) {
        return Err(Error::Parse {
            file: "history".into(),
            line: 1,
            column: 1,
            message: "unexpected header".into(),
        });
    }
    lines
        .enumerate()
        .map(|(i, line)| {
            let f: Vec<&str> = line.split(',').collect();
            let bad = |column: usize| Error::Parse {
                file: "history".into(),
                line: i + 2,
                column,
                message: "bad field".into(),
            };
            if f.len() != 8 {
                return Err(bad(1));
            }
            let num = |k: usize| f[k].parse::<f64>().map_err(|_| bad(k + 1));
            Ok(EpochRecord {
                epoch: f[0].parse().map_err(|_| bad(1))?,
                train_loss: num(1)?,
                val_loss: num(2)?,
                train_acc: num(3)?,
                val_acc: num(4)?,
                train_auroc: num(5)?,
                val_auroc: num(6)?,
                val_cslope: num(7)?,
            })
        })
        .collect()
}

/// A model the shared minibatch loop can fit.
pub(crate) trait Trainable: Clone {
    type Sample;

    fn params_mut(&mut self) -> &mut Params;
    fn sample_label(s: &Self::Sample) -> bool;
    fn sample_id(s: &Self::Sample) -> &str;
    /// Training-mode loss and gradients over one batch.
    fn train_step(&self, batch: &[&Self::Sample], rng: &mut ChaCha8Rng) -> Result<(f64, Gradients, BnStats)>;
    fn apply_stats(&mut self, _stats: &BnStats) {}
    /// Inference-mode logits.
    fn logits(&self, batch: &[&Self::Sample]) -> Result<Vec<f64>>;
    /// Regularisation added to the cross-entropy.
    fn penalty(&self) -> f64;

    fn predict_samples(&self, samples: &[Self::Sample]) -> Result<Vec<Prediction>> {
        let mut out = Vec::with_capacity(samples.len());
        for chunk in samples.chunks(INFER_CHUNK) {
            let refs: Vec<&Self::Sample> = chunk.iter().collect();
            for (s, z) in chunk.iter().zip(self.logits(&refs)?) {
                out.push(Prediction::from_linear(Self::sample_id(s), z, Self::sample_label(s)));
            }
        }
        out.sort_by(|a, b| a.patient_id.cmp(&b.patient_id));
        Ok(out)
    }
}

impl Trainable for TgcnnModel {
    type Sample = EncodedPatient;

    fn params_mut(&mut self) -> &mut Params {
        &mut self.params
    }

    fn sample_label(s: &EncodedPatient) -> bool {
        s.label
    }

    fn sample_id(s: &EncodedPatient) -> &str {
        &s.patient_id
    }

    fn train_step(&self, batch: &[&EncodedPatient], rng: &mut ChaCha8Rng) -> Result<(f64, Gradients, BnStats)> {
        let mut g = Graph::new();
        let fwd = self.forward(&mut g, batch, Some(rng))?;
        let labels: Vec<f64> = batch.iter().map(|p| f64::from(u8::from(p.label))).collect();
        let mut loss = g.bce(fwd.logits, &labels);
        let mut binder = Binder::new(&self.params);
        binder.vars = fwd.binder_vars.clone();
        if let Some(p) = penalty_graph(&mut g, &mut binder, &self.params, &self.filter_names(), &self.config)? {
            loss = g.add(loss, p);
        }
        let value = g.value(loss).item();
        let grads = g.backward(loss)?;
        Ok((value, grads, fwd.bn_stats(&g)))
    }

    fn apply_stats(&mut self, stats: &BnStats) {
        self.update_running(stats);
    }

    fn logits(&self, batch: &[&EncodedPatient]) -> Result<Vec<f64>> {
        let mut g = Graph::new();
        let fwd = self.forward(&mut g, batch, None)?;
        Ok(g.value(fwd.logits).data().to_vec())
    }

    fn penalty(&self) -> f64 {
        let b = penalty_value(&self.params, &self.filter_names(), &self.config);
        b.l1 + b.l2 + b.graph
    }
}

fn nan_if_err(r: Result<f64>) -> f64 {
    r.unwrap_or(f64::NAN)
}

struct Evaluation {
    loss: f64,
    acc: f64,
    auroc: f64,
    cslope: f64,
}

fn evaluate_split<M: Trainable>(model: &M, samples: &[M::Sample]) -> Result<Evaluation> {
    if samples.is_empty() {
        return Ok(Evaluation {
            loss: f64::NAN,
            acc: f64::NAN,
            auroc: f64::NAN,
            cslope: f64::NAN,
        });
    }
    let preds = model.predict_samples(samples)?;
    let logits: Vec<f64> = preds.iter().map(|p| p.linear_predictor).collect();
    let labels: Vec<bool> = preds.iter().map(|p| p.label).collect();
    Ok(Evaluation {
        loss: cross_entropy(&logits, &labels) + model.penalty(),
        acc: accuracy(&preds),
        auroc: nan_if_err(auroc(&preds)),
        cslope: nan_if_err(calibration_slope_intercept(&preds).map(|c| c.slope)),
    })
}

fn record<M: Trainable>(model: &M, epoch: usize, train: &[M::Sample], val: &[M::Sample]) -> Result<EpochRecord> {
    let t = evaluate_split(model, train)?;
    let v = evaluate_split(model, val)?;
    Ok(EpochRecord {
        epoch,
        train_loss: t.loss,
        val_loss: v.loss,
        train_acc: t.acc,
        val_acc: v.acc,
        train_auroc: t.auroc,
        val_auroc: v.auroc,
        val_cslope: v.cslope,
    })
}

/// Score used for early stopping: validation accuracy, then validation
/// AUROC; training figures when there is no validation set.
fn selection_score(r: &EpochRecord, has_val: bool) -> (f64, f64) {
    let (acc, auc) = if has_val {
        (r.val_acc, r.val_auroc)
    } else {
        (r.train_acc, r.train_auroc)
    };
    let finite = |x: f64| if x.is_nan() { f64::NEG_INFINITY } else { x };
    (finite(acc), finite(auc))
}

/// Result of a training run.
#[derive(Debug, Clone)]
pub struct Fitted<M> {
    /// Parameters of the best epoch.
    pub model: M,
    pub history: Vec<EpochRecord>,
    pub best_epoch: usize,
}

/// Shuffled minibatch Adam with early stopping on validation accuracy.
pub(crate) fn fit<M: Trainable>(
    mut model: M,
    train: &[M::Sample],
    val: &[M::Sample],
    opts: &TrainOptions,
) -> Result<Fitted<M>> {
    if train.is_empty() {
        return Err(Error::CohortTooSmall("no training samples".into()));
    }
    let adam = AdamConfig {
        lr: opts.lr,
        ..AdamConfig::default()
    };
    let mut state = AdamState::new();
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let has_val = !val.is_empty();
    let first = record(&model, 0, train, val)?;
    let mut best = (selection_score(&first, has_val), model.clone(), 0);
    let mut history = vec![first];
    let mut waited = 0;
    let mut order: Vec<usize> = (0..train.len()).collect();

    for epoch in 1..=opts.max_epochs {
        order.shuffle(&mut rng);
        for (batch_no, idx) in order.chunks(opts.batch_size.max(1)).enumerate() {
            let batch: Vec<&M::Sample> = idx.iter().map(|&i| &train[i]).collect();
            let (loss, grads, stats) = model.train_step(&batch, &mut rng)?;
            if !loss.is_finite() || !grads.all_finite() {
                return Err(Error::Diverged { epoch, batch: batch_no });
            }
            adam_step(model.params_mut(), &grads, &mut state, &adam)?;
            model.apply_stats(&stats);
        }
        let rec = record(&model, epoch, train, val)?;
        log::debug!(
            "epoch {epoch}: train loss {:.4} val acc {:.4} val auroc {:.4}",
            rec.train_loss,
            rec.val_acc,
            rec.val_auroc
        );
        history.push(rec);
        let score = selection_score(&rec, has_val);
        if score > best.0 {
            best = (score, model.clone(), epoch);
            waited = 0;
        } else {
            waited += 1;
            if waited >= opts.patience {
                log::info!("early stop after epoch {epoch}, best epoch {}", best.2);
                break;
            }
        }
    }
    Ok(Fitted {
        model: best.1,
        history,
        best_epoch: best.2,
    })
}

/// Trains a TG-CNN on encoded patients. `V` and `K` are taken from the
/// training tensors.
pub fn train_tgcnn(
    train: &[EncodedPatient],
    val: &[EncodedPatient],
    config: &ModelConfig,
    encoder: crate::cohort::DemographicEncoder,
) -> Result<Fitted<TgcnnModel>> {
    let first = train
        .first()
        .ok_or_else(|| Error::CohortTooSmall("no training samples".into()))?;
    let model = TgcnnModel::init(config, first.tensor.n_nodes, first.tensor.n_slots, encoder)?;
    fit(model, train, val, &TrainOptions::from(config))
}

impl TgcnnModel {
    /// Training-mode loss (cross-entropy plus penalties) and its gradient
    /// over one batch. `seed` drives dropout.
    pub fn loss_and_gradients(&self, batch: &[EncodedPatient], seed: u64) -> Result<(f64, Gradients)> {
        let refs: Vec<&EncodedPatient> = batch.iter().collect();
        let (loss, grads, _) = self.train_step(&refs, &mut ChaCha8Rng::seed_from_u64(seed))?;
        Ok((loss, grads))
    }
}

/// Inference-mode predictions sorted by patient id.
pub fn predict(model: &TgcnnModel, patients: &[EncodedPatient]) -> Result<Vec<Prediction>> {
    model.predict_samples(patients)
}
