use std::fmt::Write;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::config::ModelConfig;
use super::network::{encode_patients, EncodedPatient};
use super::train::{predict, train_tgcnn, EpochRecord};
use crate::cohort::{CohortSplit, DemographicEncoder, PatientHistory};
use crate::error::Result;
use crate::graph::{extend_vocabulary_with_prescriptions, CodeVocabulary, TensorConfig};
use crate::metrics::{accuracy, auroc, calibration_slope_intercept, Prediction};

/// The vocabulary a configuration trains on: the base vocabulary, extended
/// with the prescription codes when the configuration asks for them.
pub fn model_vocabulary(base: &CodeVocabulary, config: &ModelConfig) -> Result<CodeVocabulary> {
    if config.use_prescriptions && !base.has_prescriptions() {
        extend_vocabulary_with_prescriptions(base)
    } else {
        Ok(base.clone())
    }
}

/// Encodes a training and a validation set with an encoder fitted on the
/// training histories.
pub fn encode_pair(
    train: &[PatientHistory],
    val: &[PatientHistory],
    vocab: &CodeVocabulary,
    tensor: &TensorConfig,
) -> Result<(Vec<EncodedPatient>, Vec<EncodedPatient>, DemographicEncoder)> {
    let encoder = DemographicEncoder::fit(train);
    Ok((
        encode_patients(train, vocab, tensor, &encoder)?,
        encode_patients(val, vocab, tensor, &encoder)?,
        encoder,
    ))
}

/// Mean and sample standard deviation of the finite values.
pub fn mean_sd(values: &[f64]) -> (f64, f64) {
    let v: Vec<f64> = values.iter().copied().filter(|x| x.is_finite()).collect();
    if v.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let sd = if v.len() > 1 {
        (v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
    } else {
        0.0
    };
    (mean, sd)
}

#[derive(Debug, Clone, PartialEq)]
pub struct FoldResult {
    pub fold: usize,
    pub train_auroc: f64,
    pub val_auroc: f64,
    pub train_cslope: f64,
    pub val_cslope: f64,
    pub train_acc: f64,
    pub val_acc: f64,
    pub best_epoch: usize,
    pub history: Vec<EpochRecord>,
}

impl FoldResult {
    fn from_predictions(fold: usize, train: &[Prediction], val: &[Prediction]) -> Self {
        let a = |p: &[Prediction]| auroc(p).unwrap_or(f64::NAN);
        let s = |p: &[Prediction]| calibration_slope_intercept(p).map_or(f64::NAN, |c| c.slope);
        FoldResult {
            fold,
            train_auroc: a(train),
            val_auroc: a(val),
            train_cslope: s(train),
            val_cslope: s(val),
            train_acc: accuracy(train),
            val_acc: accuracy(val),
            best_epoch: 0,
            history: Vec::new(),
        }
    }
}

const CV_COLUMNS: [&str; 6] = ["train_auroc", "val_auroc", "train_cslope", "val_cslope", "train_acc", "val_acc"];

/// Per-fold results with their mean and SD.
#[derive(Debug, Clone, PartialEq)]
pub struct CvSummary {
    pub folds: Vec<FoldResult>,
}

impl CvSummary {
    fn column(&self, name: &str) -> Vec<f64> {
        self.folds
            .iter()
            .map(|f| match name {
                "train_auroc" => f.train_auroc,
                "val_auroc" => f.val_auroc,
                "train_cslope" => f.train_cslope,
                "val_cslope" => f.val_cslope,
                "train_acc" => f.train_acc,
                _ => f.val_acc,
            })
            .collect()
    }

    pub fn mean_sd(&self, metric: &str) -> (f64, f64) {
        mean_sd(&self.column(metric))
    }

    /// Fold rows followed by `mean` and `sd` rows.
    pub fn to_csv(&self) -> String {
        let mut out = format!("fold,{}\n", CV_COLUMNS.join(","));
        for (i, f) in self.folds.iter().enumerate() {
            let vals: Vec<String> = CV_COLUMNS.iter().map(|c| self.column(c)[i].to_string()).collect();
            writeln!(out, "{},{}", f.fold, vals.join(",")).unwrap();
        }
        for (label, pick) in [("mean", 0), ("sd", 1)] {
            let vals: Vec<String> = CV_COLUMNS
                .iter()
                .map(|c| {
                    let (m, s) = self.mean_sd(c);
                    if pick == 0 { m } else { s }.to_string()
                })
                .collect();
            writeln!(out, "{label},{}", vals.join(",")).unwrap();
        }
        out
    }

    /// `mean (SD)` cells for train/validation AUROC and calibration slope.
    pub fn table_cells(&self) -> [String; 4] {
        ["train_auroc", "val_auroc", "train_cslope", "val_cslope"].map(|c| {
            let (m, s) = self.mean_sd(c);
            format!("{m:.3} ({s:.3})")
        })
    }
}

/// Trains one model per fold, each on the other folds' matched pairs with
/// seed `config.seed + fold`, and scores it on its held-out fold.
pub fn cross_validate(
    split: &CohortSplit,
    base_vocab: &CodeVocabulary,
    tensor: &TensorConfig,
    config: &ModelConfig,
) -> Result<CvSummary> {
    let vocab = model_vocabulary(base_vocab, config)?;
    let mut folds = Vec::with_capacity(split.n_folds());
    for k in 0..split.n_folds() {
        let (train_h, val_h) = split.fold(k);
        let (train, val, encoder) = encode_pair(&train_h, &val_h, &vocab, tensor)?;
        let mut cfg = config.clone();
        cfg.seed = config.seed.wrapping_add(k as u64);
        let fitted = train_tgcnn(&train, &val, &cfg, encoder)?;
        let tp = predict(&fitted.model, &train)?;
        let vp = predict(&fitted.model, &val)?;
        let mut r = FoldResult::from_predictions(k, &tp, &vp);
        r.best_epoch = fitted.best_epoch;
        r.history = fitted.history;
        log::info!("fold {k}: val auroc {:.3}, val acc {:.3}", r.val_auroc, r.val_acc);
        folds.push(r);
    }
    Ok(CvSummary { folds })
}

/// Sampling ranges of the random search.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SearchRanges {
    pub lr: (f64, f64),
    pub lambda1: (f64, f64),
    pub lambda2: (f64, f64),
    pub lambda_g: (f64, f64),
    pub n_filters: (usize, usize),
    pub filter_depth: (usize, usize),
    pub lstm_hidden: (usize, usize),
    pub dropout: (f64, f64),
}

impl Default for SearchRanges {
    fn default() -> Self {
        SearchRanges {
            lr: (1e-4, 1e-2),
            lambda1: (1e-6, 1e-2),
            lambda2: (1e-6, 1e-2),
            lambda_g: (1e-6, 1e-2),
            n_filters: (4, 64),
            filter_depth: (2, 5),
            lstm_hidden: (16, 128),
            dropout: (0.1, 0.5),
        }
    }
}

fn log_uniform(rng: &mut ChaCha8Rng, (lo, hi): (f64, f64)) -> f64 {
    rng.random_range(lo.ln()..=hi.ln()).exp()
}

/// `n_trials` configurations drawn from `ranges` on top of `base`; trial
/// `t` trains with seed `base.seed + t`.
pub fn sample_trials(base: &ModelConfig, ranges: &SearchRanges, n_trials: usize, seed: u64) -> Vec<ModelConfig> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n_trials)
        .map(|t| {
            let mut c = base.clone();
            c.lr = log_uniform(&mut rng, ranges.lr);
            c.lambda1 = log_uniform(&mut rng, ranges.lambda1);
            c.lambda2 = log_uniform(&mut rng, ranges.lambda2);
            c.lambda_g = log_uniform(&mut rng, ranges.lambda_g);
            c.n_filters = rng.random_range(ranges.n_filters.0..=ranges.n_filters.1);
            c.filter_depth = rng.random_range(ranges.filter_depth.0..=ranges.filter_depth.1);
            c.lstm_hidden = rng.random_range(ranges.lstm_hidden.0..=ranges.lstm_hidden.1);
            c.dropout_rate = rng.random_range(ranges.dropout.0..=ranges.dropout.1);
            c.seed = base.seed.wrapping_add(t as u64);
            c
        })
        .collect()
}

/// Index of the best `(mean val accuracy, mean val AUROC)` pair: highest
/// accuracy, AUROC breaking ties, earliest trial breaking exact ties.
pub fn select_best(scores: &[(f64, f64)]) -> Option<usize> {
    let key = |x: f64| if x.is_nan() { f64::NEG_INFINITY } else { x };
    let mut best: Option<usize> = None;
    for (i, &(acc, auc)) in scores.iter().enumerate() {
        best = match best {
            Some(b) if (key(scores[b].0), key(scores[b].1)) >= (key(acc), key(auc)) => Some(b),
            _ => Some(i),
        };
    }
    best
}

#[derive(Debug, Clone)]
pub struct SearchOutcome {
    pub trials: Vec<(ModelConfig, CvSummary)>,
    pub best: usize,
}

impl SearchOutcome {
    pub fn best_config(&self) -> &ModelConfig {
        &self.trials[self.best].0
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from(
            "trial,lr,lambda1,lambda2,lambda_g,n_filters,filter_depth,lstm_hidden,dropout_rate,mean_val_acc,mean_val_auroc\n",
        );
        for (t, (c, cv)) in self.trials.iter().enumerate() {
            writeln!(
                out,
                "{t},{},{},{},{},{},{},{},{},{},{}",
                c.lr,
                c.lambda1,
                c.lambda2,
                c.lambda_g,
                c.n_filters,
                c.filter_depth,
                c.lstm_hidden,
                c.dropout_rate,
                cv.mean_sd("val_acc").0,
                cv.mean_sd("val_auroc").0
            )
            .unwrap();
        }
        out
    }
}

/// Cross-validates `n_trials` sampled configurations and keeps the best.
pub fn random_search(
    split: &CohortSplit,
    vocab: &CodeVocabulary,
    tensor: &TensorConfig,
    base: &ModelConfig,
    ranges: &SearchRanges,
    n_trials: usize,
    seed: u64,
) -> Result<SearchOutcome> {
    let mut trials = Vec::with_capacity(n_trials);
    for (t, mut config) in sample_trials(base, ranges, n_trials, seed).into_iter().enumerate() {
        config.filter_depth = config.filter_depth.min(tensor.max_slots);
        log::info!("search trial {t}");
        let cv = cross_validate(split, vocab, tensor, &config)?;
        trials.push((config, cv));
    }
    let scores: Vec<(f64, f64)> = trials
        .iter()
        .map(|(_, cv)| (cv.mean_sd("val_acc").0, cv.mean_sd("val_auroc").0))
        .collect();
    let best = select_best(&scores).ok_or_else(|| crate::Error::Config("random search needs at least one trial".into()))?;
    Ok(SearchOutcome { trials, best })
}
