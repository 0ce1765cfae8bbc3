use std::fmt;
use std::str::FromStr;

use super::logistic::{coefficients_csv, logit_fit, logit_predict, LogitFit, LogitOptions};
use crate::cohort::{DemographicEncoder, PatientHistory};
use crate::error::{Error, Result};
use crate::graph::CodeVocabulary;
use crate::metrics::Prediction;

/// Which columns a feature vector holds: `n_codes` count columns, then the
/// demographic columns when `demographics` is set.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FeatureLayout {
    pub n_codes: usize,
    pub demographics: bool,
}

impl FeatureLayout {
    pub fn width(&self) -> usize {
        self.n_codes + if self.demographics { DemographicEncoder::WIDTH } else { 0 }
    }

    /// Column names: `code:<code>` per vocabulary entry, then the
    /// demographic names.
    pub fn names(&self, vocab: &CodeVocabulary) -> Vec<String> {
        let mut out: Vec<String> = vocab.codes()[..self.n_codes].iter().map(|c| format!("code:{c}")).collect();
        if self.demographics {
            out.extend(DemographicEncoder::NAMES.iter().map(|s| s.to_string()));
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureVector {
    pub values: Vec<f64>,
    pub layout: FeatureLayout,
}

impl FeatureVector {
    pub fn with_demographics(mut self, demographics: [f64; 3]) -> Self {
        if !self.layout.demographics {
            self.values.extend(demographics);
            self.layout.demographics = true;
        }
        self
    }
}

/// Number of retained visits carrying each vocabulary code.
pub fn bag_of_codes(history: &PatientHistory, vocab: &CodeVocabulary) -> FeatureVector {
    let mut values = vec![0.0; vocab.len()];
    for code in history.visits.iter().flat_map(|v| v.codes.iter()) {
        if let Some(i) = vocab.index_of(code) {
            values[i] += 1.0;
        }
    }
    FeatureVector {
        values,
        layout: FeatureLayout {
            n_codes: vocab.len(),
            demographics: false,
        },
    }
}

/// The three logistic-regression feature sets.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LogisticVariant {
    Demographics,
    Codes,
    Both,
}

impl LogisticVariant {
    pub const ALL: [LogisticVariant; 3] = [LogisticVariant::Demographics, LogisticVariant::Codes, LogisticVariant::Both];

    pub fn as_str(self) -> &'static str {
        match self {
            LogisticVariant::Demographics => "lr_demographics",
            LogisticVariant::Codes => "lr_codes",
            LogisticVariant::Both => "lr_both",
        }
    }

    pub fn layout(self, n_codes: usize) -> FeatureLayout {
        FeatureLayout {
            n_codes: if self == LogisticVariant::Demographics { 0 } else { n_codes },
            demographics: self != LogisticVariant::Codes,
        }
    }
}

impl fmt::Display for LogisticVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for LogisticVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        LogisticVariant::ALL
            .into_iter()
            .find(|v| v.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown logistic variant '{s}'")))
    }
}

/// Feature vector of one patient in the variant's layout.
pub fn features(
    history: &PatientHistory,
    vocab: &CodeVocabulary,
    encoder: &DemographicEncoder,
    variant: LogisticVariant,
) -> FeatureVector {
    let base = match variant {
        LogisticVariant::Demographics => FeatureVector {
            values: Vec::new(),
            layout: variant.layout(0),
        },
        _ => bag_of_codes(history, vocab),
    };
    if variant == LogisticVariant::Codes {
        base
    } else {
        base.with_demographics(encoder.encode(history))
    }
}

/// A fitted logistic baseline together with what is needed to encode new
/// patients the same way.
#[derive(Debug, Clone, PartialEq)]
pub struct LogisticBaseline {
    pub variant: LogisticVariant,
    pub layout: FeatureLayout,
    pub encoder: DemographicEncoder,
    pub fit: LogitFit,
}

impl LogisticBaseline {
    pub fn predict(&self, histories: &[PatientHistory], vocab: &CodeVocabulary) -> Result<Vec<Prediction>> {
        let mut rows = Vec::with_capacity(histories.len());
        for h in histories {
            let f = features(h, vocab, &self.encoder, self.variant);
            if f.layout != self.layout {
                return Err(Error::Shape(format!(
                    "feature layout {:?} does not match the fitted {:?}",
                    f.layout, self.layout
                )));
            }
            rows.push(f.values);
        }
        let mut out: Vec<Prediction> = logit_predict(&self.fit, &rows)
            .into_iter()
            .zip(histories)
            .map(|((_, eta), h)| Prediction::from_linear(&h.patient_id, eta, h.label))
            .collect();
        out.sort_by(|a, b| a.patient_id.cmp(&b.patient_id));
        Ok(out)
    }

    /// `feature,beta,odds_ratio` rows.
    pub fn coefficients_csv(&self, vocab: &CodeVocabulary) -> String {
        coefficients_csv(&self.fit, &self.layout.names(vocab))
    }
}

/// Fits one logistic baseline on the training histories; demographics are
/// standardised with statistics of the same histories.
pub fn fit_logistic_baseline(
    train: &[PatientHistory],
    vocab: &CodeVocabulary,
    variant: LogisticVariant,
    opts: &LogitOptions,
) -> Result<LogisticBaseline> {
    let encoder = DemographicEncoder::fit(train);
    let x: Vec<Vec<f64>> = train.iter().map(|h| features(h, vocab, &encoder, variant).values).collect();
    let y: Vec<f64> = train.iter().map(|h| f64::from(u8::from(h.label))).collect();
    let fit = logit_fit(&x, &y, None, opts)?;
    for w in &fit.warnings {
        log::warn!("{variant}: {w:?}");
    }
    Ok(LogisticBaseline {
        variant,
        layout: variant.layout(vocab.len()),
        encoder,
        fit,
    })
}
