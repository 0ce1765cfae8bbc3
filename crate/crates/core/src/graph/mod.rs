//! Code vocabulary and the per-patient sparse temporal-graph 3-tensor.

mod tensor;

use std::collections::{BTreeMap, HashMap};

pub use tensor::{build_tensor, elapsed_months, GraphEntry, TemporalGraphTensor, TensorConfig};

use crate::cohort::PatientHistory;
use crate::error::{Error, Result};

/// Prescription predictors, grouped by BNF section and prescription type:
/// opioids (04.07.02), non-opioid analgesics (04.07.01) and NSAIDs (10.01.01),
/// each split into acute and repeat.
pub const PRESCRIPTION_CODES: [&str; 6] = [
    "RX040702A",
    "RX040702R",
    "RX040701A",
    "RX040701R",
    "RX100101A",
    "RX100101R",
];

pub fn is_prescription_code(code: &str) -> bool {
    PRESCRIPTION_CODES.contains(&code)
}

/// Bijective code <-> node-index map, ranked by frequency (index 0 is the
/// most frequent code).
#[derive(Debug, Clone, PartialEq)]
pub struct CodeVocabulary {
    codes: Vec<String>,
    index: HashMap<String, usize>,
    coverage: f64,
    extended: bool,
}

impl CodeVocabulary {
    /// Builds a vocabulary from codes already in rank order.
    pub fn from_codes(codes: Vec<String>, coverage: f64) -> Result<Self> {
        let index: HashMap<String, usize> =
            codes.iter().enumerate().map(|(i, c)| (c.clone(), i)).collect();
        if index.len() != codes.len() {
            return Err(Error::Config("duplicate code in vocabulary".into()));
        }
        let extended = PRESCRIPTION_CODES.iter().all(|c| index.contains_key(*c));
        Ok(CodeVocabulary {
            codes,
            index,
            coverage,
            extended,
        })
    }

    pub fn len(&self) -> usize {
        self.codes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.codes.is_empty()
    }

    pub fn index_of(&self, code: &str) -> Option<usize> {
        self.index.get(code).copied()
    }

    pub fn code(&self, index: usize) -> Option<&str> {
        self.codes.get(index).map(String::as_str)
    }

    pub fn codes(&self) -> &[String] {
        &self.codes
    }

    /// Share of all Read Code occurrences covered by the kept codes.
    pub fn coverage(&self) -> f64 {
        self.coverage
    }

    pub fn has_prescriptions(&self) -> bool {
        self.extended
    }

    /// One code per line in index order, preceded by `# coverage=<f>`.
    pub fn to_text(&self) -> String {
        let mut out = format!("# coverage={}\n", self.coverage);
        for c in &self.codes {
            out.push_str(c);
            out.push('\n');
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut coverage = f64::NAN;
        let mut codes = Vec::new();
        for line in text.lines().filter(|l| !l.is_empty()) {
            match line.strip_prefix("# coverage=") {
                Some(v) => {
                    coverage = v
                        .parse()
                        .map_err(|_| Error::Config(format!("bad vocabulary coverage '{v}'")))?
                }
                None => codes.push(line.to_string()),
            }
        }
        Self::from_codes(codes, coverage)
    }
}

/// Keeps the `size` most frequent Read Codes (ties broken lexicographically)
/// and reports what fraction of occurrences they cover. Prescription codes
/// are excluded here; see [`extend_vocabulary_with_prescriptions`].
pub fn build_vocabulary(histories: &[PatientHistory], size: usize) -> CodeVocabulary {
    assert!(size >= 1, "vocabulary size must be positive");
    let mut counts: BTreeMap<&str, u64> = BTreeMap::new();
    for code in histories
        .iter()
        .flat_map(|h| &h.visits)
        .flat_map(|v| &v.codes)
        .filter(|c| !is_prescription_code(c))
    {
        *counts.entry(code.as_str()).or_default() += 1;
    }
    if counts.len() < size {
        log::warn!(
            "only {} distinct codes available for a vocabulary of {size}",
            counts.len()
        );
    }
    let total: u64 = counts.values().sum();
    let mut ranked: Vec<(&str, u64)> = counts.into_iter().collect();
    // BTreeMap order is lexicographic, and the sort is stable
    ranked.sort_by_key(|&(_, n)| std::cmp::Reverse(n));
    ranked.truncate(size);
    let kept: u64 = ranked.iter().map(|(_, n)| n).sum();
    let coverage = if total == 0 {
        0.0
    } else {
        kept as f64 / total as f64
    };
    CodeVocabulary::from_codes(ranked.into_iter().map(|(c, _)| c.to_string()).collect(), coverage)
        .expect("codes are distinct")
}

/// Appends the six prescription nodes.
pub fn extend_vocabulary_with_prescriptions(vocab: &CodeVocabulary) -> Result<CodeVocabulary> {
    if vocab.extended || PRESCRIPTION_CODES.iter().any(|c| vocab.index.contains_key(*c)) {
        return Err(Error::AlreadyExtended);
    }
    let mut codes = vocab.codes.clone();
    codes.extend(PRESCRIPTION_CODES.iter().map(|c| c.to_string()));
    CodeVocabulary::from_codes(codes, vocab.coverage)
}
