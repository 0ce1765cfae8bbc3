use std::fmt::Write as _;

use chrono::NaiveDate;

use super::CodeVocabulary;
use crate::cohort::PatientHistory;
use crate::error::{Error, Result};

const DAYS_PER_MONTH: f64 = 30.44;

/// Elapsed time between two dates in mean-length months.
pub fn elapsed_months(from: NaiveDate, to: NaiveDate) -> f64 {
    debug_assert!(to >= from, "elapsed_months expects ordered dates");
    to.signed_duration_since(from).num_days() as f64 / DAYS_PER_MONTH
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TensorConfig {
    /// Number of time slots K.
    pub max_slots: usize,
    /// Cap the input at the `max_slots` most recent visits (at most
    /// `max_slots - 1` transitions) instead of the most recent
    /// `max_slots` transitions.
    pub strict_visit_cap: bool,
    /// Add zero-time edges between distinct codes of the same visit.
    pub intra_visit_edges: bool,
}

impl Default for TensorConfig {
    fn default() -> Self {
        TensorConfig {
            max_slots: 100,
            strict_visit_cap: false,
            intra_visit_edges: false,
        }
    }
}

/// One non-zero of the 3-tensor: an edge `src -> dst` in time slot `slot`
/// whose transition spans `months`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GraphEntry {
    pub src: u32,
    pub dst: u32,
    pub slot: u32,
    pub months: f64,
}

/// Coordinate-list V x V x K tensor for one patient. Entries are sorted by
/// `(slot, src, dst)` without duplicates; transitions are front-padded so
/// the latest always sits in slot `K - 1`.
#[derive(Debug, Clone, PartialEq)]
pub struct TemporalGraphTensor {
    pub entries: Vec<GraphEntry>,
    pub n_nodes: usize,
    pub n_slots: usize,
}

impl TemporalGraphTensor {
    pub fn empty(n_nodes: usize, n_slots: usize) -> Self {
        TemporalGraphTensor {
            entries: Vec::new(),
            n_nodes,
            n_slots,
        }
    }

    pub fn nnz(&self) -> usize {
        self.entries.len()
    }

    /// Sorted, distinct slots that hold at least one entry.
    pub fn occupied_slots(&self) -> Vec<usize> {
        let mut slots: Vec<usize> = self.entries.iter().map(|e| e.slot as usize).collect();
        slots.dedup();
        slots
    }

    /// Elapsed months for every entry, in entry order.
    pub fn months(&self) -> Vec<f64> {
        self.entries.iter().map(|e| e.months).collect()
    }

    /// Maps entries back to `(source code, target code, months)`.
    pub fn decode(&self, vocab: &CodeVocabulary) -> Vec<(String, String, f64)> {
        self.entries
            .iter()
            .map(|e| {
                (
                    vocab.code(e.src as usize).unwrap_or("?").to_string(),
                    vocab.code(e.dst as usize).unwrap_or("?").to_string(),
                    e.months,
                )
            })
            .collect()
    }

    /// Debug dump: header `V K n_entries`, then one `i j k t` line per entry.
    pub fn to_dump(&self) -> String {
        let mut out = format!("{} {} {}\n", self.n_nodes, self.n_slots, self.entries.len());
        for e in &self.entries {
            let _ = writeln!(out, "{} {} {} {}", e.src, e.dst, e.slot, e.months);
        }
        out
    }

    pub fn from_dump(text: &str) -> Result<Self> {
        let bad = |line: usize, msg: &str| Error::Parse {
            file: "tensor dump".into(),
            line,
            column: 1,
            message: msg.into(),
        };
        let mut lines = text.lines();
        let header: Vec<usize> = lines
            .next()
            .ok_or_else(|| bad(1, "missing header"))?
            .split_whitespace()
            .map(str::parse)
            .collect::<std::result::Result<_, _>>()
            .map_err(|_| bad(1, "bad header"))?;
        let [n_nodes, n_slots, n] = header[..] else {
            return Err(bad(1, "header needs V K n_entries"));
        };
        let mut entries = Vec::with_capacity(n);
        for (i, line) in lines.enumerate() {
            let f: Vec<&str> = line.split_whitespace().collect();
            if f.len() != 4 {
                return Err(bad(i + 2, "expected i j k t"));
            }
            let p = |s: &str| s.parse::<u32>().map_err(|_| bad(i + 2, "bad index"));
            entries.push(GraphEntry {
                src: p(f[0])?,
                dst: p(f[1])?,
                slot: p(f[2])?,
                months: f[3].parse().map_err(|_| bad(i + 2, "bad time"))?,
            });
        }
        if entries.len() != n {
            return Err(bad(1, "entry count mismatch"));
        }
        Ok(TemporalGraphTensor {
            entries,
            n_nodes,
            n_slots,
        })
    }
}

/// Builds the temporal graph for one patient.
///
/// Out-of-vocabulary codes are dropped first (a visit can vanish). Each
/// pair of consecutive visits is one transition carrying the cross product
/// of their codes; only the most recent transitions are kept and they fill
/// the last slots.
pub fn build_tensor(
    history: &PatientHistory,
    vocab: &CodeVocabulary,
    config: &TensorConfig,
) -> Result<TemporalGraphTensor> {
    let k = config.max_slots;
    if k == 0 {
        return Err(Error::Config("tensor needs at least one slot".into()));
    }
    let visits: Vec<(NaiveDate, Vec<u32>)> = history
        .visits
        .iter()
        .filter_map(|v| {
            let mut idx: Vec<u32> = v
                .codes
                .iter()
                .filter_map(|c| vocab.index_of(c).map(|i| i as u32))
                .collect();
            idx.sort_unstable();
            (!idx.is_empty()).then_some((v.date, idx))
        })
        .collect();
    if visits.len() < 2 {
        return Err(Error::InsufficientVisits(history.patient_id.clone()));
    }

    let max_transitions = if config.strict_visit_cap { k - 1 } else { k };
    let n_transitions = (visits.len() - 1).min(max_transitions);
    let first = visits.len() - 1 - n_transitions;
    let mut entries = Vec::new();
    for (r, pair) in visits[first..].windows(2).enumerate() {
        let slot = (k - n_transitions + r) as u32;
        let months = elapsed_months(pair[0].0, pair[1].0);
        for &src in &pair[0].1 {
            for &dst in &pair[1].1 {
                entries.push(GraphEntry {
                    src,
                    dst,
                    slot,
                    months,
                });
            }
        }
        if config.intra_visit_edges {
            for &src in &pair[1].1 {
                for &dst in pair[1].1.iter().filter(|&&d| d != src) {
                    entries.push(GraphEntry {
                        src,
                        dst,
                        slot,
                        months: 0.0,
                    });
                }
            }
        }
    }
    entries.sort_by_key(|e| (e.slot, e.src, e.dst));
    // a transition edge wins over a same-position intra-visit edge
    entries.dedup_by(|b, a| (a.slot, a.src, a.dst) == (b.slot, b.src, b.dst));
    Ok(TemporalGraphTensor {
        entries,
        n_nodes: vocab.len(),
        n_slots: k,
    })
}
