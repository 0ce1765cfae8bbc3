//! Patient cohorts: event ingestion, synthetic generation, the one-year
//! prediction window, inclusion rules, case-control matching and the
//! train / Test 1 / Test 2 / fold partitions.

mod ingest;
mod matching;
mod split;
mod synth;
mod window;

use std::collections::BTreeSet;

use chrono::{Datelike, NaiveDate};
use serde::{Deserialize, Serialize};

pub use ingest::{ingest_cohort, write_cohort_csv, EVENTS_FILE, DEMOGRAPHICS_FILE, OUTCOMES_FILE};
pub use matching::{match_case_control, MatchOutcome, MatchPair, DEFAULT_MAX_AGE_GAP};
pub use split::{make_cv_folds, split_cohort, CohortSplit, SplitConfig};
pub use synth::{generate_synthetic_cohort, GenConfig, SIGNAL_CODES};
pub use window::{apply_inclusion_criteria, apply_time_window, DEFAULT_HORIZON_MONTHS};

/// One coded event as it appears in `events.csv`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EventRecord {
    pub patient_id: String,
    pub date: NaiveDate,
    pub code: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Sex {
    Female,
    Male,
}

impl Sex {
    pub fn as_str(self) -> &'static str {
        match self {
            Sex::Female => "F",
            Sex::Male => "M",
        }
    }

    pub fn parse(s: &str) -> Option<Sex> {
        match s {
            "F" => Some(Sex::Female),
            "M" => Some(Sex::Male),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Demographics {
    pub sex: Sex,
    pub birth_year: i32,
    /// Index of Multiple Deprivation quintile, 1 = most deprived.
    pub imd_quintile: u8,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Visit {
    pub date: NaiveDate,
    pub codes: BTreeSet<String>,
}

impl Visit {
    pub fn new<I, S>(date: NaiveDate, codes: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        Visit {
            date,
            codes: codes.into_iter().map(Into::into).collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PatientHistory {
    pub patient_id: String,
    /// Sorted by date, one entry per calendar date.
    pub visits: Vec<Visit>,
    pub demographics: Demographics,
    pub replacement_date: Option<NaiveDate>,
    pub label: bool,
}

impl PatientHistory {
    /// Whole-year age on `date`, from the birth year alone.
    pub fn age_at(&self, date: NaiveDate) -> i32 {
        date.year() - self.demographics.birth_year
    }

    /// The date a prediction is made for this patient: the last retained visit.
    pub fn prediction_date(&self) -> Option<NaiveDate> {
        self.visits.last().map(|v| v.date)
    }

    pub fn age_at_prediction(&self) -> Option<i32> {
        self.prediction_date().map(|d| self.age_at(d))
    }

    pub fn n_events(&self) -> usize {
        self.visits.iter().map(|v| v.codes.len()).sum()
    }
}

/// Inclusive calendar range that events and outcomes must fall in.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AnalysisPeriod {
    pub start: NaiveDate,
    pub end: NaiveDate,
}

impl AnalysisPeriod {
    pub fn contains(&self, date: NaiveDate) -> bool {
        self.start <= date && date <= self.end
    }
}

impl Default for AnalysisPeriod {
    fn default() -> Self {
        AnalysisPeriod {
            start: NaiveDate::from_ymd_opt(1999, 4, 1).unwrap(),
            end: NaiveDate::from_ymd_opt(2014, 3, 31).unwrap(),
        }
    }
}

/// Counts of cases and controls in a list of histories.
pub fn label_counts(histories: &[PatientHistory]) -> (usize, usize) {
    let cases = histories.iter().filter(|h| h.label).count();
    (cases, histories.len() - cases)
}

/// Maps demographics to the three numeric model inputs: age at the
/// prediction date standardised with training-set moments, sex as 0 (female)
/// or 1 (male), and IMD quintile rescaled to `[0, 1]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DemographicEncoder {
    pub age_mean: f64,
    pub age_sd: f64,
}

impl DemographicEncoder {
    pub const WIDTH: usize = 3;
    pub const NAMES: [&'static str; 3] = ["age_std", "sex_male", "imd_scaled"];

    /// Fits the age moments on `train`. A constant age gives unit SD.
    pub fn fit(train: &[PatientHistory]) -> Self {
        let ages: Vec<f64> = train
            .iter()
            .filter_map(|h| h.age_at_prediction())
            .map(f64::from)
            .collect();
        if ages.is_empty() {
            return DemographicEncoder::default();
        }
        let n = ages.len() as f64;
        let mean = ages.iter().sum::<f64>() / n;
        let var = ages.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / n;
        let sd = if var > 0.0 { var.sqrt() } else { 1.0 };
        DemographicEncoder {
            age_mean: mean,
            age_sd: sd,
        }
    }

    pub fn encode(&self, history: &PatientHistory) -> [f64; 3] {
        let age = history
            .age_at_prediction()
            .map_or(0.0, |a| (f64::from(a) - self.age_mean) / self.age_sd);
        let d = &history.demographics;
        let sex = match d.sex {
            Sex::Female => 0.0,
            Sex::Male => 1.0,
        };
        [age, sex, (f64::from(d.imd_quintile) - 1.0) / 4.0]
    }
}

impl Default for DemographicEncoder {
    fn default() -> Self {
        DemographicEncoder {
            age_mean: 0.0,
            age_sd: 1.0,
        }
    }
}
