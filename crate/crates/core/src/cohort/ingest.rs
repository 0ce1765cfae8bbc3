use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use chrono::NaiveDate;

use super::{AnalysisPeriod, Demographics, PatientHistory, Sex, Visit};
use crate::error::{Error, Result};

pub const EVENTS_FILE: &str = "events.csv";
pub const DEMOGRAPHICS_FILE: &str = "demographics.csv";
pub const OUTCOMES_FILE: &str = "outcomes.csv";

const EVENTS_HEADER: &str = "patient_id,date,code";
const DEMOGRAPHICS_HEADER: &str = "patient_id,sex,birth_year,imd_quintile";
const OUTCOMES_HEADER: &str = "patient_id,replacement_date";

struct CsvFile {
    name: String,
    text: String,
}

impl CsvFile {
    fn open(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(CsvFile {
            name: path.display().to_string(),
            text,
        })
    }

    fn err(&self, line: usize, column: usize, message: impl Into<String>) -> Error {
        Error::Parse {
            file: self.name.clone(),
            line,
            column,
            message: message.into(),
        }
    }

    /// Yields `(line_number, fields)` for every non-empty data row after
    /// checking the header.
    fn rows<'a>(
        &'a self,
        header: &str,
    ) -> Result<impl Iterator<Item = Result<(usize, Vec<&'a str>)>> + 'a> {
        let mut lines = self.text.lines().enumerate();
        match lines.next() {
            Some((_, h)) if h.trim_end_matches('\r') == header => {}
            _ => return Err(self.err(1, 1, format!("expected header '{header}'"))),
        }
        let width = header.split(',').count();
        Ok(lines
            .map(|(i, l)| (i + 1, l.trim_end_matches('\r')))
            .filter(|(_, l)| !l.trim().is_empty())
            .map(move |(lineno, l)| {
                let fields: Vec<&str> = l.split(',').map(str::trim).collect();
                if fields.len() != width {
                    let col = fields.len().min(width) + 1;
                    return Err(self.err(
                        lineno,
                        col,
                        format!("expected {width} fields, found {}", fields.len()),
                    ));
                }
                if let Some(col) = fields.iter().position(|f| f.is_empty()) {
                    return Err(self.err(lineno, col + 1, "empty field"));
                }
                Ok((lineno, fields))
            }))
    }

    fn date(&self, line: usize, column: usize, s: &str) -> Result<NaiveDate> {
        NaiveDate::parse_from_str(s, "%Y-%m-%d")
            .map_err(|_| self.err(line, column, format!("invalid date '{s}', expected YYYY-MM-DD")))
    }
}

/// Reads the three cohort CSVs into one history per demographics row,
/// sorted by patient id.
///
/// Events on the same date merge into one visit and duplicate
/// `(patient, date, code)` rows collapse. Events dated outside `period` are
/// dropped. A replacement date outside `period` leaves the patient
/// unlabelled.
pub fn ingest_cohort(
    events_path: &Path,
    demographics_path: &Path,
    outcomes_path: &Path,
    period: &AnalysisPeriod,
) -> Result<Vec<PatientHistory>> {
    let demo_file = CsvFile::open(demographics_path)?;
    let mut demographics: BTreeMap<String, Demographics> = BTreeMap::new();
    for row in demo_file.rows(DEMOGRAPHICS_HEADER)? {
        let (line, f) = row?;
        let sex = Sex::parse(f[1])
            .ok_or_else(|| demo_file.err(line, 2, format!("sex must be F or M, found '{}'", f[1])))?;
        let birth_year: i32 = f[2]
            .parse()
            .map_err(|_| demo_file.err(line, 3, format!("invalid birth year '{}'", f[2])))?;
        let imd_quintile: u8 = f[3]
            .parse()
            .ok()
            .filter(|q| (1..=5).contains(q))
            .ok_or_else(|| demo_file.err(line, 4, format!("IMD quintile must be 1-5, found '{}'", f[3])))?;
        if demographics
            .insert(
                f[0].to_string(),
                Demographics {
                    sex,
                    birth_year,
                    imd_quintile,
                },
            )
            .is_some()
        {
            return Err(demo_file.err(line, 1, format!("duplicate patient '{}'", f[0])));
        }
    }

    let events_file = CsvFile::open(events_path)?;
    let mut visits: BTreeMap<&str, BTreeMap<NaiveDate, BTreeSet<String>>> = BTreeMap::new();
    let mut dropped = 0usize;
    for row in events_file.rows(EVENTS_HEADER)? {
        let (line, f) = row?;
        let Some((pid, _)) = demographics.get_key_value(f[0]) else {
            return Err(Error::UnknownPatient {
                file: events_file.name.clone(),
                line,
                patient_id: f[0].to_string(),
            });
        };
        let date = events_file.date(line, 2, f[1])?;
        if !period.contains(date) {
            dropped += 1;
            continue;
        }
        visits
            .entry(pid.as_str())
            .or_default()
            .entry(date)
            .or_default()
            .insert(f[2].to_string());
    }
    if dropped > 0 {
        log::warn!("dropped {dropped} events outside the analysis period");
    }

    let outcomes_file = CsvFile::open(outcomes_path)?;
    let mut outcomes: BTreeMap<&str, NaiveDate> = BTreeMap::new();
    for row in outcomes_file.rows(OUTCOMES_HEADER)? {
        let (line, f) = row?;
        let Some((pid, _)) = demographics.get_key_value(f[0]) else {
            return Err(Error::UnknownPatient {
                file: outcomes_file.name.clone(),
                line,
                patient_id: f[0].to_string(),
            });
        };
        let date = outcomes_file.date(line, 2, f[1])?;
        // first recorded replacement is the outcome
        outcomes
            .entry(pid.as_str())
            .and_modify(|d| *d = (*d).min(date))
            .or_insert(date);
    }

    Ok(demographics
        .iter()
        .map(|(pid, demo)| {
            let visits = visits
                .remove(pid.as_str())
                .unwrap_or_default()
                .into_iter()
                .map(|(date, codes)| Visit { date, codes })
                .collect();
            let replacement_date = outcomes.get(pid.as_str()).copied();
            PatientHistory {
                patient_id: pid.clone(),
                visits,
                demographics: *demo,
                replacement_date,
                label: replacement_date.is_some_and(|d| period.contains(d)),
            }
        })
        .collect())
}

/// Writes histories as `events.csv`, `demographics.csv` and `outcomes.csv`
/// under `dir`. Output is sorted and byte-stable.
pub fn write_cohort_csv(dir: &Path, histories: &[PatientHistory]) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut sorted: Vec<&PatientHistory> = histories.iter().collect();
    sorted.sort_by(|a, b| a.patient_id.cmp(&b.patient_id));

    let mut events = String::from(EVENTS_HEADER);
    events.push('\n');
    let mut demo = String::from(DEMOGRAPHICS_HEADER);
    demo.push('\n');
    let mut outcomes = String::from(OUTCOMES_HEADER);
    outcomes.push('\n');
    for h in sorted {
        for v in &h.visits {
            for c in &v.codes {
                let _ = writeln!(events, "{},{},{}", h.patient_id, v.date.format("%Y-%m-%d"), c);
            }
        }
        let d = &h.demographics;
        let _ = writeln!(
            demo,
            "{},{},{},{}",
            h.patient_id,
            d.sex.as_str(),
            d.birth_year,
            d.imd_quintile
        );
        if let Some(rd) = h.replacement_date {
            let _ = writeln!(outcomes, "{},{}", h.patient_id, rd.format("%Y-%m-%d"));
        }
    }
    for (name, body) in [
        (EVENTS_FILE, events),
        (DEMOGRAPHICS_FILE, demo),
        (OUTCOMES_FILE, outcomes),
    ] {
        let path = dir.join(name);
        fs::write(&path, body).map_err(|e| Error::io(&path, e))?;
    }
    Ok(())
}
