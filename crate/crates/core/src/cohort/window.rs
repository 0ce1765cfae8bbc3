use chrono::Months;

use super::PatientHistory;

pub const DEFAULT_HORIZON_MONTHS: u32 = 12;

/// Drops every case visit on or after `replacement_date - horizon_months`.
/// Controls pass through unchanged.
pub fn apply_time_window(history: &PatientHistory, horizon_months: u32) -> PatientHistory {
    assert!(horizon_months > 0, "horizon must be positive");
    let mut out = history.clone();
    match (history.label, history.replacement_date) {
        (true, Some(rd)) => {
            let cutoff = rd
                .checked_sub_months(Months::new(horizon_months))
                .unwrap_or(chrono::NaiveDate::MIN);
            out.visits.retain(|v| v.date < cutoff);
            out.label = true;
        }
        _ => out.label = false,
    }
    out
}

/// Keeps patients with at least two visits left after windowing.
pub fn apply_inclusion_criteria(histories: Vec<PatientHistory>) -> Vec<PatientHistory> {
    histories.into_iter().filter(|h| h.visits.len() >= 2).collect()
}
