use std::collections::{BTreeMap, BTreeSet};

use chrono::Datelike;
use serde::{Deserialize, Serialize};

use super::{PatientHistory, Sex};

pub const DEFAULT_MAX_AGE_GAP: u32 = 5;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MatchPair {
    pub case_id: String,
    pub control_id: String,
    pub age_difference_years: u32,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct MatchOutcome {
    pub pairs: Vec<MatchPair>,
    pub unmatched_cases: Vec<String>,
}

/// Greedy one-to-one matching on exact sex and IMD quintile, nearest age.
///
/// Cases are visited in ascending id order. Both ages are taken at the
/// case's replacement date, so the age gap is the birth-year gap. Ties on
/// the gap go to the smaller control id, and a control is used at most once.
pub fn match_case_control(pool: &[PatientHistory], max_age_gap: u32) -> MatchOutcome {
    // (sex, imd) -> birth year -> unused control ids
    let mut strata: BTreeMap<(Sex, u8), BTreeMap<i32, BTreeSet<&str>>> = BTreeMap::new();
    for h in pool.iter().filter(|h| !h.label) {
        let d = &h.demographics;
        strata
            .entry((d.sex, d.imd_quintile))
            .or_default()
            .entry(d.birth_year)
            .or_default()
            .insert(h.patient_id.as_str());
    }

    let mut cases: Vec<&PatientHistory> = pool.iter().filter(|h| h.label).collect();
    cases.sort_by(|a, b| a.patient_id.cmp(&b.patient_id));

    let mut out = MatchOutcome::default();
    for case in cases {
        let d = &case.demographics;
        let chosen = case.replacement_date.and_then(|rd| {
            let by_year = strata.get_mut(&(d.sex, d.imd_quintile))?;
            let case_age = rd.year() - d.birth_year;
            for gap in 0..=max_age_gap as i32 {
                // control birth years giving |age difference| == gap
                let years = [d.birth_year - gap, d.birth_year + gap];
                let best = years
                    .iter()
                    .filter_map(|y| by_year.get(y).and_then(|s| s.first().map(|id| (*id, *y))))
                    .min();
                if let Some((id, year)) = best {
                    let ids = by_year.get_mut(&year).unwrap();
                    ids.remove(id);
                    if ids.is_empty() {
                        by_year.remove(&year);
                    }
                    let control_age = rd.year() - year;
                    return Some((id.to_string(), case_age.abs_diff(control_age)));
                }
            }
            None
        });
        match chosen {
            Some((control_id, age_difference_years)) => out.pairs.push(MatchPair {
                case_id: case.patient_id.clone(),
                control_id,
                age_difference_years,
            }),
            None => out.unmatched_cases.push(case.patient_id.clone()),
        }
    }
    if !out.unmatched_cases.is_empty() {
        log::info!(
            "{} of {} cases had no eligible control",
            out.unmatched_cases.len(),
            out.unmatched_cases.len() + out.pairs.len()
        );
    }
    out
}

#[cfg(test)]
mod tests {
    use chrono::NaiveDate;

    use super::*;
    use crate::cohort::{Demographics, Visit};

    fn person(id: &str, sex: Sex, imd: u8, age_2014: i32, case: bool) -> PatientHistory {
        let rd = NaiveDate::from_ymd_opt(2014, 1, 1).unwrap();
        PatientHistory {
            patient_id: id.into(),
            visits: vec![Visit::new(NaiveDate::from_ymd_opt(2005, 1, 1).unwrap(), ["A"])],
            demographics: Demographics {
                sex,
                birth_year: 2014 - age_2014,
                imd_quintile: imd,
            },
            replacement_date: case.then_some(rd),
            label: case,
        }
    }

    #[test]
    fn exact_match_has_zero_gap() {
        let pool = [
            person("C1", Sex::Female, 3, 70, true),
            person("K1", Sex::Female, 3, 70, false),
        ];
        let m = match_case_control(&pool, 5);
        assert_eq!(
            m.pairs,
            vec![MatchPair {
                case_id: "C1".into(),
                control_id: "K1".into(),
                age_difference_years: 0
            }]
        );
        assert!(m.unmatched_cases.is_empty());
    }

    #[test]
    fn sex_is_a_hard_constraint() {
        let pool = [
            person("C1", Sex::Female, 3, 70, true),
            person("K1", Sex::Male, 3, 70, false),
            person("K2", Sex::Male, 3, 71, false),
        ];
        let m = match_case_control(&pool, 5);
        assert!(m.pairs.is_empty());
        assert_eq!(m.unmatched_cases, vec!["C1".to_string()]);
    }

    #[test]
    fn greedy_order_matches_enumeration() {
        // Brute force over both assignments of two controls to two cases
        // following the greedy rule: first case takes the nearest control.
        let pool = [
            person("C1", Sex::Male, 1, 70, true),
            person("C2", Sex::Male, 1, 71, true),
            person("K1", Sex::Male, 1, 70, false),
            person("K2", Sex::Male, 1, 73, false),
        ];
        let m = match_case_control(&pool, 5);
        let got: Vec<(&str, &str, u32)> = m
            .pairs
            .iter()
            .map(|p| (p.case_id.as_str(), p.control_id.as_str(), p.age_difference_years))
            .collect();
        assert_eq!(got, [("C1", "K1", 0), ("C2", "K2", 2)]);
    }

    #[test]
    fn tie_goes_to_smaller_control_id() {
        let pool = [
            person("C1", Sex::Male, 1, 70, true),
            person("K9", Sex::Male, 1, 71, false),
            person("K2", Sex::Male, 1, 69, false),
        ];
        let m = match_case_control(&pool, 5);
        assert_eq!(m.pairs[0].control_id, "K2");
        assert_eq!(m.pairs[0].age_difference_years, 1);
    }

    #[test]
    fn gap_limit_leaves_case_unmatched() {
        let pool = [
            person("C1", Sex::Male, 1, 70, true),
            person("K1", Sex::Male, 1, 76, false),
        ];
        assert_eq!(match_case_control(&pool, 5).unmatched_cases.len(), 1);
        assert_eq!(match_case_control(&pool, 6).pairs.len(), 1);
    }

    #[test]
    fn controls_never_reused() {
        let pool = [
            person("C1", Sex::Male, 1, 70, true),
            person("C2", Sex::Male, 1, 70, true),
            person("K1", Sex::Male, 1, 70, false),
        ];
        let m = match_case_control(&pool, 5);
        assert_eq!(m.pairs.len(), 1);
        assert_eq!(m.unmatched_cases, vec!["C2".to_string()]);
    }
}
