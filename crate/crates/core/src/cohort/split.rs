use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{match_case_control, MatchPair, PatientHistory, DEFAULT_MAX_AGE_GAP};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SplitConfig {
    /// Fraction of patients held out for Test 1 + Test 2.
    pub test_fraction: f64,
    pub n_folds: usize,
    pub max_age_gap: u32,
}

impl Default for SplitConfig {
    fn default() -> Self {
        SplitConfig {
            test_fraction: 0.1,
            n_folds: 5,
            max_age_gap: DEFAULT_MAX_AGE_GAP,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CohortSplit {
    /// Matched cases and controls, sorted by patient id.
    pub matched_train: Vec<PatientHistory>,
    pub test1: Vec<PatientHistory>,
    pub test2: Vec<PatientHistory>,
    pub pairs: Vec<MatchPair>,
    pub unmatched_cases: Vec<String>,
    /// Fold index for every matched_train patient.
    pub fold_assignment: BTreeMap<String, usize>,
}

impl CohortSplit {
    /// `(train, validation)` for one cross-validation fold.
    pub fn fold(&self, fold: usize) -> (Vec<PatientHistory>, Vec<PatientHistory>) {
        self.matched_train
            .iter()
            .cloned()
            .partition(|h| self.fold_assignment[&h.patient_id] != fold)
    }

    pub fn n_folds(&self) -> usize {
        self.fold_assignment.values().max().map_or(0, |m| m + 1)
    }

    /// CSV manifest `patient_id,partition,fold,matched_to`, sorted by id.
    pub fn manifest_csv(&self) -> String {
        let mut partner: BTreeMap<&str, &str> = BTreeMap::new();
        for p in &self.pairs {
            partner.insert(&p.case_id, &p.control_id);
            partner.insert(&p.control_id, &p.case_id);
        }
        let mut rows: Vec<(&str, String)> = Vec::new();
        for h in &self.matched_train {
            let id = h.patient_id.as_str();
            rows.push((
                id,
                format!("train,{},{}", self.fold_assignment[id], partner[id]),
            ));
        }
        for (name, part) in [("test1", &self.test1), ("test2", &self.test2)] {
            for h in part {
                rows.push((&h.patient_id, format!("{name},,")));
            }
        }
        rows.sort();
        let mut out = String::from("patient_id,partition,fold,matched_to\n");
        for (id, rest) in rows {
            let _ = writeln!(out, "{id},{rest}");
        }
        out
    }

    /// Rebuilds a split from a manifest and the (already windowed and
    /// filtered) histories it was made from.
    pub fn from_manifest(histories: &[PatientHistory], manifest: &str) -> Result<CohortSplit> {
        let by_id: BTreeMap<&str, &PatientHistory> =
            histories.iter().map(|h| (h.patient_id.as_str(), h)).collect();
        let bad = |line: usize, column: usize, message: String| Error::Parse {
            file: "split manifest".into(),
            line,
            column,
            message,
        };
        let mut lines = manifest.lines().enumerate();
        if lines.next().map(|(_, l)| l) != Some("patient_id,partition,fold,matched_to") {
            return Err(bad(1, 1, "missing manifest header".into()));
        }
        let mut split = CohortSplit {
            matched_train: vec![],
            test1: vec![],
            test2: vec![],
            pairs: vec![],
            unmatched_cases: vec![],
            fold_assignment: BTreeMap::new(),
        };
        for (i, line) in lines {
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != 4 {
                return Err(bad(i + 1, 1, "expected 4 fields".into()));
            }
            let h = *by_id
                .get(f[0])
                .ok_or_else(|| bad(i + 1, 1, format!("unknown patient '{}'", f[0])))?;
            match f[1] {
                "train" => {
                    let fold = f[2]
                        .parse()
                        .map_err(|_| bad(i + 1, 3, format!("invalid fold '{}'", f[2])))?;
                    split.fold_assignment.insert(h.patient_id.clone(), fold);
                    split.matched_train.push(h.clone());
                    if h.label {
                        let control = by_id
                            .get(f[3])
                            .ok_or_else(|| bad(i + 1, 4, format!("unknown patient '{}'", f[3])))?;
                        split.pairs.push(MatchPair {
                            case_id: h.patient_id.clone(),
                            control_id: f[3].to_string(),
                            age_difference_years: h
                                .demographics
                                .birth_year
                                .abs_diff(control.demographics.birth_year),
                        });
                    }
                }
                "test1" => split.test1.push(h.clone()),
                "test2" => split.test2.push(h.clone()),
                other => return Err(bad(i + 1, 2, format!("unknown partition '{other}'"))),
            }
        }
        Ok(split)
    }
}

/// Stratified 10% hold-out, halved into Test 1 / Test 2, with the remaining
/// 90% matched one-to-one into the balanced training set and assigned to
/// cross-validation folds pair by pair.
pub fn split_cohort(histories: &[PatientHistory], seed: u64, config: &SplitConfig) -> Result<CohortSplit> {
    let n_cases = histories.iter().filter(|h| h.label).count();
    if histories.len() < 20 || n_cases == 0 {
        return Err(Error::CohortTooSmall(format!(
            "{} patients with {} cases (need at least 20 patients and one case)",
            histories.len(),
            n_cases
        )));
    }
    if !(0.0..1.0).contains(&config.test_fraction) {
        return Err(Error::Config(format!(
            "test fraction {} outside [0, 1)",
            config.test_fraction
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let mut sorted: Vec<&PatientHistory> = histories.iter().collect();
    sorted.sort_by(|a, b| a.patient_id.cmp(&b.patient_id));
    let (mut cases, mut controls): (Vec<&PatientHistory>, Vec<&PatientHistory>) =
        sorted.into_iter().partition(|h| h.label);
    cases.shuffle(&mut rng);
    controls.shuffle(&mut rng);

    let n_test_cases = (cases.len() as f64 * config.test_fraction).round() as usize;
    let n_test_controls = (controls.len() as f64 * config.test_fraction).round() as usize;
    let test_cases = &cases[..n_test_cases];
    let test_controls = &controls[..n_test_controls];

    // Test 1 takes the smaller half of the cases and the larger half of
    // the controls so the two halves differ by at most one patient.
    let c1 = n_test_cases / 2;
    let k1 = n_test_controls.div_ceil(2);
    let mut test1: Vec<PatientHistory> = test_cases[..c1]
        .iter()
        .chain(&test_controls[..k1])
        .map(|h| (*h).clone())
        .collect();
    let mut test2: Vec<PatientHistory> = test_cases[c1..]
        .iter()
        .chain(&test_controls[k1..])
        .map(|h| (*h).clone())
        .collect();
    test1.sort_by(|a, b| a.patient_id.cmp(&b.patient_id));
    test2.sort_by(|a, b| a.patient_id.cmp(&b.patient_id));

    let pool: Vec<PatientHistory> = cases[n_test_cases..]
        .iter()
        .chain(&controls[n_test_controls..])
        .map(|h| (*h).clone())
        .collect();
    let matched = match_case_control(&pool, config.max_age_gap);
    let in_pairs: BTreeSet<&str> = matched
        .pairs
        .iter()
        .flat_map(|p| [p.case_id.as_str(), p.control_id.as_str()])
        .collect();
    let mut matched_train: Vec<PatientHistory> = pool
        .iter()
        .filter(|h| in_pairs.contains(h.patient_id.as_str()))
        .cloned()
        .collect();
    matched_train.sort_by(|a, b| a.patient_id.cmp(&b.patient_id));

    let fold_assignment = make_cv_folds(&matched.pairs, config.n_folds, seed.wrapping_add(1));
    Ok(CohortSplit {
        matched_train,
        test1,
        test2,
        pairs: matched.pairs,
        unmatched_cases: matched.unmatched_cases,
        fold_assignment,
    })
}

/// Assigns whole matched pairs to `k` folds; fold sizes differ by at most
/// one pair.
pub fn make_cv_folds(pairs: &[MatchPair], k: usize, seed: u64) -> BTreeMap<String, usize> {
    assert!(k > 0, "need at least one fold");
    let mut order: Vec<&MatchPair> = pairs.iter().collect();
    order.sort_by(|a, b| a.case_id.cmp(&b.case_id));
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut folds = BTreeMap::new();
    for (r, p) in order.into_iter().enumerate() {
        folds.insert(p.case_id.clone(), r % k);
        folds.insert(p.control_id.clone(), r % k);
    }
    folds
}

#[cfg(test)]
mod tests {
    use chrono::NaiveDate;

    use super::*;
    use crate::cohort::{Demographics, Sex, Visit};

    fn pairs(n: usize) -> Vec<MatchPair> {
        (0..n)
            .map(|i| MatchPair {
                case_id: format!("C{i:03}"),
                control_id: format!("K{i:03}"),
                age_difference_years: 0,
            })
            .collect()
    }

    fn fold_pair_sizes(folds: &BTreeMap<String, usize>, k: usize) -> Vec<usize> {
        let mut sizes = vec![0; k];
        for (id, f) in folds {
            if id.starts_with('C') {
                sizes[*f] += 1;
            }
        }
        sizes
    }

    #[test]
    fn ten_pairs_five_folds() {
        let folds = make_cv_folds(&pairs(10), 5, 3);
        assert_eq!(fold_pair_sizes(&folds, 5), vec![2; 5]);
    }

    #[test]
    fn eleven_pairs_remainder() {
        let folds = make_cv_folds(&pairs(11), 5, 3);
        let mut sizes = fold_pair_sizes(&folds, 5);
        sizes.sort_unstable_by(|a, b| b.cmp(a));
        assert_eq!(sizes, vec![3, 2, 2, 2, 2]);
    }

    #[test]
    fn pair_members_share_fold() {
        let ps = pairs(23);
        let folds = make_cv_folds(&ps, 5, 9);
        for p in &ps {
            assert_eq!(folds[&p.case_id], folds[&p.control_id]);
        }
    }

    fn cohort(n: usize, n_cases: usize) -> Vec<PatientHistory> {
        (0..n)
            .map(|i| {
                let case = i < n_cases;
                PatientHistory {
                    patient_id: format!("P{i:05}"),
                    visits: vec![
                        Visit::new(NaiveDate::from_ymd_opt(2001, 1, 1).unwrap(), ["A"]),
                        Visit::new(NaiveDate::from_ymd_opt(2002, 1, 1).unwrap(), ["B"]),
                    ],
                    demographics: Demographics {
                        sex: if i % 2 == 0 { Sex::Female } else { Sex::Male },
                        birth_year: 1940 + (i % 7) as i32,
                        imd_quintile: (i % 5) as u8 + 1,
                    },
                    replacement_date: case.then(|| NaiveDate::from_ymd_opt(2010, 1, 1).unwrap()),
                    label: case,
                }
            })
            .collect()
    }

    #[test]
    fn thousand_patients_seventy_cases() {
        let split = split_cohort(&cohort(1000, 70), 5, &SplitConfig::default()).unwrap();
        let c1 = split.test1.iter().filter(|h| h.label).count();
        let c2 = split.test2.iter().filter(|h| h.label).count();
        assert_eq!(c1 + c2, 7);
        assert!((3..=4).contains(&c1) && (3..=4).contains(&c2));
        assert_eq!(split.test1.len(), 50);
        assert_eq!(split.test2.len(), 50);
        // 63 remaining cases, ample controls
        assert_eq!(split.matched_train.len(), 126);
        assert_eq!(split.fold_assignment.len(), 126);
    }

    #[test]
    fn split_is_deterministic_and_disjoint() {
        let h = cohort(400, 40);
        let a = split_cohort(&h, 11, &SplitConfig::default()).unwrap();
        let b = split_cohort(&h, 11, &SplitConfig::default()).unwrap();
        assert_eq!(a, b);
        let mut seen = BTreeSet::new();
        for p in a.matched_train.iter().chain(&a.test1).chain(&a.test2) {
            assert!(seen.insert(p.patient_id.clone()));
        }
    }

    #[test]
    fn too_small_cohorts_are_rejected() {
        assert!(matches!(
            split_cohort(&cohort(19, 5), 1, &SplitConfig::default()),
            Err(Error::CohortTooSmall(_))
        ));
        assert!(matches!(
            split_cohort(&cohort(100, 0), 1, &SplitConfig::default()),
            Err(Error::CohortTooSmall(_))
        ));
    }

    #[test]
    fn manifest_round_trip() {
        let h = cohort(300, 30);
        let split = split_cohort(&h, 2, &SplitConfig::default()).unwrap();
        let back = CohortSplit::from_manifest(&h, &split.manifest_csv()).unwrap();
        assert_eq!(back.matched_train, split.matched_train);
        assert_eq!(back.test1, split.test1);
        assert_eq!(back.test2, split.test2);
        assert_eq!(back.fold_assignment, split.fold_assignment);
        let mut a = split.pairs.clone();
        a.sort_by(|x, y| x.case_id.cmp(&y.case_id));
        assert_eq!(back.pairs, a);
    }
}
