use std::collections::BTreeSet;

use chrono::{Datelike, Days, Months, NaiveDate};
use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::Poisson;

use super::{AnalysisPeriod, Demographics, PatientHistory, Sex, Visit};
use crate::error::{Error, Result};
use crate::graph::PRESCRIPTION_CODES;

/// Codes whose frequency rises ahead of a replacement: hip pain, hip
/// osteoarthritis, hip imaging.
pub const SIGNAL_CODES: [&str; 3] = ["HIPPAIN", "HIPOA", "HIPXRAY"];

const MAX_CODES_PER_VISIT: usize = 10;
const CONTROL_SIGNAL_RATE: f64 = 0.02;

#[derive(Debug, Clone, PartialEq)]
pub struct GenConfig {
    pub n_patients: usize,
    pub case_prevalence: f64,
    /// Number of background (non-signal) codes.
    pub vocabulary_size: usize,
    pub mean_visits: f64,
    pub mean_codes_per_visit: f64,
    pub period: AnalysisPeriod,
    /// Peak per-visit probability of a signal code for cases.
    pub signal_strength: f64,
    pub prescription_rate: f64,
    /// Fraction of controls whose records stop early.
    pub deceased_fraction: f64,
}

impl Default for GenConfig {
    fn default() -> Self {
        GenConfig {
            n_patients: 1000,
            case_prevalence: 0.07,
            vocabulary_size: 200,
            mean_visits: 20.0,
            mean_codes_per_visit: 1.36,
            period: AnalysisPeriod::default(),
            signal_strength: 0.6,
            prescription_rate: 0.05,
            deceased_fraction: 0.00007,
        }
    }
}

impl GenConfig {
    fn validate(&self) -> Result<()> {
        if !(self.case_prevalence > 0.0 && self.case_prevalence < 1.0) {
            return Err(Error::Config(format!(
                "case prevalence {} must lie in (0, 1)",
                self.case_prevalence
            )));
        }
        if self.vocabulary_size == 0 {
            return Err(Error::Config("vocabulary size must be positive".into()));
        }
        if self.mean_codes_per_visit < 1.0 {
            return Err(Error::Config("mean codes per visit must be at least 1".into()));
        }
        if self.mean_visits < 2.0 {
            return Err(Error::Config("mean visits must be at least 2".into()));
        }
        for (name, p) in [
            ("signal strength", self.signal_strength),
            ("prescription rate", self.prescription_rate),
            ("deceased fraction", self.deceased_fraction),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::Config(format!("{name} {p} outside [0, 1]")));
            }
        }
        let span = self.period.end.signed_duration_since(self.period.start).num_days();
        if span < 6 * 366 {
            return Err(Error::Config("analysis period must cover at least six years".into()));
        }
        Ok(())
    }
}

struct Sampler {
    codes: Vec<String>,
    background: WeightedIndex<f64>,
    extra_codes: Poisson<f64>,
}

impl Sampler {
    fn new(config: &GenConfig) -> Self {
        let codes: Vec<String> = (0..config.vocabulary_size).map(|i| format!("C{i:04}")).collect();
        // Zipf-like background frequencies
        let weights: Vec<f64> = (0..codes.len()).map(|r| 1.0 / ((r + 1) as f64).powf(1.1)).collect();
        let extra = (config.mean_codes_per_visit - 1.0).max(1e-9);
        Sampler {
            codes,
            background: WeightedIndex::new(weights).expect("positive weights"),
            extra_codes: Poisson::new(extra).expect("positive rate"),
        }
    }

    fn visit_codes(&self, rng: &mut ChaCha8Rng) -> BTreeSet<String> {
        let n = (1 + self.extra_codes.sample(rng) as usize)
            .min(MAX_CODES_PER_VISIT)
            .min(self.codes.len());
        let mut out = BTreeSet::new();
        while out.len() < n {
            out.insert(self.codes[self.background.sample(rng)].clone());
        }
        out
    }
}

fn add_days(d: NaiveDate, days: i64) -> NaiveDate {
    if days >= 0 {
        d + Days::new(days as u64)
    } else {
        d - Days::new((-days) as u64)
    }
}

fn uniform_date(rng: &mut ChaCha8Rng, from: NaiveDate, to: NaiveDate) -> NaiveDate {
    let span = to.signed_duration_since(from).num_days().max(1);
    add_days(from, rng.random_range(0..span))
}

/// Generates a seeded synthetic cohort with a planted pre-replacement
/// signal.
///
/// The case count is exactly `round(n * prevalence)`. Case visits carry
/// hip-pain / hip-OA / imaging codes with a probability that rises towards
/// the replacement date, and cases get extra visits in the years before it.
/// Controls draw the same codes at a low background rate.
pub fn generate_synthetic_cohort(config: &GenConfig, seed: u64) -> Result<Vec<PatientHistory>> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let sampler = Sampler::new(config);
    let period = config.period;
    let period_days = period.end.signed_duration_since(period.start).num_days();

    let n = config.n_patients;
    let n_cases = (n as f64 * config.case_prevalence).round() as usize;
    let mut is_case = vec![false; n];
    is_case[..n_cases].iter_mut().for_each(|c| *c = true);
    is_case.shuffle(&mut rng);

    let base_visits = Poisson::new(config.mean_visits - 2.0).ok();
    let extra_visits = Poisson::new(4.0 * config.signal_strength.max(0.05)).expect("positive rate");
    let width = n.to_string().len().max(6);

    let mut out = Vec::with_capacity(n);
    for (i, &case) in is_case.iter().enumerate() {
        let sex = if rng.random_bool(0.5) {
            Sex::Female
        } else {
            Sex::Male
        };
        let imd_quintile = rng.random_range(1..=5u8);
        let entry = add_days(period.start, rng.random_range(0..=(period_days * 3 / 10)));
        let age_at_entry = rng.random_range(40..=75);
        let birth_year = entry.year() - age_at_entry;

        let replacement_date = case.then(|| {
            let earliest = entry + Months::new(48);
            uniform_date(&mut rng, earliest, period.end)
        });
        let mut follow_up_end = replacement_date.unwrap_or(period.end);
        if !case && rng.random_bool(config.deceased_fraction) {
            follow_up_end = uniform_date(&mut rng, entry, period.end);
        }

        let n_visits = 2 + base_visits.as_ref().map_or(0, |p| p.sample(&mut rng) as usize);
        let mut dates: Vec<NaiveDate> = (0..n_visits)
            .map(|_| uniform_date(&mut rng, entry, follow_up_end))
            .collect();
        if let Some(rd) = replacement_date {
            for _ in 0..extra_visits.sample(&mut rng) as usize {
                // density rises towards the replacement date
                let u: f64 = rng.random();
                let days_before = (5.0 * 365.25 * u * u).round() as i64 + 1;
                let d = add_days(rd, -days_before);
                if d >= entry {
                    dates.push(d);
                }
            }
        }
        dates.sort_unstable();
        dates.dedup();

        let mut visits = Vec::with_capacity(dates.len());
        for date in dates {
            let mut codes = sampler.visit_codes(&mut rng);
            let signal = match replacement_date {
                Some(rd) => {
                    let years_before = rd.signed_duration_since(date).num_days() as f64 / 365.25;
                    let p = config.signal_strength * (-years_before / 3.0).exp();
                    rng.random_bool(p.clamp(0.0, 1.0)).then(|| {
                        if years_before < 3.0 && rng.random_bool(0.5) {
                            SIGNAL_CODES[1]
                        } else if rng.random_bool(0.2) {
                            SIGNAL_CODES[2]
                        } else {
                            SIGNAL_CODES[0]
                        }
                    })
                }
                None => rng
                    .random_bool(CONTROL_SIGNAL_RATE)
                    .then(|| SIGNAL_CODES[rng.random_range(0..SIGNAL_CODES.len())]),
            };
            if let Some(code) = signal {
                // the signal code takes the place of one background code
                let drop = codes.iter().nth(rng.random_range(0..codes.len())).cloned().unwrap();
                codes.remove(&drop);
                codes.insert(code.to_string());
                if case && rng.random_bool(0.5) {
                    let rx = PRESCRIPTION_CODES[rng.random_range(0..PRESCRIPTION_CODES.len())];
                    codes.insert(rx.to_string());
                }
            }
            if rng.random_bool(config.prescription_rate) {
                let rx = PRESCRIPTION_CODES[rng.random_range(0..PRESCRIPTION_CODES.len())];
                codes.insert(rx.to_string());
            }
            visits.push(Visit { date, codes });
        }

        out.push(PatientHistory {
            patient_id: format!("P{:0width$}", i + 1),
            visits,
            demographics: Demographics {
                sex,
                birth_year,
                imd_quintile,
            },
            replacement_date,
            label: case,
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::is_prescription_code;

    #[test]
    fn same_seed_same_cohort() {
        let config = GenConfig::default();
        let a = generate_synthetic_cohort(&config, 42).unwrap();
        let b = generate_synthetic_cohort(&config, 42).unwrap();
        assert_eq!(a, b);
        let c = generate_synthetic_cohort(&config, 43).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn balanced_prevalence_count() {
        let config = GenConfig {
            n_patients: 2000,
            case_prevalence: 0.5,
            ..GenConfig::default()
        };
        let cohort = generate_synthetic_cohort(&config, 1).unwrap();
        let cases = cohort.iter().filter(|h| h.label).count();
        assert!((980..=1020).contains(&cases), "{cases}");
    }

    #[test]
    fn mean_codes_per_visit_matches_target() {
        let config = GenConfig {
            n_patients: 600,
            ..GenConfig::default()
        };
        let cohort = generate_synthetic_cohort(&config, 8).unwrap();
        let visits: Vec<&Visit> = cohort.iter().flat_map(|h| &h.visits).take(10_000).collect();
        assert_eq!(visits.len(), 10_000);
        // prescription codes are separate predictors, not Read Codes
        let codes: usize = visits
            .iter()
            .map(|v| v.codes.iter().filter(|c| !is_prescription_code(c)).count())
            .sum();
        let mean = codes as f64 / visits.len() as f64;
        assert!((1.2..=1.5).contains(&mean), "{mean}");
    }

    #[test]
    fn invalid_prevalence_is_a_config_error() {
        for p in [0.0, 1.0, -0.1, 1.5] {
            let config = GenConfig {
                case_prevalence: p,
                ..GenConfig::default()
            };
            assert!(matches!(generate_synthetic_cohort(&config, 1), Err(Error::Config(_))));
        }
    }

    #[test]
    fn demographics_within_bounds_and_dates_in_period() {
        let config = GenConfig::default();
        for h in generate_synthetic_cohort(&config, 3).unwrap() {
            assert!((1..=5).contains(&h.demographics.imd_quintile));
            let first = h.visits.first().unwrap().date;
            assert!(first.year() - h.demographics.birth_year >= 40);
            assert!((1999 - 75..=2004 - 40).contains(&h.demographics.birth_year));
            assert!(h.visits.windows(2).all(|w| w[0].date < w[1].date));
            for v in &h.visits {
                assert!(config.period.contains(v.date));
            }
            if let Some(rd) = h.replacement_date {
                assert!(config.period.contains(rd));
                assert!(h.visits.iter().all(|v| v.date < rd));
            }
        }
    }
}
