use std::collections::BTreeMap;

use serde::Serialize;

use super::{
    auprc, auroc, bootstrap_metrics, calibration_curve, calibration_slope_intercept, class_counts,
    CalibrationCurve, MetricSummary, Prediction, DEFAULT_BINS,
};
use crate::cohort::{PatientHistory, Sex};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EvalOptions {
    /// Bootstrap replicates; zero skips the bootstrap.
    pub bootstrap: usize,
    pub seed: u64,
    pub n_bins: usize,
}

impl Default for EvalOptions {
    fn default() -> Self {
        EvalOptions {
            bootstrap: super::DEFAULT_BOOTSTRAP,
            seed: 0,
            n_bins: DEFAULT_BINS,
        }
    }
}

/// Metrics of one set of predictions. `None` marks a metric that is
/// undefined for this set (for example a subgroup with a single class).
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetricsReport {
    pub n: usize,
    pub n_positive: usize,
    pub auroc: Option<f64>,
    pub auprc: Option<f64>,
    pub calibration_slope: Option<f64>,
    pub calibration_intercept: Option<f64>,
    pub curve: CalibrationCurve,
    pub bootstrap: BTreeMap<String, MetricSummary>,
    pub subgroups: BTreeMap<String, MetricsReport>,
}

impl MetricsReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serialises") + "\n"
    }

    /// Flat `metric,value,sd,ci_low,ci_high,subgroup` table, overall rows
    /// first under subgroup `all`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("metric,value,sd,ci_low,ci_high,subgroup\n");
        self.csv_rows("all", &mut out);
        for (name, sub) in &self.subgroups {
            sub.csv_rows(name, &mut out);
        }
        out
    }

    fn csv_rows(&self, subgroup: &str, out: &mut String) {
        let fmt = |v: Option<f64>| v.map_or("undefined".to_string(), |x| x.to_string());
        out.push_str(&format!("n,{},,,,{subgroup}\n", self.n));
        out.push_str(&format!("n_positive,{},,,,{subgroup}\n", self.n_positive));
        for (name, value) in self.scalar_metrics() {
            match self.bootstrap.get(name) {
                Some(s) => out.push_str(&format!(
                    "{name},{},{},{},{},{subgroup}\n",
                    fmt(value),
                    s.sd,
                    s.ci_low,
                    s.ci_high
                )),
                None => out.push_str(&format!("{name},{},,,,{subgroup}\n", fmt(value))),
            }
        }
    }

    pub fn scalar_metrics(&self) -> [(&'static str, Option<f64>); 4] {
        [
            ("auroc", self.auroc),
            ("auprc", self.auprc),
            ("calibration_slope", self.calibration_slope),
            ("calibration_intercept", self.calibration_intercept),
        ]
    }
}

/// Point metrics, calibration curve and (optionally) bootstrap summaries.
pub fn evaluate(predictions: &[Prediction], options: &EvalOptions) -> MetricsReport {
    let (n_positive, n_negative) = class_counts(predictions.iter().map(|p| p.label));
    let calibration = calibration_slope_intercept(predictions).ok();
    let bootstrap = if options.bootstrap > 0 && n_positive > 0 && n_negative > 0 {
        bootstrap_metrics(predictions, options.bootstrap, options.seed).unwrap_or_default()
    } else {
        BTreeMap::new()
    };
    MetricsReport {
        n: predictions.len(),
        n_positive,
        auroc: auroc(predictions).ok(),
        auprc: auprc(predictions).ok(),
        calibration_slope: calibration.map(|c| c.slope),
        calibration_intercept: calibration.map(|c| c.intercept),
        curve: calibration_curve(predictions, options.n_bins),
        bootstrap,
        subgroups: BTreeMap::new(),
    }
}

/// Age bands at the prediction date, left-closed. Ages below 40 fall in the
/// first band.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum AgeBand {
    Under60,
    From60To70,
    From70,
}

impl AgeBand {
    pub fn of(age: i32) -> AgeBand {
        match age {
            a if a < 60 => AgeBand::Under60,
            a if a < 70 => AgeBand::From60To70,
            _ => AgeBand::From70,
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            AgeBand::Under60 => "40-60",
            AgeBand::From60To70 => "60-70",
            AgeBand::From70 => "70+",
        }
    }
}

/// One stratum along one of the three axes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Subgroup {
    Sex(Sex),
    Age(AgeBand),
    Imd(u8),
}

impl Subgroup {
    pub fn all() -> Vec<Subgroup> {
        let mut out = vec![Subgroup::Sex(Sex::Female), Subgroup::Sex(Sex::Male)];
        out.extend([AgeBand::Under60, AgeBand::From60To70, AgeBand::From70].map(Subgroup::Age));
        out.extend((1..=5).map(Subgroup::Imd));
        out
    }

    pub fn name(self) -> String {
        match self {
            Subgroup::Sex(Sex::Female) => "sex=female".into(),
            Subgroup::Sex(Sex::Male) => "sex=male".into(),
            Subgroup::Age(b) => format!("age={}", b.label()),
            Subgroup::Imd(q) => format!("imd={q}"),
        }
    }

    pub fn contains(self, history: &PatientHistory) -> bool {
        let d = &history.demographics;
        match self {
            Subgroup::Sex(s) => d.sex == s,
            Subgroup::Age(b) => history.age_at_prediction().map(AgeBand::of) == Some(b),
            Subgroup::Imd(q) => d.imd_quintile == q,
        }
    }
}

/// A report per sex, age band and IMD quintile. Every prediction must have
/// a matching history.
pub fn stratified_evaluation(
    predictions: &[Prediction],
    histories: &[PatientHistory],
    options: &EvalOptions,
) -> Result<BTreeMap<String, MetricsReport>> {
    let by_id: BTreeMap<&str, &PatientHistory> =
        histories.iter().map(|h| (h.patient_id.as_str(), h)).collect();
    let mut rows = Vec::with_capacity(predictions.len());
    for p in predictions {
        let h = by_id.get(p.patient_id.as_str()).ok_or_else(|| Error::UnknownPatient {
            file: "predictions".into(),
            line: 0,
            patient_id: p.patient_id.clone(),
        })?;
        rows.push((p, *h));
    }
    Ok(Subgroup::all()
        .into_iter()
        .map(|g| {
            let subset: Vec<Prediction> = rows
                .iter()
                .filter(|(_, h)| g.contains(h))
                .map(|(p, _)| (*p).clone())
                .collect();
            (g.name(), evaluate(&subset, options))
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cohort::{Demographics, Visit};
    use chrono::NaiveDate;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn history(id: &str, sex: Sex, age: i32, imd: u8) -> PatientHistory {
        let date = NaiveDate::from_ymd_opt(2010, 6, 1).unwrap();
        PatientHistory {
            patient_id: id.into(),
            visits: vec![Visit::new(date, ["A"])],
            demographics: Demographics {
                sex,
                birth_year: 2010 - age,
                imd_quintile: imd,
            },
            replacement_date: None,
            label: false,
        }
    }

    fn cohort(n: usize, only_female: bool) -> (Vec<Prediction>, Vec<PatientHistory>) {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let mut preds = Vec::new();
        let mut hist = Vec::new();
        for i in 0..n {
            let id = format!("P{i:04}");
            let sex = if only_female || i % 2 == 0 { Sex::Female } else { Sex::Male };
            hist.push(history(&id, sex, rng.random_range(40..85), rng.random_range(1..=5)));
            preds.push(Prediction::from_linear(id, rng.random_range(-2.0..2.0), i % 3 == 0));
        }
        (preds, hist)
    }

    #[test]
    fn age_band_boundaries() {
        assert_eq!(AgeBand::of(59), AgeBand::Under60);
        assert_eq!(AgeBand::of(60), AgeBand::From60To70);
        assert_eq!(AgeBand::of(69), AgeBand::From60To70);
        assert_eq!(AgeBand::of(70), AgeBand::From70);
        assert_eq!(AgeBand::of(35), AgeBand::Under60);
    }

    #[test]
    fn missing_sex_group_is_undefined() {
        let (p, h) = cohort(60, true);
        let opts = EvalOptions { bootstrap: 0, ..Default::default() };
        let groups = stratified_evaluation(&p, &h, &opts).unwrap();
        let male = &groups["sex=male"];
        assert_eq!(male.n, 0);
        assert_eq!(male.auroc, None);
        assert!(male.to_csv().contains("auroc,undefined,,,,all"));
        assert!(groups["sex=female"].auroc.is_some());
    }

    #[test]
    fn each_axis_partitions_the_cohort() {
        let (p, h) = cohort(200, false);
        let opts = EvalOptions { bootstrap: 0, ..Default::default() };
        let groups = stratified_evaluation(&p, &h, &opts).unwrap();
        for prefix in ["sex=", "age=", "imd="] {
            let total: usize = groups
                .iter()
                .filter(|(k, _)| k.starts_with(prefix))
                .map(|(_, r)| r.n)
                .sum();
            assert_eq!(total, 200, "{prefix}");
        }
        assert_eq!(groups.len(), 10);
    }

    #[test]
    fn unknown_patient_is_rejected() {
        let (p, h) = cohort(10, false);
        assert!(stratified_evaluation(&p, &h[1..], &EvalOptions::default()).is_err());
    }

    #[test]
    fn report_serialisation_is_stable() {
        let (p, _) = cohort(100, false);
        let opts = EvalOptions { bootstrap: 20, seed: 3, n_bins: 10 };
        let a = evaluate(&p, &opts);
        let b = evaluate(&p, &opts);
        assert_eq!(a.to_json(), b.to_json());
        let csv = a.to_csv();
        assert!(csv.starts_with("metric,value,sd,ci_low,ci_high,subgroup\nn,100,,,,all\n"));
        let row = csv.lines().find(|l| l.starts_with("auroc,")).unwrap();
        assert_eq!(row.split(',').count(), 6);
        assert!(!row.contains(",,"));
        let json: serde_json::Value = serde_json::from_str(&a.to_json()).unwrap();
        assert_eq!(json["n"], 100);
    }
}
