use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use super::config::RunConfig;
use crate::baselines::{
    encode_sequences, fit_logistic_baseline, train_sequence_model, LogisticVariant, LogitOptions, SequenceKind,
};
use crate::cohort::{
    apply_inclusion_criteria, apply_time_window, generate_synthetic_cohort, ingest_cohort, write_cohort_csv,
    CohortSplit, PatientHistory, Sex, DEMOGRAPHICS_FILE, EVENTS_FILE, OUTCOMES_FILE,
};
use crate::error::{Error, Result};
use crate::graph::{build_vocabulary, CodeVocabulary};
use crate::metrics::{
    calibration_slope_intercept, evaluate, predictions_csv, recalibrate_apply, recalibrate_fit,
    stratified_evaluation, MetricsReport, Prediction,
};
use crate::model::{
    apply_ablation, cross_validate, encode_pair, encode_patients, history_csv, load_checkpoint, model_vocabulary,
    predict, random_search, save_checkpoint, train_tgcnn, TgcnnModel, ABLATIONS,
};

pub const CONFIG_FILE: &str = "config.txt";
pub const SPLIT_FILE: &str = "split.csv";
pub const VOCAB_FILE: &str = "vocab.txt";
pub const COHORT_TABLE_FILE: &str = "cohort.csv";
pub const PREPARE_FILE: &str = "prepare.txt";
pub const CHECKPOINT_FILE: &str = "model.ckpt";
pub const HISTORY_FILE: &str = "history.csv";
pub const CV_FOLDS_FILE: &str = "cv_folds.csv";
pub const CV_TABLE_FILE: &str = "cv_table.csv";
pub const ABLATION_FILE: &str = "ablation.csv";
pub const SEARCH_FILE: &str = "search.csv";
pub const BEST_CONFIG_FILE: &str = "best_config.txt";
pub const RECAL_FILE: &str = "recalibration.txt";
pub const CURVE_BEFORE_FILE: &str = "curve_test2_before.csv";
pub const CURVE_AFTER_FILE: &str = "curve_test2_after.csv";
pub const SUBGROUPS_FILE: &str = "subgroups.csv";
pub const BASELINES_FILE: &str = "baselines.csv";
pub const REPORT_FILE: &str = "report.md";

/// Columns shared by the cross-validation and ablation tables.
pub const TABLE_COLUMNS: &str = "train_auroc,val_auroc,train_cslope,val_cslope";

pub(crate) fn write_file(dir: &Path, name: &str, contents: impl AsRef<[u8]>) -> Result<PathBuf> {
    let path = dir.join(name);
    fs::write(&path, contents).map_err(|e| Error::io(&path, e))?;
    Ok(path)
}

pub(crate) fn read_file(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Partition {
    Train,
    Test1,
    Test2,
}

impl Partition {
    pub fn as_str(self) -> &'static str {
        match self {
            Partition::Train => "train",
            Partition::Test1 => "test1",
            Partition::Test2 => "test2",
        }
    }
}

impl std::str::FromStr for Partition {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Partition::Train),
            "test1" => Ok(Partition::Test1),
            "test2" => Ok(Partition::Test2),
            _ => Err(Error::Config(format!("unknown partition '{s}', expected train, test1 or test2"))),
        }
    }
}

/// Windowed, filtered histories with their split and base vocabulary.
pub struct Prepared {
    pub histories: Vec<PatientHistory>,
    pub split: CohortSplit,
    pub vocab: CodeVocabulary,
}

impl Prepared {
    pub fn partition(&self, p: Partition) -> &[PatientHistory] {
        match p {
            Partition::Train => &self.split.matched_train,
            Partition::Test1 => &self.split.test1,
            Partition::Test2 => &self.split.test2,
        }
    }
}

/// A run directory and the configuration it belongs to.
pub struct Run {
    pub dir: PathBuf,
    pub config: RunConfig,
}

impl Run {
    /// Creates (or reopens) the run directory for `config` under `root` and
    /// records the resolved configuration in it.
    pub fn open(config: RunConfig, root: &Path) -> Result<Run> {
        let dir = config.run_dir(root);
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        write_file(&dir, CONFIG_FILE, config.to_text())?;
        Ok(Run { dir, config })
    }

    /// Reopens an existing run directory from its recorded configuration.
    pub fn reopen(dir: &Path) -> Result<Run> {
        let text = read_file(&dir.join(CONFIG_FILE))?;
        let mut config = RunConfig::default();
        config.apply_text(&text, CONFIG_FILE)?;
        Ok(Run {
            dir: dir.to_path_buf(),
            config,
        })
    }

    fn path(&self, name: &str) -> PathBuf {
        self.dir.join(name)
    }

    fn write(&self, name: &str, contents: impl AsRef<[u8]>) -> Result<PathBuf> {
        write_file(&self.dir, name, contents)
    }

    /// The cohort after the prediction window and inclusion rules.
    pub fn load_histories(&self) -> Result<Vec<PatientHistory>> {
        let c = &self.config;
        let raw = match &c.data_dir {
            Some(dir) => ingest_cohort(
                &dir.join(EVENTS_FILE),
                &dir.join(DEMOGRAPHICS_FILE),
                &dir.join(OUTCOMES_FILE),
                &c.period(),
            )?,
            None => generate_synthetic_cohort(&c.generator, c.seed())?,
        };
        Ok(apply_inclusion_criteria(
            raw.iter().map(|h| apply_time_window(h, c.horizon_months)).collect(),
        ))
    }

    /// Loads the split and vocabulary written by an earlier `prepare`, or
    /// computes and writes them.
    pub fn prepared(&self) -> Result<Prepared> {
        let histories = self.load_histories()?;
        let (split_path, vocab_path) = (self.path(SPLIT_FILE), self.path(VOCAB_FILE));
        if split_path.exists() && vocab_path.exists() {
            let split = CohortSplit::from_manifest(&histories, &read_file(&split_path)?)?;
            let vocab = CodeVocabulary::from_text(&read_file(&vocab_path)?)?;
            return Ok(Prepared {
                histories,
                split,
                vocab,
            });
        }
        let c = &self.config;
        let split = crate::cohort::split_cohort(&histories, c.seed(), &c.split)?;
        let vocab = build_vocabulary(&split.matched_train, c.vocab_size);
        let prepared = Prepared {
            histories,
            split,
            vocab,
        };
        self.write(SPLIT_FILE, prepared.split.manifest_csv())?;
        self.write(VOCAB_FILE, prepared.vocab.to_text())?;
        self.write(COHORT_TABLE_FILE, cohort_table(&prepared))?;
        self.write(PREPARE_FILE, prepare_summary(&prepared))?;
        Ok(prepared)
    }

    /// The trained model of this run, training it on first use. Fold 0 of
    /// the matched set serves as the early-stopping validation set.
    pub fn model(&self, prep: &Prepared) -> Result<TgcnnModel> {
        let ckpt = self.path(CHECKPOINT_FILE);
        if ckpt.exists() {
            let bytes = fs::read(&ckpt).map_err(|e| Error::io(&ckpt, e))?;
            return load_checkpoint(&bytes);
        }
        let c = &self.config;
        let vocab = model_vocabulary(&prep.vocab, &c.model)?;
        let (train_h, val_h) = prep.split.fold(0);
        let (train, val, encoder) = encode_pair(&train_h, &val_h, &vocab, &c.tensor)?;
        let fitted = train_tgcnn(&train, &val, &c.model, encoder)?;
        self.write(HISTORY_FILE, history_csv(&fitted.history))?;
        self.write(CHECKPOINT_FILE, save_checkpoint(&fitted.model))?;
        log::info!("trained model, best epoch {}", fitted.best_epoch);
        Ok(fitted.model)
    }

    pub fn predictions(&self, prep: &Prepared, model: &TgcnnModel, part: Partition) -> Result<Vec<Prediction>> {
        let vocab = model_vocabulary(&prep.vocab, &model.config)?;
        let encoded = encode_patients(prep.partition(part), &vocab, &self.config.tensor, &model.encoder)?;
        predict(model, &encoded)
    }

    pub fn evaluate(&self, part: Partition) -> Result<MetricsReport> {
        let prep = self.prepared()?;
        let model = self.model(&prep)?;
        let preds = self.predictions(&prep, &model, part)?;
        let report = evaluate(&preds, &self.config.eval_options());
        let name = part.as_str();
        self.write(&format!("predictions_{name}.csv"), predictions_csv(&preds))?;
        self.write(&format!("metrics_{name}.json"), report.to_json())?;
        self.write(&format!("metrics_{name}.csv"), report.to_csv())?;
        Ok(report)
    }

    /// Fits the recalibration on Test 1, applies it to Test 2 and writes
    /// the before/after reports and curves. Returns the recalibrated Test 2
    /// predictions.
    pub fn recalibrate(&self) -> Result<(Vec<Prediction>, Prepared)> {
        let prep = self.prepared()?;
        let model = self.model(&prep)?;
        let opts = self.config.eval_options();
        let test1 = self.predictions(&prep, &model, Partition::Test1)?;
        let test2 = self.predictions(&prep, &model, Partition::Test2)?;
        let t1 = calibration_slope_intercept(&test1)?;
        let recal = recalibrate_fit(&test1)?;
        let adjusted = recalibrate_apply(&recal, &test2);
        let before = evaluate(&test2, &opts);
        let after = evaluate(&adjusted, &opts);
        let mut summary = String::new();
        writeln!(summary, "a = {}", recal.a).unwrap();
        writeln!(summary, "b = {}", recal.b).unwrap();
        writeln!(summary, "test1_slope = {}", t1.slope).unwrap();
        writeln!(summary, "test1_slope_se = {}", t1.slope_se).unwrap();
        writeln!(summary, "test1_slope_z = {}", t1.slope_z()).unwrap();
        self.write(RECAL_FILE, summary)?;
        self.write("predictions_test2.csv", predictions_csv(&test2))?;
        self.write("predictions_test2_recalibrated.csv", predictions_csv(&adjusted))?;
        self.write("metrics_test2.json", before.to_json())?;
        self.write("metrics_test2.csv", before.to_csv())?;
        self.write("metrics_test2_recalibrated.json", after.to_json())?;
        self.write("metrics_test2_recalibrated.csv", after.to_csv())?;
        self.write(CURVE_BEFORE_FILE, before.curve.to_csv())?;
        self.write(CURVE_AFTER_FILE, after.curve.to_csv())?;
        Ok((adjusted, prep))
    }

    /// Subgroup reports on the recalibrated Test 2 predictions.
    pub fn stratify(&self) -> Result<BTreeMap<String, MetricsReport>> {
        let (preds, prep) = self.recalibrate()?;
        let opts = self.config.eval_options();
        let subgroups = stratified_evaluation(&preds, &prep.split.test2, &opts)?;
        let mut combined = evaluate(&preds, &opts);
        combined.subgroups = subgroups.clone();
        self.write(SUBGROUPS_FILE, combined.to_csv())?;
        self.write("subgroups.json", combined.to_json())?;
        Ok(subgroups)
    }

    pub fn cross_validate(&self) -> Result<String> {
        let prep = self.prepared()?;
        let c = &self.config;
        let cv = cross_validate(&prep.split, &prep.vocab, &c.tensor, &c.model)?;
        self.write(CV_FOLDS_FILE, cv.to_csv())?;
        let table = format!("model,{TABLE_COLUMNS}\ntgcnn,{}\n", cv.table_cells().join(","));
        self.write(CV_TABLE_FILE, &table)?;
        Ok(table)
    }

    /// Cross-validates every ablation variant; one table row per variant.
    pub fn ablate(&self) -> Result<String> {
        let prep = self.prepared()?;
        let c = &self.config;
        let mut table = format!("variant,{TABLE_COLUMNS}\n");
        for name in ABLATIONS {
            log::info!("ablation {name}");
            let variant = apply_ablation(&c.model, name)?;
            let cv = cross_validate(&prep.split, &prep.vocab, &c.tensor, &variant)?;
            writeln!(table, "{name},{}", cv.table_cells().join(",")).unwrap();
        }
        self.write(ABLATION_FILE, &table)?;
        Ok(table)
    }

    /// Random search; writes the trial table and a loadable configuration
    /// holding the winning hyperparameters.
    pub fn search(&self) -> Result<RunConfig> {
        let prep = self.prepared()?;
        let c = &self.config;
        let outcome = random_search(
            &prep.split,
            &prep.vocab,
            &c.tensor,
            &c.model,
            &Default::default(),
            c.search_trials,
            c.seed(),
        )?;
        self.write(SEARCH_FILE, outcome.to_csv())?;
        let mut best = c.clone();
        best.model = outcome.best_config().clone();
        self.write(BEST_CONFIG_FILE, best.to_text())?;
        Ok(best)
    }

    /// Logistic and recurrent comparison models, scored on Test 2.
    pub fn baselines(&self) -> Result<String> {
        let prep = self.prepared()?;
        let c = &self.config;
        let opts = c.eval_options();
        let mut rows: Vec<(String, MetricsReport)> = Vec::new();
        for variant in LogisticVariant::ALL {
            let m = fit_logistic_baseline(&prep.split.matched_train, &prep.vocab, variant, &LogitOptions::default())?;
            self.write(&format!("{variant}_coefficients.csv"), m.coefficients_csv(&prep.vocab))?;
            let preds = m.predict(&prep.split.test2, &prep.vocab)?;
            rows.push((variant.to_string(), evaluate(&preds, &opts)));
        }
        let (train_h, val_h) = prep.split.fold(0);
        for kind in [SequenceKind::Rnn, SequenceKind::Lstm] {
            let sc = c.sequence_config(kind);
            let train = encode_sequences(&train_h, &prep.vocab, sc.max_events);
            let val = encode_sequences(&val_h, &prep.vocab, sc.max_events);
            let fitted = train_sequence_model(&train, &val, prep.vocab.len(), &sc)?;
            let test = encode_sequences(&prep.split.test2, &prep.vocab, sc.max_events);
            rows.push((kind.to_string(), evaluate(&fitted.model.predict(&test)?, &opts)));
        }
        let mut table = String::from("model,auroc,auprc,calibration_slope,calibration_intercept\n");
        let fmt = |v: Option<f64>| v.map_or("undefined".to_string(), |x| format!("{x:.4}"));
        for (name, r) in &rows {
            let cells: Vec<String> = r.scalar_metrics().iter().map(|(_, v)| fmt(*v)).collect();
            writeln!(table, "{name},{}", cells.join(",")).unwrap();
        }
        self.write(BASELINES_FILE, &table)?;
        Ok(table)
    }
}

/// Writes a synthetic cohort as the three input CSVs.
pub fn generate(config: &RunConfig, out: &Path) -> Result<usize> {
    let cohort = generate_synthetic_cohort(&config.generator, config.seed())?;
    write_cohort_csv(out, &cohort)?;
    Ok(cohort.len())
}

/// Counts by sex and IMD quintile and age at prediction per partition, with
/// a closing row over all three.
pub fn cohort_table(prep: &Prepared) -> String {
    let mut out =
        String::from("partition,n,cases,controls,female,male,age_mean,age_sd,imd1,imd2,imd3,imd4,imd5\n");
    let parts = [Partition::Train, Partition::Test1, Partition::Test2];
    let all: Vec<PatientHistory> = parts.iter().flat_map(|p| prep.partition(*p).to_vec()).collect();
    let mut row = |name: &str, hs: &[PatientHistory]| {
        let cases = hs.iter().filter(|h| h.label).count();
        let female = hs.iter().filter(|h| h.demographics.sex == Sex::Female).count();
        let ages: Vec<f64> = hs.iter().filter_map(|h| h.age_at_prediction()).map(f64::from).collect();
        let (mean, sd) = crate::model::mean_sd(&ages);
        let mut imd = [0usize; 5];
        for h in hs {
            imd[usize::from(h.demographics.imd_quintile.clamp(1, 5)) - 1] += 1;
        }
        let imd: Vec<String> = imd.iter().map(ToString::to_string).collect();
        writeln!(
            out,
            "{name},{},{cases},{},{female},{},{mean:.2},{sd:.2},{}",
            hs.len(),
            hs.len() - cases,
            hs.len() - female,
            imd.join(",")
        )
        .unwrap();
    };
    for p in parts {
        row(p.as_str(), prep.partition(p));
    }
    row("total", &all);
    out
}

fn prepare_summary(prep: &Prepared) -> String {
    let s = &prep.split;
    let (cases, _) = crate::cohort::label_counts(&prep.histories);
    let gaps: Vec<f64> = s.pairs.iter().map(|p| f64::from(p.age_difference_years)).collect();
    let mut out = String::new();
    writeln!(out, "included = {}", prep.histories.len()).unwrap();
    writeln!(out, "included_cases = {cases}").unwrap();
    writeln!(out, "matched_pairs = {}", s.pairs.len()).unwrap();
    writeln!(out, "unmatched_cases = {}", s.unmatched_cases.len()).unwrap();
    writeln!(out, "mean_age_gap = {:.4}", crate::model::mean_sd(&gaps).0).unwrap();
    writeln!(out, "test1 = {}", s.test1.len()).unwrap();
    writeln!(out, "test2 = {}", s.test2.len()).unwrap();
    writeln!(out, "vocabulary = {}", prep.vocab.len()).unwrap();
    writeln!(out, "vocabulary_coverage = {:.4}", prep.vocab.coverage()).unwrap();
    out
}
