use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use chrono::NaiveDate;
use sha2::{Digest, Sha256};

use crate::baselines::SequenceConfig;
use crate::cohort::{AnalysisPeriod, GenConfig, SplitConfig, DEFAULT_HORIZON_MONTHS};
use crate::error::{Error, Result};
use crate::graph::TensorConfig;
use crate::metrics::EvalOptions;
use crate::model::{ModelConfig, MODEL_KEYS};

/// Keys beyond the model configuration, in output order.
pub const RUN_KEYS: [&str; 23] = [
    "data_dir",
    "gen_n_patients",
    "gen_prevalence",
    "gen_vocabulary",
    "gen_mean_visits",
    "gen_codes_per_visit",
    "gen_signal_strength",
    "gen_prescription_rate",
    "gen_deceased_fraction",
    "period_start",
    "period_end",
    "horizon_months",
    "test_fraction",
    "n_folds",
    "max_age_gap",
    "vocab_size",
    "max_slots",
    "strict_visit_cap",
    "intra_visit_edges",
    "search_trials",
    "bootstrap",
    "n_bins",
    "seq_sizes",
];

/// Everything a run depends on. `seed` lives in the model configuration and
/// seeds generation, splitting, training and the bootstrap alike.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub model: ModelConfig,
    /// Cohort CSV directory; `None` generates a synthetic cohort.
    pub data_dir: Option<PathBuf>,
    pub generator: GenConfig,
    pub horizon_months: u32,
    pub split: SplitConfig,
    pub vocab_size: usize,
    pub tensor: TensorConfig,
    pub search_trials: usize,
    pub bootstrap: usize,
    pub n_bins: usize,
    /// Embedding size, hidden size and event cap of the sequence baselines.
    pub seq_sizes: (usize, usize, usize),
}

impl Default for RunConfig {
    fn default() -> Self {
        let seq = SequenceConfig::default();
        RunConfig {
            model: ModelConfig::default(),
            data_dir: None,
            generator: GenConfig::default(),
            horizon_months: DEFAULT_HORIZON_MONTHS,
            split: SplitConfig::default(),
            vocab_size: 512,
            tensor: TensorConfig::default(),
            search_trials: 20,
            bootstrap: crate::metrics::DEFAULT_BOOTSTRAP,
            n_bins: crate::metrics::DEFAULT_BINS,
            seq_sizes: (seq.embedding_dim, seq.hidden, seq.max_events),
        }
    }
}

fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("invalid value '{value}' for {key}")))
}

fn parse_date(key: &str, value: &str) -> Result<NaiveDate> {
    NaiveDate::parse_from_str(value, "%Y-%m-%d")
        .map_err(|_| Error::Config(format!("invalid date '{value}' for {key}, expected YYYY-MM-DD")))
}

impl RunConfig {
    pub fn seed(&self) -> u64 {
        self.model.seed
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        if MODEL_KEYS.contains(&key) {
            return self.model.set(key, value);
        }
        let g = &mut self.generator;
        match key {
            "data_dir" => self.data_dir = (!value.is_empty()).then(|| PathBuf::from(value)),
            "gen_n_patients" => g.n_patients = parse(key, value)?,
            "gen_prevalence" => g.case_prevalence = parse(key, value)?,
            "gen_vocabulary" => g.vocabulary_size = parse(key, value)?,
            "gen_mean_visits" => g.mean_visits = parse(key, value)?,
            "gen_codes_per_visit" => g.mean_codes_per_visit = parse(key, value)?,
            "gen_signal_strength" => g.signal_strength = parse(key, value)?,
            "gen_prescription_rate" => g.prescription_rate = parse(key, value)?,
            "gen_deceased_fraction" => g.deceased_fraction = parse(key, value)?,
            "period_start" => g.period.start = parse_date(key, value)?,
            "period_end" => g.period.end = parse_date(key, value)?,
            "horizon_months" => self.horizon_months = parse(key, value)?,
            "test_fraction" => self.split.test_fraction = parse(key, value)?,
            "n_folds" => self.split.n_folds = parse(key, value)?,
            "max_age_gap" => self.split.max_age_gap = parse(key, value)?,
            "vocab_size" => self.vocab_size = parse(key, value)?,
            "max_slots" => self.tensor.max_slots = parse(key, value)?,
            "strict_visit_cap" => self.tensor.strict_visit_cap = parse(key, value)?,
            "intra_visit_edges" => self.tensor.intra_visit_edges = parse(key, value)?,
            "search_trials" => self.search_trials = parse(key, value)?,
            "bootstrap" => self.bootstrap = parse(key, value)?,
            "n_bins" => self.n_bins = parse(key, value)?,
            "seq_sizes" => {
                let parts: Vec<usize> = value
                    .split(',')
                    .map(|p| parse(key, p.trim()))
                    .collect::<Result<_>>()?;
                let [e, h, m] = parts[..] else {
                    return Err(Error::Config(format!(
                        "seq_sizes takes embedding,hidden,max_events, found '{value}'"
                    )));
                };
                self.seq_sizes = (e, h, m);
            }
            _ => return Err(Error::Config(format!("unknown configuration key '{key}'"))),
        }
        Ok(())
    }

    pub fn get(&self, key: &str) -> Option<String> {
        if MODEL_KEYS.contains(&key) {
            return self.model.get(key);
        }
        let g = &self.generator;
        Some(match key {
            "data_dir" => self.data_dir.as_ref().map_or(String::new(), |p| p.display().to_string()),
            "gen_n_patients" => g.n_patients.to_string(),
            "gen_prevalence" => g.case_prevalence.to_string(),
            "gen_vocabulary" => g.vocabulary_size.to_string(),
            "gen_mean_visits" => g.mean_visits.to_string(),
            "gen_codes_per_visit" => g.mean_codes_per_visit.to_string(),
            "gen_signal_strength" => g.signal_strength.to_string(),
            "gen_prescription_rate" => g.prescription_rate.to_string(),
            "gen_deceased_fraction" => g.deceased_fraction.to_string(),
            "period_start" => g.period.start.to_string(),
            "period_end" => g.period.end.to_string(),
            "horizon_months" => self.horizon_months.to_string(),
            "test_fraction" => self.split.test_fraction.to_string(),
            "n_folds" => self.split.n_folds.to_string(),
            "max_age_gap" => self.split.max_age_gap.to_string(),
            "vocab_size" => self.vocab_size.to_string(),
            "max_slots" => self.tensor.max_slots.to_string(),
            "strict_visit_cap" => self.tensor.strict_visit_cap.to_string(),
            "intra_visit_edges" => self.tensor.intra_visit_edges.to_string(),
            "search_trials" => self.search_trials.to_string(),
            "bootstrap" => self.bootstrap.to_string(),
            "n_bins" => self.n_bins.to_string(),
            "seq_sizes" => {
                let (e, h, m) = self.seq_sizes;
                format!("{e},{h},{m}")
            }
            _ => return None,
        })
    }

    /// Applies `key = value` lines. Text after `#` is a comment; blank
    /// lines are skipped.
    pub fn apply_text(&mut self, text: &str, source: &str) -> Result<()> {
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| Error::Parse {
                file: source.to_string(),
                line: i + 1,
                column: 1,
                message: format!("expected 'key = value', found '{line}'"),
            })?;
            self.set(key.trim(), value.trim())?;
        }
        Ok(())
    }

    /// Every key with its value, model keys first, one `key = value` per
    /// line.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for key in MODEL_KEYS.iter().chain(RUN_KEYS.iter()) {
            writeln!(out, "{key} = {}", self.get(key).expect("listed key")).unwrap();
        }
        out
    }

    /// First 16 hex digits of the SHA-256 of [`RunConfig::to_text`].
    pub fn hash(&self) -> String {
        let digest = Sha256::digest(self.to_text().as_bytes());
        digest[..8].iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn run_dir(&self, root: &Path) -> PathBuf {
        root.join(format!("run-{}-seed{}", self.hash(), self.seed()))
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        if self.vocab_size == 0 || self.tensor.max_slots == 0 {
            return Err(Error::Config("vocab_size and max_slots must be positive".into()));
        }
        if self.model.filter_depth > self.tensor.max_slots {
            return Err(Error::Config(format!(
                "filter_depth {} exceeds max_slots {}",
                self.model.filter_depth, self.tensor.max_slots
            )));
        }
        if self.split.n_folds < 2 {
            return Err(Error::Config("n_folds must be at least 2".into()));
        }
        if self.n_bins == 0 {
            return Err(Error::Config("n_bins must be positive".into()));
        }
        Ok(())
    }

    pub fn period(&self) -> AnalysisPeriod {
        self.generator.period
    }

    pub fn eval_options(&self) -> EvalOptions {
        EvalOptions {
            bootstrap: self.bootstrap,
            seed: self.seed(),
            n_bins: self.n_bins,
        }
    }

    pub fn sequence_config(&self, kind: crate::baselines::SequenceKind) -> SequenceConfig {
        let (embedding_dim, hidden, max_events) = self.seq_sizes;
        SequenceConfig {
            kind,
            embedding_dim,
            hidden,
            max_events,
            lr: self.model.lr,
            lambda2: self.model.lambda2,
            batch_size: self.model.batch_size,
            max_epochs: self.model.max_epochs,
            patience: self.model.patience,
            seed: self.seed(),
        }
    }
}

/// Where configuration comes from, lowest precedence first: defaults, the
/// `RUN_SEED` environment variable, the config file, `--set` pairs, then
/// dedicated flags.
#[derive(Debug, Clone, Default)]
pub struct ConfigSources {
    pub file: Option<PathBuf>,
    pub env_seed: Option<String>,
    pub sets: Vec<(String, String)>,
    pub flags: Vec<(String, String)>,
}

pub fn load_config(sources: &ConfigSources) -> Result<RunConfig> {
    let mut config = RunConfig::default();
    if let Some(seed) = &sources.env_seed {
        config
            .set("seed", seed)
            .map_err(|_| Error::Config(format!("RUN_SEED '{seed}' is not a valid seed")))?;
    }
    if let Some(path) = &sources.file {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        config.apply_text(&text, &path.display().to_string())?;
    }
    for (k, v) in sources.sets.iter().chain(&sources.flags) {
        config.set(k, v)?;
    }
    if let Some(dir) = &config.data_dir {
        let resolved = fs::canonicalize(dir).map_err(|e| Error::io(dir, e))?;
        config.data_dir = Some(resolved);
    }
    config.validate()?;
    Ok(config)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn text_round_trip() {
        let mut c = RunConfig::default();
        c.set("lr", "0.005").unwrap();
        c.set("seq_sizes", "8, 12, 50").unwrap();
        c.set("period_end", "2013-12-31").unwrap();
        let mut back = RunConfig::default();
        back.apply_text(&c.to_text(), "x").unwrap();
        assert_eq!(back, c);
        assert_eq!(back.hash(), c.hash());
        assert_eq!(c.to_text().lines().count(), MODEL_KEYS.len() + RUN_KEYS.len());
    }

    #[test]
    fn comments_blank_lines_and_unknown_keys() {
        let mut c = RunConfig::default();
        c.apply_text("# header\n\nn_filters = 8 # inline\n", "f").unwrap();
        assert_eq!(c.model.n_filters, 8);
        assert!(matches!(c.apply_text("colour = blue\n", "f"), Err(Error::Config(_))));
        assert!(matches!(c.apply_text("just words\n", "f"), Err(Error::Parse { line: 1, .. })));
        assert!(c.set("n_folds", "many").is_err());
    }

    #[test]
    fn precedence() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.txt");
        fs::write(&path, "seed = 3\nlr = 0.01\nn_filters = 4\n").unwrap();
        let sources = ConfigSources {
            file: Some(path.clone()),
            env_seed: Some("99".into()),
            sets: vec![("lr".into(), "0.02".into())],
            flags: vec![("n_filters".into(), "6".into())],
        };
        let c = load_config(&sources).unwrap();
        assert_eq!((c.seed(), c.model.lr, c.model.n_filters), (3, 0.02, 6));
        let env_only = load_config(&ConfigSources {
            env_seed: Some("99".into()),
            ..Default::default()
        })
        .unwrap();
        assert_eq!(env_only.seed(), 99);
        let missing = load_config(&ConfigSources {
            file: Some(dir.path().join("nope.txt")),
            ..Default::default()
        });
        assert!(matches!(missing, Err(Error::Io { .. })));
    }

    #[test]
    fn run_dir_tracks_config_and_seed() {
        let a = RunConfig::default();
        let mut b = a.clone();
        b.set("seed", "1").unwrap();
        let root = Path::new("runs");
        assert_ne!(a.run_dir(root), b.run_dir(root));
        assert!(b.run_dir(root).to_string_lossy().ends_with("-seed1"));
        assert_eq!(a.hash().len(), 16);
    }

    #[test]
    fn validation_catches_depth_beyond_slots() {
        let mut c = RunConfig::default();
        c.set("max_slots", "2").unwrap();
        assert!(c.validate().is_err());
    }
}
