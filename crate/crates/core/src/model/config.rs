use std::fmt::Write;
use std::str::FromStr;

use crate::error::{Error, Result};

/// Architecture switches, sizes and optimisation settings of a TG-CNN.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    /// Trainable decay rate; when off the rate is frozen at one.
    pub use_gamma: bool,
    /// Exponential transform of elapsed time; when off raw months are used.
    pub use_exp: bool,
    pub use_demographics: bool,
    pub use_two_streams: bool,
    pub use_graph_reg: bool,
    pub use_l2: bool,
    pub use_l1: bool,
    /// LSTM over conv positions; when off positions are mean-pooled.
    pub use_lstm: bool,
    /// When off every edge carries the value one.
    pub use_elapsed_time: bool,
    pub use_prescriptions: bool,
    /// One decay rate for both streams instead of one each.
    pub share_gamma: bool,
    pub n_filters: usize,
    pub filter_depth: usize,
    pub coarse_stride: usize,
    pub fine_stride: usize,
    pub lstm_hidden: usize,
    pub dense_sizes: Vec<usize>,
    pub dropout_rate: f64,
    pub lambda1: f64,
    pub lambda2: f64,
    pub lambda_g: f64,
    pub lr: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            use_gamma: true,
            use_exp: true,
            use_demographics: true,
            use_two_streams: true,
            use_graph_reg: true,
            use_l2: true,
            use_l1: true,
            use_lstm: true,
            use_elapsed_time: true,
            use_prescriptions: false,
            share_gamma: false,
            n_filters: 16,
            filter_depth: 3,
            coarse_stride: 1,
            fine_stride: 2,
            lstm_hidden: 64,
            dense_sizes: vec![16],
            dropout_rate: 0.3,
            lambda1: 1e-5,
            lambda2: 1e-4,
            lambda_g: 1e-4,
            lr: 1e-3,
            batch_size: 32,
            max_epochs: 50,
            patience: 10,
            seed: 0,
        }
    }
}

/// Names accepted by [`ablation_config`], in table order.
pub const ABLATIONS: [&str; 11] = [
    "full",
    "wo_gamma",
    "wo_exp",
    "wo_time",
    "wo_demo",
    "wo_two_streams",
    "wo_graph_reg",
    "wo_l2",
    "wo_l1",
    "wo_lstm",
    "with_prescriptions",
];

/// The default configuration with one component switched.
pub fn ablation_config(name: &str) -> Result<ModelConfig> {
    apply_ablation(&ModelConfig::default(), name)
}

/// `base` with one component switched.
pub fn apply_ablation(base: &ModelConfig, name: &str) -> Result<ModelConfig> {
    let mut c = base.clone();
    match name {
        "full" => {}
        "wo_gamma" => c.use_gamma = false,
        "wo_exp" => {
            c.use_exp = false;
            c.use_gamma = false;
        }
        "wo_time" => c.use_elapsed_time = false,
        "wo_demo" => c.use_demographics = false,
        "wo_two_streams" => c.use_two_streams = false,
        "wo_graph_reg" => c.use_graph_reg = false,
        "wo_l2" => c.use_l2 = false,
        "wo_l1" => c.use_l1 = false,
        "wo_lstm" => c.use_lstm = false,
        "with_prescriptions" => c.use_prescriptions = true,
        _ => {
            return Err(Error::UnknownAblation {
                name: name.to_string(),
                valid: ABLATIONS.join(", "),
            })
        }
    }
    Ok(c)
}

/// Keys of the `key = value` form, in output order.
pub const MODEL_KEYS: [&str; 26] = [
    "use_gamma",
    "use_exp",
    "use_demographics",
    "use_two_streams",
    "use_graph_reg",
    "use_l2",
    "use_l1",
    "use_lstm",
    "use_elapsed_time",
    "use_prescriptions",
    "share_gamma",
    "n_filters",
    "filter_depth",
    "coarse_stride",
    "fine_stride",
    "lstm_hidden",
    "dense_sizes",
    "dropout_rate",
    "lambda1",
    "lambda2",
    "lambda_g",
    "lr",
    "batch_size",
    "max_epochs",
    "patience",
    "seed",
];

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .trim()
        .parse()
        .map_err(|_| Error::Config(format!("invalid value '{value}' for {key}")))
}

impl ModelConfig {
    /// Whether the stream-level decay rate is a trainable parameter.
    pub fn trains_gamma(&self) -> bool {
        self.use_gamma && self.use_exp && self.use_elapsed_time
    }

    /// Stream names with their strides.
    pub fn streams(&self) -> Vec<(&'static str, usize)> {
        let mut s = vec![("coarse", self.coarse_stride)];
        if self.use_two_streams {
            s.push(("fine", self.fine_stride));
        }
        s
    }

    pub fn get(&self, key: &str) -> Option<String> {
        let b = |v: bool| v.to_string();
        Some(match key {
            "use_gamma" => b(self.use_gamma),
            "use_exp" => b(self.use_exp),
            "use_demographics" => b(self.use_demographics),
            "use_two_streams" => b(self.use_two_streams),
            "use_graph_reg" => b(self.use_graph_reg),
            "use_l2" => b(self.use_l2),
            "use_l1" => b(self.use_l1),
            "use_lstm" => b(self.use_lstm),
            "use_elapsed_time" => b(self.use_elapsed_time),
            "use_prescriptions" => b(self.use_prescriptions),
            "share_gamma" => b(self.share_gamma),
            "n_filters" => self.n_filters.to_string(),
            "filter_depth" => self.filter_depth.to_string(),
            "coarse_stride" => self.coarse_stride.to_string(),
            "fine_stride" => self.fine_stride.to_string(),
            "lstm_hidden" => self.lstm_hidden.to_string(),
            "dense_sizes" => self
                .dense_sizes
                .iter()
                .map(ToString::to_string)
                .collect::<Vec<_>>()
                .join(","),
            "dropout_rate" => self.dropout_rate.to_string(),
            "lambda1" => self.lambda1.to_string(),
            "lambda2" => self.lambda2.to_string(),
            "lambda_g" => self.lambda_g.to_string(),
            "lr" => self.lr.to_string(),
            "batch_size" => self.batch_size.to_string(),
            "max_epochs" => self.max_epochs.to_string(),
            "patience" => self.patience.to_string(),
            "seed" => self.seed.to_string(),
            _ => return None,
        })
    }

    /// Sets one key from its text form. Unknown keys are errors.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "use_gamma" => self.use_gamma = parse(key, value)?,
            "use_exp" => self.use_exp = parse(key, value)?,
            "use_demographics" => self.use_demographics = parse(key, value)?,
            "use_two_streams" => self.use_two_streams = parse(key, value)?,
            "use_graph_reg" => self.use_graph_reg = parse(key, value)?,
            "use_l2" => self.use_l2 = parse(key, value)?,
            "use_l1" => self.use_l1 = parse(key, value)?,
            "use_lstm" => self.use_lstm = parse(key, value)?,
            "use_elapsed_time" => self.use_elapsed_time = parse(key, value)?,
            "use_prescriptions" => self.use_prescriptions = parse(key, value)?,
            "share_gamma" => self.share_gamma = parse(key, value)?,
            "n_filters" => self.n_filters = parse(key, value)?,
            "filter_depth" => self.filter_depth = parse(key, value)?,
            "coarse_stride" => self.coarse_stride = parse(key, value)?,
            "fine_stride" => self.fine_stride = parse(key, value)?,
            "lstm_hidden" => self.lstm_hidden = parse(key, value)?,
            "dense_sizes" => {
                self.dense_sizes = value
                    .split(',')
                    .map(str::trim)
                    .filter(|s| !s.is_empty())
                    .map(|s| parse(key, s))
                    .collect::<Result<_>>()?
            }
            "dropout_rate" => self.dropout_rate = parse(key, value)?,
            "lambda1" => self.lambda1 = parse(key, value)?,
            "lambda2" => self.lambda2 = parse(key, value)?,
            "lambda_g" => self.lambda_g = parse(key, value)?,
            "lr" => self.lr = parse(key, value)?,
            "batch_size" => self.batch_size = parse(key, value)?,
            "max_epochs" => self.max_epochs = parse(key, value)?,
            "patience" => self.patience = parse(key, value)?,
            "seed" => self.seed = parse(key, value)?,
            _ => return Err(Error::Config(format!("unknown model key '{key}'"))),
        }
        Ok(())
    }

    /// `key = value` lines for every key.
    pub fn to_kv(&self) -> String {
        let mut out = String::new();
        for key in MODEL_KEYS {
            writeln!(out, "{key} = {}", self.get(key).expect("listed key")).unwrap();
        }
        out
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(Error::Config(m.to_string()));
        if self.n_filters == 0 || self.lstm_hidden == 0 || self.filter_depth == 0 {
            return fail("n_filters, lstm_hidden and filter_depth must be positive");
        }
        if self.coarse_stride == 0 || self.fine_stride == 0 {
            return fail("strides must be positive");
        }
        if self.dense_sizes.is_empty() || self.dense_sizes.contains(&0) {
            return fail("dense_sizes must list at least one positive width");
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return fail("dropout_rate must lie in [0, 1)");
        }
        if [self.lambda1, self.lambda2, self.lambda_g].iter().any(|l| !(*l >= 0.0)) {
            return fail("regularisation strengths must be non-negative");
        }
        if !(self.lr > 0.0) || self.batch_size == 0 {
            return fail("lr and batch_size must be positive");
        }
        Ok(())
    }
}
