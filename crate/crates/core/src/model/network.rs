use std::collections::BTreeMap;
use std::rc::Rc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::config::ModelConfig;
use crate::autodiff::{Array, BatchNormMode, ConvLayout, Graph, Params, Var};
use crate::cohort::{DemographicEncoder, PatientHistory};
use crate::error::{Error, Result};
use crate::graph::{build_tensor, CodeVocabulary, TemporalGraphTensor, TensorConfig};

pub(crate) const LEAKY_SLOPE: f64 = 0.01;
pub(crate) const BN_EPS: f64 = 1e-5;
pub(crate) const BN_MOMENTUM: f64 = 0.1;
pub(crate) const GATES: [&str; 4] = ["i", "f", "g", "o"];

/// One patient in model-ready form.
#[derive(Debug, Clone, PartialEq)]
pub struct EncodedPatient {
    pub patient_id: String,
    pub tensor: TemporalGraphTensor,
    pub demographics: [f64; 3],
    pub label: bool,
}

/// Builds tensors and demographic inputs. A patient with fewer than two
/// visits left after vocabulary filtering gets an empty tensor.
pub fn encode_patients(
    histories: &[PatientHistory],
    vocab: &CodeVocabulary,
    tensor_config: &TensorConfig,
    encoder: &DemographicEncoder,
) -> Result<Vec<EncodedPatient>> {
    histories
        .iter()
        .map(|h| {
            let tensor = match build_tensor(h, vocab, tensor_config) {
                Ok(t) => t,
                Err(Error::InsufficientVisits(_)) => {
                    log::debug!("{}: no in-vocabulary transitions", h.patient_id);
                    TemporalGraphTensor::empty(vocab.len(), tensor_config.max_slots)
                }
                Err(e) => return Err(e),
            };
            Ok(EncodedPatient {
                patient_id: h.patient_id.clone(),
                tensor,
                demographics: encoder.encode(h),
                label: h.label,
            })
        })
        .collect()
}

/// Edge values after the elapsed-time transform: `exp(-gamma t)`, `exp(-t)`
/// when the rate is frozen, raw `t` without the exponential, or one for
/// every edge when elapsed time is switched off.
pub fn time_transform(months: &[f64], gamma: f64, config: &ModelConfig) -> Vec<f64> {
    if !config.use_elapsed_time {
        return vec![1.0; months.len()];
    }
    if !config.use_exp {
        return months.to_vec();
    }
    let rate = if config.use_gamma { gamma } else { 1.0 };
    months.iter().map(|t| (-rate * t).exp()).collect()
}

/// Initial raw decay parameter: `softplus(GAMMA_RAW_INIT) = 1`.
pub const GAMMA_RAW_INIT: f64 = 0.541_324_854_612_918_1;

/// Trained state of a TG-CNN: parameters, batch-norm running moments and
/// the demographic encoder fitted on its training set.
#[derive(Debug, Clone, PartialEq)]
pub struct TgcnnModel {
    pub config: ModelConfig,
    pub n_nodes: usize,
    pub n_slots: usize,
    pub params: Params,
    /// Running batch-norm moments, `<stream>.bn.running_mean` and
    /// `<stream>.bn.running_var`.
    pub buffers: Params,
    pub encoder: DemographicEncoder,
}

pub(crate) fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], fan_in: usize) -> Array {
    let a = 1.0 / (fan_in.max(1) as f64).sqrt();
    let n = shape.iter().product();
    Array::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-a..a)).collect())
}

pub(crate) fn init_lstm(params: &mut Params, rng: &mut ChaCha8Rng, prefix: &str, input: usize, hidden: usize) {
    for gate in GATES {
        params.insert(format!("{prefix}.wx_{gate}"), uniform(rng, &[input, hidden], input));
        params.insert(format!("{prefix}.wh_{gate}"), uniform(rng, &[hidden, hidden], hidden));
        let bias = if gate == "f" { 1.0 } else { 0.0 };
        params.insert(format!("{prefix}.b_{gate}"), Array::filled(&[hidden], bias));
    }
}

impl TgcnnModel {
    /// Fresh parameters for `V = n_nodes` codes and `K = n_slots` slots.
    pub fn init(config: &ModelConfig, n_nodes: usize, n_slots: usize, encoder: DemographicEncoder) -> Result<Self> {
        config.validate()?;
        if config.filter_depth > n_slots {
            return Err(Error::Config(format!(
                "filter depth {} exceeds {n_slots} time slots",
                config.filter_depth
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let (f, d, h) = (config.n_filters, config.filter_depth, config.lstm_hidden);
        let mut params = Params::new();
        let mut buffers = Params::new();
        let streams = config.streams();
        let summary = if config.use_lstm { h } else { f };
        let d1 = config.dense_sizes[0];
        for (name, _) in &streams {
            params.insert(
                format!("{name}.filters"),
                uniform(&mut rng, &[f, n_nodes, n_nodes, d], n_nodes * n_nodes * d),
            );
            if config.trains_gamma() && !config.share_gamma {
                params.insert(format!("{name}.gamma_raw"), Array::vector(vec![GAMMA_RAW_INIT]));
            }
            params.insert(format!("{name}.bn.scale"), Array::filled(&[f], 1.0));
            params.insert(format!("{name}.bn.shift"), Array::zeros(&[f]));
            buffers.insert(format!("{name}.bn.running_mean"), Array::zeros(&[f]));
            buffers.insert(format!("{name}.bn.running_var"), Array::filled(&[f], 1.0));
            if config.use_lstm {
                init_lstm(&mut params, &mut rng, &format!("{name}.lstm"), f, h);
            }
            params.insert(
                format!("{name}.readout"),
                uniform(&mut rng, &[summary, d1], summary * streams.len()),
            );
        }
        if config.trains_gamma() && config.share_gamma {
            params.insert("gamma_raw", Array::vector(vec![GAMMA_RAW_INIT]));
        }
        params.insert("dense0.b", Array::zeros(&[d1]));
        for (i, w) in config.dense_sizes.windows(2).enumerate() {
            params.insert(format!("dense{}.w", i + 1), uniform(&mut rng, &[w[0], w[1]], w[0]));
            params.insert(format!("dense{}.b", i + 1), Array::zeros(&[w[1]]));
        }
        let last = *config.dense_sizes.last().expect("validated");
        params.insert("output.w", uniform(&mut rng, &[last, 1], last));
        if config.use_demographics {
            params.insert("output.demo_w", uniform(&mut rng, &[3, 1], 3));
        }
        params.insert("output.b", Array::zeros(&[1]));
        Ok(TgcnnModel {
            config: config.clone(),
            n_nodes,
            n_slots,
            params,
            buffers,
            encoder,
        })
    }

    pub fn gamma_param_name(&self, stream: &str) -> Option<String> {
        if !self.config.trains_gamma() {
            None
        } else if self.config.share_gamma {
            Some("gamma_raw".into())
        } else {
            Some(format!("{stream}.gamma_raw"))
        }
    }

    /// Decay rate of a stream (`softplus(gamma_raw)`, or one when frozen).
    pub fn gamma(&self, stream: &str) -> f64 {
        match self.gamma_param_name(stream).and_then(|n| self.params.get(&n)) {
            Some(raw) => {
                let x = raw.item();
                x.max(0.0) + (-x.abs()).exp().ln_1p()
            }
            None => 1.0,
        }
    }

    /// Output positions of each stream, `floor((K - d) / stride) + 1`.
    pub fn positions(&self) -> Vec<(&'static str, usize)> {
        self.config
            .streams()
            .into_iter()
            .map(|(name, s)| (name, (self.n_slots - self.config.filter_depth) / s + 1))
            .collect()
    }

    /// Records a forward pass. With `rng` the pass is in training mode
    /// (batch statistics, dropout); without it batch norm uses the running
    /// moments and dropout is skipped.
    pub(crate) fn forward<'a>(
        &'a self,
        g: &mut Graph<'a>,
        batch: &[&EncodedPatient],
        rng: Option<&mut ChaCha8Rng>,
    ) -> Result<Forward> {
        let mut b = Binder::new(&self.params);
        let c = &self.config;
        let n = batch.len();
        let tensors: Vec<&TemporalGraphTensor> = batch.iter().map(|p| &p.tensor).collect();
        for t in &tensors {
            if (t.n_nodes, t.n_slots) != (self.n_nodes, self.n_slots) {
                return Err(Error::Shape(format!(
                    "tensor is {}x{}, model expects {}x{}",
                    t.n_nodes, t.n_slots, self.n_nodes, self.n_slots
                )));
            }
        }
        let months: Vec<f64> = tensors.iter().flat_map(|t| t.entries.iter().map(|e| e.months)).collect();
        let train = rng.is_some();
        let mut bn_nodes = Vec::new();
        let mut summaries = Vec::new();
        for (stream, stride) in c.streams() {
            let layout = Rc::new(ConvLayout::new(&tensors, c.filter_depth, stride)?);
            let values = self.entry_values(g, &mut b, stream, &months)?;
            let filters = b.get(g, &format!("{stream}.filters"))?;
            let conv = g.sparse_conv3d(values, filters, layout.clone());
            check(g, conv, stream, "conv")?;
            let scale = b.get(g, &format!("{stream}.bn.scale"))?;
            let shift = b.get(g, &format!("{stream}.bn.shift"))?;
            let normed = if train {
                let v = g.batch_norm(conv, scale, shift, BatchNormMode::Train { eps: BN_EPS });
                bn_nodes.push((stream.to_string(), v));
                v
            } else {
                let mean = self.buffer(&format!("{stream}.bn.running_mean"))?;
                let var = self.buffer(&format!("{stream}.bn.running_var"))?;
                g.batch_norm(conv, scale, shift, BatchNormMode::Infer { mean, var, eps: BN_EPS })
            };
            let act = g.leaky_relu(normed, LEAKY_SLOPE);
            check(g, act, stream, "batch_norm")?;
            let steps = layout.out_len();
            let summary = if c.use_lstm {
                lstm_last(g, &mut b, &format!("{stream}.lstm"), act, steps, n)?
            } else {
                mean_pool(g, act, steps, n)
            };
            check(g, summary, stream, if c.use_lstm { "lstm" } else { "pool" })?;
            summaries.push((stream, summary));
        }
        let mut rng = rng;
        let mut hidden = None;
        for (stream, s) in summaries {
            let s = match rng.as_deref_mut() {
                Some(r) if c.dropout_rate > 0.0 => g.dropout(s, c.dropout_rate, r),
                _ => s,
            };
            let w = b.get(g, &format!("{stream}.readout"))?;
            let term = g.matmul(s, w);
            hidden = Some(match hidden {
                None => term,
                Some(acc) => g.add(acc, term),
            });
        }
        let bias = b.get(g, "dense0.b")?;
        let h = g.add_bias(hidden.expect("at least one stream"), bias);
        let mut h = g.leaky_relu(h, LEAKY_SLOPE);
        for i in 1..c.dense_sizes.len() {
            let w = b.get(g, &format!("dense{i}.w"))?;
            let bias = b.get(g, &format!("dense{i}.b"))?;
            let z = g.matmul(h, w);
            let z = g.add_bias(z, bias);
            h = g.leaky_relu(z, LEAKY_SLOPE);
        }
        check(g, h, "dense", "hidden")?;
        let w = b.get(g, "output.w")?;
        let mut eta = g.matmul(h, w);
        if c.use_demographics {
            let demo: Vec<f64> = batch.iter().flat_map(|p| p.demographics).collect();
            let demo = g.constant(Array::matrix(n, 3, demo));
            let dw = b.get(g, "output.demo_w")?;
            let term = g.matmul(demo, dw);
            eta = g.add(eta, term);
        }
        let ob = b.get(g, "output.b")?;
        let logits = g.add_bias(eta, ob);
        check(g, logits, "output", "logit")?;
        Ok(Forward {
            logits,
            bn_nodes,
            binder_vars: b.vars,
        })
    }

    /// Entry values fed to the convolution of `stream`: the elapsed months
    /// after the configured time transform.
    fn entry_values<'a>(&'a self, g: &mut Graph<'a>, b: &mut Binder<'a>, stream: &str, months: &[f64]) -> Result<Var> {
        Ok(match self.gamma_param_name(stream) {
            Some(name) => {
                let t = g.constant(Array::vector(months.to_vec()));
                let raw = b.get(g, &name)?;
                let gamma = g.softplus(raw);
                let scaled = g.scale_by(t, gamma);
                let neg = g.neg(scaled);
                g.exp(neg)
            }
            None => g.constant(Array::vector(time_transform(months, 1.0, &self.config))),
        })
    }

    /// The values one stream's convolution sees for `tensor`, one per entry.
    pub fn transformed_values(&self, tensor: &TemporalGraphTensor, stream: &str) -> Result<Vec<f64>> {
        if !self.config.streams().iter().any(|(s, _)| *s == stream) {
            return Err(Error::Config(format!("model has no '{stream}' stream")));
        }
        let mut g = Graph::new();
        let mut b = Binder::new(&self.params);
        let v = self.entry_values(&mut g, &mut b, stream, &tensor.months())?;
        Ok(g.value(v).data().to_vec())
    }

    fn buffer(&self, name: &str) -> Result<&[f64]> {
        self.buffers
            .get(name)
            .map(Array::data)
            .ok_or_else(|| Error::Internal(format!("missing buffer '{name}'")))
    }

    /// Filter-bank names of the active streams.
    pub fn filter_names(&self) -> Vec<String> {
        self.config.streams().iter().map(|(s, _)| format!("{s}.filters")).collect()
    }

    /// Blends batch moments into the running moments.
    pub(crate) fn update_running(&mut self, stats: &BnStats) {
        for (stream, mean, var) in stats {
            for (key, batch) in [("running_mean", mean), ("running_var", var)] {
                let run = self
                    .buffers
                    .get_mut(&format!("{stream}.bn.{key}"))
                    .expect("buffer per stream");
                for (r, v) in run.data_mut().iter_mut().zip(batch) {
                    *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * v;
                }
            }
        }
    }
}

pub(crate) type BnStats = Vec<(String, Vec<f64>, Vec<f64>)>;

pub(crate) struct Forward {
    pub logits: Var,
    pub bn_nodes: Vec<(String, Var)>,
    pub binder_vars: BTreeMap<String, Var>,
}

impl Forward {
    pub fn bn_stats(&self, g: &Graph<'_>) -> BnStats {
        self.bn_nodes
            .iter()
            .filter_map(|(s, v)| g.batch_norm_stats(*v).map(|(m, var)| (s.clone(), m.to_vec(), var.to_vec())))
            .collect()
    }
}

fn check(g: &Graph<'_>, v: Var, stream: &str, layer: &str) -> Result<()> {
    if g.value(v).all_finite() {
        Ok(())
    } else {
        Err(Error::NonFinite {
            layer: format!("{stream}.{layer}"),
        })
    }
}

/// Records each named parameter on the graph at most once.
pub(crate) struct Binder<'a> {
    params: &'a Params,
    pub vars: BTreeMap<String, Var>,
}

impl<'a> Binder<'a> {
    pub fn new(params: &'a Params) -> Self {
        Binder {
            params,
            vars: BTreeMap::new(),
        }
    }

    pub fn get(&mut self, g: &mut Graph<'a>, name: &str) -> Result<Var> {
        if let Some(v) = self.vars.get(name) {
            return Ok(*v);
        }
        let v = g.param_from(self.params, name)?;
        self.vars.insert(name.to_string(), v);
        Ok(v)
    }
}

/// Final hidden state of an LSTM over `steps` blocks of `batch` rows of `xs`.
fn lstm_last<'a>(
    g: &mut Graph<'a>,
    b: &mut Binder<'a>,
    prefix: &str,
    xs: Var,
    steps: usize,
    batch: usize,
) -> Result<Var> {
    let mut pre = Vec::with_capacity(4);
    let mut wh = Vec::with_capacity(4);
    for gate in GATES {
        let wx = b.get(g, &format!("{prefix}.wx_{gate}"))?;
        let bias = b.get(g, &format!("{prefix}.b_{gate}"))?;
        let z = g.matmul(xs, wx);
        pre.push(g.add_bias(z, bias));
        wh.push(b.get(g, &format!("{prefix}.wh_{gate}"))?);
    }
    let mut state: Option<(Var, Var)> = None;
    for t in 0..steps {
        let mut gates = Vec::with_capacity(4);
        for k in 0..4 {
            let x = g.slice_rows(pre[k], t * batch, (t + 1) * batch);
            gates.push(match state {
                Some((h, _)) => {
                    let r = g.matmul(h, wh[k]);
                    g.add(x, r)
                }
                None => x,
            });
        }
        let i = g.sigmoid(gates[0]);
        let f = g.sigmoid(gates[1]);
        let cand = g.tanh(gates[2]);
        let o = g.sigmoid(gates[3]);
        let ig = g.mul(i, cand);
        let c = match state {
            Some((_, c_prev)) => {
                let fc = g.mul(f, c_prev);
                g.add(fc, ig)
            }
            None => ig,
        };
        let tc = g.tanh(c);
        let h = g.mul(o, tc);
        state = Some((h, c));
    }
    let (h, _) = state.ok_or_else(|| Error::Shape("LSTM over zero steps".into()))?;
    Ok(h)
}

/// Mean over the `steps` blocks of `batch` rows.
fn mean_pool(g: &mut Graph<'_>, xs: Var, steps: usize, batch: usize) -> Var {
    let mut pool = vec![0.0; batch * steps * batch];
    let w = 1.0 / steps as f64;
    for r in 0..batch {
        for t in 0..steps {
            pool[r * steps * batch + t * batch + r] = w;
        }
    }
    let p = g.constant(Array::matrix(batch, steps * batch, pool));
    g.matmul(p, xs)
}

/// Regularisation terms of the loss, each already multiplied by its
/// strength and zero when switched off.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LossBreakdown {
    pub cross_entropy: f64,
    pub l1: f64,
    pub l2: f64,
    pub graph: f64,
}

impl LossBreakdown {
    pub fn total(&self) -> f64 {
        self.cross_entropy + self.l1 + self.l2 + self.graph
    }
}

/// Parameters that the squared-weight penalty covers: everything except the
/// decay rates and batch-norm affine terms.
pub fn l2_covered(name: &str) -> bool {
    !name.ends_with("gamma_raw") && !name.contains(".bn.")
}

/// Records the penalty terms on `g`, reusing leaves already bound.
pub(crate) fn penalty_graph<'a>(
    g: &mut Graph<'a>,
    b: &mut Binder<'a>,
    params: &'a Params,
    filter_names: &[String],
    config: &ModelConfig,
) -> Result<Option<Var>> {
    let mut terms = Vec::new();
    if config.use_l1 && config.lambda1 > 0.0 {
        for name in filter_names {
            let w = b.get(g, name)?;
            let l = g.l1_norm(w);
            terms.push(g.scale(l, config.lambda1));
        }
    }
    if config.use_l2 && config.lambda2 > 0.0 {
        for name in params.names().filter(|n| l2_covered(n)) {
            let w = b.get(g, name)?;
            let l = g.l2_norm(w);
            terms.push(g.scale(l, config.lambda2));
        }
    }
    if config.use_graph_reg && config.lambda_g > 0.0 {
        for name in filter_names {
            let w = b.get(g, name)?;
            let l = g.graph_regularizer(w);
            terms.push(g.scale(l, config.lambda_g));
        }
    }
    let mut total: Option<Var> = None;
    for t in terms {
        total = Some(match total {
            None => t,
            Some(acc) => g.add(acc, t),
        });
    }
    Ok(total)
}

/// Value of the penalty terms without recording a graph.
pub fn penalty_value(params: &Params, filter_names: &[String], config: &ModelConfig) -> LossBreakdown {
    let mut out = LossBreakdown::default();
    let filters = || filter_names.iter().filter_map(|n| params.get(n));
    if config.use_l1 {
        out.l1 = config.lambda1 * filters().flat_map(|w| w.data()).map(|v| v.abs()).sum::<f64>();
    }
    if config.use_l2 {
        out.l2 = config.lambda2
            * params
                .iter()
                .filter(|(n, _)| l2_covered(n))
                .flat_map(|(_, w)| w.data())
                .map(|v| v * v)
                .sum::<f64>();
    }
    if config.use_graph_reg {
        out.graph = config.lambda_g * filters().map(crate::autodiff::graph_regularizer_value).sum::<f64>();
    }
    out
}

/// Mean binary cross-entropy of logits against labels, probabilities clamped
/// to `[PROB_CLAMP, 1 - PROB_CLAMP]`.
pub fn cross_entropy(logits: &[f64], labels: &[bool]) -> f64 {
    use crate::autodiff::{sigmoid, PROB_CLAMP};
    let clamp = |p: f64| p.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP);
    let total: f64 = logits
        .iter()
        .zip(labels)
        .map(|(&z, &y)| {
            if y {
                -clamp(sigmoid(z)).ln()
            } else {
                -clamp(sigmoid(-z)).ln()
            }
        })
        .sum();
    total / logits.len() as f64
}

/// Cross-entropy plus the configured penalties of `params`.
pub fn compute_loss(
    logits: &[f64],
    labels: &[bool],
    params: &Params,
    filter_names: &[String],
    config: &ModelConfig,
) -> Result<LossBreakdown> {
    if logits.is_empty() || logits.len() != labels.len() {
        return Err(Error::Shape(format!("{} logits, {} labels", logits.len(), labels.len())));
    }
    Ok(LossBreakdown {
        cross_entropy: cross_entropy(logits, labels),
        ..penalty_value(params, filter_names, config)
    })
}
