use std::collections::{BTreeMap, BTreeSet};

use chrono::NaiveDate;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::autodiff::{finite_difference_check, graph_regularizer_value, sigmoid, Params};
use crate::cohort::{
    apply_inclusion_criteria, apply_time_window, generate_synthetic_cohort, split_cohort, CohortSplit,
    DemographicEncoder, Demographics, GenConfig, PatientHistory, Sex, SplitConfig, Visit,
};
use crate::graph::{build_tensor, build_vocabulary, CodeVocabulary, GraphEntry, TensorConfig};

fn random_tensor(rng: &mut ChaCha8Rng, v: usize, k: usize, nnz: usize) -> TemporalGraphTensor {
    let mut seen = BTreeSet::new();
    let mut entries = Vec::new();
    for _ in 0..nnz {
        let key = (rng.random_range(0..k) as u32, rng.random_range(0..v) as u32, rng.random_range(0..v) as u32);
        if seen.insert(key) {
            entries.push(GraphEntry {
                src: key.1,
                dst: key.2,
                slot: key.0,
                months: rng.random_range(0.0..1.0),
            });
        }
    }
    entries.sort_by_key(|e| (e.slot, e.src, e.dst));
    TemporalGraphTensor {
        entries,
        n_nodes: v,
        n_slots: k,
    }
}

fn dense_conv(t: &TemporalGraphTensor, w: &Array, stride: usize) -> Vec<Vec<f64>> {
    let s = w.shape();
    let (f, v, d) = (s[0], s[1], s[3]);
    let k = t.n_slots;
    let mut g = vec![vec![vec![0.0; k]; v]; v];
    for e in &t.entries {
        g[e.src as usize][e.dst as usize][e.slot as usize] = e.months;
    }
    let l = (k - d) / stride + 1;
    let at = |ff: usize, i: usize, j: usize, dd: usize| w.data()[((ff * v + i) * v + j) * d + dd];
    (0..f)
        .map(|ff| {
            (0..l)
                .map(|pos| {
                    let mut acc = 0.0;
                    for i in 0..v {
                        for j in 0..v {
                            for dd in 0..d {
                                acc += at(ff, i, j, dd) * g[i][j][pos * stride + dd];
                            }
                        }
                    }
                    acc
                })
                .collect()
        })
        .collect()
}

#[test]
fn conv_of_empty_tensor_is_zero() {
    let t = TemporalGraphTensor::empty(4, 10);
    let w = Array::filled(&[2, 4, 4, 3], 0.7);
    let out = sparse_conv3d(&t, &w, 1).unwrap();
    assert_eq!(out.shape(), &[2, 8]);
    assert!(out.data().iter().all(|&x| x == 0.0));
}

#[test]
fn conv_single_entry() {
    let t = TemporalGraphTensor {
        entries: vec![GraphEntry {
            src: 2,
            dst: 5,
            slot: 99,
            months: 0.8,
        }],
        n_nodes: 6,
        n_slots: 100,
    };
    let d = 3;
    let mut w = Array::zeros(&[2, 6, 6, d]);
    w.data_mut()[(2 * 6 + 5) * d + d - 1] = 1.5;
    let out = sparse_conv3d(&t, &w, 1).unwrap();
    let l = 100 - d + 1;
    assert_eq!(out.shape(), &[2, l]);
    assert!((out.data()[l - 1] - 1.2).abs() < 1e-15);
    // Filter 1 is zero, and earlier windows see slot 99 at offsets other than d-1.
    assert!(out.data()[..l - 1].iter().all(|&x| x == 0.0));
    assert!(out.data()[l..].iter().all(|&x| x == 0.0));
}

#[test]
fn conv_depth_beyond_slots_is_config_error() {
    let t = TemporalGraphTensor::empty(3, 2);
    let w = Array::zeros(&[1, 3, 3, 3]);
    assert!(matches!(sparse_conv3d(&t, &w, 1), Err(Error::Config(_))));
}

#[test]
fn conv_matches_dense_oracle_on_fixed_instance() {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let t = random_tensor(&mut rng, 4, 6, 30);
    let w = Array::new(vec![3, 4, 4, 2], (0..96).map(|_| rng.random_range(-1.0..1.0)).collect());
    let out = sparse_conv3d(&t, &w, 1).unwrap();
    let oracle = dense_conv(&t, &w, 1);
    for (f, row) in oracle.iter().enumerate() {
        for (l, &x) in row.iter().enumerate() {
            assert!((out.data()[f * 5 + l] - x).abs() < 1e-10);
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn conv_equals_dense_oracle(
        v in 1usize..=8, k in 1usize..=10, d_raw in 1usize..=3, f in 1usize..=4,
        stride in 1usize..=2, nnz in 0usize..40, seed in any::<u64>()
    ) {
        let d = d_raw.min(k);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let t = random_tensor(&mut rng, v, k, nnz);
        let n = f * v * v * d;
        let w = Array::new(vec![f, v, v, d], (0..n).map(|_| rng.random_range(-1.0..1.0)).collect());
        let out = sparse_conv3d(&t, &w, stride).unwrap();
        let oracle = dense_conv(&t, &w, stride);
        let l = (k - d) / stride + 1;
        prop_assert_eq!(out.shape(), &[f, l][..]);
        for (ff, row) in oracle.iter().enumerate() {
            for (pos, &x) in row.iter().enumerate() {
                prop_assert!((out.data()[ff * l + pos] - x).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn stream_lengths(k in 1usize..=120, d in 1usize..=5) {
        prop_assume!(d <= k);
        let config = ModelConfig {
            n_filters: 2, filter_depth: d, lstm_hidden: 2, dense_sizes: vec![2], ..Default::default()
        };
        let m = TgcnnModel::init(&config, 2, k, DemographicEncoder::default()).unwrap();
        let pos: BTreeMap<_, _> = m.positions().into_iter().collect();
        prop_assert_eq!(pos["coarse"], k - d + 1);
        prop_assert_eq!(pos["fine"], (k - d) / 2 + 1);
    }

    #[test]
    fn exp_transform_decays_from_one(gamma in 0.01f64..5.0, a in 0.0f64..50.0, b in 0.0f64..50.0) {
        prop_assume!(a < b && (b - a) * gamma > 1e-9);
        let c = ModelConfig::default();
        let v = time_transform(&[0.0, a, b], gamma, &c);
        prop_assert_eq!(v[0], 1.0);
        prop_assert!(v[1] > v[2]);
    }
}

#[test]
fn time_transform_examples() {
    let full = ModelConfig::default();
    assert_eq!(time_transform(&[0.0], 3.7, &full), vec![1.0]);
    let v = time_transform(&[2.0], 0.5, &full)[0];
    assert!((v - (-1.0f64).exp()).abs() < 1e-15);
    let no_time = ablation_config("wo_time").unwrap();
    assert_eq!(time_transform(&[7.3, 0.0], 0.5, &no_time), vec![1.0, 1.0]);
    let no_exp = ablation_config("wo_exp").unwrap();
    assert_eq!(time_transform(&[7.3], 0.5, &no_exp), vec![7.3]);
    let no_gamma = ablation_config("wo_gamma").unwrap();
    assert_eq!(time_transform(&[2.0], 0.5, &no_gamma), vec![(-2.0f64).exp()]);
}

fn brute_graph_reg(w: &Array) -> f64 {
    let s = w.shape();
    let (f, v, d) = (s[0], s[1], s[3]);
    let at = |a: usize, i: usize, j: usize, t: usize| w.data()[((a * v + i) * v + j) * d + t];
    let mut total = 0.0;
    for a in 0..f {
        for t in 0..d.saturating_sub(1) {
            for node in 0..v {
                let mut incoming = 0.0;
                for i in 0..v {
                    incoming += at(a, i, node, t).abs();
                }
                let mut outgoing = 0.0;
                for j in 0..v {
                    outgoing += at(a, node, j, t + 1).abs();
                }
                total += (incoming - outgoing).abs();
            }
        }
    }
    total / f as f64
}

#[test]
fn graph_regulariser_examples() {
    // A -> B at step 0 and B -> C at step 1: B's mass flows on, C terminates
    // the walk with nothing required of it.
    let (v, d) = (3, 2);
    let mut w = Array::zeros(&[1, v, v, d]);
    w.data_mut()[d] = 0.8;
    w.data_mut()[(v + 2) * d + 1] = -0.8;
    assert_eq!(graph_regularizer_value(&w), 0.0);
    let flat = Array::filled(&[2, 4, 4, 1], 0.3);
    assert_eq!(graph_regularizer_value(&flat), 0.0);
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let w = Array::new(vec![3, 5, 5, 4], (0..300).map(|_| rng.random_range(-1.0..1.0)).collect());
    assert!((graph_regularizer_value(&w) - brute_graph_reg(&w)).abs() < 1e-12);
}

#[test]
fn loss_examples() {
    let config = ModelConfig {
        use_l1: false,
        use_l2: false,
        use_graph_reg: false,
        ..Default::default()
    };
    let none = Params::new();
    let perfect = compute_loss(&[60.0, -60.0], &[true, false], &none, &[], &config).unwrap();
    assert!(perfect.cross_entropy <= 1e-11);
    let half = compute_loss(&[0.0, 0.0, 0.0], &[true, false, true], &none, &[], &config).unwrap();
    assert!((half.cross_entropy - std::f64::consts::LN_2).abs() < 1e-15);

    let l1_only = ModelConfig {
        use_l1: true,
        lambda1: 0.1,
        ..config.clone()
    };
    let mut params = Params::new();
    let mut w = Array::zeros(&[1, 2, 2, 1]);
    w.data_mut()[3] = 2.0;
    params.insert("coarse.filters", w);
    let b = compute_loss(&[0.0], &[true], &params, &["coarse.filters".into()], &l1_only).unwrap();
    assert!((b.l1 - 0.2).abs() < 1e-15);
    assert_eq!(b.l2, 0.0);
    assert!((b.total() - (std::f64::consts::LN_2 + 0.2)).abs() < 1e-15);
    assert!(compute_loss(&[], &[], &params, &[], &config).is_err());
}

#[test]
fn l2_skips_decay_rates_and_batch_norm() {
    assert!(l2_covered("coarse.filters"));
    assert!(l2_covered("dense0.b"));
    assert!(!l2_covered("fine.gamma_raw"));
    assert!(!l2_covered("gamma_raw"));
    assert!(!l2_covered("coarse.bn.scale"));
}

fn toy_config() -> ModelConfig {
    ModelConfig {
        n_filters: 3,
        filter_depth: 2,
        lstm_hidden: 8,
        dense_sizes: vec![4],
        dropout_rate: 0.0,
        lambda1: 1e-3,
        lambda2: 1e-3,
        lambda_g: 1e-3,
        batch_size: 4,
        ..Default::default()
    }
}

fn toy_patients(n: usize, v: usize, k: usize, seed: u64) -> Vec<EncodedPatient> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|i| {
            let label = i % 2 == 0;
            let mut t = random_tensor(&mut rng, v, k, 3 * k);
            for e in t.entries.iter_mut() {
                e.months = rng.random_range(0.0..6.0);
            }
            if label {
                for e in t.entries.iter_mut().filter(|e| e.slot as usize >= k / 2) {
                    e.src = 0;
                }
                t.entries.sort_by_key(|e| (e.slot, e.src, e.dst));
                t.entries.dedup_by_key(|e| (e.slot, e.src, e.dst));
            }
            EncodedPatient {
                patient_id: format!("T{i:03}"),
                tensor: t,
                demographics: [rng.random_range(-1.5..1.5), f64::from(u8::from(rng.random_bool(0.5))), 0.25],
                label,
            }
        })
        .collect()
}

fn loss_and_grads(model: &TgcnnModel, batch: &[EncodedPatient]) -> crate::Result<(f64, Params)> {
    let refs: Vec<&EncodedPatient> = batch.iter().collect();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let (loss, grads, _) = model.train_step(&refs, &mut rng)?;
    Ok((loss, grads))
}

#[test]
fn full_loss_gradient_check() {
    let config = toy_config();
    let model = TgcnnModel::init(&config, 6, 8, DemographicEncoder::default()).unwrap();
    let batch = toy_patients(4, 6, 8, 3);
    let report = finite_difference_check(&model.params, 1e-5, 1, |p| {
        let mut m = model.clone();
        m.params = p.clone();
        loss_and_grads(&m, &batch)
    })
    .unwrap();
    for name in ["coarse.gamma_raw", "fine.gamma_raw", "coarse.filters", "fine.lstm.wh_f", "output.demo_w"] {
        assert!(report.per_param.contains_key(name), "{name}");
    }
    assert!(report.max_rel_error < 1e-4, "{:?}", report.per_param);
}

#[test]
fn gradient_check_without_lstm_and_with_shared_gamma() {
    for config in [
        ModelConfig {
            use_lstm: false,
            ..toy_config()
        },
        ModelConfig {
            share_gamma: true,
            ..toy_config()
        },
    ] {
        let model = TgcnnModel::init(&config, 6, 8, DemographicEncoder::default()).unwrap();
        let batch = toy_patients(4, 6, 8, 9);
        let report = finite_difference_check(&model.params, 1e-5, 2, |p| {
            let mut m = model.clone();
            m.params = p.clone();
            loss_and_grads(&m, &batch)
        })
        .unwrap();
        assert!(report.max_rel_error < 1e-4, "{:?}", report.per_param);
    }
}

#[test]
fn train_step_agrees_with_value_only_loss_in_inference_terms() {
    let config = toy_config();
    let model = TgcnnModel::init(&config, 6, 8, DemographicEncoder::default()).unwrap();
    let p = penalty_value(&model.params, &model.filter_names(), &config);
    assert!(p.l1 > 0.0 && p.l2 > 0.0 && p.graph > 0.0);
    let batch = toy_patients(4, 6, 8, 3);
    let (loss, _) = loss_and_grads(&model, &batch).unwrap();
    assert!(loss > p.l1 + p.l2 + p.graph);
}

#[test]
fn zero_network_predicts_half() {
    let config = toy_config();
    let mut model = TgcnnModel::init(&config, 6, 8, DemographicEncoder::default()).unwrap();
    for (_, a) in model.params.iter_mut() {
        a.data_mut().iter_mut().for_each(|x| *x = 0.0);
    }
    let preds = predict(&model, &toy_patients(5, 6, 8, 1)).unwrap();
    for p in preds {
        assert_eq!(p.linear_predictor, 0.0);
        assert_eq!(p.probability, 0.5);
    }
}

#[test]
fn inference_is_repeatable_and_order_free() {
    let config = toy_config();
    let model = TgcnnModel::init(&config, 6, 8, DemographicEncoder::default()).unwrap();
    let patients = toy_patients(9, 6, 8, 2);
    let a = predict(&model, &patients).unwrap();
    let b = predict(&model, &patients).unwrap();
    assert_eq!(a, b);
    let mut reversed = patients.clone();
    reversed.reverse();
    assert_eq!(predict(&model, &reversed).unwrap(), a);
    for p in &a {
        assert!(p.probability > 0.0 && p.probability < 1.0);
        assert_eq!(p.probability, sigmoid(p.linear_predictor));
    }
    assert!(a.windows(2).all(|w| w[0].patient_id < w[1].patient_id));
}

fn day(y: i32, m: u32, d: u32) -> NaiveDate {
    NaiveDate::from_ymd_opt(y, m, d).unwrap()
}

#[test]
fn four_code_three_step_patient_flows_through() {
    let history = PatientHistory {
        patient_id: "P1".into(),
        visits: vec![
            Visit::new(day(2010, 1, 1), ["A", "B"]),
            Visit::new(day(2010, 3, 1), ["C"]),
            Visit::new(day(2010, 9, 1), ["B", "D"]),
        ],
        demographics: Demographics {
            sex: Sex::Female,
            birth_year: 1950,
            imd_quintile: 2,
        },
        replacement_date: None,
        label: false,
    };
    let vocab = CodeVocabulary::from_codes(vec!["A".into(), "B".into(), "C".into(), "D".into()], 1.0).unwrap();
    let tc = TensorConfig {
        max_slots: 5,
        ..Default::default()
    };
    let t = build_tensor(&history, &vocab, &tc).unwrap();
    assert_eq!(t.occupied_slots(), vec![3, 4]);
    let config = ModelConfig {
        filter_depth: 2,
        ..toy_config()
    };
    let model = TgcnnModel::init(&config, 4, 5, DemographicEncoder::fit(std::slice::from_ref(&history))).unwrap();
    let pos: BTreeMap<_, _> = model.positions().into_iter().collect();
    assert_eq!(pos["coarse"], 4);
    assert_eq!(pos["fine"], 2);
    let enc = encode_patients(&[history], &vocab, &tc, &model.encoder).unwrap();
    assert_eq!(enc[0].demographics, [0.0, 0.0, 0.25]);
    let p = predict(&model, &enc).unwrap();
    assert!(p[0].probability > 0.0 && p[0].probability < 1.0);
}

fn component(name: &str) -> String {
    let kind = if name.ends_with(".filters") {
        "filters"
    } else if name.ends_with("gamma_raw") {
        "gamma"
    } else if name.contains(".bn.") {
        "bn"
    } else if name.contains(".lstm.") {
        "lstm"
    } else if name.ends_with(".readout") {
        "readout"
    } else if name == "output.demo_w" {
        "demo"
    } else {
        "head"
    };
    let stream = name.split('.').next().filter(|s| *s == "coarse" || *s == "fine").unwrap_or("");
    format!("{stream}:{kind}")
}

fn component_sizes(m: &TgcnnModel) -> BTreeMap<String, usize> {
    let mut out = BTreeMap::new();
    for (name, a) in m.params.iter() {
        *out.entry(component(name)).or_insert(0) += a.len();
    }
    out
}

#[test]
fn ablations_leave_other_components_untouched() {
    let base = toy_config();
    let v = 10;
    let full = component_sizes(&TgcnnModel::init(&base, v, 8, DemographicEncoder::default()).unwrap());
    for name in ABLATIONS {
        let c = apply_ablation(&base, name).unwrap();
        let nodes = if c.use_prescriptions { v + 6 } else { v };
        let sizes = component_sizes(&TgcnnModel::init(&c, nodes, 8, DemographicEncoder::default()).unwrap());
        let touched: &[&str] = match name {
            "wo_gamma" | "wo_exp" | "wo_time" => &["gamma"],
            "wo_demo" => &["demo"],
            "wo_lstm" => &["lstm", "readout"],
            "with_prescriptions" => &["filters"],
            _ => &[],
        };
        for (key, &n) in &full {
            let kind = key.split(':').nth(1).unwrap();
            let dropped_stream = name == "wo_two_streams" && key.starts_with("fine:");
            if touched.contains(&kind) || dropped_stream {
                continue;
            }
            assert_eq!(sizes.get(key), Some(&n), "{name}: {key}");
        }
    }
}

#[test]
fn single_stream_ablation_has_one_stream() {
    let c = ablation_config("wo_two_streams").unwrap();
    let m = TgcnnModel::init(&c, 4, 12, DemographicEncoder::default()).unwrap();
    assert_eq!(m.positions(), vec![("coarse", 12 - c.filter_depth + 1)]);
    assert!(m.params.names().all(|n| !n.starts_with("fine.")));
}

fn small_train_config() -> ModelConfig {
    ModelConfig {
        n_filters: 4,
        filter_depth: 2,
        lstm_hidden: 8,
        dense_sizes: vec![8],
        dropout_rate: 0.0,
        lr: 1e-2,
        batch_size: 5,
        max_epochs: 50,
        patience: 50,
        seed: 3,
        ..Default::default()
    }
}

#[test]
fn ten_pairs_are_memorised() {
    let patients = toy_patients(20, 6, 8, 21);
    let fitted = train_tgcnn(&patients, &patients, &small_train_config(), DemographicEncoder::default()).unwrap();
    let preds = predict(&fitted.model, &patients).unwrap();
    assert_eq!(crate::metrics::accuracy(&preds), 1.0);
}

#[test]
fn first_epoch_lowers_training_loss() {
    let patients = toy_patients(20, 6, 8, 22);
    let config = ModelConfig {
        max_epochs: 1,
        ..small_train_config()
    };
    let fitted = train_tgcnn(&patients, &[], &config, DemographicEncoder::default()).unwrap();
    assert_eq!(fitted.history.len(), 2);
    assert!(fitted.history[1].train_loss < fitted.history[0].train_loss, "{:?}", fitted.history);
}

#[test]
fn training_is_deterministic() {
    let patients = toy_patients(16, 6, 8, 23);
    let config = ModelConfig {
        max_epochs: 4,
        dropout_rate: 0.3,
        ..small_train_config()
    };
    let (train, val) = patients.split_at(12);
    let a = train_tgcnn(train, val, &config, DemographicEncoder::default()).unwrap();
    let b = train_tgcnn(train, val, &config, DemographicEncoder::default()).unwrap();
    assert_eq!(history_csv(&a.history), history_csv(&b.history));
    assert_eq!(save_checkpoint(&a.model), save_checkpoint(&b.model));
}

#[test]
fn early_stopping_respects_patience() {
    let patients = toy_patients(16, 6, 8, 24);
    let config = ModelConfig {
        max_epochs: 40,
        patience: 2,
        ..small_train_config()
    };
    let (train, val) = patients.split_at(12);
    let fitted = train_tgcnn(train, val, &config, DemographicEncoder::default()).unwrap();
    let last = fitted.history.last().unwrap().epoch;
    assert!(last <= fitted.best_epoch + 2);
    assert!(fitted.best_epoch <= last);
}

#[test]
fn history_round_trip() {
    let patients = toy_patients(8, 6, 8, 25);
    let config = ModelConfig {
        max_epochs: 2,
        ..small_train_config()
    };
    let fitted = train_tgcnn(&patients, &patients[..2], &config, DemographicEncoder::default()).unwrap();
    let csv = history_csv(&fitted.history);
    assert!(csv.starts_with(HISTORY_HEADER));
    let back = parse_history_csv(&csv).unwrap();
    assert_eq!(history_csv(&back), csv);
}

#[test]
fn checkpoint_round_trip() {
    let config = ModelConfig {
        use_lstm: false,
        share_gamma: true,
        ..toy_config()
    };
    let enc = DemographicEncoder {
        age_mean: 63.25,
        age_sd: 7.1,
    };
    let mut model = TgcnnModel::init(&config, 6, 8, enc).unwrap();
    model.buffers.get_mut("coarse.bn.running_var").unwrap().data_mut()[1] = 0.123;
    let bytes = save_checkpoint(&model);
    assert!(bytes.starts_with(b"TGCNN v1\n"));
    let back = load_checkpoint(&bytes).unwrap();
    assert_eq!(back, model);
    assert!(matches!(load_checkpoint(b"TGCNN v2\n"), Err(Error::Checkpoint(_))));
    assert!(load_checkpoint(&bytes[..bytes.len() - 3]).is_err());
}

fn small_split() -> (CohortSplit, CodeVocabulary, TensorConfig) {
    let gen = GenConfig {
        n_patients: 300,
        case_prevalence: 0.3,
        vocabulary_size: 30,
        mean_visits: 8.0,
        ..Default::default()
    };
    let cohort = generate_synthetic_cohort(&gen, 5).unwrap();
    let windowed = apply_inclusion_criteria(cohort.iter().map(|h| apply_time_window(h, 12)).collect());
    let split = split_cohort(&windowed, 5, &SplitConfig::default()).unwrap();
    let vocab = build_vocabulary(&split.matched_train, 15);
    let tc = TensorConfig {
        max_slots: 10,
        ..Default::default()
    };
    (split, vocab, tc)
}

fn tiny_cv_config() -> ModelConfig {
    ModelConfig {
        n_filters: 2,
        filter_depth: 2,
        lstm_hidden: 4,
        dense_sizes: vec![4],
        max_epochs: 2,
        batch_size: 16,
        ..Default::default()
    }
}

#[test]
fn cross_validation_reports_every_fold() {
    let (split, vocab, tc) = small_split();
    let cv = cross_validate(&split, &vocab, &tc, &tiny_cv_config()).unwrap();
    assert_eq!(cv.folds.len(), 5);
    let csv = cv.to_csv();
    assert_eq!(csv.lines().count(), 1 + 5 + 2);
    assert!(csv.lines().nth(6).unwrap().starts_with("mean,"));
    for k in 0..5 {
        let (train, val) = split.fold(k);
        let train_ids: BTreeSet<&str> = train.iter().map(|h| h.patient_id.as_str()).collect();
        assert!(val.iter().all(|h| !train_ids.contains(h.patient_id.as_str())));
        assert!(val.iter().all(|h| split.fold_assignment[&h.patient_id] == k));
    }
    let (m, s) = cv.mean_sd("val_auroc");
    let vals: Vec<f64> = cv.folds.iter().map(|f| f.val_auroc).collect();
    let hand_mean = vals.iter().sum::<f64>() / 5.0;
    let hand_sd = (vals.iter().map(|v| (v - hand_mean).powi(2)).sum::<f64>() / 4.0).sqrt();
    assert!((m - hand_mean).abs() < 1e-15 && (s - hand_sd).abs() < 1e-15);
}

#[test]
fn mean_sd_by_hand() {
    let (m, s) = mean_sd(&[2.0, 4.0, 4.0, 4.0, 5.0, 5.0, 7.0, 9.0]);
    assert_eq!(m, 5.0);
    assert!((s - (32.0f64 / 7.0).sqrt()).abs() < 1e-15);
    assert_eq!(mean_sd(&[3.0]), (3.0, 0.0));
    assert_eq!(mean_sd(&[1.0, f64::NAN, 3.0]).0, 2.0);
}

#[test]
fn sampled_trials_are_seeded_and_in_range() {
    let base = ModelConfig::default();
    let r = SearchRanges::default();
    let a = sample_trials(&base, &r, 20, 9);
    assert_eq!(a, sample_trials(&base, &r, 20, 9));
    assert_ne!(a, sample_trials(&base, &r, 20, 10));
    for (t, c) in a.iter().enumerate() {
        assert!((1e-4..=1e-2).contains(&c.lr));
        assert!((1e-6..=1e-2).contains(&c.lambda_g));
        assert!((4..=64).contains(&c.n_filters));
        assert!((2..=5).contains(&c.filter_depth));
        assert!((16..=128).contains(&c.lstm_hidden));
        assert!((0.1..=0.5).contains(&c.dropout_rate));
        assert_eq!(c.seed, base.seed + t as u64);
    }
}

#[test]
fn selection_prefers_accuracy_then_auroc() {
    let scores = [(0.70, 0.90), (0.75, 0.60), (0.75, 0.65), (0.60, 0.99)];
    assert_eq!(select_best(&scores), Some(2));
    assert_eq!(select_best(&[(0.5, 0.5), (0.5, 0.5)]), Some(0));
    assert_eq!(select_best(&[]), None);
}

#[test]
fn single_trial_search_returns_that_trial() {
    let (split, vocab, tc) = small_split();
    let base = ModelConfig {
        max_epochs: 1,
        ..tiny_cv_config()
    };
    let ranges = SearchRanges {
        n_filters: (2, 3),
        lstm_hidden: (2, 4),
        ..Default::default()
    };
    let out = random_search(&split, &vocab, &tc, &base, &ranges, 1, 4).unwrap();
    assert_eq!(out.best, 0);
    assert_eq!(out.best_config(), &sample_trials(&base, &ranges, 1, 4)[0]);
    assert_eq!(out.to_csv().lines().count(), 2);
}

#[test]
fn prescriptions_extend_the_model_vocabulary() {
    let vocab = CodeVocabulary::from_codes(vec!["A".into(), "B".into()], 1.0).unwrap();
    let with = model_vocabulary(&vocab, &ablation_config("with_prescriptions").unwrap()).unwrap();
    assert_eq!(with.len(), 8);
    assert_eq!(model_vocabulary(&vocab, &ModelConfig::default()).unwrap(), vocab);
}
