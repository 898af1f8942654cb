mod oracle;

use std::collections::BTreeSet;

use keyseg_core::dataset::{
    downsample_indices, kfold_patients, standardize_length, IGNORE_INDEX, SEQUENCE_LEN,
};
use keyseg_core::ingest::{RawSequence, View};
use keyseg_core::models::{count_params, ModelConfig, MODEL_NAMES};
use keyseg_core::nn::{masked_cross_entropy, masked_cross_entropy_with_grad, scaled_dot_product_attention, Tensor};
use keyseg_core::refine::{accept, interpolate_nn, missing_fraction, savgol, RefineConfig};
use keyseg_core::trainer::{fold_seed, mean_std};
use nalgebra::DMatrix;
use proptest::collection::vec;
use proptest::prelude::*;

fn rel(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1.0)
}

fn window_order() -> impl Strategy<Value = (usize, usize)> {
    (prop::sample::select(vec![5usize, 7, 9, 11]), 1usize..=3)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn savgol_matches_least_squares_oracle(
        (w, p) in window_order(),
        x in vec(-500.0f64..500.0, 11..120),
    ) {
        let got = savgol(&x, w, p).unwrap();
        let want = oracle::savgol(&x, w, p);
        for (g, o) in got.iter().zip(&want) {
            prop_assert!(rel(*g, *o) < 1e-9, "{g} vs {o}");
        }
    }

    #[test]
    fn savgol_reproduces_low_degree_polynomials(
        (w, p) in window_order(),
        coef in vec(-2.0f64..2.0, 4),
        n in 11usize..80,
    ) {
        let x: Vec<f64> = (0..n)
            .map(|i| {
                let u = i as f64 / 10.0;
                (0..=p).map(|d| coef[d] * u.powi(d as i32)).sum()
            })
            .collect();
        let y = savgol(&x, w, p).unwrap();
        for (a, b) in x.iter().zip(&y) {
            prop_assert!(rel(*a, *b) < 1e-9, "{a} vs {b}");
        }
    }

    #[test]
    fn masked_loss_ignores_padding(
        rows in vec((vec(-6.0f64..6.0, 4), 0u8..4), 1..40),
        pad in vec(vec(-50.0f64..50.0, 4), 0..40),
    ) {
        let valid = rows.len();
        let mut data: Vec<f64> = rows.iter().flat_map(|r| r.0.clone()).collect();
        let mut labels: Vec<u8> = rows.iter().map(|r| r.1).collect();
        let short = Tensor::matrix(valid, 4, data.clone()).unwrap();
        let short_loss = masked_cross_entropy(&short, &labels, IGNORE_INDEX).unwrap();
        data.extend(pad.iter().flatten());
        labels.extend(std::iter::repeat_n(IGNORE_INDEX, pad.len()));
        let full = Tensor::matrix(labels.len(), 4, data).unwrap();
        let (loss, grad) = masked_cross_entropy_with_grad(&full, &labels, IGNORE_INDEX).unwrap();

        let logits: Vec<Vec<f64>> = rows.iter().map(|r| r.0.clone()).collect();
        let expect = oracle::cross_entropy(&logits, &labels[..valid], IGNORE_INDEX);
        prop_assert!((loss - short_loss).abs() <= 1e-12);
        prop_assert!((loss - expect).abs() <= 1e-12 * expect.max(1.0));
        for t in valid..labels.len() {
            prop_assert!(grad.row(t).iter().all(|&g| g == 0.0));
        }
    }

    #[test]
    fn standardization_downsamples_or_pads(len in 1usize..900, c in 1usize..4) {
        let values: Vec<f64> = (0..len * c).map(|i| i as f64 + 1.0).collect();
        let labels: Vec<u8> = (0..len).map(|i| (i * 4 / len) as u8).collect();
        let (v, l, orig) = standardize_length(&values, c, &labels, SEQUENCE_LEN);
        prop_assert_eq!(orig, len);
        prop_assert_eq!(v.len(), SEQUENCE_LEN * c);
        prop_assert_eq!(l.len(), SEQUENCE_LEN);
        for i in 0..SEQUENCE_LEN {
            if len > SEQUENCE_LEN {
                let src = i * len / SEQUENCE_LEN;
                prop_assert_eq!(&v[i * c..(i + 1) * c], &values[src * c..(src + 1) * c]);
                prop_assert_eq!(l[i], labels[src]);
            } else if i < len {
                prop_assert_eq!(&v[i * c..(i + 1) * c], &values[i * c..(i + 1) * c]);
                prop_assert_eq!(l[i], labels[i]);
            } else {
                prop_assert!(v[i * c..(i + 1) * c].iter().all(|&x| x == 0.0));
                prop_assert_eq!(l[i], IGNORE_INDEX);
            }
        }
    }

    #[test]
    fn downsampling_keeps_segment_order(runs in vec(1usize..120, 1..5), extra in 0usize..600) {
        // Monotone phase labels whose runs may be short enough to vanish.
        let mut labels = Vec::new();
        for (k, n) in runs.iter().enumerate() {
            labels.extend(std::iter::repeat_n(k as u8, *n));
        }
        labels.extend(std::iter::repeat_n(runs.len() as u8 - 1, extra));
        let values = vec![0.0; labels.len()];
        let (_, out, _) = standardize_length(&values, 1, &labels, SEQUENCE_LEN);
        let kept: Vec<u8> = out.into_iter().filter(|&l| l != IGNORE_INDEX).collect();
        let order = oracle::run_order(&kept);
        let full = oracle::run_order(&labels);
        // Order is a subsequence of the original and strictly increasing.
        prop_assert!(order.windows(2).all(|w| w[0] < w[1]));
        prop_assert!(order.iter().all(|l| full.contains(l)));
        prop_assert_eq!(order.first(), full.first());
    }

    #[test]
    fn nearest_neighbour_fill_uses_a_closest_observation(
        channel in vec(prop::option::weighted(0.6, -100.0f64..100.0), 1..80)
    ) {
        prop_assume!(channel.iter().any(Option::is_some));
        let filled = interpolate_nn(&channel).unwrap();
        let observed: Vec<usize> = (0..channel.len()).filter(|&i| channel[i].is_some()).collect();
        for (i, v) in filled.iter().enumerate() {
            match channel[i] {
                Some(x) => prop_assert_eq!(*v, x),
                None => {
                    let d = observed.iter().map(|&j| j.abs_diff(i)).min().unwrap();
                    let candidates: Vec<f64> = observed
                        .iter()
                        .filter(|&&j| j.abs_diff(i) == d)
                        .map(|&j| channel[j].unwrap())
                        .collect();
                    prop_assert!(candidates.contains(v));
                }
            }
        }
    }

    #[test]
    fn gate_follows_the_missing_fraction(t in 4usize..200, hand in 0.0f64..0.5, object in 0.0f64..0.5) {
        let nh = (hand * t as f64) as usize;
        let no = (object * t as f64) as usize;
        let mut rows = Vec::new();
        for f in 0..t {
            let mut row = vec![Some(1.0); 22];
            if f < nh {
                row[..21].iter_mut().for_each(|v| *v = None);
            }
            if f >= t - no {
                row[21] = None;
            }
            rows.push(row);
        }
        let seq = RawSequence::from_rows(View::Contralateral, rows).unwrap();
        let fr = missing_fraction(&seq);
        prop_assert_eq!(fr.hand, nh as f64 / t as f64);
        prop_assert_eq!(fr.object, no as f64 / t as f64);
        let cfg = RefineConfig::default();
        prop_assert_eq!(accept(fr, &cfg), 4 * nh <= t && 4 * no <= t);
    }

    #[test]
    fn folds_are_disjoint_and_complete(n in 2usize..60, k in 2usize..8, seed in any::<u64>()) {
        prop_assume!(n >= k);
        let patients: Vec<String> = (0..n).map(|i| format!("p{i:03}")).collect();
        let plan = kfold_patients(patients.clone(), k, seed).unwrap();
        prop_assert_eq!(plan.folds.len(), k);
        let mut seen = BTreeSet::new();
        for f in &plan.folds {
            prop_assert!(!f.is_empty());
            prop_assert!(f.len().abs_diff(n / k) <= 1);
            for p in f {
                prop_assert!(seen.insert(p.clone()), "{p} in two folds");
            }
        }
        prop_assert_eq!(seen, patients.into_iter().collect::<BTreeSet<_>>());
        prop_assert_eq!(plan.clone(), kfold_patients(plan.folds.concat(), k, seed).unwrap());
    }

    #[test]
    fn attention_matches_oracle_and_permutes_with_queries(
        tq in 1usize..7,
        tk in 1usize..7,
        d in 1usize..6,
        seed in any::<u64>(),
    ) {
        let mut state = seed | 1;
        let mut next = move || {
            state ^= state << 13;
            state ^= state >> 7;
            state ^= state << 17;
            (state >> 11) as f64 / (1u64 << 53) as f64 * 4.0 - 2.0
        };
        let q: Vec<f64> = (0..tq * d).map(|_| next()).collect();
        let k: Vec<f64> = (0..tk * d).map(|_| next()).collect();
        let v: Vec<f64> = (0..tk * d).map(|_| next()).collect();
        let (out, w) = scaled_dot_product_attention(
            &Tensor::matrix(tq, d, q.clone()).unwrap(),
            &Tensor::matrix(tk, d, k.clone()).unwrap(),
            &Tensor::matrix(tk, d, v.clone()).unwrap(),
        )
        .unwrap();
        let m = |r, c, x: &[f64]| DMatrix::from_row_slice(r, c, x);
        let (o_out, o_w) = oracle::attention(&m(tq, d, &q), &m(tk, d, &k), &m(tk, d, &v));
        for i in 0..tq {
            for j in 0..tk {
                prop_assert!((w.at(i, j) - o_w[(i, j)]).abs() < 1e-12);
            }
            for j in 0..d {
                prop_assert!((out.at(i, j) - o_out[(i, j)]).abs() < 1e-12);
            }
        }

        // Reversing the keys and values together leaves the output unchanged;
        // reversing the queries reverses the output rows.
        let rev = |x: &[f64], rows: usize| -> Vec<f64> {
            (0..rows).rev().flat_map(|r| x[r * d..(r + 1) * d].to_vec()).collect()
        };
        let (out_kv, _) = scaled_dot_product_attention(
            &Tensor::matrix(tq, d, q.clone()).unwrap(),
            &Tensor::matrix(tk, d, rev(&k, tk)).unwrap(),
            &Tensor::matrix(tk, d, rev(&v, tk)).unwrap(),
        )
        .unwrap();
        prop_assert!(out_kv.max_abs_diff(&out) < 1e-12);
        let (out_q, _) = scaled_dot_product_attention(
            &Tensor::matrix(tq, d, rev(&q, tq)).unwrap(),
            &Tensor::matrix(tk, d, k).unwrap(),
            &Tensor::matrix(tk, d, v).unwrap(),
        )
        .unwrap();
        for i in 0..tq {
            prop_assert_eq!(out_q.row(i), out.row(tq - 1 - i));
        }
    }

    #[test]
    fn mean_std_matches_two_pass_formula(xs in vec(0.0f64..1.0, 1..20)) {
        let (m, s) = mean_std(&xs);
        let n = xs.len() as f64;
        let mean = xs.iter().sum::<f64>() / n;
        let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
        prop_assert!((m - mean).abs() < 1e-12);
        prop_assert!((s - var.sqrt()).abs() < 1e-12);
    }
}

#[test]
fn downsample_indices_are_floor_multiples() {
    assert_eq!(downsample_indices(600, 300), (0..300).map(|i| 2 * i).collect::<Vec<_>>());
    let idx = downsample_indices(301, 300);
    assert_eq!(idx[..3], [0, 1, 2]);
    assert_eq!(idx[299], 299 * 301 / 300);
}

#[test]
fn parameter_counts_match_layer_enumeration() {
    for name in MODEL_NAMES {
        let cfg = ModelConfig::from_name(name, 22, 4).unwrap();
        let want = oracle::param_count(
            cfg.n_trans_layers,
            cfg.n_lstm_layers,
            22,
            4,
            128,
            64,
            256,
        );
        assert_eq!(count_params(&cfg), want, "{name}");
    }
    for (name, c, nc) in [("Trans2", 21, 3), ("LSTM2", 21, 3), ("Trans1LSTM2", 7, 5)] {
        let cfg = ModelConfig::from_name(name, c, nc).unwrap();
        let want = oracle::param_count(cfg.n_trans_layers, cfg.n_lstm_layers, c, nc, 128, 64, 256);
        assert_eq!(count_params(&cfg), want, "{name}");
    }
}

#[test]
fn fold_seeds_differ_between_folds_and_master_seeds() {
    let seeds: BTreeSet<u64> = (0..4u64)
        .flat_map(|s| (0..10).map(move |f| fold_seed(s, f)))
        .collect();
    assert_eq!(seeds.len(), 40);
}
