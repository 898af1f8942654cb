//! Independent reference implementations used by the integration and
//! acceptance tests. Nothing here calls into the library's numeric code.
#![allow(dead_code)]

use nalgebra::{DMatrix, DVector};

/// Savitzky-Golay smoothing by explicit least-squares fits: every output
/// sample fits a degree-`order` polynomial to its window (the first or last
/// full window near the edges) and evaluates it at the sample.
pub fn savgol(x: &[f64], window: usize, order: usize) -> Vec<f64> {
    let n = x.len();
    let half = window / 2;
    let scale = half.max(1) as f64;
    (0..n)
        .map(|i| {
            let start = i.saturating_sub(half).min(n - window);
            let a = DMatrix::from_fn(window, order + 1, |r, c| {
                ((r as f64 - half as f64) / scale).powi(c as i32)
            });
            let b = DVector::from_column_slice(&x[start..start + window]);
            let coef = a.clone().svd(true, true).solve(&b, 1e-14).expect("svd solve");
            let u = (i - start) as f64 - half as f64;
            (0..=order).map(|c| coef[c] * (u / scale).powi(c as i32)).sum()
        })
        .collect()
}

/// Mean cross-entropy over the rows whose label is not `ignore`, computed row
/// by row with a shifted log-sum-exp.
pub fn cross_entropy(logits: &[Vec<f64>], labels: &[u8], ignore: u8) -> f64 {
    let mut total = 0.0;
    let mut n = 0usize;
    for (row, &y) in logits.iter().zip(labels) {
        if y == ignore {
            continue;
        }
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
        total += lse - row[y as usize];
        n += 1;
    }
    total / n as f64
}

/// Attention `softmax(q k^T / sqrt(d)) v` via nalgebra; returns (output, weights).
pub fn attention(q: &DMatrix<f64>, k: &DMatrix<f64>, v: &DMatrix<f64>) -> (DMatrix<f64>, DMatrix<f64>) {
    let mut s = q * k.transpose() / (q.ncols() as f64).sqrt();
    for mut row in s.row_iter_mut() {
        let m = row.max();
        row.apply(|x| *x = (*x - m).exp());
        let z = row.sum();
        row /= z;
    }
    (&s * v, s)
}

/// Trainable scalars of each architecture, enumerated layer by layer:
/// optional input projection and post-norm encoder blocks (4 attention
/// projections, 2 layer norms, 2-layer feed-forward), stacked LSTMs with a
/// single bias per gate, and a linear classification head.
pub fn param_count(
    trans: usize,
    lstm: usize,
    channels: usize,
    classes: usize,
    embed: usize,
    d_ff: usize,
    hidden: usize,
) -> usize {
    let dense = |i: usize, o: usize| i * o + o;
    let mut total = 0;
    let mut width = channels;
    if trans > 0 {
        total += dense(channels, embed);
        let attention = 4 * dense(embed, embed);
        let norms = 2 * (2 * embed);
        let ffn = dense(embed, d_ff) + dense(d_ff, embed);
        total += trans * (attention + norms + ffn);
        width = embed;
    }
    for _ in 0..lstm {
        total += 4 * (width * hidden + hidden * hidden + hidden);
        width = hidden;
    }
    total + dense(width, classes)
}

/// Run-length encoding of a label sequence: the order of distinct runs.
pub fn run_order(labels: &[u8]) -> Vec<u8> {
    let mut out: Vec<u8> = Vec::new();
    for &l in labels {
        if out.last() != Some(&l) {
            out.push(l);
        }
    }
    out
}
