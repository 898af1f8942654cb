use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Summed negative log-likelihood over non-ignored frames.
#[derive(Debug, Clone)]
pub struct CrossEntropySum {
    pub loss_sum: f64,
    /// Frames that contributed.
    pub count: usize,
    /// Frames whose argmax matched the label.
    pub correct: usize,
    /// Gradient of `loss_sum` with respect to the logits; zero on ignored rows.
    pub dlogits: Tensor,
}

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = i;
        }
    }
    best
}

pub fn cross_entropy_sum(logits: &Tensor, labels: &[u8], ignore_index: u8) -> Result<CrossEntropySum> {
    let (t, nc) = (logits.rows(), logits.cols());
    if labels.len() != t {
        return Err(Error::Shape(format!(
            "{t} logit rows but {} labels",
            labels.len()
        )));
    }
    let mut dlogits = Tensor::zeros(logits.shape());
    let mut loss_sum = 0.0;
    let mut count = 0;
    let mut correct = 0;
    for (r, &label) in labels.iter().enumerate() {
        if label == ignore_index {
            continue;
        }
        let y = label as usize;
        if y >= nc {
            return Err(Error::Shape(format!(
                "label {label} at frame {r} is outside {nc} classes"
            )));
        }
        let row = logits.row(r);
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let sum_exp: f64 = row.iter().map(|v| (v - max).exp()).sum();
        let log_z = max + sum_exp.ln();
        loss_sum += log_z - row[y];
        count += 1;
        if argmax(row) == y {
            correct += 1;
        }
        let d = dlogits.row_mut(r);
        for (j, dv) in d.iter_mut().enumerate() {
            *dv = (row[j] - log_z).exp();
        }
        d[y] -= 1.0;
    }
    Ok(CrossEntropySum {
        loss_sum,
        count,
        correct,
        dlogits,
    })
}

/// Mean cross-entropy over frames whose label is not `ignore_index`, with its
/// gradient. Ignored frames receive exactly zero gradient.
pub fn masked_cross_entropy_with_grad(
    logits: &Tensor,
    labels: &[u8],
    ignore_index: u8,
) -> Result<(f64, Tensor)> {
    let mut ce = cross_entropy_sum(logits, labels, ignore_index)?;
    if ce.count == 0 {
        return Err(Error::EmptyLoss);
    }
    let n = ce.count as f64;
    ce.dlogits.scale(1.0 / n);
    Ok((ce.loss_sum / n, ce.dlogits))
}

pub fn masked_cross_entropy(logits: &Tensor, labels: &[u8], ignore_index: u8) -> Result<f64> {
    masked_cross_entropy_with_grad(logits, labels, ignore_index).map(|(l, _)| l)
}

#[cfg(test)]
mod tests {
    use super::*;

    const IGN: u8 = 255;

    #[test]
    fn uniform_logits_give_log_classes() {
        let logits = Tensor::zeros(&[5, 4]);
        let loss = masked_cross_entropy(&logits, &[0, 1, 2, 3, 0], IGN).unwrap();
        assert!((loss - 4f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn confident_correct_prediction_has_vanishing_loss() {
        let logits = Tensor::matrix(2, 3, vec![100.0, 0.0, 0.0, 0.0, 0.0, 100.0]).unwrap();
        let loss = masked_cross_entropy(&logits, &[0, 2], IGN).unwrap();
        assert!(loss < 1e-40);
    }

    #[test]
    fn ignored_frames_have_zero_gradient() {
        let logits = Tensor::matrix(3, 2, vec![0.3, -1.0, 2.0, 0.5, -0.7, 0.1]).unwrap();
        let (_, d) = masked_cross_entropy_with_grad(&logits, &[1, IGN, 0], IGN).unwrap();
        assert_eq!(d.row(1), &[0.0, 0.0]);
        assert!(d.row(0).iter().any(|&v| v != 0.0));
    }

    #[test]
    fn all_ignored_is_empty_loss() {
        let logits = Tensor::zeros(&[2, 3]);
        assert!(matches!(
            masked_cross_entropy(&logits, &[IGN, IGN], IGN),
            Err(Error::EmptyLoss)
        ));
    }

    #[test]
    fn out_of_range_label_is_rejected() {
        let logits = Tensor::zeros(&[1, 3]);
        assert!(masked_cross_entropy(&logits, &[3], IGN).is_err());
    }

    #[test]
    fn argmax_ties_pick_lowest_index() {
        assert_eq!(argmax(&[1.0, 3.0, 3.0]), 1);
        assert_eq!(argmax(&[0.0, 0.0]), 0);
    }
}
