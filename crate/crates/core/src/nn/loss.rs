use crate::error::{invalid, Result};
use crate::tensor::Tensor;

/// Mean softmax cross-entropy over the batch and its gradient with
/// respect to the logits.
pub fn cross_entropy(logits: &Tensor, labels: &[usize]) -> Result<(f64, Tensor)> {
    let n = logits.shape()[0];
    let classes = logits.item_len();
    if labels.len() != n {
        return invalid(format!("{} labels for a batch of {n}", labels.len()));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
        return invalid(format!("label {bad} out of range for {classes} classes"));
    }
    let mut grad = logits.zeros_like();
    let mut loss = 0.0;
    let inv_n = 1.0 / n as f64;
    for (b, &label) in labels.iter().enumerate() {
        let row = logits.item(b);
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let denom: f64 = row.iter().map(|v| (v - max).exp()).sum();
        let log_denom = denom.ln();
        loss -= row[label] - max - log_denom;
        for (g, v) in grad.item_mut(b).iter_mut().zip(row) {
            *g = (v - max).exp() / denom * inv_n;
        }
        grad.item_mut(b)[label] -= inv_n;
    }
    Ok((loss * inv_n, grad))
}

/// Index of the largest logit per item; ties go to the lower index.
pub fn argmax_rows(logits: &Tensor) -> Vec<usize> {
    (0..logits.shape()[0])
        .map(|b| {
            let row = logits.item(b);
            let mut best = 0;
            for (i, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = i;
                }
            }
            best
        })
        .collect()
}

/// Number of items whose argmax equals the label.
pub fn accuracy(logits: &Tensor, labels: &[usize]) -> usize {
    argmax_rows(logits).iter().zip(labels).filter(|(p, l)| p == l).count()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn uniform_logits_give_log_classes() {
        let (loss, _) = cross_entropy(&Tensor::zeros([3, 10, 1, 1]), &[0, 4, 9]).unwrap();
        assert!((loss - 10f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn large_margin_gives_tiny_loss() {
        let mut logits = Tensor::zeros([1, 10, 1, 1]);
        logits.data_mut()[3] = 50.0;
        let (loss, _) = cross_entropy(&logits, &[3]).unwrap();
        assert!(loss < 1e-10);
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let logits = Tensor::from_fn([2, 5, 1, 1], |[b, c, _, _]| ((b * 5 + c) as f64 * 0.77).sin() * 3.0);
        let labels = [1, 4];
        let (_, grad) = cross_entropy(&logits, &labels).unwrap();
        let h = 1e-6;
        for i in 0..logits.len() {
            let mut up = logits.clone();
            up.data_mut()[i] += h;
            let mut down = logits.clone();
            down.data_mut()[i] -= h;
            let fd = (cross_entropy(&up, &labels).unwrap().0 - cross_entropy(&down, &labels).unwrap().0) / (2.0 * h);
            let g = grad.data()[i];
            assert!((fd - g).abs() <= 1e-6 * g.abs().max(1e-3), "{fd} vs {g}");
        }
    }

    #[test]
    fn label_out_of_range_is_rejected() {
        assert!(cross_entropy(&Tensor::zeros([1, 3, 1, 1]), &[3]).is_err());
    }

    #[test]
    fn argmax_prefers_first_on_ties() {
        let logits = Tensor::from_vec([2, 3, 1, 1], vec![1.0, 1.0, 0.0, 0.0, 2.0, 2.0]).unwrap();
        assert_eq!(argmax_rows(&logits), vec![0, 1]);
        assert_eq!(accuracy(&logits, &[0, 2]), 1);
    }
}
