pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

/// Cross-entropy of `softmax(logits)` against class `target`, with the
/// gradient w.r.t. the logits.
pub fn softmax_cross_entropy(logits: &[f64], target: usize) -> (f64, Vec<f64>) {
    let mut p = softmax(logits);
    let loss = -p[target].max(1e-300).ln();
    p[target] -= 1.0;
    (loss, p)
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else {
        x.max(0.0) + (-x.abs()).exp().ln_1p()
    }
}

/// Binary cross-entropy of `sigmoid(logit)` against `y` in [0, 1], with the
/// gradient w.r.t. the logit.
pub fn bce_with_logit(logit: f64, y: f64) -> (f64, f64) {
    let loss = y * softplus(-logit) + (1.0 - y) * softplus(logit);
    (loss, sigmoid(logit) - y)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn softmax_sums_to_one() {
        let p = softmax(&[1000.0, -3.0, 2.5, 999.0]);
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn ce_gradient_matches_finite_difference() {
        let logits = [0.3, -1.2, 2.0];
        let (_, g) = softmax_cross_entropy(&logits, 1);
        for i in 0..3 {
            let mut a = logits;
            let mut b = logits;
            a[i] += 1e-6;
            b[i] -= 1e-6;
            let fd = (softmax_cross_entropy(&a, 1).0 - softmax_cross_entropy(&b, 1).0) / 2e-6;
            assert!((fd - g[i]).abs() < 1e-7);
        }
    }

    #[test]
    fn bce_gradient_matches_finite_difference() {
        for &(z, y) in &[(0.7, 1.0), (-2.0, 0.0), (40.0, 0.0), (-40.0, 1.0)] {
            let (_, g) = bce_with_logit(z, y);
            let fd = (bce_with_logit(z + 1e-6, y).0 - bce_with_logit(z - 1e-6, y).0) / 2e-6;
            assert!((fd - g).abs() < 1e-6, "z={z} fd={fd} g={g}");
        }
    }
}
