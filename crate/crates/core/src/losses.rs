//! Cross-entropy, pairwise-margin contrastive loss, and their weighted sum.

use std::fmt;
use std::str::FromStr;

use crate::error::{RaaError, Result};
use crate::tensor::Tensor;

/// How a pair's "same class" weight is formed from labels `y_i, y_j ∈ {0,1}`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum PairSemantics {
    /// `y_i·y_j`: only malignant–malignant pairs take the pull term; a
    /// benign–benign pair is pushed like a mixed pair.
    #[default]
    Product,
    /// `1[y_i = y_j]`.
    Indicator,
}

impl FromStr for PairSemantics {
    type Err = RaaError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "product" => Ok(PairSemantics::Product),
            "indicator" => Ok(PairSemantics::Indicator),
            other => Err(RaaError::Config(format!("unknown pair semantics `{other}`"))),
        }
    }
}

impl fmt::Display for PairSemantics {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            PairSemantics::Product => "product",
            PairSemantics::Indicator => "indicator",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossConfig {
    pub lambda: f64,
    pub m1: f64,
    pub m2: f64,
    pub pair_semantics: PairSemantics,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            lambda: 0.1,
            m1: 0.5,
            m2: 2.0,
            pair_semantics: PairSemantics::Product,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda >= 0.0) {
            return Err(RaaError::Config("loss.lambda must be >= 0".into()));
        }
        if !(0.0 <= self.m1 && self.m1 < self.m2) {
            return Err(RaaError::Config("need 0 <= loss.m1 < loss.m2".into()));
        }
        Ok(())
    }
}

fn check_labels(labels: &[usize], n: usize, classes: usize) -> Result<()> {
    if labels.len() != n {
        return Err(RaaError::dim("loss", format!("{n} rows but {} labels", labels.len())));
    }
    if let Some(&bad) = labels.iter().find(|&&y| y >= classes) {
        return Err(RaaError::Eval(format!("label {bad} out of range for {classes} classes")));
    }
    Ok(())
}

/// Row-wise softmax of `[N×C]` logits.
pub fn softmax_rows(logits: &Tensor) -> Tensor {
    let c = *logits.shape().last().unwrap();
    let mut out = logits.data().to_vec();
    for row in out.chunks_exact_mut(c) {
        let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut s = 0.0;
        for v in row.iter_mut() {
            *v = (*v - m).exp();
            s += *v;
        }
        row.iter_mut().for_each(|v| *v /= s);
    }
    Tensor::new(logits.shape().to_vec(), out).expect("shape")
}

/// Mean negative log-likelihood of the true class; gradient `(p − onehot)/N`.
pub fn cross_entropy(logits: &Tensor, labels: &[usize]) -> Result<(f64, Tensor)> {
    let [n, c] = *logits.shape() else {
        return Err(RaaError::dim("cross_entropy", format!("expected [N, C], got {:?}", logits.shape())));
    };
    check_labels(labels, n, c)?;
    let mut loss = 0.0;
    let mut grad = vec![0.0; n * c];
    for ((row, g), &y) in logits.data().chunks_exact(c).zip(grad.chunks_exact_mut(c)).zip(labels) {
        let top = (0..c).fold(0, |b, k| if row[k] > row[b] { k } else { b });
        let m = row[top];
        // ln_1p over the non-maximal terms keeps confident rows accurate
        let rest: f64 = row.iter().enumerate().filter(|&(k, _)| k != top).map(|(_, v)| (v - m).exp()).sum();
        let tail = rest.ln_1p();
        loss += (m - row[y]) + tail;
        for (k, gk) in g.iter_mut().enumerate() {
            // relative to the max, so a confident row does not round through m + tail
            let z = (row[k] - m) - tail;
            let g = match (k == y, k == top) {
                (true, true) => z.exp_m1(),
                (true, false) => z.exp() - 1.0,
                (false, _) => z.exp(),
            };
            *gk = g / n as f64;
        }
    }
    Ok((loss / n as f64, Tensor::new(vec![n, c], grad)?))
}

/// Pairwise-margin contrastive loss over all ordered pairs `(i, j≠i)`,
/// normalized by `1/N`:
///
/// `s_ij·max(0, d_ij − m1)² + (1 − s_ij)·max(0, m2 − d_ij)²`, `d_ij = ‖f_i − f_j‖₂`.
///
/// Batches with fewer than two rows give zero loss and zero gradient.
pub fn contrastive(features: &Tensor, labels: &[usize], config: &LossConfig) -> Result<(f64, Tensor)> {
    let [n, f] = *features.shape() else {
        return Err(RaaError::dim("contrastive", format!("expected [N, F], got {:?}", features.shape())));
    };
    check_labels(labels, n, 2)?;
    let mut grad = vec![0.0; n * f];
    if n < 2 {
        return Ok((0.0, Tensor::new(vec![n, f], grad)?));
    }
    let data = features.data();
    let mut loss = 0.0;
    let mut diff = vec![0.0; f];
    for i in 0..n {
        for j in 0..n {
            if i == j {
                continue;
            }
            let fi = &data[i * f..(i + 1) * f];
            let fj = &data[j * f..(j + 1) * f];
            let mut sq = 0.0;
            for ((d, a), b) in diff.iter_mut().zip(fi).zip(fj) {
                *d = a - b;
                sq += *d * *d;
            }
            let dist = sq.sqrt();
            let same = match config.pair_semantics {
                PairSemantics::Product => (labels[i] * labels[j]) as f64,
                PairSemantics::Indicator => (labels[i] == labels[j]) as u8 as f64,
            };
            let pull = (dist - config.m1).max(0.0);
            let push = (config.m2 - dist).max(0.0);
            loss += same * pull * pull + (1.0 - same) * push * push;
            // ∂/∂dist; zero distance has zero gradient
            let g_dist = 2.0 * same * pull - 2.0 * (1.0 - same) * push;
            if g_dist == 0.0 || dist == 0.0 {
                continue;
            }
            let scale = g_dist / (dist * n as f64);
            for k in 0..f {
                grad[i * f + k] += scale * diff[k];
                grad[j * f + k] -= scale * diff[k];
            }
        }
    }
    Ok((loss / n as f64, Tensor::new(vec![n, f], grad)?))
}

#[derive(Debug, Clone)]
pub struct TotalLoss {
    pub ce: f64,
    pub cl: f64,
    pub total: f64,
    pub grad_logits: Tensor,
    pub grad_features: Tensor,
}

/// `L = L_CE + λ·L_CL` with additive gradients. The contrastive term is
/// skipped entirely when `λ = 0`.
pub fn total_loss(logits: &Tensor, features: &Tensor, labels: &[usize], config: &LossConfig) -> Result<TotalLoss> {
    config.validate()?;
    let (ce, grad_logits) = cross_entropy(logits, labels)?;
    if config.lambda == 0.0 {
        return Ok(TotalLoss {
            ce,
            cl: 0.0,
            total: ce,
            grad_logits,
            grad_features: Tensor::zeros(features.shape()),
        });
    }
    let (cl, g) = contrastive(features, labels, config)?;
    Ok(TotalLoss {
        ce,
        cl,
        total: ce + config.lambda * cl,
        grad_logits,
        grad_features: g.scale(config.lambda),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(rows: &[Vec<f64>]) -> Tensor {
        Tensor::from_rows(rows).unwrap()
    }

    #[test]
    fn ce_uniform_is_ln2() {
        let (l, g) = cross_entropy(&t(&[vec![0.0, 0.0]]), &[0]).unwrap();
        assert!((l - std::f64::consts::LN_2).abs() < 1e-12);
        assert_eq!(g.data(), &[-0.5, 0.5]);
    }

    #[test]
    fn ce_confident() {
        let (l, _) = cross_entropy(&t(&[vec![10.0, -10.0]]), &[0]).unwrap();
        let expect = (-20f64).exp().ln_1p();
        assert!((l - expect).abs() < 1e-24);
        assert!((l - 2.061e-9).abs() < 1e-12);
    }

    #[test]
    fn ce_errors() {
        assert!(cross_entropy(&Tensor::zeros(&[2]), &[0, 1]).is_err());
        assert!(cross_entropy(&Tensor::zeros(&[1, 2]), &[2]).is_err());
    }

    #[test]
    fn contrastive_hand_cases() {
        let cfg = LossConfig::default();
        let (l, g) = contrastive(&t(&[vec![0.3, 0.1], vec![0.3, 0.1]]), &[1, 1], &cfg).unwrap();
        assert_eq!(l, 0.0);
        assert!(g.data().iter().all(|&v| v == 0.0));

        let (l, _) = contrastive(&t(&[vec![0.0], vec![1.0]]), &[1, 1], &cfg).unwrap();
        assert!((l - 0.25).abs() < 1e-12);

        let (l, _) = contrastive(&t(&[vec![0.0], vec![1.0]]), &[0, 0], &cfg).unwrap();
        assert_eq!(l, 1.0);
        let ind = LossConfig {
            pair_semantics: PairSemantics::Indicator,
            ..cfg
        };
        let (l, _) = contrastive(&t(&[vec![0.0], vec![1.0]]), &[0, 0], &ind).unwrap();
        assert_eq!(l, 0.25);
    }

    #[test]
    fn contrastive_singleton_is_zero() {
        let (l, g) = contrastive(&t(&[vec![1.0, 2.0]]), &[1], &LossConfig::default()).unwrap();
        assert_eq!(l, 0.0);
        assert_eq!(g.data(), &[0.0, 0.0]);
    }

    #[test]
    fn lambda_zero_is_pure_ce() {
        let logits = t(&[vec![0.3, -0.2], vec![1.0, 0.5]]);
        let feats = t(&[vec![0.0], vec![1.0]]);
        let cfg = LossConfig {
            lambda: 0.0,
            ..Default::default()
        };
        let tl = total_loss(&logits, &feats, &[1, 1], &cfg).unwrap();
        let (ce, _) = cross_entropy(&logits, &[1, 1]).unwrap();
        assert_eq!(tl.total, ce);

        let tl = total_loss(&logits, &feats, &[1, 1], &LossConfig::default()).unwrap();
        assert!((tl.total - (ce + 0.1 * 0.25)).abs() < 1e-15);
    }

    #[test]
    fn config_validation() {
        let mut c = LossConfig::default();
        c.m1 = 3.0;
        assert!(c.validate().is_err());
        c = LossConfig { lambda: -1.0, ..Default::default() };
        assert!(c.validate().is_err());
        assert_eq!("indicator".parse::<PairSemantics>().unwrap(), PairSemantics::Indicator);
    }
}
