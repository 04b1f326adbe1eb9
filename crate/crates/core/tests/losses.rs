use proptest::collection::vec;
use proptest::prelude::*;
use raa_core::losses::{contrastive, cross_entropy, total_loss, LossConfig, PairSemantics};
use raa_core::Tensor;

fn rows(n: usize, f: usize, data: &[f64]) -> Tensor {
    Tensor::new(vec![n, f], data[..n * f].to_vec()).unwrap()
}

/// Direct evaluation of the pairwise definition.
fn contrastive_oracle(x: &Tensor, labels: &[usize], cfg: &LossConfig) -> f64 {
    let [n, f] = *x.shape() else { unreachable!() };
    let mut total = 0.0;
    for i in 0..n {
        for j in 0..n {
            if i == j {
                continue;
            }
            let d = (0..f).map(|k| (x.data()[i * f + k] - x.data()[j * f + k]).powi(2)).sum::<f64>().sqrt();
            let same = match cfg.pair_semantics {
                PairSemantics::Product => (labels[i] * labels[j]) as f64,
                PairSemantics::Indicator => f64::from(labels[i] == labels[j]),
            };
            total += same * (d - cfg.m1).max(0.0).powi(2) + (1.0 - same) * (cfg.m2 - d).max(0.0).powi(2);
        }
    }
    total / n as f64
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn cross_entropy_properties(n in 1usize..6, data in vec(-30.0f64..30.0, 12), labels in vec(0usize..2, 6)) {
        let logits = rows(n, 2, &data);
        let (l, g) = cross_entropy(&logits, &labels[..n]).unwrap();
        prop_assert!(l >= 0.0);
        for r in g.data().chunks_exact(2) {
            prop_assert!((r[0] + r[1]).abs() < 1e-15);
        }
        // shifting a row leaves it unchanged
        let shifted = logits.map(|v| v + 7.0);
        let (l2, _) = cross_entropy(&shifted, &labels[..n]).unwrap();
        prop_assert!((l - l2).abs() <= 1e-12 * l.max(1.0));
    }

    #[test]
    fn contrastive_matches_definition(
        n in 1usize..6,
        f in 1usize..4,
        data in vec(-2.0f64..2.0, 24),
        labels in vec(0usize..2, 6),
        indicator in any::<bool>(),
    ) {
        let x = rows(n, f, &data);
        let cfg = LossConfig {
            pair_semantics: if indicator { PairSemantics::Indicator } else { PairSemantics::Product },
            ..LossConfig::default()
        };
        let (l, g) = contrastive(&x, &labels[..n], &cfg).unwrap();
        let want = contrastive_oracle(&x, &labels[..n], &cfg);
        prop_assert!((l - want).abs() <= 1e-12 * want.max(1.0));
        prop_assert!(l >= 0.0);
        // translation invariance: gradients over samples sum to zero
        for k in 0..f {
            let s: f64 = (0..n).map(|i| g.data()[i * f + k]).sum();
            prop_assert!(s.abs() < 1e-12);
        }
    }

    #[test]
    fn contrastive_gradient_matches_differences(data in vec(-2.0f64..2.0, 8), labels in vec(0usize..2, 4)) {
        let x = rows(4, 2, &data);
        let cfg = LossConfig::default();
        let (_, g) = contrastive(&x, &labels, &cfg).unwrap();
        let eps = 1e-6;
        for k in 0..8 {
            let mut up = x.clone();
            up.data_mut()[k] += eps;
            let mut dn = x.clone();
            dn.data_mut()[k] -= eps;
            let num = (contrastive_oracle(&up, &labels, &cfg) - contrastive_oracle(&dn, &labels, &cfg)) / (2.0 * eps);
            prop_assert!((num - g.data()[k]).abs() < 1e-5, "coord {}: {} vs {}", k, num, g.data()[k]);
        }
    }
}

#[test]
fn pinned_values() {
    let (l, _) = cross_entropy(&Tensor::from_rows(&[vec![0.0, 0.0]]).unwrap(), &[0]).unwrap();
    assert!((l - std::f64::consts::LN_2).abs() <= 1e-12);
    let x = Tensor::from_rows(&[vec![0.0], vec![1.0]]).unwrap();
    let cfg = LossConfig { m1: 0.5, ..LossConfig::default() };
    assert!((contrastive(&x, &[1, 1], &cfg).unwrap().0 - 0.25).abs() <= 1e-12);
    assert_eq!(contrastive(&x, &[0, 0], &cfg).unwrap().0, 1.0);
    let ind = LossConfig { pair_semantics: PairSemantics::Indicator, ..cfg };
    assert_eq!(contrastive(&x, &[0, 0], &ind).unwrap().0, 0.25);
}

#[test]
fn total_is_weighted_sum() {
    let logits = Tensor::from_rows(&[vec![0.2, -0.4], vec![1.0, 0.1], vec![-0.3, 0.3]]).unwrap();
    let feats = Tensor::from_rows(&[vec![0.0, 1.0], vec![0.5, 0.2], vec![2.0, -1.0]]).unwrap();
    let labels = [1, 0, 1];
    let cfg = LossConfig { lambda: 0.3, ..LossConfig::default() };
    let t = total_loss(&logits, &feats, &labels, &cfg).unwrap();
    let (ce, _) = cross_entropy(&logits, &labels).unwrap();
    let (cl, gcl) = contrastive(&feats, &labels, &cfg).unwrap();
    assert_eq!(t.total, ce + 0.3 * cl);
    assert!(t.grad_features.max_abs_diff(&gcl.scale(0.3)) < 1e-15);
}
