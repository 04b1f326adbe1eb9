use super::forward::AffinityField;
use crate::error::{RaaError, Result};
use crate::tensor::Tensor;

/// Incoming attention mass per pixel, `Σ_i A_ij`, min-max scaled to `[0, 1]`.
/// A constant field maps to all zeros.
pub fn summarize_affinity(affinity: &AffinityField, h: usize, w: usize) -> Result<Tensor> {
    let nb = &affinity.neighbors;
    if nb.h != h || nb.w != w {
        return Err(RaaError::dim(
            "summarize_affinity",
            format!("field grid {}x{} vs requested {h}x{w}", nb.h, nb.w),
        ));
    }
    let mut mass = vec![0.0; h * w];
    for (&j, &a) in nb.ids().iter().zip(&affinity.weights) {
        mass[j] += a;
    }
    let lo = mass.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = mass.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let span = hi - lo;
    let out = if span > 0.0 {
        mass.iter().map(|m| (m - lo) / span).collect()
    } else {
        vec![0.0; h * w]
    };
    Tensor::new(vec![h, w], out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::raa::build_neighborhoods;
    use std::sync::Arc;

    fn uniform(h: usize, w: usize, window: usize) -> AffinityField {
        let nb = Arc::new(build_neighborhoods(h, w, window, true).unwrap());
        let mut weights = Vec::new();
        for i in 0..h * w {
            let k = nb.neighbors(i).len();
            weights.extend(std::iter::repeat_n(1.0 / k as f64, k));
        }
        AffinityField {
            neighbors: nb,
            distances_raw: vec![0.0; weights.len()],
            distances_mlp: vec![0.0; weights.len()],
            weights,
        }
    }

    #[test]
    fn single_pixel_is_zero() {
        let s = summarize_affinity(&uniform(1, 1, 3), 1, 1).unwrap();
        assert_eq!(s.data(), &[0.0]);
    }

    #[test]
    fn center_collects_most_mass() {
        let f = uniform(3, 3, 3);
        let s = summarize_affinity(&f, 3, 3).unwrap();
        let (argmax, _) = s
            .data()
            .iter()
            .enumerate()
            .fold((0, f64::MIN), |acc, (i, &v)| if v > acc.1 { (i, v) } else { acc });
        assert_eq!(argmax, 4);
        assert_eq!(s.data()[4], 1.0);
    }

    #[test]
    fn one_hot_to_pixel_zero() {
        let mut f = uniform(3, 3, 5);
        let nb = Arc::clone(&f.neighbors);
        for i in 0..9 {
            for (p, &j) in nb.row_range(i).zip(nb.neighbors(i)) {
                f.weights[p] = if j == 0 { 1.0 } else { 0.0 };
            }
        }
        let s = summarize_affinity(&f, 3, 3).unwrap();
        assert_eq!(s.data(), &[1.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn grid_mismatch() {
        assert!(summarize_affinity(&uniform(2, 2, 3), 3, 3).is_err());
    }
}
