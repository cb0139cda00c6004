//! Multi-class losses with analytic gradients with respect to the scores.

use crate::error::{Error, Result};

/// A loss value together with `∂loss/∂score_k` for every class.
#[derive(Clone, Debug, PartialEq)]
pub struct LossValueGrad {
    pub value: f64,
    pub grad_scores: Vec<f64>,
}

/// A per-class multi-class loss `L(scores, j)`.
pub trait ClassLoss: Sync {
    fn eval(&self, scores: &[f64], class: usize) -> Result<LossValueGrad>;

    fn value(&self, scores: &[f64], class: usize) -> Result<f64> {
        self.eval(scores, class).map(|lv| lv.value)
    }
}

/// One-versus-rest square loss: `ψ(f_j) + Σ_{k≠j} ψ(-f_k)` with `ψ(z) = (1 - z)² / 4`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct OvrSquare;

impl ClassLoss for OvrSquare {
    fn eval(&self, scores: &[f64], class: usize) -> Result<LossValueGrad> {
        ovr_square_loss(scores, class)
    }

    fn value(&self, scores: &[f64], class: usize) -> Result<f64> {
        check_class(scores.len(), class)?;
        Ok(scores
            .iter()
            .enumerate()
            .map(|(k, &f)| {
                let margin = if k + 1 == class { f } else { -f };
                psi(margin)
            })
            .sum())
    }
}

#[inline]
fn psi(z: f64) -> f64 {
    let r = 1.0 - z;
    r * r / 4.0
}

fn check_class(k: usize, class: usize) -> Result<()> {
    if class == 0 || class > k {
        return Err(Error::param(format!("class {class} outside 1..={k}")));
    }
    Ok(())
}

pub fn ovr_square_loss(scores: &[f64], class: usize) -> Result<LossValueGrad> {
    check_class(scores.len(), class)?;
    let mut value = 0.0;
    let mut grad_scores = Vec::with_capacity(scores.len());
    for (k, &f) in scores.iter().enumerate() {
        if k + 1 == class {
            value += psi(f);
            grad_scores.push(-(1.0 - f) / 2.0);
        } else {
            value += psi(-f);
            grad_scores.push((1.0 + f) / 2.0);
        }
    }
    Ok(LossValueGrad { value, grad_scores })
}

/// Loss of a "None" annotation: the average of `L(scores, j)` over the
/// `K - l` labels that were not shown.
pub fn complementary_loss<L: ClassLoss + ?Sized>(
    loss: &L,
    scores: &[f64],
    candidate_set: &[usize],
) -> Result<LossValueGrad> {
    let k = scores.len();
    let mut shown = vec![false; k];
    for &c in candidate_set {
        check_class(k, c)?;
        if std::mem::replace(&mut shown[c - 1], true) {
            return Err(Error::param(format!("duplicate candidate {c}")));
        }
    }
    let l = candidate_set.len();
    if l == 0 || l >= k {
        return Err(Error::param(format!(
            "complementary loss needs 1 <= l <= K-1 (K={k}, l={l})"
        )));
    }
    let weight = 1.0 / (k - l) as f64;
    let mut value = 0.0;
    let mut grad_scores = vec![0.0; k];
    for j in (1..=k).filter(|&j| !shown[j - 1]) {
        let lv = loss.eval(scores, j)?;
        value += lv.value;
        for (g, d) in grad_scores.iter_mut().zip(&lv.grad_scores) {
            *g += d;
        }
    }
    grad_scores.iter_mut().for_each(|g| *g *= weight);
    Ok(LossValueGrad {
        value: value * weight,
        grad_scores,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    /// Loss with fixed per-class values and zero gradient.
    struct Table(Vec<f64>);

    impl ClassLoss for Table {
        fn eval(&self, scores: &[f64], class: usize) -> Result<LossValueGrad> {
            Ok(LossValueGrad {
                value: self.0[class - 1],
                grad_scores: vec![0.0; scores.len()],
            })
        }
    }

    #[test]
    fn ovr_examples() {
        let lv = ovr_square_loss(&[1.0, -1.0, -1.0], 1).unwrap();
        assert_eq!(lv.value, 0.0);
        assert_eq!(lv.grad_scores, vec![0.0, 0.0, 0.0]);

        assert_eq!(ovr_square_loss(&[0.0; 3], 2).unwrap().value, 0.75);
        assert_eq!(ovr_square_loss(&[0.5, -0.5], 1).unwrap().value, 0.125);

        assert!(ovr_square_loss(&[0.0; 3], 0).is_err());
        assert!(ovr_square_loss(&[0.0; 3], 4).is_err());
    }

    #[test]
    fn complementary_examples() {
        let scores = [0.3, -0.7, 1.2];
        let lv = complementary_loss(&OvrSquare, &scores, &[1, 2]).unwrap();
        assert_eq!(lv, ovr_square_loss(&scores, 3).unwrap());

        let table = Table(vec![0.3, 0.9, 0.5]);
        let v = complementary_loss(&table, &[0.0; 3], &[2]).unwrap().value;
        assert!((v - 0.4).abs() < 1e-15);

        for set in [vec![1], vec![2], vec![3], vec![1, 3]] {
            let v = complementary_loss(&OvrSquare, &[0.0; 3], &set).unwrap().value;
            assert_eq!(v, 0.75);
        }

        assert!(complementary_loss(&OvrSquare, &scores, &[1, 2, 3]).is_err());
        assert!(complementary_loss(&OvrSquare, &scores, &[]).is_err());
        assert!(complementary_loss(&OvrSquare, &scores, &[4]).is_err());
    }

    fn central_diff(f: impl Fn(&[f64]) -> f64, x: &[f64], h: f64) -> Vec<f64> {
        (0..x.len())
            .map(|i| {
                let mut p = x.to_vec();
                let mut m = x.to_vec();
                p[i] += h;
                m[i] -= h;
                (f(&p) - f(&m)) / (2.0 * h)
            })
            .collect()
    }

    fn rel_err(a: &[f64], b: &[f64]) -> f64 {
        a.iter()
            .zip(b)
            .map(|(x, y)| (x - y).abs() / y.abs().max(1.0))
            .fold(0.0, f64::max)
    }

    fn scores_and_class() -> impl Strategy<Value = (Vec<f64>, usize)> {
        (2usize..8).prop_flat_map(|k| (prop::collection::vec(-3.0f64..3.0, k), 1..=k))
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(100))]

        #[test]
        fn ovr_gradient_matches_finite_differences((scores, j) in scores_and_class()) {
            let lv = ovr_square_loss(&scores, j).unwrap();
            let num = central_diff(|s| ovr_square_loss(s, j).unwrap().value, &scores, 1e-5);
            prop_assert!(rel_err(&lv.grad_scores, &num) <= 1e-6);
            prop_assert!(lv.value >= 0.0);
            prop_assert_eq!(lv.value, OvrSquare.value(&scores, j).unwrap());
        }

        #[test]
        fn complementary_gradient_and_bounds(
            (scores, j) in scores_and_class(),
            seed in any::<u64>(),
        ) {
            use rand::{SeedableRng, seq::SliceRandom};
            let k = scores.len();
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let l = 1 + (j - 1) % (k - 1);
            let mut labels: Vec<usize> = (1..=k).collect();
            labels.shuffle(&mut rng);
            let set = labels[..l].to_vec();

            let lv = complementary_loss(&OvrSquare, &scores, &set).unwrap();
            let num = central_diff(
                |s| complementary_loss(&OvrSquare, s, &set).unwrap().value,
                &scores,
                1e-5,
            );
            prop_assert!(rel_err(&lv.grad_scores, &num) <= 1e-6);

            let excluded: Vec<f64> = (1..=k)
                .filter(|c| !set.contains(c))
                .map(|c| ovr_square_loss(&scores, c).unwrap().value)
                .collect();
            let lo = excluded.iter().cloned().fold(f64::INFINITY, f64::min);
            let hi = excluded.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            prop_assert!(lv.value >= lo - 1e-12 && lv.value <= hi + 1e-12);
            prop_assert!(lv.value >= 0.0);

            let mut sorted = set.clone();
            sorted.sort_unstable();
            let again = complementary_loss(&OvrSquare, &scores, &sorted).unwrap();
            prop_assert_eq!(again, lv);
        }
    }
}
