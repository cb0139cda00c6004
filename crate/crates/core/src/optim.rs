//! Mini-batch SGD with classical momentum and coupled L2 weight decay.

use rand::seq::SliceRandom;
use rand::Rng;

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct OptimState {
    velocity: Vec<f64>,
    lr: f64,
    momentum: f64,
    weight_decay: f64,
}

impl OptimState {
    pub fn new(num_params: usize, lr: f64, momentum: f64, weight_decay: f64) -> Result<Self> {
        if !(lr > 0.0 && lr.is_finite()) {
            return Err(Error::param(format!("learning rate {lr} must be positive")));
        }
        if !(0.0..1.0).contains(&momentum) {
            return Err(Error::param(format!("momentum {momentum} outside [0, 1)")));
        }
        if !(weight_decay >= 0.0 && weight_decay.is_finite()) {
            return Err(Error::param(format!("weight decay {weight_decay} must be nonnegative")));
        }
        Ok(Self {
            velocity: vec![0.0; num_params],
            lr,
            momentum,
            weight_decay,
        })
    }

    pub fn velocity(&self) -> &[f64] {
        &self.velocity
    }

    pub fn lr(&self) -> f64 {
        self.lr
    }
}

/// `v ← μ·v + (g + λ·θ)`, `θ ← θ − η·v`.
///
/// A non-finite gradient leaves both parameters and state untouched and
/// reports `batch` in the error.
pub fn sgd_step(
    params: &mut [f64],
    grads: &[f64],
    state: &mut OptimState,
    epoch: usize,
    batch: usize,
) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.velocity.len() {
        return Err(Error::Dimension {
            expected: params.len(),
            actual: grads.len(),
        });
    }
    if grads.iter().any(|g| !g.is_finite()) {
        return Err(Error::NonFinite {
            what: "gradient",
            epoch,
            batch,
        });
    }
    for ((p, &g), v) in params.iter_mut().zip(grads).zip(&mut state.velocity) {
        *v = state.momentum * *v + (g + state.weight_decay * *p);
        *p -= state.lr * *v;
    }
    Ok(())
}

/// A uniform shuffle of `0..n` cut into consecutive batches of `batch_size`;
/// the last batch keeps the remainder.
pub fn epoch_batches(n: usize, batch_size: usize, rng: &mut impl Rng) -> Result<Vec<Vec<usize>>> {
    if batch_size == 0 {
        return Err(Error::param("batch size must be positive"));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    Ok(order.chunks(batch_size).map(<[usize]>::to_vec).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn vanilla_step() {
        let mut p = vec![1.0, -2.0];
        let mut s = OptimState::new(2, 0.5, 0.0, 0.0).unwrap();
        sgd_step(&mut p, &[0.2, -0.4], &mut s, 0, 0).unwrap();
        assert_eq!(p, vec![0.9, -1.8]);
    }

    #[test]
    fn momentum_sequence() {
        let mut p = vec![0.0];
        let mut s = OptimState::new(1, 0.1, 0.9, 0.0).unwrap();
        sgd_step(&mut p, &[1.0], &mut s, 0, 0).unwrap();
        assert!((p[0] - -0.1).abs() < 1e-15);
        let before = p[0];
        sgd_step(&mut p, &[1.0], &mut s, 0, 1).unwrap();
        assert!((p[0] - before - -0.19).abs() < 1e-15);
    }

    #[test]
    fn decay_without_momentum_is_geometric() {
        let (lr, decay) = (0.1, 0.5);
        let mut p = vec![2.0];
        let mut s = OptimState::new(1, lr, 0.0, decay).unwrap();
        for t in 1..=3 {
            sgd_step(&mut p, &[0.0], &mut s, 0, t).unwrap();
            let expected = 2.0 * (1.0 - lr * decay).powi(t as i32);
            assert!((p[0] - expected).abs() < 1e-15);
        }
    }

    #[test]
    fn decay_with_momentum_follows_recurrence() {
        // Hand-iterated: θ0 = 1, η = 0.1, μ = 0.9, λ = 1.
        // v1 = 1,            θ1 = 0.9
        // v2 = 0.9 + 0.9,    θ2 = 0.9 - 0.18 = 0.72
        // v3 = 1.62 + 0.72,  θ3 = 0.72 - 0.234 = 0.486
        let mut p = vec![1.0];
        let mut s = OptimState::new(1, 0.1, 0.9, 1.0).unwrap();
        let expected = [0.9, 0.72, 0.486];
        for (t, e) in expected.iter().enumerate() {
            sgd_step(&mut p, &[0.0], &mut s, 0, t).unwrap();
            assert!((p[0] - e).abs() < 1e-12, "step {t}: {}", p[0]);
        }
    }

    #[test]
    fn non_finite_gradient_is_rejected() {
        let mut p = vec![1.0, 1.0];
        let mut s = OptimState::new(2, 0.1, 0.9, 0.0).unwrap();
        match sgd_step(&mut p, &[0.0, f64::NAN], &mut s, 3, 17) {
            Err(Error::NonFinite { batch: 17, epoch: 3, .. }) => {}
            other => panic!("{other:?}"),
        }
        assert_eq!(p, vec![1.0, 1.0]);
        assert_eq!(s.velocity(), &[0.0, 0.0]);
    }

    #[test]
    fn bad_hyperparameters() {
        assert!(OptimState::new(1, 0.0, 0.9, 0.0).is_err());
        assert!(OptimState::new(1, 0.1, 1.0, 0.0).is_err());
        assert!(OptimState::new(1, 0.1, 0.9, -1.0).is_err());
    }

    #[test]
    fn batching() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let batches = epoch_batches(10, 3, &mut rng).unwrap();
        assert_eq!(batches.iter().map(Vec::len).collect::<Vec<_>>(), vec![3, 3, 3, 1]);
        let mut all: Vec<usize> = batches.concat();
        all.sort_unstable();
        assert_eq!(all, (0..10).collect::<Vec<_>>());

        let again = epoch_batches(10, 3, &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
        assert_eq!(batches, again);
        assert!(epoch_batches(10, 0, &mut rng).is_err());
    }
}
