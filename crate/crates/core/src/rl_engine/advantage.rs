//! Group-relative advantages for the GRPO family.

use crate::config::Algorithm;
use crate::error::{ensure, Result};

/// Added to the group standard deviation before dividing.
pub const STD_EPS: f64 = 1e-8;
/// Bounds on the method-of-moments Beta concentration `alpha + beta`.
pub const BETA_CONCENTRATION: (f64, f64) = (1e-3, 1e6);

#[derive(Clone, Debug, PartialEq)]
pub struct Advantages {
    pub values: Vec<f64>,
    /// False for responses excluded from the update (dapo dynamic sampling).
    pub keep: Vec<bool>,
}

impl Advantages {
    pub fn kept(&self) -> usize {
        self.keep.iter().filter(|k| **k).count()
    }
}

fn mean_std(r: &[f64]) -> (f64, f64) {
    let n = r.len() as f64;
    let mean = r.iter().sum::<f64>() / n;
    let var = r.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Method-of-moments Beta fit of rewards in `[0, 1]`: returns the fitted mean
/// `alpha / (alpha + beta)` and standard deviation.
pub fn beta_moments(rewards: &[f64]) -> (f64, f64) {
    let (m, sd) = mean_std(rewards);
    let m = m.clamp(1e-6, 1.0 - 1e-6);
    let var = (sd * sd).max(1e-12);
    let (lo, hi) = BETA_CONCENTRATION;
    let s = (m * (1.0 - m) / var - 1.0).clamp(lo, hi);
    let (a, b) = (m * s, (1.0 - m) * s);
    let mean = a / (a + b);
    let std = (a * b / ((a + b).powi(2) * (a + b + 1.0))).sqrt();
    (mean, std)
}

/// `lengths` is unused by the advantage values themselves; length handling
/// lives in the loss normalization of the update.
pub fn compute_advantages(rewards: &[f64], lengths: &[usize], algorithm: Algorithm) -> Result<Advantages> {
    let g = rewards.len();
    ensure(g >= 2, || format!("group size {g} < 2"))?;
    ensure(lengths.len() == g, || format!("{} lengths for {g} rewards", lengths.len()))?;
    ensure(rewards.iter().all(|r| r.is_finite()), || "non-finite reward".into())?;
    let all_equal = rewards.iter().all(|&r| r == rewards[0]);
    if all_equal {
        let keep = algorithm != Algorithm::Dapo;
        return Ok(Advantages { values: vec![0.0; g], keep: vec![keep; g] });
    }
    let (mean, std) = mean_std(rewards);
    let values = match algorithm {
        Algorithm::Grpo | Algorithm::Dapo => rewards.iter().map(|r| (r - mean) / (std + STD_EPS)).collect(),
        Algorithm::Drgrpo => rewards.iter().map(|r| r - mean).collect(),
        Algorithm::Bnpo => {
            ensure(rewards.iter().all(|r| (0.0..=1.0).contains(r)), || "bnpo needs rewards in [0, 1]".into())?;
            let (bm, bs) = beta_moments(rewards);
            rewards.iter().map(|r| (r - bm) / (bs + STD_EPS)).collect()
        }
    };
    Ok(Advantages { values, keep: vec![true; g] })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    const ALL: [Algorithm; 4] = [Algorithm::Grpo, Algorithm::Drgrpo, Algorithm::Dapo, Algorithm::Bnpo];

    #[test]
    fn grpo_and_drgrpo_oracles() {
        let a = compute_advantages(&[1.0, 0.0, 1.0, 0.0], &[1; 4], Algorithm::Grpo).unwrap();
        for (v, w) in a.values.iter().zip([1.0, -1.0, 1.0, -1.0]) {
            assert!((v - w).abs() < 1e-6);
        }
        let d = compute_advantages(&[1.0, 0.0], &[1; 2], Algorithm::Drgrpo).unwrap();
        assert_eq!(d.values, vec![0.5, -0.5]);
    }

    #[test]
    fn equal_rewards_give_zero_and_dapo_drops() {
        for alg in ALL {
            let a = compute_advantages(&[0.3; 5], &[2; 5], alg).unwrap();
            assert_eq!(a.values, vec![0.0; 5]);
            assert_eq!(a.kept(), if alg == Algorithm::Dapo { 0 } else { 5 });
        }
        let a = compute_advantages(&[0.3, 0.5], &[2; 2], Algorithm::Dapo).unwrap();
        assert_eq!(a.kept(), 2);
    }

    #[test]
    fn bnpo_matches_direct_beta_fit() {
        // mean .4, var .0225 -> concentration 29/3
        let r = [0.25, 0.55, 0.25, 0.55];
        let (m, s) = beta_moments(&r);
        assert!((m - 0.4).abs() < 1e-12);
        let c: f64 = 29.0 / 3.0;
        let (a, b) = (0.4 * c, 0.6 * c);
        let want = (a * b / (c * c * (c + 1.0))).sqrt();
        assert!((s - want).abs() < 1e-12);
        let a = compute_advantages(&r, &[1; 4], Algorithm::Bnpo).unwrap();
        assert!((a.values[0] - (0.25 - 0.4) / (want + STD_EPS)).abs() < 1e-9);
        assert!(compute_advantages(&[1.5, 0.0], &[1; 2], Algorithm::Bnpo).is_err());
        // 0/1 rewards hit the lower concentration bound
        let (m, s) = beta_moments(&[1.0, 0.0]);
        assert_eq!(m, 0.5);
        assert!((s - (0.25f64 / (1.0 + BETA_CONCENTRATION.0)).sqrt()).abs() < 1e-12);
    }

    #[test]
    fn rejects_small_groups() {
        assert!(compute_advantages(&[1.0], &[1], Algorithm::Grpo).is_err());
        assert!(compute_advantages(&[1.0, 0.0], &[1], Algorithm::Grpo).is_err());
    }

    proptest! {
        #[test]
        fn advantages_are_centered(r in prop::collection::vec(0.0f64..=1.0, 2..16)) {
            for alg in ALL {
                let a = compute_advantages(&r, &vec![1; r.len()], alg).unwrap();
                let s: f64 = a.values.iter().zip(&a.keep).filter(|(_, k)| **k).map(|(v, _)| v).sum();
                prop_assert!(s.abs() < 1e-6, "{alg:?} sum {s}");
            }
        }

        #[test]
        fn permuting_rewards_permutes_advantages(r in prop::collection::vec(0.0f64..=1.0, 2..10), rot in 0usize..10) {
            let k = rot % r.len();
            let mut p = r.clone();
            p.rotate_left(k);
            for alg in ALL {
                let a = compute_advantages(&r, &vec![1; r.len()], alg).unwrap();
                let b = compute_advantages(&p, &vec![1; r.len()], alg).unwrap();
                let mut ar = a.values.clone();
                ar.rotate_left(k);
                for (x, y) in ar.iter().zip(&b.values) {
                    prop_assert!((x - y).abs() < 1e-9);
                }
            }
        }
    }
}
