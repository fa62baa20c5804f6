//! Declarative checklist rewards over response tokens.

use serde::{Deserialize, Serialize};

use crate::backbone::{ImageGrid, TokenId, EOS, PAD};
use crate::error::{ensure, Result};

/// Term order of `weights`: required, forbidden, markers, length.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct RewardSpec {
    pub required: Vec<TokenId>,
    pub forbidden: Vec<TokenId>,
    pub markers: Vec<TokenId>,
    pub len_min: usize,
    pub len_max: usize,
    pub weights: Vec<f64>,
}

impl RewardSpec {
    pub fn validate(&self) -> Result<()> {
        ensure(self.weights.len() == 4, || format!("reward needs 4 weights, got {}", self.weights.len()))?;
        ensure(self.weights.iter().all(|w| *w >= 0.0 && w.is_finite()), || "reward weights must be >= 0".into())?;
        ensure(self.weights.iter().sum::<f64>() > 0.0, || "reward weights sum to zero".into())?;
        ensure(self.len_min <= self.len_max, || "lenMin exceeds lenMax".into())
    }
}

/// A prompt (image plus prompt tokens) and its reward checklist.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RlTask {
    pub image: ImageGrid,
    pub prompt: Vec<TokenId>,
    pub reward: RewardSpec,
}

/// Response tokens up to (not including) the first EOS or PAD.
pub fn content(response: &[TokenId]) -> &[TokenId] {
    let end = response.iter().position(|&t| t == EOS || t == PAD).unwrap_or(response.len());
    &response[..end]
}

/// Per-term scores `[required, forbidden, markers, length]`, each in `[0, 1]`.
pub fn reward_terms(response: &[TokenId], spec: &RewardSpec) -> [f64; 4] {
    let r = content(response);
    let frac_present = |set: &[TokenId]| {
        let mut uniq: Vec<TokenId> = set.to_vec();
        uniq.sort_unstable();
        uniq.dedup();
        if uniq.is_empty() {
            1.0
        } else {
            uniq.iter().filter(|t| r.contains(t)).count() as f64 / uniq.len() as f64
        }
    };
    let forbidden = if r.is_empty() {
        1.0
    } else {
        r.iter().filter(|t| !spec.forbidden.contains(t)).count() as f64 / r.len() as f64
    };
    let length = f64::from(u8::from((spec.len_min..=spec.len_max).contains(&r.len())));
    [frac_present(&spec.required), forbidden, frac_present(&spec.markers), length]
}

/// Weighted mean of the checklist terms, clamped to `[0, 1]`. An empty
/// response scores 0 whenever some token is required.
pub fn compute_reward(response: &[TokenId], spec: &RewardSpec) -> f64 {
    if content(response).is_empty() && !spec.required.is_empty() {
        return 0.0;
    }
    let terms = reward_terms(response, spec);
    let wsum: f64 = spec.weights.iter().sum();
    if wsum <= 0.0 {
        return 0.0;
    }
    let v: f64 = terms.iter().zip(&spec.weights).map(|(t, w)| t * w).sum::<f64>() / wsum;
    v.clamp(0.0, 1.0)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec() -> RewardSpec {
        RewardSpec {
            required: vec![10, 11],
            forbidden: vec![20, 21],
            markers: vec![30, 31],
            len_min: 4,
            len_max: 8,
            weights: vec![0.25; 4],
        }
    }

    #[test]
    fn full_credit() {
        assert_eq!(compute_reward(&[30, 10, 5, 11, 31, EOS], &spec()), 1.0);
    }

    #[test]
    fn empty_scores_zero() {
        assert_eq!(compute_reward(&[], &spec()), 0.0);
        assert_eq!(compute_reward(&[EOS, 10, 11], &spec()), 0.0);
    }

    #[test]
    fn half_checklist_is_half() {
        let s = RewardSpec { len_min: 1, ..spec() };
        // required 1, forbidden 1, markers 0, length 0 (too long)
        let long = [10, 11, 5, 5, 5, 5, 5, 5, 5];
        assert_eq!(reward_terms(&long, &s), [1.0, 1.0, 0.0, 0.0]);
        assert_eq!(compute_reward(&long, &s), 0.5);
    }

    #[test]
    fn forbidden_fraction_and_tokens_after_eos() {
        let t = reward_terms(&[10, 20, 5, 5, EOS, 21, 21], &spec());
        assert_eq!(t[1], 0.75);
        assert_eq!(t[0], 0.5);
        assert_eq!(t[3], 1.0);
    }

    #[test]
    fn serde_keys() {
        let j = serde_json::to_value(spec()).unwrap();
        for k in ["required", "forbidden", "markers", "lenMin", "lenMax", "weights"] {
            assert!(j.get(k).is_some(), "missing {k}");
        }
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        fn any_spec() -> impl Strategy<Value = RewardSpec> {
            let toks = || proptest::collection::vec(0u32..24, 0..5);
            (toks(), toks(), toks(), 0usize..6, 0usize..6, proptest::collection::vec(0.0f64..2.0, 4))
                .prop_filter("positive weight", |t| t.5.iter().sum::<f64>() > 1e-6)
                .prop_map(|(required, forbidden, markers, a, b, weights)| RewardSpec {
                    required,
                    forbidden,
                    markers,
                    len_min: a.min(b),
                    len_max: a.max(b),
                    weights,
                })
        }

        proptest! {
            #[test]
            fn reward_in_unit_interval(r in proptest::collection::vec(0u32..24, 0..12), s in any_spec()) {
                let v = compute_reward(&r, &s);
                prop_assert!((0.0..=1.0).contains(&v));
                for t in reward_terms(&r, &s) {
                    prop_assert!((0.0..=1.0).contains(&t));
                }
            }

            #[test]
            fn tokens_after_eos_are_ignored(
                r in proptest::collection::vec(4u32..24, 0..8),
                tail in proptest::collection::vec(0u32..24, 0..6),
                s in any_spec(),
            ) {
                let mut ended = r.clone();
                ended.push(EOS);
                ended.extend(tail);
                prop_assert_eq!(compute_reward(&ended, &s), compute_reward(&r, &s));
            }

            #[test]
            fn full_checklist_scores_one(extra in proptest::collection::vec(4u32..10, 0..4)) {
                let s = RewardSpec {
                    required: vec![10, 11],
                    forbidden: vec![20],
                    markers: vec![12],
                    len_min: 0,
                    len_max: 12,
                    weights: vec![1.0, 2.0, 0.5, 0.25],
                };
                let mut r = vec![10, 11, 12];
                r.extend(extra);
                prop_assert!((compute_reward(&r, &s) - 1.0).abs() < 1e-12);
            }
        }
    }
}
