//! Rollout diversity, codebook usage, task-set rewards and RL timing.

use std::collections::BTreeMap;

use latent_autograd::Real;
use serde::{Deserialize, Serialize};

use crate::backbone::{Sample, TokenId, Vocabulary, EOS};
use crate::config::Mode;
use crate::corpus_tasks::GrammarSpec;
use crate::error::{ensure, Error, Result};
use crate::latent_space::usage_entropy;
use crate::model::Model;
use crate::policy_bc::bc_targets;
use crate::rl_engine::reward::RlTask;
use crate::rl_engine::rollout::{rollout, rollout_one, ActionStep, RolloutSettings};
use crate::rl_engine::train::MetricsRow;
use crate::seed;

pub const SIM_EPS: f64 = 1e-6;

/// Smoothed cosine similarity of token-count vectors.
pub fn default_sim(a: &[TokenId], b: &[TokenId]) -> Result<f64> {
    ensure(!a.is_empty() && !b.is_empty(), || "similarity of an empty sequence".into())?;
    let count = |s: &[TokenId]| {
        let mut m = BTreeMap::new();
        for &t in s {
            *m.entry(t).or_insert(0.0f64) += 1.0;
        }
        m
    };
    let (ca, cb) = (count(a), count(b));
    let dot: f64 = ca.iter().map(|(t, x)| x * cb.get(t).copied().unwrap_or(0.0)).sum();
    let norm = |c: &BTreeMap<TokenId, f64>| c.values().map(|x| x * x).sum::<f64>().sqrt();
    Ok((dot + SIM_EPS) / (norm(&ca) * norm(&cb) + SIM_EPS))
}

/// `G(G-1)` over the sum of similarities of all ordered distinct pairs.
pub fn semantic_diversity<X>(responses: &[X], sim: impl Fn(&X, &X) -> Result<f64>) -> Result<f64> {
    let g = responses.len();
    ensure(g >= 2, || format!("diversity needs at least 2 responses, got {g}"))?;
    let mut total = 0.0;
    for i in 0..g {
        for j in 0..g {
            if i != j {
                total += sim(&responses[i], &responses[j])?;
            }
        }
    }
    if total <= 0.0 || !total.is_finite() {
        return Err(Error::Numerical(format!("degenerate similarity sum {total}")));
    }
    Ok((g * (g - 1)) as f64 / total)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct DiversityReport {
    pub per_prompt: Vec<f64>,
    pub mean: f64,
    pub std: f64,
}

impl DiversityReport {
    pub fn from_values(per_prompt: Vec<f64>) -> Result<Self> {
        ensure(!per_prompt.is_empty(), || "no diversity values".into())?;
        let n = per_prompt.len() as f64;
        let mean = per_prompt.iter().sum::<f64>() / n;
        let std = (per_prompt.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt();
        Ok(Self { per_prompt, mean, std })
    }
}

/// Diversity of `g` rollouts per task under `default_sim`. A response with no
/// tokens (truncated at once) is scored as the lone token EOS.
pub fn rollout_diversity<T: Real>(
    model: &Model<T>,
    tasks: &[RlTask],
    g: usize,
    settings: &RolloutSettings,
    seed: u64,
) -> Result<DiversityReport> {
    let values = tasks
        .iter()
        .enumerate()
        .map(|(i, t)| {
            let grp = rollout(model, t, i, g, settings, seed::derive(seed, &[i as u64]))?;
            let seqs: Vec<Vec<TokenId>> = grp
                .responses
                .iter()
                .map(|r| if r.tokens.is_empty() { vec![EOS] } else { r.tokens.clone() })
                .collect();
            semantic_diversity(&seqs, |a, b| default_sim(a, b))
        })
        .collect::<Result<Vec<_>>>()?;
    DiversityReport::from_values(values)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CodeUsage {
    pub counts: Vec<usize>,
    /// Entropy over `ln K`.
    pub entropy: f64,
}

pub fn codebook_usage(traces: &[Vec<ActionStep>], k: usize) -> Result<CodeUsage> {
    ensure(traces.iter().any(|t| !t.is_empty()), || "no actions to count".into())?;
    let mut counts = vec![0usize; k];
    for s in traces.iter().flatten() {
        if s.action >= k {
            return Err(Error::Index { what: "code", index: s.action, len: k });
        }
        counts[s.action] += 1;
    }
    let entropy = usage_entropy(&counts);
    Ok(CodeUsage { counts, entropy })
}

/// Jensen-Shannon divergence (nats) between two normalized histograms.
pub fn js_divergence(a: &[usize], b: &[usize]) -> f64 {
    let norm = |c: &[usize]| {
        let t = c.iter().sum::<usize>().max(1) as f64;
        c.iter().map(|&x| x as f64 / t).collect::<Vec<_>>()
    };
    let (p, q) = (norm(a), norm(b));
    let kl = |x: &[f64], m: &[f64]| x.iter().zip(m).filter(|(v, _)| **v > 0.0).map(|(v, w)| v * (v / w).ln()).sum::<f64>();
    let m: Vec<f64> = p.iter().zip(&q).map(|(x, y)| 0.5 * (x + y)).collect();
    0.5 * kl(&p, &m) + 0.5 * kl(&q, &m)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct StyleUsage {
    /// Inverse-model code histogram over samples in paired styles.
    pub paired: Vec<usize>,
    /// The same over samples in text-only styles.
    pub text_only: Vec<usize>,
    pub js_divergence: f64,
}

/// Noise-free inverse-model codes of `samples`, split by the style class of
/// each sample's tag (the token after BOS). Untagged samples are skipped.
pub fn style_code_usage<T: Real>(
    model: &Model<T>,
    samples: &[Sample],
    spec: &GrammarSpec,
    vocab: &Vocabulary,
) -> Result<StyleUsage> {
    let k = model.cfg.codebook_size;
    let (mut paired, mut text_only) = (vec![0usize; k], vec![0usize; k]);
    for s in samples {
        let Some(style) = s.tokens.get(1).and_then(|&t| spec.style_of_tag(vocab.token(t))) else {
            continue;
        };
        let bucket = if spec.text_only_styles.contains(&style.name) { &mut text_only } else { &mut paired };
        if let Some((_, codes)) = bc_targets(model, s)? {
            for c in codes {
                bucket[c] += 1;
            }
        }
    }
    let js_divergence = js_divergence(&paired, &text_only);
    Ok(StyleUsage { paired, text_only, js_divergence })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct EvalReport {
    pub mean_reward: f64,
    pub per_task: Vec<f64>,
    /// Actions taken across all responses.
    pub traces: Vec<Vec<ActionStep>>,
}

/// One decoded response per task, scored by its checklist. Task `i` samples
/// from `seed::rng(seed, [i])`.
pub fn evaluate_task_set<T: Real>(
    model: &Model<T>,
    tasks: &[RlTask],
    mode: Mode,
    temperature: f64,
    seed: u64,
) -> Result<EvalReport> {
    ensure(!tasks.is_empty(), || "empty task set".into())?;
    let settings = RolloutSettings { mode, temperature, max_len: model.cfg.max_len };
    let mut per_task = Vec::with_capacity(tasks.len());
    let mut traces = Vec::with_capacity(tasks.len());
    for (i, t) in tasks.iter().enumerate() {
        let r = rollout_one(model, t, &settings, &mut seed::rng(seed, &[i as u64]))?;
        per_task.push(r.reward);
        traces.push(r.trace);
    }
    let mean_reward = per_task.iter().sum::<f64>() / per_task.len() as f64;
    Ok(EvalReport { mean_reward, per_task, traces })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct PhaseTimes {
    pub rollout: f64,
    pub update: f64,
    pub total: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct TimingReport {
    /// Per-row rollout + update seconds of the first log.
    pub totals: Vec<f64>,
    pub mean: PhaseTimes,
    pub baseline_mean: Option<PhaseTimes>,
    /// `mean / baseline_mean` per phase.
    pub ratio: Option<PhaseTimes>,
}

fn phase_means(log: &[MetricsRow]) -> PhaseTimes {
    let n = log.len().max(1) as f64;
    let rollout = log.iter().map(|r| r.rollout_seconds).sum::<f64>() / n;
    let update = log.iter().map(|r| r.update_seconds).sum::<f64>() / n;
    PhaseTimes { rollout, update, total: rollout + update }
}

/// Per-phase means of `log` and, given a baseline, the per-phase ratios.
pub fn timing_report(log: &[MetricsRow], baseline: Option<&[MetricsRow]>) -> Result<TimingReport> {
    ensure(!log.is_empty(), || "empty metrics log".into())?;
    let mean = phase_means(log);
    let totals = log.iter().map(|r| r.rollout_seconds + r.update_seconds).collect();
    let (baseline_mean, ratio) = match baseline {
        None => (None, None),
        Some(b) => {
            ensure(b.len() == log.len(), || format!("logs have {} and {} steps", log.len(), b.len()))?;
            let bm = phase_means(b);
            ensure(bm.rollout > 0.0 && bm.update > 0.0, || "baseline log has a zero-time phase".into())?;
            let ratio = PhaseTimes {
                rollout: mean.rollout / bm.rollout,
                update: mean.update / bm.update,
                total: mean.total / bm.total,
            };
            (Some(bm), Some(ratio))
        }
    };
    Ok(TimingReport { totals, mean, baseline_mean, ratio })
}
