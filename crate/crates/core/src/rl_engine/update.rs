//! Clipped-surrogate policy update with an exact KL penalty towards the frozen
//! reference policy.

use latent_autograd::tensor::Tensor;
use latent_autograd::{Adam, Graph, Grads, ParamMask, Real, Var};

use crate::backbone::{self, Sample};
use crate::config::{Algorithm, Mode, RlConfig};
use crate::error::{ensure, Error, Result};
use crate::model::Model;
use crate::policy_bc::POLICY;
use crate::rl_engine::advantage::Advantages;
use crate::rl_engine::reward::RlTask;
use crate::rl_engine::rollout::{Response, RolloutGroup};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct UpdateSettings {
    pub mode: Mode,
    pub algorithm: Algorithm,
    pub clip_low: f64,
    pub clip_high: f64,
    pub kl_coef: f64,
    /// Rollout temperature; the ratio uses the same tempered distribution.
    pub temperature: f64,
    /// Constant length normalizer for drgrpo.
    pub max_response_len: usize,
}

impl UpdateSettings {
    pub fn from_config(rl: &RlConfig, max_response_len: usize) -> Self {
        let (clip_low, clip_high) = rl.clip_bounds();
        Self {
            mode: rl.mode,
            algorithm: rl.algorithm,
            clip_low,
            clip_high,
            kl_coef: rl.kl_coef,
            temperature: rl.rollout_temperature,
            max_response_len,
        }
    }

    fn inv_temperature(&self) -> f64 {
        if self.temperature > 0.0 {
            1.0 / self.temperature
        } else {
            1.0
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct UpdateStats {
    pub loss: f64,
    /// Mean KL(policy || reference) over visited states.
    pub kl: f64,
    /// Mean entropy of the policy over visited states.
    pub entropy: f64,
    pub clip_fraction: f64,
    pub states: usize,
    pub grad_norm: f64,
}

/// Trainable components for the given mode.
pub fn trainable(mode: Mode) -> &'static [&'static str] {
    match mode {
        Mode::Latent => &[POLICY],
        Mode::Token => &[backbone::COMPONENT],
    }
}

/// Per-response surrogate weight: the advantage divided by the loss
/// normalizer of the algorithm. Dropped or empty responses get `None`.
fn response_weights<T>(groups: &[RolloutGroup<T>], advs: &[Advantages], s: &UpdateSettings) -> Vec<Vec<Option<f64>>> {
    let kept: Vec<(usize, usize)> = groups
        .iter()
        .zip(advs)
        .enumerate()
        .flat_map(|(gi, (g, a))| {
            g.responses.iter().enumerate().filter(move |(i, r)| a.keep[*i] && !r.trace.is_empty()).map(move |(i, _)| (gi, i))
        })
        .collect();
    let n_resp = kept.len().max(1) as f64;
    let n_steps: usize = kept.iter().map(|&(g, i)| groups[g].responses[i].trace.len()).sum();
    let mut out: Vec<Vec<Option<f64>>> = groups.iter().map(|g| vec![None; g.responses.len()]).collect();
    for (g, i) in kept {
        let len = groups[g].responses[i].trace.len() as f64;
        let a = advs[g].values[i];
        out[g][i] = Some(match s.algorithm {
            Algorithm::Grpo | Algorithm::Bnpo => a / (len * n_resp),
            Algorithm::Dapo => a / n_steps.max(1) as f64,
            Algorithm::Drgrpo => a / (s.max_response_len.max(1) as f64 * n_resp),
        });
    }
    out
}

#[derive(Default)]
struct Accum {
    loss: f64,
    kl: f64,
    entropy: f64,
    clipped: usize,
    states: usize,
}

/// Adds one block of states to the objective: `logits` (`n x A`, graph),
/// the reference log-probabilities (`n x A`), the taken actions, their
/// rollout log-probabilities and the per-step surrogate weight.
#[allow(clippy::too_many_arguments)]
fn block_loss<T: Real>(
    g: &mut Graph<T>,
    logits: Var,
    reference: &Tensor<T>,
    actions: &[usize],
    old_lp: &[f64],
    weights: &[f64],
    kl_scale: f64,
    s: &UpdateSettings,
    acc: &mut Accum,
) -> Var {
    let n = actions.len();
    let col = |v: &[f64]| Tensor::from_fn(v.len(), 1, |r, _| T::from_f64_lossy(v[r]));
    let tempered = g.scale(logits, T::from_f64_lossy(s.inv_temperature()));
    let tlp = g.log_softmax(tempered);
    let lp = g.pick(tlp, actions.to_vec());
    let old = g.constant(col(old_lp));
    let diff = g.sub(lp, old);
    let ratio = g.exp(diff);
    let w = g.constant(col(weights));
    let s1 = g.mul(ratio, w);
    let lo = T::from_f64_lossy(1.0 - s.clip_low);
    let hi = T::from_f64_lossy(1.0 + s.clip_high);
    let clipped = g.clamp(ratio, lo, hi);
    let s2 = g.mul(clipped, w);
    let surr = g.minimum(s1, s2);
    let surr = g.sum(surr);
    let klr = g.categorical_kl(logits, reference);
    let kl = g.sum(klr);
    let kl_term = g.scale(kl, T::from_f64_lossy(s.kl_coef * kl_scale));
    let neg = g.scale(surr, -T::one());
    let loss = g.add(neg, kl_term);

    let rv = g.value(ratio);
    acc.clipped += (0..n).filter(|&r| rv.get(r, 0) < lo || rv.get(r, 0) > hi).count();
    acc.kl += g.value(kl).scalar().to_f64_lossy();
    let lv = g.value(logits);
    acc.entropy += (0..n).map(|r| entropy(lv.row(r))).sum::<f64>();
    acc.loss += g.value(loss).scalar().to_f64_lossy();
    acc.states += n;
    loss
}

fn entropy<T: Real>(logits: &[T]) -> f64 {
    let l: Vec<f64> = logits.iter().map(|v| v.to_f64_lossy()).collect();
    latent_autograd::tensor::log_softmax(&l).iter().map(|lp| -lp.exp() * lp).sum()
}

/// Untempered LM-head log-probabilities of the `n` rows from `p - 1` on,
/// through the same graph ops the update differentiates.
fn token_log_probs<T: Real>(model: &Model<T>, sample: &Sample, p: usize, n: usize) -> Tensor<T> {
    let mut g = Graph::inference();
    let h = model.backbone.encode_rows(&mut g, &model.store, sample, true);
    let rows = g.slice_rows(h, p - 1, n);
    let l = model.backbone.lm_head_graph(&mut g, &model.store, rows);
    let lp = g.log_softmax(l);
    g.value(lp).clone()
}

#[cfg(test)]
fn policy_log_probs<T: Real>(model: &Model<T>, states: &Tensor<T>) -> Tensor<T> {
    let mut g = Graph::inference();
    let x = g.constant(states.clone());
    let l = model.policy.forward(&mut g, &model.store, x);
    let lp = g.log_softmax(l);
    g.value(lp).clone()
}

fn trace_parts<T>(r: &Response<T>, w: f64) -> (Vec<usize>, Vec<f64>, Vec<f64>) {
    let actions = r.trace.iter().map(|s| s.action).collect();
    let old = r.trace.iter().map(|s| s.log_prob).collect();
    (actions, old, vec![w; r.trace.len()])
}

/// Token-mode input: prompt plus every response token but the last, whose
/// hidden rows from `prompt_len - 1` on predict the response.
fn token_sample<T>(task: &RlTask, r: &Response<T>) -> Sample {
    let mut tokens = task.prompt.clone();
    tokens.extend_from_slice(&r.tokens[..r.tokens.len() - 1]);
    Sample::paired(task.image.clone(), tokens)
}

/// Loss, statistics and (with `mask`) gradient of the update objective.
/// Token mode needs the task list (to rebuild inputs) and a frozen
/// `reference` model; latent mode uses `policy_init` from `model`.
pub fn update_loss_grads<T: Real>(
    model: &Model<T>,
    groups: &[RolloutGroup<T>],
    advs: &[Advantages],
    tasks: &[RlTask],
    reference: Option<&Model<T>>,
    s: &UpdateSettings,
    mask: Option<&ParamMask>,
) -> Result<(UpdateStats, Option<Grads<T>>)> {
    ensure(groups.len() == advs.len(), || format!("{} groups but {} advantage sets", groups.len(), advs.len()))?;
    for (g, a) in groups.iter().zip(advs) {
        ensure(g.responses.len() == a.values.len() && a.keep.len() == a.values.len(), || {
            "advantages misaligned with responses".into()
        })?;
    }
    let weights = response_weights(groups, advs, s);
    let total_states: usize = groups
        .iter()
        .zip(&weights)
        .flat_map(|(g, w)| g.responses.iter().zip(w).filter(|(_, w)| w.is_some()).map(|(r, _)| r.trace.len()))
        .sum();
    let mut grads = mask.map(|_| Grads::for_store(&model.store));
    let mut acc = Accum::default();
    if total_states == 0 {
        return Ok((UpdateStats::default(), grads));
    }
    let kl_scale = 1.0 / total_states as f64;
    let new_graph = || match mask {
        Some(m) => Graph::new(m.clone()),
        None => Graph::inference(),
    };
    match s.mode {
        Mode::Latent => {
            let d = model.cfg.d_model;
            let mut states = Tensor::zeros(0, d);
            let (mut actions, mut old, mut w) = (Vec::new(), Vec::new(), Vec::new());
            for (g, ws) in groups.iter().zip(&weights) {
                for (r, wr) in g.responses.iter().zip(ws) {
                    let Some(wr) = wr else { continue };
                    ensure(r.states.rows() == r.trace.len(), || "latent response without cached states".into())?;
                    states.append_rows(&r.states);
                    let (a, o, ww) = trace_parts(r, *wr);
                    actions.extend(a);
                    old.extend(o);
                    w.extend(ww);
                }
            }
            let reference = {
                let mut g = Graph::inference();
                let x = g.constant(states.clone());
                let l = model.policy_init.forward(&mut g, &model.store, x);
                let lp = g.log_softmax(l);
                g.value(lp).clone()
            };
            let mut g = new_graph();
            let x = g.constant(states);
            let logits = model.policy.forward(&mut g, &model.store, x);
            let loss = block_loss(&mut g, logits, &reference, &actions, &old, &w, kl_scale, s, &mut acc);
            if let Some(gr) = grads.as_mut() {
                g.backward_into(loss, gr);
            }
        }
        Mode::Token => {
            let reference = reference.ok_or_else(|| Error::validation("token mode needs a reference model"))?;
            for (g, ws) in groups.iter().zip(&weights) {
                let task = tasks
                    .get(g.task_index)
                    .ok_or(Error::Index { what: "task", index: g.task_index, len: tasks.len() })?;
                let p = task.prompt.len();
                for (r, wr) in g.responses.iter().zip(ws) {
                    let Some(wr) = wr else { continue };
                    let sample = token_sample(task, r);
                    let n = r.trace.len();
                    let lref = token_log_probs(reference, &sample, p, n);
                    let mut gg = new_graph();
                    let h = model.backbone.encode_rows(&mut gg, &model.store, &sample, true);
                    let rows = gg.slice_rows(h, p - 1, n);
                    let logits = model.backbone.lm_head_graph(&mut gg, &model.store, rows);
                    let (a, o, ww) = trace_parts(r, *wr);
                    let loss = block_loss(&mut gg, logits, &lref, &a, &o, &ww, kl_scale, s, &mut acc);
                    if let Some(gr) = grads.as_mut() {
                        gg.backward_into(loss, gr);
                    }
                }
            }
        }
    }
    let stats = UpdateStats {
        loss: acc.loss,
        kl: acc.kl * kl_scale,
        entropy: acc.entropy * kl_scale,
        clip_fraction: acc.clipped as f64 * kl_scale,
        states: acc.states,
        grad_norm: 0.0,
    };
    Ok((stats, grads))
}

/// One optimizer step on the mode's trainable parameters. Non-finite
/// gradients abort the step before any parameter changes.
#[allow(clippy::too_many_arguments)]
pub fn policy_update<T: Real>(
    model: &mut Model<T>,
    opt: &mut Adam<T>,
    groups: &[RolloutGroup<T>],
    advs: &[Advantages],
    tasks: &[RlTask],
    reference: Option<&Model<T>>,
    s: &UpdateSettings,
) -> Result<UpdateStats> {
    let mask = opt.mask().clone();
    let (mut stats, grads) = update_loss_grads(model, groups, advs, tasks, reference, s, Some(&mask))?;
    let mut grads = grads.expect("mask given");
    if !grads.is_finite() || !stats.loss.is_finite() {
        let bad: Vec<&str> = model
            .store
            .ids()
            .filter(|&id| grads.get(id).is_some_and(|t| !t.is_finite()))
            .map(|id| model.store.name(id))
            .collect();
        return Err(Error::Numerical(format!(
            "policy update aborted: loss {}, non-finite gradients in {bad:?}",
            stats.loss
        )));
    }
    stats.grad_norm = opt.step(&mut model.store, &mut grads);
    Ok(stats)
}
