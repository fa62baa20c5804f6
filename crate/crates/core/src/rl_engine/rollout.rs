//! Group rollouts. In latent mode the policy samples a code per step and the
//! frozen world model emits its argmax token; in token mode the LM head is
//! sampled directly.

use latent_autograd::tensor::Tensor;
use latent_autograd::Real;
use log::warn;
use rand::RngCore;
use serde::{Deserialize, Serialize};

use crate::backbone::{BackboneState, TokenId, EOS, PAD};
use crate::config::Mode;
use crate::error::{ensure, Result};
use crate::model::Model;
use crate::policy_bc::sample_action;
use crate::rl_engine::reward::{compute_reward, RlTask};
use crate::seed;
use crate::world_model::merge;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ActionStep {
    /// Code index (latent mode) or token id (token mode).
    pub action: usize,
    pub log_prob: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Response<T> {
    pub tokens: Vec<TokenId>,
    pub trace: Vec<ActionStep>,
    pub reward: f64,
    /// Context embedding the policy saw at each step (latent mode only;
    /// empty in token mode).
    pub states: Tensor<T>,
}

impl<T> Response<T> {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RolloutGroup<T> {
    pub task_index: usize,
    pub responses: Vec<Response<T>>,
    pub mean_reward: f64,
    pub std_reward: f64,
}

impl<T> RolloutGroup<T> {
    pub fn rewards(&self) -> Vec<f64> {
        self.responses.iter().map(|r| r.reward).collect()
    }

    pub fn lengths(&self) -> Vec<usize> {
        self.responses.iter().map(|r| r.len()).collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RolloutSettings {
    pub mode: Mode,
    pub temperature: f64,
    /// Cap on prompt plus response tokens.
    pub max_len: usize,
}

/// Action-space size sampled per step: `K` in latent mode, `|V|` in token mode.
pub fn action_space<T: Real>(model: &Model<T>, mode: Mode) -> usize {
    match mode {
        Mode::Latent => model.policy.num_actions,
        Mode::Token => model.cfg.vocab_size,
    }
}

/// Per-step logits over the action space at context embedding `e`.
pub fn step_logits<T: Real>(model: &Model<T>, mode: Mode, e: &[T]) -> Result<Vec<T>> {
    match mode {
        Mode::Latent => model.policy.logits(&model.store, e),
        Mode::Token => model.backbone.lm_head(&model.store, e),
    }
}

/// Token emitted by the world model for context `e` and code `action`.
pub fn world_model_token<T: Real>(model: &Model<T>, e: &[T], action: usize) -> Result<TokenId> {
    let code = model.codebook.lookup(&model.store, action)?;
    let merged = merge(&model.store, &model.merge, e, &code)?;
    let logits = model.backbone.lm_head(&model.store, &merged)?;
    Ok(latent_autograd::tensor::argmax(&logits) as TokenId)
}

/// One response for `task`.
pub fn rollout_one<T: Real>(
    model: &Model<T>,
    task: &RlTask,
    settings: &RolloutSettings,
    rng: &mut dyn RngCore,
) -> Result<Response<T>> {
    let p = task.prompt.len();
    ensure(p >= 1, || "empty prompt".into())?;
    ensure(settings.max_len > p, || format!("max_len {} must exceed prompt length {p}", settings.max_len))?;
    ensure(settings.max_len <= model.cfg.max_len, || {
        format!("max_len {} exceeds the model's {}", settings.max_len, model.cfg.max_len)
    })?;
    let bb = &model.backbone;
    let d = model.cfg.d_model;
    let mut state = BackboneState::start(bb, &model.store, Some(&task.image));
    let h = state.push_tokens(bb, &model.store, &task.prompt);
    let mut e = h.row(h.rows() - 1).to_vec();
    let mut tokens = Vec::new();
    let mut trace = Vec::new();
    let mut states = Tensor::zeros(0, d);
    while p + tokens.len() < settings.max_len {
        let logits = step_logits(model, settings.mode, &e)?;
        let (action, log_prob) = sample_action(&logits, settings.temperature, rng)?;
        let tok = match settings.mode {
            Mode::Latent => world_model_token(model, &e, action)?,
            Mode::Token => action as TokenId,
        };
        if tok == PAD {
            warn!("PAD emitted after {} response tokens; truncating", tokens.len());
            break;
        }
        if settings.mode == Mode::Latent {
            states.append_rows(&Tensor::row_vector(e.clone()));
        }
        tokens.push(tok);
        trace.push(ActionStep { action, log_prob });
        if tok == EOS {
            break;
        }
        if p + tokens.len() < settings.max_len {
            let h = state.push_tokens(bb, &model.store, &[tok]);
            e = h.row(0).to_vec();
        }
    }
    let reward = compute_reward(&tokens, &task.reward);
    Ok(Response { tokens, trace, reward, states })
}

/// `g` responses; response `i` draws from `seed::rng(seed, [i])`.
pub fn rollout<T: Real>(
    model: &Model<T>,
    task: &RlTask,
    task_index: usize,
    g: usize,
    settings: &RolloutSettings,
    seed: u64,
) -> Result<RolloutGroup<T>> {
    ensure(g >= 2, || format!("group size {g} < 2"))?;
    let responses = (0..g)
        .map(|i| rollout_one(model, task, settings, &mut seed::rng(seed, &[i as u64])))
        .collect::<Result<Vec<_>>>()?;
    let r: Vec<f64> = responses.iter().map(|x| x.reward).collect();
    let mean = r.iter().sum::<f64>() / g as f64;
    let std = (r.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / g as f64).sqrt();
    Ok(RolloutGroup { task_index, responses, mean_reward: mean, std_reward: std })
}

/// Greedy token-mode decode without sampling machinery, used as a reference.
pub fn greedy_decode<T: Real>(model: &Model<T>, task: &RlTask, max_len: usize) -> Result<Vec<TokenId>> {
    let mut seq = task.prompt.clone();
    let sample_of = |s: &[TokenId]| crate::backbone::Sample::paired(task.image.clone(), s.to_vec());
    while seq.len() < max_len {
        let e = model.backbone.encode_context(&model.store, &sample_of(&seq), seq.len())?;
        let logits = model.backbone.lm_head(&model.store, &e.vector)?;
        let tok = latent_autograd::tensor::argmax(&logits) as TokenId;
        if tok == PAD {
            break;
        }
        seq.push(tok);
        if tok == EOS {
            break;
        }
    }
    Ok(seq[task.prompt.len()..].to_vec())
}
