//! The RL loop: rollout, reward, advantage and update for a fixed number of
//! steps, emitting one metrics row per step.

use std::time::Instant;

use latent_autograd::{Adam, AdamConfig, LrSchedule, Real};
use log::info;
use serde::{Deserialize, Serialize};

use crate::config::{Mode, RlConfig};
use crate::error::{ensure, Result};
use crate::eval::pipeline::EpochSampler;
use crate::latent_space::usage_entropy;
use crate::model::Model;
use crate::rl_engine::advantage::{compute_advantages, Advantages};
use crate::rl_engine::reward::RlTask;
use crate::rl_engine::rollout::{action_space, rollout, RolloutGroup, RolloutSettings};
use crate::rl_engine::update::{policy_update, trainable, UpdateSettings};
use crate::seed;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct MetricsRow {
    pub step: usize,
    pub mean_reward: f64,
    pub kl: f64,
    /// Normalized entropy of the actions sampled during the step.
    pub entropy: f64,
    pub rollout_seconds: f64,
    pub update_seconds: f64,
}

/// Rollout groups for `indices` at one RL step. Task `i` at step `step`
/// draws from `seed::derive(seed, [step, i])`, response `j` within it from
/// that seed extended by `j`.
pub fn rollout_batch<T: Real>(
    model: &Model<T>,
    tasks: &[RlTask],
    indices: &[usize],
    group_size: usize,
    settings: &RolloutSettings,
    seed: u64,
    step: usize,
) -> Result<Vec<RolloutGroup<T>>> {
    indices
        .iter()
        .map(|&i| rollout(model, &tasks[i], i, group_size, settings, seed::derive(seed, &[step as u64, i as u64])))
        .collect()
}

/// Action histogram over every trace in `groups`.
pub fn action_counts<T>(groups: &[RolloutGroup<T>], num_actions: usize) -> Vec<usize> {
    let mut counts = vec![0usize; num_actions];
    for g in groups {
        for r in &g.responses {
            for s in &r.trace {
                counts[s.action] += 1;
            }
        }
    }
    counts
}

/// Runs `rl.steps` iterations on `model` in place. Every step draws a full
/// batch of tasks, continuing into the next epoch when needed. In latent mode only the
/// policy changes; token mode anchors the KL term to a snapshot of the
/// incoming model.
pub fn train_rl<T: Real>(
    model: &mut Model<T>,
    rl: &RlConfig,
    tasks: &[RlTask],
    seed: u64,
    mut on_row: impl FnMut(&MetricsRow) -> Result<()>,
) -> Result<Vec<MetricsRow>> {
    rl.validate()?;
    ensure(!tasks.is_empty() || rl.steps == 0, || "no RL tasks".into())?;
    let max_len = model.cfg.max_len;
    let settings = RolloutSettings { mode: rl.mode, temperature: rl.rollout_temperature, max_len };
    let upd = UpdateSettings::from_config(rl, max_len);
    let reference = match rl.mode {
        Mode::Token => Some(model.clone()),
        Mode::Latent => None,
    };
    let mut opt = Adam::new(
        &model.store,
        model.mask(trainable(rl.mode)),
        LrSchedule::Constant { lr: rl.learning_rate },
        AdamConfig::default(),
    );
    let mut sampler = EpochSampler::new(tasks.len(), seed::derive(seed, &[0x51]));
    let k = action_space(model, rl.mode);
    let mut rows = Vec::with_capacity(rl.steps);
    for step in 0..rl.steps {
        let want = rl.batch_tasks.min(tasks.len());
        let mut idx = Vec::with_capacity(want);
        while idx.len() < want {
            idx.extend(sampler.next_batch(want - idx.len()));
        }
        let t0 = Instant::now();
        let groups = rollout_batch(model, tasks, &idx, rl.group_size, &settings, seed, step)?;
        let rollout_seconds = t0.elapsed().as_secs_f64();
        let advs: Vec<Advantages> = groups
            .iter()
            .map(|g| compute_advantages(&g.rewards(), &g.lengths(), rl.algorithm))
            .collect::<Result<_>>()?;
        let t1 = Instant::now();
        let stats = policy_update(model, &mut opt, &groups, &advs, tasks, reference.as_ref(), &upd)?;
        let update_seconds = t1.elapsed().as_secs_f64();
        let n: usize = groups.iter().map(|g| g.responses.len()).sum();
        let mean_reward = groups.iter().flat_map(|g| g.rewards()).sum::<f64>() / n.max(1) as f64;
        let row = MetricsRow {
            step,
            mean_reward,
            kl: stats.kl,
            entropy: usage_entropy(&action_counts(&groups, k)),
            rollout_seconds,
            update_seconds,
        };
        if step % 10 == 0 || step + 1 == rl.steps {
            info!("rl step {step}: reward {mean_reward:.4} kl {:.5} entropy {:.3}", row.kl, row.entropy);
        }
        on_row(&row)?;
        rows.push(row);
    }
    Ok(rows)
}
