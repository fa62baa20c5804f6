//! Training stages in pipeline order: world model, projector warm-up, joint
//! latent-space training and behavior cloning.

use std::time::Instant;

use latent_autograd::{Adam, AdamConfig, Grads, ParamMask, Real};
use log::info;
use rand::seq::SliceRandom;
use rand::RngCore;

use crate::backbone::{self, Sample};
use crate::config::{Config, StageSchedule};
use crate::error::{ensure, Error, Result};
use crate::latent_space::{CODEBOOK, INVERSE};
use crate::model::Model;
use crate::policy_bc::{bc_loss_grads, POLICY};
use crate::projector::{step1_graph, step2_graph, PROJ_FWD, PROJ_REV};
use crate::seed;
use crate::world_model::{inverse_loss_grads, InverseOptions, MERGE};

/// Loss value after every optimizer step of one stage.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct StageReport {
    pub losses: Vec<f64>,
    pub seconds: f64,
}

impl StageReport {
    pub fn steps(&self) -> usize {
        self.losses.len()
    }

    /// Mean loss over the first and last `k` steps.
    pub fn head_tail(&self, k: usize) -> (f64, f64) {
        let k = k.clamp(1, self.losses.len().max(1));
        let mean = |s: &[f64]| s.iter().sum::<f64>() / s.len().max(1) as f64;
        (mean(&self.losses[..k.min(self.losses.len())]), mean(&self.losses[self.losses.len().saturating_sub(k)..]))
    }
}

/// Deterministic epoch-wise shuffling of `0..n`.
#[derive(Clone, Debug)]
pub struct EpochSampler {
    n: usize,
    seed: u64,
    epoch: u64,
    order: Vec<usize>,
    pos: usize,
}

impl EpochSampler {
    pub fn new(n: usize, seed: u64) -> Self {
        let mut s = Self { n, seed, epoch: 0, order: Vec::new(), pos: 0 };
        s.reshuffle();
        s
    }

    fn reshuffle(&mut self) {
        self.order = (0..self.n).collect();
        self.order.shuffle(&mut seed::rng(self.seed, &[self.epoch]));
        self.pos = 0;
    }

    /// Next batch; a batch never straddles an epoch boundary.
    pub fn next_batch(&mut self, size: usize) -> Vec<usize> {
        if self.pos >= self.n {
            self.epoch += 1;
            self.reshuffle();
        }
        let end = (self.pos + size).min(self.n);
        let b = self.order[self.pos..end].to_vec();
        self.pos = end;
        b
    }
}

pub fn check_grads<T: Real>(grads: &Grads<T>, what: &str, step: usize) -> Result<()> {
    if grads.is_finite() {
        Ok(())
    } else {
        Err(Error::Numerical(format!("{what}: non-finite gradient at step {step}")))
    }
}

/// Runs `steps` Adam updates on the masked parameters. `step_fn` receives the
/// model, the batch's sample indices and a per-step rng and returns the loss
/// and gradient.
#[allow(clippy::too_many_arguments)]
pub fn run_stage<T: Real>(
    what: &str,
    model: &mut Model<T>,
    mask: ParamMask,
    sched: &StageSchedule,
    n_samples: usize,
    seed: u64,
    mut step_fn: impl FnMut(&Model<T>, &[usize], &mut dyn RngCore) -> Result<(f64, Grads<T>)>,
) -> Result<StageReport> {
    ensure(n_samples > 0, || format!("{what}: no training samples"))?;
    let steps = sched.steps_for(n_samples);
    let mut opt = Adam::new(&model.store, mask, sched.lr_schedule(steps), AdamConfig::default());
    let mut sampler = EpochSampler::new(n_samples, seed::derive(seed, &[0]));
    let mut report = StageReport::default();
    let start = Instant::now();
    for step in 0..steps {
        let batch = sampler.next_batch(sched.batch_size.max(1));
        let mut rng = seed::rng(seed, &[1, step as u64]);
        let (loss, mut grads) = step_fn(model, &batch, &mut rng)?;
        if !loss.is_finite() {
            return Err(Error::Numerical(format!("{what}: loss is {loss} at step {step}")));
        }
        check_grads(&grads, what, step)?;
        opt.step(&mut model.store, &mut grads);
        report.losses.push(loss);
        if step % 50 == 0 || step + 1 == steps {
            info!("{what} step {step}/{steps} loss {loss:.4}");
        }
    }
    report.seconds = start.elapsed().as_secs_f64();
    Ok(report)
}

fn pick(data: &[Sample], idx: &[usize]) -> Vec<Sample> {
    idx.iter().map(|&i| data[i].clone()).collect()
}

fn inverse_opts(cfg: &Config) -> InverseOptions {
    InverseOptions {
        temperature: cfg.latent_space.gumbel_temperature,
        sample_text_route: cfg.world_model.sample_text_route,
        ..InverseOptions::default()
    }
}

pub const STAGE1_COMPONENTS: [&str; 4] = [backbone::COMPONENT, MERGE, CODEBOOK, INVERSE];

/// World model and inverse dynamics on paired data.
pub fn train_stage1<T: Real>(model: &mut Model<T>, cfg: &Config, paired: &[Sample], seed: u64) -> Result<StageReport> {
    ensure(paired.iter().all(|s| s.is_paired()), || "stage 1 trains on paired samples only".into())?;
    let mask = model.mask(&STAGE1_COMPONENTS);
    let opts = inverse_opts(cfg);
    let m2 = mask.clone();
    run_stage("stage1", model, mask, &cfg.world_model.stage1, paired.len(), seed, |m, idx, rng| {
        let batch = pick(paired, idx);
        let (loss, _, grads) = inverse_loss_grads(m, &batch, &opts, rng, Some(&m2))?;
        Ok((loss, grads.expect("mask given")))
    })
}

/// Both projectors on paired data with a frozen backbone.
pub fn train_projector_step1<T: Real>(
    model: &mut Model<T>,
    cfg: &Config,
    paired: &[Sample],
    seed: u64,
) -> Result<StageReport> {
    let mask = model.mask(&[PROJ_FWD, PROJ_REV]);
    let m2 = mask.clone();
    run_stage("projector1", model, mask, &cfg.projector.step1, paired.len(), seed, |m, idx, _| {
        let batch = pick(paired, idx);
        let mut g = latent_autograd::Graph::new(m2.clone());
        let mut grads = Grads::for_store(&m.store);
        let loss = match step1_graph(&mut g, m, &batch)? {
            Some((a, b)) => {
                let l = g.add(a, b);
                g.backward_into(l, &mut grads);
                g.value(l).scalar().to_f64_lossy()
            }
            None => 0.0,
        };
        Ok((loss, grads))
    })
}

pub const STAGE3_COMPONENTS: [&str; 6] = [backbone::COMPONENT, MERGE, CODEBOOK, INVERSE, PROJ_FWD, PROJ_REV];

/// Joint latent-space training on the mixed corpus: the inverse dynamics
/// loss plus the step-2 projector objective, weighted per the config.
pub fn train_stage3<T: Real>(
    model: &mut Model<T>,
    cfg: &Config,
    paired: &[Sample],
    text: &[Sample],
    seed: u64,
) -> Result<StageReport> {
    let mixed: Vec<&Sample> = paired.iter().chain(text).collect();
    let mask = model.mask(&STAGE3_COMPONENTS);
    let m2 = mask.clone();
    let opts = inverse_opts(cfg);
    let (wi, wp) = (cfg.world_model.inverse_weight, cfg.world_model.projector_weight);
    let sample_cycle = cfg.projector.sample_cycle;
    run_stage("stage3", model, mask, &cfg.world_model.stage3, mixed.len(), seed, |m, idx, rng| {
        let batch: Vec<Sample> = idx.iter().map(|&i| mixed[i].clone()).collect();
        let (pb, tb): (Vec<Sample>, Vec<Sample>) = batch.iter().cloned().partition(|s| s.is_paired());
        let (li, _, gi) = inverse_loss_grads(m, &batch, &opts, rng, Some(&m2))?;
        let mut grads = gi.expect("mask given");
        grads.scale(T::from_f64_lossy(wi));
        let mut g = latent_autograd::Graph::new(m2.clone());
        let noise: Option<&mut dyn RngCore> = if sample_cycle { Some(&mut *rng) } else { None };
        let lp = match step2_graph(&mut g, m, &pb, &tb, noise)? {
            Some(l) => {
                let l = g.scale(l, T::from_f64_lossy(wp));
                g.backward_into(l, &mut grads);
                g.value(l).scalar().to_f64_lossy()
            }
            None => 0.0,
        };
        Ok((wi * li + lp, grads))
    })
}

/// Policy-only behavior cloning against noise-free inverse-model codes.
pub fn train_bc<T: Real>(model: &mut Model<T>, cfg: &Config, data: &[Sample], seed: u64) -> Result<StageReport> {
    let mask = model.mask(&[POLICY]);
    let m2 = mask.clone();
    let report = run_stage("bc", model, mask, &cfg.policy_bc.bc, data.len(), seed, |m, idx, _| {
        let batch = pick(data, idx);
        let (loss, _, grads) = bc_loss_grads(m, &m.policy, &batch, Some(&m2))?;
        Ok((loss, grads.expect("mask given")))
    })?;
    model.sync_policy_init()?;
    Ok(report)
}
