//! Supervised fine-tuning before RL, and the plain causal-LM objective used
//! by the token-level baseline.

use latent_autograd::{Graph, Grads, ParamMask, Real};
use log::warn;

use crate::backbone::{self, Sample};
use crate::config::{Config, Mode, StageSchedule};
use crate::error::{ensure, Result};
use crate::eval::pipeline::{run_stage, StageReport};
use crate::model::Model;
use crate::world_model::{inverse_loss_grads, CodeSource, InverseOptions, MERGE};

/// Mean next-token cross-entropy of `lm_head(e_t)` per predicted token, with
/// the gradient when `mask` is given.
pub fn token_lm_loss_grads<T: Real>(
    model: &Model<T>,
    batch: &[Sample],
    mask: Option<&ParamMask>,
) -> Result<(f64, usize, Option<Grads<T>>)> {
    ensure(!batch.is_empty(), || "empty batch".into())?;
    let total: usize = batch.iter().map(|s| s.len().saturating_sub(1)).sum();
    let mut grads = mask.map(|_| Grads::for_store(&model.store));
    if total == 0 {
        return Ok((0.0, 0, grads));
    }
    let inv = T::from_f64_lossy(-1.0 / total as f64);
    let mut loss = 0.0;
    for s in batch {
        s.validate(&model.cfg)?;
        if s.len() < 2 {
            warn!("skipping length-{} sequence: no next token", s.len());
            continue;
        }
        let mut g = match mask {
            Some(m) => Graph::new(m.clone()),
            None => Graph::inference(),
        };
        let h = model.backbone.encode_rows(&mut g, &model.store, s, true);
        let rows = g.slice_rows(h, 0, s.len() - 1);
        let logits = model.backbone.lm_head_graph(&mut g, &model.store, rows);
        let lp = g.log_softmax(logits);
        let picked = g.pick(lp, s.tokens[1..].iter().map(|&t| t as usize).collect());
        let sum = g.sum(picked);
        let l = g.scale(sum, inv);
        loss += g.value(l).scalar().to_f64_lossy();
        if let Some(acc) = grads.as_mut() {
            g.backward_into(l, acc);
        }
    }
    Ok((loss, total, grads))
}

pub fn sft_components(mode: Mode) -> &'static [&'static str] {
    match mode {
        Mode::Token => &[backbone::COMPONENT],
        Mode::Latent => &[backbone::COMPONENT, MERGE],
    }
}

/// Next-token fine-tuning on supervised samples. Token mode trains backbone
/// and LM head on `lm_head(e_t)`; latent mode trains backbone, LM head and
/// merge MLP through the world model with frozen oracle inverse codes.
pub fn sft_finetune<T: Real>(
    model: &mut Model<T>,
    mode: Mode,
    data: &[Sample],
    sched: &StageSchedule,
    seed: u64,
) -> Result<StageReport> {
    if sched.epochs == 0 || sched.max_steps == Some(0) {
        return Ok(StageReport::default());
    }
    let mask = model.mask(sft_components(mode));
    let m2 = mask.clone();
    let opts = InverseOptions { codes: CodeSource::Oracle, hard_eval: true, ..InverseOptions::default() };
    run_stage("sft", model, mask, sched, data.len(), seed, |m, idx, rng| {
        let batch: Vec<Sample> = idx.iter().map(|&i| data[i].clone()).collect();
        let (loss, _, grads) = match mode {
            Mode::Token => token_lm_loss_grads(m, &batch, Some(&m2))?,
            Mode::Latent => inverse_loss_grads(m, &batch, &opts, rng, Some(&m2))?,
        };
        Ok((loss, grads.expect("mask given")))
    })
}

/// Causal-LM training of the token baseline's backbone on paired and
/// text-only samples (text-only samples simply have no image rows).
pub fn pretrain_token_lm<T: Real>(
    model: &mut Model<T>,
    cfg: &Config,
    data: &[Sample],
    seed: u64,
) -> Result<StageReport> {
    let mask = model.mask(&[backbone::COMPONENT]);
    let m2 = mask.clone();
    run_stage("token-lm", model, mask, &cfg.rl_engine.token_pretrain, data.len(), seed, |m, idx, _| {
        let batch: Vec<Sample> = idx.iter().map(|&i| data[i].clone()).collect();
        let (loss, _, grads) = token_lm_loss_grads(m, &batch, Some(&m2))?;
        Ok((loss, grads.expect("mask given")))
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::{ImageGrid, BOS};
    use crate::config::ModelConfig;
    use latent_autograd::tensor::Tensor;

    fn data() -> Vec<Sample> {
        vec![
            Sample::paired(ImageGrid::new(2, 2, vec![0, 1, 2, 1]).unwrap(), vec![BOS, 5, 6, 7, 2]),
            Sample::text(vec![BOS, 9, 10, 2]),
        ]
    }

    #[test]
    fn uniform_head_costs_log_vocab() {
        let mut m = Model::<f64>::new(&ModelConfig::gradcheck(), 1).unwrap();
        let id = m.backbone.lm_head_id();
        *m.store.get_mut(id) = Tensor::zeros(8, 16);
        let (l, n, _) = token_lm_loss_grads(&m, &data(), None).unwrap();
        assert_eq!(n, 7);
        assert!((l - 16f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn zero_epochs_is_identity() {
        let mut m = Model::<f64>::new(&ModelConfig::gradcheck(), 2).unwrap();
        let before = m.store.clone();
        let sched = StageSchedule { epochs: 0, ..StageSchedule::default() };
        for mode in [Mode::Token, Mode::Latent] {
            let r = sft_finetune(&mut m, mode, &data(), &sched, 0).unwrap();
            assert_eq!(r.steps(), 0);
        }
        assert_eq!(m.store, before);
    }

    #[test]
    fn modes_train_their_components_only() {
        let sched = StageSchedule { lr: 1e-2, epochs: 1, batch_size: 2, ..StageSchedule::default() };
        for mode in [Mode::Token, Mode::Latent] {
            let mut m = Model::<f64>::new(&ModelConfig::gradcheck(), 3).unwrap();
            let frozen: Vec<&str> = crate::model::COMPONENTS
                .iter()
                .copied()
                .filter(|c| !sft_components(mode).contains(c))
                .collect();
            let before = m.hash_components(&frozen);
            let bb = m.hash_components(&[backbone::COMPONENT]);
            sft_finetune(&mut m, mode, &data(), &sched, 0).unwrap();
            assert_eq!(m.hash_components(&frozen), before, "{mode:?}");
            assert_ne!(m.hash_components(&[backbone::COMPONENT]), bb);
        }
    }
}
