//! The latent-action policy and its behavior-cloning initialization against
//! inverse-dynamics targets.

use latent_autograd::tensor::{argmax, log_softmax, Tensor};
use latent_autograd::{Graph, Grads, ParamMask, ParamStore, Real};
use log::warn;
use rand::Rng;

use crate::backbone::{ContextEmbedding, Sample};
use crate::error::{ensure, Result};
use crate::latent_space::ActionNet;
use crate::model::Model;

pub const POLICY: &str = "policy";
pub const POLICY_INIT: &str = "policy_init";

/// Logits over the codebook for the current-step embedding.
pub fn policy_logits<T: Real>(store: &ParamStore<T>, pp: &ActionNet, current: &ContextEmbedding<T>) -> Result<Vec<T>> {
    pp.logits(store, &current.vector)
}

/// Draws an index from `softmax(logits / temperature)` and returns it with
/// its log-probability under that distribution. Temperature 0 is greedy and
/// reports the untempered log-probability of the argmax.
pub fn sample_action<T: Real, R: Rng + ?Sized>(logits: &[T], temperature: f64, rng: &mut R) -> Result<(usize, f64)> {
    ensure(!logits.is_empty(), || "empty logits".into())?;
    ensure(logits.iter().all(|v| v.is_finite()), || "non-finite logits".into())?;
    ensure(temperature >= 0.0 && temperature.is_finite(), || format!("invalid temperature {temperature}"))?;
    let l: Vec<f64> = logits.iter().map(|v| v.to_f64_lossy()).collect();
    if temperature == 0.0 {
        let i = argmax(&l);
        return Ok((i, log_softmax(&l)[i]));
    }
    let scaled: Vec<f64> = l.iter().map(|v| v / temperature).collect();
    let lp = log_softmax(&scaled);
    let u: f64 = rng.gen_range(0.0..1.0);
    let mut acc = 0.0;
    let mut pick = lp.len() - 1;
    for (i, &v) in lp.iter().enumerate() {
        acc += v.exp();
        if u < acc {
            pick = i;
            break;
        }
    }
    Ok((pick, lp[pick]))
}

/// Policy inputs (steps `1..m-1`) and the inverse model's noise-free argmax
/// codes read from the following step.
pub fn bc_targets<T: Real>(model: &Model<T>, sample: &Sample) -> Result<Option<(Tensor<T>, Vec<usize>)>> {
    let m = sample.len();
    if m < 2 {
        return Ok(None);
    }
    let rows = model.routed_rows_eval(sample)?;
    let logits = model.inverse.logits_eval(&model.store, &rows.slice_rows(1, m - 1));
    let targets = (0..m - 1).map(|r| logits.argmax_row(r)).collect();
    Ok(Some((rows.slice_rows(0, m - 1), targets)))
}

/// Mean per-step cross-entropy of the policy against inverse-model codes,
/// with the gradient when `mask` is given.
pub fn bc_loss_grads<T: Real>(
    model: &Model<T>,
    policy: &ActionNet,
    batch: &[Sample],
    mask: Option<&ParamMask>,
) -> Result<(f64, usize, Option<Grads<T>>)> {
    ensure(!batch.is_empty(), || "empty batch".into())?;
    let mut inputs = Tensor::zeros(0, model.cfg.d_model);
    let mut targets = Vec::new();
    for s in batch {
        match bc_targets(model, s)? {
            Some((x, t)) => {
                inputs.append_rows(&x);
                targets.extend(t);
            }
            None => warn!("skipping length-{} sequence: no target action", s.len()),
        }
    }
    let mut grads = mask.map(|_| Grads::for_store(&model.store));
    let n = targets.len();
    if n == 0 {
        return Ok((0.0, 0, grads));
    }
    let mut g = match mask {
        Some(mk) => Graph::new(mk.clone()),
        None => Graph::inference(),
    };
    let x = g.constant(inputs);
    let logits = policy.forward(&mut g, &model.store, x);
    let lp = g.log_softmax(logits);
    let picked = g.pick(lp, targets);
    let s = g.sum(picked);
    let loss = g.scale(s, T::from_f64_lossy(-1.0 / n as f64));
    let value = g.value(loss).scalar().to_f64_lossy();
    if let Some(acc) = grads.as_mut() {
        g.backward_into(loss, acc);
    }
    Ok((value, n, grads))
}

pub fn behavior_cloning_loss<T: Real>(model: &Model<T>, batch: &[Sample]) -> Result<f64> {
    Ok(bc_loss_grads(model, &model.policy, batch, None)?.0)
}

/// Fraction of steps where the policy's argmax equals the inverse target.
pub fn bc_accuracy<T: Real>(model: &Model<T>, samples: &[Sample]) -> Result<f64> {
    let (mut hit, mut total) = (0usize, 0usize);
    for s in samples {
        if let Some((x, t)) = bc_targets(model, s)? {
            let logits = model.policy.logits_eval(&model.store, &x);
            for (r, &tgt) in t.iter().enumerate() {
                hit += usize::from(logits.argmax_row(r) == tgt);
                total += 1;
            }
        }
    }
    ensure(total > 0, || "no target actions".into())?;
    Ok(hit as f64 / total as f64)
}
