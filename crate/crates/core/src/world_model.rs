//! The language world model: a merge MLP fusing a context embedding with a
//! latent code, followed by the backbone's LM head.

use latent_autograd::tensor::{argmax, softmax, Tensor};
use latent_autograd::{Graph, Grads, ParamMask, ParamStore, Real, Var};
use log::warn;
use rand::RngCore;

use crate::backbone::Sample;
use crate::error::{ensure, Result};
use crate::latent_space::{gumbel_st_graph, ForwardMode};
use crate::model::Model;
use crate::seed;
use crate::transformer::Mlp;

pub const MERGE: &str = "merge";

#[derive(Clone, Debug)]
pub struct Merge {
    pub mlp: Mlp,
    pub dim: usize,
}

impl Merge {
    pub fn build<T: Real>(
        store: &mut ParamStore<T>,
        rng: Option<&mut seed::Rng>,
        d: usize,
        hidden_mult: usize,
    ) -> Result<Self> {
        let mlp = Mlp::build(store, rng, "merge.mlp", &[2 * d, hidden_mult * d, d])?;
        Ok(Self { mlp, dim: d })
    }

    /// `context` and `code` are `n x d`; returns `n x d`.
    pub fn forward<T: Real>(&self, g: &mut Graph<T>, store: &ParamStore<T>, context: Var, code: Var) -> Var {
        let x = g.concat_cols(&[context, code]);
        self.mlp.forward(g, store, x)
    }

    pub fn eval<T: Real>(&self, store: &ParamStore<T>, context: &Tensor<T>, code: &Tensor<T>) -> Tensor<T> {
        let (n, d) = context.shape();
        let x = Tensor::from_fn(n, 2 * d, |r, c| if c < d { context.get(r, c) } else { code.get(r, c - d) });
        self.mlp.eval(store, &x)
    }
}

pub fn merge<T: Real>(store: &ParamStore<T>, mp: &Merge, context: &[T], code: &[T]) -> Result<Vec<T>> {
    ensure(context.len() == mp.dim && code.len() == mp.dim, || {
        format!("merge expects two {}-vectors, got {} and {}", mp.dim, context.len(), code.len())
    })?;
    let c = Tensor::row_vector(context.to_vec());
    let k = Tensor::row_vector(code.to_vec());
    Ok(mp.eval(store, &c, &k).into_data())
}

/// Next-token probabilities at text step `t` given a code vector.
pub fn next_token_distribution<T: Real>(model: &Model<T>, sample: &Sample, t: usize, code: &[T]) -> Result<Vec<T>> {
    let e = model.backbone.encode_context(&model.store, sample, t)?;
    let m = merge(&model.store, &model.merge, &e.vector, code)?;
    Ok(softmax(&model.backbone.lm_head(&model.store, &m)?))
}

/// Where the world model's per-step codes come from during training.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CodeSource {
    /// Straight-through assignment from the inverse dynamics model.
    Inverse,
    /// The same codebook row at every step (no future information).
    Constant(usize),
    /// Noise-free inverse argmax codes treated as constants, so no gradient
    /// reaches the inverse model or flows back through its input.
    Oracle,
}

#[derive(Clone, Copy, Debug)]
pub struct InverseOptions {
    pub temperature: f64,
    pub codes: CodeSource,
    pub mode: ForwardMode,
    pub hard_eval: bool,
    /// Route text-only samples through a projector sample rather than its mean.
    pub sample_text_route: bool,
}

impl Default for InverseOptions {
    fn default() -> Self {
        Self {
            temperature: 1.0,
            codes: CodeSource::Inverse,
            mode: ForwardMode::Hard,
            hard_eval: false,
            sample_text_route: false,
        }
    }
}

/// Per-sample graph pieces of the inverse dynamics objective.
pub struct InverseTerms {
    /// Summed negative log-likelihood over predicted tokens.
    pub nll: Var,
    pub logits: Var,
    pub codes: Vec<usize>,
}

/// Builds the summed next-token NLL of one sample with `m >= 2` tokens.
pub fn inverse_sample_graph<T: Real>(
    g: &mut Graph<T>,
    model: &Model<T>,
    sample: &Sample,
    opts: &InverseOptions,
    rng: &mut dyn RngCore,
) -> Result<InverseTerms> {
    let m = sample.len();
    ensure(m >= 2, || "inverse dynamics needs at least two tokens".into())?;
    let n = m - 1;
    let noise: Option<&mut dyn RngCore> = if opts.sample_text_route { Some(&mut *rng) } else { None };
    let h = model.routed_rows(g, sample, noise)?;
    let ctx = g.slice_rows(h, 0, n);
    let cb = g.param(&model.store, model.codebook.id);
    let (code, codes) = match opts.codes {
        CodeSource::Inverse => {
            let fut = g.slice_rows(h, 1, n);
            let logits = model.inverse.forward(g, &model.store, fut);
            let (st, idx) = gumbel_st_graph(g, logits, opts.temperature, rng, opts.hard_eval, opts.mode)?;
            (g.matmul(st, cb), idx)
        }
        CodeSource::Oracle => {
            let fut = g.value(h).slice_rows(1, n);
            let lv = model.inverse.logits_eval(&model.store, &fut);
            let idx: Vec<usize> = (0..n).map(|r| lv.argmax_row(r)).collect();
            (g.select_rows(cb, idx.clone()), idx)
        }
        CodeSource::Constant(k) => {
            ensure(k < model.codebook.size, || format!("constant code {k} outside codebook"))?;
            (g.select_rows(cb, vec![k; n]), vec![k; n])
        }
    };
    let merged = model.merge.forward(g, &model.store, ctx, code);
    let logits = model.backbone.lm_head_graph(g, &model.store, merged);
    let lp = g.log_softmax(logits);
    let targets: Vec<usize> = sample.tokens[1..].iter().map(|&t| t as usize).collect();
    let picked = g.pick(lp, targets);
    let s = g.sum(picked);
    Ok(InverseTerms { nll: g.scale(s, -T::one()), logits, codes })
}

/// Per-token mean loss over a batch and, when `mask` is given, its gradient.
pub fn inverse_loss_grads<T: Real>(
    model: &Model<T>,
    batch: &[Sample],
    opts: &InverseOptions,
    rng: &mut dyn RngCore,
    mask: Option<&ParamMask>,
) -> Result<(f64, usize, Option<Grads<T>>)> {
    ensure(!batch.is_empty(), || "empty batch".into())?;
    let total: usize = batch.iter().map(|s| s.len().saturating_sub(1)).sum();
    let mut grads = mask.map(|_| Grads::for_store(&model.store));
    if total == 0 {
        warn!("batch has no sequence with a next token");
        return Ok((0.0, 0, grads));
    }
    let inv = T::from_f64_lossy(1.0 / total as f64);
    let mut loss = 0.0;
    for s in batch {
        if s.len() < 2 {
            warn!("skipping length-{} sequence: no next token", s.len());
            continue;
        }
        let mut g = match mask {
            Some(mk) => Graph::new(mk.clone()),
            None => Graph::inference(),
        };
        let terms = inverse_sample_graph(&mut g, model, s, opts, rng)?;
        let l = g.scale(terms.nll, inv);
        loss += g.value(l).scalar().to_f64_lossy();
        if let Some(acc) = grads.as_mut() {
            g.backward_into(l, acc);
        }
    }
    Ok((loss, total, grads))
}

/// Mean next-token cross-entropy per predicted token, with codes inferred
/// from the future step.
pub fn inverse_dynamics_loss<T: Real>(
    model: &Model<T>,
    batch: &[Sample],
    temperature: f64,
    rng: &mut dyn RngCore,
) -> Result<f64> {
    let opts = InverseOptions { temperature, ..InverseOptions::default() };
    Ok(inverse_loss_grads(model, batch, &opts, rng, None)?.0)
}

/// Teacher-forced next-token accuracy; inverse codes use noise-free argmax.
pub fn next_token_accuracy<T: Real>(model: &Model<T>, samples: &[Sample], codes: CodeSource) -> Result<f64> {
    let opts = InverseOptions { codes, hard_eval: true, ..InverseOptions::default() };
    let mut rng = seed::rng(0, &[]);
    let (mut hit, mut total) = (0usize, 0usize);
    for s in samples.iter().filter(|s| s.len() >= 2) {
        let mut g = Graph::inference();
        let terms = inverse_sample_graph(&mut g, model, s, &opts, &mut rng)?;
        let lv = g.value(terms.logits);
        for (r, &tgt) in s.tokens[1..].iter().enumerate() {
            hit += usize::from(argmax(lv.row(r)) == tgt as usize);
            total += 1;
        }
    }
    ensure(total > 0, || "no predictable tokens".into())?;
    Ok(hit as f64 / total as f64)
}
