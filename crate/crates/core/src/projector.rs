//! Gaussian cross-modal projectors between text-only and image-text
//! embedding spaces, and their training losses.
//!
//! The backbone is frozen for every loss here: embeddings enter the graph as
//! constants.

use latent_autograd::tensor::Tensor;
use latent_autograd::{Graph, ParamStore, Real, Var};
use rand::{Rng, RngCore};

use crate::backbone::Sample;
use crate::error::{ensure, Result};
use crate::model::Model;
use crate::seed;
use crate::transformer::Mlp;

pub const PROJ_FWD: &str = "proj_fwd";
pub const PROJ_REV: &str = "proj_rev";

/// Diagonal Gaussian over embedding space.
#[derive(Clone, Debug, PartialEq)]
pub struct GaussianEmbedding<T> {
    pub mean: Vec<T>,
    pub log_std: Vec<T>,
}

impl<T: Real> GaussianEmbedding<T> {
    pub fn std(&self) -> Vec<T> {
        self.log_std.iter().map(|v| v.exp()).collect()
    }
}

/// Anything mapping `n x d` rows to Gaussian `(mean, log_std)` rows.
pub trait GaussianMap {
    fn forward<T: Real>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> (Var, Var);
}

/// Mean equal to the input, unit standard deviation.
#[derive(Clone, Copy, Debug, Default)]
pub struct IdentityMap;

impl GaussianMap for IdentityMap {
    fn forward<T: Real>(&self, g: &mut Graph<T>, _store: &ParamStore<T>, x: Var) -> (Var, Var) {
        let (n, d) = g.value(x).shape();
        let zeros = g.constant(Tensor::zeros(n, d));
        (x, zeros)
    }
}

/// Two MLPs `d -> hd -> .. -> d`, one for the mean and one for log-std.
#[derive(Clone, Debug)]
pub struct Projector {
    pub component: String,
    pub mean_net: Mlp,
    pub log_std_net: Mlp,
    pub log_std_clamp: f64,
    pub dim: usize,
}

impl Projector {
    pub fn build<T: Real>(
        store: &mut ParamStore<T>,
        mut rng: Option<&mut seed::Rng>,
        component: &str,
        d: usize,
        hidden_mult: usize,
        hidden_layers: usize,
        log_std_clamp: f64,
    ) -> Result<Self> {
        let mut dims = vec![d];
        dims.extend(std::iter::repeat(d * hidden_mult).take(hidden_layers));
        dims.push(d);
        let mean_net = Mlp::build(store, rng.as_deref_mut(), &format!("{component}.mean"), &dims)?;
        let log_std_net = Mlp::build(store, rng, &format!("{component}.log_std"), &dims)?;
        Ok(Self { component: component.to_string(), mean_net, log_std_net, log_std_clamp, dim: d })
    }

    pub fn eval<T: Real>(&self, store: &ParamStore<T>, x: &Tensor<T>) -> (Tensor<T>, Tensor<T>) {
        let c = T::from_f64_lossy(self.log_std_clamp);
        let mean = self.mean_net.eval(store, x);
        let ls = self.log_std_net.eval(store, x).map(|v| v.max(-c).min(c));
        (mean, ls)
    }

    pub fn project<T: Real>(&self, store: &ParamStore<T>, x: &[T]) -> Result<GaussianEmbedding<T>> {
        ensure(x.len() == self.dim, || format!("{} expects {} inputs, got {}", self.component, self.dim, x.len()))?;
        let (m, s) = self.eval(store, &Tensor::row_vector(x.to_vec()));
        Ok(GaussianEmbedding { mean: m.into_data(), log_std: s.into_data() })
    }
}

impl GaussianMap for Projector {
    fn forward<T: Real>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> (Var, Var) {
        let m = self.mean_net.forward(g, store, x);
        let s = self.log_std_net.forward(g, store, x);
        let c = T::from_f64_lossy(self.log_std_clamp);
        (m, g.clamp(s, -c, c))
    }
}

/// Forward projector `P`: text-only embedding to image-text Gaussian.
pub fn project_t2vt<T: Real>(store: &ParamStore<T>, p: &Projector, e_t: &[T]) -> Result<GaussianEmbedding<T>> {
    p.project(store, e_t)
}

/// Reverse projector `P'`: image-text embedding to text-only Gaussian.
pub fn project_vt2t<T: Real>(store: &ParamStore<T>, p: &Projector, e_vt: &[T]) -> Result<GaussianEmbedding<T>> {
    p.project(store, e_vt)
}

/// `1/2 (||(target - mean) / std||^2 + ||log std^2||_1)`.
pub fn gaussian_nll<T: Real>(target: &[T], g: &GaussianEmbedding<T>) -> Result<T> {
    ensure(target.len() == g.mean.len() && target.len() == g.log_std.len(), || {
        format!("gaussian_nll dims: target {}, mean {}, log_std {}", target.len(), g.mean.len(), g.log_std.len())
    })?;
    let two = T::from_f64_lossy(2.0);
    let mut quad = T::zero();
    let mut pen = T::zero();
    for ((&t, &m), &s) in target.iter().zip(&g.mean).zip(&g.log_std) {
        let z = (t - m) / s.exp();
        quad = quad + z * z;
        pen = pen + (two * s).abs();
    }
    Ok((quad + pen) / two)
}

/// Graph form of [`gaussian_nll`] summed over all rows.
pub fn gaussian_nll_graph<T: Real>(g: &mut Graph<T>, target: Var, mean: Var, log_std: Var) -> Var {
    let diff = g.sub(target, mean);
    let neg = g.scale(log_std, -T::one());
    let inv_std = g.exp(neg);
    let z = g.mul(diff, inv_std);
    let z2 = g.mul(z, z);
    let two_s = g.scale(log_std, T::from_f64_lossy(2.0));
    let pen = g.abs(two_s);
    let both = g.add(z2, pen);
    let s = g.sum(both);
    g.scale(s, T::from_f64_lossy(0.5))
}

/// Summed `L_t2vt` and `L_vt2t` terms over the rows of paired embeddings.
pub fn paired_terms<T: Real>(
    g: &mut Graph<T>,
    store: &ParamStore<T>,
    fwd: &impl GaussianMap,
    rev: &impl GaussianMap,
    e_t: Var,
    e_vt: Var,
) -> (Var, Var) {
    let (mu, ls) = fwd.forward(g, store, e_t);
    let t2vt = gaussian_nll_graph(g, e_vt, mu, ls);
    let (nu, tau) = rev.forward(g, store, e_vt);
    let vt2t = gaussian_nll_graph(g, e_t, nu, tau);
    (t2vt, vt2t)
}

/// Summed cycle term: `e_t` scored under `P'(mean of P(e_t))`. With `noise`
/// the reverse projector receives a reparameterized sample instead.
pub fn cycle_term<T: Real>(
    g: &mut Graph<T>,
    store: &ParamStore<T>,
    fwd: &impl GaussianMap,
    rev: &impl GaussianMap,
    e_t: Var,
    noise: Option<&mut dyn RngCore>,
) -> Var {
    let (mu, ls) = fwd.forward(g, store, e_t);
    let x = match noise {
        None => mu,
        Some(rng) => {
            let (n, d) = g.value(mu).shape();
            let eps = Tensor::from_fn(n, d, |_, _| T::from_f64_lossy(standard_normal(rng)));
            let eps = g.constant(eps);
            let sd = g.exp(ls);
            let jitter = g.mul(sd, eps);
            g.add(mu, jitter)
        }
    };
    let (nu, tau) = rev.forward(g, store, x);
    gaussian_nll_graph(g, e_t, nu, tau)
}

pub(crate) fn standard_normal(rng: &mut dyn RngCore) -> f64 {
    let u1: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
    let u2: f64 = rng.gen_range(0.0..1.0);
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

/// Frozen text-only and image-text embeddings of the first `m - 1` steps.
fn frozen_pair<T: Real>(model: &Model<T>, s: &Sample) -> Option<(Tensor<T>, Tensor<T>)> {
    let n = s.len().checked_sub(1).filter(|&n| n > 0)?;
    let e_vt = model.backbone.encode_rows_eval(&model.store, s, true).slice_rows(0, n);
    let e_t = model.backbone.encode_rows_eval(&model.store, s, false).slice_rows(0, n);
    Some((e_t, e_vt))
}

fn stack_rows<T: Real>(parts: Vec<Tensor<T>>, d: usize) -> Tensor<T> {
    let mut out = Tensor::zeros(0, d);
    for p in parts {
        out.append_rows(&p);
    }
    out
}

/// Builds the paired-batch terms on `g`. Returns `(t2vt, vt2t)` averaged per step.
pub fn step1_graph<T: Real>(g: &mut Graph<T>, model: &Model<T>, batch: &[Sample]) -> Result<Option<(Var, Var)>> {
    ensure(batch.iter().all(|s| s.is_paired()), || "projector step 1 needs paired samples only".into())?;
    for s in batch {
        s.validate(&model.cfg)?;
    }
    let d = model.cfg.d_model;
    let (ts, vts): (Vec<_>, Vec<_>) = batch.iter().filter_map(|s| frozen_pair(model, s)).unzip();
    let e_t = stack_rows(ts, d);
    let e_vt = stack_rows(vts, d);
    let n = e_t.rows();
    if n == 0 {
        return Ok(None);
    }
    let (a, b) = (g.constant(e_t), g.constant(e_vt));
    let (t2vt, vt2t) = paired_terms(g, &model.store, &model.proj_fwd, &model.proj_rev, a, b);
    let inv = T::from_f64_lossy(1.0 / n as f64);
    Ok(Some((g.scale(t2vt, inv), g.scale(vt2t, inv))))
}

/// Builds the cycle term for a text-only batch, averaged per step.
pub fn cycle_graph<T: Real>(
    g: &mut Graph<T>,
    model: &Model<T>,
    batch: &[Sample],
    noise: Option<&mut dyn RngCore>,
) -> Result<Option<Var>> {
    ensure(batch.iter().all(|s| !s.is_paired()), || "cycle loss needs text-only samples only".into())?;
    let d = model.cfg.d_model;
    let mut parts = Vec::new();
    for s in batch {
        s.validate(&model.cfg)?;
        if let Some(n) = s.len().checked_sub(1).filter(|&n| n > 0) {
            parts.push(model.backbone.encode_rows_eval(&model.store, s, false).slice_rows(0, n));
        }
    }
    let e_t = stack_rows(parts, d);
    let n = e_t.rows();
    if n == 0 {
        return Ok(None);
    }
    let x = g.constant(e_t);
    let c = cycle_term(g, &model.store, &model.proj_fwd, &model.proj_rev, x, noise);
    Ok(Some(g.scale(c, T::from_f64_lossy(1.0 / n as f64))))
}

/// `L_t2vt + L_vt2t` on a paired batch.
pub fn loss_projector_step1<T: Real>(model: &Model<T>, batch: &[Sample]) -> Result<f64> {
    let mut g = Graph::inference();
    Ok(match step1_graph(&mut g, model, batch)? {
        Some((a, b)) => g.value(a).scalar().to_f64_lossy() + g.value(b).scalar().to_f64_lossy(),
        None => 0.0,
    })
}

pub fn loss_cycle<T: Real>(model: &Model<T>, batch: &[Sample]) -> Result<f64> {
    let mut g = Graph::inference();
    Ok(cycle_graph(&mut g, model, batch, None)?.map_or(0.0, |v| g.value(v).scalar().to_f64_lossy()))
}

/// `L_t2vt + L_vt2t + L_cycle`.
pub fn loss_projector_step2<T: Real>(model: &Model<T>, paired: &[Sample], text: &[Sample]) -> Result<f64> {
    Ok(loss_projector_step1(model, paired)? + loss_cycle(model, text)?)
}

/// Adds the full step-2 objective to `g`; `None` when both batches are empty.
pub fn step2_graph<T: Real>(
    g: &mut Graph<T>,
    model: &Model<T>,
    paired: &[Sample],
    text: &[Sample],
    noise: Option<&mut dyn RngCore>,
) -> Result<Option<Var>> {
    let mut terms = Vec::new();
    if let Some((a, b)) = step1_graph(g, model, paired)? {
        terms.push(a);
        terms.push(b);
    }
    if let Some(c) = cycle_graph(g, model, text, noise)? {
        terms.push(c);
    }
    Ok(terms.into_iter().reduce(|a, b| g.add(a, b)))
}
