//! Pre-layer-norm transformer stacks shared by the backbone and the two
//! latent-action adapters.
//!
//! A [`Scope::Causal`] stack attends over the whole prefix. A
//! [`Scope::Position`] stack treats every row as its own length-one
//! sequence: softmax over a single key is exactly one, so the attention
//! sublayer reduces to its value and output projections and the query/key
//! projections are omitted.

use latent_autograd::tensor::{
    gelu, layer_norm_rows, matmul, matmul_nt, softmax_rows, Tensor,
};
use latent_autograd::{Graph, ParamId, ParamStore, Real, Var};
use rand::Rng;

use crate::error::Result;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Scope {
    Causal,
    Position,
}

#[derive(Clone, Debug)]
pub struct BlockParams {
    ln1_g: ParamId,
    ln1_b: ParamId,
    wq: Option<ParamId>,
    wk: Option<ParamId>,
    wv: ParamId,
    wo: ParamId,
    bo: ParamId,
    ln2_g: ParamId,
    ln2_b: ParamId,
    w1: ParamId,
    b1: ParamId,
    w2: ParamId,
    b2: ParamId,
}

#[derive(Clone, Debug)]
pub struct Stack {
    pub scope: Scope,
    pub d_model: usize,
    pub heads: usize,
    blocks: Vec<BlockParams>,
    lnf_g: ParamId,
    lnf_b: ParamId,
}

pub(crate) fn uniform<T: Real>(rng: &mut impl Rng, rows: usize, cols: usize, bound: f64) -> Tensor<T> {
    Tensor::from_fn(rows, cols, |_, _| T::from_f64_lossy(rng.gen_range(-bound..=bound)))
}

/// Fan-in scaled uniform initialization for a `fan_in x fan_out` weight.
pub(crate) fn linear_init<T: Real>(rng: &mut impl Rng, fan_in: usize, fan_out: usize) -> Tensor<T> {
    uniform(rng, fan_in, fan_out, 1.0 / (fan_in as f64).sqrt())
}

/// Registers (or, with `rng = None`, looks up) a parameter.
pub(crate) fn register<T: Real>(
    store: &mut ParamStore<T>,
    rng: &mut Option<&mut crate::seed::Rng>,
    name: String,
    init: impl FnOnce(&mut crate::seed::Rng) -> Tensor<T>,
) -> Result<ParamId> {
    match rng {
        Some(r) => Ok(store.add(name, init(r))?),
        None => store
            .id(&name)
            .ok_or_else(|| crate::Error::validation(format!("checkpoint is missing tensor `{name}`"))),
    }
}

impl Stack {
    /// Creates the stack's parameters under `prefix` when `rng` is given,
    /// otherwise binds existing ones by name.
    pub fn build<T: Real>(
        store: &mut ParamStore<T>,
        mut rng: Option<&mut crate::seed::Rng>,
        prefix: &str,
        scope: Scope,
        layers: usize,
        d: usize,
        heads: usize,
        ffn_mult: usize,
    ) -> Result<Self> {
        let h = d * ffn_mult;
        let ones = |_: &mut crate::seed::Rng| Tensor::full(1, d, T::one());
        let zeros_d = |_: &mut crate::seed::Rng| Tensor::zeros(1, d);
        let mut blocks = Vec::with_capacity(layers);
        for l in 0..layers {
            let p = |n: &str| format!("{prefix}.layer{l}.{n}");
            let ln1_g = register(store, &mut rng, p("ln1_g"), ones)?;
            let ln1_b = register(store, &mut rng, p("ln1_b"), zeros_d)?;
            let (wq, wk) = match scope {
                Scope::Causal => (
                    Some(register(store, &mut rng, p("wq"), |r| linear_init(r, d, d))?),
                    Some(register(store, &mut rng, p("wk"), |r| linear_init(r, d, d))?),
                ),
                Scope::Position => (None, None),
            };
            let wv = register(store, &mut rng, p("wv"), |r| linear_init(r, d, d))?;
            let wo = register(store, &mut rng, p("wo"), |r| linear_init(r, d, d))?;
            let bo = register(store, &mut rng, p("bo"), zeros_d)?;
            let ln2_g = register(store, &mut rng, p("ln2_g"), ones)?;
            let ln2_b = register(store, &mut rng, p("ln2_b"), zeros_d)?;
            let w1 = register(store, &mut rng, p("w1"), |r| linear_init(r, d, h))?;
            let b1 = register(store, &mut rng, p("b1"), |_| Tensor::zeros(1, h))?;
            let w2 = register(store, &mut rng, p("w2"), |r| linear_init(r, h, d))?;
            let b2 = register(store, &mut rng, p("b2"), zeros_d)?;
            blocks.push(BlockParams { ln1_g, ln1_b, wq, wk, wv, wo, bo, ln2_g, ln2_b, w1, b1, w2, b2 });
        }
        let lnf_g = register(store, &mut rng, format!("{prefix}.lnf_g"), ones)?;
        let lnf_b = register(store, &mut rng, format!("{prefix}.lnf_b"), zeros_d)?;
        Ok(Self { scope, d_model: d, heads, blocks, lnf_g, lnf_b })
    }

    pub fn num_layers(&self) -> usize {
        self.blocks.len()
    }

    /// `x`: `n x d` rows; returns the final-normed `n x d` hidden states.
    pub fn forward<T: Real>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Var {
        let mut x = x;
        let dh = self.d_model / self.heads;
        let scale = T::one() / T::from_usize(dh).unwrap().sqrt();
        for b in &self.blocks {
            let (g1, b1n) = (g.param(store, b.ln1_g), g.param(store, b.ln1_b));
            let h = g.layer_norm(x, g1, b1n);
            let wv = g.param(store, b.wv);
            let v = g.matmul(h, wv);
            let att = match (self.scope, b.wq, b.wk) {
                (Scope::Causal, Some(wq), Some(wk)) => {
                    let wq = g.param(store, wq);
                    let wk = g.param(store, wk);
                    let q = g.matmul(h, wq);
                    let k = g.matmul(h, wk);
                    if self.heads == 1 {
                        let s = g.matmul_nt(q, k);
                        let s = g.scale(s, scale);
                        let p = g.causal_softmax(s);
                        g.matmul(p, v)
                    } else {
                        let mut outs = Vec::with_capacity(self.heads);
                        for hd in 0..self.heads {
                            let qh = g.slice_cols(q, hd * dh, dh);
                            let kh = g.slice_cols(k, hd * dh, dh);
                            let vh = g.slice_cols(v, hd * dh, dh);
                            let s = g.matmul_nt(qh, kh);
                            let s = g.scale(s, scale);
                            let p = g.causal_softmax(s);
                            outs.push(g.matmul(p, vh));
                        }
                        g.concat_cols(&outs)
                    }
                }
                _ => v,
            };
            let wo = g.param(store, b.wo);
            let bo = g.param(store, b.bo);
            let o = g.linear(att, wo, Some(bo));
            x = g.add(x, o);
            let (g2, b2n) = (g.param(store, b.ln2_g), g.param(store, b.ln2_b));
            let h2 = g.layer_norm(x, g2, b2n);
            let w1 = g.param(store, b.w1);
            let b1 = g.param(store, b.b1);
            let f = g.linear(h2, w1, Some(b1));
            let f = g.gelu(f);
            let w2 = g.param(store, b.w2);
            let b2 = g.param(store, b.b2);
            let f = g.linear(f, w2, Some(b2));
            x = g.add(x, f);
        }
        let gf = g.param(store, self.lnf_g);
        let bf = g.param(store, self.lnf_b);
        g.layer_norm(x, gf, bf)
    }

    /// Graph-free evaluation of a batch of independent rows (position scope)
    /// or of one full causal sequence.
    pub fn eval<T: Real>(&self, store: &ParamStore<T>, x: &Tensor<T>) -> Tensor<T> {
        match self.scope {
            Scope::Position => {
                let mut x = x.clone();
                for b in &self.blocks {
                    let h = ln(store, b.ln1_g, b.ln1_b, &x);
                    let v = matmul(&h, store.get(b.wv));
                    let mut o = matmul(&v, store.get(b.wo));
                    o.add_row_assign(store.get(b.bo).data());
                    x.add_assign(&o);
                    ffn(store, b, &mut x);
                }
                ln(store, self.lnf_g, self.lnf_b, &x)
            }
            Scope::Causal => {
                let mut cache = StackCache::new(self.blocks.len());
                self.extend(store, &mut cache, x)
            }
        }
    }

    /// Appends rows to a causal stack's key/value cache and returns their
    /// final-normed hidden states.
    pub fn extend<T: Real>(
        &self,
        store: &ParamStore<T>,
        cache: &mut StackCache<T>,
        x: &Tensor<T>,
    ) -> Tensor<T> {
        debug_assert_eq!(self.scope, Scope::Causal);
        let dh = self.d_model / self.heads;
        let scale = T::one() / T::from_usize(dh).unwrap().sqrt();
        let mut x = x.clone();
        for (li, b) in self.blocks.iter().enumerate() {
            let h = ln(store, b.ln1_g, b.ln1_b, &x);
            let q = matmul(&h, store.get(b.wq.expect("causal block")));
            let k = matmul(&h, store.get(b.wk.expect("causal block")));
            let v = matmul(&h, store.get(b.wv));
            cache.keys[li].append_rows(&k);
            cache.values[li].append_rows(&v);
            let keys = &cache.keys[li];
            let vals = &cache.values[li];
            let mut att = Tensor::zeros(x.rows(), self.d_model);
            for hd in 0..self.heads {
                let (qh, kh, vh) = if self.heads == 1 {
                    (q.clone(), keys.clone(), vals.clone())
                } else {
                    (q.slice_cols(hd * dh, dh), keys.slice_cols(hd * dh, dh), vals.slice_cols(hd * dh, dh))
                };
                let s = matmul_nt(&qh, &kh).map(|v| v * scale);
                let p = softmax_rows(&s, true);
                let oh = matmul(&p, &vh);
                for r in 0..x.rows() {
                    att.row_mut(r)[hd * dh..(hd + 1) * dh].copy_from_slice(oh.row(r));
                }
            }
            let mut o = matmul(&att, store.get(b.wo));
            o.add_row_assign(store.get(b.bo).data());
            x.add_assign(&o);
            ffn(store, b, &mut x);
        }
        ln(store, self.lnf_g, self.lnf_b, &x)
    }
}

/// Fully connected layers with GELU between them (none after the last).
#[derive(Clone, Debug)]
pub struct Mlp {
    layers: Vec<(ParamId, ParamId)>,
    pub dims: Vec<usize>,
}

impl Mlp {
    pub fn build<T: Real>(
        store: &mut ParamStore<T>,
        mut rng: Option<&mut crate::seed::Rng>,
        prefix: &str,
        dims: &[usize],
    ) -> Result<Self> {
        let mut layers = Vec::with_capacity(dims.len().saturating_sub(1));
        for (l, w) in dims.windows(2).enumerate() {
            let (i, o) = (w[0], w[1]);
            let wid = register(store, &mut rng, format!("{prefix}.l{l}.w"), |r| linear_init(r, i, o))?;
            let bid = register(store, &mut rng, format!("{prefix}.l{l}.b"), |_| Tensor::zeros(1, o))?;
            for (id, shape) in [(wid, (i, o)), (bid, (1, o))] {
                if store.get(id).shape() != shape {
                    return Err(crate::Error::validation(format!(
                        "tensor `{}` has shape {:?}, expected {shape:?}",
                        store.name(id),
                        store.get(id).shape()
                    )));
                }
            }
            layers.push((wid, bid));
        }
        Ok(Self { layers, dims: dims.to_vec() })
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        self.layers.iter().flat_map(|&(w, b)| [w, b]).collect()
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Var {
        let mut h = x;
        for (l, &(w, b)) in self.layers.iter().enumerate() {
            let wv = g.param(store, w);
            let bv = g.param(store, b);
            h = g.linear(h, wv, Some(bv));
            if l + 1 < self.layers.len() {
                h = g.gelu(h);
            }
        }
        h
    }

    pub fn eval<T: Real>(&self, store: &ParamStore<T>, x: &Tensor<T>) -> Tensor<T> {
        let mut h = x.clone();
        for (l, &(w, b)) in self.layers.iter().enumerate() {
            h = matmul(&h, store.get(w));
            h.add_row_assign(store.get(b).data());
            if l + 1 < self.layers.len() {
                h = h.map(gelu);
            }
        }
        h
    }
}

fn ln<T: Real>(store: &ParamStore<T>, g: ParamId, b: ParamId, x: &Tensor<T>) -> Tensor<T> {
    layer_norm_rows(x, store.get(g).data(), store.get(b).data()).0
}

fn ffn<T: Real>(store: &ParamStore<T>, b: &BlockParams, x: &mut Tensor<T>) {
    let h2 = ln(store, b.ln2_g, b.ln2_b, x);
    let mut f = matmul(&h2, store.get(b.w1));
    f.add_row_assign(store.get(b.b1).data());
    let f = f.map(gelu);
    let mut f = matmul(&f, store.get(b.w2));
    f.add_row_assign(store.get(b.b2).data());
    x.add_assign(&f);
}

/// Per-layer keys and values of the positions processed so far.
#[derive(Clone, Debug)]
pub struct StackCache<T> {
    keys: Vec<Tensor<T>>,
    values: Vec<Tensor<T>>,
}

impl<T: Real> StackCache<T> {
    pub fn new(layers: usize) -> Self {
        Self {
            keys: (0..layers).map(|_| Tensor::zeros(0, 0)).collect(),
            values: (0..layers).map(|_| Tensor::zeros(0, 0)).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.keys.first().map_or(0, |k| k.rows())
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}
