//! Discrete latent actions: the codebook, the inverse dynamics network and
//! straight-through Gumbel-softmax code assignment.

use latent_autograd::tensor::{argmax, matmul, softmax, Tensor};
use latent_autograd::{Graph, ParamId, ParamStore, Real, Var};
use rand::Rng;

use crate::backbone::ContextEmbedding;
use crate::error::{ensure, Error, Result};
use crate::seed;
use crate::transformer::{linear_init, register, uniform, Scope, Stack};

#[derive(Clone, Debug)]
pub struct Codebook {
    pub id: ParamId,
    pub size: usize,
    pub dim: usize,
}

pub const CODEBOOK: &str = "codebook";
pub const INVERSE: &str = "inverse";

impl Codebook {
    /// Kaiming-uniform rows: `U(-sqrt(6/d), sqrt(6/d))`.
    pub fn build<T: Real>(
        store: &mut ParamStore<T>,
        mut rng: Option<&mut seed::Rng>,
        size: usize,
        dim: usize,
    ) -> Result<Self> {
        ensure(size >= 2, || format!("codebook needs at least 2 codes, got {size}"))?;
        let bound = (6.0 / dim as f64).sqrt();
        let id = register(store, &mut rng, "codebook.codes".into(), |r| uniform(r, size, dim, bound))?;
        let t = store.get(id);
        ensure(t.shape() == (size, dim), || format!("codebook shape {:?} != ({size}, {dim})", t.shape()))?;
        Ok(Self { id, size, dim })
    }

    pub fn lookup<T: Real>(&self, store: &ParamStore<T>, index: usize) -> Result<Vec<T>> {
        if index >= self.size {
            return Err(Error::Index { what: "codebook", index, len: self.size });
        }
        Ok(store.get(self.id).row(index).to_vec())
    }
}

/// Row `index` of the code matrix.
pub fn codebook_lookup<T: Real>(store: &ParamStore<T>, cb: &Codebook, index: usize) -> Result<Vec<T>> {
    cb.lookup(store, index)
}

/// A position-wise transformer adapter followed by a linear head onto the
/// code indices. Both the inverse dynamics model and the policy use it.
#[derive(Clone, Debug)]
pub struct ActionNet {
    pub component: String,
    pub stack: Stack,
    head_w: ParamId,
    head_b: ParamId,
    pub num_actions: usize,
}

impl ActionNet {
    #[allow(clippy::too_many_arguments)]
    pub fn build<T: Real>(
        store: &mut ParamStore<T>,
        mut rng: Option<&mut seed::Rng>,
        component: &str,
        layers: usize,
        d: usize,
        heads: usize,
        ffn_mult: usize,
        num_actions: usize,
    ) -> Result<Self> {
        let stack = Stack::build(
            store,
            rng.as_deref_mut(),
            &format!("{component}.adapter"),
            Scope::Position,
            layers,
            d,
            heads,
            ffn_mult,
        )?;
        let head_w = register(store, &mut rng, format!("{component}.head_w"), |r| linear_init(r, d, num_actions))?;
        let head_b = register(store, &mut rng, format!("{component}.head_b"), |_| Tensor::zeros(1, num_actions))?;
        Ok(Self { component: component.to_string(), stack, head_w, head_b, num_actions })
    }

    pub fn head_ids(&self) -> (ParamId, ParamId) {
        (self.head_w, self.head_b)
    }

    /// `n x d` embeddings to `n x K` logits.
    pub fn forward<T: Real>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Var {
        let h = self.stack.forward(g, store, x);
        let w = g.param(store, self.head_w);
        let b = g.param(store, self.head_b);
        g.linear(h, w, Some(b))
    }

    pub fn logits_eval<T: Real>(&self, store: &ParamStore<T>, x: &Tensor<T>) -> Tensor<T> {
        let h = self.stack.eval(store, x);
        let mut out = matmul(&h, store.get(self.head_w));
        out.add_row_assign(store.get(self.head_b).data());
        out
    }

    pub fn logits<T: Real>(&self, store: &ParamStore<T>, emb: &[T]) -> Result<Vec<T>> {
        ensure(emb.len() == self.stack.d_model, || {
            format!("{} expects {} inputs, got {}", self.component, self.stack.d_model, emb.len())
        })?;
        Ok(self.logits_eval(store, &Tensor::row_vector(emb.to_vec())).into_data())
    }
}

/// Result of a straight-through draw before contraction with the codebook.
#[derive(Clone, Debug, PartialEq)]
pub struct Assignment<T> {
    pub index: usize,
    /// Gumbel-softmax relaxation `g`, on the simplex.
    pub soft: Vec<T>,
    /// Forward value of the straight-through vector: the hard one-hot.
    pub straight_through: Vec<T>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CodeAssignment<T> {
    pub index: usize,
    pub soft: Vec<T>,
    pub straight_through: Vec<T>,
    pub code: Vec<T>,
}

/// `-ln(-ln U)` with `U` drawn from the open unit interval.
pub fn gumbel_noise<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    let u: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
    -(-u.ln()).ln()
}

fn check_logits<T: Real>(logits: &[T], temperature: f64) -> Result<()> {
    ensure(temperature > 0.0 && temperature.is_finite(), || {
        format!("gumbel temperature must be positive, got {temperature}")
    })?;
    ensure(!logits.is_empty(), || "empty logits".into())?;
    ensure(logits.iter().all(|v| v.is_finite()), || "non-finite logits".into())
}

/// Perturbed and tempered logits `(l + G) / tau`; without noise when `hard_eval`.
fn tempered<T: Real, R: Rng + ?Sized>(logits: &[T], temperature: f64, rng: &mut R, hard_eval: bool) -> Vec<T> {
    logits
        .iter()
        .map(|&l| {
            let noise = if hard_eval { 0.0 } else { gumbel_noise(rng) };
            T::from_f64_lossy((l.to_f64_lossy() + noise) / temperature)
        })
        .collect()
}

pub fn gumbel_st_assign<T: Real, R: Rng + ?Sized>(
    logits: &[T],
    temperature: f64,
    rng: &mut R,
    hard_eval: bool,
) -> Result<Assignment<T>> {
    check_logits(logits, temperature)?;
    let z = tempered(logits, temperature, rng, hard_eval);
    let soft = softmax(&z);
    let index = argmax(&z);
    let mut straight_through = vec![T::zero(); logits.len()];
    straight_through[index] = T::one();
    Ok(Assignment { index, soft, straight_through })
}

pub fn infer_latent_action<T: Real, R: Rng + ?Sized>(
    store: &ParamStore<T>,
    inv: &ActionNet,
    cb: &Codebook,
    future: &ContextEmbedding<T>,
    temperature: f64,
    rng: &mut R,
    hard_eval: bool,
) -> Result<CodeAssignment<T>> {
    let logits = inv.logits(store, &future.vector)?;
    let a = gumbel_st_assign(&logits, temperature, rng, hard_eval)?;
    let code = matmul(&Tensor::row_vector(a.straight_through.clone()), store.get(cb.id)).into_data();
    Ok(CodeAssignment { index: a.index, soft: a.soft, straight_through: a.straight_through, code })
}

/// Forward value used inside training graphs.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum ForwardMode {
    /// Hard one-hot forward, soft backward (straight-through).
    #[default]
    Hard,
    /// Soft relaxation in both directions; the loss is then a smooth
    /// function of the logits, which finite differences can check.
    Soft,
}

/// Graph form of the straight-through assignment over a batch of logits
/// (`n x K`). Returns the `n x K` assignment node and the chosen indices.
pub fn gumbel_st_graph<T: Real, R: Rng + ?Sized>(
    g: &mut Graph<T>,
    logits: Var,
    temperature: f64,
    rng: &mut R,
    hard_eval: bool,
    mode: ForwardMode,
) -> Result<(Var, Vec<usize>)> {
    ensure(temperature > 0.0 && temperature.is_finite(), || {
        format!("gumbel temperature must be positive, got {temperature}")
    })?;
    let lv = g.value(logits);
    ensure(lv.is_finite(), || "non-finite logits".into())?;
    let (n, k) = lv.shape();
    let mut noise = Tensor::zeros(n, k);
    if !hard_eval {
        for v in noise.data_mut() {
            *v = T::from_f64_lossy(gumbel_noise(rng));
        }
    }
    let nz = g.constant(noise);
    let z = g.add(logits, nz);
    let z = g.scale(z, T::from_f64_lossy(1.0 / temperature));
    let soft = g.softmax(z);
    let zv = g.value(z);
    let idx: Vec<usize> = (0..n).map(|r| zv.argmax_row(r)).collect();
    let out = match mode {
        ForwardMode::Soft => soft,
        ForwardMode::Hard => {
            let mut hard = Tensor::zeros(n, k);
            for (r, &i) in idx.iter().enumerate() {
                hard.set(r, i, T::one());
            }
            g.straight_through(soft, hard)
        }
    };
    Ok((out, idx))
}

/// Normalized entropy of a code-usage histogram, in `[0, 1]`.
pub fn usage_entropy(counts: &[usize]) -> f64 {
    let total: usize = counts.iter().sum();
    if total == 0 || counts.len() < 2 {
        return 0.0;
    }
    let h: f64 = counts
        .iter()
        .filter(|&&c| c > 0)
        .map(|&c| {
            let p = c as f64 / total as f64;
            -p * p.ln()
        })
        .sum();
    (h / (counts.len() as f64).ln()).clamp(0.0, 1.0)
}
