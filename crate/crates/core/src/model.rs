//! All trainable components bundled over one parameter store.

use latent_autograd::tensor::Tensor;
use latent_autograd::{Graph, ParamMask, ParamStore, Real, Var};
use rand::RngCore;
use sha2::{Digest, Sha256};

use crate::backbone::{self, Backbone, Sample};
use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::latent_space::{ActionNet, Codebook, CODEBOOK, INVERSE};
use crate::policy_bc::{POLICY, POLICY_INIT};
use crate::projector::{standard_normal, GaussianMap, Projector, PROJ_FWD, PROJ_REV};
use crate::seed;
use crate::world_model::{Merge, MERGE};

/// Checkpoint component names in storage order.
pub const COMPONENTS: [&str; 8] =
    [backbone::COMPONENT, MERGE, CODEBOOK, INVERSE, PROJ_FWD, PROJ_REV, POLICY, POLICY_INIT];

/// Components making up the frozen language world model.
pub const WORLD_MODEL: [&str; 2] = [backbone::COMPONENT, MERGE];

#[derive(Clone, Debug)]
pub struct Model<T> {
    pub cfg: ModelConfig,
    pub store: ParamStore<T>,
    pub backbone: Backbone,
    pub merge: Merge,
    pub codebook: Codebook,
    pub inverse: ActionNet,
    pub proj_fwd: Projector,
    pub proj_rev: Projector,
    pub policy: ActionNet,
    pub policy_init: ActionNet,
}

impl<T: Real> Model<T> {
    fn assemble(cfg: &ModelConfig, mut store: ParamStore<T>, mut rng: Option<&mut seed::Rng>) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.d_model;
        let s = &mut store;
        let backbone = Backbone::build(s, rng.as_deref_mut(), cfg)?;
        let merge = Merge::build(s, rng.as_deref_mut(), d, cfg.merge_hidden_mult)?;
        let codebook = Codebook::build(s, rng.as_deref_mut(), cfg.codebook_size, d)?;
        let action_net = |s: &mut ParamStore<T>, rng: Option<&mut seed::Rng>, name: &str, layers: usize| {
            ActionNet::build(s, rng, name, layers, d, cfg.heads, cfg.ffn_mult, cfg.codebook_size)
        };
        let inverse = action_net(s, rng.as_deref_mut(), INVERSE, cfg.inverse_layers)?;
        let proj = |s: &mut ParamStore<T>, rng: Option<&mut seed::Rng>, name: &str| {
            Projector::build(s, rng, name, d, cfg.projector_hidden_mult, cfg.projector_hidden_layers, cfg.log_std_clamp)
        };
        let proj_fwd = proj(s, rng.as_deref_mut(), PROJ_FWD)?;
        let proj_rev = proj(s, rng.as_deref_mut(), PROJ_REV)?;
        let policy = action_net(s, rng.as_deref_mut(), POLICY, cfg.policy_layers)?;
        let fresh = rng.is_some();
        let policy_init = action_net(s, rng.as_deref_mut(), POLICY_INIT, cfg.policy_layers)?;
        if fresh {
            store.copy_component_renamed(POLICY, POLICY_INIT)?;
        }
        for (id, name, t) in store.iter() {
            if !t.is_finite() {
                return Err(Error::Numerical(format!("tensor `{name}` ({id:?}) is not finite")));
            }
        }
        Ok(Self {
            cfg: cfg.clone(),
            store,
            backbone,
            merge,
            codebook,
            inverse,
            proj_fwd,
            proj_rev,
            policy,
            policy_init,
        })
    }

    /// Fresh random initialization derived from `seed`.
    pub fn new(cfg: &ModelConfig, seed: u64) -> Result<Self> {
        let mut rng = seed::rng(seed, &[0x1417]);
        Self::assemble(cfg, ParamStore::new(), Some(&mut rng))
    }

    /// Binds component handles to an existing store (e.g. a loaded checkpoint).
    pub fn from_store(cfg: &ModelConfig, store: ParamStore<T>) -> Result<Self> {
        let expected = Self::new(cfg, 0)?;
        for (_, name, t) in expected.store.iter() {
            let id = store.id(name).ok_or_else(|| Error::validation(format!("checkpoint is missing tensor `{name}`")))?;
            if store.get(id).shape() != t.shape() {
                return Err(Error::validation(format!(
                    "tensor `{name}` has shape {:?}, config expects {:?}",
                    store.get(id).shape(),
                    t.shape()
                )));
            }
        }
        if store.len() != expected.store.len() {
            return Err(Error::validation("checkpoint has tensors the config does not define"));
        }
        Self::assemble(cfg, store, None)
    }

    pub fn cast<U: Real>(&self) -> Model<U> {
        Model::from_store(&self.cfg, self.store.cast()).expect("same layout")
    }

    pub fn mask(&self, components: &[&str]) -> ParamMask {
        self.store.mask(components)
    }

    /// Snapshots the current policy into the frozen KL reference.
    pub fn sync_policy_init(&mut self) -> Result<()> {
        Ok(self.store.copy_component_renamed(POLICY, POLICY_INIT)?)
    }

    /// Per-step embeddings fed to the latent modules: the image-text hidden
    /// states for paired samples, the forward projector's mean (or a sample
    /// when `noise` is given) for text-only ones.
    pub fn routed_rows(&self, g: &mut Graph<T>, sample: &Sample, noise: Option<&mut dyn RngCore>) -> Result<Var> {
        sample.validate(&self.cfg)?;
        let h = self.backbone.encode_rows(g, &self.store, sample, true);
        if sample.is_paired() {
            return Ok(h);
        }
        let (mu, ls) = self.proj_fwd.forward(g, &self.store, h);
        Ok(match noise {
            None => mu,
            Some(rng) => {
                let (n, d) = g.value(mu).shape();
                let eps = g.constant(Tensor::from_fn(n, d, |_, _| T::from_f64_lossy(standard_normal(rng))));
                let sd = g.exp(ls);
                let j = g.mul(sd, eps);
                g.add(mu, j)
            }
        })
    }

    pub fn routed_rows_eval(&self, sample: &Sample) -> Result<Tensor<T>> {
        sample.validate(&self.cfg)?;
        let h = self.backbone.encode_rows_eval(&self.store, sample, true);
        Ok(if sample.is_paired() { h } else { self.proj_fwd.eval(&self.store, &h).0 })
    }

    /// SHA-256 over names, shapes and little-endian values of the listed components.
    pub fn hash_components(&self, components: &[&str]) -> String {
        let mut h = Sha256::new();
        for (_, name, t) in self.store.iter() {
            if components.contains(&latent_autograd::params::component_of(name)) {
                h.update(name.as_bytes());
                h.update((t.rows() as u64).to_le_bytes());
                h.update((t.cols() as u64).to_le_bytes());
                for &v in t.data() {
                    h.update(v.to_f64_lossy().to_le_bytes());
                }
            }
        }
        format!("{:x}", h.finalize())
    }

    /// Hash of backbone (including the LM head) and merge MLP.
    pub fn world_model_hash(&self) -> String {
        self.hash_components(&WORLD_MODEL)
    }
}
