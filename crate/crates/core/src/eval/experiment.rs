//! End-to-end runs composing the training stages: the latent-action
//! pipeline (optionally without text-only data) and the token baseline.

use latent_autograd::Real;
use log::info;

use crate::backbone::{Sample, Vocabulary};
use crate::config::{Config, Mode};
use crate::corpus_tasks::{sft_samples, Corpus, GrammarSpec};
use crate::error::Result;
use crate::eval::pipeline::{train_bc, train_projector_step1, train_stage1, train_stage3, StageReport};
use crate::model::Model;
use crate::rl_engine::reward::RlTask;
use crate::rl_engine::sft::{pretrain_token_lm, sft_finetune};
use crate::rl_engine::train::{train_rl, MetricsRow};
use crate::seed;

/// Grammar, vocabulary and generated corpus for one configuration.
#[derive(Clone, Debug)]
pub struct World {
    pub spec: GrammarSpec,
    pub vocab: Vocabulary,
    pub corpus: Corpus,
}

pub fn grammar(cfg: &Config) -> Result<(GrammarSpec, Vocabulary)> {
    let mut spec = GrammarSpec::for_model(&cfg.backbone)?;
    spec.text_only_style_fraction = cfg.corpus_tasks.text_only_style_fraction;
    spec.validate()?;
    let vocab = spec.vocabulary(cfg.backbone.vocab_size)?;
    Ok((spec, vocab))
}

/// Held-out splits get as many samples as there are tasks per split.
pub fn build_world(cfg: &Config, seed: u64) -> Result<World> {
    let (spec, vocab) = grammar(cfg)?;
    let c = &cfg.corpus_tasks;
    let corpus = Corpus::generate(&spec, &vocab, c.n_paired, c.n_text, c.n_tasks, c.n_tasks, seed)?;
    Ok(World { spec, vocab, corpus })
}

/// Splits the RL training tasks into the SFT share and the RL share.
pub fn split_tasks(tasks: &[RlTask], sft_fraction: f64) -> (&[RlTask], &[RlTask]) {
    let n = ((tasks.len() as f64) * sft_fraction).round() as usize;
    tasks.split_at(n.min(tasks.len()))
}

/// Which corpora shape the latent space.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Coverage {
    Full,
    /// Every stage sees paired data only.
    PairedOnly,
}

#[derive(Clone, Debug, Default)]
pub struct PipelineReport {
    pub stages: Vec<(&'static str, StageReport)>,
}

impl PipelineReport {
    fn push(&mut self, name: &'static str, r: StageReport) {
        info!("{name}: {} steps in {:.1}s, loss {:?}", r.steps(), r.seconds, r.head_tail(20));
        self.stages.push((name, r));
    }

    pub fn stage(&self, name: &str) -> Option<&StageReport> {
        self.stages.iter().find(|(n, _)| *n == name).map(|(_, r)| r)
    }
}

/// Per-stage seeds derived from one run seed, shared by the library
/// pipelines and the command-line stages.
pub mod stage_seed {
    pub const INIT: u64 = 0;
    pub const STAGE1: u64 = 1;
    pub const PROJECTOR1: u64 = 2;
    pub const STAGE3: u64 = 3;
    pub const BC: u64 = 4;
    pub const SFT: u64 = 5;
    pub const RL: u64 = 6;
    pub const SFT_DATA: u64 = 7;
    pub const EVAL: u64 = 8;
    pub const DIVERSITY: u64 = 9;
}

pub fn stage_seed(seed: u64, stage: u64) -> u64 {
    seed::derive(seed, &[stage])
}

impl World {
    /// A corpus saved by `Corpus::save`, checked against the grammar `cfg` implies.
    pub fn load(cfg: &Config, dir: &std::path::Path) -> Result<Self> {
        let (spec, vocab) = grammar(cfg)?;
        let manifest = crate::corpus_tasks::read_manifest(&dir.join("manifest.json"))?;
        crate::error::ensure(manifest.grammar_hash == spec.hash(), || {
            format!("corpus in {} was generated with a different grammar", dir.display())
        })?;
        Ok(Self { spec, vocab, corpus: Corpus::load(dir)? })
    }

    /// Tasks RL trains on (the share not used by SFT).
    pub fn rl_tasks(&self, cfg: &Config) -> &[RlTask] {
        split_tasks(&self.corpus.train_tasks, cfg.rl_engine.sft_fraction).1
    }
}

/// Supervised samples built from the SFT share of the training tasks.
pub fn sft_data(world: &World, cfg: &Config, seed: u64) -> Result<Vec<Sample>> {
    let (sft_tasks, _) = split_tasks(&world.corpus.train_tasks, cfg.rl_engine.sft_fraction);
    if sft_tasks.is_empty() {
        return Ok(Vec::new());
    }
    sft_samples(&world.spec, &world.vocab, sft_tasks, stage_seed(seed, stage_seed::SFT_DATA))
}

/// The corpora a latent-space stage trains on under `coverage`.
pub fn text_for(world: &World, coverage: Coverage) -> &[Sample] {
    match coverage {
        Coverage::Full => &world.corpus.text,
        Coverage::PairedOnly => &[],
    }
}

pub fn bc_data(world: &World, coverage: Coverage) -> Vec<Sample> {
    world.corpus.paired.iter().chain(text_for(world, coverage)).cloned().collect()
}

pub fn token_lm_data(world: &World) -> Vec<Sample> {
    world.corpus.paired.iter().chain(&world.corpus.text).cloned().collect()
}

/// Stage 1, projector warm-up, stage 3, behavior cloning and latent SFT.
/// The returned model is the one RL starts from.
pub fn latent_pipeline<T: Real>(
    cfg: &Config,
    world: &World,
    coverage: Coverage,
    seed: u64,
) -> Result<(Model<T>, PipelineReport)> {
    latent_pipeline_observed(cfg, world, coverage, seed, |_, _| Ok(()))
}

/// [`latent_pipeline`] calling `observe` with a stage name ("init" first)
/// and the model after that stage.
pub fn latent_pipeline_observed<T: Real>(
    cfg: &Config,
    world: &World,
    coverage: Coverage,
    seed: u64,
    mut observe: impl FnMut(&str, &Model<T>) -> Result<()>,
) -> Result<(Model<T>, PipelineReport)> {
    use stage_seed::*;
    let c = &world.corpus;
    let s = |k: u64| stage_seed(seed, k);
    let mut model = Model::<T>::new(&cfg.backbone, s(INIT))?;
    observe("init", &model)?;
    let mut rep = PipelineReport::default();
    rep.push("stage1", train_stage1(&mut model, cfg, &c.paired, s(STAGE1))?);
    observe("stage1", &model)?;
    rep.push("projector1", train_projector_step1(&mut model, cfg, &c.paired, s(PROJECTOR1))?);
    observe("projector1", &model)?;
    rep.push("stage3", train_stage3(&mut model, cfg, &c.paired, text_for(world, coverage), s(STAGE3))?);
    observe("stage3", &model)?;
    rep.push("bc", train_bc(&mut model, cfg, &bc_data(world, coverage), s(BC))?);
    observe("bc", &model)?;
    let sft = sft_data(world, cfg, seed)?;
    rep.push("sft", sft_finetune(&mut model, Mode::Latent, &sft, &cfg.rl_engine.sft, s(SFT))?);
    observe("sft", &model)?;
    Ok((model, rep))
}

/// Causal-LM pretraining on both corpora followed by token SFT.
pub fn token_pipeline<T: Real>(cfg: &Config, world: &World, seed: u64) -> Result<(Model<T>, PipelineReport)> {
    use stage_seed::*;
    let s = |k: u64| stage_seed(seed, k);
    let mut model = Model::<T>::new(&cfg.backbone, s(INIT))?;
    let mut rep = PipelineReport::default();
    rep.push("token-lm", pretrain_token_lm(&mut model, cfg, &token_lm_data(world), s(STAGE1))?);
    let sft = sft_data(world, cfg, seed)?;
    rep.push("sft", sft_finetune(&mut model, Mode::Token, &sft, &cfg.rl_engine.sft, s(SFT))?);
    Ok((model, rep))
}

/// RL on the world's RL share with `cfg.rl_engine` (mode included).
pub fn run_rl<T: Real>(
    model: &mut Model<T>,
    cfg: &Config,
    world: &World,
    seed: u64,
    on_row: impl FnMut(&MetricsRow) -> Result<()>,
) -> Result<Vec<MetricsRow>> {
    train_rl(model, &cfg.rl_engine, world.rl_tasks(cfg), stage_seed(seed, stage_seed::RL), on_row)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn task_split_respects_fraction() {
        let w = {
            let mut cfg = Config::default();
            cfg.backbone.grid_height = 2;
            cfg.backbone.grid_width = 2;
            cfg.corpus_tasks.n_paired = 2;
            cfg.corpus_tasks.n_text = 2;
            cfg.corpus_tasks.n_tasks = 9;
            build_world(&cfg, 0).unwrap()
        };
        let (a, b) = split_tasks(&w.corpus.train_tasks, 0.5);
        assert_eq!((a.len(), b.len()), (5, 4));
        assert_eq!(split_tasks(&w.corpus.train_tasks, 0.0).0.len(), 0);
        assert_eq!(split_tasks(&w.corpus.train_tasks, 1.0).1.len(), 0);
    }
}
