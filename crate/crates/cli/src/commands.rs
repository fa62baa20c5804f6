use std::fs;
use std::io::Write;
use std::path::Path;

use latent_core::config::{Algorithm, Config, Mode};
use latent_core::corpus_tasks::load_jsonl;
use latent_core::error::{Error, Result};
use latent_core::eval::checkpoint::{self, Checkpoint, StageTag};
use latent_core::eval::experiment::{self, stage_seed, Coverage, World};
use latent_core::eval::metrics::{self, codebook_usage, evaluate_task_set, rollout_diversity, timing_report};
use latent_core::eval::pipeline::{self, StageReport};
use latent_core::rl_engine::rollout::RolloutSettings;
use latent_core::rl_engine::sft;
use latent_core::rl_engine::train::MetricsRow;
use latent_core::Model;
use log::info;
use serde::Serialize;
use serde_json::json;

use crate::{Common, Stage};

type M = Model<f32>;

fn read_config(common: &Common, ckpt: Option<&Checkpoint>) -> Result<Config> {
    let cfg = match (&common.config, ckpt) {
        (Some(p), _) => Config::load(p)?,
        (None, Some(c)) => c.config().clone(),
        (None, None) => Config::default(),
    };
    if let Some(c) = ckpt {
        if c.model.cfg != cfg.backbone {
            return Err(Error::validation("config architecture differs from the checkpoint's"));
        }
    }
    Ok(cfg)
}

fn write_json(path: &Path, v: &impl Serialize) -> Result<()> {
    let mut bytes = serde_json::to_vec_pretty(v)?;
    bytes.push(b'\n');
    fs::write(path, bytes)?;
    Ok(())
}

struct Ctx {
    cfg: Config,
    world: World,
    ckpt: Option<Checkpoint>,
}

impl Ctx {
    fn open(s: &Stage) -> Result<Self> {
        let ckpt = s.checkpoint.as_deref().map(checkpoint::load).transpose()?;
        let cfg = read_config(&s.common, ckpt.as_ref())?;
        let world = World::load(&cfg, &s.data)?;
        Ok(Self { cfg, world, ckpt })
    }

    fn input(&self, min: StageTag) -> Result<&Checkpoint> {
        let c = self.ckpt.as_ref().ok_or_else(|| Error::validation("--checkpoint is required"))?;
        c.require_stage(min)?;
        Ok(c)
    }

    fn mode(&self, s: &Stage) -> Mode {
        s.mode.or(self.ckpt.as_ref().map(|c| c.manifest.mode)).unwrap_or(Mode::Latent)
    }
}

fn require_latent(c: &Checkpoint, what: &str) -> Result<()> {
    if c.manifest.mode != Mode::Latent {
        return Err(Error::validation(format!("{what} needs a latent-mode checkpoint")));
    }
    Ok(())
}

fn coverage(s: &Stage) -> Coverage {
    if s.paired_only {
        Coverage::PairedOnly
    } else {
        Coverage::Full
    }
}

fn finish(s: &Stage, ctx: &Ctx, model: &M, tag: StageTag, mode: Mode, report: &StageReport) -> Result<()> {
    let out = &s.common.out;
    checkpoint::save(out, model, &ctx.cfg, tag, mode, s.common.seed)?;
    let (head, tail) = report.head_tail(20);
    write_json(
        &out.join("report.json"),
        &json!({
            "stage": tag,
            "steps": report.steps(),
            "losses": report.losses,
            "seconds": report.seconds,
        }),
    )?;
    println!("{tag}: {} steps, loss {head:.4} -> {tail:.4}, checkpoint {}", report.steps(), out.display());
    Ok(())
}

pub fn gen_data(c: &Common) -> Result<()> {
    let cfg = read_config(c, None)?;
    let world = experiment::build_world(&cfg, c.seed)?;
    let manifest = world.corpus.manifest(&world.spec, c.seed);
    world.corpus.save(&c.out, &manifest)?;
    println!("{}", serde_json::to_string(&manifest.counts)?);
    Ok(())
}

pub fn train_stage1(s: &Stage) -> Result<()> {
    let ctx = Ctx::open(s)?;
    let mode = s.mode.unwrap_or(Mode::Latent);
    let seed = s.common.seed;
    let mut model = M::new(&ctx.cfg.backbone, stage_seed(seed, stage_seed::INIT))?;
    let lm_seed = stage_seed(seed, stage_seed::STAGE1);
    let report = match mode {
        Mode::Latent => pipeline::train_stage1(&mut model, &ctx.cfg, &ctx.world.corpus.paired, lm_seed)?,
        Mode::Token => sft::pretrain_token_lm(&mut model, &ctx.cfg, &experiment::token_lm_data(&ctx.world), lm_seed)?,
    };
    finish(s, &ctx, &model, StageTag::Stage1, mode, &report)
}

pub fn train_projector(s: &Stage) -> Result<()> {
    let ctx = Ctx::open(s)?;
    let c = ctx.input(StageTag::Stage1)?;
    require_latent(c, "train-projector")?;
    let mut model = c.model.clone();
    let seed = stage_seed(s.common.seed, stage_seed::PROJECTOR1);
    let report = pipeline::train_projector_step1(&mut model, &ctx.cfg, &ctx.world.corpus.paired, seed)?;
    finish(s, &ctx, &model, StageTag::Projector1, Mode::Latent, &report)
}

pub fn train_stage3(s: &Stage) -> Result<()> {
    let ctx = Ctx::open(s)?;
    let c = ctx.input(StageTag::Projector1)?;
    require_latent(c, "train-stage3")?;
    let mut model = c.model.clone();
    let seed = stage_seed(s.common.seed, stage_seed::STAGE3);
    let text = experiment::text_for(&ctx.world, coverage(s));
    let report = pipeline::train_stage3(&mut model, &ctx.cfg, &ctx.world.corpus.paired, text, seed)?;
    finish(s, &ctx, &model, StageTag::Stage3, Mode::Latent, &report)
}

pub fn train_bc(s: &Stage) -> Result<()> {
    let ctx = Ctx::open(s)?;
    let c = ctx.input(StageTag::Stage3)?;
    require_latent(c, "train-bc")?;
    let mut model = c.model.clone();
    let seed = stage_seed(s.common.seed, stage_seed::BC);
    let report = pipeline::train_bc(&mut model, &ctx.cfg, &experiment::bc_data(&ctx.world, coverage(s)), seed)?;
    finish(s, &ctx, &model, StageTag::Bc, Mode::Latent, &report)
}

fn min_stage(mode: Mode) -> StageTag {
    match mode {
        Mode::Latent => StageTag::Bc,
        Mode::Token => StageTag::Stage1,
    }
}

pub fn sft(s: &Stage) -> Result<()> {
    let ctx = Ctx::open(s)?;
    let mode = ctx.mode(s);
    let c = ctx.input(min_stage(mode))?;
    let mut model = c.model.clone();
    let data = experiment::sft_data(&ctx.world, &ctx.cfg, s.common.seed)?;
    let seed = stage_seed(s.common.seed, stage_seed::SFT);
    let report = sft::sft_finetune(&mut model, mode, &data, &ctx.cfg.rl_engine.sft, seed)?;
    finish(s, &ctx, &model, StageTag::Sft, mode, &report)
}

pub fn train_rl(s: &Stage, steps: Option<usize>, algorithm: Option<Algorithm>) -> Result<()> {
    let mut ctx = Ctx::open(s)?;
    let mode = ctx.mode(s);
    let c = ctx.input(min_stage(mode))?;
    let mut model = c.model.clone();
    let rl = &mut ctx.cfg.rl_engine;
    rl.mode = mode;
    if let Some(n) = steps {
        rl.steps = n;
    }
    if let Some(a) = algorithm {
        rl.algorithm = a;
    }
    let out = &s.common.out;
    fs::create_dir_all(out)?;
    let mut log = fs::File::create(out.join("metrics.jsonl"))?;
    let rows = experiment::run_rl(&mut model, &ctx.cfg, &ctx.world, s.common.seed, |row| {
        serde_json::to_writer(&mut log, row)?;
        log.write_all(b"\n")?;
        Ok(log.flush()?)
    })?;
    checkpoint::save(out, &model, &ctx.cfg, StageTag::Rl, mode, s.common.seed)?;
    let first = rows.first().map_or(0.0, |r| r.mean_reward);
    let last = rows.last().map_or(0.0, |r| r.mean_reward);
    println!("rl: {} steps, train reward {first:.4} -> {last:.4}, checkpoint {}", rows.len(), out.display());
    Ok(())
}

pub fn evaluate(s: &Stage, split: &str) -> Result<()> {
    let ctx = Ctx::open(s)?;
    let mode = ctx.mode(s);
    let c = ctx.input(min_stage(mode))?;
    let tasks = match split {
        "id" => &ctx.world.corpus.id_tasks[..],
        "ood" => &ctx.world.corpus.ood_tasks[..],
        "train" => ctx.world.rl_tasks(&ctx.cfg),
        other => return Err(Error::validation(format!("unknown split `{other}` (id, ood, train)"))),
    };
    let temp = ctx.cfg.eval.inference_temperature;
    let r = evaluate_task_set(&c.model, tasks, mode, temp, stage_seed(s.common.seed, stage_seed::EVAL))?;
    fs::create_dir_all(&s.common.out)?;
    write_json(
        &s.common.out.join("eval.json"),
        &json!({
            "split": split,
            "mode": mode,
            "stageTag": c.manifest.stage_tag,
            "temperature": temp,
            "meanReward": r.mean_reward,
            "perTask": r.per_task,
        }),
    )?;
    println!("{split}: mean reward {:.4} over {} tasks", r.mean_reward, r.per_task.len());
    Ok(())
}

pub fn diversity(s: &Stage, prompts: Option<usize>, temperature: Option<f64>) -> Result<()> {
    let ctx = Ctx::open(s)?;
    let mode = ctx.mode(s);
    let c = ctx.input(min_stage(mode))?;
    let tasks = ctx.world.rl_tasks(&ctx.cfg);
    let n = prompts.unwrap_or(ctx.cfg.eval.diversity_prompts).min(tasks.len());
    let settings = RolloutSettings {
        mode,
        temperature: temperature.unwrap_or(ctx.cfg.rl_engine.rollout_temperature),
        max_len: c.model.cfg.max_len,
    };
    let g = ctx.cfg.rl_engine.group_size;
    let r = rollout_diversity(&c.model, &tasks[..n], g, &settings, stage_seed(s.common.seed, stage_seed::DIVERSITY))?;
    fs::create_dir_all(&s.common.out)?;
    write_json(&s.common.out.join("diversity.json"), &r)?;
    println!("diversity ({mode:?}, G={g}, T={}): mean {:.4} std {:.4} over {n} prompts", settings.temperature, r.mean, r.std);
    Ok(())
}

pub fn inspect_codebook(s: &Stage) -> Result<()> {
    let ctx = Ctx::open(s)?;
    let c = ctx.input(StageTag::Stage1)?;
    require_latent(c, "inspect-codebook")?;
    let k = c.model.cfg.codebook_size;
    let styles = metrics::style_code_usage(&c.model, &ctx.world.corpus.text_heldout, &ctx.world.spec, &ctx.world.vocab)?;
    let mut out = json!({
        "codebookSize": k,
        "stageTag": c.manifest.stage_tag,
        "inverseByStyle": styles,
    });
    if c.manifest.stage_tag >= StageTag::Bc {
        let temp = ctx.cfg.eval.inference_temperature;
        let seed = stage_seed(s.common.seed, stage_seed::EVAL);
        let r = evaluate_task_set(&c.model, &ctx.world.corpus.id_tasks, Mode::Latent, temp, seed)?;
        out["policyUsage"] = serde_json::to_value(codebook_usage(&r.traces, k)?)?;
    }
    fs::create_dir_all(&s.common.out)?;
    write_json(&s.common.out.join("codebook.json"), &out)?;
    let entropy = out["policyUsage"]["entropy"].as_f64();
    println!("codebook K={k}: style JS divergence {:.4}, policy usage entropy {entropy:?}", styles.js_divergence);
    Ok(())
}

pub fn timing(log: &Path, baseline: Option<&Path>, out: &Path) -> Result<()> {
    let rows: Vec<MetricsRow> = load_jsonl(log)?;
    let base: Option<Vec<MetricsRow>> = baseline.map(load_jsonl).transpose()?;
    let r = timing_report(&rows, base.as_deref())?;
    fs::create_dir_all(out)?;
    write_json(&out.join("timing.json"), &r)?;
    match r.ratio {
        Some(x) => println!("ratios rollout {:.3} update {:.3} total {:.3}", x.rollout, x.update, x.total),
        None => println!("mean rollout {:.4}s update {:.4}s", r.mean.rollout, r.mean.update),
    }
    info!("timing over {} steps", rows.len());
    Ok(())
}
