//! Drives the binary through every subcommand on a tiny configuration and
//! compares the artifacts of two runs.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;

use latent_core::config::Config;
use serde_json::Value;

const WALL_TIME_KEYS: [&str; 3] = ["seconds", "rolloutSeconds", "updateSeconds"];

pub fn tiny_config() -> Config {
    let mut cfg = Config::default();
    let b = &mut cfg.backbone;
    b.vocab_size = 128;
    b.d_model = 16;
    b.layers = 1;
    b.heads = 2;
    b.max_len = 32;
    b.grid_height = 2;
    b.grid_width = 2;
    b.num_colors = 3;
    b.codebook_size = 8;
    b.inverse_layers = 1;
    b.policy_layers = 1;
    let c = &mut cfg.corpus_tasks;
    c.n_paired = 16;
    c.n_text = 16;
    c.n_tasks = 24;
    for s in [
        &mut cfg.world_model.stage1,
        &mut cfg.world_model.stage3,
        &mut cfg.projector.step1,
        &mut cfg.policy_bc.bc,
        &mut cfg.rl_engine.sft,
        &mut cfg.rl_engine.token_pretrain,
    ] {
        s.batch_size = 8;
        s.epochs = 1;
    }
    let rl = &mut cfg.rl_engine;
    rl.steps = 2;
    rl.batch_tasks = 2;
    rl.group_size = 3;
    cfg.eval.diversity_prompts = 3;
    cfg
}

pub struct Run {
    pub root: PathBuf,
    pub config: PathBuf,
}

impl Run {
    pub fn new(root: &Path) -> Self {
        fs::create_dir_all(root).unwrap();
        let config = root.join("config.toml");
        fs::write(&config, tiny_config().to_toml_string()).unwrap();
        Self { root: root.to_path_buf(), config }
    }

    pub fn dir(&self, name: &str) -> String {
        self.root.join(name).display().to_string()
    }

    pub fn exec(&self, args: &[&str]) -> std::process::Output {
        Command::new(env!("CARGO_BIN_EXE_latent-act")).args(args).env("RUST_LOG", "warn").output().unwrap()
    }

    pub fn ok(&self, args: &[&str]) {
        let out = self.exec(args);
        assert!(
            out.status.success(),
            "{args:?} failed: {}\n{}",
            String::from_utf8_lossy(&out.stdout),
            String::from_utf8_lossy(&out.stderr)
        );
    }

    /// `cmd --data <data> --out <out> [--checkpoint <from>] extra...`
    pub fn stage(&self, cmd: &str, from: Option<&str>, out: &str, extra: &[&str]) {
        let (data, out) = (self.dir("data"), self.dir(out));
        let mut args = vec![cmd, "--data", &data, "--out", &out];
        let from = from.map(|f| self.dir(f));
        if let Some(f) = &from {
            args.extend(["--checkpoint", f]);
        }
        args.extend(extra);
        self.ok(&args);
    }

    pub fn pipeline(&self) {
        let config = self.config.display().to_string();
        self.ok(&["gen-data", "--config", &config, "--out", &self.dir("data"), "--seed", "5"]);
        let cfg = ["--config", &config];
        self.stage("train-stage1", None, "s1", &cfg);
        self.stage("train-projector", Some("s1"), "p1", &[]);
        self.stage("train-stage3", Some("p1"), "s3", &[]);
        self.stage("train-bc", Some("s3"), "bc", &[]);
        self.stage("sft", Some("bc"), "sft", &[]);
        self.stage("train-rl", Some("sft"), "rl", &["--steps", "2"]);
        self.stage("train-rl", Some("sft"), "rl_dapo", &["--steps", "1", "--algorithm", "dapo"]);
        self.stage("evaluate", Some("rl"), "eval_id", &[]);
        self.stage("evaluate", Some("rl"), "eval_ood", &["--split", "ood"]);
        self.stage("evaluate", Some("rl"), "eval_train", &["--split", "train"]);
        self.stage("diversity", Some("rl"), "div", &[]);
        self.stage("inspect-codebook", Some("rl"), "codes", &[]);
        self.stage("inspect-codebook", Some("s1"), "codes_s1", &[]);
        self.stage("train-projector", Some("s1"), "p1_paired", &["--paired-only"]);

        let mut token = cfg.to_vec();
        token.extend(["--mode", "token"]);
        self.stage("train-stage1", None, "tok_lm", &token);
        self.stage("sft", Some("tok_lm"), "tok_sft", &[]);
        self.stage("train-rl", Some("tok_sft"), "tok_rl", &[]);
        self.stage("diversity", Some("tok_rl"), "tok_div", &["--prompts", "2", "--temperature", "0.7"]);

        let (log, base) = (self.root.join("rl/metrics.jsonl"), self.root.join("tok_rl/metrics.jsonl"));
        let (log, base) = (log.display().to_string(), base.display().to_string());
        self.ok(&["timing", "--log", &log, "--baseline", &base, "--out", &self.dir("timing")]);
    }
}

fn strip_times(v: &mut Value) {
    match v {
        Value::Object(m) => {
            for k in WALL_TIME_KEYS {
                m.remove(k);
            }
            m.values_mut().for_each(strip_times);
        }
        Value::Array(a) => a.iter_mut().for_each(strip_times),
        _ => {}
    }
}

fn comparable(path: &Path) -> Vec<u8> {
    let bytes = fs::read(path).unwrap();
    let name = path.file_name().unwrap().to_string_lossy();
    let parse = |s: &[u8]| {
        let mut v: Value = serde_json::from_slice(s).unwrap();
        strip_times(&mut v);
        serde_json::to_vec(&v).unwrap()
    };
    if name.ends_with(".json") {
        parse(&bytes)
    } else if name.ends_with(".jsonl") {
        bytes.split(|&b| b == b'\n').filter(|l| !l.is_empty()).flat_map(parse).collect()
    } else {
        bytes
    }
}

fn files(root: &Path) -> Vec<PathBuf> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push(p.strip_prefix(root).unwrap().to_path_buf());
            }
        }
    }
    out.sort();
    out
}

/// Runs the full command sequence under `root/a` and `root/b` and compares
/// every artifact except the timing report, which holds only wall times.
/// Returns the runs and the number of files compared.
pub fn twin_runs(root: &Path) -> Result<(Run, Run, usize), String> {
    let (a, b) = (Run::new(&root.join("a")), Run::new(&root.join("b")));
    a.pipeline();
    b.pipeline();
    let (fa, fb) = (files(&a.root), files(&b.root));
    if fa != fb {
        return Err(format!("file sets differ: {fa:?} vs {fb:?}"));
    }
    let mut n = 0;
    for f in fa.iter().filter(|f| !f.starts_with("timing")) {
        if comparable(&a.root.join(f)) != comparable(&b.root.join(f)) {
            return Err(format!("{} differs between runs", f.display()));
        }
        n += 1;
    }
    Ok((a, b, n))
}
