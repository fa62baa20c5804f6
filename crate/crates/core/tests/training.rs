use latent_autograd::{Adam, AdamConfig, LrSchedule, Real};
use latent_core::backbone::{ImageGrid, Sample, TokenId, BOS, EOS};
use latent_core::config::{Config, Mode, ModelConfig, StageSchedule};
use latent_core::eval::checkpoint::{self, StageTag};
use latent_core::eval::experiment::{build_world, sft_data};
use latent_core::policy_bc::{bc_targets, policy_logits, POLICY};
use latent_core::rl_engine::advantage::Advantages;
use latent_core::rl_engine::reward::{RewardSpec, RlTask};
use latent_core::rl_engine::rollout::{greedy_decode, rollout, RolloutSettings};
use latent_core::rl_engine::sft::sft_finetune;
use latent_core::rl_engine::update::{policy_update, trainable, UpdateSettings};
use latent_core::{seed, Model};
use rand::Rng;

fn small() -> ModelConfig {
    ModelConfig {
        vocab_size: 32,
        d_model: 16,
        layers: 2,
        heads: 2,
        max_len: 12,
        grid_height: 2,
        grid_width: 2,
        num_colors: 3,
        codebook_size: 8,
        inverse_layers: 1,
        policy_layers: 2,
        ..ModelConfig::gradcheck()
    }
}

#[test]
fn sft_second_epoch_is_no_worse() {
    let mut cfg = Config::default();
    cfg.backbone = ModelConfig { vocab_size: 128, max_len: 32, ..small() };
    cfg.corpus_tasks.n_paired = 4;
    cfg.corpus_tasks.n_text = 4;
    cfg.corpus_tasks.n_tasks = 128;
    let world = build_world(&cfg, 3).unwrap();
    let data = sft_data(&world, &cfg, 3).unwrap();
    assert_eq!(data.len(), 64);
    for mode in [Mode::Token, Mode::Latent] {
        let mut m = Model::<f64>::new(&cfg.backbone, 1).unwrap();
        let r = sft_finetune(&mut m, mode, &data, &cfg.rl_engine.sft, 0).unwrap();
        let half = r.steps() / 2;
        assert_eq!(half * 2, r.steps());
        let mean = |s: &[f64]| s.iter().sum::<f64>() / s.len() as f64;
        let (e1, e2) = (mean(&r.losses[..half]), mean(&r.losses[half..]));
        assert!(e2 <= e1, "{mode:?}: epoch 1 {e1}, epoch 2 {e2}");
    }
}

#[test]
fn sft_memorizes_ten_samples() {
    let cfg = small();
    let mut rng = seed::rng(11, &[]);
    let tasks: Vec<(RlTask, Vec<TokenId>)> = (0..10)
        .map(|i| {
            let cells = (0..4).map(|_| rng.gen_range(0..3)).collect();
            let mut response: Vec<TokenId> = (0..5).map(|_| rng.gen_range(4..32)).collect();
            response.push(EOS);
            let task = RlTask {
                image: ImageGrid::new(2, 2, cells).unwrap(),
                prompt: vec![BOS, 4 + i],
                reward: RewardSpec {
                    required: vec![],
                    forbidden: vec![],
                    markers: vec![],
                    len_min: 0,
                    len_max: 12,
                    weights: vec![1.0; 4],
                },
            };
            (task, response)
        })
        .collect();
    let data: Vec<Sample> = tasks
        .iter()
        .map(|(t, r)| Sample::paired(t.image.clone(), t.prompt.iter().chain(r).copied().collect()))
        .collect();
    let mut m = Model::<f64>::new(&cfg, 2).unwrap();
    let sched = StageSchedule { lr: 1e-2, cosine: false, min_lr: 0.0, batch_size: 10, epochs: 300, max_steps: None };
    let r = sft_finetune(&mut m, Mode::Token, &data, &sched, 0).unwrap();
    assert!(r.losses.last().unwrap() < &0.05, "final loss {:?}", r.losses.last());
    for (t, want) in &tasks {
        assert_eq!(&greedy_decode(&m, t, cfg.max_len).unwrap(), want);
    }
}

fn max_drift(m: &Model<f64>) -> f64 {
    let mut d = 0.0f64;
    for id in m.store.component_ids(POLICY) {
        let name = m.store.name(id).replacen(POLICY, "policy_init", 1);
        let init = m.store.get(m.store.id(&name).unwrap());
        for (a, b) in m.store.get(id).data().iter().zip(init.data()) {
            d = d.max((a - b).abs());
        }
    }
    d
}

#[test]
fn kl_term_anchors_the_policy() {
    let task = RlTask {
        image: ImageGrid::new(2, 2, vec![0, 1, 2, 1]).unwrap(),
        prompt: vec![BOS, 5],
        reward: RewardSpec {
            required: vec![6],
            forbidden: vec![],
            markers: vec![],
            len_min: 1,
            len_max: 10,
            weights: vec![0.25; 4],
        },
    };
    let run = |kl_coef: f64| {
        let mut m = Model::<f64>::new(&small(), 4).unwrap();
        // Move one code's logit away from the frozen copy.
        let (_, bias) = m.policy.head_ids();
        m.store.get_mut(bias).data_mut()[0] += 1.0;
        let start = max_drift(&m);
        let s = UpdateSettings {
            mode: Mode::Latent,
            algorithm: latent_core::config::Algorithm::Grpo,
            clip_low: 0.2,
            clip_high: 0.2,
            kl_coef,
            temperature: 1.0,
            max_response_len: 10,
        };
        let mut opt = Adam::new(&m.store, m.mask(trainable(Mode::Latent)), LrSchedule::Constant { lr: 1e-3 }, AdamConfig::default());
        let rs = RolloutSettings { mode: Mode::Latent, temperature: 1.0, max_len: 12 };
        let mut kl = Vec::new();
        for step in 0..50u64 {
            let groups = vec![rollout(&m, &task, 0, 8, &rs, step).unwrap()];
            let advs = vec![Advantages { values: vec![0.0; 8], keep: vec![true; 8] }];
            kl.push(policy_update(&mut m, &mut opt, &groups, &advs, &[task.clone()], None, &s).unwrap().kl);
        }
        let tail = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
        (start, max_drift(&m), tail(&kl[..5]), tail(&kl[45..]))
    };
    let (start, free, free_kl0, free_kl) = run(0.0);
    let (_, anchored, kl0, kl) = run(0.01);
    assert_eq!(free, start, "zero advantages without KL leave the policy in place");
    assert!(anchored < free, "anchored drift {anchored} vs free {free}");
    assert!(kl < free_kl && kl < kl0, "KL {kl0} -> {kl} anchored, {free_kl0} -> {free_kl} free");
}

fn forward_signature<T: Real>(m: &Model<T>, s: &Sample) -> Vec<T> {
    let (states, targets) = bc_targets(m, s).unwrap().unwrap();
    let mut out: Vec<T> = targets.iter().map(|&t| T::from_f64_lossy(t as f64)).collect();
    for r in 0..states.rows() {
        out.extend(policy_logits(&m.store, &m.policy, &latent_core::backbone::ContextEmbedding { vector: states.row(r).to_vec(), step: r }).unwrap());
    }
    let e = m.backbone.encode_context(&m.store, s, s.len() - 1).unwrap();
    out.extend(m.backbone.lm_head(&m.store, &e.vector).unwrap());
    out
}

#[test]
fn checkpoint_reload_reproduces_forward_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = Config { backbone: small(), ..Config::default() };
    let m = Model::<f32>::new(&cfg.backbone, 9).unwrap();
    checkpoint::save(dir.path(), &m, &cfg, StageTag::Rl, Mode::Latent, 9).unwrap();
    let back = checkpoint::load(dir.path()).unwrap().model;
    let samples = [
        Sample::paired(ImageGrid::new(2, 2, vec![0, 2, 1, 1]).unwrap(), vec![BOS, 7, 8, 9, EOS]),
        Sample::text(vec![BOS, 10, 11, EOS]),
    ];
    for s in &samples {
        let a: Vec<u32> = forward_signature(&m, s).iter().map(|v| v.to_bits()).collect();
        let b: Vec<u32> = forward_signature(&back, s).iter().map(|v| v.to_bits()).collect();
        assert_eq!(a, b);
    }
}
