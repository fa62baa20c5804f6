//! Central-difference checks of every training objective on the tiny
//! gradcheck instance (d=8, K=4, one layer, 16 tokens), in float64.
//! Shared by the core gradient tests and the acceptance run.

use latent_autograd::check::{check_params, GradCheckReport};
use latent_autograd::{Adam, AdamConfig, Graph, Grads, LrSchedule, ParamId, ParamMask, ParamStore};
use latent_core::backbone::{ImageGrid, Sample, BOS, EOS};
use latent_core::config::{Algorithm, Mode, ModelConfig};
use latent_core::latent_space::ForwardMode;
use latent_core::policy_bc::{bc_loss_grads, POLICY};
use latent_core::projector::{cycle_graph, step1_graph, PROJ_FWD, PROJ_REV};
use latent_core::rl_engine::advantage::Advantages;
use latent_core::rl_engine::reward::{RewardSpec, RlTask};
use latent_core::rl_engine::rollout::{rollout, RolloutGroup, RolloutSettings};
use latent_core::rl_engine::update::{trainable, update_loss_grads, UpdateSettings};
use latent_core::seed;
use latent_core::world_model::{inverse_loss_grads, CodeSource, InverseOptions};
use latent_core::Model;

pub const STEP: f64 = 1e-5;
pub const TOL: f64 = 1e-4;
const PER_TENSOR: usize = 6;

fn model(seed: u64) -> Model<f64> {
    Model::new(&ModelConfig::gradcheck(), seed).unwrap()
}

fn paired() -> Vec<Sample> {
    vec![
        Sample::paired(ImageGrid::new(2, 2, vec![0, 1, 2, 1]).unwrap(), vec![BOS, 5, 6, 7, 8, EOS]),
        Sample::paired(ImageGrid::new(2, 2, vec![2, 2, 0, 1]).unwrap(), vec![BOS, 9, 10, EOS]),
    ]
}

fn text() -> Vec<Sample> {
    vec![Sample::text(vec![BOS, 11, 12, 13, EOS]), Sample::text(vec![BOS, 6, 14, EOS])]
}

fn ids(store: &ParamStore<f64>, components: &[&str]) -> Vec<ParamId> {
    components.iter().flat_map(|c| store.component_ids(c)).collect()
}

fn run(
    m: &mut Model<f64>,
    components: &[&str],
    analytic: &Grads<f64>,
    mut loss: impl FnMut(&Model<f64>) -> f64,
) -> GradCheckReport {
    let cfg = m.cfg.clone();
    let list = ids(&m.store, components);
    let mut store = m.store.clone();
    let report = check_params(&mut store, &list, analytic, STEP, PER_TENSOR, |s| {
        loss(&Model::from_store(&cfg, s.clone()).unwrap())
    });
    m.store = store;
    report
}

pub fn inverse_case() -> GradCheckReport {
    let mut m = model(1);
    let batch: Vec<Sample> = paired().into_iter().chain(text()).collect();
    let opts = InverseOptions { mode: ForwardMode::Soft, temperature: 0.7, codes: CodeSource::Inverse, ..InverseOptions::default() };
    let comps = ["backbone", "merge", "codebook", "inverse", PROJ_FWD];
    let mask = m.mask(&comps);
    let loss_grads = |m: &Model<f64>, mask: Option<&ParamMask>| {
        inverse_loss_grads(m, &batch, &opts, &mut seed::rng(3, &[]), mask).unwrap()
    };
    let (_, _, g) = loss_grads(&m, Some(&mask));
    run(&mut m, &comps, &g.unwrap(), |m| loss_grads(m, None).0)
}

pub fn projector_case(pick: usize) -> GradCheckReport {
    let mut m = model(2);
    let comps = [PROJ_FWD, PROJ_REV];
    let mask = m.mask(&comps);
    let value = |m: &Model<f64>, mask: Option<&ParamMask>| {
        let mut g = match mask {
            Some(mk) => Graph::new(mk.clone()),
            None => Graph::inference(),
        };
        let v = if pick < 2 {
            let (a, b) = step1_graph(&mut g, m, &paired()).unwrap().unwrap();
            [a, b][pick]
        } else {
            cycle_graph(&mut g, m, &text(), None).unwrap().unwrap()
        };
        let mut grads = Grads::for_store(&m.store);
        if mask.is_some() {
            g.backward_into(v, &mut grads);
        }
        (g.value(v).scalar(), grads)
    };
    let (_, grads) = value(&m, Some(&mask));
    run(&mut m, &comps, &grads, |m| value(m, None).0)
}

pub fn bc_case() -> GradCheckReport {
    let mut m = model(4);
    let batch: Vec<Sample> = paired().into_iter().chain(text()).collect();
    let mask = m.mask(&[POLICY]);
    let (_, _, g) = bc_loss_grads(&m, &m.policy, &batch, Some(&mask)).unwrap();
    run(&mut m, &[POLICY], &g.unwrap(), |m| bc_loss_grads(m, &m.policy, &batch, None).unwrap().0)
}

fn task() -> RlTask {
    RlTask {
        image: ImageGrid::new(2, 2, vec![0, 1, 1, 2]).unwrap(),
        prompt: vec![BOS, 5],
        reward: RewardSpec {
            required: vec![6],
            forbidden: vec![7],
            markers: vec![8],
            len_min: 1,
            len_max: 6,
            weights: vec![0.25; 4],
        },
    }
}

fn settings(mode: Mode) -> UpdateSettings {
    UpdateSettings {
        mode,
        algorithm: Algorithm::Grpo,
        clip_low: 0.2,
        clip_high: 0.2,
        kl_coef: 0.5,
        temperature: 1.0,
        max_response_len: 6,
    }
}

/// Rollouts from the start model, then one small step so that the
/// importance ratios and the KL term are both away from their trivial values.
pub fn rl_case(mode: Mode) -> GradCheckReport {
    let mut m = model(5);
    let reference = m.clone();
    let rs = RolloutSettings { mode, temperature: 1.0, max_len: 8 };
    let groups: Vec<RolloutGroup<f64>> = (0..2).map(|i| rollout(&m, &task(), 0, 4, &rs, 10 + i).unwrap()).collect();
    let advs: Vec<Advantages> = groups
        .iter()
        .enumerate()
        .map(|(i, g)| Advantages {
            values: (0..g.responses.len()).map(|j| ((i * 7 + j * 3) % 5) as f64 - 2.0).collect(),
            keep: vec![true; g.responses.len()],
        })
        .collect();
    let comps = trainable(mode);
    let mask = m.mask(comps);
    let s = settings(mode);
    let mut opt = Adam::new(&m.store, mask.clone(), LrSchedule::Constant { lr: 2e-4 }, AdamConfig::default());
    let (_, g) = update_loss_grads(&m, &groups, &advs, &[task()], Some(&reference), &s, Some(&mask)).unwrap();
    opt.step(&mut m.store, &mut g.unwrap());
    let (stats, g) = update_loss_grads(&m, &groups, &advs, &[task()], Some(&reference), &s, Some(&mask)).unwrap();
    assert!(stats.kl > 1e-8, "{mode:?}: KL {}", stats.kl);
    assert_eq!(stats.clip_fraction, 0.0, "{mode:?}: ratios should sit inside the clip range");
    run(&mut m, comps, &g.unwrap(), |m| {
        update_loss_grads(m, &groups, &advs, &[task()], Some(&reference), &s, None).unwrap().0.loss
    })
}

/// Every objective, in a fixed order.
#[allow(dead_code)]
pub fn all_cases() -> Vec<(&'static str, GradCheckReport)> {
    vec![
        ("inverse", inverse_case()),
        ("t2vt", projector_case(0)),
        ("vt2t", projector_case(1)),
        ("cycle", projector_case(2)),
        ("bc", bc_case()),
        ("rl latent", rl_case(Mode::Latent)),
        ("rl token", rl_case(Mode::Token)),
    ]
}
