//! Closed-form and statistical oracles for the straight-through estimator,
//! the loss values and the advantage estimators. Each check returns a
//! one-line summary of what it measured.

use latent_autograd::{Grads, Graph, ParamMask, ParamStore, Tensor};
use latent_core::backbone::{ContextEmbedding, ImageGrid, Sample, BOS, EOS};
use latent_core::config::{Algorithm, ModelConfig};
use latent_core::latent_space::{
    codebook_lookup, gumbel_st_assign, gumbel_st_graph, infer_latent_action, ActionNet, Codebook, ForwardMode, INVERSE,
};
use latent_core::policy_bc::behavior_cloning_loss;
use latent_core::projector::{gaussian_nll, GaussianEmbedding};
use latent_core::rl_engine::advantage::compute_advantages;
use latent_core::world_model::inverse_dynamics_loss;
use latent_core::{seed, Model};

pub type Outcome = Result<String, String>;

fn expect(ok: bool, msg: String) -> Outcome {
    if ok {
        Ok(msg)
    } else {
        Err(msg)
    }
}

const LOGITS: [f64; 4] = [1.0, 0.0, -0.5, 2.0];

/// Forward value of the straight-through code is the selected codebook row,
/// bit for bit, in both the graph and the eager path.
pub fn st_forward_is_codebook_row() -> Outcome {
    let mut store = ParamStore::<f32>::new();
    let mut rng = seed::rng(21, &[]);
    let cb = Codebook::build(&mut store, Some(&mut rng), 4, 6).unwrap();
    let inv = ActionNet::build(&mut store, Some(&mut rng), INVERSE, 1, 6, 2, 2, 4).unwrap();
    let mut checked = 0;
    for trial in 0..200 {
        let e = ContextEmbedding { vector: (0..6).map(|j| ((trial * 7 + j) % 5) as f32 - 2.0).collect(), step: 1 };
        let a = infer_latent_action(&store, &inv, &cb, &e, 0.8, &mut rng, false).unwrap();
        let row = codebook_lookup(&store, &cb, a.index).unwrap();
        if a.code.iter().map(|v| v.to_bits()).ne(row.iter().map(|v| v.to_bits())) {
            return Err(format!("eager code differs from row {} at trial {trial}", a.index));
        }
        checked += 1;
    }
    let logits = Tensor::from_fn(64, 4, |r, c| ((r * 3 + c * 5) % 7) as f32 * 0.4 - 1.2);
    let mut g = Graph::new(ParamMask::all(store.len()));
    let l = g.constant(logits);
    let (st, idx) = gumbel_st_graph(&mut g, l, 0.8, &mut rng, false, ForwardMode::Hard).unwrap();
    let c = g.param(&store, cb.id);
    let code = g.matmul(st, c);
    let out = g.value(code);
    for (r, &i) in idx.iter().enumerate() {
        let row = store.get(cb.id).row(i);
        if out.row(r).iter().map(|v| v.to_bits()).ne(row.iter().map(|v| v.to_bits())) {
            return Err(format!("graph code differs from row {i} at batch row {r}"));
        }
        checked += 1;
    }
    Ok(format!("{checked} codes equal their codebook rows bitwise"))
}

/// A loss on the straight-through code reaches both the logits and the codebook.
pub fn st_gradient_reaches_logits_and_codebook() -> Outcome {
    let mut store = ParamStore::<f64>::new();
    let mut rng = seed::rng(22, &[]);
    let cb = Codebook::build(&mut store, Some(&mut rng), 4, 3).unwrap();
    let lid = store.add("logits.w", Tensor::from_vec(2, 4, vec![0.3, -0.2, 0.9, 0.1, -1.0, 0.4, 0.2, 0.0]).unwrap()).unwrap();
    let mut g = Graph::new(ParamMask::all(store.len()));
    let l = g.param(&store, lid);
    let (st, idx) = gumbel_st_graph(&mut g, l, 1.0, &mut rng, false, ForwardMode::Hard).unwrap();
    let c = g.param(&store, cb.id);
    let code = g.matmul(st, c);
    let w = g.constant(Tensor::from_vec(2, 3, vec![1.0, -2.0, 0.5, 0.7, 0.3, -1.1]).unwrap());
    let prod = g.mul(code, w);
    let loss = g.sum(prod);
    let mut grads = Grads::for_store(&store);
    g.backward_into(loss, &mut grads);
    let norm = |t: Option<&Tensor<f64>>| t.map_or(0.0, |t| t.data().iter().map(|v| v * v).sum::<f64>().sqrt());
    let (gl, gc) = (norm(grads.get(lid)), norm(grads.get(cb.id)));
    let rows_hit = grads.get(cb.id).map_or(0, |t| (0..4).filter(|&r| t.row(r).iter().any(|v| *v != 0.0)).count());
    let mut distinct = idx.clone();
    distinct.dedup();
    expect(
        gl > 1e-6 && gc > 1e-6 && rows_hit == distinct.len(),
        format!("|dL/dlogits| {gl:.4}, |dL/dC| {gc:.4}, codebook rows with gradient {rows_hit}"),
    )
}

/// Gumbel-max draws follow `softmax(logits)` within three standard errors
/// at 10^4 draws, for the eager sampler and the batched graph sampler.
pub fn gumbel_frequencies_match_softmax() -> Outcome {
    const N: usize = 10_000;
    let z: f64 = LOGITS.iter().map(|l| l.exp()).sum();
    let p: Vec<f64> = LOGITS.iter().map(|l| l.exp() / z).collect();
    let mut rng = seed::rng(23, &[]);
    let mut eager = [0usize; 4];
    for _ in 0..N {
        eager[gumbel_st_assign(&LOGITS, 0.7, &mut rng, false).unwrap().index] += 1;
    }
    let mut g = Graph::<f64>::inference();
    let l = g.constant(Tensor::from_fn(N, 4, |_, c| LOGITS[c]));
    let (_, idx) = gumbel_st_graph(&mut g, l, 0.7, &mut rng, false, ForwardMode::Hard).unwrap();
    let mut batched = [0usize; 4];
    idx.iter().for_each(|&i| batched[i] += 1);
    let mut worst = 0.0f64;
    for counts in [eager, batched] {
        for (k, &c) in counts.iter().enumerate() {
            let sigma = (N as f64 * p[k] * (1.0 - p[k])).sqrt();
            worst = worst.max((c as f64 - N as f64 * p[k]).abs() / sigma);
        }
    }
    expect(worst <= 3.0, format!("eager {eager:?}, batched {batched:?}, worst deviation {worst:.2} sigma"))
}

fn samples() -> Vec<Sample> {
    vec![
        Sample::paired(ImageGrid::new(2, 2, vec![0, 1, 2, 1]).unwrap(), vec![BOS, 5, 6, 7, 8, EOS]),
        Sample::paired(ImageGrid::new(2, 2, vec![2, 2, 0, 1]).unwrap(), vec![BOS, 9, 10, EOS]),
        Sample::text(vec![BOS, 11, 12, 13, EOS]),
    ]
}

/// A zero LM head gives cross-entropy `ln |V|` per step; a zero policy
/// head gives BC loss `ln K`.
pub fn uniform_losses() -> Outcome {
    let cfg = ModelConfig::gradcheck();
    let mut m = Model::<f64>::new(&cfg, 24).unwrap();
    let head = m.backbone.lm_head_id();
    *m.store.get_mut(head) = Tensor::zeros(cfg.d_model, cfg.vocab_size);
    let (w, b) = m.policy.head_ids();
    *m.store.get_mut(w) = Tensor::zeros(cfg.d_model, cfg.codebook_size);
    *m.store.get_mut(b) = Tensor::zeros(1, cfg.codebook_size);
    let ce = inverse_dynamics_loss(&m, &samples(), 1.0, &mut seed::rng(1, &[])).unwrap();
    let bc = behavior_cloning_loss(&m, &samples()).unwrap();
    let (ev, ek) = ((ce - (cfg.vocab_size as f64).ln()).abs(), (bc - (cfg.codebook_size as f64).ln()).abs());
    expect(ev <= 1e-6 && ek <= 1e-6, format!("CE {ce:.9} (|err| {ev:.1e}), BC {bc:.9} (|err| {ek:.1e})"))
}

/// Gaussian negative log-likelihood with the L1 log-variance penalty against
/// hand-computed values.
pub fn gaussian_nll_fixtures() -> Outcome {
    let l2 = 2f64.ln();
    let cases: [(Vec<f64>, Vec<f64>, Vec<f64>, f64); 3] = [
        (vec![1.0, 1.0], vec![0.0, 0.0], vec![l2, l2], 1.636_294_361_119_890_6),
        (vec![1.5, -1.0], vec![0.5, 0.0], vec![0.0, -l2], 3.193_147_180_559_945_4),
        (vec![0.0; 3], vec![0.0; 3], vec![0.0; 3], 0.0),
    ];
    let mut worst = 0.0f64;
    for (target, mean, log_std, want) in cases {
        let got = gaussian_nll(&target, &GaussianEmbedding { mean, log_std }).unwrap();
        worst = worst.max((got - want).abs());
    }
    expect(worst <= 1e-9, format!("3 fixtures, max |err| {worst:.1e}"))
}

pub fn advantage_fixtures() -> Outcome {
    let close = |a: &[f64], b: &[f64]| a.len() == b.len() && a.iter().zip(b).all(|(x, y)| (x - y).abs() <= 1e-6);
    let grpo = compute_advantages(&[1.0, 0.0, 1.0, 0.0], &[1; 4], Algorithm::Grpo).unwrap();
    if !close(&grpo.values, &[1.0, -1.0, 1.0, -1.0]) {
        return Err(format!("grpo [1,0,1,0] -> {:?}", grpo.values));
    }
    let dr = compute_advantages(&[1.0, 0.0], &[1; 2], Algorithm::Drgrpo).unwrap();
    if !close(&dr.values, &[0.5, -0.5]) {
        return Err(format!("drgrpo [1,0] -> {:?}", dr.values));
    }
    for alg in [Algorithm::Grpo, Algorithm::Drgrpo, Algorithm::Dapo, Algorithm::Bnpo] {
        let a = compute_advantages(&[0.7; 5], &[3; 5], alg).unwrap();
        if !close(&a.values, &[0.0; 5]) {
            return Err(format!("{alg:?} equal rewards -> {:?}", a.values));
        }
        if (alg == Algorithm::Dapo) != (a.kept() == 0) {
            return Err(format!("{alg:?} keeps {} of an all-equal group", a.kept()));
        }
    }
    Ok("grpo, drgrpo, all-equal zeros and dapo drop as expected".into())
}
