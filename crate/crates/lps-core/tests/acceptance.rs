//! The acceptance gate. Each test checks one numbered criterion end to end
//! and prints a single `ACCEPTANCE <n> PASS/FAIL: ...` line (visible with
//! `cargo test --test acceptance -- --nocapture`, or on failure). The
//! criteria pin gradient fidelity, exact sampler/target identities, the
//! spherical-latent invariant, sampler bimodality against a multi-step
//! oracle, regularization-sensitivity contrasts, distilled-gradient
//! mismatch, improvement over behavioral cloning, and byte determinism.

use lps_core::agents::{
    dsrl_actor_program, dsrl_distill_program, load_train_state, lps_program,
    lpsd_program, qc_program, save_train_state, train_step, AgentHyper, AgentKind, LatentActor,
    TrainState,
};
use lps_core::autodiff::{finite_diff_check, FdMode, NodeId, Tape, FD_DEFAULT_STEP};
use lps_core::critic::{chunk_return, td_targets, Aggregation, CriticEnsemble};
use lps_core::envlab::{sample_chunk_batch, two_mode_1d};
use lps_core::harness::{latent_cosine_grid, run_sweep, run_train, ExperimentConfig};
use lps_core::latent::{sample_prior, Geometry};
use lps_core::meanflow::{
    build_regression_loss, build_u_graph, draw_rt, embed_fm_net_as_meanflow, interpolate,
    Backbone, BasePolicy,
};
use lps_core::rng::{self, standard_normal_tensor};
use lps_core::tensor::Tensor;
use std::time::Instant;

fn report(n: u32, pass: bool, detail: &str) {
    eprintln!("ACCEPTANCE {n} {}: {detail}", if pass { "PASS" } else { "FAIL" });
    assert!(pass, "criterion {n} failed: {detail}");
}

fn tmp_dir(tag: &str) -> std::path::PathBuf {
    let dir = std::env::temp_dir().join(format!("lps-acceptance-{tag}-{}", std::process::id()));
    let _ = std::fs::remove_dir_all(&dir);
    dir
}

// ---------------------------------------------------------------------------
// 1. gradient fidelity for every loss, 64-bit, rel err < 1e-4, under 60 s

#[test]
fn c01_gradient_fidelity() {
    let start = Instant::now();
    let mut worst: f64 = 0.0;
    let mut name = "";
    let mut track = |label: &'static str, err: f64| {
        if err > worst {
            worst = err;
            name = label;
        }
    };

    let mut hyper = AgentHyper::toy(3, 2);
    hyper.h = 2;
    hyper.base_hidden = vec![8, 8];
    hyper.actor_hidden = vec![8, 8];
    hyper.critic_hidden = vec![8];
    let n = 4;
    let mut rng = rng::stream(0xACC1, 0);
    let states = standard_normal_tensor::<f64>(&mut rng, n, 3);

    // average-velocity regression with the frozen bootstrap target
    {
        let state = TrainState::<f64>::new(AgentKind::BcMf, hyper.clone(), 21, 0).unwrap();
        let base = &state.base;
        let d = hyper.chunk_dim();
        let actions = standard_normal_tensor::<f64>(&mut rng, n, d);
        let noise = sample_prior(&mut rng, n, d, base.geometry);
        let (r, t) = draw_rt(&mut rng, n, hyper.p_equal);
        let (z_t, v) = interpolate(&actions, &noise, &t);

        let mut tape = Tape::new();
        let sid = tape.constant(states.clone());
        let zid = tape.constant(z_t.clone());
        let rid = tape.constant(r.clone());
        let tid = tape.constant(t.clone());
        let pids: Vec<NodeId> =
            base.net.params().iter().map(|p| tape.constant((*p).clone())).collect();
        let u = build_u_graph(&mut tape, &base.net.spec, true, &pids, sid, zid, rid, tid);
        let ones = Tensor::filled(n, 1, 1.0);
        let du = tape.forward_tangent(&[(zid, v.clone()), (tid, ones)], u);
        let mut u_tgt = v;
        for i in 0..n {
            let w = t.data()[i] - r.data()[i];
            for j in 0..d {
                u_tgt.row_mut(i)[j] -= w * du.row(i)[j];
            }
        }
        let spec = base.net.spec.clone();
        let program = |tape: &mut Tape<f64>, p: &[NodeId], _: &[NodeId]| {
            let sid = tape.constant(states.clone());
            let zid = tape.constant(z_t.clone());
            let rid = tape.constant(r.clone());
            let tid = tape.constant(t.clone());
            let u = build_u_graph(tape, &spec, true, p, sid, zid, rid, tid);
            let tgt = tape.constant(u_tgt.clone());
            Ok(build_regression_loss(tape, u, tgt))
        };
        let params: Vec<Tensor<f64>> = base.net.params().into_iter().cloned().collect();
        let err = finite_diff_check(&program, &params, &[], FdMode::Grad, FD_DEFAULT_STEP).unwrap();
        track("average-velocity regression", err);
    }

    // chunked TD regression over the critic ensemble
    {
        let state = TrainState::<f64>::new(AgentKind::Lps, hyper.clone(), 22, 0).unwrap();
        let critic = state.critic.as_ref().unwrap();
        let d = hyper.chunk_dim();
        let chunks = standard_normal_tensor::<f64>(&mut rng, n, d);
        let targets = standard_normal_tensor::<f64>(&mut rng, n, 1);
        let specs: Vec<_> = critic.heads.iter().map(|h| h.spec.clone()).collect();
        let per_head = specs[0].layer_dims().len() * 2;
        let s = states.clone();
        let program = |tape: &mut Tape<f64>, p: &[NodeId], _: &[NodeId]| {
            let sid = tape.constant(s.clone());
            let aid = tape.constant(chunks.clone());
            let x = tape.concat_cols(&[sid, aid]);
            let yid = tape.constant(targets.clone());
            let mut total: Option<NodeId> = None;
            for (ki, spec) in specs.iter().enumerate() {
                let q = lps_core::meanflow::build_mlp_graph(
                    tape,
                    spec,
                    &p[ki * per_head..(ki + 1) * per_head],
                    x,
                );
                let diff = tape.sub(q, yid);
                let sq = tape.square(diff);
                let sum = tape.sum_all(sq);
                total = Some(match total {
                    None => sum,
                    Some(acc) => tape.add(acc, sum),
                });
            }
            let scale = 1.0 / (n as f64 * specs.len() as f64);
            Ok(tape.scale(total.unwrap(), scale))
        };
        let params: Vec<Tensor<f64>> = critic
            .heads
            .iter()
            .flat_map(|h| h.params().into_iter().cloned())
            .collect();
        let err = finite_diff_check(&program, &params, &[], FdMode::Grad, FD_DEFAULT_STEP).unwrap();
        track("chunked TD regression", err);
    }

    // deterministic latent steering through the frozen decoder
    {
        let state = TrainState::<f64>::new(AgentKind::Lps, hyper.clone(), 23, 0).unwrap();
        let actor = state.actor.as_ref().unwrap();
        let critic = state.critic.as_ref().unwrap();
        let program = lps_program(actor, &state.base, critic, Aggregation::Mean, 1.0, &states, None);
        let params: Vec<Tensor<f64>> = actor.net.params().into_iter().cloned().collect();
        let err = finite_diff_check(&program, &params, &[], FdMode::Grad, FD_DEFAULT_STEP).unwrap();
        track("latent steering", err);
    }

    // noise-conditioned extraction with distance regularization (both backbones)
    for (kind, label) in [
        (AgentKind::QcFql, "regularized extraction (euler behavior)"),
        (AgentKind::QcMfql, "regularized extraction (one-step behavior)"),
    ] {
        let state = TrainState::<f64>::new(kind, hyper.clone(), 24, 0).unwrap();
        let actor = state.actor.as_ref().unwrap();
        let critic = state.critic.as_ref().unwrap();
        let d = hyper.chunk_dim();
        let mut zrng = rng::stream(0xACC1, 9);
        let z = sample_prior(&mut zrng, n, d, state.base.geometry);
        let behavior = match state.base.backbone {
            Backbone::FlowMatching => {
                state.base.fm_sample_euler(&states, &z, hyper.flow_steps).unwrap()
            }
            Backbone::MeanFlow => state.base.one_step_action(&states, &z).unwrap(),
        };
        let program =
            qc_program(actor, critic, Aggregation::Mean, 1.0, hyper.alpha, &states, &z, &behavior);
        let params: Vec<Tensor<f64>> = actor.net.params().into_iter().cloned().collect();
        let err = finite_diff_check(&program, &params, &[], FdMode::Grad, FD_DEFAULT_STEP).unwrap();
        track(label, err);
    }

    // noise-input deterministic actor with decoded-distance regularization
    {
        let state = TrainState::<f64>::new(AgentKind::Lpsd, hyper.clone(), 25, 0).unwrap();
        let actor = state.actor.as_ref().unwrap();
        let critic = state.critic.as_ref().unwrap();
        let d = hyper.chunk_dim();
        let mut zrng = rng::stream(0xACC1, 10);
        let z = sample_prior(&mut zrng, n, d, state.base.geometry);
        let behavior = state.base.one_step_action(&states, &z).unwrap();
        let program = lpsd_program(
            actor,
            &state.base,
            critic,
            Aggregation::Mean,
            1.0,
            hyper.alpha,
            &states,
            &z,
            &behavior,
        );
        let params: Vec<Tensor<f64>> = actor.net.params().into_iter().cloned().collect();
        let err = finite_diff_check(&program, &params, &[], FdMode::Grad, FD_DEFAULT_STEP).unwrap();
        track("noise-input steering with regularizer", err);
    }

    // latent-critic distillation and the latent-only actor path
    {
        let state = TrainState::<f64>::new(AgentKind::DsrlNa, hyper.clone(), 26, 0).unwrap();
        let actor = state.actor.as_ref().unwrap();
        let critic = state.critic.as_ref().unwrap();
        let latent_critic = state.latent_critic.as_ref().unwrap();
        let d = hyper.chunk_dim();
        let mut zrng = rng::stream(0xACC1, 11);
        let z = sample_prior(&mut zrng, n, d, state.base.geometry);
        let decoded = state.base.one_step_action(&states, &z).unwrap();
        let q_comp = critic.q_agg(false, &states, &decoded, Aggregation::Mean).unwrap();

        let program = dsrl_distill_program(latent_critic, &states, &z, &q_comp);
        let params: Vec<Tensor<f64>> = latent_critic.params().into_iter().cloned().collect();
        let err = finite_diff_check(&program, &params, &[], FdMode::Grad, FD_DEFAULT_STEP).unwrap();
        track("latent-critic distillation", err);

        let program = dsrl_actor_program(actor, latent_critic, 1.0, &states);
        let params: Vec<Tensor<f64>> = actor.net.params().into_iter().cloned().collect();
        let err = finite_diff_check(&program, &params, &[], FdMode::Grad, FD_DEFAULT_STEP).unwrap();
        track("latent-only steering", err);
    }

    let secs = start.elapsed().as_secs_f64();
    let pass = worst < 1e-4 && secs < 60.0;
    report(
        1,
        pass,
        &format!("worst rel err {worst:.3e} ({name}) across 7 loss programs in {secs:.1}s (budgets 1e-4, 60s)"),
    );
}

// ---------------------------------------------------------------------------
// 2. forced r = t makes the average-velocity loss equal plain flow matching

#[test]
fn c02_degenerate_interval_equals_flow_matching() {
    let mut rng = rng::stream(0xACC2, 0);
    let fm = BasePolicy::<f64>::new(
        Backbone::FlowMatching,
        3,
        4,
        vec![8, 8],
        false,
        Geometry::Normal,
        &mut rng,
    );
    let mf = embed_fm_net_as_meanflow(&fm);
    let mut worst: f64 = 0.0;
    for trial in 0..20 {
        let mut trng = rng::stream(0xACC2, 1 + trial);
        let n = 16;
        let s = standard_normal_tensor(&mut trng, n, 3);
        let a = standard_normal_tensor(&mut trng, n, 4);
        let noise = sample_prior(&mut trng, n, 4, Geometry::Normal);
        let mut t = Tensor::zeros(n, 1);
        for v in t.data_mut() {
            *v = rng::uniform(&mut trng);
        }
        let (mf_loss, _) = lps_core::meanflow::meanflow_loss_core(&mf, &s, &a, &noise, &t, &t).unwrap();
        let (fm_loss, _) = lps_core::meanflow::fm_loss_core(&fm, &s, &a, &noise, &t).unwrap();
        worst = worst.max((mf_loss - fm_loss).abs());
    }
    report(
        2,
        worst <= 1e-10,
        &format!("max |average-velocity loss - flow-matching loss| = {worst:.3e} over 20 batches (budget 1e-10)"),
    );
}

// ---------------------------------------------------------------------------
// 3. reformulated one-step sampling is bitwise the raw network output

#[test]
fn c03_one_step_identity_bitwise() {
    let mut rng = rng::stream(0xACC3, 0);
    let policy = BasePolicy::<f64>::new(
        Backbone::MeanFlow,
        3,
        4,
        vec![16, 16],
        true,
        Geometry::Sphere,
        &mut rng,
    );
    let n = 10_000;
    let s = standard_normal_tensor(&mut rng, n, 3);
    let z = sample_prior(&mut rng, n, 4, Geometry::Sphere);
    let a = policy.one_step_action(&s, &z).unwrap();
    let x = Tensor::hcat(&[&s, &z, &Tensor::zeros(n, 1), &Tensor::filled(n, 1, 1.0)]);
    let direct = policy.net.forward(&x).unwrap();
    let mismatches = a
        .data()
        .iter()
        .zip(direct.data())
        .filter(|(p, q)| p.to_bits() != q.to_bits())
        .count();
    report(
        3,
        mismatches == 0,
        &format!("{mismatches} bitwise mismatches over {n} random inputs (budget 0)"),
    );
}

// ---------------------------------------------------------------------------
// 4. chunk targets equal brute-force discounted sums; h = 1 is 1-step TD

#[test]
fn c04_chunk_target_oracle() {
    let mut rng = rng::stream(0xACC4, 0);
    let gamma = 0.99;

    // frozen worked examples
    let base = chunk_return(&[-1.0f64; 5], gamma).unwrap();
    assert!((base - (-4.90099501)).abs() < 1e-12, "chunk return oracle: {base}");
    let y5 = base + gamma.powi(5) * (-50.0);
    assert!((y5 - (-52.450497505)).abs() < 1e-9, "bootstrap oracle: {y5}");
    let y1 = -1.0 + gamma * (-10.0);
    assert!((y1 - (-10.9)).abs() < 1e-12, "td oracle: {y1}");

    let critic = CriticEnsemble::<f64>::new(2, 4, vec![8], 2, &mut rng);
    let mut worst: f64 = 0.0;
    let episodes = 1000;
    let per = 4; // chunks checked per episode
    for ep in 0..episodes {
        let mut erng = rng::stream(0xACC4, 1 + ep);
        let h = 1 + (rng::uniform::<f64>(&mut erng) * 5.0) as usize;
        let rewards = standard_normal_tensor::<f64>(&mut erng, per, h);
        let mut masks = Tensor::zeros(per, 1);
        for v in masks.data_mut() {
            *v = if rng::uniform::<f64>(&mut erng) < 0.3 { 0.0 } else { 1.0 };
        }
        let next_s = standard_normal_tensor::<f64>(&mut erng, per, 2);
        let next_c = standard_normal_tensor::<f64>(&mut erng, per, 4);
        let y = td_targets(&critic, &rewards, &masks, &next_s, &next_c, gamma, Aggregation::Min)
            .unwrap();
        let q = critic.q_agg(true, &next_s, &next_c, Aggregation::Min).unwrap();
        for b in 0..per {
            // brute force with explicit powers
            let mut want = 0.0;
            for (i, r) in rewards.row(b).iter().enumerate() {
                want += r * gamma.powi(i as i32);
            }
            want += masks.data()[b] * gamma.powi(h as i32) * q.data()[b];
            worst = worst.max((y.data()[b] - want).abs());
            if h == 1 {
                // independent 1-step TD must match exactly
                let td = rewards.row(b)[0] + masks.data()[b] * gamma * q.data()[b];
                assert_eq!(y.data()[b].to_bits(), td.to_bits(), "h=1 is not plain TD");
            }
        }
    }
    report(
        4,
        worst < 1e-12,
        &format!("max |target - brute force| = {worst:.3e} over {episodes} episodes (budget 1e-12); h=1 bitwise TD"),
    );
}

// ---------------------------------------------------------------------------
// 5. spherical latents hold |z|^2 = d over a full run; normal ablation blows up

#[test]
fn c05_sphere_invariant_and_norm_growth_ablation() {
    let toml = r#"
kind = "lps"
env = "corner-bandit"
seed = 501
steps = 50000
batch_size = 64
eval_interval = 1000
eval_episodes = 4
demo_episodes = 100
base_hidden = [32, 32]
actor_hidden = [32, 32]
critic_hidden = [32, 32]
"#;
    let cfg = ExperimentConfig::from_toml_str(toml).unwrap();
    let d = cfg.to_hyper(&cfg.env_spec().unwrap()).chunk_dim() as f64;
    let out = tmp_dir("c5-sphere");
    let run = run_train(&cfg, &out).unwrap();
    let mut worst = 0.0f64;
    for r in &run.records {
        let hi = r.z_sq_max.expect("steering run logs norms") - d;
        let lo = d - r.z_sq_min.expect("steering run logs norms");
        worst = worst.max(hi.max(lo));
    }

    let mut ablation = cfg.clone();
    ablation.geometry = Some(Geometry::Normal);
    ablation.steps = 5000;
    let out2 = tmp_dir("c5-normal");
    let run2 = run_train(&ablation.resolved(), &out2).unwrap();
    let peak = run2
        .records
        .iter()
        .filter_map(|r| r.z_sq_max)
        .fold(f64::NEG_INFINITY, f64::max);

    let pass = worst < 1e-5 * d && peak > 1.5 * d;
    report(
        5,
        pass,
        &format!(
            "sphere: max |z^2 - d| = {worst:.3e} over 50k steps (budget {:.1e}); normal ablation peak z^2 = {peak:.1} (needs > {:.1})",
            1e-5 * d,
            1.5 * d
        ),
    );
    let _ = std::fs::remove_dir_all(out);
    let _ = std::fs::remove_dir_all(out2);
}

// ---------------------------------------------------------------------------
// 6. one-step sampling reproduces both modes of the two-point dataset

const C6_MF_STEPS: u64 = 60_000;
const C6_MF_LR: f64 = 1e-4;
const C6_FM_STEPS: u64 = 4_000;
const C6_FM_LR: f64 = 1e-3;

fn two_mode_masses(kind: AgentKind, steps: u64, lr: f64, seed: u64) -> (f64, f64) {
    let ds = two_mode_1d(4096, 0.0, 99).unwrap();
    let mut hyper = AgentHyper::toy(1, 1);
    hyper.h = 1;
    hyper.lr = lr;
    hyper.base_hidden = vec![64, 64];
    let mut state = TrainState::<f32>::new(kind, hyper, seed, 0).unwrap();
    let mut batch_rng = rng::stream(seed, 3);
    for _ in 0..steps {
        let batch = sample_chunk_batch::<f32>(&ds, 1, 256, &mut batch_rng).unwrap();
        train_step(&mut state, &batch).unwrap();
    }
    let obs = Tensor::<f32>::zeros(10_000, 1);
    let mut srng = rng::stream(seed, 77);
    let actions = state.base.sample_actions(&obs, &mut srng, state.hyper.flow_steps).unwrap();
    let n = actions.len() as f64;
    let lo = actions.data().iter().filter(|a| (**a + 0.5).abs() < 0.1).count() as f64 / n;
    let hi = actions.data().iter().filter(|a| (**a - 0.5).abs() < 0.1).count() as f64 / n;
    (lo, hi)
}

#[test]
fn c06_two_mode_sampler_fidelity() {
    let start = Instant::now();
    let (fm_lo, fm_hi) = two_mode_masses(AgentKind::BcFm, C6_FM_STEPS, C6_FM_LR, 61);
    let (mf_lo, mf_hi) = two_mode_masses(AgentKind::BcMf, C6_MF_STEPS, C6_MF_LR, 61);
    let secs = start.elapsed().as_secs_f64();
    let oracle_ok = fm_lo >= 0.45 && fm_hi >= 0.45;
    let pass = oracle_ok && mf_lo >= 0.45 && mf_hi >= 0.45 && secs < 600.0;
    report(
        6,
        pass,
        &format!(
            "one-step masses ({mf_lo:.3}, {mf_hi:.3}) vs 10-step euler oracle ({fm_lo:.3}, {fm_hi:.3}); each needs >= 0.45; {secs:.0}s (budget 600s)"
        ),
    );
}

// ---------------------------------------------------------------------------
// 7. alpha sensitivity of explicit regularization vs steering robustness

const C7_STEPS: u64 = 30_000;
const C7_GRID: [f64; 3] = [0.1, 3.0, 300.0];

fn c7_config(kind: AgentKind) -> ExperimentConfig {
    let toml = format!(
        r#"
kind = "{}"
env = "corner-bandit"
seed = 701
steps = {C7_STEPS}
batch_size = 256
eval_interval = {C7_STEPS}
eval_episodes = 20
demo_episodes = 400
h = 1
lr = 1e-4
normalize_q = false
base_hidden = [64, 64]
actor_hidden = [48, 48]
critic_hidden = [128, 128]
"#,
        kind.as_str()
    );
    ExperimentConfig::from_toml_str(&toml).unwrap()
}

#[test]
fn c07_regularization_sensitivity_contrast() {
    let qc_dir = tmp_dir("c7-qc");
    let qc = run_sweep(&c7_config(AgentKind::QcMfql), &C7_GRID, &qc_dir).unwrap();
    let lps_dir = tmp_dir("c7-lps");
    let lps = run_sweep(&c7_config(AgentKind::Lps), &C7_GRID, &lps_dir).unwrap();

    let ood: Vec<f64> = qc.iter().map(|p| p.final_record.ood_fraction.unwrap()).collect();
    let ret: Vec<f64> = qc.iter().map(|p| p.final_record.eval_return_mean).collect();
    let qc_monotone = ood[0] >= ood[1] && ood[1] >= ood[2];
    let qc_interior_best = ret[0] < ret[1] && ret[2] < ret[1];
    let qc_range = ret.iter().cloned().fold(f64::NEG_INFINITY, f64::max)
        - ret.iter().cloned().fold(f64::INFINITY, f64::min);

    let lps_ood: Vec<f64> = lps.iter().map(|p| p.final_record.ood_fraction.unwrap()).collect();
    let lps_ret: Vec<f64> = lps.iter().map(|p| p.final_record.eval_return_mean).collect();
    let lps_in_support = lps_ood.iter().all(|v| *v < 0.05);
    let lps_range = lps_ret.iter().cloned().fold(f64::NEG_INFINITY, f64::max)
        - lps_ret.iter().cloned().fold(f64::INFINITY, f64::min);

    let pass = qc_monotone && qc_interior_best && lps_in_support && lps_range <= qc_range;
    report(
        7,
        pass,
        &format!(
            "qc ood {ood:.3?} (monotone {qc_monotone}), qc returns {ret:.2?} (interior best {qc_interior_best}); lps ood {lps_ood:.3?} (<0.05 each: {lps_in_support}), return ranges lps {lps_range:.2} vs qc {qc_range:.2}"
        ),
    );
    let _ = std::fs::remove_dir_all(qc_dir);
    let _ = std::fs::remove_dir_all(lps_dir);
}

// ---------------------------------------------------------------------------
// 8. distilled latent-critic gradients mismatch the composed path

const C8_STEPS: u64 = 4_000;

#[test]
fn c08_distilled_gradient_mismatch() {
    let toml = format!(
        r#"
kind = "dsrl-na"
env = "corner-bandit-h1"
seed = 801
steps = {C8_STEPS}
batch_size = 128
eval_interval = {C8_STEPS}
eval_episodes = 4
demo_episodes = 400
h = 1
base_hidden = [32, 32]
actor_hidden = [32, 32]
critic_hidden = [32, 32]
"#
    );
    let cfg = ExperimentConfig::from_toml_str(&toml).unwrap();
    let out = tmp_dir("c8-dsrl");
    let run = run_train(&cfg, &out).unwrap();
    let state = load_train_state::<f32>(&run.checkpoint_path).unwrap();
    let obs = Tensor::<f32>::zeros(1, 2);

    let grid = latent_cosine_grid(&state, &obs, 21, 2.0, false).unwrap();
    let self_test = latent_cosine_grid(&state, &obs, 21, 2.0, true).unwrap();

    // the steering path through the same frozen networks stays FD-exact
    let state64 = load_train_state::<f64>(&run.checkpoint_path).unwrap();
    let actor64 = LatentActor::new(2, 2, vec![8, 8], Geometry::Sphere, false, &mut rng::stream(0xACC8, 0));
    let obs64 = Tensor::<f64>::zeros(4, 2);
    let program = lps_program(
        &actor64,
        &state64.base,
        state64.critic.as_ref().unwrap(),
        Aggregation::Mean,
        1.0,
        &obs64,
        None,
    );
    let params: Vec<Tensor<f64>> = actor64.net.params().into_iter().cloned().collect();
    let err = finite_diff_check(&program, &params, &[], FdMode::Grad, FD_DEFAULT_STEP).unwrap();

    let pass = grid.mean_cos <= 0.95 && self_test.mean_cos > 0.999 && err < 1e-4;
    report(
        8,
        pass,
        &format!(
            "distilled-vs-composed mean cosine {:.4} (needs <= 0.95), self-test {:.6}, steering-path fd err {err:.3e} (budget 1e-4)",
            grid.mean_cos, self_test.mean_cos
        ),
    );
    let _ = std::fs::remove_dir_all(out);
}

// ---------------------------------------------------------------------------
// 9. steering matches or beats behavioral cloning on artifact-laden demos

const C9_STEPS: u64 = 16_000;
const C9_SEEDS: [u64; 3] = [901, 902, 903];

fn c9_run(kind: AgentKind, seed: u64) -> (f64, f64) {
    let toml = format!(
        r#"
kind = "{}"
env = "pointmass-nav"
seed = {seed}
steps = {C9_STEPS}
batch_size = 128
eval_interval = {C9_STEPS}
eval_episodes = 50
demo_episodes = 200
base_hidden = [48, 48]
actor_hidden = [48, 48]
critic_hidden = [48, 48]
"#,
        kind.as_str()
    );
    let cfg = ExperimentConfig::from_toml_str(&toml).unwrap();
    let out = tmp_dir(&format!("c9-{}-{seed}", kind.as_str()));
    let run = run_train(&cfg, &out).unwrap();
    let last = run.records.last().unwrap();
    let result = (last.eval_return_mean, last.eval_success_rate);
    let _ = std::fs::remove_dir_all(out);
    result
}

#[test]
fn c09_steering_beats_cloning() {
    let start = Instant::now();
    let mut lps_ret = 0.0;
    let mut lps_succ = 0.0;
    let mut bc_ret = 0.0;
    let mut bc_succ = 0.0;
    for seed in C9_SEEDS {
        let (r, s) = c9_run(AgentKind::Lps, seed);
        lps_ret += r / C9_SEEDS.len() as f64;
        lps_succ += s / C9_SEEDS.len() as f64;
        let (r, s) = c9_run(AgentKind::BcMf, seed);
        bc_ret += r / C9_SEEDS.len() as f64;
        bc_succ += s / C9_SEEDS.len() as f64;
    }
    let secs = start.elapsed().as_secs_f64();
    let pass = lps_ret >= bc_ret && lps_succ >= bc_succ && secs < 1800.0;
    report(
        9,
        pass,
        &format!(
            "mean return lps {lps_ret:.3} vs bc {bc_ret:.3}; success lps {lps_succ:.2} vs bc {bc_succ:.2}; 3 seeds x 50 episodes in {secs:.0}s (budget 1800s)"
        ),
    );
}

// ---------------------------------------------------------------------------
// 10. byte-identical artifacts for identical seed/config

#[test]
fn c10_byte_determinism() {
    let toml = r#"
kind = "qc-mfql"
env = "corner-bandit"
seed = 1001
steps = 200
batch_size = 32
eval_interval = 100
eval_episodes = 4
demo_episodes = 50
checkpoint_interval = 100
base_hidden = [16, 16]
actor_hidden = [16, 16]
critic_hidden = [16, 16]
"#;
    let cfg = ExperimentConfig::from_toml_str(toml).unwrap();
    let a = tmp_dir("c10-a");
    let b = tmp_dir("c10-b");
    let ra = run_train(&cfg, &a).unwrap();
    let rb = run_train(&cfg, &b).unwrap();
    let metrics_a = std::fs::read(&ra.metrics_path).unwrap();
    let metrics_b = std::fs::read(&rb.metrics_path).unwrap();
    let ckpt_a = std::fs::read(&ra.checkpoint_path).unwrap();
    let ckpt_b = std::fs::read(&rb.checkpoint_path).unwrap();

    // the checkpoint also survives a save/load/save round trip byte-for-byte
    let state = load_train_state::<f32>(&ra.checkpoint_path).unwrap();
    let resaved = a.join("resaved.lpst");
    save_train_state(&resaved, &state).unwrap();
    let ckpt_c = std::fs::read(&resaved).unwrap();

    let pass = metrics_a == metrics_b && ckpt_a == ckpt_b && ckpt_a == ckpt_c;
    report(
        10,
        pass,
        &format!(
            "metrics identical: {}, checkpoints identical: {}, reserialized identical: {} ({} metric bytes)",
            metrics_a == metrics_b,
            ckpt_a == ckpt_b,
            ckpt_a == ckpt_c,
            metrics_a.len()
        ),
    );
    let _ = std::fs::remove_dir_all(a);
    let _ = std::fs::remove_dir_all(b);
}
