//! Acceptance suite. Each test prints one `criterion N: PASS|FAIL` line with
//! the measured value and its tolerance before asserting.
//!
//! Criteria 5 to 9 train on CoinGrid for tens of minutes each and are
//! ignored by default:
//!
//!     cargo test --release -p psiphi --test acceptance -- --ignored --nocapture

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use psiphi::demo::{DemoPair, DemoSet};
use psiphi::grid::{GridSpec, Observation};
use psiphi::harness::{self, ExperimentConfig, InvarianceConfig, TheoremConfig};
use psiphi::loss::{
    bcq_loss, finite_difference, itd_loss, l1_loss, max_relative_error, q_td_loss, reward_loss, sf_td_loss, EgoSample,
    NextAction,
};
use psiphi::nn::{Arch, Block, Checkpoint, ParamStore};
use psiphi::oracle::{
    exact_successor_features, gpi_policy, policy_evaluation, random_model, soft_q_iteration, value_iteration,
    RandomMdpOptions, SoftPolicy, ViOptions,
};

fn report(n: usize, pass: bool, measured: &str, tolerance: &str, started: Instant) -> bool {
    println!(
        "criterion {n}: {} {measured} (required {tolerance}) [{:.1}s]",
        if pass { "PASS" } else { "FAIL" },
        started.elapsed().as_secs_f64()
    );
    pass
}

fn config() -> ExperimentConfig {
    let mut c = ExperimentConfig::default();
    c.sync();
    c
}

// ---------------------------------------------------------------------------
// 1. Gradients

fn random_store(rng: &mut ChaCha8Rng) -> (ParamStore, ParamStore) {
    loop {
        let arch = Arch {
            n_inputs: rng.gen_range(2..=5),
            n_actions: rng.gen_range(2..=3),
            d: rng.gen_range(1..=3),
            n_agents: rng.gen_range(1..=2),
            torso: vec![rng.gen_range(2..=4)],
            head_hidden: vec![],
        };
        let mut p = ParamStore::init(arch.clone(), rng).unwrap();
        if p.len() > 100 {
            continue;
        }
        for v in p.values.iter_mut() {
            *v += rng.gen_range(-0.3..0.3);
        }
        let mut t = ParamStore::init(arch, rng).unwrap();
        for v in t.values.iter_mut() {
            *v += rng.gen_range(-0.3..0.3);
        }
        return (p, t);
    }
}

fn random_obs(rng: &mut ChaCha8Rng, n_inputs: usize, n: usize) -> Vec<Observation> {
    (0..n)
        .map(|_| Observation {
            shape: [1, n_inputs, 1],
            bits: (0..n_inputs).map(|_| rng.gen_bool(0.5)).collect(),
        })
        .collect()
}

/// Largest relative error over the parameters the loss differentiates;
/// stop-gradient blocks are read as constants and skipped.
fn grad_error(p: &ParamStore, analytic: &[f64], frozen: &[Block], f: impl Fn(&ParamStore) -> f64) -> f64 {
    let mut numeric = finite_difference(p, 1e-5, f);
    for &b in frozen {
        for i in p.layout.range(b) {
            numeric[i] = analytic[i];
        }
    }
    max_relative_error(analytic, &numeric, 1e-6)
}

#[test]
fn criterion_01_gradients_match_finite_differences() {
    let started = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut worst = 0.0f64;
    for _ in 0..25 {
        let (p, t) = random_store(&mut rng);
        let (na, k) = (p.n_actions(), p.n_agents());
        let obs = random_obs(&mut rng, p.arch().n_inputs, 10);
        let pairs: Vec<DemoPair> = (0..obs.len() - 1)
            .map(|i| DemoPair {
                obs: &obs[i],
                action: rng.gen_range(0..na),
                next_obs: &obs[i + 1],
                next_action: rng.gen_range(0..na),
                agent_id: rng.gen_range(1..=k),
                bootstrap: rng.gen_bool(0.8),
            })
            .collect();
        let ego: Vec<EgoSample> = (0..obs.len() - 3)
            .map(|i| EgoSample {
                steps: (i..i + rng.gen_range(1..=2)).map(|j| (&obs[j], rng.gen_range(0..na), rng.gen_range(-1.0..1.0))).collect(),
                bootstrap: rng.gen_bool(0.8).then(|| &obs[i + 3]),
            })
            .collect();
        let rewards: Vec<(&Observation, usize, f64)> =
            obs.iter().map(|o| (o, rng.gen_range(0..na), rng.gen_range(-1.0..1.0))).collect();
        let ws: Vec<Block> = (0..=k).map(Block::W).collect();

        let (_, g) = bcq_loss(&p, &pairs).unwrap();
        worst = worst.max(grad_error(&p, &g, &[], |q| bcq_loss(q, &pairs).unwrap().0));
        for mode in [NextAction::Dataset, NextAction::Expected, NextAction::Greedy] {
            let (_, g) = itd_loss(&p, &t, &pairs, 0.9, mode).unwrap();
            let frozen: &[Block] = if mode == NextAction::Dataset { &[] } else { &ws };
            worst = worst.max(grad_error(&p, &g, frozen, |q| itd_loss(q, &t, &pairs, 0.9, mode).unwrap().0));
        }
        let (_, g) = reward_loss(&p, &rewards).unwrap();
        worst = worst.max(grad_error(&p, &g, &[], |q| reward_loss(q, &rewards).unwrap().0));
        let (_, g) = q_td_loss(&p, &t, &ego, 0.9).unwrap();
        worst = worst.max(grad_error(&p, &g, &[Block::W(0)], |q| q_td_loss(q, &t, &ego, 0.9).unwrap().0));
        let (_, g) = sf_td_loss(&p, &t, &ego, 0.9).unwrap();
        worst = worst.max(grad_error(&p, &g, &[Block::W(0)], |q| sf_td_loss(q, &t, &ego, 0.9).unwrap().0));
        let agents: Vec<usize> = (1..=k).collect();
        let (_, g) = l1_loss(&p, &agents, 0.05).unwrap();
        worst = worst.max(grad_error(&p, &g, &[], |q| l1_loss(q, &agents, 0.05).unwrap().0));
    }
    let secs = started.elapsed().as_secs_f64();
    let pass = worst < 1e-4 && secs < 60.0;
    assert!(report(1, pass, &format!("max relative error {worst:.2e}"), "< 1e-4, < 60 s", started));
}

// ---------------------------------------------------------------------------
// 2. Exact oracle

#[test]
fn criterion_02_exact_sf_and_gpi_dominance() {
    let started = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let (mut sf_err, mut gpi_slack) = (0.0f64, 0.0f64);
    for _ in 0..50 {
        let d = rng.gen_range(1..=4);
        let m = random_model(
            RandomMdpOptions {
                n_states: rng.gen_range(5..=40),
                n_actions: 3,
                d,
                gamma: 0.9,
                branching: rng.gen_range(1..=3),
            },
            &mut rng,
        );
        let w: Vec<f64> = (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let r = m.reward(&w).unwrap();

        let soft = soft_q_iteration(&m, &r, rng.gen_range(0.05..1.0), ViOptions::default()).unwrap();
        let q = policy_evaluation(&m, &soft, &r).unwrap();
        let sf = exact_successor_features(&m, &soft).unwrap();
        sf_err = q.iter().zip(sf.q(&w)).fold(sf_err, |e, (a, b)| e.max((a - b).abs()));

        let mut qs = Vec::new();
        for _ in 0..3 {
            let src: Vec<f64> = (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let (_, pi) = value_iteration(&m, &m.reward(&src).unwrap(), ViOptions::default()).unwrap();
            qs.push(exact_successor_features(&m, &SoftPolicy::deterministic(&pi, 3)).unwrap().q(&w));
        }
        let gpi = gpi_policy(&qs, 3);
        let q_gpi = policy_evaluation(&m, &SoftPolicy::deterministic(&gpi, 3), &r).unwrap();
        for row in 0..m.n_rows() {
            let best = qs.iter().map(|q| q[row]).fold(f64::NEG_INFINITY, f64::max);
            gpi_slack = gpi_slack.max(best - q_gpi[row]);
        }
    }
    let pass = sf_err < 1e-8 && gpi_slack < 1e-8 && started.elapsed().as_secs_f64() < 60.0;
    let measured = format!("SF error {sf_err:.2e}, GPI shortfall {gpi_slack:.2e}");
    assert!(report(2, pass, &measured, "both < 1e-8, < 60 s", started));
}

// ---------------------------------------------------------------------------
// 3. Policy invariance of the recovered reward

#[test]
fn criterion_03_recovered_reward_preserves_demonstrator_policy() {
    let started = Instant::now();
    let cfg = InvarianceConfig::default();
    let records: Vec<_> = (0..cfg.n_mdps).map(|i| harness::policy_invariance(i, &cfg, 0).unwrap()).collect();
    let worst = records.iter().map(|r| r.agreement).fold(1.0, f64::min);
    let failing = records.iter().filter(|r| r.agreement < cfg.threshold).count();
    let pass = failing == 0 && started.elapsed().as_secs_f64() < 600.0;
    let measured = format!("{failing}/{} MDPs below threshold, worst agreement {worst:.3}", records.len());
    assert!(report(3, pass, &measured, ">= 0.95 on every MDP, < 10 min", started));
}

// ---------------------------------------------------------------------------
// 4. Generalisation bound

#[test]
fn criterion_04_bound_has_no_violations() {
    let started = Instant::now();
    let cfg = TheoremConfig {
        invariance: InvarianceConfig {
            n_mdps: 0,
            ..InvarianceConfig::default()
        },
        ..TheoremConfig::default()
    };
    assert_eq!(cfg.n_mdps, 100);
    let report4 = harness::check_theorems(&cfg, 0).unwrap();
    let v = report4.bound_violations();
    let tightest = report4.bounds.iter().map(|b| b.rhs - b.gap).fold(f64::INFINITY, f64::min);
    let pass = v == 0 && started.elapsed().as_secs_f64() < 300.0;
    let measured = format!("{v} violations over {} pairs, min slack {tightest:.3e}", report4.bounds.len());
    assert!(report(4, pass, &measured, "0 violations at tolerance 1e-6, < 5 min", started));
}

// ---------------------------------------------------------------------------
// 5. Recovered-reward quality

#[test]
#[ignore = "long-running CoinGrid training"]
fn criterion_05_recovered_reward_beats_pooled_bc() {
    let started = Instant::now();
    let cfg = config();
    let spec = GridSpec::coingrid();
    let mut rows = Vec::new();
    for &s in &cfg.irl.seeds {
        rows.extend(harness::eval_irl(&spec, &cfg, s).unwrap());
    }
    let itd = harness::median(&harness::per_seed(&rows, "itd"));
    let bc = harness::median(&harness::per_seed(&rows, "bc_pooled"));
    let pass = itd >= 0.75 && itd > bc && started.elapsed().as_secs_f64() < 1800.0;
    let measured = format!("ITD median {itd:.3}, pooled BC median {bc:.3}");
    assert!(report(5, pass, &measured, "ITD >= 0.75 and ITD > BC, < 30 min", started));
}

// ---------------------------------------------------------------------------
// 6. Few-shot transfer

#[test]
#[ignore = "long-running CoinGrid training"]
fn criterion_06_one_shot_transfer() {
    let started = Instant::now();
    let cfg = config();
    let spec = GridSpec::coingrid();
    let mut rows = Vec::new();
    for &s in &cfg.transfer.seeds {
        rows.extend(harness::eval_few_shot(&spec, &cfg, s).unwrap());
    }
    let mean = |task: &str, shots: usize| {
        let v: Vec<f64> = rows
            .iter()
            .filter(|r| r.task == task && r.shots == shots)
            .map(|r| r.normalized_return)
            .collect();
        v.iter().sum::<f64>() / v.len() as f64
    };
    let tasks = ["R+G", "R-G", "-R+G", "-R-G"];
    let one: Vec<f64> = tasks.iter().map(|t| mean(t, 1)).collect();
    let zero: Vec<f64> = tasks.iter().map(|t| mean(t, 0)).collect();
    let one_ok = one.iter().all(|&x| x >= 0.9);
    let order_ok = zero[0] > zero[1].max(zero[2]) && zero[1].min(zero[2]) > zero[3];
    let pass = one_ok && order_ok && started.elapsed().as_secs_f64() < 1800.0;
    let measured = format!("1-shot {one:.3?}, 0-shot {zero:.3?} for {tasks:?}");
    assert!(report(6, pass, &measured, "1-shot >= 0.9 on all tasks, 0-shot R+G > {R-G, -R+G} > -R-G, < 30 min", started));
}

// ---------------------------------------------------------------------------
// 7. Acceleration

#[test]
#[ignore = "long-running CoinGrid training"]
fn criterion_07_demonstrations_accelerate_learning() {
    let started = Instant::now();
    let cfg = config();
    let spec = GridSpec::coingrid();
    let ac = &cfg.acceleration;
    let budget = cfg.agent.total_steps;
    let (mut with, mut without) = (Vec::new(), Vec::new());
    for &s in &ac.seeds {
        let rows = harness::eval_acceleration(&spec, &cfg, s).unwrap();
        // A run that never reaches the threshold is charged the whole budget,
        // which understates the ablation's true cost.
        let hit = |m: &str| harness::steps_to_threshold(&rows, s, m, ac.threshold).unwrap_or(budget) as f64;
        with.push(hit("psiphi"));
        without.push(hit("ablation"));
    }
    let (a, b) = (harness::median(&with), harness::median(&without));
    let pass = a < budget as f64 && a <= 0.5 * b && started.elapsed().as_secs_f64() < 2700.0;
    let measured = format!("median steps to {}: with demos {a}, ablation {b} (budget {budget})", ac.threshold);
    assert!(report(7, pass, &measured, "with demos <= 50% of ablation, < 45 min", started));
}

// ---------------------------------------------------------------------------
// 8. Imitation

#[test]
#[ignore = "long-running CoinGrid training"]
fn criterion_08_ego_learning_improves_imitation() {
    let started = Instant::now();
    let cfg = config();
    let spec = GridSpec::coingrid();
    let last = cfg.imitation.ego_tasks.len() - 1;
    let (mut psiphi, mut itd) = (Vec::new(), Vec::new());
    for &s in &cfg.imitation.seeds {
        for r in harness::eval_imitation(&spec, &cfg, s).unwrap() {
            if r.phase == last && r.method == "psiphi" {
                psiphi.push(r.test_accuracy);
            } else if r.phase == last && r.method == "itd" {
                itd.push(r.test_accuracy);
            }
        }
    }
    let (a, b) = (harness::median(&psiphi), harness::median(&itd));
    let pass = a > b && started.elapsed().as_secs_f64() < 1800.0;
    let measured = format!("held-out accuracy median: psiphi {a:.3}, ITD only {b:.3}");
    assert!(report(8, pass, &measured, "psiphi > ITD only, < 30 min", started));
}

// ---------------------------------------------------------------------------
// 9. Cumulant dimension

#[test]
#[ignore = "long-running CoinGrid training"]
fn criterion_09_cumulant_dimension_sensitivity() {
    let started = Instant::now();
    let cfg = config();
    let spec = GridSpec::coingrid();
    assert_eq!(cfg.itd.lambda_w, 0.05);
    let dims = [1usize, 4, 8, 16];
    let rows = harness::sweep_cumulant_dim(&spec, &cfg, &dims, &cfg.sweep.seeds).unwrap();
    let mean = |d: usize| {
        let v: Vec<f64> = rows.iter().filter(|r| r.d == d).map(|r| r.normalized_return).collect();
        v.iter().sum::<f64>() / v.len() as f64
    };
    let m: Vec<f64> = dims.iter().map(|&d| mean(d)).collect();
    let hi = m[1..].iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lo = m[1..].iter().cloned().fold(f64::INFINITY, f64::min);
    let spread = if hi > 0.0 { (hi - lo) / hi } else { f64::INFINITY };
    let pass = m[0] <= m[1] - 0.15 && spread <= 0.10 && started.elapsed().as_secs_f64() < 2700.0;
    let measured = format!("normalized return by d {dims:?}: {m:.3?}, spread over d >= 4 {:.1}%", spread * 100.0);
    assert!(report(9, pass, &measured, "d=1 <= d=4 - 0.15, d in {4,8,16} within 10%, < 45 min", started));
}

// ---------------------------------------------------------------------------
// 10. Determinism and round trips

fn small_config() -> ExperimentConfig {
    let mut c = config();
    c.demos.episodes_per_agent = 20;
    c.itd.max_steps = 200;
    c.itd.eval_every = 50;
    c.agent.total_steps = 600;
    c.agent.learning_starts = 100;
    c.agent.eval_every = 200;
    c.sync();
    c
}

fn cli_run(dir: &std::path::Path, config: &std::path::Path, args: &[&str]) -> Vec<(String, Vec<u8>)> {
    let status = std::process::Command::new(env!("CARGO_BIN_EXE_psiphi"))
        .args(args)
        .arg("--config")
        .arg(config)
        .arg("--seed")
        .arg("7")
        .arg("--out")
        .arg(dir)
        .status()
        .unwrap();
    assert!(status.success(), "{args:?}");
    let mut files: Vec<(String, Vec<u8>)> = std::fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let e = e.unwrap();
            (e.file_name().to_string_lossy().into_owned(), std::fs::read(e.path()).unwrap())
        })
        .collect();
    files.sort();
    files
}

#[test]
fn criterion_10_determinism_and_round_trips() {
    let started = Instant::now();
    let tmp = tempfile::tempdir().unwrap();
    let cfg = small_config();
    let cfg_path = tmp.path().join("small.toml");
    std::fs::write(&cfg_path, cfg.to_toml()).unwrap();

    // Whole CLI runs, byte for byte.
    let mut identical = true;
    for cmd in [&["gen-demos"][..], &["train-itd"], &["train-psiphi", "--task", "R"]] {
        let a = cli_run(&tmp.path().join(format!("{}-a", cmd[0])), &cfg_path, cmd);
        let b = cli_run(&tmp.path().join(format!("{}-b", cmd[0])), &cfg_path, cmd);
        assert!(a.iter().any(|(n, _)| n.ends_with(".csv")));
        identical &= a == b;
    }

    // Demo file round trip.
    let spec = GridSpec::coingrid();
    let demos = cfg.demos_for(&spec, &["R".into(), "G".into()], 3).unwrap();
    let path = tmp.path().join("demos.jsonl");
    demos.save(&path).unwrap();
    let demo_round_trip = DemoSet::load(&path).unwrap() == demos;

    // Checkpoint round trip, through the file and through bytes.
    let (agent, _) = harness::pretrain(&spec, &cfg, &demos, &harness::parse_task("R").unwrap(), 400, 3).unwrap();
    let ck = agent.checkpoint();
    let ck_path = tmp.path().join("agent.ckpt");
    ck.save(&ck_path).unwrap();
    let back = Checkpoint::load(&ck_path).unwrap();
    let ck_round_trip = back == ck && back.to_bytes().unwrap() == std::fs::read(&ck_path).unwrap();

    let pass = identical && demo_round_trip && ck_round_trip && started.elapsed().as_secs_f64() < 120.0;
    let measured = format!("identical reruns {identical}, demo round trip {demo_round_trip}, checkpoint round trip {ck_round_trip}");
    assert!(report(10, pass, &measured, "all true, < 2 min", started));
}
