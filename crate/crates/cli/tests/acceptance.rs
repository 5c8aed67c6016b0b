//! End-to-end acceptance checks, one PASS/FAIL line each.
//!
//! Run everything with `cargo test --test acceptance`, or pass criterion
//! numbers to run a subset: `cargo test --test acceptance -- 1 2 9`.
//! Criteria 6 to 8 share one 10-seed experiment matrix at the desk profile
//! and take most of the runtime.

use std::fs;
use std::path::Path;
use std::process::{Command, ExitCode};
use std::sync::OnceLock;
use std::time::Instant;

use o2o_core::agents::{actor_update, learner_step, AgentHyper, AgentKind, ParamSet};
use o2o_core::datasets::{generate_medium, generate_medium_replay, MediumReplayConfig, Provenance};
use o2o_core::harness::{finetune, median, pretrain, run_seed, sign_test_p, ExperimentConfig, RunResult};
use o2o_core::numerics::{mlp_backward, mlp_forward, MlpLayout, MlpParams, OutputHead};
use o2o_core::replay::Batch;
use o2o_core::rollout::Explorer;
use o2o_core::{EnvSpec, OfflineDataset, RealArray, Regime, ReplayBuffer, Rng};

type Outcome = (bool, String);

fn pass_if(ok: bool, detail: String) -> Outcome {
    (ok, detail)
}

// ---------------------------------------------------------------- 1

const FD_STEP: f64 = 1e-5;
const FD_REL_TOL: f64 = 1e-4;
/// Partials smaller than this are compared absolutely (to `FD_ABS_TOL`):
/// their central differences are dominated by roundoff of order 1e-11 / h.
const FD_TINY: f64 = 1e-6;
const FD_ABS_TOL: f64 = 1e-9;

fn gradient_fidelity() -> Outcome {
    let mut worst = 0.0f64;
    let mut failures = 0;
    let mut checked = 0;
    let instances = 24;
    for seed in 0..instances {
        let mut rng = Rng::seed_from(1000 + seed);
        let input = 2 + rng.index(5);
        let output = 1 + rng.index(2);
        let head = if seed % 2 == 0 {
            OutputHead::Linear
        } else {
            OutputHead::Tanh { scale: rng.uniform(0.5, 2.0) }
        };
        let mut p = MlpParams::init(MlpLayout::new(input, 8, output), head, false, &mut rng);
        for v in p.gain_mut() {
            *v = rng.uniform(0.5, 1.5);
        }
        for v in p.offset_mut() {
            *v = rng.uniform(-0.3, 0.3);
        }
        let batch = 1 + rng.index(4);
        let x = RealArray::from_vec(&[batch, input], (0..batch * input).map(|_| rng.uniform(-2.0, 2.0)).collect()).unwrap();
        let cot = RealArray::from_vec(&[batch, output], (0..batch * output).map(|_| rng.normal()).collect()).unwrap();
        let f = |p: &MlpParams, x: &RealArray| -> f64 {
            mlp_forward(p, x).unwrap().data().iter().zip(cot.data()).map(|(a, b)| a * b).sum()
        };
        let (grads, dx) = mlp_backward(&p, &x, &cot).unwrap();
        let mut compare = |analytic: f64, numeric: f64| {
            let diff = (analytic - numeric).abs();
            let scale = analytic.abs().max(numeric.abs());
            checked += 1;
            if scale < FD_TINY {
                failures += usize::from(diff > FD_ABS_TOL);
            } else {
                let rel = diff / scale;
                worst = worst.max(rel);
                failures += usize::from(rel > FD_REL_TOL);
            }
        };
        for i in 0..p.len() {
            let (mut plus, mut minus) = (p.clone(), p.clone());
            plus.as_mut_slice()[i] += FD_STEP;
            minus.as_mut_slice()[i] -= FD_STEP;
            compare(grads.as_slice()[i], (f(&plus, &x) - f(&minus, &x)) / (2.0 * FD_STEP));
        }
        for i in 0..x.len() {
            let (mut plus, mut minus) = (x.clone(), x.clone());
            plus.data_mut()[i] += FD_STEP;
            minus.data_mut()[i] -= FD_STEP;
            compare(dx.data()[i], (f(&p, &plus) - f(&p, &minus)) / (2.0 * FD_STEP));
        }
    }
    pass_if(
        failures == 0,
        format!("{instances} instances, {checked} partials, worst relative error {worst:.2e} (tol {FD_REL_TOL:.0e}), {failures} over"),
    )
}

// ---------------------------------------------------------------- 2

fn preloaded(dataset: &OfflineDataset, regime: Regime) -> ReplayBuffer {
    let mut buffer = ReplayBuffer::new(dataset.len(), 1000, regime).unwrap();
    buffer.preload(dataset).unwrap();
    buffer
}

fn degeneracy() -> Outcome {
    let spec = EnvSpec::point_mass_2d();
    let data = generate_medium(&spec, 21, 5000).unwrap();
    let buffer = preloaded(&data, Regime::PreloadUniform);
    let hyper = AgentHyper {
        epsilon: f64::INFINITY,
        initial_dual: 0.0,
        ..AgentHyper::desk()
    };
    let mut td3 = ParamSet::init(&spec, &hyper, &mut Rng::seed_from(22));
    let mut td3c = td3.clone();
    let (mut r1, mut r2) = (Rng::seed_from(23), Rng::seed_from(23));
    let steps = 1000;
    let mut first_divergence = None;
    for step in 1..=steps {
        learner_step(AgentKind::Td3, &mut td3, &buffer, &hyper, &mut r1).unwrap();
        learner_step(AgentKind::Td3C, &mut td3c, &buffer, &hyper, &mut r2).unwrap();
        if first_divergence.is_none() && td3 != td3c {
            first_divergence = Some(step);
        }
    }
    match first_divergence {
        None => pass_if(true, format!("{steps} learner steps, parameter sets bit-identical after every step")),
        Some(s) => pass_if(false, format!("trajectories diverge at learner step {s}")),
    }
}

// ---------------------------------------------------------------- 3

fn dual_dynamics() -> Outcome {
    let spec = EnvSpec::point_mass_2d();
    let hyper = AgentHyper::desk();
    let eps = hyper.epsilon;
    let mut params = ParamSet::init(&spec, &hyper, &mut Rng::seed_from(31));
    let data = generate_medium(&spec, 32, 2000).unwrap();
    let mut rng = Rng::seed_from(33);
    let picks: Vec<_> = (0..hyper.batch_size).map(|_| &data.transitions[rng.index(data.len())]).collect();
    let batch = Batch::from_transitions(&picks).unwrap();

    let steps = 10_000;
    let hold = 1000;
    let (lo, hi) = (eps / 2.0, 2.0 * eps);
    let mut negative = 0;
    let mut not_increasing = 0;
    let mut violations = 0;
    let mut in_band_since = None;
    let mut last_c = 0.0;
    for step in 1..=steps {
        let before = params.dual;
        let stats = actor_update(AgentKind::Td3C, &mut params, &hyper, &batch).unwrap();
        let c = stats.penalty;
        last_c = c;
        if params.dual < 0.0 {
            negative += 1;
        }
        if c > eps {
            violations += 1;
            if params.dual <= before {
                not_increasing += 1;
            }
        }
        if (lo..=hi).contains(&c) {
            in_band_since.get_or_insert(step);
        } else {
            in_band_since = None;
        }
    }
    let settled = in_band_since.is_some_and(|s| s <= steps - hold);
    pass_if(
        negative == 0 && not_increasing == 0 && settled,
        format!(
            "λ<0 on {negative} steps; c>ε on {violations} steps, λ failed to rise on {not_increasing}; \
             c in [ε/2, 2ε] continuously from step {} to {steps} (final c {last_c:.2e}, λ {:.3})",
            in_band_since.map_or("never".to_string(), |s| s.to_string()),
            params.dual
        ),
    )
}

// ---------------------------------------------------------------- 4

fn bc_limit() -> Outcome {
    let spec = EnvSpec::point_mass_2d();
    let hyper = AgentHyper {
        bc_alpha: 0.0,
        ..AgentHyper::desk()
    };
    let mut params = ParamSet::init(&spec, &hyper, &mut Rng::seed_from(41));
    let data = generate_medium(&spec, 42, 16).unwrap();
    let refs: Vec<_> = data.transitions.iter().collect();
    let batch = Batch::from_transitions(&refs).unwrap();
    let steps = 5000;
    for _ in 0..steps {
        actor_update(AgentKind::Td3Bc, &mut params, &hyper, &batch).unwrap();
    }
    let pi = params.policy(&batch.states).unwrap();
    let mse = (0..batch.len())
        .map(|i| pi.row(i).iter().zip(batch.actions.row(i)).map(|(a, b)| (a - b).powi(2)).sum::<f64>())
        .sum::<f64>()
        / batch.len() as f64;
    pass_if(mse < 1e-3, format!("α=0, 16 transitions, {steps} steps: mean squared action error {mse:.2e} (< 1e-3)"))
}

// ---------------------------------------------------------------- 5

fn replay_crowding() -> Outcome {
    let spec = EnvSpec::point_mass_2d();
    let data = generate_medium(&spec, 51, 50_000).unwrap();
    let hyper = AgentHyper::desk();
    let params = ParamSet::init(&spec, &hyper, &mut Rng::seed_from(52));
    let mut explorer = Explorer::new(&spec, Rng::seed_from(53));
    let online: Vec<_> = (0..1000).map(|_| explorer.step(&params, &hyper, false).unwrap()).collect();

    let mut uniform = ReplayBuffer::new(1_000_000, 1000, Regime::PreloadUniform).unwrap();
    uniform.preload(&data).unwrap();
    for t in &online {
        uniform.push(t.clone()).unwrap();
    }
    let mut rng = Rng::seed_from(54);
    let (batches, size) = (400, 256);
    let mut offline = 0usize;
    for _ in 0..batches {
        offline += uniform.sample(size, &mut rng).unwrap().iter().filter(|t| t.provenance == Provenance::Offline).count();
    }
    let n = (batches * size) as f64;
    let p = 50_000.0 / 51_000.0;
    let sigma = (p * (1.0 - p) / n).sqrt();
    let frac = offline as f64 / n;
    let z = (frac - p) / sigma;

    let mut fixed = ReplayBuffer::new(1_000_000, 1000, Regime::FixedRatio { ratio: 0.5 }).unwrap();
    fixed.preload(&data).unwrap();
    for t in &online {
        fixed.push(t.clone()).unwrap();
    }
    let exact = (0..100).all(|_| {
        let b = fixed.sample(256, &mut rng).unwrap();
        let off = b.iter().filter(|t| t.provenance == Provenance::Offline).count();
        off == 128 && b.len() - off == 128
    });
    pass_if(
        z.abs() <= 3.0 && exact,
        format!(
            "offline fraction {frac:.5} vs {p:.5} (z = {z:+.2}, |z| ≤ 3); fixed-ratio batches 128+128: {}",
            if exact { "all 100" } else { "violated" }
        ),
    )
}

// ---------------------------------------------------------------- 6-8

const SEEDS: u64 = 10;
const ALPHA: f64 = 0.05;

/// Per-seed outcomes of every configuration in the matrix.
struct SeedRow {
    td3: RunResult,
    bc: RunResult,
    scratch_last: f64,
    td3_online: RunResult,
    td3c_online: RunResult,
    td3_replay: RunResult,
}

fn last_score(r: &RunResult) -> f64 {
    r.records.last().unwrap().normalized_score
}

fn matrix() -> &'static Vec<SeedRow> {
    static CELL: OnceLock<Vec<SeedRow>> = OnceLock::new();
    CELL.get_or_init(|| {
        let started = Instant::now();
        let spec = EnvSpec::point_mass_2d();
        let hyper = AgentHyper::desk();
        let medium = generate_medium(&spec, 0, 50_000).unwrap();
        let replay_config = MediumReplayConfig {
            hyper: hyper.clone(),
            ..MediumReplayConfig::default()
        };
        let replay = generate_medium_replay(&spec, 12, 50_000, &replay_config).unwrap();
        eprintln!(
            "  datasets: medium score {:.1}, medium-replay score {:.1} ({:.0}s)",
            medium.meta.behavior.as_ref().unwrap().score_mean,
            replay.meta.behavior.as_ref().unwrap().score_mean,
            started.elapsed().as_secs_f64()
        );
        let base = ExperimentConfig {
            dataset: Some("pointmass2d-medium.bin".into()),
            pretrain_steps: 50_000,
            finetune_steps: 20_000,
            hyper,
            ..ExperimentConfig::default()
        };
        let with = |agent: AgentKind, regime: Regime| ExperimentConfig {
            finetune_agent: agent,
            regime,
            ..base.clone()
        };
        (0..SEEDS)
            .map(|seed| {
                let (params, records) = pretrain(&base, Some(&medium), seed).unwrap();
                let run = |agent, regime| finetune(&with(agent, regime), params.clone(), Some(&medium), seed, records.clone()).unwrap();
                let td3 = run(AgentKind::Td3, Regime::PreloadUniform);
                let bc = run(AgentKind::Td3Bc, Regime::PreloadUniform);
                let td3_online = run(AgentKind::Td3, Regime::OnlineOnly);
                let td3c_online = run(AgentKind::Td3C, Regime::OnlineOnly);
                let scratch = run_seed(&ExperimentConfig { pretrain_steps: 0, ..base.clone() }, Some(&medium), seed).unwrap();
                let td3_replay = run_seed(&base, Some(&replay), seed).unwrap();
                let row = SeedRow {
                    scratch_last: last_score(&scratch),
                    td3,
                    bc,
                    td3_online,
                    td3c_online,
                    td3_replay,
                };
                eprintln!(
                    "  seed {seed}: offline {:.1} | TD3 col {:.1} δ {:.1} last {:.1} | TD3-BC col {:.1} δ {:.1} | scratch last {:.1} | \
                     online TD3 col {:.1} δ {:.1}, TD3-C col {:.1} δ {:.1} | medium-replay offline {:.1} col {:.1} ({:.0}s)",
                    row.td3.offline_final,
                    row.td3.collapse_depth,
                    row.td3.delta,
                    last_score(&row.td3),
                    row.bc.collapse_depth,
                    row.bc.delta,
                    row.scratch_last,
                    row.td3_online.collapse_depth,
                    row.td3_online.delta,
                    row.td3c_online.collapse_depth,
                    row.td3c_online.delta,
                    row.td3_replay.offline_final,
                    row.td3_replay.collapse_depth,
                    started.elapsed().as_secs_f64()
                );
                row
            })
            .collect()
    })
}

fn column(f: impl Fn(&SeedRow) -> f64) -> Vec<f64> {
    matrix().iter().map(f).collect()
}

/// One ordering: medians compared by `median_ok`, seeds won by `won`,
/// one-sided sign test over the seeds.
fn ordering(
    name: &str,
    a: Vec<f64>,
    b: Vec<f64>,
    median_ok: impl Fn(f64, f64) -> bool,
    won: impl Fn(f64, f64) -> bool,
) -> Outcome {
    let (ma, mb) = (median(&a), median(&b));
    let wins = a.iter().zip(&b).filter(|(x, y)| won(**x, **y)).count();
    let p = sign_test_p(wins, a.len());
    pass_if(
        median_ok(ma, mb) && p < ALPHA,
        format!("{name}: medians {ma:.2} vs {mb:.2}, {wins}/{} seeds, sign test p = {p:.4}", a.len()),
    )
}

fn fig1_ordering() -> Vec<Outcome> {
    let gt = |x: f64, y: f64| x > y;
    vec![
        ordering(
            "(a) collapse_depth TD3 > TD3-BC",
            column(|r| r.td3.collapse_depth),
            column(|r| r.bc.collapse_depth),
            gt,
            gt,
        ),
        ordering("(b) δ TD3 > TD3-BC", column(|r| r.td3.delta), column(|r| r.bc.delta), gt, gt),
        ordering(
            "(c) score at step 20K: pretrained TD3 > no-pretraining TD3",
            column(|r| last_score(&r.td3)),
            column(|r| r.scratch_last),
            gt,
            gt,
        ),
    ]
}

fn fig3_stabilization() -> Outcome {
    let col_c = column(|r| r.td3c_online.collapse_depth);
    let col_t = column(|r| r.td3_online.collapse_depth);
    let d_c = column(|r| r.td3c_online.delta);
    let d_t = column(|r| r.td3_online.delta);
    let (mcc, mct, mdc, mdt) = (median(&col_c), median(&col_t), median(&d_c), median(&d_t));
    // A seed counts for TD3-C when it collapses no deeper than TD3 and keeps
    // at least 80% of TD3's improvement.
    let wins = (0..col_c.len())
        .filter(|&i| col_c[i] <= col_t[i] && d_c[i] >= 0.8 * d_t[i])
        .count();
    let p = sign_test_p(wins, col_c.len());
    pass_if(
        mcc <= mct && mdc >= 0.8 * mdt && p < ALPHA,
        format!(
            "OnlineOnly: median collapse TD3-C {mcc:.2} ≤ TD3 {mct:.2}; median δ TD3-C {mdc:.2} ≥ 0.8 × {mdt:.2}; \
             {wins}/{} seeds, sign test p = {p:.4}",
            col_c.len()
        ),
    )
}

fn diversity() -> Outcome {
    let gt = |x: f64, y: f64| x > y;
    ordering(
        "collapse_depth after medium > after medium-replay",
        column(|r| r.td3.collapse_depth),
        column(|r| r.td3_replay.collapse_depth),
        gt,
        gt,
    )
}

// ---------------------------------------------------------------- 9

const SHORT_RUN: &str = r#"{
  "experiment": {
    "env": "pointmass2d",
    "dataset": "data/medium.bin",
    "pretrain_steps": 1000,
    "finetune_steps": 1000,
    "eval_interval": 250,
    "eval_episodes": 5,
    "seeds": [0, 1],
    "regime": {"kind": "fixed_ratio", "ratio": 0.5},
    "finetune_agent": "TD3C",
    "hyper": {"hidden": 32, "batch_size": 128}
  },
  "dataset_recipe": {"recipe": "medium", "seed": 0, "size": 10000}
}"#;

fn csv_files(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out: Vec<_> = fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.extension().is_some_and(|x| x == "csv"))
        .map(|p| (p.file_name().unwrap().to_string_lossy().into_owned(), fs::read(&p).unwrap()))
        .collect();
    out.sort();
    out
}

fn determinism() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("short.json"), SHORT_RUN).unwrap();
    for out in ["first", "second"] {
        let status = Command::new(env!("CARGO_BIN_EXE_o2o"))
            .current_dir(dir.path())
            .args(["run", "--config", "short.json", "--out", out])
            .output()
            .unwrap();
        if !status.status.success() {
            return pass_if(false, format!("o2o run failed: {}", String::from_utf8_lossy(&status.stderr)));
        }
    }
    let (a, b) = (csv_files(&dir.path().join("first")), csv_files(&dir.path().join("second")));
    pass_if(
        a.len() == 2 && a == b,
        format!("two `o2o run` invocations, {} metrics CSVs, byte-identical: {}", a.len(), a == b),
    )
}

// ----------------------------------------------------------------

fn main() -> ExitCode {
    let wanted: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let selected = |id: &str| wanted.is_empty() || wanted.iter().any(|w| w == id);

    type Check = fn() -> Vec<Outcome>;
    let checks: [(&str, &str, Check); 9] = [
        ("1", "gradient fidelity", || vec![gradient_fidelity()]),
        ("2", "TD3-C with ε = ∞ is TD3", || vec![degeneracy()]),
        ("3", "dual dynamics", || vec![dual_dynamics()]),
        ("4", "TD3-BC limit", || vec![bc_limit()]),
        ("5", "replay crowding", || vec![replay_crowding()]),
        ("6", "finetuning ordering", fig1_ordering),
        ("7", "TD3-C stabilization", || vec![fig3_stabilization()]),
        ("8", "dataset diversity", || vec![diversity()]),
        ("9", "determinism", || vec![determinism()]),
    ];
    let mut failed = 0;
    for (id, name, check) in checks {
        if !selected(id) {
            continue;
        }
        let started = Instant::now();
        for (ok, detail) in check() {
            if !ok {
                failed += 1;
            }
            println!(
                "{} criterion {id} {name}: {detail} [{:.1}s]",
                if ok { "PASS" } else { "FAIL" },
                started.elapsed().as_secs_f64()
            );
        }
    }
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        println!("{failed} acceptance check(s) failed");
        ExitCode::FAILURE
    }
}
