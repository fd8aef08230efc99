//! Training dynamics on the default world: anchoring keeps gaps open, plain
//! self-rewarding collapses, and the auxiliary operations move quality the
//! right way.

use std::sync::Arc;

use tsr_lab::curation::{self, ComputeLedger, Curator, IterationState};
use tsr_lab::diagnostics::{self, RowContext};
use tsr_lab::dpo::{self, TrainConfig};
use tsr_lab::harness::{self, ExperimentConfig, Method, PolicyFamily};
use tsr_lab::judge::{Judge, JudgePreset};
use tsr_lab::policy::{GaussianPolicy, Policy, PolicySnapshot, Role};
use tsr_lab::rng;
use tsr_lab::world::{World, WorldConfig};

fn run(method: Method, iterations: usize, budget: u64, seed: u64) -> harness::RunLog {
    let dir = tempfile::tempdir().unwrap();
    let cfg = ExperimentConfig {
        method,
        seed,
        budget,
        iterations: Some(iterations),
        output_dir: dir.path().to_path_buf(),
        ..ExperimentConfig::default()
    };
    harness::run_experiment(&cfg).unwrap()
}

#[test]
fn anchored_rejection_widens_the_gap_on_the_same_prompts() {
    for seed in 0..3 {
        let tsr = run(Method::Tsr, 3, 6, seed);
        let sr = run(Method::Sr, 3, 6, seed);
        for rec in &tsr.curation {
            let d1 = rec.d1_score_gap.unwrap();
            // Same current samples, plain best/worst selection.
            assert!(d1 >= rec.sr_counterfactual_gap.unwrap(), "seed {seed} iter {}", rec.iteration);
        }
        let d1_at_2 = tsr.curation[2].d1_score_gap.unwrap();
        let sr_at_2 = sr.rows[2].mean_score_gap.unwrap();
        assert!(d1_at_2 > sr_at_2, "seed {seed}: D1 gap {d1_at_2} vs SR gap {sr_at_2}");
    }
}

#[test]
fn self_rewarding_gap_shrinks_and_cosine_rises() {
    for seed in 0..3 {
        let log = run(Method::Sr, 4, 4, seed);
        let cos: Vec<f64> = log.rows[..4].iter().map(|r| r.mean_latent_cosine.unwrap()).collect();
        let inversions = cos.windows(2).filter(|w| w[1] < w[0]).count();
        assert!(inversions <= 1, "seed {seed}: cosine trend {cos:?}");
        let (first, last) = (&log.rows[0], &log.rows[3]);
        assert!(last.mean_score_gap.unwrap() < first.mean_score_gap.unwrap());
        assert!(last.mean_latent_cosine.unwrap() > first.mean_latent_cosine.unwrap());
    }
}

struct Setup {
    world: World,
    judge: Judge,
    m0: PolicySnapshot,
}

fn setup(seed: u64) -> Setup {
    let cfg = ExperimentConfig {
        seed,
        ..ExperimentConfig::default()
    };
    let world = World::new(cfg.world.clone(), seed).unwrap();
    let (m0, _, _) = harness::initial_model(&cfg, &world).unwrap();
    let judge = Judge::preset(JudgePreset::SelfJudge, cfg.judge.noise_sd).unwrap();
    Setup { world, judge, m0 }
}

fn curator(s: &Setup, seed: u64) -> Curator<'_> {
    Curator {
        world: &s.world,
        judge: &s.judge,
        external_scorer: None,
        k: 7,
        retry_cap: 20,
        seed,
    }
}

#[test]
fn future_model_beats_the_current_one() {
    for seed in 0..3 {
        let s = setup(seed);
        let cur = curator(&s, seed);
        let mut st = IterationState::new(Arc::new(s.m0.clone()));
        let d1 = curation::phase1_anchored_rejection(&cur, &mut st, s.world.partition(0).unwrap()).unwrap();
        curation::train_future(&mut st, &d1, &TrainConfig::default()).unwrap();
        let held = s.world.heldout();
        let q_i = diagnostics::policy_true_quality(&s.world, st.current.policy(), held).unwrap();
        let q_f = diagnostics::policy_true_quality(&s.world, st.future.as_ref().unwrap().policy(), held).unwrap();
        assert!(q_f >= q_i, "seed {seed}: future {q_f} vs current {q_i}");
    }
}

#[test]
fn rejection_sampling_selects_better_than_average() {
    let s = setup(0);
    let cur = curator(&s, 0);
    let prompts = s.world.partition(0).unwrap();
    let mut ledger = ComputeLedger::default();
    let demos = curation::rejection_sampling_demos(&cur, &s.m0, prompts, 0, &mut ledger).unwrap();
    let demo_q: f64 = demos.iter().map(|(p, r)| s.world.true_quality(p, r).unwrap()).sum::<f64>() / demos.len() as f64;
    let raw = Curator { k: 1, ..cur };
    let draws = curation::rejection_sampling_demos(&raw, &s.m0, prompts, 0, &mut ledger).unwrap();
    let raw_q: f64 = draws.iter().map(|(p, r)| s.world.true_quality(p, r).unwrap()).sum::<f64>() / draws.len() as f64;
    assert!(demo_q > raw_q, "demos {demo_q} vs samples {raw_q}");
}

#[test]
fn initial_model_sits_near_the_teacher() {
    let s = setup(0);
    let q = diagnostics::policy_true_quality(&s.world, s.m0.policy(), s.world.heldout()).unwrap();
    // Teacher mean quality is half the scale; spread lowers the expectation.
    assert!(q > 1.5 && q < 2.6, "M_0 quality {q}");
}

#[test]
fn token_family_runs_end_to_end() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = ExperimentConfig {
        method: Method::Tsr,
        iterations: Some(1),
        output_dir: dir.path().to_path_buf(),
        ..ExperimentConfig::default()
    };
    cfg.policy.family = PolicyFamily::Token;
    cfg.world.partition_size = 40;
    cfg.k = 4;
    let log = harness::run_experiment(&cfg).unwrap();
    assert_eq!(log.ledger.dpo_runs, 2);
    let row = &log.rows[0];
    assert!(row.n_pairs > 0);
    assert!((-1.0..=1.0).contains(&row.mean_latent_cosine.unwrap()));
}

#[test]
fn token_direction_norm_matches_finite_differences() {
    let mut r = rng::stream(5, &[]);
    for _ in 0..20 {
        let (p, _, pair) = tsr_lab::verify::random_instance(true, &mut r);
        let got = diagnostics::direction_norm(&p, &pair.prompt, &pair.chosen.payload, &pair.rejected.payload).unwrap();
        let fd = dpo::finite_diff_grad(
            |theta| {
                let q = p.with_params(theta)?;
                Ok(q.log_prob(&pair.prompt, &pair.chosen.payload)? - q.log_prob(&pair.prompt, &pair.rejected.payload)?)
            },
            &p.params(),
            1e-5,
        )
        .unwrap();
        let want = fd.iter().map(|v| v * v).sum::<f64>().sqrt();
        assert!((got - want).abs() <= 1e-5 * want.max(1e-3), "{got} vs {want}");
    }
}

#[test]
fn metric_rows_respect_their_ranges() {
    let world = World::new(
        WorldConfig {
            partition_size: 5,
            ..WorldConfig::default()
        },
        9,
    )
    .unwrap();
    let judge = Judge::preset(JudgePreset::SelfJudge, 0.2).unwrap();
    let mut r = rng::stream(9, &[]);
    for i in 0..100 {
        let g = GaussianPolicy::init(2, true, 0.5, &mut r);
        let current = PolicySnapshot::new(Role::Current, 0, Policy::Gaussian(g));
        let cur = Curator {
            world: &world,
            judge: &judge,
            external_scorer: None,
            k: 3,
            retry_cap: 20,
            seed: i,
        };
        let mut ledger = ComputeLedger::default();
        let (pairs, _) = curation::build_sr_pairs(&cur, &current, world.partition(0).unwrap(), 0, &mut ledger).unwrap();
        let (trained, _) = dpo::dpo_train(&current, &pairs, &TrainConfig { epochs: 3, ..TrainConfig::default() }, None).unwrap();
        let ctx = RowContext {
            world: &world,
            method: "sr",
            seed: i,
            iteration: 0,
            ledger,
            beta: 0.1,
        };
        let row = diagnostics::snapshot_metrics(&ctx, current.policy(), Some(trained.policy()), &pairs).unwrap();
        let again = diagnostics::snapshot_metrics(&ctx, current.policy(), Some(trained.policy()), &pairs).unwrap();
        assert_eq!(row, again);
        assert!((-1.0..=1.0).contains(&row.mean_latent_cosine.unwrap()));
        assert!(row.mean_direction_norm.unwrap() >= 0.0);
        let w = row.mean_adaptive_weight.unwrap();
        assert!(w > 0.0 && w < 1.0);
        assert!(row.mean_score_gap.unwrap().is_finite());
        assert!((0.0..=5.0).contains(&row.mean_policy_true_quality));
    }
}
