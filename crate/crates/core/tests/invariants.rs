//! Property tests against independent closed-form and enumeration oracles.

use std::sync::Arc;

use proptest::prelude::*;
use rand::Rng;
use tsr_lab::curation::{self, Phase, Pick, PreferencePair};
use tsr_lab::dpo;
use tsr_lab::judge::{Judge, JudgeMode};
use tsr_lab::policy::{GaussianPolicy, Payload, Policy, PolicySnapshot, Response, Role, TokenPolicy};
use tsr_lab::rng;
use tsr_lab::verify;
use tsr_lab::world::{all_sequences, Pool, Prompt, World, WorldConfig, SCORE_MAX};

fn prompt(features: Vec<f64>) -> Prompt {
    Prompt {
        id: 0,
        features,
        pool: Pool::Iteration(0),
    }
}

fn latent(h: Vec<f64>) -> Response {
    Response {
        latent: h.clone(),
        payload: Payload::Latent(h),
        source: Role::Current,
    }
}

/// (dim, weights, log_sd, x, h_w, h_l) for a small diagonal Gaussian.
fn gaussian_case() -> impl Strategy<Value = (usize, Vec<f64>, Vec<f64>, Vec<f64>, Vec<f64>, Vec<f64>)> {
    (1usize..5).prop_flat_map(|d| {
        (
            Just(d),
            prop::collection::vec(-1.0..1.0f64, d * d),
            prop::collection::vec(-1.0..1.0f64, d),
            prop::collection::vec(-1.0..1.0f64, d),
            prop::collection::vec(-2.0..2.0f64, d),
            prop::collection::vec(-2.0..2.0f64, d),
        )
    })
}

/// Hand-written diagonal Gaussian log density, independent of the library.
fn oracle_log_density(w: &[f64], ls: &[f64], x: &[f64], h: &[f64]) -> f64 {
    let d = x.len();
    (0..d)
        .map(|j| {
            let mu: f64 = (0..d).map(|k| w[j * d + k] * x[k]).sum();
            let z = (h[j] - mu) / ls[j].exp();
            -0.5 * z * z - ls[j] - 0.5 * (2.0 * std::f64::consts::PI).ln()
        })
        .sum()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn gaussian_log_density_matches_closed_form((d, w, ls, x, hw, _hl) in gaussian_case()) {
        let g = GaussianPolicy::new(d, w.clone(), ls.clone(), true).unwrap();
        let got = g.log_prob(&x, &hw).unwrap();
        prop_assert!((got - oracle_log_density(&w, &ls, &x, &hw)).abs() <= 1e-10);
    }

    #[test]
    fn gaussian_mean_direction_is_precision_weighted_difference((d, w, ls, x, hw, hl) in gaussian_case()) {
        let p = Policy::Gaussian(GaussianPolicy::new(d, w, ls.clone(), false).unwrap());
        let got = dpo::direction(&p, &prompt(x.clone()), &Payload::Latent(hw.clone()), &Payload::Latent(hl.clone())).unwrap();
        for j in 0..d {
            let prec = (-2.0 * ls[j]).exp();
            for k in 0..d {
                let want = prec * (hw[j] - hl[j]) * x[k];
                prop_assert!((got[j * d + k] - want).abs() <= 1e-10 * want.abs().max(1.0));
            }
        }
    }

    #[test]
    fn loss_matches_hand_computed_reward(
        (d, w, ls, x, hw, hl) in gaussian_case(),
        wr in prop::collection::vec(-1.0..1.0f64, 16),
        beta in 0.01..1.0f64,
    ) {
        let lr = vec![0.0; d];
        let wr = wr[..d * d].to_vec();
        let p = Policy::Gaussian(GaussianPolicy::new(d, w.clone(), ls.clone(), true).unwrap());
        let q = Policy::Gaussian(GaussianPolicy::new(d, wr.clone(), lr.clone(), true).unwrap());
        let pair = PreferencePair::new(prompt(x.clone()), latent(hw.clone()), latent(hl.clone()), None, None, 0, Phase::SelfRewarding);
        let r_hat = beta * ((oracle_log_density(&w, &ls, &x, &hw) - oracle_log_density(&w, &ls, &x, &hl))
            - (oracle_log_density(&wr, &lr, &x, &hw) - oracle_log_density(&wr, &lr, &x, &hl)));
        let want = (1.0 + (-r_hat).exp()).ln();
        let got = dpo::dpo_loss(&p, &q, &[pair], beta).unwrap();
        prop_assert!((got - want).abs() <= 1e-9 * want.max(1.0));
    }

    #[test]
    fn gradient_factorizes_into_weight_times_direction(seed in any::<u64>(), token in any::<bool>(), beta in 0.01..1.0f64) {
        let (p, q, pair) = verify::random_instance(token, &mut rng::stream(seed, &[]));
        let g = dpo::dpo_grad_decomposed(&p, &q, &pair, beta).unwrap();
        prop_assert!(g.adaptive_weight > 0.0 && g.adaptive_weight < 1.0);
        for (f, dv) in g.full_grad.iter().zip(&g.direction) {
            prop_assert!((f + beta * g.adaptive_weight * dv).abs() <= 1e-12 * dv.abs().max(1.0));
        }
    }

    #[test]
    fn weight_is_one_half_at_the_reference(seed in any::<u64>(), token in any::<bool>(), beta in 0.01..1.0f64) {
        let (p, _, pair) = verify::random_instance(token, &mut rng::stream(seed, &[]));
        let g = dpo::dpo_grad_decomposed(&p, &p, &pair, beta).unwrap();
        prop_assert_eq!(g.reward.r_hat, 0.0);
        prop_assert_eq!(g.adaptive_weight, 0.5);
        let loss = dpo::dpo_loss(&p, &p, &[pair], beta).unwrap();
        prop_assert!((loss - std::f64::consts::LN_2).abs() <= 1e-12);
    }

    #[test]
    fn reference_changes_weight_but_not_direction(seed in any::<u64>(), token in any::<bool>()) {
        let mut r = rng::stream(seed, &[]);
        let (p, q1, pair) = verify::random_instance(token, &mut r);
        let shifted: Vec<f64> = q1.params().iter().map(|v| v + r.random_range(-0.5..0.5)).collect();
        let q2 = q1.with_params(&shifted).unwrap();
        let a = dpo::dpo_grad_decomposed(&p, &q1, &pair, 0.1).unwrap();
        let b = dpo::dpo_grad_decomposed(&p, &q2, &pair, 0.1).unwrap();
        prop_assert_eq!(a.direction, b.direction);
    }

    #[test]
    fn swapping_sides_negates_the_reward(seed in any::<u64>(), token in any::<bool>()) {
        let (p, q, pair) = verify::random_instance(token, &mut rng::stream(seed, &[]));
        let a = dpo::implicit_reward(&p, &q, &pair, 0.1).unwrap();
        let b = dpo::implicit_reward(&p, &q, &pair.swapped(), 0.1).unwrap();
        prop_assert!((a.r_hat + b.r_hat).abs() <= 1e-12 * a.r_hat.abs().max(1.0));
    }

    #[test]
    fn token_probabilities_sum_to_one(v in 2usize..6, l in 1usize..4, d in 2usize..5, seed in any::<u64>()) {
        let mut r = rng::stream(seed, &[]);
        let t = TokenPolicy::init(d, v, l, 1.0, &mut r);
        let x: Vec<f64> = (0..d).map(|_| r.random_range(-1.0..1.0)).collect();
        let total: f64 = all_sequences(v, l).map(|s| t.log_prob(&x, &s).unwrap().exp()).sum();
        prop_assert!((total - 1.0).abs() <= 1e-10);
    }

    #[test]
    fn judge_scores_stay_in_range(
        fidelity in 0.0..=1.0f64,
        noise in 0.0..5.0f64,
        h in prop::collection::vec(-20.0..20.0f64, 2),
        seed in any::<u64>(),
    ) {
        let world = World::new(WorldConfig::default(), 1).unwrap();
        let scorer = PolicySnapshot::new(Role::Current, 0, Policy::Gaussian(GaussianPolicy::isotropic(vec![0.0; 4], -1.0, true)));
        let mut r = rng::stream(seed, &[]);
        for mode in [JudgeMode::SelfCoupled, JudgeMode::ExternalFixed] {
            let judge = Judge::new(mode, fidelity, noise).unwrap();
            let s = judge.score(&scorer, &world, &world.prompts()[0], &latent(h.clone()), &mut r).unwrap();
            prop_assert!((0.0..=SCORE_MAX).contains(&s));
        }
    }

    #[test]
    fn paraphrase_keeps_quality_within_tolerance(
        eps in 1e-6..1e-2f64,
        h in prop::collection::vec(-3.0..3.0f64, 2),
        seed in any::<u64>(),
    ) {
        let world = World::new(WorldConfig::default(), seed % 8).unwrap();
        let enc = Policy::Gaussian(GaussianPolicy::isotropic(vec![0.0; 4], 0.0, true));
        let x = &world.heldout()[(seed % 50) as usize];
        let y = latent(h);
        let p = world.paraphrase(x, &y, eps, &enc, &mut rng::stream(seed, &[])).unwrap();
        let dq = (world.true_quality(x, &p).unwrap() - world.true_quality(x, &y).unwrap()).abs();
        prop_assert!(dq <= world.paraphrase_tolerance(eps));
        let moved: f64 = p.latent.iter().zip(&y.latent).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
        prop_assert!(moved <= eps * (1.0 + 1e-9));
    }

    #[test]
    fn phase_one_rejected_is_the_global_minimum(
        s_i in prop::collection::vec(0u8..6, 1..8),
        s_0 in prop::collection::vec(0u8..6, 1..8),
    ) {
        let s_i: Vec<f64> = s_i.into_iter().map(f64::from).collect();
        let s_0: Vec<f64> = s_0.into_iter().map(f64::from).collect();
        let sel = curation::select_phase1(&s_i, &s_0).unwrap();
        let global_min = s_i.iter().chain(&s_0).cloned().fold(f64::INFINITY, f64::min);
        let rejected = match sel.rejected {
            Pick::Current(j) => s_i[j],
            Pick::Anchor(j) => s_0[j],
            Pick::Future(_) => unreachable!("phase 1 never picks the future model"),
        };
        prop_assert_eq!(rejected, global_min);
        prop_assert_eq!(s_i[sel.chosen], s_i.iter().cloned().fold(f64::NEG_INFINITY, f64::max));
    }

    #[test]
    fn phase_two_chosen_is_never_worse(
        s_f in prop::collection::vec(0u8..6, 1..8),
        s_i in prop::collection::vec(0u8..6, 1..8),
    ) {
        let s_f: Vec<f64> = s_f.into_iter().map(f64::from).collect();
        let s_i: Vec<f64> = s_i.into_iter().map(f64::from).collect();
        let best_i = s_i.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let chosen = match curation::select_phase2(&s_f, &s_i).unwrap() {
            Pick::Future(j) => { prop_assert!(s_f[j] > best_i); s_f[j] }
            Pick::Current(j) => s_i[j],
            Pick::Anchor(_) => unreachable!("phase 2 never picks the anchor"),
        };
        prop_assert!(chosen >= best_i);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn snapshots_round_trip_bit_exactly(seed in any::<u64>(), token in any::<bool>()) {
        let (p, _, _) = verify::random_instance(token, &mut rng::stream(seed, &[]));
        let snap = PolicySnapshot::new(Role::Future, seed % 100, p);
        let back = PolicySnapshot::from_snapshot_str(&snap.to_snapshot_string()).unwrap();
        prop_assert_eq!(back.params(), snap.params());
        prop_assert_eq!(back.role(), snap.role());
    }
}

/// `E[grad log pi(y|x)] = 0` within three standard errors per coordinate.
#[test]
fn score_function_has_zero_mean() {
    let n = 10_000;
    let mut r = rng::stream(7, &[]);
    let gauss = Policy::Gaussian(GaussianPolicy::new(2, vec![0.5, -0.2, 0.1, 0.8], vec![-0.3, 0.2], true).unwrap());
    let token = Policy::Token(TokenPolicy::init(2, 3, 2, 1.0, &mut r));
    let x = prompt(vec![0.6, -0.8]);
    for policy in [gauss, token] {
        let mut sum = vec![0.0; policy.param_count()];
        let mut sq = vec![0.0; policy.param_count()];
        for _ in 0..n {
            let y = policy.sample(&x, &mut r);
            for (j, g) in policy.log_prob_grad(&x, &y).unwrap().into_iter().enumerate() {
                sum[j] += g;
                sq[j] += g * g;
            }
        }
        for j in 0..sum.len() {
            let mean = sum[j] / n as f64;
            let se = ((sq[j] / n as f64 - mean * mean).max(0.0) / n as f64).sqrt();
            assert!(mean.abs() <= 3.0 * se + 1e-12, "{} coordinate {j}: mean {mean}, se {se}", policy.family());
        }
    }
}

/// The anchor handed to every iteration is the same allocation with the same
/// parameters it started with.
#[test]
fn anchor_is_stable_across_iterations() {
    let m0 = PolicySnapshot::new(Role::Initial, 0, Policy::Gaussian(GaussianPolicy::isotropic(vec![0.1; 4], 0.0, true)));
    let anchor = Arc::new(m0.clone());
    let mut st = curation::IterationState::new(anchor.clone());
    for v in 1..4 {
        let next = PolicySnapshot::new(Role::Current, v, Policy::Gaussian(GaussianPolicy::isotropic(vec![v as f64; 4], 0.0, true)));
        st = st.advance(next);
        assert!(Arc::ptr_eq(&st.anchor, &anchor));
        assert_eq!(st.anchor.params(), m0.params());
    }
}
