//! Self-contained check suites behind `tsr-lab verify`: gradient exactness,
//! adaptive-weight anchoring, the directional-guidance bound and the
//! selection rules against brute-force oracles.

use std::fmt;
use std::time::Instant;

use rand::Rng;
use rand_distr::StandardNormal;

use crate::curation::{self, Phase, Pick, PreferencePair};
use crate::diagnostics::{self, RelaxedToken};
use crate::dpo;
use crate::error::Result;
use crate::linalg::{self, norm};
use crate::policy::{GaussianPolicy, Payload, Policy, Response, Role, TokenPolicy};
use crate::rng::{self, LabRng};
use crate::world::{Pool, Prompt, World, WorldConfig};

#[derive(Debug, Clone, PartialEq)]
pub struct Check {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

impl Check {
    fn new(name: &str, passed: bool, detail: String) -> Self {
        Self {
            name: name.into(),
            passed,
            detail,
        }
    }

    fn from_result(name: &str, r: Result<(bool, String)>) -> Self {
        match r {
            Ok((passed, detail)) => Self::new(name, passed, detail),
            Err(e) => Self::new(name, false, format!("error: {e}")),
        }
    }
}

impl fmt::Display for Check {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let tag = if self.passed { "PASS" } else { "FAIL" };
        write!(f, "[{tag}] {}: {}", self.name, self.detail)
    }
}

fn normal_vec(n: usize, sd: f64, r: &mut LabRng) -> Vec<f64> {
    (0..n).map(|_| sd * r.sample::<f64, _>(StandardNormal)).collect()
}

fn unit_prompt(id: u64, d: usize, r: &mut LabRng) -> Prompt {
    let mut f = normal_vec(d, 1.0, r);
    let n = norm(&f).max(1e-12);
    f.iter_mut().for_each(|v| *v /= n);
    Prompt {
        id,
        features: f,
        pool: Pool::Iteration(0),
    }
}

fn random_gaussian(d: usize, learn_scale: bool, r: &mut LabRng) -> GaussianPolicy {
    let w = normal_vec(d * d, 0.5, r);
    let ls = (0..d).map(|_| r.random_range(-0.5..0.5)).collect();
    GaussianPolicy::new(d, w, ls, learn_scale).expect("valid shape")
}

fn random_tokens(v: usize, l: usize, r: &mut LabRng) -> Vec<u32> {
    (0..l).map(|_| r.random_range(0..v as u32)).collect()
}

fn bare(payload: Payload) -> Response {
    let latent = match &payload {
        Payload::Latent(h) => h.clone(),
        Payload::Tokens(_) => Vec::new(),
    };
    Response {
        payload,
        latent,
        source: Role::Current,
    }
}

fn pair(prompt: Prompt, w: Payload, l: Payload) -> PreferencePair {
    PreferencePair::new(prompt, bare(w), bare(l), None, None, 0, Phase::SelfRewarding)
}

/// A random `(policy, reference, pair)` instance of either family.
pub fn random_instance(token: bool, r: &mut LabRng) -> (Policy, Policy, PreferencePair) {
    if token {
        let (d, v, l) = (r.random_range(2..5), r.random_range(2..5), r.random_range(1..4));
        let p = Policy::Token(TokenPolicy::init(d, v, l, 0.5, r));
        let q = Policy::Token(TokenPolicy::init(d, v, l, 0.5, r));
        let x = unit_prompt(0, d, r);
        let yw = random_tokens(v, l, r);
        let yl = random_tokens(v, l, r);
        (p, q, pair(x, Payload::Tokens(yw), Payload::Tokens(yl)))
    } else {
        let d = r.random_range(1..6);
        let p = Policy::Gaussian(random_gaussian(d, true, r));
        let q = Policy::Gaussian(random_gaussian(d, true, r));
        let x = unit_prompt(0, d, r);
        let hw = normal_vec(d, 1.0, r);
        let hl = normal_vec(d, 1.0, r);
        (p, q, pair(x, Payload::Latent(hw), Payload::Latent(hl)))
    }
}

fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    norm(&linalg::sub(a, b)) / norm(a).max(norm(b)).max(1e-300)
}

/// Analytic DPO gradient against central finite differences of the loss.
pub fn gradient_exactness(cases: usize, seed: u64) -> Check {
    let t0 = Instant::now();
    let run = || -> Result<(bool, String)> {
        let mut worst: f64 = 0.0;
        let beta = 0.1;
        for (fam, token) in [("gaussian", false), ("token", true)] {
            let mut r = rng::stream(seed, &[900, token as u64]);
            for _ in 0..cases {
                let (p, q, pr) = random_instance(token, &mut r);
                let g = dpo::dpo_grad_decomposed(&p, &q, &pr, beta)?;
                let batch = [pr];
                let fd = dpo::finite_diff_grad(
                    |theta| dpo::dpo_loss(&p.with_params(theta)?, &q, &batch, beta),
                    &p.params(),
                    1e-5,
                )?;
                let e = rel_err(&g.full_grad, &fd);
                if !(e <= 1e-5) {
                    return Ok((false, format!("{fam} instance with relative error {e:.3e}")));
                }
                worst = worst.max(e);
            }
        }
        let secs = t0.elapsed().as_secs_f64();
        Ok((
            secs < 30.0,
            format!("{cases} instances per family, worst relative error {worst:.2e}, {secs:.2}s"),
        ))
    };
    Check::from_result("gradient exactness", run())
}

/// Weight `0.5` at `policy == ref` and strictly inside `(0, 1)` otherwise.
pub fn adaptive_weight_anchor(cases: usize, seed: u64) -> Check {
    let run = || -> Result<(bool, String)> {
        let mut r = rng::stream(seed, &[901]);
        let mut worst_half: f64 = 0.0;
        let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
        for i in 0..cases {
            let (p, q, pr) = random_instance(i % 2 == 1, &mut r);
            let beta = r.random_range(0.01..1.0);
            let same = dpo::dpo_grad_decomposed(&p, &p, &pr, beta)?;
            worst_half = worst_half.max((same.adaptive_weight - 0.5).abs());
            let w = dpo::dpo_grad_decomposed(&p, &q, &pr, beta)?.adaptive_weight;
            lo = lo.min(w);
            hi = hi.max(w);
        }
        Ok((
            worst_half <= 1e-12 && lo > 0.0 && hi < 1.0,
            format!("{cases} instances, max |w - 0.5| at policy = ref {worst_half:.1e}, range [{lo:.3e}, {hi:.6}]"),
        ))
    };
    Check::from_result("adaptive weight anchor", run())
}

pub const BOUND_GRID: usize = 16;
pub const VANISHING_EPSILONS: [f64; 7] = [1e-1, 3e-2, 1e-2, 3e-3, 1e-3, 3e-4, 1e-4];

/// The directional-guidance bound on random pairs, its tightness for a
/// linear mean, and the log-log slope of the vanishing curve.
pub fn directional_bound(cases: usize, seed: u64) -> Check {
    let run = || -> Result<(bool, String)> {
        let mut r = rng::stream(seed, &[902]);
        let mut ok_cont = 0usize;
        let mut ok_tok = 0usize;
        let mut worst_gap: f64 = 0.0;
        for i in 0..cases {
            let d = r.random_range(1..6);
            let g = random_gaussian(d, true, &mut r);
            let x = unit_prompt(i as u64, d, &mut r);
            let hw = normal_vec(d, 1.5, &mut r);
            let hl = normal_vec(d, 1.5, &mut r);
            if diagnostics::lipschitz_bound_check(&g, &x, &hw, &hl, BOUND_GRID)?.satisfied {
                ok_cont += 1;
            }

            let lin = GaussianPolicy::isotropic(normal_vec(d * d, 0.5, &mut r), r.random_range(-0.5..0.5), false);
            let b = diagnostics::lipschitz_bound_check(&lin, &x, &hw, &hl, 2)?;
            worst_gap = worst_gap.max((b.lhs - b.bound_value).abs() / b.bound_value.max(1.0));

            let (td, v, l) = (r.random_range(2..5), r.random_range(2..5), r.random_range(1..4));
            let t = TokenPolicy::init(td, v, l, 0.5, &mut r);
            let tx = unit_prompt(i as u64, td, &mut r);
            let ww = t.one_hot(&random_tokens(v, l, &mut r))?;
            let wl = t.one_hot(&random_tokens(v, l, &mut r))?;
            if diagnostics::lipschitz_bound_check(&RelaxedToken(&t), &tx, &ww, &wl, BOUND_GRID)?.satisfied {
                ok_tok += 1;
            }
        }

        let world = World::new(WorldConfig::default(), seed)?;
        let mut slopes_g = Vec::new();
        let mut slopes_t = Vec::new();
        for (i, x) in world.heldout().iter().take(20).enumerate() {
            let d = world.latent_dim();
            let lin = Policy::Gaussian(GaussianPolicy::isotropic(normal_vec(d * d, 0.5, &mut r), -0.2, false));
            let base = Response::new(&lin, x, Payload::Latent(normal_vec(d, 1.0, &mut r)), Role::Current)?;
            let c = diagnostics::gradient_vanishing_curve(&world, &lin, x, &base, &VANISHING_EPSILONS, &mut r)?;
            slopes_g.push(c.slope.unwrap_or(f64::NAN));

            let tok = Policy::Token(TokenPolicy::init(d, 4, 3, 0.5, &mut rng::stream(seed, &[903, i as u64])));
            let y = Payload::Tokens(random_tokens(4, 3, &mut r));
            let base = Response::new(&tok, x, y, Role::Current)?;
            let c = diagnostics::gradient_vanishing_curve(&world, &tok, x, &base, &VANISHING_EPSILONS, &mut r)?;
            slopes_t.push(c.slope.unwrap_or(f64::NAN));
        }
        let dev_g = slopes_g.iter().map(|s| (s - 1.0).abs()).fold(0.0, f64::max);
        let in_t = slopes_t.iter().all(|s| (0.8..=1.2).contains(s));
        let (tmin, tmax) = slopes_t
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), s| (a.min(*s), b.max(*s)));
        let passed = ok_cont == cases && ok_tok == cases && worst_gap <= 1e-6 && dev_g <= 1e-6 && in_t;
        Ok((
            passed,
            format!(
                "bound held {ok_cont}/{cases} continuous, {ok_tok}/{cases} relaxed-token; linear-mean \
                 |lhs - bound| <= {worst_gap:.1e}; slope |s - 1| <= {dev_g:.1e} (gaussian), \
                 [{tmin:.4}, {tmax:.4}] (token)"
            ),
        ))
    };
    Check::from_result("directional guidance bound", run())
}

/// The continuous-mode bound on `cases` random pairs, one row per pair, for
/// `bound_check.csv`.
pub fn bound_sweep(cases: usize, seed: u64) -> Result<Vec<diagnostics::BoundCheck>> {
    let mut r = rng::stream(seed, &[905]);
    (0..cases)
        .map(|i| {
            let d = r.random_range(1..6);
            let g = random_gaussian(d, true, &mut r);
            let x = unit_prompt(i as u64, d, &mut r);
            let hw = normal_vec(d, 1.5, &mut r);
            let hl = normal_vec(d, 1.5, &mut r);
            diagnostics::lipschitz_bound_check(&g, &x, &hw, &hl, BOUND_GRID)
        })
        .collect()
}

// ---------------------------------------------------------------------------
// Brute-force selection oracles
// ---------------------------------------------------------------------------

/// Index `i` with `s[i] >= s[j]` for all `j` and `s[j] < s[i]` for all `j < i`.
fn oracle_first_max(s: &[f64]) -> Option<usize> {
    (0..s.len()).find(|&i| s.iter().all(|v| s[i] >= *v) && s[..i].iter().all(|v| *v < s[i]))
}

fn oracle_first_min(s: &[f64]) -> Option<usize> {
    (0..s.len()).find(|&i| s.iter().all(|v| s[i] <= *v) && s[..i].iter().all(|v| *v > s[i]))
}

/// Candidate pool entry: (from anchor, index, score).
type Candidate = (bool, usize, f64);

fn oracle_phase1(s_i: &[f64], s_0: &[f64]) -> Option<(usize, Pick)> {
    let pool: Vec<Candidate> = s_i
        .iter()
        .enumerate()
        .map(|(j, v)| (false, j, *v))
        .chain(s_0.iter().enumerate().map(|(j, v)| (true, j, *v)))
        .collect();
    let chosen = oracle_first_max(s_i)?;
    let min_i = pool.iter().filter(|c| !c.0).map(|c| c.2).fold(f64::INFINITY, f64::min);
    let min_0 = pool.iter().filter(|c| c.0).map(|c| c.2).fold(f64::INFINITY, f64::min);
    let from_anchor = min_0 < min_i;
    let target = if from_anchor { min_0 } else { min_i };
    let (_, j, _) = pool.iter().find(|c| c.0 == from_anchor && c.2 == target)?;
    Some((chosen, if from_anchor { Pick::Anchor(*j) } else { Pick::Current(*j) }))
}

fn oracle_phase2(s_f: &[f64], s_i: &[f64]) -> Option<Pick> {
    let best_f = s_f.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let best_i = s_i.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if s_f.is_empty() || s_i.is_empty() {
        return None;
    }
    if best_f > best_i {
        s_f.iter().position(|v| *v == best_f).map(Pick::Future)
    } else {
        s_i.iter().position(|v| *v == best_i).map(Pick::Current)
    }
}

fn oracle_sr(s: &[f64]) -> Option<(usize, usize)> {
    let hi = oracle_first_max(s)?;
    let lo = oracle_first_min(s)?;
    if s[hi] > s[lo] {
        Some((hi, lo))
    } else {
        None
    }
}

fn oracle_spin_fair(label: f64, s: &[f64]) -> Option<usize> {
    let lo = oracle_first_min(s)?;
    if label > s[lo] {
        Some(lo)
    } else {
        None
    }
}

fn random_scores(k: usize, r: &mut LabRng) -> Vec<f64> {
    // Coarse grid so ties are frequent.
    if r.random_bool(0.5) {
        (0..k).map(|_| r.random_range(0..6) as f64 * 0.5).collect()
    } else {
        (0..k).map(|_| r.random_range(0.0..5.0)).collect()
    }
}

/// Every selection rule against its brute-force oracle.
pub fn selection_oracles(cases: usize, seed: u64) -> Check {
    let mut r = rng::stream(seed, &[904]);
    let mut mismatches = Vec::new();
    let mut ties = 0usize;
    for case in 0..cases {
        let k = r.random_range(1..8);
        let s_i = random_scores(k, &mut r);
        let s_0 = random_scores(k, &mut r);
        let s_f = random_scores(k, &mut r);
        let label = r.random_range(0..11) as f64 * 0.5;
        let has_tie = |s: &[f64]| (1..s.len()).any(|i| s[..i].contains(&s[i]));
        if has_tie(&s_i) || has_tie(&s_0) {
            ties += 1;
        }
        let got1 = curation::select_phase1(&s_i, &s_0).map(|s| (s.chosen, s.rejected));
        if got1 != oracle_phase1(&s_i, &s_0) {
            mismatches.push(format!("phase 1 case {case}"));
        }
        if curation::select_phase2(&s_f, &s_i) != oracle_phase2(&s_f, &s_i) {
            mismatches.push(format!("phase 2 case {case}"));
        }
        if curation::select_sr(&s_i) != oracle_sr(&s_i) {
            mismatches.push(format!("sr case {case}"));
        }
        if curation::select_spin_fair(label, &s_i) != oracle_spin_fair(label, &s_i) {
            mismatches.push(format!("spin-fair case {case}"));
        }
        if curation::select_best(&s_i) != oracle_first_max(&s_i) {
            mismatches.push(format!("rejection sampling case {case}"));
        }
    }
    let detail = if mismatches.is_empty() {
        format!("{cases} configurations x 5 rules exact, {ties} with ties")
    } else {
        format!("{} mismatches, first: {}", mismatches.len(), mismatches[0])
    };
    Check::new("selection oracles", mismatches.is_empty(), detail)
}

/// All suites at `cases` random instances (gradient checks use a tenth,
/// with at least 100).
pub fn run_all(cases: usize, seed: u64) -> Vec<Check> {
    vec![
        gradient_exactness((cases / 10).max(100), seed),
        adaptive_weight_anchor(cases.max(1) * 10, seed),
        directional_bound(cases, seed),
        selection_oracles(cases, seed),
    ]
}
