//! Pair-level health metrics and the gradient-collapse checks.
//!
//! The bound machinery works on a latent-parameterized view of the score
//! function `g(h) = grad_theta log pi(h | x)`. Gaussian policies are already
//! parameterized by `h`; token policies are viewed through their soft
//! one-hot relaxation.

use std::io::Write;

use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::curation::{ComputeLedger, PreferencePair};
use crate::dpo;
use crate::error::{LabError, Result};
use crate::linalg::{self, norm};
use crate::policy::{GaussianPolicy, Payload, Policy, Response, TokenPolicy};
use crate::rng::{self, tag, LabRng};
use crate::world::{all_sequences, Prompt, World, SCORE_MAX};

pub const BOUND_TOLERANCE: f64 = 0.05;
pub const POWER_ITERATIONS: usize = 50;
pub const POWER_TOLERANCE: f64 = 1e-8;
/// Jacobian step, relative to `max(|h|, 1)`.
pub const JACOBIAN_STEP: f64 = 1e-5;

/// Sequences per prompt above which token true quality is estimated by
/// sampling rather than enumeration.
const ENUMERATION_LIMIT: usize = 4096;
const QUALITY_SAMPLES: usize = 256;

fn nonempty(pairs: &[PreferencePair], what: &str) -> Result<()> {
    if pairs.is_empty() {
        return Err(LabError::Usage(format!("{what} needs at least one pair")));
    }
    Ok(())
}

/// Mean `q*(chosen) - q*(rejected)` under the world oracle.
pub fn score_gap(pairs: &[PreferencePair], world: &World) -> Result<f64> {
    nonempty(pairs, "score_gap")?;
    let gaps: Vec<f64> = pairs
        .par_iter()
        .map(|p| {
            Ok(world.true_quality(&p.prompt, &p.chosen)? - world.true_quality(&p.prompt, &p.rejected)?)
        })
        .collect::<Result<_>>()?;
    Ok(gaps.iter().sum::<f64>() / pairs.len() as f64)
}

fn pair_cosine(policy: &Policy, p: &PreferencePair) -> Result<f64> {
    let a = policy.latent(&p.prompt, &p.chosen.payload)?;
    let b = policy.latent(&p.prompt, &p.rejected.payload)?;
    linalg::cosine(&a, &b).ok_or_else(|| {
        LabError::Numerical(format!("zero-norm latent for prompt {}", p.prompt.id))
    })
}

/// Mean cosine between chosen and rejected latents under `policy`.
pub fn latent_cosine(pairs: &[PreferencePair], policy: &Policy) -> Result<f64> {
    nonempty(pairs, "latent_cosine")?;
    let c: Vec<f64> = pairs
        .par_iter()
        .map(|p| pair_cosine(policy, p))
        .collect::<Result<_>>()?;
    Ok(c.iter().sum::<f64>() / pairs.len() as f64)
}

/// `|grad log pi(y_w|x) - grad log pi(y_l|x)|`.
pub fn direction_norm(policy: &Policy, prompt: &Prompt, chosen: &Payload, rejected: &Payload) -> Result<f64> {
    Ok(norm(&dpo::direction(policy, prompt, chosen, rejected)?))
}

fn mean_direction_norm(pairs: &[PreferencePair], policy: &Policy) -> Result<f64> {
    nonempty(pairs, "direction_norm")?;
    let n: Vec<f64> = pairs
        .par_iter()
        .map(|p| direction_norm(policy, &p.prompt, &p.chosen.payload, &p.rejected.payload))
        .collect::<Result<_>>()?;
    Ok(n.iter().sum::<f64>() / pairs.len() as f64)
}

/// Mean `1 - sigmoid(r_hat)` of `policy` against `reference`.
pub fn mean_adaptive_weight(
    pairs: &[PreferencePair],
    policy: &Policy,
    reference: &Policy,
    beta: f64,
) -> Result<f64> {
    nonempty(pairs, "adaptive weight")?;
    let w: Vec<f64> = pairs
        .par_iter()
        .map(|p| {
            dpo::implicit_reward(policy, reference, p, beta).map(|r| linalg::sigmoid(-r.r_hat))
        })
        .collect::<Result<_>>()?;
    Ok(w.iter().sum::<f64>() / pairs.len() as f64)
}

// ---------------------------------------------------------------------------
// Latent-parameterized score functions
// ---------------------------------------------------------------------------

/// `h -> grad_theta log pi(h | x)` with a continuous `h`.
pub trait LatentScore: Sync {
    fn latent_len(&self) -> usize;
    fn score_grad(&self, x: &[f64], h: &[f64]) -> Result<Vec<f64>>;
}

impl LatentScore for GaussianPolicy {
    fn latent_len(&self) -> usize {
        self.dim()
    }

    fn score_grad(&self, x: &[f64], h: &[f64]) -> Result<Vec<f64>> {
        self.log_prob_grad(x, h)
    }
}

/// Token policy viewed through soft one-hot weights (`L * V` coordinates).
#[derive(Debug, Clone, Copy)]
pub struct RelaxedToken<'a>(pub &'a TokenPolicy);

impl LatentScore for RelaxedToken<'_> {
    fn latent_len(&self) -> usize {
        self.0.length() * self.0.vocab()
    }

    fn score_grad(&self, x: &[f64], h: &[f64]) -> Result<Vec<f64>> {
        self.0.soft_log_prob_grad(x, h)
    }
}

/// Central-difference Jacobian `d g / d h` as columns (one per coordinate).
fn jacobian_columns<S: LatentScore + ?Sized>(view: &S, x: &[f64], h: &[f64]) -> Result<Vec<Vec<f64>>> {
    let step = JACOBIAN_STEP * norm(h).max(1.0);
    let mut hp = h.to_vec();
    let mut cols = Vec::with_capacity(h.len());
    for k in 0..h.len() {
        hp[k] = h[k] + step;
        let up = view.score_grad(x, &hp)?;
        hp[k] = h[k] - step;
        let down = view.score_grad(x, &hp)?;
        hp[k] = h[k];
        let col: Vec<f64> = up.iter().zip(&down).map(|(a, b)| (a - b) / (2.0 * step)).collect();
        if col.iter().any(|v| !v.is_finite()) {
            return Err(LabError::Numerical(format!("non-finite Jacobian entry in column {k}")));
        }
        cols.push(col);
    }
    Ok(cols)
}

/// Largest singular value by power iteration on `J^T J`.
pub fn operator_norm(cols: &[Vec<f64>]) -> f64 {
    let d = cols.len();
    if d == 0 {
        return 0.0;
    }
    let mut gram = vec![0.0; d * d];
    for i in 0..d {
        for j in i..d {
            let v = linalg::dot(&cols[i], &cols[j]);
            gram[i * d + j] = v;
            gram[j * d + i] = v;
        }
    }
    let mut v: Vec<f64> = (0..d).map(|i| 1.0 + i as f64 / d as f64).collect();
    let n0 = norm(&v);
    v.iter_mut().for_each(|x| *x /= n0);
    let mut lambda = 0.0;
    for _ in 0..POWER_ITERATIONS {
        let w = linalg::mat_vec(&gram, d, d, &v);
        let wn = norm(&w);
        if wn == 0.0 {
            return 0.0;
        }
        let next: Vec<f64> = w.iter().map(|x| x / wn).collect();
        let rq = linalg::dot(&next, &linalg::mat_vec(&gram, d, d, &next));
        v = next;
        let done = (rq - lambda).abs() <= POWER_TOLERANCE * rq.abs();
        lambda = rq;
        if done {
            break;
        }
    }
    lambda.max(0.0).sqrt()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoundCheck {
    pub lhs: f64,
    pub delta_h_norm: f64,
    pub estimated_c: f64,
    pub bound_value: f64,
    pub satisfied: bool,
}

/// Checks `|g(h_w) - g(h_l)| <= C |h_w - h_l|` with `C` the largest mixed
/// Jacobian operator norm on an `n_grid`-point segment grid.
pub fn lipschitz_bound_check<S: LatentScore + ?Sized>(
    view: &S,
    prompt: &Prompt,
    h_w: &[f64],
    h_l: &[f64],
    n_grid: usize,
) -> Result<BoundCheck> {
    if n_grid < 2 {
        return Err(LabError::Usage("lipschitz_bound_check needs n_grid >= 2".into()));
    }
    let d = view.latent_len();
    if h_w.len() != d || h_l.len() != d {
        return Err(LabError::Shape(format!(
            "bound check expects latents of length {d}, got {} and {}",
            h_w.len(),
            h_l.len()
        )));
    }
    let x = &prompt.features;
    let lhs = norm(&linalg::sub(&view.score_grad(x, h_w)?, &view.score_grad(x, h_l)?));
    let delta_h_norm = norm(&linalg::sub(h_w, h_l));
    let mut estimated_c: f64 = 0.0;
    for j in 0..n_grid {
        let lam = j as f64 / (n_grid - 1) as f64;
        let h: Vec<f64> = h_w.iter().zip(h_l).map(|(a, b)| lam * a + (1.0 - lam) * b).collect();
        estimated_c = estimated_c.max(operator_norm(&jacobian_columns(view, x, &h)?));
    }
    let bound_value = estimated_c * delta_h_norm;
    Ok(BoundCheck {
        lhs,
        delta_h_norm,
        estimated_c,
        bound_value,
        satisfied: lhs <= bound_value * (1.0 + BOUND_TOLERANCE),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VanishingCurve {
    /// `(|delta h|, direction_norm)` per epsilon.
    pub points: Vec<(f64, f64)>,
    /// Least-squares log-log slope over the strictly positive points.
    pub slope: Option<f64>,
}

fn check_epsilons(epsilons: &[f64]) -> Result<()> {
    if epsilons.iter().any(|e| !(e.is_finite() && *e >= 0.0)) {
        return Err(LabError::Usage("epsilons must be finite and non-negative".into()));
    }
    if epsilons.windows(2).any(|w| w[1] > w[0]) {
        return Err(LabError::Usage("epsilons must be in descending order".into()));
    }
    Ok(())
}

pub fn log_log_slope(points: &[(f64, f64)]) -> Option<f64> {
    let logs: Vec<(f64, f64)> = points
        .iter()
        .filter(|(a, b)| *a > 0.0 && *b > 0.0)
        .map(|(a, b)| (a.ln(), b.ln()))
        .collect();
    if logs.len() < 2 {
        return None;
    }
    let n = logs.len() as f64;
    let mx = logs.iter().map(|p| p.0).sum::<f64>() / n;
    let my = logs.iter().map(|p| p.1).sum::<f64>() / n;
    let sxx: f64 = logs.iter().map(|p| (p.0 - mx).powi(2)).sum();
    let sxy: f64 = logs.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    (sxx > 0.0).then(|| sxy / sxx)
}

/// Direction norm of paraphrase pairs `(y, y_eps)` as `eps` shrinks.
///
/// Gaussian pairs come from [`World::paraphrase`], which keeps quality fixed.
/// Token pairs move the soft one-hot weights of `base` along a fixed
/// mass-preserving direction, so `eps` can go below one token edit.
pub fn gradient_vanishing_curve(
    world: &World,
    policy: &Policy,
    prompt: &Prompt,
    base: &Response,
    epsilons: &[f64],
    rng: &mut LabRng,
) -> Result<VanishingCurve> {
    check_epsilons(epsilons)?;
    let x = &prompt.features;
    let points = match (policy, &base.payload) {
        (Policy::Gaussian(g), Payload::Latent(h)) => {
            let g0 = g.score_grad(x, h)?;
            let mut pts = Vec::with_capacity(epsilons.len());
            for &eps in epsilons {
                let para = world.paraphrase(prompt, base, eps, policy, rng)?;
                let Payload::Latent(hp) = &para.payload else {
                    unreachable!("paraphrase keeps the response kind")
                };
                let dn = norm(&linalg::sub(&g0, &g.score_grad(x, hp)?));
                pts.push((norm(&linalg::sub(h, hp)), dn));
            }
            pts
        }
        (Policy::Token(t), Payload::Tokens(tokens)) => {
            let view = RelaxedToken(t);
            let w0 = t.one_hot(tokens)?;
            let u = mass_preserving_direction(t.length(), t.vocab(), rng);
            let g0 = view.score_grad(x, &w0)?;
            let mut pts = Vec::with_capacity(epsilons.len());
            for &eps in epsilons {
                let w: Vec<f64> = w0.iter().zip(&u).map(|(a, b)| a + eps * b).collect();
                let dn = norm(&linalg::sub(&g0, &view.score_grad(x, &w)?));
                pts.push((eps, dn));
            }
            pts
        }
        _ => {
            return Err(LabError::Shape(
                "policy family does not match the response kind".into(),
            ))
        }
    };
    let slope = log_log_slope(&points);
    Ok(VanishingCurve { points, slope })
}

/// Unit vector whose per-position components sum to zero.
fn mass_preserving_direction(length: usize, vocab: usize, rng: &mut LabRng) -> Vec<f64> {
    let mut u: Vec<f64> = (0..length * vocab).map(|_| rng.sample(StandardNormal)).collect();
    for pos in 0..length {
        let row = &mut u[pos * vocab..(pos + 1) * vocab];
        let mean = row.iter().sum::<f64>() / vocab as f64;
        row.iter_mut().for_each(|v| *v -= mean);
    }
    let n = norm(&u);
    u.into_iter().map(|v| v / n).collect()
}

// ---------------------------------------------------------------------------
// Per-iteration rows
// ---------------------------------------------------------------------------

/// Expected true quality of `policy` averaged over `prompts`.
///
/// Gaussian policies use the closed form, token policies exact enumeration
/// (or a fixed-seed sample when the sequence space is large).
pub fn policy_true_quality(world: &World, policy: &Policy, prompts: &[Prompt]) -> Result<f64> {
    if prompts.is_empty() {
        return Err(LabError::Usage("policy_true_quality needs prompts".into()));
    }
    let tau = world.config.tau;
    let per: Vec<f64> = prompts
        .par_iter()
        .map(|p| match policy {
            Policy::Gaussian(g) => {
                Ok(SCORE_MAX * g.expected_peak(&p.features, &world.latent_target(p), tau))
            }
            Policy::Token(t) => {
                let count = world.config.sequence_count();
                if count <= ENUMERATION_LIMIT {
                    let mut acc = 0.0;
                    for seq in all_sequences(t.vocab(), t.length()) {
                        let y = Payload::Tokens(seq);
                        acc += policy.log_prob(p, &y)?.exp() * world.payload_quality(p, &y)?;
                    }
                    Ok(acc)
                } else {
                    let mut r = rng::stream(world.seed, &[tag::EVAL, p.id]);
                    let mut acc = 0.0;
                    for _ in 0..QUALITY_SAMPLES {
                        acc += world.payload_quality(p, &policy.sample(p, &mut r))?;
                    }
                    Ok(acc / QUALITY_SAMPLES as f64)
                }
            }
        })
        .collect::<Result<_>>()?;
    Ok(per.iter().sum::<f64>() / prompts.len() as f64)
}

/// One line of metrics.csv. Pair statistics are empty for rows without a
/// curated dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub method: String,
    pub seed: u64,
    pub iteration: usize,
    pub n_pairs: usize,
    pub mean_score_gap: Option<f64>,
    pub mean_latent_cosine: Option<f64>,
    pub mean_direction_norm: Option<f64>,
    pub mean_adaptive_weight: Option<f64>,
    pub mean_policy_true_quality: f64,
    pub generations: u64,
    pub judge_calls: u64,
    pub dpo_runs: u64,
    pub sft_runs: u64,
}

pub const METRIC_COLUMNS: [&str; 13] = [
    "method",
    "seed",
    "iteration",
    "n_pairs",
    "mean_score_gap",
    "mean_latent_cosine",
    "mean_direction_norm",
    "mean_adaptive_weight",
    "mean_policy_true_quality",
    "generations",
    "judge_calls",
    "dpo_runs",
    "sft_runs",
];

/// What a metric row is measured against.
#[derive(Debug, Clone, Copy)]
pub struct RowContext<'a> {
    pub world: &'a World,
    pub method: &'a str,
    pub seed: u64,
    pub iteration: usize,
    pub ledger: ComputeLedger,
    pub beta: f64,
}

/// Aggregates one iteration: `current` is the model the pairs were curated
/// from, `trained` (if any) the model obtained from them with `current` as
/// reference.
pub fn snapshot_metrics(
    ctx: &RowContext,
    current: &Policy,
    trained: Option<&Policy>,
    pairs: &[PreferencePair],
) -> Result<MetricRow> {
    let quality = policy_true_quality(ctx.world, current, ctx.world.heldout())?;
    let (gap, cos, dn, aw) = if pairs.is_empty() {
        (None, None, None, None)
    } else {
        let aw = match trained {
            Some(t) => Some(mean_adaptive_weight(pairs, t, current, ctx.beta)?),
            None => None,
        };
        (
            Some(score_gap(pairs, ctx.world)?),
            Some(latent_cosine(pairs, current)?.clamp(-1.0, 1.0)),
            Some(mean_direction_norm(pairs, current)?),
            aw,
        )
    };
    Ok(MetricRow {
        method: ctx.method.to_string(),
        seed: ctx.seed,
        iteration: ctx.iteration,
        n_pairs: pairs.len(),
        mean_score_gap: gap,
        mean_latent_cosine: cos,
        mean_direction_norm: dn,
        mean_adaptive_weight: aw,
        mean_policy_true_quality: quality,
        generations: ctx.ledger.generations,
        judge_calls: ctx.ledger.judge_calls,
        dpo_runs: ctx.ledger.dpo_runs,
        sft_runs: ctx.ledger.sft_runs,
    })
}

fn cell(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

pub fn write_metrics_csv<W: Write>(out: W, rows: &[MetricRow]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(METRIC_COLUMNS)?;
    for r in rows {
        w.write_record([
            r.method.clone(),
            r.seed.to_string(),
            r.iteration.to_string(),
            r.n_pairs.to_string(),
            cell(r.mean_score_gap),
            cell(r.mean_latent_cosine),
            cell(r.mean_direction_norm),
            cell(r.mean_adaptive_weight),
            r.mean_policy_true_quality.to_string(),
            r.generations.to_string(),
            r.judge_calls.to_string(),
            r.dpo_runs.to_string(),
            r.sft_runs.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_metrics_csv<R: std::io::Read>(input: R) -> Result<Vec<MetricRow>> {
    let mut rdr = csv::Reader::from_reader(input);
    let header: Vec<String> = rdr.headers()?.iter().map(str::to_string).collect();
    if header != METRIC_COLUMNS {
        return Err(LabError::Versioning(format!(
            "unexpected metrics header {header:?}"
        )));
    }
    let opt = |s: &str| -> Result<Option<f64>> {
        if s.is_empty() {
            Ok(None)
        } else {
            s.parse().map(Some).map_err(|_| LabError::Usage(format!("bad number {s:?}")))
        }
    };
    let num = |s: &str| -> Result<u64> {
        s.parse().map_err(|_| LabError::Usage(format!("bad integer {s:?}")))
    };
    let mut rows = Vec::new();
    for rec in rdr.records() {
        let rec = rec?;
        rows.push(MetricRow {
            method: rec[0].to_string(),
            seed: num(&rec[1])?,
            iteration: num(&rec[2])? as usize,
            n_pairs: num(&rec[3])? as usize,
            mean_score_gap: opt(&rec[4])?,
            mean_latent_cosine: opt(&rec[5])?,
            mean_direction_norm: opt(&rec[6])?,
            mean_adaptive_weight: opt(&rec[7])?,
            mean_policy_true_quality: opt(&rec[8])?
                .ok_or_else(|| LabError::Usage("missing true quality".into()))?,
            generations: num(&rec[9])?,
            judge_calls: num(&rec[10])?,
            dpo_runs: num(&rec[11])?,
            sft_runs: num(&rec[12])?,
        });
    }
    Ok(rows)
}

pub fn write_bound_csv<W: Write>(out: W, checks: &[BoundCheck]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["lhs", "delta_h_norm", "estimated_C", "satisfied"])?;
    for c in checks {
        w.write_record([
            c.lhs.to_string(),
            c.delta_h_norm.to_string(),
            c.estimated_c.to_string(),
            c.satisfied.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::curation::Phase;
    use crate::policy::Role;
    use crate::world::{Pool, WorldConfig};

    fn prompt(features: Vec<f64>) -> Prompt {
        Prompt {
            id: 3,
            features,
            pool: Pool::HeldOut,
        }
    }

    fn latent_pair(p: &Prompt, a: Vec<f64>, b: Vec<f64>) -> PreferencePair {
        let r = |h: Vec<f64>| Response {
            latent: h.clone(),
            payload: Payload::Latent(h),
            source: Role::Current,
        };
        PreferencePair::new(p.clone(), r(a), r(b), None, None, 0, Phase::SelfRewarding)
    }

    #[test]
    fn orthogonal_latents_have_zero_cosine() {
        let g = Policy::Gaussian(GaussianPolicy::isotropic(vec![1.0, 0.0, 0.0, 1.0], 0.0, false));
        let p = prompt(vec![1.0, 0.0]);
        let pair = latent_pair(&p, vec![2.0, 0.0], vec![0.0, -3.0]);
        assert!(latent_cosine(&[pair.clone()], &g).unwrap().abs() < 1e-12);
        let same = latent_pair(&p, vec![2.0, 1.0], vec![2.0, 1.0]);
        assert!((latent_cosine(&[same.clone()], &g).unwrap() - 1.0).abs() < 1e-12);
        assert_eq!(
            direction_norm(&g, &p, &same.chosen.payload, &same.rejected.payload).unwrap(),
            0.0
        );
        let zero = latent_pair(&p, vec![0.0, 0.0], vec![1.0, 0.0]);
        assert!(matches!(latent_cosine(&[zero], &g), Err(LabError::Numerical(_))));
        assert!(matches!(latent_cosine(&[], &g), Err(LabError::Usage(_))));
    }

    #[test]
    fn gaussian_direction_norm_closed_form() {
        let g = GaussianPolicy::new(2, vec![0.3, -0.1, 0.2, 0.5], vec![-0.4, 0.3], true).unwrap();
        let p = prompt(vec![0.6, 0.8]);
        let (hw, hl) = (vec![1.0, -0.5], vec![0.2, 0.4]);
        // Closed form restricted to the W block plus the log-sd block.
        let mu = g.mean(&p.features);
        let mut want = 0.0;
        for j in 0..2 {
            let prec = (-2.0 * g.log_sd()[j]).exp();
            let dh = (hw[j] - hl[j]) * prec;
            want += dh * dh * linalg::dot(&p.features, &p.features);
            let zw = (hw[j] - mu[j]) * prec.sqrt();
            let zl = (hl[j] - mu[j]) * prec.sqrt();
            want += (zw * zw - zl * zl).powi(2);
        }
        let got = direction_norm(
            &Policy::Gaussian(g),
            &p,
            &Payload::Latent(hw),
            &Payload::Latent(hl),
        )
        .unwrap();
        assert!((got - want.sqrt()).abs() < 1e-10);
    }

    #[test]
    fn power_iteration_matches_known_singular_value() {
        // Columns of diag(3, 1) padded with a zero row.
        let cols = vec![vec![3.0, 0.0, 0.0], vec![0.0, 1.0, 0.0]];
        assert!((operator_norm(&cols) - 3.0).abs() < 1e-9);
        assert_eq!(operator_norm(&[vec![0.0; 3]]), 0.0);
    }

    #[test]
    fn linear_mean_bound_is_tight() {
        let mut r = rng::stream(5, &[]);
        let g = GaussianPolicy::isotropic(vec![0.4, 0.1, -0.3, 0.9], -0.3, false);
        let p = prompt(vec![0.8, -0.6]);
        let hw: Vec<f64> = (0..2).map(|_| r.sample(StandardNormal)).collect();
        let hl: Vec<f64> = (0..2).map(|_| r.sample(StandardNormal)).collect();
        let b = lipschitz_bound_check(&g, &p, &hw, &hl, 5).unwrap();
        assert!(b.satisfied);
        assert!((b.lhs - b.bound_value).abs() <= 1e-6 * b.lhs.max(1.0));
        let zero = lipschitz_bound_check(&g, &p, &hw, &hw, 2).unwrap();
        assert_eq!((zero.lhs, zero.bound_value, zero.satisfied), (0.0, 0.0, true));
        assert!(lipschitz_bound_check(&g, &p, &hw, &hl, 1).is_err());
    }

    #[test]
    fn slope_of_exact_power_law() {
        let pts: Vec<(f64, f64)> = [1.0, 0.1, 0.01].iter().map(|e| (*e, 3.0 * e * e)).collect();
        assert!((log_log_slope(&pts).unwrap() - 2.0).abs() < 1e-12);
        assert_eq!(log_log_slope(&[(0.0, 0.0), (1.0, 1.0)]), None);
    }

    #[test]
    fn epsilons_must_descend() {
        let w = World::new(WorldConfig { latent_dim: 4, ..WorldConfig::default() }, 0).unwrap();
        let g = Policy::Gaussian(GaussianPolicy::isotropic(vec![1.0; 16], 0.0, false));
        let p = w.heldout()[0].clone();
        let base = Response::new(&g, &p, Payload::Latent(vec![0.1, 0.2, 0.3, 0.4]), Role::Current).unwrap();
        let mut r = rng::stream(0, &[]);
        assert!(gradient_vanishing_curve(&w, &g, &p, &base, &[0.1, 0.2], &mut r).is_err());
        let c = gradient_vanishing_curve(&w, &g, &p, &base, &[0.1, 0.01, 0.0], &mut r).unwrap();
        assert_eq!(c.points[2].1, 0.0);
    }

    #[test]
    fn metrics_csv_round_trip() {
        let row = MetricRow {
            method: "tsr".into(),
            seed: 4,
            iteration: 1,
            n_pairs: 10,
            mean_score_gap: Some(1.25),
            mean_latent_cosine: None,
            mean_direction_norm: Some(0.1),
            mean_adaptive_weight: Some(0.49),
            mean_policy_true_quality: 2.5,
            generations: 100,
            judge_calls: 100,
            dpo_runs: 2,
            sft_runs: 1,
        };
        let mut buf = Vec::new();
        write_metrics_csv(&mut buf, &[row.clone()]).unwrap();
        assert_eq!(read_metrics_csv(&buf[..]).unwrap(), vec![row]);
    }
}
