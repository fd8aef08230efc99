//! Synthetic instruction-following worlds.
//!
//! A world owns a fixed set of prompts, a smooth single-peaked quality
//! function `q*(x, y) = s_max * exp(-|h(y) - t(x)|^2 / tau)` with a per-prompt
//! target latent `t(x)`, and the teacher/label generators used to seed the
//! initial model and the SPIN baselines. Continuous responses use their
//! payload as `h(y)`; token responses are embedded through a fixed world-owned
//! table so quality never depends on the policy being evaluated.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{LabError, Result};
use crate::linalg::{self, dist_sq, mat_vec, norm};
use crate::policy::{Payload, Policy, Response};
use crate::rng::{self, tag, LabRng};

/// Upper end of every score range (judge and true quality).
pub const SCORE_MAX: f64 = 5.0;

pub const WORLD_SCHEMA_VERSION: u32 = 1;

/// Exhaustive search over token sequences is used up to this many sequences.
const EXHAUSTIVE_LIMIT: usize = 1 << 16;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WorldConfig {
    /// Latent dimension `d`; also the prompt feature dimension.
    pub latent_dim: usize,
    /// Number of iteration prompt sets `p_0..p_N`.
    pub partitions: usize,
    /// Prompts per iteration set.
    pub partition_size: usize,
    /// Held-out prompts used for true-quality evaluation.
    pub heldout_size: usize,
    /// Prompts carrying the synthetic SFT demonstrations.
    pub seed_prompts: usize,
    /// Width of the quality peak.
    pub tau: f64,
    /// Norm of every target latent.
    pub target_scale: f64,
    /// Quality of the teacher mean as a fraction of `s_max`.
    pub teacher_quality: f64,
    /// Per-dimension spread of teacher demonstrations.
    pub teacher_sd: f64,
    /// Quality of SPIN label responses as a fraction of `s_max`.
    pub label_quality: f64,
    pub vocab_size: usize,
    pub response_length: usize,
    /// Scale of the world token embedding table.
    pub token_embedding_scale: f64,
}

impl Default for WorldConfig {
    fn default() -> Self {
        Self {
            latent_dim: 2,
            partitions: 5,
            partition_size: 200,
            heldout_size: 200,
            seed_prompts: 16,
            tau: 6.0,
            target_scale: 2.0,
            teacher_quality: 0.5,
            teacher_sd: 0.25,
            label_quality: 0.95,
            vocab_size: 8,
            response_length: 3,
            token_embedding_scale: 1.0,
        }
    }
}

impl WorldConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(LabError::Config(m.to_string()));
        if self.latent_dim < 2 {
            return bad("latent_dim must be at least 2");
        }
        if self.partitions == 0 || self.partition_size == 0 {
            return bad("world needs at least one non-empty prompt set");
        }
        if self.heldout_size == 0 || self.seed_prompts == 0 {
            return bad("held-out and seed prompt counts must be positive");
        }
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return bad("tau must be positive");
        }
        if !(self.target_scale > 0.0 && self.target_scale.is_finite()) {
            return bad("target_scale must be positive");
        }
        for (name, v) in [
            ("teacher_quality", self.teacher_quality),
            ("label_quality", self.label_quality),
        ] {
            if !(v > 0.0 && v <= 1.0) {
                return Err(LabError::Config(format!("{name} must lie in (0, 1]")));
            }
        }
        if !(self.teacher_sd >= 0.0 && self.teacher_sd.is_finite()) {
            return bad("teacher_sd must be non-negative");
        }
        if self.vocab_size < 2 || self.response_length == 0 {
            return bad("token mode needs vocab_size >= 2 and response_length >= 1");
        }
        Ok(())
    }

    pub fn sequence_count(&self) -> usize {
        self.vocab_size.saturating_pow(self.response_length as u32)
    }
}

/// Which prompt pool a prompt belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Pool {
    /// Iteration prompt set `p_i`.
    Iteration(usize),
    HeldOut,
    Seed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prompt {
    pub id: u64,
    pub features: Vec<f64>,
    pub pool: Pool,
}

impl Prompt {
    pub fn partition(&self) -> Option<usize> {
        match self.pool {
            Pool::Iteration(i) => Some(i),
            _ => None,
        }
    }
}

/// Payload family a world generator should produce.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ResponseKind {
    Latent,
    Tokens,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct World {
    pub schema_version: u32,
    pub config: WorldConfig,
    pub seed: u64,
    prompts: Vec<Prompt>,
    heldout: Vec<Prompt>,
    seed_set: Vec<Prompt>,
    /// `A`: target latent `t(x) = A x`.
    target_map: Vec<f64>,
    /// `A + D`: teacher mean, offset from the optimum by a fixed rotation.
    teacher_map: Vec<f64>,
    /// Per-position token embedding table, `L x V x d`.
    token_table: Vec<f64>,
}

fn unit_features(d: usize, rng: &mut LabRng) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..d).map(|_| rng.sample(StandardNormal)).collect();
        let n = norm(&v);
        if n > 1e-8 {
            return v.into_iter().map(|x| x / n).collect();
        }
    }
}

fn random_rotation(d: usize, rng: &mut LabRng) -> Vec<f64> {
    let m: Vec<f64> = (0..d * d).map(|_| rng.sample(StandardNormal)).collect();
    linalg::orthonormalize(m, d)
}

impl World {
    /// Builds a world deterministically from `(config, seed)`.
    pub fn new(config: WorldConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let d = config.latent_dim;
        let mut rng = rng::stream(seed, &[tag::WORLD]);

        let target_map: Vec<f64> = random_rotation(d, &mut rng)
            .into_iter()
            .map(|v| v * config.target_scale)
            .collect();
        // |D x| = offset for unit x, so the teacher mean sits at quality
        // teacher_quality * s_max.
        let offset = (config.tau * (1.0 / config.teacher_quality).ln()).sqrt();
        let rot = random_rotation(d, &mut rng);
        let teacher_map: Vec<f64> = target_map
            .iter()
            .zip(&rot)
            .map(|(a, r)| a + offset * r)
            .collect();
        let table_len = config.response_length * config.vocab_size * d;
        let token_table: Vec<f64> = (0..table_len)
            .map(|_| config.token_embedding_scale * rng.sample::<f64, _>(StandardNormal))
            .collect();

        let mut next_id = 0u64;
        let mut make = |pool: Pool, rng: &mut LabRng| {
            let p = Prompt {
                id: next_id,
                features: unit_features(d, rng),
                pool,
            };
            next_id += 1;
            p
        };
        let mut prompts = Vec::with_capacity(config.partitions * config.partition_size);
        for part in 0..config.partitions {
            for _ in 0..config.partition_size {
                prompts.push(make(Pool::Iteration(part), &mut rng));
            }
        }
        let heldout = (0..config.heldout_size)
            .map(|_| make(Pool::HeldOut, &mut rng))
            .collect();
        let seed_set = (0..config.seed_prompts)
            .map(|_| make(Pool::Seed, &mut rng))
            .collect();

        Ok(Self {
            schema_version: WORLD_SCHEMA_VERSION,
            config,
            seed,
            prompts,
            heldout,
            seed_set,
            target_map,
            teacher_map,
            token_table,
        })
    }

    pub fn latent_dim(&self) -> usize {
        self.config.latent_dim
    }

    pub fn prompts(&self) -> &[Prompt] {
        &self.prompts
    }

    /// Prompt set `p_i`.
    pub fn partition(&self, i: usize) -> Result<&[Prompt]> {
        if i >= self.config.partitions {
            return Err(LabError::Config(format!(
                "prompt set {i} requested but the world has {} sets",
                self.config.partitions
            )));
        }
        let s = self.config.partition_size;
        Ok(&self.prompts[i * s..(i + 1) * s])
    }

    pub fn heldout(&self) -> &[Prompt] {
        &self.heldout
    }

    pub fn seed_prompts(&self) -> &[Prompt] {
        &self.seed_set
    }

    fn check_prompt(&self, prompt: &Prompt) -> Result<()> {
        if prompt.features.len() != self.config.latent_dim {
            return Err(LabError::Shape(format!(
                "prompt {} has {} features, world expects {}",
                prompt.id,
                prompt.features.len(),
                self.config.latent_dim
            )));
        }
        Ok(())
    }

    fn check_tokens(&self, tokens: &[u32]) -> Result<()> {
        if tokens.len() != self.config.response_length
            || tokens.iter().any(|&t| t as usize >= self.config.vocab_size)
        {
            return Err(LabError::Shape(format!(
                "token response {tokens:?} does not fit vocab {} x length {}",
                self.config.vocab_size, self.config.response_length
            )));
        }
        Ok(())
    }

    /// World semantic embedding of a token sequence.
    pub fn embed_tokens(&self, tokens: &[u32]) -> Result<Vec<f64>> {
        self.check_tokens(tokens)?;
        let d = self.config.latent_dim;
        let v = self.config.vocab_size;
        let mut h = vec![0.0; d];
        for (pos, &tok) in tokens.iter().enumerate() {
            let off = (pos * v + tok as usize) * d;
            linalg::add_scaled(&mut h, 1.0, &self.token_table[off..off + d]);
        }
        Ok(h)
    }

    /// Semantic latent of any payload: the payload itself or its token embedding.
    pub fn semantic_latent(&self, payload: &Payload) -> Result<Vec<f64>> {
        match payload {
            Payload::Latent(h) => {
                if h.len() != self.config.latent_dim {
                    return Err(LabError::Shape(format!(
                        "latent response has dimension {}, world expects {}",
                        h.len(),
                        self.config.latent_dim
                    )));
                }
                Ok(h.clone())
            }
            Payload::Tokens(t) => self.embed_tokens(t),
        }
    }

    /// Continuous-mode target `t(x) = A x`.
    pub fn latent_target(&self, prompt: &Prompt) -> Vec<f64> {
        let d = self.config.latent_dim;
        mat_vec(&self.target_map, d, d, &prompt.features)
    }

    /// Token-mode target: the embedding of the sequence nearest to `A x`, so
    /// the best representable response reaches `s_max` exactly.
    pub fn token_target(&self, prompt: &Prompt) -> Vec<f64> {
        let best = self.snap(&self.latent_target(prompt));
        self.embed_tokens(&best).expect("snap returns valid tokens")
    }

    fn target_for(&self, prompt: &Prompt, payload: &Payload) -> Vec<f64> {
        match payload {
            Payload::Latent(_) => self.latent_target(prompt),
            Payload::Tokens(_) => self.token_target(prompt),
        }
    }

    pub fn quality_at(&self, target: &[f64], h: &[f64]) -> f64 {
        SCORE_MAX * (-dist_sq(h, target) / self.config.tau).exp()
    }

    /// True quality `q*(x, y)` in `[0, s_max]`.
    pub fn true_quality(&self, prompt: &Prompt, response: &Response) -> Result<f64> {
        self.payload_quality(prompt, &response.payload)
    }

    pub fn payload_quality(&self, prompt: &Prompt, payload: &Payload) -> Result<f64> {
        self.check_prompt(prompt)?;
        let h = self.semantic_latent(payload)?;
        Ok(self.quality_at(&self.target_for(prompt, payload), &h))
    }

    /// Nearest token sequence to `h` in the world embedding.
    pub fn snap(&self, h: &[f64]) -> Vec<u32> {
        let (v, l, d) = (
            self.config.vocab_size,
            self.config.response_length,
            self.config.latent_dim,
        );
        if self.config.sequence_count() <= EXHAUSTIVE_LIMIT {
            let mut best = (f64::INFINITY, vec![0u32; l]);
            for seq in all_sequences(v, l) {
                let e = self.embed_tokens(&seq).expect("enumerated tokens are valid");
                let dd = dist_sq(&e, h);
                if dd < best.0 {
                    best = (dd, seq);
                }
            }
            return best.1;
        }
        // Coordinate descent from the all-zero sequence.
        let mut seq = vec![0u32; l];
        let mut emb = self.embed_tokens(&seq).expect("valid");
        loop {
            let mut improved = false;
            for pos in 0..l {
                let cur = seq[pos] as usize;
                let cur_off = (pos * v + cur) * d;
                let base = linalg::sub(&emb, &self.token_table[cur_off..cur_off + d]);
                let mut best = (dist_sq(&emb, h), cur);
                for tok in 0..v {
                    let off = (pos * v + tok) * d;
                    let mut cand = base.clone();
                    linalg::add_scaled(&mut cand, 1.0, &self.token_table[off..off + d]);
                    let dd = dist_sq(&cand, h);
                    if dd < best.0 - 1e-15 {
                        best = (dd, tok);
                    }
                }
                if best.1 != cur {
                    seq[pos] = best.1 as u32;
                    emb = self.embed_tokens(&seq).expect("valid");
                    improved = true;
                }
            }
            if !improved {
                return seq;
            }
        }
    }

    /// Mean of the teacher distribution for a prompt.
    pub fn teacher_mean(&self, prompt: &Prompt) -> Vec<f64> {
        let d = self.config.latent_dim;
        mat_vec(&self.teacher_map, d, d, &prompt.features)
    }

    /// One synthetic SFT demonstration: an off-optimum teacher draw.
    pub fn teacher_demo(&self, prompt: &Prompt, kind: ResponseKind, rng: &mut LabRng) -> Payload {
        let h: Vec<f64> = self
            .teacher_mean(prompt)
            .into_iter()
            .map(|m| m + self.config.teacher_sd * rng.sample::<f64, _>(StandardNormal))
            .collect();
        match kind {
            ResponseKind::Latent => Payload::Latent(h),
            ResponseKind::Tokens => Payload::Tokens(self.snap(&h)),
        }
    }

    /// High-quality reference answer used as the SPIN chosen side.
    ///
    /// Continuous labels sit at distance `sqrt(tau * ln(1/label_quality))`
    /// from the target along a prompt-specific direction. Token labels are the
    /// best representable sequence.
    pub fn label(&self, prompt: &Prompt, kind: ResponseKind) -> Payload {
        match kind {
            ResponseKind::Latent => {
                let mut rng = rng::stream(self.seed, &[tag::WORLD, 1_000, prompt.id]);
                let dir = unit_features(self.config.latent_dim, &mut rng);
                let r = (self.config.tau * (1.0 / self.config.label_quality).ln()).sqrt();
                let t = self.latent_target(prompt);
                Payload::Latent(t.iter().zip(&dir).map(|(a, u)| a + r * u).collect())
            }
            ResponseKind::Tokens => Payload::Tokens(self.snap(&self.latent_target(prompt))),
        }
    }

    /// Produces a semantically equivalent response within `epsilon` of the
    /// original in the latent.
    ///
    /// Continuous responses are rotated about the prompt's target on the
    /// sphere of constant distance, so quality is preserved exactly and the
    /// displacement is `min(epsilon, 2 * radius)`. Token responses move to the
    /// nearest other sequence whose world embedding is within `epsilon` and
    /// whose quality differs by at most `paraphrase_tolerance`; otherwise the
    /// response is returned unchanged.
    pub fn paraphrase(
        &self,
        prompt: &Prompt,
        response: &Response,
        epsilon: f64,
        encoder: &Policy,
        rng: &mut LabRng,
    ) -> Result<Response> {
        if !(epsilon >= 0.0 && epsilon.is_finite()) {
            return Err(LabError::Config(format!(
                "paraphrase epsilon must be a finite non-negative number, got {epsilon}"
            )));
        }
        self.check_prompt(prompt)?;
        if epsilon == 0.0 {
            return Ok(response.clone());
        }
        let payload = match &response.payload {
            Payload::Latent(h) => {
                let t = self.latent_target(prompt);
                Payload::Latent(rotate_about(h, &t, epsilon, rng)?)
            }
            Payload::Tokens(tokens) => {
                let base = self.embed_tokens(tokens)?;
                let q0 = self.payload_quality(prompt, &response.payload)?;
                let tol = self.paraphrase_tolerance(epsilon);
                let mut best: Option<(f64, Vec<u32>)> = None;
                if self.config.sequence_count() <= EXHAUSTIVE_LIMIT {
                    for seq in all_sequences(self.config.vocab_size, self.config.response_length) {
                        if &seq == tokens {
                            continue;
                        }
                        let e = self.embed_tokens(&seq)?;
                        let dd = dist_sq(&e, &base).sqrt();
                        if dd > epsilon {
                            continue;
                        }
                        let q = self.payload_quality(prompt, &Payload::Tokens(seq.clone()))?;
                        if (q - q0).abs() > tol {
                            continue;
                        }
                        if best.as_ref().is_none_or(|(b, _)| dd < *b) {
                            best = Some((dd, seq));
                        }
                    }
                }
                match best {
                    Some((_, seq)) => Payload::Tokens(seq),
                    None => return Ok(response.clone()),
                }
            }
        };
        let latent = encoder.latent(prompt, &payload)?;
        Ok(Response {
            payload,
            latent,
            source: response.source,
        })
    }

    /// Worst-case quality change for a latent displacement of `epsilon`:
    /// the Lipschitz constant of `q*` times `epsilon`.
    pub fn paraphrase_tolerance(&self, epsilon: f64) -> f64 {
        let lip = SCORE_MAX * (2.0 / self.config.tau).sqrt() * (-0.5f64).exp();
        lip * epsilon
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let w: World = serde_json::from_str(text)?;
        if w.schema_version != WORLD_SCHEMA_VERSION {
            return Err(LabError::Versioning(format!(
                "world snapshot has schema {}, expected {WORLD_SCHEMA_VERSION}",
                w.schema_version
            )));
        }
        Ok(w)
    }
}

/// Moves `h` by a chord of length `epsilon` on the sphere centred at `center`
/// through `h`. Falls back to a straight step when `h` sits on the centre.
fn rotate_about(h: &[f64], center: &[f64], epsilon: f64, rng: &mut LabRng) -> Result<Vec<f64>> {
    let d = h.len();
    if d != center.len() {
        return Err(LabError::Shape("latent and target dimensions differ".into()));
    }
    let r = linalg::sub(h, center);
    let rho = norm(&r);
    let u = loop {
        let mut u: Vec<f64> = (0..d).map(|_| rng.sample(StandardNormal)).collect();
        if rho > 0.0 {
            let proj = linalg::dot(&u, &r) / (rho * rho);
            linalg::add_scaled(&mut u, -proj, &r);
        }
        let n = norm(&u);
        if n > 1e-8 {
            break u.into_iter().map(|x| x / n).collect::<Vec<_>>();
        }
    };
    if rho < 1e-12 {
        return Ok(h.iter().zip(&u).map(|(a, b)| a + epsilon * b).collect());
    }
    let half = (epsilon / (2.0 * rho)).min(1.0);
    let phi = 2.0 * half.asin();
    let (s, c) = phi.sin_cos();
    Ok((0..d)
        .map(|i| center[i] + c * r[i] + s * rho * u[i])
        .collect())
}

/// All `V^L` token sequences in lexicographic order.
pub fn all_sequences(vocab: usize, length: usize) -> impl Iterator<Item = Vec<u32>> {
    let total = vocab.pow(length as u32);
    (0..total).map(move |mut idx| {
        let mut seq = vec![0u32; length];
        for pos in (0..length).rev() {
            seq[pos] = (idx % vocab) as u32;
            idx /= vocab;
        }
        seq
    })
}
