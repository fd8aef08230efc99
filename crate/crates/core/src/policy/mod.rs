//! Toy generative policies with exact log-probabilities, sampling, latent
//! extraction and analytic parameter gradients.
//!
//! Two families are provided. [`GaussianPolicy`] generates latents directly
//! (`y = h`), which makes every quantity in the gradient-collapse analysis
//! available in closed form. [`TokenPolicy`] generates short token sequences
//! and exposes the last hidden state of its encoder as the latent.

mod gaussian;
mod token;

use std::collections::HashSet;
use std::fmt;

use serde::{Deserialize, Serialize};

pub use gaussian::{GaussianPolicy, LOG_SD_MIN};
pub use token::TokenPolicy;

use crate::error::{LabError, Result};
use crate::rng::LabRng;
use crate::world::Prompt;

/// Default retry budget for duplicate draws in [`sample_k`].
pub const DEFAULT_RETRY_CAP: usize = 20;

/// Continuous responses are compared on this grid when deduplicating.
pub const DEDUP_RESOLUTION: f64 = 1e-6;

/// Which model produced a response or a snapshot.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Role {
    #[serde(rename = "M_b")]
    Base,
    #[serde(rename = "M_0")]
    Initial,
    #[serde(rename = "M_i")]
    Current,
    #[serde(rename = "M_f")]
    Future,
    #[serde(rename = "ref")]
    Reference,
    #[serde(rename = "label")]
    Label,
}

impl Role {
    pub fn as_str(&self) -> &'static str {
        match self {
            Role::Base => "M_b",
            Role::Initial => "M_0",
            Role::Current => "M_i",
            Role::Future => "M_f",
            Role::Reference => "ref",
            Role::Label => "label",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Ok(match s {
            "M_b" => Role::Base,
            "M_0" => Role::Initial,
            "M_i" => Role::Current,
            "M_f" => Role::Future,
            "ref" => Role::Reference,
            "label" => Role::Label,
            other => return Err(LabError::Config(format!("unknown role `{other}`"))),
        })
    }
}

impl fmt::Display for Role {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Payload {
    Latent(Vec<f64>),
    Tokens(Vec<u32>),
}

impl Payload {
    /// Key used for string-level deduplication.
    pub fn dedup_key(&self) -> Vec<i64> {
        match self {
            Payload::Latent(h) => h
                .iter()
                .map(|v| (v / DEDUP_RESOLUTION).round() as i64)
                .collect(),
            Payload::Tokens(t) => t.iter().map(|&v| v as i64).collect(),
        }
    }

    pub fn same_surface(&self, other: &Payload) -> bool {
        self.dedup_key() == other.dedup_key()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Response {
    pub payload: Payload,
    /// Latent under the generating policy at creation time.
    pub latent: Vec<f64>,
    pub source: Role,
}

impl Response {
    pub fn new(policy: &Policy, prompt: &Prompt, payload: Payload, source: Role) -> Result<Self> {
        let latent = policy.latent(prompt, &payload)?;
        Ok(Self {
            payload,
            latent,
            source,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Policy {
    Gaussian(GaussianPolicy),
    Token(TokenPolicy),
}

fn mode_mismatch(policy: &Policy, payload: &Payload) -> LabError {
    let (p, y) = match (policy, payload) {
        (Policy::Gaussian(_), _) => ("gaussian", "token"),
        (Policy::Token(_), _) => ("token", "latent"),
    };
    LabError::Shape(format!("{p} policy cannot score a {y} response"))
}

impl Policy {
    pub fn family(&self) -> &'static str {
        match self {
            Policy::Gaussian(_) => "gaussian",
            Policy::Token(_) => "token",
        }
    }

    pub fn param_count(&self) -> usize {
        match self {
            Policy::Gaussian(g) => g.param_count(),
            Policy::Token(t) => t.params().len(),
        }
    }

    pub fn params(&self) -> Vec<f64> {
        match self {
            Policy::Gaussian(g) => g.params(),
            Policy::Token(t) => t.params().to_vec(),
        }
    }

    pub fn with_params(&self, params: &[f64]) -> Result<Policy> {
        Ok(match self {
            Policy::Gaussian(g) => Policy::Gaussian(g.with_params(params)?),
            Policy::Token(t) => Policy::Token(t.with_params(params)?),
        })
    }

    pub fn sample(&self, prompt: &Prompt, rng: &mut LabRng) -> Payload {
        match self {
            Policy::Gaussian(g) => Payload::Latent(g.sample(&prompt.features, rng)),
            Policy::Token(t) => Payload::Tokens(t.sample(&prompt.features, rng)),
        }
    }

    /// Exact log-density (Gaussian) or log-mass (token).
    pub fn log_prob(&self, prompt: &Prompt, payload: &Payload) -> Result<f64> {
        match (self, payload) {
            (Policy::Gaussian(g), Payload::Latent(h)) => g.log_prob(&prompt.features, h),
            (Policy::Token(t), Payload::Tokens(y)) => t.log_prob(&prompt.features, y),
            _ => Err(mode_mismatch(self, payload)),
        }
    }

    /// Analytic `grad_theta log pi(y|x)` over the full parameter vector.
    pub fn log_prob_grad(&self, prompt: &Prompt, payload: &Payload) -> Result<Vec<f64>> {
        match (self, payload) {
            (Policy::Gaussian(g), Payload::Latent(h)) => g.log_prob_grad(&prompt.features, h),
            (Policy::Token(t), Payload::Tokens(y)) => t.log_prob_grad(&prompt.features, y),
            _ => Err(mode_mismatch(self, payload)),
        }
    }

    /// Latent representation `h` of a response: the payload itself for
    /// Gaussian policies, the final encoder state for token policies.
    pub fn latent(&self, prompt: &Prompt, payload: &Payload) -> Result<Vec<f64>> {
        match (self, payload) {
            (Policy::Gaussian(g), Payload::Latent(h)) => {
                if h.len() != g.dim() {
                    return Err(LabError::Shape(format!(
                        "latent of dimension {} for a dimension-{} policy",
                        h.len(),
                        g.dim()
                    )));
                }
                Ok(h.clone())
            }
            (Policy::Token(t), Payload::Tokens(y)) => t.latent(&prompt.features, y),
            _ => Err(mode_mismatch(self, payload)),
        }
    }

    /// Length-normalized likelihood in `(0, 1]`, used as the judge proxy.
    pub fn normalized_likelihood(&self, prompt: &Prompt, payload: &Payload) -> Result<f64> {
        match (self, payload) {
            (Policy::Gaussian(g), Payload::Latent(h)) => {
                g.normalized_likelihood(&prompt.features, h)
            }
            (Policy::Token(t), Payload::Tokens(y)) => {
                t.normalized_likelihood(&prompt.features, y)
            }
            _ => Err(mode_mismatch(self, payload)),
        }
    }
}

/// A frozen policy with its role and version.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicySnapshot {
    role: Role,
    version: u64,
    policy: Policy,
}

pub const SNAPSHOT_MAGIC: &str = "tsr-lab-snapshot";
pub const SNAPSHOT_FORMAT_VERSION: u32 = 1;

impl PolicySnapshot {
    pub fn new(role: Role, version: u64, policy: Policy) -> Self {
        Self {
            role,
            version,
            policy,
        }
    }

    pub fn role(&self) -> Role {
        self.role
    }

    pub fn version(&self) -> u64 {
        self.version
    }

    pub fn policy(&self) -> &Policy {
        &self.policy
    }

    pub fn params(&self) -> Vec<f64> {
        self.policy.params()
    }

    /// Same parameters under a new role tag.
    pub fn with_role(&self, role: Role) -> Self {
        Self {
            role,
            ..self.clone()
        }
    }

    /// Versioned flat text format:
    ///
    /// ```text
    /// tsr-lab-snapshot 1
    /// role M_0
    /// version 3
    /// family gaussian
    /// shape <dim> <learn_scale>          (gaussian)
    /// shape <dim> <vocab> <length>       (token)
    /// values <n>
    /// <one f64 per line>
    /// ```
    ///
    /// Gaussian snapshots store `W` followed by every log-sd regardless of
    /// whether the scale is trained. Floats use round-trip formatting.
    pub fn to_snapshot_string(&self) -> String {
        let mut out = format!(
            "{SNAPSHOT_MAGIC} {SNAPSHOT_FORMAT_VERSION}\nrole {}\nversion {}\nfamily {}\n",
            self.role,
            self.version,
            self.policy.family()
        );
        let values: Vec<f64> = match &self.policy {
            Policy::Gaussian(g) => {
                out.push_str(&format!("shape {} {}\n", g.dim(), g.learn_scale()));
                g.weights().iter().chain(g.log_sd()).copied().collect()
            }
            Policy::Token(t) => {
                out.push_str(&format!("shape {} {} {}\n", t.dim(), t.vocab(), t.length()));
                t.params().to_vec()
            }
        };
        out.push_str(&format!("values {}\n", values.len()));
        for v in values {
            out.push_str(&format!("{v:?}\n"));
        }
        out
    }

    pub fn from_snapshot_str(text: &str) -> Result<Self> {
        let bad = |m: String| LabError::Versioning(m);
        let mut lines = text.lines();
        let mut field = |name: &str| -> Result<Vec<String>> {
            let line = lines
                .next()
                .ok_or_else(|| bad(format!("snapshot ended before `{name}`")))?;
            let mut parts = line.split_whitespace().map(str::to_string);
            let head = parts.next().unwrap_or_default();
            if head != name {
                return Err(bad(format!("expected `{name}`, found `{line}`")));
            }
            Ok(parts.collect())
        };
        let header = field(SNAPSHOT_MAGIC)?;
        if header.first().map(String::as_str) != Some("1") {
            return Err(bad(format!("unsupported snapshot format {header:?}")));
        }
        let parse_num = |s: Option<&String>, what: &str| -> Result<usize> {
            s.and_then(|v| v.parse().ok())
                .ok_or_else(|| LabError::Versioning(format!("bad {what} in snapshot")))
        };
        let role = Role::parse(field("role")?.first().map(String::as_str).unwrap_or(""))?;
        let version = parse_num(field("version")?.first(), "version")? as u64;
        let family = field("family")?.first().cloned().unwrap_or_default();
        let shape = field("shape")?;
        let n = parse_num(field("values")?.first(), "value count")?;
        let values: Vec<f64> = lines
            .take(n)
            .map(|l| {
                l.trim()
                    .parse::<f64>()
                    .map_err(|e| LabError::Versioning(format!("bad value `{l}`: {e}")))
            })
            .collect::<Result<_>>()?;
        if values.len() != n {
            return Err(bad(format!("expected {n} values, found {}", values.len())));
        }
        let policy = match family.as_str() {
            "gaussian" => {
                let d = parse_num(shape.first(), "dimension")?;
                let learn = shape.get(1).map(String::as_str) == Some("true");
                if n != d * d + d {
                    return Err(bad("gaussian value count does not match shape".into()));
                }
                Policy::Gaussian(GaussianPolicy::new(
                    d,
                    values[..d * d].to_vec(),
                    values[d * d..].to_vec(),
                    learn,
                )?)
            }
            "token" => {
                let d = parse_num(shape.first(), "dimension")?;
                let v = parse_num(shape.get(1), "vocab")?;
                let l = parse_num(shape.get(2), "length")?;
                Policy::Token(TokenPolicy::from_params(d, v, l, values)?)
            }
            other => return Err(bad(format!("unknown policy family `{other}`"))),
        };
        Ok(Self::new(role, version, policy))
    }
}

/// Draws `k` string-distinct responses from `snapshot` for `prompt`.
///
/// Duplicates (on the [`Payload::dedup_key`] surface) are redrawn; more than
/// `retry_cap` redraws over the batch is a sampling-degeneracy error.
pub fn sample_k(
    snapshot: &PolicySnapshot,
    prompt: &Prompt,
    k: usize,
    retry_cap: usize,
    rng: &mut LabRng,
) -> Result<Vec<Response>> {
    if k == 0 {
        return Err(LabError::Usage("sample_k needs k >= 1".into()));
    }
    let policy = snapshot.policy();
    let mut seen = HashSet::with_capacity(k);
    let mut out = Vec::with_capacity(k);
    let mut duplicates = 0usize;
    while out.len() < k {
        let payload = policy.sample(prompt, rng);
        if !seen.insert(payload.dedup_key()) {
            duplicates += 1;
            if duplicates > retry_cap {
                return Err(LabError::SamplingDegeneracy {
                    prompt_id: prompt.id,
                    duplicates,
                    retry_cap,
                });
            }
            continue;
        }
        out.push(Response::new(policy, prompt, payload, snapshot.role())?);
    }
    Ok(out)
}
