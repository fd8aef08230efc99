//! Synthetic LLM-as-a-Judge.
//!
//! A judge blends the world's true quality with the scorer policy's own
//! length-normalized likelihood of the response:
//!
//! ```text
//! score = clamp(alpha * q*(x, y) + (1 - alpha) * proxy(scorer, x, y) + eps, 0, s_max)
//! proxy = s_max * normalized_likelihood(scorer, x, y)
//! eps   ~ Normal(0, noise_sd^2)
//! ```
//!
//! In self-coupled mode the scorer is the policy currently being trained, so
//! judging co-evolves with generation.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{LabError, Result};
use crate::policy::{PolicySnapshot, Response};
use crate::rng::LabRng;
use crate::world::{Prompt, World, SCORE_MAX};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum JudgeMode {
    /// Scored by the current model `M_i`.
    SelfCoupled,
    /// Scored by a fixed external model for the whole run.
    ExternalFixed,
}

/// Named judge strengths for the judge ablation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum JudgePreset {
    #[serde(rename = "self")]
    SelfJudge,
    ExternalWeak,
    ExternalStrong,
}

impl JudgePreset {
    pub fn parse(name: &str) -> Result<Self> {
        match name {
            "self" => Ok(Self::SelfJudge),
            "external_weak" | "external-weak" => Ok(Self::ExternalWeak),
            "external_strong" | "external-strong" => Ok(Self::ExternalStrong),
            other => Err(LabError::Config(format!("unknown judge preset `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Judge {
    mode: JudgeMode,
    fidelity: f64,
    noise_sd: f64,
}

pub const DEFAULT_JUDGE_NOISE: f64 = 0.2;

impl Judge {
    pub fn new(mode: JudgeMode, fidelity: f64, noise_sd: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&fidelity) {
            return Err(LabError::Config(format!(
                "judge fidelity must lie in [0, 1], got {fidelity}"
            )));
        }
        if !(noise_sd >= 0.0 && noise_sd.is_finite()) {
            return Err(LabError::Config(format!(
                "judge noise_sd must be non-negative, got {noise_sd}"
            )));
        }
        Ok(Self {
            mode,
            fidelity,
            noise_sd,
        })
    }

    pub fn preset(preset: JudgePreset, noise_sd: f64) -> Result<Self> {
        let (mode, fidelity) = match preset {
            JudgePreset::SelfJudge => (JudgeMode::SelfCoupled, 0.5),
            JudgePreset::ExternalWeak => (JudgeMode::ExternalFixed, 0.7),
            JudgePreset::ExternalStrong => (JudgeMode::ExternalFixed, 0.9),
        };
        Self::new(mode, fidelity, noise_sd)
    }

    /// Noise-free judge that reports true quality.
    pub fn oracle() -> Self {
        Self {
            mode: JudgeMode::ExternalFixed,
            fidelity: 1.0,
            noise_sd: 0.0,
        }
    }

    pub fn mode(&self) -> JudgeMode {
        self.mode
    }

    pub fn fidelity(&self) -> f64 {
        self.fidelity
    }

    pub fn noise_sd(&self) -> f64 {
        self.noise_sd
    }

    /// Scores one response. Always consumes exactly one normal draw from
    /// `rng`, so streams stay aligned across judge settings.
    pub fn score(
        &self,
        scorer: &PolicySnapshot,
        world: &World,
        prompt: &Prompt,
        response: &Response,
        rng: &mut LabRng,
    ) -> Result<f64> {
        let quality = world.true_quality(prompt, response)?;
        let proxy = SCORE_MAX * scorer.policy().normalized_likelihood(prompt, &response.payload)?;
        let z: f64 = rng.sample(StandardNormal);
        let raw = self.fidelity * quality + (1.0 - self.fidelity) * proxy + self.noise_sd * z;
        Ok(raw.clamp(0.0, SCORE_MAX))
    }
}
