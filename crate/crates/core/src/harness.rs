//! Experiment orchestration: configuration, the per-method iteration loop,
//! matched-budget comparisons and figure-data export.
//!
//! A run directory holds `config.toml` (the resolved configuration),
//! `run.jsonl` (one event per line, flushed as it happens), `metrics.csv`,
//! `snapshots/` and `datasets/`.
//!
//! `metrics.csv` columns are listed in [`METRIC_COLUMNS`]; row `i` describes
//! `M_i` together with the pairs curated from it, and the last row describes
//! the final model with empty pair columns. `dynamics.csv` is tidy:
//! `method,iteration,metric,value` with `metric` in `score_gap`,
//! `latent_cosine`.

use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::curation::{self, ComputeLedger, Curator, IterationState, PreferencePair};
use crate::diagnostics::{self, MetricRow, RowContext};
use crate::dpo::{self, TrainConfig, TrainCurve};
use crate::error::{LabError, Result};
use crate::judge::{Judge, JudgeMode, JudgePreset, DEFAULT_JUDGE_NOISE};
use crate::policy::{
    GaussianPolicy, Payload, Policy, PolicySnapshot, Role, TokenPolicy, DEFAULT_RETRY_CAP,
};
use crate::rng::{self, tag};
use crate::world::{Prompt, ResponseKind, World, WorldConfig};

pub use crate::diagnostics::METRIC_COLUMNS;

pub const RUN_SCHEMA_VERSION: u32 = 1;

/// Environment variable overriding the worker-thread count.
pub const WORKERS_ENV: &str = "TSR_LAB_WORKERS";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Sr,
    Tsr,
    TsrNoFuture,
    Spin,
    SpinFair,
    RejectionSft,
    SftOnly,
}

impl Method {
    pub const ALL: [Method; 7] = [
        Method::Sr,
        Method::Tsr,
        Method::TsrNoFuture,
        Method::Spin,
        Method::SpinFair,
        Method::RejectionSft,
        Method::SftOnly,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            Method::Sr => "sr",
            Method::Tsr => "tsr",
            Method::TsrNoFuture => "tsr_no_future",
            Method::Spin => "spin",
            Method::SpinFair => "spin_fair",
            Method::RejectionSft => "rejection_sft",
            Method::SftOnly => "sft_only",
        }
    }

    pub fn parse(name: &str) -> Result<Self> {
        let norm = name.replace('-', "_");
        Self::ALL
            .into_iter()
            .find(|m| m.as_str() == norm)
            .ok_or_else(|| {
                LabError::Config(format!(
                    "unknown method `{name}`; expected one of {}",
                    Self::ALL.map(|m| m.as_str()).join(", ")
                ))
            })
    }

    pub fn dpo_runs_per_iteration(&self) -> u64 {
        match self {
            Method::Tsr => 2,
            Method::RejectionSft | Method::SftOnly => 0,
            _ => 1,
        }
    }

    /// Iterations that spend exactly `budget` DPO runs (or, for the SFT-only
    /// methods, the matching number of rounds).
    pub fn iterations_for_budget(&self, budget: u64) -> Result<usize> {
        match self {
            Method::Tsr if budget % 2 != 0 => Err(LabError::Config(format!(
                "tsr spends 2 DPO runs per iteration; budget {budget} is not even"
            ))),
            Method::Tsr => Ok((budget / 2) as usize),
            Method::SftOnly => Ok(0),
            _ => Ok(budget as usize),
        }
    }
}

impl std::fmt::Display for Method {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PolicyFamily {
    Gaussian,
    Token,
}

impl PolicyFamily {
    pub fn response_kind(&self) -> ResponseKind {
        match self {
            PolicyFamily::Gaussian => ResponseKind::Latent,
            PolicyFamily::Token => ResponseKind::Tokens,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PolicyConfig {
    pub family: PolicyFamily,
    /// Standard deviation of the i.i.d. normal parameter initialization.
    pub init_sd: f64,
    /// Train the Gaussian log standard deviations alongside the mean map.
    pub learn_scale: bool,
}

impl Default for PolicyConfig {
    fn default() -> Self {
        Self {
            family: PolicyFamily::Gaussian,
            init_sd: 0.1,
            learn_scale: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct JudgeConfig {
    /// `self`, `external_weak` or `external_strong`.
    pub preset: String,
    pub noise_sd: f64,
}

impl Default for JudgeConfig {
    fn default() -> Self {
        Self {
            preset: "self".into(),
            noise_sd: DEFAULT_JUDGE_NOISE,
        }
    }
}

fn default_sft() -> TrainConfig {
    TrainConfig {
        learning_rate: 0.1,
        epochs: 300,
        ..TrainConfig::default()
    }
}

/// Everything a run needs. Every field has a default.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub method: Method,
    pub seed: u64,
    /// DPO runs the method may spend.
    pub budget: u64,
    /// Explicit iteration count; derived from `budget` when absent.
    pub iterations: Option<usize>,
    /// Samples per prompt and model.
    pub k: usize,
    pub retry_cap: usize,
    /// Teacher demonstrations per seed prompt for the initial SFT.
    pub demos_per_prompt: usize,
    pub output_dir: PathBuf,
    pub world: WorldConfig,
    pub policy: PolicyConfig,
    pub judge: JudgeConfig,
    /// DPO trainer settings.
    pub train: TrainConfig,
    /// SFT trainer settings (initialization and rejection sampling).
    #[serde(default = "default_sft")]
    pub sft: TrainConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            method: Method::Tsr,
            seed: 0,
            budget: 4,
            iterations: None,
            k: 7,
            retry_cap: DEFAULT_RETRY_CAP,
            demos_per_prompt: 50,
            output_dir: PathBuf::from("runs/default"),
            world: WorldConfig::default(),
            policy: PolicyConfig::default(),
            judge: JudgeConfig::default(),
            train: TrainConfig::default(),
            sft: default_sft(),
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        Ok(toml::from_str(text)?)
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        Self::from_toml_str(&fs::read_to_string(path)?)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        Ok(toml::to_string(self)?)
    }

    /// Iteration count after applying the budget rule.
    pub fn resolved_iterations(&self) -> Result<usize> {
        match self.iterations {
            None => self.method.iterations_for_budget(self.budget),
            Some(n) => {
                if self.method == Method::SftOnly && n > 0 {
                    return Err(LabError::Config("sft_only runs no iterations".into()));
                }
                let planned = n as u64 * self.method.dpo_runs_per_iteration();
                if planned > self.budget {
                    return Err(LabError::Config(format!(
                        "{} with {n} iterations needs {planned} DPO runs, over the budget of {}",
                        self.method, self.budget
                    )));
                }
                Ok(n)
            }
        }
    }

    pub fn validate(&self) -> Result<usize> {
        self.world.validate()?;
        self.train.validate()?;
        self.sft.validate()?;
        JudgePreset::parse(&self.judge.preset)?;
        let n = self.resolved_iterations()?;
        if n > self.world.partitions {
            return Err(LabError::Config(format!(
                "{n} iterations need {n} prompt sets but the world has {}",
                self.world.partitions
            )));
        }
        let min_k = match self.method {
            Method::Sr | Method::Tsr | Method::TsrNoFuture => 2,
            _ => 1,
        };
        if self.k < min_k {
            return Err(LabError::Config(format!(
                "{} needs k >= {min_k}, got {}",
                self.method, self.k
            )));
        }
        if self.demos_per_prompt == 0 {
            return Err(LabError::Config("demos_per_prompt must be positive".into()));
        }
        if !(self.policy.init_sd >= 0.0 && self.policy.init_sd.is_finite()) {
            return Err(LabError::Config("policy.init_sd must be non-negative".into()));
        }
        Ok(n)
    }
}

/// Runs `f` on a pool sized by [`WORKERS_ENV`] when it is set.
pub fn with_workers<T: Send>(f: impl FnOnce() -> Result<T> + Send) -> Result<T> {
    match std::env::var(WORKERS_ENV) {
        Ok(v) => {
            let n: usize = v
                .trim()
                .parse()
                .ok()
                .filter(|n| *n > 0)
                .ok_or_else(|| LabError::Config(format!("{WORKERS_ENV} must be a positive integer, got `{v}`")))?;
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(n)
                .build()
                .map_err(|e| LabError::Config(format!("cannot build worker pool: {e}")))?;
            pool.install(f)
        }
        Err(_) => f(),
    }
}

// ---------------------------------------------------------------------------
// Run log
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurveRecord {
    pub iteration: usize,
    /// Role of the trained model: `M_0`, `M_f` or `M_i` (the next current).
    pub model: String,
    pub curve: TrainCurve,
}

/// Per-iteration curation summary beyond the metric row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurationRecord {
    pub iteration: usize,
    pub prompts: usize,
    pub pairs: usize,
    pub skipped: usize,
    /// Anchored-rejection dataset, when the method builds one.
    pub d1_pairs: Option<usize>,
    pub d1_score_gap: Option<f64>,
    /// Gap of the plain self-rewarding pairs the same current samples give.
    pub sr_counterfactual_gap: Option<f64>,
    pub future_chosen: Option<usize>,
    pub anchor_rejected: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "snake_case")]
pub enum Event {
    Start {
        schema_version: u32,
        method: Method,
        seed: u64,
        iterations: usize,
        config: ExperimentConfig,
    },
    Train(CurveRecord),
    Curation(CurationRecord),
    Metrics(MetricRow),
    Snapshot { role: Role, version: u64, path: String },
    Dataset { iteration: usize, path: String, pairs: usize },
    Failure { iteration: usize, kind: String, reason: String },
    End { ledger: ComputeLedger, wall_clock_secs: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunLog {
    pub schema_version: u32,
    pub config: ExperimentConfig,
    pub rows: Vec<MetricRow>,
    pub curves: Vec<CurveRecord>,
    pub curation: Vec<CurationRecord>,
    /// Snapshot paths relative to the run directory.
    pub snapshots: Vec<String>,
    pub ledger: ComputeLedger,
    pub wall_clock_secs: f64,
    pub failure: Option<String>,
}

struct Recorder {
    dir: PathBuf,
    jsonl: BufWriter<File>,
    log: RunLog,
}

impl Recorder {
    fn create(config: &ExperimentConfig) -> Result<Self> {
        let dir = config.output_dir.clone();
        fs::create_dir_all(dir.join("snapshots"))?;
        fs::create_dir_all(dir.join("datasets"))?;
        fs::write(dir.join("config.toml"), config.to_toml_string()?)?;
        let jsonl = BufWriter::new(File::create(dir.join("run.jsonl"))?);
        Ok(Self {
            dir,
            jsonl,
            log: RunLog {
                schema_version: RUN_SCHEMA_VERSION,
                config: config.clone(),
                rows: Vec::new(),
                curves: Vec::new(),
                curation: Vec::new(),
                snapshots: Vec::new(),
                ledger: ComputeLedger::default(),
                wall_clock_secs: 0.0,
                failure: None,
            },
        })
    }

    fn emit(&mut self, event: &Event) -> Result<()> {
        serde_json::to_writer(&mut self.jsonl, event)?;
        self.jsonl.write_all(b"\n")?;
        self.jsonl.flush()?;
        Ok(())
    }

    fn curve(&mut self, iteration: usize, model: Role, curve: TrainCurve) -> Result<()> {
        let rec = CurveRecord {
            iteration,
            model: model.as_str().into(),
            curve,
        };
        self.emit(&Event::Train(rec.clone()))?;
        self.log.curves.push(rec);
        Ok(())
    }

    fn row(&mut self, row: MetricRow) -> Result<()> {
        self.emit(&Event::Metrics(row.clone()))?;
        self.log.rows.push(row);
        Ok(())
    }

    fn curation(&mut self, rec: CurationRecord) -> Result<()> {
        self.emit(&Event::Curation(rec.clone()))?;
        self.log.curation.push(rec);
        Ok(())
    }

    fn snapshot(&mut self, name: &str, snap: &PolicySnapshot) -> Result<()> {
        let rel = format!("snapshots/{name}.snap");
        fs::write(self.dir.join(&rel), snap.to_snapshot_string())?;
        self.emit(&Event::Snapshot {
            role: snap.role(),
            version: snap.version(),
            path: rel.clone(),
        })?;
        self.log.snapshots.push(rel);
        Ok(())
    }

    fn pairs(&mut self, iteration: usize, name: &str, pairs: &[PreferencePair]) -> Result<()> {
        let rel = format!("datasets/{name}.jsonl");
        curation::write_pairs_jsonl(BufWriter::new(File::create(self.dir.join(&rel))?), pairs)?;
        self.emit(&Event::Dataset {
            iteration,
            path: rel,
            pairs: pairs.len(),
        })
    }

    fn demos(&mut self, iteration: usize, name: &str, demos: &[(Prompt, Payload)]) -> Result<()> {
        #[derive(Serialize)]
        struct Demo<'a> {
            iteration: usize,
            prompt_id: u64,
            response: &'a Payload,
        }
        let rel = format!("datasets/{name}.jsonl");
        let mut out = BufWriter::new(File::create(self.dir.join(&rel))?);
        for (p, y) in demos {
            serde_json::to_writer(
                &mut out,
                &Demo {
                    iteration,
                    prompt_id: p.id,
                    response: y,
                },
            )?;
            out.write_all(b"\n")?;
        }
        out.flush()?;
        self.emit(&Event::Dataset {
            iteration,
            path: rel,
            pairs: demos.len(),
        })
    }

    fn write_metrics(&self) -> Result<()> {
        diagnostics::write_metrics_csv(
            BufWriter::new(File::create(self.dir.join("metrics.csv"))?),
            &self.log.rows,
        )
    }
}

fn error_kind(e: &LabError) -> &'static str {
    match e {
        LabError::Config(_) => "config",
        LabError::Shape(_) => "shape",
        LabError::Usage(_) => "usage",
        LabError::SamplingDegeneracy { .. } => "sampling_degeneracy",
        LabError::Numerical(_) => "numerical",
        LabError::Divergence { .. } => "divergence",
        LabError::CurationFailure(_) => "curation_failure",
        LabError::Versioning(_) => "versioning",
        _ => "io",
    }
}

/// The initial model: `M_b` trained on teacher demonstrations.
pub fn initial_model(
    config: &ExperimentConfig,
    world: &World,
) -> Result<(PolicySnapshot, TrainCurve, PolicySnapshot)> {
    let d = config.world.latent_dim;
    let mut r = rng::stream(config.seed, &[tag::POLICY_INIT]);
    let base = match config.policy.family {
        PolicyFamily::Gaussian => Policy::Gaussian(GaussianPolicy::init(
            d,
            config.policy.learn_scale,
            config.policy.init_sd,
            &mut r,
        )),
        PolicyFamily::Token => Policy::Token(TokenPolicy::init(
            d,
            config.world.vocab_size,
            config.world.response_length,
            config.policy.init_sd,
            &mut r,
        )),
    };
    let mb = PolicySnapshot::new(Role::Base, 0, base);
    let kind = config.policy.family.response_kind();
    let mut tr = rng::stream(config.seed, &[tag::TEACHER]);
    let mut demos = Vec::with_capacity(world.seed_prompts().len() * config.demos_per_prompt);
    for p in world.seed_prompts() {
        for _ in 0..config.demos_per_prompt {
            demos.push((p.clone(), world.teacher_demo(p, kind, &mut tr)));
        }
    }
    let (m0, curve) = dpo::sft_train(&mb, &demos, &config.sft, Role::Initial)?;
    Ok((m0, curve, mb))
}

/// Runs one configured experiment, writing its directory as it goes.
///
/// On failure the partial log and metrics are kept and the last `run.jsonl`
/// record is a `failure` event.
pub fn run_experiment(config: &ExperimentConfig) -> Result<RunLog> {
    let iterations = config.validate()?;
    with_workers(|| {
        let started = Instant::now();
        let mut rec = Recorder::create(config)?;
        rec.emit(&Event::Start {
            schema_version: RUN_SCHEMA_VERSION,
            method: config.method,
            seed: config.seed,
            iterations,
            config: config.clone(),
        })?;
        let mut at = 0usize;
        let outcome = drive(config, iterations, &mut rec, &mut at);
        let wall = started.elapsed().as_secs_f64();
        rec.log.wall_clock_secs = wall;
        match outcome {
            Ok(ledger) => {
                rec.log.ledger = ledger;
                rec.write_metrics()?;
                rec.emit(&Event::End {
                    ledger,
                    wall_clock_secs: wall,
                })?;
                Ok(rec.log)
            }
            Err(e) => {
                rec.log.failure = Some(e.to_string());
                rec.write_metrics()?;
                rec.emit(&Event::Failure {
                    iteration: at,
                    kind: error_kind(&e).into(),
                    reason: e.to_string(),
                })?;
                Err(e)
            }
        }
    })
}

fn ensure_budget(config: &ExperimentConfig, ledger: &ComputeLedger, extra: u64) -> Result<()> {
    if ledger.dpo_runs + extra > config.budget {
        return Err(LabError::Config(format!(
            "another {extra} DPO run(s) would exceed the budget of {}",
            config.budget
        )));
    }
    Ok(())
}

fn nonempty_pairs(pairs: &[PreferencePair], iteration: usize, what: &str) -> Result<()> {
    if pairs.is_empty() {
        return Err(LabError::CurationFailure(format!(
            "iteration {iteration}: {what} produced no valid pairs"
        )));
    }
    Ok(())
}

fn drive(
    config: &ExperimentConfig,
    iterations: usize,
    rec: &mut Recorder,
    at: &mut usize,
) -> Result<ComputeLedger> {
    let world = World::new(config.world.clone(), config.seed)?;
    let judge = Judge::preset(JudgePreset::parse(&config.judge.preset)?, config.judge.noise_sd)?;
    let kind = config.policy.family.response_kind();
    let (m0, sft_curve, _) = initial_model(config, &world)?;
    rec.curve(0, Role::Initial, sft_curve)?;
    rec.snapshot("m0", &m0)?;
    let m0 = Arc::new(m0);
    let external = (judge.mode() == JudgeMode::ExternalFixed).then(|| Arc::clone(&m0));
    let cur = Curator {
        world: &world,
        judge: &judge,
        external_scorer: external.as_deref(),
        k: config.k,
        retry_cap: config.retry_cap,
        seed: config.seed,
    };
    let mut state = IterationState::new(Arc::clone(&m0));
    state.ledger.sft_runs = 1;
    let method = config.method.as_str();
    let ctx = |i: usize, ledger: ComputeLedger| RowContext {
        world: &world,
        method,
        seed: config.seed,
        iteration: i,
        ledger,
        beta: config.train.beta,
    };

    for i in 0..iterations {
        *at = i;
        let prompts = world.partition(i)?;
        let current = Arc::clone(&state.current);
        let mut summary = CurationRecord {
            iteration: i,
            prompts: prompts.len(),
            pairs: 0,
            skipped: 0,
            d1_pairs: None,
            d1_score_gap: None,
            sr_counterfactual_gap: None,
            future_chosen: None,
            anchor_rejected: None,
        };
        let (next, pairs) = match config.method {
            Method::Tsr => {
                ensure_budget(config, &state.ledger, 2)?;
                let out = curation::temporal_sr_iteration(&cur, &state, prompts, &config.train)?;
                let sr: Vec<PreferencePair> =
                    out.cache.values().filter_map(|r| r.sr_pair(i)).collect();
                summary.d1_pairs = Some(out.d1.len());
                summary.d1_score_gap = Some(diagnostics::score_gap(&out.d1, &world)?);
                summary.sr_counterfactual_gap =
                    (!sr.is_empty()).then(|| diagnostics::score_gap(&sr, &world)).transpose()?;
                summary.future_chosen =
                    Some(out.d2.iter().filter(|p| p.chosen_source() == Role::Future).count());
                summary.anchor_rejected =
                    Some(out.d2.iter().filter(|p| p.rejected_source() == Role::Initial).count());
                summary.skipped = prompts.len() - out.d2.len();
                rec.pairs(i, &format!("iter{i}_d1"), &out.d1)?;
                rec.pairs(i, &format!("iter{i}_d2"), &out.d2)?;
                rec.curve(i, Role::Future, out.future_curve.clone())?;
                rec.snapshot(&format!("mf{i}"), &out.future)?;
                rec.curve(i, Role::Current, out.policy_curve.clone())?;
                let next = (*out.next.current).clone();
                state.ledger = out.next.ledger;
                (next, out.d2)
            }
            Method::TsrNoFuture => {
                ensure_budget(config, &state.ledger, 1)?;
                let d1 = curation::phase1_anchored_rejection(&cur, &mut state, prompts)?;
                nonempty_pairs(&d1, i, "anchored rejection")?;
                summary.d1_pairs = Some(d1.len());
                summary.d1_score_gap = Some(diagnostics::score_gap(&d1, &world)?);
                summary.anchor_rejected =
                    Some(d1.iter().filter(|p| p.rejected_source() == Role::Initial).count());
                summary.skipped = prompts.len() - d1.len();
                rec.pairs(i, &format!("iter{i}_d1"), &d1)?;
                let (next, curve) = dpo::dpo_train(&current, &d1, &config.train, None)?;
                state.ledger.dpo_runs += 1;
                rec.curve(i, Role::Current, curve)?;
                (next, d1)
            }
            Method::Sr | Method::Spin | Method::SpinFair => {
                ensure_budget(config, &state.ledger, 1)?;
                let (pairs, skipped) = match config.method {
                    Method::Sr => curation::build_sr_pairs(&cur, &current, prompts, i, &mut state.ledger)?,
                    Method::Spin => {
                        let p = curation::build_spin_pairs(&cur, &current, prompts, kind, i, &mut state.ledger)?;
                        let s = prompts.len() - p.len();
                        (p, s)
                    }
                    _ => {
                        let p = curation::build_spin_fair_pairs(&cur, &current, prompts, kind, i, &mut state.ledger)?;
                        let s = prompts.len() - p.len();
                        (p, s)
                    }
                };
                nonempty_pairs(&pairs, i, method)?;
                summary.skipped = skipped;
                rec.pairs(i, &format!("iter{i}_pairs"), &pairs)?;
                let (next, curve) = dpo::dpo_train(&current, &pairs, &config.train, None)?;
                state.ledger.dpo_runs += 1;
                rec.curve(i, Role::Current, curve)?;
                (next, pairs)
            }
            Method::RejectionSft => {
                let (next, curve, demos) = curation::rejection_sampling_round(
                    &cur,
                    &current,
                    prompts,
                    &config.sft,
                    i,
                    &mut state.ledger,
                )?;
                let flat: Vec<(Prompt, Payload)> =
                    demos.into_iter().map(|(p, r)| (p, r.payload)).collect();
                rec.demos(i, &format!("iter{i}_demos"), &flat)?;
                rec.curve(i, Role::Current, curve)?;
                (next, Vec::new())
            }
            Method::SftOnly => unreachable!("sft_only resolves to zero iterations"),
        };
        summary.pairs = pairs.len();
        rec.curation(summary)?;
        let row = diagnostics::snapshot_metrics(
            &ctx(i, state.ledger),
            current.policy(),
            (!pairs.is_empty()).then(|| next.policy()),
            &pairs,
        )?;
        rec.row(row)?;
        rec.snapshot(&format!("m{}", i + 1), &next)?;
        state = state.advance(next);
    }
    *at = iterations;
    let last = diagnostics::snapshot_metrics(&ctx(iterations, state.ledger), state.current.policy(), None, &[])?;
    rec.row(last)?;
    Ok(state.ledger)
}

// ---------------------------------------------------------------------------
// Comparison and export
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub method: Method,
    pub seed: u64,
    pub iterations: usize,
    pub dpo_runs: u64,
    pub generations: u64,
    pub initial_score_gap: Option<f64>,
    pub final_score_gap: Option<f64>,
    pub initial_latent_cosine: Option<f64>,
    pub final_latent_cosine: Option<f64>,
    pub initial_true_quality: f64,
    pub final_true_quality: f64,
}

pub const SUMMARY_COLUMNS: [&str; 11] = [
    "method",
    "seed",
    "iterations",
    "dpo_runs",
    "generations",
    "initial_score_gap",
    "final_score_gap",
    "initial_latent_cosine",
    "final_latent_cosine",
    "initial_true_quality",
    "final_true_quality",
];

impl SummaryRow {
    pub fn from_log(log: &RunLog) -> Result<Self> {
        let first = log
            .rows
            .first()
            .ok_or_else(|| LabError::Usage("run log has no metric rows".into()))?;
        let last = log.rows.last().expect("non-empty");
        let last_paired = log.rows.iter().rev().find(|r| r.n_pairs > 0);
        Ok(Self {
            method: log.config.method,
            seed: log.config.seed,
            iterations: log.rows.len() - 1,
            dpo_runs: log.ledger.dpo_runs,
            generations: log.ledger.generations,
            initial_score_gap: first.mean_score_gap,
            final_score_gap: last_paired.and_then(|r| r.mean_score_gap),
            initial_latent_cosine: first.mean_latent_cosine,
            final_latent_cosine: last_paired.and_then(|r| r.mean_latent_cosine),
            initial_true_quality: first.mean_policy_true_quality,
            final_true_quality: last.mean_policy_true_quality,
        })
    }
}

fn cell(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

pub fn write_summary_csv<W: Write>(out: W, rows: &[SummaryRow]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(SUMMARY_COLUMNS)?;
    for r in rows {
        w.write_record([
            r.method.as_str().to_string(),
            r.seed.to_string(),
            r.iterations.to_string(),
            r.dpo_runs.to_string(),
            r.generations.to_string(),
            cell(r.initial_score_gap),
            cell(r.final_score_gap),
            cell(r.initial_latent_cosine),
            cell(r.final_latent_cosine),
            r.initial_true_quality.to_string(),
            r.final_true_quality.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Debug, Clone)]
pub struct Comparison {
    pub summary: Vec<SummaryRow>,
    pub logs: Vec<RunLog>,
    pub dynamics: Vec<DynamicsRow>,
}

impl Comparison {
    pub fn summary_for(&self, method: Method) -> Vec<&SummaryRow> {
        self.summary.iter().filter(|r| r.method == method).collect()
    }
}

/// Runs every `(method, seed)` at the same DPO budget under `out_dir`.
///
/// Writes `<out>/<method>/seed-<s>/` run directories plus `summary.csv` and
/// `dynamics.csv` at the top level.
pub fn compare_methods(
    base: &ExperimentConfig,
    methods: &[Method],
    seeds: &[u64],
    budget: u64,
    out_dir: &Path,
) -> Result<Comparison> {
    if methods.is_empty() || seeds.is_empty() {
        return Err(LabError::Usage("compare needs at least one method and one seed".into()));
    }
    let mut configs = Vec::new();
    for &m in methods {
        // Validate every arm before spending compute on any of them.
        m.iterations_for_budget(budget)?;
        for &s in seeds {
            let cfg = ExperimentConfig {
                method: m,
                seed: s,
                budget,
                iterations: None,
                output_dir: out_dir.join(m.as_str()).join(format!("seed-{s}")),
                ..base.clone()
            };
            cfg.validate()?;
            configs.push(cfg);
        }
    }
    fs::create_dir_all(out_dir)?;
    let mut logs = Vec::with_capacity(configs.len());
    let mut summary = Vec::with_capacity(configs.len());
    for cfg in &configs {
        let log = run_experiment(cfg)?;
        if log.ledger.dpo_runs > budget {
            return Err(LabError::Config(format!(
                "{} spent {} DPO runs over the budget of {budget}",
                cfg.method, log.ledger.dpo_runs
            )));
        }
        summary.push(SummaryRow::from_log(&log)?);
        logs.push(log);
    }
    write_summary_csv(BufWriter::new(File::create(out_dir.join("summary.csv"))?), &summary)?;
    let dynamics = dynamics_from_rows(logs.iter().flat_map(|l| l.rows.iter()));
    write_dynamics_csv(BufWriter::new(File::create(out_dir.join("dynamics.csv"))?), &dynamics)?;
    Ok(Comparison {
        summary,
        logs,
        dynamics,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DynamicsRow {
    pub method: String,
    pub iteration: usize,
    pub metric: String,
    pub value: f64,
}

pub const DYNAMICS_COLUMNS: [&str; 4] = ["method", "iteration", "metric", "value"];

/// Seed-averaged score-gap and cosine series, methods in first-seen order.
pub fn dynamics_from_rows<'a>(rows: impl Iterator<Item = &'a MetricRow>) -> Vec<DynamicsRow> {
    use std::collections::BTreeMap;
    let mut order: Vec<String> = Vec::new();
    let mut acc: BTreeMap<(usize, usize, usize), (f64, usize)> = BTreeMap::new();
    for r in rows {
        let mi = match order.iter().position(|m| *m == r.method) {
            Some(i) => i,
            None => {
                order.push(r.method.clone());
                order.len() - 1
            }
        };
        for (k, v) in [r.mean_score_gap, r.mean_latent_cosine].into_iter().enumerate() {
            if let Some(v) = v {
                let e = acc.entry((mi, r.iteration, k)).or_insert((0.0, 0));
                e.0 += v;
                e.1 += 1;
            }
        }
    }
    acc.into_iter()
        .map(|((mi, it, k), (sum, n))| DynamicsRow {
            method: order[mi].clone(),
            iteration: it,
            metric: ["score_gap", "latent_cosine"][k].into(),
            value: sum / n as f64,
        })
        .collect()
}

pub fn write_dynamics_csv<W: Write>(out: W, rows: &[DynamicsRow]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(DYNAMICS_COLUMNS)?;
    for r in rows {
        w.write_record([
            r.method.clone(),
            r.iteration.to_string(),
            r.metric.clone(),
            r.value.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Metric rows of one `run.jsonl`, checking its schema version.
pub fn read_run_rows(path: &Path) -> Result<Vec<MetricRow>> {
    let file = BufReader::new(File::open(path)?);
    let mut rows = Vec::new();
    let mut version = None;
    for line in file.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let v: serde_json::Value = serde_json::from_str(&line)?;
        match v.get("event").and_then(|e| e.as_str()) {
            Some("start") => {
                version = v.get("schema_version").and_then(|s| s.as_u64());
            }
            Some("metrics") => rows.push(serde_json::from_value(v)?),
            _ => {}
        }
    }
    match version {
        Some(v) if v == RUN_SCHEMA_VERSION as u64 => Ok(rows),
        Some(v) => Err(LabError::Versioning(format!(
            "{} has run schema {v}, expected {RUN_SCHEMA_VERSION}",
            path.display()
        ))),
        None => Err(LabError::Versioning(format!(
            "{} has no start record with a schema version",
            path.display()
        ))),
    }
}

/// Merges run logs (files or run directories) into dynamics rows.
pub fn export_figure_data(runlog_paths: &[PathBuf]) -> Result<Vec<DynamicsRow>> {
    if runlog_paths.is_empty() {
        return Err(LabError::Usage("export needs at least one run log".into()));
    }
    let mut all = Vec::new();
    for p in runlog_paths {
        let file = if p.is_dir() { p.join("run.jsonl") } else { p.clone() };
        all.extend(read_run_rows(&file)?);
    }
    Ok(dynamics_from_rows(all.iter()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn budget_resolution() {
        assert_eq!(Method::Tsr.iterations_for_budget(4).unwrap(), 2);
        assert_eq!(Method::Sr.iterations_for_budget(4).unwrap(), 4);
        assert_eq!(Method::SftOnly.iterations_for_budget(4).unwrap(), 0);
        assert!(matches!(Method::Tsr.iterations_for_budget(3), Err(LabError::Config(_))));
        let over = ExperimentConfig {
            method: Method::Tsr,
            iterations: Some(3),
            ..ExperimentConfig::default()
        };
        assert!(matches!(over.validate(), Err(LabError::Config(_))));
    }

    #[test]
    fn method_names_round_trip() {
        for m in Method::ALL {
            assert_eq!(Method::parse(m.as_str()).unwrap(), m);
        }
        assert_eq!(Method::parse("tsr-no-future").unwrap(), Method::TsrNoFuture);
        assert!(Method::parse("ppo").is_err());
    }

    #[test]
    fn config_toml_round_trip_and_defaults() {
        let cfg = ExperimentConfig::default();
        let text = cfg.to_toml_string().unwrap();
        assert_eq!(ExperimentConfig::from_toml_str(&text).unwrap(), cfg);
        let partial = ExperimentConfig::from_toml_str("method = \"sr\"\n[train]\nbeta = 0.2\n").unwrap();
        assert_eq!(partial.method, Method::Sr);
        assert_eq!(partial.train.beta, 0.2);
        assert_eq!(partial.sft, default_sft());
        assert!(ExperimentConfig::from_toml_str("bogus = 1").is_err());
    }

    #[test]
    fn dynamics_average_and_order() {
        let row = |m: &str, it, gap| MetricRow {
            method: m.into(),
            seed: 0,
            iteration: it,
            n_pairs: 1,
            mean_score_gap: Some(gap),
            mean_latent_cosine: None,
            mean_direction_norm: None,
            mean_adaptive_weight: None,
            mean_policy_true_quality: 0.0,
            generations: 0,
            judge_calls: 0,
            dpo_runs: 0,
            sft_runs: 0,
        };
        let rows = [row("sr", 0, 1.0), row("tsr", 0, 4.0), row("sr", 0, 3.0)];
        let d = dynamics_from_rows(rows.iter());
        assert_eq!(d.len(), 2);
        assert_eq!((d[0].method.as_str(), d[0].value), ("sr", 2.0));
        assert_eq!(d[1].method, "tsr");
        assert!(export_figure_data(&[]).is_err());
    }
}
