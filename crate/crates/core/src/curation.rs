//! Preference-pair construction: the two-phase temporal loop, standard
//! self-rewarding, SPIN, SPIN-Fair and rejection-sampling SFT.
//!
//! Selection rules are exposed as pure functions over score vectors so they
//! can be checked exhaustively. Argmax/argmin ties go to the lowest index;
//! the Phase 1 minimum comparison and Phase 2 maximum comparison are strict,
//! so equality falls back to the current model.

use std::collections::BTreeMap;
use std::io::{BufRead, Write};
use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dpo::{self, TrainConfig, TrainCurve};
use crate::error::{LabError, Result};
use crate::judge::{Judge, JudgeMode};
use crate::policy::{sample_k, Payload, PolicySnapshot, Response, Role};
use crate::rng::{self, tag};
use crate::world::{Prompt, ResponseKind, World};

/// How a pair was constructed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    SelfRewarding,
    AnchoredRejection,
    FutureGuided,
    Spin,
    SpinFair,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PreferencePair {
    pub prompt: Prompt,
    pub chosen: Response,
    pub rejected: Response,
    /// Judge scores; absent for SPIN pairs, which are never judged.
    pub s_chosen: Option<f64>,
    pub s_rejected: Option<f64>,
    pub iteration: usize,
    pub phase: Phase,
}

impl PreferencePair {
    pub fn new(
        prompt: Prompt,
        chosen: Response,
        rejected: Response,
        s_chosen: Option<f64>,
        s_rejected: Option<f64>,
        iteration: usize,
        phase: Phase,
    ) -> Self {
        Self {
            prompt,
            chosen,
            rejected,
            s_chosen,
            s_rejected,
            iteration,
            phase,
        }
    }

    pub fn chosen_source(&self) -> Role {
        self.chosen.source
    }

    pub fn rejected_source(&self) -> Role {
        self.rejected.source
    }

    pub fn distinct(&self) -> bool {
        !self.chosen.payload.same_surface(&self.rejected.payload)
    }

    /// Strict score gap (when scored) and payload distinctness.
    pub fn is_valid(&self) -> bool {
        let scored = match (self.s_chosen, self.s_rejected) {
            (Some(c), Some(r)) => c > r,
            (None, None) => true,
            _ => false,
        };
        scored && self.distinct()
    }

    /// The same pair with chosen and rejected exchanged.
    pub fn swapped(&self) -> Self {
        Self {
            chosen: self.rejected.clone(),
            rejected: self.chosen.clone(),
            s_chosen: self.s_rejected,
            s_rejected: self.s_chosen,
            ..self.clone()
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ComputeLedger {
    pub generations: u64,
    pub judge_calls: u64,
    pub dpo_runs: u64,
    pub sft_runs: u64,
}

impl ComputeLedger {
    fn charge(&mut self, generations: usize, judge_calls: usize) {
        self.generations += generations as u64;
        self.judge_calls += judge_calls as u64;
    }
}

// ---------------------------------------------------------------------------
// Selection rules
// ---------------------------------------------------------------------------

/// Index of the first maximum.
pub fn argmax_first(xs: &[f64]) -> Option<usize> {
    let mut best: Option<usize> = None;
    for (i, &v) in xs.iter().enumerate() {
        if best.is_none_or(|b| v > xs[b]) {
            best = Some(i);
        }
    }
    best
}

/// Index of the first minimum.
pub fn argmin_first(xs: &[f64]) -> Option<usize> {
    let mut best: Option<usize> = None;
    for (i, &v) in xs.iter().enumerate() {
        if best.is_none_or(|b| v < xs[b]) {
            best = Some(i);
        }
    }
    best
}

/// Self-rewarding selection: `(argmax, argmin)` when the best score strictly
/// exceeds the worst.
pub fn select_sr(scores: &[f64]) -> Option<(usize, usize)> {
    let hi = argmax_first(scores)?;
    let lo = argmin_first(scores)?;
    (scores[hi] > scores[lo]).then_some((hi, lo))
}

/// Which sample set a selected response comes from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Pick {
    Current(usize),
    Anchor(usize),
    Future(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Phase1Selection {
    pub chosen: usize,
    pub rejected: Pick,
}

/// Anchored rejection: chosen is the best current response; rejected is the
/// anchor's worst if `min(s_0) < min(s_i)`, else the current worst.
pub fn select_phase1(s_current: &[f64], s_anchor: &[f64]) -> Option<Phase1Selection> {
    let chosen = argmax_first(s_current)?;
    let lo_i = argmin_first(s_current)?;
    let lo_0 = argmin_first(s_anchor)?;
    let rejected = if s_anchor[lo_0] < s_current[lo_i] {
        Pick::Anchor(lo_0)
    } else {
        Pick::Current(lo_i)
    };
    Some(Phase1Selection { chosen, rejected })
}

/// Future-guided chosen: the future model's best if `max(s_f) > max(s_i)`.
pub fn select_phase2(s_future: &[f64], s_current: &[f64]) -> Option<Pick> {
    let hi_f = argmax_first(s_future)?;
    let hi_i = argmax_first(s_current)?;
    Some(if s_future[hi_f] > s_current[hi_i] {
        Pick::Future(hi_f)
    } else {
        Pick::Current(hi_i)
    })
}

/// Rejection-sampling demo: the first best-scored candidate.
pub fn select_best(scores: &[f64]) -> Option<usize> {
    argmax_first(scores)
}

/// SPIN-Fair: the worst candidate, kept only when the label outscores it.
pub fn select_spin_fair(label_score: f64, scores: &[f64]) -> Option<usize> {
    let lo = argmin_first(scores)?;
    (label_score > scores[lo]).then_some(lo)
}

// ---------------------------------------------------------------------------
// Context and state
// ---------------------------------------------------------------------------

/// Shared inputs for one run's curation calls.
#[derive(Debug, Clone, Copy)]
pub struct Curator<'a> {
    pub world: &'a World,
    pub judge: &'a Judge,
    /// Fixed scorer for external judges; ignored in self-coupled mode.
    pub external_scorer: Option<&'a PolicySnapshot>,
    pub k: usize,
    pub retry_cap: usize,
    pub seed: u64,
}

impl<'a> Curator<'a> {
    fn scorer<'b>(&'b self, current: &'b PolicySnapshot) -> Result<&'b PolicySnapshot> {
        match self.judge.mode() {
            JudgeMode::SelfCoupled => Ok(current),
            JudgeMode::ExternalFixed => self.external_scorer.ok_or_else(|| {
                LabError::Config("external judge needs a fixed scorer snapshot".into())
            }),
        }
    }

    fn draw(
        &self,
        policy: &PolicySnapshot,
        prompt: &Prompt,
        iteration: usize,
        sample_tag: u64,
        count: usize,
    ) -> Result<Vec<Response>> {
        let mut r = rng::stream(self.seed, &[sample_tag, iteration as u64, prompt.id]);
        sample_k(policy, prompt, count, self.retry_cap, &mut r)
    }

    fn score_all(
        &self,
        scorer: &PolicySnapshot,
        prompt: &Prompt,
        responses: &[Response],
        iteration: usize,
        judge_tag: u64,
    ) -> Result<Vec<f64>> {
        let mut r = rng::stream(self.seed, &[judge_tag, iteration as u64, prompt.id]);
        responses
            .iter()
            .map(|y| self.judge.score(scorer, self.world, prompt, y, &mut r))
            .collect()
    }
}

/// Phase 1 outputs cached per prompt for Phase 2.
#[derive(Debug, Clone, PartialEq)]
pub struct Phase1Record {
    pub prompt: Prompt,
    pub current: Vec<Response>,
    pub current_scores: Vec<f64>,
    pub anchor: Vec<Response>,
    pub anchor_scores: Vec<f64>,
    pub selection: Phase1Selection,
}

impl Phase1Record {
    pub fn chosen(&self) -> (&Response, f64) {
        let i = self.selection.chosen;
        (&self.current[i], self.current_scores[i])
    }

    pub fn rejected(&self) -> (&Response, f64) {
        match self.selection.rejected {
            Pick::Anchor(i) => (&self.anchor[i], self.anchor_scores[i]),
            Pick::Current(i) | Pick::Future(i) => (&self.current[i], self.current_scores[i]),
        }
    }

    /// The self-rewarding pair the same current samples would have produced.
    pub fn sr_pair(&self, iteration: usize) -> Option<PreferencePair> {
        let (hi, lo) = select_sr(&self.current_scores)?;
        let pair = PreferencePair::new(
            self.prompt.clone(),
            self.current[hi].clone(),
            self.current[lo].clone(),
            Some(self.current_scores[hi]),
            Some(self.current_scores[lo]),
            iteration,
            Phase::SelfRewarding,
        );
        pair.is_valid().then_some(pair)
    }
}

#[derive(Debug, Clone)]
pub struct IterationState {
    pub iteration: usize,
    /// `M_0`, shared by every iteration.
    pub anchor: Arc<PolicySnapshot>,
    pub current: Arc<PolicySnapshot>,
    pub future: Option<Arc<PolicySnapshot>>,
    pub cache: BTreeMap<u64, Phase1Record>,
    pub ledger: ComputeLedger,
}

impl IterationState {
    pub fn new(anchor: Arc<PolicySnapshot>) -> Self {
        let current = Arc::new(anchor.with_role(Role::Current));
        Self {
            iteration: 0,
            anchor,
            current,
            future: None,
            cache: BTreeMap::new(),
            ledger: ComputeLedger::default(),
        }
    }

    /// Moves to the next iteration with `next` as the current model.
    pub fn advance(&self, next: PolicySnapshot) -> Self {
        Self {
            iteration: self.iteration + 1,
            anchor: Arc::clone(&self.anchor),
            current: Arc::new(next.with_role(Role::Current)),
            future: None,
            cache: BTreeMap::new(),
            ledger: self.ledger,
        }
    }
}

// ---------------------------------------------------------------------------
// Strategies
// ---------------------------------------------------------------------------

/// Standard self-rewarding pairs: best and worst of `k` current samples.
/// Returns the valid pairs and the number of skipped prompts.
pub fn build_sr_pairs(
    cur: &Curator,
    current: &PolicySnapshot,
    prompts: &[Prompt],
    iteration: usize,
    ledger: &mut ComputeLedger,
) -> Result<(Vec<PreferencePair>, usize)> {
    if cur.k < 2 {
        return Err(LabError::Usage("self-rewarding pairs need k >= 2".into()));
    }
    let scorer = cur.scorer(current)?;
    let per_prompt: Vec<Option<PreferencePair>> = prompts
        .par_iter()
        .map(|p| {
            let ys = cur.draw(current, p, iteration, tag::SAMPLE_CURRENT, cur.k)?;
            let s = cur.score_all(scorer, p, &ys, iteration, tag::JUDGE_CURRENT)?;
            Ok(select_sr(&s).and_then(|(hi, lo)| {
                let pair = PreferencePair::new(
                    p.clone(),
                    ys[hi].clone(),
                    ys[lo].clone(),
                    Some(s[hi]),
                    Some(s[lo]),
                    iteration,
                    Phase::SelfRewarding,
                );
                pair.is_valid().then_some(pair)
            }))
        })
        .collect::<Result<_>>()?;
    ledger.charge(cur.k * prompts.len(), cur.k * prompts.len());
    let skipped = per_prompt.iter().filter(|p| p.is_none()).count();
    Ok((per_prompt.into_iter().flatten().collect(), skipped))
}

/// Phase 1: anchored rejection. Fills `state.cache` for every prompt and
/// returns `D_1`.
pub fn phase1_anchored_rejection(
    cur: &Curator,
    state: &mut IterationState,
    prompts: &[Prompt],
) -> Result<Vec<PreferencePair>> {
    if cur.k == 0 {
        return Err(LabError::Usage("phase 1 needs k >= 1".into()));
    }
    let it = state.iteration;
    let current = Arc::clone(&state.current);
    let anchor = Arc::clone(&state.anchor);
    let scorer = cur.scorer(&current)?;
    let records: Vec<Phase1Record> = prompts
        .par_iter()
        .map(|p| {
            let r_i = cur.draw(&current, p, it, tag::SAMPLE_CURRENT, cur.k)?;
            let s_i = cur.score_all(scorer, p, &r_i, it, tag::JUDGE_CURRENT)?;
            let r_0 = cur.draw(&anchor, p, it, tag::SAMPLE_ANCHOR, cur.k)?;
            let s_0 = cur.score_all(scorer, p, &r_0, it, tag::JUDGE_ANCHOR)?;
            let selection = select_phase1(&s_i, &s_0).expect("k >= 1");
            Ok(Phase1Record {
                prompt: p.clone(),
                current: r_i,
                current_scores: s_i,
                anchor: r_0,
                anchor_scores: s_0,
                selection,
            })
        })
        .collect::<Result<_>>()?;
    state.ledger.charge(2 * cur.k * prompts.len(), 2 * cur.k * prompts.len());
    let mut d1 = Vec::new();
    state.cache.clear();
    for rec in records {
        let (c, sc) = rec.chosen();
        let (r, sr) = rec.rejected();
        let pair = PreferencePair::new(
            rec.prompt.clone(),
            c.clone(),
            r.clone(),
            Some(sc),
            Some(sr),
            it,
            Phase::AnchoredRejection,
        );
        if pair.is_valid() {
            d1.push(pair);
        }
        state.cache.insert(rec.prompt.id, rec);
    }
    Ok(d1)
}

/// `M_f = DPO(M_i, D_1)` with `M_i` as reference.
pub fn train_future(
    state: &mut IterationState,
    d1: &[PreferencePair],
    config: &TrainConfig,
) -> Result<TrainCurve> {
    if d1.is_empty() {
        return Err(LabError::CurationFailure(format!(
            "iteration {}: phase 1 produced no valid pairs, cannot train the future model",
            state.iteration
        )));
    }
    let (mf, curve) = dpo::dpo_train(&state.current, d1, config, None)?;
    state.ledger.dpo_runs += 1;
    state.future = Some(Arc::new(mf.with_role(Role::Future)));
    Ok(curve)
}

/// Phase 2: future-guided chosen, paired with the cached Phase 1 rejected.
pub fn phase2_future_guided(
    cur: &Curator,
    state: &mut IterationState,
    prompts: &[Prompt],
) -> Result<Vec<PreferencePair>> {
    let it = state.iteration;
    let future = state
        .future
        .clone()
        .ok_or_else(|| LabError::Usage("phase 2 needs a trained future model".into()))?;
    for p in prompts {
        if !state.cache.contains_key(&p.id) {
            return Err(LabError::Usage(format!(
                "phase 2: prompt {} has no phase 1 record",
                p.id
            )));
        }
    }
    let scorer = cur.scorer(&state.current)?;
    let cache = &state.cache;
    let pairs: Vec<Option<PreferencePair>> = prompts
        .par_iter()
        .map(|p| {
            let rec = &cache[&p.id];
            let r_f = cur.draw(&future, p, it, tag::SAMPLE_FUTURE, cur.k)?;
            let s_f = cur.score_all(scorer, p, &r_f, it, tag::JUDGE_FUTURE)?;
            let (chosen, s_chosen) = match select_phase2(&s_f, &rec.current_scores).expect("k >= 1") {
                Pick::Future(j) => (r_f[j].clone(), s_f[j]),
                Pick::Current(j) | Pick::Anchor(j) => {
                    (rec.current[j].clone(), rec.current_scores[j])
                }
            };
            let (rejected, s_rejected) = rec.rejected();
            let pair = PreferencePair::new(
                p.clone(),
                chosen,
                rejected.clone(),
                Some(s_chosen),
                Some(s_rejected),
                it,
                Phase::FutureGuided,
            );
            Ok(pair.is_valid().then_some(pair))
        })
        .collect::<Result<_>>()?;
    state.ledger.charge(cur.k * prompts.len(), cur.k * prompts.len());
    Ok(pairs.into_iter().flatten().collect())
}

/// Everything one temporal iteration produced.
#[derive(Debug, Clone)]
pub struct TemporalOutcome {
    pub next: IterationState,
    pub d1: Vec<PreferencePair>,
    pub d2: Vec<PreferencePair>,
    pub future: Arc<PolicySnapshot>,
    pub future_curve: TrainCurve,
    pub policy_curve: TrainCurve,
    /// Phase 1 records of the finished iteration.
    pub cache: BTreeMap<u64, Phase1Record>,
}

/// Phase 1, future model, Phase 2, then `M_{i+1} = DPO(M_i, D_2)`.
pub fn temporal_sr_iteration(
    cur: &Curator,
    state: &IterationState,
    prompts: &[Prompt],
    config: &TrainConfig,
) -> Result<TemporalOutcome> {
    let mut st = state.clone();
    let d1 = phase1_anchored_rejection(cur, &mut st, prompts)?;
    let future_curve = train_future(&mut st, &d1, config)?;
    let d2 = phase2_future_guided(cur, &mut st, prompts)?;
    if d2.is_empty() {
        return Err(LabError::CurationFailure(format!(
            "iteration {}: phase 2 produced no valid pairs",
            st.iteration
        )));
    }
    let (next_policy, policy_curve) = dpo::dpo_train(&st.current, &d2, config, None)?;
    st.ledger.dpo_runs += 1;
    let future = st.future.clone().expect("trained above");
    let cache = std::mem::take(&mut st.cache);
    Ok(TemporalOutcome {
        next: st.advance(next_policy),
        d1,
        d2,
        future,
        future_curve,
        policy_curve,
        cache,
    })
}

/// SPIN: label as chosen, one unscored current sample as rejected.
pub fn build_spin_pairs(
    cur: &Curator,
    current: &PolicySnapshot,
    prompts: &[Prompt],
    kind: ResponseKind,
    iteration: usize,
    ledger: &mut ComputeLedger,
) -> Result<Vec<PreferencePair>> {
    let pairs: Vec<Option<PreferencePair>> = prompts
        .par_iter()
        .map(|p| {
            let label = label_response(cur.world, current, p, kind)?;
            let y = cur.draw(current, p, iteration, tag::SAMPLE_CURRENT, 1)?.remove(0);
            let pair = PreferencePair::new(p.clone(), label, y, None, None, iteration, Phase::Spin);
            Ok(pair.distinct().then_some(pair))
        })
        .collect::<Result<_>>()?;
    ledger.charge(prompts.len(), 0);
    Ok(pairs.into_iter().flatten().collect())
}

/// SPIN-Fair: label as chosen, lowest-scored of `k` current samples as
/// rejected, kept when the label outscores it.
pub fn build_spin_fair_pairs(
    cur: &Curator,
    current: &PolicySnapshot,
    prompts: &[Prompt],
    kind: ResponseKind,
    iteration: usize,
    ledger: &mut ComputeLedger,
) -> Result<Vec<PreferencePair>> {
    if cur.k == 0 {
        return Err(LabError::Usage("SPIN-Fair needs k >= 1".into()));
    }
    let scorer = cur.scorer(current)?;
    let pairs: Vec<Option<PreferencePair>> = prompts
        .par_iter()
        .map(|p| {
            let label = label_response(cur.world, current, p, kind)?;
            let mut r = rng::stream(cur.seed, &[tag::JUDGE_LABEL, iteration as u64, p.id]);
            let s_label = cur.judge.score(scorer, cur.world, p, &label, &mut r)?;
            let ys = cur.draw(current, p, iteration, tag::SAMPLE_CURRENT, cur.k)?;
            let s = cur.score_all(scorer, p, &ys, iteration, tag::JUDGE_CURRENT)?;
            Ok(select_spin_fair(s_label, &s).and_then(|lo| {
                let pair = PreferencePair::new(
                    p.clone(),
                    label,
                    ys[lo].clone(),
                    Some(s_label),
                    Some(s[lo]),
                    iteration,
                    Phase::SpinFair,
                );
                pair.is_valid().then_some(pair)
            }))
        })
        .collect::<Result<_>>()?;
    ledger.charge(cur.k * prompts.len(), (cur.k + 1) * prompts.len());
    Ok(pairs.into_iter().flatten().collect())
}

/// Demos chosen by rejection sampling: the best-scored of `k` samples per
/// prompt (the raw sample when `k == 1`).
pub fn rejection_sampling_demos(
    cur: &Curator,
    current: &PolicySnapshot,
    prompts: &[Prompt],
    iteration: usize,
    ledger: &mut ComputeLedger,
) -> Result<Vec<(Prompt, Response)>> {
    if cur.k == 0 {
        return Err(LabError::Usage("rejection sampling needs k >= 1".into()));
    }
    let scorer = cur.scorer(current)?;
    let demos: Vec<(Prompt, Response)> = prompts
        .par_iter()
        .map(|p| {
            let mut ys = cur.draw(current, p, iteration, tag::SAMPLE_CURRENT, cur.k)?;
            if cur.k == 1 {
                return Ok((p.clone(), ys.remove(0)));
            }
            let s = cur.score_all(scorer, p, &ys, iteration, tag::JUDGE_CURRENT)?;
            let best = select_best(&s).expect("k >= 1");
            Ok((p.clone(), ys.swap_remove(best)))
        })
        .collect::<Result<_>>()?;
    let judged = if cur.k == 1 { 0 } else { cur.k * prompts.len() };
    ledger.charge(cur.k * prompts.len(), judged);
    Ok(demos)
}

/// `M_{i+1} = SFT(M_i, best-of-k demos)`.
pub fn rejection_sampling_round(
    cur: &Curator,
    current: &PolicySnapshot,
    prompts: &[Prompt],
    config: &TrainConfig,
    iteration: usize,
    ledger: &mut ComputeLedger,
) -> Result<(PolicySnapshot, TrainCurve, Vec<(Prompt, Response)>)> {
    let demos = rejection_sampling_demos(cur, current, prompts, iteration, ledger)?;
    let flat: Vec<(Prompt, Payload)> = demos
        .iter()
        .map(|(p, r)| (p.clone(), r.payload.clone()))
        .collect();
    let (next, curve) = dpo::sft_train(current, &flat, config, Role::Current)?;
    ledger.sft_runs += 1;
    Ok((next, curve, demos))
}

fn label_response(world: &World, encoder: &PolicySnapshot, prompt: &Prompt, kind: ResponseKind) -> Result<Response> {
    Response::new(encoder.policy(), prompt, world.label(prompt, kind), Role::Label)
}

// ---------------------------------------------------------------------------
// JSONL
// ---------------------------------------------------------------------------

/// One line of the preference-dataset JSONL format.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairRecord {
    pub iteration: usize,
    pub phase: Phase,
    pub prompt_id: u64,
    pub chosen: Payload,
    pub rejected: Payload,
    pub s_chosen: Option<f64>,
    pub s_rejected: Option<f64>,
    pub chosen_source: Role,
    pub rejected_source: Role,
}

impl From<&PreferencePair> for PairRecord {
    fn from(p: &PreferencePair) -> Self {
        Self {
            iteration: p.iteration,
            phase: p.phase,
            prompt_id: p.prompt.id,
            chosen: p.chosen.payload.clone(),
            rejected: p.rejected.payload.clone(),
            s_chosen: p.s_chosen,
            s_rejected: p.s_rejected,
            chosen_source: p.chosen_source(),
            rejected_source: p.rejected_source(),
        }
    }
}

pub fn write_pairs_jsonl<W: Write>(mut out: W, pairs: &[PreferencePair]) -> Result<()> {
    for p in pairs {
        serde_json::to_writer(&mut out, &PairRecord::from(p))?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}

pub fn read_pairs_jsonl<R: BufRead>(input: R) -> Result<Vec<PairRecord>> {
    input
        .lines()
        .filter(|l| l.as_ref().map(|s| !s.trim().is_empty()).unwrap_or(true))
        .map(|l| Ok(serde_json::from_str(&l?)?))
        .collect()
}
