//! Federated-round orchestration and the simulated secure-aggregation
//! boundary.
//!
//! A [`RoundRecord`] holds everything the simulator produced in one round,
//! including per-client raw updates, which a privacy-preserving server never
//! sees. Scoring methods declared private therefore consume [`PrivateRound`],
//! a view type that structurally cannot reach the raw updates; only the
//! explicitly non-private baselines read them, through a fallible accessor
//! that fails on redacted records.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::fedgt::AssignmentMatrix;
use crate::model::{evaluate, train_local, weighted_average, LabeledDataset, ParamVector, TrainConfig, Utility};
use crate::seeds::{derive_seed, SeedDomain};

/// Binary client-selection matrix for cross-device rounds: one row per
/// round, each row selecting exactly `per_round` of the `num_clients`.
#[derive(Debug, Clone, PartialEq)]
pub struct SelectionMatrix {
    rows: Vec<Vec<bool>>,
    num_clients: usize,
    per_round: usize,
}

impl SelectionMatrix {
    pub fn new(rows: Vec<Vec<bool>>, per_round: usize) -> Result<Self> {
        let Some(first) = rows.first() else {
            return Err(Error::config("selection matrix needs at least one round"));
        };
        let num_clients = first.len();
        if per_round == 0 || per_round > num_clients {
            return Err(Error::config("per-round count must lie in 1..=num_clients"));
        }
        for (t, row) in rows.iter().enumerate() {
            if row.len() != num_clients {
                return Err(Error::config(format!("row {t} has inconsistent width")));
            }
            let weight = row.iter().filter(|&&b| b).count();
            if weight != per_round {
                return Err(Error::config(format!(
                    "row {t} selects {weight} clients, expected {per_round}"
                )));
            }
        }
        Ok(Self {
            rows,
            num_clients,
            per_round,
        })
    }

    /// Uniform random selection of `per_round` clients each round.
    pub fn uniform_random(
        rounds: usize,
        num_clients: usize,
        per_round: usize,
        seed: u64,
    ) -> Result<Self> {
        if rounds == 0 {
            return Err(Error::config("need at least one round"));
        }
        if per_round == 0 || per_round > num_clients {
            return Err(Error::config("per-round count must lie in 1..=num_clients"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut rows = Vec::with_capacity(rounds);
        let mut ids: Vec<usize> = (0..num_clients).collect();
        for _ in 0..rounds {
            ids.shuffle(&mut rng);
            let mut row = vec![false; num_clients];
            for &c in &ids[..per_round] {
                row[c] = true;
            }
            rows.push(row);
        }
        Self::new(rows, per_round)
    }

    /// Structured sampling: round t selects the clients of assignment-matrix
    /// row t mod L, so the participant sets walk the test groups.
    pub fn from_assignment(a: &AssignmentMatrix, rounds: usize) -> Result<Self> {
        if rounds == 0 {
            return Err(Error::config("need at least one round"));
        }
        let rows = (0..rounds)
            .map(|t| {
                let l = t % a.num_groups();
                (0..a.num_clients()).map(|n| a.contains(l, n)).collect()
            })
            .collect();
        Self::new(rows, a.group_size())
    }

    pub fn num_rounds(&self) -> usize {
        self.rows.len()
    }

    pub fn num_clients(&self) -> usize {
        self.num_clients
    }

    pub fn per_round(&self) -> usize {
        self.per_round
    }

    /// Selected client ids for 1-based round `t` (rows cycle if exhausted).
    pub fn selected(&self, t: usize) -> Vec<usize> {
        let row = &self.rows[(t - 1) % self.rows.len()];
        (0..self.num_clients).filter(|&n| row[n]).collect()
    }
}

/// Everything one federated round produced. `raw_updates` is deliberately
/// inaccessible except through [`RoundRecord::raw_updates`], which the
/// non-private baselines call and everything else must not.
#[derive(Debug, Clone)]
pub struct RoundRecord {
    pub round_index: usize,
    /// Global model this round started from.
    pub start_model: ParamVector,
    /// Validation utility of the start model (the previous round's global).
    pub start_utility: Utility,
    pub global_model: ParamVector,
    pub global_utility: Utility,
    /// One aggregate per assignment-matrix row; empty on non-test rounds.
    pub group_models: Vec<ParamVector>,
    pub group_utilities: Vec<Utility>,
    /// Client ids that trained this round, ascending.
    pub participants: Vec<usize>,
    /// Shard sizes of the participants (aggregation weights).
    pub participant_sizes: Vec<usize>,
    pub assignment: Option<AssignmentMatrix>,
    raw_updates: Option<Vec<ParamVector>>,
}

impl RoundRecord {
    /// Assembles a record from raw parts. Intended for tests, benches, and
    /// tooling that replays recorded rounds; [`run_round`] is the normal
    /// producer. No consistency between aggregates and updates is enforced.
    #[allow(clippy::too_many_arguments)]
    pub fn from_parts(
        round_index: usize,
        start_model: ParamVector,
        start_utility: Utility,
        global_model: ParamVector,
        global_utility: Utility,
        group_models: Vec<ParamVector>,
        group_utilities: Vec<Utility>,
        participants: Vec<usize>,
        participant_sizes: Vec<usize>,
        assignment: Option<AssignmentMatrix>,
        raw_updates: Option<Vec<ParamVector>>,
    ) -> Self {
        Self {
            round_index,
            start_model,
            start_utility,
            global_model,
            global_utility,
            group_models,
            group_utilities,
            participants,
            participant_sizes,
            assignment,
            raw_updates,
        }
    }

    /// Per-participant local models, in `participants` order. This is the
    /// non-private accessor: it represents data a secure-aggregation server
    /// would never hold, and fails on redacted records.
    pub fn raw_updates(&self) -> Result<&[ParamVector]> {
        self.raw_updates.as_deref().ok_or_else(|| {
            Error::PrivacyBoundary(format!(
                "round {}: raw per-client updates are redacted",
                self.round_index
            ))
        })
    }

    pub fn has_raw_updates(&self) -> bool {
        self.raw_updates.is_some()
    }

    /// Drops the raw per-client updates, leaving only what a
    /// privacy-preserving server retains.
    pub fn redacted(mut self) -> Self {
        self.raw_updates = None;
        self
    }

    /// The privacy-safe view handed to private scoring methods.
    pub fn private_view(&self) -> PrivateRound<'_> {
        PrivateRound {
            round_index: self.round_index,
            start_utility: self.start_utility,
            global_utility: self.global_utility,
            global_model: &self.global_model,
            group_models: &self.group_models,
            group_utilities: &self.group_utilities,
            assignment: self.assignment.as_ref(),
            participants: &self.participants,
        }
    }
}

/// What a privacy-preserving server sees of one round: aggregates and their
/// utilities only. There is no way to reach per-client updates from here,
/// which is the structural guarantee the private methods compile against.
#[derive(Debug, Clone, Copy)]
pub struct PrivateRound<'a> {
    pub round_index: usize,
    pub start_utility: Utility,
    pub global_utility: Utility,
    pub global_model: &'a ParamVector,
    pub group_models: &'a [ParamVector],
    pub group_utilities: &'a [Utility],
    pub assignment: Option<&'a AssignmentMatrix>,
    pub participants: &'a [usize],
}

/// Append-only record of a full training run.
#[derive(Debug, Clone, Default)]
pub struct ServerView {
    rounds: Vec<RoundRecord>,
    validation_digest: String,
}

/// Serialization summary of one round: utilities plus parameter digests, so
/// runs can be diffed without persisting raw parameter vectors.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RoundSummary {
    pub round_index: usize,
    pub participants: Vec<usize>,
    pub start_utility: Utility,
    pub global_utility: Utility,
    pub group_utilities: Vec<Utility>,
    pub global_model_digest: String,
    pub group_model_digests: Vec<String>,
    /// Text form of the assignment matrix, when the round was a test round.
    pub assignment: Option<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ViewSummary {
    pub validation_digest: String,
    pub rounds: Vec<RoundSummary>,
}

/// Hex SHA-256 of a parameter vector's little-endian bytes.
pub fn param_digest(params: &ParamVector) -> String {
    let mut hasher = Sha256::new();
    for v in params.values() {
        hasher.update(v.to_le_bytes());
    }
    hex(&hasher.finalize())
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

fn dataset_digest(data: &LabeledDataset) -> String {
    let mut hasher = Sha256::new();
    for i in 0..data.len() {
        for v in data.row(i) {
            hasher.update(v.to_le_bytes());
        }
        hasher.update((data.label(i) as u64).to_le_bytes());
    }
    hex(&hasher.finalize())
}

impl ServerView {
    pub fn new(valset: &LabeledDataset) -> Self {
        Self {
            rounds: Vec::new(),
            validation_digest: dataset_digest(valset),
        }
    }

    pub fn push(&mut self, record: RoundRecord) {
        self.rounds.push(record);
    }

    pub fn rounds(&self) -> &[RoundRecord] {
        &self.rounds
    }

    pub fn last(&self) -> Option<&RoundRecord> {
        self.rounds.last()
    }

    pub fn validation_digest(&self) -> &str {
        &self.validation_digest
    }

    pub fn summary(&self) -> ViewSummary {
        ViewSummary {
            validation_digest: self.validation_digest.clone(),
            rounds: self
                .rounds
                .iter()
                .map(|r| RoundSummary {
                    round_index: r.round_index,
                    participants: r.participants.clone(),
                    start_utility: r.start_utility,
                    global_utility: r.global_utility,
                    group_utilities: r.group_utilities.clone(),
                    global_model_digest: param_digest(&r.global_model),
                    group_model_digests: r.group_models.iter().map(param_digest).collect(),
                    assignment: r.assignment.as_ref().map(|a| a.to_text()),
                })
                .collect(),
        }
    }

    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(&self.summary())
            .map_err(|e| Error::Parse(format!("view serialization: {e}")))
    }
}

/// Runs one federated round: each participant trains locally from `global`,
/// the server aggregates by shard size, and, when an assignment matrix is
/// supplied, also forms the per-group aggregates for testing.
///
/// `participants` are client ids into `shards`, strictly ascending. The
/// assignment matrix's columns index positions in `participants`, not raw
/// client ids, so grouping keeps working after exclusions shrink the cohort.
#[allow(clippy::too_many_arguments)]
pub fn run_round(
    global: &ParamVector,
    start_utility: Utility,
    shards: &[LabeledDataset],
    valset: &LabeledDataset,
    cfg: &TrainConfig,
    assignment: Option<&AssignmentMatrix>,
    participants: &[usize],
    round_index: usize,
    seed: u64,
) -> Result<RoundRecord> {
    if participants.is_empty() {
        return Err(Error::config(format!("round {round_index}: no participants")));
    }
    if participants.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::config("participants must be strictly ascending"));
    }
    if let Some(&last) = participants.last() {
        if last >= shards.len() {
            return Err(Error::config(format!(
                "participant {last} out of range for {} shards",
                shards.len()
            )));
        }
    }
    if let Some(a) = assignment {
        if a.num_clients() != participants.len() {
            return Err(Error::config(format!(
                "assignment matrix has {} columns but the round has {} participants",
                a.num_clients(),
                participants.len()
            )));
        }
    }

    // Per-client seeds derive from (round seed, client id): independent of
    // scheduling, so the parallel map below cannot affect results.
    let updates: Vec<ParamVector> = participants
        .par_iter()
        .map(|&n| {
            train_local(
                global,
                &shards[n],
                cfg,
                derive_seed(seed, SeedDomain::Model, n as u64),
            )
        })
        .collect::<Result<Vec<_>>>()?;

    let weights: Vec<f64> = participants.iter().map(|&n| shards[n].len() as f64).collect();
    let global_model = weighted_average(&updates, &weights)?;
    let global_utility = evaluate(&cfg.model_kind, &global_model, valset)?;

    let mut group_models = Vec::new();
    let mut group_utilities = Vec::new();
    if let Some(a) = assignment {
        for l in 0..a.num_groups() {
            let members = a.members(l);
            let ms: Vec<ParamVector> = members.iter().map(|&p| updates[p].clone()).collect();
            let ws: Vec<f64> = members.iter().map(|&p| weights[p]).collect();
            let gm = weighted_average(&ms, &ws)?;
            group_utilities.push(evaluate(&cfg.model_kind, &gm, valset)?);
            group_models.push(gm);
        }
    }

    Ok(RoundRecord {
        round_index,
        start_model: global.clone(),
        start_utility,
        global_model,
        global_utility,
        group_models,
        group_utilities,
        participants: participants.to_vec(),
        participant_sizes: participants.iter().map(|&n| shards[n].len()).collect(),
        assignment: assignment.cloned(),
        raw_updates: Some(updates),
    })
}

/// Static inputs of a training run.
#[derive(Debug, Clone, Copy)]
pub struct TrainingRun<'a> {
    pub shards: &'a [LabeledDataset],
    pub valset: &'a LabeledDataset,
    pub train_cfg: &'a TrainConfig,
    /// Total round count T; rounds are 1-based 1..=T.
    pub rounds: usize,
    /// Seed for the shared initial model.
    pub init_seed: u64,
    /// Base seed for per-round local-training randomness.
    pub round_seed: u64,
    /// Cross-device selection; `None` means cross-silo (everyone trains).
    pub selection: Option<&'a SelectionMatrix>,
}

/// Runs `run.rounds` federated rounds. `matrix_for(t, participants)` supplies
/// the test matrix for round t (columns must match the participant count;
/// `None` for a non-test round). After each round, `gate(t, view)` may return
/// client ids to exclude from every later round — the detection-triggered
/// exclusion hook of the comprehensive pipeline.
pub fn run_training_with(
    run: &TrainingRun,
    mut matrix_for: impl FnMut(usize, &[usize]) -> Result<Option<AssignmentMatrix>>,
    mut gate: impl FnMut(usize, &ServerView) -> Result<Vec<usize>>,
) -> Result<ServerView> {
    if run.rounds == 0 {
        return Err(Error::config("need at least one round"));
    }
    if run.shards.is_empty() {
        return Err(Error::config("need at least one shard"));
    }
    let d = run.valset.num_features();
    let c = run.valset.num_classes();
    let mut global = run.train_cfg.model_kind.init_params(d, c, run.init_seed);
    let mut start_utility = evaluate(&run.train_cfg.model_kind, &global, run.valset)?;
    let mut excluded = vec![false; run.shards.len()];
    let mut view = ServerView::new(run.valset);

    for t in 1..=run.rounds {
        let participants: Vec<usize> = match run.selection {
            None => (0..run.shards.len()).filter(|&n| !excluded[n]).collect(),
            Some(sel) => sel
                .selected(t)
                .into_iter()
                .filter(|&n| !excluded[n])
                .collect(),
        };
        if participants.is_empty() {
            return Err(Error::config(format!(
                "round {t}: every client is excluded or unselected"
            )));
        }
        let assignment = matrix_for(t, &participants)?;
        let record = run_round(
            &global,
            start_utility,
            run.shards,
            run.valset,
            run.train_cfg,
            assignment.as_ref(),
            &participants,
            t,
            derive_seed(run.round_seed, SeedDomain::Model, t as u64),
        )?;
        global = record.global_model.clone();
        start_utility = record.global_utility;
        view.push(record);

        for n in gate(t, &view)? {
            if n >= excluded.len() {
                return Err(Error::config(format!("gate flagged unknown client {n}")));
            }
            excluded[n] = true;
        }
    }
    Ok(view)
}

/// Plain training: no test matrices, no exclusions.
pub fn run_training(run: &TrainingRun) -> Result<ServerView> {
    run_training_with(run, |_, _| Ok(None), |_, _| Ok(Vec::new()))
}
