//! Experiment harness: declarative TOML configs, seeded repetitions, the
//! plain and comprehensive (detect-then-exclude) pipelines, results tables
//! with recomputable aggregates, and deterministic output emission.
//!
//! Seed discipline: the master seed derives one data/partition/noise seed
//! set shared by all repetitions, per-repetition model seeds, and per-round
//! matrix seeds shared across repetitions. Outputs are canonically ordered,
//! so parallel execution cannot change a single byte of results.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::baselines::{accumulate_baseline, cos_scores, loo_scores, BaselineScores};
use crate::data::{
    apply_attack, import_csv, inject_linear_noise, make_synthetic, partition, AttackKind,
    AttackSpec, NoiseProfile, PartitionSpec,
};
use crate::error::{Error, Result};
use crate::evaluation::{cluster_detect, f1, l2_error, spearman, transform, Polarity};
use crate::federation::{
    run_training_with, RoundRecord, SelectionMatrix, TrainingRun,
};
use crate::fedgt::{
    accumulate_llr, build_assignment, decode_marginals, test_groups, AssignmentMatrix,
    ChannelModel, LlrScores, MatrixStrategy,
};
use crate::model::{LabeledDataset, TrainConfig};
use crate::qi::{accumulate_qi, qi_device_round, qi_silo_across, qi_silo_within, ScoreDelta};
use crate::seeds::{derive_seed, SeedDomain};

/// Config-file schema version this build reads and writes.
pub const SCHEMA_VERSION: u32 = 1;

/// Scoring methods the harness can run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Method {
    #[serde(rename = "mr_qi")]
    MrQi,
    #[serde(rename = "1r_qi")]
    OneRoundQi,
    #[serde(rename = "mr_fedgt")]
    MrFedgt,
    #[serde(rename = "1r_fedgt")]
    OneRoundFedgt,
    #[serde(rename = "cos")]
    Cos,
    #[serde(rename = "loo")]
    Loo,
}

impl Method {
    pub fn as_str(&self) -> &'static str {
        match self {
            Method::MrQi => "mr_qi",
            Method::OneRoundQi => "1r_qi",
            Method::MrFedgt => "mr_fedgt",
            Method::OneRoundFedgt => "1r_fedgt",
            Method::Cos => "cos",
            Method::Loo => "loo",
        }
    }

    /// Detection polarity: QI/COS/LOO score good behavior high, group
    /// testing scores misbehavior high.
    pub fn polarity(&self) -> Polarity {
        match self {
            Method::MrFedgt | Method::OneRoundFedgt => Polarity::HighIsMalicious,
            _ => Polarity::LowIsMalicious,
        }
    }

    fn is_qi(&self) -> bool {
        matches!(self, Method::MrQi | Method::OneRoundQi)
    }

    fn is_fedgt(&self) -> bool {
        matches!(self, Method::MrFedgt | Method::OneRoundFedgt)
    }

    fn is_multi_round(&self) -> bool {
        matches!(self, Method::MrQi | Method::MrFedgt | Method::Cos | Method::Loo)
    }

    /// Whether scoring this method requires group aggregates (and therefore
    /// assignment matrices) on test rounds.
    fn needs_groups(&self) -> bool {
        self.is_qi() || self.is_fedgt()
    }
}

impl std::fmt::Display for Method {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Where the experiment's data comes from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DatasetSpec {
    Synthetic {
        classes: usize,
        features: usize,
        rows: usize,
        separation: f64,
    },
    Csv {
        path: PathBuf,
    },
}

/// Partition shape; the client count lives at the config top level.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum PartitionKind {
    Iid,
    Dirichlet { alpha: f64 },
}

/// Group-testing parameters. `prior_delta: None` defaults to
/// attackers/num_clients when attackers are configured, else 0.2.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FedgtParams {
    pub num_groups: usize,
    pub group_size: usize,
    pub epsilon: f64,
    pub crossover_p: f64,
    pub prior_delta: Option<f64>,
    pub strategy: MatrixStrategy,
}

impl Default for FedgtParams {
    fn default() -> Self {
        Self {
            num_groups: 6,
            group_size: 5,
            epsilon: 0.02,
            crossover_p: 0.05,
            prior_delta: None,
            strategy: MatrixStrategy::Prefixed,
        }
    }
}

/// Quality-inference parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct QiParams {
    pub tie_tol: f64,
    pub ugly_rule: bool,
}

impl Default for QiParams {
    fn default() -> Self {
        Self {
            tie_tol: 1e-4,
            ugly_rule: true,
        }
    }
}

/// Cross-silo (everyone trains every round) or cross-device (a fresh subset
/// of `per_round` clients each round).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ModeSpec {
    Silo,
    Device { per_round: usize },
}

impl Default for ModeSpec {
    fn default() -> Self {
        ModeSpec::Silo
    }
}

/// Plain scoring, or the sequential detect-then-exclude pipeline: run MD
/// with `md_method` at `md_round`, drop flagged clients, evaluate
/// contribution on the survivors over the remaining rounds.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum PipelineSpec {
    Plain,
    Comprehensive { md_round: usize, md_method: Method },
}

impl Default for PipelineSpec {
    fn default() -> Self {
        PipelineSpec::Plain
    }
}

/// A complete, self-contained experiment description.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub schema_version: u32,
    pub experiment_id: String,
    pub master_seed: u64,
    pub num_clients: usize,
    pub rounds: usize,
    #[serde(default = "default_repetitions")]
    pub repetitions: usize,
    pub dataset: DatasetSpec,
    pub partition: PartitionKind,
    /// 0-based indices of label-shifting clients.
    #[serde(default)]
    pub attackers: Vec<usize>,
    /// Apply the linear label-noise profile (contribution experiments).
    #[serde(default)]
    pub noise: bool,
    pub methods: Vec<Method>,
    #[serde(default)]
    pub fedgt: FedgtParams,
    #[serde(default)]
    pub qi: QiParams,
    /// Test rounds; defaults to every round except the first.
    #[serde(default)]
    pub test_rounds: Option<Vec<usize>>,
    #[serde(default)]
    pub mode: ModeSpec,
    #[serde(default)]
    pub pipeline: PipelineSpec,
    pub train: TrainConfig,
    #[serde(default = "default_validation_fraction")]
    pub validation_fraction: f64,
}

fn default_repetitions() -> usize {
    10
}

fn default_validation_fraction() -> f64 {
    0.1
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self =
            toml::from_str(text).map_err(|e| Error::Parse(format!("config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_toml_path(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_toml(&text).map_err(|e| match e {
            Error::Parse(msg) => Error::Parse(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Parse(format!("config: {e}")))
    }

    /// Test rounds in ascending order (default: 2..=rounds).
    pub fn effective_test_rounds(&self) -> Vec<usize> {
        match &self.test_rounds {
            Some(rounds) => rounds.clone(),
            None => (2..=self.rounds).collect(),
        }
    }

    /// Both noise and attackers configured: a setting outside the usual
    /// MD-only / CE-only split, flagged in the manifest.
    pub fn combined_mode(&self) -> bool {
        self.noise && !self.attackers.is_empty()
    }

    fn prior_delta(&self) -> f64 {
        self.fedgt.prior_delta.unwrap_or_else(|| {
            if self.attackers.is_empty() {
                0.2
            } else {
                self.attackers.len() as f64 / self.num_clients as f64
            }
        })
    }

    fn channel(&self) -> Result<ChannelModel> {
        ChannelModel::new(self.fedgt.crossover_p, self.prior_delta())
    }

    pub fn validate(&self) -> Result<()> {
        if self.schema_version != SCHEMA_VERSION {
            return Err(Error::config(format!(
                "config schema_version {} unsupported; this build reads {SCHEMA_VERSION}",
                self.schema_version
            )));
        }
        if self.experiment_id.is_empty()
            || self
                .experiment_id
                .chars()
                .any(|c| !(c.is_ascii_alphanumeric() || c == '_' || c == '-'))
        {
            return Err(Error::config(
                "experiment_id must be nonempty [A-Za-z0-9_-]",
            ));
        }
        if self.master_seed > i64::MAX as u64 {
            return Err(Error::config(
                "master_seed must fit a signed 64-bit value (TOML limitation)",
            ));
        }
        if self.num_clients < 2 {
            return Err(Error::config("need at least 2 clients"));
        }
        if self.rounds == 0 {
            return Err(Error::config("need at least one round"));
        }
        if self.repetitions == 0 {
            return Err(Error::config("need at least one repetition"));
        }
        if !(self.validation_fraction > 0.0 && self.validation_fraction < 1.0) {
            return Err(Error::config("validation_fraction must lie in (0, 1)"));
        }

        let mut seen = vec![false; self.num_clients];
        for &a in &self.attackers {
            if a >= self.num_clients {
                return Err(Error::config(format!(
                    "attacker index {a} out of range for {} clients (indices are 0-based)",
                    self.num_clients
                )));
            }
            if std::mem::replace(&mut seen[a], true) {
                return Err(Error::config(format!("attacker {a} listed twice")));
            }
        }
        if self.attackers.len() == self.num_clients {
            return Err(Error::config("at least one client must be benign"));
        }

        let test_rounds = self.effective_test_rounds();
        if let Some(explicit) = &self.test_rounds {
            if explicit.windows(2).any(|w| w[0] >= w[1]) {
                return Err(Error::config("test_rounds must be strictly ascending"));
            }
            for &t in explicit {
                if t < 2 || t > self.rounds {
                    return Err(Error::config(format!(
                        "test round {t} outside 2..={} (the first round is never tested)",
                        self.rounds
                    )));
                }
            }
        }

        let mut methods_seen = std::collections::BTreeSet::new();
        for m in &self.methods {
            if !methods_seen.insert(*m) {
                return Err(Error::config(format!("method {m} listed twice")));
            }
        }

        let needs_groups = self.methods.iter().any(Method::needs_groups)
            || matches!(self.pipeline, PipelineSpec::Comprehensive { md_method, .. } if md_method.needs_groups());
        let has_fedgt = self.methods.iter().any(Method::is_fedgt)
            || matches!(self.pipeline, PipelineSpec::Comprehensive { md_method, .. } if md_method.is_fedgt());

        match self.mode {
            ModeSpec::Silo => {
                if needs_groups {
                    let (l, k, n) = (
                        self.fedgt.num_groups,
                        self.fedgt.group_size,
                        self.num_clients,
                    );
                    if k < 2 || k >= n {
                        return Err(Error::config(format!("group_size must lie in 2..{n}")));
                    }
                    if l * k < n {
                        return Err(Error::config(format!(
                            "{l} groups of {k} cannot cover {n} clients"
                        )));
                    }
                }
                if has_fedgt && self.num_clients > crate::fedgt::MAX_DECODE_CLIENTS {
                    return Err(Error::Capability(format!(
                        "group-testing decoding is exact and capped at {} clients",
                        crate::fedgt::MAX_DECODE_CLIENTS
                    )));
                }
            }
            ModeSpec::Device { per_round } => {
                if per_round == 0 || per_round > self.num_clients {
                    return Err(Error::config("per_round must lie in 1..=num_clients"));
                }
                if has_fedgt {
                    return Err(Error::Capability(
                        "group-testing methods are cross-silo only; cross-device \
                         group testing was discarded for failing to produce \
                         meaningful results"
                            .into(),
                    ));
                }
                if matches!(self.pipeline, PipelineSpec::Comprehensive { .. }) {
                    return Err(Error::config(
                        "the comprehensive pipeline runs in silo mode only",
                    ));
                }
            }
        }

        if !(self.fedgt.epsilon >= 0.0 && self.fedgt.epsilon.is_finite()) {
            return Err(Error::config("epsilon must be finite and nonnegative"));
        }
        self.channel()?;
        if !(self.qi.tie_tol >= 0.0 && self.qi.tie_tol.is_finite()) {
            return Err(Error::config("tie_tol must be finite and nonnegative"));
        }
        self.train.validate()?;

        if let PipelineSpec::Comprehensive { md_round, .. } = self.pipeline {
            if md_round < 2 {
                return Err(Error::config(
                    "md_round must be at least 2 (the first round is never tested)",
                ));
            }
            if !test_rounds.contains(&md_round) {
                return Err(Error::config(format!(
                    "md_round {md_round} is not a test round"
                )));
            }
            if test_rounds.iter().all(|&t| t <= md_round) {
                return Err(Error::config(
                    "comprehensive pipeline needs test rounds after md_round \
                     for contribution evaluation",
                ));
            }
        }
        Ok(())
    }
}

/// Derived seeds for one experiment, all reproducible from the master seed.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SeedPlan {
    pub master: u64,
    pub data: u64,
    pub partition: u64,
    pub noise: u64,
    pub validation: u64,
}

impl SeedPlan {
    pub fn new(master: u64) -> Self {
        Self {
            master,
            data: derive_seed(master, SeedDomain::Data, 0),
            partition: derive_seed(master, SeedDomain::Data, 1),
            noise: derive_seed(master, SeedDomain::Data, 2),
            validation: derive_seed(master, SeedDomain::Data, 3),
        }
    }

    /// Seed for the shared model init of repetition `rep`.
    pub fn model_init(&self, rep: usize) -> u64 {
        derive_seed(derive_seed(self.master, SeedDomain::Model, rep as u64), SeedDomain::Model, 0)
    }

    /// Base seed for per-round training randomness of repetition `rep`.
    pub fn round_base(&self, rep: usize) -> u64 {
        derive_seed(derive_seed(self.master, SeedDomain::Model, rep as u64), SeedDomain::Model, 1)
    }

    /// Seed for the cross-device selection of repetition `rep`.
    pub fn selection(&self, rep: usize) -> u64 {
        derive_seed(self.master, SeedDomain::Selection, rep as u64)
    }
}

/// Data shared by every repetition: shards (after noise/attacks), the
/// validation set, and the ground truths.
#[derive(Debug, Clone)]
pub struct PreparedData {
    pub shards: Vec<LabeledDataset>,
    pub valset: LabeledDataset,
    pub noise_profile: NoiseProfile,
    pub realized_flips: Vec<usize>,
    pub truth_malicious: Vec<bool>,
}

fn split_validation(
    data: &LabeledDataset,
    fraction: f64,
    seed: u64,
) -> Result<(LabeledDataset, LabeledDataset)> {
    let n = data.len();
    let val_size = ((n as f64 * fraction).round() as usize).clamp(1, n - 1);
    let mut idx: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    idx.shuffle(&mut rng);
    let val = data.subset(&idx[..val_size])?;
    let train = data.subset(&idx[val_size..])?;
    Ok((train, val))
}

/// Generates, splits, partitions, and corrupts the data for one experiment.
/// Runs once per experiment; repetitions share the result.
pub fn prepare_data(cfg: &ExperimentConfig, seeds: &SeedPlan) -> Result<PreparedData> {
    let full = match &cfg.dataset {
        DatasetSpec::Synthetic {
            classes,
            features,
            rows,
            separation,
        } => make_synthetic(*classes, *features, *rows, *separation, seeds.data)?,
        DatasetSpec::Csv { path } => import_csv(path)?,
    };
    let (train, valset) = split_validation(&full, cfg.validation_fraction, seeds.validation)?;
    let spec = match cfg.partition {
        PartitionKind::Iid => PartitionSpec::Iid {
            num_clients: cfg.num_clients,
        },
        PartitionKind::Dirichlet { alpha } => PartitionSpec::Dirichlet {
            num_clients: cfg.num_clients,
            alpha,
        },
    };
    let shards = partition(&train, &spec, seeds.partition)?;

    // Attackers replace noise: when both are configured, noise lands on
    // benign clients only.
    let mut profile = if cfg.noise {
        NoiseProfile::linear(cfg.num_clients)
    } else {
        NoiseProfile::zero(cfg.num_clients)
    };
    if cfg.combined_mode() {
        let mut probs = profile.probs().to_vec();
        for &a in &cfg.attackers {
            probs[a] = 0.0;
        }
        profile = NoiseProfile::new(probs)?;
    }
    let (shards, realized_flips) = inject_linear_noise(&shards, &profile, seeds.noise)?;
    let shards = apply_attack(
        &shards,
        &AttackSpec {
            attackers: cfg.attackers.clone(),
            kind: AttackKind::LabelShift,
        },
    )?;
    let mut truth_malicious = vec![false; cfg.num_clients];
    for &a in &cfg.attackers {
        truth_malicious[a] = true;
    }
    Ok(PreparedData {
        shards,
        valset,
        noise_profile: profile,
        realized_flips,
        truth_malicious,
    })
}

/// One emitted results row. `l2`/`spearman` are filled at the final test
/// round only.
#[derive(Debug, Clone, PartialEq)]
pub struct ResultRow {
    pub experiment_id: String,
    pub method: Method,
    pub repetition: usize,
    pub round: usize,
    pub f1: f64,
    pub l2: Option<f64>,
    pub spearman: Option<f64>,
    pub wallclock_ms: u64,
}

/// Mean/std of F1 over repetitions for one (method, round).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregateRow {
    pub method: Method,
    pub round: usize,
    pub mean_f1: f64,
    pub std_f1: f64,
}

/// All results of one experiment, canonically ordered.
#[derive(Debug, Clone, PartialEq)]
pub struct ResultsTable {
    pub config: ExperimentConfig,
    pub rows: Vec<ResultRow>,
    pub aggregates: Vec<AggregateRow>,
    /// (repetition, error) for repetitions that aborted.
    pub failures: Vec<(usize, String)>,
}

fn compute_aggregates(rows: &[ResultRow]) -> Vec<AggregateRow> {
    let mut groups: BTreeMap<(&'static str, usize), (Method, Vec<f64>)> = BTreeMap::new();
    for row in rows {
        groups
            .entry((row.method.as_str(), row.round))
            .or_insert_with(|| (row.method, Vec::new()))
            .1
            .push(row.f1);
    }
    groups
        .into_iter()
        .map(|((_, round), (method, f1s))| {
            let n = f1s.len() as f64;
            let mean = f1s.iter().sum::<f64>() / n;
            let std = if f1s.len() > 1 {
                (f1s.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0)).sqrt()
            } else {
                0.0
            };
            AggregateRow {
                method,
                round,
                mean_f1: mean,
                std_f1: std,
            }
        })
        .collect()
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

impl ResultsTable {
    /// Sorts rows canonically (method, repetition, round) and computes
    /// aggregates.
    pub fn from_rows(
        config: ExperimentConfig,
        mut rows: Vec<ResultRow>,
        mut failures: Vec<(usize, String)>,
    ) -> Self {
        rows.sort_by(|a, b| {
            (a.method.as_str(), a.repetition, a.round).cmp(&(
                b.method.as_str(),
                b.repetition,
                b.round,
            ))
        });
        failures.sort();
        let aggregates = compute_aggregates(&rows);
        Self {
            config,
            rows,
            aggregates,
            failures,
        }
    }

    /// Checks the stored aggregates against a fresh recomputation.
    pub fn validate(&self) -> Result<()> {
        let fresh = compute_aggregates(&self.rows);
        if fresh.len() != self.aggregates.len() {
            return Err(Error::Pipeline(
                "aggregate rows do not match result rows".into(),
            ));
        }
        for (a, b) in self.aggregates.iter().zip(&fresh) {
            if a.method != b.method
                || a.round != b.round
                || (a.mean_f1 - b.mean_f1).abs() > 1e-12
                || (a.std_f1 - b.std_f1).abs() > 1e-12
            {
                return Err(Error::Pipeline(format!(
                    "aggregate mismatch for {} round {}",
                    a.method, a.round
                )));
            }
        }
        Ok(())
    }

    /// Full results CSV, including the volatile wallclock column.
    pub fn results_csv(&self) -> String {
        let mut out =
            String::from("experiment_id,method,repetition,round,f1,l2,spearman,wallclock_ms\n");
        for r in &self.rows {
            out.push_str(&format!(
                "{},{},{},{},{},{},{},{}\n",
                r.experiment_id,
                r.method,
                r.repetition,
                r.round,
                r.f1,
                fmt_opt(r.l2),
                fmt_opt(r.spearman),
                r.wallclock_ms
            ));
        }
        out
    }

    /// Canonical CSV: the full table minus wallclock. This is the byte-exact
    /// reproducibility surface; its digest is pinned in the manifest.
    pub fn canonical_csv(&self) -> String {
        let mut out = String::from("experiment_id,method,repetition,round,f1,l2,spearman\n");
        for r in &self.rows {
            out.push_str(&format!(
                "{},{},{},{},{},{},{}\n",
                r.experiment_id,
                r.method,
                r.repetition,
                r.round,
                r.f1,
                fmt_opt(r.l2),
                fmt_opt(r.spearman)
            ));
        }
        out
    }

    /// Per-method F1-vs-round curve data (mean and std band).
    pub fn plot_csv(&self) -> String {
        let mut out = String::from("method,round,mean_f1,std_f1\n");
        for a in &self.aggregates {
            out.push_str(&format!(
                "{},{},{},{}\n",
                a.method, a.round, a.mean_f1, a.std_f1
            ));
        }
        out
    }
}

fn sha256_hex(text: &str) -> String {
    let mut hasher = Sha256::new();
    hasher.update(text.as_bytes());
    hasher
        .finalize()
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect()
}

/// Run manifest: everything needed to reproduce and verify an experiment.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunManifest {
    pub schema_version: u32,
    pub experiment_id: String,
    pub code_version: String,
    pub combined_mode: bool,
    pub canonical_results_sha256: String,
    pub seeds: SeedPlan,
    pub failures: Vec<(usize, String)>,
    pub config: ExperimentConfig,
}

impl RunManifest {
    pub fn for_table(table: &ResultsTable) -> Self {
        Self {
            schema_version: SCHEMA_VERSION,
            experiment_id: table.config.experiment_id.clone(),
            code_version: env!("CARGO_PKG_VERSION").to_string(),
            combined_mode: table.config.combined_mode(),
            canonical_results_sha256: sha256_hex(&table.canonical_csv()),
            seeds: SeedPlan::new(table.config.master_seed),
            failures: table.failures.clone(),
            config: table.config.clone(),
        }
    }

    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(self).map_err(|e| Error::Parse(format!("manifest: {e}")))
    }

    pub fn from_json_path(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        serde_json::from_str(&text)
            .map_err(|e| Error::Parse(format!("{}: {e}", path.display())))
    }
}

/// Paths written by [`emit_outputs`].
#[derive(Debug, Clone)]
pub struct EmittedPaths {
    pub results: PathBuf,
    pub canonical_results: PathBuf,
    pub manifest: PathBuf,
    pub plot: PathBuf,
}

/// Writes results CSV (full and canonical), the run manifest, and the
/// F1-vs-round plot data into `out_dir`. Emission is deterministic: the same
/// table always produces identical bytes (wallclock lives only in the
/// non-canonical CSV).
pub fn emit_outputs(table: &ResultsTable, out_dir: &Path) -> Result<EmittedPaths> {
    table.validate()?;
    std::fs::create_dir_all(out_dir)?;
    let paths = EmittedPaths {
        results: out_dir.join("results.csv"),
        canonical_results: out_dir.join("results_canonical.csv"),
        manifest: out_dir.join("manifest.json"),
        plot: out_dir.join("plot_f1.csv"),
    };
    std::fs::write(&paths.results, table.results_csv())?;
    std::fs::write(&paths.canonical_results, table.canonical_csv())?;
    let manifest = RunManifest::for_table(table);
    std::fs::write(&paths.manifest, manifest.to_json()?)?;
    std::fs::write(&paths.plot, table.plot_csv())?;
    Ok(paths)
}

/// Per-method scoring state advanced across the test rounds of one run.
enum ScoreState {
    QiSilo { acc: Vec<ScoreDelta> },
    QiDevice { acc: Vec<ScoreDelta> },
    Fedgt { acc: Vec<LlrScores> },
    Baseline { acc: Vec<BaselineScores> },
}

struct ScoreCtx<'a> {
    cfg: &'a ExperimentConfig,
    valset: &'a LabeledDataset,
    channel: ChannelModel,
}

impl ScoreState {
    fn new(method: Method, mode: ModeSpec) -> Self {
        match (method, mode) {
            (m, ModeSpec::Silo) if m.is_qi() => ScoreState::QiSilo { acc: Vec::new() },
            (m, ModeSpec::Device { .. }) if m.is_qi() => ScoreState::QiDevice { acc: Vec::new() },
            (m, _) if m.is_fedgt() => ScoreState::Fedgt { acc: Vec::new() },
            _ => ScoreState::Baseline { acc: Vec::new() },
        }
    }

    /// Consumes one test round and returns the method's effective score
    /// vector (over all clients) at this point: accumulated for multi-round
    /// methods, this round's alone for single-round ones.
    fn advance(
        &mut self,
        method: Method,
        ctx: &ScoreCtx,
        rec: &RoundRecord,
        prev_round: Option<&RoundRecord>,
        prev_test: Option<&RoundRecord>,
    ) -> Result<Vec<f64>> {
        let n = ctx.cfg.num_clients;
        match self {
            ScoreState::QiSilo { acc } => {
                let within = qi_silo_within(
                    &rec.private_view(),
                    n,
                    ctx.cfg.qi.tie_tol,
                    ctx.cfg.qi.ugly_rule,
                )?;
                if method.is_multi_round() {
                    acc.push(within);
                    if let Some(prev) = prev_test {
                        let across = qi_silo_across(
                            &rec.private_view(),
                            &prev.private_view(),
                            n,
                            ctx.cfg.qi.tie_tol,
                        )?;
                        acc.push(across);
                    }
                    Ok(accumulate_qi(acc)?.scores)
                } else {
                    Ok(within.deltas)
                }
            }
            ScoreState::QiDevice { acc } => {
                let prev = prev_round.ok_or_else(|| {
                    Error::config("device QI needs the previous round's record")
                })?;
                let delta = qi_device_round(
                    rec.round_index,
                    prev.global_utility.accuracy - prev.start_utility.accuracy,
                    rec.global_utility.accuracy - rec.start_utility.accuracy,
                    &prev.participants,
                    &rec.participants,
                    n,
                )?;
                if method.is_multi_round() {
                    acc.push(delta);
                    Ok(accumulate_qi(acc)?.scores)
                } else {
                    Ok(delta.deltas)
                }
            }
            ScoreState::Fedgt { acc } => {
                let outcomes = test_groups(&rec.private_view(), ctx.cfg.fedgt.epsilon)?;
                let assignment = rec.assignment.as_ref().ok_or_else(|| {
                    Error::config(format!("round {} has no assignment", rec.round_index))
                })?;
                let local = decode_marginals(&outcomes, assignment, &ctx.channel)?;
                // Matrix columns index participant positions; spread back
                // onto client ids (excluded clients stay at 0).
                let mut values = vec![0.0; n];
                for (pos, &client) in rec.participants.iter().enumerate() {
                    values[client] = local.values[pos];
                }
                let full = LlrScores {
                    values,
                    rounds: local.rounds,
                };
                if method.is_multi_round() {
                    acc.push(full);
                    Ok(accumulate_llr(acc)?.values)
                } else {
                    Ok(full.values)
                }
            }
            ScoreState::Baseline { acc } => {
                let scores = match method {
                    Method::Cos => cos_scores(rec, n)?,
                    Method::Loo => {
                        loo_scores(rec, ctx.valset, &ctx.cfg.train.model_kind, n)?
                    }
                    other => {
                        return Err(Error::Pipeline(format!(
                            "method {other} routed to baseline scorer"
                        )))
                    }
                };
                acc.push(scores);
                Ok(accumulate_baseline(acc)?.scores)
            }
        }
    }
}

/// Contribution orientation: scores where higher means more contribution.
fn ce_orient(method: Method, scores: &[f64]) -> Vec<f64> {
    if method.is_fedgt() {
        scores.iter().map(|v| -v).collect()
    } else {
        scores.to_vec()
    }
}

/// Restricts a full-cohort vector to the given client subset.
fn restrict<T: Copy>(values: &[T], clients: &[usize]) -> Vec<T> {
    clients.iter().map(|&c| values[c]).collect()
}

fn ce_metrics(
    method: Method,
    scores: &[f64],
    profile: &NoiseProfile,
    clients: &[usize],
) -> Result<(f64, f64)> {
    let oriented = ce_orient(method, &restrict(scores, clients));
    let truth_raw: Vec<f64> = restrict(profile.probs(), clients)
        .iter()
        .map(|p| 1.0 - p)
        .collect();
    let l2 = l2_error(&transform(&oriented)?, &transform(&truth_raw)?)?;
    let phi = if clients.len() >= 3 {
        spearman(&oriented, &truth_raw)?.rho
    } else {
        0.0
    };
    Ok((l2, phi))
}

fn detection_f1(method: Method, scores: &[f64], truth: &[bool]) -> Result<f64> {
    let det = cluster_detect(scores, method.polarity())?;
    f1(&det.predicted_malicious, truth)
}

/// Prebuilds the assignment matrices for the full-cohort test rounds.
/// Matrices are derived from the master seed and the round index, so every
/// repetition shares them.
fn build_matrices(
    cfg: &ExperimentConfig,
    test_rounds: &[usize],
    num_clients: usize,
) -> Result<BTreeMap<usize, AssignmentMatrix>> {
    let mut out = BTreeMap::new();
    let mut same: Option<AssignmentMatrix> = None;
    for &t in test_rounds {
        let m = match cfg.fedgt.strategy {
            MatrixStrategy::Same => {
                if same.is_none() {
                    same = Some(build_assignment(
                        num_clients,
                        cfg.fedgt.num_groups,
                        cfg.fedgt.group_size,
                        cfg.master_seed,
                        MatrixStrategy::Same,
                        0,
                    )?);
                }
                same.clone().unwrap()
            }
            MatrixStrategy::Prefixed => build_assignment(
                num_clients,
                cfg.fedgt.num_groups,
                cfg.fedgt.group_size,
                cfg.master_seed,
                MatrixStrategy::Prefixed,
                t,
            )?,
        };
        out.insert(t, m);
    }
    Ok(out)
}

/// Runs one plain repetition: training plus scoring rows.
fn run_plain_repetition(
    cfg: &ExperimentConfig,
    seeds: &SeedPlan,
    data: &PreparedData,
    matrices: &BTreeMap<usize, AssignmentMatrix>,
    rep: usize,
) -> Result<Vec<ResultRow>> {
    let test_rounds = cfg.effective_test_rounds();
    let needs_groups =
        matches!(cfg.mode, ModeSpec::Silo) && cfg.methods.iter().any(Method::needs_groups);

    let selection = match cfg.mode {
        ModeSpec::Silo => None,
        ModeSpec::Device { per_round } => Some(SelectionMatrix::uniform_random(
            cfg.rounds,
            cfg.num_clients,
            per_round,
            seeds.selection(rep),
        )?),
    };
    let run = TrainingRun {
        shards: &data.shards,
        valset: &data.valset,
        train_cfg: &cfg.train,
        rounds: cfg.rounds,
        init_seed: seeds.model_init(rep),
        round_seed: seeds.round_base(rep),
        selection: selection.as_ref(),
    };
    let view = run_training_with(
        &run,
        |t, _participants| {
            Ok(if needs_groups && test_rounds.contains(&t) {
                matrices.get(&t).cloned()
            } else {
                None
            })
        },
        |_, _| Ok(Vec::new()),
    )?;

    let ctx = ScoreCtx {
        cfg,
        valset: &data.valset,
        channel: cfg.channel()?,
    };
    let all_clients: Vec<usize> = (0..cfg.num_clients).collect();
    let mut rows = Vec::new();
    for &method in &cfg.methods {
        let mut state = ScoreState::new(method, cfg.mode);
        let mut prev_test: Option<usize> = None;
        for (i, &tau) in test_rounds.iter().enumerate() {
            let started = Instant::now();
            let rec = &view.rounds()[tau - 1];
            let prev_round = view.rounds().get(tau.wrapping_sub(2));
            let prev_test_rec = prev_test.map(|p| &view.rounds()[p - 1]);
            let scores = state.advance(method, &ctx, rec, prev_round, prev_test_rec)?;
            let f1_val = detection_f1(method, &scores, &data.truth_malicious)?;
            let (l2, phi) = if i + 1 == test_rounds.len() {
                let (l2, phi) = ce_metrics(method, &scores, &data.noise_profile, &all_clients)?;
                (Some(l2), Some(phi))
            } else {
                (None, None)
            };
            rows.push(ResultRow {
                experiment_id: cfg.experiment_id.clone(),
                method,
                repetition: rep,
                round: tau,
                f1: f1_val,
                l2,
                spearman: phi,
                wallclock_ms: started.elapsed().as_millis() as u64,
            });
            prev_test = Some(tau);
        }
    }
    Ok(rows)
}

/// Runs one comprehensive repetition: MD with `md_method` at `md_round`,
/// exclusion of flagged clients, then per-method contribution scoring on
/// the survivors.
fn run_comprehensive_repetition(
    cfg: &ExperimentConfig,
    seeds: &SeedPlan,
    data: &PreparedData,
    matrices: &BTreeMap<usize, AssignmentMatrix>,
    rep: usize,
) -> Result<Vec<ResultRow>> {
    let PipelineSpec::Comprehensive {
        md_round,
        md_method,
    } = cfg.pipeline
    else {
        return Err(Error::config("pipeline is not comprehensive"));
    };
    let test_rounds = cfg.effective_test_rounds();
    let md_rounds: Vec<usize> = test_rounds.iter().copied().filter(|&t| t <= md_round).collect();
    let ce_rounds: Vec<usize> = test_rounds.iter().copied().filter(|&t| t > md_round).collect();
    let ce_needs_groups = cfg.methods.iter().any(Method::needs_groups);

    let run = TrainingRun {
        shards: &data.shards,
        valset: &data.valset,
        train_cfg: &cfg.train,
        rounds: cfg.rounds,
        init_seed: seeds.model_init(rep),
        round_seed: seeds.round_base(rep),
        selection: None,
    };

    let ctx = ScoreCtx {
        cfg,
        valset: &data.valset,
        channel: cfg.channel()?,
    };
    let mut md_state = ScoreState::new(md_method, cfg.mode);
    let mut md_snapshots: Vec<(usize, Vec<f64>, u64)> = Vec::new();
    let mut md_prev_test: Option<usize> = None;
    let mut flagged: Vec<usize> = Vec::new();
    let mut post_matrices: BTreeMap<usize, AssignmentMatrix> = BTreeMap::new();

    let view = run_training_with(
        &run,
        |t, participants| {
            let is_test = test_rounds.contains(&t);
            if !is_test {
                return Ok(None);
            }
            if t <= md_round {
                Ok(if md_method.needs_groups() {
                    matrices.get(&t).cloned()
                } else {
                    None
                })
            } else if ce_needs_groups {
                // Survivor cohorts need fresh matrices over their width.
                let m = build_assignment(
                    participants.len(),
                    cfg.fedgt.num_groups,
                    cfg.fedgt.group_size,
                    cfg.master_seed,
                    cfg.fedgt.strategy,
                    t,
                )?;
                post_matrices.insert(t, m.clone());
                Ok(Some(m))
            } else {
                Ok(None)
            }
        },
        |t, view| {
            if t > md_round || !md_rounds.contains(&t) {
                return Ok(Vec::new());
            }
            let started = Instant::now();
            let rec = view.rounds().last().unwrap();
            let prev_round = view.rounds().get(t.wrapping_sub(2));
            let prev_test_rec = md_prev_test.map(|p| &view.rounds()[p - 1]);
            let scores = md_state.advance(md_method, &ctx, rec, prev_round, prev_test_rec)?;
            md_prev_test = Some(t);
            md_snapshots.push((t, scores.clone(), started.elapsed().as_millis() as u64));
            if t < md_round {
                return Ok(Vec::new());
            }
            let det = cluster_detect(&scores, md_method.polarity())?;
            flagged = det
                .predicted_malicious
                .iter()
                .enumerate()
                .filter(|(_, &p)| p)
                .map(|(i, _)| i)
                .collect();
            let survivors = cfg.num_clients - flagged.len();
            if survivors == 0 {
                return Err(Error::Pipeline(
                    "detection flagged every client; nothing left to train".into(),
                ));
            }
            if survivors < 2 {
                return Err(Error::Pipeline(format!(
                    "detection left {survivors} survivor(s); contribution \
                     evaluation needs at least 2"
                )));
            }
            Ok(flagged.clone())
        },
    )?;

    let mut rows = Vec::new();
    for (tau, scores, ms) in &md_snapshots {
        rows.push(ResultRow {
            experiment_id: cfg.experiment_id.clone(),
            method: md_method,
            repetition: rep,
            round: *tau,
            f1: detection_f1(md_method, scores, &data.truth_malicious)?,
            l2: None,
            spearman: None,
            wallclock_ms: *ms,
        });
    }

    let survivors: Vec<usize> =
        (0..cfg.num_clients).filter(|c| !flagged.contains(c)).collect();
    let surv_truth = restrict(&data.truth_malicious, &survivors);
    for &method in &cfg.methods {
        let mut state = ScoreState::new(method, cfg.mode);
        let mut prev_test: Option<usize> = None;
        for (i, &tau) in ce_rounds.iter().enumerate() {
            let started = Instant::now();
            let rec = &view.rounds()[tau - 1];
            let prev_round = view.rounds().get(tau.wrapping_sub(2));
            let prev_test_rec = prev_test.map(|p| &view.rounds()[p - 1]);
            let scores = state.advance(method, &ctx, rec, prev_round, prev_test_rec)?;
            let surv_scores = restrict(&scores, &survivors);
            let det = cluster_detect(&surv_scores, method.polarity())?;
            let f1_val = f1(&det.predicted_malicious, &surv_truth)?;
            let (l2, phi) = if i + 1 == ce_rounds.len() {
                let (l2, phi) = ce_metrics(method, &scores, &data.noise_profile, &survivors)?;
                (Some(l2), Some(phi))
            } else {
                (None, None)
            };
            rows.push(ResultRow {
                experiment_id: cfg.experiment_id.clone(),
                method,
                repetition: rep,
                round: tau,
                f1: f1_val,
                l2,
                spearman: phi,
                wallclock_ms: started.elapsed().as_millis() as u64,
            });
            prev_test = Some(tau);
        }
    }
    Ok(rows)
}

/// Runs a full experiment: data preparation once, then all repetitions
/// (in parallel), collecting rows into a canonical table. A repetition that
/// fails is recorded in `failures` and the rest continue.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ResultsTable> {
    cfg.validate()?;
    let seeds = SeedPlan::new(cfg.master_seed);
    let data = prepare_data(cfg, &seeds)?;
    let test_rounds = cfg.effective_test_rounds();

    let comprehensive = matches!(cfg.pipeline, PipelineSpec::Comprehensive { .. });
    let needs_full_matrices = matches!(cfg.mode, ModeSpec::Silo)
        && match cfg.pipeline {
            PipelineSpec::Plain => cfg.methods.iter().any(Method::needs_groups),
            PipelineSpec::Comprehensive { md_method, .. } => md_method.needs_groups(),
        };
    let matrix_rounds: Vec<usize> = match cfg.pipeline {
        PipelineSpec::Plain => test_rounds.clone(),
        PipelineSpec::Comprehensive { md_round, .. } => {
            test_rounds.iter().copied().filter(|&t| t <= md_round).collect()
        }
    };
    let matrices = if needs_full_matrices {
        build_matrices(cfg, &matrix_rounds, cfg.num_clients)?
    } else {
        BTreeMap::new()
    };

    let outcomes: Vec<(usize, Result<Vec<ResultRow>>)> = (0..cfg.repetitions)
        .into_par_iter()
        .map(|rep| {
            let result = if comprehensive {
                run_comprehensive_repetition(cfg, &seeds, &data, &matrices, rep)
            } else {
                run_plain_repetition(cfg, &seeds, &data, &matrices, rep)
            };
            (rep, result)
        })
        .collect();

    let mut rows = Vec::new();
    let mut failures = Vec::new();
    for (rep, outcome) in outcomes {
        match outcome {
            Ok(mut r) => rows.append(&mut r),
            Err(e) => {
                log::error!("repetition {rep} aborted: {e}");
                failures.push((rep, e.to_string()));
            }
        }
    }
    Ok(ResultsTable::from_rows(cfg.clone(), rows, failures))
}

/// Runs the comprehensive pipeline; the config must request it.
pub fn run_comprehensive(cfg: &ExperimentConfig) -> Result<ResultsTable> {
    if !matches!(cfg.pipeline, PipelineSpec::Comprehensive { .. }) {
        return Err(Error::config(
            "run_comprehensive requires pipeline.kind = \"comprehensive\"",
        ));
    }
    run_experiment(cfg)
}

/// Re-runs an experiment from its manifest and verifies that the canonical
/// results reproduce byte-identically.
pub fn replay(manifest: &RunManifest) -> Result<ResultsTable> {
    let table = run_experiment(&manifest.config)?;
    let digest = sha256_hex(&table.canonical_csv());
    if digest != manifest.canonical_results_sha256 {
        return Err(Error::Pipeline(format!(
            "replay diverged: canonical results digest {digest} does not match \
             manifest {}",
            manifest.canonical_results_sha256
        )));
    }
    Ok(table)
}
