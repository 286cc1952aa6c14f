//! Dataset generation, client partitioning, label-noise injection, and the
//! label-shift attack.
//!
//! Everything here is deterministic given its seed, and noise/attack
//! transforms touch labels only — features are never modified.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::LabeledDataset;
use crate::seeds::{derive_seed, SeedDomain};

/// How to split a dataset across clients.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum PartitionSpec {
    /// Uniform random near-equal split.
    Iid { num_clients: usize },
    /// Per-class proportions drawn from Dirichlet(alpha) across clients.
    /// Smaller alpha gives more skewed, non-IID shards.
    Dirichlet { num_clients: usize, alpha: f64 },
}

impl PartitionSpec {
    pub fn num_clients(&self) -> usize {
        match self {
            PartitionSpec::Iid { num_clients } | PartitionSpec::Dirichlet { num_clients, .. } => {
                *num_clients
            }
        }
    }
}

/// Per-client label-flip probabilities for contribution experiments.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseProfile {
    probs: Vec<f64>,
}

impl NoiseProfile {
    pub fn new(probs: Vec<f64>) -> Result<Self> {
        if probs.iter().any(|p| !(0.0..=1.0).contains(p)) {
            return Err(Error::config("noise probabilities must lie in [0, 1]"));
        }
        Ok(Self { probs })
    }

    /// The linear profile: client i (0-based) flips each label with
    /// probability (i+1)/(N+1), so the last of 15 clients gets 15/16.
    pub fn linear(num_clients: usize) -> Self {
        let denom = (num_clients + 1) as f64;
        Self {
            probs: (0..num_clients).map(|i| (i + 1) as f64 / denom).collect(),
        }
    }

    pub fn zero(num_clients: usize) -> Self {
        Self {
            probs: vec![0.0; num_clients],
        }
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn len(&self) -> usize {
        self.probs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.probs.is_empty()
    }
}

/// Which clients attack, and how.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttackSpec {
    /// 0-based client indices.
    pub attackers: Vec<usize>,
    pub kind: AttackKind,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttackKind {
    /// Every label y becomes (y+1) mod C.
    LabelShift,
}

/// Synthetic classification data: C Gaussian clusters in d dimensions with
/// unit isotropic covariance and balanced labels. For C <= d the cluster
/// means sit on scaled coordinate axes exactly `sep` apart pairwise; for
/// C > d they are random with pairwise distance `sep` in expectation.
pub fn make_synthetic(
    num_classes: usize,
    num_features: usize,
    num_rows: usize,
    sep: f64,
    seed: u64,
) -> Result<LabeledDataset> {
    if num_classes < 2 {
        return Err(Error::config("need at least 2 classes"));
    }
    if num_features == 0 {
        return Err(Error::config("need at least 1 feature"));
    }
    if num_rows < num_classes {
        return Err(Error::config(format!(
            "{num_rows} rows cannot cover {num_classes} classes"
        )));
    }
    if !(sep >= 0.0 && sep.is_finite()) {
        return Err(Error::config("separation must be finite and nonnegative"));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let mut means = vec![vec![0.0; num_features]; num_classes];
    if sep > 0.0 {
        if num_classes <= num_features {
            let scale = sep / 2.0_f64.sqrt();
            for (c, mean) in means.iter_mut().enumerate() {
                mean[c] = scale;
            }
        } else {
            let scale = sep / (2.0 * num_features as f64).sqrt();
            for mean in &mut means {
                for m in mean.iter_mut() {
                    let z: f64 = rng.sample(StandardNormal);
                    *m = z * scale;
                }
            }
        }
    }

    let mut labels: Vec<usize> = (0..num_rows).map(|i| i % num_classes).collect();
    labels.shuffle(&mut rng);

    let mut features = Vec::with_capacity(num_rows * num_features);
    for &y in &labels {
        for j in 0..num_features {
            let z: f64 = rng.sample(StandardNormal);
            features.push(means[y][j] + z);
        }
    }

    LabeledDataset::new(features, labels, num_features, num_classes)
}

/// Splits `data` into disjoint client shards that cover it exactly.
pub fn partition(
    data: &LabeledDataset,
    spec: &PartitionSpec,
    seed: u64,
) -> Result<Vec<LabeledDataset>> {
    let n = spec.num_clients();
    if n == 0 {
        return Err(Error::config("need at least 1 client"));
    }
    if data.len() < n {
        return Err(Error::config(format!(
            "{} rows cannot cover {n} clients",
            data.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let mut per_client: Vec<Vec<usize>> = match spec {
        PartitionSpec::Iid { .. } => {
            let mut idx: Vec<usize> = (0..data.len()).collect();
            idx.shuffle(&mut rng);
            let base = data.len() / n;
            let extra = data.len() % n;
            let mut out = Vec::with_capacity(n);
            let mut cursor = 0;
            for i in 0..n {
                let size = base + usize::from(i < extra);
                out.push(idx[cursor..cursor + size].to_vec());
                cursor += size;
            }
            out
        }
        PartitionSpec::Dirichlet { alpha, .. } => {
            if !(alpha.is_finite() && *alpha > 0.0) {
                return Err(Error::config("dirichlet alpha must be positive"));
            }
            let gamma = Gamma::new(*alpha, 1.0)
                .map_err(|e| Error::config(format!("bad dirichlet alpha: {e}")))?;
            let mut out: Vec<Vec<usize>> = vec![Vec::new(); n];
            for class in 0..data.num_classes() {
                let mut rows: Vec<usize> =
                    (0..data.len()).filter(|&i| data.label(i) == class).collect();
                if rows.is_empty() {
                    continue;
                }
                rows.shuffle(&mut rng);
                let mut weights: Vec<f64> = (0..n).map(|_| gamma.sample(&mut rng)).collect();
                let total: f64 = weights.iter().sum();
                if !(total.is_finite() && total > 0.0) {
                    // All-zero gamma draws are possible at tiny alpha; fall
                    // back to a uniform split of this class.
                    weights = vec![1.0; n];
                }
                let total: f64 = weights.iter().sum();
                let mut cursor = 0usize;
                let mut acc = 0.0;
                for (client, w) in weights.iter().enumerate() {
                    acc += w / total;
                    let end = if client + 1 == n {
                        rows.len()
                    } else {
                        ((acc * rows.len() as f64).round() as usize).min(rows.len())
                    };
                    out[client].extend_from_slice(&rows[cursor..end.max(cursor)]);
                    cursor = end.max(cursor);
                }
            }
            out
        }
    };

    // Extreme Dirichlet draws can starve a client; every client must train,
    // so move one row over from whichever shard is currently largest.
    loop {
        let Some(empty) = per_client.iter().position(Vec::is_empty) else {
            break;
        };
        let largest = (0..n).max_by_key(|&i| per_client[i].len()).unwrap();
        if per_client[largest].len() <= 1 {
            return Err(Error::config("not enough rows to give every client one"));
        }
        let moved = per_client[largest].pop().unwrap();
        per_client[empty].push(moved);
        log::warn!("empty shard {empty} repaired with one row from shard {largest}");
    }

    per_client
        .iter()
        .map(|rows| data.subset(rows))
        .collect::<Result<Vec<_>>>()
}

/// Replaces each label of shard i, independently with probability
/// `profile[i]`, by a uniformly random *different* label. Returns the noisy
/// shards and the realized flip count per client.
pub fn inject_linear_noise(
    shards: &[LabeledDataset],
    profile: &NoiseProfile,
    seed: u64,
) -> Result<(Vec<LabeledDataset>, Vec<usize>)> {
    if shards.len() != profile.len() {
        return Err(Error::config(format!(
            "{} shards but {} noise probabilities",
            shards.len(),
            profile.len()
        )));
    }
    let mut noisy = Vec::with_capacity(shards.len());
    let mut realized = Vec::with_capacity(shards.len());
    for (i, shard) in shards.iter().enumerate() {
        let p = profile.probs[i];
        if p == 0.0 {
            noisy.push(shard.clone());
            realized.push(0);
            continue;
        }
        let c = shard.num_classes();
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, SeedDomain::Noise, i as u64));
        let mut flips = 0usize;
        let labels: Vec<usize> = shard
            .labels()
            .iter()
            .map(|&y| {
                if rng.gen::<f64>() < p {
                    flips += 1;
                    // Uniform over the c-1 labels that differ from y.
                    let off = rng.gen_range(1..c);
                    (y + off) % c
                } else {
                    y
                }
            })
            .collect();
        noisy.push(shard.with_labels(labels)?);
        realized.push(flips);
    }
    Ok((noisy, realized))
}

/// Applies the configured attack to attacker shards; others pass through.
pub fn apply_attack(shards: &[LabeledDataset], spec: &AttackSpec) -> Result<Vec<LabeledDataset>> {
    if let Some(&bad) = spec.attackers.iter().find(|&&a| a >= shards.len()) {
        return Err(Error::config(format!(
            "attacker index {bad} out of range for {} clients",
            shards.len()
        )));
    }
    let mut out = Vec::with_capacity(shards.len());
    for (i, shard) in shards.iter().enumerate() {
        if spec.attackers.contains(&i) {
            match spec.kind {
                AttackKind::LabelShift => {
                    let c = shard.num_classes();
                    let labels = shard.labels().iter().map(|&y| (y + 1) % c).collect();
                    out.push(shard.with_labels(labels)?);
                }
            }
        } else {
            out.push(shard.clone());
        }
    }
    Ok(out)
}

/// Reads a labeled dataset from CSV: a header row containing a `label`
/// column of nonnegative integers; every other column is a real feature.
/// The class count is max(label) + 1.
pub fn import_csv(path: &std::path::Path) -> Result<LabeledDataset> {
    let mut reader = csv::Reader::from_path(path)
        .map_err(|e| Error::Parse(format!("{}: {e}", path.display())))?;
    let headers = reader
        .headers()
        .map_err(|e| Error::Parse(format!("{}: {e}", path.display())))?
        .clone();
    let label_col = headers
        .iter()
        .position(|h| h == "label")
        .ok_or_else(|| Error::Parse(format!("{}: no `label` column", path.display())))?;

    let mut features = Vec::new();
    let mut labels = Vec::new();
    for (row_idx, record) in reader.records().enumerate() {
        let record = record.map_err(|e| Error::Parse(format!("row {}: {e}", row_idx + 1)))?;
        for (col, field) in record.iter().enumerate() {
            if col == label_col {
                let y: i64 = field
                    .trim()
                    .parse()
                    .map_err(|_| Error::Parse(format!("row {}: bad label {field:?}", row_idx + 1)))?;
                if y < 0 {
                    return Err(Error::Parse(format!(
                        "row {}: negative label {y}",
                        row_idx + 1
                    )));
                }
                labels.push(y as usize);
            } else {
                let v: f64 = field.trim().parse().map_err(|_| {
                    Error::Parse(format!("row {}: bad feature {field:?}", row_idx + 1))
                })?;
                features.push(v);
            }
        }
    }
    if labels.is_empty() {
        return Err(Error::Parse(format!("{}: no data rows", path.display())));
    }
    let num_features = headers.len() - 1;
    let num_classes = labels.iter().max().unwrap() + 1;
    if num_classes < 2 {
        return Err(Error::Parse("need at least 2 distinct classes".into()));
    }
    LabeledDataset::new(features, labels, num_features, num_classes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{evaluate, train_local, ModelKind, TrainConfig};

    fn quick_cfg() -> TrainConfig {
        TrainConfig {
            local_epochs: 5,
            batch_size: 32,
            learning_rate: 0.2,
            momentum: 0.9,
            weight_decay: 0.0,
            model_kind: ModelKind::Logistic,
        }
    }

    #[test]
    fn synthetic_is_deterministic_and_balanced() {
        let a = make_synthetic(3, 5, 100, 2.0, 9).unwrap();
        let b = make_synthetic(3, 5, 100, 2.0, 9).unwrap();
        assert_eq!(a, b);
        let c = make_synthetic(3, 5, 100, 2.0, 10).unwrap();
        assert_ne!(a, c);

        for class in 0..3 {
            let count = a.labels().iter().filter(|&&y| y == class).count();
            assert!((33..=34).contains(&count), "class {class}: {count}");
        }
    }

    #[test]
    fn wide_separation_is_learnable() {
        let data = make_synthetic(2, 4, 1000, 10.0, 3).unwrap();
        let start = ModelKind::Logistic.init_params(4, 2, 0);
        let model = train_local(&start, &data, &quick_cfg(), 1).unwrap();
        let util = evaluate(&ModelKind::Logistic, &model, &data).unwrap();
        assert!(util.accuracy > 0.99, "accuracy {}", util.accuracy);
    }

    #[test]
    fn zero_separation_trains_to_chance() {
        let data = make_synthetic(2, 4, 1000, 0.0, 3).unwrap();
        let start = ModelKind::Logistic.init_params(4, 2, 0);
        let model = train_local(&start, &data, &quick_cfg(), 1).unwrap();
        let util = evaluate(&ModelKind::Logistic, &model, &data).unwrap();
        assert!((util.accuracy - 0.5).abs() <= 0.05, "accuracy {}", util.accuracy);
    }

    #[test]
    fn synthetic_rejects_bad_input() {
        assert!(make_synthetic(1, 4, 10, 1.0, 0).is_err());
        assert!(make_synthetic(4, 4, 3, 1.0, 0).is_err());
        assert!(make_synthetic(2, 0, 10, 1.0, 0).is_err());
    }

    #[test]
    fn iid_partition_sizes_and_cover() {
        let data = make_synthetic(2, 3, 100, 1.0, 5).unwrap();
        let shards = partition(&data, &PartitionSpec::Iid { num_clients: 4 }, 7).unwrap();
        assert_eq!(shards.len(), 4);
        for s in &shards {
            assert_eq!(s.len(), 25);
        }
        let total: usize = shards.iter().map(|s| s.len()).sum();
        assert_eq!(total, data.len());
    }

    #[test]
    fn dirichlet_high_alpha_approaches_global_proportions() {
        let data = make_synthetic(4, 3, 4000, 1.0, 5).unwrap();
        let shards = partition(
            &data,
            &PartitionSpec::Dirichlet {
                num_clients: 5,
                alpha: 1e6,
            },
            11,
        )
        .unwrap();
        for s in &shards {
            for class in 0..4 {
                let frac = s.labels().iter().filter(|&&y| y == class).count() as f64
                    / s.len() as f64;
                assert!((frac - 0.25).abs() < 0.02, "class {class}: {frac}");
            }
        }
    }

    fn label_entropy(shard: &LabeledDataset) -> f64 {
        let c = shard.num_classes();
        let mut counts = vec![0usize; c];
        for &y in shard.labels() {
            counts[y] += 1;
        }
        counts
            .iter()
            .filter(|&&k| k > 0)
            .map(|&k| {
                let p = k as f64 / shard.len() as f64;
                -p * p.ln()
            })
            .sum()
    }

    #[test]
    fn dirichlet_half_is_more_skewed_than_iid() {
        let data = make_synthetic(10, 3, 3000, 1.0, 2).unwrap();
        let mut iid_mean = 0.0;
        let mut dir_mean = 0.0;
        for seed in 0..10u64 {
            let iid = partition(&data, &PartitionSpec::Iid { num_clients: 15 }, seed).unwrap();
            let dir = partition(
                &data,
                &PartitionSpec::Dirichlet {
                    num_clients: 15,
                    alpha: 0.5,
                },
                seed,
            )
            .unwrap();
            iid_mean += iid.iter().map(label_entropy).sum::<f64>() / 15.0;
            dir_mean += dir.iter().map(label_entropy).sum::<f64>() / 15.0;
        }
        assert!(
            dir_mean < iid_mean,
            "dirichlet {dir_mean} not below iid {iid_mean}"
        );
    }

    #[test]
    fn dirichlet_covers_dataset_disjointly() {
        let data = make_synthetic(5, 3, 500, 1.0, 4).unwrap();
        let shards = partition(
            &data,
            &PartitionSpec::Dirichlet {
                num_clients: 8,
                alpha: 0.1,
            },
            13,
        )
        .unwrap();
        let total: usize = shards.iter().map(|s| s.len()).sum();
        assert_eq!(total, data.len());
        for s in &shards {
            assert!(!s.is_empty());
        }
    }

    #[test]
    fn zero_noise_is_identity() {
        let data = make_synthetic(3, 2, 90, 1.0, 6).unwrap();
        let shards = partition(&data, &PartitionSpec::Iid { num_clients: 3 }, 1).unwrap();
        let (noisy, flips) = inject_linear_noise(&shards, &NoiseProfile::zero(3), 99).unwrap();
        assert_eq!(noisy, shards);
        assert_eq!(flips, vec![0, 0, 0]);
    }

    #[test]
    fn linear_profile_matches_formula() {
        let p = NoiseProfile::linear(15);
        assert_eq!(p.probs()[14], 15.0 / 16.0);
        assert_eq!(p.probs()[0], 1.0 / 16.0);
    }

    #[test]
    fn half_noise_flips_half_the_labels() {
        let data = make_synthetic(4, 2, 1000, 1.0, 8).unwrap();
        let shards = vec![data];
        let profile = NoiseProfile::new(vec![0.5]).unwrap();
        let (noisy, flips) = inject_linear_noise(&shards, &profile, 17).unwrap();
        // Binomial(1000, 0.5) 99% interval.
        assert!((430..=570).contains(&flips[0]), "flips {}", flips[0]);
        // Every flip changed the label, and features are untouched.
        let changed = shards[0]
            .labels()
            .iter()
            .zip(noisy[0].labels())
            .filter(|(a, b)| a != b)
            .count();
        assert_eq!(changed, flips[0]);
        assert_eq!(shards[0].row(3), noisy[0].row(3));
    }

    #[test]
    fn label_shift_attack() {
        let data = make_synthetic(2, 2, 40, 1.0, 12).unwrap();
        let shards = partition(&data, &PartitionSpec::Iid { num_clients: 2 }, 0).unwrap();

        let none = AttackSpec {
            attackers: vec![],
            kind: AttackKind::LabelShift,
        };
        assert_eq!(apply_attack(&shards, &none).unwrap(), shards);

        let spec = AttackSpec {
            attackers: vec![1],
            kind: AttackKind::LabelShift,
        };
        let attacked = apply_attack(&shards, &spec).unwrap();
        assert_eq!(attacked[0], shards[0]);
        for (orig, new) in shards[1].labels().iter().zip(attacked[1].labels()) {
            assert_eq!(*new, (orig + 1) % 2);
        }

        // Shifting C times walks back to the original labels.
        let mut cycled = shards.clone();
        for _ in 0..2 {
            cycled = apply_attack(&cycled, &spec).unwrap();
        }
        assert_eq!(cycled, shards);

        let bad = AttackSpec {
            attackers: vec![7],
            kind: AttackKind::LabelShift,
        };
        assert!(apply_attack(&shards, &bad).is_err());
    }

    #[test]
    fn attack_and_noise_commute_on_disjoint_clients() {
        let data = make_synthetic(3, 2, 300, 1.0, 14).unwrap();
        let shards = partition(&data, &PartitionSpec::Iid { num_clients: 3 }, 2).unwrap();
        let profile = NoiseProfile::new(vec![0.0, 0.6, 0.3]).unwrap();
        let attack = AttackSpec {
            attackers: vec![0],
            kind: AttackKind::LabelShift,
        };

        let (noise_first, _) = inject_linear_noise(&shards, &profile, 5).unwrap();
        let a = apply_attack(&noise_first, &attack).unwrap();
        let attack_first = apply_attack(&shards, &attack).unwrap();
        let (b, _) = inject_linear_noise(&attack_first, &profile, 5).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn csv_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("toy.csv");
        std::fs::write(&path, "x0,label,x1\n1.5,0,-2.0\n0.25,2,4.0\n-1.0,1,0.0\n").unwrap();
        let data = import_csv(&path).unwrap();
        assert_eq!(data.len(), 3);
        assert_eq!(data.num_features(), 2);
        assert_eq!(data.num_classes(), 3);
        assert_eq!(data.row(1), &[0.25, 4.0]);
        assert_eq!(data.label(1), 2);

        let bad = dir.path().join("bad.csv");
        std::fs::write(&bad, "x0,x1\n1.0,2.0\n").unwrap();
        assert!(matches!(import_csv(&bad), Err(Error::Parse(_))));

        let garbled = dir.path().join("garbled.csv");
        std::fs::write(&garbled, "x0,label\nfoo,0\n").unwrap();
        assert!(matches!(import_csv(&garbled), Err(Error::Parse(_))));
    }
}
