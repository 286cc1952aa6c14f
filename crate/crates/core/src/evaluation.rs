//! Score evaluation: clustering-based misbehavior decisions with F1, and
//! contribution metrics (simplex transform, L2 error, Spearman correlation).

use serde::{Deserialize, Serialize};

use crate::data::NoiseProfile;
use crate::error::{Error, Result};

/// Which end of the score axis marks suspected misbehavior. QI, COS, and
/// LOO score good behavior high; group-testing LLRs score it low.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Polarity {
    LowIsMalicious,
    HighIsMalicious,
}

/// Output of [`cluster_detect`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectionResult {
    pub predicted_malicious: Vec<bool>,
    /// Mean scores of the two clusters, lower first.
    pub cluster_means: [f64; 2],
    /// All scores identical: no second cluster exists, nothing is flagged.
    pub degenerate: bool,
    /// Filled by callers that know the ground truth.
    pub f1: Option<f64>,
}

/// Contribution-evaluation metrics of one method against the ground truth.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CeResult {
    pub transformed_scores: Vec<f64>,
    pub l2: f64,
    pub spearman_phi: f64,
    /// Spearman was undefined (zero rank variance on a side).
    pub spearman_degenerate: bool,
}

/// Min-offset + sum normalization onto the probability simplex: subtract the
/// minimum score, divide by the sum. All-equal input maps to uniform 1/N.
pub fn transform(scores: &[f64]) -> Result<Vec<f64>> {
    if scores.len() < 2 {
        return Err(Error::config("transform needs at least 2 scores"));
    }
    if scores.iter().any(|v| !v.is_finite()) {
        return Err(Error::numeric("non-finite score"));
    }
    let min = scores.iter().cloned().fold(f64::INFINITY, f64::min);
    let shifted: Vec<f64> = scores.iter().map(|v| v - min).collect();
    let total: f64 = shifted.iter().sum();
    if total == 0.0 {
        return Ok(vec![1.0 / scores.len() as f64; scores.len()]);
    }
    Ok(shifted.iter().map(|v| v / total).collect())
}

/// Splits scores into exactly two clusters by single-linkage agglomeration —
/// in one dimension, equivalent to cutting the largest gap between adjacent
/// sorted scores — and flags the cluster on the `polarity` side. Ties in
/// both sort order and gap size break toward lower client index / lower
/// split position. All-identical scores flag nobody (with a warning).
pub fn cluster_detect(scores: &[f64], polarity: Polarity) -> Result<DetectionResult> {
    if scores.len() < 2 {
        return Err(Error::config("clustering needs at least 2 scores"));
    }
    if scores.iter().any(|v| !v.is_finite()) {
        return Err(Error::numeric("non-finite score"));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&i, &j| scores[i].total_cmp(&scores[j]).then(i.cmp(&j)));

    let mut best_gap = 0.0;
    let mut split = 0; // last index of the lower cluster, in sorted order
    for w in 0..order.len() - 1 {
        let gap = scores[order[w + 1]] - scores[order[w]];
        if gap > best_gap {
            best_gap = gap;
            split = w;
        }
    }

    if best_gap == 0.0 {
        log::warn!("all scores identical; flagging no one");
        let mean = scores[0];
        return Ok(DetectionResult {
            predicted_malicious: vec![false; scores.len()],
            cluster_means: [mean, mean],
            degenerate: true,
            f1: None,
        });
    }

    let low: Vec<usize> = order[..=split].to_vec();
    let high: Vec<usize> = order[split + 1..].to_vec();
    let mean = |idx: &[usize]| idx.iter().map(|&i| scores[i]).sum::<f64>() / idx.len() as f64;
    let cluster_means = [mean(&low), mean(&high)];

    let flagged = match polarity {
        Polarity::LowIsMalicious => &low,
        Polarity::HighIsMalicious => &high,
    };
    let mut predicted_malicious = vec![false; scores.len()];
    for &i in flagged {
        predicted_malicious[i] = true;
    }
    Ok(DetectionResult {
        predicted_malicious,
        cluster_means,
        degenerate: false,
        f1: None,
    })
}

/// Variant of [`cluster_detect`] that clusters on fractional ranks instead of
/// raw scores, making the prediction invariant under any strictly increasing
/// transformation of the scores.
pub fn cluster_detect_on_ranks(scores: &[f64], polarity: Polarity) -> Result<DetectionResult> {
    if scores.iter().any(|v| !v.is_finite()) {
        return Err(Error::numeric("non-finite score"));
    }
    cluster_detect(&fractional_ranks(scores), polarity)
}

/// F1 with malicious as the positive class. Empty predicted and empty truth
/// count as a perfect score.
pub fn f1(predicted: &[bool], truth: &[bool]) -> Result<f64> {
    if predicted.len() != truth.len() {
        return Err(Error::config(format!(
            "length mismatch: {} predictions vs {} truths",
            predicted.len(),
            truth.len()
        )));
    }
    let mut tp = 0usize;
    let mut fp = 0usize;
    let mut fneg = 0usize;
    for (&p, &t) in predicted.iter().zip(truth) {
        match (p, t) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, true) => fneg += 1,
            (false, false) => {}
        }
    }
    if tp + fp == 0 && tp + fneg == 0 {
        return Ok(1.0);
    }
    if tp == 0 {
        return Ok(0.0);
    }
    let precision = tp as f64 / (tp + fp) as f64;
    let recall = tp as f64 / (tp + fneg) as f64;
    Ok(2.0 * precision * recall / (precision + recall))
}

/// Euclidean distance between two equal-length vectors.
pub fn l2_error(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::config(format!(
            "length mismatch: {} vs {}",
            a.len(),
            b.len()
        )));
    }
    Ok(a.iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt())
}

/// Spearman correlation outcome; `degenerate` marks zero rank variance,
/// where the coefficient is undefined and reported as 0.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Spearman {
    pub rho: f64,
    pub degenerate: bool,
}

/// Fractional ranks with ties assigned the average of their positions.
pub fn fractional_ranks(values: &[f64]) -> Vec<f64> {
    let n = values.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| values[i].total_cmp(&values[j]));
    let mut out = vec![0.0; n];
    let mut i = 0;
    while i < n {
        let mut j = i;
        while j + 1 < n && values[order[j + 1]] == values[order[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            out[k] = avg;
        }
        i = j + 1;
    }
    out
}

/// Spearman correlation: Pearson correlation of fractional ranks.
pub fn spearman(a: &[f64], b: &[f64]) -> Result<Spearman> {
    if a.len() != b.len() {
        return Err(Error::config(format!(
            "length mismatch: {} vs {}",
            a.len(),
            b.len()
        )));
    }
    if a.len() < 3 {
        return Err(Error::config("spearman needs at least 3 points"));
    }
    let ra = fractional_ranks(a);
    let rb = fractional_ranks(b);
    let n = a.len() as f64;
    let mean = (n + 1.0) / 2.0;
    let mut cov = 0.0;
    let mut var_a = 0.0;
    let mut var_b = 0.0;
    for (x, y) in ra.iter().zip(&rb) {
        cov += (x - mean) * (y - mean);
        var_a += (x - mean) * (x - mean);
        var_b += (y - mean) * (y - mean);
    }
    if var_a == 0.0 || var_b == 0.0 {
        return Ok(Spearman {
            rho: 0.0,
            degenerate: true,
        });
    }
    Ok(Spearman {
        rho: cov / (var_a * var_b).sqrt(),
        degenerate: false,
    })
}

/// Contribution ground truth from a noise profile: client n contributes
/// 1 - flip_probability, pushed through the simplex transform.
pub fn ce_ground_truth(profile: &NoiseProfile) -> Result<Vec<f64>> {
    let raw: Vec<f64> = profile.probs().iter().map(|p| 1.0 - p).collect();
    transform(&raw)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn transform_examples() {
        let out = transform(&[-2.0, 0.0, 3.0]).unwrap();
        let expected = [0.0, 2.0 / 7.0, 5.0 / 7.0];
        for (o, e) in out.iter().zip(&expected) {
            assert!((o - e).abs() < 1e-12);
        }

        let uniform = transform(&[4.2, 4.2, 4.2]).unwrap();
        for v in &uniform {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }

        assert!(transform(&[1.0]).is_err());
    }

    #[test]
    fn transform_is_offset_invariant_and_idempotent() {
        let scores = [3.0, -1.0, 0.5, 2.0];
        let shifted: Vec<f64> = scores.iter().map(|v| v + 17.25).collect();
        let a = transform(&scores).unwrap();
        let b = transform(&shifted).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() < 1e-12);
        }
        let twice = transform(&a).unwrap();
        for (x, y) in a.iter().zip(&twice) {
            assert!((x - y).abs() < 1e-12);
        }
        let sum: f64 = a.iter().sum();
        assert!((sum - 1.0).abs() < 1e-12);
    }

    #[test]
    fn cluster_separates_obvious_groups() {
        let scores = [-5.0, -5.0, -5.0, 3.0, 3.0, 3.0];
        let det = cluster_detect(&scores, Polarity::LowIsMalicious).unwrap();
        assert_eq!(
            det.predicted_malicious,
            vec![true, true, true, false, false, false]
        );
        assert_eq!(det.cluster_means, [-5.0, 3.0]);

        let det = cluster_detect(&scores, Polarity::HighIsMalicious).unwrap();
        assert_eq!(
            det.predicted_malicious,
            vec![false, false, false, true, true, true]
        );
    }

    #[test]
    fn cluster_identical_scores_flags_nobody() {
        let det = cluster_detect(&[1.0; 5], Polarity::LowIsMalicious).unwrap();
        assert!(det.degenerate);
        assert!(det.predicted_malicious.iter().all(|&p| !p));
    }

    /// Brute-force oracle: try every split position of the sorted scores and
    /// keep the one with the widest inter-cluster gap — the definition of a
    /// 2-cluster single-linkage cut in one dimension.
    fn oracle_split(scores: &[f64], polarity: Polarity) -> Vec<bool> {
        let mut order: Vec<usize> = (0..scores.len()).collect();
        order.sort_by(|&i, &j| scores[i].total_cmp(&scores[j]).then(i.cmp(&j)));
        let mut best = (0.0, 0usize);
        for s in 0..order.len() - 1 {
            let gap = scores[order[s + 1]] - scores[order[s]];
            if gap > best.0 {
                best = (gap, s);
            }
        }
        let mut flagged = vec![false; scores.len()];
        if best.0 == 0.0 {
            return flagged;
        }
        let side: &[usize] = match polarity {
            Polarity::LowIsMalicious => &order[..=best.1],
            Polarity::HighIsMalicious => &order[best.1 + 1..],
        };
        for &i in side {
            flagged[i] = true;
        }
        flagged
    }

    #[test]
    fn cluster_matches_brute_force_oracle() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(31);
        for _ in 0..200 {
            let n = rng.gen_range(2..20);
            let scores: Vec<f64> = (0..n).map(|_| rng.gen_range(-5.0..5.0)).collect();
            for polarity in [Polarity::LowIsMalicious, Polarity::HighIsMalicious] {
                let det = cluster_detect(&scores, polarity).unwrap();
                assert_eq!(det.predicted_malicious, oracle_split(&scores, polarity));
            }
        }
    }

    #[test]
    fn f1_examples() {
        let truth = [true, true, true, false, false];
        assert_eq!(f1(&truth, &truth).unwrap(), 1.0);
        assert_eq!(f1(&[false; 5], &truth).unwrap(), 0.0);
        assert_eq!(f1(&[false; 5], &[false; 5]).unwrap(), 1.0);

        // predicted {0,1,2}, truth {2,3,4}: precision 1/3, recall 1/3.
        let predicted = [true, true, true, false, false];
        let truth = [false, false, true, true, true];
        assert!((f1(&predicted, &truth).unwrap() - 1.0 / 3.0).abs() < 1e-12);

        assert!(f1(&[true], &[true, false]).is_err());
    }

    #[test]
    fn l2_examples() {
        assert_eq!(l2_error(&[0.5, 0.5], &[0.5, 0.5]).unwrap(), 0.0);
        let v = l2_error(&[0.5, 0.5], &[1.0, 0.0]).unwrap();
        assert!((v - 0.5_f64.sqrt()).abs() < 1e-12);
        assert!(l2_error(&[0.5], &[0.5, 0.5]).is_err());
    }

    #[test]
    fn spearman_examples() {
        let s = spearman(&[1.0, 2.0, 3.0, 4.0], &[10.0, 20.0, 30.0, 40.0]).unwrap();
        assert_eq!(s.rho, 1.0);
        let s = spearman(&[1.0, 2.0, 3.0, 4.0], &[4.0, 3.0, 2.0, 1.0]).unwrap();
        assert_eq!(s.rho, -1.0);
        let s = spearman(&[1.0, 2.0, 3.0, 4.0], &[1.0, 2.0, 4.0, 3.0]).unwrap();
        assert!((s.rho - 0.8).abs() < 1e-12);

        let s = spearman(&[1.0, 1.0, 1.0], &[1.0, 2.0, 3.0]).unwrap();
        assert!(s.degenerate);
        assert_eq!(s.rho, 0.0);

        assert!(spearman(&[1.0, 2.0], &[1.0, 2.0]).is_err());
    }

    #[test]
    fn spearman_is_rank_invariant() {
        let a = [0.1, 0.7, 0.3, 0.9, 0.5];
        let b = [2.0, 1.0, 5.0, 4.0, 3.0];
        let base = spearman(&a, &b).unwrap();
        let fa: Vec<f64> = a.iter().map(|v| v.exp() * 3.0).collect();
        let fb: Vec<f64> = b.iter().map(|v| v.powi(3) - 2.0).collect();
        let mapped = spearman(&fa, &fb).unwrap();
        assert!((base.rho - mapped.rho).abs() < 1e-12);
    }

    #[test]
    fn spearman_averages_tied_ranks() {
        // Hand-checked: a = [1, 2, 2, 3] has ranks [1, 2.5, 2.5, 4].
        assert_eq!(fractional_ranks(&[1.0, 2.0, 2.0, 3.0]), vec![1.0, 2.5, 2.5, 4.0]);
    }

    #[test]
    fn ce_ground_truth_from_noise() {
        use crate::data::NoiseProfile;
        let g = ce_ground_truth(&NoiseProfile::linear(15)).unwrap();
        assert_eq!(g.len(), 15);
        // Monotone increasing noise gives strictly decreasing contribution.
        for w in g.windows(2) {
            assert!(w[0] > w[1]);
        }
        let sum: f64 = g.iter().sum();
        assert!((sum - 1.0).abs() < 1e-12);

        let uniform = ce_ground_truth(&NoiseProfile::zero(4)).unwrap();
        for v in &uniform {
            assert!((v - 0.25).abs() < 1e-15);
        }
    }
}
