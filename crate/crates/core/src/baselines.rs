//! Non-private reference methods: cosine-similarity misbehavior scoring and
//! leave-one-out contribution scoring.
//!
//! Both methods read per-client raw updates through the fallible
//! [`RoundRecord::raw_updates`] accessor — data a secure-aggregation server
//! would never hold — and fail fast on redacted records. They exist as
//! upper-bound baselines for the privacy-preserving methods.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::federation::RoundRecord;
use crate::model::{evaluate, weighted_average, LabeledDataset, ModelKind};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BaselineMethod {
    Cos,
    Loo,
}

/// Per-client scores from one of the non-private baselines. Clients that did
/// not participate in the scored rounds sit at 0.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BaselineScores {
    pub method: BaselineMethod,
    pub scores: Vec<f64>,
    pub rounds: Vec<usize>,
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na * nb)
    }
}

/// Cosine similarity between each participant's update direction
/// (local model minus the round's start model) and the aggregated update
/// direction (global minus start). Higher means more aligned with the
/// cohort; label-flipping clients push against it.
pub fn cos_scores(record: &RoundRecord, num_clients: usize) -> Result<BaselineScores> {
    let updates = record.raw_updates()?;
    let agg_dir = record.global_model.delta_from(&record.start_model)?;
    let mut scores = vec![0.0; num_clients];
    for (pos, &client) in record.participants.iter().enumerate() {
        if client >= num_clients {
            return Err(Error::config(format!(
                "participant {client} out of range for {num_clients} clients"
            )));
        }
        let dir = updates[pos].delta_from(&record.start_model)?;
        scores[client] = cosine(&dir, &agg_dir);
    }
    Ok(BaselineScores {
        method: BaselineMethod::Cos,
        scores,
        rounds: vec![record.round_index],
    })
}

/// Componentwise sum of per-round baseline scores of one method.
pub fn accumulate_baseline(per_round: &[BaselineScores]) -> Result<BaselineScores> {
    let Some(first) = per_round.first() else {
        return Err(Error::config("no rounds to accumulate"));
    };
    let n = first.scores.len();
    let method = first.method;
    let mut scores = vec![0.0; n];
    let mut rounds = Vec::new();
    for s in per_round {
        if s.method != method {
            return Err(Error::config("cannot accumulate across methods"));
        }
        if s.scores.len() != n {
            return Err(Error::config(format!(
                "inconsistent client counts: {} vs {n}",
                s.scores.len()
            )));
        }
        for (acc, v) in scores.iter_mut().zip(&s.scores) {
            *acc += v;
        }
        rounds.extend_from_slice(&s.rounds);
    }
    rounds.sort_unstable();
    Ok(BaselineScores {
        method,
        scores,
        rounds,
    })
}

/// Leave-one-out contribution: utility of the full aggregate minus utility
/// of the aggregate excluding client n (remaining weights renormalized),
/// accuracy-based. A single-participant round contributes 0 with a warning,
/// since there is nothing left to aggregate after exclusion.
pub fn loo_scores(
    record: &RoundRecord,
    valset: &LabeledDataset,
    kind: &ModelKind,
    num_clients: usize,
) -> Result<BaselineScores> {
    let updates = record.raw_updates()?;
    let mut scores = vec![0.0; num_clients];
    if record.participants.len() == 1 {
        log::warn!(
            "round {}: single participant, leave-one-out contributes 0",
            record.round_index
        );
        return Ok(BaselineScores {
            method: BaselineMethod::Loo,
            scores,
            rounds: vec![record.round_index],
        });
    }
    let full_acc = record.global_utility.accuracy;
    let weights: Vec<f64> = record
        .participant_sizes
        .iter()
        .map(|&s| s as f64)
        .collect();
    for (pos, &client) in record.participants.iter().enumerate() {
        if client >= num_clients {
            return Err(Error::config(format!(
                "participant {client} out of range for {num_clients} clients"
            )));
        }
        let rest_models: Vec<_> = updates
            .iter()
            .enumerate()
            .filter(|(i, _)| *i != pos)
            .map(|(_, m)| m.clone())
            .collect();
        let rest_weights: Vec<f64> = weights
            .iter()
            .enumerate()
            .filter(|(i, _)| *i != pos)
            .map(|(_, w)| *w)
            .collect();
        let without = weighted_average(&rest_models, &rest_weights)?;
        let util = evaluate(kind, &without, valset)?;
        scores[client] = full_acc - util.accuracy;
    }
    Ok(BaselineScores {
        method: BaselineMethod::Loo,
        scores,
        rounds: vec![record.round_index],
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::make_synthetic;
    use crate::model::{ParamVector, Utility};

    fn util(acc: f64) -> Utility {
        Utility {
            accuracy: acc,
            loss: 1.0 - acc,
        }
    }

    /// Record with explicit start/global/updates; aggregates need not be
    /// consistent, which lets the tests pin scores exactly.
    fn record(
        start: Vec<f64>,
        global: Vec<f64>,
        updates: Option<Vec<Vec<f64>>>,
        global_acc: f64,
    ) -> RoundRecord {
        let n = updates.as_ref().map_or(2, Vec::len);
        RoundRecord::from_parts(
            2,
            ParamVector::new(start).unwrap(),
            util(0.5),
            ParamVector::new(global).unwrap(),
            util(global_acc),
            vec![],
            vec![],
            (0..n).collect(),
            vec![10; n],
            None,
            updates.map(|us| {
                us.into_iter()
                    .map(|u| ParamVector::new(u).unwrap())
                    .collect()
            }),
        )
    }

    #[test]
    fn cos_aligned_and_opposed() {
        // Start at origin: update directions equal the local models.
        let rec = record(
            vec![0.0, 0.0],
            vec![2.0, 0.0],
            Some(vec![vec![-1.0, 0.0], vec![5.0, 0.0]]),
            0.8,
        );
        let s = cos_scores(&rec, 2).unwrap();
        assert!((s.scores[0] - -1.0).abs() < 1e-12);
        assert!((s.scores[1] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn cos_is_scale_invariant() {
        let base = record(
            vec![0.0, 0.0],
            vec![1.0, 1.0],
            Some(vec![vec![2.0, 1.0], vec![0.5, 1.5]]),
            0.8,
        );
        let scaled = record(
            vec![0.0, 0.0],
            vec![1.0, 1.0],
            Some(vec![vec![6.0, 3.0], vec![0.5, 1.5]]),
            0.8,
        );
        let a = cos_scores(&base, 2).unwrap();
        let b = cos_scores(&scaled, 2).unwrap();
        assert!((a.scores[0] - b.scores[0]).abs() < 1e-12);
        assert_eq!(a.scores[1], b.scores[1]);
    }

    #[test]
    fn cos_zero_direction_scores_zero() {
        let rec = record(
            vec![1.0, 1.0],
            vec![2.0, 2.0],
            Some(vec![vec![1.0, 1.0], vec![3.0, 3.0]]),
            0.8,
        );
        let s = cos_scores(&rec, 2).unwrap();
        assert_eq!(s.scores[0], 0.0); // update direction is the zero vector
    }

    #[test]
    fn baselines_fail_on_redacted_records() {
        let rec = record(
            vec![0.0, 0.0],
            vec![1.0, 0.0],
            Some(vec![vec![1.0, 0.0], vec![1.0, 0.0]]),
            0.8,
        )
        .redacted();
        assert!(matches!(
            cos_scores(&rec, 2),
            Err(Error::PrivacyBoundary(_))
        ));
        let val = make_synthetic(2, 2, 10, 1.0, 0).unwrap();
        assert!(matches!(
            loo_scores(&rec, &val, &ModelKind::Logistic, 2),
            Err(Error::PrivacyBoundary(_))
        ));
    }

    #[test]
    fn accumulate_sums_rounds() {
        let mk = |scores: Vec<f64>, round: usize| BaselineScores {
            method: BaselineMethod::Cos,
            scores,
            rounds: vec![round],
        };
        let one = accumulate_baseline(&[mk(vec![1.0, -1.0], 2)]).unwrap();
        assert_eq!(one.scores, vec![1.0, -1.0]);
        let two = accumulate_baseline(&[mk(vec![1.0, -1.0], 2), mk(vec![1.0, -1.0], 3)]).unwrap();
        assert_eq!(two.scores, vec![2.0, -2.0]);
        assert_eq!(two.rounds, vec![2, 3]);
        assert!(accumulate_baseline(&[]).is_err());

        let other = BaselineScores {
            method: BaselineMethod::Loo,
            scores: vec![0.0, 0.0],
            rounds: vec![4],
        };
        assert!(accumulate_baseline(&[one, other]).is_err());
    }

    /// Validation set where sign(x) predicts the label on 9 of 10 rows.
    fn signed_valset() -> LabeledDataset {
        let mut features = Vec::new();
        let mut labels = Vec::new();
        for i in 0..5 {
            features.push(1.0 + i as f64 * 0.1);
            labels.push(0);
            features.push(-1.0 - i as f64 * 0.1);
            labels.push(1);
        }
        labels[9] = 0; // one inconsistent row
        LabeledDataset::new(features, labels, 1, 2).unwrap()
    }

    #[test]
    fn loo_matches_its_definition() {
        let val = signed_valset();
        let kind = ModelKind::Logistic;
        // Logistic in 1-D: params (w, b), class 0 iff w*x + b > 0.
        let good = vec![4.0, 0.0];
        let bad = vec![-4.0, 0.0];
        let all = weighted_average(
            &[
                ParamVector::new(good.clone()).unwrap(),
                ParamVector::new(bad.clone()).unwrap(),
            ],
            &[10.0, 10.0],
        )
        .unwrap();
        let full_util = evaluate(&kind, &all, &val).unwrap();
        let rec = record(
            vec![0.0, 0.0],
            all.values().to_vec(),
            Some(vec![good.clone(), bad.clone()]),
            full_util.accuracy,
        );
        let s = loo_scores(&rec, &val, &kind, 2).unwrap();

        // score_n must equal full accuracy minus the exclusion accuracy,
        // both measured by the same evaluator.
        let excl_bad = evaluate(&kind, &ParamVector::new(good).unwrap(), &val).unwrap();
        let excl_good = evaluate(&kind, &ParamVector::new(bad).unwrap(), &val).unwrap();
        assert!((s.scores[1] - (full_util.accuracy - excl_bad.accuracy)).abs() < 1e-12);
        assert!((s.scores[0] - (full_util.accuracy - excl_good.accuracy)).abs() < 1e-12);
        // Removing the bad client raises accuracy, so its score is negative.
        assert!(s.scores[1] < 0.0);
        assert!(s.scores[0] > 0.0);
    }

    #[test]
    fn loo_twins_score_identically() {
        let val = signed_valset();
        let twin = vec![3.0, 0.5];
        let other = vec![-2.0, 0.0];
        let models = [twin.clone(), twin.clone(), other];
        let pvs: Vec<ParamVector> = models
            .iter()
            .map(|m| ParamVector::new(m.clone()).unwrap())
            .collect();
        let all = weighted_average(&pvs, &[10.0, 10.0, 10.0]).unwrap();
        let full_util = evaluate(&ModelKind::Logistic, &all, &val).unwrap();
        let rec = RoundRecord::from_parts(
            2,
            ParamVector::zeros(2),
            util(0.5),
            all,
            full_util,
            vec![],
            vec![],
            vec![0, 1, 2],
            vec![10, 10, 10],
            None,
            Some(pvs),
        );
        let s = loo_scores(&rec, &val, &ModelKind::Logistic, 3).unwrap();
        assert!((s.scores[0] - s.scores[1]).abs() < 1e-9);
    }

    #[test]
    fn loo_single_participant_contributes_zero() {
        let val = signed_valset();
        let rec = RoundRecord::from_parts(
            2,
            ParamVector::zeros(2),
            util(0.5),
            ParamVector::new(vec![1.0, 0.0]).unwrap(),
            util(0.9),
            vec![],
            vec![],
            vec![1],
            vec![10],
            None,
            Some(vec![ParamVector::new(vec![1.0, 0.0]).unwrap()]),
        );
        let s = loo_scores(&rec, &val, &ModelKind::Logistic, 3).unwrap();
        assert_eq!(s.scores, vec![0.0, 0.0, 0.0]);
    }
}
