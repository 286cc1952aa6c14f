//! Group-testing misbehavior detection: assignment matrices with a
//! rational-arithmetic privacy check, noisy group test outcomes, exact
//! soft decoding to per-client log-likelihood ratios, and multi-round
//! accumulation.
//!
//! The decoder models malicious clients as an independent Bernoulli defect
//! vector, group status as the OR of member defects, and observations as the
//! true status passed through a binary symmetric channel. With at most 25
//! clients the posterior is computed by exact enumeration, which doubles as
//! an unambiguous reference for any approximate decoder.

use num_rational::BigRational;
use num_traits::{One, Zero};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::federation::PrivateRound;
use crate::seeds::{derive_seed, SeedDomain};

/// Hard cap on exact-enumeration decoding: 2^25 defect vectors.
pub const MAX_DECODE_CLIENTS: usize = 25;

/// Bound imposed by the bitmask representation of matrix rows.
const MAX_MATRIX_CLIENTS: usize = 64;

/// How test groups relate across rounds.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MatrixStrategy {
    /// One matrix, reused on every test round.
    Same,
    /// An independent predetermined matrix per round, derived from the seed
    /// and the round index.
    Prefixed,
}

/// L x N binary assignment matrix: row l lists the k clients whose updates
/// are aggregated into test group l.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AssignmentMatrix {
    rows: Vec<u64>,
    num_clients: usize,
    group_size: usize,
}

impl AssignmentMatrix {
    /// Validates structure only: consistent width, row weight k, pairwise
    /// distinct rows, and every client in at least one group. The privacy
    /// check is a separate, stricter gate (see [`build_assignment`]).
    pub fn new(rows: Vec<Vec<bool>>, group_size: usize) -> Result<Self> {
        let Some(first) = rows.first() else {
            return Err(Error::Construction("matrix needs at least one row".into()));
        };
        let n = first.len();
        if n == 0 || n > MAX_MATRIX_CLIENTS {
            return Err(Error::Construction(format!(
                "client count must lie in 1..={MAX_MATRIX_CLIENTS}"
            )));
        }
        if group_size == 0 || group_size > n {
            return Err(Error::Construction(format!(
                "group size {group_size} must lie in 1..={n}"
            )));
        }
        let mut masks = Vec::with_capacity(rows.len());
        for (l, row) in rows.iter().enumerate() {
            if row.len() != n {
                return Err(Error::Construction(format!("row {l} has inconsistent width")));
            }
            let mut mask = 0u64;
            for (j, &bit) in row.iter().enumerate() {
                if bit {
                    mask |= 1 << j;
                }
            }
            if mask.count_ones() as usize != group_size {
                return Err(Error::Construction(format!(
                    "row {l} has weight {}, expected {group_size}",
                    mask.count_ones()
                )));
            }
            masks.push(mask);
        }
        for i in 0..masks.len() {
            for j in i + 1..masks.len() {
                if masks[i] == masks[j] {
                    return Err(Error::Construction(format!("rows {i} and {j} are equal")));
                }
            }
        }
        let coverage = masks.iter().fold(0u64, |acc, m| acc | m);
        let full = if n == 64 { u64::MAX } else { (1u64 << n) - 1 };
        if coverage != full {
            let missing = (0..n).find(|&j| coverage & (1 << j) == 0).unwrap();
            return Err(Error::Construction(format!(
                "client {missing} is in no group"
            )));
        }
        Ok(Self {
            rows: masks,
            num_clients: n,
            group_size,
        })
    }

    pub fn num_groups(&self) -> usize {
        self.rows.len()
    }

    pub fn num_clients(&self) -> usize {
        self.num_clients
    }

    pub fn group_size(&self) -> usize {
        self.group_size
    }

    pub fn contains(&self, group: usize, client: usize) -> bool {
        self.rows[group] & (1 << client) != 0
    }

    /// Member client indices of one group, ascending.
    pub fn members(&self, group: usize) -> Vec<usize> {
        (0..self.num_clients)
            .filter(|&n| self.contains(group, n))
            .collect()
    }

    pub(crate) fn row_mask(&self, group: usize) -> u64 {
        self.rows[group]
    }

    /// Clients whose individual updates a curious server could reconstruct
    /// by linearly combining group aggregates: every client n for which the
    /// standard basis vector e_n lies in the rational row space. Empty means
    /// the matrix is safe to deploy.
    pub fn isolated_clients(&self) -> Vec<usize> {
        let pivots = rational_echelon(&self.rows, self.num_clients);
        (0..self.num_clients)
            .filter(|&n| basis_vector_in_span(&pivots, self.num_clients, n))
            .collect()
    }

    /// True when no client can be isolated (see [`Self::isolated_clients`]).
    pub fn privacy_ok(&self) -> bool {
        self.isolated_clients().is_empty()
    }

    /// Plain text form: a header line "L N k", then L rows of 0/1.
    pub fn to_text(&self) -> String {
        let mut out = format!(
            "{} {} {}\n",
            self.rows.len(),
            self.num_clients,
            self.group_size
        );
        for mask in &self.rows {
            let bits: Vec<&str> = (0..self.num_clients)
                .map(|j| if mask & (1 << j) != 0 { "1" } else { "0" })
                .collect();
            out.push_str(&bits.join(" "));
            out.push('\n');
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut lines = text.lines().filter(|l| !l.trim().is_empty());
        let header = lines
            .next()
            .ok_or_else(|| Error::Parse("empty matrix file".into()))?;
        let dims: Vec<usize> = header
            .split_whitespace()
            .map(|tok| tok.parse::<usize>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|_| Error::Parse(format!("bad header {header:?}, expected \"L N k\"")))?;
        let [l, n, k] = dims[..] else {
            return Err(Error::Parse(format!(
                "bad header {header:?}, expected \"L N k\""
            )));
        };
        let mut rows = Vec::with_capacity(l);
        for (i, line) in lines.enumerate() {
            let row: Vec<bool> = line
                .split_whitespace()
                .map(|tok| match tok {
                    "0" => Ok(false),
                    "1" => Ok(true),
                    other => Err(Error::Parse(format!("row {i}: bad entry {other:?}"))),
                })
                .collect::<Result<_>>()?;
            if row.len() != n {
                return Err(Error::Parse(format!(
                    "row {i} has {} entries, header says {n}",
                    row.len()
                )));
            }
            rows.push(row);
        }
        if rows.len() != l {
            return Err(Error::Parse(format!(
                "found {} rows, header says {l}",
                rows.len()
            )));
        }
        Self::new(rows, k)
    }
}

/// Row-echelon basis over the rationals: (pivot column, normalized row).
fn rational_echelon(masks: &[u64], n: usize) -> Vec<(usize, Vec<BigRational>)> {
    let mut pivots: Vec<(usize, Vec<BigRational>)> = Vec::new();
    for &mask in masks {
        let mut row: Vec<BigRational> = (0..n)
            .map(|j| {
                if mask & (1 << j) != 0 {
                    BigRational::one()
                } else {
                    BigRational::zero()
                }
            })
            .collect();
        reduce_against(&mut row, &pivots);
        if let Some(col) = row.iter().position(|v| !v.is_zero()) {
            let lead = row[col].clone();
            for v in &mut row {
                *v /= lead.clone();
            }
            pivots.push((col, row));
            pivots.sort_by_key(|(c, _)| *c);
        }
    }
    pivots
}

fn reduce_against(row: &mut [BigRational], pivots: &[(usize, Vec<BigRational>)]) {
    for (col, basis) in pivots {
        if row[*col].is_zero() {
            continue;
        }
        let factor = row[*col].clone();
        for (v, b) in row.iter_mut().zip(basis) {
            *v -= factor.clone() * b;
        }
    }
}

fn basis_vector_in_span(pivots: &[(usize, Vec<BigRational>)], n: usize, client: usize) -> bool {
    let mut v: Vec<BigRational> = (0..n)
        .map(|j| {
            if j == client {
                BigRational::one()
            } else {
                BigRational::zero()
            }
        })
        .collect();
    reduce_against(&mut v, pivots);
    v.iter().all(Zero::is_zero)
}

/// Builds a random L x N assignment matrix with row weight k that covers
/// every client, has pairwise distinct rows, and passes the privacy check.
/// `Same` derives one matrix independent of the round; `Prefixed` derives an
/// independent matrix per `round_index`. Rejection-samples up to a bounded
/// number of attempts, then reports the shape as infeasible.
pub fn build_assignment(
    num_clients: usize,
    num_groups: usize,
    group_size: usize,
    seed: u64,
    strategy: MatrixStrategy,
    round_index: usize,
) -> Result<AssignmentMatrix> {
    if group_size < 2 || group_size >= num_clients {
        return Err(Error::Construction(format!(
            "group size must lie in 2..{num_clients}"
        )));
    }
    if num_groups * group_size < num_clients {
        return Err(Error::Construction(format!(
            "{num_groups} groups of {group_size} cannot cover {num_clients} clients"
        )));
    }
    if num_clients > MAX_MATRIX_CLIENTS {
        return Err(Error::Construction(format!(
            "at most {MAX_MATRIX_CLIENTS} clients supported"
        )));
    }
    let domain_index = match strategy {
        MatrixStrategy::Same => 0,
        MatrixStrategy::Prefixed => round_index as u64,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, SeedDomain::Matrix, domain_index));

    const MAX_ATTEMPTS: usize = 512;
    for attempt in 0..MAX_ATTEMPTS {
        // Deal every client into a group round-robin (guaranteeing coverage,
        // with per-group load <= ceil(N/L) <= k), then pad groups to size k.
        let mut order: Vec<usize> = (0..num_clients).collect();
        order.shuffle(&mut rng);
        let mut rows = vec![vec![false; num_clients]; num_groups];
        let mut memberships = vec![0usize; num_clients];
        for (pos, &client) in order.iter().enumerate() {
            rows[pos % num_groups][client] = true;
            memberships[client] = 1;
        }
        // Pad with balanced column weights: every client ends up in
        // floor(L*k/N) or ceil(L*k/N) groups, so testing exposure (and the
        // per-member credit rate of group-level scoring) is even across the
        // cohort. Quota-constrained filling can dead-end on awkward shapes,
        // so later attempts relax the quota.
        let total = num_groups * group_size;
        let quota = if attempt < MAX_ATTEMPTS / 2 {
            total.div_ceil(num_clients)
        } else {
            group_size.max(total.div_ceil(num_clients))
        };
        let mut ok = true;
        for row in &mut rows {
            let mut candidates: Vec<usize> = (0..num_clients)
                .filter(|&c| !row[c] && memberships[c] < quota)
                .collect();
            candidates.shuffle(&mut rng);
            // Clients furthest below quota fill first, breaking ties by the
            // shuffle order.
            candidates.sort_by_key(|&c| memberships[c]);
            let mut weight = row.iter().filter(|&&b| b).count();
            for c in candidates {
                if weight == group_size {
                    break;
                }
                row[c] = true;
                memberships[c] += 1;
                weight += 1;
            }
            if weight < group_size {
                ok = false;
                break;
            }
        }
        if !ok {
            continue;
        }
        let Ok(matrix) = AssignmentMatrix::new(rows, group_size) else {
            continue; // duplicate rows; resample
        };
        if matrix.privacy_ok() {
            return Ok(matrix);
        }
    }
    Err(Error::Construction(format!(
        "no private {num_groups}x{num_clients} matrix with row weight {group_size} \
         found in {MAX_ATTEMPTS} attempts"
    )))
}

/// Noisy-observation model for group tests: a group's true status (OR of
/// member defects) is observed through a binary symmetric channel with
/// crossover probability `crossover_p`; defects are a priori independent
/// Bernoulli(`prior_delta`).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ChannelModel {
    pub crossover_p: f64,
    pub prior_delta: f64,
}

impl ChannelModel {
    pub fn new(crossover_p: f64, prior_delta: f64) -> Result<Self> {
        let ch = Self {
            crossover_p,
            prior_delta,
        };
        ch.validate()?;
        Ok(ch)
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..0.5).contains(&self.crossover_p) {
            return Err(Error::config("crossover_p must lie in [0, 0.5)"));
        }
        if !(self.prior_delta > 0.0 && self.prior_delta < 1.0) {
            return Err(Error::config("prior_delta must lie in (0, 1)"));
        }
        Ok(())
    }
}

/// Binary group-test outcomes of one test round; outcome l is positive when
/// group l is suspected to contain a malicious client.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GroupOutcomes {
    pub round_index: usize,
    pub outcomes: Vec<bool>,
}

impl GroupOutcomes {
    pub fn len(&self) -> usize {
        self.outcomes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.outcomes.is_empty()
    }
}

/// Per-client log-likelihood ratios (malicious vs benign); positive values
/// are evidence of misbehavior. Values are clamped to [-50, 50].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LlrScores {
    pub values: Vec<f64>,
    /// Test rounds that contributed.
    pub rounds: Vec<usize>,
}

/// LLR clamp bound, avoiding infinities from zero-probability events.
pub const LLR_CLAMP: f64 = 50.0;

/// Thresholds group accuracies into test outcomes: group l tests positive
/// iff its accuracy falls below median(accuracies) - epsilon.
pub fn test_groups(round: &PrivateRound, epsilon: f64) -> Result<GroupOutcomes> {
    if round.group_utilities.len() < 2 {
        return Err(Error::config(format!(
            "round {}: group testing needs at least 2 groups, found {}",
            round.round_index,
            round.group_utilities.len()
        )));
    }
    if !(epsilon >= 0.0 && epsilon.is_finite()) {
        return Err(Error::config("epsilon must be finite and nonnegative"));
    }
    let mut acc: Vec<f64> = round.group_utilities.iter().map(|u| u.accuracy).collect();
    let mut sorted = acc.clone();
    sorted.sort_by(|a, b| a.total_cmp(b));
    let mid = sorted.len() / 2;
    let median = if sorted.len() % 2 == 1 {
        sorted[mid]
    } else {
        0.5 * (sorted[mid - 1] + sorted[mid])
    };
    let outcomes = acc.drain(..).map(|a| a < median - epsilon).collect();
    Ok(GroupOutcomes {
        round_index: round.round_index,
        outcomes,
    })
}

/// Streaming log-sum-exp accumulator with a deterministic add/merge order.
#[derive(Debug, Clone, Copy)]
struct LogSum {
    max: f64,
    sum: f64,
}

impl LogSum {
    const EMPTY: LogSum = LogSum {
        max: f64::NEG_INFINITY,
        sum: 0.0,
    };

    fn add(&mut self, x: f64) {
        if x == f64::NEG_INFINITY {
            return;
        }
        if x <= self.max {
            self.sum += (x - self.max).exp();
        } else {
            self.sum = self.sum * (self.max - x).exp() + 1.0;
            self.max = x;
        }
    }

    fn merge(&mut self, other: &LogSum) {
        if other.sum == 0.0 {
            return;
        }
        if other.max <= self.max {
            self.sum += other.sum * (other.max - self.max).exp();
        } else {
            self.sum = self.sum * (self.max - other.max).exp() + other.sum;
            self.max = other.max;
        }
    }

    fn value(&self) -> f64 {
        if self.sum == 0.0 {
            f64::NEG_INFINITY
        } else {
            self.max + self.sum.ln()
        }
    }
}

/// Joint log-probability of outcomes `t` and defect mask `m` under the
/// channel model. `lp` holds (ln(1-p), ln p, ln delta, ln(1-delta)).
#[inline]
fn log_joint(mask: u64, t_masks: (u64, &[u64]), lp: (f64, f64, f64, f64), n: usize) -> f64 {
    let (observed, groups) = t_masks;
    let (lp_match, lp_flip, lp_defect, lp_clean) = lp;
    let defects = mask.count_ones() as f64;
    let mut score = defects * lp_defect + (n as f64 - defects) * lp_clean;
    for (l, &gmask) in groups.iter().enumerate() {
        let status = (mask & gmask != 0) as u64;
        let obs = (observed >> l) & 1;
        score += if status == obs { lp_match } else { lp_flip };
    }
    score
}

/// Exact per-client log-likelihood ratios G_n = ln P(t | d_n=1) / P(t | d_n=0)
/// by summation over all 2^N defect vectors in log space. Deterministic and
/// independent of parallelism: masks are processed in fixed-size blocks whose
/// partial sums merge in block order.
pub fn decode_marginals(
    outcomes: &GroupOutcomes,
    a: &AssignmentMatrix,
    ch: &ChannelModel,
) -> Result<LlrScores> {
    ch.validate()?;
    let n = a.num_clients();
    if n > MAX_DECODE_CLIENTS {
        return Err(Error::Capability(format!(
            "exact decoding enumerates 2^N defect vectors and is capped at \
             N={MAX_DECODE_CLIENTS}; got N={n}. Use more rounds with smaller \
             cohorts, or accumulate per-round scores instead"
        )));
    }
    if outcomes.len() != a.num_groups() {
        return Err(Error::config(format!(
            "{} outcomes for {} groups",
            outcomes.len(),
            a.num_groups()
        )));
    }

    let groups: Vec<u64> = (0..a.num_groups()).map(|l| a.row_mask(l)).collect();
    let mut observed = 0u64;
    for (l, &o) in outcomes.outcomes.iter().enumerate() {
        if o {
            observed |= 1 << l;
        }
    }
    let lp = (
        (1.0 - ch.crossover_p).ln(),
        ch.crossover_p.ln(),
        ch.prior_delta.ln(),
        (1.0 - ch.prior_delta).ln(),
    );

    let total: u64 = 1 << n;
    const BLOCK: u64 = 1 << 14;
    let num_blocks = total.div_ceil(BLOCK);

    let partials: Vec<(Vec<LogSum>, Vec<LogSum>)> = (0..num_blocks)
        .into_par_iter()
        .map(|b| {
            let start = b * BLOCK;
            let end = (start + BLOCK).min(total);
            let mut z1 = vec![LogSum::EMPTY; n];
            let mut z0 = vec![LogSum::EMPTY; n];
            for mask in start..end {
                let joint = log_joint(mask, (observed, &groups), lp, n);
                for (client, (acc1, acc0)) in z1.iter_mut().zip(&mut z0).enumerate() {
                    if mask & (1 << client) != 0 {
                        acc1.add(joint);
                    } else {
                        acc0.add(joint);
                    }
                }
            }
            (z1, z0)
        })
        .collect();

    let mut z1 = vec![LogSum::EMPTY; n];
    let mut z0 = vec![LogSum::EMPTY; n];
    for (p1, p0) in &partials {
        for client in 0..n {
            z1[client].merge(&p1[client]);
            z0[client].merge(&p0[client]);
        }
    }

    // z1 = delta * P(t | d_n=1), z0 = (1-delta) * P(t | d_n=0); divide the
    // prior odds back out to get the pure likelihood ratio.
    let logit_delta = (ch.prior_delta / (1.0 - ch.prior_delta)).ln();
    let values = z1
        .iter()
        .zip(&z0)
        .map(|(a1, a0)| (a1.value() - a0.value() - logit_delta).clamp(-LLR_CLAMP, LLR_CLAMP))
        .collect();
    Ok(LlrScores {
        values,
        rounds: vec![outcomes.round_index],
    })
}

/// Maximum-a-posteriori defect vector under the same model as
/// [`decode_marginals`]; ties break toward the lexicographically smaller
/// mask (fewer/lower-indexed defects first).
pub fn decode_map(
    outcomes: &GroupOutcomes,
    a: &AssignmentMatrix,
    ch: &ChannelModel,
) -> Result<Vec<bool>> {
    ch.validate()?;
    let n = a.num_clients();
    if n > MAX_DECODE_CLIENTS {
        return Err(Error::Capability(format!(
            "exact decoding is capped at N={MAX_DECODE_CLIENTS}; got N={n}"
        )));
    }
    if outcomes.len() != a.num_groups() {
        return Err(Error::config(format!(
            "{} outcomes for {} groups",
            outcomes.len(),
            a.num_groups()
        )));
    }
    let groups: Vec<u64> = (0..a.num_groups()).map(|l| a.row_mask(l)).collect();
    let mut observed = 0u64;
    for (l, &o) in outcomes.outcomes.iter().enumerate() {
        if o {
            observed |= 1 << l;
        }
    }
    let lp = (
        (1.0 - ch.crossover_p).ln(),
        ch.crossover_p.ln(),
        ch.prior_delta.ln(),
        (1.0 - ch.prior_delta).ln(),
    );
    let mut best = (f64::NEG_INFINITY, 0u64);
    for mask in 0..(1u64 << n) {
        let joint = log_joint(mask, (observed, &groups), lp, n);
        if joint > best.0 {
            best = (joint, mask);
        }
    }
    Ok((0..n).map(|c| best.1 & (1 << c) != 0).collect())
}

/// Posterior defect probability implied by an LLR under prior `delta`:
/// sigmoid(G + logit(delta)).
pub fn posterior_from_llr(llr: f64, delta: f64) -> f64 {
    let x = llr + (delta / (1.0 - delta)).ln();
    1.0 / (1.0 + (-x).exp())
}

/// Componentwise sum of per-round LLRs (clamped), pooling evidence across
/// rounds under an independence assumption.
pub fn accumulate_llr(per_round: &[LlrScores]) -> Result<LlrScores> {
    let Some(first) = per_round.first() else {
        return Err(Error::config("no rounds to accumulate"));
    };
    let n = first.values.len();
    let mut values = vec![0.0; n];
    let mut rounds = Vec::new();
    for scores in per_round {
        if scores.values.len() != n {
            return Err(Error::config(format!(
                "inconsistent client counts: {} vs {n}",
                scores.values.len()
            )));
        }
        for (acc, v) in values.iter_mut().zip(&scores.values) {
            *acc += v;
        }
        rounds.extend_from_slice(&scores.rounds);
    }
    // Clamp the total once, so accumulation is order-independent.
    for v in &mut values {
        *v = v.clamp(-LLR_CLAMP, LLR_CLAMP);
    }
    rounds.sort_unstable();
    Ok(LlrScores { values, rounds })
}
