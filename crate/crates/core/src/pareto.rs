//! Fixed-size two-objective subset selection.
//!
//! A candidate is a set of `b` positions into a [`ScoreTable`]; its
//! objectives are the sums of `u` and of `m` over those positions. The
//! Monte-Carlo search draws uniformly random candidates, keeps the mutually
//! non-dominated ones in a [`ParetoArchive`], and stops early once the
//! sliding-window MMD statistics of successive archives stop moving.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::acquisition::ScoreTable;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct ObjectivePair {
    pub u: f64,
    pub m: f64,
}

impl ObjectivePair {
    pub fn new(u: f64, m: f64) -> Self {
        Self { u, m }
    }

    /// `other ⪯ self`: neither objective of `other` is larger.
    pub fn weakly_dominates(&self, other: &ObjectivePair) -> bool {
        other.u <= self.u && other.m <= self.m
    }

    /// `other ≺ self`: weak dominance with at least one strict inequality.
    pub fn strictly_dominates(&self, other: &ObjectivePair) -> bool {
        self.weakly_dominates(other) && (other.u < self.u || other.m < self.m)
    }
}

/// Outcome of comparing two objective pairs. Weak-but-not-strict dominance
/// between distinct pairs cannot happen, so it only shows up as `Equal`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Dominance {
    FirstDominates,
    SecondDominates,
    Equal,
    Incomparable,
}

pub fn compare(a: ObjectivePair, b: ObjectivePair) -> Dominance {
    if a.u == b.u && a.m == b.m {
        Dominance::Equal
    } else if a.strictly_dominates(&b) {
        Dominance::FirstDominates
    } else if b.strictly_dominates(&a) {
        Dominance::SecondDominates
    } else {
        Dominance::Incomparable
    }
}

/// Componentwise sums of `u` and `m` over table positions.
pub fn objectives(positions: &[usize], table: &ScoreTable) -> Result<ObjectivePair> {
    let (u, m) = (table.u(), table.m());
    let mut out = ObjectivePair::default();
    for &p in positions {
        if p >= u.len() {
            return Err(Error::Invalid(format!(
                "position {p} outside a table of {}",
                u.len()
            )));
        }
        out.u += u[p];
        out.m += m[p];
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct CandidateSubset {
    positions: Vec<usize>,
    objectives: ObjectivePair,
}

impl CandidateSubset {
    /// Validates strictly increasing positions and caches the objectives.
    pub fn new(positions: Vec<usize>, table: &ScoreTable) -> Result<Self> {
        if positions.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Invalid("subset positions must be strictly increasing".into()));
        }
        let objectives = objectives(&positions, table)?;
        Ok(Self {
            positions,
            objectives,
        })
    }

    pub fn positions(&self) -> &[usize] {
        &self.positions
    }

    pub fn objectives(&self) -> ObjectivePair {
        self.objectives
    }

    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    /// Size of the intersection with another sorted subset.
    pub fn overlap(&self, other: &CandidateSubset) -> usize {
        let (mut i, mut j, mut n) = (0, 0, 0);
        while i < self.positions.len() && j < other.positions.len() {
            match self.positions[i].cmp(&other.positions[j]) {
                std::cmp::Ordering::Less => i += 1,
                std::cmp::Ordering::Greater => j += 1,
                std::cmp::Ordering::Equal => {
                    n += 1;
                    i += 1;
                    j += 1;
                }
            }
        }
        n
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InsertOutcome {
    /// A member strictly dominates the candidate.
    Rejected,
    /// The candidate's index set is already archived.
    Duplicate,
    Accepted { removed: usize },
}

impl InsertOutcome {
    pub fn accepted(self) -> bool {
        !matches!(self, InsertOutcome::Rejected)
    }
}

/// Rounded `(M_t, S_t)` sliding-window statistics taken every `p_inv`
/// iterations.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Checkpoint {
    pub iteration: usize,
    pub mean: f64,
    pub spread: f64,
}

impl Checkpoint {
    fn rounded(&self) -> (i64, i64) {
        (round2(self.mean), round2(self.spread))
    }
}

fn round2(v: f64) -> i64 {
    (v * 100.0).round() as i64
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParetoArchive {
    members: Vec<CandidateSubset>,
    pub mmd_history: Vec<f64>,
    pub checkpoints: Vec<Checkpoint>,
}

impl ParetoArchive {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn members(&self) -> &[CandidateSubset] {
        &self.members
    }

    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }

    pub fn features(&self) -> Vec<ObjectivePair> {
        self.members.iter().map(|m| m.objectives).collect()
    }

    /// Adds `s` unless a member strictly dominates it; members weakly
    /// dominated by `s` (including equal-objective ones) are evicted.
    pub fn insert(&mut self, s: CandidateSubset) -> InsertOutcome {
        let o = s.objectives;
        if self.members.iter().any(|z| z.objectives.strictly_dominates(&o)) {
            return InsertOutcome::Rejected;
        }
        if self.members.iter().any(|z| z.positions == s.positions) {
            return InsertOutcome::Duplicate;
        }
        let before = self.members.len();
        self.members.retain(|z| !o.weakly_dominates(&z.objectives));
        let removed = before - self.members.len();
        self.members.push(s);
        InsertOutcome::Accepted { removed }
    }

    /// True when no member strictly dominates another and no index set
    /// repeats.
    pub fn is_consistent(&self) -> bool {
        for (i, a) in self.members.iter().enumerate() {
            for (j, b) in self.members.iter().enumerate() {
                if i == j {
                    continue;
                }
                if a.objectives.strictly_dominates(&b.objectives) || a.positions == b.positions {
                    return false;
                }
            }
        }
        true
    }
}

/// Functional form of [`ParetoArchive::insert`].
pub fn archive_insert(mut archive: ParetoArchive, s: CandidateSubset) -> (ParetoArchive, bool) {
    let accepted = archive.insert(s).accepted();
    (archive, accepted)
}

/// Uniformly random `b`-subset of `0..pool_size`, sorted.
pub fn random_subset<R: Rng + ?Sized>(pool_size: usize, b: usize, rng: &mut R) -> Result<Vec<usize>> {
    if b > pool_size {
        return Err(Error::Invalid(format!(
            "cannot draw {b} samples from a pool of {pool_size}"
        )));
    }
    let mut v = rand::seq::index::sample(rng, pool_size, b).into_vec();
    v.sort_unstable();
    Ok(v)
}

const KERNEL_MUL: f64 = 2.0;
const KERNEL_NUM: i32 = 5;

/// Multi-bandwidth RBF MMD between two archives' objective vectors: the
/// square root of the clamped biased MMD² estimate. Five bandwidths spaced by
/// factors of two are centred on the mean pairwise squared distance of the
/// pooled points.
pub fn mmd(p: &[ObjectivePair], q: &[ObjectivePair]) -> Result<f64> {
    if p.is_empty() || q.is_empty() {
        return Err(Error::Invalid("MMD needs two non-empty snapshots".into()));
    }
    let pooled: Vec<ObjectivePair> = p.iter().chain(q).copied().collect();
    let n = pooled.len();
    let sq = |a: &ObjectivePair, b: &ObjectivePair| (a.u - b.u).powi(2) + (a.m - b.m).powi(2);
    let mut total = 0.0;
    for a in &pooled {
        for b in &pooled {
            total += sq(a, b);
        }
    }
    let mut bandwidth = total / (n * n - n) as f64;
    if !(bandwidth > 0.0) {
        bandwidth = 1.0;
    }
    let base = bandwidth / KERNEL_MUL.powi(KERNEL_NUM / 2);
    let widths: Vec<f64> = (0..KERNEL_NUM).map(|i| base * KERNEL_MUL.powi(i)).collect();
    let kernel = |a: &ObjectivePair, b: &ObjectivePair| {
        let d = sq(a, b);
        widths.iter().map(|w| (-d / w).exp()).sum::<f64>()
    };
    let mean_k = |xs: &[ObjectivePair], ys: &[ObjectivePair]| {
        let mut s = 0.0;
        for a in xs {
            for b in ys {
                s += kernel(a, b);
            }
        }
        s / (xs.len() * ys.len()) as f64
    };
    let sq_mmd = mean_k(p, p) + mean_k(q, q) - mean_k(p, q) - mean_k(q, p);
    Ok(sq_mmd.max(0.0).sqrt())
}

/// Mean and mean squared deviation of the last `s_w` MMD values.
pub fn window_stats(history: &[f64], s_w: usize) -> (f64, f64) {
    let window = &history[history.len().saturating_sub(s_w.max(1))..];
    if window.is_empty() {
        return (0.0, 0.0);
    }
    let n = window.len() as f64;
    let mean = window.iter().sum::<f64>() / n;
    let spread = window.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    (mean, spread)
}

/// Fires when the last `s_w + 1` checkpoints agree on both statistics after
/// rounding to two decimals.
pub fn early_stop_check(checkpoints: &[Checkpoint], s_w: usize) -> bool {
    if checkpoints.len() < s_w + 1 {
        return false;
    }
    let tail = &checkpoints[checkpoints.len() - s_w - 1..];
    let first = tail[0].rounded();
    tail.iter().all(|c| c.rounded() == first)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ParetoConfig {
    /// Iteration budget `T`.
    pub max_iters: usize,
    /// Population interval between checkpoints.
    pub p_inv: usize,
    /// Sliding window size.
    pub s_w: usize,
    pub early_stop: bool,
    /// Pre-selection runs when the pool is larger than this.
    pub preselect_threshold: usize,
    /// `s_m = sm_multiplier * b`.
    pub sm_multiplier: usize,
}

impl Default for ParetoConfig {
    fn default() -> Self {
        Self {
            max_iters: 100_000,
            p_inv: 100,
            s_w: 20,
            early_stop: true,
            preselect_threshold: 2_000,
            sm_multiplier: 6,
        }
    }
}

#[derive(Debug, Clone)]
pub struct PoalOutcome {
    pub archive: ParetoArchive,
    pub chosen: CandidateSubset,
    pub iterations: usize,
    pub stopped_early: bool,
}

/// Monte-Carlo Pareto search for a `b`-subset of `table`.
pub fn mc_poal<R: Rng + ?Sized>(
    table: &ScoreTable,
    b: usize,
    config: &ParetoConfig,
    rng: &mut R,
) -> Result<PoalOutcome> {
    mc_poal_observed(table, b, config, rng, |_, _, _| {})
}

/// [`mc_poal`] with a callback invoked after every insertion attempt with the
/// candidate, the insertion outcome and the updated archive.
pub fn mc_poal_observed<R, F>(
    table: &ScoreTable,
    b: usize,
    config: &ParetoConfig,
    rng: &mut R,
    mut observer: F,
) -> Result<PoalOutcome>
where
    R: Rng + ?Sized,
    F: FnMut(&CandidateSubset, InsertOutcome, &ParetoArchive),
{
    let pool = table.len();
    if b == 0 || b > pool {
        return Err(Error::Invalid(format!(
            "batch size {b} must be in 1..={pool}"
        )));
    }
    if config.max_iters == 0 {
        return Err(Error::Config("max_iters must be at least 1".into()));
    }
    let p_inv = config.p_inv.max(1);
    let mut archive = ParetoArchive::new();
    let mut previous: Vec<ObjectivePair> = Vec::new();
    let mut iterations = 0;
    let mut stopped_early = false;
    for t in 1..=config.max_iters {
        iterations = t;
        let candidate = CandidateSubset::new(random_subset(pool, b, rng)?, table)?;
        let outcome = archive.insert(candidate.clone());
        let changed = matches!(outcome, InsertOutcome::Accepted { .. });
        let step = if changed && !previous.is_empty() {
            let current = archive.features();
            let d = mmd(&previous, &current)?;
            previous = current;
            d
        } else {
            if changed {
                previous = archive.features();
            }
            0.0
        };
        archive.mmd_history.push(step);
        observer(&candidate, outcome, &archive);

        if b == pool {
            break;
        }
        if t % p_inv == 0 {
            let (mean, spread) = window_stats(&archive.mmd_history, config.s_w);
            archive.checkpoints.push(Checkpoint {
                iteration: t,
                mean,
                spread,
            });
            if config.early_stop && early_stop_check(&archive.checkpoints, config.s_w) {
                stopped_early = t < config.max_iters;
                break;
            }
        }
    }
    let chosen = final_select(&archive)?.clone();
    Ok(PoalOutcome {
        archive,
        chosen,
        iterations,
        stopped_early,
    })
}

/// Member with the largest total overlap with every member (itself
/// included); ties go to the lexicographically smallest position list.
pub fn final_select(archive: &ParetoArchive) -> Result<&CandidateSubset> {
    let members = archive.members();
    if members.is_empty() {
        return Err(Error::Invalid("cannot select from an empty archive".into()));
    }
    let width = members
        .iter()
        .flat_map(|m| m.positions.iter())
        .max()
        .map_or(0, |&p| p + 1);
    let mut counts = vec![0usize; width];
    for m in members {
        for &p in &m.positions {
            counts[p] += 1;
        }
    }
    let score = |m: &CandidateSubset| m.positions.iter().map(|&p| counts[p]).sum::<usize>();
    let mut best = &members[0];
    let mut best_score = score(best);
    for m in &members[1..] {
        let s = score(m);
        if s > best_score || (s == best_score && m.positions < best.positions) {
            best = m;
            best_score = s;
        }
    }
    Ok(best)
}

/// Positions (ascending) of the points in `candidates` not strictly dominated
/// by another point of `candidates`.
pub fn non_dominated_front(table: &ScoreTable, candidates: &[usize]) -> Vec<usize> {
    let (u, m) = (table.u(), table.m());
    let mut order = candidates.to_vec();
    order.sort_by(|&a, &b| u[b].total_cmp(&u[a]).then(m[b].total_cmp(&m[a])));
    let mut front = Vec::new();
    let mut best_above = f64::NEG_INFINITY;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j < order.len() && u[order[j]] == u[order[i]] {
            j += 1;
        }
        // sorted by m descending inside a group of equal u
        let group_best = m[order[i]];
        for &p in &order[i..j] {
            if m[p] > best_above && m[p] >= group_best {
                front.push(p);
            }
        }
        best_above = best_above.max(group_best);
        i = j;
    }
    front.sort_unstable();
    front
}

/// Peels non-dominated fronts off the per-sample `(u, m)` plane until at
/// least `s_m` positions are collected (or the table runs out).
pub fn pre_select(table: &ScoreTable, s_m: usize) -> Vec<usize> {
    let mut remaining: Vec<usize> = (0..table.len()).collect();
    let mut selected = Vec::new();
    while selected.len() < s_m && !remaining.is_empty() {
        let front = non_dominated_front(table, &remaining);
        remaining.retain(|p| front.binary_search(p).is_err());
        selected.extend(front);
    }
    selected.sort_unstable();
    selected
}
