//! Markov chain of spontaneous human events: learning from logs, first-passage
//! hit probabilities and the domain of attraction at a minimum probability.

use std::collections::BTreeSet;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{self, Stage};

/// Row-sum tolerance for a stochastic matrix.
pub const ROW_SUM_TOL: f64 = 1e-9;

/// Slack applied when comparing a hit probability against the threshold `p`,
/// so values equal to `p` up to rounding are members.
pub const THRESHOLD_SLACK: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Event {
    pub t_min: f64,
    pub label: String,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct EventSequence {
    pub events: Vec<Event>,
}

impl EventSequence {
    pub fn new(events: Vec<Event>) -> Result<Self> {
        if events.windows(2).any(|w| w[1].t_min < w[0].t_min) {
            return Err(Error::domain("event timestamps must be non-decreasing"));
        }
        Ok(Self { events })
    }

    /// Labels at unit spacing.
    pub fn from_labels<S: AsRef<str>>(labels: &[S]) -> Self {
        Self {
            events: labels
                .iter()
                .enumerate()
                .map(|(k, l)| Event {
                    t_min: k as f64,
                    label: l.as_ref().to_string(),
                })
                .collect(),
        }
    }

    pub fn labels(&self) -> impl Iterator<Item = &str> {
        self.events.iter().map(|e| e.label.as_str())
    }

    pub fn len(&self) -> usize {
        self.events.len()
    }

    pub fn is_empty(&self) -> bool {
        self.events.is_empty()
    }
}

/// Finite chain `(S, P_S)`. Serialized as `{states, matrix}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MarkovChain {
    states: Vec<String>,
    matrix: Vec<Vec<f64>>,
    /// States whose row was never observed and defaulted to a self-loop.
    #[serde(skip)]
    unobserved: Vec<usize>,
}

impl MarkovChain {
    pub fn new(states: Vec<String>, matrix: Vec<Vec<f64>>) -> Result<Self> {
        let mc = Self {
            states,
            matrix,
            unobserved: Vec::new(),
        };
        mc.validate()?;
        Ok(mc)
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.states.len();
        if n == 0 {
            return Err(Error::domain("chain needs at least one state"));
        }
        if self.states.iter().collect::<BTreeSet<_>>().len() != n {
            return Err(Error::domain("duplicate state labels"));
        }
        if self.matrix.len() != n || self.matrix.iter().any(|r| r.len() != n) {
            return Err(Error::domain(format!("transition matrix must be {n}x{n}")));
        }
        for (i, row) in self.matrix.iter().enumerate() {
            if row.iter().any(|&p| !(0.0..=1.0).contains(&p)) {
                return Err(Error::domain(format!("row {i} has entries outside [0, 1]")));
            }
            let s: f64 = row.iter().sum();
            if (s - 1.0).abs() > ROW_SUM_TOL {
                return Err(Error::domain(format!("row {i} sums to {s}")));
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }

    pub fn states(&self) -> &[String] {
        &self.states
    }

    pub fn matrix(&self) -> &[Vec<f64>] {
        &self.matrix
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.matrix[i]
    }

    pub fn prob(&self, i: usize, j: usize) -> f64 {
        self.matrix[i][j]
    }

    pub fn index_of(&self, label: &str) -> Option<usize> {
        self.states.iter().position(|s| s == label)
    }

    pub fn unobserved(&self) -> &[usize] {
        &self.unobserved
    }

    fn indices_of(&self, labels: &[String]) -> Result<Vec<usize>> {
        labels
            .iter()
            .map(|l| self.index_of(l).ok_or_else(|| Error::domain(format!("unknown state {l:?}"))))
            .collect()
    }

    /// Successor index drawn from row `i`.
    pub fn step<R: Rng + ?Sized>(&self, i: usize, rng: &mut R) -> usize {
        let u: f64 = rng.gen();
        let mut acc = 0.0;
        let row = &self.matrix[i];
        for (j, &p) in row.iter().enumerate() {
            acc += p;
            if u < acc {
                return j;
            }
        }
        // Rounding left a sliver above the cumulative sum: take the last positive entry.
        row.iter().rposition(|&p| p > 0.0).unwrap_or(i)
    }
}

// ---------------------------------------------------------------------------
// Meal clustering

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Clustering {
    /// Cluster index per input value; index 0 is the smallest center.
    pub assignment: Vec<usize>,
    /// Ascending.
    pub centers: Vec<f64>,
    /// Clusters that received no values.
    pub empty: Vec<bool>,
    pub names: Vec<String>,
}

impl Clustering {
    pub fn label(&self, value_index: usize) -> &str {
        &self.names[self.assignment[value_index]]
    }

    pub fn labels(&self) -> Vec<String> {
        self.assignment.iter().map(|&c| self.names[c].clone()).collect()
    }

    /// Nearest non-empty cluster name for a new value.
    pub fn classify(&self, value: f64) -> &str {
        let best = (0..self.centers.len())
            .filter(|&c| !self.empty[c])
            .min_by(|&a, &b| (self.centers[a] - value).abs().total_cmp(&(self.centers[b] - value).abs()))
            .unwrap_or(0);
        &self.names[best]
    }

    pub fn named_centers(&self) -> Vec<(String, f64)> {
        self.names.iter().cloned().zip(self.centers.iter().copied()).collect()
    }
}

pub fn cluster_names(k: usize) -> Vec<String> {
    match k {
        1 => vec!["Medium".into()],
        2 => vec!["Small".into(), "Large".into()],
        3 => vec!["Small".into(), "Medium".into(), "Large".into()],
        _ => (0..k).map(|i| format!("C{i}")).collect(),
    }
}

/// One-dimensional k-means with sorted-quantile initialization.
pub fn cluster_meals(values: &[f64], k: usize) -> Result<Clustering> {
    if values.is_empty() {
        return Err(Error::domain("cannot cluster an empty list"));
    }
    if k == 0 {
        return Err(Error::domain("k must be >= 1"));
    }
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::domain("meal sizes must be finite"));
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len();
    let mut centers: Vec<f64> = (0..k)
        .map(|i| sorted[(((2 * i + 1) * n) / (2 * k)).min(n - 1)])
        .collect();

    let assign = |centers: &[f64]| -> Vec<usize> {
        values
            .iter()
            .map(|&v| {
                let mut best = 0;
                for c in 1..centers.len() {
                    if (v - centers[c]).abs() < (v - centers[best]).abs() {
                        best = c;
                    }
                }
                best
            })
            .collect()
    };

    let mut assignment = assign(&centers);
    for _ in 0..200 {
        let mut sums = vec![0.0; k];
        let mut counts = vec![0usize; k];
        for (&v, &c) in values.iter().zip(&assignment) {
            sums[c] += v;
            counts[c] += 1;
        }
        for c in 0..k {
            if counts[c] > 0 {
                centers[c] = sums[c] / counts[c] as f64;
            }
        }
        let next = assign(&centers);
        if next == assignment {
            break;
        }
        assignment = next;
    }

    // Reorder ascending by center, stable on ties.
    let mut order: Vec<usize> = (0..k).collect();
    order.sort_by(|&a, &b| centers[a].total_cmp(&centers[b]));
    let mut rank = vec![0; k];
    for (r, &c) in order.iter().enumerate() {
        rank[c] = r;
    }
    let assignment: Vec<usize> = assignment.iter().map(|&c| rank[c]).collect();
    let centers: Vec<f64> = order.iter().map(|&c| centers[c]).collect();
    let mut empty = vec![true; k];
    for &c in &assignment {
        empty[c] = false;
    }
    for (c, e) in empty.iter().enumerate() {
        if *e {
            log::warn!("meal cluster {c} is empty");
        }
    }
    Ok(Clustering {
        assignment,
        centers,
        empty,
        names: cluster_names(k),
    })
}

// ---------------------------------------------------------------------------
// Learning

/// `P(i, j) = n_ij / Σ_j n_ij` over the sorted label alphabet.
pub fn learn_mc(events: &EventSequence) -> Result<MarkovChain> {
    let alphabet: Vec<String> = events
        .labels()
        .collect::<BTreeSet<_>>()
        .into_iter()
        .map(str::to_string)
        .collect();
    learn_mc_with_states(events, alphabet)
}

/// As [`learn_mc`] with a caller-fixed state order (labels absent from the
/// sequence become unobserved self-loops).
pub fn learn_mc_with_states(events: &EventSequence, states: Vec<String>) -> Result<MarkovChain> {
    if events.len() < 2 {
        return Err(Error::domain("learning a chain needs at least two events"));
    }
    let n = states.len();
    let index = |l: &str| {
        states
            .iter()
            .position(|s| s == l)
            .ok_or_else(|| Error::domain(format!("event {l:?} not in the state set")))
    };
    let mut counts = vec![vec![0u64; n]; n];
    let labels: Vec<&str> = events.labels().collect();
    for w in labels.windows(2) {
        counts[index(w[0])?][index(w[1])?] += 1;
    }
    let mut unobserved = Vec::new();
    let matrix = counts
        .iter()
        .enumerate()
        .map(|(i, row)| {
            let total: u64 = row.iter().sum();
            if total == 0 {
                log::warn!("state {:?} has no observed successor; defaulting to a self-loop", states[i]);
                unobserved.push(i);
                (0..n).map(|j| if i == j { 1.0 } else { 0.0 }).collect()
            } else {
                row.iter().map(|&c| c as f64 / total as f64).collect()
            }
        })
        .collect();
    let mut mc = MarkovChain::new(states, matrix)?;
    mc.unobserved = unobserved;
    Ok(mc)
}

// ---------------------------------------------------------------------------
// Hit probabilities

/// Indices that can reach `target` (including itself) along positive edges.
fn can_reach(mc: &MarkovChain, target: usize) -> Vec<bool> {
    let n = mc.len();
    let mut mark = vec![false; n];
    mark[target] = true;
    let mut stack = vec![target];
    while let Some(j) = stack.pop() {
        for i in 0..n {
            if !mark[i] && mc.prob(i, j) > 0.0 {
                mark[i] = true;
                stack.push(i);
            }
        }
    }
    mark
}

/// `h[e][s]`: probability that a walk started in `e` visits `s` at some
/// `t >= 0`. Minimal non-negative solution of `h_s(s) = 1`,
/// `h_s(e) = Σ_j P(e, j) h_s(j)`; states that cannot reach `s` get 0 and the
/// remaining system is non-singular.
pub fn hit_matrix(mc: &MarkovChain) -> Vec<Vec<f64>> {
    let n = mc.len();
    let mut h = vec![vec![0.0; n]; n];
    for s in 0..n {
        let reach = can_reach(mc, s);
        let unknown: Vec<usize> = (0..n).filter(|&e| e != s && reach[e]).collect();
        h[s][s] = 1.0;
        if unknown.is_empty() {
            continue;
        }
        let m = unknown.len();
        let a = DMatrix::from_fn(m, m, |r, c| {
            let id = if r == c { 1.0 } else { 0.0 };
            id - mc.prob(unknown[r], unknown[c])
        });
        let b = DVector::from_fn(m, |r, _| mc.prob(unknown[r], s));
        let x = a
            .lu()
            .solve(&b)
            .expect("restricted first-passage system is non-singular");
        for (r, &e) in unknown.iter().enumerate() {
            h[e][s] = x[r].clamp(0.0, 1.0);
        }
    }
    h
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HitProbabilities {
    /// Probability per state of being visited from the initial set.
    pub per_state: Vec<f64>,
    /// `from_start[k][s]` for the k-th initial state.
    pub from_start: Vec<Vec<f64>>,
}

/// Hit probabilities from the uniform distribution over `initial_set`;
/// members of the initial set report 1.
pub fn hit_probabilities(mc: &MarkovChain, initial_set: &[String]) -> Result<HitProbabilities> {
    let init = mc.indices_of(initial_set)?;
    if init.is_empty() {
        return Err(Error::domain("initial set must be non-empty"));
    }
    let h = hit_matrix(mc);
    Ok(combine(mc.len(), &init, |e, s| h[e][s]))
}

fn combine(n: usize, init: &[usize], h: impl Fn(usize, usize) -> f64) -> HitProbabilities {
    let from_start: Vec<Vec<f64>> = init.iter().map(|&e| (0..n).map(|s| h(e, s)).collect()).collect();
    let per_state = (0..n)
        .map(|s| {
            if init.contains(&s) {
                1.0
            } else {
                from_start.iter().map(|row| row[s]).sum::<f64>() / init.len() as f64
            }
        })
        .collect();
    HitProbabilities { per_state, from_start }
}

/// Monte Carlo estimate of the same quantity: `trajectories` walks of
/// `horizon` steps split evenly across the initial states.
pub fn hit_probabilities_monte_carlo(
    mc: &MarkovChain,
    initial_set: &[String],
    trajectories: usize,
    horizon: usize,
    seed: u64,
) -> Result<HitProbabilities> {
    let init = mc.indices_of(initial_set)?;
    if init.is_empty() {
        return Err(Error::domain("initial set must be non-empty"));
    }
    let n = mc.len();
    let per_start = (trajectories / init.len()).max(1);
    let mut est = vec![vec![0.0; n]; n];
    for &e in &init {
        let mut rng = rng::stream(seed, Stage::MonteCarlo, e as u64);
        let mut counts = vec![0usize; n];
        let mut seen = vec![false; n];
        for _ in 0..per_start {
            seen.iter_mut().for_each(|v| *v = false);
            let mut cur = e;
            seen[cur] = true;
            for _ in 0..horizon {
                cur = mc.step(cur, &mut rng);
                seen[cur] = true;
            }
            for (c, &v) in counts.iter_mut().zip(&seen) {
                *c += v as usize;
            }
        }
        est[e] = counts.iter().map(|&c| c as f64 / per_start as f64).collect();
    }
    Ok(combine(n, &init, |e, s| est[e][s]))
}

/// Long-run average occupancy `(1/M) Σ_{t<M} P(S_t = s)` from the uniform
/// initial distribution: the time-average form of the value function, kept
/// as a diagnostic next to the first-passage probabilities.
pub fn average_occupancy(mc: &MarkovChain, initial_set: &[String], horizon: usize) -> Result<Vec<f64>> {
    let init = mc.indices_of(initial_set)?;
    if init.is_empty() || horizon == 0 {
        return Err(Error::domain("initial set must be non-empty and horizon >= 1"));
    }
    let n = mc.len();
    let mut dist = vec![0.0; n];
    for &e in &init {
        dist[e] += 1.0 / init.len() as f64;
    }
    let mut acc = vec![0.0; n];
    for _ in 0..horizon {
        for (a, d) in acc.iter_mut().zip(&dist) {
            *a += d;
        }
        let mut next = vec![0.0; n];
        for i in 0..n {
            for j in 0..n {
                next[j] += dist[i] * mc.prob(i, j);
            }
        }
        dist = next;
    }
    Ok(acc.into_iter().map(|a| a / horizon as f64).collect())
}

// ---------------------------------------------------------------------------
// Domain of attraction

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum DoaSolver {
    LinearSolve,
    MonteCarlo { trajectories: usize, seed: u64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DoaConfig {
    /// Safety tuning probability.
    pub p: f64,
    pub initial_set: Vec<String>,
    /// Walk length for the Monte Carlo solver and the occupancy diagnostic.
    pub max_iterations: usize,
    pub solver: DoaSolver,
}

impl DoaConfig {
    pub fn new(p: f64, initial_set: Vec<String>) -> Self {
        Self {
            p,
            initial_set,
            max_iterations: 1000,
            solver: DoaSolver::LinearSolve,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.p) {
            return Err(Error::domain(format!("p must lie in [0, 1], got {}", self.p)));
        }
        if self.initial_set.is_empty() {
            return Err(Error::domain("initial set must be non-empty"));
        }
        if self.max_iterations == 0 {
            return Err(Error::domain("max_iterations must be >= 1"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DoaResult {
    /// Member labels in chain order.
    pub doa_set: Vec<String>,
    /// Hit probability per chain state.
    pub probabilities: Vec<f64>,
    /// Average-occupancy diagnostic per chain state.
    pub occupancy: Vec<f64>,
}

impl DoaResult {
    pub fn contains(&self, label: &str) -> bool {
        self.doa_set.iter().any(|s| s == label)
    }
}

/// Membership rule: hit probability `>= p` (with [`THRESHOLD_SLACK`]) and `> 0`.
pub fn in_doa(probability: f64, p: f64) -> bool {
    probability > 0.0 && probability >= p - THRESHOLD_SLACK
}

pub fn doa(mc: &MarkovChain, config: &DoaConfig) -> Result<DoaResult> {
    config.validate()?;
    let hits = match config.solver {
        DoaSolver::LinearSolve => hit_probabilities(mc, &config.initial_set)?,
        DoaSolver::MonteCarlo { trajectories, seed } => {
            hit_probabilities_monte_carlo(mc, &config.initial_set, trajectories, config.max_iterations, seed)?
        }
    };
    let occupancy = average_occupancy(mc, &config.initial_set, config.max_iterations)?;
    let doa_set = mc
        .states()
        .iter()
        .zip(&hits.per_state)
        .filter(|(_, &h)| in_doa(h, config.p))
        .map(|(s, _)| s.clone())
        .collect();
    Ok(DoaResult {
        doa_set,
        probabilities: hits.per_state,
        occupancy,
    })
}

// ---------------------------------------------------------------------------
// Sampling

/// Ancestral sampling of `length` labels starting at `start` (unit spacing).
pub fn sample_trajectory(mc: &MarkovChain, start: &str, length: usize, seed: u64) -> Result<EventSequence> {
    let mut rng = rng::stream(seed, Stage::MonteCarlo, u64::MAX);
    sample_trajectory_with(mc, start, length, &mut rng)
}

pub fn sample_trajectory_with<R: Rng + ?Sized>(mc: &MarkovChain, start: &str, length: usize, rng: &mut R) -> Result<EventSequence> {
    let mut cur = mc
        .index_of(start)
        .ok_or_else(|| Error::domain(format!("unknown start state {start:?}")))?;
    let mut labels = Vec::with_capacity(length);
    for k in 0..length {
        if k > 0 {
            cur = mc.step(cur, rng);
        }
        labels.push(mc.states()[cur].clone());
    }
    Ok(EventSequence::from_labels(&labels))
}
