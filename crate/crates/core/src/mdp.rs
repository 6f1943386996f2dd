//! Exact tabular state visitation, distribution shift and the bounds that
//! relate visitation shift to per-state policy divergence.

use rand::Rng as _;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{self, Rng};

const ROW_TOL: f64 = 1e-12;
/// Absolute slack absorbed when deciding whether a bound holds.
pub const HOLDS_TOL: f64 = 1e-9;
/// Per-entry floor mixed into random verification policies.
pub const POLICY_FLOOR: f64 = 0.01;

fn check_distribution(p: &[f64], what: &str) -> Result<()> {
    if p.iter().any(|&x| !(x >= 0.0) || !x.is_finite()) {
        return Err(Error::argument(format!("{what} has negative or non-finite entries")));
    }
    let s: f64 = p.iter().sum();
    if (s - 1.0).abs() > ROW_TOL {
        return Err(Error::argument(format!("{what} sums to {s}, expected 1")));
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TabularMdp {
    n_states: usize,
    n_actions: usize,
    /// `P[s][a][s']`, flattened row-major.
    transition: Vec<f64>,
    initial: Vec<f64>,
    horizon: usize,
}

impl TabularMdp {
    pub fn new(
        n_states: usize,
        n_actions: usize,
        transition: Vec<f64>,
        initial: Vec<f64>,
        horizon: usize,
    ) -> Result<Self> {
        if n_states == 0 || n_actions == 0 || horizon == 0 {
            return Err(Error::argument("states, actions and horizon must be positive"));
        }
        if transition.len() != n_states * n_actions * n_states {
            return Err(Error::argument(format!(
                "transition tensor has {} entries, expected {}",
                transition.len(),
                n_states * n_actions * n_states
            )));
        }
        if initial.len() != n_states {
            return Err(Error::argument("initial distribution length differs from state count"));
        }
        for s in 0..n_states {
            for a in 0..n_actions {
                let start = (s * n_actions + a) * n_states;
                check_distribution(&transition[start..start + n_states], &format!("P[{s}][{a}]"))?;
            }
        }
        check_distribution(&initial, "initial distribution")?;
        Ok(Self {
            n_states,
            n_actions,
            transition,
            initial,
            horizon,
        })
    }

    pub fn n_states(&self) -> usize {
        self.n_states
    }

    pub fn n_actions(&self) -> usize {
        self.n_actions
    }

    pub fn horizon(&self) -> usize {
        self.horizon
    }

    pub fn initial(&self) -> &[f64] {
        &self.initial
    }

    /// Next-state distribution `P[s][a][·]`.
    pub fn next(&self, s: usize, a: usize) -> &[f64] {
        let start = (s * self.n_actions + a) * self.n_states;
        &self.transition[start..start + self.n_states]
    }

    /// Random MDP with Dirichlet(1)-like rows and a random initial distribution.
    pub fn random(n_states: usize, n_actions: usize, horizon: usize, rng: &mut Rng) -> Result<Self> {
        let mut transition = Vec::with_capacity(n_states * n_actions * n_states);
        for _ in 0..n_states * n_actions {
            transition.extend(random_simplex(n_states, rng));
        }
        let initial = random_simplex(n_states, rng);
        Self::new(n_states, n_actions, transition, initial, horizon)
    }
}

/// Uniform sample from the probability simplex (normalised exponentials).
fn random_simplex(n: usize, rng: &mut Rng) -> Vec<f64> {
    let raw: Vec<f64> = (0..n).map(|_| -(1.0 - rng.random::<f64>()).ln()).collect();
    let total: f64 = raw.iter().sum();
    let mut p: Vec<f64> = raw.iter().map(|x| x / total).collect();
    // Push any rounding residue into the largest entry so the row sums to 1.
    let residue = 1.0 - p.iter().sum::<f64>();
    let imax = (0..n).max_by(|&i, &j| p[i].total_cmp(&p[j])).unwrap_or(0);
    p[imax] += residue;
    p
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TabularPolicy {
    n_states: usize,
    n_actions: usize,
    probs: Vec<f64>,
}

impl TabularPolicy {
    pub fn new(n_states: usize, n_actions: usize, probs: Vec<f64>) -> Result<Self> {
        if probs.len() != n_states * n_actions {
            return Err(Error::argument(format!(
                "policy has {} entries, expected {}",
                probs.len(),
                n_states * n_actions
            )));
        }
        for s in 0..n_states {
            check_distribution(&probs[s * n_actions..(s + 1) * n_actions], &format!("pi[{s}]"))?;
        }
        Ok(Self {
            n_states,
            n_actions,
            probs,
        })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let n_actions = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != n_actions) {
            return Err(Error::argument("policy rows differ in length"));
        }
        Self::new(rows.len(), n_actions, rows.concat())
    }

    /// Deterministic policy choosing `actions[s]` in state `s`.
    pub fn deterministic(n_actions: usize, actions: &[usize]) -> Result<Self> {
        let mut probs = vec![0.0; actions.len() * n_actions];
        for (s, &a) in actions.iter().enumerate() {
            if a >= n_actions {
                return Err(Error::argument(format!("action {a} out of range in state {s}")));
            }
            probs[s * n_actions + a] = 1.0;
        }
        Self::new(actions.len(), n_actions, probs)
    }

    /// Random policy `(1 - A·floor)·u + floor` with `u` uniform on the simplex,
    /// so every entry is at least [`POLICY_FLOOR`].
    pub fn random_full_support(n_states: usize, n_actions: usize, rng: &mut Rng) -> Result<Self> {
        let scale = 1.0 - n_actions as f64 * POLICY_FLOOR;
        if scale <= 0.0 {
            return Err(Error::argument(format!("too many actions for floor {POLICY_FLOOR}")));
        }
        let mut probs = Vec::with_capacity(n_states * n_actions);
        for _ in 0..n_states {
            probs.extend(
                random_simplex(n_actions, rng)
                    .into_iter()
                    .map(|u| scale * u + POLICY_FLOOR),
            );
        }
        Self::new(n_states, n_actions, probs)
    }

    pub fn n_states(&self) -> usize {
        self.n_states
    }

    pub fn n_actions(&self) -> usize {
        self.n_actions
    }

    pub fn row(&self, s: usize) -> &[f64] {
        &self.probs[s * self.n_actions..(s + 1) * self.n_actions]
    }

    /// Copy of this policy with state `s`'s row replaced.
    pub fn with_row(&self, s: usize, row: &[f64]) -> Result<Self> {
        let mut probs = self.probs.clone();
        if row.len() != self.n_actions || s >= self.n_states {
            return Err(Error::argument("row shape mismatch"));
        }
        probs[s * self.n_actions..(s + 1) * self.n_actions].copy_from_slice(row);
        Self::new(self.n_states, self.n_actions, probs)
    }
}

fn check_shapes(mdp: &TabularMdp, policy: &TabularPolicy) -> Result<()> {
    if mdp.n_states != policy.n_states || mdp.n_actions != policy.n_actions {
        return Err(Error::argument(format!(
            "policy shape {}x{} does not match MDP {}x{}",
            policy.n_states, policy.n_actions, mdp.n_states, mdp.n_actions
        )));
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Visitation {
    /// `rho^0 ..= rho^H`; `per_step[0]` is the initial distribution.
    pub per_step: Vec<Vec<f64>>,
    /// `(1/H) Σ_{t=1}^{H} rho^t`.
    pub average: Vec<f64>,
}

/// Forward recursion `rho^t(s') = Σ_{s,a} pi(a|s) P(s'|s,a) rho^{t-1}(s)`.
pub fn visitation(mdp: &TabularMdp, policy: &TabularPolicy) -> Result<Visitation> {
    check_shapes(mdp, policy)?;
    let n = mdp.n_states;
    let mut per_step = Vec::with_capacity(mdp.horizon + 1);
    per_step.push(mdp.initial.clone());
    for _ in 0..mdp.horizon {
        let prev = per_step.last().expect("nonempty");
        let mut next = vec![0.0; n];
        for (s, &mass) in prev.iter().enumerate() {
            if mass == 0.0 {
                continue;
            }
            for (a, &pa) in policy.row(s).iter().enumerate() {
                let w = mass * pa;
                if w == 0.0 {
                    continue;
                }
                for (acc, &p) in next.iter_mut().zip(mdp.next(s, a)) {
                    *acc += w * p;
                }
            }
        }
        per_step.push(next);
    }
    let h = mdp.horizon as f64;
    let average = (0..n)
        .map(|s| per_step[1..].iter().map(|rho| rho[s]).sum::<f64>() / h)
        .collect();
    Ok(Visitation { per_step, average })
}

/// `Σ p log(p/q)` in nats. Returns `f64::INFINITY` when `p` puts mass where
/// `q` has none.
pub fn kl_divergence(p: &[f64], q: &[f64]) -> Result<f64> {
    if p.len() != q.len() {
        return Err(Error::argument(format!("length mismatch: {} vs {}", p.len(), q.len())));
    }
    let mut total = 0.0;
    for (&pi, &qi) in p.iter().zip(q) {
        if pi == 0.0 {
            continue;
        }
        if qi == 0.0 {
            return Ok(f64::INFINITY);
        }
        total += pi * (pi / qi).ln();
    }
    // Rounding can leave a tiny negative sum for nearly equal inputs.
    Ok(total.max(0.0))
}

/// Negative KL between the averaged visitations of `learned` and `expert`.
pub fn quality_score(mdp: &TabularMdp, expert: &TabularPolicy, learned: &TabularPolicy) -> Result<f64> {
    let rho_e = visitation(mdp, expert)?;
    let rho_a = visitation(mdp, learned)?;
    Ok(-kl_divergence(&rho_a.average, &rho_e.average)?)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoundReport {
    pub lhs: f64,
    pub rhs: f64,
    pub holds: bool,
    /// `rhs - lhs`.
    pub slack: f64,
}

impl BoundReport {
    pub fn new(lhs: f64, rhs: f64) -> Self {
        Self {
            lhs,
            rhs,
            holds: lhs <= rhs + HOLDS_TOL,
            slack: rhs - lhs,
        }
    }
}

/// Per-state `KL(pi_A(·|s), pi_E(·|s))`.
pub fn per_state_kl(learned: &TabularPolicy, expert: &TabularPolicy) -> Result<Vec<f64>> {
    if learned.n_states != expert.n_states || learned.n_actions != expert.n_actions {
        return Err(Error::argument("policy shapes differ"));
    }
    (0..learned.n_states)
        .map(|s| kl_divergence(learned.row(s), expert.row(s)))
        .collect()
}

fn expectation(rho: &[f64], values: &[f64]) -> f64 {
    rho.iter()
        .zip(values)
        .filter(|(&r, _)| r > 0.0)
        .map(|(&r, &v)| r * v)
        .sum()
}

/// Checks `KL(rho_A, rho_E) <= (1/H) Σ_{t=0}^{H-1} (H - t) E_{rho_A^t}[KL(pi_A, pi_E)]`.
pub fn check_theorem1(mdp: &TabularMdp, expert: &TabularPolicy, learned: &TabularPolicy) -> Result<BoundReport> {
    check_shapes(mdp, expert)?;
    check_shapes(mdp, learned)?;
    let rho_e = visitation(mdp, expert)?;
    let rho_a = visitation(mdp, learned)?;
    let kl_s = per_state_kl(learned, expert)?;
    let h = mdp.horizon;
    let mut rhs = 0.0;
    for t in 0..h {
        let e = expectation(&rho_a.per_step[t], &kl_s);
        if e.is_infinite() {
            let s = (0..mdp.n_states)
                .find(|&s| rho_a.per_step[t][s] > 0.0 && kl_s[s].is_infinite())
                .unwrap_or(0);
            return Err(Error::argument(format!(
                "learned policy leaves the expert's support in visited state {s} at step {t}"
            )));
        }
        rhs += (h - t) as f64 * e;
    }
    rhs /= h as f64;
    let lhs = kl_divergence(&rho_a.average, &rho_e.average)?;
    Ok(BoundReport::new(lhs, rhs))
}

/// Support mask of the expert visitation per step `t = 0..H-1`: states with
/// `rho_E^t(s) > threshold`.
pub fn expert_support_mask(mdp: &TabularMdp, expert: &TabularPolicy, threshold: f64) -> Result<Vec<Vec<bool>>> {
    let rho = visitation(mdp, expert)?;
    Ok(rho.per_step[..mdp.horizon]
        .iter()
        .map(|r| r.iter().map(|&x| x > threshold).collect())
        .collect())
}

/// Per-step check of `E_{rho_A^t}[KL] <= E_{rho_A^t}[beta·1(s∈supp_t) + 1(s∉supp_t)·KL]`
/// for `t = 0..H-1`. `support[t][s]` marks the support at step `t`; every
/// marked state must satisfy `KL(pi_A(·|s), pi_E(·|s)) <= beta`.
pub fn check_lemma1(
    mdp: &TabularMdp,
    expert: &TabularPolicy,
    learned: &TabularPolicy,
    beta: f64,
    support: &[Vec<bool>],
) -> Result<Vec<BoundReport>> {
    check_shapes(mdp, expert)?;
    check_shapes(mdp, learned)?;
    if !(beta >= 0.0) {
        return Err(Error::argument(format!("beta must be >= 0, got {beta}")));
    }
    if support.len() != mdp.horizon || support.iter().any(|m| m.len() != mdp.n_states) {
        return Err(Error::argument(format!(
            "support mask must have {} steps of {} states",
            mdp.horizon, mdp.n_states
        )));
    }
    let kl_s = per_state_kl(learned, expert)?;
    for (t, mask) in support.iter().enumerate() {
        for (s, _) in mask.iter().enumerate().filter(|(_, &m)| m) {
            if !(kl_s[s] <= beta) {
                return Err(Error::argument(format!(
                    "state {s} in the step-{t} support has KL {} > beta {beta}",
                    kl_s[s]
                )));
            }
        }
    }
    let rho_a = visitation(mdp, learned)?;
    Ok(support
        .iter()
        .enumerate()
        .map(|(t, mask)| {
            let rho = &rho_a.per_step[t];
            let lhs = expectation(rho, &kl_s);
            let bounded: Vec<f64> = (0..mdp.n_states)
                .map(|s| if mask[s] { beta } else { kl_s[s] })
                .collect();
            BoundReport::new(lhs, expectation(rho, &bounded))
        })
        .collect())
}

/// One randomized verification instance.
#[derive(Debug, Clone)]
pub struct RandomInstance {
    pub mdp: TabularMdp,
    pub expert: TabularPolicy,
    pub learned: TabularPolicy,
}

/// Random MDP and full-support policy pair with sizes drawn from
/// `1..=max_states`, `1..=max_actions`, `1..=max_horizon`.
pub fn random_instance(seed: u64, max_states: usize, max_actions: usize, max_horizon: usize) -> Result<RandomInstance> {
    let mut rng = rng::seeded(seed);
    let s = rng.random_range(1..=max_states.max(1));
    let a = rng.random_range(1..=max_actions.max(1));
    let h = rng.random_range(1..=max_horizon.max(1));
    let mdp = TabularMdp::random(s, a, h, &mut rng)?;
    let expert = TabularPolicy::random_full_support(s, a, &mut rng)?;
    let learned = TabularPolicy::random_full_support(s, a, &mut rng)?;
    Ok(RandomInstance { mdp, expert, learned })
}

/// Threshold on expert visitation used to build lemma support masks.
pub const SUPPORT_THRESHOLD: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedVerification {
    pub seed: u64,
    pub theorem1: BoundReport,
    /// Worst (smallest slack) per-step lemma report.
    pub lemma1: BoundReport,
}

impl SeedVerification {
    pub fn holds(&self) -> bool {
        self.theorem1.holds && self.lemma1.holds
    }
}

/// Run both checks on the instance for `seed`; the lemma uses the expert
/// support above [`SUPPORT_THRESHOLD`] and beta equal to the largest KL on it.
pub fn verify_seed(seed: u64, max_states: usize, max_actions: usize, max_horizon: usize) -> Result<SeedVerification> {
    let inst = random_instance(seed, max_states, max_actions, max_horizon)?;
    let theorem1 = check_theorem1(&inst.mdp, &inst.expert, &inst.learned)?;
    let support = expert_support_mask(&inst.mdp, &inst.expert, SUPPORT_THRESHOLD)?;
    let kl_s = per_state_kl(&inst.learned, &inst.expert)?;
    let beta = support
        .iter()
        .flat_map(|m| m.iter().zip(&kl_s).filter(|(&on, _)| on).map(|(_, &k)| k))
        .fold(0.0, f64::max);
    let steps = check_lemma1(&inst.mdp, &inst.expert, &inst.learned, beta, &support)?;
    let lemma1 = steps
        .into_iter()
        .min_by(|a, b| a.slack.total_cmp(&b.slack))
        .expect("horizon >= 1");
    Ok(SeedVerification { seed, theorem1, lemma1 })
}

/// [`verify_seed`] for seeds `0..n_seeds`, in parallel, returned in seed order.
pub fn verify_seeds(
    n_seeds: u64,
    max_states: usize,
    max_actions: usize,
    max_horizon: usize,
) -> Result<Vec<SeedVerification>> {
    (0..n_seeds)
        .into_par_iter()
        .map(|seed| verify_seed(seed, max_states, max_actions, max_horizon))
        .collect()
}
