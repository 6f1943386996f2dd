//! Empirical data-quality metrics based on ε-neighbourhood clusters.
//!
//! For a transition `(s, a, s')` its cluster `C(s, D)` is every transition of
//! the flattened dataset whose state lies within `epsilon` of `s`. Two
//! metrics are derived from the clusters:
//!
//! - **action variance**: mean over transitions and action dimensions of the
//!   squared deviation of `a` from the mean action of `C(s, D)`;
//! - **state similarity**: `(1 / |D|²) Σ |C(s, D)|`, the average cluster size
//!   as a fraction of the dataset.
//!
//! Both are computed exactly. The optional grid index only prunes candidate
//! pairs; membership is decided by the same distance test, and per-transition
//! values are reduced with a fixed pairwise tree, so results are bit-identical
//! to the exhaustive scan.

use std::collections::HashMap;
use std::fmt;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::{Dataset, Transition};
use crate::error::{Error, Result};
use crate::stats::pairwise_sum;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Norm {
    #[default]
    Euclidean,
    /// Maximum absolute coordinate difference.
    Chebyshev,
    Manhattan,
}

impl Norm {
    #[inline]
    pub fn distance(self, a: &[f64], b: &[f64]) -> f64 {
        let diffs = a.iter().zip(b).map(|(x, y)| (x - y).abs());
        match self {
            Norm::Euclidean => diffs.map(|d| d * d).sum::<f64>().sqrt(),
            Norm::Chebyshev => diffs.fold(0.0, f64::max),
            Norm::Manhattan => diffs.sum(),
        }
    }
}

impl std::str::FromStr for Norm {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "euclidean" | "l2" => Ok(Norm::Euclidean),
            "chebyshev" | "linf" | "max" => Ok(Norm::Chebyshev),
            "manhattan" | "l1" => Ok(Norm::Manhattan),
            _ => Err(Error::argument(format!("unknown norm {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NeighborSearch {
    /// Exhaustive O(|D|²) pairwise scan.
    #[default]
    Exact,
    /// Uniform grid with cell size epsilon; same results as `Exact`.
    Grid,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClusterParams {
    pub epsilon: f64,
    #[serde(default)]
    pub norm: Norm,
    #[serde(default)]
    pub search: NeighborSearch,
}

impl ClusterParams {
    pub fn new(epsilon: f64, norm: Norm) -> Result<Self> {
        let p = Self {
            epsilon,
            norm,
            search: NeighborSearch::Exact,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn with_search(mut self, search: NeighborSearch) -> Self {
        self.search = search;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon >= 0.0) {
            return Err(Error::argument(format!("epsilon must be >= 0, got {}", self.epsilon)));
        }
        Ok(())
    }

    /// Data-scaled default: 0.05 × the mean per-dimension state standard deviation.
    pub fn default_for(dataset: &Dataset) -> Self {
        Self {
            epsilon: DEFAULT_EPSILON_SCALE * mean_state_std(dataset),
            norm: Norm::Euclidean,
            search: NeighborSearch::Exact,
        }
    }
}

pub const DEFAULT_EPSILON_SCALE: f64 = 0.05;

/// Mean over state dimensions of the population standard deviation of transition states.
pub fn mean_state_std(dataset: &Dataset) -> f64 {
    let n = dataset.n_transitions() as f64;
    let d = dataset.state_dim;
    let mut mean = vec![0.0; d];
    for t in dataset.transitions() {
        for (m, x) in mean.iter_mut().zip(&t.state) {
            *m += x;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n);
    let mut var = vec![0.0; d];
    for t in dataset.transitions() {
        for k in 0..d {
            let dx = t.state[k] - mean[k];
            var[k] += dx * dx;
        }
    }
    var.iter().map(|v| (v / n).sqrt()).sum::<f64>() / d as f64
}

/// Every transition whose state lies within `epsilon` of `query`.
pub fn cluster<'a>(query: &[f64], dataset: &'a Dataset, params: &ClusterParams) -> Result<Vec<&'a Transition>> {
    params.validate()?;
    if query.len() != dataset.state_dim {
        return Err(Error::argument(format!(
            "query has dimension {}, dataset states have {}",
            query.len(),
            dataset.state_dim
        )));
    }
    Ok(dataset
        .transitions()
        .filter(|t| params.norm.distance(query, &t.state) <= params.epsilon)
        .collect())
}

/// Flattened states/actions plus a neighbour index.
struct ClusterIndex<'a> {
    states: Vec<&'a [f64]>,
    actions: Vec<&'a [f64]>,
    params: ClusterParams,
    grid: Option<Grid>,
}

struct Grid {
    cells: HashMap<Vec<i64>, Vec<usize>>,
    keys: Vec<Vec<i64>>,
}

// Beyond this dimension the 3^d neighbour sweep stops paying off.
const GRID_MAX_DIM: usize = 4;

impl<'a> ClusterIndex<'a> {
    fn build(dataset: &'a Dataset, params: &ClusterParams) -> Self {
        let states: Vec<&[f64]> = dataset.transitions().map(|t| t.state.as_slice()).collect();
        let actions: Vec<&[f64]> = dataset.transitions().map(|t| t.action.as_slice()).collect();
        let use_grid = params.search == NeighborSearch::Grid
            && params.epsilon > 0.0
            && params.epsilon.is_finite()
            && dataset.state_dim <= GRID_MAX_DIM;
        let grid = use_grid.then(|| {
            // Slightly oversized cells keep epsilon-neighbours within one cell
            // per axis despite rounding in the division.
            let cell = params.epsilon * (1.0 + 1e-6);
            let keys: Vec<Vec<i64>> = states
                .iter()
                .map(|s| s.iter().map(|x| (x / cell).floor() as i64).collect())
                .collect();
            let mut cells: HashMap<Vec<i64>, Vec<usize>> = HashMap::new();
            for (i, k) in keys.iter().enumerate() {
                cells.entry(k.clone()).or_default().push(i);
            }
            Grid { cells, keys }
        });
        Self {
            states,
            actions,
            params: *params,
            grid,
        }
    }

    /// Sorted indices of the transitions in the cluster of transition `i`.
    fn members(&self, i: usize) -> Vec<usize> {
        let q = self.states[i];
        let within = |j: &usize| self.params.norm.distance(q, self.states[*j]) <= self.params.epsilon;
        match &self.grid {
            None => (0..self.states.len()).filter(within).collect(),
            Some(grid) => {
                // Any point within epsilon (under any of the supported norms) lies
                // in a cell whose integer key differs by at most one per axis.
                let base = &grid.keys[i];
                let d = base.len();
                let mut out = Vec::new();
                let mut offset = vec![-1i64; d];
                loop {
                    let key: Vec<i64> = base.iter().zip(&offset).map(|(b, o)| b + o).collect();
                    if let Some(bucket) = grid.cells.get(&key) {
                        out.extend(bucket.iter().copied().filter(within));
                    }
                    let mut k = 0;
                    while k < d && offset[k] == 1 {
                        offset[k] = -1;
                        k += 1;
                    }
                    if k == d {
                        break;
                    }
                    offset[k] += 1;
                }
                out.sort_unstable();
                out
            }
        }
    }

    fn len(&self) -> usize {
        self.states.len()
    }
}

fn squared_deviation_from_cluster_mean(index: &ClusterIndex<'_>, i: usize) -> f64 {
    let members = index.members(i);
    let d_a = index.actions[i].len();
    let inv = 1.0 / members.len() as f64;
    (0..d_a)
        .map(|k| {
            let mean = members.iter().map(|&j| index.actions[j][k]).sum::<f64>() * inv;
            let dev = index.actions[i][k] - mean;
            dev * dev
        })
        .sum()
}

fn per_transition<F>(index: &ClusterIndex<'_>, f: F) -> Vec<f64>
where
    F: Fn(&ClusterIndex<'_>, usize) -> f64 + Sync,
{
    (0..index.len()).into_par_iter().map(|i| f(index, i)).collect()
}

/// Average squared deviation of each action from its cluster's mean action,
/// averaged over transitions and action dimensions.
pub fn action_variance(dataset: &Dataset, params: &ClusterParams) -> Result<f64> {
    dataset.validate()?;
    params.validate()?;
    let index = ClusterIndex::build(dataset, params);
    let values = per_transition(&index, squared_deviation_from_cluster_mean);
    Ok(pairwise_sum(&values) / (index.len() * dataset.action_dim) as f64)
}

/// Average cluster size as a fraction of the dataset, `(1/|D|²) Σ |C(s, D)|`.
pub fn state_similarity(dataset: &Dataset, params: &ClusterParams) -> Result<f64> {
    dataset.validate()?;
    params.validate()?;
    let index = ClusterIndex::build(dataset, params);
    let sizes = per_transition(&index, |idx, i| idx.members(i).len() as f64);
    let n = index.len() as f64;
    Ok(pairwise_sum(&sizes) / (n * n))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub action_variance: f64,
    pub state_similarity: f64,
    pub mean_horizon: f64,
    pub n_states: usize,
    pub epsilon_used: f64,
}

impl MetricsReport {
    /// Single-line JSON record.
    pub fn to_record(&self) -> String {
        serde_json::to_string(self).expect("report serializes")
    }
}

impl fmt::Display for MetricsReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let rows = [
            ("action_variance", format!("{:.6e}", self.action_variance)),
            ("state_similarity", format!("{:.6e}", self.state_similarity)),
            ("mean_horizon", format!("{:.3}", self.mean_horizon)),
            ("n_states", self.n_states.to_string()),
            ("epsilon_used", format!("{:.6e}", self.epsilon_used)),
        ];
        for (k, v) in rows {
            writeln!(f, "{k:<18}{v:>16}")?;
        }
        Ok(())
    }
}

pub fn metrics_report(dataset: &Dataset, params: &ClusterParams) -> Result<MetricsReport> {
    dataset.validate()?;
    params.validate()?;
    let index = ClusterIndex::build(dataset, params);
    let (dev, sizes): (Vec<f64>, Vec<f64>) = (0..index.len())
        .into_par_iter()
        .map(|i| {
            (
                squared_deviation_from_cluster_mean(&index, i),
                index.members(i).len() as f64,
            )
        })
        .unzip();
    let n = index.len();
    Ok(MetricsReport {
        action_variance: pairwise_sum(&dev) / (n * dataset.action_dim) as f64,
        state_similarity: pairwise_sum(&sizes) / (n as f64 * n as f64),
        mean_horizon: n as f64 / dataset.len() as f64,
        n_states: n,
        epsilon_used: params.epsilon,
    })
}

#[cfg(test)]
mod tests {
    use std::collections::BTreeMap;

    use super::*;
    use crate::dataset::Trajectory;

    fn traj(states: Vec<Vec<f64>>, actions: Vec<Vec<f64>>) -> Trajectory {
        Trajectory::from_states_actions(states, actions, true, 0, BTreeMap::new()).unwrap()
    }

    /// One single-transition trajectory per (state, action) pair.
    fn points(pairs: &[(f64, f64)]) -> Dataset {
        let trajs = pairs
            .iter()
            .map(|&(s, a)| traj(vec![vec![s], vec![s + 100.0]], vec![vec![a]]))
            .collect();
        Dataset::new(trajs, "test", 1, 1).unwrap()
    }

    fn p(eps: f64) -> ClusterParams {
        ClusterParams::new(eps, Norm::Euclidean).unwrap()
    }

    #[test]
    fn zero_radius_returns_only_the_query() {
        let ds = points(&[(0.0, 1.0), (0.5, 2.0), (2.0, 3.0)]);
        let c = cluster(&[0.5], &ds, &p(0.0)).unwrap();
        assert_eq!(c.len(), 1);
        assert_eq!(c[0].action, vec![2.0]);
    }

    #[test]
    fn huge_radius_returns_everything() {
        let ds = points(&[(0.0, 1.0), (0.5, 2.0), (2.0, 3.0)]);
        assert_eq!(cluster(&[0.0], &ds, &p(1e300)).unwrap().len(), 3);
    }

    #[test]
    fn line_example() {
        let ds = points(&[(0.0, 1.0), (0.5, 2.0), (2.0, 3.0)]);
        let c = cluster(&[0.0], &ds, &p(1.0)).unwrap();
        let states: Vec<f64> = c.iter().map(|t| t.state[0]).collect();
        assert_eq!(states, vec![0.0, 0.5]);
    }

    #[test]
    fn dimension_mismatch() {
        let ds = points(&[(0.0, 1.0)]);
        assert!(matches!(cluster(&[0.0, 1.0], &ds, &p(1.0)), Err(Error::Argument(_))));
        assert!(ClusterParams::new(-1.0, Norm::Euclidean).is_err());
    }

    #[test]
    fn constant_actions_have_zero_variance() {
        let ds = Dataset::new(vec![traj(vec![vec![1.0]; 5], vec![vec![0.3]; 4])], "t", 1, 1).unwrap();
        assert_eq!(action_variance(&ds, &p(0.1)).unwrap(), 0.0);
        let r = metrics_report(&ds, &p(0.1)).unwrap();
        assert_eq!((r.action_variance, r.state_similarity, r.mean_horizon), (0.0, 1.0, 4.0));
    }

    #[test]
    fn two_actions_at_one_state() {
        // Two transitions from the same state with actions 0 and 1: each deviates
        // 0.5 from the cluster mean 0.5, so the variance is 0.25.
        let ds = Dataset::new(
            vec![traj(vec![vec![0.0], vec![0.0], vec![7.0]], vec![vec![0.0], vec![1.0]])],
            "t",
            1,
            1,
        )
        .unwrap();
        assert_eq!(action_variance(&ds, &p(0.0)).unwrap(), 0.25);
        assert_eq!(action_variance(&ds, &p(1.0)).unwrap(), 0.25);

        let distinct = points(&[(0.0, 0.0), (1.0, 1.0)]);
        assert_eq!(action_variance(&distinct, &p(0.0)).unwrap(), 0.0);
    }

    #[test]
    fn similarity_extremes() {
        let same = points(&[(3.0, 0.0), (3.0, 1.0), (3.0, 2.0), (3.0, 5.0)]);
        assert_eq!(state_similarity(&same, &p(0.0)).unwrap(), 1.0);
        let far = points(&[(0.0, 0.0), (10.0, 1.0), (20.0, 2.0), (30.0, 5.0)]);
        assert_eq!(state_similarity(&far, &p(1.0)).unwrap(), 0.25);
    }

    #[test]
    fn similarity_two_pairs() {
        let ds = points(&[(0.0, 0.0), (0.01, 0.0), (5.0, 0.0), (5.01, 0.0)]);
        // each cluster has two members: (2 + 2 + 2 + 2) / 16
        assert_eq!(state_similarity(&ds, &p(0.1)).unwrap(), 0.5);
    }

    #[test]
    fn grid_search_agrees_bitwise() {
        let pairs: Vec<(f64, f64)> = (0..60).map(|i| ((i as f64 * 0.37).sin(), (i as f64).cos())).collect();
        let ds = points(&pairs);
        for norm in [Norm::Euclidean, Norm::Chebyshev, Norm::Manhattan] {
            for eps in [0.0, 0.05, 0.3, 2.5] {
                let exact = ClusterParams::new(eps, norm).unwrap();
                let grid = exact.with_search(NeighborSearch::Grid);
                assert_eq!(
                    metrics_report(&ds, &exact).unwrap(),
                    metrics_report(&ds, &grid).unwrap()
                );
            }
        }
    }

    #[test]
    fn default_epsilon_scales_with_data() {
        let ds = points(&[(0.0, 0.0), (2.0, 0.0)]);
        let p = ClusterParams::default_for(&ds);
        assert!((p.epsilon - 0.05).abs() < 1e-15);
    }

    #[test]
    fn report_formats() {
        let ds = points(&[(0.0, 0.0), (2.0, 1.0)]);
        let r = metrics_report(&ds, &p(0.5)).unwrap();
        let rec: MetricsReport = serde_json::from_str(&r.to_record()).unwrap();
        assert_eq!(rec, r);
        assert!(!r.to_record().contains('\n'));
        assert_eq!(r.to_string().lines().count(), 5);
    }
}
