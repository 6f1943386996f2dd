//! Trajectory datasets and their newline-delimited on-disk format.
//!
//! A file holds one JSON header record followed by one JSON record per
//! trajectory:
//!
//! ```text
//! {"format_version":1,"env_id":"pmobstacle-v1","state_dim":2,"action_dim":2,"n_trajectories":N}
//! {"seed":..,"success":true,"metadata":{"sigma_p":0.0,"sigma_s":0.01},"states":[[..],..],"actions":[[..],..]}
//! ```
//!
//! `states` has one more entry than `actions`; transition `t` is
//! `(states[t], actions[t], states[t + 1])`. Floats are written in their
//! shortest round-trip representation, so `load(save(x)) == x` bit for bit.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::seq::index;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result, ValidationError};
use crate::rng;

pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Transition {
    pub state: Vec<f64>,
    pub action: Vec<f64>,
    pub next_state: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub transitions: Vec<Transition>,
    /// Goal reached without collision, as judged by the collector.
    pub success: bool,
    pub seed: u64,
    /// Noise parameters used at collection time (`sigma_s`, `sigma_p`).
    pub metadata: BTreeMap<String, f64>,
}

impl Trajectory {
    /// Build a trajectory from a chained state sequence (`T + 1` states) and `T` actions.
    pub fn from_states_actions(
        states: Vec<Vec<f64>>,
        actions: Vec<Vec<f64>>,
        success: bool,
        seed: u64,
        metadata: BTreeMap<String, f64>,
    ) -> std::result::Result<Self, String> {
        if states.len() != actions.len() + 1 {
            return Err(format!(
                "expected {} states for {} actions, found {}",
                actions.len() + 1,
                actions.len(),
                states.len()
            ));
        }
        let transitions = actions
            .into_iter()
            .enumerate()
            .map(|(t, action)| Transition {
                state: states[t].clone(),
                action,
                next_state: states[t + 1].clone(),
            })
            .collect();
        Ok(Self {
            transitions,
            success,
            seed,
            metadata,
        })
    }

    pub fn len(&self) -> usize {
        self.transitions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.transitions.is_empty()
    }

    /// The `T + 1` visited states. Assumes the chaining invariant holds.
    pub fn states(&self) -> Vec<Vec<f64>> {
        let mut out: Vec<Vec<f64>> = self.transitions.iter().map(|t| t.state.clone()).collect();
        if let Some(last) = self.transitions.last() {
            out.push(last.next_state.clone());
        }
        out
    }

    pub fn actions(&self) -> Vec<Vec<f64>> {
        self.transitions.iter().map(|t| t.action.clone()).collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub trajectories: Vec<Trajectory>,
    pub env_id: String,
    pub state_dim: usize,
    pub action_dim: usize,
}

fn all_finite(v: &[f64]) -> bool {
    v.iter().all(|x| x.is_finite())
}

impl Dataset {
    pub fn new(
        trajectories: Vec<Trajectory>,
        env_id: impl Into<String>,
        state_dim: usize,
        action_dim: usize,
    ) -> Result<Self> {
        let ds = Self {
            trajectories,
            env_id: env_id.into(),
            state_dim,
            action_dim,
        };
        ds.validate()?;
        Ok(ds)
    }

    /// Check every dataset invariant, reporting the first offending trajectory and step.
    pub fn validate(&self) -> std::result::Result<(), ValidationError> {
        if self.state_dim == 0 || self.action_dim == 0 {
            return Err(ValidationError::dataset("state_dim and action_dim must be positive"));
        }
        if self.trajectories.is_empty() {
            return Err(ValidationError::dataset("dataset has no trajectories"));
        }
        for (i, traj) in self.trajectories.iter().enumerate() {
            if traj.transitions.is_empty() {
                return Err(ValidationError::trajectory(i, "trajectory has no transitions"));
            }
            for (key, value) in &traj.metadata {
                if !value.is_finite() || *value < 0.0 {
                    return Err(ValidationError::trajectory(
                        i,
                        format!("metadata {key} = {value} is not a nonnegative real"),
                    ));
                }
            }
            for (t, tr) in traj.transitions.iter().enumerate() {
                if tr.state.len() != self.state_dim || tr.next_state.len() != self.state_dim {
                    return Err(ValidationError::step(
                        i,
                        t,
                        format!(
                            "state dimension {} / next_state dimension {} != state_dim {}",
                            tr.state.len(),
                            tr.next_state.len(),
                            self.state_dim
                        ),
                    ));
                }
                if tr.action.len() != self.action_dim {
                    return Err(ValidationError::step(
                        i,
                        t,
                        format!("action dimension {} != action_dim {}", tr.action.len(), self.action_dim),
                    ));
                }
                if !all_finite(&tr.state) || !all_finite(&tr.action) || !all_finite(&tr.next_state) {
                    return Err(ValidationError::step(i, t, "non-finite value"));
                }
                if t > 0 && traj.transitions[t - 1].next_state != tr.state {
                    return Err(ValidationError::step(
                        i,
                        t,
                        format!("state does not equal next_state of step {}", t - 1),
                    ));
                }
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.trajectories.len()
    }

    pub fn is_empty(&self) -> bool {
        self.trajectories.is_empty()
    }

    /// Flattened view over every transition, in trajectory order.
    pub fn transitions(&self) -> impl Iterator<Item = &Transition> + '_ {
        self.trajectories.iter().flat_map(|t| t.transitions.iter())
    }

    pub fn n_transitions(&self) -> usize {
        self.trajectories.iter().map(Trajectory::len).sum()
    }

    /// Keep only trajectories flagged successful. `None` if none remain.
    pub fn successful_only(&self) -> Option<Dataset> {
        let kept: Vec<Trajectory> = self.trajectories.iter().filter(|t| t.success).cloned().collect();
        if kept.is_empty() {
            return None;
        }
        Some(Dataset {
            trajectories: kept,
            env_id: self.env_id.clone(),
            state_dim: self.state_dim,
            action_dim: self.action_dim,
        })
    }
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct HeaderRecord {
    format_version: u32,
    env_id: String,
    state_dim: usize,
    action_dim: usize,
    n_trajectories: usize,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TrajectoryRecord {
    seed: u64,
    success: bool,
    metadata: BTreeMap<String, f64>,
    states: Vec<Vec<f64>>,
    actions: Vec<Vec<f64>>,
}

/// Write `dataset` to `path`, refusing to write anything invalid.
pub fn save_dataset(dataset: &Dataset, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    dataset.validate()?;
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    write_dataset(dataset, &mut w).map_err(|e| Error::io(path, e))?;
    w.flush().map_err(|e| Error::io(path, e))
}

fn write_dataset(dataset: &Dataset, w: &mut impl Write) -> std::io::Result<()> {
    let header = HeaderRecord {
        format_version: FORMAT_VERSION,
        env_id: dataset.env_id.clone(),
        state_dim: dataset.state_dim,
        action_dim: dataset.action_dim,
        n_trajectories: dataset.trajectories.len(),
    };
    serde_json::to_writer(&mut *w, &header)?;
    w.write_all(b"\n")?;
    for traj in &dataset.trajectories {
        let record = TrajectoryRecord {
            seed: traj.seed,
            success: traj.success,
            metadata: traj.metadata.clone(),
            states: traj.states(),
            actions: traj.actions(),
        };
        serde_json::to_writer(&mut *w, &record)?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

pub fn load_dataset(path: impl AsRef<Path>) -> Result<Dataset> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    read_dataset(BufReader::new(file)).map_err(|e| match e {
        Error::Io { source, .. } => Error::io(path, source),
        other => other,
    })
}

/// Parse a dataset from any line-oriented reader.
pub fn read_dataset(reader: impl BufRead) -> Result<Dataset> {
    let mut lines = reader.lines().enumerate();
    let header: HeaderRecord = match lines.next() {
        Some((_, line)) => {
            let line = line.map_err(|e| Error::io("<reader>", e))?;
            serde_json::from_str(&line).map_err(|e| Error::Parse {
                line: 1,
                message: format!("bad header: {e}"),
            })?
        }
        None => {
            return Err(Error::Parse {
                line: 1,
                message: "empty file".into(),
            })
        }
    };
    if header.format_version != FORMAT_VERSION {
        return Err(Error::Parse {
            line: 1,
            message: format!("unsupported format_version {}", header.format_version),
        });
    }

    let mut trajectories = Vec::with_capacity(header.n_trajectories);
    for (idx, line) in lines {
        let line_no = idx + 1;
        let line = line.map_err(|e| Error::io("<reader>", e))?;
        if line.is_empty() {
            return Err(Error::Parse {
                line: line_no,
                message: "empty record".into(),
            });
        }
        let rec: TrajectoryRecord = serde_json::from_str(&line).map_err(|e| Error::Parse {
            line: line_no,
            message: e.to_string(),
        })?;
        let traj_index = trajectories.len();
        let traj = Trajectory::from_states_actions(rec.states, rec.actions, rec.success, rec.seed, rec.metadata)
            .map_err(|m| ValidationError::trajectory(traj_index, m))?;
        trajectories.push(traj);
    }
    if trajectories.len() != header.n_trajectories {
        return Err(Error::Parse {
            line: trajectories.len() + 2,
            message: format!(
                "header announces {} trajectories, found {}",
                header.n_trajectories,
                trajectories.len()
            ),
        });
    }
    Dataset::new(trajectories, header.env_id, header.state_dim, header.action_dim)
}

/// Indices drawn without replacement by [`subsample`], in ascending order.
pub fn subsample_indices(n_total: usize, n: usize, seed: u64) -> Result<Vec<usize>> {
    if n == 0 || n > n_total {
        return Err(Error::argument(format!(
            "cannot draw {n} trajectories from a dataset of {n_total}"
        )));
    }
    let mut rng = rng::seeded(seed);
    let mut idx = index::sample(&mut rng, n_total, n).into_vec();
    idx.sort_unstable();
    Ok(idx)
}

/// Draw `n` distinct trajectories, deterministically for a given seed.
pub fn subsample(dataset: &Dataset, n: usize, seed: u64) -> Result<Dataset> {
    let idx = subsample_indices(dataset.len(), n, seed)?;
    Ok(Dataset {
        trajectories: idx.iter().map(|&i| dataset.trajectories[i].clone()).collect(),
        env_id: dataset.env_id.clone(),
        state_dim: dataset.state_dim,
        action_dim: dataset.action_dim,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetStats {
    pub n_trajectories: usize,
    pub n_transitions: usize,
    pub mean_horizon: f64,
    pub min_horizon: usize,
    pub max_horizon: usize,
    pub success_fraction: f64,
}

pub fn dataset_stats(dataset: &Dataset) -> Result<DatasetStats> {
    dataset.validate()?;
    let lens: Vec<usize> = dataset.trajectories.iter().map(Trajectory::len).collect();
    let total: usize = lens.iter().sum();
    let n = lens.len();
    let successes = dataset.trajectories.iter().filter(|t| t.success).count();
    Ok(DatasetStats {
        n_trajectories: n,
        n_transitions: total,
        mean_horizon: total as f64 / n as f64,
        min_horizon: *lens.iter().min().expect("validated nonempty"),
        max_horizon: *lens.iter().max().expect("validated nonempty"),
        success_fraction: successes as f64 / n as f64,
    })
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;

    /// Straight-line trajectory on a 1-D state with `len` transitions.
    pub(crate) fn line_trajectory(start: f64, len: usize, success: bool, seed: u64) -> Trajectory {
        let states: Vec<Vec<f64>> = (0..=len).map(|t| vec![start + t as f64, 0.5]).collect();
        let actions: Vec<Vec<f64>> = (0..len).map(|t| vec![t as f64 * 0.1]).collect();
        Trajectory::from_states_actions(states, actions, success, seed, BTreeMap::new()).unwrap()
    }

    fn small_dataset() -> Dataset {
        Dataset::new(
            vec![line_trajectory(0.0, 3, true, 1), line_trajectory(10.0, 5, false, 2)],
            "test",
            2,
            1,
        )
        .unwrap()
    }

    #[test]
    fn empty_dataset_is_rejected() {
        let err = Dataset::new(vec![], "test", 2, 1).unwrap_err();
        assert!(matches!(err, Error::Validation(_)));
    }

    #[test]
    fn mismatched_state_dim_names_offender() {
        let mut ds = small_dataset();
        ds.trajectories[1].transitions[0].state.push(1.0);
        let err = ds.validate().unwrap_err();
        assert_eq!(err.trajectory, Some(1));
        assert_eq!(err.step, Some(0));
    }

    #[test]
    fn broken_chaining_reports_step() {
        let mut ds = small_dataset();
        let traj = line_trajectory(0.0, 6, true, 3);
        ds.trajectories.push(traj);
        ds.trajectories[2].transitions[3].next_state[0] += 1e-12;
        let err = ds.validate().unwrap_err();
        assert_eq!((err.trajectory, err.step), (Some(2), Some(4)));
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(
            save_dataset(&ds, dir.path().join("x.jsonl")),
            Err(Error::Validation(_))
        ));
    }

    #[test]
    fn one_trajectory_file_has_two_lines_and_round_trips() {
        let traj = Trajectory::from_states_actions(
            vec![vec![0.1, 0.2], vec![0.3, 1.0 / 3.0], vec![-0.0, 1e-300]],
            vec![vec![0.2, 0.1], vec![std::f64::consts::PI, -2.5]],
            true,
            99,
            BTreeMap::from([("sigma_s".to_string(), 0.03), ("sigma_p".to_string(), 0.0)]),
        )
        .unwrap();
        let ds = Dataset::new(vec![traj], "pmobstacle-v1", 2, 2).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.jsonl");
        save_dataset(&ds, &path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert_eq!(text.lines().count(), 2);
        assert!(text.ends_with('\n') && !text.contains('\r'));
        let back = load_dataset(&path).unwrap();
        assert_eq!(back, ds);
    }

    #[test]
    fn truncated_last_line_is_a_parse_error() {
        let ds = small_dataset();
        let mut buf = Vec::new();
        write_dataset(&ds, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let cut = &text[..text.len() - 20];
        let err = read_dataset(cut.as_bytes()).unwrap_err();
        match err {
            Error::Parse { line, .. } => assert_eq!(line, 3),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn missing_records_are_a_parse_error() {
        let ds = small_dataset();
        let mut buf = Vec::new();
        write_dataset(&ds, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let first_two: String = text.lines().take(2).map(|l| format!("{l}\n")).collect();
        assert!(matches!(read_dataset(first_two.as_bytes()), Err(Error::Parse { .. })));
    }

    #[test]
    fn state_action_count_mismatch_is_a_validation_error() {
        let text = concat!(
            r#"{"format_version":1,"env_id":"e","state_dim":1,"action_dim":1,"n_trajectories":1}"#,
            "\n",
            r#"{"seed":0,"success":true,"metadata":{},"states":[[0.0],[1.0]],"actions":[[1.0],[1.0]]}"#,
            "\n"
        );
        let err = read_dataset(text.as_bytes()).unwrap_err();
        assert!(matches!(
            err,
            Error::Validation(ValidationError {
                trajectory: Some(0),
                ..
            })
        ));
    }

    #[test]
    fn stats_of_two_trajectories() {
        let s = dataset_stats(&small_dataset()).unwrap();
        assert_eq!(s.mean_horizon, 4.0);
        assert_eq!((s.min_horizon, s.max_horizon), (3, 5));
        assert_eq!(s.success_fraction, 0.5);
    }

    #[test]
    fn stats_of_lengths_one_to_ten() {
        let trajs: Vec<Trajectory> = (1..=10).map(|l| line_trajectory(0.0, l, true, l as u64)).collect();
        let ds = Dataset::new(trajs, "test", 2, 1).unwrap();
        let s = dataset_stats(&ds).unwrap();
        // brute force: (1 + 2 + ... + 10) / 10
        let expected = (1..=10).sum::<usize>() as f64 / 10.0;
        assert_eq!(s.mean_horizon, expected);
        assert_eq!(s.mean_horizon, 5.5);
        assert_eq!((s.min_horizon, s.max_horizon), (1, 10));
        assert_eq!(s.success_fraction, 1.0);
    }

    fn many(n: usize) -> Dataset {
        let trajs = (0..n).map(|i| line_trajectory(i as f64, 1, true, i as u64)).collect();
        Dataset::new(trajs, "test", 2, 1).unwrap()
    }

    #[test]
    fn subsample_full_is_a_permutation() {
        let ds = many(20);
        let sub = subsample(&ds, 20, 5).unwrap();
        let mut seeds: Vec<u64> = sub.trajectories.iter().map(|t| t.seed).collect();
        seeds.sort_unstable();
        assert_eq!(seeds, (0..20).collect::<Vec<u64>>());
    }

    #[test]
    fn subsample_single_is_deterministic() {
        let ds = many(50);
        let a = subsample(&ds, 1, 11).unwrap();
        let b = subsample(&ds, 1, 11).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn subsample_seeds_change_the_draw() {
        let pairs_differ = (0..10u64)
            .filter(|&k| subsample_indices(1000, 10, 2 * k).unwrap() != subsample_indices(1000, 10, 2 * k + 1).unwrap())
            .count();
        assert!(pairs_differ >= 1);
    }

    #[test]
    fn subsample_too_many_is_an_argument_error() {
        assert!(matches!(subsample(&many(3), 4, 0), Err(Error::Argument(_))));
    }

    #[test]
    fn subsample_has_no_duplicates() {
        for seed in 0..20 {
            let idx = subsample_indices(100, 37, seed).unwrap();
            assert!(idx.windows(2).all(|w| w[0] < w[1]));
        }
    }
}
