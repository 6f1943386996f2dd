//! Noise-injection sweeps: collect expert data under system and/or policy
//! noise, train behavioral cloning on it, and evaluate under a grid of
//! evaluation noise levels.

use std::collections::BTreeMap;
use std::fmt::{self, Write as _};
use std::fs;
use std::io::Write;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bc::{self, TrainConfig};
use crate::error::{Error, Result};
use crate::pmobstacle::{self, EnvConfig, ScriptedExpert};
use crate::rng;
use crate::stats;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NoiseKind {
    /// Vary system noise, no policy noise.
    System,
    /// Vary policy noise, no system noise.
    Policy,
    /// Vary policy noise on top of a fixed system noise.
    Combined,
}

impl fmt::Display for NoiseKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            NoiseKind::System => "system",
            NoiseKind::Policy => "policy",
            NoiseKind::Combined => "combined",
        })
    }
}

impl std::str::FromStr for NoiseKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "system" => Ok(NoiseKind::System),
            "policy" => Ok(NoiseKind::Policy),
            "combined" => Ok(NoiseKind::Combined),
            _ => Err(Error::argument(format!(
                "unknown sweep kind {s:?} (system, policy, combined)"
            ))),
        }
    }
}

const NOISE_GRID: [f64; 4] = [0.01, 0.02, 0.03, 0.04];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepSpec {
    pub env: EnvConfig,
    pub expert: ScriptedExpert,
    pub train: TrainConfig,
    pub dataset_sizes: Vec<usize>,
    pub train_sigma_s: Vec<f64>,
    pub train_sigma_p: Vec<f64>,
    /// System noise held fixed by the combined sweep.
    pub combined_sigma_s: f64,
    pub eval_sigma_s: Vec<f64>,
    pub repeats: usize,
    pub eval_episodes: usize,
    pub base_seed: u64,
    /// Train on successful expert episodes only.
    pub successes_only: bool,
}

impl Default for SweepSpec {
    fn default() -> Self {
        Self {
            env: EnvConfig::default(),
            expert: ScriptedExpert::default(),
            train: TrainConfig::default(),
            dataset_sizes: vec![1000, 10],
            train_sigma_s: NOISE_GRID.to_vec(),
            train_sigma_p: NOISE_GRID.to_vec(),
            combined_sigma_s: 0.03,
            eval_sigma_s: NOISE_GRID.to_vec(),
            repeats: 3,
            eval_episodes: 100,
            base_seed: 0,
            successes_only: true,
        }
    }
}

fn check_grid(name: &str, grid: &[f64]) -> Result<()> {
    if grid.is_empty() {
        return Err(Error::argument(format!("{name} grid is empty")));
    }
    if grid.iter().any(|&x| !(x >= 0.0 && x.is_finite())) {
        return Err(Error::argument(format!("{name} grid must be finite and nonnegative")));
    }
    Ok(())
}

impl SweepSpec {
    pub fn validate(&self, kind: NoiseKind) -> Result<()> {
        self.env.validate()?;
        self.expert.validate(&self.env)?;
        self.train.validate()?;
        if self.dataset_sizes.is_empty() || self.dataset_sizes.contains(&0) {
            return Err(Error::argument(
                "dataset sizes must be a nonempty list of positive counts",
            ));
        }
        match kind {
            NoiseKind::System => check_grid("train_sigma_s", &self.train_sigma_s)?,
            NoiseKind::Policy => check_grid("train_sigma_p", &self.train_sigma_p)?,
            NoiseKind::Combined => {
                check_grid("train_sigma_p", &self.train_sigma_p)?;
                check_grid("combined_sigma_s", &[self.combined_sigma_s])?;
            }
        }
        check_grid("eval_sigma_s", &self.eval_sigma_s)?;
        if self.repeats == 0 || self.eval_episodes == 0 {
            return Err(Error::argument("repeats and eval_episodes must be at least 1"));
        }
        Ok(())
    }

    /// Training cells `(size, sigma_s, sigma_p, repeat)` of a sweep, in grid order.
    pub fn cells(&self, kind: NoiseKind) -> Vec<Cell> {
        let noise: Vec<(f64, f64)> = match kind {
            NoiseKind::System => self.train_sigma_s.iter().map(|&s| (s, 0.0)).collect(),
            NoiseKind::Policy => self.train_sigma_p.iter().map(|&p| (0.0, p)).collect(),
            NoiseKind::Combined => self.train_sigma_p.iter().map(|&p| (self.combined_sigma_s, p)).collect(),
        };
        let mut cells = Vec::new();
        for &size in &self.dataset_sizes {
            for &(sigma_s, sigma_p) in &noise {
                for repeat in 0..self.repeats {
                    cells.push(Cell {
                        dataset_size: size,
                        sigma_s,
                        sigma_p,
                        repeat,
                    });
                }
            }
        }
        cells
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Cell {
    pub dataset_size: usize,
    pub sigma_s: f64,
    pub sigma_p: f64,
    pub repeat: usize,
}

impl Cell {
    /// Depends only on the base seed and this cell's coordinates.
    pub fn seed(&self, base_seed: u64) -> u64 {
        rng::derive_seed(
            base_seed,
            &[
                self.dataset_size as u64,
                rng::float_label(self.sigma_s),
                rng::float_label(self.sigma_p),
                self.repeat as u64,
            ],
        )
    }
}

/// Seeds used by one cell's collect / train / evaluate stages.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CellSeeds {
    pub collect: u64,
    pub train: u64,
}

impl CellSeeds {
    pub fn new(cell: &Cell, base_seed: u64) -> Self {
        let s = cell.seed(base_seed);
        Self {
            collect: rng::derive_seed(s, &[rng::tag(b"collect")]),
            train: rng::derive_seed(s, &[rng::tag(b"train")]),
        }
    }
}

/// Evaluation episodes depend on the evaluation noise and repeat but not on
/// the training cell, so every policy in a repeat faces the same start states
/// and noise draws.
pub fn eval_seed(base_seed: u64, eval_sigma_s: f64, repeat: usize) -> u64 {
    rng::derive_seed(
        base_seed,
        &[rng::tag(b"eval"), rng::float_label(eval_sigma_s), repeat as u64],
    )
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub dataset_size: usize,
    pub train_sigma_s: f64,
    pub train_sigma_p: f64,
    pub eval_sigma_s: f64,
    pub repeat: usize,
    /// Percent; `None` when the cell failed.
    pub success_rate: Option<f64>,
    pub n_eval_episodes: usize,
    /// Empty for completed cells, otherwise why the cell is missing.
    pub status: String,
}

impl SweepRow {
    fn key(&self) -> (usize, u64, u64, u64, usize) {
        (
            self.dataset_size,
            ordered(self.train_sigma_s),
            ordered(self.train_sigma_p),
            ordered(self.eval_sigma_s),
            self.repeat,
        )
    }
}

/// Order-preserving integer image of a nonnegative float.
fn ordered(x: f64) -> u64 {
    rng::float_label(x)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub dataset_size: usize,
    pub train_sigma_s: f64,
    pub train_sigma_p: f64,
    pub eval_sigma_s: f64,
    /// Completed repeats contributing to the statistics.
    pub n_repeats: usize,
    pub mean: f64,
    /// Sample standard deviation over repeats divided by `sqrt(n_repeats)`.
    pub std_error: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepResult {
    pub kind: NoiseKind,
    /// Sorted by `(size, sigma_s, sigma_p, eval sigma_s, repeat)`.
    pub rows: Vec<SweepRow>,
}

impl SweepResult {
    pub fn new(kind: NoiseKind, mut rows: Vec<SweepRow>) -> Self {
        rows.sort_by_key(SweepRow::key);
        Self { kind, rows }
    }

    /// Mean and standard error over repeats for each cell, from the raw rows.
    pub fn aggregates(&self) -> Vec<Aggregate> {
        let mut groups = BTreeMap::<_, (&SweepRow, Vec<f64>)>::new();
        for r in &self.rows {
            let k = r.key();
            let entry = groups.entry((k.0, k.1, k.2, k.3)).or_insert((r, Vec::new()));
            if let Some(v) = r.success_rate {
                entry.1.push(v);
            }
        }
        groups
            .into_values()
            .map(|(r, values)| Aggregate {
                dataset_size: r.dataset_size,
                train_sigma_s: r.train_sigma_s,
                train_sigma_p: r.train_sigma_p,
                eval_sigma_s: r.eval_sigma_s,
                n_repeats: values.len(),
                mean: stats::mean(&values),
                std_error: stats::std_error(&values),
            })
            .collect()
    }

    /// Mean success of a training cell averaged over the evaluation grid and
    /// repeats. `None` if the cell has no completed rows.
    pub fn train_cell_mean(&self, dataset_size: usize, sigma_s: f64, sigma_p: f64) -> Option<f64> {
        let values: Vec<f64> = self
            .aggregates()
            .into_iter()
            .filter(|a| a.dataset_size == dataset_size && a.train_sigma_s == sigma_s && a.train_sigma_p == sigma_p)
            .map(|a| a.mean)
            .filter(|m| m.is_finite())
            .collect();
        (!values.is_empty()).then(|| stats::mean(&values))
    }

    /// Cell mean at one evaluation noise level.
    pub fn cell_mean(&self, dataset_size: usize, sigma_s: f64, sigma_p: f64, eval_sigma_s: f64) -> Option<f64> {
        self.aggregates()
            .into_iter()
            .find(|a| {
                a.dataset_size == dataset_size
                    && a.train_sigma_s == sigma_s
                    && a.train_sigma_p == sigma_p
                    && a.eval_sigma_s == eval_sigma_s
            })
            .map(|a| a.mean)
            .filter(|m| m.is_finite())
    }

    pub fn missing(&self) -> usize {
        self.rows.iter().filter(|r| r.success_rate.is_none()).count()
    }
}

fn train_set(spec: &SweepSpec, cell: &Cell, seeds: CellSeeds) -> Result<bc::MlpPolicy> {
    let env = spec.env.with_sigma_s(cell.sigma_s);
    let expert = spec.expert.with_sigma_p(cell.sigma_p);
    let data = pmobstacle::collect_dataset(&env, &expert, cell.dataset_size, seeds.collect)?;
    let data = if spec.successes_only {
        data.successful_only()
            .ok_or_else(|| Error::argument("no successful expert episodes to train on"))?
    } else {
        data
    };
    let config = TrainConfig {
        seed: seeds.train,
        ..spec.train.clone()
    };
    bc::train(&data, &config)
}

/// Collect, train and evaluate one cell, producing a row per evaluation noise
/// level. Failures become rows with no success rate and a reason.
pub fn run_cell(spec: &SweepSpec, cell: &Cell) -> Vec<SweepRow> {
    let seeds = CellSeeds::new(cell, spec.base_seed);
    let row = |eval_sigma_s: f64, success_rate: Option<f64>, status: String| SweepRow {
        dataset_size: cell.dataset_size,
        train_sigma_s: cell.sigma_s,
        train_sigma_p: cell.sigma_p,
        eval_sigma_s,
        repeat: cell.repeat,
        success_rate,
        n_eval_episodes: spec.eval_episodes,
        status,
    };
    let policy = match train_set(spec, cell, seeds) {
        Ok(p) => p,
        Err(e) => {
            let reason = format!("training failed: {e}");
            return spec
                .eval_sigma_s
                .iter()
                .map(|&s| row(s, None, reason.clone()))
                .collect();
        }
    };
    spec.eval_sigma_s
        .iter()
        .map(|&s| {
            match pmobstacle::evaluate(
                &policy,
                &spec.env,
                s,
                spec.eval_episodes,
                eval_seed(spec.base_seed, s, cell.repeat),
            ) {
                Ok(r) => row(s, Some(r.success_rate), String::new()),
                Err(e) => row(s, None, format!("evaluation failed: {e}")),
            }
        })
        .collect()
}

/// Run every cell of a sweep. Cells run in parallel; the result is sorted so
/// it does not depend on scheduling.
pub fn run_sweep(spec: &SweepSpec, kind: NoiseKind) -> Result<SweepResult> {
    spec.validate(kind)?;
    let rows: Vec<SweepRow> = spec
        .cells(kind)
        .par_iter()
        .flat_map_iter(|cell| run_cell(spec, cell))
        .collect();
    Ok(SweepResult::new(kind, rows))
}

pub fn run_system_noise_sweep(spec: &SweepSpec) -> Result<SweepResult> {
    run_sweep(spec, NoiseKind::System)
}

pub fn run_policy_noise_sweep(spec: &SweepSpec) -> Result<SweepResult> {
    run_sweep(spec, NoiseKind::Policy)
}

pub fn run_combined_noise_sweep(spec: &SweepSpec) -> Result<SweepResult> {
    run_sweep(spec, NoiseKind::Combined)
}

pub const RAW_HEADER: [&str; 8] = [
    "dataset_size",
    "train_sigma_s",
    "train_sigma_p",
    "eval_sigma_s",
    "repeat",
    "success_rate",
    "n_eval_episodes",
    "status",
];

pub const AGG_HEADER: [&str; 7] = [
    "dataset_size",
    "train_sigma_s",
    "train_sigma_p",
    "eval_sigma_s",
    "n_repeats",
    "mean",
    "std_error",
];

fn csv_error(path: &Path, e: csv::Error) -> Error {
    let line = e.position().map_or(0, |p| p.line() as usize);
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        other => Error::Parse {
            line,
            message: format!("{}: {other:?}", path.display()),
        },
    }
}

fn fmt_opt(x: f64) -> String {
    if x.is_finite() {
        x.to_string()
    } else {
        String::new()
    }
}

fn write_csv(path: &Path, provenance: Option<&str>, header: &[&str], records: Vec<Vec<String>>) -> Result<()> {
    let mut file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    if let Some(p) = provenance {
        writeln!(file, "# {p}").map_err(|e| Error::io(path, e))?;
    }
    let mut w = csv::Writer::from_writer(file);
    w.write_record(header).map_err(|e| csv_error(path, e))?;
    for r in records {
        w.write_record(&r).map_err(|e| csv_error(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Write `raw.csv`, `agg.csv` and `summary.md` into `dir`. `provenance`, if
/// given, becomes a leading `#` comment line of each file.
pub fn export_results(result: &SweepResult, dir: impl AsRef<Path>, provenance: Option<&str>) -> Result<()> {
    if result.rows.is_empty() {
        return Err(Error::argument("cannot export an empty sweep result"));
    }
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let raw = result
        .rows
        .iter()
        .map(|r| {
            vec![
                r.dataset_size.to_string(),
                r.train_sigma_s.to_string(),
                r.train_sigma_p.to_string(),
                r.eval_sigma_s.to_string(),
                r.repeat.to_string(),
                r.success_rate.map(|v| v.to_string()).unwrap_or_default(),
                r.n_eval_episodes.to_string(),
                r.status.clone(),
            ]
        })
        .collect();
    write_csv(&dir.join("raw.csv"), provenance, &RAW_HEADER, raw)?;
    let agg = result
        .aggregates()
        .iter()
        .map(|a| {
            vec![
                a.dataset_size.to_string(),
                a.train_sigma_s.to_string(),
                a.train_sigma_p.to_string(),
                a.eval_sigma_s.to_string(),
                a.n_repeats.to_string(),
                fmt_opt(a.mean),
                fmt_opt(a.std_error),
            ]
        })
        .collect();
    write_csv(&dir.join("agg.csv"), provenance, &AGG_HEADER, agg)?;
    let md_path = dir.join("summary.md");
    let mut md = String::new();
    if let Some(p) = provenance {
        let _ = writeln!(md, "<!-- {p} -->");
    }
    md.push_str(&summary_markdown(result));
    fs::write(&md_path, md).map_err(|e| Error::io(&md_path, e))
}

fn reader(path: &Path) -> Result<csv::Reader<fs::File>> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    Ok(csv::ReaderBuilder::new().comment(Some(b'#')).from_reader(file))
}

fn parse_field<T: std::str::FromStr>(path: &Path, line: usize, name: &str, s: &str) -> Result<T> {
    s.parse().map_err(|_| Error::Parse {
        line,
        message: format!("{}: bad {name} value {s:?}", path.display()),
    })
}

fn check_header(path: &Path, r: &mut csv::Reader<fs::File>, expected: &[&str]) -> Result<()> {
    let header = r.headers().map_err(|e| csv_error(path, e))?;
    if header.iter().ne(expected.iter().copied()) {
        return Err(Error::Parse {
            line: 1,
            message: format!("{}: unexpected header {:?}", path.display(), header),
        });
    }
    Ok(())
}

/// Read back the raw rows written by [`export_results`].
pub fn import_raw(path: impl AsRef<Path>, kind: NoiseKind) -> Result<SweepResult> {
    let path = path.as_ref();
    let mut r = reader(path)?;
    check_header(path, &mut r, &RAW_HEADER)?;
    let mut rows = Vec::new();
    for rec in r.records() {
        let rec = rec.map_err(|e| csv_error(path, e))?;
        let line = rec.position().map_or(0, |p| p.line() as usize);
        let f = |i: usize| rec.get(i).unwrap_or("");
        rows.push(SweepRow {
            dataset_size: parse_field(path, line, "dataset_size", f(0))?,
            train_sigma_s: parse_field(path, line, "train_sigma_s", f(1))?,
            train_sigma_p: parse_field(path, line, "train_sigma_p", f(2))?,
            eval_sigma_s: parse_field(path, line, "eval_sigma_s", f(3))?,
            repeat: parse_field(path, line, "repeat", f(4))?,
            success_rate: if f(5).is_empty() {
                None
            } else {
                Some(parse_field(path, line, "success_rate", f(5))?)
            },
            n_eval_episodes: parse_field(path, line, "n_eval_episodes", f(6))?,
            status: f(7).to_string(),
        });
    }
    Ok(SweepResult::new(kind, rows))
}

/// Read back the aggregate table written by [`export_results`].
pub fn import_aggregates(path: impl AsRef<Path>) -> Result<Vec<Aggregate>> {
    let path = path.as_ref();
    let mut r = reader(path)?;
    check_header(path, &mut r, &AGG_HEADER)?;
    let mut out = Vec::new();
    for rec in r.records() {
        let rec = rec.map_err(|e| csv_error(path, e))?;
        let line = rec.position().map_or(0, |p| p.line() as usize);
        let f = |i: usize| rec.get(i).unwrap_or("");
        let opt = |i: usize, name: &str| -> Result<f64> {
            if f(i).is_empty() {
                Ok(f64::NAN)
            } else {
                parse_field(path, line, name, f(i))
            }
        };
        out.push(Aggregate {
            dataset_size: parse_field(path, line, "dataset_size", f(0))?,
            train_sigma_s: parse_field(path, line, "train_sigma_s", f(1))?,
            train_sigma_p: parse_field(path, line, "train_sigma_p", f(2))?,
            eval_sigma_s: parse_field(path, line, "eval_sigma_s", f(3))?,
            n_repeats: parse_field(path, line, "n_repeats", f(4))?,
            mean: opt(5, "mean")?,
            std_error: opt(6, "std_error")?,
        });
    }
    Ok(out)
}

/// Markdown tables, one per dataset size: training noise down, evaluation
/// noise across, entries `mean(stderr)`.
pub fn summary_markdown(result: &SweepResult) -> String {
    let aggs = result.aggregates();
    let mut sizes: Vec<usize> = aggs.iter().map(|a| a.dataset_size).collect();
    sizes.dedup();
    sizes.sort_unstable_by(|a, b| b.cmp(a));
    sizes.dedup();
    let mut evals: Vec<f64> = aggs.iter().map(|a| a.eval_sigma_s).collect();
    evals.sort_by(f64::total_cmp);
    evals.dedup();
    let train_label = match result.kind {
        NoiseKind::System => "train sigma_s",
        NoiseKind::Policy | NoiseKind::Combined => "train sigma_p",
    };
    let mut out = String::new();
    let _ = writeln!(out, "# {} noise sweep\n", result.kind);
    if result.kind == NoiseKind::Combined {
        if let Some(a) = aggs.first() {
            let _ = writeln!(out, "System noise fixed at sigma_s = {}.\n", a.train_sigma_s);
        }
    }
    for size in sizes {
        let _ = writeln!(out, "## {size} episodes\n");
        let _ = write!(out, "| {train_label} |");
        for e in &evals {
            let _ = write!(out, " eval {e} |");
        }
        out.push('\n');
        out.push_str("|---|");
        out.push_str(&"---|".repeat(evals.len()));
        out.push('\n');
        let mut trains: Vec<(f64, f64)> = aggs
            .iter()
            .filter(|a| a.dataset_size == size)
            .map(|a| (a.train_sigma_s, a.train_sigma_p))
            .collect();
        trains.dedup();
        for (ts, tp) in trains {
            let label = if result.kind == NoiseKind::System { ts } else { tp };
            let _ = write!(out, "| {label} |");
            for e in &evals {
                let cell = aggs.iter().find(|a| {
                    a.dataset_size == size && a.train_sigma_s == ts && a.train_sigma_p == tp && a.eval_sigma_s == *e
                });
                match cell {
                    Some(a) if a.n_repeats > 0 => {
                        let _ = write!(out, " {:.1}({:.1}) |", a.mean, a.std_error);
                    }
                    _ => out.push_str(" n/a |"),
                }
            }
            out.push('\n');
        }
        out.push('\n');
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(size: usize, ts: f64, e: f64, repeat: usize, v: Option<f64>) -> SweepRow {
        SweepRow {
            dataset_size: size,
            train_sigma_s: ts,
            train_sigma_p: 0.0,
            eval_sigma_s: e,
            repeat,
            success_rate: v,
            n_eval_episodes: 100,
            status: if v.is_some() {
                String::new()
            } else {
                "training failed: x".into()
            },
        }
    }

    #[test]
    fn aggregate_of_three_repeats() {
        let r = SweepResult::new(
            NoiseKind::System,
            vec![
                row(10, 0.01, 0.02, 2, Some(100.0)),
                row(10, 0.01, 0.02, 0, Some(90.0)),
                row(10, 0.01, 0.02, 1, Some(95.0)),
            ],
        );
        let a = r.aggregates();
        assert_eq!(a.len(), 1);
        assert_eq!(a[0].mean, 95.0);
        assert!((a[0].std_error - 2.886751).abs() < 1e-6);
        assert_eq!(r.rows[0].repeat, 0);
    }

    #[test]
    fn empty_export_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let r = SweepResult::new(NoiseKind::System, vec![]);
        assert!(matches!(export_results(&r, dir.path(), None), Err(Error::Argument(_))));
    }

    #[test]
    fn export_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let r = SweepResult::new(
            NoiseKind::System,
            vec![
                row(10, 0.01, 0.01, 0, Some(1.0 / 3.0)),
                row(10, 0.01, 0.01, 1, Some(97.0)),
                row(10, 0.04, 0.01, 0, None),
                row(1000, 0.04, 0.03, 0, Some(88.0)),
            ],
        );
        export_results(&r, dir.path(), Some("ilcurate test seed=1")).unwrap();
        let back = import_raw(dir.path().join("raw.csv"), NoiseKind::System).unwrap();
        assert_eq!(back, r);
        let aggs = import_aggregates(dir.path().join("agg.csv")).unwrap();
        let recomputed = back.aggregates();
        assert_eq!(aggs.len(), recomputed.len());
        for (a, b) in aggs.iter().zip(&recomputed) {
            assert!(a.mean.to_bits() == b.mean.to_bits() || (a.mean.is_nan() && b.mean.is_nan()));
            assert!(a.std_error.to_bits() == b.std_error.to_bits() || (a.std_error.is_nan() && b.std_error.is_nan()));
        }
        let md = fs::read_to_string(dir.path().join("summary.md")).unwrap();
        assert!(md.contains("## 1000 episodes"));
        assert!(md.contains("n/a"));
    }

    #[test]
    fn single_row_export_has_one_line_each() {
        let dir = tempfile::tempdir().unwrap();
        let r = SweepResult::new(NoiseKind::System, vec![row(10, 0.01, 0.01, 0, Some(50.0))]);
        export_results(&r, dir.path(), None).unwrap();
        assert_eq!(
            fs::read_to_string(dir.path().join("raw.csv")).unwrap().lines().count(),
            2
        );
        assert_eq!(
            fs::read_to_string(dir.path().join("agg.csv")).unwrap().lines().count(),
            2
        );
    }

    #[test]
    fn cell_seeds_ignore_grid_neighbours() {
        let c = Cell {
            dataset_size: 10,
            sigma_s: 0.03,
            sigma_p: 0.0,
            repeat: 1,
        };
        let neg = Cell { sigma_p: -0.0, ..c };
        assert_eq!(c.seed(5), neg.seed(5));
        assert_ne!(c.seed(5), Cell { repeat: 2, ..c }.seed(5));
    }

    fn tiny_spec() -> SweepSpec {
        SweepSpec {
            train: TrainConfig {
                hidden_sizes: vec![8],
                epochs: 2,
                ..TrainConfig::default()
            },
            dataset_sizes: vec![3],
            train_sigma_s: vec![0.02],
            train_sigma_p: vec![0.0],
            eval_sigma_s: vec![0.01, 0.02],
            repeats: 1,
            eval_episodes: 5,
            base_seed: 11,
            ..SweepSpec::default()
        }
    }

    #[test]
    fn single_cell_matches_manual_pipeline() {
        let spec = tiny_spec();
        let result = run_system_noise_sweep(&spec).unwrap();
        assert_eq!(result.rows.len(), 2);
        let cell = spec.cells(NoiseKind::System)[0];
        let seeds = CellSeeds::new(&cell, spec.base_seed);
        let data = pmobstacle::collect_dataset(&spec.env.with_sigma_s(0.02), &spec.expert, 3, seeds.collect)
            .unwrap()
            .successful_only()
            .unwrap();
        let policy = bc::train(
            &data,
            &TrainConfig {
                seed: seeds.train,
                ..spec.train.clone()
            },
        )
        .unwrap();
        for r in &result.rows {
            let e =
                pmobstacle::evaluate(&policy, &spec.env, r.eval_sigma_s, 5, eval_seed(11, r.eval_sigma_s, 0)).unwrap();
            assert_eq!(r.success_rate, Some(e.success_rate));
        }
    }

    #[test]
    fn combined_with_zero_policy_noise_equals_system_cell() {
        let spec = SweepSpec {
            combined_sigma_s: 0.02,
            ..tiny_spec()
        };
        let sys = run_system_noise_sweep(&spec).unwrap();
        let comb = run_combined_noise_sweep(&spec).unwrap();
        assert_eq!(sys.rows, comb.rows);
    }

    #[test]
    fn failed_cells_are_recorded() {
        // An expert that never reaches the goal leaves nothing to train on.
        let mut spec = tiny_spec();
        spec.env.max_steps = 1;
        let r = run_system_noise_sweep(&spec).unwrap();
        assert_eq!(r.missing(), 2);
        assert!(r.rows[0].status.contains("no successful"));
    }
}
