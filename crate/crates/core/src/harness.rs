//! Experiment runners: configuration, seeded jobs, and report files.
//!
//! Every runner is a pure function of its configuration. Seeds run as
//! independent jobs on a rayon pool (capped by `SCBM_THREADS`) and their rows
//! are merged in sweep-point, then seed order.

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Result, ScbmError};
use crate::estimate::{
    apply_bottleneck, effect_mae, estimate_all, fit_edge, identifiability_score, model_identifiability, DHat,
    EstimatorConfig, Mode, NetworkSpec, ScorerSpec,
};
use crate::graph::{sample_er_dag, Dag, EdgeId};
use crate::linalg::{numerical_rank, singular_values, Matrix};
use crate::mlp::orthogonalize;
use crate::rng::{self, streams};
use crate::synth::{
    mechanism_oracle, sample_dataset, sample_linear_scbm, sample_nonlinear_scbm, true_bottleneck, ArchSpec, Dataset,
    NoiseSpec, Scbm,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Experiment {
    Identifiability,
    Misspecification,
    Transfer,
    RankCollapse,
}

impl Experiment {
    pub fn name(self) -> &'static str {
        match self {
            Experiment::Identifiability => "identifiability",
            Experiment::Misspecification => "misspecification",
            Experiment::Transfer => "transfer",
            Experiment::RankCollapse => "rank_collapse",
        }
    }

    fn default_sweep(self) -> &'static str {
        match self {
            Experiment::Identifiability => "n",
            Experiment::Misspecification => "d_hat",
            Experiment::Transfer => "n_joint",
            Experiment::RankCollapse => "depth",
        }
    }

    fn applicable(self) -> &'static [&'static str] {
        match self {
            Experiment::Identifiability => &["num_nodes", "d_x", "d_z", "d_hat", "n"],
            Experiment::Misspecification => &["d_x", "d_z", "d_hat", "n"],
            Experiment::Transfer => &["d_x", "d_z", "n_joint"],
            Experiment::RankCollapse => &["depth"],
        }
    }
}

/// A parameter given either as one value or as a sweep list.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Sweep {
    One(usize),
    Many(Vec<usize>),
}

impl Sweep {
    pub fn values(&self) -> Vec<usize> {
        match self {
            Sweep::One(v) => vec![*v],
            Sweep::Many(v) => v.clone(),
        }
    }

    pub fn is_swept(&self) -> bool {
        matches!(self, Sweep::Many(_))
    }
}

fn default_experiment() -> Experiment {
    Experiment::Identifiability
}
fn default_mode() -> Mode {
    Mode::Linear
}
fn default_edge_prob() -> f64 {
    0.7
}
fn default_seeds() -> Vec<u64> {
    (0..10).collect()
}
fn one() -> f64 {
    1.0
}
fn default_gain() -> f64 {
    2.0
}
fn default_n_bottleneck() -> usize {
    20_000
}
fn default_sizes() -> Vec<usize> {
    vec![10, 50, 100]
}
fn default_rank_tol() -> f64 {
    1e-8
}
fn default_eval_rows() -> usize {
    1000
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default = "default_experiment")]
    pub experiment: Experiment,
    #[serde(default = "default_mode")]
    pub mode: Mode,
    #[serde(default)]
    pub num_nodes: Option<Sweep>,
    #[serde(default)]
    pub d_x: Option<Sweep>,
    #[serde(default)]
    pub d_z: Option<Sweep>,
    /// Assumed bottleneck dimension; defaults to `d_z`.
    #[serde(default)]
    pub d_hat: Option<Sweep>,
    #[serde(default)]
    pub n: Option<Sweep>,
    /// Joint sample sizes of the transfer experiment.
    #[serde(default)]
    pub n_joint: Option<Sweep>,
    /// Product depths of the rank-collapse experiment.
    #[serde(default)]
    pub depth: Option<Sweep>,
    #[serde(default = "default_edge_prob")]
    pub edge_prob: f64,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    #[serde(default)]
    pub noise: NoiseSpec,
    /// Multiplier on the noise of every non-root node.
    #[serde(default = "one")]
    pub noise_scale: f64,
    /// Weight gain of nonlinear ground-truth networks.
    #[serde(default = "default_gain")]
    pub gain: f64,
    /// Environment sample size used to fit the transfer bottleneck.
    #[serde(default = "default_n_bottleneck")]
    pub n_bottleneck: usize,
    /// Matrix sizes of the rank-collapse table.
    #[serde(default = "default_sizes")]
    pub sizes: Vec<usize>,
    #[serde(default = "default_rank_tol")]
    pub rank_tol: f64,
    /// Held-out rows for transfer effect errors.
    #[serde(default = "default_eval_rows")]
    pub eval_rows: usize,
    /// Rows exported per bottleneck cloud.
    #[serde(default = "default_eval_rows")]
    pub cloud_rows: usize,
    #[serde(default)]
    pub paper_scale: bool,
    #[serde(default)]
    pub network: Option<NetworkSpec>,
    #[serde(default)]
    pub scorer: Option<ScorerSpec>,
    #[serde(default)]
    pub output_dir: Option<PathBuf>,
}

impl ExperimentConfig {
    pub fn new(experiment: Experiment, mode: Mode) -> Self {
        ExperimentConfig {
            experiment,
            mode,
            num_nodes: None,
            d_x: None,
            d_z: None,
            d_hat: None,
            n: None,
            n_joint: None,
            depth: None,
            edge_prob: default_edge_prob(),
            seeds: default_seeds(),
            noise: NoiseSpec::default(),
            noise_scale: 1.0,
            gain: default_gain(),
            n_bottleneck: default_n_bottleneck(),
            sizes: default_sizes(),
            rank_tol: default_rank_tol(),
            eval_rows: default_eval_rows(),
            cloud_rows: default_eval_rows(),
            paper_scale: false,
            network: None,
            scorer: None,
            output_dir: None,
        }
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| ScbmError::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| ScbmError::io(path, e))?;
        Self::from_json(&text).map_err(|e| e.context(format!("config {}", path.display())))
    }

    /// SHA-256 of the canonical JSON serialization, without the output
    /// directory.
    pub fn hash(&self) -> String {
        let mut cfg = self.clone();
        cfg.output_dir = None;
        let bytes = serde_json::to_vec(&cfg).expect("config serializes");
        Sha256::digest(&bytes).iter().map(|b| format!("{b:02x}")).collect()
    }

    fn field(&self, name: &str) -> Option<&Sweep> {
        match name {
            "num_nodes" => self.num_nodes.as_ref(),
            "d_x" => self.d_x.as_ref(),
            "d_z" => self.d_z.as_ref(),
            "d_hat" => self.d_hat.as_ref(),
            "n" => self.n.as_ref(),
            "n_joint" => self.n_joint.as_ref(),
            "depth" => self.depth.as_ref(),
            _ => None,
        }
    }

    /// Estimator settings, with the full-size network presets under
    /// `paper_scale` unless a network is given explicitly.
    pub fn estimator(&self) -> EstimatorConfig {
        let mut cfg = EstimatorConfig::new(self.mode);
        cfg.network = match (&self.network, self.paper_scale, self.experiment) {
            (Some(net), _, _) => net.clone(),
            (None, true, Experiment::Transfer) => NetworkSpec::paper_transfer(),
            (None, true, _) => NetworkSpec::paper_identifiability(),
            (None, false, _) => NetworkSpec::default(),
        };
        if let Some(s) = &self.scorer {
            cfg.scorer = s.clone();
        }
        cfg
    }

    fn default_for(&self, name: &str, d_x: usize, d_z: usize) -> Sweep {
        let linear = self.mode == Mode::Linear;
        let e = self.experiment;
        match (name, e) {
            ("num_nodes", _) => Sweep::One(10),
            ("d_x", Experiment::Misspecification) => Sweep::One(if linear { 50 } else { 100 }),
            ("d_x", Experiment::Transfer) => Sweep::One(if linear { 50 } else { 500 }),
            ("d_x", _) => Sweep::One(5),
            ("d_z", Experiment::Misspecification) => Sweep::One(10),
            ("d_z", _) => Sweep::One(2),
            ("d_hat", Experiment::Misspecification) => Sweep::Many(misspec_grid(d_x, d_z)),
            ("d_hat", _) => Sweep::One(d_z),
            ("n", _) => Sweep::One(if linear { 30_000 } else { 50_000 }),
            ("n_joint", _) => Sweep::Many(vec![50, 100, 300, 1000, 5000]),
            ("depth", _) => Sweep::Many((1..=6).collect()),
            _ => unreachable!("unknown parameter {name}"),
        }
    }

    /// Validates the configuration and expands it into sweep points.
    pub fn plan(&self) -> Result<Plan> {
        let e = self.experiment;
        let names = ["num_nodes", "d_x", "d_z", "d_hat", "n", "n_joint", "depth"];
        for name in names {
            if self.field(name).is_some() && !e.applicable().contains(&name) {
                return Err(ScbmError::Config(format!(
                    "{name} does not apply to the {} experiment",
                    e.name()
                )));
            }
            if let Some(Sweep::Many(v)) = self.field(name) {
                if v.is_empty() {
                    return Err(ScbmError::Config(format!("sweep list for {name} is empty")));
                }
            }
        }
        let given: Vec<&str> = names
            .iter()
            .copied()
            .filter(|n| self.field(n).is_some_and(Sweep::is_swept))
            .collect();
        if given.len() > 1 {
            return Err(ScbmError::Config(format!(
                "at most one parameter may be swept, got {}",
                given.join(", ")
            )));
        }
        let scalar = |name: &str, fallback: Sweep| -> Result<usize> {
            match self.field(name).cloned().unwrap_or(fallback) {
                Sweep::One(v) => Ok(v),
                Sweep::Many(v) if v.len() == 1 || given.first() == Some(&name) => Ok(v[0]),
                Sweep::Many(_) => Err(ScbmError::Config(format!(
                    "{name} has a default sweep; set a single value to sweep another parameter"
                ))),
            }
        };
        let d_x = scalar("d_x", self.default_for("d_x", 0, 0))?;
        let d_z = scalar("d_z", self.default_for("d_z", d_x, 0))?;
        let sweep_param = given.first().copied().unwrap_or(e.default_sweep());
        let mut base = Point {
            num_nodes: if e == Experiment::Misspecification {
                2
            } else if e == Experiment::Transfer {
                3
            } else {
                0
            },
            d_x,
            d_z,
            ..Point::default()
        };
        for name in e.applicable() {
            let fallback = self.default_for(name, d_x, d_z);
            if *name == sweep_param {
                continue;
            }
            base.set(name, scalar(name, fallback)?);
        }
        let values = self
            .field(sweep_param)
            .cloned()
            .unwrap_or_else(|| self.default_for(sweep_param, d_x, d_z))
            .values();
        let points: Vec<Point> = values
            .iter()
            .map(|&v| {
                let mut p = base;
                p.set(sweep_param, v);
                p
            })
            .collect();
        let plan = Plan {
            sweep_param: sweep_param.to_string(),
            points,
        };
        self.validate(&plan)?;
        Ok(plan)
    }

    fn validate(&self, plan: &Plan) -> Result<()> {
        let bad = |msg: String| Err(ScbmError::Config(msg));
        if self.seeds.is_empty() {
            return bad("seeds must not be empty".into());
        }
        let mut seen = self.seeds.clone();
        seen.sort_unstable();
        seen.dedup();
        if seen.len() != self.seeds.len() {
            return bad("seeds must be distinct".into());
        }
        if !(0.0..=1.0).contains(&self.edge_prob) {
            return bad(format!("edge_prob must lie in [0, 1], got {}", self.edge_prob));
        }
        if !(self.noise_scale >= 0.0 && self.noise_scale.is_finite()) {
            return bad(format!(
                "noise_scale must be a finite nonnegative number, got {}",
                self.noise_scale
            ));
        }
        if !(self.gain > 0.0 && self.gain.is_finite()) {
            return bad(format!("gain must be positive, got {}", self.gain));
        }
        if !(self.rank_tol > 0.0 && self.rank_tol < 1.0) {
            return bad(format!("rank_tol must lie in (0, 1), got {}", self.rank_tol));
        }
        if self.eval_rows == 0 {
            return bad("eval_rows must be positive".into());
        }
        self.estimator().validate()?;
        for p in &plan.points {
            match self.experiment {
                Experiment::RankCollapse => {
                    if p.depth == 0 {
                        return bad("depth must be at least 1".into());
                    }
                    if self.sizes.is_empty() || self.sizes.contains(&0) {
                        return bad("sizes must be a non-empty list of positive sizes".into());
                    }
                }
                _ => {
                    if p.d_x == 0 || p.d_z == 0 || p.d_z > p.d_x {
                        return bad(format!("need 1 <= d_z <= d_x, got d_z = {}, d_x = {}", p.d_z, p.d_x));
                    }
                    if self.experiment != Experiment::Transfer && (p.d_hat == 0 || p.d_hat > p.d_x) {
                        return bad(format!("need 1 <= d_hat <= d_x, got {}", p.d_hat));
                    }
                    if self.experiment == Experiment::Identifiability && p.num_nodes == 0 {
                        return bad("num_nodes must be positive".into());
                    }
                    if self.experiment == Experiment::Transfer && (p.n_joint < 2 || self.n_bottleneck < 10) {
                        return bad("n_joint must be at least 2 and n_bottleneck at least 10".into());
                    }
                    if self.experiment != Experiment::Transfer && p.n < 10 {
                        return bad(format!("n must be at least 10, got {}", p.n));
                    }
                }
            }
        }
        Ok(())
    }
}

/// `1..=d_z+2`, then a few multiples of `d_z`, then `d_x`.
fn misspec_grid(d_x: usize, d_z: usize) -> Vec<usize> {
    let mut grid: Vec<usize> = (1..=(d_z + 2).min(d_x)).collect();
    grid.extend([2 * d_z, 3 * d_z, 5 * d_z, d_x].into_iter().filter(|&v| v <= d_x));
    grid.sort_unstable();
    grid.dedup();
    grid
}

/// One fully specified sweep point; fields an experiment ignores are zero.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct Point {
    pub num_nodes: usize,
    pub d_x: usize,
    pub d_z: usize,
    pub d_hat: usize,
    pub n: usize,
    pub n_joint: usize,
    pub depth: usize,
}

impl Point {
    fn set(&mut self, name: &str, v: usize) {
        match name {
            "num_nodes" => self.num_nodes = v,
            "d_x" => self.d_x = v,
            "d_z" => self.d_z = v,
            "d_hat" => self.d_hat = v,
            "n" => self.n = v,
            "n_joint" => self.n_joint = v,
            "depth" => self.depth = v,
            _ => unreachable!("unknown parameter {name}"),
        }
    }

    fn get(&self, name: &str) -> usize {
        match name {
            "num_nodes" => self.num_nodes,
            "d_x" => self.d_x,
            "d_z" => self.d_z,
            "d_hat" => self.d_hat,
            "n" => self.n,
            "n_joint" => self.n_joint,
            "depth" => self.depth,
            _ => unreachable!("unknown parameter {name}"),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Plan {
    pub sweep_param: String,
    pub points: Vec<Point>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RawRow {
    pub sweep_param: String,
    pub value: f64,
    pub seed: u64,
    /// Edge `i->j`, or a summary label such as `mean` or an experiment arm.
    pub edge: String,
    pub metric: String,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub sweep_param: String,
    pub value: f64,
    pub edge: String,
    pub metric: String,
    pub mean: f64,
    /// Sample standard deviation across seeds; 0 for a single seed.
    pub std: f64,
    /// `1.96 · std / √count`.
    pub half_width: f64,
    pub count: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Cloud {
    pub edge: EdgeId,
    pub z_true: Matrix,
    pub z_hat: Matrix,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentReport {
    pub experiment: Experiment,
    pub sweep_param: String,
    pub rows: Vec<RawRow>,
    pub aggregates: Vec<Aggregate>,
    pub clouds: Vec<Cloud>,
    pub notes: Vec<String>,
}

fn edge_label(e: EdgeId) -> String {
    format!("{}->{}", e.source, e.target)
}

/// Groups rows by (value, edge, metric) in first-appearance order and
/// summarizes the finite scores of each group.
pub fn aggregate(rows: &[RawRow]) -> Vec<Aggregate> {
    let mut order: Vec<(u64, &str, &str)> = Vec::new();
    let mut groups: BTreeMap<(u64, &str, &str), (&str, Vec<f64>)> = BTreeMap::new();
    for r in rows {
        let key = (r.value.to_bits(), r.edge.as_str(), r.metric.as_str());
        let entry = groups.entry(key).or_insert_with(|| {
            order.push(key);
            (r.sweep_param.as_str(), Vec::new())
        });
        if r.score.is_finite() {
            entry.1.push(r.score);
        }
    }
    order
        .into_iter()
        .filter_map(|key| {
            let (param, xs) = &groups[&key];
            if xs.is_empty() {
                return None;
            }
            let count = xs.len();
            let mean = xs.iter().sum::<f64>() / count as f64;
            let std = if count > 1 {
                (xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (count - 1) as f64).sqrt()
            } else {
                0.0
            };
            Some(Aggregate {
                sweep_param: param.to_string(),
                value: f64::from_bits(key.0),
                edge: key.1.to_string(),
                metric: key.2.to_string(),
                mean,
                std,
                half_width: 1.96 * std / (count as f64).sqrt(),
                count,
            })
        })
        .collect()
}

impl ExperimentReport {
    fn new(experiment: Experiment, plan: &Plan, rows: Vec<RawRow>, clouds: Vec<Cloud>, notes: Vec<String>) -> Self {
        ExperimentReport {
            experiment,
            sweep_param: plan.sweep_param.clone(),
            aggregates: aggregate(&rows),
            rows,
            clouds,
            notes,
        }
    }

    pub fn find(&self, value: f64, edge: &str, metric: &str) -> Option<&Aggregate> {
        self.aggregates
            .iter()
            .find(|a| a.value == value && a.edge == edge && a.metric == metric)
    }

    pub fn rows_for(&self, value: f64, edge: &str, metric: &str) -> impl Iterator<Item = &RawRow> + '_ {
        let (edge, metric) = (edge.to_string(), metric.to_string());
        self.rows
            .iter()
            .filter(move |r| r.value == value && r.edge == edge && r.metric == metric)
    }

    pub fn raw_csv(&self) -> String {
        let mut out = String::from("sweep_param,value,seed,edge,metric,score\n");
        for r in &self.rows {
            out.push_str(&format!(
                "{},{},{},{},{},{}\n",
                r.sweep_param, r.value, r.seed, r.edge, r.metric, r.score
            ));
        }
        out
    }

    /// Writes `raw.csv`, `aggregate.json`, and the bottleneck clouds.
    pub fn write(&self, dir: &Path) -> Result<Vec<String>> {
        fs::create_dir_all(dir).map_err(|e| ScbmError::io(dir, e))?;
        let raw = dir.join("raw.csv");
        fs::write(&raw, self.raw_csv()).map_err(|e| ScbmError::io(&raw, e))?;
        let agg = dir.join("aggregate.json");
        let doc = AggregateFile {
            experiment: self.experiment,
            sweep_param: self.sweep_param.clone(),
            aggregates: self.aggregates.clone(),
            notes: self.notes.clone(),
        };
        fs::write(&agg, serde_json::to_vec_pretty(&doc)?).map_err(|e| ScbmError::io(&agg, e))?;
        let mut files = vec!["raw.csv".to_string(), "aggregate.json".to_string()];
        if !self.clouds.is_empty() {
            let cdir = dir.join("clouds");
            fs::create_dir_all(&cdir).map_err(|e| ScbmError::io(&cdir, e))?;
            for c in &self.clouds {
                let name = format!("edge_{}_{}.csv", c.edge.source, c.edge.target);
                let path = cdir.join(&name);
                let f = fs::File::create(&path).map_err(|e| ScbmError::io(&path, e))?;
                crate::estimate::write_cloud_csv(f, &c.z_true, &c.z_hat)?;
                files.push(format!("clouds/{name}"));
            }
        }
        Ok(files)
    }

    /// Reads `raw.csv` and `aggregate.json` back and checks the aggregates
    /// against a recomputation from the raw rows.
    pub fn load(dir: &Path) -> Result<ExperimentReport> {
        let raw = dir.join("raw.csv");
        let f = fs::File::open(&raw).map_err(|e| ScbmError::io(&raw, e))?;
        let mut rows = Vec::new();
        for (k, line) in BufReader::new(f).lines().enumerate() {
            let line = line.map_err(|e| ScbmError::io(&raw, e))?;
            if k == 0 {
                if line != "sweep_param,value,seed,edge,metric,score" {
                    return Err(ScbmError::Format(format!("unexpected raw.csv header {line:?}")));
                }
                continue;
            }
            let fields: Vec<&str> = line.split(',').collect();
            let [param, value, seed, edge, metric, score] = fields[..] else {
                return Err(ScbmError::Format(format!("raw.csv line {}: expected 6 fields", k + 1)));
            };
            let num = |s: &str| {
                s.parse::<f64>()
                    .map_err(|_| ScbmError::Format(format!("raw.csv line {}: bad number {s:?}", k + 1)))
            };
            rows.push(RawRow {
                sweep_param: param.to_string(),
                value: num(value)?,
                seed: seed
                    .parse()
                    .map_err(|_| ScbmError::Format(format!("raw.csv line {}: bad seed {seed:?}", k + 1)))?,
                edge: edge.to_string(),
                metric: metric.to_string(),
                score: num(score)?,
            });
        }
        let agg = dir.join("aggregate.json");
        let text = fs::read_to_string(&agg).map_err(|e| ScbmError::io(&agg, e))?;
        let doc: AggregateFile = serde_json::from_str(&text)?;
        let recomputed = aggregate(&rows);
        check_aggregates(&doc.aggregates, &recomputed)?;
        Ok(ExperimentReport {
            experiment: doc.experiment,
            sweep_param: doc.sweep_param,
            rows,
            aggregates: doc.aggregates,
            clouds: Vec::new(),
            notes: doc.notes,
        })
    }
}

fn check_aggregates(stored: &[Aggregate], recomputed: &[Aggregate]) -> Result<()> {
    if stored.len() != recomputed.len() {
        return Err(ScbmError::Format(format!(
            "aggregate.json has {} groups but the raw rows give {}",
            stored.len(),
            recomputed.len()
        )));
    }
    let close = |a: f64, b: f64| (a - b).abs() <= 1e-12 * a.abs().max(b.abs()).max(1.0);
    for (s, r) in stored.iter().zip(recomputed) {
        let same_key = s.sweep_param == r.sweep_param && s.value == r.value && s.edge == r.edge && s.metric == r.metric;
        if !same_key
            || s.count != r.count
            || !close(s.mean, r.mean)
            || !close(s.std, r.std)
            || !close(s.half_width, r.half_width)
        {
            return Err(ScbmError::Format(format!(
                "aggregate for {}={} {} {} disagrees with the raw rows",
                s.sweep_param, s.value, s.edge, s.metric
            )));
        }
    }
    Ok(())
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct AggregateFile {
    experiment: Experiment,
    sweep_param: String,
    aggregates: Vec<Aggregate>,
    notes: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Manifest {
    pub tool: String,
    pub version: String,
    pub command: String,
    pub config_sha256: String,
    pub seeds: Vec<u64>,
    pub files: Vec<String>,
}

impl Manifest {
    pub fn new(command: &str, config: &ExperimentConfig, seeds: Vec<u64>, files: Vec<String>) -> Self {
        Manifest {
            tool: env!("CARGO_PKG_NAME").to_string(),
            version: env!("CARGO_PKG_VERSION").to_string(),
            command: command.to_string(),
            config_sha256: config.hash(),
            seeds,
            files,
        }
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| ScbmError::io(dir, e))?;
        let path = dir.join("manifest.json");
        fs::write(&path, serde_json::to_vec_pretty(self)?).map_err(|e| ScbmError::io(&path, e))
    }
}

fn parse_threads(value: Option<&str>) -> Result<Option<usize>> {
    value
        .map(|v| {
            v.trim()
                .parse()
                .ok()
                .filter(|&k: &usize| k > 0)
                .ok_or_else(|| ScbmError::Config(format!("SCBM_THREADS must be a positive integer, got {v:?}")))
        })
        .transpose()
}

/// Rayon pool honoring `SCBM_THREADS`.
pub fn thread_pool() -> Result<rayon::ThreadPool> {
    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Some(k) = parse_threads(std::env::var("SCBM_THREADS").ok().as_deref())? {
        builder = builder.num_threads(k);
    }
    builder.build().map_err(|e| ScbmError::Config(e.to_string()))
}

struct SeedOutput {
    /// Rows per sweep point.
    rows: Vec<Vec<RawRow>>,
    clouds: Vec<Cloud>,
    notes: Vec<String>,
}

/// Runs `job` for every seed on the pool and merges rows in point, then
/// seed order.
fn run_seeds<F>(cfg: &ExperimentConfig, plan: &Plan, job: F) -> Result<(Vec<RawRow>, Vec<Cloud>, Vec<String>)>
where
    F: Fn(usize, u64) -> Result<SeedOutput> + Sync,
{
    let outputs = thread_pool()?.install(|| {
        cfg.seeds
            .par_iter()
            .enumerate()
            .map(|(k, &seed)| job(k, seed).map_err(|e| e.context(format!("{} seed {seed}", cfg.experiment.name()))))
            .collect::<Result<Vec<_>>>()
    })?;
    let mut rows = Vec::new();
    for p in 0..plan.points.len() {
        for out in &outputs {
            rows.extend(out.rows[p].iter().cloned());
        }
    }
    let mut clouds = Vec::new();
    let mut notes = Vec::new();
    for out in outputs {
        clouds.extend(out.clouds);
        notes.extend(out.notes);
    }
    Ok((rows, clouds, notes))
}

fn row(plan: &Plan, point: &Point, seed: u64, edge: impl Into<String>, metric: &str, score: f64) -> RawRow {
    RawRow {
        sweep_param: plan.sweep_param.clone(),
        value: point.get(&plan.sweep_param) as f64,
        seed,
        edge: edge.into(),
        metric: metric.to_string(),
        score,
    }
}

/// Ground-truth model for a configuration; noise of non-root nodes is scaled
/// by `noise_scale`.
pub fn sample_truth<R: Rng + ?Sized>(cfg: &ExperimentConfig, dag: &Dag, d_z: usize, rng: &mut R) -> Result<Scbm> {
    let mut model = match cfg.mode {
        Mode::Linear => sample_linear_scbm(dag, d_z, cfg.noise, rng)?,
        Mode::Nonlinear => {
            let arch = ArchSpec {
                gain: cfg.gain,
                ..ArchSpec::default()
            };
            sample_nonlinear_scbm(dag, d_z, arch, cfg.noise, rng)?
        }
    };
    if cfg.noise_scale != 1.0 {
        for v in 0..dag.num_nodes() {
            if !dag.is_root(v) {
                model = model.with_node_noise_scale(v, cfg.noise_scale)?;
            }
        }
    }
    Ok(model)
}

/// Model and dataset of one seed at the first sweep point, as written by
/// `scbm gen`.
pub fn generate(cfg: &ExperimentConfig, seed: u64) -> Result<(Scbm, Dataset)> {
    if cfg.experiment != Experiment::Identifiability {
        return Err(ScbmError::Config(
            "generation uses the identifiability parameters".into(),
        ));
    }
    let plan = cfg.plan()?;
    if plan.points.len() != 1 {
        return Err(ScbmError::Config(
            "generation needs single parameter values, not a sweep".into(),
        ));
    }
    let p = plan.points[0];
    let mut mrng = rng::stream(seed, streams::MODEL);
    let dag = sample_er_dag(p.num_nodes, cfg.edge_prob, vec![p.d_x; p.num_nodes], &mut mrng)?;
    let truth = sample_truth(cfg, &dag, p.d_z, &mut mrng)?;
    let data = sample_dataset(&truth, p.n, &mut rng::stream(seed, streams::DATA))?;
    Ok((truth, data))
}

fn expect(cfg: &ExperimentConfig, experiment: Experiment) -> Result<Plan> {
    if cfg.experiment != experiment {
        return Err(ScbmError::Config(format!(
            "config is for the {} experiment, not {}",
            cfg.experiment.name(),
            experiment.name()
        )));
    }
    cfg.plan()
}

fn cloud(truth: &Scbm, est: &crate::estimate::EstimatedScbm, data: &Dataset, rows: usize) -> Result<Vec<Cloud>> {
    let take = rows.min(data.n());
    truth
        .dag()
        .edges()
        .map(|edge| {
            let source = data.block(edge.source)?.rows(0, take).into_owned();
            Ok(Cloud {
                edge,
                z_true: true_bottleneck(truth, edge, &source)?,
                z_hat: apply_bottleneck(est.estimate(edge)?, &source)?,
            })
        })
        .collect()
}

/// Random DAGs and models per seed, estimation with `d_hat`, and per-edge
/// identifiability scores plus their per-seed mean.
pub fn run_identifiability(cfg: &ExperimentConfig) -> Result<ExperimentReport> {
    let plan = expect(cfg, Experiment::Identifiability)?;
    let ecfg = cfg.estimator();
    let (rows, clouds, notes) = run_seeds(cfg, &plan, |k, seed| {
        let mut out = SeedOutput {
            rows: Vec::new(),
            clouds: Vec::new(),
            notes: Vec::new(),
        };
        for (pi, p) in plan.points.iter().enumerate() {
            let ctx = format!("{} = {}", plan.sweep_param, p.get(&plan.sweep_param));
            let result = (|| -> Result<Vec<RawRow>> {
                let mut mrng = rng::stream(seed, streams::MODEL);
                let dag = sample_er_dag(p.num_nodes, cfg.edge_prob, vec![p.d_x; p.num_nodes], &mut mrng)?;
                let truth = sample_truth(cfg, &dag, p.d_z, &mut mrng)?;
                let data = sample_dataset(&truth, p.n, &mut rng::stream(seed, streams::DATA))?;
                let est = estimate_all(
                    &data,
                    &dag,
                    &DHat::uniform(p.d_hat),
                    &ecfg,
                    rng::derive(seed, streams::ESTIMATE),
                )?;
                let score = model_identifiability(&truth, &est, &data, &ecfg, rng::derive(seed, streams::SCORE))?;
                let mut rows: Vec<RawRow> = score
                    .per_edge
                    .iter()
                    .map(|s| row(&plan, p, seed, edge_label(s.edge), "r2", s.score))
                    .collect();
                if score.per_edge.is_empty() {
                    out.notes
                        .push(format!("seed {seed}, {ctx}: sampled graph has no edges"));
                } else {
                    rows.push(row(&plan, p, seed, "mean", "r2", score.mean));
                }
                if k == 0 && pi == 0 {
                    out.clouds = cloud(&truth, &est, &data, cfg.cloud_rows)?;
                }
                Ok(rows)
            })()
            .map_err(|e| e.context(ctx))?;
            out.rows.push(result);
        }
        Ok(out)
    })?;
    Ok(ExperimentReport::new(
        Experiment::Identifiability,
        &plan,
        rows,
        clouds,
        notes,
    ))
}

/// Single cause–effect pair; scores the recovered bottleneck for each
/// assumed dimension.
pub fn run_misspecification(cfg: &ExperimentConfig) -> Result<ExperimentReport> {
    let plan = expect(cfg, Experiment::Misspecification)?;
    let ecfg = cfg.estimator();
    let edge = EdgeId::new(0, 1);
    let (rows, clouds, notes) = run_seeds(cfg, &plan, |_, seed| {
        let mut rows = Vec::new();
        let mut cached: Option<((usize, usize, usize), Scbm, Dataset)> = None;
        for p in &plan.points {
            let ctx = format!("{} = {}", plan.sweep_param, p.get(&plan.sweep_param));
            let point_rows = (|| -> Result<Vec<RawRow>> {
                let key = (p.d_x, p.d_z, p.n);
                if cached.as_ref().is_none_or(|c| c.0 != key) {
                    let dag = Dag::with_uniform_dim(2, p.d_x, &[(0, 1)])?;
                    let truth = sample_truth(cfg, &dag, p.d_z, &mut rng::stream(seed, streams::MODEL))?;
                    let data = sample_dataset(&truth, p.n, &mut rng::stream(seed, streams::DATA))?;
                    cached = Some((key, truth, data));
                }
                let (_, truth, data) = cached.as_ref().expect("filled above");
                let est = estimate_all(
                    data,
                    truth.dag(),
                    &DHat::uniform(p.d_hat),
                    &ecfg,
                    rng::derive(seed, streams::ESTIMATE),
                )?;
                let source = data.block(0)?;
                let z = true_bottleneck(truth, edge, source)?;
                let z_hat = apply_bottleneck(est.estimate(edge)?, source)?;
                let score = identifiability_score(&z, &z_hat, &ecfg, rng::derive(seed, streams::SCORE))?;
                Ok(vec![row(&plan, p, seed, edge_label(edge), "r2", score)])
            })()
            .map_err(|e| e.context(ctx))?;
            rows.push(point_rows);
        }
        Ok(SeedOutput {
            rows,
            clouds: Vec::new(),
            notes: Vec::new(),
        })
    })?;
    Ok(ExperimentReport::new(
        Experiment::Misspecification,
        &plan,
        rows,
        clouds,
        notes,
    ))
}

/// Node indices of the transfer graph: the confounder, the cause, and the
/// effect.
pub const TRANSFER_CONFOUNDER: usize = 0;
pub const TRANSFER_CAUSE: usize = 1;
pub const TRANSFER_EFFECT: usize = 2;

/// Confounder → cause, confounder → effect, cause → effect.
pub fn transfer_graph(d_x: usize) -> Result<Dag> {
    Dag::with_uniform_dim(
        3,
        d_x,
        &[
            (TRANSFER_CONFOUNDER, TRANSFER_CAUSE),
            (TRANSFER_CONFOUNDER, TRANSFER_EFFECT),
            (TRANSFER_CAUSE, TRANSFER_EFFECT),
        ],
    )
}

/// Fits the confounder's bottleneck into the cause on a separate
/// environment, then estimates the cause → effect map from joint samples
/// adjusting for the raw confounder, the estimated bottleneck, or the true
/// bottleneck.
/// Per-seed stage-1 state keyed by (d_x, d_z): truth, stage-1 fit, its
/// score, evaluation inputs and the centered oracle output.
type TransferStage1 = ((usize, usize), Scbm, crate::estimate::EdgeEstimate, f64, Matrix, Matrix);

pub fn run_transfer(cfg: &ExperimentConfig) -> Result<ExperimentReport> {
    let plan = expect(cfg, Experiment::Transfer)?;
    let ecfg = cfg.estimator();
    let stage1_edge = EdgeId::new(TRANSFER_CONFOUNDER, TRANSFER_CAUSE);
    let effect_edge = EdgeId::new(TRANSFER_CAUSE, TRANSFER_EFFECT);
    let (rows, clouds, notes) = run_seeds(cfg, &plan, |_, seed| {
        let mut rows = Vec::new();
        let mut cached: Option<TransferStage1> = None;
        for p in &plan.points {
            let ctx = format!("{} = {}", plan.sweep_param, p.get(&plan.sweep_param));
            let point_rows = (|| -> Result<Vec<RawRow>> {
                let key = (p.d_x, p.d_z);
                if cached.as_ref().is_none_or(|c| c.0 != key) {
                    let dag = transfer_graph(p.d_x)?;
                    let truth = sample_truth(cfg, &dag, p.d_z, &mut rng::stream(seed, streams::MODEL))?;
                    let env = sample_dataset(&truth, cfg.n_bottleneck, &mut rng::stream(seed, streams::DATA))?
                        .split_environment(&[TRANSFER_CONFOUNDER, TRANSFER_CAUSE])?;
                    let conf = env.block(TRANSFER_CONFOUNDER)?;
                    let empty = Matrix::zeros(env.n(), 0);
                    let stage1 = fit_edge(
                        stage1_edge,
                        conf,
                        env.block(TRANSFER_CAUSE)?,
                        &empty,
                        p.d_z,
                        &ecfg,
                        rng::derive(seed, streams::ESTIMATE),
                    )?;
                    let r2 = identifiability_score(
                        &true_bottleneck(&truth, stage1_edge, conf)?,
                        &apply_bottleneck(&stage1, conf)?,
                        &ecfg,
                        rng::derive(seed, streams::SCORE),
                    )?;
                    let eval = sample_dataset(&truth, cfg.eval_rows, &mut rng::stream(seed, streams::EVAL))?;
                    let inputs = eval.block(TRANSFER_CAUSE)?.clone();
                    let zero = Matrix::zeros(1, p.d_x);
                    let baseline = mechanism_oracle(&truth, effect_edge, &zero)?;
                    let mut target = mechanism_oracle(&truth, effect_edge, &inputs)?;
                    for mut r in target.row_iter_mut() {
                        r -= baseline.row(0);
                    }
                    cached = Some((key, truth, stage1, r2, inputs, target));
                }
                let (_, truth, stage1, r2, inputs, target) = cached.as_ref().expect("filled above");
                let joint = sample_dataset(
                    truth,
                    p.n_joint,
                    &mut rng::stream(rng::derive(seed, p.n_joint as u64), streams::DATA),
                )?;
                let conf = joint.block(TRANSFER_CONFOUNDER)?;
                let arms = [
                    ("raw", conf.clone()),
                    ("bottleneck", apply_bottleneck(stage1, conf)?),
                    ("oracle", true_bottleneck(truth, stage1_edge, conf)?),
                ];
                let mut out = vec![row(&plan, p, seed, edge_label(stage1_edge), "stage1_r2", *r2)];
                for (arm, cond) in arms {
                    let est = fit_edge(
                        effect_edge,
                        joint.block(TRANSFER_CAUSE)?,
                        joint.block(TRANSFER_EFFECT)?,
                        &cond,
                        p.d_z,
                        &ecfg,
                        rng::derive(seed, streams::ESTIMATE + p.n_joint as u64),
                    )?;
                    let expected_dim = match arm {
                        "raw" => 2 * p.d_x,
                        _ => p.d_x + p.d_z,
                    };
                    if est.diagnostics.regression_dim != expected_dim {
                        return Err(ScbmError::param(format!(
                            "{arm} arm regresses on {} coordinates, expected {expected_dim}",
                            est.diagnostics.regression_dim
                        )));
                    }
                    let mae = effect_mae(|x| est.predict_effect(x), |_| Ok(target.clone()), inputs)?;
                    out.push(row(&plan, p, seed, arm, "mae", mae));
                    out.push(row(&plan, p, seed, arm, "regression_dim", expected_dim as f64));
                }
                Ok(out)
            })()
            .map_err(|e| e.context(ctx))?;
            rows.push(point_rows);
        }
        Ok(SeedOutput {
            rows,
            clouds: Vec::new(),
            notes: Vec::new(),
        })
    })?;
    Ok(ExperimentReport::new(Experiment::Transfer, &plan, rows, clouds, notes))
}

/// Product of the first `depth` factors.
fn product(factors: &[Matrix], depth: usize) -> Matrix {
    factors[1..depth].iter().fold(factors[0].clone(), |acc, f| acc * f)
}

/// Numerical rank of products of uniform[0,1] matrices, raw and with each
/// factor replaced by its orthogonal QR factor.
pub fn run_rank_collapse(cfg: &ExperimentConfig) -> Result<ExperimentReport> {
    let plan = expect(cfg, Experiment::RankCollapse)?;
    let max_depth = plan.points.iter().map(|p| p.depth).max().unwrap_or(1);
    let (rows, clouds, notes) = run_seeds(cfg, &plan, |_, seed| {
        let mut rows = vec![Vec::new(); plan.points.len()];
        for &size in &cfg.sizes {
            let mut rng = rng::stream(rng::derive(seed, size as u64), streams::MODEL);
            let plain: Vec<Matrix> = (0..max_depth)
                .map(|_| Matrix::from_fn(size, size, |_, _| rng.random::<f64>()))
                .collect();
            let orth: Vec<Matrix> = plain.iter().map(orthogonalize).collect();
            for (pi, p) in plan.points.iter().enumerate() {
                for (kind, factors) in [("plain", &plain), ("orthogonal", &orth)] {
                    let m = product(factors, p.depth);
                    let s = singular_values(&m);
                    let ratio = if s.len() > 1 && s[0] > 0.0 { s[1] / s[0] } else { 0.0 };
                    let label = format!("{kind}_{size}");
                    rows[pi].push(row(
                        &plan,
                        p,
                        seed,
                        label.clone(),
                        "rank",
                        numerical_rank(&m, cfg.rank_tol) as f64,
                    ));
                    rows[pi].push(row(&plan, p, seed, label, "sigma2_over_sigma1", ratio));
                }
            }
        }
        Ok(SeedOutput {
            rows,
            clouds: Vec::new(),
            notes: Vec::new(),
        })
    })?;
    Ok(ExperimentReport::new(
        Experiment::RankCollapse,
        &plan,
        rows,
        clouds,
        notes,
    ))
}

pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ExperimentReport> {
    match cfg.experiment {
        Experiment::Identifiability => run_identifiability(cfg),
        Experiment::Misspecification => run_misspecification(cfg),
        Experiment::Transfer => run_transfer(cfg),
        Experiment::RankCollapse => run_rank_collapse(cfg),
    }
}

/// Writes the report and its manifest into `dir`.
pub fn write_outputs(dir: &Path, command: &str, cfg: &ExperimentConfig, report: &ExperimentReport) -> Result<()> {
    let files = report.write(dir)?;
    Manifest::new(command, cfg, cfg.seeds.clone(), files).write(dir)
}

/// Writes any serializable value as pretty JSON.
pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| ScbmError::io(parent, e))?;
    }
    let f = fs::File::create(path).map_err(|e| ScbmError::io(path, e))?;
    let mut w = BufWriter::new(f);
    serde_json::to_writer_pretty(&mut w, value)?;
    w.write_all(b"\n").map_err(|e| ScbmError::io(path, e))?;
    w.flush().map_err(|e| ScbmError::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(experiment: Experiment) -> ExperimentConfig {
        let mut cfg = ExperimentConfig::new(experiment, Mode::Linear);
        cfg.seeds = vec![0, 1];
        cfg
    }

    #[test]
    fn config_rejects_unknown_keys_and_double_sweeps() {
        assert!(ExperimentConfig::from_json(r#"{"experiment": "identifiability", "bogus": 1}"#).is_err());
        let cfg = ExperimentConfig::from_json(r#"{"n": [1000, 3000], "d_x": [4, 5]}"#).unwrap();
        assert!(matches!(cfg.plan(), Err(ScbmError::Config(_))));
        let cfg = ExperimentConfig::from_json(r#"{"n": []}"#).unwrap();
        assert!(cfg.plan().is_err());
        let cfg = ExperimentConfig::from_json(r#"{"experiment": "transfer", "num_nodes": 4}"#).unwrap();
        assert!(cfg.plan().is_err());
        let cfg = ExperimentConfig::from_json(r#"{"d_z": 6}"#).unwrap();
        assert!(cfg.plan().is_err());
    }

    #[test]
    fn plan_defaults() {
        let plan = ExperimentConfig::new(Experiment::Identifiability, Mode::Linear)
            .plan()
            .unwrap();
        assert_eq!(plan.sweep_param, "n");
        assert_eq!(
            plan.points,
            vec![Point {
                num_nodes: 10,
                d_x: 5,
                d_z: 2,
                d_hat: 2,
                n: 30_000,
                ..Point::default()
            }]
        );
        let plan = ExperimentConfig::new(Experiment::Identifiability, Mode::Nonlinear)
            .plan()
            .unwrap();
        assert_eq!(plan.points[0].n, 50_000);

        let plan = ExperimentConfig::new(Experiment::Misspecification, Mode::Linear)
            .plan()
            .unwrap();
        assert_eq!(plan.sweep_param, "d_hat");
        let grid: Vec<usize> = plan.points.iter().map(|p| p.d_hat).collect();
        assert_eq!(grid, vec![1, 2, 3, 4, 5, 6, 7, 8, 9, 10, 11, 12, 20, 30, 50]);
        assert!(plan.points.iter().all(|p| p.d_x == 50 && p.d_z == 10));

        let plan = ExperimentConfig::new(Experiment::Transfer, Mode::Nonlinear)
            .plan()
            .unwrap();
        assert_eq!(plan.sweep_param, "n_joint");
        assert_eq!(plan.points.len(), 5);
        assert_eq!(plan.points[0].d_x, 500);

        let cfg = ExperimentConfig::from_json(r#"{"experiment": "misspecification", "d_x": [20, 30]}"#).unwrap();
        assert!(cfg.plan().is_err());
        let cfg =
            ExperimentConfig::from_json(r#"{"experiment": "misspecification", "d_x": [20, 30], "d_hat": 3}"#).unwrap();
        let plan = cfg.plan().unwrap();
        assert_eq!(plan.sweep_param, "d_x");
        assert_eq!(plan.points[1].d_hat, 3);
    }

    #[test]
    fn aggregate_statistics() {
        let rows: Vec<RawRow> = [1.0, 2.0, 4.0, f64::NAN]
            .iter()
            .enumerate()
            .map(|(k, &s)| RawRow {
                sweep_param: "n".into(),
                value: 10.0,
                seed: k as u64,
                edge: "mean".into(),
                metric: "r2".into(),
                score: s,
            })
            .collect();
        let agg = aggregate(&rows);
        assert_eq!(agg.len(), 1);
        let a = &agg[0];
        assert_eq!(a.count, 3);
        assert!((a.mean - 7.0 / 3.0).abs() < 1e-15);
        let std = ((1.0 - 7.0 / 3.0f64).powi(2) + (2.0 - 7.0 / 3.0f64).powi(2) + (4.0 - 7.0 / 3.0f64).powi(2)) / 2.0;
        assert!((a.std - std.sqrt()).abs() < 1e-15);
        assert!((a.half_width - 1.96 * a.std / 3f64.sqrt()).abs() < 1e-15);
        assert_eq!(aggregate(&rows[..1])[0].std, 0.0);
    }

    #[test]
    fn rank_collapse_table() {
        let mut cfg = small(Experiment::RankCollapse);
        cfg.sizes = vec![10];
        let report = run_rank_collapse(&cfg).unwrap();
        assert_eq!(report.sweep_param, "depth");
        for depth in 1..=6 {
            let orth = report.find(depth as f64, "orthogonal_10", "rank").unwrap();
            assert_eq!(orth.mean, 10.0);
        }
        assert_eq!(report.find(1.0, "plain_10", "rank").unwrap().mean, 10.0);
        // 2 seeds × 6 depths × 2 kinds × 2 metrics
        assert_eq!(report.rows.len(), 48);
    }

    #[test]
    fn noiseless_full_dimensional_edge_is_recovered() {
        let mut cfg = small(Experiment::Identifiability);
        cfg.num_nodes = Some(Sweep::One(2));
        cfg.edge_prob = 1.0;
        cfg.d_x = Some(Sweep::One(4));
        cfg.d_z = Some(Sweep::One(4));
        cfg.n = Some(Sweep::One(2000));
        cfg.noise_scale = 0.0;
        let report = run_identifiability(&cfg).unwrap();
        let mean = report.find(2000.0, "mean", "r2").unwrap();
        assert_eq!(mean.count, 2);
        assert!((mean.mean - 1.0).abs() <= 1e-3, "{}", mean.mean);
        assert_eq!(report.clouds.len(), 1);
        assert_eq!(report.clouds[0].z_true.nrows(), 1000);
    }

    #[test]
    fn reports_round_trip_and_detect_tampering() {
        let mut cfg = small(Experiment::Identifiability);
        cfg.num_nodes = Some(Sweep::One(3));
        cfg.n = Some(Sweep::Many(vec![500, 1000]));
        let report = run_identifiability(&cfg).unwrap();
        let dir = tempfile::tempdir().unwrap();
        write_outputs(dir.path(), "identifiability", &cfg, &report).unwrap();
        let loaded = ExperimentReport::load(dir.path()).unwrap();
        assert_eq!(loaded.rows, report.rows);
        assert_eq!(loaded.aggregates, report.aggregates);
        let manifest: Manifest =
            serde_json::from_str(&fs::read_to_string(dir.path().join("manifest.json")).unwrap()).unwrap();
        assert_eq!(manifest.config_sha256, cfg.hash());
        assert!(manifest.files.iter().any(|f| f.starts_with("clouds/edge_")));

        let raw = dir.path().join("raw.csv");
        let text = fs::read_to_string(&raw).unwrap();
        let mut lines: Vec<String> = text.lines().map(str::to_string).collect();
        let last = lines.last_mut().unwrap();
        let mut fields: Vec<&str> = last.split(',').collect();
        fields[5] = "0.123456";
        *last = fields.join(",");
        fs::write(&raw, lines.join("\n") + "\n").unwrap();
        assert!(matches!(ExperimentReport::load(dir.path()), Err(ScbmError::Format(_))));
    }

    #[test]
    fn reruns_are_identical() {
        let mut cfg = small(Experiment::Misspecification);
        cfg.d_x = Some(Sweep::One(8));
        cfg.d_z = Some(Sweep::One(3));
        cfg.n = Some(Sweep::One(800));
        let a = run_misspecification(&cfg).unwrap();
        let b = run_misspecification(&cfg).unwrap();
        assert_eq!(a.raw_csv(), b.raw_csv());
        assert_eq!(a.rows.len(), 2 * misspec_grid(8, 3).len());
    }

    #[test]
    fn transfer_rows_and_dimensions() {
        let mut cfg = small(Experiment::Transfer);
        cfg.d_x = Some(Sweep::One(6));
        cfg.n_joint = Some(Sweep::Many(vec![40, 400]));
        cfg.n_bottleneck = 2000;
        cfg.eval_rows = 100;
        let report = run_transfer(&cfg).unwrap();
        assert_eq!(report.find(40.0, "raw", "regression_dim").unwrap().mean, 12.0);
        assert_eq!(report.find(40.0, "bottleneck", "regression_dim").unwrap().mean, 8.0);
        for arm in ["raw", "bottleneck", "oracle"] {
            let a = report.find(400.0, arm, "mae").unwrap();
            assert!(a.mean.is_finite() && a.mean >= 0.0);
        }
        assert!(report.find(40.0, "0->1", "stage1_r2").unwrap().mean > 0.9);
    }

    #[test]
    fn thread_cap_parsing() {
        assert_eq!(parse_threads(None).unwrap(), None);
        assert_eq!(parse_threads(Some(" 3")).unwrap(), Some(3));
        assert!(parse_threads(Some("0")).is_err());
        assert!(parse_threads(Some("zero")).is_err());
    }
}
