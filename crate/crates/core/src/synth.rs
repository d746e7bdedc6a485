//! Ground-truth structural causal bottleneck models: Gaussian MRF noise,
//! linear and neural edge mechanisms, ancestral and interventional sampling,
//! and dataset serialization.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use nalgebra::RowDVector;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Result, ScbmError};
use crate::graph::{causal_order, Dag, EdgeId};
use crate::linalg::{numerical_rank, select_rows, Matrix};
use crate::mlp::{forward, init_net, Activation, NeuralNet, WeightInit};

/// Zero-mean Gaussian with precision `Θ`, optionally scaled by `scale`
/// (samples are `scale · η` with `η ~ N(0, Θ⁻¹)`).
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianNoiseModel {
    dim: usize,
    precision: Matrix,
    cholesky_of_covariance: Matrix,
    scale: f64,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct NoiseRepr {
    dim: usize,
    #[serde(with = "crate::linalg::rows")]
    precision: Matrix,
    #[serde(default = "one")]
    scale: f64,
}

fn one() -> f64 {
    1.0
}

impl Serialize for GaussianNoiseModel {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        NoiseRepr {
            dim: self.dim,
            precision: self.precision.clone(),
            scale: self.scale,
        }
        .serialize(s)
    }
}

impl<'de> Deserialize<'de> for GaussianNoiseModel {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let repr = NoiseRepr::deserialize(d)?;
        if repr.precision.nrows() != repr.dim {
            return Err(serde::de::Error::custom("noise dim does not match precision"));
        }
        GaussianNoiseModel::from_precision(repr.precision)
            .and_then(|m| m.with_scale(repr.scale))
            .map_err(serde::de::Error::custom)
    }
}

impl GaussianNoiseModel {
    pub fn from_precision(precision: Matrix) -> Result<Self> {
        let dim = precision.nrows();
        if dim == 0 || precision.ncols() != dim {
            return Err(ScbmError::param("precision must be a nonempty square matrix"));
        }
        let asym = (&precision - precision.transpose()).amax();
        if asym > 1e-12 * precision.amax() {
            return Err(ScbmError::NotPositiveDefinite("precision is not symmetric".into()));
        }
        let chol = precision
            .clone()
            .cholesky()
            .ok_or_else(|| ScbmError::NotPositiveDefinite("Cholesky of the precision failed".into()))?;
        let cov = chol.inverse();
        let cov = (&cov + cov.transpose()) * 0.5;
        let l = cov
            .cholesky()
            .ok_or_else(|| ScbmError::NotPositiveDefinite("Cholesky of the covariance failed".into()))?
            .unpack();
        Ok(GaussianNoiseModel {
            dim,
            precision,
            cholesky_of_covariance: l,
            scale: 1.0,
        })
    }

    pub fn standard(dim: usize) -> Result<Self> {
        Self::from_precision(Matrix::identity(dim, dim))
    }

    pub fn with_scale(mut self, scale: f64) -> Result<Self> {
        if !(scale >= 0.0 && scale.is_finite()) {
            return Err(ScbmError::param(format!(
                "noise scale must be finite and nonnegative, got {scale}"
            )));
        }
        self.scale = scale;
        Ok(self)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn precision(&self) -> &Matrix {
        &self.precision
    }

    pub fn scale(&self) -> f64 {
        self.scale
    }

    /// `scale² · Θ⁻¹`
    pub fn covariance(&self) -> Matrix {
        &self.cholesky_of_covariance * self.cholesky_of_covariance.transpose() * (self.scale * self.scale)
    }

    pub fn sample<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> Matrix {
        let z = Matrix::from_fn(n, self.dim, |_, _| rng.sample(StandardNormal));
        z * self.cholesky_of_covariance.transpose() * self.scale
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NoiseStructure {
    #[default]
    Chain,
    /// Complete graph with uniform[0,1] edge weights.
    Dense,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NoiseSpec {
    #[serde(default)]
    pub structure: NoiseStructure,
    #[serde(default = "default_strength")]
    pub strength: f64,
}

fn default_strength() -> f64 {
    0.5
}

impl Default for NoiseSpec {
    fn default() -> Self {
        NoiseSpec {
            structure: NoiseStructure::Chain,
            strength: default_strength(),
        }
    }
}

/// Graph Laplacian `D − W` of the coordinate coupling structure.
pub fn coupling_laplacian<R: Rng + ?Sized>(dim: usize, structure: NoiseStructure, rng: &mut R) -> Matrix {
    let mut w = Matrix::zeros(dim, dim);
    match structure {
        NoiseStructure::Chain => {
            for k in 1..dim {
                w[(k - 1, k)] = 1.0;
                w[(k, k - 1)] = 1.0;
            }
        }
        NoiseStructure::Dense => {
            for a in 0..dim {
                for b in a + 1..dim {
                    let v: f64 = rng.random();
                    w[(a, b)] = v;
                    w[(b, a)] = v;
                }
            }
        }
    }
    let degree = Matrix::from_diagonal(&w.column_sum());
    degree - w
}

/// Stationary law of the Langevin diffusion on the coupling graph:
/// `Θ = I + strength · L`.
pub fn sample_noise_model<R: Rng + ?Sized>(
    dim: usize,
    structure: NoiseStructure,
    strength: f64,
    rng: &mut R,
) -> Result<GaussianNoiseModel> {
    if dim == 0 {
        return Err(ScbmError::param("noise dim must be at least 1"));
    }
    if !strength.is_finite() {
        return Err(ScbmError::param("noise strength must be finite"));
    }
    let precision = Matrix::identity(dim, dim) + coupling_laplacian(dim, structure, rng) * strength;
    GaussianNoiseModel::from_precision(precision)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MechanismKind {
    Linear,
    Nonlinear,
}

/// Bottleneck `b: X_i → Z` and effect `f: Z → X_j` of one edge.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum EdgeFunctions {
    Linear {
        #[serde(rename = "B", with = "crate::linalg::rows")]
        bottleneck: Matrix,
        #[serde(rename = "F", with = "crate::linalg::rows")]
        effect: Matrix,
    },
    Nonlinear {
        bottleneck: NeuralNet,
        effect: NeuralNet,
    },
}

impl EdgeFunctions {
    pub fn kind(&self) -> MechanismKind {
        match self {
            EdgeFunctions::Linear { .. } => MechanismKind::Linear,
            EdgeFunctions::Nonlinear { .. } => MechanismKind::Nonlinear,
        }
    }

    pub fn d_z(&self) -> usize {
        match self {
            EdgeFunctions::Linear { bottleneck, .. } => bottleneck.ncols(),
            EdgeFunctions::Nonlinear { bottleneck, .. } => bottleneck.output_dim(),
        }
    }

    pub fn source_dim(&self) -> usize {
        match self {
            EdgeFunctions::Linear { bottleneck, .. } => bottleneck.nrows(),
            EdgeFunctions::Nonlinear { bottleneck, .. } => bottleneck.input_dim(),
        }
    }

    pub fn target_dim(&self) -> usize {
        match self {
            EdgeFunctions::Linear { effect, .. } => effect.ncols(),
            EdgeFunctions::Nonlinear { effect, .. } => effect.output_dim(),
        }
    }

    fn validate(&self) -> Result<()> {
        match self {
            EdgeFunctions::Linear { bottleneck, effect } => {
                if bottleneck.ncols() != effect.nrows() {
                    return Err(ScbmError::param("bottleneck and effect disagree on d_z"));
                }
            }
            EdgeFunctions::Nonlinear { bottleneck, effect } => {
                if bottleneck.output_dim() != effect.input_dim() {
                    return Err(ScbmError::param("bottleneck and effect networks disagree on d_z"));
                }
            }
        }
        if self.d_z() == 0 || self.d_z() > self.source_dim().min(self.target_dim()) {
            return Err(ScbmError::param(format!(
                "d_z = {} must lie in 1..={}",
                self.d_z(),
                self.source_dim().min(self.target_dim())
            )));
        }
        Ok(())
    }

    fn check_source(&self, inputs: &Matrix) -> Result<()> {
        if inputs.ncols() != self.source_dim() {
            return Err(ScbmError::DimensionMismatch {
                context: "mechanism input",
                expected: self.source_dim(),
                actual: inputs.ncols(),
            });
        }
        Ok(())
    }

    /// `b(inputs)`, row-wise.
    pub fn bottleneck(&self, inputs: &Matrix) -> Result<Matrix> {
        self.check_source(inputs)?;
        match self {
            EdgeFunctions::Linear { bottleneck, .. } => Ok(inputs * bottleneck),
            EdgeFunctions::Nonlinear { bottleneck, .. } => forward(bottleneck, inputs),
        }
    }

    /// `f(z)`, row-wise.
    pub fn effect(&self, z: &Matrix) -> Result<Matrix> {
        match self {
            EdgeFunctions::Linear { effect, .. } => {
                if z.ncols() != effect.nrows() {
                    return Err(ScbmError::DimensionMismatch {
                        context: "effect input",
                        expected: effect.nrows(),
                        actual: z.ncols(),
                    });
                }
                Ok(z * effect)
            }
            EdgeFunctions::Nonlinear { effect, .. } => forward(effect, z),
        }
    }

    /// `f(b(inputs))`, row-wise.
    pub fn apply(&self, inputs: &Matrix) -> Result<Matrix> {
        self.effect(&self.bottleneck(inputs)?)
    }

    /// `B·F` for a linear edge.
    pub fn joint_map(&self) -> Option<Matrix> {
        match self {
            EdgeFunctions::Linear { bottleneck, effect } => Some(bottleneck * effect),
            EdgeFunctions::Nonlinear { .. } => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scbm {
    dag: Dag,
    noise: Vec<GaussianNoiseModel>,
    functions: BTreeMap<EdgeId, EdgeFunctions>,
}

#[derive(Serialize, Deserialize)]
struct EdgeRepr {
    source: usize,
    target: usize,
    d_z: usize,
    #[serde(flatten)]
    functions: EdgeFunctions,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ScbmRepr {
    graph: Dag,
    noise: Vec<GaussianNoiseModel>,
    edges: Vec<EdgeRepr>,
}

impl Serialize for Scbm {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        ScbmRepr {
            graph: self.dag.clone(),
            noise: self.noise.clone(),
            edges: self
                .functions
                .iter()
                .map(|(e, f)| EdgeRepr {
                    source: e.source,
                    target: e.target,
                    d_z: f.d_z(),
                    functions: f.clone(),
                })
                .collect(),
        }
        .serialize(s)
    }
}

impl<'de> Deserialize<'de> for Scbm {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let repr = ScbmRepr::deserialize(d)?;
        let mut functions = BTreeMap::new();
        for e in repr.edges {
            if e.functions.d_z() != e.d_z {
                return Err(serde::de::Error::custom(format!(
                    "edge ({},{}): d_z field disagrees with its functions",
                    e.source, e.target
                )));
            }
            functions.insert(EdgeId::new(e.source, e.target), e.functions);
        }
        Scbm::new(repr.graph, repr.noise, functions).map_err(serde::de::Error::custom)
    }
}

impl Scbm {
    pub fn new(dag: Dag, noise: Vec<GaussianNoiseModel>, functions: BTreeMap<EdgeId, EdgeFunctions>) -> Result<Self> {
        if noise.len() != dag.num_nodes() {
            return Err(ScbmError::DimensionMismatch {
                context: "noise models",
                expected: dag.num_nodes(),
                actual: noise.len(),
            });
        }
        for (node, m) in noise.iter().enumerate() {
            if m.dim() != dag.dim(node) {
                return Err(ScbmError::param(format!(
                    "noise of node {node} has dim {}, expected {}",
                    m.dim(),
                    dag.dim(node)
                )));
            }
        }
        if functions.len() != dag.num_edges() {
            return Err(ScbmError::param("every edge needs exactly one mechanism"));
        }
        for (&edge, f) in &functions {
            dag.ensure_edge(edge)?;
            f.validate().map_err(|e| e.at_edge(edge))?;
            if f.source_dim() != dag.dim(edge.source) || f.target_dim() != dag.dim(edge.target) {
                return Err(ScbmError::param("mechanism dims do not match node dims").at_edge(edge));
            }
        }
        Ok(Scbm { dag, noise, functions })
    }

    pub fn dag(&self) -> &Dag {
        &self.dag
    }

    pub fn noise(&self, node: usize) -> &GaussianNoiseModel {
        &self.noise[node]
    }

    pub fn functions(&self, edge: EdgeId) -> Result<&EdgeFunctions> {
        self.functions
            .get(&edge)
            .ok_or_else(|| ScbmError::param(format!("edge {edge} is not in the model")))
    }

    pub fn edge_functions(&self) -> impl Iterator<Item = (EdgeId, &EdgeFunctions)> {
        self.functions.iter().map(|(e, f)| (*e, f))
    }

    pub fn is_linear(&self) -> bool {
        self.functions.values().all(|f| f.kind() == MechanismKind::Linear)
    }

    /// Same model with every noise term multiplied by `scale`.
    pub fn with_noise_scale(&self, scale: f64) -> Result<Scbm> {
        let noise = self
            .noise
            .iter()
            .map(|m| m.clone().with_scale(scale))
            .collect::<Result<Vec<_>>>()?;
        Ok(Scbm { noise, ..self.clone() })
    }

    /// Same model with the noise of one node multiplied by `scale`.
    pub fn with_node_noise_scale(&self, node: usize, scale: f64) -> Result<Scbm> {
        if node >= self.noise.len() {
            return Err(ScbmError::param(format!("node {node} is not in the model")));
        }
        let mut noise = self.noise.clone();
        noise[node] = noise[node].clone().with_scale(scale)?;
        Ok(Scbm { noise, ..self.clone() })
    }

    /// Deterministic version of the model (all noise scaled to zero).
    pub fn noiseless(&self) -> Scbm {
        self.with_noise_scale(0.0).expect("zero is a valid scale")
    }

    /// Replaces the mechanism of one edge.
    pub fn with_functions(&self, edge: EdgeId, f: EdgeFunctions) -> Result<Scbm> {
        let mut functions = self.functions.clone();
        if functions.insert(edge, f).is_none() {
            return Err(ScbmError::param(format!("edge {edge} is not in the model")));
        }
        Scbm::new(self.dag.clone(), self.noise.clone(), functions)
    }
}

/// Network shapes for neural ground-truth mechanisms.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArchSpec {
    pub hidden_layers: usize,
    /// Defaults to the dimension of the observed side of each network.
    #[serde(default)]
    pub hidden_width: Option<usize>,
    pub activation: Activation,
    pub orthogonalize: bool,
    /// Multiplier on every ground-truth weight matrix.
    #[serde(default = "one")]
    pub gain: f64,
}

impl Default for ArchSpec {
    fn default() -> Self {
        ArchSpec {
            hidden_layers: 2,
            hidden_width: None,
            activation: Activation::Swish,
            orthogonalize: true,
            gain: 1.0,
        }
    }
}

impl ArchSpec {
    /// Four hidden rectifier layers with raw uniform weights.
    pub fn deep_rectifier() -> Self {
        ArchSpec {
            hidden_layers: 4,
            hidden_width: None,
            activation: Activation::Rectifier,
            orthogonalize: false,
            gain: 1.0,
        }
    }

    fn dims(&self, input: usize, output: usize, observed_side: usize) -> Vec<usize> {
        let width = self.hidden_width.unwrap_or(observed_side);
        std::iter::once(input)
            .chain(std::iter::repeat_n(width, self.hidden_layers))
            .chain(std::iter::once(output))
            .collect()
    }

    fn init(&self) -> WeightInit {
        WeightInit::Uniform01 {
            orthogonalize: self.orthogonalize,
            gain: self.gain,
        }
    }
}

fn check_d_z(dag: &Dag, d_z: usize) -> Result<()> {
    for e in dag.edges() {
        let bound = dag.dim(e.source).min(dag.dim(e.target));
        if d_z == 0 || d_z > bound {
            return Err(ScbmError::param(format!(
                "d_z = {d_z} must lie in 1..={bound} for edge {e}"
            )));
        }
    }
    Ok(())
}

fn sample_noise_models<R: Rng + ?Sized>(dag: &Dag, noise: NoiseSpec, rng: &mut R) -> Result<Vec<GaussianNoiseModel>> {
    (0..dag.num_nodes())
        .map(|v| sample_noise_model(dag.dim(v), noise.structure, noise.strength, rng))
        .collect()
}

/// Uniform[0,1] matrix of rank `rank` at relative tolerance 1e-10.
fn full_rank_uniform<R: Rng + ?Sized>(rows: usize, cols: usize, rng: &mut R) -> Matrix {
    loop {
        let m = Matrix::from_fn(rows, cols, |_, _| rng.random::<f64>());
        if numerical_rank(&m, 1e-10) == rows.min(cols) {
            return m;
        }
    }
}

pub fn sample_linear_scbm<R: Rng + ?Sized>(dag: &Dag, d_z: usize, noise: NoiseSpec, rng: &mut R) -> Result<Scbm> {
    check_d_z(dag, d_z)?;
    let noise_models = sample_noise_models(dag, noise, rng)?;
    let functions = dag
        .edges()
        .map(|e| {
            let bottleneck = full_rank_uniform(dag.dim(e.source), d_z, rng);
            let effect = full_rank_uniform(d_z, dag.dim(e.target), rng);
            (e, EdgeFunctions::Linear { bottleneck, effect })
        })
        .collect();
    Scbm::new(dag.clone(), noise_models, functions)
}

pub fn sample_nonlinear_scbm<R: Rng + ?Sized>(
    dag: &Dag,
    d_z: usize,
    arch: ArchSpec,
    noise: NoiseSpec,
    rng: &mut R,
) -> Result<Scbm> {
    check_d_z(dag, d_z)?;
    if arch.hidden_width == Some(0) {
        return Err(ScbmError::param("hidden width must be positive"));
    }
    let noise_models = sample_noise_models(dag, noise, rng)?;
    let mut functions = BTreeMap::new();
    for e in dag.edges() {
        let (dx_i, dx_j) = (dag.dim(e.source), dag.dim(e.target));
        let bottleneck = init_net(&arch.dims(dx_i, d_z, dx_i), arch.activation, arch.init(), rng)?;
        let effect = init_net(&arch.dims(d_z, dx_j, dx_j), arch.activation, arch.init(), rng)?;
        functions.insert(e, EdgeFunctions::Nonlinear { bottleneck, effect });
    }
    Scbm::new(dag.clone(), noise_models, functions)
}

/// Per-node sample blocks over a subset of the model's nodes.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    n: usize,
    blocks: BTreeMap<usize, Matrix>,
}

impl Dataset {
    pub fn new(blocks: BTreeMap<usize, Matrix>) -> Result<Self> {
        let n = blocks.values().next().map_or(0, Matrix::nrows);
        for (node, b) in &blocks {
            if b.nrows() != n {
                return Err(ScbmError::DimensionMismatch {
                    context: "dataset rows",
                    expected: n,
                    actual: b.nrows(),
                })
                .map_err(|e| ScbmError::Format(format!("node {node}: {e}")));
            }
        }
        Ok(Dataset { n, blocks })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn observed_nodes(&self) -> Vec<usize> {
        self.blocks.keys().copied().collect()
    }

    pub fn blocks(&self) -> &BTreeMap<usize, Matrix> {
        &self.blocks
    }

    pub fn block(&self, node: usize) -> Result<&Matrix> {
        self.blocks
            .get(&node)
            .ok_or_else(|| ScbmError::param(format!("node {node} is not observed in this dataset")))
    }

    /// Restriction to the blocks of `nodes`.
    pub fn split_environment(&self, nodes: &[usize]) -> Result<Dataset> {
        let mut blocks = BTreeMap::new();
        for &v in nodes {
            blocks.insert(v, self.block(v)?.clone());
        }
        Ok(Dataset { n: self.n, blocks })
    }

    pub fn select_rows(&self, idx: &[usize]) -> Dataset {
        Dataset {
            n: idx.len(),
            blocks: self.blocks.iter().map(|(&v, b)| (v, select_rows(b, idx))).collect(),
        }
    }

    /// First `k` rows and the remainder.
    pub fn split_at(&self, k: usize) -> (Dataset, Dataset) {
        let k = k.min(self.n);
        let head = (0..k).collect::<Vec<_>>();
        let tail = (k..self.n).collect::<Vec<_>>();
        (self.select_rows(&head), self.select_rows(&tail))
    }

    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut out = BufWriter::new(out);
        let header: Vec<String> = self
            .blocks
            .iter()
            .flat_map(|(v, b)| (0..b.ncols()).map(move |k| format!("node{v}_dim{k}")))
            .collect();
        let io = |e| ScbmError::io("<csv>", e);
        writeln!(out, "{}", header.join(",")).map_err(io)?;
        let mut line = String::new();
        for r in 0..self.n {
            line.clear();
            for b in self.blocks.values() {
                for c in 0..b.ncols() {
                    if !line.is_empty() {
                        line.push(',');
                    }
                    line.push_str(&b[(r, c)].to_string());
                }
            }
            writeln!(out, "{line}").map_err(io)?;
        }
        out.flush().map_err(io)
    }

    pub fn read_csv<R: Read>(input: R) -> Result<Dataset> {
        let mut lines = BufReader::new(input).lines();
        let io = |e| ScbmError::io("<csv>", e);
        let header = lines
            .next()
            .ok_or_else(|| ScbmError::Format("empty csv".into()))?
            .map_err(io)?;
        let mut layout: Vec<(usize, usize)> = Vec::new();
        for name in header.split(',') {
            let parsed = name
                .trim()
                .strip_prefix("node")
                .and_then(|rest| rest.split_once("_dim"))
                .and_then(|(v, k)| Some((v.parse::<usize>().ok()?, k.parse::<usize>().ok()?)))
                .ok_or_else(|| ScbmError::Format(format!("bad column name {name:?}")))?;
            layout.push(parsed);
        }
        let mut dims: BTreeMap<usize, usize> = BTreeMap::new();
        for &(v, k) in &layout {
            let d = dims.entry(v).or_insert(0);
            if k != *d {
                return Err(ScbmError::Format(format!(
                    "columns of node {v} are not contiguous from dim0"
                )));
            }
            *d += 1;
        }
        let mut columns: Vec<Vec<f64>> = vec![Vec::new(); layout.len()];
        for (lineno, line) in lines.enumerate() {
            let line = line.map_err(io)?;
            if line.trim().is_empty() {
                continue;
            }
            let mut count = 0;
            for (c, field) in line.split(',').enumerate() {
                let v: f64 = field
                    .trim()
                    .parse()
                    .map_err(|_| ScbmError::Format(format!("line {}: bad number {field:?}", lineno + 2)))?;
                columns
                    .get_mut(c)
                    .ok_or_else(|| ScbmError::Format(format!("line {}: too many fields", lineno + 2)))?
                    .push(v);
                count += 1;
            }
            if count != layout.len() {
                return Err(ScbmError::Format(format!(
                    "line {}: expected {} fields",
                    lineno + 2,
                    layout.len()
                )));
            }
        }
        let n = columns.first().map_or(0, Vec::len);
        let mut blocks = BTreeMap::new();
        let mut offset = 0;
        // layout is grouped by node in file order
        let mut seen = Vec::new();
        for &(v, _) in &layout {
            if seen.last() != Some(&v) {
                if seen.contains(&v) {
                    return Err(ScbmError::Format(format!("columns of node {v} are not contiguous")));
                }
                seen.push(v);
            }
        }
        for v in seen {
            let d = dims[&v];
            let block = Matrix::from_fn(n, d, |r, c| columns[offset + c][r]);
            blocks.insert(v, block);
            offset += d;
        }
        Dataset::new(blocks)
    }

    const MAGIC: &'static [u8; 8] = b"SCBMDAT1";

    /// Little-endian layout: magic, `n`, block count, `(node, dim)` per block,
    /// then each block's values row-major.
    pub fn write_binary<W: Write>(&self, out: W) -> Result<()> {
        let mut out = BufWriter::new(out);
        let io = |e| ScbmError::io("<binary>", e);
        out.write_all(Self::MAGIC).map_err(io)?;
        out.write_all(&(self.n as u64).to_le_bytes()).map_err(io)?;
        out.write_all(&(self.blocks.len() as u64).to_le_bytes()).map_err(io)?;
        for (&v, b) in &self.blocks {
            out.write_all(&(v as u64).to_le_bytes()).map_err(io)?;
            out.write_all(&(b.ncols() as u64).to_le_bytes()).map_err(io)?;
        }
        for b in self.blocks.values() {
            for r in 0..b.nrows() {
                for c in 0..b.ncols() {
                    out.write_all(&b[(r, c)].to_le_bytes()).map_err(io)?;
                }
            }
        }
        out.flush().map_err(io)
    }

    pub fn read_binary<R: Read>(input: R) -> Result<Dataset> {
        let mut input = BufReader::new(input);
        let mut word = [0u8; 8];
        let mut read_u64 = |inp: &mut BufReader<R>| -> Result<u64> {
            inp.read_exact(&mut word)
                .map_err(|_| ScbmError::Format("truncated binary dataset".into()))?;
            Ok(u64::from_le_bytes(word))
        };
        let mut magic = [0u8; 8];
        input
            .read_exact(&mut magic)
            .map_err(|_| ScbmError::Format("truncated binary dataset".into()))?;
        if &magic != Self::MAGIC {
            return Err(ScbmError::Format("not a binary dataset (bad magic)".into()));
        }
        let n = read_u64(&mut input)? as usize;
        let count = read_u64(&mut input)? as usize;
        let mut layout = Vec::with_capacity(count.min(1 << 16));
        for _ in 0..count {
            let v = read_u64(&mut input)? as usize;
            let d = read_u64(&mut input)? as usize;
            layout.push((v, d));
        }
        let mut blocks = BTreeMap::new();
        for (v, d) in layout {
            let mut block = Matrix::zeros(n, d);
            for r in 0..n {
                for c in 0..d {
                    block[(r, c)] = f64::from_bits(read_u64(&mut input)?);
                }
            }
            if blocks.insert(v, block).is_some() {
                return Err(ScbmError::Format(format!("node {v} appears twice")));
            }
        }
        Dataset::new(blocks)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let file = File::create(path).map_err(|e| ScbmError::io(path, e))?;
        if path.extension().is_some_and(|e| e == "csv") {
            self.write_csv(file)
        } else {
            self.write_binary(file)
        }
    }

    pub fn load(path: &Path) -> Result<Dataset> {
        let file = File::open(path).map_err(|e| ScbmError::io(path, e))?;
        if path.extension().is_some_and(|e| e == "csv") {
            Self::read_csv(file)
        } else {
            Self::read_binary(file)
        }
    }
}

/// Ancestral sampling with optional hard interventions. Noise is drawn for
/// every node in causal order, so observational and interventional samples
/// from the same seed share their noise realizations.
fn ancestral<R: Rng + ?Sized>(
    scbm: &Scbm,
    n: usize,
    intervention: Option<(usize, &RowDVector<f64>)>,
    rng: &mut R,
) -> Result<Dataset> {
    let dag = scbm.dag();
    let mut blocks: BTreeMap<usize, Matrix> = BTreeMap::new();
    for v in causal_order(dag) {
        let eta = scbm.noise(v).sample(n, rng);
        let x = match intervention {
            Some((node, value)) if node == v => Matrix::from_fn(n, value.len(), |_, c| value[c]),
            _ => {
                let mut x = eta;
                for &p in dag.parents(v) {
                    x += scbm.functions(EdgeId::new(p, v))?.apply(&blocks[&p])?;
                }
                x
            }
        };
        blocks.insert(v, x);
    }
    Dataset::new(blocks)
}

pub fn sample_dataset<R: Rng + ?Sized>(scbm: &Scbm, n: usize, rng: &mut R) -> Result<Dataset> {
    if n == 0 {
        return Err(ScbmError::param("sample size must be at least 1"));
    }
    ancestral(scbm, n, None, rng)
}

/// Samples under `do(X_node = value)`.
pub fn intervene_sample<R: Rng + ?Sized>(
    scbm: &Scbm,
    node: usize,
    value: &[f64],
    n: usize,
    rng: &mut R,
) -> Result<Dataset> {
    if node >= scbm.dag().num_nodes() {
        return Err(ScbmError::param(format!("node {node} is not in the model")));
    }
    if value.len() != scbm.dag().dim(node) {
        return Err(ScbmError::DimensionMismatch {
            context: "intervention value",
            expected: scbm.dag().dim(node),
            actual: value.len(),
        });
    }
    if n == 0 {
        return Err(ScbmError::param("sample size must be at least 1"));
    }
    ancestral(scbm, n, Some((node, &RowDVector::from_row_slice(value))), rng)
}

/// Noise-free `f(b(inputs))` of one edge.
pub fn mechanism_oracle(scbm: &Scbm, edge: EdgeId, inputs: &Matrix) -> Result<Matrix> {
    scbm.functions(edge)?.apply(inputs)
}

/// Ground-truth bottleneck values `b(inputs)` of one edge.
pub fn true_bottleneck(scbm: &Scbm, edge: EdgeId, inputs: &Matrix) -> Result<Matrix> {
    scbm.functions(edge)?.bottleneck(inputs)
}
