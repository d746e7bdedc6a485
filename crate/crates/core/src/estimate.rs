//! Per-edge estimation of bottleneck and effect functions along the causal
//! schedule, and bidirectional R² identifiability scoring.

use std::collections::BTreeMap;
use std::io::{BufWriter, Write};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Result, ScbmError};
use crate::graph::{conditioning_set, estimation_schedule, Dag, EdgeId};
use crate::linalg::{column_means, hstack, ols_fit, r2_score, rank_factorize, Matrix, RANK_REL_TOL};
use crate::mlp::{
    encoder_decoder_forward, forward, init_net, train_encoder_decoder, train_regressor, Activation, AdamW,
    EncoderDecoder, LrSchedule, NeuralNet, TrainConfig, WeightInit,
};
use crate::rng;
use crate::synth::{true_bottleneck, Dataset, Scbm};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Linear,
    Nonlinear,
}

/// Encoder–decoder shapes and training budget for nonlinear estimation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetworkSpec {
    pub encoder_hidden: Vec<usize>,
    pub decoder_hidden: Vec<usize>,
    pub activation: Activation,
    pub train: TrainConfig,
}

/// Regressor used by nonlinear identifiability scoring.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScorerSpec {
    pub hidden: Vec<usize>,
    pub activation: Activation,
    pub train: TrainConfig,
}

fn desk_train(epochs: usize) -> TrainConfig {
    TrainConfig {
        epochs,
        batch_size: 256,
        optimizer: AdamW::default(),
        schedule: LrSchedule::CosineWarmupRelative {
            max_lr: 3e-3,
            min_lr: 3e-5,
            warmup_fraction: 0.05,
        },
        seed: 0,
    }
}

impl Default for NetworkSpec {
    fn default() -> Self {
        NetworkSpec {
            encoder_hidden: vec![64, 32],
            decoder_hidden: vec![32, 64],
            activation: Activation::Swish,
            train: desk_train(60),
        }
    }
}

impl NetworkSpec {
    /// Estimator used for the identifiability and misspecification sweeps.
    pub fn paper_identifiability() -> Self {
        NetworkSpec {
            encoder_hidden: vec![256, 128, 64, 64, 32],
            decoder_hidden: vec![32, 64, 64, 128, 256],
            activation: Activation::Swish,
            train: TrainConfig {
                epochs: 500,
                batch_size: 1024,
                optimizer: AdamW::default(),
                schedule: LrSchedule::CosineWarmup {
                    max_lr: 1e-5,
                    min_lr: 1e-7,
                    warmup_steps: 1000,
                    decay_steps: 10_000,
                },
                seed: 0,
            },
        }
    }

    /// Estimator used for the transfer experiment.
    pub fn paper_transfer() -> Self {
        NetworkSpec {
            encoder_hidden: vec![128; 6],
            decoder_hidden: vec![128; 6],
            activation: Activation::Swish,
            train: TrainConfig {
                epochs: 500,
                batch_size: 512,
                optimizer: AdamW::default(),
                schedule: LrSchedule::Constant { lr: 5e-6 },
                seed: 0,
            },
        }
    }
}

impl Default for ScorerSpec {
    fn default() -> Self {
        ScorerSpec {
            hidden: vec![64, 64],
            activation: Activation::Swish,
            train: desk_train(30),
        }
    }
}

fn default_rank_tol() -> f64 {
    RANK_REL_TOL
}

fn default_train_fraction() -> f64 {
    0.8
}

fn default_reference_rows() -> usize {
    128
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EstimatorConfig {
    pub mode: Mode,
    #[serde(default = "default_rank_tol")]
    pub rank_tol: f64,
    #[serde(default)]
    pub network: NetworkSpec,
    #[serde(default)]
    pub scorer: ScorerSpec,
    /// Share of rows used to fit the scoring regressors; the rest is held out.
    #[serde(default = "default_train_fraction")]
    pub train_fraction: f64,
    /// Conditioning rows kept to marginalize nonlinear effect estimates.
    #[serde(default = "default_reference_rows")]
    pub reference_rows: usize,
}

impl EstimatorConfig {
    pub fn new(mode: Mode) -> Self {
        EstimatorConfig {
            mode,
            rank_tol: default_rank_tol(),
            network: NetworkSpec::default(),
            scorer: ScorerSpec::default(),
            train_fraction: default_train_fraction(),
            reference_rows: default_reference_rows(),
        }
    }

    pub fn linear() -> Self {
        Self::new(Mode::Linear)
    }

    pub fn nonlinear() -> Self {
        Self::new(Mode::Nonlinear)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.train_fraction > 0.0 && self.train_fraction < 1.0) {
            return Err(ScbmError::Config(format!(
                "train_fraction must lie in (0, 1), got {}",
                self.train_fraction
            )));
        }
        if !(self.rank_tol > 0.0 && self.rank_tol < 1.0) {
            return Err(ScbmError::Config(format!(
                "rank_tol must lie in (0, 1), got {}",
                self.rank_tol
            )));
        }
        if self.mode == Mode::Nonlinear {
            self.network.train.validate()?;
            self.scorer.train.validate()?;
            if self.reference_rows == 0 {
                return Err(ScbmError::Config("reference_rows must be at least 1".into()));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum EstimatedFunctions {
    Linear {
        #[serde(rename = "B", with = "crate::linalg::rows")]
        bottleneck: Matrix,
        #[serde(rename = "F", with = "crate::linalg::rows")]
        effect: Matrix,
        /// Coefficient block of the source in the joint regression.
        #[serde(rename = "M", with = "crate::linalg::rows")]
        joint_map: Matrix,
    },
    Nonlinear {
        encoder: NeuralNet,
        decoder: NeuralNet,
        /// Conditioning values averaged over when predicting the effect.
        #[serde(with = "crate::linalg::rows")]
        cond_reference: Matrix,
    },
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FitDiagnostics {
    pub n: usize,
    /// Width of the regression input (source plus conditioning).
    pub regression_dim: usize,
    /// Fewer samples than regressors; the minimum-norm solution was used.
    pub underdetermined: bool,
    pub rank_deficient: bool,
    pub factorization_residual: Option<f64>,
    pub final_loss: Option<f64>,
    pub steps: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EdgeEstimate {
    pub edge: EdgeId,
    pub d_hat: usize,
    pub functions: EstimatedFunctions,
    pub cond_set: Vec<EdgeId>,
    pub diagnostics: FitDiagnostics,
}

#[derive(Serialize, Deserialize)]
struct EstimateRepr {
    source: usize,
    target: usize,
    d_hat: usize,
    #[serde(flatten)]
    functions: EstimatedFunctions,
    cond_set: Vec<EdgeId>,
    diagnostics: FitDiagnostics,
}

impl Serialize for EdgeEstimate {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        EstimateRepr {
            source: self.edge.source,
            target: self.edge.target,
            d_hat: self.d_hat,
            functions: self.functions.clone(),
            cond_set: self.cond_set.clone(),
            diagnostics: self.diagnostics.clone(),
        }
        .serialize(s)
    }
}

impl<'de> Deserialize<'de> for EdgeEstimate {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let r = EstimateRepr::deserialize(d)?;
        Ok(EdgeEstimate {
            edge: EdgeId::new(r.source, r.target),
            d_hat: r.d_hat,
            functions: r.functions,
            cond_set: r.cond_set,
            diagnostics: r.diagnostics,
        })
    }
}

impl EdgeEstimate {
    pub fn source_dim(&self) -> usize {
        match &self.functions {
            EstimatedFunctions::Linear { bottleneck, .. } => bottleneck.nrows(),
            EstimatedFunctions::Nonlinear { encoder, .. } => encoder.input_dim(),
        }
    }

    pub fn target_dim(&self) -> usize {
        match &self.functions {
            EstimatedFunctions::Linear { effect, .. } => effect.ncols(),
            EstimatedFunctions::Nonlinear { decoder, .. } => decoder.output_dim(),
        }
    }

    /// `B̂·F̂` for a linear estimate.
    pub fn composed_map(&self) -> Option<Matrix> {
        match &self.functions {
            EstimatedFunctions::Linear { bottleneck, effect, .. } => Some(bottleneck * effect),
            EstimatedFunctions::Nonlinear { .. } => None,
        }
    }

    fn check_source(&self, source: &Matrix) -> Result<()> {
        if source.ncols() != self.source_dim() {
            return Err(ScbmError::DimensionMismatch {
                context: "estimated bottleneck input",
                expected: self.source_dim(),
                actual: source.ncols(),
            });
        }
        Ok(())
    }

    /// Effect of the source alone on the target: `x·B̂·F̂` in the linear case;
    /// for networks the decoder output averaged over the reference
    /// conditioning values, relative to its value at `x = 0`.
    pub fn predict_effect(&self, source: &Matrix) -> Result<Matrix> {
        self.check_source(source)?;
        match &self.functions {
            EstimatedFunctions::Linear { bottleneck, effect, .. } => Ok(source * bottleneck * effect),
            EstimatedFunctions::Nonlinear {
                encoder,
                decoder,
                cond_reference,
            } => {
                let inputs = source.clone().insert_row(source.nrows(), 0.0);
                let code = forward(encoder, &inputs)?;
                let mut acc = Matrix::zeros(inputs.nrows(), decoder.output_dim());
                if cond_reference.ncols() == 0 {
                    acc = forward(decoder, &code)?;
                } else {
                    for r in 0..cond_reference.nrows() {
                        let c = Matrix::from_fn(inputs.nrows(), cond_reference.ncols(), |_, k| cond_reference[(r, k)]);
                        acc += forward(decoder, &hstack(&[&code, &c])?)?;
                    }
                    acc /= cond_reference.nrows() as f64;
                }
                let baseline = acc.row(source.nrows()).into_owned();
                let mut out = acc.rows(0, source.nrows()).into_owned();
                for mut row in out.row_iter_mut() {
                    row -= &baseline;
                }
                Ok(out)
            }
        }
    }
}

/// `Ẑ = b̂(source)`, row-wise.
pub fn apply_bottleneck(est: &EdgeEstimate, source: &Matrix) -> Result<Matrix> {
    est.check_source(source)?;
    match &est.functions {
        EstimatedFunctions::Linear { bottleneck, .. } => Ok(source * bottleneck),
        EstimatedFunctions::Nonlinear { encoder, .. } => forward(encoder, source),
    }
}

/// Column means and standard deviations; constant columns get scale 1.
fn standardization(m: &Matrix) -> (Vec<f64>, Vec<f64>) {
    let mean = column_means(m);
    let n = m.nrows().max(1) as f64;
    let sd = (0..m.ncols())
        .map(|c| {
            let var = m.column(c).iter().map(|v| (v - mean[c]).powi(2)).sum::<f64>() / n;
            if var > 0.0 {
                var.sqrt()
            } else {
                1.0
            }
        })
        .collect();
    (mean.iter().copied().collect(), sd)
}

fn standardize(m: &Matrix, (mean, sd): &(Vec<f64>, Vec<f64>)) -> Matrix {
    Matrix::from_fn(m.nrows(), m.ncols(), |r, c| (m[(r, c)] - mean[c]) / sd[c])
}

fn reference_rows(cond: &Matrix, count: usize) -> Matrix {
    let n = cond.nrows();
    let take = count.min(n);
    let idx: Vec<usize> = (0..take).map(|k| k * n / take.max(1)).collect();
    crate::linalg::select_rows(cond, &idx)
}

/// Fits the joint map from `source` to `target` given `cond` and factorizes
/// it through a `d_hat`-dimensional bottleneck.
pub fn fit_edge(
    edge: EdgeId,
    source: &Matrix,
    target: &Matrix,
    cond: &Matrix,
    d_hat: usize,
    config: &EstimatorConfig,
    seed: u64,
) -> Result<EdgeEstimate> {
    let n = source.nrows();
    if target.nrows() != n || cond.nrows() != n {
        return Err(ScbmError::DimensionMismatch {
            context: "edge regression rows",
            expected: n,
            actual: if target.nrows() != n {
                target.nrows()
            } else {
                cond.nrows()
            },
        });
    }
    let bound = source.ncols().min(target.ncols());
    if d_hat == 0 || d_hat > bound {
        return Err(ScbmError::param(format!("d_hat = {d_hat} must lie in 1..={bound}")));
    }
    let regression_dim = source.ncols() + cond.ncols();
    let mut diagnostics = FitDiagnostics {
        n,
        regression_dim,
        underdetermined: n < regression_dim,
        ..FitDiagnostics::default()
    };
    let functions = match config.mode {
        Mode::Linear => {
            let design = if cond.ncols() > 0 {
                hstack(&[source, cond])?
            } else {
                source.clone()
            };
            let fit = ols_fit(&design, target)?;
            let joint_map = fit.coef.rows(0, source.ncols()).into_owned();
            let fac = rank_factorize(&joint_map, d_hat, config.rank_tol)?;
            diagnostics.rank_deficient = fit.rank_deficient || fac.rank_deficient;
            diagnostics.factorization_residual = Some(fac.residual);
            EstimatedFunctions::Linear {
                bottleneck: fac.left,
                effect: fac.right,
                joint_map,
            }
        }
        Mode::Nonlinear => {
            let spec = &config.network;
            let mut init_rng = rng::stream(seed, rng::streams::ESTIMATE);
            let enc_dims: Vec<usize> = std::iter::once(source.ncols())
                .chain(spec.encoder_hidden.iter().copied())
                .chain(std::iter::once(d_hat))
                .collect();
            let dec_dims: Vec<usize> = std::iter::once(d_hat + cond.ncols())
                .chain(spec.decoder_hidden.iter().copied())
                .chain(std::iter::once(target.ncols()))
                .collect();
            let pair = EncoderDecoder {
                encoder: init_net(&enc_dims, spec.activation, WeightInit::FanIn, &mut init_rng)?,
                decoder: init_net(&dec_dims, spec.activation, WeightInit::FanIn, &mut init_rng)?,
            };
            let xs = standardization(source);
            let ys = standardization(target);
            let cs = standardization(cond);
            let x = standardize(source, &xs);
            let y = standardize(target, &ys);
            let c = standardize(cond, &cs);
            let train = TrainConfig { seed, ..spec.train };
            let cond_arg = (c.ncols() > 0).then_some(&c);
            let out = train_encoder_decoder(pair, &x, cond_arg, &y, &train)?;
            diagnostics.final_loss = out.final_loss();
            diagnostics.steps = out.steps;
            let EncoderDecoder {
                mut encoder,
                mut decoder,
            } = out.model;
            encoder.prepend_affine(&xs.0, &xs.1);
            let shift: Vec<f64> = std::iter::repeat_n(0.0, d_hat).chain(cs.0.iter().copied()).collect();
            let scale: Vec<f64> = std::iter::repeat_n(1.0, d_hat).chain(cs.1.iter().copied()).collect();
            decoder.prepend_affine(&shift, &scale);
            decoder.append_affine(&ys.1, &ys.0);
            EstimatedFunctions::Nonlinear {
                encoder,
                decoder,
                cond_reference: reference_rows(cond, config.reference_rows),
            }
        }
    };
    Ok(EdgeEstimate {
        edge,
        d_hat,
        functions,
        cond_set: Vec::new(),
        diagnostics,
    })
}

/// Estimates one edge from a dataset, given the conditioning values.
pub fn estimate_edge(
    data: &Dataset,
    edge: EdgeId,
    cond_values: &Matrix,
    d_hat: usize,
    config: &EstimatorConfig,
    seed: u64,
) -> Result<EdgeEstimate> {
    let source = data.block(edge.source)?;
    let target = data.block(edge.target)?;
    fit_edge(edge, source, target, cond_values, d_hat, config, seed)
}

/// Assumed bottleneck dimension per edge.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DHat {
    pub default: usize,
    #[serde(default)]
    pub overrides: BTreeMap<EdgeId, usize>,
}

impl DHat {
    pub fn uniform(d: usize) -> Self {
        DHat {
            default: d,
            overrides: BTreeMap::new(),
        }
    }

    pub fn for_edge(&self, edge: EdgeId) -> usize {
        self.overrides.get(&edge).copied().unwrap_or(self.default)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EstimatedScbm {
    pub dag: Dag,
    pub mode: Mode,
    pub estimates: BTreeMap<EdgeId, EdgeEstimate>,
    /// Order in which the edges were estimated.
    pub schedule: Vec<EdgeId>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct EstimatedRepr {
    graph: Dag,
    mode: Mode,
    schedule: Vec<EdgeId>,
    edges: Vec<EdgeEstimate>,
}

impl Serialize for EstimatedScbm {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        EstimatedRepr {
            graph: self.dag.clone(),
            mode: self.mode,
            schedule: self.schedule.clone(),
            edges: self.estimates.values().cloned().collect(),
        }
        .serialize(s)
    }
}

impl<'de> Deserialize<'de> for EstimatedScbm {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let r = EstimatedRepr::deserialize(d)?;
        let estimates: BTreeMap<EdgeId, EdgeEstimate> = r.edges.into_iter().map(|e| (e.edge, e)).collect();
        if estimates.len() != r.graph.num_edges() || estimates.keys().any(|e| !r.graph.has_edge(*e)) {
            return Err(serde::de::Error::custom("estimates do not cover the graph's edges"));
        }
        Ok(EstimatedScbm {
            dag: r.graph,
            mode: r.mode,
            estimates,
            schedule: r.schedule,
        })
    }
}

impl EstimatedScbm {
    pub fn estimate(&self, edge: EdgeId) -> Result<&EdgeEstimate> {
        self.estimates
            .get(&edge)
            .ok_or_else(|| ScbmError::param(format!("edge {edge} has no estimate")))
    }
}

/// Runs the estimation schedule: every edge is fit with the estimated
/// bottlenecks of its conditioning set, which the schedule has already
/// produced.
pub fn estimate_all(
    data: &Dataset,
    dag: &Dag,
    d_hat: &DHat,
    config: &EstimatorConfig,
    seed: u64,
) -> Result<EstimatedScbm> {
    config.validate()?;
    for v in 0..dag.num_nodes() {
        let block = data.block(v)?;
        if block.ncols() != dag.dim(v) {
            return Err(ScbmError::DimensionMismatch {
                context: "dataset block",
                expected: dag.dim(v),
                actual: block.ncols(),
            });
        }
    }
    let schedule = estimation_schedule(dag);
    let mut estimates: BTreeMap<EdgeId, EdgeEstimate> = BTreeMap::new();
    let mut cached_z: BTreeMap<EdgeId, Matrix> = BTreeMap::new();
    for (k, &edge) in schedule.iter().enumerate() {
        let cond_set = conditioning_set(dag, edge)?;
        let blocks: Vec<&Matrix> = cond_set
            .iter()
            .map(|e| cached_z.get(e).expect("schedule prefix property"))
            .collect();
        let cond = if blocks.is_empty() {
            Matrix::zeros(data.n(), 0)
        } else {
            hstack(&blocks)?
        };
        let mut est = estimate_edge(
            data,
            edge,
            &cond,
            d_hat.for_edge(edge),
            config,
            rng::derive(seed, k as u64),
        )
        .map_err(|e| e.at_edge(edge))?;
        est.cond_set = cond_set;
        cached_z.insert(edge, apply_bottleneck(&est, data.block(edge.source)?)?);
        estimates.insert(edge, est);
    }
    Ok(EstimatedScbm {
        dag: dag.clone(),
        mode: config.mode,
        estimates,
        schedule,
    })
}

/// Held-out R² of predicting `b` from `a`, fit on the first `train_fraction`
/// of the rows.
fn directional_r2(a: &Matrix, b: &Matrix, config: &EstimatorConfig, seed: u64) -> Result<f64> {
    let n = a.nrows();
    let k = ((n as f64) * config.train_fraction).floor() as usize;
    if k < 2 || n - k < 2 {
        return Err(ScbmError::param(format!("{n} rows are too few to score")));
    }
    let (a_tr, a_te) = (a.rows(0, k).into_owned(), a.rows(k, n - k).into_owned());
    let (b_tr, b_te) = (b.rows(0, k).into_owned(), b.rows(k, n - k).into_owned());
    let pred = match config.mode {
        Mode::Linear => ols_fit(&a_tr, &b_tr)?.predict(&a_te)?,
        Mode::Nonlinear => {
            let spec = &config.scorer;
            let mut init_rng = rng::stream(seed, rng::streams::SCORE);
            let dims: Vec<usize> = std::iter::once(a.ncols())
                .chain(spec.hidden.iter().copied())
                .chain(std::iter::once(b.ncols()))
                .collect();
            let net = init_net(&dims, spec.activation, WeightInit::FanIn, &mut init_rng)?;
            let xs = standardization(&a_tr);
            let ys = standardization(&b_tr);
            let train = TrainConfig { seed, ..spec.train };
            let mut net = train_regressor(net, &standardize(&a_tr, &xs), &standardize(&b_tr, &ys), &train)?.model;
            net.prepend_affine(&xs.0, &xs.1);
            net.append_affine(&ys.1, &ys.0);
            forward(&net, &a_te)?
        }
    };
    Ok(r2_score(&b_te, &pred)?.average)
}

/// Both directional held-out R² values.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BidirectionalScore {
    pub true_to_hat: f64,
    pub hat_to_true: f64,
}

impl BidirectionalScore {
    pub fn mean(&self) -> f64 {
        0.5 * (self.true_to_hat + self.hat_to_true)
    }
}

pub fn bidirectional_score(
    z_true: &Matrix,
    z_hat: &Matrix,
    config: &EstimatorConfig,
    seed: u64,
) -> Result<BidirectionalScore> {
    if z_true.nrows() != z_hat.nrows() {
        return Err(ScbmError::DimensionMismatch {
            context: "identifiability rows",
            expected: z_true.nrows(),
            actual: z_hat.nrows(),
        });
    }
    Ok(BidirectionalScore {
        true_to_hat: directional_r2(z_true, z_hat, config, rng::derive(seed, 0))?,
        hat_to_true: directional_r2(z_hat, z_true, config, rng::derive(seed, 1))?,
    })
}

/// Mean of the held-out R² in both directions between true and estimated
/// bottleneck values.
pub fn identifiability_score(z_true: &Matrix, z_hat: &Matrix, config: &EstimatorConfig, seed: u64) -> Result<f64> {
    Ok(bidirectional_score(z_true, z_hat, config, seed)?.mean())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EdgeScore {
    pub edge: EdgeId,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelScore {
    pub per_edge: Vec<EdgeScore>,
    /// Unweighted mean over edges; NaN for an edgeless graph.
    pub mean: f64,
}

/// Scores every estimated bottleneck against the ground truth on
/// `eval_data`. Edges are scored in parallel with per-edge seeds.
pub fn model_identifiability(
    truth: &Scbm,
    est: &EstimatedScbm,
    eval_data: &Dataset,
    config: &EstimatorConfig,
    seed: u64,
) -> Result<ModelScore> {
    let edges: Vec<EdgeId> = truth.dag().edges().collect();
    let per_edge = edges
        .par_iter()
        .enumerate()
        .map(|(k, &edge)| {
            let source = eval_data.block(edge.source)?;
            let z = true_bottleneck(truth, edge, source)?;
            let z_hat = apply_bottleneck(est.estimate(edge)?, source)?;
            let score =
                identifiability_score(&z, &z_hat, config, rng::derive(seed, k as u64)).map_err(|e| e.at_edge(edge))?;
            Ok(EdgeScore { edge, score })
        })
        .collect::<Result<Vec<_>>>()?;
    let mean = if per_edge.is_empty() {
        f64::NAN
    } else {
        per_edge.iter().map(|s| s.score).sum::<f64>() / per_edge.len() as f64
    };
    Ok(ModelScore { per_edge, mean })
}

/// Mean absolute entrywise difference of two predictors on `inputs`.
pub fn effect_mae<E, T>(est_map: E, truth_oracle: T, inputs: &Matrix) -> Result<f64>
where
    E: Fn(&Matrix) -> Result<Matrix>,
    T: Fn(&Matrix) -> Result<Matrix>,
{
    let a = est_map(inputs)?;
    let b = truth_oracle(inputs)?;
    if a.shape() != b.shape() {
        return Err(ScbmError::param(format!(
            "predictor outputs differ in shape: {:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    if a.is_empty() {
        return Err(ScbmError::param("effect MAE needs at least one input row"));
    }
    let count = (b.nrows() * b.ncols()) as f64;
    Ok((a - b).abs().sum() / count)
}

/// Point cloud of true and estimated bottleneck values, one row per sample.
pub fn write_cloud_csv<W: Write>(out: W, z_true: &Matrix, z_hat: &Matrix) -> Result<()> {
    if z_true.nrows() != z_hat.nrows() {
        return Err(ScbmError::DimensionMismatch {
            context: "cloud rows",
            expected: z_true.nrows(),
            actual: z_hat.nrows(),
        });
    }
    let io = |e| ScbmError::io("<cloud csv>", e);
    let mut out = BufWriter::new(out);
    let header: Vec<String> = (0..z_true.ncols())
        .map(|k| format!("z_true_{k}"))
        .chain((0..z_hat.ncols()).map(|k| format!("z_hat_{k}")))
        .collect();
    writeln!(out, "{}", header.join(",")).map_err(io)?;
    for r in 0..z_true.nrows() {
        let fields: Vec<String> = z_true
            .row(r)
            .iter()
            .chain(z_hat.row(r).iter())
            .map(f64::to_string)
            .collect();
        writeln!(out, "{}", fields.join(",")).map_err(io)?;
    }
    out.flush().map_err(io)
}

#[doc(hidden)]
pub fn encoder_decoder_output(est: &EdgeEstimate, source: &Matrix, cond: &Matrix) -> Result<Matrix> {
    match &est.functions {
        EstimatedFunctions::Nonlinear { encoder, decoder, .. } => {
            encoder_decoder_forward(encoder, decoder, source, (cond.ncols() > 0).then_some(cond))
        }
        EstimatedFunctions::Linear { .. } => Err(ScbmError::UnsupportedModel("linear estimate has no decoder".into())),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::sample_er_dag;
    use crate::linalg::singular_values;
    use crate::rng::seeded;
    use crate::synth::{
        mechanism_oracle, sample_dataset, sample_linear_scbm, sample_nonlinear_scbm, ArchSpec, EdgeFunctions, NoiseSpec,
    };
    use approx::assert_abs_diff_eq;
    use rand::seq::SliceRandom;
    use rand::Rng;
    use rand_distr::StandardNormal;

    fn randn(rows: usize, cols: usize, rng: &mut impl Rng) -> Matrix {
        Matrix::from_fn(rows, cols, |_, _| rng.sample(StandardNormal))
    }

    fn complete3(dim: usize) -> Dag {
        Dag::with_uniform_dim(3, dim, &[(0, 1), (0, 2), (1, 2)]).unwrap()
    }

    fn truth_as_estimate(scbm: &Scbm) -> EstimatedScbm {
        let estimates = scbm
            .edge_functions()
            .map(|(e, f)| {
                let EdgeFunctions::Linear { bottleneck, effect } = f else {
                    panic!("linear only")
                };
                let est = EdgeEstimate {
                    edge: e,
                    d_hat: f.d_z(),
                    functions: EstimatedFunctions::Linear {
                        bottleneck: bottleneck.clone(),
                        effect: effect.clone(),
                        joint_map: bottleneck * effect,
                    },
                    cond_set: vec![],
                    diagnostics: FitDiagnostics::default(),
                };
                (e, est)
            })
            .collect();
        EstimatedScbm {
            dag: scbm.dag().clone(),
            mode: Mode::Linear,
            estimates,
            schedule: estimation_schedule(scbm.dag()),
        }
    }

    #[test]
    fn noiseless_single_edge_recovers_joint_map() {
        let dag = Dag::with_uniform_dim(2, 5, &[(0, 1)]).unwrap();
        let mut rng = seeded(1);
        let m = sample_linear_scbm(&dag, 2, NoiseSpec::default(), &mut rng).unwrap();
        let m = m.with_node_noise_scale(1, 0.0).unwrap();
        let data = sample_dataset(&m, 500, &mut rng).unwrap();
        let est = estimate_edge(
            &data,
            EdgeId::new(0, 1),
            &Matrix::zeros(500, 0),
            2,
            &EstimatorConfig::linear(),
            0,
        )
        .unwrap();
        let truth = m.functions(EdgeId::new(0, 1)).unwrap().joint_map().unwrap();
        assert_abs_diff_eq!(est.composed_map().unwrap(), truth, epsilon = 1e-8);
        assert!(est.diagnostics.factorization_residual.unwrap() <= 1e-8);
    }

    #[test]
    fn full_dimension_bottleneck_is_invertible() {
        let dag = Dag::with_uniform_dim(2, 4, &[(0, 1)]).unwrap();
        let mut rng = seeded(2);
        let m = sample_linear_scbm(&dag, 2, NoiseSpec::default(), &mut rng).unwrap();
        let data = sample_dataset(&m, 2000, &mut rng).unwrap();
        let est = estimate_edge(
            &data,
            EdgeId::new(0, 1),
            &Matrix::zeros(2000, 0),
            4,
            &EstimatorConfig::linear(),
            0,
        )
        .unwrap();
        assert!(est.diagnostics.factorization_residual.unwrap() <= 1e-10);
        let EstimatedFunctions::Linear { bottleneck, .. } = &est.functions else {
            unreachable!()
        };
        let s = singular_values(bottleneck);
        assert!(s[3] > 1e-8 * s[0]);
        assert!(estimate_edge(
            &data,
            EdgeId::new(0, 1),
            &Matrix::zeros(2000, 0),
            5,
            &EstimatorConfig::linear(),
            0
        )
        .is_err());
    }

    #[test]
    fn conditioned_edge_recovers_direct_effect() {
        // oracle: with Ẑ_(0,1) blocking the path through X_0, the X_1
        // coefficient block of the joint regression is the true B·F of (1,2)
        let dag = complete3(5);
        let mut rng = seeded(3);
        let m = sample_linear_scbm(&dag, 2, NoiseSpec::default(), &mut rng).unwrap();
        let data = sample_dataset(&m, 30_000, &mut rng).unwrap();
        let est = estimate_all(&data, &dag, &DHat::uniform(2), &EstimatorConfig::linear(), 4).unwrap();
        let e12 = est.estimate(EdgeId::new(1, 2)).unwrap();
        let EstimatedFunctions::Linear { joint_map, .. } = &e12.functions else {
            unreachable!()
        };
        let truth = m.functions(EdgeId::new(1, 2)).unwrap().joint_map().unwrap();
        assert!((joint_map - &truth).amax() <= 0.05, "{}", (joint_map - &truth).amax());
    }

    #[test]
    fn schedule_and_conditioning_sets() {
        let mut rng = seeded(5);
        let dag = complete3(3);
        let m = sample_linear_scbm(&dag, 1, NoiseSpec::default(), &mut rng).unwrap();
        let data = sample_dataset(&m, 200, &mut rng).unwrap();
        let est = estimate_all(&data, &dag, &DHat::uniform(1), &EstimatorConfig::linear(), 0).unwrap();
        assert_eq!(
            est.schedule,
            vec![EdgeId::new(0, 1), EdgeId::new(1, 2), EdgeId::new(0, 2)]
        );
        assert_eq!(est.estimate(EdgeId::new(0, 1)).unwrap().cond_set, vec![]);
        assert_eq!(
            est.estimate(EdgeId::new(1, 2)).unwrap().cond_set,
            vec![EdgeId::new(0, 1)]
        );
        assert_eq!(
            est.estimate(EdgeId::new(0, 2)).unwrap().cond_set,
            vec![EdgeId::new(1, 2)]
        );

        let chain = Dag::with_uniform_dim(3, 3, &[(0, 1), (1, 2)]).unwrap();
        let m = sample_linear_scbm(&chain, 1, NoiseSpec::default(), &mut rng).unwrap();
        let data = sample_dataset(&m, 200, &mut rng).unwrap();
        let est = estimate_all(&data, &chain, &DHat::uniform(1), &EstimatorConfig::linear(), 0).unwrap();
        assert_eq!(est.estimates.len(), 2);
        assert_eq!(
            est.estimate(EdgeId::new(1, 2)).unwrap().cond_set,
            vec![EdgeId::new(0, 1)]
        );

        let empty = Dag::with_uniform_dim(3, 3, &[]).unwrap();
        let m = sample_linear_scbm(&empty, 1, NoiseSpec::default(), &mut rng).unwrap();
        let data = sample_dataset(&m, 20, &mut rng).unwrap();
        assert!(
            estimate_all(&data, &empty, &DHat::uniform(1), &EstimatorConfig::linear(), 0)
                .unwrap()
                .estimates
                .is_empty()
        );
    }

    #[test]
    fn per_edge_overrides_and_edge_errors() {
        let mut rng = seeded(6);
        let dag = complete3(3);
        let m = sample_linear_scbm(&dag, 1, NoiseSpec::default(), &mut rng).unwrap();
        let data = sample_dataset(&m, 300, &mut rng).unwrap();
        let mut d_hat = DHat::uniform(1);
        d_hat.overrides.insert(EdgeId::new(0, 2), 3);
        let est = estimate_all(&data, &dag, &d_hat, &EstimatorConfig::linear(), 0).unwrap();
        assert_eq!(est.estimate(EdgeId::new(0, 2)).unwrap().d_hat, 3);
        d_hat.overrides.insert(EdgeId::new(1, 2), 7);
        let err = estimate_all(&data, &dag, &d_hat, &EstimatorConfig::linear(), 0).unwrap_err();
        assert!(matches!(err, ScbmError::Edge { edge, .. } if edge == EdgeId::new(1, 2)));
    }

    #[test]
    fn apply_bottleneck_is_the_linear_map() {
        let mut rng = seeded(7);
        let dag = Dag::with_uniform_dim(2, 4, &[(0, 1)]).unwrap();
        let m = sample_linear_scbm(&dag, 2, NoiseSpec::default(), &mut rng).unwrap();
        let data = sample_dataset(&m, 400, &mut rng).unwrap();
        let est = estimate_edge(
            &data,
            EdgeId::new(0, 1),
            &Matrix::zeros(400, 0),
            2,
            &EstimatorConfig::linear(),
            0,
        )
        .unwrap();
        let x = randn(10, 4, &mut rng);
        let EstimatedFunctions::Linear { bottleneck, .. } = &est.functions else {
            unreachable!()
        };
        let z = apply_bottleneck(&est, &x).unwrap();
        assert_eq!(z, &x * bottleneck);
        assert_eq!(z.ncols(), 2);
        assert_eq!(apply_bottleneck(&est, &x).unwrap(), z);
        assert!(apply_bottleneck(&est, &randn(3, 3, &mut rng)).is_err());
    }

    #[test]
    fn score_examples() {
        let mut rng = seeded(8);
        let cfg = EstimatorConfig::linear();
        let z = randn(2000, 2, &mut rng);
        assert_eq!(identifiability_score(&z, &z, &cfg, 0).unwrap(), 1.0);

        let a = loop {
            let a = randn(2, 2, &mut rng);
            let s = singular_values(&a);
            if s[1] > 0.2 * s[0] {
                break a;
            }
        };
        assert!(identifiability_score(&z, &(&z * a), &cfg, 0).unwrap() >= 0.999);

        // correlated pair, keep only the first column: the reverse direction
        // can only explain the shared part of the second column
        let mix = Matrix::from_row_slice(2, 2, &[1.0, 0.6, 0.0, 0.8]);
        let zc = &z * mix;
        let first = zc.columns(0, 1).into_owned();
        let s = bidirectional_score(&zc, &first, &cfg, 0).unwrap();
        assert!(s.true_to_hat > 0.999);
        assert!(s.hat_to_true < 0.75 && s.hat_to_true > 0.6, "{}", s.hat_to_true);
        assert!(s.mean() < 0.9);
    }

    #[test]
    fn linear_score_is_symmetric() {
        let mut rng = seeded(9);
        let cfg = EstimatorConfig::linear();
        let a = randn(500, 3, &mut rng);
        let b = &a * randn(3, 2, &mut rng) + randn(500, 2, &mut rng);
        let ab = identifiability_score(&a, &b, &cfg, 1).unwrap();
        let ba = identifiability_score(&b, &a, &cfg, 2).unwrap();
        assert_eq!(ab, ba);
    }

    #[test]
    fn ground_truth_estimate_scores_one_and_shuffling_destroys_it() {
        let mut rng = seeded(10);
        let dag = sample_er_dag(5, 0.7, vec![5; 5], &mut rng).unwrap();
        let m = sample_linear_scbm(&dag, 2, NoiseSpec::default(), &mut rng).unwrap();
        let data = sample_dataset(&m, 5000, &mut rng).unwrap();
        let cfg = EstimatorConfig::linear();
        let truth = truth_as_estimate(&m);
        let s = model_identifiability(&m, &truth, &data, &cfg, 0).unwrap();
        assert_abs_diff_eq!(s.mean, 1.0, epsilon = 1e-12);

        let z = true_bottleneck(&m, truth.schedule[0], data.block(truth.schedule[0].source).unwrap()).unwrap();
        let mut perm: Vec<usize> = (0..z.nrows()).collect();
        perm.shuffle(&mut rng);
        let shuffled = crate::linalg::select_rows(&z, &perm);
        assert!(identifiability_score(&z, &shuffled, &cfg, 0).unwrap().abs() < 0.01);
    }

    #[test]
    fn linear_default_model_is_identified() {
        let mut rng = seeded(11);
        let dag = sample_er_dag(10, 0.7, vec![5; 10], &mut rng).unwrap();
        let m = sample_linear_scbm(&dag, 2, NoiseSpec::default(), &mut rng).unwrap();
        let data = sample_dataset(&m, 30_000, &mut rng).unwrap();
        let cfg = EstimatorConfig::linear();
        let est = estimate_all(&data, &dag, &DHat::uniform(2), &cfg, 0).unwrap();
        let s = model_identifiability(&m, &est, &data, &cfg, 0).unwrap();
        assert!(s.mean >= 0.95, "mean {}", s.mean);
        assert_eq!(s.per_edge.len(), dag.num_edges());
    }

    #[test]
    fn composition_matches_joint_map_block() {
        let mut rng = seeded(12);
        let dag = sample_er_dag(6, 0.7, vec![4; 6], &mut rng).unwrap();
        let m = sample_linear_scbm(&dag, 2, NoiseSpec::default(), &mut rng).unwrap();
        let data = sample_dataset(&m, 3000, &mut rng).unwrap();
        let est = estimate_all(&data, &dag, &DHat::uniform(4), &EstimatorConfig::linear(), 0).unwrap();
        for e in est.estimates.values() {
            let EstimatedFunctions::Linear { joint_map, .. } = &e.functions else {
                unreachable!()
            };
            assert!((e.composed_map().unwrap() - joint_map).norm() <= 1e-8 * joint_map.norm());
        }
    }

    #[test]
    fn effect_mae_examples() {
        let mut rng = seeded(13);
        let m0 = randn(4, 3, &mut rng);
        let m1 = &m0 + randn(4, 3, &mut rng) * 0.1;
        let x = randn(50, 4, &mut rng);
        let truth = |x: &Matrix| Ok(x * &m0);
        assert_eq!(effect_mae(truth, truth, &x).unwrap(), 0.0);
        let shifted = |x: &Matrix| Ok(x * &m0 + Matrix::from_element(x.nrows(), 3, 0.7));
        assert_abs_diff_eq!(effect_mae(shifted, truth, &x).unwrap(), 0.7, epsilon = 1e-12);

        let est = |x: &Matrix| Ok(x * &m1);
        let direct = (&x * (&m1 - &m0)).abs().mean();
        assert_abs_diff_eq!(effect_mae(est, truth, &x).unwrap(), direct, epsilon = 1e-10);
        let wrong = |x: &Matrix| Ok(x.columns(0, 2).into_owned());
        assert!(effect_mae(wrong, truth, &x).is_err());
    }

    #[test]
    fn backdoor_is_blocked_by_estimated_bottleneck() {
        // node 2 is a common cause of 0 and 1; conditioning on the estimated
        // bottleneck of (2,0) leaves their residuals uncorrelated
        let dag = Dag::with_uniform_dim(3, 4, &[(2, 0), (2, 1)]).unwrap();
        let mut rng = seeded(14);
        let m = sample_linear_scbm(&dag, 1, NoiseSpec::default(), &mut rng).unwrap();
        let data = sample_dataset(&m, 50_000, &mut rng).unwrap();
        let est = estimate_all(&data, &dag, &DHat::uniform(1), &EstimatorConfig::linear(), 0).unwrap();
        let z = apply_bottleneck(est.estimate(EdgeId::new(2, 0)).unwrap(), data.block(2).unwrap()).unwrap();
        let resid = |y: &Matrix| y - ols_fit(&z, y).unwrap().predict(&z).unwrap();
        let r0 = resid(data.block(0).unwrap());
        let r1 = resid(data.block(1).unwrap());
        let cross = r0.transpose() * r1 / 50_000.0;
        assert!(cross.amax() < 0.03, "{}", cross.amax());
    }

    #[test]
    fn estimate_json_round_trip() {
        let mut rng = seeded(15);
        let dag = complete3(3);
        let m = sample_linear_scbm(&dag, 1, NoiseSpec::default(), &mut rng).unwrap();
        let data = sample_dataset(&m, 100, &mut rng).unwrap();
        let est = estimate_all(&data, &dag, &DHat::uniform(1), &EstimatorConfig::linear(), 0).unwrap();
        let json = serde_json::to_value(&est).unwrap();
        assert_eq!(json["edges"][0]["kind"], "linear");
        assert!(json["edges"][0]["cond_set"].is_array());
        assert!(json["edges"][0]["diagnostics"]["n"].is_number());
        let back: EstimatedScbm = serde_json::from_value(json).unwrap();
        assert_eq!(back, est);
    }

    #[test]
    fn cloud_csv_layout() {
        let z = Matrix::from_row_slice(2, 2, &[1.0, 2.0, 3.0, 4.0]);
        let zh = Matrix::from_row_slice(2, 1, &[0.5, -1.0]);
        let mut out = Vec::new();
        write_cloud_csv(&mut out, &z, &zh).unwrap();
        assert_eq!(
            String::from_utf8(out).unwrap(),
            "z_true_0,z_true_1,z_hat_0\n1,2,0.5\n3,4,-1\n"
        );
    }

    #[test]
    fn nonlinear_estimate_tracks_the_mechanism() {
        let dag = Dag::with_uniform_dim(2, 4, &[(0, 1)]).unwrap();
        let mut rng = seeded(16);
        let arch = ArchSpec {
            gain: 2.0,
            ..ArchSpec::default()
        };
        let m = sample_nonlinear_scbm(&dag, 2, arch, NoiseSpec::default(), &mut rng).unwrap();
        let m = m.with_noise_scale(1.0).unwrap().with_node_noise_scale(1, 0.1).unwrap();
        let data = sample_dataset(&m, 3000, &mut rng).unwrap();
        let mut cfg = EstimatorConfig::nonlinear();
        cfg.network.train.epochs = 40;
        let est = estimate_edge(&data, EdgeId::new(0, 1), &Matrix::zeros(3000, 0), 2, &cfg, 3).unwrap();
        let x = data.block(0).unwrap();
        let truth = mechanism_oracle(&m, EdgeId::new(0, 1), x).unwrap();
        let pred = est.predict_effect(x).unwrap();
        let r2 = r2_score(&truth, &pred).unwrap().average;
        assert!(r2 > 0.9, "effect r2 {r2}");
        assert!(est.diagnostics.steps > 0);
        let direct = encoder_decoder_output(&est, x, &Matrix::zeros(3000, 0)).unwrap();
        let at_zero = encoder_decoder_output(&est, &Matrix::zeros(1, 4), &Matrix::zeros(1, 0)).unwrap();
        let expected = Matrix::from_fn(3000, 4, |r, c| direct[(r, c)] - at_zero[(0, c)]);
        assert_abs_diff_eq!(pred, expected, epsilon = 1e-10);
    }

    #[test]
    fn underdetermined_regression_is_flagged() {
        let mut rng = seeded(17);
        let x = randn(20, 30, &mut rng);
        let y = randn(20, 30, &mut rng);
        let est = fit_edge(
            EdgeId::new(0, 1),
            &x,
            &y,
            &Matrix::zeros(20, 0),
            2,
            &EstimatorConfig::linear(),
            0,
        )
        .unwrap();
        assert!(est.diagnostics.underdetermined);
        assert_eq!(est.diagnostics.regression_dim, 30);
    }
}
