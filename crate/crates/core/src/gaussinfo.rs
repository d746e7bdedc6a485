//! Closed-form Gaussian quantities for linear models: the joint covariance,
//! partial covariances, conditional mutual information, and the bottleneck
//! conditional-independence constraints.

use std::collections::BTreeMap;
use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::error::{Result, ScbmError};
use crate::graph::EdgeId;
use crate::linalg::{hstack, pinv, svd, Matrix};
use crate::synth::{EdgeFunctions, Scbm};

/// A labeled block of coordinates in a joint covariance.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Block {
    Node(usize),
    Bottleneck(EdgeId),
}

#[derive(Debug, Clone, PartialEq)]
pub struct JointCovariance {
    blocks: Vec<(Block, Range<usize>)>,
    matrix: Matrix,
}

impl JointCovariance {
    pub fn new(blocks: Vec<(Block, usize)>, matrix: Matrix) -> Result<Self> {
        let mut ranges = Vec::with_capacity(blocks.len());
        let mut offset = 0;
        for (label, dim) in blocks {
            if ranges.iter().any(|(l, _)| *l == label) {
                return Err(ScbmError::param(format!("duplicate block {label:?}")));
            }
            ranges.push((label, offset..offset + dim));
            offset += dim;
        }
        if matrix.shape() != (offset, offset) {
            return Err(ScbmError::DimensionMismatch {
                context: "joint covariance",
                expected: offset,
                actual: matrix.nrows(),
            });
        }
        let scale = matrix.amax().max(1.0);
        if (&matrix - matrix.transpose()).amax() > 1e-10 * scale {
            return Err(ScbmError::param("covariance is not symmetric"));
        }
        Ok(JointCovariance { blocks: ranges, matrix })
    }

    pub fn matrix(&self) -> &Matrix {
        &self.matrix
    }

    pub fn dim(&self) -> usize {
        self.matrix.nrows()
    }

    pub fn blocks(&self) -> impl Iterator<Item = (Block, Range<usize>)> + '_ {
        self.blocks.iter().cloned()
    }

    pub fn range(&self, block: Block) -> Result<Range<usize>> {
        self.blocks
            .iter()
            .find(|(l, _)| *l == block)
            .map(|(_, r)| r.clone())
            .ok_or_else(|| ScbmError::param(format!("no block {block:?} in covariance")))
    }

    /// Coordinate indices of the listed blocks, in order.
    pub fn indices(&self, blocks: &[Block]) -> Result<Vec<usize>> {
        let mut out = Vec::new();
        for &b in blocks {
            out.extend(self.range(b)?);
        }
        Ok(out)
    }

    fn sub(&self, rows: &[usize], cols: &[usize]) -> Matrix {
        Matrix::from_fn(rows.len(), cols.len(), |r, c| self.matrix[(rows[r], cols[c])])
    }

    /// Adds the coordinates `Z_e = X_source · B_e` of the given linear
    /// edges as extra blocks.
    pub fn with_bottlenecks(&self, scbm: &Scbm, edges: &[EdgeId]) -> Result<JointCovariance> {
        let extra: usize = edges
            .iter()
            .map(|&e| scbm.functions(e).map(EdgeFunctions::d_z))
            .sum::<Result<usize>>()?;
        let d = self.dim();
        let mut t = Matrix::zeros(d, d + extra);
        t.view_mut((0, 0), (d, d)).fill_with_identity();
        let mut labels: Vec<(Block, usize)> = self.blocks.iter().map(|(l, r)| (*l, r.len())).collect();
        let mut col = d;
        for &e in edges {
            let EdgeFunctions::Linear { bottleneck, .. } = scbm.functions(e)? else {
                return Err(ScbmError::UnsupportedModel(format!("edge {e} is nonlinear")));
            };
            let rows = self.range(Block::Node(e.source))?;
            t.view_mut((rows.start, col), bottleneck.shape()).copy_from(bottleneck);
            labels.push((Block::Bottleneck(e), bottleneck.ncols()));
            col += bottleneck.ncols();
        }
        let m = t.transpose() * &self.matrix * &t;
        let m = (&m + m.transpose()) * 0.5;
        JointCovariance::new(labels, m)
    }
}

/// Square-root form of a linear model: `X = ξ · factor` with `ξ` white
/// noise, so `Σ = factorᵀ · factor`.
struct LinearFactor {
    dims: Vec<usize>,
    offsets: Vec<usize>,
    factor: Matrix,
}

impl LinearFactor {
    fn new(scbm: &Scbm) -> Result<Self> {
        let dag = scbm.dag();
        let dims = dag.node_dims();
        let offsets: Vec<usize> = dims
            .iter()
            .scan(0, |acc, &d| {
                let o = *acc;
                *acc += d;
                Some(o)
            })
            .collect();
        let total: usize = dims.iter().sum();
        let mut a = Matrix::zeros(total, total);
        let mut root = Matrix::zeros(total, total);
        for v in 0..dag.num_nodes() {
            // Σ_η = V Λ Vᵀ, root block Λ^½ Vᵀ
            let eig = scbm.noise(v).covariance().symmetric_eigen();
            let mut r = eig.eigenvectors.transpose();
            for (k, mut row) in r.row_iter_mut().enumerate() {
                row *= eig.eigenvalues[k].max(0.0).sqrt();
            }
            root.view_mut((offsets[v], offsets[v]), (dims[v], dims[v]))
                .copy_from(&r);
        }
        for (e, f) in scbm.edge_functions() {
            let m = f.joint_map().ok_or_else(|| {
                ScbmError::UnsupportedModel(format!("edge {e} is nonlinear; closed forms need a linear model"))
            })?;
            a.view_mut((offsets[e.source], offsets[e.target]), m.shape())
                .copy_from(&m);
        }
        let inv = (Matrix::identity(total, total) - a)
            .try_inverse()
            .ok_or_else(|| ScbmError::NotPositiveDefinite("I − A is singular".into()))?;
        Ok(LinearFactor {
            dims: dims.to_vec(),
            offsets,
            factor: root * inv,
        })
    }

    fn node(&self, v: usize) -> Matrix {
        self.factor.columns(self.offsets[v], self.dims[v]).into_owned()
    }

    fn bottleneck(&self, scbm: &Scbm, e: EdgeId) -> Result<Matrix> {
        let EdgeFunctions::Linear { bottleneck, .. } = scbm.functions(e)? else {
            return Err(ScbmError::UnsupportedModel(format!("edge {e} is nonlinear")));
        };
        Ok(self.node(e.source) * bottleneck)
    }
}

/// Covariance of all node blocks implied by a linear model:
/// `Σ = (I − A)⁻ᵀ Σ_η (I − A)⁻¹` with `A` holding the joint maps `B·F`.
pub fn analytic_covariance(scbm: &Scbm) -> Result<JointCovariance> {
    let lf = LinearFactor::new(scbm)?;
    let sigma = lf.factor.transpose() * &lf.factor;
    let sigma = (&sigma + sigma.transpose()) * 0.5;
    JointCovariance::new(
        lf.dims.iter().enumerate().map(|(v, &d)| (Block::Node(v), d)).collect(),
        sigma,
    )
}

/// `Σ_AB − Σ_AC Σ_CC⁺ Σ_CB` over coordinate index sets.
pub fn partial_covariance(cov: &JointCovariance, a: &[usize], b: &[usize], c: &[usize]) -> Matrix {
    let sab = cov.sub(a, b);
    if c.is_empty() {
        return sab;
    }
    let sac = cov.sub(a, c);
    let scc = cov.sub(c, c);
    let scb = cov.sub(c, b);
    sab - sac * pinv(&scc, None) * scb
}

/// Conditional mutual information and whether a pseudo-determinant was
/// needed.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Cmi {
    pub nats: f64,
    pub degenerate: bool,
}

const PDET_REL_TOL: f64 = 1e-10;

/// Log pseudo-determinant of a symmetric PSD matrix; flags dropped
/// eigenvalues.
fn log_pdet(m: &Matrix) -> (f64, bool) {
    if m.is_empty() {
        return (0.0, false);
    }
    let eig = m.clone().symmetric_eigenvalues();
    let top = eig.amax();
    if top == 0.0 {
        return (0.0, true);
    }
    let mut degenerate = false;
    let mut acc = 0.0;
    for &l in eig.iter() {
        if l > PDET_REL_TOL * top {
            acc += l.ln();
        } else {
            degenerate = true;
        }
    }
    (acc, degenerate)
}

/// `½ log(det Σ_{A|C} det Σ_{B|C} / det Σ_{AB|C})`.
pub fn gaussian_cmi(cov: &JointCovariance, a: &[usize], b: &[usize], c: &[usize]) -> Cmi {
    // evaluate in a canonical argument order so the result is exactly symmetric
    let (a, b) = if a <= b { (a, b) } else { (b, a) };
    let ab: Vec<usize> = a.iter().chain(b).copied().collect();
    let (la, da) = log_pdet(&partial_covariance(cov, a, a, c));
    let (lb, db) = log_pdet(&partial_covariance(cov, b, b, c));
    let (lab, dab) = log_pdet(&partial_covariance(cov, &ab, &ab, c));
    Cmi {
        nats: 0.5 * (la + lb - lab),
        degenerate: da || db || dab,
    }
}

/// Constraint residual of one node.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NodeConstraint {
    pub node: usize,
    /// Largest absolute partial covariance between children and node.
    pub residual: f64,
    /// `residual` divided by the largest marginal standard deviations.
    pub normalized_residual: f64,
    pub conditioning: Vec<EdgeId>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IbReport {
    pub nodes: Vec<NodeConstraint>,
    pub skipped_sinks: Vec<usize>,
    pub flags: Vec<String>,
}

impl IbReport {
    pub fn max_residual(&self) -> f64 {
        self.nodes.iter().map(|n| n.residual).fold(0.0, f64::max)
    }
}

/// Partial covariance residual of `X_ch(i)` and `X_i` given the bottlenecks
/// out of `i` and into `i`, optionally leaving one of them out.
pub fn node_constraint(scbm: &Scbm, node: usize, omit: Option<EdgeId>) -> Result<NodeConstraint> {
    let dag = scbm.dag();
    let children = dag.children(node);
    if children.is_empty() {
        return Err(ScbmError::param(format!("node {node} has no children")));
    }
    let conditioning: Vec<EdgeId> = children
        .iter()
        .map(|&j| EdgeId::new(node, j))
        .chain(dag.parents(node).iter().map(|&k| EdgeId::new(k, node)))
        .filter(|e| Some(*e) != omit)
        .collect();
    // Project the children's factor off the span of the conditioning
    // coordinates instead of inverting Σ_CC; this keeps roundoff at the
    // scale of the factor rather than its square.
    let lf = LinearFactor::new(scbm)?;
    let child_parts: Vec<Matrix> = children.iter().map(|&j| lf.node(j)).collect();
    let ga = hstack(&child_parts.iter().collect::<Vec<_>>())?;
    let gb = lf.node(node);
    let mut gb_perp = gb.clone();
    if !conditioning.is_empty() {
        let parts = conditioning
            .iter()
            .map(|&e| lf.bottleneck(scbm, e))
            .collect::<Result<Vec<_>>>()?;
        let gc = hstack(&parts.iter().collect::<Vec<_>>())?;
        let dec = svd(&gc);
        let rank = dec.rank(1e-12 * gc.nrows().max(gc.ncols()) as f64);
        let q = dec.u.columns(0, rank);
        gb_perp -= q * (q.transpose() * &gb);
    }
    let residual = (ga.transpose() * gb_perp).amax();
    let sd = |g: &Matrix| g.column_iter().map(|c| c.norm()).fold(0.0, f64::max);
    let norm = sd(&ga) * sd(&gb);
    Ok(NodeConstraint {
        node,
        residual,
        normalized_residual: if norm > 0.0 { residual / norm } else { 0.0 },
        conditioning,
    })
}

/// Checks the bottleneck independence constraint at every non-sink node.
pub fn ib_constraint_report(scbm: &Scbm) -> Result<IbReport> {
    if !scbm.is_linear() {
        return Err(ScbmError::UnsupportedModel(
            "the constraint report needs a linear model".into(),
        ));
    }
    let dag = scbm.dag();
    let mut nodes = Vec::new();
    let mut skipped = Vec::new();
    let mut flags = Vec::new();
    for v in 0..dag.num_nodes() {
        if dag.children(v).is_empty() {
            skipped.push(v);
            continue;
        }
        let c = node_constraint(scbm, v, None)?;
        if c.residual > 1e-8 {
            flags.push(format!("node {v}: residual {:.3e} exceeds 1e-8", c.residual));
        }
        nodes.push(c);
    }
    Ok(IbReport {
        nodes,
        skipped_sinks: skipped,
        flags,
    })
}

/// Residuals keyed by node, for compact JSON output.
pub fn residual_map(report: &IbReport) -> BTreeMap<usize, f64> {
    report.nodes.iter().map(|n| (n.node, n.residual)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::{sample_er_dag, Dag};
    use crate::linalg::center_columns;
    use crate::rng::seeded;
    use crate::synth::{
        sample_dataset, sample_linear_scbm, sample_nonlinear_scbm, ArchSpec, GaussianNoiseModel, NoiseSpec,
    };
    use approx::assert_abs_diff_eq;
    use proptest::prelude::{any, prop_assert, proptest, ProptestConfig};
    use rand::Rng;
    use rand_distr::StandardNormal;

    fn scalar_edge(a: f64) -> Scbm {
        let dag = Dag::with_uniform_dim(2, 1, &[(0, 1)]).unwrap();
        let noise = vec![
            GaussianNoiseModel::standard(1).unwrap(),
            GaussianNoiseModel::standard(1).unwrap(),
        ];
        let f = EdgeFunctions::Linear {
            bottleneck: Matrix::from_element(1, 1, a),
            effect: Matrix::from_element(1, 1, 1.0),
        };
        Scbm::new(dag, noise, [(EdgeId::new(0, 1), f)].into_iter().collect()).unwrap()
    }

    fn random_cov(dim: usize, rng: &mut impl Rng) -> JointCovariance {
        let g = Matrix::from_fn(dim, dim + 2, |_, _| rng.sample(StandardNormal));
        JointCovariance::new((0..dim).map(|k| (Block::Node(k), 1)).collect(), &g * g.transpose()).unwrap()
    }

    #[test]
    fn covariance_examples() {
        let m = scalar_edge(0.7);
        let cov = analytic_covariance(&m).unwrap();
        let expected = Matrix::from_row_slice(2, 2, &[1.0, 0.7, 0.7, 0.49 + 1.0]);
        assert_abs_diff_eq!(cov.matrix().clone(), expected, epsilon = 1e-14);

        let mut rng = seeded(1);
        let empty = Dag::with_uniform_dim(3, 2, &[]).unwrap();
        let m = sample_linear_scbm(&empty, 1, NoiseSpec::default(), &mut rng).unwrap();
        let cov = analytic_covariance(&m).unwrap();
        for u in 0..3 {
            for v in 0..3 {
                let block = cov.matrix().view((2 * u, 2 * v), (2, 2)).into_owned();
                if u == v {
                    assert_abs_diff_eq!(block, m.noise(u).covariance(), epsilon = 1e-14);
                } else {
                    assert_eq!(block, Matrix::zeros(2, 2));
                }
            }
        }
    }

    #[test]
    fn covariance_matches_monte_carlo() {
        let mut rng = seeded(2);
        let dag = Dag::with_uniform_dim(3, 2, &[(0, 1), (0, 2), (1, 2)]).unwrap();
        let m = sample_linear_scbm(&dag, 1, NoiseSpec::default(), &mut rng).unwrap();
        let n = 100_000;
        let data = sample_dataset(&m, n, &mut rng).unwrap();
        let blocks: Vec<&Matrix> = data.blocks().values().collect();
        let x = crate::linalg::hstack(&blocks).unwrap();
        let (xc, _) = center_columns(&x);
        let emp = xc.transpose() * &xc / n as f64;
        let cov = analytic_covariance(&m).unwrap();
        let diff = (&emp - cov.matrix()).amax();
        assert!(diff <= 0.05, "{diff}");
        // entrywise 4/√n scaled by the entry's standard error
        for r in 0..6 {
            for c in 0..6 {
                let se = (cov.matrix()[(r, r)] * cov.matrix()[(c, c)]).sqrt() * 2.0_f64.sqrt();
                assert!((emp[(r, c)] - cov.matrix()[(r, c)]).abs() <= 4.0 * se / (n as f64).sqrt());
            }
        }
    }

    #[test]
    fn nonlinear_models_are_rejected() {
        let mut rng = seeded(3);
        let dag = Dag::with_uniform_dim(2, 3, &[(0, 1)]).unwrap();
        let m = sample_nonlinear_scbm(&dag, 1, ArchSpec::default(), NoiseSpec::default(), &mut rng).unwrap();
        assert!(matches!(analytic_covariance(&m), Err(ScbmError::UnsupportedModel(_))));
        assert!(matches!(ib_constraint_report(&m), Err(ScbmError::UnsupportedModel(_))));
    }

    #[test]
    fn partial_covariance_examples() {
        let mut rng = seeded(4);
        let cov = random_cov(4, &mut rng);
        assert_eq!(partial_covariance(&cov, &[0], &[1, 2], &[]), cov.sub(&[0], &[1, 2]));

        let diag = JointCovariance::new(
            vec![(Block::Node(0), 2), (Block::Node(1), 2)],
            Matrix::from_diagonal_element(4, 4, 2.0),
        )
        .unwrap();
        assert_eq!(partial_covariance(&diag, &[0, 1], &[2, 3], &[]), Matrix::zeros(2, 2));
    }

    #[test]
    fn backdoor_blocked_by_bottleneck_analytically() {
        // edges 2→0 and 2→1 only; given Z_(2,0) the two children decouple
        let dag = Dag::with_uniform_dim(3, 4, &[(2, 0), (2, 1)]).unwrap();
        let mut rng = seeded(5);
        let m = sample_linear_scbm(&dag, 2, NoiseSpec::default(), &mut rng).unwrap();
        let cov = analytic_covariance(&m)
            .unwrap()
            .with_bottlenecks(&m, &[EdgeId::new(2, 0)])
            .unwrap();
        let a = cov.indices(&[Block::Node(1)]).unwrap();
        let b = cov.indices(&[Block::Node(0)]).unwrap();
        let c = cov.indices(&[Block::Bottleneck(EdgeId::new(2, 0))]).unwrap();
        assert!(partial_covariance(&cov, &a, &b, &c).amax() <= 1e-8);
        assert!(partial_covariance(&cov, &a, &b, &[]).amax() > 0.1);
    }

    #[test]
    fn cmi_examples() {
        let rho = 0.5;
        let cov = JointCovariance::new(
            vec![(Block::Node(0), 1), (Block::Node(1), 1)],
            Matrix::from_row_slice(2, 2, &[1.0, rho, rho, 1.0]),
        )
        .unwrap();
        let cmi = gaussian_cmi(&cov, &[0], &[1], &[]);
        assert_abs_diff_eq!(cmi.nats, -0.5 * (1.0f64 - 0.25).ln(), epsilon = 1e-14);
        assert_abs_diff_eq!(cmi.nats, 0.1438, epsilon = 1e-4);
        assert!(!cmi.degenerate);

        let indep = JointCovariance::new(
            vec![(Block::Node(0), 2), (Block::Node(1), 1)],
            Matrix::from_diagonal(&nalgebra::DVector::from_vec(vec![2.0, 0.5, 3.0])),
        )
        .unwrap();
        assert!(gaussian_cmi(&indep, &[0, 1], &[2], &[]).nats.abs() <= 1e-10);
    }

    #[test]
    fn cmi_with_deterministic_coordinates_is_flagged() {
        let mut rng = seeded(6);
        let dag = Dag::with_uniform_dim(2, 3, &[(0, 1)]).unwrap();
        let m = sample_linear_scbm(&dag, 1, NoiseSpec::default(), &mut rng).unwrap();
        let cov = analytic_covariance(&m)
            .unwrap()
            .with_bottlenecks(&m, &[EdgeId::new(0, 1)])
            .unwrap();
        let x0 = cov.indices(&[Block::Node(0)]).unwrap();
        let z = cov.indices(&[Block::Bottleneck(EdgeId::new(0, 1))]).unwrap();
        let x1 = cov.indices(&[Block::Node(1)]).unwrap();
        let both: Vec<usize> = x0.iter().chain(&z).copied().collect();
        let cmi = gaussian_cmi(&cov, &both, &x1, &[]);
        assert!(cmi.degenerate);
        // X_1 depends on X_0 only through Z
        let given_z = gaussian_cmi(&cov, &x0, &x1, &z);
        assert!(given_z.nats.abs() <= 1e-8, "{}", given_z.nats);
    }

    #[test]
    fn ib_report_examples() {
        let mut rng = seeded(7);
        let chain = Dag::with_uniform_dim(3, 4, &[(0, 1), (1, 2)]).unwrap();
        let m = sample_linear_scbm(&chain, 2, NoiseSpec::default(), &mut rng).unwrap();
        let report = ib_constraint_report(&m).unwrap();
        assert_eq!(report.skipped_sinks, vec![2]);
        let middle = report.nodes.iter().find(|n| n.node == 1).unwrap();
        assert!(middle.residual <= 1e-8, "{}", middle.residual);
        assert!(report.flags.is_empty());

        // negative control: drop the bottleneck into one child
        let fork = Dag::with_uniform_dim(3, 4, &[(0, 1), (0, 2)]).unwrap();
        let m = sample_linear_scbm(&fork, 2, NoiseSpec::default(), &mut rng).unwrap();
        let c = node_constraint(&m, 0, Some(EdgeId::new(0, 2))).unwrap();
        assert!(c.residual > 0.01, "{}", c.residual);
        assert!(node_constraint(&m, 2, None).is_err());

        let json = serde_json::to_value(&report).unwrap();
        assert!(json["nodes"][0]["residual"].is_number());
        assert!(json["flags"].is_array());
    }

    #[test]
    fn ground_truth_models_satisfy_the_constraint() {
        let mut rng = seeded(8);
        for _ in 0..10 {
            let dag = sample_er_dag(6, 0.7, vec![3; 6], &mut rng).unwrap();
            let m = sample_linear_scbm(&dag, 2, NoiseSpec::default(), &mut rng).unwrap();
            let r = ib_constraint_report(&m).unwrap();
            assert!(r.max_residual() <= 1e-8, "{}", r.max_residual());
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(48))]

        #[test]
        fn cmi_properties(seed in any::<u64>()) {
            let mut rng = seeded(seed);
            let cov = random_cov(6, &mut rng);
            let (a, b1, b2, c) = ([0usize, 1], [2usize], [3usize, 4], [5usize]);
            let b: Vec<usize> = b1.iter().chain(&b2).copied().collect();
            let lhs = gaussian_cmi(&cov, &a, &b, &c).nats;
            let cb1: Vec<usize> = c.iter().chain(&b1).copied().collect();
            let rhs = gaussian_cmi(&cov, &a, &b1, &c).nats + gaussian_cmi(&cov, &a, &b2, &cb1).nats;
            prop_assert!((lhs - rhs).abs() <= 1e-8);
            prop_assert!(lhs >= -1e-10);
            prop_assert!(gaussian_cmi(&cov, &a, &b, &c).nats == gaussian_cmi(&cov, &b, &a, &c).nats);
        }
    }
}
