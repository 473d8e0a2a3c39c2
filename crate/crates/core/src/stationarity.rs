//! The stationarity system for the deterministic multiplier triple
//! (alpha*, lambda*, beta*) and recovery of the optimal feedback control.
//!
//! For fixed deterministic grid functions (alpha, lambda) the inner problem
//! decouples through the Riccati pair into a closed-loop forward sweep plus
//! one offset BSDE (`tilde_solve`). An adjoint chain (`chain_solve`) carries
//! the sensitivity of the inner value to the frozen mean. Stacking impulse
//! responses of both gives an affine map whose zero set, intersected with
//! the mean-consistency constraint, is the KKT system solved here.
//!
//! The second KKT block couples the chain state mean E[k] with the adjoint
//! of the lambda-response: E[k_i] + (L1* beta)_i = 0. (Dropping the E[k]
//! term leaves a system whose minimum-norm solution does not reproduce the
//! optimal control; the term comes out of the discrete duality pairing and
//! is kept.)

use nalgebra::{DMatrix, DVector};

use crate::bsde::solve_linear_bsde;
use crate::error::{Error, Result};
use crate::model::{
    evaluate_coefficients, level_mean, validate_assumptions, CoefficientField, NodeMats, NodeVecs,
    ProblemSpec, ResidualMap,
};
use crate::operators::{assemble_bundle, GridVector, OperatorBundle};
use crate::riccati::{hat_coefficients, solve_riccati_tree, HatCoefficients, RiccatiSolution};
use crate::tree_sde::{evaluate_cost, evaluate_cost_problem1, ControlProcess, CostBreakdown, StatePath};

#[derive(Debug, Clone)]
pub struct MultiplierTriple {
    pub alpha: GridVector,
    pub lambda: GridVector,
    pub beta: GridVector,
}

#[derive(Debug, Clone)]
pub struct KktReport {
    pub rows: usize,
    pub cols: usize,
    pub rank: usize,
    /// Residual norm of each block, relative to 1 + data norm.
    pub block_residuals: [f64; 3],
    pub nonunique: bool,
}

#[derive(Debug, Clone)]
pub struct ControlLaw {
    /// m x n gain per node.
    pub gain: NodeMats,
    /// m offset per node.
    pub offset: NodeVecs,
}

impl ControlLaw {
    pub fn as_control(&self) -> ControlProcess {
        ControlProcess::Feedback {
            gain: self.gain.clone(),
            offset: self.offset.clone(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct SolveReport {
    pub name: String,
    pub control: ControlLaw,
    /// Realized open-loop control values at the optimum.
    pub u: NodeVecs,
    pub x: StatePath,
    pub j: CostBreakdown,
    pub multipliers: MultiplierTriple,
    pub kkt: KktReport,
    pub residuals: ResidualMap,
    pub min_gap: f64,
}

/// Solution of the decoupled inner system for fixed (alpha, lambda).
#[derive(Debug, Clone)]
pub struct TildeSolution {
    pub x: StatePath,
    pub u: NodeVecs,
    /// Offset BSDE pair: phi on 0..N (zero at leaves), phihat/psi on 0..N-1.
    pub phi: NodeVecs,
    pub phihat: NodeVecs,
    pub psi: NodeVecs,
}

fn driver_mats(hat: &HatCoefficients) -> (NodeMats, NodeMats) {
    let m: NodeMats = hat
        .nodes
        .iter()
        .map(|lvl| lvl.iter().map(|h| h.m_hat.clone()).collect())
        .collect();
    let n: NodeMats = hat
        .nodes
        .iter()
        .map(|lvl| lvl.iter().map(|h| h.n_hat.clone()).collect())
        .collect();
    (m, n)
}

/// Backward offset BSDE with forward-source maps: driver
/// M-hat phihat + N-hat psi + Sf sf + Sg sg + sb.
pub fn offset_bsde(
    field: &CoefficientField,
    hat: &HatCoefficients,
    sf: Option<&NodeVecs>,
    sg: Option<&NodeVecs>,
    sb: Option<&NodeVecs>,
    terminal: Vec<DVector<f64>>,
) -> crate::bsde::BsdePath {
    let (m_drv, n_drv) = driver_mats(hat);
    let src: NodeVecs = (0..field.steps)
        .map(|i| {
            (0..field.nodes_at(i))
                .map(|j| {
                    let h = &hat.nodes[i][j];
                    let mut s = DVector::zeros(field.n);
                    if let Some(sf) = sf {
                        s += &h.sf * &sf[i][j];
                    }
                    if let Some(sg) = sg {
                        s += &h.sg * &sg[i][j];
                    }
                    if let Some(sb) = sb {
                        s += &sb[i][j];
                    }
                    s
                })
                .collect()
        })
        .collect();
    solve_linear_bsde(&m_drv, &n_drv, Some(&src), terminal, field.dt)
}

fn closed_loop(
    field: &CoefficientField,
    hat: &HatCoefficients,
    sf: &NodeVecs,
    sg: &NodeVecs,
    phihat: &NodeVecs,
    psi: &NodeVecs,
    xi: &DVector<f64>,
) -> (StatePath, NodeVecs) {
    let (dt, sq) = (field.dt, field.sqrt_dt());
    let mut x: NodeVecs = vec![vec![xi.clone()]];
    let mut mean = Vec::with_capacity(field.steps + 1);
    let mut u: NodeVecs = Vec::with_capacity(field.steps);
    for i in 0..field.steps {
        mean.push(level_mean(&x[i]));
        let mut next = vec![DVector::zeros(field.n); field.nodes_at(i + 1)];
        let mut lu = Vec::with_capacity(field.nodes_at(i));
        for j in 0..field.nodes_at(i) {
            let h = &hat.nodes[i][j];
            let uoff = -(&h.lam_inv
                * (field.b[i][j].transpose() * &phihat[i][j]
                    + field.d[i][j].transpose() * &psi[i][j]
                    + h.su.transpose() * &sf[i][j]
                    + h.zu.transpose() * &sg[i][j]));
            let uij = &h.kx * &x[i][j] + uoff;
            let drift = &field.a[i][j] * &x[i][j] + &field.b[i][j] * &uij + &sf[i][j];
            let diff = &field.c[i][j] * &x[i][j] + &field.d[i][j] * &uij + &sg[i][j];
            next[2 * j] = &x[i][j] + &drift * dt + &diff * sq;
            next[2 * j + 1] = &x[i][j] + &drift * dt - &diff * sq;
            lu.push(uij);
        }
        x.push(next);
        u.push(lu);
    }
    mean.push(level_mean(&x[field.steps]));
    (StatePath { x, mean }, u)
}

/// Solve the inner decoupled system for fixed deterministic (alpha, lambda):
/// offset BSDE with sources A1 alpha, C1 alpha, lambda; then the closed-loop
/// forward equation with the exact feedback.
pub fn tilde_solve(
    field: &CoefficientField,
    hat: &HatCoefficients,
    alpha: &[DVector<f64>],
    lambda: &[DVector<f64>],
    xi: &DVector<f64>,
) -> TildeSolution {
    let sf: NodeVecs = (0..field.steps)
        .map(|i| {
            (0..field.nodes_at(i))
                .map(|j| &field.a1[i][j] * &alpha[i])
                .collect()
        })
        .collect();
    let sg: NodeVecs = (0..field.steps)
        .map(|i| {
            (0..field.nodes_at(i))
                .map(|j| &field.c1[i][j] * &alpha[i])
                .collect()
        })
        .collect();
    let sb: NodeVecs = (0..field.steps)
        .map(|i| vec![lambda[i].clone(); field.nodes_at(i)])
        .collect();
    let term = vec![DVector::zeros(field.n); field.nodes_at(field.steps)];
    let bp = offset_bsde(field, hat, Some(&sf), Some(&sg), Some(&sb), term);
    let (x, u) = closed_loop(field, hat, &sf, &sg, &bp.yhat, &bp.z, xi);
    TildeSolution {
        x,
        u,
        phi: bp.y,
        phihat: bp.yhat,
        psi: bp.z,
    }
}

/// Reconstruct the adjoint pair of the inner system: Y = Sigma X + phi,
/// with its predictable projections.
pub fn backward_pair(
    ric: &RiccatiSolution,
    tilde: &TildeSolution,
    sqrt_dt: f64,
) -> (NodeVecs, NodeVecs, NodeVecs) {
    let steps = tilde.x.x.len() - 1;
    let y: NodeVecs = (0..=steps)
        .map(|i| {
            (0..tilde.x.x[i].len())
                .map(|j| &ric.sigma[i][j] * &tilde.x.x[i][j] + &tilde.phi[i][j])
                .collect()
        })
        .collect();
    let yhat: NodeVecs = (0..steps)
        .map(|i| {
            (0..(1usize << i))
                .map(|j| (&y[i + 1][2 * j] + &y[i + 1][2 * j + 1]) * 0.5)
                .collect()
        })
        .collect();
    let z: NodeVecs = (0..steps)
        .map(|i| {
            (0..(1usize << i))
                .map(|j| (&y[i + 1][2 * j] - &y[i + 1][2 * j + 1]) / (2.0 * sqrt_dt))
                .collect()
        })
        .collect();
    (y, yhat, z)
}

/// Adjoint chain: the sensitivity FBSDE driven by the inner solution. The
/// same Riccati pair decouples it; the sources are -B u, -D u with the inner
/// control u, the driver source is Q X, the terminal offset is G X(T).
#[derive(Debug, Clone)]
pub struct ChainSolution {
    pub k: NodeVecs,
    pub m: NodeVecs,
    pub mhat: NodeVecs,
    pub n: NodeVecs,
}

pub fn chain_solve(
    field: &CoefficientField,
    ric: &RiccatiSolution,
    hat: &HatCoefficients,
    tilde: &TildeSolution,
) -> ChainSolution {
    let sf: NodeVecs = (0..field.steps)
        .map(|i| {
            (0..field.nodes_at(i))
                .map(|j| -(&field.b[i][j] * &tilde.u[i][j]))
                .collect()
        })
        .collect();
    let sg: NodeVecs = (0..field.steps)
        .map(|i| {
            (0..field.nodes_at(i))
                .map(|j| -(&field.d[i][j] * &tilde.u[i][j]))
                .collect()
        })
        .collect();
    let sb: NodeVecs = (0..field.steps)
        .map(|i| {
            (0..field.nodes_at(i))
                .map(|j| &field.q[i][j] * &tilde.x.x[i][j])
                .collect()
        })
        .collect();
    let term: Vec<DVector<f64>> = (0..field.nodes_at(field.steps))
        .map(|j| &field.g[j] * &tilde.x.x[field.steps][j])
        .collect();
    let phm = offset_bsde(field, hat, Some(&sf), Some(&sg), Some(&sb), term);
    let (kpath, _) = closed_loop(field, hat, &sf, &sg, &phm.yhat, &phm.z, &DVector::zeros(field.n));
    let steps = field.steps;
    let m: NodeVecs = (0..=steps)
        .map(|i| {
            (0..field.nodes_at(i))
                .map(|j| &ric.sigma[i][j] * &kpath.x[i][j] + &phm.y[i][j])
                .collect()
        })
        .collect();
    let sq = field.sqrt_dt();
    let mhat: NodeVecs = (0..steps)
        .map(|i| {
            (0..field.nodes_at(i))
                .map(|j| (&m[i + 1][2 * j] + &m[i + 1][2 * j + 1]) * 0.5)
                .collect()
        })
        .collect();
    let n: NodeVecs = (0..steps)
        .map(|i| {
            (0..field.nodes_at(i))
                .map(|j| (&m[i + 1][2 * j] - &m[i + 1][2 * j + 1]) / (2.0 * sq))
                .collect()
        })
        .collect();
    ChainSolution {
        k: kpath.x,
        m,
        mhat,
        n,
    }
}

/// Affine maps (alpha, lambda, xi) -> grid functions of the first two KKT
/// blocks: g = E[Q1] alpha + E[A1' mhat + C1' n] and Ek = E[k].
#[derive(Debug, Clone)]
pub struct AdjointResponse {
    pub m_alpha: DMatrix<f64>,
    pub m_lambda: DMatrix<f64>,
    pub r_xi: DVector<f64>,
    pub k_alpha: DMatrix<f64>,
    pub k_lambda: DMatrix<f64>,
    pub k_xi: DVector<f64>,
}

/// One chained solve: inner system at (alpha, lambda, xi), then the adjoint
/// chain; returns the stacked response pair (g, Ek).
pub fn chained_response(
    field: &CoefficientField,
    ric: &RiccatiSolution,
    hat: &HatCoefficients,
    alpha: &[DVector<f64>],
    lambda: &[DVector<f64>],
    xi: &DVector<f64>,
) -> (DVector<f64>, DVector<f64>) {
    let tilde = tilde_solve(field, hat, alpha, lambda, xi);
    let chain = chain_solve(field, ric, hat, &tilde);
    let n = field.n;
    let mut g = DVector::zeros(n * field.steps);
    let mut ek = DVector::zeros(n * field.steps);
    for i in 0..field.steps {
        let terms: Vec<DVector<f64>> = (0..field.nodes_at(i))
            .map(|j| {
                field.a1[i][j].transpose() * &chain.mhat[i][j]
                    + field.c1[i][j].transpose() * &chain.n[i][j]
            })
            .collect();
        let gi = field.mean_q1(i) * &alpha[i] + level_mean(&terms);
        g.rows_mut(i * n, n).copy_from(&gi);
        ek.rows_mut(i * n, n).copy_from(&level_mean(&chain.k[i]));
    }
    (g, ek)
}

pub fn assemble_adjoint_response(
    field: &CoefficientField,
    ric: &RiccatiSolution,
    hat: &HatCoefficients,
    xi: &DVector<f64>,
) -> AdjointResponse {
    let n = field.n;
    let nn = n * field.steps;
    let zero_cells = vec![DVector::zeros(n); field.steps];
    let xi0 = DVector::zeros(n);

    let mut m_alpha = DMatrix::zeros(nn, nn);
    let mut m_lambda = DMatrix::zeros(nn, nn);
    let mut k_alpha = DMatrix::zeros(nn, nn);
    let mut k_lambda = DMatrix::zeros(nn, nn);
    for i in 0..field.steps {
        for k in 0..n {
            let mut cells = vec![DVector::zeros(n); field.steps];
            cells[i][k] = 1.0;
            let (g, ek) = chained_response(field, ric, hat, &cells, &zero_cells, &xi0);
            m_alpha.set_column(i * n + k, &g);
            k_alpha.set_column(i * n + k, &ek);
            let (g, ek) = chained_response(field, ric, hat, &zero_cells, &cells, &xi0);
            m_lambda.set_column(i * n + k, &g);
            k_lambda.set_column(i * n + k, &ek);
        }
    }
    let (r_xi, k_xi) = chained_response(field, ric, hat, &zero_cells, &zero_cells, xi);
    AdjointResponse {
        m_alpha,
        m_lambda,
        r_xi,
        k_alpha,
        k_lambda,
        k_xi,
    }
}

/// Solve the stacked KKT system in (alpha, lambda, beta):
///
/// ```text
/// M_a alpha + M_l lambda + (L2* - I) beta = -r_xi
/// K_a alpha + K_l lambda +  L1*      beta = -k_xi
/// (L2 - I) alpha + L1 lambda              = -P xi
/// ```
///
/// by minimum-norm least squares (SVD pseudo-inverse); rank and per-block
/// residuals are reported, non-uniqueness flagged when the nullspace is
/// nontrivial.
pub fn solve_stationarity(
    resp: &AdjointResponse,
    bundle: &OperatorBundle,
    tol: f64,
) -> Result<(MultiplierTriple, KktReport)> {
    let nn = resp.r_xi.len();
    let n = bundle.l1.n;
    let steps = bundle.l1.steps;
    let eye = DMatrix::<f64>::identity(nn, nn);
    let l1t = bundle.l1.matrix.transpose();
    let l2t = bundle.l2.matrix.transpose();

    let mut a = DMatrix::<f64>::zeros(3 * nn, 3 * nn);
    a.view_mut((0, 0), (nn, nn)).copy_from(&resp.m_alpha);
    a.view_mut((0, nn), (nn, nn)).copy_from(&resp.m_lambda);
    a.view_mut((0, 2 * nn), (nn, nn)).copy_from(&(&l2t - &eye));
    a.view_mut((nn, 0), (nn, nn)).copy_from(&resp.k_alpha);
    a.view_mut((nn, nn), (nn, nn)).copy_from(&resp.k_lambda);
    a.view_mut((nn, 2 * nn), (nn, nn)).copy_from(&l1t);
    a.view_mut((2 * nn, 0), (nn, nn))
        .copy_from(&(&bundle.l2.matrix - &eye));
    a.view_mut((2 * nn, nn), (nn, nn)).copy_from(&bundle.l1.matrix);

    let mut b = DVector::<f64>::zeros(3 * nn);
    b.rows_mut(0, nn).copy_from(&(-&resp.r_xi));
    b.rows_mut(nn, nn).copy_from(&(-&resp.k_xi));
    b.rows_mut(2 * nn, nn).copy_from(&(-&bundle.p_xi.data));

    let svd = a.clone().svd(true, true);
    let smax = svd.singular_values.max();
    let eps = smax * 1e-10;
    let rank = svd.rank(eps);
    let sol = svd
        .solve(&b, eps)
        .map_err(|e| Error::Config(format!("stationarity SVD solve failed: {e}")))?;

    let scale = 1.0 + b.amax();
    let res = &a * &sol - &b;
    let block = |k: usize| res.rows(k * nn, nn).amax() / scale;
    let block_residuals = [block(0), block(1), block(2)];
    if block_residuals.iter().any(|r| *r > tol) {
        return Err(Error::Infeasible {
            residuals: block_residuals.to_vec(),
            tol,
        });
    }

    let cell = |off: usize| GridVector {
        n,
        steps,
        data: sol.rows(off, nn).into_owned(),
    };
    let triple = MultiplierTriple {
        alpha: cell(0),
        lambda: cell(nn),
        beta: cell(2 * nn),
    };
    let report = KktReport {
        rows: 3 * nn,
        cols: 3 * nn,
        rank,
        block_residuals,
        nonunique: rank < 3 * nn,
    };
    Ok((triple, report))
}

/// Recover the feedback law, closed-loop path and cost at the multiplier
/// triple; residuals of the consistency line and the pointwise stationarity
/// identity R u + B'Yhat + D'Z = 0 go into the report.
pub fn recover_control(
    field: &CoefficientField,
    ric: &RiccatiSolution,
    hat: &HatCoefficients,
    triple: &MultiplierTriple,
    xi: &DVector<f64>,
    name: &str,
    kkt: KktReport,
) -> SolveReport {
    let alpha = triple.alpha.cells();
    let lambda = triple.lambda.cells();
    let tilde = tilde_solve(field, hat, &alpha, &lambda, xi);

    // exact feedback law: gain kx, offset = full control minus gain part
    let gain: NodeMats = hat
        .nodes
        .iter()
        .map(|lvl| lvl.iter().map(|h| h.kx.clone()).collect())
        .collect();
    let offset: NodeVecs = (0..field.steps)
        .map(|i| {
            (0..field.nodes_at(i))
                .map(|j| &tilde.u[i][j] - &hat.nodes[i][j].kx * &tilde.x.x[i][j])
                .collect()
        })
        .collect();
    let law = ControlLaw { gain, offset };

    let j = evaluate_cost(field, &tilde.x, &ControlProcess::OpenLoop(tilde.u.clone()));

    let mut residuals = ResidualMap::new();
    let mut mean_gap = 0.0f64;
    for i in 0..field.steps {
        mean_gap = mean_gap.max((&tilde.x.mean[i] - &alpha[i]).amax());
    }
    residuals.insert("mean_consistency".into(), mean_gap);

    let (_, yhat, z) = backward_pair(ric, &tilde, field.sqrt_dt());
    let mut stat = 0.0f64;
    for i in 0..field.steps {
        for j in 0..field.nodes_at(i) {
            let r = &field.r[i][j] * &tilde.u[i][j]
                + field.b[i][j].transpose() * &yhat[i][j]
                + field.d[i][j].transpose() * &z[i][j];
            stat = stat.max(r.amax());
        }
    }
    residuals.insert("stationarity_max".into(), stat);
    residuals.insert("kkt_block1".into(), kkt.block_residuals[0]);
    residuals.insert("kkt_block2".into(), kkt.block_residuals[1]);
    residuals.insert("kkt_block3".into(), kkt.block_residuals[2]);

    SolveReport {
        name: name.into(),
        control: law,
        u: tilde.u,
        x: tilde.x,
        j,
        multipliers: triple.clone(),
        kkt,
        residuals,
        min_gap: ric.min_gap,
    }
}

/// Inner problem for a FIXED pair (alpha, lambda): feedback law, closed-loop
/// path and the relaxed cost.
pub fn solve_problem1(
    field: &CoefficientField,
    hat: &HatCoefficients,
    alpha: &[DVector<f64>],
    lambda: &[DVector<f64>],
    xi: &DVector<f64>,
) -> (ControlLaw, StatePath, CostBreakdown) {
    let tilde = tilde_solve(field, hat, alpha, lambda, xi);
    let gain: NodeMats = hat
        .nodes
        .iter()
        .map(|lvl| lvl.iter().map(|h| h.kx.clone()).collect())
        .collect();
    let offset: NodeVecs = (0..field.steps)
        .map(|i| {
            (0..field.nodes_at(i))
                .map(|j| &tilde.u[i][j] - &hat.nodes[i][j].kx * &tilde.x.x[i][j])
                .collect()
        })
        .collect();
    let j = evaluate_cost_problem1(
        field,
        &tilde.x,
        &ControlProcess::OpenLoop(tilde.u),
        alpha,
        lambda,
    );
    (ControlLaw { gain, offset }, tilde.x, j)
}

/// Full pipeline: tree, coefficients, Riccati, hat coefficients, operators,
/// adjoint responses, stationarity solve, control recovery.
pub fn solve_mfslq(spec: &ProblemSpec) -> Result<SolveReport> {
    solve_mfslq_tol(spec, 1e-8)
}

pub fn solve_mfslq_tol(spec: &ProblemSpec, tol: f64) -> Result<SolveReport> {
    let tree = spec.tree().map_err(Error::stage("model"))?;
    let field = evaluate_coefficients(spec, &tree).map_err(Error::stage("model"))?;
    let assumptions = validate_assumptions(&field);
    if !(assumptions.h1_ok && assumptions.h2_ok) {
        return Err(Error::Config(format!(
            "assumptions H1/H2 violated: {:?}",
            assumptions
                .violations
                .iter()
                .map(|v| format!("{} at ({},{}): {}", v.assumption, v.level, v.node, v.detail))
                .collect::<Vec<_>>()
        )));
    }
    let ric = solve_riccati_tree(&field).map_err(Error::stage("riccati"))?;
    let hat = hat_coefficients(&field, &ric).map_err(Error::stage("riccati"))?;
    let bundle = assemble_bundle(&field, &hat, &spec.xi);
    let resp = assemble_adjoint_response(&field, &ric, &hat, &spec.xi);
    let (triple, kkt) =
        solve_stationarity(&resp, &bundle, tol).map_err(Error::stage("stationarity"))?;
    Ok(recover_control(
        &field, &ric, &hat, &triple, &spec.xi, &spec.name, kkt,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus;
    use crate::model::CoeffRule;
    use approx::assert_abs_diff_eq;

    fn setup(
        spec: &ProblemSpec,
    ) -> (CoefficientField, RiccatiSolution, HatCoefficients) {
        let f = evaluate_coefficients(spec, &spec.tree().unwrap()).unwrap();
        let ric = solve_riccati_tree(&f).unwrap();
        let hat = hat_coefficients(&f, &ric).unwrap();
        (f, ric, hat)
    }

    #[test]
    fn tilde_solution_satisfies_pointwise_stationarity() {
        let spec = corpus::instance1_random(4);
        let (f, ric, hat) = setup(&spec);
        let alpha: Vec<_> = (0..4).map(|i| DVector::from_vec(vec![0.2 + 0.1 * i as f64])).collect();
        let lambda: Vec<_> = (0..4).map(|i| DVector::from_vec(vec![0.1 * i as f64])).collect();
        let tilde = tilde_solve(&f, &hat, &alpha, &lambda, &spec.xi);
        let (_, yhat, z) = backward_pair(&ric, &tilde, f.sqrt_dt());
        for i in 0..4 {
            for j in 0..f.nodes_at(i) {
                let r = &f.r[i][j] * &tilde.u[i][j]
                    + f.b[i][j].transpose() * &yhat[i][j]
                    + f.d[i][j].transpose() * &z[i][j]
                    + &lambda[i] * 0.0; // stationarity of the inner problem has no lambda term
                assert_abs_diff_eq!(r.amax(), 0.0, epsilon = 1e-13);
            }
        }
        // phi vanishes at the leaves
        for v in &tilde.phi[4] {
            assert_eq!(v.amax(), 0.0);
        }
    }

    #[test]
    fn homogeneous_response_is_zero() {
        let spec = corpus::instance1(3);
        let (f, ric, hat) = setup(&spec);
        let zero = vec![DVector::zeros(1); 3];
        let (g, ek) = chained_response(&f, &ric, &hat, &zero, &zero, &DVector::zeros(1));
        assert_eq!(g.amax(), 0.0);
        assert_eq!(ek.amax(), 0.0);
    }

    #[test]
    fn response_vanishes_without_meanfield_channel() {
        let spec = corpus::classical(3);
        let (f, ric, hat) = setup(&spec);
        let resp = assemble_adjoint_response(&f, &ric, &hat, &spec.xi);
        assert!(resp.m_alpha.amax() < 1e-13);
        assert!(resp.r_xi.amax() < 1e-13);
    }

    #[test]
    fn response_superposition() {
        let spec = corpus::instance1_random(4);
        let (f, ric, hat) = setup(&spec);
        let resp = assemble_adjoint_response(&f, &ric, &hat, &spec.xi);
        let alpha: Vec<_> = (0..4).map(|_| DVector::from_vec(vec![1.0])).collect();
        let zero = vec![DVector::zeros(1); 4];
        let (g_direct, ek_direct) = chained_response(&f, &ric, &hat, &alpha, &zero, &DVector::zeros(1));
        let stack = DVector::from_vec(vec![1.0; 4]);
        let g_basis = &resp.m_alpha * &stack;
        let ek_basis = &resp.k_alpha * &stack;
        assert!((g_direct - g_basis).amax() < 1e-9);
        assert!((ek_direct - ek_basis).amax() < 1e-9);
    }

    #[test]
    fn degenerate_meanfield_solves_to_pxi() {
        // A1 = C1 = Q1 = 0: responses vanish, minimum norm picks beta = 0,
        // lambda = 0, alpha = P xi.
        let spec = corpus::classical(3);
        let (f, ric, hat) = setup(&spec);
        let bundle = assemble_bundle(&f, &hat, &spec.xi);
        let resp = assemble_adjoint_response(&f, &ric, &hat, &spec.xi);
        let (triple, kkt) = solve_stationarity(&resp, &bundle, 1e-8).unwrap();
        assert!((0..3).all(|i| kkt.block_residuals[i] < 1e-10));
        assert!((triple.alpha.data.clone() - &bundle.p_xi.data).amax() < 1e-10);
        assert!(triple.beta.data.amax() < 1e-9);
        assert!(triple.lambda.data.amax() < 1e-9);
    }

    #[test]
    fn fully_homogeneous_triple_is_zero() {
        let mut spec = corpus::classical(3);
        spec.xi = DVector::zeros(1);
        let (f, ric, hat) = setup(&spec);
        let bundle = assemble_bundle(&f, &hat, &spec.xi);
        let resp = assemble_adjoint_response(&f, &ric, &hat, &spec.xi);
        let (triple, _) = solve_stationarity(&resp, &bundle, 1e-8).unwrap();
        assert!(triple.alpha.data.amax() < 1e-12);
        assert!(triple.lambda.data.amax() < 1e-12);
        assert!(triple.beta.data.amax() < 1e-12);
    }

    #[test]
    fn costless_state_gives_zero_control() {
        let mut spec = corpus::instance1(3);
        spec.coeffs.q = CoeffRule::constant_scalar(0.0);
        spec.coeffs.q1 = CoeffRule::constant_scalar(0.0);
        spec.coeffs.g = CoeffRule::constant_scalar(0.0);
        let rep = solve_mfslq(&spec).unwrap();
        for lvl in &rep.u {
            for v in lvl {
                assert!(v.amax() < 1e-12);
            }
        }
        assert!(rep.j.total.abs() < 1e-12);
    }

    #[test]
    fn no_control_channel_forces_zero_control() {
        let mut spec = corpus::instance1(3);
        spec.coeffs.b = CoeffRule::constant_scalar(0.0);
        spec.coeffs.d = CoeffRule::constant_scalar(0.0);
        let rep = solve_mfslq(&spec).unwrap();
        for lvl in &rep.u {
            for v in lvl {
                assert!(v.amax() < 1e-12);
            }
        }
    }

    #[test]
    fn instance1_closed_loop_mean_matches_alpha() {
        let rep = solve_mfslq(&corpus::instance1(4)).unwrap();
        assert!(rep.residuals["mean_consistency"] < 1e-8);
        assert!(rep.residuals["stationarity_max"] < 1e-10);
    }

    #[test]
    fn problem1_stationary_condition_holds() {
        let spec = corpus::instance1(4);
        let (f, ric, hat) = setup(&spec);
        let alpha: Vec<_> = (0..4).map(|i| DVector::from_vec(vec![0.5 - 0.1 * i as f64])).collect();
        let lambda: Vec<_> = (0..4).map(|i| DVector::from_vec(vec![0.2 + 0.05 * i as f64])).collect();
        let tilde = tilde_solve(&f, &hat, &alpha, &lambda, &spec.xi);
        let (_, yhat, z) = backward_pair(&ric, &tilde, f.sqrt_dt());
        for i in 0..4 {
            for j in 0..f.nodes_at(i) {
                let r = &f.r[i][j] * &tilde.u[i][j]
                    + f.b[i][j].transpose() * &yhat[i][j]
                    + f.d[i][j].transpose() * &z[i][j];
                assert!(r.amax() < 1e-12);
            }
        }
    }

    #[test]
    fn problem1_perturbations_never_decrease_cost() {
        let spec = corpus::instance1(4);
        let (f, _ric, hat) = setup(&spec);
        let alpha: Vec<_> = (0..4).map(|i| DVector::from_vec(vec![0.4 + 0.1 * i as f64])).collect();
        let lambda: Vec<_> = (0..4).map(|i| DVector::from_vec(vec![-0.1 * i as f64])).collect();
        let (law, path, j0) = solve_problem1(&f, &hat, &alpha, &lambda, &spec.xi);
        let u0 = crate::tree_sde::realize_control(&f, &law.as_control(), &path);
        for trial in 0..10 {
            let mut u = u0.clone();
            for i in 0..4 {
                for jn in 0..f.nodes_at(i) {
                    u[i][jn][0] += 0.1 * ((trial * 7 + i * 3 + jn) as f64 * 0.77).sin();
                }
            }
            let up = ControlProcess::OpenLoop(u);
            let pp = crate::tree_sde::propagate_state(&f, &up, &spec.xi);
            let jp = evaluate_cost_problem1(&f, &pp, &up, &alpha, &lambda);
            assert!(
                jp.total >= j0.total - 1e-12,
                "perturbed {} < optimal {}",
                jp.total,
                j0.total
            );
        }
    }
}
