//! Linear BSDE and coupled FBSDE solvers on the tree.
//!
//! All backward recursions use the predictable projections
//! `Yhat_i = E[Y_{i+1} | node]` and `Z_i = E[Y_{i+1} dW | node]/dt` and step
//! explicitly at `Yhat`: `Y_i = Yhat_i + dt f(Yhat_i, Z_i, ...)`. This is the
//! form for which discrete summation by parts is exact, which the
//! verification tolerances require.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::model::{level_mean, CoefficientField, NodeMats, NodeVecs};
use crate::tree_sde::StatePath;

#[derive(Debug, Clone)]
pub struct BsdePath {
    /// Y on levels 0..N.
    pub y: NodeVecs,
    /// Yhat on levels 0..N-1 (conditional mean of the next level).
    pub yhat: NodeVecs,
    /// Z on levels 0..N-1.
    pub z: NodeVecs,
}

/// Backward recursion for dY = -[M Yhat + N Z + source] dt + Z dW with the
/// given terminal values. `m_drv`/`n_drv` are node-indexed driver matrices.
pub fn solve_linear_bsde(
    m_drv: &NodeMats,
    n_drv: &NodeMats,
    source: Option<&NodeVecs>,
    terminal: Vec<DVector<f64>>,
    dt: f64,
) -> BsdePath {
    let steps = m_drv.len();
    let sq = dt.sqrt();
    let mut y: NodeVecs = vec![Vec::new(); steps + 1];
    y[steps] = terminal;
    let mut yhat: NodeVecs = vec![Vec::new(); steps];
    let mut z: NodeVecs = vec![Vec::new(); steps];
    for i in (0..steps).rev() {
        let k = 1usize << i;
        let mut ly = Vec::with_capacity(k);
        let mut lh = Vec::with_capacity(k);
        let mut lz = Vec::with_capacity(k);
        for j in 0..k {
            let yh = (&y[i + 1][2 * j] + &y[i + 1][2 * j + 1]) * 0.5;
            let zi = (&y[i + 1][2 * j] - &y[i + 1][2 * j + 1]) / (2.0 * sq);
            let mut drv = &m_drv[i][j] * &yh + &n_drv[i][j] * &zi;
            if let Some(src) = source {
                drv += &src[i][j];
            }
            ly.push(&yh + drv * dt);
            lh.push(yh);
            lz.push(zi);
        }
        y[i] = ly;
        yhat[i] = lh;
        z[i] = lz;
    }
    BsdePath { y, yhat, z }
}

/// Max residual of the one-step identities (discrete martingale
/// representation): Yhat_i = E[Y_{i+1}|node] and Z_i dt = E[Y_{i+1} dW|node].
pub fn one_step_residual(path: &BsdePath, dt: f64) -> f64 {
    let sq = dt.sqrt();
    let mut worst = 0.0f64;
    for i in 0..path.z.len() {
        for j in 0..path.z[i].len() {
            let yh = (&path.y[i + 1][2 * j] + &path.y[i + 1][2 * j + 1]) * 0.5;
            let zi = (&path.y[i + 1][2 * j] - &path.y[i + 1][2 * j + 1]) / (2.0 * sq);
            worst = worst.max((&path.yhat[i][j] - yh).abs().max());
            worst = worst.max((&path.z[i][j] - zi).abs().max());
        }
    }
    worst
}

#[derive(Debug, Clone)]
pub struct MeanfieldSolution {
    pub path: BsdePath,
    /// Contraction ratios of successive Picard differences in the
    /// sigma-weighted norm.
    pub ratios: Vec<f64>,
    pub iterations: usize,
}

fn sigma_norm(field: &CoefficientField, sigma: f64, dy: &NodeVecs, dz: &NodeVecs) -> f64 {
    let mut acc = 0.0;
    for i in 0..field.steps {
        let w = field.dt * (sigma * field.dt * i as f64).exp();
        let p = field.prob(i);
        for j in 0..field.nodes_at(i) {
            acc += w * p * dy[i][j].norm_squared();
            acc += w * p * dz[i][j].norm_squared();
        }
    }
    acc.sqrt()
}

/// Default sigma weight of the contraction argument: 32 K^2 + 4 K + 2 with K
/// the largest coefficient norm.
pub fn default_sigma_weight(field: &CoefficientField) -> f64 {
    let mut k = 0.0f64;
    for i in 0..field.steps {
        for j in 0..field.nodes_at(i) {
            for mat in [
                &field.a[i][j],
                &field.a1[i][j],
                &field.c[i][j],
                &field.c1[i][j],
            ] {
                k = k.max(mat.norm());
            }
        }
    }
    32.0 * k * k + 4.0 * k + 2.0
}

/// Picard iteration for the mean-field BSDE with driver
/// A'Yhat + C'Z + E[A1'Yhat + C1'Z] + source: the mean-field expectation is
/// frozen from the previous iterate, the remaining linear BSDE is solved, and
/// the sigma-weighted norm of successive differences drives the stop rule.
pub fn solve_meanfield_bsde(
    field: &CoefficientField,
    source: &NodeVecs,
    terminal: Vec<DVector<f64>>,
    sigma: Option<f64>,
    max_iter: usize,
    tol: f64,
) -> Result<MeanfieldSolution> {
    let sigma = sigma.unwrap_or_else(|| default_sigma_weight(field));
    let steps = field.steps;
    let m_drv: NodeMats = (0..steps)
        .map(|i| (0..field.nodes_at(i)).map(|j| field.a[i][j].transpose()).collect())
        .collect();
    let n_drv: NodeMats = (0..steps)
        .map(|i| (0..field.nodes_at(i)).map(|j| field.c[i][j].transpose()).collect())
        .collect();

    let zeros = |lvl: usize| vec![DVector::zeros(field.n); field.nodes_at(lvl)];
    let mut prev = BsdePath {
        y: (0..=steps).map(zeros).collect(),
        yhat: (0..steps).map(zeros).collect(),
        z: (0..steps).map(zeros).collect(),
    };
    let mut ratios = Vec::new();
    let mut last_diff: Option<f64> = None;

    for iter in 0..max_iter {
        // freeze E[A1'Yhat + C1'Z] per level from the previous iterate
        let mut src = source.clone();
        for i in 0..steps {
            let terms: Vec<DVector<f64>> = (0..field.nodes_at(i))
                .map(|j| {
                    field.a1[i][j].transpose() * &prev.yhat[i][j]
                        + field.c1[i][j].transpose() * &prev.z[i][j]
                })
                .collect();
            let mean = level_mean(&terms);
            for j in 0..field.nodes_at(i) {
                src[i][j] += &mean;
            }
        }
        let next = solve_linear_bsde(&m_drv, &n_drv, Some(&src), terminal.clone(), field.dt);

        let dy: NodeVecs = (0..steps)
            .map(|i| {
                (0..field.nodes_at(i))
                    .map(|j| &next.y[i][j] - &prev.y[i][j])
                    .collect()
            })
            .collect();
        let dz: NodeVecs = (0..steps)
            .map(|i| {
                (0..field.nodes_at(i))
                    .map(|j| &next.z[i][j] - &prev.z[i][j])
                    .collect()
            })
            .collect();
        let diff = sigma_norm(field, sigma, &dy, &dz);
        if let Some(prev_diff) = last_diff {
            if prev_diff > 0.0 {
                ratios.push(diff / prev_diff);
            }
        }
        prev = next;
        if diff <= tol {
            return Ok(MeanfieldSolution {
                path: prev,
                ratios,
                iterations: iter + 1,
            });
        }
        last_diff = Some(diff);
    }
    Err(Error::Convergence {
        context: "solve_meanfield_bsde".into(),
        iters: max_iter,
        ratio: ratios.last().copied().unwrap_or(f64::NAN),
    })
}

/// Direct (non-iterative) solve of the same mean-field BSDE: on the tree the
/// level-(i+1) data determine Yhat, Z and hence the mean term before Y_i is
/// formed, so a single backward sweep computes the exact fixed point.
pub fn solve_meanfield_bsde_direct(
    field: &CoefficientField,
    source: &NodeVecs,
    terminal: Vec<DVector<f64>>,
) -> BsdePath {
    let steps = field.steps;
    let sq = field.sqrt_dt();
    let mut y: NodeVecs = vec![Vec::new(); steps + 1];
    y[steps] = terminal;
    let mut yhat: NodeVecs = vec![Vec::new(); steps];
    let mut z: NodeVecs = vec![Vec::new(); steps];
    for i in (0..steps).rev() {
        let k = field.nodes_at(i);
        let mut lh = Vec::with_capacity(k);
        let mut lz = Vec::with_capacity(k);
        for j in 0..k {
            lh.push((&y[i + 1][2 * j] + &y[i + 1][2 * j + 1]) * 0.5);
            lz.push((&y[i + 1][2 * j] - &y[i + 1][2 * j + 1]) / (2.0 * sq));
        }
        let terms: Vec<DVector<f64>> = (0..k)
            .map(|j| field.a1[i][j].transpose() * &lh[j] + field.c1[i][j].transpose() * &lz[j])
            .collect();
        let mean = level_mean(&terms);
        let mut ly = Vec::with_capacity(k);
        for j in 0..k {
            let drv = field.a[i][j].transpose() * &lh[j]
                + field.c[i][j].transpose() * &lz[j]
                + &mean
                + &source[i][j];
            ly.push(&lh[j] + drv * field.dt);
        }
        y[i] = ly;
        yhat[i] = lh;
        z[i] = lz;
    }
    BsdePath { y, yhat, z }
}

// ---------------------------------------------------------------------------
// Coupled FBSDE: one global linear system over all node unknowns
// ---------------------------------------------------------------------------

/// Descriptor for the fully coupled linear FBSDE
///
/// ```text
/// X_child = X + dt [fx X + fxm EX + fy Yhat + fz Z + f0]
///             +- sqrt(dt) [gx X + gxm EX + gy Yhat + gz Z + g0]
/// Y = Yhat + dt [hx X + hxm EX + hy Yhat + hz Z
///                + E[hym Yhat + hzm Z] + h0]
/// Y_leaf = gamma X_leaf + g_term
/// ```
///
/// where EX is the level mean and E[..] averages over the level.
#[derive(Debug, Clone)]
pub struct FbsdeSystem {
    pub n: usize,
    pub steps: usize,
    pub dt: f64,
    pub fx: NodeMats,
    pub fxm: NodeMats,
    pub fy: NodeMats,
    pub fz: NodeMats,
    pub f0: NodeVecs,
    pub gx: NodeMats,
    pub gxm: NodeMats,
    pub gy: NodeMats,
    pub gz: NodeMats,
    pub g0: NodeVecs,
    pub hx: NodeMats,
    pub hxm: NodeMats,
    pub hy: NodeMats,
    pub hz: NodeMats,
    pub hym: NodeMats,
    pub hzm: NodeMats,
    pub h0: NodeVecs,
    pub xi: DVector<f64>,
    pub gamma: Vec<DMatrix<f64>>,
    pub g_term: Vec<DVector<f64>>,
}

impl FbsdeSystem {
    /// All-zero system of the given size; callers fill in the blocks they use.
    pub fn zeroed(n: usize, steps: usize, dt: f64) -> Self {
        let mats = |_: usize| -> NodeMats {
            (0..steps)
                .map(|i| vec![DMatrix::zeros(n, n); 1 << i])
                .collect()
        };
        let vecs = || -> NodeVecs {
            (0..steps)
                .map(|i| vec![DVector::zeros(n); 1 << i])
                .collect()
        };
        FbsdeSystem {
            n,
            steps,
            dt,
            fx: mats(0),
            fxm: mats(0),
            fy: mats(0),
            fz: mats(0),
            f0: vecs(),
            gx: mats(0),
            gxm: mats(0),
            gy: mats(0),
            gz: mats(0),
            g0: vecs(),
            hx: mats(0),
            hxm: mats(0),
            hy: mats(0),
            hz: mats(0),
            hym: mats(0),
            hzm: mats(0),
            h0: vecs(),
            xi: DVector::zeros(n),
            gamma: vec![DMatrix::zeros(n, n); 1 << steps],
            g_term: vec![DVector::zeros(n); 1 << steps],
        }
    }

    fn forward_decoupled(&self) -> bool {
        let zero = |ms: &NodeMats| ms.iter().all(|lvl| lvl.iter().all(|m| m.amax() == 0.0));
        zero(&self.fy) && zero(&self.fz) && zero(&self.gy) && zero(&self.gz)
    }
}

#[derive(Debug, Clone)]
pub struct FbsdeSolution {
    pub x: StatePath,
    pub y: NodeVecs,
    pub yhat: NodeVecs,
    pub z: NodeVecs,
    /// Max absolute defect over all discrete equations.
    pub residual: f64,
}

fn node_offsets(n: usize, steps: usize) -> (Vec<usize>, Vec<usize>, Vec<usize>, usize) {
    // flat offsets for X (levels 0..=steps), Y (levels 0..=steps), Z (0..steps-1)
    let mut x_off = Vec::with_capacity(steps + 1);
    let mut cur = 0;
    for i in 0..=steps {
        x_off.push(cur);
        cur += n << i;
    }
    let mut y_off = Vec::with_capacity(steps + 1);
    for i in 0..=steps {
        y_off.push(cur);
        cur += n << i;
    }
    let mut z_off = Vec::with_capacity(steps);
    for i in 0..steps {
        z_off.push(cur);
        cur += n << i;
    }
    (x_off, y_off, z_off, cur)
}

/// Solve the coupled system. When the forward equation does not feed back
/// from (Y, Z), a sequential sweep gives the exact solution directly; the
/// general case assembles the full square linear system and solves it
/// densely, reporting a rank diagnosis if it is singular.
pub fn solve_coupled_fbsde(sys: &FbsdeSystem) -> Result<FbsdeSolution> {
    if sys.forward_decoupled() {
        return Ok(solve_sequential(sys));
    }
    solve_dense(sys)
}

fn residual_of(sys: &FbsdeSystem, sol: &FbsdeSolution) -> f64 {
    let (dt, sq) = (sys.dt, sys.dt.sqrt());
    let mut worst = (&sol.x.x[0][0] - &sys.xi).abs().max();
    for i in 0..sys.steps {
        let k = 1usize << i;
        let ex = level_mean(&sol.x.x[i]);
        let meanterm = {
            let terms: Vec<DVector<f64>> = (0..k)
                .map(|j| &sys.hym[i][j] * &sol.yhat[i][j] + &sys.hzm[i][j] * &sol.z[i][j])
                .collect();
            level_mean(&terms)
        };
        for j in 0..k {
            let drift = &sys.fx[i][j] * &sol.x.x[i][j]
                + &sys.fxm[i][j] * &ex
                + &sys.fy[i][j] * &sol.yhat[i][j]
                + &sys.fz[i][j] * &sol.z[i][j]
                + &sys.f0[i][j];
            let diff = &sys.gx[i][j] * &sol.x.x[i][j]
                + &sys.gxm[i][j] * &ex
                + &sys.gy[i][j] * &sol.yhat[i][j]
                + &sys.gz[i][j] * &sol.z[i][j]
                + &sys.g0[i][j];
            let up = &sol.x.x[i][j] + &drift * dt + &diff * sq;
            let dn = &sol.x.x[i][j] + &drift * dt - &diff * sq;
            worst = worst.max((&sol.x.x[i + 1][2 * j] - up).abs().max());
            worst = worst.max((&sol.x.x[i + 1][2 * j + 1] - dn).abs().max());

            let yh = (&sol.y[i + 1][2 * j] + &sol.y[i + 1][2 * j + 1]) * 0.5;
            let zi = (&sol.y[i + 1][2 * j] - &sol.y[i + 1][2 * j + 1]) / (2.0 * sq);
            worst = worst.max((&sol.yhat[i][j] - &yh).abs().max());
            worst = worst.max((&sol.z[i][j] - &zi).abs().max());
            let drv = &sys.hx[i][j] * &sol.x.x[i][j]
                + &sys.hxm[i][j] * &ex
                + &sys.hy[i][j] * &sol.yhat[i][j]
                + &sys.hz[i][j] * &sol.z[i][j]
                + &meanterm
                + &sys.h0[i][j];
            worst = worst.max((&sol.y[i][j] - &yh - drv * dt).abs().max());
        }
    }
    let leaves = 1usize << sys.steps;
    for j in 0..leaves {
        let t = &sys.gamma[j] * &sol.x.x[sys.steps][j] + &sys.g_term[j];
        worst = worst.max((&sol.y[sys.steps][j] - t).abs().max());
    }
    worst
}

fn solve_sequential(sys: &FbsdeSystem) -> FbsdeSolution {
    let (dt, sq, steps) = (sys.dt, sys.dt.sqrt(), sys.steps);
    // forward
    let mut x: NodeVecs = vec![vec![sys.xi.clone()]];
    let mut mean = Vec::with_capacity(steps + 1);
    for i in 0..steps {
        let ex = level_mean(&x[i]);
        let mut next = vec![DVector::zeros(sys.n); 1 << (i + 1)];
        for j in 0..(1 << i) {
            let drift = &sys.fx[i][j] * &x[i][j] + &sys.fxm[i][j] * &ex + &sys.f0[i][j];
            let diff = &sys.gx[i][j] * &x[i][j] + &sys.gxm[i][j] * &ex + &sys.g0[i][j];
            next[2 * j] = &x[i][j] + &drift * dt + &diff * sq;
            next[2 * j + 1] = &x[i][j] + &drift * dt - &diff * sq;
        }
        mean.push(ex);
        x.push(next);
    }
    mean.push(level_mean(&x[steps]));

    // backward, explicit at Yhat (mean terms known from level i+1 data)
    let mut y: NodeVecs = vec![Vec::new(); steps + 1];
    y[steps] = (0..(1usize << steps))
        .map(|j| &sys.gamma[j] * &x[steps][j] + &sys.g_term[j])
        .collect();
    let mut yhat: NodeVecs = vec![Vec::new(); steps];
    let mut z: NodeVecs = vec![Vec::new(); steps];
    for i in (0..steps).rev() {
        let k = 1usize << i;
        let mut lh = Vec::with_capacity(k);
        let mut lz = Vec::with_capacity(k);
        for j in 0..k {
            lh.push((&y[i + 1][2 * j] + &y[i + 1][2 * j + 1]) * 0.5);
            lz.push((&y[i + 1][2 * j] - &y[i + 1][2 * j + 1]) / (2.0 * sq));
        }
        let terms: Vec<DVector<f64>> = (0..k)
            .map(|j| &sys.hym[i][j] * &lh[j] + &sys.hzm[i][j] * &lz[j])
            .collect();
        let meanterm = level_mean(&terms);
        let ex = &mean[i];
        let mut ly = Vec::with_capacity(k);
        for j in 0..k {
            let drv = &sys.hx[i][j] * &x[i][j]
                + &sys.hxm[i][j] * ex
                + &sys.hy[i][j] * &lh[j]
                + &sys.hz[i][j] * &lz[j]
                + &meanterm
                + &sys.h0[i][j];
            ly.push(&lh[j] + drv * dt);
        }
        y[i] = ly;
        yhat[i] = lh;
        z[i] = lz;
    }

    let mut sol = FbsdeSolution {
        x: StatePath { x, mean },
        y,
        yhat,
        z,
        residual: 0.0,
    };
    sol.residual = residual_of(sys, &sol);
    sol
}

fn solve_dense(sys: &FbsdeSystem) -> Result<FbsdeSolution> {
    let (n, steps, dt) = (sys.n, sys.steps, sys.dt);
    let sq = dt.sqrt();
    let (x_off, y_off, z_off, total) = node_offsets(n, steps);
    if total > 20_000 {
        return Err(Error::Config(format!(
            "coupled FBSDE with {total} unknowns is too large for the dense solver"
        )));
    }
    let xo = |i: usize, j: usize| x_off[i] + n * j;
    let yo = |i: usize, j: usize| y_off[i] + n * j;
    let zo = |i: usize, j: usize| z_off[i] + n * j;

    let mut a = DMatrix::<f64>::zeros(total, total);
    let mut rhs = DVector::<f64>::zeros(total);
    let mut row = 0usize;

    let put = |a: &mut DMatrix<f64>, row: usize, col: usize, mat: &DMatrix<f64>, scale: f64| {
        for r in 0..mat.nrows() {
            for c in 0..mat.ncols() {
                a[(row + r, col + c)] += scale * mat[(r, c)];
            }
        }
    };
    let eye = DMatrix::<f64>::identity(n, n);

    // root
    put(&mut a, row, xo(0, 0), &eye, 1.0);
    rhs.rows_mut(row, n).copy_from(&sys.xi);
    row += n;

    for i in 0..steps {
        let k = 1usize << i;
        let p = 1.0 / k as f64;
        for j in 0..k {
            // forward rows for both children
            for (child, s) in [(2 * j, 1.0), (2 * j + 1, -1.0)] {
                put(&mut a, row, xo(i + 1, child), &eye, 1.0);
                put(&mut a, row, xo(i, j), &eye, -1.0);
                put(&mut a, row, xo(i, j), &sys.fx[i][j], -dt);
                put(&mut a, row, xo(i, j), &sys.gx[i][j], -s * sq);
                for w in 0..k {
                    put(&mut a, row, xo(i, w), &sys.fxm[i][j], -dt * p);
                    put(&mut a, row, xo(i, w), &sys.gxm[i][j], -s * sq * p);
                }
                for (half, yc) in [(0.5, yo(i + 1, 2 * j)), (0.5, yo(i + 1, 2 * j + 1))] {
                    put(&mut a, row, yc, &sys.fy[i][j], -dt * half);
                    put(&mut a, row, yc, &sys.gy[i][j], -s * sq * half);
                }
                put(&mut a, row, zo(i, j), &sys.fz[i][j], -dt);
                put(&mut a, row, zo(i, j), &sys.gz[i][j], -s * sq);
                let b = &sys.f0[i][j] * dt + &sys.g0[i][j] * (s * sq);
                rhs.rows_mut(row, n).copy_from(&b);
                row += n;
            }

            // backward row: Y - Yhat - dt driver = dt h0
            put(&mut a, row, yo(i, j), &eye, 1.0);
            for yc in [yo(i + 1, 2 * j), yo(i + 1, 2 * j + 1)] {
                put(&mut a, row, yc, &eye, -0.5);
                put(&mut a, row, yc, &sys.hy[i][j], -dt * 0.5);
            }
            put(&mut a, row, xo(i, j), &sys.hx[i][j], -dt);
            for w in 0..k {
                put(&mut a, row, xo(i, w), &sys.hxm[i][j], -dt * p);
                // mean terms: E[hym Yhat + hzm Z] over the level
                for yc in [yo(i + 1, 2 * w), yo(i + 1, 2 * w + 1)] {
                    put(&mut a, row, yc, &sys.hym[i][w], -dt * p * 0.5);
                }
                put(&mut a, row, zo(i, w), &sys.hzm[i][w], -dt * p);
            }
            put(&mut a, row, zo(i, j), &sys.hz[i][j], -dt);
            let b = &sys.h0[i][j] * dt;
            rhs.rows_mut(row, n).copy_from(&b);
            row += n;

            // Z row: Z - (Y_up - Y_dn)/(2 sqrt(dt)) = 0
            put(&mut a, row, zo(i, j), &eye, 1.0);
            put(&mut a, row, yo(i + 1, 2 * j), &eye, -0.5 / sq);
            put(&mut a, row, yo(i + 1, 2 * j + 1), &eye, 0.5 / sq);
            row += n;
        }
    }
    // terminal rows
    let leaves = 1usize << steps;
    for j in 0..leaves {
        put(&mut a, row, yo(steps, j), &eye, 1.0);
        put(&mut a, row, xo(steps, j), &sys.gamma[j], -1.0);
        rhs.rows_mut(row, n).copy_from(&sys.g_term[j]);
        row += n;
    }
    assert_eq!(row, total, "system must be square");

    let scale = 1.0 + rhs.amax();
    let lu = a.clone().lu();
    let sol_vec = match lu.solve(&rhs) {
        Some(v) if (&a * &v - &rhs).amax() <= 1e-8 * scale => v,
        _ => {
            let svd = a.clone().svd(true, true);
            let rank = svd.rank(1e-10 * svd.singular_values.max());
            return Err(Error::Singular {
                context: "solve_coupled_fbsde".into(),
                rows: total,
                cols: total,
                rank,
                nullity: total - rank,
            });
        }
    };

    // unpack
    let take = |off: usize| DVector::from_column_slice(&sol_vec.as_slice()[off..off + n]);
    let mut x: NodeVecs = Vec::with_capacity(steps + 1);
    let mut y: NodeVecs = Vec::with_capacity(steps + 1);
    for i in 0..=steps {
        x.push((0..(1usize << i)).map(|j| take(xo(i, j))).collect());
        y.push((0..(1usize << i)).map(|j| take(yo(i, j))).collect());
    }
    let z: NodeVecs = (0..steps)
        .map(|i| (0..(1usize << i)).map(|j| take(zo(i, j))).collect())
        .collect();
    let yhat: NodeVecs = (0..steps)
        .map(|i| {
            (0..(1usize << i))
                .map(|j| (&y[i + 1][2 * j] + &y[i + 1][2 * j + 1]) * 0.5)
                .collect()
        })
        .collect();
    let mean = (0..=steps).map(|i| level_mean(&x[i])).collect();
    let mut sol = FbsdeSolution {
        x: StatePath { x, mean },
        y,
        yhat,
        z,
        residual: 0.0,
    };
    sol.residual = residual_of(sys, &sol);
    Ok(sol)
}
