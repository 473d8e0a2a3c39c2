//! Discrete operators P, L1, L2 on stacked grid vectors.
//!
//! A grid vector is a deterministic function on the cells [t_i, t_{i+1}),
//! i = 0..N-1, stacked into a length n*N vector with the dt-weighted inner
//! product. L1 maps a multiplier function to the closed-loop mean response
//! EX, L2 does the same for a frozen mean function, P is the response to the
//! initial state; all three are built column-by-column from impulses through
//! the decoupled closed-loop system.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::model::CoefficientField;
use crate::riccati::HatCoefficients;
use crate::stationarity::tilde_solve;

#[derive(Debug, Clone, PartialEq)]
pub struct GridVector {
    pub n: usize,
    pub steps: usize,
    pub data: DVector<f64>,
}

impl GridVector {
    pub fn zeros(n: usize, steps: usize) -> Self {
        GridVector {
            n,
            steps,
            data: DVector::zeros(n * steps),
        }
    }

    pub fn from_cells(cells: &[DVector<f64>]) -> Self {
        let n = cells[0].len();
        let steps = cells.len();
        let mut data = DVector::zeros(n * steps);
        for (i, c) in cells.iter().enumerate() {
            data.rows_mut(i * n, n).copy_from(c);
        }
        GridVector { n, steps, data }
    }

    pub fn cell(&self, i: usize) -> DVector<f64> {
        self.data.rows(i * self.n, self.n).into_owned()
    }

    pub fn cells(&self) -> Vec<DVector<f64>> {
        (0..self.steps).map(|i| self.cell(i)).collect()
    }

    /// dt-weighted inner product <f, g> = sum_i dt f_i'g_i.
    pub fn inner(&self, other: &GridVector, dt: f64) -> f64 {
        dt * self.data.dot(&other.data)
    }
}

#[derive(Debug, Clone)]
pub struct DiscreteOperator {
    pub matrix: DMatrix<f64>,
    pub n: usize,
    pub steps: usize,
    pub label: String,
    pub is_adjoint: bool,
}

impl DiscreteOperator {
    pub fn apply(&self, f: &GridVector) -> GridVector {
        GridVector {
            n: self.n,
            steps: self.steps,
            data: &self.matrix * &f.data,
        }
    }
}

/// Adjoint under the dt-weighted inner product; the uniform grid makes it the
/// plain matrix transpose.
pub fn adjoint(op: &DiscreteOperator) -> DiscreteOperator {
    DiscreteOperator {
        matrix: op.matrix.transpose(),
        n: op.n,
        steps: op.steps,
        label: format!("{}*", op.label.trim_end_matches('*')),
        is_adjoint: !op.is_adjoint,
    }
}

fn mean_cells(x: &crate::tree_sde::StatePath, steps: usize) -> Vec<DVector<f64>> {
    (0..steps).map(|i| x.mean[i].clone()).collect()
}

/// P xi = EX of the closed-loop system with alpha = lambda = 0; the backward
/// offset has zero terminal and zero source, so it vanishes and the forward
/// equation runs with the hat dynamics alone.
pub fn assemble_p(
    field: &CoefficientField,
    hat: &HatCoefficients,
    xi: &DVector<f64>,
) -> GridVector {
    let zero = vec![DVector::zeros(field.n); field.steps];
    let sol = tilde_solve(field, hat, &zero, &zero, xi);
    GridVector::from_cells(&mean_cells(&sol.x, field.steps))
}

/// Full n x (n*N) response matrix of P (columns = unit initial states).
pub fn assemble_p_matrix(field: &CoefficientField, hat: &HatCoefficients) -> DiscreteOperator {
    let n = field.n;
    let mut matrix = DMatrix::zeros(n * field.steps, n);
    for k in 0..n {
        let mut xi = DVector::zeros(n);
        xi[k] = 1.0;
        let col = assemble_p(field, hat, &xi);
        matrix.set_column(k, &col.data);
    }
    DiscreteOperator {
        matrix,
        n,
        steps: field.steps,
        label: "P".into(),
        is_adjoint: false,
    }
}

fn impulse_operator(
    field: &CoefficientField,
    hat: &HatCoefficients,
    label: &str,
    alpha_channel: bool,
) -> DiscreteOperator {
    let n = field.n;
    let nn = n * field.steps;
    let mut matrix = DMatrix::zeros(nn, nn);
    let zero = vec![DVector::zeros(n); field.steps];
    let xi0 = DVector::zeros(n);
    for i in 0..field.steps {
        for k in 0..n {
            let mut cells = vec![DVector::zeros(n); field.steps];
            cells[i][k] = 1.0;
            let sol = if alpha_channel {
                tilde_solve(field, hat, &cells, &zero, &xi0)
            } else {
                tilde_solve(field, hat, &zero, &cells, &xi0)
            };
            let col = GridVector::from_cells(&mean_cells(&sol.x, field.steps));
            matrix.set_column(i * n + k, &col.data);
        }
    }
    DiscreteOperator {
        matrix,
        n,
        steps: field.steps,
        label: label.into(),
        is_adjoint: false,
    }
}

/// L1 lambda = EX of the closed loop driven by the multiplier lambda through
/// the offset BSDE.
pub fn assemble_l1(field: &CoefficientField, hat: &HatCoefficients) -> DiscreteOperator {
    impulse_operator(field, hat, "L1", false)
}

/// L2 alpha = EX of the closed loop driven by the frozen mean alpha through
/// the forward sources A1 alpha, C1 alpha and the driver source Q-hat alpha.
pub fn assemble_l2(field: &CoefficientField, hat: &HatCoefficients) -> DiscreteOperator {
    impulse_operator(field, hat, "L2", true)
}

#[derive(Debug, Clone)]
pub struct OperatorBundle {
    pub p_xi: GridVector,
    pub l1: DiscreteOperator,
    pub l2: DiscreteOperator,
}

pub fn assemble_bundle(
    field: &CoefficientField,
    hat: &HatCoefficients,
    xi: &DVector<f64>,
) -> OperatorBundle {
    OperatorBundle {
        p_xi: assemble_p(field, hat, xi),
        l1: assemble_l1(field, hat),
        l2: assemble_l2(field, hat),
    }
}

impl OperatorBundle {
    /// Consistency residual cells: P xi + L1 lambda + L2 alpha - alpha.
    pub fn constraint_residual(&self, alpha: &GridVector, lambda: &GridVector) -> GridVector {
        let mut out = self.p_xi.clone();
        out.data += &self.l1.matrix * &lambda.data + &self.l2.matrix * &alpha.data - &alpha.data;
        out
    }
}

pub fn operator_csv(op: &DiscreteOperator) -> String {
    let mut out = String::new();
    for r in 0..op.matrix.nrows() {
        let row: Vec<String> = (0..op.matrix.ncols())
            .map(|c| format!("{:.17e}", op.matrix[(r, c)]))
            .collect();
        out.push_str(&row.join(","));
        out.push('\n');
    }
    out
}

pub fn operator_sidecar(op: &DiscreteOperator, dt: f64) -> serde_json::Value {
    serde_json::json!({
        "label": op.label,
        "n": op.n,
        "steps": op.steps,
        "dt": dt,
        "rows": op.matrix.nrows(),
        "cols": op.matrix.ncols(),
        "adjoint": op.is_adjoint,
    })
}

/// Guard used by `adjoint` semantics: grids here are always uniform, but the
/// check documents the requirement.
pub fn require_uniform_grid(dt: f64) -> Result<()> {
    if !(dt > 0.0) {
        return Err(Error::Config("non-uniform or empty grid".into()));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus;
    use crate::model::{evaluate_coefficients, CoeffRule};
    use crate::riccati::{hat_coefficients, solve_riccati_tree};
    use approx::assert_abs_diff_eq;

    fn setup(spec: &crate::model::ProblemSpec) -> (CoefficientField, HatCoefficients) {
        let f = evaluate_coefficients(spec, &spec.tree().unwrap()).unwrap();
        let ric = solve_riccati_tree(&f).unwrap();
        let hat = hat_coefficients(&f, &ric).unwrap();
        (f, hat)
    }

    #[test]
    fn p_of_zero_is_zero() {
        let (f, hat) = setup(&corpus::instance1(4));
        let p = assemble_p(&f, &hat, &DVector::zeros(1));
        assert_eq!(p.data.amax(), 0.0);
    }

    #[test]
    fn frozen_dynamics_p_is_constant_xi() {
        let mut spec = corpus::instance1(4);
        for rule in [
            &mut spec.coeffs.a,
            &mut spec.coeffs.a1,
            &mut spec.coeffs.c,
            &mut spec.coeffs.c1,
            &mut spec.coeffs.q,
            &mut spec.coeffs.q1,
        ] {
            *rule = CoeffRule::constant_scalar(0.0);
        }
        spec.coeffs.g = CoeffRule::constant_scalar(0.0); // Sigma = 0 -> A-hat = 0
        let (f, hat) = setup(&spec);
        let p = assemble_p(&f, &hat, &DVector::from_vec(vec![1.0]));
        for i in 0..f.steps {
            assert_abs_diff_eq!(p.cell(i)[0], 1.0, epsilon = 1e-14);
        }
    }

    #[test]
    fn p_matches_direct_hat_propagation() {
        let (f, hat) = setup(&corpus::instance1(4));
        let p = assemble_p(&f, &hat, &DVector::from_vec(vec![1.0]));
        // independent forward simulation under the hat dynamics with u = 0
        // offsets: X_{i+1} = X + dt A-hat X + dW C-hat X
        let (dt, sq) = (f.dt, f.sqrt_dt());
        let mut xs = vec![vec![1.0f64]];
        for i in 0..f.steps {
            let mut next = vec![0.0; 2 * xs[i].len()];
            for (j, &x) in xs[i].iter().enumerate() {
                let dr = hat.nodes[i][j].a_hat[(0, 0)] * x;
                let df = hat.nodes[i][j].c_hat[(0, 0)] * x;
                next[2 * j] = x + dt * dr + sq * df;
                next[2 * j + 1] = x + dt * dr - sq * df;
            }
            xs.push(next);
        }
        for i in 0..f.steps {
            let ex: f64 = xs[i].iter().sum::<f64>() / xs[i].len() as f64;
            assert_abs_diff_eq!(p.cell(i)[0], ex, epsilon = 1e-13);
        }
    }

    #[test]
    fn l1_vanishes_without_control_channel() {
        let mut spec = corpus::instance1(3);
        spec.coeffs.b = CoeffRule::constant_scalar(0.0);
        spec.coeffs.d = CoeffRule::constant_scalar(0.0);
        let (f, hat) = setup(&spec);
        let l1 = assemble_l1(&f, &hat);
        assert!(l1.matrix.amax() < 1e-15);
    }

    #[test]
    fn l2_vanishes_without_meanfield_channel() {
        let (f, hat) = setup(&corpus::classical(3));
        let l2 = assemble_l2(&f, &hat);
        assert!(l2.matrix.amax() < 1e-14);
        for lvl in &hat.nodes {
            for h in lvl {
                assert!(h.q_hat.amax() < 1e-15);
                assert!(h.a1_hat.amax() < 1e-15);
                assert!(h.c1_hat.amax() < 1e-15);
            }
        }
    }

    #[test]
    fn superposition_matches_direct_solves() {
        let (f, hat) = setup(&corpus::instance1_random(4));
        let ones = GridVector::from_cells(&vec![DVector::from_vec(vec![1.0]); f.steps]);
        let zero = vec![DVector::zeros(1); f.steps];
        let xi0 = DVector::zeros(1);

        let l1 = assemble_l1(&f, &hat);
        let direct = tilde_solve(&f, &hat, &zero, &ones.cells(), &xi0);
        let got = l1.apply(&ones);
        for i in 0..f.steps {
            assert_abs_diff_eq!(got.cell(i)[0], direct.x.mean[i][0], epsilon = 1e-10);
        }

        let l2 = assemble_l2(&f, &hat);
        let direct = tilde_solve(&f, &hat, &ones.cells(), &zero, &xi0);
        let got = l2.apply(&ones);
        for i in 0..f.steps {
            assert_abs_diff_eq!(got.cell(i)[0], direct.x.mean[i][0], epsilon = 1e-10);
        }
    }

    #[test]
    fn adjoint_is_involutive_and_satisfies_inner_product_identity() {
        let (f, hat) = setup(&corpus::instance1(4));
        let l1 = assemble_l1(&f, &hat);
        let l1s = adjoint(&l1);
        let back = adjoint(&l1s);
        assert_eq!(l1.matrix, back.matrix);
        assert_eq!(adjoint(&l1s).is_adjoint, false);

        // <L1 f, g> = <f, L1* g> for a deterministic family of vectors
        for trial in 0..20 {
            let fvec = GridVector {
                n: 1,
                steps: f.steps,
                data: DVector::from_fn(f.steps, |i, _| ((i + trial) as f64 * 0.7).sin()),
            };
            let gvec = GridVector {
                n: 1,
                steps: f.steps,
                data: DVector::from_fn(f.steps, |i, _| ((i * trial) as f64 * 0.3).cos()),
            };
            let lhs = l1.apply(&fvec).inner(&gvec, f.dt);
            let rhs = fvec.inner(&l1s.apply(&gvec), f.dt);
            assert_abs_diff_eq!(lhs, rhs, epsilon = 1e-12);
        }
    }

    #[test]
    fn operators_are_linear() {
        let (f, hat) = setup(&corpus::twodim(3));
        let l2 = assemble_l2(&f, &hat);
        let n = f.n * f.steps;
        let fvec = DVector::from_fn(n, |i, _| (i as f64 * 0.9).sin());
        let gvec = DVector::from_fn(n, |i, _| (i as f64 * 1.3).cos());
        let lin = &l2.matrix * (&fvec * 2.0 + &gvec * -0.5);
        let sep = (&l2.matrix * &fvec) * 2.0 + (&l2.matrix * &gvec) * -0.5;
        assert!((lin - sep).amax() < 1e-12);
    }
}
