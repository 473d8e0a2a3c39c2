//! Built-in instance corpus used by the CLI `corpus` command and the
//! acceptance suite. All instances satisfy H1–H2 by construction.

use nalgebra::{DMatrix, DVector};

use crate::model::{CoeffRule, CoeffSet, Dimensions, ProblemSpec, TimeGrid};

fn mat(rows: usize, cols: usize, data: &[f64]) -> DMatrix<f64> {
    DMatrix::from_row_slice(rows, cols, data)
}

fn scal(v: f64) -> CoeffRule {
    CoeffRule::constant_scalar(v)
}

/// The canonical scalar instance: n=m=1, T=1, A=0.1, A1=0.05, B=1, C=0.2,
/// C1=0.1, D=0.5, Q=1, Q1=0.5, R=1, G=1, xi=1, delta=1.
pub fn instance1(steps: usize) -> ProblemSpec {
    ProblemSpec {
        name: format!("instance1-n{steps}"),
        dims: Dimensions::new(1, 1).unwrap(),
        grid: TimeGrid::new(1.0, steps).unwrap(),
        coeffs: CoeffSet {
            a: scal(0.1),
            a1: scal(0.05),
            b: scal(1.0),
            c: scal(0.2),
            c1: scal(0.1),
            d: scal(0.5),
            q: scal(1.0),
            q1: scal(0.5),
            r: scal(1.0),
            g: scal(1.0),
        },
        xi: DVector::from_vec(vec![1.0]),
        delta: 1.0,
    }
}

/// Random-coefficient variant of instance1: A = 0.1 + 0.2 sign(W),
/// C1 = 0.1 (1 + 1{W > 0}).
pub fn instance1_random(steps: usize) -> ProblemSpec {
    let mut spec = instance1(steps);
    spec.name = format!("instance1-random-n{steps}");
    spec.coeffs.a = CoeffRule::SignW {
        base: mat(1, 1, &[0.1]),
        amplitude: mat(1, 1, &[0.2]),
    };
    spec.coeffs.c1 = CoeffRule::StepWPos {
        base: mat(1, 1, &[0.1]),
        amplitude: mat(1, 1, &[0.1]),
    };
    spec
}

/// Two-dimensional state, scalar control.
pub fn twodim(steps: usize) -> ProblemSpec {
    ProblemSpec {
        name: format!("twodim-n{steps}"),
        dims: Dimensions::new(2, 1).unwrap(),
        grid: TimeGrid::new(1.0, steps).unwrap(),
        coeffs: CoeffSet {
            a: CoeffRule::Constant(mat(2, 2, &[0.1, 0.05, 0.0, 0.08])),
            a1: CoeffRule::Constant(mat(2, 2, &[0.05, 0.0, 0.0, 0.05])),
            b: CoeffRule::Constant(mat(2, 1, &[1.0, 0.5])),
            c: CoeffRule::Constant(mat(2, 2, &[0.2, 0.0, 0.1, 0.1])),
            c1: CoeffRule::Constant(mat(2, 2, &[0.1, 0.0, 0.0, 0.05])),
            d: CoeffRule::Constant(mat(2, 1, &[0.5, 0.2])),
            q: CoeffRule::Constant(mat(2, 2, &[1.0, 0.0, 0.0, 1.0])),
            q1: CoeffRule::Constant(mat(2, 2, &[0.5, 0.1, 0.1, 0.4])),
            r: CoeffRule::Constant(mat(1, 1, &[1.0])),
            g: CoeffRule::Constant(mat(2, 2, &[1.0, 0.0, 0.0, 1.0])),
        },
        xi: DVector::from_vec(vec![1.0, -0.5]),
        delta: 1.0,
    }
}

/// Two-dimensional state and control.
pub fn twodim_full(steps: usize) -> ProblemSpec {
    let mut spec = twodim(steps);
    spec.name = format!("twodim-full-n{steps}");
    spec.dims = Dimensions::new(2, 2).unwrap();
    spec.coeffs.b = CoeffRule::Constant(mat(2, 2, &[1.0, 0.2, 0.5, 1.0]));
    spec.coeffs.d = CoeffRule::Constant(mat(2, 2, &[0.5, 0.0, 0.2, 0.3]));
    spec.coeffs.r = CoeffRule::Constant(mat(2, 2, &[1.0, 0.1, 0.1, 0.8]));
    spec.delta = 0.7;
    spec
}

/// Random-coefficient two-dimensional instance.
pub fn twodim_random(steps: usize) -> ProblemSpec {
    let mut spec = twodim_full(steps);
    spec.name = format!("twodim-random-n{steps}");
    spec.coeffs.a = CoeffRule::SignW {
        base: mat(2, 2, &[0.1, 0.05, 0.0, 0.08]),
        amplitude: mat(2, 2, &[0.05, 0.0, 0.02, 0.05]),
    };
    spec.coeffs.q = CoeffRule::StepWPos {
        base: mat(2, 2, &[1.0, 0.0, 0.0, 1.0]),
        amplitude: mat(2, 2, &[0.5, 0.0, 0.0, 0.2]),
    };
    spec
}

/// Classical SLQ instance: mean-field channels zeroed (A1 = C1 = Q1 = 0).
pub fn classical(steps: usize) -> ProblemSpec {
    let mut spec = instance1(steps);
    spec.name = format!("classical-n{steps}");
    spec.coeffs.a1 = scal(0.0);
    spec.coeffs.c1 = scal(0.0);
    spec.coeffs.q1 = scal(0.0);
    spec
}

/// Classical SLQ with a random drift coefficient.
pub fn classical_random(steps: usize) -> ProblemSpec {
    let mut spec = classical(steps);
    spec.name = format!("classical-random-n{steps}");
    spec.coeffs.a = CoeffRule::SignW {
        base: mat(1, 1, &[0.1]),
        amplitude: mat(1, 1, &[0.2]),
    };
    spec
}

/// Scalar instance with a time-polynomial state weight Q(t) = 1 + 0.5 t.
pub fn poly_weight(steps: usize) -> ProblemSpec {
    let mut spec = instance1(steps);
    spec.name = format!("poly-weight-n{steps}");
    spec.coeffs.q = CoeffRule::Poly {
        coeffs: vec![1.0, 0.5],
        matrix: mat(1, 1, &[1.0]),
    };
    spec
}

/// The acceptance corpus: >= 12 instances, n,m in {1,2}, N in {4,6,8},
/// deterministic and random coefficients.
pub fn acceptance_corpus() -> Vec<ProblemSpec> {
    vec![
        instance1(4),
        instance1(6),
        instance1(8),
        instance1_random(4),
        instance1_random(6),
        instance1_random(8),
        twodim(4),
        twodim(6),
        twodim_full(4),
        twodim_random(4),
        classical(6),
        classical_random(4),
        poly_weight(6),
    ]
}
