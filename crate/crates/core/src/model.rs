//! Problem instances, the binary scenario tree, and assumption validation.
//!
//! The Brownian filtration is discretized by a non-recombining binary tree:
//! level `i` has `2^i` equiprobable nodes, each child moves the Brownian path
//! by `±sqrt(dt)`. Conditional expectations are exact two-point averages, so
//! every downstream identity can be checked to machine precision.

use std::collections::BTreeMap;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::Deserialize;

use crate::error::{Error, Result};

/// Node-indexed matrices: `mats[level][node]`.
pub type NodeMats = Vec<Vec<DMatrix<f64>>>;
/// Node-indexed vectors: `vecs[level][node]`.
pub type NodeVecs = Vec<Vec<DVector<f64>>>;

/// Hard cap on tree depth; 2^16 leaves is the largest size the dense
/// verification machinery is expected to handle.
pub const MAX_DEPTH: usize = 16;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Dimensions {
    pub n: usize,
    pub m: usize,
}

impl Dimensions {
    pub fn new(n: usize, m: usize) -> Result<Self> {
        if n == 0 || m == 0 {
            return Err(Error::Config(format!(
                "dimensions must be positive, got n={n}, m={m}"
            )));
        }
        Ok(Dimensions { n, m })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TimeGrid {
    pub horizon: f64,
    pub steps: usize,
}

impl TimeGrid {
    pub fn new(horizon: f64, steps: usize) -> Result<Self> {
        if !(horizon > 0.0) || steps == 0 {
            return Err(Error::Config(format!(
                "grid needs horizon > 0 and steps >= 1, got T={horizon}, N={steps}"
            )));
        }
        Ok(TimeGrid { horizon, steps })
    }

    pub fn dt(&self) -> f64 {
        self.horizon / self.steps as f64
    }

    pub fn time(&self, i: usize) -> f64 {
        self.dt() * i as f64
    }
}

/// Non-recombining binary tree over the grid. Children of node `(i, j)` are
/// `(i+1, 2j)` with increment `+sqrt(dt)` and `(i+1, 2j+1)` with `-sqrt(dt)`.
#[derive(Debug, Clone, Copy)]
pub struct ScenarioTree {
    pub grid: TimeGrid,
}

pub fn build_tree(grid: TimeGrid) -> Result<ScenarioTree> {
    if grid.steps > MAX_DEPTH {
        return Err(Error::TreeTooDeep {
            requested: grid.steps,
            cap: MAX_DEPTH,
        });
    }
    Ok(ScenarioTree { grid })
}

impl ScenarioTree {
    pub fn steps(&self) -> usize {
        self.grid.steps
    }

    pub fn dt(&self) -> f64 {
        self.grid.dt()
    }

    pub fn sqrt_dt(&self) -> f64 {
        self.dt().sqrt()
    }

    pub fn nodes_at(&self, level: usize) -> usize {
        1usize << level
    }

    /// Probability of any single node at `level` (all nodes equiprobable).
    pub fn prob(&self, level: usize) -> f64 {
        (0.5f64).powi(level as i32)
    }

    /// Brownian value accumulated along the path to node `(level, node)`.
    /// Bit `b` of `node` (msb = first step) is 0 for an up move.
    pub fn w_value(&self, level: usize, node: usize) -> f64 {
        let sq = self.sqrt_dt();
        let mut w = 0.0;
        for b in 0..level {
            let bit = (node >> (level - 1 - b)) & 1;
            w += if bit == 0 { sq } else { -sq };
        }
        w
    }
}

/// A single coefficient as a rule of `(t, W(t))`, evaluated per tree node.
#[derive(Debug, Clone, PartialEq)]
pub enum CoeffRule {
    Constant(DMatrix<f64>),
    /// `(sum_k coeffs[k] t^k) * matrix`
    Poly {
        coeffs: Vec<f64>,
        matrix: DMatrix<f64>,
    },
    /// `base + amplitude * sign(W(t))`
    SignW {
        base: DMatrix<f64>,
        amplitude: DMatrix<f64>,
    },
    /// `base + amplitude * 1{W(t) > 0}`
    StepWPos {
        base: DMatrix<f64>,
        amplitude: DMatrix<f64>,
    },
}

impl CoeffRule {
    pub fn constant_scalar(v: f64) -> Self {
        CoeffRule::Constant(DMatrix::from_element(1, 1, v))
    }

    pub fn eval(&self, t: f64, w: f64) -> DMatrix<f64> {
        match self {
            CoeffRule::Constant(mat) => mat.clone(),
            CoeffRule::Poly { coeffs, matrix } => {
                let mut p = 0.0;
                for &c in coeffs.iter().rev() {
                    p = p * t + c;
                }
                matrix * p
            }
            CoeffRule::SignW { base, amplitude } => base + amplitude * w.signum_or_zero(),
            CoeffRule::StepWPos { base, amplitude } => {
                if w > 0.0 {
                    base + amplitude
                } else {
                    base.clone()
                }
            }
        }
    }

    pub fn is_deterministic(&self) -> bool {
        matches!(self, CoeffRule::Constant(_) | CoeffRule::Poly { .. })
    }

}

trait SignumOrZero {
    fn signum_or_zero(self) -> f64;
}

impl SignumOrZero for f64 {
    /// `f64::signum(0.0) == 1.0`; the coefficient rules want sign(0) = 0.
    fn signum_or_zero(self) -> f64 {
        if self == 0.0 {
            0.0
        } else {
            self.signum()
        }
    }
}

#[derive(Debug, Clone)]
pub struct CoeffSet {
    pub a: CoeffRule,
    pub a1: CoeffRule,
    pub b: CoeffRule,
    pub c: CoeffRule,
    pub c1: CoeffRule,
    pub d: CoeffRule,
    pub q: CoeffRule,
    pub q1: CoeffRule,
    pub r: CoeffRule,
    pub g: CoeffRule,
}

#[derive(Debug, Clone)]
pub struct ProblemSpec {
    pub name: String,
    pub dims: Dimensions,
    pub grid: TimeGrid,
    pub coeffs: CoeffSet,
    pub xi: DVector<f64>,
    pub delta: f64,
}

impl ProblemSpec {
    pub fn is_deterministic(&self) -> bool {
        let c = &self.coeffs;
        [
            &c.a, &c.a1, &c.b, &c.c, &c.c1, &c.d, &c.q, &c.q1, &c.r, &c.g,
        ]
        .iter()
        .all(|r| r.is_deterministic())
    }

    pub fn tree(&self) -> Result<ScenarioTree> {
        build_tree(self.grid)
    }

    /// Copy of the spec with a different number of grid steps.
    pub fn with_steps(&self, steps: usize) -> Self {
        let mut s = self.clone();
        s.grid.steps = steps;
        s
    }
}

/// All coefficients evaluated on the tree (levels 0..N-1; G on the leaves).
#[derive(Debug, Clone)]
pub struct CoefficientField {
    pub n: usize,
    pub m: usize,
    pub steps: usize,
    pub dt: f64,
    pub delta: f64,
    pub a: NodeMats,
    pub a1: NodeMats,
    pub b: NodeMats,
    pub c: NodeMats,
    pub c1: NodeMats,
    pub d: NodeMats,
    pub q: NodeMats,
    pub q1: NodeMats,
    pub r: NodeMats,
    pub g: Vec<DMatrix<f64>>,
}

impl CoefficientField {
    pub fn sqrt_dt(&self) -> f64 {
        self.dt.sqrt()
    }

    pub fn nodes_at(&self, level: usize) -> usize {
        1usize << level
    }

    pub fn prob(&self, level: usize) -> f64 {
        (0.5f64).powi(level as i32)
    }

    /// E[Q1] at a level (plain average, nodes equiprobable).
    pub fn mean_q1(&self, level: usize) -> DMatrix<f64> {
        let k = self.nodes_at(level);
        let mut acc = DMatrix::zeros(self.n, self.n);
        for j in 0..k {
            acc += &self.q1[level][j];
        }
        acc / k as f64
    }
}

pub fn evaluate_coefficients(spec: &ProblemSpec, tree: &ScenarioTree) -> Result<CoefficientField> {
    let (n, m) = (spec.dims.n, spec.dims.m);
    let steps = tree.steps();
    let check = |name: &str, rule: &CoeffRule, level: usize, node: usize, rows: usize, cols: usize| -> Result<DMatrix<f64>> {
        let t = tree.grid.time(level);
        let w = tree.w_value(level, node);
        let mat = rule.eval(t, w);
        if mat.shape() != (rows, cols) {
            return Err(Error::Shape {
                name: name.to_string(),
                level,
                node,
                expected: format!("{rows}x{cols}"),
                got: format!("{}x{}", mat.nrows(), mat.ncols()),
            });
        }
        Ok(mat)
    };

    let mut field = CoefficientField {
        n,
        m,
        steps,
        dt: tree.dt(),
        delta: spec.delta,
        a: Vec::new(),
        a1: Vec::new(),
        b: Vec::new(),
        c: Vec::new(),
        c1: Vec::new(),
        d: Vec::new(),
        q: Vec::new(),
        q1: Vec::new(),
        r: Vec::new(),
        g: Vec::new(),
    };
    for i in 0..steps {
        let k = tree.nodes_at(i);
        let mut lvl: [Vec<DMatrix<f64>>; 9] = Default::default();
        for j in 0..k {
            lvl[0].push(check("A", &spec.coeffs.a, i, j, n, n)?);
            lvl[1].push(check("A1", &spec.coeffs.a1, i, j, n, n)?);
            lvl[2].push(check("B", &spec.coeffs.b, i, j, n, m)?);
            lvl[3].push(check("C", &spec.coeffs.c, i, j, n, n)?);
            lvl[4].push(check("C1", &spec.coeffs.c1, i, j, n, n)?);
            lvl[5].push(check("D", &spec.coeffs.d, i, j, n, m)?);
            lvl[6].push(check("Q", &spec.coeffs.q, i, j, n, n)?);
            lvl[7].push(check("Q1", &spec.coeffs.q1, i, j, n, n)?);
            lvl[8].push(check("R", &spec.coeffs.r, i, j, m, m)?);
        }
        let [a, a1, b, c, c1, d, q, q1, r] = lvl;
        field.a.push(a);
        field.a1.push(a1);
        field.b.push(b);
        field.c.push(c);
        field.c1.push(c1);
        field.d.push(d);
        field.q.push(q);
        field.q1.push(q1);
        field.r.push(r);
    }
    for j in 0..tree.nodes_at(steps) {
        field.g.push(check("G", &spec.coeffs.g, steps, j, n, n)?);
    }
    if spec.xi.len() != n {
        return Err(Error::Config(format!(
            "xi has length {}, expected n={n}",
            spec.xi.len()
        )));
    }
    Ok(field)
}

#[derive(Debug, Clone)]
pub struct Violation {
    pub assumption: &'static str,
    pub level: usize,
    pub node: usize,
    pub detail: String,
}

#[derive(Debug, Clone)]
pub struct AssumptionReport {
    pub h1_ok: bool,
    pub h2_ok: bool,
    /// Provisional: Psi is an output of the Riccati solve; finite trees make
    /// H3 automatic, the final max-norm lands in the definiteness report.
    pub h3_ok: bool,
    pub min_eig_r: f64,
    pub max_norm_psi: Option<f64>,
    pub violations: Vec<Violation>,
}

fn min_symmetric_eig(mat: &DMatrix<f64>) -> f64 {
    let sym = (mat + mat.transpose()) * 0.5;
    sym.symmetric_eigen()
        .eigenvalues
        .iter()
        .copied()
        .fold(f64::INFINITY, f64::min)
}

pub fn validate_assumptions(field: &CoefficientField) -> AssumptionReport {
    let tol = 1e-10;
    let mut violations = Vec::new();
    let mut min_eig_r = f64::INFINITY;
    let mut h1_ok = true;

    let mut check_finite = |name: &'static str, mat: &DMatrix<f64>, level: usize, node: usize, vio: &mut Vec<Violation>| {
        if !mat.iter().all(|v| v.is_finite()) {
            h1_ok = false;
            vio.push(Violation {
                assumption: "H1",
                level,
                node,
                detail: format!("{name} has a non-finite entry"),
            });
        }
    };

    let check_psd = |name: &'static str, mat: &DMatrix<f64>, level: usize, node: usize, vio: &mut Vec<Violation>| -> bool {
        let asym = (mat - mat.transpose()).abs().max();
        if asym > tol {
            vio.push(Violation {
                assumption: "H2",
                level,
                node,
                detail: format!("{name} not symmetric (asym {asym:.3e})"),
            });
            return false;
        }
        let eig = min_symmetric_eig(mat);
        if eig < -tol {
            vio.push(Violation {
                assumption: "H2",
                level,
                node,
                detail: format!("{name} not PSD (eigmin {eig:.3e})"),
            });
            return false;
        }
        true
    };

    let mut h2_ok = true;
    for i in 0..field.steps {
        for j in 0..field.nodes_at(i) {
            for (name, mat) in [
                ("A", &field.a[i][j]),
                ("A1", &field.a1[i][j]),
                ("B", &field.b[i][j]),
                ("C", &field.c[i][j]),
                ("C1", &field.c1[i][j]),
                ("D", &field.d[i][j]),
                ("Q", &field.q[i][j]),
                ("Q1", &field.q1[i][j]),
                ("R", &field.r[i][j]),
            ] {
                check_finite(name, mat, i, j, &mut violations);
            }
            h2_ok &= check_psd("Q", &field.q[i][j], i, j, &mut violations);
            h2_ok &= check_psd("Q1", &field.q1[i][j], i, j, &mut violations);
            let r = &field.r[i][j];
            let asym = (r - r.transpose()).abs().max();
            if asym > tol {
                h2_ok = false;
                violations.push(Violation {
                    assumption: "H2",
                    level: i,
                    node: j,
                    detail: format!("R not symmetric (asym {asym:.3e})"),
                });
            }
            let eig = min_symmetric_eig(r);
            min_eig_r = min_eig_r.min(eig);
            if eig < field.delta - tol {
                h2_ok = false;
                violations.push(Violation {
                    assumption: "H2",
                    level: i,
                    node: j,
                    detail: format!("eigmin(R) = {eig:.6e} < delta = {:.6e}", field.delta),
                });
            }
        }
    }
    for (j, g) in field.g.iter().enumerate() {
        check_finite("G", g, field.steps, j, &mut violations);
        h2_ok &= check_psd("G", g, field.steps, j, &mut violations);
    }

    AssumptionReport {
        h1_ok,
        h2_ok,
        h3_ok: true,
        min_eig_r,
        max_norm_psi: None,
        violations,
    }
}

// ---------------------------------------------------------------------------
// Config file loading (TOML)
// ---------------------------------------------------------------------------

#[derive(Deserialize)]
#[serde(untagged)]
enum RawMatrix {
    Scalar(f64),
    Rows(Vec<Vec<f64>>),
}

impl RawMatrix {
    /// Scalars expand to `v * I` on square targets (and plain `[v]` for 1x1).
    fn to_matrix(&self, name: &str, rows: usize, cols: usize) -> Result<DMatrix<f64>> {
        match self {
            RawMatrix::Scalar(v) => {
                if rows != cols {
                    return Err(Error::Config(format!(
                        "coefficient {name}: scalar shorthand only valid for square shapes, target is {rows}x{cols}"
                    )));
                }
                Ok(DMatrix::identity(rows, cols) * *v)
            }
            RawMatrix::Rows(data) => {
                if data.len() != rows || data.iter().any(|r| r.len() != cols) {
                    return Err(Error::Config(format!(
                        "coefficient {name}: expected a {rows}x{cols} matrix"
                    )));
                }
                Ok(DMatrix::from_fn(rows, cols, |i, j| data[i][j]))
            }
        }
    }
}

#[derive(Deserialize)]
#[serde(untagged)]
enum RawEntry {
    Plain(RawMatrix),
    Rule {
        rule: String,
        base: RawMatrix,
        amplitude: RawMatrix,
    },
    Poly {
        poly: Vec<f64>,
        matrix: Option<Vec<Vec<f64>>>,
    },
}

impl RawEntry {
    fn to_rule(&self, name: &str, rows: usize, cols: usize) -> Result<CoeffRule> {
        match self {
            RawEntry::Plain(m) => Ok(CoeffRule::Constant(m.to_matrix(name, rows, cols)?)),
            RawEntry::Rule {
                rule,
                base,
                amplitude,
            } => {
                let base = base.to_matrix(name, rows, cols)?;
                let amplitude = amplitude.to_matrix(name, rows, cols)?;
                match rule.as_str() {
                    "sign_w" => Ok(CoeffRule::SignW { base, amplitude }),
                    "step_w_pos" => Ok(CoeffRule::StepWPos { base, amplitude }),
                    other => Err(Error::Config(format!(
                        "coefficient {name}: unknown rule '{other}' (expected 'sign_w' or 'step_w_pos')"
                    ))),
                }
            }
            RawEntry::Poly { poly, matrix } => {
                let matrix = match matrix {
                    Some(rows_data) => RawMatrix::Rows(rows_data.clone()).to_matrix(name, rows, cols)?,
                    None => {
                        if rows != cols {
                            return Err(Error::Config(format!(
                                "coefficient {name}: poly without matrix only valid for square shapes"
                            )));
                        }
                        DMatrix::identity(rows, cols)
                    }
                };
                Ok(CoeffRule::Poly {
                    coeffs: poly.clone(),
                    matrix,
                })
            }
        }
    }
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawDims {
    n: usize,
    m: usize,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawGrid {
    horizon: f64,
    steps: usize,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawInitial {
    xi: Vec<f64>,
    delta: f64,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
#[allow(non_snake_case)]
struct RawCoeffs {
    A: RawEntry,
    A1: RawEntry,
    B: RawEntry,
    C: RawEntry,
    C1: RawEntry,
    D: RawEntry,
    Q: RawEntry,
    Q1: RawEntry,
    R: RawEntry,
    G: RawEntry,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawConfig {
    name: Option<String>,
    dimensions: RawDims,
    grid: RawGrid,
    initial: RawInitial,
    coefficients: RawCoeffs,
}

pub fn parse_spec(text: &str, default_name: &str) -> Result<ProblemSpec> {
    let raw: RawConfig =
        toml::from_str(text).map_err(|e| Error::Config(format!("instance file: {e}")))?;
    let dims = Dimensions::new(raw.dimensions.n, raw.dimensions.m)?;
    let grid = TimeGrid::new(raw.grid.horizon, raw.grid.steps)?;
    let (n, m) = (dims.n, dims.m);
    let c = &raw.coefficients;
    let coeffs = CoeffSet {
        a: c.A.to_rule("A", n, n)?,
        a1: c.A1.to_rule("A1", n, n)?,
        b: c.B.to_rule("B", n, m)?,
        c: c.C.to_rule("C", n, n)?,
        c1: c.C1.to_rule("C1", n, n)?,
        d: c.D.to_rule("D", n, m)?,
        q: c.Q.to_rule("Q", n, n)?,
        q1: c.Q1.to_rule("Q1", n, n)?,
        r: c.R.to_rule("R", m, m)?,
        g: c.G.to_rule("G", n, n)?,
    };
    if raw.initial.xi.len() != n {
        return Err(Error::Config(format!(
            "xi has length {}, expected n={n}",
            raw.initial.xi.len()
        )));
    }
    if !(raw.initial.delta > 0.0) {
        return Err(Error::Config("delta must be positive".into()));
    }
    Ok(ProblemSpec {
        name: raw.name.unwrap_or_else(|| default_name.to_string()),
        dims,
        grid,
        coeffs,
        xi: DVector::from_vec(raw.initial.xi),
        delta: raw.initial.delta,
    })
}

pub fn load_spec(path: &Path) -> Result<ProblemSpec> {
    let text = std::fs::read_to_string(path)?;
    let default_name = path
        .file_stem()
        .map(|s| s.to_string_lossy().to_string())
        .unwrap_or_else(|| "instance".to_string());
    parse_spec(&text, &default_name)
}

/// Convenience: level-wise mean of node vectors (nodes equiprobable).
pub fn level_mean(values: &[DVector<f64>]) -> DVector<f64> {
    let mut acc = DVector::zeros(values[0].len());
    for v in values {
        acc += v;
    }
    acc / values.len() as f64
}

/// Map of named residuals/diagnostics accumulated along the pipeline.
pub type ResidualMap = BTreeMap<String, f64>;
