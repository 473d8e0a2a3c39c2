//! Serialization of solver artifacts: SolveReport JSON, path/Riccati/summary
//! CSV. JSON key order is sorted (serde_json's default map), so identical
//! inputs produce byte-identical files; the lone nondeterministic field is
//! `timestamp`, which consumers exclude from comparisons.

use nalgebra::{DMatrix, DVector};
use serde_json::{json, Value};

use crate::model::{CoefficientField, TimeGrid};
use crate::riccati::RiccatiSolution;
use crate::stationarity::SolveReport;
use crate::tree_sde::StatePath;

fn vec_json(v: &DVector<f64>) -> Value {
    Value::Array(v.iter().map(|x| json!(x)).collect())
}

fn mat_json(m: &DMatrix<f64>) -> Value {
    Value::Array(
        (0..m.nrows())
            .map(|r| Value::Array((0..m.ncols()).map(|c| json!(m[(r, c)])).collect()))
            .collect(),
    )
}

/// Seconds since the epoch; honors SOURCE_DATE_EPOCH for reproducible builds.
pub fn timestamp() -> u64 {
    if let Ok(v) = std::env::var("SOURCE_DATE_EPOCH") {
        if let Ok(t) = v.parse() {
            return t;
        }
    }
    std::time::SystemTime::now()
        .duration_since(std::time::UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0)
}

/// Full SolveReport as JSON. Node-indexed data (gains, offsets, controls) is
/// included only for trees of depth <= 8.
pub fn report_json(rep: &SolveReport, grid: &TimeGrid, seed: u64) -> Value {
    let steps = grid.steps;
    let cells = |g: &crate::operators::GridVector| -> Value {
        Value::Array((0..steps).map(|i| vec_json(&g.cell(i))).collect())
    };
    let mut out = json!({
        "name": rep.name,
        "seed": seed,
        "timestamp": timestamp(),
        "grid": {"horizon": grid.horizon, "steps": steps, "dt": grid.dt()},
        "cost": {
            "running_state": rep.j.running_state,
            "running_mean": rep.j.running_mean,
            "running_control": rep.j.running_control,
            "terminal": rep.j.terminal,
            "multiplier": rep.j.multiplier,
            "total": rep.j.total,
        },
        "multipliers": {
            "alpha": cells(&rep.multipliers.alpha),
            "lambda": cells(&rep.multipliers.lambda),
            "beta": cells(&rep.multipliers.beta),
        },
        "kkt": {
            "rows": rep.kkt.rows,
            "cols": rep.kkt.cols,
            "rank": rep.kkt.rank,
            "block_residuals": rep.kkt.block_residuals.to_vec(),
            "nonunique": rep.kkt.nonunique,
        },
        "residuals": rep.residuals,
        "min_gap": rep.min_gap,
        "mean_trajectory": Value::Array(rep.x.mean.iter().map(vec_json).collect()),
    });
    if steps <= 8 {
        let gains: Value = Value::Array(
            rep.control
                .gain
                .iter()
                .map(|lvl| Value::Array(lvl.iter().map(mat_json).collect()))
                .collect(),
        );
        let offsets: Value = Value::Array(
            rep.control
                .offset
                .iter()
                .map(|lvl| Value::Array(lvl.iter().map(vec_json).collect()))
                .collect(),
        );
        let controls: Value = Value::Array(
            rep.u
                .iter()
                .map(|lvl| Value::Array(lvl.iter().map(vec_json).collect()))
                .collect(),
        );
        let obj = out.as_object_mut().unwrap();
        obj.insert("gains".into(), gains);
        obj.insert("offsets".into(), offsets);
        obj.insert("controls".into(), controls);
    }
    out
}

/// Render a JSON value with a stable layout.
pub fn to_json_string(v: &Value) -> String {
    let mut s = serde_json::to_string_pretty(v).expect("serializable");
    s.push('\n');
    s
}

/// Strip the timestamp line for byte-comparisons across runs.
pub fn without_timestamp(json_text: &str) -> String {
    json_text
        .lines()
        .filter(|l| !l.trim_start().starts_with("\"timestamp\""))
        .collect::<Vec<_>>()
        .join("\n")
}

fn fmt(x: f64) -> String {
    format!("{x:.17e}")
}

/// One row per grid time: t, EX components.
pub fn path_csv(grid: &TimeGrid, path: &StatePath) -> String {
    let n = path.mean[0].len();
    let mut out = String::from("t");
    for k in 0..n {
        out.push_str(&format!(",ex_{k}"));
    }
    out.push('\n');
    for (i, ex) in path.mean.iter().enumerate() {
        out.push_str(&fmt(grid.time(i)));
        for k in 0..n {
            out.push_str(&format!(",{}", fmt(ex[k])));
        }
        out.push('\n');
    }
    out
}

/// Riccati export: level, node, vec(Sigma) then vec(Psi) (column-major); Psi
/// columns are empty on the terminal level.
pub fn riccati_csv(ric: &RiccatiSolution) -> String {
    let n = ric.sigma[0][0].nrows();
    let mut out = String::from("level,node");
    for c in 0..n {
        for r in 0..n {
            out.push_str(&format!(",sigma_{r}{c}"));
        }
    }
    for c in 0..n {
        for r in 0..n {
            out.push_str(&format!(",psi_{r}{c}"));
        }
    }
    out.push('\n');
    for (i, lvl) in ric.sigma.iter().enumerate() {
        for (j, s) in lvl.iter().enumerate() {
            out.push_str(&format!("{i},{j}"));
            for v in s.iter() {
                out.push_str(&format!(",{}", fmt(*v)));
            }
            if i < ric.psi.len() {
                for v in ric.psi[i][j].iter() {
                    out.push_str(&format!(",{}", fmt(*v)));
                }
            } else {
                for _ in 0..n * n {
                    out.push(',');
                }
            }
            out.push('\n');
        }
    }
    out
}

/// Summary rows: t, alpha*, lambda*, beta*, EX* (multiplier cells are empty
/// on the terminal row), with the cost breakdown in trailing comment lines.
pub fn summary_csv(rep: &SolveReport, grid: &TimeGrid) -> String {
    let n = rep.x.mean[0].len();
    let mut out = String::from("t");
    for (tag, _) in [("alpha", 0), ("lambda", 1), ("beta", 2)] {
        for k in 0..n {
            out.push_str(&format!(",{tag}_{k}"));
        }
    }
    for k in 0..n {
        out.push_str(&format!(",ex_{k}"));
    }
    out.push('\n');
    for i in 0..=grid.steps {
        out.push_str(&fmt(grid.time(i)));
        if i < grid.steps {
            for g in [
                &rep.multipliers.alpha,
                &rep.multipliers.lambda,
                &rep.multipliers.beta,
            ] {
                let cell = g.cell(i);
                for k in 0..n {
                    out.push_str(&format!(",{}", fmt(cell[k])));
                }
            }
        } else {
            for _ in 0..3 * n {
                out.push(',');
            }
        }
        for k in 0..n {
            out.push_str(&format!(",{}", fmt(rep.x.mean[i][k])));
        }
        out.push('\n');
    }
    out.push_str(&format!("# total,{}\n", fmt(rep.j.total)));
    out.push_str(&format!("# running_state,{}\n", fmt(rep.j.running_state)));
    out.push_str(&format!("# running_mean,{}\n", fmt(rep.j.running_mean)));
    out.push_str(&format!(
        "# running_control,{}\n",
        fmt(rep.j.running_control)
    ));
    out.push_str(&format!("# terminal,{}\n", fmt(rep.j.terminal)));
    out
}

/// Particle trajectories: t, empirical mean components.
pub fn particles_csv(rep: &crate::tree_sde::ParticleReport) -> String {
    let n = rep.mean[0].len();
    let mut out = String::from("t");
    for k in 0..n {
        out.push_str(&format!(",mean_{k}"));
    }
    out.push('\n');
    for (i, t) in rep.times.iter().enumerate() {
        out.push_str(&fmt(*t));
        for k in 0..n {
            out.push_str(&format!(",{}", fmt(rep.mean[i][k])));
        }
        out.push('\n');
    }
    out
}

/// Verification report JSON for one instance.
pub fn verification_json(rep: &crate::verify::VerificationReport, seed: u64) -> Value {
    json!({
        "name": rep.name,
        "seed": seed,
        "timestamp": timestamp(),
        "passed": rep.passed(),
        "checks": rep.checks.iter().map(|c| json!({
            "name": c.name,
            "value": c.value,
            "threshold": c.threshold,
            "pass": c.pass,
        })).collect::<Vec<_>>(),
    })
}

/// Corpus-level one-line-per-instance CSV.
pub fn corpus_csv(rows: &[(String, bool, f64)]) -> String {
    let mut out = String::from("instance,passed,worst_margin\n");
    for (name, ok, margin) in rows {
        out.push_str(&format!("{name},{ok},{}\n", fmt(*margin)));
    }
    out
}

pub fn field_grid(field: &CoefficientField, horizon: f64) -> TimeGrid {
    TimeGrid {
        horizon,
        steps: field.steps,
    }
}
