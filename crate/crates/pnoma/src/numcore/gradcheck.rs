//! Whole-graph gradient verification against central finite differences.
//!
//! The builder closure reconstructs the same scalar loss from a given set of
//! parameter leaves. `grad_check` first proves the builder deterministic
//! (two fresh builds must agree bit-for-bit), then compares every analytic
//! parameter gradient against `(f(p+h) - f(p-h)) / 2h`.

use super::tape::{Tape, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Default perturbation step for finite differences.
pub const DEFAULT_FD_STEP: f64 = 1e-5;

/// Default passing threshold on the per-element relative error.
pub const DEFAULT_FD_TOLERANCE: f64 = 1e-4;

/// Worst relative error observed for one named parameter tensor.
#[derive(Debug, Clone)]
pub struct GradCheckEntry {
    pub name: String,
    pub max_rel_err: f64,
    /// Flat index where the worst disagreement occurred.
    pub worst_index: usize,
}

/// Outcome of a full finite-difference sweep.
#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub entries: Vec<GradCheckEntry>,
    pub tolerance: f64,
    pub step: f64,
}

impl GradCheckReport {
    /// True when every parameter stayed inside the tolerance.
    pub fn passed(&self) -> bool {
        self.entries.iter().all(|e| e.max_rel_err < self.tolerance)
    }

    /// Names of parameters whose gradients disagree with finite differences.
    pub fn failures(&self) -> Vec<&str> {
        self.entries
            .iter()
            .filter(|e| e.max_rel_err >= self.tolerance)
            .map(|e| e.name.as_str())
            .collect()
    }

    /// The single worst entry, if any parameters were checked.
    pub fn worst(&self) -> Option<&GradCheckEntry> {
        self.entries.iter().max_by(|a, b| a.max_rel_err.total_cmp(&b.max_rel_err))
    }
}

/// Verifies analytic gradients of `build` for every named parameter.
///
/// `build` must construct the same scalar loss whenever it is handed the same
/// parameter values; any nondeterminism (fresh randomness, global state) is
/// detected and rejected before gradients are compared.
pub fn grad_check<F>(
    params: &[(String, Tensor)],
    tolerance: f64,
    step: f64,
    build: F,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    assert!(step > 0.0, "finite-difference step must be positive");
    assert!(tolerance > 0.0, "tolerance must be positive");

    let eval = |values: &[Tensor]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = values
            .iter()
            .map(|t| tape.leaf(t.clone(), false))
            .collect::<Result<_>>()?;
        let root = build(&mut tape, &vars)?;
        let v = tape.value(root);
        if !v.is_scalar() {
            return Err(Error::Graph(format!(
                "grad_check loss must be scalar, got shape {:?}",
                v.shape()
            )));
        }
        Ok(v.item())
    };

    // Determinism gate: the builder must reproduce the loss bit-for-bit.
    let base: Vec<Tensor> = params.iter().map(|(_, t)| t.clone()).collect();
    let l1 = eval(&base)?;
    let l2 = eval(&base)?;
    if l1.to_bits() != l2.to_bits() {
        return Err(Error::Determinism(format!(
            "loss builder returned {l1} then {l2} for identical parameters"
        )));
    }

    // Analytic pass.
    let mut tape = Tape::new();
    let vars: Vec<Var> = params
        .iter()
        .map(|(_, t)| tape.leaf(t.clone(), true))
        .collect::<Result<_>>()?;
    let root = build(&mut tape, &vars)?;
    tape.backward(root)?;
    let analytic: Vec<Tensor> = vars
        .iter()
        .zip(params.iter())
        .map(|(&v, (_, t))| tape.grad(v).cloned().unwrap_or_else(|| Tensor::zeros(t.shape())))
        .collect();

    // Finite differences, one element at a time.
    let mut entries = Vec::with_capacity(params.len());
    let mut work = base.clone();
    for (pi, (name, tensor)) in params.iter().enumerate() {
        let mut worst = 0.0_f64;
        let mut worst_index = 0;
        for ei in 0..tensor.len() {
            let keep = work[pi].data()[ei];
            work[pi].data_mut()[ei] = keep + step;
            let fp = eval(&work)?;
            work[pi].data_mut()[ei] = keep - step;
            let fm = eval(&work)?;
            work[pi].data_mut()[ei] = keep;
            let numeric = (fp - fm) / (2.0 * step);
            let a = analytic[pi].data()[ei];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-6);
            if rel > worst {
                worst = rel;
                worst_index = ei;
            }
        }
        entries.push(GradCheckEntry { name: name.clone(), max_rel_err: worst, worst_index });
    }

    Ok(GradCheckReport { entries, tolerance, step })
}
