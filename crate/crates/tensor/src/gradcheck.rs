//! Central finite-difference verification of tape gradients in f64.

use std::collections::BTreeMap;

use crate::error::{Result, TensorError};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy)]
pub struct GradCheckConfig {
    pub eps: f64,
    pub tol: f64,
    /// Coordinates probed per tensor; smaller tensors are probed exhaustively.
    pub coords_per_tensor: usize,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        GradCheckConfig { eps: 1e-4, tol: 1e-4, coords_per_tensor: 6 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamCheck {
    pub name: String,
    pub max_rel_error: f64,
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub checked: usize,
    /// Coordinates abandoned because every step size crossed a ReLU or
    /// max-pool switch.
    pub skipped: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub tol: f64,
    pub params: Vec<ParamCheck>,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.params.iter().all(|p| p.checked > 0 && p.max_rel_error <= self.tol)
    }

    pub fn failures(&self) -> impl Iterator<Item = &ParamCheck> {
        self.params.iter().filter(move |p| p.checked == 0 || p.max_rel_error > self.tol)
    }

    pub fn worst(&self) -> Option<&ParamCheck> {
        self.params.iter().max_by(|a, b| a.max_rel_error.total_cmp(&b.max_rel_error))
    }

    pub fn max_rel_error(&self) -> f64 {
        self.worst().map_or(0.0, |p| p.max_rel_error)
    }
}

pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Rounding error of a central difference: `L(x+ε) − L(x−ε)` is only known
/// to a few ulps of the loss, so the quotient carries about `ulps·|L| / 2ε`.
pub fn difference_noise(loss: f64, eps: f64) -> f64 {
    16.0 * f64::EPSILON * loss.abs().max(1.0) / (2.0 * eps)
}

/// Gradients smaller than this cannot be certified to relative precision
/// `tol` by a central difference; below it errors are measured against it.
pub fn error_floor(loss: f64, eps: f64, tol: f64) -> f64 {
    (difference_noise(loss, eps) / tol).max(1e-8)
}

/// Evenly spaced probe coordinates; all of them when `numel <= count`.
fn probe_indices(numel: usize, count: usize) -> Vec<usize> {
    if numel <= count {
        return (0..numel).collect();
    }
    let mut idx: Vec<usize> = (0..count).map(|j| (2 * j + 1) * numel / (2 * count)).collect();
    idx.dedup();
    idx
}

/// Builds the scalar loss from bound parameters. Must be a pure function of
/// `params`; every call sees a fresh tape.
pub trait LossFn: Fn(&Tape<f64>, &BTreeMap<String, Var>) -> Result<Var> {}
impl<F: Fn(&Tape<f64>, &BTreeMap<String, Var>) -> Result<Var>> LossFn for F {}

struct Evaluation {
    loss: f64,
    signature: u64,
    tape: Tape<f64>,
    loss_var: Var,
    vars: BTreeMap<String, Var>,
}

fn evaluate(params: &BTreeMap<String, Tensor<f64>>, f: &impl LossFn, with_grad: bool) -> Result<Evaluation> {
    let tape = Tape::new();
    let vars = params.iter().map(|(k, v)| (k.clone(), tape.leaf(v.clone(), with_grad))).collect();
    let loss = f(&tape, &vars)?;
    let value = tape.value(loss);
    if value.numel() != 1 {
        return Err(TensorError::contract("grad_check", format!("loss has shape {:?}", value.shape())));
    }
    let signature = tape.kink_signature();
    Ok(Evaluation { loss: value.item(), signature, tape, loss_var: loss, vars })
}

/// Compares analytic gradients of `f` against central differences for every
/// parameter in `params`.
pub fn grad_check(
    params: &BTreeMap<String, Tensor<f64>>,
    f: impl LossFn,
    cfg: GradCheckConfig,
) -> Result<GradCheckReport> {
    let first = evaluate(params, &f, true)?;
    let second = evaluate(params, &f, false)?;
    let (base, base_sig) = (first.loss, first.signature);
    let (again, again_sig) = (second.loss, second.signature);
    if base.to_bits() != again.to_bits() || base_sig != again_sig {
        return Err(TensorError::NonDeterministic(format!(
            "two identical forwards gave {base:e} and {again:e}; use eval-mode norms and a fixed seed"
        )));
    }
    if !base.is_finite() {
        return Err(TensorError::NonFinite { what: "grad_check loss".into() });
    }
    let grads = first.tape.backward(first.loss_var)?;

    let mut report = GradCheckReport { tol: cfg.tol, params: Vec::new() };
    let mut probe = params.clone();
    for (name, value) in params {
        let analytic = grads.wrt(first.vars[name]);
        let mut entry = ParamCheck {
            name: name.clone(),
            max_rel_error: 0.0,
            worst_index: 0,
            analytic: 0.0,
            numeric: 0.0,
            checked: 0,
            skipped: 0,
        };
        for i in probe_indices(value.numel(), cfg.coords_per_tensor) {
            let mut numeric = None;
            let mut used_eps = cfg.eps;
            let mut eps = cfg.eps;
            let orig = value.data()[i];
            for _ in 0..3 {
                let mut at = |delta: f64| -> Result<Evaluation> {
                    probe.get_mut(name).expect("probe mirrors params").data_mut()[i] = orig + delta;
                    evaluate(&probe, &f, false)
                };
                let plus = at(eps)?;
                let minus = at(-eps)?;
                if plus.signature == base_sig && minus.signature == base_sig {
                    numeric = Some((plus.loss - minus.loss) / (2.0 * eps));
                    used_eps = eps;
                    break;
                }
                eps /= 10.0;
            }
            probe.get_mut(name).expect("probe mirrors params").data_mut()[i] = orig;
            let Some(numeric) = numeric else {
                entry.skipped += 1;
                continue;
            };
            let a = analytic.data()[i];
            let err = relative_error(a, numeric, error_floor(base, used_eps, cfg.tol));
            entry.checked += 1;
            if err >= entry.max_rel_error {
                entry.max_rel_error = err;
                entry.worst_index = i;
                entry.analytic = a;
                entry.numeric = numeric;
            }
        }
        report.params.push(entry);
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn probes_cover_small_tensors() {
        assert_eq!(probe_indices(3, 6), vec![0, 1, 2]);
        let p = probe_indices(100, 4);
        assert_eq!(p.len(), 4);
        assert!(p.iter().all(|&i| i < 100));
    }

    #[test]
    fn relative_error_floor() {
        assert_eq!(relative_error(0.0, 0.0, 1e-8), 0.0);
        assert!((relative_error(1e-9, 0.0, 1e-8) - 0.1).abs() < 1e-12);
        // an exactly zero gradient against a few ulps of difference noise
        let floor = error_floor(1.4, 1e-4, 1e-4);
        assert!(relative_error(0.0, 4.4e-12, floor) < 1e-4);
        // while a genuine error of the same relative size does not pass
        assert!(relative_error(1e-3, 1.001e-3, floor) > 1e-4 * 0.99);
    }

    #[test]
    fn detects_nondeterminism() {
        use std::cell::Cell;
        let calls = Cell::new(0.0);
        let mut params = BTreeMap::new();
        params.insert("w".to_string(), Tensor::<f64>::ones([2]));
        let err = grad_check(
            &params,
            |tape: &Tape<f64>, v: &BTreeMap<String, Var>| {
                calls.set(calls.get() + 1.0);
                let s = tape.sum(v["w"])?;
                tape.scale(s, calls.get())
            },
            GradCheckConfig::default(),
        )
        .unwrap_err();
        assert!(matches!(err, TensorError::NonDeterministic(_)));
    }
}
