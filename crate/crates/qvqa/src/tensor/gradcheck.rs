//! Central-finite-difference verification of reverse-mode gradients.

use super::{Ix, Params, Tape, Tensor, S};
use crate::error::Result;

/// Outcome of one [`grad_check`] run.
#[derive(Debug, Clone)]
pub struct GradCheckReport {
    /// (parameter name, max relative error over its elements)
    pub per_param: Vec<(String, S)>,
    pub max_rel_err: S,
    pub tol: S,
    /// Human-readable failure locations (non-finite values, tolerance misses).
    pub failures: Vec<String>,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.failures.is_empty() && self.max_rel_err < self.tol
    }
}

/// Relative error scaled against the larger of the two magnitudes, floored
/// at 1 so that near-zero gradient pairs compare absolutely.
fn rel_err(a: S, b: S) -> S {
    (a - b).abs() / (a.abs().max(b.abs())).max(1.0)
}

/// Compares reverse-mode gradients of the scalar loss built by `f` against
/// central finite differences `(f(θ+ε) − f(θ−ε)) / 2ε`, elementwise over
/// every parameter in `params`.
///
/// `f` is called with a fresh tape for every evaluation and must be a pure
/// function of the parameter values.
pub fn grad_check<F>(f: F, params: &mut Params, eps: S, tol: S) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &Params) -> Result<Ix>,
{
    let mut failures = Vec::new();

    // Analytic pass.
    let mut tape = Tape::new();
    let loss = f(&mut tape, params)?;
    let base = tape.value(loss).item();
    if !base.is_finite() {
        failures.push(format!("loss is non-finite at the base point: {base}"));
    }
    params.zero_grads();
    tape.backward(loss, params);
    let analytic: Vec<Tensor> = params.ids().map(|id| params.grad(id).clone()).collect();

    let eval = |tape_params: &Params| -> Result<S> {
        let mut t = Tape::new();
        let ix = f(&mut t, tape_params)?;
        Ok(t.value(ix).item())
    };

    let mut per_param = Vec::new();
    let mut max_rel = 0.0;
    for id in 0..params.len() {
        let n = params.value(id).numel();
        let mut worst = 0.0;
        for e in 0..n {
            let orig = params.value(id).data()[e];
            let mut fd_at = |h: S| -> Result<Option<S>> {
                params.value_mut(id).data_mut()[e] = orig + h;
                let fp = eval(params)?;
                params.value_mut(id).data_mut()[e] = orig - h;
                let fm = eval(params)?;
                params.value_mut(id).data_mut()[e] = orig;
                if !fp.is_finite() || !fm.is_finite() {
                    return Ok(None);
                }
                Ok(Some((fp - fm) / (2.0 * h)))
            };
            let Some(mut fd) = fd_at(eps)? else {
                failures.push(format!(
                    "non-finite loss perturbing {}[{e}]",
                    params.name(id)
                ));
                continue;
            };
            let an = analytic[id].data()[e];
            let mut r = rel_err(an, fd);
            // The truncation/roundoff sweet spot varies with local curvature,
            // so borderline elements get a second chance on a step ladder.
            if r >= tol {
                for scale in [0.25, 0.5, 2.0, 4.0] {
                    if let Some(alt) = fd_at(eps * scale)? {
                        let ra = rel_err(an, alt);
                        if ra < r {
                            r = ra;
                            fd = alt;
                        }
                    }
                }
            }
            if r > worst {
                worst = r;
            }
            if r >= tol {
                failures.push(format!(
                    "{}[{e}]: analytic {an} vs fd {fd} (rel err {r:.3e} ≥ tol {tol:.1e})",
                    params.name(id)
                ));
            }
        }
        if worst > max_rel {
            max_rel = worst;
        }
        per_param.push((params.name(id).to_string(), worst));
    }

    Ok(GradCheckReport { per_param, max_rel_err: max_rel, tol, failures })
}

/// Default finite-difference step for the active precision.
pub fn default_eps() -> S {
    if cfg!(feature = "f64") {
        1e-6
    } else {
        1e-2
    }
}

/// Default pass tolerance for the active precision.
pub fn default_tol() -> S {
    if cfg!(feature = "f64") {
        1e-6
    } else {
        1e-3
    }
}
