use super::params::{ParamId, ParamStore};
use super::tape::{Phase, Tape, Var};
use crate::error::{Error, Result};

/// Outcome of comparing analytic gradients against central differences.
#[derive(Debug, Clone)]
pub struct GradCheck {
    pub max_rel_err: f64,
    /// Parameter and flat index where the worst disagreement occurred,
    /// with the (analytic, numeric) pair — kept for failure messages.
    pub worst: Option<(String, usize, f64, f64)>,
}

impl std::fmt::Display for GradCheck {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match &self.worst {
            Some((name, idx, a, n)) => write!(
                f,
                "max rel err {:.3e} at {name}[{idx}] (analytic {a:.9e}, numeric {n:.9e})",
                self.max_rel_err
            ),
            None => write!(f, "max rel err {:.3e}", self.max_rel_err),
        }
    }
}

/// Compare the tape's analytic gradients against central finite differences
/// for every scalar of every parameter in the store.
///
/// `build` must construct the scalar loss from scratch on the given tape;
/// it is re-invoked for each perturbed evaluation, so it must be a pure
/// function of the store contents. Batchnorm statistic updates are
/// suppressed so repeated forwards see identical state.
///
/// The relative error uses a small floor in the denominator so that
/// near-zero gradient pairs compare absolutely rather than blowing up.
pub fn max_rel_grad_error<F>(
    store: &mut ParamStore,
    phase: Phase,
    delta: f64,
    build: F,
) -> Result<GradCheck>
where
    F: Fn(&mut Tape) -> Result<Var>,
{
    if !(delta.is_finite() && delta > 0.0) {
        return Err(Error::Usage(format!("finite-difference delta must be positive, got {delta}")));
    }

    let analytic = {
        let mut tape = Tape::new(store, phase).without_stat_updates();
        let loss = build(&mut tape)?;
        if tape.value(loss).numel() != 1 {
            return Err(Error::Usage("gradient check requires a scalar loss".into()));
        }
        tape.backward(loss)?
    };

    let eval = |store: &ParamStore| -> Result<f64> {
        let mut tape = Tape::new(store, phase).without_stat_updates();
        let loss = build(&mut tape)?;
        Ok(tape.value(loss).item())
    };

    let mut report = GradCheck {
        max_rel_err: 0.0,
        worst: None,
    };
    let n_params = store.n_params();
    for i in 0..n_params {
        let id = ParamId(i);
        let numel = store.param(id).value.numel();
        for j in 0..numel {
            let orig = store.param(id).value.data()[j];
            store.param_mut(id).value.data_mut()[j] = orig + delta;
            let up = eval(store)?;
            store.param_mut(id).value.data_mut()[j] = orig - delta;
            let down = eval(store)?;
            store.param_mut(id).value.data_mut()[j] = orig;

            let numeric = (up - down) / (2.0 * delta);
            let a = analytic.get(id).map_or(0.0, |g| g.data()[j]);
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-4);
            if rel > report.max_rel_err {
                report.max_rel_err = rel;
                report.worst = Some((store.param(id).name.clone(), j, a, numeric));
            }
        }
    }
    Ok(report)
}
