//! Central finite-difference gradient verification.

use alloc::string::String;
use alloc::vec::Vec;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::graph::{Graph, NodeId};
use crate::param::{ParamId, ParamStore};

/// Which parameter entries to perturb.
#[derive(Clone, Copy, Debug)]
pub enum Entries {
    All,
    /// At most `n` entries per parameter tensor, drawn with `seed`.
    Sample { per_param: usize, seed: u64 },
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// Parameter name and flat index of the worst entry.
    pub worst: Option<(String, usize)>,
    pub analytic: f64,
    pub numeric: f64,
    pub checked: usize,
}

fn relative_error(analytic: f64, numeric: f64) -> f64 {
    let num = libm::fabs(analytic - numeric);
    let den = (libm::fabs(analytic) + libm::fabs(numeric)).max(1e-8);
    num / den
}

fn eval<F>(f: &mut F, store: &ParamStore) -> Result<f64>
where
    F: FnMut(&mut Graph<'_>) -> Result<NodeId>,
{
    let mut g = Graph::new(store);
    let loss = f(&mut g)?;
    let v = g.value(loss).item()?;
    if !v.is_finite() {
        return Err(Error::NonFinite { op: "grad_check" });
    }
    Ok(v)
}

/// Compares reverse-mode gradients of the scalar built by `f` against
/// central differences with step `eps`. Returns the largest relative error
/// `|a - n| / max(1e-8, |a| + |n|)` over the checked entries.
pub fn grad_check<F>(f: F, store: &mut ParamStore, eps: f64) -> Result<f64>
where
    F: FnMut(&mut Graph<'_>) -> Result<NodeId>,
{
    grad_check_with(f, store, eps, &store.ids().collect::<Vec<_>>(), Entries::All)
        .map(|r| r.max_rel_error)
}

pub fn grad_check_with<F>(
    mut f: F,
    store: &mut ParamStore,
    eps: f64,
    params: &[ParamId],
    entries: Entries,
) -> Result<GradCheckReport>
where
    F: FnMut(&mut Graph<'_>) -> Result<NodeId>,
{
    if !(eps > 0.0) {
        return Err(Error::Invalid("grad_check eps must be positive".into()));
    }
    let grads = {
        let mut g = Graph::new(store);
        let loss = f(&mut g)?;
        g.backward(loss)?
    };
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: None,
        analytic: 0.0,
        numeric: 0.0,
        checked: 0,
    };
    for &pid in params {
        let n = store.get(pid).value.numel();
        let indices: Vec<usize> = match entries {
            Entries::All => (0..n).collect(),
            Entries::Sample { per_param, seed } if per_param < n => {
                let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (pid.index() as u64).wrapping_mul(0x9E37_79B9));
                let mut v = sample(&mut rng, n, per_param).into_vec();
                v.sort_unstable();
                v
            }
            Entries::Sample { .. } => (0..n).collect(),
        };
        for idx in indices {
            let analytic = grads.get(pid).map_or(0.0, |g| g[idx]);
            let orig = store.get(pid).value.data()[idx];
            store.get_mut(pid).value.data_mut()[idx] = orig + eps;
            let plus = eval(&mut f, store);
            store.get_mut(pid).value.data_mut()[idx] = orig - eps;
            let minus = eval(&mut f, store);
            store.get_mut(pid).value.data_mut()[idx] = orig;
            let numeric = (plus? - minus?) / (2.0 * eps);
            let err = relative_error(analytic, numeric);
            report.checked += 1;
            if report.worst.is_none() || err > report.max_rel_error {
                report.max_rel_error = err;
                report.worst = Some((store.get(pid).name.clone(), idx));
                report.analytic = analytic;
                report.numeric = numeric;
            }
        }
    }
    Ok(report)
}

/// Checks the derivative along a random `{-1, +1}` direction per parameter
/// tensor: the analytic `<grad, v>` against
/// `(f(p + eps v) - f(p - eps v)) / 2 eps`, with the same relative error as
/// [`grad_check`]. Each projection sums over the whole tensor, so it stays
/// above the round-off floor of the difference quotient where single
/// entries may not.
pub fn grad_check_directional<F>(
    mut f: F,
    store: &mut ParamStore,
    eps: f64,
    params: &[ParamId],
    seed: u64,
) -> Result<GradCheckReport>
where
    F: FnMut(&mut Graph<'_>) -> Result<NodeId>,
{
    if !(eps > 0.0) {
        return Err(Error::Invalid("grad_check eps must be positive".into()));
    }
    let grads = {
        let mut g = Graph::new(store);
        let loss = f(&mut g)?;
        g.backward(loss)?
    };
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: None,
        analytic: 0.0,
        numeric: 0.0,
        checked: 0,
    };
    for &pid in params {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (pid.index() as u64).wrapping_mul(0x9E37_79B9));
        let n = store.get(pid).value.numel();
        let dir: Vec<f64> = (0..n).map(|_| if rng.random::<bool>() { 1.0 } else { -1.0 }).collect();
        let analytic = grads
            .get(pid)
            .map_or(0.0, |g| g.iter().zip(&dir).map(|(a, b)| a * b).sum());
        let orig = store.get(pid).value.clone();
        let shift = |store: &mut ParamStore, s: f64| {
            for ((v, o), d) in store.get_mut(pid).value.data_mut().iter_mut().zip(orig.data()).zip(&dir) {
                *v = o + s * d;
            }
        };
        shift(store, eps);
        let plus = eval(&mut f, store);
        shift(store, -eps);
        let minus = eval(&mut f, store);
        store.get_mut(pid).value = orig;
        let numeric = (plus? - minus?) / (2.0 * eps);
        let err = relative_error(analytic, numeric);
        report.checked += 1;
        if report.worst.is_none() || err > report.max_rel_error {
            report.max_rel_error = err;
            report.worst = Some((store.get(pid).name.clone(), 0));
            report.analytic = analytic;
            report.numeric = numeric;
        }
    }
    Ok(report)
}
