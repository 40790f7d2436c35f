use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::adiff::{ParamStore, Tape, Var};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy)]
pub struct GradCheckOptions {
    /// Central-difference step.
    pub h: f64,
    /// Check at most this many entries of each parameter (chosen by `seed`);
    /// `None` checks every entry.
    pub per_param: Option<usize>,
    pub seed: u64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            h: 1e-5,
            per_param: None,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// Parameter name and flat index of the worst entry.
    pub worst: Option<(String, usize)>,
    pub checked: usize,
    /// Entries whose perturbation flipped the sign of some ReLU input.
    pub skipped: usize,
}

/// Compares tape gradients of the scalar built by `f` against central
/// differences, for every trainable parameter in `store`.
///
/// Relative error per entry is `max(0, |a − n| − ρ) / max(|a|, |n|, 1e-8)`,
/// where `ρ = ROUNDOFF_ULPS · ε · (|f₊| + |f₋|) / 2h` bounds the rounding
/// error of the central difference itself. Without `ρ`, an entry whose true
/// derivative is zero reports pure cancellation noise as an O(1) error. A probe is
/// skipped when either perturbed evaluation changes the on/off pattern of
/// any ReLU-family input, since the function is not differentiable across
/// that kink.
/// Rounding slack of the central difference, in units of `ε · |f| / h`.
pub const ROUNDOFF_ULPS: f64 = 16.0;

pub fn grad_check<F>(store: &mut ParamStore, opts: GradCheckOptions, f: F) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &ParamStore) -> Result<Var>,
{
    let eval = |store: &ParamStore| -> Result<(f64, Vec<bool>)> {
        let mut tape = Tape::with_kink_tracking();
        let out = f(&mut tape, store)?;
        let v = tape
            .value(out)
            .item()
            .ok_or_else(|| Error::shape("grad_check", "function must return a scalar"))?;
        Ok((v, tape.kink_pattern().unwrap_or_default().to_vec()))
    };

    store.zero_grad();
    let base_pattern = {
        let mut tape = Tape::with_kink_tracking();
        let out = f(&mut tape, store)?;
        tape.backward(out, store)?;
        tape.kink_pattern().unwrap_or_default().to_vec()
    };

    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: None,
        checked: 0,
        skipped: 0,
    };
    let ids: Vec<_> = (0..store.len())
        .map(crate::adiff::ParamId)
        .filter(|&id| store.get(id).trainable)
        .collect();
    for id in ids {
        let n = store.get(id).value.numel();
        let entries: Vec<usize> = match opts.per_param {
            Some(k) if k < n => {
                let mut v = sample(&mut rng, n, k).into_vec();
                v.sort_unstable();
                v
            }
            _ => (0..n).collect(),
        };
        for i in entries {
            let analytic = store.get(id).grad.data()[i];
            let x0 = store.get(id).value.data()[i];
            store.get_mut(id).value.data_mut()[i] = x0 + opts.h;
            let (fp, pp) = eval(store)?;
            store.get_mut(id).value.data_mut()[i] = x0 - opts.h;
            let (fm, pm) = eval(store)?;
            store.get_mut(id).value.data_mut()[i] = x0;
            if pp != base_pattern || pm != base_pattern {
                report.skipped += 1;
                continue;
            }
            let numeric = (fp - fm) / (2.0 * opts.h);
            let roundoff = ROUNDOFF_ULPS * f64::EPSILON * (fp.abs() + fm.abs()) / (2.0 * opts.h);
            let excess = ((analytic - numeric).abs() - roundoff).max(0.0);
            let rel = excess / analytic.abs().max(numeric.abs()).max(1e-8);
            report.checked += 1;
            if rel > report.max_rel_error || report.worst.is_none() {
                report.max_rel_error = report.max_rel_error.max(rel);
                report.worst = Some((store.get(id).name.clone(), i));
            }
        }
    }
    store.zero_grad();
    Ok(report)
}
