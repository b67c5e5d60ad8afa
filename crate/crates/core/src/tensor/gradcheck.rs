use super::{ParamId, ParamStore, Rng, Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Central-difference estimate of ∂f/∂x for every coordinate of `x`.
pub fn finite_diff_gradient<F>(mut f: F, x: &Tensor<f64>, h: f64) -> Tensor<f64>
where
    F: FnMut(&Tensor<f64>) -> f64,
{
    let mut probe = x.clone();
    let mut out = Vec::with_capacity(x.numel());
    for i in 0..x.numel() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + h;
        let up = f(&probe);
        probe.data_mut()[i] = orig - h;
        let down = f(&probe);
        probe.data_mut()[i] = orig;
        out.push((up - down) / (2.0 * h));
    }
    Tensor::new(x.shape(), out).expect("same shape as x")
}

/// `|a − b| / max(|a|, |b|, floor)`. The floor keeps near-zero pairs from
/// dominating on pure rounding noise.
pub fn relative_error(a: f64, b: f64, floor: f64) -> f64 {
    let denom = a.abs().max(b.abs()).max(floor);
    (a - b).abs() / denom
}

/// Largest [`relative_error`] over paired slices, with its index.
pub fn max_relative_error(a: &[f64], b: &[f64], floor: f64) -> (f64, usize) {
    a.iter()
        .zip(b)
        .enumerate()
        .map(|(i, (&x, &y))| (relative_error(x, y, floor), i))
        .fold((0.0, 0), |acc, cur| if cur.0 > acc.0 { cur } else { acc })
}

/// Reduces `y` to a scalar with fixed pseudo-random weights in [0.5, 1.5],
/// so every output coordinate carries gradient.
pub fn weighted_sum(tape: &mut Tape<f64>, y: Var, seed: u64) -> Result<Var> {
    let mut r = Rng::new(seed);
    let w = Tensor::from_fn(tape.shape(y), |_| r.uniform(0.5, 1.5));
    let w = tape.constant(w);
    let p = tape.mul(y, w)?;
    Ok(tape.sum(p))
}

/// Outcome of [`check_param_gradients`].
#[derive(Debug, Clone, PartialEq)]
pub struct GradReport {
    pub max_rel_err: f64,
    /// Parameter name and flat index of the worst coordinate.
    pub worst: Option<(String, usize)>,
    pub checked: usize,
}

/// Compares backward() against central differences over parameters `ids`.
/// With `sample = Some((n, rng))` only `n` uniformly drawn coordinates are
/// probed; otherwise every coordinate is. `corrupt` scales the analytic
/// gradient (1.0 for a real check) and exists for negative controls.
/// Relative errors use a floor of `1e-6·max(1, |loss|)`.
pub fn check_param_gradients(
    store: &mut ParamStore<f64>,
    ids: &[ParamId],
    sample: Option<(usize, &mut Rng)>,
    h: f64,
    corrupt: f64,
    mut f: impl FnMut(&mut Tape<f64>, &ParamStore<f64>) -> Result<Var>,
) -> Result<GradReport> {
    let saved: Vec<bool> = ids.iter().map(|&id| store.get(id).requires_grad).collect();
    for &id in ids {
        store.set_requires_grad(id, true);
    }
    let mut tape = Tape::new();
    let loss = f(&mut tape, store)?;
    let loss_mag = tape.value(loss).data()[0].abs();
    let grads = tape.backward(loss)?;
    // central-difference roundoff grows with |loss|; coordinates whose true
    // gradient is zero would otherwise report pure noise
    let floor = 1e-6 * loss_mag.max(1.0);
    let mut analytic: Vec<Option<Tensor<f64>>> = vec![None; ids.len()];
    for (pid, g) in grads.params() {
        if let Some(k) = ids.iter().position(|&i| i == pid) {
            analytic[k] = Some(g.clone());
        }
    }
    for (&id, &rg) in ids.iter().zip(&saved) {
        store.set_requires_grad(id, rg);
    }
    let coords: Vec<(usize, usize)> = match sample {
        Some((n, rng)) => {
            let total: usize = ids.iter().map(|&id| store.value(id).numel()).sum();
            if total == 0 {
                return Err(Error::Usage("no coordinates to check".into()));
            }
            (0..n)
                .map(|_| {
                    let mut k = rng.below(total);
                    let mut p = 0;
                    while k >= store.value(ids[p]).numel() {
                        k -= store.value(ids[p]).numel();
                        p += 1;
                    }
                    (p, k)
                })
                .collect()
        }
        None => ids
            .iter()
            .enumerate()
            .flat_map(|(p, &id)| (0..store.value(id).numel()).map(move |k| (p, k)))
            .collect(),
    };
    let mut eval = |store: &ParamStore<f64>| -> Result<f64> {
        let mut tape = Tape::new();
        let l = f(&mut tape, store)?;
        Ok(tape.value(l).data()[0])
    };
    let mut report = GradReport {
        max_rel_err: 0.0,
        worst: None,
        checked: coords.len(),
    };
    for (p, k) in coords {
        let id = ids[p];
        let orig = store.value(id).data()[k];
        store.value_mut(id).data_mut()[k] = orig + h;
        let up = eval(store)?;
        store.value_mut(id).data_mut()[k] = orig - h;
        let down = eval(store)?;
        store.value_mut(id).data_mut()[k] = orig;
        let numeric = (up - down) / (2.0 * h);
        let a = analytic[p].as_ref().map_or(0.0, |g| g.data()[k]) * corrupt;
        let err = relative_error(a, numeric, floor);
        if report.worst.is_none() || err > report.max_rel_err {
            report.max_rel_err = err;
            report.worst = Some((store.get(id).name.clone(), k));
        }
    }
    Ok(report)
}
