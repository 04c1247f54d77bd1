//! Central-difference gradient checks used as test oracles.

use super::{ParamStore, Real, Result, Tape, Tensor, TensorError, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Fixed projection weights turning a tensor output into a scalar.
fn projection<T: Real>(shape: &[usize]) -> Tensor<T> {
    let mut rng = ChaCha8Rng::seed_from_u64(0x5eed);
    Tensor::from_fn(shape, |_| T::of(rng.gen_range(0.5..1.5)))
}

fn project<'t, T: Real>(tape: &'t Tape<T>, y: Var<'t, T>) -> Result<Var<'t, T>> {
    let w = tape.constant(projection(&y.shape()));
    y.mul(w)?.sum()
}

fn scalar_of<T: Real>(y: &Tensor<T>) -> Result<T> {
    if !y.is_finite() {
        return Err(TensorError::NonFinite { op: "finite_diff_check" });
    }
    let w = projection::<T>(y.shape());
    Ok(y.dot(&w))
}

fn rel_err<T: Real>(analytic: T, numeric: T, eps: T) -> T {
    (analytic - numeric).abs() / (analytic.abs() + eps)
}

/// Max relative error between the autodiff gradient of `f` at `x` and
/// central differences with step `eps`:
/// `|g − (f(x+eps·e) − f(x−eps·e)) / 2eps| / (|g| + eps)`.
///
/// Tensor-valued `f` is reduced to a scalar with fixed positive weights.
pub fn finite_diff_check<T, F>(f: F, x: &Tensor<T>, eps: T) -> Result<T>
where
    T: Real,
    F: for<'t> Fn(&'t Tape<T>, Var<'t, T>) -> Result<Var<'t, T>>,
{
    let tape = Tape::new();
    let xv = tape.leaf(x.clone());
    let y = f(&tape, xv)?;
    if !y.with_value(|v| v.is_finite()) {
        return Err(TensorError::NonFinite { op: "finite_diff_check" });
    }
    let loss = project(&tape, y)?;
    let grads = tape.backward(loss)?;
    let analytic = grads
        .get(xv)
        .cloned()
        .unwrap_or_else(|| Tensor::zeros(x.shape()));

    let eval = |xp: Tensor<T>| -> Result<T> {
        let t = Tape::no_grad();
        let v = t.constant(xp);
        let y = f(&t, v)?;
        y.with_value(scalar_of)
    };
    let two = T::of(2.0);
    let mut worst = T::zero();
    for i in 0..x.len() {
        let mut plus = x.clone();
        plus.data_mut()[i] += eps;
        let mut minus = x.clone();
        minus.data_mut()[i] -= eps;
        let numeric = (eval(plus)? - eval(minus)?) / (two * eps);
        worst = worst.max(rel_err(analytic.data()[i], numeric, eps));
    }
    Ok(worst)
}

/// Same check over parameters of a store. At most `per_param` coordinates
/// of each tensor are probed (chosen with `seed`); `None` probes all.
pub fn param_grad_check<T, F>(
    store: &ParamStore<T>,
    f: F,
    eps: T,
    per_param: Option<usize>,
    seed: u64,
) -> Result<T>
where
    T: Real,
    F: for<'t> Fn(&'t Tape<T>, &ParamStore<T>) -> Result<Var<'t, T>>,
{
    let tape = Tape::new();
    let y = f(&tape, store)?;
    if !y.with_value(|v| v.is_finite()) {
        return Err(TensorError::NonFinite { op: "param_grad_check" });
    }
    let loss = project(&tape, y)?;
    let grads = tape.backward(loss)?;
    let mut with_grads = store.clone();
    with_grads.zero_grad();
    grads.accumulate_into(&mut with_grads);

    let eval = |s: &ParamStore<T>| -> Result<T> {
        let t = Tape::no_grad();
        let y = f(&t, s)?;
        y.with_value(scalar_of)
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let two = T::of(2.0);
    let mut worst = T::zero();
    let mut probe = store.clone();
    for (id, p) in store.iter() {
        let n = p.value.len();
        let coords: Vec<usize> = match per_param {
            Some(k) if k < n => (0..k).map(|_| rng.gen_range(0..n)).collect(),
            _ => (0..n).collect(),
        };
        let analytic = with_grads.get(id).grad.clone();
        for i in coords {
            let a = analytic.as_ref().map_or(T::zero(), |g| g.data()[i]);
            let orig = p.value.data()[i];
            probe.value_mut(id).data_mut()[i] = orig + eps;
            let fp = eval(&probe)?;
            probe.value_mut(id).data_mut()[i] = orig - eps;
            let fm = eval(&probe)?;
            probe.value_mut(id).data_mut()[i] = orig;
            worst = worst.max(rel_err(a, (fp - fm) / (two * eps), eps));
        }
    }
    Ok(worst)
}
