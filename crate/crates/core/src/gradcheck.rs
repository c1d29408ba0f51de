//! Central finite-difference checks of tape gradients.

use crate::error::{Error, Result};
use crate::params::{GroupSet, ParameterStore};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Worst disagreement found by a gradient check.
#[derive(Clone, Debug, PartialEq)]
pub struct GradCheck {
    /// Largest `|analytic - numeric| / max(1, |analytic|, |numeric|)`.
    pub max_error: f64,
    /// Flat index where `max_error` occurred.
    pub worst_index: usize,
    pub analytic: Tensor,
    pub numeric: Tensor,
}

impl GradCheck {
    fn compare(analytic: Tensor, numeric: Tensor) -> Self {
        let mut max_error = 0.0;
        let mut worst_index = 0;
        for (i, (a, n)) in analytic.data().iter().zip(numeric.data()).enumerate() {
            let err = (a - n).abs() / 1f64.max(a.abs()).max(n.abs());
            if err > max_error {
                max_error = err;
                worst_index = i;
            }
        }
        Self { max_error, worst_index, analytic, numeric }
    }
}

fn scalar_of(tape: &Tape<'_>, v: Var) -> Result<f64> {
    let t = tape.value(v);
    if !t.is_scalar() {
        return Err(Error::shape("gradcheck", format!("function must return a scalar, got {:?}", t.shape())));
    }
    Ok(t.item())
}

/// Compares the tape gradient of `f` at `x` with central differences of step `h`.
pub fn check_input<'s, F>(f: F, x: &Tensor, h: f64) -> Result<GradCheck>
where
    F: Fn(&mut Tape<'s>, Var) -> Result<Var>,
{
    let mut tape = Tape::new();
    let xv = tape.leaf(x.clone(), true)?;
    let out = f(&mut tape, xv)?;
    scalar_of(&tape, out)?;
    let analytic = tape.backward(out)?.wrt(xv);

    let eval = |probe: Tensor| -> Result<f64> {
        let mut tape = Tape::new();
        let xv = tape.leaf(probe, false)?;
        let out = f(&mut tape, xv)?;
        scalar_of(&tape, out)
    };
    let mut numeric = vec![0.0; x.numel()];
    for (i, slot) in numeric.iter_mut().enumerate() {
        let mut plus = x.clone();
        plus.data_mut()[i] += h;
        let mut minus = x.clone();
        minus.data_mut()[i] -= h;
        *slot = (eval(plus)? - eval(minus)?) / (2.0 * h);
    }
    Ok(GradCheck::compare(analytic, Tensor::new(x.shape().to_vec(), numeric)?))
}

/// Compares the gradient of `f` with respect to the stored parameter `name`
/// against central differences, probing at most `max_probes` evenly spaced entries.
pub fn check_param<F>(store: &ParameterStore, name: &str, f: F, h: f64, max_probes: usize) -> Result<GradCheck>
where
    F: for<'a> Fn(&mut Tape<'a>, &'a ParameterStore) -> Result<Var>,
{
    let id = store.require(name)?;
    let analytic_full = {
        let mut tape = Tape::with_param_grads(GroupSet::ALL);
        tape.param(store, id);
        let out = f(&mut tape, store)?;
        scalar_of(&tape, out)?;
        tape.backward(out)?.param(id).expect("bound with gradients")
    };
    let numel = analytic_full.numel();
    let stride = numel.div_ceil(max_probes.max(1)).max(1);
    let probes: Vec<usize> = (0..numel).step_by(stride).collect();

    let mut probe_store = store.clone();
    let mut numeric = Vec::with_capacity(probes.len());
    let mut analytic = Vec::with_capacity(probes.len());
    for &i in &probes {
        let base = store.value(id).data()[i];
        let mut side = |delta: f64| -> Result<f64> {
            probe_store.value_mut(id).data_mut()[i] = base + delta;
            let mut tape = Tape::new();
            let out = f(&mut tape, &probe_store)?;
            scalar_of(&tape, out)
        };
        let plus = side(h)?;
        let minus = side(-h)?;
        probe_store.value_mut(id).data_mut()[i] = base;
        numeric.push((plus - minus) / (2.0 * h));
        analytic.push(analytic_full.data()[i]);
    }
    Ok(GradCheck::compare(Tensor::vector(analytic)?, Tensor::vector(numeric)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::Group;

    #[test]
    fn detects_a_wrong_gradient() {
        // scalar_fn with a deliberately wrong partial must be caught.
        let x = Tensor::vector(vec![0.3, -0.2]).unwrap();
        let report = check_input(
            |tape, v| {
                let value: f64 = tape.value(v).data().iter().map(|a| a * a).sum();
                let wrong = tape.value(v).map(|a| 3.0 * a);
                tape.scalar_fn(&[v], value, vec![wrong])
            },
            &x,
            1e-6,
        )
        .unwrap();
        assert!(report.max_error > 0.1);
    }

    #[test]
    fn param_check_on_linear_map() {
        let mut store = ParameterStore::new();
        store
            .register("w", Group::Decoder, Tensor::from_rows(&[vec![0.5, -1.0], vec![2.0, 0.25]]).unwrap())
            .unwrap();
        let report = check_param(
            &store,
            "w",
            |tape, store| {
                let w = tape.param_named(store, "w")?;
                let x = tape.constant(Tensor::from_rows(&[vec![1.0, 2.0]])?)?;
                let y = tape.matmul(x, w)?;
                let t = tape.tanh(y)?;
                tape.sum(t)
            },
            1e-6,
            4,
        )
        .unwrap();
        assert!(report.max_error < 1e-7, "{report:?}");
    }
}
