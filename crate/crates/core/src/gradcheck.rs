//! Central-difference verification of analytic gradients.
//!
//! For each parameter the reported error is
//! `max_i |a_i - n_i| / max(‖a‖∞, ‖n‖∞)`, where `a` is the analytic and `n`
//! the numeric gradient. Normalizing by the tensor's largest gradient keeps
//! near-zero entries from producing spurious ratios. When both gradients are
//! below [`ABS_FLOOR`] everywhere the absolute difference is reported.

use std::fmt;

use crate::error::{contract, Error, Result};
use crate::graph::{Graph, Var};
use crate::param::{ParamId, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const ABS_FLOOR: f64 = 1e-10;

#[derive(Debug, Clone)]
pub struct ParamCheck {
    pub name: String,
    pub max_rel_error: f64,
    pub analytic_max: f64,
    pub numeric_max: f64,
    pub entries: usize,
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub params: Vec<ParamCheck>,
    pub step: f64,
    pub tol: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.params.iter().all(|p| p.max_rel_error <= self.tol)
    }

    pub fn worst(&self) -> Option<&ParamCheck> {
        self.params
            .iter()
            .max_by(|a, b| a.max_rel_error.total_cmp(&b.max_rel_error))
    }

    pub fn failures(&self) -> impl Iterator<Item = &ParamCheck> {
        self.params.iter().filter(|p| p.max_rel_error > self.tol)
    }
}

impl fmt::Display for GradCheckReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(
            f,
            "grad check: {} parameters, step {:e}, tol {:e}: {}",
            self.params.len(),
            self.step,
            self.tol,
            if self.passed() { "PASS" } else { "FAIL" }
        )?;
        for p in &self.params {
            writeln!(
                f,
                "  {:<48} {:>6} entries  err {:.3e}  |g|max {:.3e}",
                p.name, p.entries, p.max_rel_error, p.analytic_max
            )?;
        }
        Ok(())
    }
}

fn loss_value<T: Scalar, F>(store: &ParamStore<T>, f: &mut F) -> Result<f64>
where
    F: FnMut(&ParamStore<T>, &mut Graph<T>) -> Result<Var>,
{
    let mut g = Graph::new();
    let loss = f(store, &mut g)?;
    Ok(g.value(loss).item().as_f64())
}

/// Analytic gradients of the scalar built by `f`, leaving `store`'s
/// gradient buffers zeroed afterwards.
pub fn analytic_gradients<T: Scalar, F>(
    store: &mut ParamStore<T>,
    params: &[ParamId],
    f: &mut F,
) -> Result<Vec<Tensor<T>>>
where
    F: FnMut(&ParamStore<T>, &mut Graph<T>) -> Result<Var>,
{
    store.zero_grads();
    let mut g = Graph::new();
    let loss = f(store, &mut g)?;
    g.backward(loss, store)?;
    let out = params.iter().map(|&p| store.grad(p).clone()).collect();
    store.zero_grads();
    Ok(out)
}

/// Compares supplied analytic gradients with central differences of `f`.
pub fn compare_gradients<T: Scalar, F>(
    store: &mut ParamStore<T>,
    params: &[ParamId],
    analytic: &[Tensor<T>],
    step: f64,
    tol: f64,
    mut f: F,
) -> Result<GradCheckReport>
where
    F: FnMut(&ParamStore<T>, &mut Graph<T>) -> Result<Var>,
{
    if T::BITS != 64 {
        return Err(contract("grad_check", "finite differences require 64-bit precision"));
    }
    if analytic.len() != params.len() {
        return Err(contract("grad_check", "one analytic gradient per parameter"));
    }
    let h = T::of(step);
    let mut checks = Vec::with_capacity(params.len());
    for (&pid, a) in params.iter().zip(analytic) {
        let name = store.get(pid).name.clone();
        let n = store.value(pid).numel();
        let mut numeric = Vec::with_capacity(n);
        for i in 0..n {
            let orig = store.value(pid).data()[i];
            store.get_mut(pid).value.data_mut()[i] = orig + h;
            let up = loss_value(store, &mut f);
            store.get_mut(pid).value.data_mut()[i] = orig - h;
            let down = loss_value(store, &mut f);
            store.get_mut(pid).value.data_mut()[i] = orig;
            let (up, down) = (up?, down?);
            if !up.is_finite() || !down.is_finite() {
                return Err(Error::Numeric {
                    location: name,
                    detail: format!("loss not finite while probing entry {i}"),
                });
            }
            numeric.push((up - down) / (2.0 * step));
        }
        let analytic: Vec<f64> = a.data().iter().map(|v| v.as_f64()).collect();
        if analytic.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric {
                location: name,
                detail: "analytic gradient not finite".into(),
            });
        }
        let amax = analytic.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        let nmax = numeric.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        let diff = analytic
            .iter()
            .zip(&numeric)
            .fold(0.0f64, |m, (x, y)| m.max((x - y).abs()));
        let scale = amax.max(nmax);
        let err = if scale < ABS_FLOOR { diff } else { diff / scale };
        checks.push(ParamCheck {
            name,
            max_rel_error: err,
            analytic_max: amax,
            numeric_max: nmax,
            entries: n,
        });
    }
    Ok(GradCheckReport {
        params: checks,
        step,
        tol,
    })
}

/// Checks `backward` against central differences for every listed
/// parameter of the scalar function `f`.
pub fn grad_check<T: Scalar, F>(
    store: &mut ParamStore<T>,
    params: &[ParamId],
    step: f64,
    tol: f64,
    mut f: F,
) -> Result<GradCheckReport>
where
    F: FnMut(&ParamStore<T>, &mut Graph<T>) -> Result<Var>,
{
    if T::BITS != 64 {
        return Err(contract("grad_check", "finite differences require 64-bit precision"));
    }
    let analytic = analytic_gradients(store, params, &mut f)?;
    compare_gradients(store, params, &analytic, step, tol, f)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;

    fn half_norm_sq(store: &ParamStore<f64>, g: &mut Graph<f64>, id: ParamId) -> Result<Var> {
        let p = g.param(store, id);
        let sq = g.mul(p, p)?;
        let s = g.sum(sq);
        Ok(g.scale(s, 0.5))
    }

    #[test]
    fn quadratic_gradient_is_p() {
        let mut rng = Rng::new(3);
        let mut store = ParamStore::new();
        let id = store
            .add("p", Tensor::from_fn(&[7], |_| rng.normal()))
            .unwrap();
        let report = grad_check(&mut store, &[id], 1e-5, 1e-8, |s, g| half_norm_sq(s, g, id)).unwrap();
        assert!(report.passed(), "{report}");
        assert!(report.params[0].max_rel_error <= 1e-8);
    }

    #[test]
    fn negated_gradient_is_caught() {
        let mut rng = Rng::new(4);
        let mut store = ParamStore::new();
        let id = store
            .add("p", Tensor::from_fn(&[5], |_| rng.normal()))
            .unwrap();
        let mut f = |s: &ParamStore<f64>, g: &mut Graph<f64>| half_norm_sq(s, g, id);
        let mut a = analytic_gradients(&mut store, &[id], &mut f).unwrap();
        a[0] = a[0].map(|v| -v);
        let report = compare_gradients(&mut store, &[id], &a, 1e-5, 1e-4, f).unwrap();
        assert!(!report.passed());
        assert!((report.params[0].max_rel_error - 2.0).abs() < 1e-6);
    }

    #[test]
    fn softmax_toy_loss_passes() {
        let mut rng = Rng::new(5);
        let mut store = ParamStore::new();
        let w = store
            .add("w", Tensor::from_fn(&[3, 4], |_| rng.normal()))
            .unwrap();
        let x = Tensor::from_fn(&[2, 3], |_| rng.normal());
        let target = Tensor::from_fn(&[2, 4], |i| (i % 3) as f64);
        let report = grad_check(&mut store, &[w], 1e-5, 1e-4, |s, g| {
            let xv = g.constant(x.clone());
            let wv = g.param(s, w);
            let z = g.matmul(xv, wv)?;
            let p = g.softmax_rows(z)?;
            let t = g.constant(target.clone());
            let prod = g.mul(p, t)?;
            Ok(g.sum(prod))
        })
        .unwrap();
        assert!(report.passed(), "{report}");
    }

    #[test]
    fn rejects_32_bit() {
        let mut store = ParamStore::<f32>::new();
        let id = store.add("p", Tensor::zeros(&[1])).unwrap();
        let err = grad_check(&mut store, &[id], 1e-3, 1e-2, |s, g| {
            let p = g.param(s, id);
            Ok(g.sum(p))
        })
        .unwrap_err();
        assert!(matches!(err, Error::Contract { .. }));
    }

    #[test]
    fn non_finite_probe_names_parameter() {
        let mut store = ParamStore::<f64>::new();
        let id = store.add("enc.bad", Tensor::full(&[1], 1e-5)).unwrap();
        let err = grad_check(&mut store, &[id], 1e-5, 1e-4, |s, g| {
            let p = g.param(s, id);
            // the lower probe lands on p = 0, where 0 * (1/0) is NaN
            let v = g.value(p).item();
            let y = g.sum(p);
            Ok(g.scale(y, 1.0 / v))
        })
        .unwrap_err();
        match err {
            Error::Numeric { location, .. } => assert_eq!(location, "enc.bad"),
            other => panic!("unexpected {other:?}"),
        }
    }
}
