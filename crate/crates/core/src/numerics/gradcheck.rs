use crate::error::{Error, Result};
use crate::numerics::params::{Binding, ParamStore};
use crate::numerics::tape::{Tape, Var};
use crate::scalar::Scalar;

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    /// `max |analytic - numeric| / max(1, |numeric|)` over all entries.
    pub max_rel_err: f64,
    pub checked: usize,
    /// Parameter name and flat index of the worst entry.
    pub worst: Option<(String, usize)>,
    pub worst_analytic: f64,
    pub worst_numeric: f64,
}

fn evaluate<T, F>(stores: &[&mut ParamStore<T>], f: &F) -> Result<(Tape<T>, Vec<Binding>, Var)>
where
    T: Scalar,
    F: Fn(&mut Tape<T>, &[Binding]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let bindings = stores
        .iter()
        .map(|s| tape.bind(s))
        .collect::<Result<Vec<_>>>()?;
    let out = f(&mut tape, &bindings)?;
    let v = tape.scalar(out);
    if !v.is_finite() {
        return Err(Error::NonFinite("grad_check objective".into()));
    }
    Ok((tape, bindings, out))
}

/// Compares the tape gradient of `f` against central differences for every
/// entry of every store in `stores`.
///
/// `f` receives one [`Binding`] per store, in order, and must be
/// deterministic. The tape is recorded once and each perturbation replays
/// only the nodes downstream of the perturbed entry. The first entry of every
/// tensor is also checked against a full re-recording, and a mismatch is an
/// error because it means the graph shape depends on parameter values.
/// Stores are left unchanged on return.
pub fn grad_check<T, F>(stores: &mut [&mut ParamStore<T>], eps: T, f: F) -> Result<GradCheckReport>
where
    T: Scalar,
    F: Fn(&mut Tape<T>, &[Binding]) -> Result<Var>,
{
    if eps <= T::zero() {
        return Err(Error::Domain("grad_check eps must be positive".into()));
    }
    let (mut tape, bindings, out) = evaluate(stores, &f)?;
    let grads = tape.backward(out)?;
    let analytic: Vec<_> = stores
        .iter()
        .zip(&bindings)
        .map(|(s, b)| grads.collect(b, s))
        .collect();
    drop(grads);

    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        checked: 0,
        worst: None,
        worst_analytic: 0.0,
        worst_numeric: 0.0,
    };
    let two_eps = eps + eps;
    for s in 0..stores.len() {
        let ids: Vec<_> = stores[s].iter().map(|(id, _, _)| id).collect();
        for (pi, id) in ids.into_iter().enumerate() {
            let leaf = bindings[s][id];
            for k in 0..stores[s].get(id).len() {
                let plus = finite(tape.perturbed(leaf, k, eps, out)?)?;
                let minus = finite(tape.perturbed(leaf, k, -eps, out)?)?;
                if k == 0 {
                    let orig = stores[s].get(id).data()[0];
                    stores[s].get_mut(id).data_mut()[0] = orig + eps;
                    let fresh = evaluate(stores, &f).map(|(t, _, o)| t.scalar(o));
                    stores[s].get_mut(id).data_mut()[0] = orig;
                    if fresh? != plus {
                        return Err(Error::Domain(format!(
                            "grad_check replay disagrees with re-recording at {}",
                            stores[s].name(id)
                        )));
                    }
                }
                let numeric = ((plus - minus) / two_eps).to_f64_lossy();
                let a = analytic[s][pi].data()[k].to_f64_lossy();
                let rel = (a - numeric).abs() / numeric.abs().max(1.0);
                report.checked += 1;
                if report.worst.is_none() || rel > report.max_rel_err {
                    report.max_rel_err = rel;
                    report.worst = Some((stores[s].name(id).to_string(), k));
                    report.worst_analytic = a;
                    report.worst_numeric = numeric;
                }
            }
        }
    }
    Ok(report)
}

fn finite<T: Scalar>(v: T) -> Result<T> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(Error::NonFinite("grad_check objective".into()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Tensor;

    #[test]
    fn square_at_three() {
        let mut store = ParamStore::<f64>::new();
        let x = store.add("x", Tensor::scalar(3.0)).unwrap();
        let f = |t: &mut Tape<f64>, b: &[Binding]| {
            let v = b[0][x];
            let sq = t.mul(v, v)?;
            t.sum(sq)
        };
        let mut tape = Tape::new();
        let bind = tape.bind(&store).unwrap();
        let out = f(&mut tape, std::slice::from_ref(&bind)).unwrap();
        let g = tape.backward(out).unwrap();
        assert!((g.get(bind[x]).unwrap()[0] - 6.0).abs() < 1e-12);

        let r = grad_check(&mut [&mut store], 1e-5, f).unwrap();
        assert!(r.max_rel_err < 1e-8, "{r:?}");
        assert!((r.worst_numeric - 6.0).abs() < 1e-8);
        assert_eq!(store.get(x).data()[0], 3.0);
    }

    #[test]
    fn constant_objective_has_zero_error() {
        let mut store = ParamStore::<f64>::new();
        store.add("x", Tensor::vector(vec![1.0, -2.0])).unwrap();
        let r = grad_check(&mut [&mut store], 1e-5, |t: &mut Tape<f64>, _: &[Binding]| {
            t.constant(vec![4.0])
        })
        .unwrap();
        assert_eq!(r.max_rel_err, 0.0);
        assert_eq!(r.checked, 2);
    }

    #[test]
    fn non_finite_objective_is_an_error() {
        let mut store = ParamStore::<f64>::new();
        let x = store.add("x", Tensor::scalar(0.0)).unwrap();
        let r = grad_check(&mut [&mut store], 1e-5, |t: &mut Tape<f64>, b: &[Binding]| {
            let v = t.scale(b[0][x], 1e308)?;
            let v = t.scale(v, 1e308)?;
            t.sum(v)
        });
        // x = 0 gives a finite value, the perturbed evaluations overflow
        assert!(r.is_err());
    }

    #[test]
    fn rejects_non_positive_eps() {
        let mut store = ParamStore::<f64>::new();
        assert!(grad_check(&mut [&mut store], 0.0, |t: &mut Tape<f64>, _: &[Binding]| t.constant(vec![0.0])).is_err());
    }

    #[test]
    fn value_dependent_graph_is_rejected() {
        let mut store = ParamStore::<f64>::new();
        let x = store.add("x", Tensor::scalar(0.0)).unwrap();
        let r = grad_check(&mut [&mut store], 1e-5, |t: &mut Tape<f64>, b: &[Binding]| {
            let v = b[0][x];
            if t.scalar(v) > 0.0 {
                t.scale(v, 3.0)
            } else {
                t.scale(v, 2.0)
            }
        });
        assert!(r.is_err());
    }
}
