use super::{Graph, Var};
use crate::error::{Error, Result};
use crate::params::{ParamStore, Scope};

/// Relative gradient magnitude below which differences are measured
/// against the loss scale instead of the gradient itself.
///
/// A central difference carries round-off of roughly `ε_mach · |loss| / eps`,
/// about `2e-11 · |loss|` at `eps = 1e-5`. Without a floor, entries whose
/// true gradient is near that size report pure rounding as relative error.
pub const GRADIENT_FLOOR: f64 = 1e-6;

/// Outcome of a finite-difference gradient check.
#[derive(Clone, Debug)]
pub struct GradCheckReport {
    /// Max over all checked scalars of
    /// `|analytic − numeric| / max(|analytic|, |numeric|, GRADIENT_FLOOR · max(1, |loss|))`.
    pub max_relative_error: f64,
    /// Parameter name, flat element index, analytic and numeric value at the worst scalar.
    pub worst: Option<(String, usize, f64, f64)>,
    /// Worst relative error per checked parameter tensor, in store order.
    pub per_param: Vec<(String, f64)>,
    pub scalars_checked: usize,
}

impl GradCheckReport {
    pub fn worst_for(&self, name_part: &str) -> Option<f64> {
        self.per_param
            .iter()
            .filter(|(n, _)| n.contains(name_part))
            .map(|&(_, e)| e)
            .reduce(f64::max)
    }
}

/// Central-difference check of every parameter in `params`.
///
/// `loss_fn` builds a scalar loss on a fresh graph, binding parameters
/// through the supplied scope. It must be deterministic: the base loss is
/// evaluated twice and any bitwise difference is a contract error.
pub fn finite_difference_check<F>(params: &ParamStore, eps: f64, loss_fn: F) -> Result<GradCheckReport>
where
    F: FnMut(&mut Graph, &mut Scope<'_>) -> Result<Var>,
{
    finite_difference_check_with(params, eps, |_| true, loss_fn)
}

/// Like [`finite_difference_check`], restricted to parameters whose name passes `filter`.
pub fn finite_difference_check_with<F, P>(
    params: &ParamStore,
    eps: f64,
    filter: P,
    mut loss_fn: F,
) -> Result<GradCheckReport>
where
    F: FnMut(&mut Graph, &mut Scope<'_>) -> Result<Var>,
    P: Fn(&str) -> bool,
{
    if !(1e-7..=1e-4).contains(&eps) {
        return Err(Error::Parameter(format!(
            "finite-difference eps must be in [1e-7, 1e-4], got {eps}"
        )));
    }

    let base = eval(&mut loss_fn, params)?;
    if base.to_bits() != eval(&mut loss_fn, params)?.to_bits() {
        return Err(Error::Contract(
            "loss function is not deterministic; fix every noise seed before checking".into(),
        ));
    }

    let analytic = {
        let mut g = Graph::new();
        let mut scope = Scope::trainable(params);
        let loss = loss_fn(&mut g, &mut scope)?;
        g.backward(loss)?;
        scope.gradients(&g)
    };

    let mut report = GradCheckReport {
        max_relative_error: 0.0,
        worst: None,
        per_param: Vec::new(),
        scalars_checked: 0,
    };
    let floor = GRADIENT_FLOOR * base.abs().max(1.0);
    let mut probe = params.clone();
    for id in params.ids() {
        let name = params.name(id).to_string();
        if !filter(&name) {
            continue;
        }
        let mut worst_here: f64 = 0.0;
        for k in 0..params.get(id).len() {
            let original = params.get(id).data()[k];
            probe.get_mut(id).data_mut()[k] = original + eps;
            let plus = eval(&mut loss_fn, &probe)?;
            probe.get_mut(id).data_mut()[k] = original - eps;
            let minus = eval(&mut loss_fn, &probe)?;
            probe.get_mut(id).data_mut()[k] = original;

            let numeric = (plus - minus) / (2.0 * eps);
            let a = analytic[id.index()].data()[k];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(floor);
            report.scalars_checked += 1;
            worst_here = worst_here.max(rel);
            if rel > report.max_relative_error || report.worst.is_none() {
                report.max_relative_error = report.max_relative_error.max(rel);
                report.worst = Some((name.clone(), k, a, numeric));
            }
        }
        report.per_param.push((name, worst_here));
    }
    Ok(report)
}

fn eval<F>(loss_fn: &mut F, store: &ParamStore) -> Result<f64>
where
    F: FnMut(&mut Graph, &mut Scope<'_>) -> Result<Var>,
{
    let mut g = Graph::new();
    let mut scope = Scope::frozen(store);
    let loss = loss_fn(&mut g, &mut scope)?;
    g.value(loss).item()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    #[test]
    fn quadratic_is_exact() {
        let mut p = ParamStore::new();
        let x = p.add("x", Tensor::scalar(3.0));
        let report = finite_difference_check(&p, 1e-5, |g, s| {
            let v = s.get(g, x);
            g.mul(v, v)
        })
        .unwrap();
        assert!(report.max_relative_error < 1e-6, "{report:?}");
    }

    #[test]
    fn rejects_eps_out_of_range() {
        let p = ParamStore::new();
        let err = finite_difference_check(&p, 1e-2, |g, _| Ok(g.constant(Tensor::scalar(0.0))));
        assert!(matches!(err, Err(Error::Parameter(_))));
    }

    #[test]
    fn detects_nondeterminism() {
        let mut p = ParamStore::new();
        let x = p.add("x", Tensor::scalar(1.0));
        let mut calls = 0.0;
        let err = finite_difference_check(&p, 1e-5, |g, s| {
            calls += 1.0;
            let v = s.get(g, x);
            Ok(g.add_scalar(v, calls))
        });
        assert!(matches!(err, Err(Error::Contract(_))));
    }
}
