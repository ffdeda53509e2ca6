//! Central finite-difference verification of tape gradients.

use crate::error::Result;
use crate::params::{Gradients, ParamStore};
use crate::tape::{Tape, Var};

#[derive(Clone, Copy, Debug)]
pub struct GradCheck {
    /// Perturbation size.
    pub eps: f64,
    /// Denominator floor for the relative error. Gradients smaller than this
    /// are effectively compared in absolute terms, since central differences
    /// carry ~1e-10 absolute noise.
    pub floor: f64,
    /// Upper bound on entries checked per tensor; `None` checks all.
    pub max_per_tensor: Option<usize>,
    /// Second perturbation size. Each entry keeps the smaller error of the
    /// two differences: a ReLU kink inside one stencil or rounding noise in
    /// the other is not a gradient error, while a wrong gradient disagrees
    /// with both.
    pub alt_eps: Option<f64>,
}

impl Default for GradCheck {
    fn default() -> Self {
        Self {
            eps: 1e-5,
            floor: 1e-5,
            max_per_tensor: None,
            alt_eps: None,
        }
    }
}

#[derive(Clone, Debug, Default)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub checked: usize,
    /// `(parameter, flat index, analytic, numeric)` of the worst entry.
    pub worst: Option<(String, usize, f64, f64)>,
}

impl GradCheck {
    /// Compares analytic parameter gradients of the scalar built by `f`
    /// against `(f(θ+ε) − f(θ−ε)) / 2ε`.
    pub fn run<F>(&self, store: &ParamStore, f: F) -> Result<GradCheckReport>
    where
        F: for<'p> Fn(&mut Tape<'p>, &'p ParamStore) -> Result<Var>,
    {
        let mut analytic = Gradients::zeros_like(store);
        {
            let mut tape = Tape::new();
            let loss = f(&mut tape, store)?;
            tape.backward_into(loss, &mut analytic)?;
        }
        let eval = |s: &ParamStore| -> Result<f64> {
            let mut tape = Tape::inference();
            let loss = f(&mut tape, s)?;
            Ok(tape.value(loss).item())
        };
        let mut probe = store.clone();
        let mut report = GradCheckReport::default();
        for id in store.ids() {
            let n = store.get(id).len();
            let stride = match self.max_per_tensor {
                Some(cap) if cap > 0 && n > cap => n.div_ceil(cap),
                _ => 1,
            };
            for j in (0..n).step_by(stride) {
                let orig = store.get(id).data()[j];
                let mut central = |eps: f64| -> Result<f64> {
                    probe.get_mut(id).data_mut()[j] = orig + eps;
                    let plus = eval(&probe)?;
                    probe.get_mut(id).data_mut()[j] = orig - eps;
                    let minus = eval(&probe)?;
                    probe.get_mut(id).data_mut()[j] = orig;
                    Ok((plus - minus) / (2.0 * eps))
                };
                let a = analytic.get(id).data()[j];
                let mut numeric = central(self.eps)?;
                let mut rel = relative_error(a, numeric, self.floor);
                if let Some(alt) = self.alt_eps {
                    let other = central(alt)?;
                    let alt_rel = relative_error(a, other, self.floor);
                    if alt_rel < rel {
                        (numeric, rel) = (other, alt_rel);
                    }
                }
                report.checked += 1;
                if report.worst.is_none() || rel > report.max_rel_error {
                    report.max_rel_error = rel;
                    report.worst = Some((store.name(id).to_string(), j, a, numeric));
                }
            }
        }
        Ok(report)
    }
}

pub fn relative_error(a: f64, b: f64, floor: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(floor)
}

/// [`GradCheck::run`] with default settings and a custom `eps`.
pub fn grad_check<F>(store: &ParamStore, eps: f64, f: F) -> Result<f64>
where
    F: for<'p> Fn(&mut Tape<'p>, &'p ParamStore) -> Result<Var>,
{
    let check = GradCheck {
        eps,
        ..GradCheck::default()
    };
    Ok(check.run(store, f)?.max_rel_error)
}
