//! Central finite-difference oracle for checking backward rules.
//!
//! The numeric side only ever calls the forward closure, so it is independent
//! of every backward implementation it checks.

use crate::graph::{Graph, Var};
use crate::par;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug)]
pub struct GradCheckOptions {
    /// Finite-difference step.
    pub eps: f64,
    /// Relative errors use `max(|analytic|, |numeric|, floor)` as denominator.
    pub floor: f64,
    /// Check at most this many evenly spaced elements per input (0 = all).
    pub max_elems: usize,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        GradCheckOptions { eps: 1e-6, floor: 1e-7, max_elems: 0 }
    }
}

#[derive(Clone, Debug)]
pub struct InputReport {
    pub checked: usize,
    pub max_rel_err: f64,
    pub worst_index: usize,
    pub worst_analytic: f64,
    pub worst_numeric: f64,
    /// `‖a − n‖ / max(‖a‖, ‖n‖)` over the checked elements.
    pub norm_rel_err: f64,
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub inputs: Vec<InputReport>,
}

impl GradCheckReport {
    pub fn max_rel_err(&self) -> f64 {
        self.inputs.iter().map(|r| r.max_rel_err).fold(0.0, f64::max)
    }
}

fn eval_scalar<F>(f: &F, inputs: &[Tensor]) -> f64
where
    F: for<'g> Fn(&'g Graph, &[Var<'g>]) -> Var<'g>,
{
    let g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.constant(t.clone())).collect();
    f(&g, &vars).value().item()
}

/// Compares backward-pass gradients of the scalar `f(inputs)` against central
/// differences, input by input.
pub fn check_gradients<F>(inputs: &[Tensor], f: F, opts: GradCheckOptions) -> GradCheckReport
where
    F: for<'g> Fn(&'g Graph, &[Var<'g>]) -> Var<'g> + Sync,
{
    let analytic: Vec<Tensor> = {
        let g = Graph::new();
        let vars: Vec<Var> = inputs.iter().map(|t| g.variable(t.clone())).collect();
        let out = f(&g, &vars);
        let grads = g.backward(out);
        vars.iter().map(|v| grads.wrt(*v)).collect()
    };

    let mut reports = Vec::with_capacity(inputs.len());
    for (which, input) in inputs.iter().enumerate() {
        let n = input.numel();
        let picks: Vec<usize> = if opts.max_elems == 0 || opts.max_elems >= n {
            (0..n).collect()
        } else {
            (0..opts.max_elems).map(|i| i * n / opts.max_elems).collect()
        };
        let numeric = par::map_slice(&picks, |&e| {
            let mut plus = inputs.to_vec();
            plus[which].data_mut()[e] += opts.eps;
            let mut minus = inputs.to_vec();
            minus[which].data_mut()[e] -= opts.eps;
            (eval_scalar(&f, &plus) - eval_scalar(&f, &minus)) / (2.0 * opts.eps)
        });
        let mut rep = InputReport {
            checked: picks.len(),
            max_rel_err: 0.0,
            worst_index: 0,
            worst_analytic: 0.0,
            worst_numeric: 0.0,
            norm_rel_err: 0.0,
        };
        let (mut diff2, mut a2, mut n2) = (0.0, 0.0, 0.0);
        for (&e, &num) in picks.iter().zip(&numeric) {
            let a = analytic[which].data()[e];
            let err = (a - num).abs() / a.abs().max(num.abs()).max(opts.floor);
            diff2 += (a - num) * (a - num);
            a2 += a * a;
            n2 += num * num;
            if err > rep.max_rel_err {
                rep.max_rel_err = err;
                rep.worst_index = e;
                rep.worst_analytic = a;
                rep.worst_numeric = num;
            }
        }
        let denom = a2.sqrt().max(n2.sqrt());
        rep.norm_rel_err = if denom > 0.0 { diff2.sqrt() / denom } else { 0.0 };
        reports.push(rep);
    }
    GradCheckReport { inputs: reports }
}
