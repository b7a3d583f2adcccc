//! Central finite-difference verification of analytic gradients.
//!
//! The checker treats the computation as a black-box scalar function of a
//! set of named parameter buffers: it queries the function once for the
//! analytic gradients, then re-evaluates it with per-coordinate `±h`
//! perturbations. It deliberately knows nothing about the tape internals so
//! it remains an independent route to the same derivative.

use crate::error::Result;
use crate::rng::{gen_index, RngStream};

/// Worst observed coordinate of a finite-difference comparison.
#[derive(Debug, Clone)]
pub struct GradCheckReport {
    /// `|analytic − numeric| / max(1, |analytic|, |numeric|)`, maximized
    /// over checked coordinates. Behaves like absolute error near zero and
    /// relative error for large derivatives.
    pub max_rel_err: f64,
    /// `"{param}[{index}]"` of the worst coordinate.
    pub worst_label: String,
    pub coords_checked: usize,
}

/// A parameter buffer: label, values, shape (shape is carried only so the
/// caller's closure can rebuild tensors; the checker itself is shape-blind).
pub type ParamSpec<'a> = (&'a str, Vec<f64>, (usize, usize));

fn relative_error(a: f64, n: f64) -> f64 {
    (a - n).abs() / 1.0_f64.max(a.abs()).max(n.abs())
}

/// Check every coordinate of every parameter. `f` maps the full parameter
/// value set to `(loss, analytic gradients per parameter)`.
pub fn check_gradients<F>(params: &[ParamSpec<'_>], f: F, h: f64) -> Result<GradCheckReport>
where
    F: Fn(&[Vec<f64>]) -> Result<(f64, Vec<Vec<f64>>)>,
{
    let coords: Vec<(usize, usize)> = params
        .iter()
        .enumerate()
        .flat_map(|(p, (_, vals, _))| (0..vals.len()).map(move |i| (p, i)))
        .collect();
    check_coords(params, f, h, &coords)
}

/// Check `count` uniformly sampled coordinates — the cheap spot-check used
/// for large models where a full sweep would dominate the test budget.
pub fn check_gradients_sampled<F>(
    params: &[ParamSpec<'_>],
    f: F,
    h: f64,
    count: usize,
    rng: &mut RngStream,
) -> Result<GradCheckReport>
where
    F: Fn(&[Vec<f64>]) -> Result<(f64, Vec<Vec<f64>>)>,
{
    let mut coords = Vec::with_capacity(count);
    for _ in 0..count {
        let p = gen_index(rng, params.len());
        let i = gen_index(rng, params[p].1.len());
        coords.push((p, i));
    }
    check_coords(params, f, h, &coords)
}

fn check_coords<F>(
    params: &[ParamSpec<'_>],
    f: F,
    h: f64,
    coords: &[(usize, usize)],
) -> Result<GradCheckReport>
where
    F: Fn(&[Vec<f64>]) -> Result<(f64, Vec<Vec<f64>>)>,
{
    let base: Vec<Vec<f64>> = params.iter().map(|(_, v, _)| v.clone()).collect();
    let (_, analytic) = f(&base)?;
    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        worst_label: String::new(),
        coords_checked: coords.len(),
    };
    let mut work = base.clone();
    for &(p, i) in coords {
        let x0 = base[p][i];
        // Step scaled to the coordinate's magnitude for balanced truncation
        // and round-off error.
        let step = h * x0.abs().max(1.0);
        work[p][i] = x0 + step;
        let (f_plus, _) = f(&work)?;
        work[p][i] = x0 - step;
        let (f_minus, _) = f(&work)?;
        work[p][i] = x0;
        let numeric = (f_plus - f_minus) / (2.0 * step);
        let err = relative_error(analytic[p][i], numeric);
        if err > report.max_rel_err {
            report.max_rel_err = err;
            report.worst_label = format!("{}[{i}]", params[p].0);
        }
    }
    Ok(report)
}
