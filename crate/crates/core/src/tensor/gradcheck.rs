//! Central finite-difference verification of tape gradients.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{Graph, Tensor, TensorError, Var};

#[derive(Debug, Clone)]
pub struct GradCheckOptions {
    /// Finite-difference step.
    pub h: f64,
    /// Check at most this many coordinates per input (sampled with `seed`).
    pub max_coords_per_input: Option<usize>,
    pub seed: u64,
    /// Coordinates where both derivatives are below this magnitude are
    /// skipped as degenerate.
    pub abs_floor: f64,
    /// Added to the first analytic gradient entry. Negative-control hook.
    pub corrupt_analytic: f64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            h: 1e-5,
            max_coords_per_input: None,
            seed: 0,
            abs_floor: 1e-7,
            corrupt_analytic: 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    /// Max over checked coordinates of `|analytic - numeric| / max(1e-8, |numeric|)`.
    pub max_rel_error: f64,
    pub checked: usize,
    /// Coordinates skipped because both derivatives vanish or the function
    /// is not smooth within the step (a kink was crossed).
    pub skipped: usize,
    /// `(input index, coordinate)` of the worst coordinate.
    pub worst: Option<(usize, usize)>,
}

impl GradCheckReport {
    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_error < tol && self.checked > 0
    }
}

fn eval<F, E>(f: &F, inputs: &[Tensor]) -> Result<f64, E>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var, E>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.constant(t.clone())).collect();
    let root = f(&mut g, &vars)?;
    Ok(g.value(root).item())
}

fn central_difference<F, E>(f: &F, inputs: &mut [Tensor], which: usize, coord: usize, h: f64) -> Result<f64, E>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var, E>,
{
    let orig = inputs[which].data()[coord];
    inputs[which].data_mut()[coord] = orig + h;
    let plus = eval(f, inputs)?;
    inputs[which].data_mut()[coord] = orig - h;
    let minus = eval(f, inputs)?;
    inputs[which].data_mut()[coord] = orig;
    Ok((plus - minus) / (2.0 * h))
}

/// Compares tape gradients of the scalar function `f` against central
/// differences at `inputs`. Every input is treated as differentiable.
pub fn grad_check<F, E>(f: F, inputs: &[Tensor], opts: &GradCheckOptions) -> Result<GradCheckReport, E>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var, E>,
    E: From<TensorError>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let root = f(&mut g, &vars)?;
    let mut grads = g.backward(root).map_err(E::from)?;
    if opts.corrupt_analytic != 0.0 {
        if let Some(&v) = vars.first() {
            grads.perturb_for_test(v, opts.corrupt_analytic);
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut work: Vec<Tensor> = inputs.to_vec();
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        checked: 0,
        skipped: 0,
        worst: None,
    };
    for (i, (&var, input)) in vars.iter().zip(inputs).enumerate() {
        let analytic = grads.get_or_zeros(var, input.shape());
        let coords: Vec<usize> = match opts.max_coords_per_input {
            Some(k) if k < input.len() => {
                let mut c = sample(&mut rng, input.len(), k).into_vec();
                c.sort_unstable();
                c
            }
            _ => (0..input.len()).collect(),
        };
        for c in coords {
            let numeric = central_difference(&f, &mut work, i, c, opts.h)?;
            let a = analytic.data()[c];
            if a.abs() < opts.abs_floor && numeric.abs() < opts.abs_floor {
                report.skipped += 1;
                continue;
            }
            let rel = (a - numeric).abs() / numeric.abs().max(1e-8);
            if rel > 1e-6 {
                // A kink inside [x-h, x+h] makes the two step sizes disagree;
                // smooth coordinates agree to O(h^2).
                let half = central_difference(&f, &mut work, i, c, opts.h * 0.5)?;
                if (half - numeric).abs() > 1e-3 * numeric.abs().max(opts.abs_floor) {
                    report.skipped += 1;
                    continue;
                }
            }
            report.checked += 1;
            if report.worst.is_none() || rel > report.max_rel_error {
                report.max_rel_error = rel;
                report.worst = Some((i, c));
            }
        }
    }
    Ok(report)
}
