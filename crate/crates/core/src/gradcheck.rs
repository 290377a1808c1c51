//! Central finite-difference verification of analytic gradients.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::params::{Gradients, ParamStore};

/// Settings for [`finite_difference_check`].
#[derive(Clone, Debug)]
pub struct CheckOptions {
    pub eps: f64,
    /// Coordinates probed per tensor; larger tensors are subsampled with a
    /// seeded RNG.
    pub max_coords_per_tensor: usize,
    pub seed: u64,
}

impl Default for CheckOptions {
    fn default() -> Self {
        CheckOptions {
            eps: 1e-5,
            max_coords_per_tensor: 200,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamCheck {
    pub name: String,
    pub max_rel_error: f64,
    pub coords_checked: usize,
    /// Flat index of the worst coordinate with its two gradient estimates.
    pub worst_coord: usize,
    pub worst_analytic: f64,
    pub worst_numeric: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradientReport {
    pub params: Vec<ParamCheck>,
    pub max_rel_error: f64,
    pub eps: f64,
}

impl GradientReport {
    /// The parameter with the largest relative error.
    pub fn worst(&self) -> Option<&ParamCheck> {
        self.params
            .iter()
            .max_by(|a, b| a.max_rel_error.total_cmp(&b.max_rel_error))
    }

    pub fn passes(&self, tolerance: f64) -> bool {
        self.max_rel_error < tolerance
    }
}

/// `|a − n| / max(|a|, |n|, 1e-8)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

/// Compares `analytic` against central differences
/// `(f(θ + eps) − f(θ − eps)) / (2·eps)` for each probed coordinate.
///
/// `f` must be deterministic: any stochastic op inside it has to replay the
/// same draws on every call (for example by seeding its [`crate::Tape`]).
pub fn finite_difference_check<F>(
    params: &ParamStore,
    analytic: &Gradients,
    opts: &CheckOptions,
    mut f: F,
) -> Result<GradientReport>
where
    F: FnMut(&ParamStore) -> Result<f64>,
{
    if !(opts.eps.is_finite() && opts.eps > 0.0) {
        return Err(Error::Config(format!("perturbation must be positive, got {}", opts.eps)));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut work = params.clone();
    let mut report = GradientReport {
        params: Vec::with_capacity(params.len()),
        max_rel_error: 0.0,
        eps: opts.eps,
    };
    for (id, name, tensor) in params.iter() {
        let grad = analytic.get_or_zero(id, tensor);
        let n = tensor.len();
        let coords: Vec<usize> = if n <= opts.max_coords_per_tensor {
            (0..n).collect()
        } else {
            let mut c = sample(&mut rng, n, opts.max_coords_per_tensor).into_vec();
            c.sort_unstable();
            c
        };
        let mut worst = 0.0f64;
        let mut worst_at = (0, 0.0, 0.0);
        for &k in &coords {
            let original = work.get(id).data()[k];
            work.get_mut(id).data_mut()[k] = original + opts.eps;
            let plus = f(&work)?;
            work.get_mut(id).data_mut()[k] = original - opts.eps;
            let minus = f(&work)?;
            work.get_mut(id).data_mut()[k] = original;
            if !plus.is_finite() || !minus.is_finite() {
                return Err(Error::Numeric(format!("non-finite objective while probing {name}[{k}]")));
            }
            let numeric = (plus - minus) / (2.0 * opts.eps);
            let err = relative_error(grad.data()[k], numeric);
            if err > worst || k == coords[0] {
                worst = worst.max(err);
                worst_at = (k, grad.data()[k], numeric);
            }
        }
        report.max_rel_error = report.max_rel_error.max(worst);
        report.params.push(ParamCheck {
            name: name.to_string(),
            max_rel_error: worst,
            coords_checked: coords.len(),
            worst_coord: worst_at.0,
            worst_analytic: worst_at.1,
            worst_numeric: worst_at.2,
        });
    }
    Ok(report)
}
