//! Central finite-difference check of analytic gradients.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{Graph, NodeId, ParamId, ParamStore};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug)]
pub struct GradCheck {
    pub epsilon: f64,
    /// Coordinates sampled per parameter tensor (all of them when the tensor
    /// is smaller).
    pub samples_per_tensor: usize,
    pub seed: u64,
}

impl Default for GradCheck {
    fn default() -> Self {
        GradCheck {
            epsilon: 1e-5,
            samples_per_tensor: 12,
            seed: 0,
        }
    }
}

/// Relative error `|a - n| / max(|a|, |n|, 1e-6)`. The floor sits above the
/// rounding noise of a central difference at a step of about `1e-5`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6)
}

/// Maximum relative error between backprop gradients and central
/// differences over sampled coordinates of every tensor in `params`.
///
/// A coordinate that disagrees at `epsilon` is measured again at
/// `epsilon / 10` and keeps the smaller error: a step that straddles a ReLU
/// or max-pool corner shrinks its error roughly tenfold, a wrong gradient
/// does not.
///
/// `build` must bind the parameters it uses and return a scalar root.
pub fn gradient_check<F>(params: &mut ParamStore<f64>, mut build: F, opts: GradCheck) -> Result<f64>
where
    F: FnMut(&mut Graph<f64>, &ParamStore<f64>) -> Result<NodeId>,
{
    if !(opts.epsilon > 0.0) {
        return Err(Error::InvalidArgument("epsilon must be positive".into()));
    }
    let grads = {
        let mut g = Graph::new();
        let root = build(&mut g, params)?;
        g.backward(root)?
    };

    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut worst = 0.0f64;
    let ids: Vec<_> = params.ids().collect();
    for id in ids {
        let n = params.get(id).len();
        let picks = sample(&mut rng, n, opts.samples_per_tensor.min(n)).into_vec();
        for j in picks {
            let analytic = grads.get(id).map_or(0.0, |g| g.data()[j]);
            let mut err = relative_error(analytic, central(&mut build, params, id, j, opts.epsilon)?);
            if err > 1e-6 {
                let fine = central(&mut build, params, id, j, opts.epsilon / 10.0)?;
                err = err.min(relative_error(analytic, fine));
            }
            worst = worst.max(err);
        }
    }
    Ok(worst)
}

fn central<F>(build: &mut F, params: &mut ParamStore<f64>, id: ParamId, j: usize, eps: f64) -> Result<f64>
where
    F: FnMut(&mut Graph<f64>, &ParamStore<f64>) -> Result<NodeId>,
{
    let orig = params.get(id).data()[j];
    params.get_mut(id).data_mut()[j] = orig + eps;
    let up = evaluate(build, params);
    params.get_mut(id).data_mut()[j] = orig - eps;
    let down = evaluate(build, params);
    params.get_mut(id).data_mut()[j] = orig;
    Ok((up? - down?) / (2.0 * eps))
}

fn evaluate<F>(build: &mut F, params: &ParamStore<f64>) -> Result<f64>
where
    F: FnMut(&mut Graph<f64>, &ParamStore<f64>) -> Result<NodeId>,
{
    let mut g = Graph::new();
    let root = build(&mut g, params)?;
    Ok(g.value(root).item())
}
