use rand::Rng;

use super::{Graph, ParamStore, Var};
use crate::error::Result;

/// One analytic-vs-numeric gradient comparison.
#[derive(Clone, Debug)]
pub struct GradSample {
    pub name: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    /// Step actually used. Differs from the requested one only when the
    /// requested stencil crossed a relu/clamp/minimum breakpoint.
    pub eps: f64,
}

impl GradSample {
    /// `|a − n| / max(|a|, |n|, floor)`; the floor keeps near-zero pairs
    /// from dividing noise by noise.
    pub fn rel_error(&self, floor: f64) -> f64 {
        (self.analytic - self.numeric).abs() / self.analytic.abs().max(self.numeric.abs()).max(floor)
    }
}

/// Smallest step tried when shrinking a stencil off a breakpoint.
const MIN_EPS: f64 = 1e-7;

/// Compares reverse-mode gradients with central differences on `samples`
/// randomly chosen scalars. A tensor is drawn uniformly, then an element
/// within it, so small tensors (biases, norms) are covered too.
///
/// Central differences are only meaningful on one smooth piece of the
/// function. When `x ± eps` changes the branch pattern of any piecewise op
/// the step is divided by ten until it does not (down to 1e-7), and the
/// step used is recorded.
pub fn gradient_check<R, F>(
    store: &mut ParamStore<f64>,
    samples: usize,
    eps: f64,
    rng: &mut R,
    loss: F,
) -> Result<Vec<GradSample>>
where
    R: Rng + ?Sized,
    F: Fn(&mut Graph<f64>) -> Result<Var>,
{
    let eval = |store: &ParamStore<f64>| -> Result<(f64, Vec<u8>)> {
        let mut g = Graph::new(store);
        let l = loss(&mut g)?;
        Ok((g.value(l).data()[0], g.branch_pattern()))
    };
    let (grads, base_pattern) = {
        let mut g = Graph::new(store);
        let l = loss(&mut g)?;
        (g.backward(l)?, g.branch_pattern())
    };
    let ids: Vec<_> = store.ids().collect();
    let mut out = Vec::with_capacity(samples);
    for _ in 0..samples {
        let id = ids[rng.random_range(0..ids.len())];
        let index = rng.random_range(0..store.value(id).numel());
        let original = store.value(id).data()[index];
        let mut step = eps;
        let numeric = loop {
            store.get_mut(id).value.data_mut()[index] = original + step;
            let (plus, pp) = eval(store)?;
            store.get_mut(id).value.data_mut()[index] = original - step;
            let (minus, pm) = eval(store)?;
            store.get_mut(id).value.data_mut()[index] = original;
            let smooth = pp == base_pattern && pm == base_pattern;
            if smooth || step / 10.0 < MIN_EPS {
                break (plus - minus) / (2.0 * step);
            }
            step /= 10.0;
        };
        out.push(GradSample {
            name: store.get(id).name.clone(),
            index,
            analytic: grads.param(id).map_or(0.0, |g| g[index]),
            numeric,
            eps: step,
        });
    }
    Ok(out)
}
