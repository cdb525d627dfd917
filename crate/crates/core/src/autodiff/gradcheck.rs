use alloc::vec::Vec;

use rand::Rng as _;

use super::{AutodiffError, Graph, Tensor, Var};
use crate::rng;

/// Outcome of a finite-difference gradient comparison.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheck {
    /// Largest `|analytic − numeric| / max(|analytic|, |numeric|, floor)`.
    pub max_rel_error: f64,
    /// Number of input entries compared.
    pub entries: usize,
}

/// Magnitude below which gradient errors are measured absolutely.
pub const REL_ERROR_FLOOR: f64 = 1e-3;

/// Compares reverse-mode gradients of `build` against central differences
/// with step `h` for every entry of every input.
///
/// A non-scalar output `y` is reduced to `Σ w ⊙ y` with fixed random weights
/// drawn from `probe_seed`, so the whole Jacobian takes part in the check.
pub fn gradcheck<E, F>(inputs: &[Tensor], h: f64, probe_seed: u64, build: F) -> Result<GradCheck, E>
where
    E: From<AutodiffError>,
    F: Fn(&mut Graph, &[Var]) -> Result<Var, E>,
{
    let eval = |vals: &[Tensor], track: bool| -> Result<(f64, Vec<Vec<f64>>), E> {
        let mut g = Graph::new();
        let vars: Vec<Var> =
            vals.iter().map(|t| if track { g.param(t.clone()) } else { g.constant(t.clone()) }).collect();
        let out = build(&mut g, &vars)?;
        let shape = g.value(out).shape();
        let loss = if shape == [1, 1] {
            out
        } else {
            let mut r = rng::stream(probe_seed, 0x9c);
            let w: Vec<f64> = (0..shape[0] * shape[1]).map(|_| r.gen_range(-1.0..1.0)).collect();
            let w = g.constant(Tensor::new(shape[0], shape[1], w)?);
            let wy = g.mul(out, w)?;
            g.sum(wy)?
        };
        let value = g.value(loss).item();
        let mut grads = Vec::new();
        if track {
            g.backward(loss)?;
            for (v, t) in vars.iter().zip(vals) {
                grads.push(g.grad(*v).map_or_else(|| alloc::vec![0.0; t.len()], <[f64]>::to_vec));
            }
        }
        Ok((value, grads))
    };

    let (_, analytic) = eval(inputs, true)?;
    let mut work: Vec<Tensor> = inputs.to_vec();
    let mut worst = 0.0f64;
    let mut entries = 0;
    for i in 0..inputs.len() {
        for j in 0..inputs[i].len() {
            let x0 = inputs[i].data()[j];
            work[i].data_mut()[j] = x0 + h;
            let (fp, _) = eval(&work, false)?;
            work[i].data_mut()[j] = x0 - h;
            let (fm, _) = eval(&work, false)?;
            work[i].data_mut()[j] = x0;
            let numeric = (fp - fm) / (2.0 * h);
            let a = analytic[i][j];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(REL_ERROR_FLOOR);
            worst = worst.max(rel);
            entries += 1;
        }
    }
    Ok(GradCheck { max_rel_error: worst, entries })
}
