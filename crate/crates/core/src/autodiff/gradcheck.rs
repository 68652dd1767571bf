//! Central finite-difference check of tape gradients.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{AutodiffError, Result, Tape, Var};
use crate::tensor::Tensor;

/// Coordinates sampled per parameter block (all of them for smaller blocks).
pub const GRAD_CHECK_MIN_COORDS: usize = 50;

/// Relative errors are computed against `max(|analytic|, |numeric|, FLOOR)`
/// so coordinates whose true gradient is zero are judged on absolute error.
const FLOOR: f64 = 1e-6;

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    /// Largest relative error over every checked coordinate.
    pub max_rel_error: f64,
    /// Largest relative error within each parameter block.
    pub per_block: Vec<f64>,
    /// Number of coordinates compared.
    pub checked: usize,
}

fn evaluate<F>(forward: &F, params: &[Tensor]) -> Result<f64>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = params.iter().map(|p| tape.leaf(p.clone())).collect();
    let loss = forward(&mut tape, &vars)?;
    let (rows, cols) = tape.shape(loss);
    if (rows, cols) != (1, 1) {
        return Err(AutodiffError::NotScalar { rows, cols });
    }
    Ok(tape.value(loss).item())
}

/// Compares tape gradients of `forward` with the fourth-order central
/// difference of step `h` on up to `coords_per_block` seeded random
/// coordinates of each block.
///
/// The closure must be deterministic: it is evaluated twice at `params` and
/// any difference is reported as [`AutodiffError::NonDeterministic`].
pub fn grad_check<F>(
    forward: F,
    params: &[Tensor],
    h: f64,
    coords_per_block: usize,
    seed: u64,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let first = evaluate(&forward, params)?;
    let second = evaluate(&forward, params)?;
    if first.to_bits() != second.to_bits() {
        return Err(AutodiffError::NonDeterministic { first, second });
    }

    let mut tape = Tape::new();
    let vars: Vec<Var> = params.iter().map(|p| tape.leaf(p.clone())).collect();
    let loss = forward(&mut tape, &vars)?;
    let analytic = tape.gradients(loss, &vars)?;

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut work: Vec<Tensor> = params.to_vec();
    let mut per_block = Vec::with_capacity(params.len());
    let mut checked = 0;
    for (b, grad) in analytic.iter().enumerate() {
        let len = params[b].len();
        let coords = if len <= coords_per_block {
            (0..len).collect::<Vec<_>>()
        } else {
            let mut c = sample(&mut rng, len, coords_per_block).into_vec();
            c.sort_unstable();
            c
        };
        let mut worst: f64 = 0.0;
        for k in coords {
            let orig = params[b].data()[k];
            let mut at = |delta: f64| {
                work[b].data_mut()[k] = orig + delta;
                evaluate(&forward, &work)
            };
            let near = at(h)? - at(-h)?;
            let far = at(2.0 * h)? - at(-2.0 * h)?;
            work[b].data_mut()[k] = orig;
            let numeric = (8.0 * near - far) / (12.0 * h);
            let a = grad.data()[k];
            let denom = a.abs().max(numeric.abs()).max(FLOOR);
            worst = worst.max((a - numeric).abs() / denom);
            checked += 1;
        }
        per_block.push(worst);
    }
    Ok(GradCheckReport {
        max_rel_error: per_block.iter().copied().fold(0.0, f64::max),
        per_block,
        checked,
    })
}
