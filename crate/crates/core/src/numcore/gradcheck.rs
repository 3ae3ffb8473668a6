use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{Tape, Tensor, Var};
use crate::error::{Error, Result};

pub const DEFAULT_STEP: f64 = 1e-6;

/// Which coordinates [`grad_check_multi`] perturbs.
#[derive(Clone, Copy, Debug)]
pub enum Coords {
    All,
    /// At most `n` coordinates per input, chosen with a seeded RNG.
    Sample { n: usize, seed: u64 },
}

/// Max relative error between the tape gradient and central differences for a scalar function of one tensor.
pub fn grad_check<F>(f: F, x: &Tensor, h: f64) -> Result<f64>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    grad_check_multi(|tape, xs| f(tape, xs[0]), std::slice::from_ref(x), h, Coords::All)
}

/// Same as [`grad_check`] for a function of several tensors. Error per coordinate is
/// `|analytic - numeric| / max(1, |analytic|)`.
pub fn grad_check_multi<F>(f: F, xs: &[Tensor], h: f64, coords: Coords) -> Result<f64>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let eval = |inputs: &[Tensor]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|t| tape.constant(t.clone())).collect();
        let y = f(&mut tape, &vars)?;
        Ok(tape.value(y).item())
    };

    let mut tape = Tape::new();
    let vars: Vec<Var> = xs.iter().map(|t| tape.param(t.clone())).collect();
    let root = f(&mut tape, &vars)?;
    let grads = tape.backward(root)?;

    let mut worst = 0.0f64;
    let mut inputs = xs.to_vec();
    let mut offset = 0;
    for (which, v) in vars.iter().enumerate() {
        let n = xs[which].numel();
        let analytic = grads
            .get(*v)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(xs[which].shape()));
        let picked: Vec<usize> = match coords {
            Coords::All => (0..n).collect(),
            Coords::Sample { n: k, seed } if k < n => {
                let mut rng = ChaCha8Rng::seed_from_u64(seed ^ which as u64);
                let mut idx = sample(&mut rng, n, k).into_vec();
                idx.sort_unstable();
                idx
            }
            Coords::Sample { .. } => (0..n).collect(),
        };
        for i in picked {
            let orig = inputs[which].data()[i];
            inputs[which].data_mut()[i] = orig + h;
            let up = eval(&inputs)?;
            inputs[which].data_mut()[i] = orig - h;
            let down = eval(&inputs)?;
            inputs[which].data_mut()[i] = orig;
            let numeric = (up - down) / (2.0 * h);
            let a = analytic.data()[i];
            if !a.is_finite() || !numeric.is_finite() {
                return Err(Error::Numeric(format!(
                    "gradient check: non-finite gradient at coordinate {} (analytic {a}, numeric {numeric})",
                    offset + i
                )));
            }
            worst = worst.max((a - numeric).abs() / a.abs().max(1.0));
        }
        offset += n;
    }
    Ok(worst)
}
