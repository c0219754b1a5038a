//! Central finite-difference verification of tape gradients.
//!
//! The numeric side only ever evaluates forward passes on constant leaves, so
//! it shares no code with any backward rule it checks.

use crate::error::Result;
use crate::rng::Rng;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

pub const FD_STEP: f64 = 1e-5;
pub const REL_TOL: f64 = 1e-4;

/// `|analytic − numeric| / max(1, |analytic|)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(1.0)
}

#[derive(Debug, Clone)]
pub struct GradCheck {
    pub name: String,
    pub worst: f64,
    pub checked: usize,
}

impl GradCheck {
    pub fn passed(&self) -> bool {
        self.worst < REL_TOL && self.worst.is_finite()
    }
}

/// How many coordinates to probe.
#[derive(Debug, Clone, Copy)]
pub enum Coverage {
    All,
    /// A seeded random subset of this many coordinates across all inputs.
    Sample {
        count: usize,
        seed: u64,
    },
    /// One seeded coordinate from every differentiated input, plus `extra`
    /// more drawn from the remaining pool.
    EveryInput {
        extra: usize,
        seed: u64,
    },
}

/// Compares the tape gradient of `f` with central differences.
///
/// `wrt[i]` selects which of `inputs` are differentiated; the rest are
/// passed as constants. `f` must return a single-element tensor.
pub fn check<F>(name: &str, inputs: &[Tensor], wrt: &[bool], coverage: Coverage, f: F) -> Result<GradCheck>
where
    F: Fn(&Tape, &[Var]) -> Result<Var>,
{
    let tape = Tape::new();
    let vars: Vec<Var> = inputs
        .iter()
        .zip(wrt)
        .map(|(t, &w)| {
            if w {
                tape.param(t.clone())
            } else {
                tape.constant(t.clone())
            }
        })
        .collect();
    let out = f(&tape, &vars)?;
    tape.backward(out)?;
    let mut analytic = Vec::with_capacity(inputs.len());
    for (v, &w) in vars.iter().zip(wrt) {
        analytic.push(if w {
            Some(tape.grad(*v)?.map(Tensor::into_data))
        } else {
            None
        });
    }
    drop(tape);

    let mut coords: Vec<(usize, usize)> = inputs
        .iter()
        .enumerate()
        .filter(|(i, _)| wrt[*i])
        .flat_map(|(i, t)| (0..t.numel()).map(move |j| (i, j)))
        .collect();
    match coverage {
        Coverage::All => {}
        Coverage::Sample { count, seed } => {
            shuffle(&mut coords, &mut Rng::new(seed));
            coords.truncate(count);
        }
        Coverage::EveryInput { extra, seed } => {
            let mut rng = Rng::new(seed);
            shuffle(&mut coords, &mut rng);
            let mut picked = Vec::new();
            let mut rest = Vec::new();
            let mut seen = vec![false; inputs.len()];
            for c in coords {
                if !seen[c.0] {
                    seen[c.0] = true;
                    picked.push(c);
                } else {
                    rest.push(c);
                }
            }
            picked.extend(rest.into_iter().take(extra));
            picked.sort_unstable();
            coords = picked;
        }
    }

    let eval = |perturbed: &[Tensor]| -> Result<f64> {
        let tape = Tape::new();
        let vars: Vec<Var> = perturbed.iter().map(|t| tape.constant(t.clone())).collect();
        let out = f(&tape, &vars)?;
        let v = tape.value(out)?.item()?;
        Ok(v)
    };

    let mut worst: f64 = 0.0;
    let mut work: Vec<Tensor> = inputs.to_vec();
    for &(i, j) in &coords {
        let orig = work[i].data()[j];
        work[i].data_mut()[j] = orig + FD_STEP;
        let plus = eval(&work)?;
        work[i].data_mut()[j] = orig - FD_STEP;
        let minus = eval(&work)?;
        work[i].data_mut()[j] = orig;
        let numeric = (plus - minus) / (2.0 * FD_STEP);
        let a = analytic[i]
            .as_ref()
            .and_then(|g| g.as_ref().map(|g| g[j]))
            .unwrap_or(0.0);
        let err = relative_error(a, numeric);
        if err.is_nan() {
            worst = f64::NAN;
        } else if !worst.is_nan() {
            worst = worst.max(err);
        }
    }
    Ok(GradCheck {
        name: name.to_string(),
        worst,
        checked: coords.len(),
    })
}

fn shuffle<T>(v: &mut [T], rng: &mut Rng) {
    for i in (1..v.len()).rev() {
        v.swap(i, rng.below(i + 1));
    }
}

/// Reduces any tensor to a scalar through a fixed random projection, so
/// every output element contributes to the checked gradient.
pub fn project(tape: &Tape, v: Var, seed: u64) -> Result<Var> {
    let shape = tape.shape(v)?;
    let weights = tape.constant(Tensor::randn(&shape, &mut Rng::new(seed))?);
    let prod = tape.mul(v, weights)?;
    tape.sum(prod)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn relative_error_floor_at_one() {
        assert_eq!(relative_error(0.5, 0.4), 0.09999999999999998);
        assert_eq!(relative_error(10.0, 9.0), 0.1);
    }

    #[test]
    fn detects_a_correct_gradient() {
        let x = Tensor::new(&[2], vec![1.0, 2.0]).unwrap();
        let r = check("square", &[x], &[true], Coverage::All, |t, v| {
            let y = t.mul(v[0], v[0])?;
            t.sum(y)
        })
        .unwrap();
        assert!(r.passed(), "{r:?}");
        assert_eq!(r.checked, 2);
    }
}
