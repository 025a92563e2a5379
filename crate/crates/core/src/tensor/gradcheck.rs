//! Central-difference gradient checking.
//!
//! Relative error per coordinate is `|a - n| / max(|a|, |n|, 1e-8)` where `a`
//! is the analytic and `n` the numeric derivative.

use alloc::vec::Vec;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{Tape, Tensor, Var};
use crate::error::{bail, Result};

pub const REL_ERROR_FLOOR: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradcheckOptions {
    pub h: f64,
    pub tol: f64,
    /// Check at most this many coordinates, sampled without replacement.
    pub max_coords: Option<usize>,
    pub seed: u64,
}

impl Default for GradcheckOptions {
    fn default() -> Self {
        Self {
            h: 1e-5,
            tol: 1e-5,
            max_coords: None,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradcheckReport {
    pub max_rel_error: f64,
    /// Coordinate with the largest relative error.
    pub worst_coord: usize,
    pub analytic_at_worst: f64,
    pub numeric_at_worst: f64,
    pub coords_checked: usize,
    pub tol: f64,
    pub passed: bool,
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_ERROR_FLOOR)
}

/// Coordinates to probe: all of them, or a seeded sorted sample.
pub fn select_coords(len: usize, max_coords: Option<usize>, seed: u64) -> Vec<usize> {
    match max_coords {
        Some(m) if m < len => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut idx = sample(&mut rng, len, m).into_vec();
            idx.sort_unstable();
            idx
        }
        _ => (0..len).collect(),
    }
}

/// Central differences of `eval` at `point` for the given coordinates.
pub fn numeric_gradient(
    mut eval: impl FnMut(&[f64]) -> Result<f64>,
    point: &[f64],
    coords: &[usize],
    h: f64,
) -> Result<Vec<f64>> {
    let mut x = point.to_vec();
    let mut out = Vec::with_capacity(coords.len());
    for &i in coords {
        let orig = x[i];
        x[i] = orig + h;
        let plus = eval(&x)?;
        x[i] = orig - h;
        let minus = eval(&x)?;
        x[i] = orig;
        out.push((plus - minus) / (2.0 * h));
    }
    Ok(out)
}

/// Compares analytic derivatives (indexed by coordinate) against numeric ones.
pub fn compare(analytic: &[f64], numeric: &[f64], coords: &[usize], tol: f64) -> GradcheckReport {
    let mut report = GradcheckReport {
        max_rel_error: 0.0,
        worst_coord: coords.first().copied().unwrap_or(0),
        analytic_at_worst: 0.0,
        numeric_at_worst: 0.0,
        coords_checked: coords.len(),
        tol,
        passed: true,
    };
    for (&c, &n) in coords.iter().zip(numeric) {
        let a = analytic[c];
        let e = relative_error(a, n);
        if e > report.max_rel_error || e.is_nan() {
            report.max_rel_error = e;
            report.worst_coord = c;
            report.analytic_at_worst = a;
            report.numeric_at_worst = n;
        }
    }
    report.passed = report.max_rel_error <= tol;
    report
}

fn eval_scalar<F>(f: &F, x: &Tensor) -> Result<f64>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    let mut tape = Tape::new();
    let v = tape.constant(x.clone());
    let out = f(&mut tape, v)?;
    let t = tape.value(out);
    if t.numel() != 1 {
        bail!(
            Shape,
            "gradcheck function must be scalar, got {:?}",
            t.shape()
        );
    }
    Ok(t.data()[0])
}

/// Checks the tape gradient of scalar `f` at `x` against central differences.
pub fn gradcheck<F>(f: F, x: &Tensor, h: f64, tol: f64) -> Result<GradcheckReport>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    gradcheck_with(
        f,
        x,
        &GradcheckOptions {
            h,
            tol,
            ..GradcheckOptions::default()
        },
    )
}

pub fn gradcheck_with<F>(f: F, x: &Tensor, opts: &GradcheckOptions) -> Result<GradcheckReport>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    if opts.h <= 0.0 {
        bail!(Data, "finite-difference step must be positive");
    }
    let mut tape = Tape::new();
    let v = tape.param(x);
    let out = f(&mut tape, v)?;
    if tape.value(out).numel() != 1 {
        bail!(
            Shape,
            "gradcheck function must be scalar, got {:?}",
            tape.value(out).shape()
        );
    }
    let grads = tape.backward(out)?;
    let analytic = grads
        .wrt(v)
        .expect("input is a differentiable leaf")
        .data()
        .to_vec();

    let coords = select_coords(x.numel(), opts.max_coords, opts.seed);
    let shape = x.shape().to_vec();
    let numeric = numeric_gradient(
        |p| eval_scalar(&f, &Tensor::from_vec(&shape, p.to_vec())?),
        x.data(),
        &coords,
        opts.h,
    )?;
    Ok(compare(&analytic, &numeric, &coords, opts.tol))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Backward;
    use alloc::vec;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn sum_of_squares_passes() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = Tensor::rand_uniform(&[3, 4], -2.0, 2.0, &mut rng).unwrap();
        let r = gradcheck(
            |t, x| {
                let s = t.square(x)?;
                t.sum(s)
            },
            &x,
            1e-5,
            1e-6,
        )
        .unwrap();
        assert!(r.passed, "{r:?}");
    }

    #[test]
    fn gelu_sum_at_origin() {
        let x = Tensor::zeros(&[5]).unwrap();
        let r = gradcheck(
            |t, x| {
                let g = t.gelu(x)?;
                t.sum(g)
            },
            &x,
            1e-5,
            1e-6,
        )
        .unwrap();
        assert!(r.passed, "{r:?}");
        assert!((r.analytic_at_worst - 0.5).abs() < 1e-12);
    }

    struct WrongSquare;

    impl Backward for WrongSquare {
        fn name(&self) -> &'static str {
            "wrong_square"
        }

        fn backward(
            &self,
            inputs: &[&Tensor],
            _: &Tensor,
            g: &[f64],
            _: &[bool],
        ) -> Vec<Option<Vec<f64>>> {
            // d/dx x^2 is 2x; report 3x instead
            vec![Some(
                inputs[0]
                    .data()
                    .iter()
                    .zip(g)
                    .map(|(x, g)| 3.0 * x * g)
                    .collect(),
            )]
        }
    }

    #[test]
    fn sabotaged_backward_fails() {
        let x = Tensor::from_vec(&[3], vec![0.5, -1.0, 2.0]).unwrap();
        let r = gradcheck(
            |t, x| {
                let v = t.value(x).map(|v| v * v);
                let y = t.record(v, &[x], WrongSquare)?;
                t.sum(y)
            },
            &x,
            1e-5,
            1e-5,
        )
        .unwrap();
        assert!(!r.passed);
        assert!(r.max_rel_error > 0.3);
    }

    #[test]
    fn vector_output_is_shape_error() {
        let x = Tensor::zeros(&[3]).unwrap();
        let err = gradcheck(|t, x| t.scale(x, 2.0), &x, 1e-5, 1e-6).unwrap_err();
        assert!(matches!(err, crate::Error::Shape(_)));
    }

    #[test]
    fn sampled_coordinates_are_sorted_and_unique() {
        let c = select_coords(100, Some(10), 3);
        assert_eq!(c.len(), 10);
        assert!(c.windows(2).all(|w| w[0] < w[1]));
        assert_eq!(select_coords(5, Some(10), 3), vec![0, 1, 2, 3, 4]);
    }
}
