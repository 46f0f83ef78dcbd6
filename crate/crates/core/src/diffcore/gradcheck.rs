//! Central finite-difference verification of analytic adjoints.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use super::graph::{Graph, Var};
use super::tensor::{Tensor, TensorError};
use crate::par::Exec;

#[derive(Debug, Error)]
pub enum GradCheckError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("function is non-finite when input {input} coordinate {index} is perturbed")]
    NonFinite { input: usize, index: usize },
    #[error("no inputs to check")]
    Empty,
}

#[derive(Clone, Debug)]
pub struct GradCheckOptions {
    /// Perturbation half-width.
    pub eps: f32,
    /// Check at most this many seeded coordinates per input tensor.
    pub max_coords: Option<usize>,
    pub seed: u64,
    pub exec: Exec,
    /// Skip coordinates whose forward and backward one-sided differences
    /// disagree by more than this (relative to `max(1, |central|)`): a kink
    /// or jump lies inside `±eps` there and the central difference is not a
    /// derivative. `None` compares every coordinate.
    pub kink_tolerance: Option<f64>,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            eps: 1e-3,
            max_coords: None,
            seed: 0,
            exec: Exec::default(),
            kink_tolerance: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    /// `max |analytic - numeric| / max(1, |numeric|)` over checked coordinates.
    pub max_rel_error: f64,
    /// Input tensor and flat coordinate where the maximum occurred.
    pub input: usize,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub coords_checked: usize,
    /// Coordinates left out by the kink test.
    pub coords_skipped: usize,
}

/// Compare the adjoint of scalar `f` at `point` against central differences.
///
/// `f` receives a fresh recording and one leaf per input tensor. Each
/// perturbed evaluation is an independent recording, so they are spread
/// across `opts.exec`.
pub fn grad_check<F>(f: &F, point: &[Tensor], opts: &GradCheckOptions) -> Result<GradCheckReport, GradCheckError>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var, TensorError> + Sync,
{
    if point.is_empty() {
        return Err(GradCheckError::Empty);
    }
    let mut g = Graph::new();
    let leaves: Vec<Var> = point.iter().map(|t| g.param(t.clone())).collect();
    let loss = f(&mut g, &leaves)?;
    let grads = g.backward(loss)?;

    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut coords = Vec::new();
    for (i, t) in point.iter().enumerate() {
        match opts.max_coords {
            Some(k) if k < t.len() => {
                let mut picked = sample(&mut rng, t.len(), k).into_vec();
                picked.sort_unstable();
                coords.extend(picked.into_iter().map(|j| (i, j)));
            }
            _ => coords.extend((0..t.len()).map(|j| (i, j))),
        }
    }

    let eval = |input: usize, index: usize, delta: f32| -> Result<(f32, f32), GradCheckError> {
        let mut inputs = point.to_vec();
        let x = &mut inputs[input].data_mut()[index];
        *x += delta;
        let moved = *x;
        let mut g = Graph::new();
        let leaves: Vec<Var> = inputs.into_iter().map(|t| g.constant(t)).collect();
        let out = match f(&mut g, &leaves) {
            Ok(v) => g.value(v).item(),
            Err(TensorError::NonFinite { .. }) => return Err(GradCheckError::NonFinite { input, index }),
            Err(e) => return Err(e.into()),
        };
        if !out.is_finite() {
            return Err(GradCheckError::NonFinite { input, index });
        }
        Ok((out, moved))
    };

    let base = match opts.kink_tolerance {
        Some(_) => Some(eval(coords[0].0, coords[0].1, 0.0)?.0 as f64),
        None => None,
    };
    // central difference, or None when the kink test rejects the coordinate
    let numeric = opts.exec.map(&coords, |&(i, j)| -> Result<Option<f64>, GradCheckError> {
        let (fp, xp) = eval(i, j, opts.eps)?;
        let (fm, xm) = eval(i, j, -opts.eps)?;
        let central = (fp as f64 - fm as f64) / (xp as f64 - xm as f64);
        if let (Some(tol), Some(f0)) = (opts.kink_tolerance, base) {
            let x0 = point[i].data()[j] as f64;
            let fwd = (fp as f64 - f0) / (xp as f64 - x0);
            let bwd = (f0 - fm as f64) / (x0 - xm as f64);
            if (fwd - bwd).abs() > tol * central.abs().max(1.0) {
                return Ok(None);
            }
        }
        Ok(Some(central))
    });

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        input: 0,
        index: 0,
        analytic: 0.0,
        numeric: 0.0,
        coords_checked: 0,
        coords_skipped: 0,
    };
    for (&(i, j), num) in coords.iter().zip(numeric) {
        let Some(num) = num? else {
            report.coords_skipped += 1;
            continue;
        };
        report.coords_checked += 1;
        let ana = grads.get(leaves[i]).map_or(0.0, |t| t.data()[j] as f64);
        let rel = (ana - num).abs() / num.abs().max(1.0);
        if rel > report.max_rel_error || report.coords_checked == 1 {
            report = GradCheckReport {
                max_rel_error: rel.max(report.max_rel_error),
                input: i,
                index: j,
                analytic: ana,
                numeric: num,
                ..report
            };
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn square_at_three() {
        let f = |g: &mut Graph, v: &[Var]| {
            let sq = g.mul(v[0], v[0])?;
            g.sum(sq)
        };
        let x = Tensor::new([1], vec![3.0]).unwrap();
        let opts = GradCheckOptions {
            eps: 1e-4,
            ..Default::default()
        };
        let r = grad_check(&f, &[x], &opts).unwrap();
        assert!(r.max_rel_error < 1e-5, "{r:?}");
    }

    #[test]
    fn reports_non_finite_perturbation() {
        // finite at x = 1, overflows once x moves up by eps
        let f = |g: &mut Graph, v: &[Var]| {
            let big = g.scale(v[0], f32::MAX)?;
            g.sum(big)
        };
        let x = Tensor::new([1], vec![1.0]).unwrap();
        let err = grad_check(&f, &[x], &GradCheckOptions::default()).unwrap_err();
        assert!(matches!(err, GradCheckError::NonFinite { input: 0, index: 0 }), "{err}");
    }

    #[test]
    fn kink_test_skips_jumps_but_not_wrong_adjoints() {
        // relu(x) at x = 0.0005 straddles the kink within eps
        let relu = |g: &mut Graph, v: &[Var]| {
            let r = g.relu(v[0])?;
            g.sum(r)
        };
        let x = Tensor::new([2], vec![0.0005, 0.7]).unwrap();
        let plain = grad_check(&relu, &[x.clone()], &GradCheckOptions::default()).unwrap();
        assert!(plain.max_rel_error > 0.2, "{plain:?}");
        let opts = GradCheckOptions {
            kink_tolerance: Some(1e-2),
            ..Default::default()
        };
        let r = grad_check(&relu, &[x], &opts).unwrap();
        assert_eq!((r.coords_checked, r.coords_skipped), (1, 1));
        assert!(r.max_rel_error < 1e-3, "{r:?}");

        // x * stop_grad(x): smooth, adjoint off by a factor two
        let wrong = |g: &mut Graph, v: &[Var]| {
            let c = g.detach(v[0]);
            let y = g.mul(v[0], c)?;
            g.sum(y)
        };
        let x = Tensor::new([3], vec![0.5, -1.5, 2.0]).unwrap();
        let r = grad_check(&wrong, &[x], &opts).unwrap();
        assert_eq!(r.coords_skipped, 0);
        assert!(r.max_rel_error > 0.4, "{r:?}");
    }
}
