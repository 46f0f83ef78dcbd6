//! Finite-difference checks of every differentiable primitive, layer and
//! loss, each at several seeded points.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::attention::dual_attention_loss;
use crate::data::{derive_seed, Pool};
use crate::diffcore::{grad_check, BnMode, GradCheckOptions, Graph, ParamKind, Tensor, TensorError, Var};
use crate::ldc::{fuse_features, ldc_forward, Descriptor};
use crate::metriclearn::{triplet_loss, transitional_triplet_loss, ClassLabel5, EmbeddingBatch, EmbeddingRow, Margins};
use crate::model::nn::Session;
use crate::par::Exec;
use crate::selfchallenge::self_challenging_loss;
use crate::train::{liveness_loss, prepare_step, step_objective, total_loss, TrainConfig, TrainState};
use crate::Error;

pub const DEFAULT_POINTS: usize = 10;
/// Relative disagreement of one-sided differences treated as a kink.
pub const KINK_TOLERANCE: f64 = 1e-2;
pub const DEFAULT_TOLERANCE: f64 = 5e-3;

type Objective = Box<dyn Fn(&mut Graph, &[Var]) -> Result<Var, TensorError> + Sync>;

/// A function under test at one point.
pub struct Case {
    pub f: Objective,
    pub point: Vec<Tensor>,
}

/// Named generator of cases; `build(seed)` yields a fresh point.
pub struct Check {
    pub name: &'static str,
    pub build: fn(u64) -> Result<Case, Error>,
    /// Cap on coordinates checked per input tensor.
    pub max_coords: Option<usize>,
    /// Enables the one-sided kink test for piecewise-smooth functions.
    pub kink_tolerance: Option<f64>,
}

#[derive(Clone, Debug, Serialize)]
pub struct CheckResult {
    pub name: String,
    pub points: usize,
    pub coords: usize,
    /// Coordinates left out because a kink lies within the perturbation.
    pub skipped: usize,
    pub max_rel_error: f64,
    pub passed: bool,
}

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], lo: f32, hi: f32) -> Tensor {
    Tensor::from_fn(shape, |_| rng.random_range(lo..hi))
}

/// Values bounded away from zero, for functions with a kink there.
fn off_zero(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    Tensor::from_fn(shape, |_| {
        let v = rng.random_range(0.1f32..1.0);
        if rng.random_bool(0.5) {
            v
        } else {
            -v
        }
    })
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(&[seed, 0x9c]))
}

/// Weighted sum with fixed random weights, so every output coordinate
/// contributes a distinct adjoint.
fn probe(g: &mut Graph, v: Var, seed: u64) -> Result<Var, TensorError> {
    let shape = g.shape(v).to_vec();
    let w = uniform(&mut rng(seed ^ 0x77), &shape, -1.0, 1.0);
    let w = g.constant(w);
    let p = g.mul(v, w)?;
    g.sum(p)
}

fn case(point: Vec<Tensor>, f: impl Fn(&mut Graph, &[Var]) -> Result<Var, TensorError> + Sync + 'static) -> Case {
    Case {
        f: Box::new(f),
        point,
    }
}

fn unary(seed: u64, x: Tensor, op: fn(&mut Graph, Var) -> Result<Var, TensorError>) -> Case {
    case(vec![x], move |g, v| {
        let y = op(g, v[0])?;
        probe(g, y, seed)
    })
}

fn c_add(seed: u64) -> Result<Case, Error> {
    let mut r = rng(seed);
    let pt = vec![uniform(&mut r, &[2, 3], -1.0, 1.0), uniform(&mut r, &[3], -1.0, 1.0)];
    Ok(case(pt, move |g, v| {
        let y = g.add(v[0], v[1])?;
        let y = g.sub(y, v[1])?;
        let y = g.mul(y, v[1])?;
        let y = g.add_scalar(y, 0.5)?;
        let y = g.scale(y, -1.5)?;
        probe(g, y, seed)
    }))
}

fn c_matmul(seed: u64) -> Result<Case, Error> {
    let mut r = rng(seed);
    let pt = vec![uniform(&mut r, &[2, 3, 4], -1.0, 1.0), uniform(&mut r, &[4, 2], -1.0, 1.0)];
    Ok(case(pt, move |g, v| {
        let y = g.matmul(v[0], v[1])?;
        let t = g.transpose(y)?;
        probe(g, t, seed)
    }))
}

fn c_shape_ops(seed: u64) -> Result<Case, Error> {
    let mut r = rng(seed);
    let pt = vec![uniform(&mut r, &[2, 3, 4], -1.0, 1.0), uniform(&mut r, &[1, 3, 4], -1.0, 1.0)];
    Ok(case(pt, move |g, v| {
        let p = g.permute(v[0], &[2, 0, 1])?;
        let p = g.reshape(p, &[2, 3, 4])?;
        let c = g.concat0(&[p, v[1]])?;
        let s = g.index_select(c, &[2, 0, 0, 1])?;
        let f = g.flatten(s)?;
        probe(g, f, seed)
    }))
}

fn c_relu(seed: u64) -> Result<Case, Error> {
    let x = off_zero(&mut rng(seed), &[3, 5]);
    Ok(unary(seed, x, |g, v| g.relu(v)))
}

fn c_gelu(seed: u64) -> Result<Case, Error> {
    let x = uniform(&mut rng(seed), &[3, 5], -3.0, 3.0);
    Ok(unary(seed, x, |g, v| g.gelu(v)))
}

fn c_sigmoid(seed: u64) -> Result<Case, Error> {
    let x = uniform(&mut rng(seed), &[3, 5], -4.0, 4.0);
    Ok(unary(seed, x, |g, v| g.sigmoid(v)))
}

fn c_softmax(seed: u64) -> Result<Case, Error> {
    let x = uniform(&mut rng(seed), &[2, 3, 4], -2.0, 2.0);
    Ok(unary(seed, x, |g, v| g.softmax(v)))
}

fn c_reductions(seed: u64) -> Result<Case, Error> {
    let x = uniform(&mut rng(seed), &[2, 3, 4], -2.0, 2.0);
    Ok(case(vec![x], move |g, v| {
        let m = g.mean_axis(v[0], 1)?;
        let a = probe(g, m, seed)?;
        let b = g.mean(v[0])?;
        let sq = g.mul(v[0], v[0])?;
        let c = g.sum(sq)?;
        let c = g.scale(c, 0.1)?;
        let t = g.add(a, b)?;
        g.add(t, c)
    }))
}

fn c_layer_norm(seed: u64) -> Result<Case, Error> {
    let mut r = rng(seed);
    let pt = vec![
        uniform(&mut r, &[2, 3, 6], -2.0, 2.0),
        uniform(&mut r, &[6], 0.5, 1.5),
        uniform(&mut r, &[6], -0.5, 0.5),
    ];
    Ok(case(pt, move |g, v| {
        let y = g.layer_norm(v[0], v[1], v[2], 1e-6)?;
        probe(g, y, seed)
    }))
}

fn c_batch_norm(seed: u64) -> Result<Case, Error> {
    let mut r = rng(seed);
    let pt = vec![
        uniform(&mut r, &[3, 2, 3, 3], -2.0, 2.0),
        uniform(&mut r, &[2], 0.5, 1.5),
        uniform(&mut r, &[2], -0.5, 0.5),
    ];
    Ok(case(pt, move |g, v| {
        let (y, _) = g.batch_norm(v[0], v[1], v[2], &BnMode::Train { eps: 1e-5 })?;
        probe(g, y, seed)
    }))
}

fn c_conv2d(seed: u64) -> Result<Case, Error> {
    let mut r = rng(seed);
    let pt = vec![
        uniform(&mut r, &[2, 2, 5, 5], -1.0, 1.0),
        uniform(&mut r, &[3, 2, 3, 3], -1.0, 1.0),
        uniform(&mut r, &[3], -0.5, 0.5),
    ];
    Ok(case(pt, move |g, v| {
        let a = g.conv2d(v[0], v[1], Some(v[2]), 2, 1)?;
        let a = probe(g, a, seed)?;
        let b = g.conv2d(v[0], v[1], None, 1, 0)?;
        let b = probe(g, b, seed ^ 1)?;
        g.add(a, b)
    }))
}

fn c_row_geometry(seed: u64) -> Result<Case, Error> {
    let mut r = rng(seed);
    let pt = vec![uniform(&mut r, &[4, 5], -1.0, 1.0), uniform(&mut r, &[4, 5], -1.0, 1.0)];
    Ok(case(pt, move |g, v| {
        let n = g.normalize_rows(v[0])?;
        let a = probe(g, n, seed)?;
        let d = g.sq_dist_rows(v[0], v[1])?;
        let b = probe(g, d, seed ^ 1)?;
        let c = g.cosine_rows(v[0], v[1])?;
        let c = probe(g, c, seed ^ 2)?;
        let l = g.l2_norm_rows(v[1])?;
        let l = probe(g, l, seed ^ 3)?;
        let t = g.add(a, b)?;
        let t = g.add(t, c)?;
        g.add(t, l)
    }))
}

fn c_bce(seed: u64) -> Result<Case, Error> {
    let mut r = rng(seed);
    let s = uniform(&mut r, &[6], 0.05, 0.95);
    let y = Tensor::from_fn(&[6], |i| (i % 2) as f32);
    Ok(case(vec![s], move |g, v| {
        let y = g.constant(y.clone());
        liveness_loss(g, v[0], y)
    }))
}

fn c_resize(seed: u64) -> Result<Case, Error> {
    let x = uniform(&mut rng(seed), &[2, 1, 3, 5], -1.0, 1.0);
    Ok(unary(seed, x, |g, v| g.resize_bilinear(v, 4, 4)))
}

fn c_ldc(seed: u64) -> Result<Case, Error> {
    let mut r = rng(seed);
    let pt = vec![
        uniform(&mut r, &[3, 3, 3, 3], -1.0, 1.0),
        uniform(&mut r, &[3, 3, 3, 3], 0.5, 1.5),
        uniform(&mut r, &[2, 3, 4, 4], -1.0, 1.0),
    ];
    Ok(case(pt, move |g, v| {
        let y = ldc_forward(g, Descriptor::Hadamard, v[0], v[1], v[2])?;
        let y = fuse_features(g, v[2], y, 0.15)?;
        probe(g, y, seed)
    }))
}

fn c_map_losses(seed: u64) -> Result<Case, Error> {
    let mut r = rng(seed);
    let pt: Vec<Tensor> = (0..4).map(|_| uniform(&mut r, &[3, 1, 4, 4], 0.0, 1.0)).collect();
    Ok(case(pt, move |g, v| {
        let a = dual_attention_loss(g, v[0], v[1], v[2], v[3])?;
        let b = self_challenging_loss(g, v[1], v[0], v[3], v[2])?;
        g.add(a, b)
    }))
}

fn embedding_rows() -> Vec<EmbeddingRow> {
    let classes = [
        ClassLabel5::Live,
        ClassLabel5::Live,
        ClassLabel5::Print,
        ClassLabel5::Print,
        ClassLabel5::Replay,
        ClassLabel5::Replay,
        ClassLabel5::MixedPrint,
        ClassLabel5::MixedPrint,
        ClassLabel5::MixedReplay,
        ClassLabel5::MixedReplay,
    ];
    classes
        .iter()
        .enumerate()
        .map(|(i, &class)| EmbeddingRow {
            class,
            domain: if i % 2 == 0 { "A" } else { "B" }.into(),
            key: i as u64,
        })
        .collect()
}

/// Smallest distance from `z` to a point where batch-hard mining would
/// switch its positive or negative, or where a hinge changes side. The
/// mined losses are piecewise smooth, so differences are only meaningful
/// well inside one piece.
fn mining_clearance(z: &Tensor, rows: &[EmbeddingRow]) -> f64 {
    let (m, d) = (z.shape()[0], z.shape()[1]);
    let unit: Vec<Vec<f64>> = (0..m)
        .map(|i| {
            let r: Vec<f64> = z.data()[i * d..(i + 1) * d].iter().map(|&v| v as f64).collect();
            let n = r.iter().map(|v| v * v).sum::<f64>().sqrt();
            r.iter().map(|v| v / n).collect()
        })
        .collect();
    let dist = |a: usize, b: usize| unit[a].iter().zip(&unit[b]).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let gap = |mut v: Vec<f64>| {
        v.sort_by(f64::total_cmp);
        v.windows(2).map(|w| w[1] - w[0]).fold(f64::INFINITY, f64::min)
    };
    let margins = Margins::default();
    let mut clearance = f64::INFINITY;
    let normalized = Tensor::from_fn(&[m, d], |i| unit[i / d][i % d] as f32);
    for (a, p, n) in crate::metriclearn::mine_batch_hard(&normalized, rows, &margins) {
        let pos = (0..m).filter(|&j| j != a && rows[j].class == rows[a].class).map(|j| dist(a, j));
        let neg = (0..m).filter(|&j| rows[j].class != rows[a].class).map(|j| dist(a, j));
        let hinge = dist(a, p) - dist(a, n) + margins.between(&rows[a], &rows[n]) as f64;
        clearance = clearance.min(gap(pos.collect())).min(gap(neg.collect())).min(hinge.abs());
    }
    clearance
}

fn c_metric_losses(seed: u64) -> Result<Case, Error> {
    let rows = embedding_rows();
    let mut r = rng(seed);
    let x = loop {
        let x = uniform(&mut r, &[10, 6], -1.0, 1.0);
        if mining_clearance(&x, &rows) > 0.02 {
            break x;
        }
    };
    Ok(case(vec![x], move |g, v| {
        let z = g.normalize_rows(v[0])?;
        let batch = EmbeddingBatch { z, rows: rows.clone() };
        let a = triplet_loss(g, &batch)?;
        let b = transitional_triplet_loss(g, &batch, seed)?;
        g.add(a, b)
    }))
}

fn c_total_loss(seed: u64) -> Result<Case, Error> {
    let pt: Vec<Tensor> = (0..4).map(|_| uniform(&mut rng(seed), &[], 0.0, 2.0)).collect();
    let w = TrainConfig::default().weights();
    Ok(case(pt, move |g, v| total_loss(g, v[0], v[1], v[2], v[3], &w)))
}

fn tiny_setup(seed: u64) -> Result<(TrainState, crate::data::Batch), Error> {
    let config = crate::train::tiny_config(seed);
    let state = TrainState::new(config)?;
    let samples = crate::train::tiny_samples(2, seed);
    let idx: Vec<usize> = (0..samples.len()).collect();
    let pool = Pool::new(&samples, &idx)?;
    let batch = state.batch_for(&pool, 0)?;
    Ok((state, batch))
}

fn c_model_forward(seed: u64) -> Result<Case, Error> {
    let (state, batch) = tiny_setup(seed)?;
    let x = batch.images.clone();
    Ok(case(vec![x], move |g, v| {
        let mut s = Session::from_graph(std::mem::take(g), &state.store, false);
        let out = state.nets.model.forward(&mut s, v[0])?;
        let f = probe(&mut s.graph, out.features, seed)?;
        let t = s.graph.sum(out.score)?;
        let r = s.graph.add(f, t);
        *g = s.into_graph();
        r
    }))
}

fn c_objective(seed: u64) -> Result<Case, Error> {
    let (mut state, batch) = tiny_setup(seed)?;
    // a non-zero head so the liveness and aux terms carry gradient
    let mut r = rng(seed);
    for e in state.store.entries_mut() {
        if e.name.ends_with("head.w") {
            e.value = uniform(&mut r, e.value.shape(), -0.5, 0.5);
        }
    }
    let inputs = prepare_step(&state.config, &state.nets, &state.store, &batch, seed)?;
    let ids: Vec<_> = state
        .store
        .ids()
        .filter(|&id| state.store.entry(id).kind == ParamKind::Trainable)
        .collect();
    let point: Vec<Tensor> = ids.iter().map(|&id| state.store.get(id).clone()).collect();
    Ok(case(point, move |g, v| {
        let mut s = Session::from_graph(std::mem::take(g), &state.store, true);
        for (&id, &var) in ids.iter().zip(v) {
            s.bind_as(id, var);
        }
        let terms = step_objective(&mut s, &state.config, &state.nets, &inputs);
        *g = s.into_graph();
        Ok(terms?.objective)
    }))
}

/// Every check, in dependency order.
pub fn checks() -> Vec<Check> {
    let all: [(&'static str, fn(u64) -> Result<Case, Error>, Option<usize>); 20] = [
        ("elementwise", c_add, None),
        ("matmul", c_matmul, None),
        ("shape_ops", c_shape_ops, None),
        ("relu", c_relu, None),
        ("gelu", c_gelu, None),
        ("sigmoid", c_sigmoid, None),
        ("softmax", c_softmax, None),
        ("reductions", c_reductions, None),
        ("layer_norm", c_layer_norm, None),
        ("batch_norm", c_batch_norm, None),
        ("conv2d", c_conv2d, Some(24)),
        ("row_geometry", c_row_geometry, None),
        ("bce", c_bce, None),
        ("resize_bilinear", c_resize, None),
        ("ldc", c_ldc, Some(24)),
        ("attention_map_losses", c_map_losses, Some(16)),
        ("metric_losses", c_metric_losses, None),
        ("total_loss", c_total_loss, None),
        ("model_forward", c_model_forward, Some(24)),
        ("training_objective", c_objective, Some(4)),
    ];
    all.into_iter()
        .map(|(name, build, max_coords)| Check {
            name,
            build,
            max_coords,
            // batch-hard mining and ReLU patterns of an untrained network
            // switch within eps at most points
            kink_tolerance: (name == "training_objective").then_some(KINK_TOLERANCE),
        })
        .collect()
}

/// Run one check at `points` seeded points; the reported error is the
/// worst over all points.
pub fn run_check(check: &Check, points: usize, seed: u64, tolerance: f64, exec: Exec) -> Result<CheckResult, Error> {
    let mut worst = 0.0f64;
    let (mut coords, mut skipped) = (0, 0);
    for p in 0..points {
        let s = derive_seed(&[seed, p as u64]);
        let c = (check.build)(s)?;
        let opts = GradCheckOptions {
            eps: 1e-3,
            max_coords: check.max_coords,
            seed: s,
            exec,
            kink_tolerance: check.kink_tolerance,
        };
        let r = grad_check(&c.f, &c.point, &opts).map_err(|e| Error::Config(format!("{}: {e}", check.name)))?;
        worst = worst.max(r.max_rel_error);
        coords += r.coords_checked;
        skipped += r.coords_skipped;
    }
    Ok(CheckResult {
        name: check.name.into(),
        points,
        coords,
        skipped,
        max_rel_error: worst,
        passed: worst <= tolerance && coords > 0,
    })
}

/// Run all checks whose name contains `filter`.
pub fn run_all(filter: Option<&str>, points: usize, seed: u64, tolerance: f64, exec: Exec) -> Result<Vec<CheckResult>, Error> {
    checks()
        .iter()
        .filter(|c| filter.is_none_or(|f| c.name.contains(f)))
        .map(|c| run_check(c, points, seed, tolerance, exec))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_check_passes_at_ten_points() {
        for c in checks() {
            let r = run_check(&c, DEFAULT_POINTS, 1, DEFAULT_TOLERANCE, Exec::default()).unwrap();
            assert!(r.passed, "{r:?}");
            assert!(r.coords > 0);
        }
    }

    #[test]
    fn a_wrong_adjoint_is_caught() {
        // x * stop_grad(x) has true slope 2x but the adjoint only sees x
        let f = |g: &mut Graph, v: &[Var]| {
            let d = g.detach(v[0]);
            let sq = g.mul(v[0], d)?;
            g.sum(sq)
        };
        let x = Tensor::new([2], vec![1.0, -2.0]).unwrap();
        let r = grad_check(&f, &[x], &GradCheckOptions::default()).unwrap();
        assert!(r.max_rel_error > 0.3, "{r:?}");
    }
}
