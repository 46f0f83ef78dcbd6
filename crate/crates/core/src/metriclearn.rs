//! Transitional triplet mining over pooled LDCformer features.
//!
//! Embeddings are expected to be L2-normalized by the caller; the losses
//! themselves work on whatever vectors they are given.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::data::{derive_seed, Attack};
use crate::diffcore::{Graph, Tensor, TensorError, Var};

pub const MARGIN_REAL: f32 = 0.1;
pub const MARGIN_MIXED: f32 = 0.05;
/// Maximum number of (live, spoof, mixed spoof) triples per attack type.
pub const MAX_TRANSITION_TRIPLES: usize = 64;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum ClassLabel5 {
    Live,
    Print,
    Replay,
    MixedPrint,
    MixedReplay,
}

impl ClassLabel5 {
    pub fn real(attack: Attack) -> Self {
        match attack {
            Attack::None => ClassLabel5::Live,
            Attack::Print => ClassLabel5::Print,
            Attack::Replay => ClassLabel5::Replay,
        }
    }

    /// Label of a self-challenging sample whose spoof parent had `attack`.
    pub fn mixed(attack: Attack) -> Option<Self> {
        match attack {
            Attack::None => None,
            Attack::Print => Some(ClassLabel5::MixedPrint),
            Attack::Replay => Some(ClassLabel5::MixedReplay),
        }
    }

    pub fn is_mixed(self) -> bool {
        matches!(self, ClassLabel5::MixedPrint | ClassLabel5::MixedReplay)
    }
}

impl fmt::Display for ClassLabel5 {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ClassLabel5::Live => "live",
            ClassLabel5::Print => "print",
            ClassLabel5::Replay => "replay",
            ClassLabel5::MixedPrint => "mixed_print",
            ClassLabel5::MixedReplay => "mixed_replay",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct EmbeddingRow {
    pub class: ClassLabel5,
    pub domain: String,
    /// Stable identity of the row, used for order-independent subsampling.
    pub key: u64,
}

impl EmbeddingRow {
    pub fn is_self_challenging(&self) -> bool {
        self.class.is_mixed()
    }
}

/// Embeddings `[M,D]` in a recording plus one row of metadata per embedding.
#[derive(Clone, Debug)]
pub struct EmbeddingBatch {
    pub z: Var,
    pub rows: Vec<EmbeddingRow>,
}

impl EmbeddingBatch {
    fn check(&self, g: &Graph) -> Result<(), TensorError> {
        let s = g.shape(self.z);
        if s.len() != 2 || s[0] != self.rows.len() {
            return Err(TensorError::Shape {
                op: "embedding_batch",
                detail: format!("embeddings {s:?} for {} rows", self.rows.len()),
            });
        }
        Ok(())
    }
}

/// Triplet margins for real-only and mixed-involving triples.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Margins {
    pub real: f32,
    pub mixed: f32,
}

impl Default for Margins {
    fn default() -> Self {
        Self {
            real: MARGIN_REAL,
            mixed: MARGIN_MIXED,
        }
    }
}

impl Margins {
    pub fn between(&self, anchor: &EmbeddingRow, negative: &EmbeddingRow) -> f32 {
        if anchor.is_self_challenging() || negative.is_self_challenging() {
            self.mixed
        } else {
            self.real
        }
    }
}

pub fn margin_for(anchor: &EmbeddingRow, negative: &EmbeddingRow) -> f32 {
    Margins::default().between(anchor, negative)
}

pub fn triplet_hinge(d_ap: f32, d_an: f32, margin: f32) -> f32 {
    (d_ap - d_an + margin).max(0.0)
}

fn distances(z: &Tensor) -> Vec<Vec<f64>> {
    let (m, d) = (z.shape()[0], z.shape()[1]);
    let zd = z.data();
    (0..m)
        .map(|i| {
            (0..m)
                .map(|j| {
                    (0..d)
                        .map(|k| ((zd[i * d + k] - zd[j * d + k]) as f64).powi(2))
                        .sum::<f64>()
                        .sqrt()
                })
                .collect()
        })
        .collect()
}

/// Batch-hard mined `(anchor, positive, negative)` index triples. Ties in
/// the negative distance go to the larger margin.
pub fn mine_batch_hard(z: &Tensor, rows: &[EmbeddingRow], margins: &Margins) -> Vec<(usize, usize, usize)> {
    let dist = distances(z);
    let m = rows.len();
    (0..m)
        .filter_map(|a| {
            let pos = (0..m)
                .filter(|&p| p != a && rows[p].class == rows[a].class)
                .max_by(|&x, &y| dist[a][x].total_cmp(&dist[a][y]).then(y.cmp(&x)))?;
            let neg = (0..m).filter(|&n| rows[n].class != rows[a].class).min_by(|&x, &y| {
                dist[a][x]
                    .total_cmp(&dist[a][y])
                    .then(margins.between(&rows[a], &rows[y]).total_cmp(&margins.between(&rows[a], &rows[x])))
                    .then(x.cmp(&y))
            })?;
            Some((a, pos, neg))
        })
        .collect()
}

fn zero(g: &mut Graph) -> Var {
    g.constant(Tensor::scalar(0.0))
}

/// Mean over batch-hard triples of `max(0, d_ap - d_an + margin)`.
pub fn triplet_loss(g: &mut Graph, batch: &EmbeddingBatch) -> Result<Var, TensorError> {
    triplet_loss_with(g, batch, &Margins::default())
}

pub fn triplet_loss_with(g: &mut Graph, batch: &EmbeddingBatch, margins: &Margins) -> Result<Var, TensorError> {
    batch.check(g)?;
    let triples = mine_batch_hard(g.value(batch.z), &batch.rows, margins);
    if triples.is_empty() {
        log::warn!("triplet loss: no valid (anchor, positive, negative) triple in batch");
        return Ok(zero(g));
    }
    let a: Vec<usize> = triples.iter().map(|t| t.0).collect();
    let p: Vec<usize> = triples.iter().map(|t| t.1).collect();
    let n: Vec<usize> = triples.iter().map(|t| t.2).collect();
    let margins: Vec<f32> = triples
        .iter()
        .map(|&(a, _, n)| margins.between(&batch.rows[a], &batch.rows[n]))
        .collect();
    let za = g.index_select(batch.z, &a)?;
    let zp = g.index_select(batch.z, &p)?;
    let zn = g.index_select(batch.z, &n)?;
    let dap = g.sub(za, zp)?;
    let dap = g.l2_norm_rows(dap)?;
    let dan = g.sub(za, zn)?;
    let dan = g.l2_norm_rows(dan)?;
    let diff = g.sub(dap, dan)?;
    let m = g.constant(Tensor::new([margins.len()], margins)?);
    let arg = g.add(diff, m)?;
    let h = g.relu(arg)?;
    g.mean(h)
}

/// `(live, spoof, mixed)` index triples for one attack type, capped at
/// [`MAX_TRANSITION_TRIPLES`] by a seeded, row-order independent selection.
pub fn transition_triples(rows: &[EmbeddingRow], attack: Attack, seed: u64) -> Vec<(usize, usize, usize)> {
    let (Some(mixed), real) = (ClassLabel5::mixed(attack), ClassLabel5::real(attack)) else {
        return Vec::new();
    };
    let of = |c: ClassLabel5| (0..rows.len()).filter(move |&i| rows[i].class == c);
    let mut all: Vec<(u64, (usize, usize, usize))> = Vec::new();
    for l in of(ClassLabel5::Live) {
        for s in of(real) {
            for sp in of(mixed) {
                let key = derive_seed(&[seed, rows[l].key, rows[s].key, rows[sp].key]);
                all.push((key, (l, s, sp)));
            }
        }
    }
    if all.len() > MAX_TRANSITION_TRIPLES {
        all.sort_by_key(|&(k, (l, s, sp))| (k, rows[l].key, rows[s].key, rows[sp].key));
        all.truncate(MAX_TRANSITION_TRIPLES);
    }
    all.into_iter().map(|(_, t)| t).collect()
}

/// Sum over print and replay of the mean `1 - cos(z_s - z_l, z_s' - z_l)`.
pub fn transitional_consistency_loss(g: &mut Graph, batch: &EmbeddingBatch, seed: u64) -> Result<Var, TensorError> {
    batch.check(g)?;
    let mut total = zero(g);
    for attack in [Attack::Print, Attack::Replay] {
        let triples = transition_triples(&batch.rows, attack, derive_seed(&[seed, attack as u64]));
        if triples.is_empty() {
            log::debug!("transitional consistency: no live/{attack}/mixed-{attack} triple in batch");
            continue;
        }
        let idx = |k: fn(&(usize, usize, usize)) -> usize| triples.iter().map(k).collect::<Vec<_>>();
        let zl = g.index_select(batch.z, &idx(|t| t.0))?;
        let zs = g.index_select(batch.z, &idx(|t| t.1))?;
        let zsp = g.index_select(batch.z, &idx(|t| t.2))?;
        let u = g.sub(zs, zl)?;
        let v = g.sub(zsp, zl)?;
        let cos = g.cosine_rows(u, v)?;
        let mean = g.mean(cos)?;
        let term = g.scale(mean, -1.0)?;
        let term = g.add_scalar(term, 1.0)?;
        total = g.add(total, term)?;
    }
    Ok(total)
}

/// `triplet_loss + transitional_consistency_loss`.
pub fn transitional_triplet_loss(g: &mut Graph, batch: &EmbeddingBatch, seed: u64) -> Result<Var, TensorError> {
    transitional_triplet_loss_with(g, batch, &Margins::default(), seed)
}

pub fn transitional_triplet_loss_with(
    g: &mut Graph,
    batch: &EmbeddingBatch,
    margins: &Margins,
    seed: u64,
) -> Result<Var, TensorError> {
    let t = triplet_loss_with(g, batch, margins)?;
    let c = transitional_consistency_loss(g, batch, seed)?;
    g.add(t, c)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffcore::{grad_check, GradCheckOptions};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn row(class: ClassLabel5, key: u64) -> EmbeddingRow {
        EmbeddingRow {
            class,
            domain: "A".into(),
            key,
        }
    }

    const CLASSES: [ClassLabel5; 5] = [
        ClassLabel5::Live,
        ClassLabel5::Print,
        ClassLabel5::Replay,
        ClassLabel5::MixedPrint,
        ClassLabel5::MixedReplay,
    ];

    fn eval(f: impl Fn(&mut Graph, &EmbeddingBatch) -> Result<Var, TensorError>, z: &Tensor, rows: &[EmbeddingRow]) -> f32 {
        let mut g = Graph::new();
        let zv = g.constant(z.clone());
        let b = EmbeddingBatch { z: zv, rows: rows.to_vec() };
        let l = f(&mut g, &b).unwrap();
        g.value(l).item()
    }

    #[test]
    fn margin_schedule() {
        let (mp, l, p, mr) = (
            row(ClassLabel5::MixedPrint, 0),
            row(ClassLabel5::Live, 1),
            row(ClassLabel5::Print, 2),
            row(ClassLabel5::MixedReplay, 3),
        );
        assert_eq!(margin_for(&mp, &l), 0.05);
        assert_eq!(margin_for(&l, &p), 0.1);
        assert_eq!(margin_for(&l, &mr), 0.05);
    }

    #[test]
    fn hinge_arithmetic() {
        assert_eq!(triplet_hinge(0.0, 1.0, 0.1), 0.0);
        assert!((triplet_hinge(0.5, 0.2, 0.1) - 0.4).abs() < 1e-6);
    }

    #[test]
    fn triplet_loss_matches_brute_force_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..30 {
            let m = rng.random_range(3..10);
            let rows: Vec<EmbeddingRow> = (0..m).map(|i| row(CLASSES[rng.random_range(0..3)], i as u64)).collect();
            let z = Tensor::from_fn(&[m, 4], |_| rng.random_range(-1.0..1.0));
            let d = |i: usize, j: usize| -> f64 {
                (0..4).map(|k| ((z.data()[i * 4 + k] - z.data()[j * 4 + k]) as f64).powi(2)).sum::<f64>().sqrt()
            };
            let mut terms = Vec::new();
            for a in 0..m {
                let dp = (0..m).filter(|&p| p != a && rows[p].class == rows[a].class).map(|p| d(a, p)).fold(None, |acc: Option<f64>, v| Some(acc.map_or(v, |x| x.max(v))));
                let dn = (0..m).filter(|&n| rows[n].class != rows[a].class).map(|n| d(a, n)).fold(None, |acc: Option<f64>, v| Some(acc.map_or(v, |x| x.min(v))));
                if let (Some(dp), Some(dn)) = (dp, dn) {
                    terms.push((dp - dn + 0.1).max(0.0));
                }
            }
            let expected = if terms.is_empty() { 0.0 } else { terms.iter().sum::<f64>() / terms.len() as f64 };
            let got = eval(triplet_loss, &z, &rows);
            assert!((got as f64 - expected).abs() < 1e-5, "{got} vs {expected}");
            assert!(got >= 0.0);
        }
    }

    #[test]
    fn single_class_triplet_loss_is_zero() {
        let rows: Vec<_> = (0..4).map(|i| row(ClassLabel5::Live, i)).collect();
        let z = Tensor::from_fn(&[4, 3], |i| i as f32);
        assert_eq!(eval(triplet_loss, &z, &rows), 0.0);
    }

    fn transition_rows() -> Vec<EmbeddingRow> {
        vec![row(ClassLabel5::Live, 0), row(ClassLabel5::Print, 1), row(ClassLabel5::MixedPrint, 2)]
    }

    #[test]
    fn consistency_cosine_cases() {
        let cases = [
            (vec![0.0, 0.0, 1.0, 0.0, 2.0, 0.0], 0.0),
            (vec![0.0, 0.0, 1.0, 0.0, -1.0, 0.0], 2.0),
            (vec![0.0, 0.0, 1.0, 0.0, 0.0, 1.0], 1.0),
        ];
        for (v, want) in cases {
            let z = Tensor::new([3, 2], v).unwrap();
            let got = eval(|g, b| transitional_consistency_loss(g, b, 0), &z, &transition_rows());
            assert!((got - want).abs() < 1e-6, "{got} vs {want}");
        }
    }

    #[test]
    fn missing_category_contributes_zero() {
        let rows = vec![row(ClassLabel5::Live, 0), row(ClassLabel5::Print, 1), row(ClassLabel5::Replay, 2)];
        let z = Tensor::from_fn(&[3, 2], |i| i as f32);
        assert_eq!(eval(|g, b| transitional_consistency_loss(g, b, 0), &z, &rows), 0.0);
    }

    #[test]
    fn combined_loss_is_sum_of_components() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..20 {
            let rows: Vec<_> = (0..10).map(|i| row(CLASSES[i % 5], i as u64)).collect();
            let z = Tensor::from_fn(&[10, 5], |_| rng.random_range(-1.0..1.0));
            let t = eval(triplet_loss, &z, &rows);
            let c = eval(|g, b| transitional_consistency_loss(g, b, 3), &z, &rows);
            let both = eval(|g, b| transitional_triplet_loss(g, b, 3), &z, &rows);
            assert!((both - (t + c)).abs() < 1e-6);
        }
    }

    #[test]
    fn transition_triples_are_capped() {
        let rows: Vec<_> = (0..15).map(|i| row(CLASSES[[0, 1, 3][i % 3]], i as u64)).collect();
        let t = transition_triples(&rows, Attack::Print, 9);
        assert_eq!(t.len(), MAX_TRANSITION_TRIPLES);
        assert_eq!(t, transition_triples(&rows, Attack::Print, 9));
        assert!(transition_triples(&rows, Attack::Replay, 9).is_empty());
    }

    #[test]
    fn gradients_pass_check() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let rows: Vec<_> = (0..6).map(|i| row(CLASSES[[0, 1, 3, 0, 1, 3][i]], i as u64)).collect();
        let z = Tensor::from_fn(&[6, 3], |_| rng.random_range(-1.0..1.0));
        let run = |which: u8| {
            let rows = rows.clone();
            move |g: &mut Graph, v: &[Var]| {
                let b = EmbeddingBatch { z: v[0], rows: rows.clone() };
                match which {
                    0 => triplet_loss(g, &b),
                    _ => transitional_consistency_loss(g, &b, 0),
                }
            }
        };
        for which in 0..2 {
            let rep = grad_check(&run(which), std::slice::from_ref(&z), &GradCheckOptions::default()).unwrap();
            assert!(rep.max_rel_error < 1e-3, "{which}: {rep:?}");
        }
    }

    fn arb_batch() -> impl Strategy<Value = (Vec<EmbeddingRow>, Tensor, Vec<usize>)> {
        (4usize..12).prop_flat_map(|m| {
            (
                prop::collection::vec(0usize..5, m),
                prop::collection::vec(-1.0f32..1.0, m * 3),
                Just((0..m).collect::<Vec<_>>()).prop_shuffle(),
            )
                .prop_map(move |(c, v, perm)| {
                    let rows = c.iter().enumerate().map(|(i, &k)| row(CLASSES[k], i as u64)).collect();
                    (rows, Tensor::new([m, 3], v).unwrap(), perm)
                })
        })
    }

    proptest! {
        #[test]
        fn losses_are_permutation_invariant((rows, z, perm) in arb_batch()) {
            let prow: Vec<_> = perm.iter().map(|&i| rows[i].clone()).collect();
            let pz = Tensor::from_fn(z.shape(), |k| z.data()[perm[k / 3] * 3 + k % 3]);
            for f in [
                &(|g: &mut Graph, b: &EmbeddingBatch| triplet_loss(g, b)) as &dyn Fn(&mut Graph, &EmbeddingBatch) -> Result<Var, TensorError>,
                &|g: &mut Graph, b: &EmbeddingBatch| transitional_consistency_loss(g, b, 4),
            ] {
                let a = eval(f, &z, &rows);
                let b = eval(f, &pz, &prow);
                prop_assert!((a - b).abs() < 1e-6, "{} vs {}", a, b);
            }
        }

        #[test]
        fn consistency_is_bounded_and_scale_free((rows, z, _) in arb_batch(), c in 0.1f32..10.0) {
            let terms = [Attack::Print, Attack::Replay].iter().filter(|&&a| !transition_triples(&rows, a, 0).is_empty()).count();
            let base = eval(|g, b| transitional_consistency_loss(g, b, 4), &z, &rows);
            prop_assert!(base >= -1e-6 && base <= 2.0 * terms as f32 + 1e-6);
            prop_assert!(eval(triplet_loss, &z, &rows) >= 0.0);
            // Scale every offset from a single live anchor.
            if let Some(l) = rows.iter().position(|r| r.class == ClassLabel5::Live) {
                if rows.iter().filter(|r| r.class == ClassLabel5::Live).count() == 1 {
                    let zl: Vec<f32> = z.data()[l * 3..l * 3 + 3].to_vec();
                    let scaled = Tensor::from_fn(z.shape(), |k| zl[k % 3] + c * (z.data()[k] - zl[k % 3]));
                    let s = eval(|g, b| transitional_consistency_loss(g, b, 4), &scaled, &rows);
                    prop_assert!((s - base).abs() < 1e-5, "{} vs {}", s, base);
                }
            }
        }
    }
}
