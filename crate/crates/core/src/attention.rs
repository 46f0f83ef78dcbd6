//! Dual-attention supervision.
//!
//! An auxiliary CNN classifier is trained alongside the LDCformer. Its
//! Grad-CAM maps for the live and spoof classes become quasi ground truth
//! for two estimators (LE, SE) that read the LDCformer token grid.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::diffcore::{Graph, ParamGroup, ParamId, ParamStore, Tensor, TensorError, Var};
use crate::model::nn::{ConvBnRelu, Linear, Session};
use crate::Error;

/// Where an [`AttentionMap`] came from.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MapSource {
    CamLive,
    CamSpoof,
    EstimatedLive,
    EstimatedSpoof,
    SplitLive,
    SplitSpoof,
}

/// Single-channel map `[1,h,w]` with values in `[0,1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionMap {
    values: Tensor,
    source: MapSource,
}

impl AttentionMap {
    pub fn new(values: Tensor, source: MapSource) -> Result<Self, Error> {
        if values.ndim() != 3 || values.shape()[0] != 1 {
            return Err(Error::Usage(format!(
                "attention map must be [1,h,w], got {:?}",
                values.shape()
            )));
        }
        if let Some(v) = values.data().iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::Usage(format!("attention value {v} outside [0,1]")));
        }
        Ok(Self { values, source })
    }

    pub fn zeros(h: usize, w: usize, source: MapSource) -> Self {
        Self {
            values: Tensor::zeros(&[1, h, w]),
            source,
        }
    }

    pub fn values(&self) -> &Tensor {
        &self.values
    }

    pub fn into_values(self) -> Tensor {
        self.values
    }

    pub fn source(&self) -> MapSource {
        self.source
    }

    pub fn height(&self) -> usize {
        self.values.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.values.shape()[2]
    }

    pub fn is_zero(&self) -> bool {
        self.values.data().iter().all(|&v| v == 0.0)
    }
}

/// Liveness class targeted by Grad-CAM.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CamTarget {
    Live,
    Spoof,
}

impl CamTarget {
    /// Column of the auxiliary logits holding this class.
    pub fn column(self) -> usize {
        match self {
            CamTarget::Live => 0,
            CamTarget::Spoof => 1,
        }
    }

    fn source(self) -> MapSource {
        match self {
            CamTarget::Live => MapSource::CamLive,
            CamTarget::Spoof => MapSource::CamSpoof,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AuxConfig {
    /// Output channels of each stride-2 conv/BN/ReLU stage.
    pub stages: Vec<usize>,
}

impl Default for AuxConfig {
    fn default() -> Self {
        Self {
            stages: vec![8, 16, 16, 32],
        }
    }
}

/// Auxiliary CAM classifier: stride-2 conv stages, global average pooling
/// and a two-logit `[live, spoof]` head.
#[derive(Clone, Debug)]
pub struct AuxNet {
    pub stages: Vec<ConvBnRelu>,
    pub head: Linear,
}

#[derive(Clone, Copy, Debug)]
pub struct AuxOut {
    /// Last stage activations `[B,C,h,w]`, the Grad-CAM target layer.
    pub features: Var,
    /// `[B,2]` class logits.
    pub logits: Var,
    /// `sigmoid(live - spoof)`, `[B]`.
    pub live_prob: Var,
}

impl AuxNet {
    pub fn new(
        config: &AuxConfig,
        in_channels: usize,
        image_side: usize,
        store: &mut ParamStore,
        rng: &mut impl Rng,
        prefix: &str,
    ) -> Result<Self, Error> {
        if config.stages.is_empty() {
            return Err(Error::Config("aux network needs at least one stage".into()));
        }
        let final_side = config.stages.iter().fold(image_side, |s, _| s.div_ceil(2));
        if final_side < 2 {
            return Err(Error::Config(format!(
                "aux network reduces {image_side}px images to {final_side}px; Grad-CAM needs at least 2x2"
            )));
        }
        let g = ParamGroup::Aux;
        let mut cin = in_channels;
        let stages = config
            .stages
            .iter()
            .enumerate()
            .map(|(i, &cout)| {
                let st = ConvBnRelu::new(store, rng, &format!("{prefix}stage{i}"), cin, cout, 3, 2, g);
                cin = cout;
                st
            })
            .collect();
        let head = Linear::new(store, rng, &format!("{prefix}head"), cin, 2, g);
        Ok(Self { stages, head })
    }

    pub fn forward(&self, s: &mut Session, x: Var) -> Result<AuxOut, TensorError> {
        let mut h = x;
        for st in &self.stages {
            h = st.forward(s, h)?;
        }
        let features = h;
        let shape = s.graph.shape(features).to_vec();
        let flat = s.graph.reshape(features, &[shape[0], shape[1], shape[2] * shape[3]])?;
        let pooled = s.graph.mean_axis(flat, 2)?;
        let logits = self.head.forward(s, pooled)?;
        let diff = s.graph.constant(Tensor::new([2, 1], vec![1.0, -1.0])?);
        let margin = s.graph.matmul(logits, diff)?;
        let margin = s.graph.reshape(margin, &[shape[0]])?;
        let live_prob = s.graph.sigmoid(margin)?;
        Ok(AuxOut {
            features,
            logits,
            live_prob,
        })
    }

    /// Grad-CAM maps for a batch `[B,C,H,W]`, computed in a separate
    /// evaluation-mode recording.
    pub fn grad_cam(
        &self,
        store: &ParamStore,
        images: &Tensor,
        target: CamTarget,
        side: usize,
    ) -> Result<Vec<CamMap>, Error> {
        let mut s = Session::eval(store);
        let x = s.constant(images.clone());
        let out = self.forward(&mut s, x)?;
        let feats = s.graph.value(out.features).clone();
        self.cam_from_features(store, &feats, target, side)
    }

    /// Grad-CAM given already computed target-layer activations `[B,C,h,w]`.
    pub fn cam_from_features(
        &self,
        store: &ParamStore,
        features: &Tensor,
        target: CamTarget,
        side: usize,
    ) -> Result<Vec<CamMap>, Error> {
        // The activations become a gradient-carrying leaf of a fresh recording.
        let mut g = Graph::new();
        let fv = g.param(features.clone());
        let logits = self.head_on(&mut g, store, fv)?;
        let root = class_logit_sum(&mut g, logits, target)?;
        let grads = g.grad_of(root, fv)?;
        Ok(cam_from_gradients(features, &grads, side, target)?)
    }

    fn head_on(&self, g: &mut Graph, store: &ParamStore, features: Var) -> Result<Var, TensorError> {
        let shape = g.shape(features).to_vec();
        let flat = g.reshape(features, &[shape[0], shape[1], shape[2] * shape[3]])?;
        let pooled = g.mean_axis(flat, 2)?;
        let w = g.constant(store.get(self.head.w).clone());
        let b = g.constant(store.get(self.head.b).clone());
        let y = g.matmul(pooled, w)?;
        g.add(y, b)
    }
}

/// Sum over the batch of one class logit, the Grad-CAM backward root.
///
/// Each sample's logit depends only on its own activations, so the
/// gradient of the sum w.r.t. sample `i`'s activations is the gradient of
/// sample `i`'s logit.
pub fn class_logit_sum(g: &mut Graph, logits: Var, target: CamTarget) -> Result<Var, TensorError> {
    let mut sel = vec![0.0; 2];
    sel[target.column()] = 1.0;
    let sel = g.constant(Tensor::new([2, 1], sel)?);
    let picked = g.matmul(logits, sel)?;
    g.sum(picked)
}

/// A Grad-CAM map and whether it was degenerate (constant before
/// normalization, returned as all zeros).
#[derive(Clone, Debug)]
pub struct CamMap {
    pub map: AttentionMap,
    pub degenerate: bool,
}

/// Grad-CAM from target-layer activations and the gradients of the class
/// logit with respect to them.
///
/// Channel weights are the spatial mean of the gradients; the weighted
/// channel sum goes through ReLU, a bilinear resize to `side x side`, and
/// a per-sample min-max normalization to `[0,1]`.
pub fn cam_from_gradients(
    features: &Tensor,
    grads: &Tensor,
    side: usize,
    target: CamTarget,
) -> Result<Vec<CamMap>, TensorError> {
    if features.shape() != grads.shape() || features.ndim() != 4 {
        return Err(TensorError::Shape {
            op: "grad_cam",
            detail: format!("{:?} vs {:?}", features.shape(), grads.shape()),
        });
    }
    let s = features.shape();
    let (b, c, h, w) = (s[0], s[1], s[2], s[3]);
    let plane = h * w;
    let (f, gd) = (features.data(), grads.data());
    let mut raw = vec![0.0f32; b * plane];
    for bi in 0..b {
        for ch in 0..c {
            let base = (bi * c + ch) * plane;
            let weight = gd[base..base + plane].iter().map(|&v| v as f64).sum::<f64>() / plane as f64;
            if weight == 0.0 {
                continue;
            }
            for p in 0..plane {
                raw[bi * plane + p] += (weight * f[base + p] as f64) as f32;
            }
        }
    }
    raw.iter_mut().for_each(|v| *v = v.max(0.0));
    let mut g = Graph::new();
    let cam = g.constant(Tensor::new([b, 1, h, w], raw)?);
    let resized = g.resize_bilinear(cam, side, side)?;
    let resized = g.value(resized);
    Ok((0..b)
        .map(|bi| {
            let vals = &resized.data()[bi * side * side..(bi + 1) * side * side];
            let (lo, hi) = vals
                .iter()
                .fold((f32::INFINITY, f32::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
            let degenerate = hi - lo <= f32::EPSILON * hi.abs().max(1.0);
            let norm: Vec<f32> = if degenerate {
                vec![0.0; side * side]
            } else {
                vals.iter().map(|&v| ((v - lo) / (hi - lo)).clamp(0.0, 1.0)).collect()
            };
            CamMap {
                map: AttentionMap {
                    values: Tensor::from_parts(vec![1, side, side], norm),
                    source: target.source(),
                },
                degenerate,
            }
        })
        .collect())
}

/// Quasi ground truth from a pair of CAMs: the live map is kept only for
/// live images and the spoof map only for spoof images; the other is zeroed.
pub fn quasi_ground_truth(cam_live: AttentionMap, cam_spoof: AttentionMap, y: u8) -> (AttentionMap, AttentionMap) {
    let (h, w) = (cam_live.height(), cam_live.width());
    if y == 1 {
        (cam_live, AttentionMap::zeros(h, w, MapSource::CamSpoof))
    } else {
        (AttentionMap::zeros(h, w, MapSource::CamLive), cam_spoof)
    }
}

/// [`quasi_ground_truth`] for a single image run through `aux`.
pub fn quasi_ground_truth_for(
    aux: &AuxNet,
    store: &ParamStore,
    image: &Tensor,
    y: u8,
    side: usize,
) -> Result<(AttentionMap, AttentionMap), Error> {
    let batch = Tensor::stack(std::slice::from_ref(image))?;
    let live = aux.grad_cam(store, &batch, CamTarget::Live, side)?.remove(0).map;
    let spoof = aux.grad_cam(store, &batch, CamTarget::Spoof, side)?.remove(0).map;
    Ok(quasi_ground_truth(live, spoof, y))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EstimatorConfig {
    /// Channels of each of the three conv/BN/ReLU blocks.
    pub width: usize,
}

impl Default for EstimatorConfig {
    fn default() -> Self {
        Self { width: 16 }
    }
}

/// Attention estimator: three 3×3 conv/BN/ReLU blocks and a 1×1 sigmoid
/// output over the `[B,DN,g,g]` token grid.
#[derive(Clone, Debug)]
pub struct Estimator {
    pub blocks: Vec<ConvBnRelu>,
    pub out_w: ParamId,
    pub out_b: ParamId,
}

impl Estimator {
    pub fn new(
        config: &EstimatorConfig,
        in_channels: usize,
        store: &mut ParamStore,
        rng: &mut impl Rng,
        prefix: &str,
    ) -> Self {
        let g = ParamGroup::Main;
        let w = config.width;
        let blocks = (0..3)
            .map(|i| {
                let cin = if i == 0 { in_channels } else { w };
                ConvBnRelu::new(store, rng, &format!("{prefix}block{i}"), cin, w, 3, 1, g)
            })
            .collect();
        let out_w = store.add(
            format!("{prefix}out.w"),
            crate::diffcore::kaiming_normal(rng, &[1, w, 1, 1], w),
            g,
        );
        let out_b = store.add(format!("{prefix}out.b"), Tensor::zeros(&[1]), g);
        Self { blocks, out_w, out_b }
    }

    pub fn forward(&self, s: &mut Session, grid: Var) -> Result<Var, TensorError> {
        let mut h = grid;
        for b in &self.blocks {
            h = b.forward(s, h)?;
        }
        let (w, b) = (s.p(self.out_w), s.p(self.out_b));
        let y = s.graph.conv2d(h, w, Some(b), 1, 0)?;
        s.graph.sigmoid(y)
    }
}

/// Live and spoof attention estimates `[B,1,g,g]` from LE and SE.
pub fn estimate(s: &mut Session, le: &Estimator, se: &Estimator, grid: Var) -> Result<(Var, Var), TensorError> {
    Ok((le.forward(s, grid)?, se.forward(s, grid)?))
}

/// Batch mean of per-sample Frobenius distances `||target - estimate||`.
pub fn map_distance(g: &mut Graph, target: Var, estimate: Var) -> Result<Var, TensorError> {
    if g.shape(target) != g.shape(estimate) {
        return Err(TensorError::Shape {
            op: "attention_loss",
            detail: format!("{:?} vs {:?}", g.shape(target), g.shape(estimate)),
        });
    }
    let d = g.sub(target, estimate)?;
    let d = g.flatten(d)?;
    let n = g.l2_norm_rows(d)?;
    g.mean(n)
}

/// `||A_l - Ā_l|| + ||A_s - Ā_s||`, averaged over the batch.
pub fn dual_attention_loss(
    g: &mut Graph,
    a_live: Var,
    a_spoof: Var,
    est_live: Var,
    est_spoof: Var,
) -> Result<Var, TensorError> {
    let l = map_distance(g, a_live, est_live)?;
    let s = map_distance(g, a_spoof, est_spoof)?;
    g.add(l, s)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffcore::{grad_check, GradCheckOptions};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rand_map(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
        Tensor::from_fn(shape, |_| rng.random_range(0.0..1.0))
    }

    #[test]
    fn dual_loss_examples() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::full(&[1, 1, 3, 3], 0.4));
        let l = dual_attention_loss(&mut g, a, a, a, a).unwrap();
        assert_eq!(g.value(l).item(), 0.0);

        let ones = g.constant(Tensor::ones(&[1, 1, 3, 3]));
        let zeros = g.constant(Tensor::zeros(&[1, 1, 3, 3]));
        let l = dual_attention_loss(&mut g, ones, zeros, zeros, zeros).unwrap();
        assert!((g.value(l).item() - 3.0).abs() < 1e-6);

        let other = g.constant(Tensor::zeros(&[1, 1, 2, 2]));
        assert!(dual_attention_loss(&mut g, ones, zeros, other, zeros).is_err());
    }

    #[test]
    fn dual_loss_matches_direct_oracle_and_is_symmetric() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..20 {
            let maps: Vec<Tensor> = (0..4).map(|_| rand_map(&mut rng, &[3, 1, 4, 4])).collect();
            let oracle: f64 = (0..3)
                .map(|b| {
                    let fro = |t: &Tensor, e: &Tensor| {
                        (0..16)
                            .map(|i| ((t.data()[b * 16 + i] - e.data()[b * 16 + i]) as f64).powi(2))
                            .sum::<f64>()
                            .sqrt()
                    };
                    fro(&maps[0], &maps[2]) + fro(&maps[1], &maps[3])
                })
                .sum::<f64>()
                / 3.0;
            let mut g = Graph::new();
            let v: Vec<Var> = maps.iter().map(|m| g.constant(m.clone())).collect();
            let l = dual_attention_loss(&mut g, v[0], v[1], v[2], v[3]).unwrap();
            let swapped = dual_attention_loss(&mut g, v[1], v[0], v[3], v[2]).unwrap();
            assert!((g.value(l).item() as f64 - oracle).abs() < 1e-5);
            assert!((g.value(l).item() - g.value(swapped).item()).abs() < 1e-6);
        }
    }

    #[test]
    fn dual_loss_gradient_check_on_small_map() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let targets = [rand_map(&mut rng, &[1, 1, 2, 2]), rand_map(&mut rng, &[1, 1, 2, 2])];
        let f = |g: &mut Graph, v: &[Var]| {
            let tl = g.constant(targets[0].clone());
            let ts = g.constant(targets[1].clone());
            dual_attention_loss(g, tl, ts, v[0], v[1])
        };
        let est = [rand_map(&mut rng, &[1, 1, 2, 2]), rand_map(&mut rng, &[1, 1, 2, 2])];
        let rep = grad_check(&f, &est, &GradCheckOptions::default()).unwrap();
        assert!(rep.max_rel_error < 1e-3, "{rep:?}");
    }

    #[test]
    fn gradient_step_shrinks_spoof_estimate_of_live_sample() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let a_l = rand_map(&mut rng, &[1, 1, 4, 4]);
        let a_s = Tensor::zeros(&[1, 1, 4, 4]);
        let est_l = rand_map(&mut rng, &[1, 1, 4, 4]);
        let est_s = rand_map(&mut rng, &[1, 1, 4, 4]);
        let mut g = Graph::new();
        let (tl, ts) = (g.constant(a_l), g.constant(a_s));
        let (el, es) = (g.constant(est_l), g.param(est_s.clone()));
        let loss = dual_attention_loss(&mut g, tl, ts, el, es).unwrap();
        let grads = g.backward(loss).unwrap();
        let step = grads.get(es).unwrap();
        let moved = Tensor::from_fn(&[1, 1, 4, 4], |i| est_s.data()[i] - 0.1 * step.data()[i]);
        let norm = |t: &Tensor| t.data().iter().map(|v| v * v).sum::<f32>().sqrt();
        assert!(norm(&moved) < norm(&est_s));
    }

    #[test]
    fn cam_of_single_channel_identity_head_is_normalized_relu() {
        let feats = Tensor::new([1, 1, 2, 2], vec![0.5, -1.0, 2.0, 1.0]).unwrap();
        // d(logit)/dF for an identity head after global average pooling
        let grads = Tensor::full(&[1, 1, 2, 2], 0.25);
        let cam = cam_from_gradients(&feats, &grads, 2, CamTarget::Live).unwrap().remove(0);
        assert!(!cam.degenerate);
        let expected = [0.25, 0.0, 1.0, 0.5];
        for (v, e) in cam.map.values().data().iter().zip(expected) {
            assert!((v - e).abs() < 1e-6);
        }
    }

    #[test]
    fn cam_with_zero_gradients_is_all_zero_and_flagged() {
        let feats = Tensor::full(&[2, 3, 2, 2], 1.0);
        let grads = Tensor::zeros(&[2, 3, 2, 2]);
        for cam in cam_from_gradients(&feats, &grads, 4, CamTarget::Spoof).unwrap() {
            assert!(cam.map.is_zero());
            assert!(cam.degenerate);
            assert_eq!(cam.map.source(), MapSource::CamSpoof);
        }
    }

    fn tiny_aux(seed: u64) -> (ParamStore, AuxNet) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let cfg = AuxConfig { stages: vec![4, 6] };
        let aux = AuxNet::new(&cfg, 3, 8, &mut store, &mut rng, "aux.").unwrap();
        (store, aux)
    }

    #[test]
    fn bias_only_head_gives_zero_map() {
        let (mut store, aux) = tiny_aux(1);
        *store.get_mut(aux.head.w) = Tensor::zeros(&[6, 2]);
        *store.get_mut(aux.head.b) = Tensor::new([2], vec![0.3, -0.2]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = rand_map(&mut rng, &[2, 3, 8, 8]);
        for target in [CamTarget::Live, CamTarget::Spoof] {
            for cam in aux.grad_cam(&store, &x, target, 4).unwrap() {
                assert!(cam.map.is_zero());
            }
        }
    }

    #[test]
    fn cam_is_bounded_and_invariant_to_positive_head_scaling() {
        let (mut store, aux) = tiny_aux(3);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = rand_map(&mut rng, &[3, 3, 8, 8]);
        let before = aux.grad_cam(&store, &x, CamTarget::Live, 4).unwrap();
        for c in &before {
            assert!(c.map.values().data().iter().all(|v| (0.0..=1.0).contains(v)));
        }
        let scaled = store.get(aux.head.w).map(|v| v * 3.5);
        *store.get_mut(aux.head.w) = scaled;
        let after = aux.grad_cam(&store, &x, CamTarget::Live, 4).unwrap();
        for (a, b) in before.iter().zip(&after) {
            assert!(a.map.values().max_abs_diff(b.map.values()) < 1e-5);
        }
    }

    #[test]
    fn quasi_ground_truth_zeroes_the_other_class() {
        let (store, aux) = tiny_aux(5);
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let img = rand_map(&mut rng, &[3, 8, 8]);
        let (al, as_) = quasi_ground_truth_for(&aux, &store, &img, 1, 4).unwrap();
        assert!(as_.is_zero());
        assert!(al.values().data().iter().all(|v| (0.0..=1.0).contains(v)));
        let (al, _) = quasi_ground_truth_for(&aux, &store, &img, 0, 4).unwrap();
        assert!(al.is_zero());
    }

    #[test]
    fn zero_estimators_output_one_half() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut store = ParamStore::new();
        let cfg = EstimatorConfig { width: 4 };
        let le = Estimator::new(&cfg, 8, &mut store, &mut rng, "le.");
        let se = Estimator::new(&cfg, 8, &mut store, &mut rng, "se.");
        for e in store.entries_mut() {
            if e.name.ends_with(".w") {
                e.value = Tensor::zeros(e.value.shape());
            }
        }
        let mut s = Session::train(&store);
        let grid = s.constant(rand_map(&mut rng, &[2, 8, 4, 4]));
        let (l, sp) = estimate(&mut s, &le, &se, grid).unwrap();
        for v in [l, sp] {
            assert_eq!(s.value(v).shape(), &[2, 1, 4, 4]);
            assert!(s.value(v).data().iter().all(|&x| x == 0.5));
        }
    }

    #[test]
    fn estimates_are_deterministic_and_open_unit_interval() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let mut store = ParamStore::new();
        let cfg = EstimatorConfig { width: 4 };
        let le = Estimator::new(&cfg, 8, &mut store, &mut rng, "le.");
        let se = Estimator::new(&cfg, 8, &mut store, &mut rng, "se.");
        let grid = rand_map(&mut rng, &[2, 8, 4, 4]);
        let run = || {
            let mut s = Session::train(&store);
            let gv = s.constant(grid.clone());
            let (l, sp) = estimate(&mut s, &le, &se, gv).unwrap();
            (s.value(l).clone(), s.value(sp).clone())
        };
        let (a, b) = (run(), run());
        assert_eq!(a, b);
        assert!(a.0.data().iter().chain(a.1.data()).all(|&v| v > 0.0 && v < 1.0));
    }

    #[test]
    fn attention_map_validation() {
        assert!(AttentionMap::new(Tensor::full(&[1, 2, 2], 1.5), MapSource::CamLive).is_err());
        assert!(AttentionMap::new(Tensor::full(&[2, 2], 0.5), MapSource::CamLive).is_err());
        assert!(AttentionMap::new(Tensor::full(&[1, 2, 2], 0.5), MapSource::CamLive).is_ok());
    }
}
