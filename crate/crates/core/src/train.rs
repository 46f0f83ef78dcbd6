//! Joint training of the LDCformer, the auxiliary CAM network and the two
//! attention estimators, plus detection scores and checkpoints.

use std::fs;
use std::io::Write;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::attention::{dual_attention_loss, AuxConfig, AuxNet, CamTarget, Estimator, EstimatorConfig};
use crate::data::{derive_seed, Attack, Batch, Pool, Sample};
use crate::diffcore::{Graph, ParamGroup, ParamId, ParamKind, ParamStore, Tensor, TensorError, Var};
use crate::metriclearn::{transitional_triplet_loss_with, ClassLabel5, EmbeddingBatch, EmbeddingRow, Margins};
use crate::metrics::Scorer;
use crate::model::nn::{BnUpdate, Session};
use crate::model::{Ldcformer, LdcformerConfig};
use crate::selfchallenge::{challenge_pair, self_challenging_loss, PairInput};
use crate::Error;

const INIT_TAG: u64 = 0x1417;
const BATCH_TAG: u64 = 0xba7c;
const STEP_TAG: u64 = 0x57e9;

/// Weights of the auxiliary terms in the total loss.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub beta: f64,
    pub gamma: f64,
    pub delta: f64,
}

impl LossWeights {
    /// `ls + beta dual + gamma sc + delta tt`.
    pub fn combine(&self, ls: f64, dual: f64, sc: f64, tt: f64) -> f64 {
        ls + self.beta * dual + self.gamma * sc + self.delta * tt
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub seed: u64,
    /// Optimizer steps. Ignored when `epochs` is set.
    pub steps: u64,
    /// Passes over the training pool, converted to steps.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub epochs: Option<u64>,
    pub batch_size: usize,
    pub beta: f64,
    pub gamma: f64,
    pub delta: f64,
    pub lr_aux: f64,
    pub lr_main: f64,
    /// Per-group global gradient norm limit; 0 disables clipping.
    pub clip_norm: f64,
    /// Generate self-challenging samples.
    pub mix: bool,
    pub mix_threshold: f64,
    pub margins: Margins,
    pub model: LdcformerConfig,
    pub aux: AuxConfig,
    pub estimator: EstimatorConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            steps: 600,
            epochs: None,
            batch_size: 18,
            beta: 0.004,
            gamma: 0.004,
            delta: 0.1,
            lr_aux: 5e-4,
            lr_main: 1e-4,
            clip_norm: 1.0,
            mix: true,
            mix_threshold: 0.5,
            margins: Margins::default(),
            model: LdcformerConfig::default(),
            aux: AuxConfig::default(),
            estimator: EstimatorConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn weights(&self) -> LossWeights {
        LossWeights {
            beta: self.beta,
            gamma: self.gamma,
            delta: self.delta,
        }
    }

    /// Liveness-only ablation of this configuration.
    pub fn liveness_only(&self) -> Self {
        Self {
            beta: 0.0,
            gamma: 0.0,
            delta: 0.0,
            mix: false,
            ..self.clone()
        }
    }

    pub fn validate(&self) -> Result<(), Error> {
        self.model.validate()?;
        let nonneg = [
            ("beta", self.beta),
            ("gamma", self.gamma),
            ("delta", self.delta),
            ("lr_aux", self.lr_aux),
            ("lr_main", self.lr_main),
            ("clip_norm", self.clip_norm),
            ("margins.real", self.margins.real as f64),
            ("margins.mixed", self.margins.mixed as f64),
        ];
        if let Some((name, v)) = nonneg.iter().find(|(_, v)| !v.is_finite() || *v < 0.0) {
            return Err(Error::Config(format!("{name} must be finite and non-negative, got {v}")));
        }
        if self.batch_size < 2 {
            return Err(Error::Config(format!("batch_size {} must be at least 2", self.batch_size)));
        }
        if !(0.0..=1.0).contains(&self.mix_threshold) {
            return Err(Error::Config(format!("mix_threshold {} outside [0,1]", self.mix_threshold)));
        }
        if self.model.height != self.model.width {
            return Err(Error::Config("images must be square".into()));
        }
        Ok(())
    }

    /// Steps to run for a training pool of `pool` samples.
    pub fn total_steps(&self, pool: usize) -> u64 {
        match self.epochs {
            Some(e) => e * (pool as u64).div_ceil(self.batch_size as u64),
            None => self.steps,
        }
    }

    pub fn to_toml(&self) -> Result<String, Error> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn from_toml(text: &str) -> Result<Self, Error> {
        let c: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        c.validate()?;
        Ok(c)
    }
}

/// All four networks, sharing one parameter store.
#[derive(Clone, Debug)]
pub struct Networks {
    pub model: Ldcformer,
    pub aux: AuxNet,
    pub le: Estimator,
    pub se: Estimator,
}

impl Networks {
    pub fn build(config: &TrainConfig, store: &mut ParamStore) -> Result<Self, Error> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(&[config.seed, INIT_TAG]));
        let m = &config.model;
        let model = Ldcformer::new(m.clone(), store, &mut rng, "ldcformer.")?;
        let aux = AuxNet::new(&config.aux, m.channels, m.height, store, &mut rng, "aux.")?;
        let le = Estimator::new(&config.estimator, m.dim, store, &mut rng, "le.");
        let se = Estimator::new(&config.estimator, m.dim, store, &mut rng, "se.");
        Ok(Self { model, aux, le, se })
    }

    /// Detection scores for `[B,C,H,W]` images.
    pub fn scores(&self, store: &ParamStore, images: &Tensor) -> Result<Vec<f32>, Error> {
        let mut s = Session::eval(store);
        let x = s.constant(images.clone());
        let out = self.model.forward(&mut s, x)?;
        Ok(s.value(out.score).data().to_vec())
    }

    /// Token-mean-pooled final features `[B,DN]`.
    pub fn pooled_features(&self, store: &ParamStore, images: &Tensor) -> Result<Tensor, Error> {
        let mut s = Session::eval(store);
        let x = s.constant(images.clone());
        let out = self.model.forward(&mut s, x)?;
        Ok(s.value(out.pooled).clone())
    }
}

/// Adam with bias correction and one learning rate per parameter group.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
    pub t: u64,
    m: Vec<Option<Tensor>>,
    v: Vec<Option<Tensor>>,
}

impl Adam {
    pub fn new(store: &ParamStore) -> Self {
        let zeros = |e: &crate::diffcore::ParamEntry| {
            (e.kind == ParamKind::Trainable).then(|| Tensor::zeros(e.value.shape()))
        };
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: store.entries().iter().map(zeros).collect(),
            v: store.entries().iter().map(zeros).collect(),
        }
    }

    /// Update every trainable parameter; missing gradients count as zero.
    pub fn step(&mut self, store: &mut ParamStore, grads: &[Option<Tensor>], lr: impl Fn(ParamGroup) -> f32) {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for (i, e) in store.entries_mut().iter_mut().enumerate() {
            let (Some(m), Some(v)) = (self.m[i].as_mut(), self.v[i].as_mut()) else {
                continue;
            };
            let rate = lr(e.group);
            let g = grads.get(i).and_then(Option::as_ref);
            let p = e.value.data_mut();
            for k in 0..p.len() {
                let gk = g.map_or(0.0, |g| g.data()[k]);
                let mk = &mut m.data_mut()[k];
                *mk = self.beta1 * *mk + (1.0 - self.beta1) * gk;
                let vk = &mut v.data_mut()[k];
                *vk = self.beta2 * *vk + (1.0 - self.beta2) * gk * gk;
                let update = (m.data()[k] / bc1) / ((v.data()[k] / bc2).sqrt() + self.eps);
                p[k] -= rate * update;
            }
        }
    }
}

/// Scale each group's gradients so its global L2 norm is at most
/// `max_norm`. Returns the pre-clipping norm per group `[main, aux]`.
pub fn clip_by_group(store: &ParamStore, grads: &mut [Option<Tensor>], max_norm: f64) -> [f64; 2] {
    let mut norms = [0.0f64; 2];
    let slot = |g: ParamGroup| usize::from(g == ParamGroup::Aux);
    for (i, g) in grads.iter().enumerate() {
        if let Some(g) = g {
            norms[slot(store.entries()[i].group)] += g.data().iter().map(|&v| (v as f64).powi(2)).sum::<f64>();
        }
    }
    let norms = norms.map(f64::sqrt);
    if max_norm > 0.0 {
        for (i, g) in grads.iter_mut().enumerate() {
            let n = norms[slot(store.entries()[i].group)];
            if let (Some(g), true) = (g, n > max_norm) {
                let f = (max_norm / n) as f32;
                g.data_mut().iter_mut().for_each(|v| *v *= f);
            }
        }
    }
    norms
}

/// Mean binary cross-entropy between scores and labels.
pub fn liveness_loss(g: &mut Graph, scores: Var, labels: Var) -> Result<Var, TensorError> {
    g.bce(scores, labels)
}

/// `L_ls + beta L_dual + gamma L_sc + delta L_tt` in a recording.
pub fn total_loss(g: &mut Graph, ls: Var, dual: Var, sc: Var, tt: Var, w: &LossWeights) -> Result<Var, TensorError> {
    let mut t = ls;
    for (v, k) in [(dual, w.beta), (sc, w.gamma), (tt, w.delta)] {
        let s = g.scale(v, k as f32)?;
        t = g.add(t, s)?;
    }
    Ok(t)
}

/// Per-step loss values.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub step: u64,
    /// Weighted total of the four main terms.
    pub total: f64,
    pub liveness: f64,
    pub dual: f64,
    pub self_challenging: f64,
    pub transitional_triplet: f64,
    /// Auxiliary classifier cross-entropy (aux parameters only).
    pub aux: f64,
    pub n_mixed: usize,
    pub degenerate_cams: usize,
    pub grad_norm_main: f64,
    pub grad_norm_aux: f64,
}

impl LossBreakdown {
    fn check_finite(&self) -> Result<(), Error> {
        let terms = [
            ("total", self.total),
            ("liveness", self.liveness),
            ("dual", self.dual),
            ("self_challenging", self.self_challenging),
            ("transitional_triplet", self.transitional_triplet),
            ("aux", self.aux),
        ];
        match terms.iter().find(|(_, v)| !v.is_finite()) {
            Some((name, v)) => Err(Error::NonFiniteLoss {
                step: self.step,
                detail: format!("{name} = {v}; breakdown {self:?}"),
            }),
            None => Ok(()),
        }
    }
}

/// Non-differentiable per-step inputs: the composed batch and the
/// attention targets derived from the current auxiliary network.
#[derive(Clone, Debug)]
pub struct StepInputs {
    /// Real then mixed images `[B+M,C,H,W]`.
    pub images: Tensor,
    /// Liveness labels `[B+M]`; mixed samples are spoof.
    pub labels: Tensor,
    pub n_real: usize,
    /// Quasi ground truth of the real samples `[B,1,g,g]`.
    pub cam_live: Tensor,
    pub cam_spoof: Tensor,
    /// Split-map targets of the mixed samples `[M,1,g,g]`.
    pub mixed_live: Option<Tensor>,
    pub mixed_spoof: Option<Tensor>,
    pub rows: Vec<EmbeddingRow>,
    pub seed: u64,
    pub degenerate_cams: usize,
}

impl StepInputs {
    pub fn n_mixed(&self) -> usize {
        self.rows.len() - self.n_real
    }
}

/// CAMs, quasi ground truth and self-challenging samples for one step.
pub fn prepare_step(
    config: &TrainConfig,
    nets: &Networks,
    store: &ParamStore,
    batch: &Batch,
    seed: u64,
) -> Result<StepInputs, Error> {
    let b = batch.len();
    let side = config.model.grid();
    let mut s = Session::train(store);
    let x = s.constant(batch.images.clone());
    let feats = nets.aux.forward(&mut s, x)?.features;
    let feats = s.value(feats).clone();
    drop(s);
    let live = nets.aux.cam_from_features(store, &feats, CamTarget::Live, side)?;
    let spoof = nets.aux.cam_from_features(store, &feats, CamTarget::Spoof, side)?;
    let plane = side * side;
    let mut cam_live = vec![0.0f32; b * plane];
    let mut cam_spoof = vec![0.0f32; b * plane];
    let mut degenerate = 0;
    for i in 0..b {
        let (cam, dst) = if batch.labels[i] == 1 {
            (&live[i], &mut cam_live)
        } else {
            (&spoof[i], &mut cam_spoof)
        };
        degenerate += usize::from(cam.degenerate);
        dst[i * plane..(i + 1) * plane].copy_from_slice(cam.map.values().data());
    }

    let real_row = |i: usize| EmbeddingRow {
        class: ClassLabel5::real(batch.attacks[i]),
        domain: batch.domains[i].clone(),
        key: derive_seed(&[batch.indices[i] as u64]),
    };
    let mut rows: Vec<EmbeddingRow> = (0..b).map(real_row).collect();
    let mut images = vec![batch.images.clone()];
    let mut labels: Vec<f32> = batch.labels.iter().map(|&y| y as f32).collect();
    let (mut mixed_live, mut mixed_spoof) = (Vec::new(), Vec::new());
    if config.mix {
        let image = |i: usize| batch.images.row(i);
        for (k, &(l, sp)) in batch.pairs.iter().enumerate() {
            let (li, si) = (image(l), image(sp));
            let pair = PairInput {
                live_image: &li,
                spoof_image: &si,
                spoof_attack: batch.attacks[sp],
                live_map: &live[l].map,
                spoof_map: &spoof[sp].map,
            };
            let Some(m) = challenge_pair(pair, derive_seed(&[seed, k as u64]), config.mix_threshold as f32)? else {
                continue;
            };
            let class = ClassLabel5::mixed(m.attack).unwrap_or(ClassLabel5::MixedPrint);
            rows.push(EmbeddingRow {
                class,
                domain: batch.domains[sp].clone(),
                key: derive_seed(&[batch.indices[l] as u64, batch.indices[sp] as u64, 0x313]),
            });
            labels.push(0.0);
            mixed_live.extend_from_slice(m.live_target.values().data());
            mixed_spoof.extend_from_slice(m.spoof_target.values().data());
            let shape = m.image.shape().to_vec();
            images.push(m.image.reshape(&[1, shape[0], shape[1], shape[2]])?);
        }
    }
    let n_mixed = rows.len() - b;
    let images = if n_mixed == 0 {
        batch.images.clone()
    } else {
        let mut g = Graph::new();
        let parts: Vec<Var> = images.into_iter().map(|t| g.constant(t)).collect();
        let all = g.concat0(&parts)?;
        g.value(all).clone()
    };
    let maps = |v: Vec<f32>| (n_mixed > 0).then(|| Tensor::from_fn(&[n_mixed, 1, side, side], |i| v[i]));
    Ok(StepInputs {
        images,
        labels: Tensor::new([labels.len()], labels)?,
        n_real: b,
        cam_live: Tensor::new([b, 1, side, side], cam_live)?,
        cam_spoof: Tensor::new([b, 1, side, side], cam_spoof)?,
        mixed_live: maps(mixed_live),
        mixed_spoof: maps(mixed_spoof),
        rows,
        seed,
        degenerate_cams: degenerate,
    })
}

/// Loss nodes of one step.
#[derive(Clone, Copy, Debug)]
pub struct LossTerms {
    pub liveness: Var,
    pub dual: Var,
    pub self_challenging: Var,
    pub transitional_triplet: Var,
    pub aux: Var,
    pub total: Var,
    /// `total + aux`, the quantity differentiated.
    pub objective: Var,
}

/// Record every loss of a step. Every term is computed even at weight 0.
pub fn step_objective(
    s: &mut Session,
    config: &TrainConfig,
    nets: &Networks,
    inputs: &StepInputs,
) -> Result<LossTerms, TensorError> {
    let b = inputs.n_real;
    let m = inputs.n_mixed();
    let real: Vec<usize> = (0..b).collect();

    let x_all = s.constant(inputs.images.clone());
    let y_all = s.constant(inputs.labels.clone());
    let out = nets.model.forward(s, x_all)?;
    let liveness = liveness_loss(&mut s.graph, out.score, y_all)?;

    let x_real = s.graph.index_select(x_all, &real)?;
    let y_real = s.graph.index_select(y_all, &real)?;
    let aux_out = nets.aux.forward(s, x_real)?;
    let aux = liveness_loss(&mut s.graph, aux_out.live_prob, y_real)?;

    let grid = nets.model.token_grid(s, out.features)?;
    let (est_l, est_s) = crate::attention::estimate(s, &nets.le, &nets.se, grid)?;
    let el = s.graph.index_select(est_l, &real)?;
    let es = s.graph.index_select(est_s, &real)?;
    let tl = s.constant(inputs.cam_live.clone());
    let ts = s.constant(inputs.cam_spoof.clone());
    let dual = dual_attention_loss(&mut s.graph, tl, ts, el, es)?;

    let self_challenging = match (&inputs.mixed_live, &inputs.mixed_spoof) {
        (Some(ml), Some(ms)) if m > 0 => {
            let mixed: Vec<usize> = (b..b + m).collect();
            let el = s.graph.index_select(est_l, &mixed)?;
            let es = s.graph.index_select(est_s, &mixed)?;
            let tl = s.constant(ml.clone());
            let ts = s.constant(ms.clone());
            self_challenging_loss(&mut s.graph, tl, ts, el, es)?
        }
        _ => s.constant(Tensor::scalar(0.0)),
    };

    let z = s.graph.normalize_rows(out.pooled)?;
    let emb = EmbeddingBatch {
        z,
        rows: inputs.rows.clone(),
    };
    let transitional_triplet = transitional_triplet_loss_with(&mut s.graph, &emb, &config.margins, inputs.seed)?;

    let total = total_loss(
        &mut s.graph,
        liveness,
        dual,
        self_challenging,
        transitional_triplet,
        &config.weights(),
    )?;
    let objective = s.graph.add(total, aux)?;
    Ok(LossTerms {
        liveness,
        dual,
        self_challenging,
        transitional_triplet,
        aux,
        total,
        objective,
    })
}

/// Gradients and statistics of one step, not yet applied.
pub struct StepResult {
    pub breakdown: LossBreakdown,
    /// Indexed like the store; `None` for buffers.
    pub grads: Vec<Option<Tensor>>,
    pub bn_updates: Vec<BnUpdate>,
}

pub fn compute_step(
    config: &TrainConfig,
    nets: &Networks,
    store: &ParamStore,
    batch: &Batch,
    step: u64,
) -> Result<StepResult, Error> {
    let non_finite = |e: Error| match e {
        Error::Tensor(TensorError::NonFinite { op }) => Error::NonFiniteLoss {
            step,
            detail: format!("non-finite value produced by {op}"),
        },
        other => other,
    };
    let seed = derive_seed(&[config.seed, step, STEP_TAG]);
    let inputs = prepare_step(config, nets, store, batch, seed).map_err(non_finite)?;
    let mut s = Session::train(store);
    let terms = step_objective(&mut s, config, nets, &inputs).map_err(|e| non_finite(e.into()))?;
    let val = |v: Var| s.value(v).item() as f64;
    let mut breakdown = LossBreakdown {
        step,
        total: val(terms.total),
        liveness: val(terms.liveness),
        dual: val(terms.dual),
        self_challenging: val(terms.self_challenging),
        transitional_triplet: val(terms.transitional_triplet),
        aux: val(terms.aux),
        n_mixed: inputs.n_mixed(),
        degenerate_cams: inputs.degenerate_cams,
        ..Default::default()
    };
    breakdown.check_finite()?;
    let mut all = s.graph.backward(terms.objective).map_err(|e| non_finite(e.into()))?;
    let mut grads: Vec<Option<Tensor>> = vec![None; store.len()];
    for (id, v) in s.bound_params() {
        if store.entry(id).kind == ParamKind::Trainable {
            grads[id.index()] = all.take(v);
        }
    }
    if let Some(bad) = grads.iter().enumerate().find(|(_, g)| g.as_ref().is_some_and(|g| !g.all_finite())) {
        return Err(Error::NonFiniteLoss {
            step,
            detail: format!("non-finite gradient for {}", store.entries()[bad.0].name),
        });
    }
    let norms = clip_by_group(store, &mut grads, config.clip_norm);
    breakdown.grad_norm_main = norms[0];
    breakdown.grad_norm_aux = norms[1];
    Ok(StepResult {
        breakdown,
        grads,
        bn_updates: s.take_bn_updates(),
    })
}

/// Everything a training run mutates.
#[derive(Clone, Debug)]
pub struct TrainState {
    pub config: TrainConfig,
    pub nets: Networks,
    pub store: ParamStore,
    pub adam: Adam,
    /// Completed optimizer steps.
    pub step: u64,
}

impl TrainState {
    pub fn new(config: TrainConfig) -> Result<Self, Error> {
        let mut store = ParamStore::new();
        let nets = Networks::build(&config, &mut store)?;
        let adam = Adam::new(&store);
        Ok(Self {
            config,
            nets,
            store,
            adam,
            step: 0,
        })
    }

    pub fn lr(&self, group: ParamGroup) -> f32 {
        match group {
            ParamGroup::Main => self.config.lr_main as f32,
            ParamGroup::Aux => self.config.lr_aux as f32,
        }
    }

    /// Batch drawn for step `step`.
    pub fn batch_for(&self, pool: &Pool, step: u64) -> Result<Batch, Error> {
        pool.batch(self.config.batch_size, derive_seed(&[self.config.seed, step, BATCH_TAG]))
    }

    pub fn scores(&self, images: &Tensor) -> Result<Vec<f32>, Error> {
        self.nets.scores(&self.store, images)
    }
}

impl Scorer for TrainState {
    fn score_batch(&self, images: &Tensor) -> Result<Vec<f32>, Error> {
        self.scores(images)
    }
}

/// One optimizer step. On error the state is left untouched.
pub fn train_step(state: &mut TrainState, batch: &Batch) -> Result<LossBreakdown, Error> {
    let r = compute_step(&state.config, &state.nets, &state.store, batch, state.step)?;
    let (main, aux) = (state.lr(ParamGroup::Main), state.lr(ParamGroup::Aux));
    state.adam.step(&mut state.store, &r.grads, |g| match g {
        ParamGroup::Main => main,
        ParamGroup::Aux => aux,
    });
    for u in &r.bn_updates {
        u.apply(&mut state.store);
    }
    state.step += 1;
    Ok(r.breakdown)
}

/// Train until `until` completed steps, writing one JSON line per step to
/// `log` when given.
pub fn fit(
    state: &mut TrainState,
    samples: &[Sample],
    train_idx: &[usize],
    until: u64,
    mut log: Option<&mut dyn Write>,
) -> Result<Vec<LossBreakdown>, Error> {
    let pool = Pool::new(samples, train_idx)?;
    let mut out = Vec::new();
    while state.step < until {
        let batch = state.batch_for(&pool, state.step)?;
        let b = train_step(state, &batch)?;
        log::debug!(
            "step {} total {:.5} ls {:.5} dual {:.4} sc {:.4} tt {:.4} aux {:.4} mixed {}",
            b.step,
            b.total,
            b.liveness,
            b.dual,
            b.self_challenging,
            b.transitional_triplet,
            b.aux,
            b.n_mixed
        );
        if let Some(w) = log.as_deref_mut() {
            let line = serde_json::json!({
                "step": b.step,
                "losses": b,
                "lr_main": state.config.lr_main,
                "lr_aux": state.config.lr_aux,
            });
            writeln!(w, "{line}").map_err(Error::io("training log"))?;
        }
        out.push(b);
    }
    Ok(out)
}

/// Train a fresh model on `train_idx` for the configured number of steps.
pub fn train_model(config: &TrainConfig, samples: &[Sample], train_idx: &[usize]) -> Result<TrainState, Error> {
    let mut state = TrainState::new(config.clone())?;
    let steps = config.total_steps(train_idx.len());
    fit(&mut state, samples, train_idx, steps, None)?;
    Ok(state)
}

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"LDCF";
pub const CHECKPOINT_VERSION: u32 = 1;

pub fn config_hash(config_toml: &str) -> [u8; 32] {
    Sha256::digest(config_toml.as_bytes()).into()
}

fn put_u32(out: &mut Vec<u8>, v: usize) {
    out.extend_from_slice(&(v as u32).to_le_bytes());
}

fn put_f32s(out: &mut Vec<u8>, d: &[f32]) {
    for v in d {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

/// Serialize parameters, buffers and optimizer state.
///
/// Layout (little endian): `LDCF`, version `u32`, config TOML length `u32`
/// and bytes, SHA-256 of the config, tensor count `u32`, then per tensor
/// name length `u32`, name, kind `u8` (0 trainable, 1 buffer), rank `u32`,
/// dims `u32`, `f32` data. Optimizer section: completed steps `u64`, Adam
/// step `u64`, then first and second moments of each trainable tensor in
/// order.
pub fn encode_checkpoint(state: &TrainState) -> Result<Vec<u8>, Error> {
    let cfg = state.config.to_toml()?;
    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    put_u32(&mut out, cfg.len());
    out.extend_from_slice(cfg.as_bytes());
    out.extend_from_slice(&config_hash(&cfg));
    put_u32(&mut out, state.store.len());
    for e in state.store.entries() {
        put_u32(&mut out, e.name.len());
        out.extend_from_slice(e.name.as_bytes());
        out.push(u8::from(e.kind == ParamKind::Buffer));
        put_u32(&mut out, e.value.ndim());
        e.value.shape().iter().for_each(|&d| put_u32(&mut out, d));
        put_f32s(&mut out, e.value.data());
    }
    out.extend_from_slice(&state.step.to_le_bytes());
    out.extend_from_slice(&state.adam.t.to_le_bytes());
    for (m, v) in state.adam.m.iter().zip(&state.adam.v) {
        if let (Some(m), Some(v)) = (m, v) {
            put_f32s(&mut out, m.data());
            put_f32s(&mut out, v.data());
        }
    }
    Ok(out)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8], Error> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::Checkpoint(format!("truncated file while reading {what}")))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<usize, Error> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")) as usize)
    }

    fn u64(&mut self, what: &str) -> Result<u64, Error> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().expect("8 bytes")))
    }

    fn f32s(&mut self, n: usize, what: &str) -> Result<Vec<f32>, Error> {
        let raw = self.take(n.checked_mul(4).ok_or_else(|| Error::Checkpoint("size overflow".into()))?, what)?;
        Ok(raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes"))).collect())
    }
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<TrainState, Error> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4, "magic")? != CHECKPOINT_MAGIC {
        return Err(Error::Checkpoint("bad magic bytes: not an LDCF checkpoint".into()));
    }
    let version = r.u32("version")? as u32;
    if version != CHECKPOINT_VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported format version {version} (expected {CHECKPOINT_VERSION})"
        )));
    }
    let n = r.u32("config length")?;
    let cfg = std::str::from_utf8(r.take(n, "config")?)
        .map_err(|_| Error::Checkpoint("config is not UTF-8".into()))?;
    if r.take(32, "config hash")? != config_hash(cfg) {
        return Err(Error::Checkpoint("config hash mismatch".into()));
    }
    let config = TrainConfig::from_toml(cfg)?;
    let mut state = TrainState::new(config)?;
    let count = r.u32("tensor count")?;
    if count != state.store.len() {
        return Err(Error::Checkpoint(format!(
            "checkpoint has {count} tensors, configuration defines {}",
            state.store.len()
        )));
    }
    for e in state.store.entries_mut() {
        let len = r.u32("tensor name length")?;
        let name = r.take(len, "tensor name")?;
        if name != e.name.as_bytes() {
            return Err(Error::Checkpoint(format!(
                "tensor {:?} found where {:?} expected",
                String::from_utf8_lossy(name),
                e.name
            )));
        }
        let kind = r.take(1, "tensor kind")?[0];
        if kind != u8::from(e.kind == ParamKind::Buffer) {
            return Err(Error::Checkpoint(format!("tensor {} has the wrong kind", e.name)));
        }
        let rank = r.u32("tensor rank")?;
        let shape = (0..rank).map(|_| r.u32("tensor shape")).collect::<Result<Vec<_>, _>>()?;
        if shape != e.value.shape() {
            return Err(Error::Checkpoint(format!(
                "tensor {} has shape {shape:?}, expected {:?}",
                e.name,
                e.value.shape()
            )));
        }
        let data = r.f32s(e.value.len(), &e.name)?;
        e.value.data_mut().copy_from_slice(&data);
    }
    state.step = r.u64("step")?;
    state.adam.t = r.u64("optimizer step")?;
    for (m, v) in state.adam.m.iter_mut().zip(state.adam.v.iter_mut()) {
        if let (Some(m), Some(v)) = (m, v) {
            let d = r.f32s(m.len(), "first moment")?;
            m.data_mut().copy_from_slice(&d);
            let d = r.f32s(v.len(), "second moment")?;
            v.data_mut().copy_from_slice(&d);
        }
    }
    if r.pos != bytes.len() {
        return Err(Error::Checkpoint(format!("{} trailing bytes", bytes.len() - r.pos)));
    }
    Ok(state)
}

pub fn save_checkpoint(state: &TrainState, path: &Path) -> Result<(), Error> {
    fs::write(path, encode_checkpoint(state)?).map_err(Error::io(path))
}

pub fn load_checkpoint(path: &Path) -> Result<TrainState, Error> {
    let bytes = fs::read(path).map_err(Error::io(path))?;
    decode_checkpoint(&bytes)
}

/// Parameter ids of one group, in store order.
pub fn group_params(store: &ParamStore, group: ParamGroup) -> Vec<ParamId> {
    store
        .ids()
        .filter(|&id| store.entry(id).group == group && store.entry(id).kind == ParamKind::Trainable)
        .collect()
}

/// Attack-aware counts of a batch, for diagnostics.
pub fn batch_summary(batch: &Batch) -> String {
    let count = |a: Attack| batch.attacks.iter().filter(|&&x| x == a).count();
    format!(
        "{} samples: {} live, {} print, {} replay, {} pairs",
        batch.len(),
        count(Attack::None),
        count(Attack::Print),
        count(Attack::Replay),
        batch.pairs.len()
    )
}

/// A small configuration (16px images, 4px patches, one encoder of each
/// kind) for tests and smoke runs.
pub fn tiny_config(seed: u64) -> TrainConfig {
    TrainConfig {
        seed,
        batch_size: 8,
        model: LdcformerConfig {
            height: 16,
            width: 16,
            patch: 4,
            dim: 8,
            heads: 2,
            n_ldc: 1,
            n_vit: 1,
            mlp_width: 16,
            ..Default::default()
        },
        aux: AuxConfig { stages: vec![4, 8] },
        estimator: EstimatorConfig { width: 4 },
        ..Default::default()
    }
}

/// Two synthetic 16px domains matching [`tiny_config`].
pub fn tiny_samples(n_per_class: usize, seed: u64) -> Vec<Sample> {
    crate::data::synthetic_samples(seed, &["A", "B"], n_per_class, 16, crate::Exec::default())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Attack;

    #[test]
    fn liveness_loss_examples() {
        let mut g = Graph::new();
        let s = g.constant(Tensor::full(&[4], 0.5));
        let y = g.constant(Tensor::new([4], vec![1.0, 0.0, 1.0, 0.0]).unwrap());
        let l = liveness_loss(&mut g, s, y).unwrap();
        assert!((g.value(l).item() - std::f32::consts::LN_2).abs() < 1e-6);
        let s = g.constant(Tensor::new([2], vec![0.9, 0.2]).unwrap());
        let y = g.constant(Tensor::new([2], vec![1.0, 0.0]).unwrap());
        let l = liveness_loss(&mut g, s, y).unwrap();
        assert!((g.value(l).item() - 0.164_252).abs() < 1e-5);
        let s = g.constant(Tensor::new([1], vec![1.0]).unwrap());
        let y1 = g.constant(Tensor::new([1], vec![1.0]).unwrap());
        let l = liveness_loss(&mut g, s, y1).unwrap();
        assert!(g.value(l).item() < 1e-6);
    }

    #[test]
    fn total_loss_weights() {
        let w = TrainConfig::default().weights();
        assert!((w.combine(1.0, 1.0, 1.0, 1.0) - 1.108).abs() < 1e-12);
        assert_eq!(w.combine(0.0, 0.0, 0.0, 0.0), 0.0);
        let zero = TrainConfig::default().liveness_only().weights();
        assert_eq!(zero.combine(0.7, 3.0, 5.0, 9.0), 0.7);
        let mut g = Graph::new();
        let one = g.constant(Tensor::scalar(1.0));
        let t = total_loss(&mut g, one, one, one, one, &w).unwrap();
        assert!((g.value(t).item() - 1.108).abs() < 1e-6);
    }

    #[test]
    fn config_toml_round_trip_and_validation() {
        let c = tiny_config(3);
        assert_eq!(TrainConfig::from_toml(&c.to_toml().unwrap()).unwrap(), c);
        assert!(TrainConfig::from_toml("bogus = 1").is_err());
        assert!(TrainConfig::from_toml("beta = -1.0").is_err());
        assert!(TrainConfig::from_toml("[model]\npatch = 5").is_err());
        let text = TrainConfig::default().to_toml().unwrap();
        assert!(text.contains("beta = 0.004"), "{text}");
        assert_eq!(TrainConfig { epochs: Some(2), ..tiny_config(0) }.total_steps(17), 6);
    }

    #[test]
    fn untrained_model_scores_one_half() {
        let state = TrainState::new(tiny_config(0)).unwrap();
        let samples = tiny_samples(2, 1);
        let imgs = Tensor::stack(&samples.iter().map(|s| s.image.clone()).collect::<Vec<_>>()).unwrap();
        let s = state.scores(&imgs).unwrap();
        assert!(s.iter().all(|&v| v == 0.5));
        assert_eq!(s, state.scores(&imgs).unwrap());
    }

    #[test]
    fn zero_learning_rate_leaves_parameters_unchanged() {
        let samples = tiny_samples(3, 1);
        let idx: Vec<usize> = (0..samples.len()).collect();
        let mut state = TrainState::new(TrainConfig { lr_aux: 0.0, lr_main: 0.0, ..tiny_config(1) }).unwrap();
        let before = state.store.clone();
        fit(&mut state, &samples, &idx, 2, None).unwrap();
        for (a, b) in before.entries().iter().zip(state.store.entries()) {
            if a.kind == ParamKind::Trainable {
                assert_eq!(a.value, b.value, "{}", a.name);
            }
        }
    }

    #[test]
    fn step_builds_mixed_samples_and_all_terms() {
        let samples = tiny_samples(3, 1);
        let idx: Vec<usize> = (0..samples.len()).collect();
        let mut state = TrainState::new(tiny_config(2)).unwrap();
        let log = fit(&mut state, &samples, &idx, 3, None).unwrap();
        assert_eq!(state.step, 3);
        for b in &log {
            assert!(b.n_mixed > 0, "{b:?}");
            assert!(b.dual > 0.0 && b.self_challenging > 0.0 && b.transitional_triplet > 0.0);
            let w = state.config.weights();
            let expect = w.combine(b.liveness, b.dual, b.self_challenging, b.transitional_triplet);
            assert!((b.total - expect).abs() < 1e-5);
        }
        let pool = Pool::new(&samples, &idx).unwrap();
        let batch = state.batch_for(&pool, 0).unwrap();
        assert!(batch_summary(&batch).contains("8 samples"));
        assert!(batch.attacks.contains(&Attack::None));
    }

    #[test]
    fn training_is_deterministic() {
        let samples = tiny_samples(3, 1);
        let idx: Vec<usize> = (0..samples.len()).collect();
        let run = || {
            let mut s = TrainState::new(tiny_config(4)).unwrap();
            let log = fit(&mut s, &samples, &idx, 4, None).unwrap();
            (encode_checkpoint(&s).unwrap(), log)
        };
        let (a, la) = run();
        let (b, lb) = run();
        assert_eq!(la, lb);
        assert!(a == b);
    }

    #[test]
    fn checkpoint_round_trip_is_byte_identical() {
        let samples = tiny_samples(2, 1);
        let idx: Vec<usize> = (0..samples.len()).collect();
        let mut state = TrainState::new(tiny_config(5)).unwrap();
        fit(&mut state, &samples, &idx, 2, None).unwrap();
        let bytes = encode_checkpoint(&state).unwrap();
        let back = decode_checkpoint(&bytes).unwrap();
        assert_eq!(back.step, 2);
        assert_eq!(back.adam, state.adam);
        for (a, b) in state.store.entries().iter().zip(back.store.entries()) {
            assert_eq!(a.value, b.value);
        }
        assert!(encode_checkpoint(&back).unwrap() == bytes);

        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(decode_checkpoint(&bad).unwrap_err().to_string().contains("magic"));
        assert!(decode_checkpoint(&bytes[..bytes.len() - 3]).unwrap_err().to_string().contains("truncated"));
        let mut v2 = bytes.clone();
        v2[4] = 2;
        assert!(decode_checkpoint(&v2).unwrap_err().to_string().contains("version"));
    }

    #[test]
    fn resume_matches_uninterrupted_run() {
        let samples = tiny_samples(3, 1);
        let idx: Vec<usize> = (0..samples.len()).collect();
        let mut full = TrainState::new(tiny_config(6)).unwrap();
        let straight = fit(&mut full, &samples, &idx, 6, None).unwrap();
        let mut half = TrainState::new(tiny_config(6)).unwrap();
        fit(&mut half, &samples, &idx, 3, None).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("mid.ckpt");
        save_checkpoint(&half, &p).unwrap();
        let mut resumed = load_checkpoint(&p).unwrap();
        let rest = fit(&mut resumed, &samples, &idx, 6, None).unwrap();
        for (a, b) in straight[3..].iter().zip(&rest) {
            assert!((a.total - b.total).abs() < 1e-6, "{a:?} vs {b:?}");
        }
        assert!(encode_checkpoint(&resumed).unwrap() == encode_checkpoint(&full).unwrap());
    }

    #[test]
    fn non_finite_input_aborts_step_without_touching_state() {
        let mut samples = tiny_samples(2, 1);
        for s in &mut samples {
            s.image.data_mut()[0] = f32::NAN;
        }
        let idx: Vec<usize> = (0..samples.len()).collect();
        let mut state = TrainState::new(tiny_config(7)).unwrap();
        let before = encode_checkpoint(&state).unwrap();
        let err = fit(&mut state, &samples, &idx, 1, None).unwrap_err();
        assert!(matches!(err, Error::NonFiniteLoss { step: 0, .. }), "{err}");
        assert!(encode_checkpoint(&state).unwrap() == before);
    }

    #[test]
    fn clipping_limits_each_group_separately() {
        let mut store = ParamStore::new();
        let a = store.add("a", Tensor::zeros(&[2]), ParamGroup::Main);
        let b = store.add("b", Tensor::zeros(&[1]), ParamGroup::Aux);
        let mut grads = vec![Some(Tensor::new([2], vec![3.0, 4.0]).unwrap()), Some(Tensor::new([1], vec![0.5]).unwrap())];
        let norms = clip_by_group(&store, &mut grads, 1.0);
        assert_eq!(norms, [5.0, 0.5]);
        let ga = grads[a.index()].as_ref().unwrap();
        assert!((ga.data()[0] - 0.6).abs() < 1e-6 && (ga.data()[1] - 0.8).abs() < 1e-6);
        assert_eq!(grads[b.index()].as_ref().unwrap().data(), &[0.5]);
    }

    #[test]
    fn adam_first_step_moves_by_learning_rate() {
        let mut store = ParamStore::new();
        store.add("w", Tensor::new([2], vec![1.0, -1.0]).unwrap(), ParamGroup::Main);
        let mut adam = Adam::new(&store);
        adam.step(&mut store, &[Some(Tensor::new([2], vec![0.3, -2.0]).unwrap())], |_| 0.1);
        let w = store.entries()[0].value.data();
        assert!((w[0] - 0.9).abs() < 1e-6 && (w[1] + 0.9).abs() < 1e-6, "{w:?}");
    }

    #[test]
    fn liveness_only_ablation_equals_plain_bce_training() {
        let samples = tiny_samples(3, 2);
        let idx: Vec<usize> = (0..samples.len()).collect();
        let config = tiny_config(8).liveness_only();
        let mut state = TrainState::new(config.clone()).unwrap();
        fit(&mut state, &samples, &idx, 3, None).unwrap();

        let mut base = TrainState::new(config).unwrap();
        let pool = Pool::new(&samples, &idx).unwrap();
        for step in 0..3 {
            let batch = base.batch_for(&pool, step).unwrap();
            let mut s = Session::train(&base.store);
            let x = s.constant(batch.images.clone());
            let y = s.constant(Tensor::from_fn(&[batch.len()], |i| batch.labels[i] as f32));
            let out = base.nets.model.forward(&mut s, x).unwrap();
            let loss = s.graph.bce(out.score, y).unwrap();
            let mut all = s.graph.backward(loss).unwrap();
            let mut grads = vec![None; base.store.len()];
            for (id, v) in s.bound_params() {
                grads[id.index()] = all.take(v);
            }
            drop(s);
            clip_by_group(&base.store, &mut grads, base.config.clip_norm);
            let lr = base.config.lr_main as f32;
            base.adam.step(&mut base.store, &grads, |_| lr);
        }
        for (a, b) in state.store.entries().iter().zip(base.store.entries()) {
            if a.name.starts_with("ldcformer.") {
                assert_eq!(a.value, b.value, "{}", a.name);
            }
        }
    }

    #[test]
    fn smoothed_loss_decreases() {
        let samples = tiny_samples(6, 3);
        let idx: Vec<usize> = (0..samples.len()).collect();
        let mut state = TrainState::new(TrainConfig { lr_main: 1e-3, ..tiny_config(9) }).unwrap();
        let log = fit(&mut state, &samples, &idx, 200, None).unwrap();
        let mean = |r: &[LossBreakdown]| r.iter().map(|b| b.total).sum::<f64>() / r.len() as f64;
        let (first, last) = (mean(&log[..20]), mean(&log[180..]));
        assert!(last < first, "first {first} last {last}");
    }

    #[test]
    fn epochs_log_one_json_line_per_step() {
        let samples = tiny_samples(2, 4);
        let idx: Vec<usize> = (0..samples.len()).collect();
        let config = TrainConfig { epochs: Some(1), ..tiny_config(10) };
        let mut state = TrainState::new(config.clone()).unwrap();
        let mut buf = Vec::new();
        let steps = config.total_steps(idx.len());
        fit(&mut state, &samples, &idx, steps, Some(&mut buf)).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text.lines().count() as u64, steps);
        let first: serde_json::Value = serde_json::from_str(text.lines().next().unwrap()).unwrap();
        assert_eq!(first["step"], 0);
        assert!(first["losses"]["liveness"].as_f64().unwrap() > 0.0);
    }
}
