//! Parameterized layers shared by the LDCformer, the auxiliary CAM network
//! and the attention estimators.

use rand::Rng;

use crate::diffcore::{
    kaiming_normal, trunc_normal, BnMode, Graph, ParamGroup, ParamId, ParamStore, Tensor, TensorError, Var,
};

pub const LN_EPS: f32 = 1e-6;
pub const BN_EPS: f32 = 1e-5;
pub const BN_MOMENTUM: f32 = 0.1;

/// Running-statistics update produced by a training-mode batch norm.
#[derive(Clone, Debug)]
pub struct BnUpdate {
    pub mean: ParamId,
    pub var: ParamId,
    pub batch_mean: Vec<f32>,
    pub batch_var: Vec<f32>,
}

impl BnUpdate {
    pub fn apply(&self, store: &mut ParamStore) {
        for (id, batch) in [(self.mean, &self.batch_mean), (self.var, &self.batch_var)] {
            for (r, &b) in store.get_mut(id).data_mut().iter_mut().zip(batch) {
                *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * b;
            }
        }
    }
}

/// A recording bound lazily to a parameter store.
///
/// In training mode parameters enter the graph as gradient-carrying leaves
/// and batch norms use batch statistics. In evaluation mode parameters are
/// constants and batch norms use running statistics.
pub struct Session<'s> {
    pub graph: Graph,
    store: &'s ParamStore,
    bound: Vec<Option<Var>>,
    training: bool,
    bn_updates: Vec<BnUpdate>,
}

impl<'s> Session<'s> {
    pub fn train(store: &'s ParamStore) -> Self {
        Self::with_mode(store, true)
    }

    pub fn eval(store: &'s ParamStore) -> Self {
        Self::with_mode(store, false)
    }

    fn with_mode(store: &'s ParamStore, training: bool) -> Self {
        Self {
            graph: Graph::new(),
            store,
            bound: vec![None; store.len()],
            training,
            bn_updates: Vec::new(),
        }
    }

    /// Continue recording into an existing graph.
    pub fn from_graph(graph: Graph, store: &'s ParamStore, training: bool) -> Self {
        Self {
            graph,
            ..Self::with_mode(store, training)
        }
    }

    pub fn into_graph(self) -> Graph {
        self.graph
    }

    /// Use `v` as the node for parameter `id` instead of binding the stored value.
    pub fn bind_as(&mut self, id: ParamId, v: Var) {
        self.bound[id.index()] = Some(v);
    }

    pub fn with_finite_check(mut self, on: bool) -> Self {
        self.graph = std::mem::take(&mut self.graph).with_finite_check(on);
        self
    }

    pub fn is_training(&self) -> bool {
        self.training
    }

    pub fn store(&self) -> &'s ParamStore {
        self.store
    }

    /// Graph node holding parameter `id`, inserted on first use.
    pub fn p(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.bound[id.index()] {
            return v;
        }
        let v = self.store.bind(&mut self.graph, id, self.training);
        self.bound[id.index()] = Some(v);
        v
    }

    /// Parameters that were used by the recording, with their nodes.
    pub fn bound_params(&self) -> Vec<(ParamId, Var)> {
        self.store
            .ids()
            .filter_map(|id| self.bound[id.index()].map(|v| (id, v)))
            .collect()
    }

    pub fn take_bn_updates(&mut self) -> Vec<BnUpdate> {
        std::mem::take(&mut self.bn_updates)
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.graph.constant(t)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        self.graph.value(v)
    }
}

/// `y = x W + b` over the last axis; `W: [in, out]`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
}

impl Linear {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut impl Rng,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        group: ParamGroup,
    ) -> Self {
        let w = store.add(format!("{name}.w"), trunc_normal(rng, &[fan_in, fan_out], 0.02), group);
        let b = store.add(format!("{name}.b"), Tensor::zeros(&[fan_out]), group);
        Self { w, b }
    }

    /// Linear layer initialized to zero weights and zero bias.
    pub fn zeros(store: &mut ParamStore, name: &str, fan_in: usize, fan_out: usize, group: ParamGroup) -> Self {
        let w = store.add(format!("{name}.w"), Tensor::zeros(&[fan_in, fan_out]), group);
        let b = store.add(format!("{name}.b"), Tensor::zeros(&[fan_out]), group);
        Self { w, b }
    }

    pub fn forward(&self, s: &mut Session, x: Var) -> Result<Var, TensorError> {
        let (w, b) = (s.p(self.w), s.p(self.b));
        let y = s.graph.matmul(x, w)?;
        s.graph.add(y, b)
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize, group: ParamGroup) -> Self {
        let gamma = store.add(format!("{name}.g"), Tensor::ones(&[dim]), group);
        let beta = store.add(format!("{name}.b"), Tensor::zeros(&[dim]), group);
        Self { gamma, beta }
    }

    pub fn forward(&self, s: &mut Session, x: Var) -> Result<Var, TensorError> {
        let (g, b) = (s.p(self.gamma), s.p(self.beta));
        s.graph.layer_norm(x, g, b, LN_EPS)
    }
}

/// Two-layer perceptron with GELU.
#[derive(Clone, Debug)]
pub struct Mlp {
    pub fc1: Linear,
    pub fc2: Linear,
}

impl Mlp {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut impl Rng,
        name: &str,
        dim: usize,
        hidden: usize,
        group: ParamGroup,
    ) -> Self {
        Self {
            fc1: Linear::new(store, rng, &format!("{name}.fc1"), dim, hidden, group),
            fc2: Linear::new(store, rng, &format!("{name}.fc2"), hidden, dim, group),
        }
    }

    pub fn forward(&self, s: &mut Session, x: Var) -> Result<Var, TensorError> {
        let h = self.fc1.forward(s, x)?;
        let h = s.graph.gelu(h)?;
        self.fc2.forward(s, h)
    }
}

/// Multi-head scaled dot-product self-attention with an output projection.
#[derive(Clone, Debug)]
pub struct MultiHeadAttention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub out: Linear,
    pub heads: usize,
}

impl MultiHeadAttention {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut impl Rng,
        name: &str,
        dim: usize,
        heads: usize,
        group: ParamGroup,
    ) -> Self {
        Self {
            q: Linear::new(store, rng, &format!("{name}.q"), dim, dim, group),
            k: Linear::new(store, rng, &format!("{name}.k"), dim, dim, group),
            v: Linear::new(store, rng, &format!("{name}.v"), dim, dim, group),
            out: Linear::new(store, rng, &format!("{name}.out"), dim, dim, group),
            heads,
        }
    }

    /// Attend over `x: [B,N,D]` (or a single sequence `[N,D]`).
    pub fn forward(&self, s: &mut Session, x: Var) -> Result<Var, TensorError> {
        let shape = s.graph.shape(x).to_vec();
        let (b, n, d) = match shape.as_slice() {
            [n, d] => (1, *n, *d),
            [b, n, d] => (*b, *n, *d),
            _ => return Err(crate::diffcore::TensorError::Shape {
                op: "attention",
                detail: format!("expected [B,N,D], got {shape:?}"),
            }),
        };
        if d % self.heads != 0 {
            return Err(TensorError::Shape {
                op: "attention",
                detail: format!("width {d} not divisible by {} heads", self.heads),
            });
        }
        let (h, dh) = (self.heads, d / self.heads);
        let split = |s: &mut Session, t: Var| -> Result<Var, TensorError> {
            let t = s.graph.reshape(t, &[b, n, h, dh])?;
            let t = s.graph.permute(t, &[0, 2, 1, 3])?;
            s.graph.reshape(t, &[b * h, n, dh])
        };
        let q = self.q.forward(s, x)?;
        let q = split(s, q)?;
        let k = self.k.forward(s, x)?;
        let k = split(s, k)?;
        let v = self.v.forward(s, x)?;
        let v = split(s, v)?;
        let kt = s.graph.transpose(k)?;
        let scores = s.graph.matmul(q, kt)?;
        let scores = s.graph.scale(scores, 1.0 / (dh as f32).sqrt())?;
        let att = s.graph.softmax(scores)?;
        let ctx = s.graph.matmul(att, v)?;
        let ctx = s.graph.reshape(ctx, &[b, h, n, dh])?;
        let ctx = s.graph.permute(ctx, &[0, 2, 1, 3])?;
        let ctx = s.graph.reshape(ctx, &shape)?;
        self.out.forward(s, ctx)
    }
}

/// Convolution, batch normalization and ReLU.
#[derive(Clone, Debug)]
pub struct ConvBnRelu {
    pub w: ParamId,
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
    pub stride: usize,
    pub pad: usize,
}

impl ConvBnRelu {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        rng: &mut impl Rng,
        name: &str,
        cin: usize,
        cout: usize,
        kernel: usize,
        stride: usize,
        group: ParamGroup,
    ) -> Self {
        let w = store.add(
            format!("{name}.conv.w"),
            kaiming_normal(rng, &[cout, cin, kernel, kernel], cin * kernel * kernel),
            group,
        );
        let gamma = store.add(format!("{name}.bn.g"), Tensor::ones(&[cout]), group);
        let beta = store.add(format!("{name}.bn.b"), Tensor::zeros(&[cout]), group);
        let running_mean = store.add_buffer(format!("{name}.bn.mean"), Tensor::zeros(&[cout]), group);
        let running_var = store.add_buffer(format!("{name}.bn.var"), Tensor::ones(&[cout]), group);
        Self {
            w,
            gamma,
            beta,
            running_mean,
            running_var,
            stride,
            pad: kernel / 2,
        }
    }

    pub fn forward(&self, s: &mut Session, x: Var) -> Result<Var, TensorError> {
        let w = s.p(self.w);
        let y = s.graph.conv2d(x, w, None, self.stride, self.pad)?;
        let (g, b) = (s.p(self.gamma), s.p(self.beta));
        let mode = if s.is_training() {
            BnMode::Train { eps: BN_EPS }
        } else {
            BnMode::Eval {
                mean: s.store().get(self.running_mean).data().to_vec(),
                var: s.store().get(self.running_var).data().to_vec(),
                eps: BN_EPS,
            }
        };
        let (y, stats) = s.graph.batch_norm(y, g, b, &mode)?;
        if let Some((batch_mean, batch_var)) = stats {
            s.bn_updates.push(BnUpdate {
                mean: self.running_mean,
                var: self.running_var,
                batch_mean,
                batch_var,
            });
        }
        s.graph.relu(y)
    }
}
