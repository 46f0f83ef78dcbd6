use rand::Rng;

use super::graph::{Graph, Var};
use super::tensor::Tensor;

/// Handle to an entry of a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Optimizer group a parameter belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ParamGroup {
    /// LDCformer and the two attention estimators.
    Main,
    /// Auxiliary CAM network.
    Aux,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamKind {
    Trainable,
    /// Non-trainable state such as running normalization statistics.
    Buffer,
}

#[derive(Clone, Debug)]
pub struct ParamEntry {
    pub name: String,
    pub value: Tensor,
    pub group: ParamGroup,
    pub kind: ParamKind,
}

/// Flat, ordered collection of every learnable tensor and buffer.
///
/// Declaration order is the serialization order.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    entries: Vec<ParamEntry>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor, group: ParamGroup) -> ParamId {
        self.push(name.into(), value, group, ParamKind::Trainable)
    }

    pub fn add_buffer(&mut self, name: impl Into<String>, value: Tensor, group: ParamGroup) -> ParamId {
        self.push(name.into(), value, group, ParamKind::Buffer)
    }

    fn push(&mut self, name: String, value: Tensor, group: ParamGroup, kind: ParamKind) -> ParamId {
        debug_assert!(self.find(&name).is_none(), "duplicate parameter name {name}");
        self.entries.push(ParamEntry {
            name,
            value,
            group,
            kind,
        });
        ParamId(self.entries.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.entries[id.0].value
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.entries[id.0].value
    }

    pub fn entry(&self, id: ParamId) -> &ParamEntry {
        &self.entries[id.0]
    }

    pub fn entries(&self) -> &[ParamEntry] {
        &self.entries
    }

    pub fn entries_mut(&mut self) -> &mut [ParamEntry] {
        &mut self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.entries.iter().position(|e| e.name == name).map(ParamId)
    }

    /// Total number of trainable scalars.
    pub fn trainable_count(&self) -> usize {
        self.entries
            .iter()
            .filter(|e| e.kind == ParamKind::Trainable)
            .map(|e| e.value.len())
            .sum()
    }

    /// Insert one entry into `g` as a leaf. Buffers never require grad.
    pub fn bind(&self, g: &mut Graph, id: ParamId, trainable: bool) -> Var {
        let e = &self.entries[id.0];
        g.leaf(e.value.clone(), trainable && e.kind == ParamKind::Trainable)
    }
}

/// Sample from N(0, std^2) truncated at two standard deviations.
pub fn trunc_normal(rng: &mut impl Rng, shape: &[usize], std: f32) -> Tensor {
    Tensor::from_fn(shape, |_| loop {
        let z = standard_normal(rng);
        if z.abs() <= 2.0 {
            break z * std;
        }
    })
}

/// He-style normal initialization for a layer with `fan_in` inputs.
pub fn kaiming_normal(rng: &mut impl Rng, shape: &[usize], fan_in: usize) -> Tensor {
    let std = (2.0 / fan_in as f32).sqrt();
    Tensor::from_fn(shape, |_| standard_normal(rng) * std)
}

pub fn standard_normal(rng: &mut impl Rng) -> f32 {
    // Box-Muller; u1 is kept away from zero so ln stays finite.
    let u1: f64 = rng.random_range(f64::EPSILON..1.0);
    let u2: f64 = rng.random();
    ((-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()) as f32
}
