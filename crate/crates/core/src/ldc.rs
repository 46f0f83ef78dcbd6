//! Learnable descriptive convolution and LDC feature fusion.
//!
//! An LDC layer convolves with an effective kernel derived from a base
//! kernel `W` and a learnable descriptor `D`. The derivation is a
//! [`Descriptor`] so other formulations can be dropped in without touching
//! callers. With the default Hadamard descriptor the effective kernel is
//! `W ⊙ D`; `D` starts at all ones, so an untrained layer is exactly a
//! vanilla 3×3 convolution.

use rand::Rng;

use crate::diffcore::{kaiming_normal, Graph, ParamGroup, ParamId, ParamStore, Tensor, TensorError, Var};
use crate::model::nn::Session;

pub const LDC_KERNEL: usize = 3;

/// How the effective kernel is derived from `(W, D)`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Descriptor {
    /// Elementwise product `W ⊙ D`.
    #[default]
    Hadamard,
}

impl Descriptor {
    pub fn effective_kernel(self, g: &mut Graph, w: Var, d: Var) -> Result<Var, TensorError> {
        match self {
            Descriptor::Hadamard => g.mul(w, d),
        }
    }
}

/// Shape-preserving 3×3 LDC layer (stride 1, padding 1).
#[derive(Clone, Debug)]
pub struct LdcLayer {
    pub w: ParamId,
    pub d: ParamId,
    pub channels: usize,
    pub descriptor: Descriptor,
}

impl LdcLayer {
    pub fn new(store: &mut ParamStore, rng: &mut impl Rng, name: &str, channels: usize, group: ParamGroup) -> Self {
        let shape = [channels, channels, LDC_KERNEL, LDC_KERNEL];
        let w = store.add(
            format!("{name}.w"),
            kaiming_normal(rng, &shape, channels * LDC_KERNEL * LDC_KERNEL),
            group,
        );
        let d = store.add(format!("{name}.d"), Tensor::ones(&shape), group);
        Self {
            w,
            d,
            channels,
            descriptor: Descriptor::Hadamard,
        }
    }

    /// Apply the layer to `x: [C,P,P]` or `[B,C,P,P]`.
    pub fn forward(&self, s: &mut Session, x: Var) -> Result<Var, TensorError> {
        let (w, d) = (s.p(self.w), s.p(self.d));
        ldc_forward(&mut s.graph, self.descriptor, w, d, x)
    }
}

/// `conv2d(x, effective_kernel(W, D), stride 1, pad 1)`.
pub fn ldc_forward(g: &mut Graph, descriptor: Descriptor, w: Var, d: Var, x: Var) -> Result<Var, TensorError> {
    let ws = g.shape(w).to_vec();
    if ws.len() != 4 || ws[2] != LDC_KERNEL || ws[3] != LDC_KERNEL || ws[0] != ws[1] {
        return Err(TensorError::Shape {
            op: "ldc",
            detail: format!("kernel must be [C,C,3,3], got {ws:?}"),
        });
    }
    let xs = g.shape(x);
    let cin = xs[xs.len().saturating_sub(3)];
    if xs.len() < 3 || cin != ws[1] {
        return Err(TensorError::Shape {
            op: "ldc",
            detail: format!("input {xs:?} does not have {} channels", ws[1]),
        });
    }
    let k = descriptor.effective_kernel(g, w, d)?;
    g.conv2d(x, k, None, 1, 1)
}

/// `z0 + alpha * z_ldc`.
pub fn fuse_features(g: &mut Graph, z0: Var, z_ldc: Var, alpha: f32) -> Result<Var, TensorError> {
    if g.shape(z0) != g.shape(z_ldc) {
        return Err(TensorError::Shape {
            op: "fuse",
            detail: format!("{:?} vs {:?}", g.shape(z0), g.shape(z_ldc)),
        });
    }
    let scaled = g.scale(z_ldc, alpha)?;
    g.add(z0, scaled)
}
