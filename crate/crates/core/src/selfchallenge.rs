//! Self-challenging supervision: attention-guided region swaps between a
//! live and a spoof sample produce hard mixed spoofs whose attention
//! targets are known.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::attention::{dual_attention_loss, AttentionMap, MapSource};
use crate::data::Attack;
use crate::diffcore::{Graph, Tensor, TensorError, Var};
use crate::Error;

/// Random rectangle proposals tried before the exhaustive search.
const RECT_TRIES: usize = 64;
pub const REGION_MIN: f64 = 0.3;
pub const REGION_MAX: f64 = 0.7;
pub const DEFAULT_THRESHOLD: f32 = 0.5;

/// Which sample of a pair keeps its background.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Base {
    Live,
    Spoof,
}

/// Result of splitting the base sample's attention map.
#[derive(Clone, Debug)]
pub struct SplitMaps {
    pub live: AttentionMap,
    pub spoof: AttentionMap,
    /// Fraction of the active pixels inside the chosen rectangle.
    pub region_fraction: f64,
}

/// Inclusive rectangle `(y0, y1, x0, x1)`.
type Rect = (usize, usize, usize, usize);

fn rect_count(prefix: &[usize], w: usize, (y0, y1, x0, x1): Rect) -> usize {
    let at = |y: usize, x: usize| prefix[y * (w + 1) + x];
    at(y1 + 1, x1 + 1) + at(y0, x0) - at(y0, x1 + 1) - at(y1 + 1, x0)
}

/// Pick a rectangle covering 30-70% of the active (`> 0`) pixels.
///
/// Seeded random proposals inside the active bounding box come first; if
/// none lands in range, every rectangle in the box is scanned and the one
/// closest to half is taken. Such a rectangle exists whenever at least two
/// pixels are active.
fn choose_rect(active: &[bool], h: usize, w: usize, rng: &mut ChaCha8Rng) -> (Rect, f64) {
    let mut prefix = vec![0usize; (h + 1) * (w + 1)];
    for y in 0..h {
        for x in 0..w {
            prefix[(y + 1) * (w + 1) + x + 1] =
                prefix[y * (w + 1) + x + 1] + prefix[(y + 1) * (w + 1) + x] - prefix[y * (w + 1) + x]
                    + usize::from(active[y * w + x]);
        }
    }
    let total = prefix[(h + 1) * (w + 1) - 1] as f64;
    let (mut y_lo, mut y_hi, mut x_lo, mut x_hi) = (h, 0, w, 0);
    for y in 0..h {
        for x in 0..w {
            if active[y * w + x] {
                (y_lo, y_hi, x_lo, x_hi) = (y_lo.min(y), y_hi.max(y), x_lo.min(x), x_hi.max(x));
            }
        }
    }
    let frac = |r: Rect| rect_count(&prefix, w, r) as f64 / total;
    for _ in 0..RECT_TRIES {
        let (a, b) = (rng.random_range(y_lo..=y_hi), rng.random_range(y_lo..=y_hi));
        let (c, d) = (rng.random_range(x_lo..=x_hi), rng.random_range(x_lo..=x_hi));
        let r = (a.min(b), a.max(b), c.min(d), c.max(d));
        let f = frac(r);
        if (REGION_MIN..=REGION_MAX).contains(&f) {
            return (r, f);
        }
    }
    let mut best = ((y_lo, y_hi, x_lo, x_hi), 1.0f64);
    for y0 in y_lo..=y_hi {
        for y1 in y0..=y_hi {
            for x0 in x_lo..=x_hi {
                for x1 in x0..=x_hi {
                    let f = frac((y0, y1, x0, x1));
                    if (f - 0.5).abs() < (best.1 - 0.5).abs() {
                        best = ((y0, y1, x0, x1), f);
                    }
                }
            }
        }
    }
    best
}

/// Split `map` by a seeded rectangle into two disjoint maps that sum to it.
///
/// With a live base the rectangle's contents become the spoof part (the
/// region that will receive spoof content); with a spoof base they become
/// the live part. All-zero maps are rejected.
pub fn split_attention(map: &AttentionMap, base: Base, seed: u64) -> Result<SplitMaps, Error> {
    if map.is_zero() {
        return Err(Error::Data("cannot split an all-zero attention map".into()));
    }
    let (h, w) = (map.height(), map.width());
    let vals = map.values().data();
    let active: Vec<bool> = vals.iter().map(|&v| v > 0.0).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let ((y0, y1, x0, x1), region_fraction) = choose_rect(&active, h, w, &mut rng);
    let mut inside = vec![0.0f32; h * w];
    let mut outside = vals.to_vec();
    for y in y0..=y1 {
        for x in x0..=x1 {
            let i = y * w + x;
            inside[i] = vals[i];
            outside[i] = 0.0;
        }
    }
    let mk = |v: Vec<f32>, src| AttentionMap::new(Tensor::new([1, h, w], v).expect("shape"), src);
    let (live, spoof) = match base {
        Base::Live => (mk(outside, MapSource::SplitLive)?, mk(inside, MapSource::SplitSpoof)?),
        Base::Spoof => (mk(inside, MapSource::SplitLive)?, mk(outside, MapSource::SplitSpoof)?),
    };
    Ok(SplitMaps {
        live,
        spoof,
        region_fraction,
    })
}

/// Binary mask `[1,H,W]`.
#[derive(Clone, Debug, PartialEq)]
pub struct BinaryMask {
    values: Tensor,
}

impl BinaryMask {
    pub fn values(&self) -> &Tensor {
        &self.values
    }

    pub fn count(&self) -> usize {
        self.values.data().iter().filter(|&&v| v == 1.0).count()
    }

    pub fn is_empty(&self) -> bool {
        self.count() == 0
    }
}

/// Threshold `map` at `threshold` (`>=` is set) and upsample to `h x w`
/// by nearest neighbour.
pub fn binarize(map: &AttentionMap, threshold: f32, h: usize, w: usize) -> BinaryMask {
    let (mh, mw) = (map.height(), map.width());
    let vals = map.values().data();
    let values = Tensor::from_fn(&[1, h, w], |i| {
        let (y, x) = (i / w, i % w);
        let (sy, sx) = (y * mh / h, x * mw / w);
        if vals[sy * mw + sx] >= threshold {
            1.0
        } else {
            0.0
        }
    });
    BinaryMask { values }
}

/// `x' = x (1 - m) + x̄ m`, broadcasting the mask over channels.
pub fn mix(x: &Tensor, x_bar: &Tensor, mask: &BinaryMask) -> Result<Tensor, Error> {
    let s = x.shape();
    let m = mask.values.shape();
    if s != x_bar.shape() || s.len() != 3 || m[1..] != s[1..] {
        return Err(TensorError::Shape {
            op: "mix",
            detail: format!("{s:?}, {:?} and mask {m:?}", x_bar.shape()),
        }
        .into());
    }
    let plane = s[1] * s[2];
    let md = mask.values.data();
    Ok(Tensor::from_fn(s, |i| {
        let k = md[i % plane];
        x.data()[i] * (1.0 - k) + x_bar.data()[i] * k
    }))
}

/// A self-challenging sample: always labeled spoof.
#[derive(Clone, Debug)]
pub struct MixedSample {
    pub image: Tensor,
    pub live_target: AttentionMap,
    pub spoof_target: AttentionMap,
    /// Attack of the spoof parent.
    pub attack: Attack,
    pub base: Base,
    pub mask: BinaryMask,
}

impl MixedSample {
    pub const LABEL: u8 = 0;
}

/// Everything needed to build one mixed sample from a `(live, spoof)` pair.
#[derive(Clone, Copy, Debug)]
pub struct PairInput<'a> {
    pub live_image: &'a Tensor,
    pub spoof_image: &'a Tensor,
    pub spoof_attack: Attack,
    /// Live-class map of the live sample.
    pub live_map: &'a AttentionMap,
    /// Spoof-class map of the spoof sample.
    pub spoof_map: &'a AttentionMap,
}

/// Build the mixed sample for a pair. The base side is drawn from `seed`.
/// Returns `None` when the base map is all zero or the swap mask is empty.
pub fn challenge_pair(pair: PairInput, seed: u64, threshold: f32) -> Result<Option<MixedSample>, Error> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let base = if rng.random_bool(0.5) { Base::Live } else { Base::Spoof };
    challenge_pair_with_base(pair, base, rng.random(), threshold)
}

pub fn challenge_pair_with_base(
    pair: PairInput,
    base: Base,
    seed: u64,
    threshold: f32,
) -> Result<Option<MixedSample>, Error> {
    let (x, x_bar, map) = match base {
        Base::Live => (pair.live_image, pair.spoof_image, pair.live_map),
        Base::Spoof => (pair.spoof_image, pair.live_image, pair.spoof_map),
    };
    if map.is_zero() {
        return Ok(None);
    }
    let split = split_attention(map, base, seed)?;
    let swapped = match base {
        Base::Live => &split.spoof,
        Base::Spoof => &split.live,
    };
    let (h, w) = (x.shape()[1], x.shape()[2]);
    let mask = binarize(swapped, threshold, h, w);
    if mask.is_empty() {
        return Ok(None);
    }
    Ok(Some(MixedSample {
        image: mix(x, x_bar, &mask)?,
        live_target: split.live,
        spoof_target: split.spoof,
        attack: pair.spoof_attack,
        base,
        mask,
    }))
}

/// `||Â_l - Ā_l'|| + ||Â_s - Ā_s'||` over the mixed samples, batch mean.
pub fn self_challenging_loss(
    g: &mut Graph,
    target_live: Var,
    target_spoof: Var,
    est_live: Var,
    est_spoof: Var,
) -> Result<Var, TensorError> {
    dual_attention_loss(g, target_live, target_spoof, est_live, est_spoof)
}
