//! Samples, manifests, PNG I/O, the synthetic multi-domain generator and
//! batch construction.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::io::{BufReader, Cursor};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::diffcore::Tensor;
use crate::{Error, Exec};

pub const GENERATOR_VERSION: u32 = 2;
pub const MANIFEST_NAME: &str = "manifest.tsv";

/// Presentation attack type of a real sample.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Attack {
    None,
    Print,
    Replay,
}

impl Attack {
    pub fn label(self) -> u8 {
        u8::from(self == Attack::None)
    }
}

impl fmt::Display for Attack {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Attack::None => "none",
            Attack::Print => "print",
            Attack::Replay => "replay",
        })
    }
}

impl FromStr for Attack {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self, Error> {
        match s {
            "none" => Ok(Attack::None),
            "print" => Ok(Attack::Print),
            "replay" => Ok(Attack::Replay),
            _ => Err(Error::Data(format!("unknown attack type {s:?}"))),
        }
    }
}

/// A decoded image with its labels. `image` is `[3,H,W]` in `[0,1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub id: String,
    pub image: Tensor,
    pub y: u8,
    pub attack: Attack,
    pub domain: String,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ManifestRecord {
    /// Image path relative to the manifest directory.
    pub path: String,
    pub y: u8,
    pub attack: Attack,
    pub domain: String,
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Manifest {
    pub records: Vec<ManifestRecord>,
    pub seed: Option<u64>,
    pub generator: Option<u32>,
}

impl Manifest {
    pub fn parse(text: &str) -> Result<Self, Error> {
        let mut m = Manifest::default();
        for (no, line) in text.lines().enumerate() {
            let no = no + 1;
            let line = line.trim_end_matches('\r');
            if line.trim().is_empty() {
                continue;
            }
            if let Some(comment) = line.strip_prefix('#') {
                for kv in comment.split_whitespace() {
                    match kv.split_once('=') {
                        Some(("seed", v)) => m.seed = v.parse().ok(),
                        Some(("generator", v)) => m.generator = v.trim_start_matches('v').parse().ok(),
                        _ => {}
                    }
                }
                continue;
            }
            let fields: Vec<&str> = line.split('\t').collect();
            let [path, y, attack, domain] = fields.as_slice() else {
                return Err(Error::Data(format!(
                    "manifest line {no}: expected 4 tab-separated fields, got {}",
                    fields.len()
                )));
            };
            let y: u8 = match *y {
                "0" => 0,
                "1" => 1,
                other => return Err(Error::Data(format!("manifest line {no} ({path}): label {other:?} is not 0 or 1"))),
            };
            let attack: Attack = attack
                .parse()
                .map_err(|e| Error::Data(format!("manifest line {no} ({path}): {e}")))?;
            if attack.label() != y {
                return Err(Error::Data(format!(
                    "manifest line {no} ({path}): label {y} inconsistent with attack {attack}"
                )));
            }
            if path.is_empty() || domain.is_empty() {
                return Err(Error::Data(format!("manifest line {no}: empty path or domain")));
            }
            m.records.push(ManifestRecord {
                path: path.to_string(),
                y,
                attack,
                domain: domain.to_string(),
            });
        }
        Ok(m)
    }

    pub fn render(&self) -> String {
        let mut out = String::new();
        if let Some(g) = self.generator {
            out.push_str(&format!("# generator=v{g}\n"));
        }
        if let Some(s) = self.seed {
            out.push_str(&format!("# seed={s}\n"));
        }
        for r in &self.records {
            out.push_str(&format!("{}\t{}\t{}\t{}\n", r.path, r.y, r.attack, r.domain));
        }
        out
    }

    pub fn read(path: &Path) -> Result<Self, Error> {
        let text = fs::read_to_string(path).map_err(Error::io(path))?;
        Self::parse(&text)
    }

    pub fn write(&self, path: &Path) -> Result<(), Error> {
        fs::write(path, self.render()).map_err(Error::io(path))
    }
}

/// `[3,H,W]` tensor in `[0,1]` to interleaved 8-bit RGB.
pub fn tensor_to_rgb8(t: &Tensor) -> Result<Vec<u8>, Error> {
    let s = t.shape();
    if s.len() != 3 || s[0] != 3 {
        return Err(Error::Usage(format!("expected a [3,H,W] image, got {s:?}")));
    }
    let plane = s[1] * s[2];
    let d = t.data();
    Ok((0..plane * 3)
        .map(|i| {
            let (p, c) = (i / 3, i % 3);
            (d[c * plane + p].clamp(0.0, 1.0) * 255.0).round() as u8
        })
        .collect())
}

pub fn rgb8_to_tensor(bytes: &[u8], h: usize, w: usize) -> Tensor {
    let plane = h * w;
    Tensor::from_fn(&[3, h, w], |i| {
        let (c, p) = (i / plane, i % plane);
        bytes[p * 3 + c] as f32 / 255.0
    })
}

pub fn encode_png(t: &Tensor) -> Result<Vec<u8>, Error> {
    let rgb = tensor_to_rgb8(t)?;
    encode_raw(&rgb, t.shape()[2], t.shape()[1], png::ColorType::Rgb)
}

fn encode_raw(pixels: &[u8], w: usize, h: usize, color: png::ColorType) -> Result<Vec<u8>, Error> {
    let mut out = Vec::new();
    let mut enc = png::Encoder::new(&mut out, w as u32, h as u32);
    enc.set_color(color);
    enc.set_depth(png::BitDepth::Eight);
    let detail = |e: png::EncodingError| Error::Data(format!("png encoding failed: {e}"));
    let mut writer = enc.write_header().map_err(detail)?;
    writer.write_image_data(pixels).map_err(detail)?;
    writer.finish().map_err(detail)?;
    Ok(out)
}

fn write_bytes(path: &Path, bytes: &[u8]) -> Result<(), Error> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(Error::io(dir))?;
    }
    fs::write(path, bytes).map_err(Error::io(path))
}

pub fn write_png(path: &Path, t: &Tensor) -> Result<(), Error> {
    write_bytes(path, &encode_png(t)?)
}

/// 8-bit grayscale PNG of a map in `[0,1]`, shaped `[H,W]` or `[1,H,W]`.
pub fn encode_gray_png(map: &Tensor) -> Result<Vec<u8>, Error> {
    let (h, w) = match map.shape() {
        [h, w] | [1, h, w] => (*h, *w),
        s => return Err(Error::Usage(format!("expected a [H,W] map, got {s:?}"))),
    };
    let px: Vec<u8> = map.data().iter().map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8).collect();
    encode_raw(&px, w, h, png::ColorType::Grayscale)
}

pub fn write_gray_png(path: &Path, map: &Tensor) -> Result<(), Error> {
    write_bytes(path, &encode_gray_png(map)?)
}

/// Decode an 8-bit RGB PNG into a `[3,H,W]` tensor.
pub fn decode_png(bytes: &[u8], name: &Path) -> Result<Tensor, Error> {
    let bad = |detail: String| Error::Image {
        path: name.to_path_buf(),
        detail,
    };
    let reader = png::Decoder::new(BufReader::new(Cursor::new(bytes)));
    let mut reader = reader.read_info().map_err(|e| bad(e.to_string()))?;
    let (color, depth) = reader.output_color_type();
    if color != png::ColorType::Rgb || depth != png::BitDepth::Eight {
        return Err(bad(format!("expected 8-bit RGB, got {color:?} at {depth:?}")));
    }
    let size = reader
        .output_buffer_size()
        .ok_or_else(|| bad("image too large".into()))?;
    let mut buf = vec![0u8; size];
    let info = reader.next_frame(&mut buf).map_err(|e| bad(e.to_string()))?;
    let (h, w) = (info.height as usize, info.width as usize);
    Ok(rgb8_to_tensor(&buf[..h * w * 3], h, w))
}

pub fn read_png(path: &Path) -> Result<Tensor, Error> {
    let bytes = fs::read(path).map_err(Error::io(path))?;
    decode_png(&bytes, path)
}

/// Load every record of a manifest; image paths resolve against the
/// manifest's directory.
pub fn load_dataset(manifest_path: &Path, exec: Exec) -> Result<Vec<Sample>, Error> {
    let manifest = Manifest::read(manifest_path)?;
    let root = manifest_path.parent().unwrap_or(Path::new(".")).to_path_buf();
    load_records(&root, &manifest.records, exec)
}

pub fn load_records(root: &Path, records: &[ManifestRecord], exec: Exec) -> Result<Vec<Sample>, Error> {
    let samples: Vec<Result<Sample, Error>> = exec.map(records, |r| {
        let path = root.join(&r.path);
        let image = read_png(&path).map_err(|e| match e {
            Error::Io { source, .. } => Error::Data(format!("record {}: cannot read image: {source}", r.path)),
            Error::Image { detail, .. } => Error::Data(format!("record {}: {detail}", r.path)),
            other => other,
        })?;
        Ok(Sample {
            id: r.path.clone(),
            image,
            y: r.y,
            attack: r.attack,
            domain: r.domain.clone(),
        })
    });
    let samples = samples.into_iter().collect::<Result<Vec<_>, _>>()?;
    if let Some(first) = samples.first() {
        if let Some(odd) = samples.iter().find(|s| s.image.shape() != first.image.shape()) {
            return Err(Error::Data(format!(
                "record {}: size {:?} differs from {:?}",
                odd.id,
                odd.image.shape(),
                first.image.shape()
            )));
        }
    }
    Ok(samples)
}

/// Deterministic 64-bit seed from a list of parts.
pub fn derive_seed(parts: &[u64]) -> u64 {
    // splitmix64 finalizer over a running state
    parts.iter().fold(0x9E37_79B9_7F4A_7C15u64, |acc, &p| {
        let mut z = acc ^ p.wrapping_add(0x9E37_79B9_7F4A_7C15).wrapping_add(acc << 6);
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^ (z >> 31)
    })
}

pub fn hash_str(s: &str) -> u64 {
    s.bytes()
        .fold(0xcbf2_9ce4_8422_2325u64, |h, b| (h ^ b as u64).wrapping_mul(0x0100_0000_01b3))
}

/// Per-domain capture conditions of the synthetic generator.
#[derive(Clone, Debug)]
struct DomainStyle {
    gain: [f32; 3],
    offset: [f32; 3],
    contrast: f32,
    background: [f32; 3],
    texture_gain: f32,
}

impl DomainStyle {
    fn new(seed: u64, domain: &str) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(&[seed, hash_str(domain), 1]));
        let mut tri = |lo: f32, hi: f32| -> [f32; 3] { std::array::from_fn(|_| rng.random_range(lo..hi)) };
        let gain = tri(0.6, 1.15);
        let offset = tri(-0.08, 0.12);
        let background = tri(0.1, 0.6);
        Self {
            gain,
            offset,
            background,
            contrast: rng.random_range(0.75..1.2),
            texture_gain: rng.random_range(0.8..1.2),
        }
    }

    fn apply(&self, c: usize, v: f32) -> f32 {
        let v = (v - 0.5) * self.contrast + 0.5;
        (v * self.gain[c] + self.offset[c]).clamp(0.0, 1.0)
    }
}

/// Per-sample face geometry and pixel noise, shared by a live sample and
/// any spoof rendered from the same base.
struct FaceBase {
    center: (f32, f32),
    radius: (f32, f32),
    skin: [f32; 3],
    background: [f32; 3],
    tilt: f32,
    noise: Vec<f32>,
}

impl FaceBase {
    fn new(rng: &mut ChaCha8Rng, style: &DomainStyle, h: usize, w: usize) -> Self {
        let (hf, wf) = (h as f32, w as f32);
        let rx = rng.random_range(0.24..0.32) * wf;
        let r = rng.random_range(0.65..0.88);
        let skin = [r, r * rng.random_range(0.68..0.8), r * rng.random_range(0.55..0.7)];
        let background = std::array::from_fn(|c| (style.background[c] + rng.random_range(-0.08..0.08)).clamp(0.0, 1.0));
        Self {
            center: (rng.random_range(0.42..0.58) * wf, rng.random_range(0.42..0.58) * hf),
            radius: (rx, rx * rng.random_range(1.15..1.35)),
            skin,
            background,
            tilt: rng.random_range(-0.3..0.3),
            noise: (0..3 * h * w).map(|_| rng.random_range(-0.03..0.03)).collect(),
        }
    }

    fn pixel(&self, c: usize, x: f32, y: f32, h: f32) -> f32 {
        let (cx, cy) = self.center;
        let (rx, ry) = self.radius;
        let (dx, dy) = ((x - cx) / rx, (y - cy) / ry);
        let d = (dx * dx + dy * dy).sqrt();
        let mask = ((1.0 - d) * 4.0).clamp(0.0, 1.0);
        let bg = self.background[c] * (0.85 + 0.3 * (y / h + self.tilt * 0.2));
        let gauss = |gx: f32, gy: f32, sx: f32, sy: f32| (-((x - gx).powi(2) / (sx * sx) + (y - gy).powi(2) / (sy * sy))).exp();
        let eyes = gauss(cx - 0.4 * rx, cy - 0.25 * ry, 0.12 * rx, 0.08 * ry)
            + gauss(cx + 0.4 * rx, cy - 0.25 * ry, 0.12 * rx, 0.08 * ry);
        let mouth = gauss(cx, cy + 0.45 * ry, 0.35 * rx, 0.08 * ry);
        let face = self.skin[c] * (1.0 - 0.25 * d * d) * (1.0 - 0.55 * eyes - 0.35 * mouth);
        mask * face + (1.0 - mask) * bg
    }
}

/// Kind of synthetic sample to render.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SynthKind {
    Live,
    Print,
    Replay,
}

impl SynthKind {
    pub fn attack(self) -> Attack {
        match self {
            SynthKind::Live => Attack::None,
            SynthKind::Print => Attack::Print,
            SynthKind::Replay => Attack::Replay,
        }
    }
}

/// Render synthetic sample `index` of `domain` as `[3,h,w]`, quantized to
/// 8 bits. The face base depends only on `(seed, domain, index)`; `kind`
/// selects the capture medium.
///
/// Print attacks add an oriented high-frequency stripe pattern. Replay
/// attacks add a moiré grid and a one-pixel red channel shift.
pub fn render_synthetic(seed: u64, domain: &str, index: u64, kind: SynthKind, h: usize, w: usize) -> Tensor {
    let style = DomainStyle::new(seed, domain);
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(&[seed, hash_str(domain), 2, index]));
    let base = FaceBase::new(&mut rng, &style, h, w);
    let mut trng = ChaCha8Rng::seed_from_u64(derive_seed(&[seed, hash_str(domain), 3, index]));
    let amp = style.texture_gain * trng.random_range(0.06..0.11);
    let theta: f32 = trng.random_range(0.0..std::f32::consts::PI);
    let (p1, p2): (f32, f32) = (trng.random_range(2.5..4.5), trng.random_range(2.5..4.5));
    let phase: f32 = trng.random_range(0.0..std::f32::consts::TAU);
    let tau = std::f32::consts::TAU;
    let plane = h * w;
    let mut px = vec![0.0f32; 3 * plane];
    for y in 0..h {
        for x in 0..w {
            let mut rgb = [0.0f32; 3];
            for (c, v) in rgb.iter_mut().enumerate() {
                // Replay screens shift the red channel by one pixel.
                let sx = if kind == SynthKind::Replay && c == 0 { x.saturating_sub(1) } else { x };
                *v = base.pixel(c, sx as f32 + 0.5, y as f32 + 0.5, h as f32);
            }
            let (xf, yf) = (x as f32, y as f32);
            match kind {
                SynthKind::Live => {}
                SynthKind::Print => {
                    let u = xf * theta.cos() + yf * theta.sin();
                    let stripe = amp * (tau * u / p1 + phase).sin();
                    for v in &mut rgb {
                        *v += stripe;
                    }
                }
                SynthKind::Replay => {
                    let (u, v2) = (
                        xf * theta.cos() + yf * theta.sin(),
                        -xf * theta.sin() + yf * theta.cos(),
                    );
                    let moire = amp * (tau * u / p1 + phase).sin() * (tau * v2 / p2).sin() * 1.6;
                    for v in &mut rgb {
                        *v += moire;
                    }
                }
            }
            for (c, v) in rgb.iter().enumerate() {
                let i = c * plane + y * w + x;
                px[i] = style.apply(c, v + base.noise[i]);
            }
        }
    }
    Tensor::from_fn(&[3, h, w], |i| (px[i] * 255.0).round() / 255.0)
}

/// Write `n_per_class` live and `n_per_class` spoof images of one domain
/// under `out_dir/domain/` and return their manifest records. Spoofs
/// alternate between print and replay.
pub fn gen_synthetic_domain(
    out_dir: &Path,
    seed: u64,
    domain: &str,
    n_per_class: usize,
    size: usize,
    exec: Exec,
) -> Result<Vec<ManifestRecord>, Error> {
    if domain.is_empty() || domain.contains(['\t', '\n', '/', '\\']) {
        return Err(Error::Usage(format!("invalid domain name {domain:?}")));
    }
    if size < 8 {
        return Err(Error::Usage(format!("image size {size} too small")));
    }
    let dir = out_dir.join(domain);
    fs::create_dir_all(&dir).map_err(Error::io(&dir))?;
    let written = exec.map(&synthetic_jobs(n_per_class), |&(i, kind)| -> Result<ManifestRecord, Error> {
        let (name, img) = synthetic_image(seed, domain, n_per_class, i, kind, size);
        write_png(&dir.join(&name), &img)?;
        let attack = kind.attack();
        Ok(ManifestRecord {
            path: format!("{domain}/{name}"),
            y: attack.label(),
            attack,
            domain: domain.to_string(),
        })
    });
    written.into_iter().collect()
}

/// Live images first, then spoofs alternating print and replay.
fn synthetic_jobs(n_per_class: usize) -> Vec<(usize, SynthKind)> {
    (0..n_per_class)
        .map(|i| (i, SynthKind::Live))
        .chain((0..n_per_class).map(|i| (i, if i % 2 == 0 { SynthKind::Print } else { SynthKind::Replay })))
        .collect()
}

fn synthetic_image(seed: u64, domain: &str, n_per_class: usize, i: usize, kind: SynthKind, size: usize) -> (String, Tensor) {
    let index = if kind == SynthKind::Live { i } else { n_per_class + i } as u64;
    let prefix = match kind {
        SynthKind::Live => "live".to_string(),
        _ => kind.attack().to_string(),
    };
    (format!("{prefix}_{i:04}.png"), render_synthetic(seed, domain, index, kind, size, size))
}

/// The samples `gen_synthetic` would write, without touching disk.
/// Pixels are quantized to 8 bits exactly as a PNG round trip would.
pub fn synthetic_samples(seed: u64, domains: &[&str], n_per_class: usize, size: usize, exec: Exec) -> Vec<Sample> {
    let jobs: Vec<(&str, usize, SynthKind)> = domains
        .iter()
        .flat_map(|&d| synthetic_jobs(n_per_class).into_iter().map(move |(i, k)| (d, i, k)))
        .collect();
    exec.map(&jobs, |&(domain, i, kind)| {
        let (name, img) = synthetic_image(seed, domain, n_per_class, i, kind, size);
        let bytes = tensor_to_rgb8(&img).expect("rendered images are [3,H,W]");
        let attack = kind.attack();
        Sample {
            id: format!("{domain}/{name}"),
            image: rgb8_to_tensor(&bytes, size, size),
            y: attack.label(),
            attack,
            domain: domain.to_string(),
        }
    })
}

/// Generate several domains and write `manifest.tsv` in `out_dir`.
pub fn gen_synthetic(
    out_dir: &Path,
    seed: u64,
    domains: &[String],
    n_per_class: usize,
    size: usize,
    exec: Exec,
) -> Result<Manifest, Error> {
    if domains.is_empty() {
        return Err(Error::Usage("at least one domain is required".into()));
    }
    let mut records = Vec::new();
    for d in domains {
        records.extend(gen_synthetic_domain(out_dir, seed, d, n_per_class, size, exec)?);
    }
    let manifest = Manifest {
        records,
        seed: Some(seed),
        generator: Some(GENERATOR_VERSION),
    };
    manifest.write(&out_dir.join(MANIFEST_NAME))?;
    Ok(manifest)
}

/// A training batch. `pairs` index into the batch: `(live, spoof)`.
#[derive(Clone, Debug)]
pub struct Batch {
    pub indices: Vec<usize>,
    pub images: Tensor,
    pub labels: Vec<u8>,
    pub attacks: Vec<Attack>,
    pub domains: Vec<String>,
    pub pairs: Vec<(usize, usize)>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }
}

/// Training pool grouped by `(domain, label)` for balanced sampling.
#[derive(Clone, Debug)]
pub struct Pool<'a> {
    samples: &'a [Sample],
    groups: Vec<Vec<usize>>,
}

impl<'a> Pool<'a> {
    pub fn new(samples: &'a [Sample], indices: &[usize]) -> Result<Self, Error> {
        if indices.is_empty() {
            return Err(Error::Data("training pool is empty".into()));
        }
        let mut groups: BTreeMap<(&str, u8), Vec<usize>> = BTreeMap::new();
        for &i in indices {
            let s = samples
                .get(i)
                .ok_or_else(|| Error::Data(format!("pool index {i} out of range")))?;
            groups.entry((s.domain.as_str(), s.y)).or_default().push(i);
        }
        Ok(Self {
            samples,
            groups: groups.into_values().collect(),
        })
    }

    pub fn len(&self) -> usize {
        self.groups.iter().map(Vec::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Draw a batch balanced across domains and classes as far as group
    /// sizes allow, then pair live with spoof samples at random.
    pub fn batch(&self, batch_size: usize, seed: u64) -> Result<Batch, Error> {
        if batch_size < 2 {
            return Err(Error::Config(format!("batch size {batch_size} must be at least 2")));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let want = batch_size.min(self.len());
        let mut quota = vec![0usize; self.groups.len()];
        let mut left = want;
        // Round-robin fill keeps groups balanced and skips exhausted ones.
        while left > 0 {
            let mut progressed = false;
            for (q, g) in quota.iter_mut().zip(&self.groups) {
                if left > 0 && *q < g.len() {
                    *q += 1;
                    left -= 1;
                    progressed = true;
                }
            }
            if !progressed {
                break;
            }
        }
        let mut indices = Vec::with_capacity(want);
        for (g, &q) in self.groups.iter().zip(&quota) {
            indices.extend(g.choose_multiple(&mut rng, q).copied());
        }
        indices.shuffle(&mut rng);
        let picked: Vec<&Sample> = indices.iter().map(|&i| &self.samples[i]).collect();
        let images = Tensor::stack(&picked.iter().map(|s| s.image.clone()).collect::<Vec<_>>())?;
        let labels: Vec<u8> = picked.iter().map(|s| s.y).collect();
        let mut live: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == 1).collect();
        let mut spoof: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == 0).collect();
        if live.is_empty() || spoof.is_empty() {
            log::warn!("batch holds a single class; no self-challenging pairs");
        }
        live.shuffle(&mut rng);
        spoof.shuffle(&mut rng);
        let pairs = live.into_iter().zip(spoof).collect();
        Ok(Batch {
            attacks: picked.iter().map(|s| s.attack).collect(),
            domains: picked.iter().map(|s| s.domain.clone()).collect(),
            indices,
            images,
            labels,
            pairs,
        })
    }
}

/// Indices of a deterministic train/test split, stratified by domain and label.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Split {
    pub train: Vec<usize>,
    pub test: Vec<usize>,
}

/// Hold out `test_fraction` of every `(domain, label)` group. Selection is
/// driven by `seed` only and does not depend on sample order within a group.
pub fn split_intra(samples: &[Sample], domains: &[String], test_fraction: f64, seed: u64) -> Result<Split, Error> {
    if !(0.0..1.0).contains(&test_fraction) {
        return Err(Error::Config(format!("test fraction {test_fraction} must lie in [0,1)")));
    }
    let mut groups: BTreeMap<(&str, u8), Vec<usize>> = BTreeMap::new();
    for (i, s) in samples.iter().enumerate() {
        if domains.iter().any(|d| *d == s.domain) {
            groups.entry((s.domain.as_str(), s.y)).or_default().push(i);
        }
    }
    let mut split = Split {
        train: Vec::new(),
        test: Vec::new(),
    };
    for ((domain, y), mut idx) in groups {
        idx.sort_by_key(|&i| (derive_seed(&[seed, hash_str(domain), y as u64, hash_str(&samples[i].id)]), i));
        let n_test = (idx.len() as f64 * test_fraction).round() as usize;
        split.test.extend_from_slice(&idx[..n_test]);
        split.train.extend_from_slice(&idx[n_test..]);
    }
    split.train.sort_unstable();
    split.test.sort_unstable();
    Ok(split)
}

/// One leave-one-domain-out fold.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Fold {
    pub held_out: String,
    pub train: Vec<usize>,
    pub test: Vec<usize>,
}

pub fn domains_of(samples: &[Sample]) -> Vec<String> {
    let mut d: Vec<String> = samples.iter().map(|s| s.domain.clone()).collect();
    d.sort();
    d.dedup();
    d
}

pub fn lodo_folds(samples: &[Sample]) -> Vec<Fold> {
    domains_of(samples)
        .into_iter()
        .map(|held_out| {
            let (test, train): (Vec<usize>, Vec<usize>) =
                (0..samples.len()).partition(|&i| samples[i].domain == held_out);
            Fold { held_out, train, test }
        })
        .collect()
}

pub fn indices_of_domains(samples: &[Sample], domains: &[String]) -> Vec<usize> {
    (0..samples.len())
        .filter(|&i| domains.iter().any(|d| *d == samples[i].domain))
        .collect()
}

/// Resolve `path` against `base` unless absolute.
pub fn resolve(base: &Path, path: &Path) -> PathBuf {
    if path.is_absolute() {
        path.to_path_buf()
    } else {
        base.join(path)
    }
}
