//! Dataset ingestion, synthetic task generation, spike encoding, and noise
//! injection.
//!
//! Everything randomized is a pure function of `(seed, index)` under the
//! documented SplitMix64 generator, so datasets and encodings reproduce
//! byte-for-byte across runs.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::rng::SplitMix64;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub fn name(&self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }
}

#[derive(Debug, Clone)]
pub struct Dataset {
    pub samples: Vec<Tensor>,
    pub labels: Vec<usize>,
    pub classes: usize,
    pub split: Split,
    /// Samples already carry a leading time axis (e.g. pulse-order tasks);
    /// the encoder passes them through instead of replicating.
    pub temporal: bool,
    /// Valid feature range, used by salt-and-pepper noise and clamping.
    pub value_range: (f64, f64),
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn feature_dims(&self) -> Vec<usize> {
        let dims = self.samples[0].dims();
        if self.temporal {
            dims[1..].to_vec()
        } else {
            dims.to_vec()
        }
    }
}

// ---- IDX binary format ----

const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

fn read_u32_be(buf: &[u8], at: usize, what: &str) -> Result<u32> {
    let bytes: [u8; 4] = buf
        .get(at..at + 4)
        .ok_or_else(|| Error::Format(format!("{what}: truncated header")))?
        .try_into()
        .expect("slice of length 4");
    Ok(u32::from_be_bytes(bytes))
}

/// Load an IDX image/label pair. Pixels are scaled to [0, 1]; samples come
/// out as `[1, rows, cols]` single-channel images.
pub fn load_idx(images_path: &Path, labels_path: &Path) -> Result<Dataset> {
    let img = fs::read(images_path)?;
    let lab = fs::read(labels_path)?;

    let magic = read_u32_be(&img, 0, "images")?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(Error::Format(format!(
            "images file has magic {magic:#010x}, want {IDX_IMAGES_MAGIC:#010x}"
        )));
    }
    let magic = read_u32_be(&lab, 0, "labels")?;
    if magic != IDX_LABELS_MAGIC {
        return Err(Error::Format(format!(
            "labels file has magic {magic:#010x}, want {IDX_LABELS_MAGIC:#010x}"
        )));
    }
    let n_img = read_u32_be(&img, 4, "images")? as usize;
    let rows = read_u32_be(&img, 8, "images")? as usize;
    let cols = read_u32_be(&img, 12, "images")? as usize;
    let n_lab = read_u32_be(&lab, 4, "labels")? as usize;
    if n_img != n_lab {
        return Err(Error::Format(format!(
            "count mismatch: {n_img} images vs {n_lab} labels"
        )));
    }
    let pixel_bytes = n_img * rows * cols;
    if img.len() < 16 + pixel_bytes {
        return Err(Error::Format(format!(
            "images payload truncated: have {} bytes, want {}",
            img.len() - 16,
            pixel_bytes
        )));
    }
    if lab.len() < 8 + n_lab {
        return Err(Error::Format(format!(
            "labels payload truncated: have {} bytes, want {n_lab}",
            lab.len() - 8
        )));
    }
    let mut samples = Vec::with_capacity(n_img);
    for i in 0..n_img {
        let at = 16 + i * rows * cols;
        let values: Vec<f64> = img[at..at + rows * cols]
            .iter()
            .map(|&b| b as f64 / 255.0)
            .collect();
        samples.push(Tensor::from_vec(&[1, rows, cols], values)?);
    }
    let labels: Vec<usize> = lab[8..8 + n_lab].iter().map(|&b| b as usize).collect();
    let classes = labels.iter().copied().max().unwrap_or(0) + 1;
    Ok(Dataset {
        samples,
        labels,
        classes,
        split: Split::Train,
        temporal: false,
        value_range: (0.0, 1.0),
    })
}

/// Write `[1, rows, cols]` samples as an IDX image/label pair (values in
/// [0, 1] quantized to bytes). Used to materialize fixture corpora.
pub fn write_idx(images_path: &Path, labels_path: &Path, ds: &Dataset) -> Result<()> {
    let dims = ds.samples[0].dims();
    if dims.len() != 3 || dims[0] != 1 {
        return Err(Error::Shape(format!(
            "write_idx wants [1, rows, cols] samples, got {dims:?}"
        )));
    }
    let (rows, cols) = (dims[1], dims[2]);
    let mut img = Vec::with_capacity(16 + ds.len() * rows * cols);
    img.extend_from_slice(&IDX_IMAGES_MAGIC.to_be_bytes());
    img.extend_from_slice(&(ds.len() as u32).to_be_bytes());
    img.extend_from_slice(&(rows as u32).to_be_bytes());
    img.extend_from_slice(&(cols as u32).to_be_bytes());
    for s in &ds.samples {
        img.extend(s.values().iter().map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8));
    }
    let mut lab = Vec::with_capacity(8 + ds.len());
    lab.extend_from_slice(&IDX_LABELS_MAGIC.to_be_bytes());
    lab.extend_from_slice(&(ds.len() as u32).to_be_bytes());
    lab.extend(ds.labels.iter().map(|&l| l as u8));
    fs::write(images_path, img)?;
    fs::write(labels_path, lab)?;
    Ok(())
}

// ---- CSV dataset format ----

/// Load a CSV dataset: one header row, then feature columns followed by an
/// integer label column. Samples come out as flat `[features]` vectors.
pub fn load_csv(path: &Path) -> Result<Dataset> {
    let text = fs::read_to_string(path)?;
    let mut lines = text.lines().enumerate();
    let (_, header) = lines
        .next()
        .ok_or_else(|| Error::Format(format!("{}: empty file", path.display())))?;
    let columns = header.split(',').count();
    if columns < 2 {
        return Err(Error::Format(format!(
            "{}: need at least one feature column and a label column",
            path.display()
        )));
    }
    let mut samples = Vec::new();
    let mut labels = Vec::new();
    for (lineno, line) in lines {
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != columns {
            return Err(Error::Format(format!(
                "{}:{}: {} fields, header has {columns}",
                path.display(),
                lineno + 1,
                fields.len()
            )));
        }
        let mut values = Vec::with_capacity(columns - 1);
        for f in &fields[..columns - 1] {
            values.push(f.trim().parse::<f64>().map_err(|_| {
                Error::Format(format!("{}:{}: bad feature '{f}'", path.display(), lineno + 1))
            })?);
        }
        let label: usize = fields[columns - 1].trim().parse().map_err(|_| {
            Error::Format(format!(
                "{}:{}: bad label '{}'",
                path.display(),
                lineno + 1,
                fields[columns - 1]
            ))
        })?;
        samples.push(Tensor::from_vec(&[columns - 1], values)?);
        labels.push(label);
    }
    if samples.is_empty() {
        return Err(Error::Format(format!("{}: no data rows", path.display())));
    }
    let classes = labels.iter().copied().max().unwrap_or(0) + 1;
    Ok(Dataset {
        samples,
        labels,
        classes,
        split: Split::Train,
        temporal: false,
        value_range: (f64::NEG_INFINITY, f64::INFINITY),
    })
}

/// Write flat-vector samples in the CSV dataset format.
pub fn write_csv(path: &Path, ds: &Dataset) -> Result<()> {
    let dims = ds.samples[0].dims();
    if dims.len() != 1 {
        return Err(Error::Shape(format!(
            "write_csv wants flat [features] samples, got {dims:?}"
        )));
    }
    let mut out = String::new();
    for i in 0..dims[0] {
        out.push_str(&format!("f{i},"));
    }
    out.push_str("label\n");
    for (s, &l) in ds.samples.iter().zip(&ds.labels) {
        for v in s.values() {
            out.push_str(&format!("{v:?},"));
        }
        out.push_str(&format!("{l}\n"));
    }
    fs::write(path, out)?;
    Ok(())
}

// ---- synthetic tasks ----

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SynthKind {
    /// Isotropic Gaussian clusters with configurable center separation.
    Gaussians,
    /// Two interleaving half-circles with Gaussian jitter.
    TwoMoons,
    /// Two channels pulse in either order across T steps; the label is the
    /// order. Carries no information at T = 1 by construction.
    TemporalXor,
    /// Procedurally drawn 28x28 seven-segment digits with jitter and noise.
    Digits,
}

impl SynthKind {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "gaussians" => Ok(Self::Gaussians),
            "two_moons" => Ok(Self::TwoMoons),
            "temporal_xor" => Ok(Self::TemporalXor),
            "digits" => Ok(Self::Digits),
            other => Err(Error::Config(format!(
                "unknown synthetic dataset '{other}' \
                 (expected gaussians | two_moons | temporal_xor | digits)"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct SynthSpec {
    pub kind: SynthKind,
    /// Total samples for the split, balanced across classes.
    pub n: usize,
    pub seed: u64,
    pub classes: usize,
    /// Cluster center separation in sigma units (gaussians).
    pub separation: f64,
    /// Feature dimension (gaussians).
    pub dim: usize,
    /// Time steps for temporal tasks.
    pub steps: usize,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            kind: SynthKind::Gaussians,
            n: 400,
            seed: 1,
            classes: 2,
            separation: 6.0,
            dim: 2,
            steps: 4,
        }
    }
}

/// Deterministic synthetic dataset; train and test draw from disjoint
/// child streams of the same seed.
pub fn synth_dataset(spec: &SynthSpec, split: Split) -> Result<Dataset> {
    if spec.classes < 2 {
        return Err(Error::Config("synthetic datasets need at least 2 classes".into()));
    }
    if spec.n < 10 * spec.classes {
        return Err(Error::Config(format!(
            "need at least 10 samples per class, got {} for {} classes",
            spec.n, spec.classes
        )));
    }
    let rng = SplitMix64::new(spec.seed).split_labeled(split.name());
    match spec.kind {
        SynthKind::Gaussians => gaussians(spec, split, rng),
        SynthKind::TwoMoons => two_moons(spec, split, rng),
        SynthKind::TemporalXor => temporal_xor(spec, split, rng),
        SynthKind::Digits => digits(spec, split, rng),
    }
}

fn balanced_labels(n: usize, classes: usize, rng: &mut SplitMix64) -> Vec<usize> {
    let mut labels: Vec<usize> = (0..n).map(|i| i % classes).collect();
    rng.shuffle(&mut labels);
    labels
}

fn gaussians(spec: &SynthSpec, split: Split, mut rng: SplitMix64) -> Result<Dataset> {
    if spec.dim < 2 {
        return Err(Error::Config("gaussians need dim >= 2".into()));
    }
    // centers on a circle in the first two coordinates, adjacent distance =
    // separation; for two classes this is +-separation/2 on the first axis
    let radius = if spec.classes == 2 {
        spec.separation / 2.0
    } else {
        spec.separation / (2.0 * (std::f64::consts::PI / spec.classes as f64).sin())
    };
    let centers: Vec<(f64, f64)> = (0..spec.classes)
        .map(|c| {
            let ang = std::f64::consts::TAU * c as f64 / spec.classes as f64;
            (radius * ang.cos(), radius * ang.sin())
        })
        .collect();
    let labels = balanced_labels(spec.n, spec.classes, &mut rng);
    let mut samples = Vec::with_capacity(spec.n);
    for &label in &labels {
        let mut v = vec![0.0; spec.dim];
        for x in v.iter_mut() {
            *x = rng.next_normal();
        }
        v[0] += centers[label].0;
        v[1] += centers[label].1;
        samples.push(Tensor::from_vec(&[spec.dim], v)?);
    }
    Ok(Dataset {
        samples,
        labels,
        classes: spec.classes,
        split,
        temporal: false,
        value_range: (f64::NEG_INFINITY, f64::INFINITY),
    })
}

fn two_moons(spec: &SynthSpec, split: Split, mut rng: SplitMix64) -> Result<Dataset> {
    let labels = balanced_labels(spec.n, 2, &mut rng);
    let noise = 0.1;
    let mut samples = Vec::with_capacity(spec.n);
    for &label in &labels {
        let t = std::f64::consts::PI * rng.next_f64();
        let (x, y) = if label == 0 {
            (t.cos(), t.sin())
        } else {
            (1.0 - t.cos(), 0.5 - t.sin())
        };
        let v = vec![x + noise * rng.next_normal(), y + noise * rng.next_normal()];
        samples.push(Tensor::from_vec(&[2], v)?);
    }
    Ok(Dataset {
        samples,
        labels,
        classes: 2,
        split,
        temporal: false,
        value_range: (f64::NEG_INFINITY, f64::INFINITY),
    })
}

fn temporal_xor(spec: &SynthSpec, split: Split, mut rng: SplitMix64) -> Result<Dataset> {
    if spec.steps == 0 {
        return Err(Error::Config("temporal_xor needs steps >= 1".into()));
    }
    let t = spec.steps;
    let labels = balanced_labels(spec.n, 2, &mut rng);
    let mut samples = Vec::with_capacity(spec.n);
    for &label in &labels {
        let mut v = vec![0.0; t * 2];
        if t == 1 {
            // both pulses collapse onto the only slot: order is unobservable
            v[0] = 1.0;
            v[1] = 1.0;
        } else {
            // draw two distinct step indices, order them per the label
            let a = rng.next_index(t);
            let mut b = rng.next_index(t - 1);
            if b >= a {
                b += 1;
            }
            let (ta, tb) = (a.min(b), a.max(b));
            let (t_first, t_second) = (ta, tb);
            // label 0: channel 0 pulses first; label 1: channel 1 pulses first
            if label == 0 {
                v[t_first * 2] = 1.0;
                v[t_second * 2 + 1] = 1.0;
            } else {
                v[t_first * 2 + 1] = 1.0;
                v[t_second * 2] = 1.0;
            }
        }
        samples.push(Tensor::from_vec(&[t, 2], v)?);
    }
    Ok(Dataset {
        samples,
        labels,
        classes: 2,
        split,
        temporal: true,
        value_range: (0.0, 1.0),
    })
}

// Seven-segment masks per digit: A top, B top-right, C bottom-right,
// D bottom, E bottom-left, F top-left, G middle.
const SEGMENTS: [[bool; 7]; 10] = [
    [true, true, true, true, true, true, false],    // 0
    [false, true, true, false, false, false, false], // 1
    [true, true, false, true, true, false, true],   // 2
    [true, true, true, true, false, false, true],   // 3
    [false, true, true, false, false, true, true],  // 4
    [true, false, true, true, false, true, true],   // 5
    [true, false, true, true, true, true, true],    // 6
    [true, true, true, false, false, false, false], // 7
    [true, true, true, true, true, true, true],     // 8
    [true, true, true, true, false, true, true],    // 9
];

fn digits(spec: &SynthSpec, split: Split, mut rng: SplitMix64) -> Result<Dataset> {
    const SIDE: usize = 28;
    const GH: usize = 16; // glyph box height
    const GW: usize = 10; // glyph box width
    let labels = balanced_labels(spec.n, 10, &mut rng);
    let mut samples = Vec::with_capacity(spec.n);
    for &label in &labels {
        let mut img = vec![0.0f64; SIDE * SIDE];
        // background speckle
        for p in img.iter_mut() {
            *p = 0.1 * rng.next_f64();
        }
        let oy = 2 + rng.next_index(SIDE - GH - 4);
        let ox = 2 + rng.next_index(SIDE - GW - 4);
        let ink = 0.75 + 0.25 * rng.next_f64();
        let seg = &SEGMENTS[label];
        let mut paint = |y0: usize, y1: usize, x0: usize, x1: usize| {
            for y in y0..y1 {
                for x in x0..x1 {
                    img[(oy + y) * SIDE + ox + x] = ink;
                }
            }
        };
        if seg[0] {
            paint(0, 2, 0, GW); // A
        }
        if seg[1] {
            paint(0, GH / 2, GW - 2, GW); // B
        }
        if seg[2] {
            paint(GH / 2, GH, GW - 2, GW); // C
        }
        if seg[3] {
            paint(GH - 2, GH, 0, GW); // D
        }
        if seg[4] {
            paint(GH / 2, GH, 0, 2); // E
        }
        if seg[5] {
            paint(0, GH / 2, 0, 2); // F
        }
        if seg[6] {
            paint(GH / 2 - 1, GH / 2 + 1, 0, GW); // G
        }
        samples.push(Tensor::from_vec(&[1, SIDE, SIDE], img)?);
    }
    Ok(Dataset {
        samples,
        labels,
        classes: 10,
        split,
        temporal: false,
        value_range: (0.0, 1.0),
    })
}

// ---- encoding ----

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EncodeMode {
    /// Replicate the analog features at every step (the first layer receives
    /// analog current).
    Direct,
    /// Bernoulli spikes with per-step probability equal to the feature value.
    Rate,
}

impl EncodeMode {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "direct" => Ok(Self::Direct),
            "rate" => Ok(Self::Rate),
            other => Err(Error::Config(format!(
                "unknown encoder mode '{other}' (expected direct | rate)"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct EncoderConfig {
    pub mode: EncodeMode,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig { mode: EncodeMode::Direct }
    }
}

/// Encode one sample into a `[steps, features...]` train.
pub fn encode_sample(
    x: &Tensor,
    temporal: bool,
    cfg: &EncoderConfig,
    steps: usize,
    rng: &mut SplitMix64,
) -> Result<Tensor> {
    if steps == 0 {
        return Err(Error::Config("encoder needs steps >= 1".into()));
    }
    if temporal {
        if x.dims()[0] != steps {
            return Err(Error::Shape(format!(
                "temporal sample has {} steps, network runs {steps}",
                x.dims()[0]
            )));
        }
        return Ok(x.clone());
    }
    let mut dims = vec![steps];
    dims.extend_from_slice(x.dims());
    match cfg.mode {
        EncodeMode::Direct => {
            let mut values = Vec::with_capacity(steps * x.numel());
            for _ in 0..steps {
                values.extend_from_slice(x.values());
            }
            Tensor::from_vec(&dims, values)
        }
        EncodeMode::Rate => {
            if let Some(i) = x.values().iter().position(|v| !(0.0..=1.0).contains(v)) {
                return Err(Error::Contract(format!(
                    "rate encoding needs values in [0, 1], element {i} is {}",
                    x.values()[i]
                )));
            }
            let mut values = Vec::with_capacity(steps * x.numel());
            for _ in 0..steps {
                for &p in x.values() {
                    values.push(if rng.next_f64() < p { 1.0 } else { 0.0 });
                }
            }
            Tensor::from_vec(&dims, values)
        }
    }
}

/// Encode a batch into the step-major block `[steps * batch, features...]`
/// the network consumes, with row `t * batch + b` holding sample `b` at step
/// `t`. Returns the block and the batch labels.
pub fn encode_batch(
    ds: &Dataset,
    indices: &[usize],
    cfg: &EncoderConfig,
    steps: usize,
    seed: u64,
) -> Result<(Tensor, Vec<usize>)> {
    if indices.is_empty() {
        return Err(Error::Contract("encode_batch: empty batch".into()));
    }
    let base = SplitMix64::new(seed);
    let encoded: Vec<Tensor> = indices
        .iter()
        .map(|&i| {
            let mut rng = base.split_indexed(i as u64);
            encode_sample(&ds.samples[i], ds.temporal, cfg, steps, &mut rng)
        })
        .collect::<Result<_>>()?;
    let feat = encoded[0].shape().row_size();
    let batch = indices.len();
    let mut values = vec![0.0; steps * batch * feat];
    for (b, enc) in encoded.iter().enumerate() {
        for t in 0..steps {
            let src = &enc.values()[t * feat..(t + 1) * feat];
            let dst = &mut values[(t * batch + b) * feat..(t * batch + b + 1) * feat];
            dst.copy_from_slice(src);
        }
    }
    let mut dims = vec![steps * batch];
    dims.extend_from_slice(&encoded[0].dims()[1..]);
    let labels = indices.iter().map(|&i| ds.labels[i]).collect();
    Ok((Tensor::from_vec(&dims, values)?, labels))
}

/// Whether the encoded train counts as spikes for the firing-rate record.
pub fn encoding_is_spike_train(ds: &Dataset, cfg: &EncoderConfig) -> bool {
    ds.temporal || cfg.mode == EncodeMode::Rate
}

// ---- augmentation ----

/// Basic image augmentation: zero-pad by `pad` on each side, take a random
/// crop back to the original size, and flip horizontally with probability
/// one half. Applies to `[c, h, w]` samples.
pub fn augment_image(x: &Tensor, pad: usize, rng: &mut SplitMix64) -> Result<Tensor> {
    let dims = x.dims();
    if dims.len() != 3 {
        return Err(Error::Shape(format!(
            "augment_image wants [channels, h, w] samples, got {dims:?}"
        )));
    }
    let (c, h, w) = (dims[0], dims[1], dims[2]);
    let oy = rng.next_index(2 * pad + 1);
    let ox = rng.next_index(2 * pad + 1);
    let flip = rng.next_f64() < 0.5;
    let mut out = Tensor::zeros(dims)?;
    for ch in 0..c {
        for y in 0..h {
            // source row in the padded frame; zero outside the original
            let sy = (y + oy) as isize - pad as isize;
            if sy < 0 || sy >= h as isize {
                continue;
            }
            for xpos in 0..w {
                let sx = (xpos + ox) as isize - pad as isize;
                if sx < 0 || sx >= w as isize {
                    continue;
                }
                let dst_x = if flip { w - 1 - xpos } else { xpos };
                out.values_mut()[(ch * h + y) * w + dst_x] =
                    x.values()[(ch * h + sy as usize) * w + sx as usize];
            }
        }
    }
    Ok(out)
}

/// Per-epoch augmented copy of an image dataset, deterministic in
/// `(seed, epoch, sample index)`. Non-image samples pass through unchanged.
pub fn augment_dataset(ds: &Dataset, pad: usize, seed: u64, epoch: usize) -> Result<Dataset> {
    let mut out = ds.clone();
    if ds.temporal || ds.samples[0].dims().len() != 3 {
        return Ok(out);
    }
    let base = SplitMix64::new(seed).split_labeled(&format!("augment{epoch}"));
    for (i, s) in out.samples.iter_mut().enumerate() {
        let mut rng = base.split_indexed(i as u64);
        *s = augment_image(s, pad, &mut rng)?;
    }
    Ok(out)
}

// ---- noise injection ----

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NoiseKind {
    Uniform,
    SaltPepper,
    Gaussian,
}

impl NoiseKind {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "uniform" => Ok(Self::Uniform),
            "salt_pepper" => Ok(Self::SaltPepper),
            "gaussian" => Ok(Self::Gaussian),
            other => Err(Error::Config(format!(
                "unknown noise kind '{other}' (expected uniform | salt_pepper | gaussian)"
            ))),
        }
    }
}

/// Corrupt features at intensity `epsilon`: uniform adds `eps * U(-1, 1)`,
/// gaussian adds `eps * N(0, 1)`, salt-and-pepper sets a fraction `eps` of
/// elements to the range extremes with equal probability. When a value range
/// is known the output is clamped to it.
pub fn inject_noise(
    x: &Tensor,
    kind: NoiseKind,
    epsilon: f64,
    range: Option<(f64, f64)>,
    rng: &mut SplitMix64,
) -> Result<Tensor> {
    if epsilon < 0.0 {
        return Err(Error::Config(format!("noise intensity must be >= 0, got {epsilon}")));
    }
    if epsilon == 0.0 {
        return Ok(x.clone());
    }
    let mut out = x.clone();
    match kind {
        NoiseKind::Uniform => {
            for v in out.values_mut() {
                *v += epsilon * rng.next_range(-1.0, 1.0);
            }
        }
        NoiseKind::Gaussian => {
            for v in out.values_mut() {
                *v += epsilon * rng.next_normal();
            }
        }
        NoiseKind::SaltPepper => {
            if epsilon > 1.0 {
                return Err(Error::Config(format!(
                    "salt_pepper intensity is a fraction in [0, 1], got {epsilon}"
                )));
            }
            let (lo, hi) = range.ok_or_else(|| {
                Error::Config("salt_pepper noise needs a known value range".into())
            })?;
            for v in out.values_mut() {
                if rng.next_f64() < epsilon {
                    *v = if rng.next_f64() < 0.5 { lo } else { hi };
                }
            }
        }
    }
    if let Some((lo, hi)) = range {
        if lo.is_finite() && hi.is_finite() {
            for v in out.values_mut() {
                *v = v.clamp(lo, hi);
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn idx_round_trip_and_magic_validation() {
        let dir = std::env::temp_dir().join(format!("idx_test_{}", std::process::id()));
        fs::create_dir_all(&dir).unwrap();
        let spec = SynthSpec { kind: SynthKind::Digits, n: 200, seed: 3, ..SynthSpec::default() };
        let ds = synth_dataset(&spec, Split::Test).unwrap();
        let img = dir.join("images.idx");
        let lab = dir.join("labels.idx");
        write_idx(&img, &lab, &ds).unwrap();

        let loaded = load_idx(&img, &lab).unwrap();
        assert_eq!(loaded.len(), 200);
        assert_eq!(loaded.samples[0].dims(), &[1, 28, 28]);
        assert_eq!(loaded.labels, ds.labels);
        // byte 255 scales to exactly 1.0
        assert!(loaded
            .samples
            .iter()
            .all(|s| s.values().iter().all(|&v| (0.0..=1.0).contains(&v))));

        // swapping the two files must fail the magic check
        let err = load_idx(&lab, &img).unwrap_err();
        assert!(err.to_string().contains("magic"), "{err}");

        // truncation is detected
        let mut bytes = fs::read(&img).unwrap();
        bytes.truncate(bytes.len() - 10);
        let trunc = dir.join("trunc.idx");
        fs::write(&trunc, bytes).unwrap();
        let err = load_idx(&trunc, &lab).unwrap_err();
        assert!(err.to_string().contains("truncated"), "{err}");
        fs::remove_dir_all(&dir).ok();
    }

    #[test]
    fn csv_round_trip_and_validation() {
        let dir = std::env::temp_dir();
        let path = dir.join(format!("ds_{}.csv", std::process::id()));
        let spec = SynthSpec { n: 50, seed: 12, ..SynthSpec::default() };
        let ds = synth_dataset(&spec, Split::Train).unwrap();
        write_csv(&path, &ds).unwrap();
        let loaded = load_csv(&path).unwrap();
        assert_eq!(loaded.len(), 50);
        assert_eq!(loaded.labels, ds.labels);
        for (a, b) in loaded.samples.iter().zip(&ds.samples) {
            assert_eq!(a.values(), b.values());
        }
        // ragged row is a format error with a line number
        fs::write(&path, "f0,f1,label\n0.5,1\n").unwrap();
        let err = load_csv(&path).unwrap_err();
        assert!(err.to_string().contains(":2:"), "{err}");
        fs::remove_file(&path).ok();
    }

    #[test]
    fn pixel_scaling_endpoints() {
        // byte 255 -> 1.0, byte 0 -> 0.0
        assert_eq!(f64::from(255u8) / 255.0, 1.0);
        assert_eq!(f64::from(0u8) / 255.0, 0.0);
    }

    #[test]
    fn gaussians_midplane_oracle() {
        let spec = SynthSpec { n: 400, seed: 40, ..SynthSpec::default() };
        let ds = synth_dataset(&spec, Split::Test).unwrap();
        // optimal linear rule for symmetric 6-sigma clusters: sign of x[0]
        // (class 0 sits at +separation/2, class 1 at -separation/2)
        let correct = ds
            .samples
            .iter()
            .zip(&ds.labels)
            .filter(|(s, &l)| (s.values()[0] > 0.0) == (l == 0))
            .count();
        let acc = correct as f64 / ds.len() as f64;
        assert!(acc >= 0.999, "midplane oracle accuracy {acc}");
    }

    #[test]
    fn synthetic_data_is_deterministic() {
        let spec = SynthSpec { n: 60, seed: 8, ..SynthSpec::default() };
        let a = synth_dataset(&spec, Split::Train).unwrap();
        let b = synth_dataset(&spec, Split::Train).unwrap();
        for (x, y) in a.samples.iter().zip(&b.samples) {
            assert_eq!(x.values(), y.values());
        }
        assert_eq!(a.labels, b.labels);
        // train and test streams differ
        let t = synth_dataset(&spec, Split::Test).unwrap();
        assert_ne!(a.samples[0].values(), t.samples[0].values());
    }

    #[test]
    fn temporal_xor_at_t1_has_identical_inputs() {
        let spec = SynthSpec {
            kind: SynthKind::TemporalXor,
            n: 40,
            seed: 2,
            steps: 1,
            ..SynthSpec::default()
        };
        let ds = synth_dataset(&spec, Split::Train).unwrap();
        let first = ds.samples[0].values().to_vec();
        for s in &ds.samples {
            assert_eq!(s.values(), &first[..]);
        }
        // labels remain balanced even though inputs are indistinguishable
        let ones = ds.labels.iter().filter(|&&l| l == 1).count();
        assert_eq!(ones, 20);
    }

    #[test]
    fn temporal_xor_pulse_order_matches_label() {
        let spec = SynthSpec {
            kind: SynthKind::TemporalXor,
            n: 60,
            seed: 5,
            steps: 4,
            ..SynthSpec::default()
        };
        let ds = synth_dataset(&spec, Split::Train).unwrap();
        for (s, &label) in ds.samples.iter().zip(&ds.labels) {
            let v = s.values();
            let t_a = (0..4).find(|&t| v[t * 2] == 1.0).unwrap();
            let t_b = (0..4).find(|&t| v[t * 2 + 1] == 1.0).unwrap();
            assert_ne!(t_a, t_b);
            assert_eq!(label, usize::from(t_a > t_b));
        }
    }

    #[test]
    fn direct_encoding_replicates() {
        let x = Tensor::from_vec(&[1], vec![0.3]).unwrap();
        let mut rng = SplitMix64::new(1);
        let enc = encode_sample(&x, false, &EncoderConfig::default(), 4, &mut rng).unwrap();
        assert_eq!(enc.dims(), &[4, 1]);
        assert_eq!(enc.values(), &[0.3; 4]);
    }

    #[test]
    fn rate_encoding_degenerate_probabilities() {
        let cfg = EncoderConfig { mode: EncodeMode::Rate };
        let mut rng = SplitMix64::new(1);
        let ones = encode_sample(&Tensor::from_vec(&[2], vec![1.0, 1.0]).unwrap(), false, &cfg, 8, &mut rng).unwrap();
        assert!(ones.values().iter().all(|&v| v == 1.0));
        let zeros = encode_sample(&Tensor::from_vec(&[2], vec![0.0, 0.0]).unwrap(), false, &cfg, 8, &mut rng).unwrap();
        assert!(zeros.values().iter().all(|&v| v == 0.0));
        // out-of-range probability is an error
        let err = encode_sample(&Tensor::from_vec(&[1], vec![1.5]).unwrap(), false, &cfg, 2, &mut rng);
        assert!(err.is_err());
    }

    #[test]
    fn rate_encoding_converges_to_probability() {
        let cfg = EncoderConfig { mode: EncodeMode::Rate };
        let mut rng = SplitMix64::new(77);
        let enc = encode_sample(&Tensor::from_vec(&[1], vec![0.5]).unwrap(), false, &cfg, 10_000, &mut rng).unwrap();
        let rate = enc.values().iter().sum::<f64>() / 10_000.0;
        assert!((rate - 0.5).abs() < 0.02, "empirical rate {rate}");
    }

    #[test]
    fn augmentation_is_deterministic_and_varies_by_epoch() {
        let spec = SynthSpec { kind: SynthKind::Digits, n: 30, seed: 6, ..SynthSpec::default() };
        let ds = synth_dataset(&spec, Split::Train).unwrap();
        let a = augment_dataset(&ds, 3, 11, 0).unwrap();
        let b = augment_dataset(&ds, 3, 11, 0).unwrap();
        for (x, y) in a.samples.iter().zip(&b.samples) {
            assert_eq!(x.values(), y.values());
        }
        let c = augment_dataset(&ds, 3, 11, 1).unwrap();
        assert!(a.samples.iter().zip(&c.samples).any(|(x, y)| x.values() != y.values()));
        // labels and shapes untouched
        assert_eq!(a.labels, ds.labels);
        assert_eq!(a.samples[0].dims(), ds.samples[0].dims());
        // vector datasets pass through unchanged
        let flat = synth_dataset(&SynthSpec { n: 30, seed: 6, ..SynthSpec::default() }, Split::Train).unwrap();
        let same = augment_dataset(&flat, 3, 11, 0).unwrap();
        assert_eq!(same.samples[0].values(), flat.samples[0].values());
    }

    #[test]
    fn noise_zero_intensity_is_identity() {
        let x = Tensor::from_vec(&[3], vec![0.1, 0.5, 0.9]).unwrap();
        let mut rng = SplitMix64::new(1);
        for kind in [NoiseKind::Uniform, NoiseKind::Gaussian, NoiseKind::SaltPepper] {
            let y = inject_noise(&x, kind, 0.0, Some((0.0, 1.0)), &mut rng).unwrap();
            assert_eq!(y.values(), x.values());
        }
    }

    #[test]
    fn salt_pepper_full_corruption() {
        let x = Tensor::from_vec(&[64], vec![0.5; 64]).unwrap();
        let mut rng = SplitMix64::new(9);
        let y = inject_noise(&x, NoiseKind::SaltPepper, 1.0, Some((0.0, 1.0)), &mut rng).unwrap();
        assert!(y.values().iter().all(|&v| v == 0.0 || v == 1.0));
        // fraction above 1 violates the semantics
        assert!(inject_noise(&x, NoiseKind::SaltPepper, 1.5, Some((0.0, 1.0)), &mut rng).is_err());
    }

    #[test]
    fn gaussian_noise_std_matches_intensity() {
        let x = Tensor::zeros(&[100_000]).unwrap();
        let mut rng = SplitMix64::new(4);
        let y = inject_noise(&x, NoiseKind::Gaussian, 0.1, None, &mut rng).unwrap();
        let n = y.numel() as f64;
        let mean = y.values().iter().sum::<f64>() / n;
        let std = (y.values().iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n).sqrt();
        assert!((std - 0.1).abs() / 0.1 < 0.01, "std {std}");
    }

    #[test]
    fn noise_respects_declared_range() {
        let x = Tensor::from_vec(&[256], vec![0.5; 256]).unwrap();
        let mut rng = SplitMix64::new(12);
        let y = inject_noise(&x, NoiseKind::Uniform, 2.0, Some((0.0, 1.0)), &mut rng).unwrap();
        assert!(y.values().iter().all(|&v| (0.0..=1.0).contains(&v)));
    }

    #[test]
    fn batch_assembly_is_step_major() {
        let spec = SynthSpec { n: 40, seed: 8, ..SynthSpec::default() };
        let ds = synth_dataset(&spec, Split::Train).unwrap();
        let (block, labels) = encode_batch(&ds, &[0, 1], &EncoderConfig::default(), 3, 7).unwrap();
        assert_eq!(block.dims(), &[6, 2]);
        assert_eq!(labels, vec![ds.labels[0], ds.labels[1]]);
        // direct encoding: rows repeat per step, sample-major within a step
        let rs = 2;
        let row = |r: usize| &block.values()[r * rs..(r + 1) * rs];
        assert_eq!(row(0), ds.samples[0].values());
        assert_eq!(row(1), ds.samples[1].values());
        assert_eq!(row(2), ds.samples[0].values());
    }
}
