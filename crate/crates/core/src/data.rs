//! Cube and label containers, their binary formats, stratified splits,
//! synthetic scenes and per-band normalization.
//!
//! `HSIC` cube files: magic, version `u16`, `C`, `H`, `W` as `u32`, then
//! `C·H·W` `f32` values band-major. `HSIL` label files: magic, version `u16`,
//! `H`, `W` as `u32`, then `H·W` `u16` class indices. Everything is
//! little-endian.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{read_file, Error, Result};
use crate::tensor::NdArray;

pub const CUBE_MAGIC: &[u8; 4] = b"HSIC";
pub const LABEL_MAGIC: &[u8; 4] = b"HSIL";
pub const FORMAT_VERSION: u16 = 1;
const HEADER_LEN: usize = 4 + 2 + 12;
const LABEL_HEADER_LEN: usize = 4 + 2 + 8;

#[derive(Debug, Clone, PartialEq)]
pub struct Cube {
    pub bands: usize,
    pub height: usize,
    pub width: usize,
    /// Band-major values, `values[(c·H + y)·W + x]`.
    pub values: Vec<f32>,
}

impl Cube {
    pub fn new(bands: usize, height: usize, width: usize, values: Vec<f32>) -> Result<Self> {
        if bands == 0 {
            return Err(Error::Dimension("cube must have at least one band".into()));
        }
        if values.len() != bands * height * width {
            return Err(Error::Dimension(format!(
                "cube {bands}×{height}×{width} needs {} values, got {}",
                bands * height * width,
                values.len()
            )));
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::Dimension(format!("cube value {i} is not finite")));
        }
        Ok(Self { bands, height, width, values })
    }

    pub fn pixels(&self) -> usize {
        self.height * self.width
    }

    pub fn at(&self, band: usize, y: usize, x: usize) -> f32 {
        self.values[(band * self.height + y) * self.width + x]
    }

    /// Spectrum of one row-major pixel.
    pub fn spectrum(&self, pixel: usize) -> Vec<f32> {
        (0..self.bands).map(|c| self.values[c * self.pixels() + pixel]).collect()
    }

    pub fn to_array(&self) -> NdArray {
        NdArray::new(
            &[self.bands, self.height, self.width],
            self.values.iter().map(|&v| f64::from(v)).collect(),
        )
        .expect("extent checked at construction")
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelMap {
    pub height: usize,
    pub width: usize,
    /// Row-major; 0 marks an unlabeled pixel.
    pub labels: Vec<u16>,
}

impl LabelMap {
    pub fn new(height: usize, width: usize, labels: Vec<u16>) -> Result<Self> {
        if labels.len() != height * width {
            return Err(Error::Dimension(format!(
                "label map {height}×{width} needs {} entries, got {}",
                height * width,
                labels.len()
            )));
        }
        Ok(Self { height, width, labels })
    }

    pub fn num_classes(&self) -> usize {
        self.labels.iter().copied().max().unwrap_or(0) as usize
    }

    pub fn check_matches(&self, cube: &Cube) -> Result<()> {
        if (self.height, self.width) != (cube.height, cube.width) {
            return Err(Error::Dimension(format!(
                "labels are {}×{}, cube is {}×{}",
                self.height, self.width, cube.height, cube.width
            )));
        }
        Ok(())
    }

    /// Labeled pixel count per class, index 0 holding class 1.
    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.num_classes()];
        for &l in &self.labels {
            if l > 0 {
                counts[l as usize - 1] += 1;
            }
        }
        counts
    }
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let avail = self.buf.len() - self.pos;
        if avail < n {
            return Err(Error::Format {
                offset: self.pos as u64,
                msg: format!("truncated {what}: expected {n} bytes, found {avail}"),
            });
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().unwrap()))
    }

    fn u32(&mut self, what: &str) -> Result<usize> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()) as usize)
    }
}

fn header(c: &mut Cursor<'_>, magic: &[u8; 4]) -> Result<()> {
    if c.take(4, "magic")? != magic {
        return Err(Error::Format {
            offset: 0,
            msg: format!("bad magic, expected {}", String::from_utf8_lossy(magic)),
        });
    }
    let v = c.u16("version")?;
    if v != FORMAT_VERSION {
        return Err(Error::Format { offset: 4, msg: format!("unsupported version {v}") });
    }
    Ok(())
}

fn payload_len(extents: &[usize], elem: usize, offset: usize) -> Result<usize> {
    extents
        .iter()
        .try_fold(elem, |acc, &e| acc.checked_mul(e))
        .ok_or_else(|| Error::Format { offset: offset as u64, msg: format!("extent overflow {extents:?}") })
}

fn check_payload(bytes: &[u8], header: usize, want: usize) -> Result<()> {
    let have = bytes.len() - header;
    if have != want {
        return Err(Error::Format {
            offset: header as u64,
            msg: format!(
                "payload length mismatch: expected {want} bytes, found {have} (file length {})",
                bytes.len()
            ),
        });
    }
    Ok(())
}

pub fn cube_to_bytes(cube: &Cube) -> Vec<u8> {
    let mut out = Vec::with_capacity(HEADER_LEN + 4 * cube.values.len());
    out.extend_from_slice(CUBE_MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    for e in [cube.bands, cube.height, cube.width] {
        out.extend_from_slice(&(e as u32).to_le_bytes());
    }
    for v in &cube.values {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn cube_from_bytes(bytes: &[u8]) -> Result<Cube> {
    let mut c = Cursor { buf: bytes, pos: 0 };
    header(&mut c, CUBE_MAGIC)?;
    let (bands, height, width) = (c.u32("bands")?, c.u32("height")?, c.u32("width")?);
    let want = payload_len(&[bands, height, width], 4, 6)?;
    check_payload(bytes, HEADER_LEN, want)?;
    let values = bytes[HEADER_LEN..]
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
        .collect();
    Cube::new(bands, height, width, values)
}

pub fn labels_to_bytes(labels: &LabelMap) -> Vec<u8> {
    let mut out = Vec::with_capacity(LABEL_HEADER_LEN + 2 * labels.labels.len());
    out.extend_from_slice(LABEL_MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(labels.height as u32).to_le_bytes());
    out.extend_from_slice(&(labels.width as u32).to_le_bytes());
    for l in &labels.labels {
        out.extend_from_slice(&l.to_le_bytes());
    }
    out
}

pub fn labels_from_bytes(bytes: &[u8]) -> Result<LabelMap> {
    let mut c = Cursor { buf: bytes, pos: 0 };
    header(&mut c, LABEL_MAGIC)?;
    let (height, width) = (c.u32("height")?, c.u32("width")?);
    let want = payload_len(&[height, width], 2, 6)?;
    check_payload(bytes, LABEL_HEADER_LEN, want)?;
    let labels = bytes[LABEL_HEADER_LEN..]
        .chunks_exact(2)
        .map(|b| u16::from_le_bytes(b.try_into().unwrap()))
        .collect();
    LabelMap::new(height, width, labels)
}

pub fn read_cube(path: impl AsRef<Path>) -> Result<Cube> {
    cube_from_bytes(&read_file(path.as_ref())?)
}

pub fn write_cube(cube: &Cube, path: impl AsRef<Path>) -> Result<()> {
    Ok(fs::write(path, cube_to_bytes(cube))?)
}

pub fn read_labels(path: impl AsRef<Path>) -> Result<LabelMap> {
    labels_from_bytes(&read_file(path.as_ref())?)
}

pub fn write_labels(labels: &LabelMap, path: impl AsRef<Path>) -> Result<()> {
    Ok(fs::write(path, labels_to_bytes(labels))?)
}

/// Which subset of labeled pixels a mask selects.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Part {
    Train,
    Val,
    Test,
}

impl FromStr for Part {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Self::Train),
            "val" => Ok(Self::Val),
            "test" => Ok(Self::Test),
            other => Err(Error::Config(format!("unknown split part `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SplitMask {
    pub height: usize,
    pub width: usize,
    pub train: Vec<bool>,
    pub val: Vec<bool>,
    pub test: Vec<bool>,
}

impl SplitMask {
    pub fn part(&self, part: Part) -> &[bool] {
        match part {
            Part::Train => &self.train,
            Part::Val => &self.val,
            Part::Test => &self.test,
        }
    }

    pub fn count(&self, part: Part) -> usize {
        self.part(part).iter().filter(|&&b| b).count()
    }

    /// Per-class counts of one part, index 0 holding class 1.
    pub fn class_counts(&self, labels: &LabelMap, part: Part) -> Vec<usize> {
        let mut counts = vec![0; labels.num_classes()];
        for (i, &m) in self.part(part).iter().enumerate() {
            if m {
                counts[labels.labels[i] as usize - 1] += 1;
            }
        }
        counts
    }

    /// `(pixel, class − 1)` pairs for the loss.
    pub fn targets(&self, labels: &LabelMap, part: Part) -> Vec<(usize, usize)> {
        self.part(part)
            .iter()
            .enumerate()
            .filter(|(_, &m)| m)
            .map(|(i, _)| (i, labels.labels[i] as usize - 1))
            .collect()
    }

    /// Encode as a label map: 1 train, 2 val, 3 test, 0 elsewhere.
    pub fn to_label_map(&self) -> LabelMap {
        let labels = (0..self.train.len())
            .map(|i| {
                if self.train[i] {
                    1
                } else if self.val[i] {
                    2
                } else if self.test[i] {
                    3
                } else {
                    0
                }
            })
            .collect();
        LabelMap { height: self.height, width: self.width, labels }
    }

    pub fn from_label_map(map: &LabelMap) -> Result<Self> {
        let n = map.labels.len();
        let mut s = Self {
            height: map.height,
            width: map.width,
            train: vec![false; n],
            val: vec![false; n],
            test: vec![false; n],
        };
        for (i, &l) in map.labels.iter().enumerate() {
            match l {
                0 => {}
                1 => s.train[i] = true,
                2 => s.val[i] = true,
                3 => s.test[i] = true,
                other => return Err(Error::Split(format!("split file has code {other} at pixel {i}"))),
            }
        }
        Ok(s)
    }

    /// Mask selecting every labeled pixel.
    pub fn all_labeled(labels: &LabelMap) -> Vec<bool> {
        labels.labels.iter().map(|&l| l > 0).collect()
    }
}

/// Per-class `(train_n, val_n)` replacing the defaults.
pub type SplitOverrides = BTreeMap<u16, (usize, usize)>;

/// Parse `class train val` lines; `#` starts a comment.
pub fn parse_overrides(text: &str) -> Result<SplitOverrides> {
    let mut out = SplitOverrides::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let fields: Vec<_> = line.split_whitespace().collect();
        let parsed: Option<(u16, usize, usize)> = match fields.as_slice() {
            [c, t, v] => c.parse().ok().zip(t.parse().ok()).zip(v.parse().ok()).map(|((c, t), v)| (c, t, v)),
            _ => None,
        };
        let Some((class, train, val)) = parsed.filter(|p| p.0 > 0) else {
            return Err(Error::Config(format!(
                "override line {}: expected `class_index train_n val_n`, got `{line}`",
                n + 1
            )));
        };
        if out.insert(class, (train, val)).is_some() {
            return Err(Error::Config(format!("override line {}: class {class} repeated", n + 1)));
        }
    }
    Ok(out)
}

pub fn read_overrides(path: impl AsRef<Path>) -> Result<SplitOverrides> {
    parse_overrides(&String::from_utf8_lossy(&read_file(path.as_ref())?))
}

/// Per class: `min(train_n, n − 2)` train pixels, then `min(val_n, rest − 1)`
/// val pixels drawn without replacement; the remainder is test.
pub fn stratified_split(
    labels: &LabelMap,
    train_n: usize,
    val_n: usize,
    overrides: &SplitOverrides,
    seed: u64,
) -> Result<SplitMask> {
    let n = labels.labels.len();
    let mut mask = SplitMask {
        height: labels.height,
        width: labels.width,
        train: vec![false; n],
        val: vec![false; n],
        test: vec![false; n],
    };
    let mut by_class: BTreeMap<u16, Vec<usize>> = BTreeMap::new();
    for (i, &l) in labels.labels.iter().enumerate() {
        if l > 0 {
            by_class.entry(l).or_default().push(i);
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for (class, mut pixels) in by_class {
        let avail = pixels.len();
        if avail < 3 {
            return Err(Error::Split(format!("class {class} has {avail} labeled pixels, need at least 3")));
        }
        let (t, v) = overrides.get(&class).copied().unwrap_or((train_n, val_n));
        let t = t.min(avail - 2);
        let v = v.min(avail - t - 1);
        pixels.shuffle(&mut rng);
        for (k, &p) in pixels.iter().enumerate() {
            if k < t {
                mask.train[p] = true;
            } else if k < t + v {
                mask.val[p] = true;
            } else {
                mask.test[p] = true;
            }
        }
    }
    Ok(mask)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Signature {
    /// `(centre, width, amplitude)` per bump.
    pub bumps: [(f64, f64, f64); 2],
    pub offset: f64,
}

impl Signature {
    pub fn value(&self, band: usize) -> f64 {
        let b = band as f64;
        self.offset
            + self
                .bumps
                .iter()
                .map(|&(c, w, a)| a * (-0.5 * ((b - c) / w).powi(2)).exp())
                .sum::<f64>()
    }
}

#[derive(Debug, Clone)]
pub struct Scene {
    pub cube: Cube,
    pub labels: LabelMap,
    pub signatures: Vec<Signature>,
}

/// Voronoi regions around `K` distinct random sites, one smooth spectrum per
/// class, plus i.i.d. Gaussian noise.
pub fn synth_scene(h: usize, w: usize, c: usize, k: usize, noise_sigma: f64, seed: u64) -> Result<Scene> {
    if k == 0 || k > h * w || c == 0 {
        return Err(Error::Config(format!("cannot build a {h}×{w}×{c} scene with {k} classes")));
    }
    if !(noise_sigma >= 0.0 && noise_sigma.is_finite()) {
        return Err(Error::Config(format!("noise sigma {noise_sigma} must be finite and non-negative")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let sites: Vec<(f64, f64)> = rand::seq::index::sample(&mut rng, h * w, k)
        .into_iter()
        .map(|p| ((p / w) as f64, (p % w) as f64))
        .collect();
    let span = c as f64;
    let signatures: Vec<Signature> = (0..k)
        .map(|_| {
            let mut bump = || {
                (
                    rng.gen_range(0.0..span),
                    rng.gen_range(span / 10.0 + 0.5..span / 3.0 + 1.0),
                    rng.gen_range(0.2..1.0),
                )
            };
            let bumps = [bump(), bump()];
            Signature { bumps, offset: rng.gen_range(0.0..0.3) }
        })
        .collect();
    let labels: Vec<u16> = (0..h * w)
        .map(|p| {
            let (y, x) = ((p / w) as f64, (p % w) as f64);
            let nearest = sites
                .iter()
                .enumerate()
                .map(|(i, &(sy, sx))| (i, (y - sy).powi(2) + (x - sx).powi(2)))
                .min_by(|a, b| a.1.total_cmp(&b.1))
                .map(|(i, _)| i)
                .unwrap();
            nearest as u16 + 1
        })
        .collect();
    let noise = Normal::new(0.0, noise_sigma).expect("sigma validated above");
    let mut values = vec![0f32; c * h * w];
    for band in 0..c {
        let clean: Vec<f64> = signatures.iter().map(|s| s.value(band)).collect();
        for p in 0..h * w {
            let mut v = clean[labels[p] as usize - 1];
            if noise_sigma > 0.0 {
                v += noise.sample(&mut rng);
            }
            values[band * h * w + p] = v as f32;
        }
    }
    Ok(Scene { cube: Cube::new(c, h, w, values)?, labels: LabelMap::new(h, w, labels)?, signatures })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Normalization {
    #[default]
    MinMax,
    ZScore,
    None,
}

impl FromStr for Normalization {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "minmax" => Ok(Self::MinMax),
            "zscore" => Ok(Self::ZScore),
            "none" => Ok(Self::None),
            other => Err(Error::Config(format!("unknown normalization `{other}`"))),
        }
    }
}

impl std::fmt::Display for Normalization {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::MinMax => "minmax",
            Self::ZScore => "zscore",
            Self::None => "none",
        })
    }
}

/// Per-band min-max scaling to `[0, 1]`; constant bands become 0.
pub fn normalize(cube: &Cube) -> Cube {
    normalize_with(cube, Normalization::MinMax)
}

pub fn normalize_with(cube: &Cube, mode: Normalization) -> Cube {
    let mut out = cube.clone();
    let n = cube.pixels();
    if mode == Normalization::None || n == 0 {
        return out;
    }
    for band in out.values.chunks_mut(n) {
        let vals: Vec<f64> = band.iter().map(|&v| f64::from(v)).collect();
        let (shift, scale) = match mode {
            Normalization::MinMax => {
                let lo = vals.iter().copied().fold(f64::INFINITY, f64::min);
                let hi = vals.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                (lo, hi - lo)
            }
            _ => {
                let mean = vals.iter().sum::<f64>() / n as f64;
                let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n as f64;
                (mean, var.sqrt())
            }
        };
        for (dst, v) in band.iter_mut().zip(vals) {
            *dst = if scale > 0.0 { ((v - shift) / scale) as f32 } else { 0.0 };
        }
    }
    out
}
