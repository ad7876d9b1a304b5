//! Seeded synthetic multi-weather corruption data.
//!
//! Every sample is a pure function of its own seed: the clean image draws
//! from `(seed, DATA_CLEAN)` and the corruption from `(seed, DATA_CORRUPT)`.
//! Pixels are rounded through `f32` at generation time, so a dataset read
//! back from disk is identical to the one generated in memory.
//!
//! Split file layout (little-endian):
//!
//! ```text
//! "MFDS"  count:u32
//! repeat count times:
//!     kind:u8  seed:u64  clean:f32*(3·H·W)  corrupted:f32*(3·H·W)
//! ```
//!
//! Image sizes live in the JSON manifest next to the split files.

use std::fmt;
use std::fs;
use std::io::{Read, Write};
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{splitmix, streams, RngStream};
use crate::tensor::Tensor;

pub const DATASET_MAGIC: &[u8; 4] = b"MFDS";
pub const MANIFEST_FILE: &str = "manifest.json";
pub const TRAIN_FILE: &str = "train.mfds";
pub const TEST_FILE: &str = "test.mfds";
pub const CHANNELS: usize = 3;

/// Airlight of the haze model.
pub const AIRLIGHT: f64 = 0.9;
pub const HAZE_T_RANGE: (f64, f64) = (0.5, 0.9);

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum WeatherKind {
    Rain,
    Haze,
    Snow,
}

impl WeatherKind {
    pub const ALL: [WeatherKind; 3] = [WeatherKind::Rain, WeatherKind::Haze, WeatherKind::Snow];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Result<Self> {
        Self::ALL
            .get(i)
            .copied()
            .ok_or_else(|| Error::Format(format!("unknown weather label {i}")))
    }

    pub fn as_str(self) -> &'static str {
        match self {
            WeatherKind::Rain => "rain",
            WeatherKind::Haze => "haze",
            WeatherKind::Snow => "snow",
        }
    }
}

impl fmt::Display for WeatherKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for WeatherKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "rain" => Ok(WeatherKind::Rain),
            "haze" => Ok(WeatherKind::Haze),
            "snow" => Ok(WeatherKind::Snow),
            _ => Err(Error::config(format!("unknown weather kind {s:?} (expected rain, haze, snow)"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub clean: Tensor<f64>,
    pub corrupted: Tensor<f64>,
    pub kind: WeatherKind,
    pub seed: u64,
}

fn clamp01(v: f64) -> f64 {
    v.clamp(0.0, 1.0)
}

fn through_f32(t: Tensor<f64>) -> Tensor<f64> {
    t.map(|v| v as f32 as f64)
}

/// Smooth per-channel gradient with a few flat rectangles and disks on top.
pub fn gen_clean(rng: &mut RngStream, height: usize, width: usize) -> Tensor<f64> {
    let px = height * width;
    let mut img = vec![0.0; CHANNELS * px];
    let (hs, ws) = (height.max(2) as f64 - 1.0, width.max(2) as f64 - 1.0);
    for c in 0..CHANNELS {
        let base = rng.uniform_in(0.2, 0.8);
        let gy = rng.uniform_in(-0.3, 0.3);
        let gx = rng.uniform_in(-0.3, 0.3);
        for i in 0..height {
            for j in 0..width {
                img[c * px + i * width + j] = base + gy * (i as f64 / hs - 0.5) + gx * (j as f64 / ws - 0.5);
            }
        }
    }
    let color = |rng: &mut RngStream| [rng.uniform(), rng.uniform(), rng.uniform()];
    for _ in 0..1 + rng.below(3) {
        let (h0, w0) = (rng.below(height), rng.below(width));
        let (h1, w1) = ((h0 + 2 + rng.below(height / 2 + 1)).min(height), (w0 + 2 + rng.below(width / 2 + 1)).min(width));
        let col = color(rng);
        for (c, &v) in col.iter().enumerate() {
            for i in h0..h1 {
                img[c * px + i * width + w0..c * px + i * width + w1].iter_mut().for_each(|p| *p = v);
            }
        }
    }
    for _ in 0..1 + rng.below(2) {
        let (ci, cj) = (rng.uniform() * height as f64, rng.uniform() * width as f64);
        let r = rng.uniform_in(0.1, 0.3) * height.min(width) as f64;
        let col = color(rng);
        for i in 0..height {
            for j in 0..width {
                if (i as f64 - ci).powi(2) + (j as f64 - cj).powi(2) <= r * r {
                    for (c, &v) in col.iter().enumerate() {
                        img[c * px + i * width + j] = v;
                    }
                }
            }
        }
    }
    Tensor::new(vec![CHANNELS, height, width], img.into_iter().map(clamp01).collect()).expect("sized")
}

/// `t·I + (1−t)·A`, clamped.
pub fn haze(clean: &Tensor<f64>, t: f64, airlight: f64) -> Tensor<f64> {
    clean.map(|v| clamp01(t * v + (1.0 - t) * airlight))
}

fn dims(img: &Tensor<f64>) -> (usize, usize) {
    let s = img.shape();
    (s[s.len() - 2], s[s.len() - 1])
}

/// Additive bright streaks sharing one fall direction.
fn rain(clean: &Tensor<f64>, rng: &mut RngStream) -> Tensor<f64> {
    let (h, w) = dims(clean);
    let px = h * w;
    let mut hit = vec![0.0f64; px];
    let angle = rng.uniform_in(0.2, 0.5);
    let (dy, dx) = (angle.cos(), -angle.sin());
    let count = (px as f64 / 40.0).round() as usize + rng.below(px / 100 + 1);
    for _ in 0..count {
        let (mut y, mut x) = (rng.uniform() * h as f64, rng.uniform() * w as f64);
        let len = rng.uniform_in(5.0, 12.0);
        let level = rng.uniform_in(0.25, 0.4);
        let mut walked = 0.0;
        while walked < len {
            let (i, j) = (y.floor() as isize, x.floor() as isize);
            if i >= 0 && j >= 0 && (i as usize) < h && (j as usize) < w {
                let k = i as usize * w + j as usize;
                hit[k] = hit[k].max(level);
            }
            y += 0.5 * dy;
            x += 0.5 * dx;
            walked += 0.5;
        }
    }
    let mut out = clean.clone();
    for (k, v) in out.data_mut().iter_mut().enumerate() {
        *v = clamp01(*v + hit[k % px]);
    }
    out
}

/// Sparse bright disks pulled toward near-white.
fn snow(clean: &Tensor<f64>, rng: &mut RngStream) -> Tensor<f64> {
    let (h, w) = dims(clean);
    let px = h * w;
    let mut cover = vec![0.0f64; px];
    let mut level = vec![0.0f64; px];
    let count = (px as f64 / 100.0).round() as usize + rng.below(px / 170 + 1);
    for _ in 0..count {
        let (ci, cj) = (rng.uniform() * h as f64, rng.uniform() * w as f64);
        let r = rng.uniform_in(0.8, 1.8);
        let b = rng.uniform_in(0.9, 1.0);
        let reach = r.ceil() as isize;
        for di in -reach..=reach {
            for dj in -reach..=reach {
                let (i, j) = (ci.floor() as isize + di, cj.floor() as isize + dj);
                if i < 0 || j < 0 || i as usize >= h || j as usize >= w {
                    continue;
                }
                let d2 = (i as f64 + 0.5 - ci).powi(2) + (j as f64 + 0.5 - cj).powi(2);
                if d2 <= r * r {
                    let k = i as usize * w + j as usize;
                    cover[k] = 0.9;
                    level[k] = level[k].max(b);
                }
            }
        }
    }
    let mut out = clean.clone();
    for (k, v) in out.data_mut().iter_mut().enumerate() {
        let a = cover[k % px];
        if a > 0.0 {
            *v = clamp01(*v + (level[k % px] - *v) * a);
        }
    }
    out
}

pub fn corrupt(clean: &Tensor<f64>, kind: WeatherKind, rng: &mut RngStream) -> Tensor<f64> {
    match kind {
        WeatherKind::Rain => rain(clean, rng),
        WeatherKind::Haze => haze(clean, rng.uniform_in(HAZE_T_RANGE.0, HAZE_T_RANGE.1), AIRLIGHT),
        WeatherKind::Snow => snow(clean, rng),
    }
}

/// One sample, determined by `(seed, kind, size)` alone.
pub fn make_sample(seed: u64, kind: WeatherKind, height: usize, width: usize) -> Sample {
    let clean = gen_clean(&mut RngStream::new(seed, streams::DATA_CLEAN), height, width);
    let corrupted = corrupt(&clean, kind, &mut RngStream::new(seed, streams::DATA_CORRUPT));
    Sample {
        clean: through_f32(clean),
        corrupted: through_f32(corrupted),
        kind,
        seed,
    }
}

/// Per-kind proportions in [`WeatherKind::ALL`] order.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Mix {
    pub rain: f64,
    pub haze: f64,
    pub snow: f64,
}

impl Default for Mix {
    fn default() -> Self {
        Self {
            rain: 1.0 / 3.0,
            haze: 1.0 / 3.0,
            snow: 1.0 / 3.0,
        }
    }
}

impl Mix {
    pub fn as_array(&self) -> [f64; 3] {
        [self.rain, self.haze, self.snow]
    }

    pub fn validate(&self) -> Result<()> {
        let p = self.as_array();
        if p.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
            return Err(Error::config(format!("mix proportions must be nonnegative, got {p:?}")));
        }
        let s: f64 = p.iter().sum();
        if (s - 1.0).abs() > 1e-6 {
            return Err(Error::config(format!("mix proportions must sum to 1, got {s}")));
        }
        Ok(())
    }

    /// Largest-remainder counts summing to `n`; ties go to the earlier kind.
    pub fn allocate(&self, n: usize) -> [usize; 3] {
        let p = self.as_array();
        let exact: Vec<f64> = p.iter().map(|v| v * n as f64).collect();
        let mut counts = [0usize; 3];
        for k in 0..3 {
            counts[k] = exact[k].floor() as usize;
        }
        let mut order = [0usize, 1, 2];
        order.sort_by(|&a, &b| (exact[b] - exact[b].floor()).total_cmp(&(exact[a] - exact[a].floor())).then(a.cmp(&b)));
        let mut left = n - counts.iter().sum::<usize>();
        for &k in order.iter().cycle() {
            if left == 0 {
                break;
            }
            counts[k] += 1;
            left -= 1;
        }
        counts
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DataConfig {
    pub n_train: usize,
    pub n_test: usize,
    pub height: usize,
    pub width: usize,
    pub mix: Mix,
    pub seed: u64,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            n_train: 300,
            n_test: 90,
            height: 32,
            width: 32,
            mix: Mix::default(),
            seed: 0,
        }
    }
}

impl DataConfig {
    pub fn validate(&self) -> Result<()> {
        self.mix.validate()?;
        if self.n_train == 0 || self.n_test == 0 {
            return Err(Error::Empty(format!(
                "split sizes must be positive (train {}, test {})",
                self.n_train, self.n_test
            )));
        }
        if self.height == 0 || self.width == 0 {
            return Err(Error::config("image size must be positive"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Split {
    pub height: usize,
    pub width: usize,
    pub samples: Vec<Sample>,
}

impl Split {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Indices of samples of each kind, in [`WeatherKind::ALL`] order.
    pub fn partition(&self) -> [Vec<usize>; 3] {
        let mut parts: [Vec<usize>; 3] = Default::default();
        for (i, s) in self.samples.iter().enumerate() {
            parts[s.kind.index()].push(i);
        }
        parts
    }

    pub fn counts(&self) -> [usize; 3] {
        self.partition().map(|p| p.len())
    }

    /// Stacks `(corrupted, clean)` of the chosen samples into `[B,3,H,W]`;
    /// `flip[b]` mirrors sample `b` horizontally.
    pub fn batch(&self, indices: &[usize], flip: &[bool]) -> (Tensor<f64>, Tensor<f64>) {
        let (h, w) = (self.height, self.width);
        let per = CHANNELS * h * w;
        let mut x = Vec::with_capacity(indices.len() * per);
        let mut y = Vec::with_capacity(indices.len() * per);
        for (b, &i) in indices.iter().enumerate() {
            let s = &self.samples[i];
            let mirror = flip.get(b).copied().unwrap_or(false);
            for (src, dst) in [(&s.corrupted, &mut x), (&s.clean, &mut y)] {
                let d = src.data();
                if mirror {
                    for row in d.chunks(w) {
                        dst.extend(row.iter().rev());
                    }
                } else {
                    dst.extend_from_slice(d);
                }
            }
        }
        let shape = vec![indices.len(), CHANNELS, h, w];
        (
            Tensor::new(shape.clone(), x).expect("sized"),
            Tensor::new(shape, y).expect("sized"),
        )
    }

    pub fn write<W: Write>(&self, mut w: W) -> Result<()> {
        w.write_all(DATASET_MAGIC)?;
        let count = u32::try_from(self.samples.len()).map_err(|_| Error::config("too many samples"))?;
        w.write_all(&count.to_le_bytes())?;
        let per = CHANNELS * self.height * self.width;
        let mut buf = Vec::with_capacity(9 + 8 * per);
        for s in &self.samples {
            if s.clean.numel() != per || s.corrupted.numel() != per {
                return Err(Error::shape("dataset sample", s.clean.shape(), &[CHANNELS, self.height, self.width]));
            }
            buf.clear();
            buf.push(s.kind.index() as u8);
            buf.extend_from_slice(&s.seed.to_le_bytes());
            for img in [&s.clean, &s.corrupted] {
                for &v in img.data() {
                    buf.extend_from_slice(&(v as f32).to_le_bytes());
                }
            }
            w.write_all(&buf)?;
        }
        Ok(())
    }

    pub fn read<R: Read>(mut r: R, height: usize, width: usize) -> Result<Self> {
        let mut bytes = Vec::new();
        r.read_to_end(&mut bytes)?;
        if bytes.len() < 8 || &bytes[..4] != DATASET_MAGIC {
            return Err(Error::Format("not a dataset split (bad magic)".into()));
        }
        let count = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes")) as usize;
        let per = CHANNELS * height * width;
        let record = 9 + 8 * per;
        let expected = count
            .checked_mul(record)
            .and_then(|n| n.checked_add(8))
            .ok_or_else(|| Error::Format("dataset count overflows".into()))?;
        if bytes.len() != expected {
            return Err(Error::Format(format!(
                "dataset split has {} bytes, header implies {expected} for {count} samples of {height}x{width}",
                bytes.len()
            )));
        }
        let shape = vec![CHANNELS, height, width];
        let image = |raw: &[u8]| -> Result<Tensor<f64>> {
            let data = raw
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes")) as f64)
                .collect::<Vec<_>>();
            if data.iter().any(|v| !(0.0..=1.0).contains(v)) {
                return Err(Error::Format("dataset pixel outside [0, 1]".into()));
            }
            Tensor::new(shape.clone(), data)
        };
        let mut samples = Vec::with_capacity(count);
        for rec in bytes[8..].chunks_exact(record) {
            let kind = WeatherKind::from_index(rec[0] as usize)?;
            let seed = u64::from_le_bytes(rec[1..9].try_into().expect("8 bytes"));
            samples.push(Sample {
                clean: image(&rec[9..9 + 4 * per])?,
                corrupted: image(&rec[9 + 4 * per..])?,
                kind,
                seed,
            });
        }
        Ok(Self { height, width, samples })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub config: DataConfig,
    pub train: Split,
    pub test: Split,
}

fn sample_seed(base: u64, split: u64, index: usize) -> u64 {
    splitmix(splitmix(base ^ splitmix(split)) ^ index as u64)
}

fn kinds_for(counts: [usize; 3]) -> Vec<WeatherKind> {
    WeatherKind::ALL
        .iter()
        .zip(counts)
        .flat_map(|(&k, n)| std::iter::repeat(k).take(n))
        .collect()
}

/// Train split mixes kinds in shuffled order; the test split is grouped by kind.
pub fn make_split(cfg: &DataConfig) -> Result<Dataset> {
    cfg.validate()?;
    let mut train_kinds = kinds_for(cfg.mix.allocate(cfg.n_train));
    RngStream::new(cfg.seed, streams::DATA_SPLIT).shuffle(&mut train_kinds);
    let test_kinds = kinds_for(cfg.mix.allocate(cfg.n_test));
    let build = |kinds: &[WeatherKind], split: u64| Split {
        height: cfg.height,
        width: cfg.width,
        samples: kinds
            .iter()
            .enumerate()
            .map(|(i, &k)| make_sample(sample_seed(cfg.seed, split, i), k, cfg.height, cfg.width))
            .collect(),
    };
    Ok(Dataset {
        config: cfg.clone(),
        train: build(&train_kinds, 1),
        test: build(&test_kinds, 2),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitInfo {
    pub file: String,
    pub count: usize,
    pub per_kind: PerKind<usize>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PerKind<V> {
    pub rain: V,
    pub haze: V,
    pub snow: V,
}

impl<V: Copy> PerKind<V> {
    pub fn from_array(a: [V; 3]) -> Self {
        Self {
            rain: a[0],
            haze: a[1],
            snow: a[2],
        }
    }

    pub fn get(&self, k: WeatherKind) -> V {
        match k {
            WeatherKind::Rain => self.rain,
            WeatherKind::Haze => self.haze,
            WeatherKind::Snow => self.snow,
        }
    }
}

impl<V> PerKind<V> {
    pub fn get_ref(&self, k: WeatherKind) -> &V {
        match k {
            WeatherKind::Rain => &self.rain,
            WeatherKind::Haze => &self.haze,
            WeatherKind::Snow => &self.snow,
        }
    }

    pub fn get_mut(&mut self, k: WeatherKind) -> &mut V {
        match k {
            WeatherKind::Rain => &mut self.rain,
            WeatherKind::Haze => &mut self.haze,
            WeatherKind::Snow => &mut self.snow,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format: String,
    pub config: DataConfig,
    pub channels: usize,
    pub train: SplitInfo,
    pub test: SplitInfo,
}

impl Dataset {
    pub fn manifest(&self) -> Manifest {
        let info = |file: &str, s: &Split| SplitInfo {
            file: file.into(),
            count: s.len(),
            per_kind: PerKind::from_array(s.counts()),
        };
        Manifest {
            format: "MFDS".into(),
            config: self.config.clone(),
            channels: CHANNELS,
            train: info(TRAIN_FILE, &self.train),
            test: info(TEST_FILE, &self.test),
        }
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        for (file, split) in [(TRAIN_FILE, &self.train), (TEST_FILE, &self.test)] {
            let mut buf = Vec::new();
            split.write(&mut buf)?;
            fs::write(dir.join(file), buf)?;
        }
        let mut json = serde_json::to_string_pretty(&self.manifest())?;
        json.push('\n');
        fs::write(dir.join(MANIFEST_FILE), json)?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let text = fs::read_to_string(dir.join(MANIFEST_FILE))
            .map_err(|e| Error::Format(format!("cannot read {}: {e}", dir.join(MANIFEST_FILE).display())))?;
        let m: Manifest = serde_json::from_str(&text)?;
        if m.channels != CHANNELS {
            return Err(Error::Format(format!("manifest has {} channels, expected {CHANNELS}", m.channels)));
        }
        let (h, w) = (m.config.height, m.config.width);
        let read = |info: &SplitInfo| -> Result<Split> {
            let split = Split::read(fs::File::open(dir.join(&info.file))?, h, w)?;
            if split.len() != info.count {
                return Err(Error::Format(format!(
                    "{} holds {} samples, manifest says {}",
                    info.file,
                    split.len(),
                    info.count
                )));
            }
            Ok(split)
        };
        Ok(Self {
            train: read(&m.train)?,
            test: read(&m.test)?,
            config: m.config,
        })
    }
}
